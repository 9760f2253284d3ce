//! Acceptance suite: one PASS/FAIL line per criterion.

#[allow(dead_code)]
mod common;

use std::time::Instant;

use pointloc::inference::{localize, InferenceConfig, Proposal};
use pointloc::losses::LossConfig;
use pointloc::metrics::{average_precision, contrast_iou_analysis, default_thresholds, evaluate, GroundTruthInstance, IntervalSampling};
use pointloc::mining::{mine_pseudo_background, MiningMode};
use pointloc::model::{forward, HeadParams};
use pointloc::sequence::{
    completeness_score, enumerate_candidates, exhaustive_search, greedy_search, LabelSequence, ScoringVariant, SearchMode,
    SearchParams, DEFAULT_EXHAUSTIVE_CAP,
};
use pointloc::synthio::{generate_dataset, SyntheticDataset, SyntheticSpec};
use pointloc::trainer::{run_training, TrainConfig};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{end_to_end_gradient_error, loss_gradient_error, oracle_sequence_score, search_case, to_sequence, ALL_LOSSES};

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(o: &Outcome) {
    println!("[{}] {:>2}. {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.name, o.detail);
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut worst: f64 = 0.0;
    let mut max_cands = 0;
    for _ in 0..200 {
        let c = search_case(&mut rng, 12);
        for mode in [SearchMode::Extended, SearchMode::Strict] {
            let n = enumerate_candidates(c.row.len(), 0, &c.acts, &c.bkgs, mode, DEFAULT_EXHAUSTIVE_CAP).unwrap().len();
            max_cands = max_cands.max(n);
            let sp = SearchParams {
                alpha: n.max(1),
                mode,
                ..SearchParams::default()
            };
            let g = greedy_search(&c.row, 0, &c.acts, &c.bkgs, &sp).unwrap();
            let e = exhaustive_search(&c.row, 0, &c.acts, &c.bkgs, &sp, DEFAULT_EXHAUSTIVE_CAP).unwrap();
            worst = worst.max((g.score - e.score).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        id: 1,
        name: "greedy/oracle equivalence",
        pass: worst < 1e-12 && secs < 10.0,
        detail: format!("200 cases x 2 modes, alpha = candidate count (max {max_cands}), max |diff| = {worst:.1e} (< 1e-12), {secs:.1}s (< 10s)"),
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let alphas = [1usize, 5, 10, 25, 50, 100];
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    let n_cases = 500;
    let mut sums = [0.0; 6];
    let mut dominance_violations = 0;
    let mut oracle_violations = 0;
    for _ in 0..n_cases {
        let c = search_case(&mut rng, 12);
        let sp = SearchParams::default();
        let oracle = exhaustive_search(&c.row, 0, &c.acts, &c.bkgs, &sp, DEFAULT_EXHAUSTIVE_CAP).unwrap().score;
        let scores: Vec<f64> = alphas
            .iter()
            .map(|&alpha| greedy_search(&c.row, 0, &c.acts, &c.bkgs, &SearchParams { alpha, ..sp }).unwrap().score)
            .collect();
        if scores[3] < scores[0] {
            dominance_violations += 1;
        }
        oracle_violations += scores.iter().filter(|&&s| s > oracle + 1e-12).count();
        for (k, s) in scores.iter().enumerate() {
            sums[k] += s;
        }
    }
    let means: Vec<f64> = sums.iter().map(|s| s / n_cases as f64).collect();
    let monotone = means.windows(2).all(|w| w[1] >= w[0]);
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        id: 2,
        name: "budget monotonicity and dominance",
        pass: dominance_violations == 0 && oracle_violations == 0 && monotone && secs < 30.0,
        detail: format!(
            "{n_cases} cases: alpha=25 < alpha=1 on {dominance_violations}, greedy > oracle on {oracle_violations}; mean score by alpha {:?} = [{}] nondecreasing: {monotone}; {secs:.1}s (< 30s)",
            alphas,
            means.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join(", ")
        ),
    }
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut worst: f64 = 0.0;
    for kind in ALL_LOSSES {
        let e = (0..3).map(|s| loss_gradient_error(kind, s)).fold(0.0, f64::max);
        worst = worst.max(e);
        parts.push(format!("{kind:?} {e:.1e}"));
    }
    let e2e = (0..2).map(end_to_end_gradient_error).fold(0.0, f64::max);
    worst = worst.max(e2e);
    parts.push(format!("total objective via head parameters {e2e:.1e}"));
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        id: 3,
        name: "gradient correctness",
        pass: worst < 1e-4 && secs < 60.0,
        detail: format!("max relative error {} (< 1e-4), {secs:.1}s (< 60s)", parts.join(", ")),
    }
}

fn criterion_4() -> Outcome {
    let perfect_row = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
    let seq = to_sequence(0, &[(1, 4, false), (5, 8, true), (9, 12, false)]);
    let r_perfect = completeness_score(&perfect_row, &seq, 0.25).unwrap();
    let r_uniform = completeness_score(&[0.5; 12], &seq, 0.25).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4004);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let t_len = rng.random_range(1..=40);
        let row: Vec<f64> = (0..t_len).map(|_| rng.random::<f64>()).collect();
        let n_cuts = rng.random_range(0..t_len.min(6));
        let mut starts: Vec<usize> = sample(&mut rng, t_len - 1, n_cuts).into_iter().map(|i| i + 2).collect();
        starts.sort_unstable();
        let seq = LabelSequence::from_boundaries(0, t_len, &starts, rng.random_bool(0.5));
        let spans: Vec<(usize, usize, bool)> = seq.spans.iter().map(|s| (s.start, s.end, s.is_action)).collect();
        let got = completeness_score(&row, &seq, 0.25).unwrap();
        worst = worst.max((got - oracle_sequence_score(&row, &spans)).abs());
    }
    Outcome {
        id: 4,
        name: "sequence score exactness",
        pass: r_perfect == 1.0 && r_uniform == 0.0 && worst <= 1e-12,
        detail: format!("perfect separation R = {r_perfect:?} (== 1.0), uniform 0.5 R = {r_uniform:?} (== 0.0), 1000 random cases max |diff| vs direct formula {worst:.1e} (<= 1e-12)"),
    }
}

fn lambdas(l: [f64; 4], variant: ScoringVariant, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        variant,
        eval_every: 100,
        loss: LossConfig {
            lambdas: l,
            ..LossConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn test_map_at(params: &HeadParams, ds: &SyntheticDataset, th: f64) -> f64 {
    let mut props: Vec<Proposal> = Vec::new();
    for v in &ds.test {
        let out = forward(&v.features, params).unwrap();
        props.extend(localize(&v.video_id, &out.phat, &InferenceConfig::default()).unwrap());
    }
    let gt: Vec<GroundTruthInstance> = ds.test.iter().flat_map(|v| v.gt.iter().cloned()).collect();
    let ids: Vec<String> = ds.test.iter().map(|v| v.video_id.clone()).collect();
    evaluate(&props, &gt, &ids, 3, &default_thresholds()).unwrap().map_at(th).unwrap()
}

struct SeedRuns {
    baseline_map: f64,
    full_map: f64,
    acc: [f64; 3],
    r_inner: Option<f64>,
    r_contrast: Option<f64>,
    r_uncond: (Option<f64>, Option<f64>),
    secs_5: f64,
}

fn seed_runs(seed: u64) -> SeedRuns {
    let ds = generate_dataset(&SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap();
    assert_eq!((ds.train.len(), ds.test.len()), (60, 20));
    let t0 = Instant::now();
    let (base, _) = run_training(&ds.train, 3, &lambdas([1.0, 1.0, 0.0, 0.0], ScoringVariant::ContrastBoth, seed), None).unwrap();
    let (full, full_rep) = run_training(&ds.train, 3, &lambdas([1.0; 4], ScoringVariant::ContrastBoth, seed), None).unwrap();
    let secs_5 = t0.elapsed().as_secs_f64();
    let mut acc = [full_rep.final_sequence_accuracy().unwrap(), 0.0, 0.0];
    for (k, v) in [ScoringVariant::ContrastAction, ScoringVariant::InnerOnly].into_iter().enumerate() {
        let (_, rep) = run_training(&ds.train, 3, &lambdas([1.0; 4], v, seed), None).unwrap();
        acc[k + 1] = rep.final_sequence_accuracy().unwrap();
    }
    let a = contrast_iou_analysis(&base, &ds.train, 2000, seed, 0.25, IntervalSampling::Overlapping).unwrap();
    let u = contrast_iou_analysis(&base, &ds.train, 2000, seed, 0.25, IntervalSampling::Unconditional).unwrap();
    SeedRuns {
        baseline_map: test_map_at(&base, &ds, 0.7),
        full_map: test_map_at(&full, &ds, 0.7),
        acc,
        r_inner: a.r_inner,
        r_contrast: a.r_contrast,
        r_uncond: (u.r_inner, u.r_contrast),
        secs_5,
    }
}

fn criteria_5_to_7() -> Vec<Outcome> {
    let runs: Vec<SeedRuns> = (0..3).map(seed_runs).collect();
    let n = runs.len() as f64;
    let base = runs.iter().map(|r| r.baseline_map).sum::<f64>() / n;
    let full = runs.iter().map(|r| r.full_map).sum::<f64>() / n;
    let gain = 100.0 * (full - base);
    let secs: f64 = runs.iter().map(|r| r.secs_5).sum();
    let per_seed = runs
        .iter()
        .map(|r| format!("{:.1}->{:.1}", 100.0 * r.baseline_map, 100.0 * r.full_map))
        .collect::<Vec<_>>()
        .join(", ");
    let c5 = Outcome {
        id: 5,
        name: "completeness losses help",
        pass: gain >= 5.0 && secs < 600.0,
        detail: format!(
            "mAP@0.7 baseline {:.1} -> full {:.1}, gain {gain:.1} points (>= 5) over 3 seeds [{per_seed}]; training {secs:.0}s (< 600s)",
            100.0 * base,
            100.0 * full
        ),
    };
    let mean_acc: Vec<f64> = (0..3).map(|k| runs.iter().map(|r| r.acc[k]).sum::<f64>() / n).collect();
    let c6 = Outcome {
        id: 6,
        name: "scoring-variant ordering",
        pass: mean_acc[0] >= mean_acc[1] && mean_acc[1] >= mean_acc[2] && mean_acc[0] > mean_acc[2],
        detail: format!(
            "mean frame accuracy contrast-both {:.4} >= contrast-action {:.4} >= inner-only {:.4}; per seed {}",
            mean_acc[0],
            mean_acc[1],
            mean_acc[2],
            runs.iter()
                .map(|r| format!("[{:.3} {:.3} {:.3}]", r.acc[0], r.acc[1], r.acc[2]))
                .collect::<Vec<_>>()
                .join(" ")
        ),
    };
    let ok7 = runs.iter().all(|r| matches!((r.r_contrast, r.r_inner), (Some(c), Some(i)) if c > i));
    let fmt = |x: Option<f64>| x.map_or_else(|| "undefined".into(), |v| format!("{v:.3}"));
    let c7 = Outcome {
        id: 7,
        name: "correlation direction",
        pass: ok7,
        detail: format!(
            "baseline, 2000 intervals overlapping ground truth: r(contrast) vs r(inner) per seed {} (contrast must exceed inner on every seed); unconditional intervals for reference {}",
            runs.iter()
                .map(|r| format!("{} vs {}", fmt(r.r_contrast), fmt(r.r_inner)))
                .collect::<Vec<_>>()
                .join(", "),
            runs.iter()
                .map(|r| format!("{} vs {}", fmt(r.r_uncond.1), fmt(r.r_uncond.0)))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    vec![c5, c6, c7]
}

fn criterion_8() -> Outcome {
    #[derive(serde::Deserialize)]
    struct Expected {
        ap: Vec<f64>,
        map: f64,
    }
    #[derive(serde::Deserialize)]
    struct Golden {
        videos: Vec<String>,
        n_classes: usize,
        ground_truth: Vec<GroundTruthInstance>,
        proposals: Vec<Proposal>,
        expected: Vec<Expected>,
    }
    let g: Golden = serde_json::from_str(include_str!("fixtures/eval_golden.json")).unwrap();
    let r = evaluate(&g.proposals, &g.ground_truth, &g.videos, g.n_classes, &default_thresholds()).unwrap();
    let mut worst: f64 = 0.0;
    for (k, e) in g.expected.iter().enumerate() {
        worst = worst.max((r.map[k] - e.map).abs());
        for c in 0..g.n_classes {
            worst = worst.max((r.ap[k][c].unwrap() - e.ap[c]).abs());
        }
    }
    let gt = |s, e| GroundTruthInstance {
        video_id: "a".into(),
        class_id: 0,
        start: s,
        end: e,
    };
    let pr = |s, e, c| Proposal {
        video_id: "a".into(),
        class_id: 0,
        start: s,
        end: e,
        confidence: c,
    };
    let hand = average_precision(&[pr(1, 10, 0.9), pr(50, 60, 0.8), pr(21, 30, 0.7)], &[gt(1, 10), gt(21, 30)], 0.5).unwrap();
    let hand_err = (hand - 0.8333333333333334).abs();
    let as_props: Vec<Proposal> = g
        .ground_truth
        .iter()
        .map(|x| Proposal {
            video_id: x.video_id.clone(),
            class_id: x.class_id,
            start: x.start,
            end: x.end,
            confidence: 1.0,
        })
        .collect();
    let perfect = evaluate(&as_props, &g.ground_truth, &g.videos, g.n_classes, &default_thresholds()).unwrap();
    let all_one = perfect.map.iter().all(|&m| m == 1.0);
    Outcome {
        id: 8,
        name: "evaluator fidelity",
        pass: worst <= 1e-9 && hand_err <= 1e-9 && all_one,
        detail: format!("golden fixture max |diff| {worst:.1e}, [TP,FP,TP] AP = {hand:.4} (0.8333), ground truth as proposals mAP 1.0 at all thresholds: {all_one}"),
    }
}

fn criterion_9() -> Outcome {
    use common::cli::{files_under, pipeline, timeless};
    let dir = tempfile::tempdir().unwrap();
    let collect = |data: &std::path::Path, run: &std::path::Path| {
        let mut files: Vec<(String, Vec<u8>)> = Vec::new();
        for f in files_under(&data.join("features")) {
            files.push((f.display().to_string(), std::fs::read(&f).unwrap()));
        }
        for f in [run.join("model.ptlh"), run.join("proposals.tsv"), data.join("train.json"), data.join("test.json")] {
            files.push((f.display().to_string(), std::fs::read(&f).unwrap()));
        }
        let reports: Vec<serde_json::Value> = [data.join("gen_report.json"), run.join("train_report.json"), run.join("infer_report.json"), run.join("eval.json")]
            .iter()
            .map(|p| timeless(p))
            .collect();
        (files, reports)
    };
    let (data, run) = pipeline(dir.path(), "11");
    let first = collect(&data, &run);
    std::fs::remove_dir_all(&data).unwrap();
    std::fs::remove_dir_all(&run).unwrap();
    pipeline(dir.path(), "11");
    let second = collect(&data, &run);
    let same_files = first.0 == second.0;
    let same_reports = first.1 == second.1;
    Outcome {
        id: 9,
        name: "determinism",
        pass: same_files && same_reports,
        detail: format!(
            "gen-data/train/infer/eval rerun with seed 11: {} feature/checkpoint/proposal/manifest files byte-identical: {same_files}; reports identical apart from wall-clock fields: {same_reports}",
            first.0.len()
        ),
    }
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let (mut empty_sections, mut not_superset, mut wrong_count) = (0, 0, 0);
    for _ in 0..500 {
        let t_len = rng.random_range(2..=60);
        let q: Vec<f64> = (0..t_len).map(|_| rng.random::<f64>()).collect();
        let m = rng.random_range(1..=t_len.min(6));
        let mut acts: Vec<usize> = sample(&mut rng, t_len, m).into_iter().map(|i| i + 1).collect();
        acts.sort_unstable();
        let gamma = rng.random_range(0.5..0.99);
        let sect = mine_pseudo_background(&q, &acts, gamma, MiningMode::Sectional, 5).unwrap();
        let fill = mine_pseudo_background(&q, &acts, gamma, MiningMode::SectionalFill, 5).unwrap();
        for w in acts.windows(2) {
            if w[1] > w[0] + 1 {
                for mined in [&sect, &fill] {
                    if !mined.iter().any(|&t| t > w[0] && t < w[1]) {
                        empty_sections += 1;
                    }
                }
            }
        }
        if !sect.iter().all(|t| fill.contains(t)) {
            not_superset += 1;
        }
        let eta = rng.random_range(1..=6);
        let global = mine_pseudo_background(&q, &acts, gamma, MiningMode::Global, eta).unwrap();
        if global.len() != (eta * m).min(t_len - m) {
            wrong_count += 1;
        }
    }
    Outcome {
        id: 10,
        name: "mining properties",
        pass: empty_sections == 0 && not_superset == 0 && wrong_count == 0,
        detail: format!(
            "500 cases: sections without a background point {empty_sections}, sectional_fill not a superset {not_superset}, global count != min(eta*M, T-M) {wrong_count}"
        ),
    }
}

fn main() {
    let mut outcomes = Vec::new();
    for f in [criterion_1, criterion_2, criterion_3, criterion_4] {
        let o = f();
        report(&o);
        outcomes.push(o);
    }
    for o in criteria_5_to_7() {
        report(&o);
        outcomes.push(o);
    }
    for f in [criterion_8, criterion_9, criterion_10] {
        let o = f();
        report(&o);
        outcomes.push(o);
    }
    outcomes.sort_by_key(|o| o.id);
    let failed: Vec<String> = outcomes.iter().filter(|o| !o.pass).map(|o| format!("{} ({})", o.id, o.name)).collect();
    println!("acceptance: {}/{} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
