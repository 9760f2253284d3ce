#![allow(dead_code)]

pub mod cli;

use pointloc::losses::{
    completeness_on_tape, feature_contrastive_loss, point_action_loss, point_background_loss, score_contrastive_loss,
    soi_pool, soi_sample, video_loss, InstanceFeature, LossConfig,
};
use pointloc::model::video_scores_on_tape;
use pointloc::ndiff::{finite_diff_check, FdConfig, Matrix, ParamId, Tape, Var};
use pointloc::sequence::{InstanceSpan, LabelSequence, ScoringVariant};
use pointloc::synthio::{generate_dataset, SyntheticSpec, VideoRecord};
use pointloc::trainer::{video_objective, TrainConfig};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random search instance: score row plus disjoint action/background points.
#[derive(Clone, Debug)]
pub struct SearchCase {
    pub row: Vec<f64>,
    pub acts: Vec<usize>,
    pub bkgs: Vec<usize>,
}

/// `T` in `[3, max_t]`, 1-2 action points, at least one background point.
pub fn search_case(rng: &mut ChaCha8Rng, max_t: usize) -> SearchCase {
    let t_len = rng.random_range(3..=max_t);
    let n_act = rng.random_range(1..=2);
    let n_bkg = rng.random_range(1..=(t_len - n_act).min(3));
    let picks = sample(rng, t_len, n_act + n_bkg).into_vec();
    let mut acts: Vec<usize> = picks[..n_act].iter().map(|i| i + 1).collect();
    let mut bkgs: Vec<usize> = picks[n_act..].iter().map(|i| i + 1).collect();
    acts.sort_unstable();
    bkgs.sort_unstable();
    SearchCase {
        row: (0..t_len).map(|_| rng.random::<f64>()).collect(),
        acts,
        bkgs,
    }
}

/// Direct evaluation of the sequence score from its definition: mean over
/// spans of inner-minus-outer contrast, with the outer window of a span of
/// length l extending ceil(l/4) left and floor(l/4) right, clipped to the
/// video, and contributing 0 when empty.
pub fn oracle_sequence_score(row: &[f64], spans: &[(usize, usize, bool)]) -> f64 {
    let t_len = row.len() as i64;
    let mut total = 0.0;
    for &(s, e, act) in spans {
        let u = |t: usize| if act { row[t - 1] } else { 1.0 - row[t - 1] };
        let l = (e - s + 1) as i64;
        let left = (l + 3) / 4;
        let right = l / 4;
        let inner: f64 = (s..=e).map(u).sum::<f64>() / l as f64;
        let mut outer_vals = Vec::new();
        for t in (s as i64 - left)..(s as i64) {
            if t >= 1 {
                outer_vals.push(u(t as usize));
            }
        }
        for t in (e as i64 + 1)..=(e as i64 + right) {
            if t <= t_len {
                outer_vals.push(u(t as usize));
            }
        }
        let outer = if outer_vals.is_empty() {
            0.0
        } else {
            outer_vals.iter().sum::<f64>() / outer_vals.len() as f64
        };
        total += inner - outer;
    }
    total / spans.len() as f64
}

pub fn to_sequence(class_id: usize, spans: &[(usize, usize, bool)]) -> LabelSequence {
    LabelSequence {
        class_id,
        spans: spans.iter().map(|&(s, e, a)| InstanceSpan::new(s, e, a)).collect(),
    }
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Which loss to differentiate in [`loss_gradient_error`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Video,
    PointAction,
    PointBackground,
    Score,
    Feature,
}

pub const ALL_LOSSES: [LossKind; 5] = [
    LossKind::Video,
    LossKind::PointAction,
    LossKind::PointBackground,
    LossKind::Score,
    LossKind::Feature,
];

/// Max relative finite-difference error of one loss with respect to its
/// inputs (fused scores, background scores, embedded features). Sequences
/// and SOI samples are fixed before differentiation.
pub fn loss_gradient_error(kind: LossKind, seed: u64) -> f64 {
    let (c, d, t_len) = (3, 5, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phat = uniform_matrix(&mut rng, c, t_len, 0.05, 0.95);
    let q = uniform_matrix(&mut rng, 1, t_len, 0.05, 0.95);
    let f = uniform_matrix(&mut rng, d, t_len, -1.0, 1.0);
    let seqs = [
        to_sequence(0, &[(1, 2, false), (3, 5, true), (6, 7, false), (8, 10, true), (11, 12, false)]),
        to_sequence(1, &[(1, 6, false), (7, 11, true), (12, 12, false)]),
    ];
    let samples: Vec<Vec<[usize; 3]>> = seqs
        .iter()
        .map(|s| s.spans.iter().map(|sp| soi_sample(sp, &mut rng)).collect())
        .collect();
    let lc = LossConfig::default();
    let variant = ScoringVariant::ContrastBoth;
    let loss_fn = |ps: &[Matrix]| {
        let mut tape = Tape::new();
        let ph = tape.param(ParamId(0), ps[0].clone())?;
        let qv = tape.param(ParamId(1), ps[1].clone())?;
        let fv = tape.param(ParamId(2), ps[2].clone())?;
        let loss: Var = match kind {
            LossKind::Video => {
                let vs = video_scores_on_tape(&mut tape, ph)?;
                video_loss(&mut tape, vs, &[1.0, 1.0, 0.0])?
            }
            LossKind::PointAction => point_action_loss(&mut tape, ph, qv, &[(4, 0), (9, 0), (8, 1)], lc.beta)?,
            LossKind::PointBackground => point_background_loss(&mut tape, ph, qv, &[1, 6, 12], lc.beta)?,
            LossKind::Score => {
                let mut rs = Vec::new();
                for s in &seqs {
                    rs.push(completeness_on_tape(&mut tape, ph, s, lc.delta, variant)?);
                }
                score_contrastive_loss(&mut tape, &rs, lc.beta)?
            }
            LossKind::Feature => {
                let mut groups = Vec::new();
                for (s, smp) in seqs.iter().zip(&samples) {
                    let mut g = Vec::new();
                    for (sp, idx) in s.spans.iter().zip(smp) {
                        g.push(InstanceFeature {
                            feature: soi_pool(&mut tape, fv, idx)?,
                            is_action: sp.is_action,
                        });
                    }
                    groups.push(g);
                }
                feature_contrastive_loss(&mut tape, &groups, lc.tau)?
            }
        };
        let value = tape.scalar(loss);
        let g = tape.backward(loss)?;
        let grads = ps
            .iter()
            .enumerate()
            .map(|(k, p)| g.param(ParamId(k)).cloned().unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols())))
            .collect();
        Ok((value, grads))
    };
    let cfg = FdConfig {
        h: 1e-5,
        samples: 100,
        seed,
    };
    finite_diff_check(loss_fn, &[phat, q, f], &cfg).unwrap()
}

/// Max relative finite-difference error of the full weighted objective of
/// one synthetic video with respect to the head parameters, with searched
/// sequences frozen.
pub fn end_to_end_gradient_error(seed: u64) -> f64 {
    let spec = SyntheticSpec {
        n_videos: 1,
        n_test_videos: 0,
        feature_dim: 6,
        t_min: 30,
        t_max: 36,
        instances_min: 3,
        instances_max: 3,
        length_max: 8,
        seed,
        ..SyntheticSpec::default()
    };
    let video = generate_dataset(&spec).unwrap().train.remove(0);
    let cfg = TrainConfig::default();
    let params = pointloc::trainer::init_params(6, 3, seed).unwrap();
    let base = video_objective(&video, &params, 3, &cfg, 1, None).unwrap();
    let frozen = base.sequences.clone();
    let flat: Vec<Matrix> = params.tensors().iter().map(|t| (*t).clone()).collect();
    let loss_fn = |ps: &[Matrix]| {
        let mut p = params.clone();
        for (dst, src) in p.tensors_mut().into_iter().zip(ps) {
            *dst = src.clone();
        }
        let o = video_objective(&video, &p, 3, &cfg, 1, Some(&frozen))?;
        Ok((o.total, o.grads))
    };
    let cfg = FdConfig {
        h: 1e-6,
        samples: 100,
        seed,
    };
    finite_diff_check(loss_fn, &flat, &cfg).unwrap()
}

/// Small dataset shared by pipeline tests.
pub fn small_dataset(seed: u64) -> (Vec<VideoRecord>, Vec<VideoRecord>) {
    let spec = SyntheticSpec {
        n_videos: 6,
        n_test_videos: 3,
        feature_dim: 8,
        t_min: 40,
        t_max: 50,
        instances_max: 2,
        length_max: 10,
        seed,
        ..SyntheticSpec::default()
    };
    let ds = generate_dataset(&spec).unwrap();
    (ds.train, ds.test)
}
