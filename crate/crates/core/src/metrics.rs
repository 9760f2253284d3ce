//! Temporal IoU, average precision, mAP tables, and correlation analysis.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{rank_order, Proposal};
use crate::model::{forward, HeadParams};
use crate::sequence::{inner_score, outer_inner_contrast, InstanceSpan};
use crate::synthio::VideoRecord;

/// Ground-truth action interval (1-based inclusive segments).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthInstance {
    pub video_id: String,
    pub class_id: usize,
    pub start: usize,
    pub end: usize,
}

/// Default tIoU thresholds 0.1:0.1:0.7.
pub fn default_thresholds() -> Vec<f64> {
    (1..=7).map(|k| k as f64 / 10.0).collect()
}

/// Averaging ranges reported alongside per-threshold mAP.
pub const AVERAGE_RANGES: [(f64, f64); 3] = [(0.1, 0.5), (0.3, 0.7), (0.1, 0.7)];

/// Intersection over union of two inclusive segment spans.
pub fn tiou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    let inter = if hi >= lo { hi - lo + 1 } else { 0 };
    let union = (a.1 - a.0 + 1) + (b.1 - b.0 + 1) - inter;
    inter as f64 / union as f64
}

/// Average precision for one class.
///
/// Proposals are ranked by [`rank_order`]; each one matches the unmatched
/// ground truth (same video) with the highest tIoU if that tIoU reaches
/// `iou_threshold`. AP sums precision at each true positive times the recall
/// increment `1 / n_gt`. Returns `None` when there is no ground truth.
pub fn average_precision(proposals: &[Proposal], gts: &[GroundTruthInstance], iou_threshold: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut ranked = proposals.to_vec();
    ranked.sort_by(rank_order);
    let mut matched = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (rank, p) in ranked.iter().enumerate() {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(i, g)| !matched[*i] && g.video_id == p.video_id)
            .map(|(i, g)| (i, tiou((p.start, p.end), (g.start, g.end))))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((i, iou)) = best {
            if iou >= iou_threshold && iou > 0.0 {
                matched[i] = true;
                tp += 1;
                ap += tp as f64 / (rank + 1) as f64;
            }
        }
    }
    Some(ap / gts.len() as f64)
}

/// mAP table over tIoU thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub interpolation: String,
    pub thresholds: Vec<f64>,
    /// `ap[k][c]`: AP of class `c` at threshold `k`; `None` if the class has
    /// no ground truth.
    pub ap: Vec<Vec<Option<f64>>>,
    pub map: Vec<f64>,
    /// `("0.1:0.5", value)` style averages over threshold ranges.
    pub averages: Vec<(String, f64)>,
    pub notes: Vec<String>,
}

impl EvalReport {
    /// mAP at the threshold closest to `th`.
    pub fn map_at(&self, th: f64) -> Option<f64> {
        self.thresholds.iter().position(|t| (t - th).abs() < 1e-9).map(|k| self.map[k])
    }

    pub fn average(&self, label: &str) -> Option<f64> {
        self.averages.iter().find(|(l, _)| l == label).map(|(_, v)| *v)
    }

    /// CSV: `threshold,map,ap_class_0,...`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let n_classes = self.ap.first().map_or(0, Vec::len);
        let mut header = vec!["threshold".to_string(), "map".to_string()];
        header.extend((0..n_classes).map(|c| format!("ap_class_{c}")));
        w.write_record(&header)?;
        for (k, th) in self.thresholds.iter().enumerate() {
            let mut rec = vec![format!("{th:.2}"), format!("{}", self.map[k])];
            rec.extend(self.ap[k].iter().map(|a| a.map_or_else(|| "NA".to_string(), |v| v.to_string())));
            w.write_record(&rec)?;
        }
        for (label, v) in &self.averages {
            w.write_record([format!("avg {label}"), v.to_string()].iter().chain(std::iter::repeat_n(&String::new(), n_classes)))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
    }
}

/// Per-class AP at every threshold, mAP over classes with ground truth,
/// and range averages.
pub fn evaluate(
    proposals: &[Proposal],
    ground_truth: &[GroundTruthInstance],
    video_ids: &[String],
    n_classes: usize,
    thresholds: &[f64],
) -> Result<EvalReport> {
    let known: BTreeSet<&str> = video_ids.iter().map(String::as_str).collect();
    for p in proposals {
        if !known.contains(p.video_id.as_str()) {
            return Err(Error::UnknownVideo(p.video_id.clone()));
        }
    }
    for g in ground_truth {
        if !known.contains(g.video_id.as_str()) {
            return Err(Error::UnknownVideo(g.video_id.clone()));
        }
    }
    let mut by_class_p: BTreeMap<usize, Vec<Proposal>> = BTreeMap::new();
    for p in proposals {
        by_class_p.entry(p.class_id).or_default().push(p.clone());
    }
    let mut by_class_g: BTreeMap<usize, Vec<GroundTruthInstance>> = BTreeMap::new();
    for g in ground_truth {
        by_class_g.entry(g.class_id).or_default().push(g.clone());
    }
    let mut notes = Vec::new();
    for c in 0..n_classes {
        if !by_class_g.contains_key(&c) {
            notes.push(format!("class {c} has no ground truth; excluded from mAP"));
        }
    }
    let empty_p = Vec::new();
    let empty_g = Vec::new();
    let mut ap = Vec::with_capacity(thresholds.len());
    let mut map = Vec::with_capacity(thresholds.len());
    for &th in thresholds {
        let row: Vec<Option<f64>> = (0..n_classes)
            .map(|c| {
                average_precision(
                    by_class_p.get(&c).unwrap_or(&empty_p),
                    by_class_g.get(&c).unwrap_or(&empty_g),
                    th,
                )
            })
            .collect();
        let valid: Vec<f64> = row.iter().flatten().copied().collect();
        map.push(if valid.is_empty() { 0.0 } else { valid.iter().sum::<f64>() / valid.len() as f64 });
        ap.push(row);
    }
    let mut averages = Vec::new();
    for (lo, hi) in AVERAGE_RANGES {
        let vals: Vec<f64> = thresholds
            .iter()
            .zip(&map)
            .filter(|(t, _)| **t >= lo - 1e-9 && **t <= hi + 1e-9)
            .map(|(_, m)| *m)
            .collect();
        if !vals.is_empty() {
            averages.push((format!("{lo:.1}:{hi:.1}"), vals.iter().sum::<f64>() / vals.len() as f64));
        }
    }
    Ok(EvalReport {
        interpolation: "all-point (precision at each true positive, no envelope)".into(),
        thresholds: thresholds.to_vec(),
        ap,
        map,
        averages,
        notes,
    })
}

/// Sample Pearson correlation.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::dims("pearson_r", format!("{} values", xs.len()), format!("{} values", ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::Degenerate("need at least two samples".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 1e-24 || syy <= 1e-24 {
        return Err(Error::Degenerate("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// One sampled interval of the contrast/IoU analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub video_id: String,
    pub class_id: usize,
    pub start: usize,
    pub end: usize,
    pub inner: f64,
    pub contrast: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationAnalysis {
    pub rows: Vec<ScatterRow>,
    /// `None` when the inner scores or IoUs have zero variance.
    pub r_inner: Option<f64>,
    pub r_contrast: Option<f64>,
}

/// How analysis intervals are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum IntervalSampling {
    /// Random intervals, kept only if they overlap a ground-truth instance
    /// of the evaluated class.
    #[default]
    Overlapping,
    /// Random intervals anywhere in the video.
    Unconditional,
}

const MAX_REJECTIONS: usize = 10_000;

/// Inner score and outer-inner contrast of intervals against their IoU
/// with ground truth, from fused score rows.
///
/// Each sample picks a video and one of its instances (whose class is
/// evaluated), then a start uniform over the video and a length uniform in
/// `1..=2 * longest instance`.
pub fn contrast_iou_from_scores(
    videos: &[(String, Vec<Vec<f64>>, Vec<GroundTruthInstance>)],
    n_samples: usize,
    seed: u64,
    delta: f64,
    sampling: IntervalSampling,
) -> Result<CorrelationAnalysis> {
    let pool: Vec<usize> = (0..videos.len()).filter(|&i| !videos[i].2.is_empty()).collect();
    if pool.is_empty() {
        return Err(Error::Degenerate("no video has ground truth".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let (vid, scores, gts) = &videos[pool[rng.random_range(0..pool.len())]];
        let g = &gts[rng.random_range(0..gts.len())];
        let class_id = g.class_id;
        let row = &scores[class_id];
        let t_len = row.len();
        let max_len = gts.iter().map(|g| g.end - g.start + 1).max().unwrap_or(1);
        let mut attempts = 0;
        let (start, end, iou) = loop {
            let start = rng.random_range(1..=t_len);
            let len = rng.random_range(1..=(2 * max_len).min(t_len + 1 - start));
            let end = start + len - 1;
            let iou = gts
                .iter()
                .filter(|g| g.class_id == class_id)
                .map(|g| tiou((start, end), (g.start, g.end)))
                .fold(0.0, f64::max);
            if sampling == IntervalSampling::Unconditional || iou > 0.0 {
                break (start, end, iou);
            }
            attempts += 1;
            if attempts >= MAX_REJECTIONS {
                return Err(Error::Degenerate(format!("no overlapping interval found in {vid}")));
            }
        };
        rows.push(ScatterRow {
            video_id: vid.clone(),
            class_id,
            start,
            end,
            inner: inner_score(row, &InstanceSpan::new(start, end, true)),
            contrast: outer_inner_contrast(row, start, end, delta),
            iou,
        });
    }
    let ious: Vec<f64> = rows.iter().map(|r| r.iou).collect();
    let inner: Vec<f64> = rows.iter().map(|r| r.inner).collect();
    let contrast: Vec<f64> = rows.iter().map(|r| r.contrast).collect();
    Ok(CorrelationAnalysis {
        r_inner: pearson_r(&inner, &ious).ok(),
        r_contrast: pearson_r(&contrast, &ious).ok(),
        rows,
    })
}

/// Runs the model over `videos` and samples intervals for the analysis.
pub fn contrast_iou_analysis(
    params: &HeadParams,
    videos: &[VideoRecord],
    n_samples: usize,
    seed: u64,
    delta: f64,
    sampling: IntervalSampling,
) -> Result<CorrelationAnalysis> {
    let mut scored = Vec::with_capacity(videos.len());
    for v in videos {
        let out = forward(&v.features, params)?;
        let rows = (0..out.phat.rows()).map(|c| out.phat.row(c).to_vec()).collect();
        scored.push((v.video_id.clone(), rows, v.gt.clone()));
    }
    contrast_iou_from_scores(&scored, n_samples, seed, delta, sampling)
}

impl CorrelationAnalysis {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
    }
}
