//! Test-time proposal generation: video-score gating, multi-threshold
//! segment grouping, outer-inner contrast confidence, and per-class NMS.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::tiou;
use crate::ndiff::Matrix;
use crate::sequence::outer_inner_contrast;

/// A scored localization result; `start`/`end` are 1-based inclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub video_id: String,
    pub class_id: usize,
    pub start: usize,
    pub end: usize,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub theta_vid: f64,
    pub theta_seg: Vec<f64>,
    pub nms_threshold: f64,
    pub delta: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            theta_vid: 0.5,
            theta_seg: vec![0.0, 0.05, 0.10, 0.15, 0.20, 0.25],
            nms_threshold: 0.6,
            delta: 0.25,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.theta_vid) {
            return Err(Error::invalid("theta_vid", "must lie in [0, 1)"));
        }
        if self.theta_seg.is_empty() {
            return Err(Error::invalid("theta_seg", "needs at least one threshold"));
        }
        if self.theta_seg.iter().any(|t| !(0.0..1.0).contains(t)) || self.theta_seg.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("theta_seg", "thresholds must lie in [0, 1) and strictly increase"));
        }
        if !(self.nms_threshold > 0.0 && self.nms_threshold <= 1.0) {
            return Err(Error::invalid("nms_threshold", "must lie in (0, 1]"));
        }
        if self.delta <= 0.0 {
            return Err(Error::invalid("delta", "must be positive"));
        }
        Ok(())
    }
}

/// Maximal runs of `row[t] > threshold`, as 1-based inclusive spans.
pub fn runs_above(row: &[f64], threshold: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &v) in row.iter().enumerate() {
        match (v > threshold, open) {
            (true, None) => open = Some(i + 1),
            (false, Some(s)) => {
                out.push((s, i));
                open = None;
            }
            _ => {}
        }
    }
    if let Some(s) = open {
        out.push((s, row.len()));
    }
    out
}

/// Proposals (before NMS) for one video.
pub fn generate_proposals(video_id: &str, phat: &Matrix, video_scores: &[f64], cfg: &InferenceConfig) -> Result<Vec<Proposal>> {
    if video_scores.len() != phat.rows() {
        return Err(Error::dims("generate_proposals", format!("{} video scores", phat.rows()), video_scores.len().to_string()));
    }
    let mut out = Vec::new();
    for (class_id, &vs) in video_scores.iter().enumerate() {
        if vs < cfg.theta_vid {
            continue;
        }
        let row = phat.row(class_id);
        // spans found at several thresholds share one confidence
        let mut spans: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for &th in &cfg.theta_seg {
            for (s, e) in runs_above(row, th) {
                spans.entry((s, e)).or_insert_with(|| outer_inner_contrast(row, s, e, cfg.delta));
            }
        }
        out.extend(spans.into_iter().map(|((start, end), confidence)| Proposal {
            video_id: video_id.to_string(),
            class_id,
            start,
            end,
            confidence,
        }));
    }
    Ok(out)
}

/// Sort order shared by NMS and evaluation: confidence descending, then
/// earlier start, then smaller class id, then video id.
pub fn rank_order(a: &Proposal, b: &Proposal) -> std::cmp::Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.start.cmp(&b.start))
        .then(a.class_id.cmp(&b.class_id))
        .then_with(|| a.video_id.cmp(&b.video_id))
        .then(a.end.cmp(&b.end))
}

/// Greedy per-class (and per-video) NMS: drops proposals whose tIoU with a
/// kept one of the same class is above `iou_threshold`.
pub fn temporal_nms(proposals: &[Proposal], iou_threshold: f64) -> Vec<Proposal> {
    let mut sorted = proposals.to_vec();
    sorted.sort_by(rank_order);
    let mut kept: Vec<Proposal> = Vec::new();
    for p in sorted {
        let suppressed = kept.iter().any(|k| {
            k.class_id == p.class_id && k.video_id == p.video_id && tiou((k.start, k.end), (p.start, p.end)) > iou_threshold
        });
        if !suppressed {
            kept.push(p);
        }
    }
    kept
}

/// Full test-time pipeline for one video's fused scores.
pub fn localize(video_id: &str, phat: &Matrix, cfg: &InferenceConfig) -> Result<Vec<Proposal>> {
    let vs = crate::model::video_scores(phat);
    let props = generate_proposals(video_id, phat, &vs, cfg)?;
    Ok(temporal_nms(&props, cfg.nms_threshold))
}

/// Writes proposals as tab-separated `video_id class_id start end confidence`.
pub fn write_tsv<W: Write>(mut w: W, proposals: &[Proposal]) -> std::io::Result<()> {
    for p in proposals {
        writeln!(w, "{}\t{}\t{}\t{}\t{:?}", p.video_id, p.class_id, p.start, p.end, p.confidence)?;
    }
    Ok(())
}

pub fn read_tsv<R: BufRead>(r: R) -> Result<Vec<Proposal>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<proposals>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Serde(format!("line {}: expected 5 tab-separated fields", n + 1));
        if f.len() != 5 {
            return Err(bad());
        }
        out.push(Proposal {
            video_id: f[0].to_string(),
            class_id: f[1].parse().map_err(|_| bad())?,
            start: f[2].parse().map_err(|_| bad())?,
            end: f[3].parse().map_err(|_| bad())?,
            confidence: f[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}
