//! Pseudo-background point selection from class-agnostic background scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label carried by an annotated point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointLabel {
    Action(usize),
    Background,
}

/// A labeled segment. `t` is 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub t: usize,
    pub label: PointLabel,
}

/// Action points plus mined background points of one video.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointSet {
    pub action: Vec<PointAnnotation>,
    pub background: Vec<PointAnnotation>,
}

impl PointSet {
    /// Builds a point set, sorting both lists by time.
    pub fn new(mut action: Vec<PointAnnotation>, background: Vec<usize>) -> Self {
        action.sort_by_key(|p| p.t);
        let mut background: Vec<PointAnnotation> = background
            .into_iter()
            .map(|t| PointAnnotation {
                t,
                label: PointLabel::Background,
            })
            .collect();
        background.sort_by_key(|p| p.t);
        Self { action, background }
    }

    pub fn action_times(&self) -> Vec<usize> {
        self.action.iter().map(|p| p.t).collect()
    }

    pub fn background_times(&self) -> Vec<usize> {
        self.background.iter().map(|p| p.t).collect()
    }

    /// Times of action points carrying `class`.
    pub fn class_times(&self, class: usize) -> Vec<usize> {
        self.action
            .iter()
            .filter(|p| p.label == PointLabel::Action(class))
            .map(|p| p.t)
            .collect()
    }

    /// Sorted distinct classes present among the action points.
    pub fn classes(&self) -> Vec<usize> {
        let mut cs: Vec<usize> = self
            .action
            .iter()
            .filter_map(|p| match p.label {
                PointLabel::Action(c) => Some(c),
                PointLabel::Background => None,
            })
            .collect();
        cs.sort_unstable();
        cs.dedup();
        cs
    }

    /// Checks ordering, range, and disjointness invariants.
    pub fn validate(&self, t_len: usize) -> Result<()> {
        for list in [&self.action, &self.background] {
            for p in list {
                if p.t == 0 || p.t > t_len {
                    return Err(Error::PointOutOfRange { t: p.t, len: t_len });
                }
            }
            if list.windows(2).any(|w| w[0].t >= w[1].t) {
                return Err(Error::invalid("points", "times must be strictly increasing"));
            }
        }
        if self.action.iter().any(|p| matches!(p.label, PointLabel::Background)) {
            return Err(Error::invalid("points", "action list holds a background label"));
        }
        let acts = self.action_times();
        if self.background.iter().any(|p| acts.binary_search(&p.t).is_ok()) {
            return Err(Error::invalid("points", "action and background points overlap"));
        }
        Ok(())
    }
}

/// Mining strategy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MiningMode {
    /// Per section between adjacent action points: threshold, argmax
    /// fallback, then fill between the outermost selections.
    #[default]
    SectionalFill,
    /// As above without the filling stage.
    Sectional,
    /// Top `eta * M_act` background scores over the whole video.
    Global,
}

pub const DEFAULT_ETA: usize = 5;

/// Selects pseudo-background points (1-based, sorted, disjoint from actions).
///
/// `action_points` are 1-based times; duplicates are collapsed. Only the
/// open sections strictly between adjacent action points are mined by the
/// sectional modes.
pub fn mine_pseudo_background(
    q: &[f64],
    action_points: &[usize],
    gamma: f64,
    mode: MiningMode,
    eta: usize,
) -> Result<Vec<usize>> {
    if action_points.is_empty() {
        return Err(Error::invalid("action_points", "at least one action point is required"));
    }
    let t_len = q.len();
    let mut acts = action_points.to_vec();
    acts.sort_unstable();
    acts.dedup();
    if let Some(&bad) = acts.iter().find(|&&t| t == 0 || t > t_len) {
        return Err(Error::PointOutOfRange { t: bad, len: t_len });
    }

    let mut out = Vec::new();
    match mode {
        MiningMode::Sectional | MiningMode::SectionalFill => {
            for pair in acts.windows(2) {
                let (lo, hi) = (pair[0] + 1, pair[1] - 1);
                if lo > hi {
                    continue;
                }
                let mut picked: Vec<usize> = (lo..=hi).filter(|&t| q[t - 1] > gamma).collect();
                if picked.is_empty() {
                    let mut best = lo;
                    for t in lo..=hi {
                        if q[t - 1] > q[best - 1] {
                            best = t;
                        }
                    }
                    picked.push(best);
                }
                if mode == MiningMode::SectionalFill {
                    let (first, last) = (picked[0], picked[picked.len() - 1]);
                    picked = (first..=last).collect();
                }
                out.extend(picked);
            }
        }
        MiningMode::Global => {
            if eta == 0 {
                return Err(Error::invalid("eta", "must be >= 1"));
            }
            let mut cands: Vec<usize> = (1..=t_len).filter(|t| acts.binary_search(t).is_err()).collect();
            cands.sort_by(|&a, &b| q[b - 1].total_cmp(&q[a - 1]).then(a.cmp(&b)));
            cands.truncate(eta * acts.len());
            cands.sort_unstable();
            out = cands;
        }
    }
    Ok(out)
}
