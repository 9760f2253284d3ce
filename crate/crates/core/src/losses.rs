//! Training objectives, each recorded on a [`Tape`] so gradients reach the
//! fused scores, background scores, and embedded features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndiff::{Matrix, Tape, Var};
use crate::sequence::{outer_window, InstanceSpan, LabelSequence, ScoringVariant};

/// Loss hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Focal focusing parameter, also the exponent of the score loss.
    pub beta: f64,
    /// Temperature of the feature contrastive loss.
    pub tau: f64,
    /// Outer window ratio.
    pub delta: f64,
    /// Weights of the video, point, score, and feature losses.
    pub lambdas: [f64; 4],
    /// Background-score threshold for pseudo-background mining.
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 2.0,
            tau: 0.1,
            delta: 0.25,
            lambdas: [1.0, 1.0, 1.0, 1.0],
            gamma: 0.95,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(Error::invalid("beta", "must be >= 0"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid("tau", "must be > 0"));
        }
        if !(self.delta > 0.0) {
            return Err(Error::invalid("delta", "must be > 0"));
        }
        if self.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::invalid("lambdas", "must be >= 0"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid("gamma", "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Whether the completeness losses (and hence the sequence search) are active.
    pub fn needs_search(&self) -> bool {
        self.lambdas[2] > 0.0 || self.lambdas[3] > 0.0
    }
}

/// Summed binary cross-entropy between pooled video scores (`C x 1`) and
/// the video label.
pub fn video_loss(tape: &mut Tape, video_scores: Var, labels: &[f64]) -> Result<Var> {
    let c = tape.value(video_scores).rows();
    if labels.len() != c || tape.value(video_scores).cols() != 1 {
        return Err(Error::dims("video_loss", format!("{c} labels"), format!("{} labels", labels.len())));
    }
    let y = tape.constant(Matrix::column_vector(labels.to_vec()))?;
    let not_y = tape.constant(Matrix::column_vector(labels.iter().map(|v| 1.0 - v).collect()))?;
    let log_p = tape.ln_prob(video_scores)?;
    let one_minus = tape.one_minus(video_scores)?;
    let log_not_p = tape.ln_prob(one_minus)?;
    let pos = tape.mul(y, log_p)?;
    let neg = tape.mul(not_y, log_not_p)?;
    let both = tape.add(pos, neg)?;
    let s = tape.sum(both)?;
    tape.scale(s, -1.0)
}

fn check_time(t: usize, t_len: usize) -> Result<usize> {
    if t == 0 || t > t_len {
        return Err(Error::PointOutOfRange { t, len: t_len });
    }
    Ok(t - 1)
}

/// Focal classification loss at labeled action points, with the background
/// suppression term. `points` holds `(t, class)` with 1-based `t`.
pub fn point_action_loss(tape: &mut Tape, phat: Var, q: Var, points: &[(usize, usize)], beta: f64) -> Result<Var> {
    if points.is_empty() {
        return Err(Error::invalid("points", "at least one action point is required"));
    }
    let (c_count, t_len) = tape.value(phat).shape();
    let mut entries = Vec::with_capacity(points.len() * c_count);
    let mut targets = Vec::with_capacity(points.len() * c_count);
    let mut q_entries = Vec::with_capacity(points.len());
    for &(t, class) in points {
        let col = check_time(t, t_len)?;
        if class >= c_count {
            return Err(Error::invalid("class", format!("{class} >= {c_count}")));
        }
        for c in 0..c_count {
            entries.push((c, col));
            targets.push(if c == class { 1.0 } else { 0.0 });
        }
        q_entries.push((0, col));
    }
    let p = tape.gather(phat, &entries)?;
    let y = tape.constant(Matrix::row_vector(targets.clone()))?;
    let not_y = tape.constant(Matrix::row_vector(targets.iter().map(|v| 1.0 - v).collect()))?;

    let one_minus_p = tape.one_minus(p)?;
    let w_pos = tape.pow(one_minus_p, beta)?;
    let log_p = tape.ln_prob(p)?;
    let pos = tape.mul(w_pos, log_p)?;
    let pos = tape.mul(y, pos)?;

    let w_neg = tape.pow(p, beta)?;
    let log_not_p = tape.ln_prob(one_minus_p)?;
    let neg = tape.mul(w_neg, log_not_p)?;
    let neg = tape.mul(not_y, neg)?;

    let qv = tape.gather(q, &q_entries)?;
    let w_q = tape.pow(qv, beta)?;
    let one_minus_q = tape.one_minus(qv)?;
    let log_not_q = tape.ln_prob(one_minus_q)?;
    let bg = tape.mul(w_q, log_not_q)?;

    let s1 = tape.sum(pos)?;
    let s2 = tape.sum(neg)?;
    let s3 = tape.sum(bg)?;
    let s = tape.add(s1, s2)?;
    let s = tape.add(s, s3)?;
    tape.scale(s, -1.0 / points.len() as f64)
}

/// Focal loss at pseudo-background points; zero when there are none.
pub fn point_background_loss(tape: &mut Tape, phat: Var, q: Var, points: &[usize], beta: f64) -> Result<Var> {
    if points.is_empty() {
        return tape.constant(Matrix::scalar(0.0));
    }
    let (c_count, t_len) = tape.value(phat).shape();
    let mut entries = Vec::with_capacity(points.len() * c_count);
    let mut q_entries = Vec::with_capacity(points.len());
    for &t in points {
        let col = check_time(t, t_len)?;
        entries.extend((0..c_count).map(|c| (c, col)));
        q_entries.push((0, col));
    }
    let p = tape.gather(phat, &entries)?;
    let w_p = tape.pow(p, beta)?;
    let one_minus_p = tape.one_minus(p)?;
    let log_not_p = tape.ln_prob(one_minus_p)?;
    let act = tape.mul(w_p, log_not_p)?;

    let qv = tape.gather(q, &q_entries)?;
    let one_minus_q = tape.one_minus(qv)?;
    let w_q = tape.pow(one_minus_q, beta)?;
    let log_q = tape.ln_prob(qv)?;
    let bg = tape.mul(w_q, log_q)?;

    let s1 = tape.sum(act)?;
    let s2 = tape.sum(bg)?;
    let s = tape.add(s1, s2)?;
    tape.scale(s, -1.0 / points.len() as f64)
}

/// Differentiable sequence score for one class row of `phat`. The sequence
/// itself is a constant.
pub fn completeness_on_tape(
    tape: &mut Tape,
    phat: Var,
    seq: &LabelSequence,
    delta: f64,
    variant: ScoringVariant,
) -> Result<Var> {
    let t_len = tape.value(phat).cols();
    seq.validate(t_len)?;
    let row = seq.class_id;
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for span in &seq.spans {
        let counts = match variant {
            ScoringVariant::ContrastBoth => true,
            ScoringVariant::ContrastAction | ScoringVariant::InnerOnly => span.is_action,
        };
        if !counts {
            continue;
        }
        let inner_idx: Vec<(usize, usize)> = (span.start..=span.end).map(|t| (row, t - 1)).collect();
        let g = tape.gather(phat, &inner_idx)?;
        let mut value = tape.mean(g)?;
        if !span.is_action {
            value = tape.one_minus(value)?;
        }
        if variant != ScoringVariant::InnerOnly {
            let outer = outer_window(span.start, span.end, delta, t_len);
            if !outer.is_empty() {
                let idx: Vec<(usize, usize)> = outer.iter().map(|&t| (row, t - 1)).collect();
                let g = tape.gather(phat, &idx)?;
                let mut out = tape.mean(g)?;
                if !span.is_action {
                    out = tape.one_minus(out)?;
                }
                value = tape.sub(value, out)?;
            }
        }
        total = Some(match total {
            Some(acc) => tape.add(acc, value)?,
            None => value,
        });
        count += 1;
    }
    let total = total.ok_or_else(|| Error::InvalidSequence("no span contributes under this scoring variant".into()))?;
    tape.scale(total, 1.0 / count as f64)
}

/// Mean over present classes of `(1 - R)^beta`.
pub fn score_contrastive_loss(tape: &mut Tape, scores: &[Var], beta: f64) -> Result<Var> {
    if scores.is_empty() {
        return Err(Error::invalid("scores", "no present class"));
    }
    let mut acc: Option<Var> = None;
    for &r in scores {
        let gap = tape.one_minus(r)?;
        let term = tape.pow(gap, beta)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    tape.scale(acc.expect("nonempty"), 1.0 / scores.len() as f64)
}

/// Picks one segment (1-based) from each of three near-equal thirds of the
/// span. Spans shorter than three segments sample with replacement from the
/// whole span.
pub fn soi_sample<R: Rng>(span: &InstanceSpan, rng: &mut R) -> [usize; 3] {
    let len = span.len();
    if len < 3 {
        return [0; 3].map(|_| span.start + rng.random_range(0..len));
    }
    let (base, extra) = (len / 3, len % 3);
    let mut out = [0; 3];
    let mut lo = span.start;
    for (k, slot) in out.iter_mut().enumerate() {
        let size = base + usize::from(k < extra);
        *slot = lo + rng.random_range(0..size);
        lo += size;
    }
    out
}

/// Representative instance feature: mean of the sampled embedded columns,
/// L2-normalized. `samples` are 1-based segment indices. Returns `D x 1`.
pub fn soi_pool(tape: &mut Tape, features: Var, samples: &[usize; 3]) -> Result<Var> {
    let t_len = tape.value(features).cols();
    let cols = samples
        .iter()
        .map(|&t| check_time(t, t_len))
        .collect::<Result<Vec<_>>>()?;
    let pooled = tape.columns_mean(features, &cols)?;
    tape.normalize_cols(pooled)
}

/// A pooled, normalized instance feature (`D x 1`) from a class's sequence.
#[derive(Clone, Copy, Debug)]
pub struct InstanceFeature {
    pub feature: Var,
    pub is_action: bool,
}

/// Supervised contrastive loss over the instances of each class sequence.
///
/// Classes with fewer than two action instances are skipped; the loss is
/// zero when no class qualifies. Every anchor is an action instance, its
/// positives are the other action instances, and the denominator runs over
/// all other instances.
pub fn feature_contrastive_loss(tape: &mut Tape, groups: &[Vec<InstanceFeature>], tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::invalid("tau", "must be > 0"));
    }
    for g in groups {
        for f in g {
            let v = tape.value(f.feature);
            let norm = v.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 || v.cols() != 1 {
                return Err(Error::NotNormalized { norm });
            }
        }
    }
    let mut class_terms = Vec::new();
    for g in groups {
        let n_action = g.iter().filter(|f| f.is_action).count();
        if n_action < 2 {
            continue;
        }
        let vars: Vec<Var> = g.iter().map(|f| f.feature).collect();
        let stacked = tape.concat_cols(&vars)?;
        let sims = tape.gram(stacked)?;
        let logits = tape.scale(sims, 1.0 / tau)?;
        let e = tape.exp(logits)?;
        let mut anchor_terms: Option<Var> = None;
        for (n, anchor) in g.iter().enumerate() {
            if !anchor.is_action {
                continue;
            }
            let pos: Vec<(usize, usize)> = (0..g.len()).filter(|&o| o != n && g[o].is_action).map(|o| (n, o)).collect();
            let all: Vec<(usize, usize)> = (0..g.len()).filter(|&m| m != n).map(|m| (n, m)).collect();
            let num = tape.gather(e, &pos)?;
            let num = tape.sum(num)?;
            let den = tape.gather(e, &all)?;
            let den = tape.sum(den)?;
            let ratio = tape.div(num, den)?;
            let log_ratio = tape.ln(ratio)?;
            anchor_terms = Some(match anchor_terms {
                Some(a) => tape.add(a, log_ratio)?,
                None => log_ratio,
            });
        }
        let per_class = tape.scale(anchor_terms.expect("two or more anchors"), -1.0 / n_action as f64)?;
        class_terms.push(per_class);
    }
    if class_terms.is_empty() {
        return tape.constant(Matrix::scalar(0.0));
    }
    let mut acc = class_terms[0];
    for &t in &class_terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, 1.0 / class_terms.len() as f64)
}

/// Weighted sum of the four loss components.
pub fn total_loss(tape: &mut Tape, components: [Var; 4], lambdas: [f64; 4]) -> Result<Var> {
    let mut acc = tape.scale(components[0], lambdas[0])?;
    for k in 1..4 {
        let term = tape.scale(components[k], lambdas[k])?;
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

/// Value-level weighted sum.
pub fn total_loss_value(components: [f64; 4], lambdas: [f64; 4]) -> f64 {
    components.iter().zip(lambdas).map(|(c, l)| c * l).sum()
}

/// Deterministic seed mixing (SplitMix64 finalizer over the parts).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Stable 64-bit FNV-1a hash of a video id.
pub fn id_hash(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}
