//! Completeness scoring of class-specific label sequences and the budgeted
//! greedy search for the highest-scoring point-consistent sequence.
//!
//! All segment indices here are 1-based and spans are inclusive.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default outer-window ratio.
pub const DEFAULT_DELTA: f64 = 0.25;
/// Default beam budget.
pub const DEFAULT_ALPHA: usize = 25;
/// Default length cap for [`exhaustive_search`].
pub const DEFAULT_EXHAUSTIVE_CAP: usize = 16;

/// One action (`is_action`) or background span `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InstanceSpan {
    pub start: usize,
    pub end: usize,
    pub is_action: bool,
}

impl InstanceSpan {
    pub fn new(start: usize, end: usize, is_action: bool) -> Self {
        Self { start, end, is_action }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }

    pub fn contains(&self, t: usize) -> bool {
        (self.start..=self.end).contains(&t)
    }
}

/// Alternating action/background tiling of `[1, T]` for one class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSequence {
    pub class_id: usize,
    pub spans: Vec<InstanceSpan>,
}

/// A sequence together with its completeness score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSequence {
    pub sequence: LabelSequence,
    pub score: f64,
}

/// How span contributions enter the sequence score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ScoringVariant {
    /// Inner-minus-outer contrast of action and background spans.
    #[default]
    ContrastBoth,
    /// Contrast of action spans only.
    ContrastAction,
    /// Inner mean score of action spans only.
    InnerOnly,
}

/// Candidate-space convention for sequence search.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// A point-free span may open the video and one may close it.
    #[default]
    Extended,
    /// The first span takes the category of the earliest point; the video
    /// may only end in a point-free span when one point set is empty.
    Strict,
}

/// Parameters of [`greedy_search`] and [`exhaustive_search`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchParams {
    pub alpha: usize,
    pub delta: f64,
    pub variant: ScoringVariant,
    pub mode: SearchMode,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            delta: DEFAULT_DELTA,
            variant: ScoringVariant::ContrastBoth,
            mode: SearchMode::Extended,
        }
    }
}

impl LabelSequence {
    pub fn new(class_id: usize, spans: Vec<InstanceSpan>) -> Self {
        Self { class_id, spans }
    }

    /// Builds a sequence from span starts after the first and the first
    /// span's category.
    pub fn from_boundaries(class_id: usize, t_len: usize, starts: &[usize], first_is_action: bool) -> Self {
        let mut spans = Vec::with_capacity(starts.len() + 1);
        let mut s = 1;
        let mut z = first_is_action;
        for &b in starts.iter().chain(std::iter::once(&(t_len + 1))) {
            spans.push(InstanceSpan::new(s, b - 1, z));
            s = b;
            z = !z;
        }
        Self { class_id, spans }
    }

    pub fn len(&self) -> usize {
        self.spans.last().map_or(0, |s| s.end)
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    /// Start indices of spans 2..N.
    pub fn boundaries(&self) -> Vec<usize> {
        self.spans.iter().skip(1).map(|s| s.start).collect()
    }

    pub fn action_spans(&self) -> impl Iterator<Item = &InstanceSpan> {
        self.spans.iter().filter(|s| s.is_action)
    }

    /// Per-segment labels, 1 for action.
    pub fn labels(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len());
        for s in &self.spans {
            out.extend(std::iter::repeat_n(u8::from(s.is_action), s.len()));
        }
        out
    }

    /// Checks tiling of `[1, t_len]` and alternation.
    pub fn validate(&self, t_len: usize) -> Result<()> {
        let Some(first) = self.spans.first() else {
            return Err(Error::InvalidSequence("no spans".into()));
        };
        if first.start != 1 {
            return Err(Error::InvalidSequence(format!("first span starts at {}", first.start)));
        }
        for s in &self.spans {
            if s.start > s.end {
                return Err(Error::InvalidSequence(format!("empty span ({}, {})", s.start, s.end)));
            }
        }
        for w in self.spans.windows(2) {
            if w[1].start != w[0].end + 1 {
                return Err(Error::InvalidSequence(format!("gap or overlap at {}", w[1].start)));
            }
            if w[1].is_action == w[0].is_action {
                return Err(Error::InvalidSequence(format!("spans at {} and {} share a category", w[0].start, w[1].start)));
            }
        }
        if self.len() != t_len {
            return Err(Error::InvalidSequence(format!("covers {} of {t_len} segments", self.len())));
        }
        Ok(())
    }

    /// True iff every action point lies in an action span and every
    /// background point in a background span.
    pub fn agrees_with_points(&self, action_points: &[usize], background_points: &[usize]) -> bool {
        let labels = self.labels();
        let at = |t: usize| labels.get(t.wrapping_sub(1)).copied();
        action_points.iter().all(|&t| at(t) == Some(1)) && background_points.iter().all(|&t| at(t) == Some(0))
    }
}

fn window_count(x: f64, up: bool) -> usize {
    // guards against representation error such as 0.1 * 30 = 3.0000000000000004
    if up {
        (x - 1e-9).ceil().max(0.0) as usize
    } else {
        (x + 1e-9).floor().max(0.0) as usize
    }
}

/// Outer window of span `[start, end]`: `ceil(delta * l)` segments to the
/// left and `floor(delta * l)` to the right, clipped to `[1, t_len]`.
pub fn outer_window(start: usize, end: usize, delta: f64, t_len: usize) -> Vec<usize> {
    let l = (end + 1 - start) as f64;
    let left = window_count(delta * l, true);
    let right = window_count(delta * l, false);
    let lo = start.saturating_sub(left).max(1);
    let hi = (end + right).min(t_len);
    (lo..start).chain(end + 1..=hi).collect()
}

fn span_u(row: &[f64], t: usize, is_action: bool) -> f64 {
    let p = row[t - 1];
    if is_action { p } else { 1.0 - p }
}

/// Inner mean of `u` over the span.
pub fn inner_score(row: &[f64], span: &InstanceSpan) -> f64 {
    let sum: f64 = (span.start..=span.end).map(|t| span_u(row, t, span.is_action)).sum();
    sum / span.len() as f64
}

/// Inner mean minus clipped outer mean; an empty outer window scores 0.
pub fn span_contrast(row: &[f64], span: &InstanceSpan, delta: f64) -> f64 {
    let outer = outer_window(span.start, span.end, delta, row.len());
    let outer_mean = if outer.is_empty() {
        0.0
    } else {
        outer.iter().map(|&t| span_u(row, t, span.is_action)).sum::<f64>() / outer.len() as f64
    };
    inner_score(row, span) - outer_mean
}

/// Outer-inner contrast of an action interval.
pub fn outer_inner_contrast(row: &[f64], start: usize, end: usize, delta: f64) -> f64 {
    span_contrast(row, &InstanceSpan::new(start, end, true), delta)
}

/// Contribution of one span under `variant`, or `None` if the variant
/// ignores spans of that category.
pub fn span_score(row: &[f64], span: &InstanceSpan, delta: f64, variant: ScoringVariant) -> Option<f64> {
    match variant {
        ScoringVariant::ContrastBoth => Some(span_contrast(row, span, delta)),
        ScoringVariant::ContrastAction => span.is_action.then(|| span_contrast(row, span, delta)),
        ScoringVariant::InnerOnly => span.is_action.then(|| inner_score(row, span)),
    }
}

fn score_spans(row: &[f64], spans: &[InstanceSpan], delta: f64, variant: ScoringVariant) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in spans {
        if let Some(v) = span_score(row, s, delta, variant) {
            sum += v;
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

/// Completeness score: mean over spans of inner-minus-outer contrast.
pub fn completeness_score(row: &[f64], seq: &LabelSequence, delta: f64) -> Result<f64> {
    completeness_score_with(row, seq, delta, ScoringVariant::ContrastBoth)
}

/// Completeness score under a scoring variant.
pub fn completeness_score_with(row: &[f64], seq: &LabelSequence, delta: f64, variant: ScoringVariant) -> Result<f64> {
    if delta <= 0.0 {
        return Err(Error::invalid("delta", "must be positive"));
    }
    seq.validate(row.len())?;
    score_spans(row, &seq.spans, delta, variant)
        .ok_or_else(|| Error::InvalidSequence("no span contributes under this scoring variant".into()))
}

/// Ordering used for final selection: higher score, then fewer spans, then
/// lexicographic boundaries, then background-first.
fn selection_order(a: &(Vec<InstanceSpan>, Option<f64>), b: &(Vec<InstanceSpan>, Option<f64>)) -> Ordering {
    let sa = a.1.unwrap_or(f64::NEG_INFINITY);
    let sb = b.1.unwrap_or(f64::NEG_INFINITY);
    sb.total_cmp(&sa)
        .then(a.0.len().cmp(&b.0.len()))
        .then_with(|| a.0.iter().map(|s| s.start).cmp(b.0.iter().map(|s| s.start)))
        .then(a.0[0].is_action.cmp(&b.0[0].is_action))
}

fn check_points(t_len: usize, action_points: &[usize], background_points: &[usize]) -> Result<()> {
    if action_points.is_empty() && background_points.is_empty() {
        return Err(Error::invalid("points", "at least one point is required"));
    }
    for list in [action_points, background_points] {
        if let Some(&t) = list.iter().find(|&&t| t == 0 || t > t_len) {
            return Err(Error::PointOutOfRange { t, len: t_len });
        }
        if list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("points", "times must be strictly increasing"));
        }
    }
    if action_points.iter().any(|t| background_points.binary_search(t).is_ok()) {
        return Err(Error::invalid("points", "action and background points must be disjoint"));
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum PointKind {
    None,
    Action,
    Background,
}

/// Category of the upcoming point for each step `t` in `2..=T`.
struct Upcoming {
    kinds: Vec<PointKind>,
    upcoming: Vec<bool>,
}

impl Upcoming {
    fn new(t_len: usize, acts: &[usize], bkgs: &[usize], mode: SearchMode) -> Self {
        let mut kinds = vec![PointKind::None; t_len + 1];
        for &t in acts {
            kinds[t] = PointKind::Action;
        }
        for &t in bkgs {
            kinds[t] = PointKind::Background;
        }
        let mut upcoming = vec![false; t_len + 1];
        match mode {
            SearchMode::Extended => {
                let last = (1..=t_len).rev().find(|&t| kinds[t] != PointKind::None);
                let tail = last.is_some_and(|t| kinds[t] == PointKind::Background);
                let mut next = tail;
                for t in (1..=t_len).rev() {
                    match kinds[t] {
                        PointKind::Action => next = true,
                        PointKind::Background => next = false,
                        PointKind::None => {}
                    }
                    upcoming[t] = next;
                }
            }
            SearchMode::Strict => {
                // Index juggling of the published pseudo-code; an empty list
                // behaves as a single point at infinity.
                let at = |list: &[usize], k: usize| list.get(k).copied().unwrap_or(usize::MAX);
                let (mut i, mut j) = (0usize, 0usize);
                for (t, slot) in upcoming.iter_mut().enumerate().skip(2) {
                    if t > at(acts, i) {
                        i = (i + 1).min(acts.len().saturating_sub(1));
                    }
                    if t > at(bkgs, j) {
                        j = (j + 1).min(bkgs.len().saturating_sub(1));
                    }
                    let (ta, tb) = (at(acts, i), at(bkgs, j));
                    let mut z = ta <= tb;
                    if t > ta.min(tb) {
                        z = !z;
                    }
                    *slot = z;
                }
            }
        }
        Self { kinds, upcoming }
    }
}

#[derive(Clone)]
struct Candidate {
    spans: Vec<InstanceSpan>,
    sum: f64,
    count: usize,
}

impl Candidate {
    fn running(&self) -> f64 {
        if self.count == 0 { f64::INFINITY } else { self.sum / self.count as f64 }
    }
}

fn prune_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.running()
        .total_cmp(&a.running())
        .then(a.spans.len().cmp(&b.spans.len()))
        .then_with(|| a.spans.last().map(|s| s.start).cmp(&b.spans.last().map(|s| s.start)))
        .then_with(|| a.spans.iter().map(|s| s.start).cmp(b.spans.iter().map(|s| s.start)))
        .then(a.spans[0].is_action.cmp(&b.spans[0].is_action))
}

/// Budgeted left-to-right beam search for the best point-consistent sequence.
///
/// At each step every candidate either continues its ongoing span or closes
/// it and opens a span of the upcoming point's category. Candidates are
/// ranked by the mean score of their closed spans (no closed span ranks
/// above everything) and at most `alpha` survive each step.
pub fn greedy_search(
    row: &[f64],
    class_id: usize,
    action_points: &[usize],
    background_points: &[usize],
    params: &SearchParams,
) -> Result<ScoredSequence> {
    let t_len = row.len();
    if params.alpha == 0 {
        return Err(Error::invalid("alpha", "budget must be >= 1"));
    }
    if params.delta <= 0.0 {
        return Err(Error::invalid("delta", "must be positive"));
    }
    check_points(t_len, action_points, background_points)?;
    let up = Upcoming::new(t_len, action_points, background_points, params.mode);

    let seeds: Vec<bool> = match (params.mode, up.kinds[1]) {
        (_, PointKind::Action) => vec![true],
        (_, PointKind::Background) => vec![false],
        (SearchMode::Extended, PointKind::None) => vec![false, true],
        (SearchMode::Strict, PointKind::None) => {
            let a = action_points.first().copied().unwrap_or(usize::MAX);
            let b = background_points.first().copied().unwrap_or(usize::MAX);
            vec![a <= b]
        }
    };
    let mut beam: Vec<Candidate> = seeds
        .into_iter()
        .map(|z| Candidate {
            spans: vec![InstanceSpan::new(1, 1, z)],
            sum: 0.0,
            count: 0,
        })
        .collect();

    let mut next = Vec::with_capacity(2 * params.alpha.min(1 << 12));
    for t in 2..=t_len {
        let z_up = up.upcoming[t];
        let is_point = up.kinds[t] != PointKind::None;
        next.clear();
        for cand in beam.drain(..) {
            let last = *cand.spans.last().expect("nonempty");
            let can_continue = last.is_action == z_up || !is_point;
            let can_switch = last.is_action != z_up;
            if can_switch {
                let mut sw = cand.clone();
                if let Some(v) = span_score(row, &last, params.delta, params.variant) {
                    sw.sum += v;
                    sw.count += 1;
                }
                sw.spans.push(InstanceSpan::new(t, t, z_up));
                next.push(sw);
            }
            if can_continue {
                let mut cont = cand;
                cont.spans.last_mut().expect("nonempty").end = t;
                next.push(cont);
            }
        }
        if next.len() > params.alpha {
            next.sort_by(prune_order);
            next.truncate(params.alpha);
        }
        std::mem::swap(&mut beam, &mut next);
    }

    let finals: Vec<(Vec<InstanceSpan>, Option<f64>)> = beam
        .into_iter()
        .map(|c| {
            let score = score_spans(row, &c.spans, params.delta, params.variant);
            (c.spans, score)
        })
        .collect();
    pick_best(finals, class_id)
}

fn pick_best(mut finals: Vec<(Vec<InstanceSpan>, Option<f64>)>, class_id: usize) -> Result<ScoredSequence> {
    finals.sort_by(selection_order);
    match finals.into_iter().next() {
        Some((spans, Some(score))) => Ok(ScoredSequence {
            sequence: LabelSequence::new(class_id, spans),
            score,
        }),
        _ => Err(Error::InvalidSequence("no candidate sequence has a defined score".into())),
    }
}

/// Structural membership test for the candidate space searched by
/// [`greedy_search`]: spans agree with points, and every span holds at least
/// one point except possibly the first and the last (see [`SearchMode`]).
pub fn is_candidate(seq: &LabelSequence, action_points: &[usize], background_points: &[usize], mode: SearchMode) -> bool {
    if !seq.agrees_with_points(action_points, background_points) {
        return false;
    }
    let has_point = |s: &InstanceSpan| {
        action_points.iter().chain(background_points).any(|&t| s.contains(t))
    };
    let n = seq.spans.len();
    for (k, s) in seq.spans.iter().enumerate() {
        if has_point(s) {
            continue;
        }
        let allowed = match mode {
            SearchMode::Extended => k == 0 || k == n - 1,
            SearchMode::Strict => k == n - 1 && k > 0 && (action_points.is_empty() || background_points.is_empty()),
        };
        if !allowed {
            return false;
        }
    }
    true
}

/// Enumerates every candidate sequence (`2^(T-1)` boundary sets times two
/// starting categories, filtered by [`is_candidate`]).
pub fn enumerate_candidates(
    t_len: usize,
    class_id: usize,
    action_points: &[usize],
    background_points: &[usize],
    mode: SearchMode,
    cap: usize,
) -> Result<Vec<LabelSequence>> {
    if t_len > cap {
        return Err(Error::SearchCapExceeded { len: t_len, cap });
    }
    if t_len == 0 {
        return Err(Error::invalid("T", "must be >= 1"));
    }
    check_points(t_len, action_points, background_points)?;
    let mut out = Vec::new();
    for mask in 0u64..(1u64 << (t_len - 1)) {
        let starts: Vec<usize> = (0..t_len - 1).filter(|b| mask >> b & 1 == 1).map(|b| b + 2).collect();
        for first in [false, true] {
            let seq = LabelSequence::from_boundaries(class_id, t_len, &starts, first);
            if is_candidate(&seq, action_points, background_points, mode) {
                out.push(seq);
            }
        }
    }
    Ok(out)
}

/// Global optimum of the sequence score by enumeration; ties go to fewer
/// spans, then lexicographically earlier boundaries.
pub fn exhaustive_search(
    row: &[f64],
    class_id: usize,
    action_points: &[usize],
    background_points: &[usize],
    params: &SearchParams,
    cap: usize,
) -> Result<ScoredSequence> {
    if params.delta <= 0.0 {
        return Err(Error::invalid("delta", "must be positive"));
    }
    let cands = enumerate_candidates(row.len(), class_id, action_points, background_points, params.mode, cap)?;
    let finals = cands
        .into_iter()
        .map(|seq| {
            let score = score_spans(row, &seq.spans, params.delta, params.variant);
            (seq.spans, score)
        })
        .collect();
    pick_best(finals, class_id)
}

/// Fraction of segments whose action/background label matches `truth`.
pub fn sequence_accuracy(seq: &LabelSequence, truth: &[u8]) -> Result<f64> {
    let labels = seq.labels();
    if labels.len() != truth.len() {
        return Err(Error::dims("sequence_accuracy", format!("{} labels", labels.len()), format!("{} labels", truth.len())));
    }
    if truth.is_empty() {
        return Err(Error::invalid("truth", "empty labeling"));
    }
    let hits = labels.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}
