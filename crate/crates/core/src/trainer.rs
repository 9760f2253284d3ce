//! Optimization loop: forward, mining, per-class sequence search, the
//! weighted objective, and Adam updates.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    completeness_on_tape, derive_seed, feature_contrastive_loss, id_hash, point_action_loss, point_background_loss,
    score_contrastive_loss, soi_pool, soi_sample, total_loss, video_loss, InstanceFeature, LossConfig,
};
use crate::mining::{mine_pseudo_background, MiningMode, PointLabel, DEFAULT_ETA};
use crate::model::{forward, forward_on_tape, video_scores_on_tape, HeadParams};
use crate::ndiff::{Matrix, ParamId, Tape};
use crate::sequence::{greedy_search, sequence_accuracy, LabelSequence, ScoringVariant, SearchMode, SearchParams};
use crate::synthio::VideoRecord;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SearchFrequency {
    #[default]
    PerStep,
    PerEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub alpha: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub search_frequency: SearchFrequency,
    pub variant: ScoringVariant,
    pub search_mode: SearchMode,
    pub mining: MiningMode,
    pub eta: usize,
    /// Evaluate training-set sequence accuracy every this many epochs (and
    /// after the last one); 0 disables it.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 4,
            epochs: 100,
            alpha: crate::sequence::DEFAULT_ALPHA,
            seed: 0,
            loss: LossConfig::default(),
            search_frequency: SearchFrequency::PerStep,
            variant: ScoringVariant::ContrastBoth,
            search_mode: SearchMode::Extended,
            mining: MiningMode::SectionalFill,
            eta: DEFAULT_ETA,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if self.alpha == 0 {
            return Err(Error::invalid("alpha", "must be positive"));
        }
        if self.eta == 0 {
            return Err(Error::invalid("eta", "must be positive"));
        }
        self.loss.validate()
    }

    pub fn search_params(&self) -> SearchParams {
        SearchParams {
            alpha: self.alpha,
            delta: self.loss.delta,
            variant: self.variant,
            mode: self.search_mode,
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &HeadParams, lr: f64) -> Self {
        let zeros: Vec<Matrix> = params.tensors().iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut HeadParams, grads: &[Matrix]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, p) in params.tensors_mut().into_iter().enumerate() {
            let g = grads[k].as_slice();
            let m = self.m[k].as_mut_slice();
            let v = self.v[k].as_mut_slice();
            for (i, w) in p.as_mut_slice().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                *w -= self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Loss values and gradients of one video.
#[derive(Clone, Debug)]
pub struct VideoOutcome {
    pub video_id: String,
    /// Video, point, score, and feature loss.
    pub components: [f64; 4],
    pub total: f64,
    pub grads: Vec<Matrix>,
    pub sequences: Vec<LabelSequence>,
    pub searches: usize,
    pub search_seconds: f64,
}

/// Background points used when searching class `class`: mined points plus
/// the action points of every other class.
pub fn search_background(video: &VideoRecord, mined: &[usize], class: usize) -> Vec<usize> {
    let mut bkg: Vec<usize> = mined.to_vec();
    bkg.extend(
        video
            .points
            .action
            .iter()
            .filter(|p| p.label != PointLabel::Action(class))
            .map(|p| p.t),
    );
    bkg.sort_unstable();
    bkg.dedup();
    bkg
}

/// Best sequence for every present class under the given fused scores.
pub fn search_sequences(video: &VideoRecord, phat: &Matrix, mined: &[usize], cfg: &TrainConfig) -> Result<Vec<LabelSequence>> {
    let sp = cfg.search_params();
    video
        .points
        .classes()
        .into_iter()
        .map(|c| {
            let acts = video.points.class_times(c);
            let bkg = search_background(video, mined, c);
            Ok(greedy_search(phat.row(c), c, &acts, &bkg, &sp)?.sequence)
        })
        .collect()
}

fn mine(video: &VideoRecord, q: &Matrix, cfg: &TrainConfig) -> Result<Vec<usize>> {
    mine_pseudo_background(q.as_slice(), &video.points.action_times(), cfg.loss.gamma, cfg.mining, cfg.eta)
}

fn diverged(video: &VideoRecord) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::NonFinite(detail) => Error::Diverged {
            video_id: video.video_id.clone(),
            detail,
        },
        other => other,
    }
}

/// Objective and parameter gradients for one video. `fixed` supplies
/// sequences found earlier (per-epoch search); otherwise they are searched
/// on the current scores. Sequences are constants either way.
pub fn video_objective(
    video: &VideoRecord,
    params: &HeadParams,
    n_classes: usize,
    cfg: &TrainConfig,
    rng_seed: u64,
    fixed: Option<&[LabelSequence]>,
) -> Result<VideoOutcome> {
    if video.points.action.is_empty() {
        return Err(Error::invalid("points", format!("video {} has no action point", video.video_id)));
    }
    let lc = &cfg.loss;
    let mut tape = Tape::new();
    let hv = forward_on_tape(&mut tape, &video.features, params).map_err(diverged(video))?;
    let mined = mine(video, tape.value(hv.q), cfg)?;

    let vs = video_scores_on_tape(&mut tape, hv.phat)?;
    let l_video = video_loss(&mut tape, vs, &video.video_labels(n_classes)).map_err(diverged(video))?;
    let act: Vec<(usize, usize)> = video
        .points
        .action
        .iter()
        .filter_map(|p| match p.label {
            PointLabel::Action(c) => Some((p.t, c)),
            PointLabel::Background => None,
        })
        .collect();
    let l_act = point_action_loss(&mut tape, hv.phat, hv.q, &act, lc.beta).map_err(diverged(video))?;
    let l_bkg = point_background_loss(&mut tape, hv.phat, hv.q, &mined, lc.beta).map_err(diverged(video))?;
    let l_point = tape.add(l_act, l_bkg)?;

    let mut searches = 0;
    let mut search_seconds = 0.0;
    let (l_score, l_feat, sequences) = if lc.needs_search() {
        let sequences = match fixed {
            Some(s) => s.to_vec(),
            None => {
                let start = Instant::now();
                let s = search_sequences(video, tape.value(hv.phat), &mined, cfg)?;
                search_seconds = start.elapsed().as_secs_f64();
                searches = s.len();
                s
            }
        };
        let mut rs = Vec::with_capacity(sequences.len());
        for seq in &sequences {
            rs.push(completeness_on_tape(&mut tape, hv.phat, seq, lc.delta, cfg.variant).map_err(diverged(video))?);
        }
        let l_score = score_contrastive_loss(&mut tape, &rs, lc.beta).map_err(diverged(video))?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut groups = Vec::with_capacity(sequences.len());
        for seq in &sequences {
            let mut g = Vec::with_capacity(seq.spans.len());
            for span in &seq.spans {
                let samples = soi_sample(span, &mut rng);
                g.push(InstanceFeature {
                    feature: soi_pool(&mut tape, hv.f, &samples).map_err(diverged(video))?,
                    is_action: span.is_action,
                });
            }
            groups.push(g);
        }
        let l_feat = feature_contrastive_loss(&mut tape, &groups, lc.tau).map_err(diverged(video))?;
        (l_score, l_feat, sequences)
    } else {
        let z1 = tape.constant(Matrix::scalar(0.0))?;
        let z2 = tape.constant(Matrix::scalar(0.0))?;
        (z1, z2, Vec::new())
    };

    let comps = [l_video, l_point, l_score, l_feat];
    let total = total_loss(&mut tape, comps, lc.lambdas).map_err(diverged(video))?;
    let total_value = tape.scalar(total);
    if !total_value.is_finite() {
        return Err(Error::Diverged {
            video_id: video.video_id.clone(),
            detail: format!("total loss {total_value}"),
        });
    }
    let g = tape.backward(total).map_err(diverged(video))?;
    let grads = params
        .tensors()
        .iter()
        .enumerate()
        .map(|(k, t)| g.param(ParamId(k)).cloned().unwrap_or_else(|| Matrix::zeros(t.rows(), t.cols())))
        .collect();
    Ok(VideoOutcome {
        video_id: video.video_id.clone(),
        components: comps.map(|v| tape.scalar(v)),
        total: total_value,
        grads,
        sequences,
        searches,
        search_seconds,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub loss: f64,
    pub components: [f64; 4],
    pub searches: usize,
    pub search_seconds: f64,
}

/// One Adam update on the batch-mean objective. `fixed[i]` optionally
/// supplies cached sequences for `batch[i]`.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    batch: &[&VideoRecord],
    params: &mut HeadParams,
    adam: &mut Adam,
    n_classes: usize,
    cfg: &TrainConfig,
    step_seed: u64,
    fixed: Option<&[&[LabelSequence]]>,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::invalid("batch", "must be nonempty"));
    }
    let snapshot = &*params;
    let mut outcomes: Vec<VideoOutcome> = batch
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            let seed = derive_seed(&[step_seed, id_hash(&v.video_id)]);
            video_objective(v, snapshot, n_classes, cfg, seed, fixed.map(|f| f[i]))
        })
        .collect::<Result<Vec<_>>>()?;
    // fixed reduction order
    outcomes.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    let n = outcomes.len() as f64;
    let mut grads: Vec<Matrix> = params.tensors().iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect();
    let mut m = StepMetrics::default();
    for o in &outcomes {
        for (acc, g) in grads.iter_mut().zip(&o.grads) {
            acc.add_assign(g);
        }
        m.loss += o.total / n;
        for k in 0..4 {
            m.components[k] += o.components[k] / n;
        }
        m.searches += o.searches;
        m.search_seconds += o.search_seconds;
    }
    for g in &mut grads {
        g.scale_assign(1.0 / n);
    }
    adam.step(params, &grads);
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
    pub components: [f64; 4],
    /// Pooled training-set frame accuracy of the searched sequences.
    pub sequence_accuracy: Option<f64>,
    pub searches: usize,
    /// Wall-clock seconds spent in sequence search (summed over workers).
    pub search_seconds: f64,
    pub epoch_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
}

impl TrainReport {
    pub fn final_sequence_accuracy(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|e| e.sequence_accuracy)
    }
}

/// Frame accuracy of searched sequences against ground truth, pooled over
/// every (video, present class) pair.
pub fn training_sequence_accuracy(videos: &[VideoRecord], params: &HeadParams, cfg: &TrainConfig) -> Result<f64> {
    let per_video: Vec<(usize, usize)> = videos
        .par_iter()
        .map(|v| -> Result<(usize, usize)> {
            let out = forward(&v.features, params)?;
            let mined = mine(v, &out.q, cfg)?;
            let seqs = search_sequences(v, &out.phat, &mined, cfg)?;
            let mut hits = 0;
            let mut total = 0;
            for s in &seqs {
                let truth = v.truth_labels(s.class_id);
                let acc = sequence_accuracy(s, &truth)?;
                hits += (acc * truth.len() as f64).round() as usize;
                total += truth.len();
            }
            Ok((hits, total))
        })
        .collect::<Result<Vec<_>>>()?;
    let (h, t) = per_video.iter().fold((0, 0), |(a, b), (h, t)| (a + h, b + t));
    if t == 0 {
        return Err(Error::invalid("videos", "no labeled video"));
    }
    Ok(h as f64 / t as f64)
}

/// Initial parameters for a seed.
pub fn init_params(feature_dim: usize, n_classes: usize, seed: u64) -> Result<HeadParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x1417]));
    HeadParams::init(feature_dim, n_classes, &mut rng)
}

/// Trains from seeded initial parameters and writes the final checkpoint
/// to `checkpoint` when given.
pub fn run_training(
    videos: &[VideoRecord],
    n_classes: usize,
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<(HeadParams, TrainReport)> {
    cfg.validate()?;
    let first = videos.first().ok_or_else(|| Error::invalid("videos", "training set is empty"))?;
    let d = first.features.rows();
    for v in videos {
        if v.features.rows() != d {
            return Err(Error::dims("run_training", format!("D = {d}"), format!("D = {} in {}", v.features.rows(), v.video_id)));
        }
        v.points.validate(v.len())?;
    }
    let mut params = init_params(d, n_classes, cfg.seed)?;
    let mut adam = Adam::new(&params, cfg.learning_rate);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..videos.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0x5eed]));
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_searches = 0;
        let mut epoch_search_seconds = 0.0;
        let cache: Option<Vec<Vec<LabelSequence>>> = if cfg.search_frequency == SearchFrequency::PerEpoch && cfg.loss.needs_search() {
            let t0 = Instant::now();
            let c = videos
                .par_iter()
                .map(|v| {
                    let out = forward(&v.features, &params)?;
                    let mined = mine(v, &out.q, cfg)?;
                    search_sequences(v, &out.phat, &mined, cfg)
                })
                .collect::<Result<Vec<_>>>()?;
            epoch_search_seconds += t0.elapsed().as_secs_f64();
            epoch_searches += c.iter().map(Vec::len).sum::<usize>();
            Some(c)
        } else {
            None
        };
        let mut loss = 0.0;
        let mut comps = [0.0; 4];
        let mut n_steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&VideoRecord> = chunk.iter().map(|&i| &videos[i]).collect();
            let fixed: Option<Vec<&[LabelSequence]>> = cache.as_ref().map(|c| chunk.iter().map(|&i| c[i].as_slice()).collect());
            let seed = derive_seed(&[cfg.seed, epoch as u64, step as u64]);
            let m = train_step(&batch, &mut params, &mut adam, n_classes, cfg, seed, fixed.as_deref())?;
            loss += m.loss;
            for k in 0..4 {
                comps[k] += m.components[k];
            }
            epoch_searches += m.searches;
            epoch_search_seconds += m.search_seconds;
            n_steps += 1;
        }
        let n = n_steps.max(1) as f64;
        let is_last = epoch + 1 == cfg.epochs;
        let seq_acc = if cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || is_last) {
            Some(training_sequence_accuracy(videos, &params, cfg)?)
        } else {
            None
        };
        let rep = EpochReport {
            epoch: epoch + 1,
            loss: loss / n,
            components: comps.map(|c| c / n),
            sequence_accuracy: seq_acc,
            searches: epoch_searches,
            search_seconds: epoch_search_seconds,
            epoch_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} loss {:.4} [{:.4} {:.4} {:.4} {:.4}] seq_acc {:?} search {:.2}s",
            rep.epoch,
            rep.loss,
            rep.components[0],
            rep.components[1],
            rep.components[2],
            rep.components[3],
            rep.sequence_accuracy,
            rep.search_seconds
        );
        report.epochs.push(rep);
    }
    if let Some(path) = checkpoint {
        params.save(path)?;
    }
    Ok((params, report))
}
