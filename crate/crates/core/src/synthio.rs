//! Synthetic point-labeled datasets and the on-disk formats: PTAL feature
//! files, JSON manifests, and annotation exports.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::derive_seed;
use crate::metrics::GroundTruthInstance;
use crate::mining::{PointAnnotation, PointLabel, PointSet};
use crate::ndiff::Matrix;

pub const FEATURE_MAGIC: &[u8; 4] = b"PTAL";
pub const FEATURE_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Distribution of simulated point labels within an instance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PointDistribution {
    Uniform,
    #[default]
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    /// Training videos.
    pub n_videos: usize,
    pub n_test_videos: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub feature_dim: usize,
    pub instances_min: usize,
    pub instances_max: usize,
    pub length_min: usize,
    pub length_max: usize,
    /// Minimum background segments between consecutive instances.
    pub min_gap: usize,
    /// Largest number of distinct classes in one video.
    pub classes_per_video: usize,
    /// Feature noise standard deviation.
    pub noise: f64,
    /// Norm of the class and background prototypes.
    pub separation: f64,
    /// Class-signal mixing weight at instance boundaries; 1 gives
    /// homogeneous instances, lower values fade the class toward the edges.
    pub edge_strength: f64,
    pub points: PointDistribution,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 3,
            n_videos: 60,
            n_test_videos: 20,
            t_min: 80,
            t_max: 120,
            feature_dim: 32,
            instances_min: 2,
            instances_max: 4,
            length_min: 6,
            length_max: 18,
            min_gap: 2,
            classes_per_video: 2,
            noise: 0.5,
            separation: 1.0,
            edge_strength: 0.3,
            points: PointDistribution::Gaussian,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_classes", self.n_classes),
            ("t_min", self.t_min),
            ("feature_dim", self.feature_dim),
            ("instances_min", self.instances_min),
            ("length_min", self.length_min),
            ("classes_per_video", self.classes_per_video),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        if self.t_min > self.t_max {
            return Err(Error::invalid("t_min", "exceeds t_max"));
        }
        if self.instances_min > self.instances_max {
            return Err(Error::invalid("instances_min", "exceeds instances_max"));
        }
        if self.length_min > self.length_max {
            return Err(Error::invalid("length_min", "exceeds length_max"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise", "must be finite and non-negative"));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::invalid("separation", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.edge_strength) {
            return Err(Error::invalid("edge_strength", "must lie in [0, 1]"));
        }
        let worst = self.instances_max * self.length_max + self.instances_max.saturating_sub(1) * self.min_gap;
        if worst > self.t_min {
            return Err(Error::InfeasiblePacking(format!(
                "{} instances of length {} with gap {} need {worst} segments but t_min = {}",
                self.instances_max, self.length_max, self.min_gap, self.t_min
            )));
        }
        Ok(())
    }
}

/// One video: features `D × T`, ground truth, and action points.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub features: Matrix,
    pub gt: Vec<GroundTruthInstance>,
    pub points: PointSet,
}

impl VideoRecord {
    pub fn len(&self) -> usize {
        self.features.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.features.cols() == 0
    }

    /// Multi-hot video labels derived from the action points.
    pub fn video_labels(&self, n_classes: usize) -> Vec<f64> {
        let mut y = vec![0.0; n_classes];
        for c in self.points.classes() {
            if c < n_classes {
                y[c] = 1.0;
            }
        }
        y
    }

    /// Per-segment 0/1 ground truth for `class`.
    pub fn truth_labels(&self, class: usize) -> Vec<u8> {
        let mut out = vec![0u8; self.len()];
        for g in self.gt.iter().filter(|g| g.class_id == class) {
            for v in &mut out[g.start - 1..g.end] {
                *v = 1;
            }
        }
        out
    }

    /// Checks shapes, GT disjointness, and the one-point-per-instance rule.
    pub fn validate(&self) -> Result<()> {
        let t_len = self.len();
        self.points.validate(t_len)?;
        for g in &self.gt {
            if g.start == 0 || g.start > g.end || g.end > t_len {
                return Err(Error::invalid("gt", format!("span ({}, {}) outside 1..={t_len}", g.start, g.end)));
            }
        }
        for (i, a) in self.gt.iter().enumerate() {
            for b in &self.gt[i + 1..] {
                if a.class_id == b.class_id && a.start <= b.end && b.start <= a.end {
                    return Err(Error::invalid("gt", "same-class instances overlap"));
                }
            }
        }
        if self.points.action.len() != self.gt.len() {
            return Err(Error::invalid("points", "need exactly one action point per instance"));
        }
        for g in &self.gt {
            let inside = self
                .points
                .action
                .iter()
                .filter(|p| p.label == PointLabel::Action(g.class_id) && p.t >= g.start && p.t <= g.end)
                .count();
            if inside != 1 {
                return Err(Error::invalid("points", format!("instance ({}, {}) holds {inside} points", g.start, g.end)));
            }
        }
        Ok(())
    }
}

/// Train and test splits plus the prototypes that generated them.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub train: Vec<VideoRecord>,
    pub test: Vec<VideoRecord>,
    pub prototypes: Matrix,
    pub background_prototype: Vec<f64>,
}

fn unit_vector<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// One point per instance, carrying the instance's class.
pub fn sample_points_with<R: Rng>(gt: &[GroundTruthInstance], dist: PointDistribution, rng: &mut R) -> PointSet {
    let action = gt
        .iter()
        .map(|g| {
            let t = match dist {
                PointDistribution::Uniform => rng.random_range(g.start..=g.end),
                PointDistribution::Gaussian => {
                    let mid = (g.start + g.end) as f64 / 2.0;
                    let sigma = (g.end - g.start + 1) as f64 / 6.0;
                    let x: f64 = Normal::new(mid, sigma).expect("positive sigma").sample(rng);
                    (x.round().max(g.start as f64).min(g.end as f64)) as usize
                }
            };
            PointAnnotation {
                t,
                label: PointLabel::Action(g.class_id),
            }
        })
        .collect();
    PointSet::new(action, Vec::new())
}

pub fn sample_points(gt: &[GroundTruthInstance], dist: PointDistribution, seed: u64) -> PointSet {
    sample_points_with(gt, dist, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Class-signal weight at relative position `r ∈ (0, 1)` inside an instance.
fn profile(r: f64, edge: f64) -> f64 {
    edge + (1.0 - edge) * (std::f64::consts::PI * r).sin()
}

fn generate_video<R: Rng>(
    spec: &SyntheticSpec,
    video_id: String,
    protos: &Matrix,
    bg: &[f64],
    rng: &mut R,
) -> Result<VideoRecord> {
    let t_len = rng.random_range(spec.t_min..=spec.t_max);
    let n = rng.random_range(spec.instances_min..=spec.instances_max);
    let lengths: Vec<usize> = (0..n).map(|_| rng.random_range(spec.length_min..=spec.length_max)).collect();
    let used = lengths.iter().sum::<usize>() + (n - 1) * spec.min_gap;
    if used > t_len {
        return Err(Error::InfeasiblePacking(format!("{video_id}: {used} segments needed, T = {t_len}")));
    }
    // distribute the slack over n+1 gaps
    let slack = t_len - used;
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    let n_cls = rng.random_range(1..=spec.classes_per_video.min(spec.n_classes).min(n));
    let mut all: Vec<usize> = (0..spec.n_classes).collect();
    all.shuffle(rng);
    let classes = &all[..n_cls];
    let mut inst_classes: Vec<usize> = (0..n).map(|i| classes[i % n_cls]).collect();
    inst_classes.shuffle(rng);

    let mut gt = Vec::with_capacity(n);
    let mut cursor = 1usize;
    let mut prev_cut = 0usize;
    for (i, &len) in lengths.iter().enumerate() {
        cursor += cuts[i] - prev_cut;
        prev_cut = cuts[i];
        gt.push(GroundTruthInstance {
            video_id: video_id.clone(),
            class_id: inst_classes[i],
            start: cursor,
            end: cursor + len - 1,
        });
        cursor += len + spec.min_gap;
    }

    let d = spec.feature_dim;
    let mut features = Matrix::zeros(d, t_len);
    let mut weight = vec![(usize::MAX, 0.0); t_len];
    for g in &gt {
        let len = g.end - g.start + 1;
        for t in g.start..=g.end {
            let r = ((t - g.start) as f64 + 0.5) / len as f64;
            weight[t - 1] = (g.class_id, profile(r, spec.edge_strength));
        }
    }
    for (t, &(class, a)) in weight.iter().enumerate() {
        for k in 0..d {
            let base = if class == usize::MAX {
                bg[k]
            } else {
                a * protos.get(class, k) + (1.0 - a) * bg[k]
            };
            let noise: f64 = rng.sample(StandardNormal);
            let x = spec.separation * base + spec.noise * noise;
            // stored as f32; quantize now so reloads compare equal
            features.set(k, t, x as f32 as f64);
        }
    }
    let points = sample_points_with(&gt, spec.points, rng);
    Ok(VideoRecord {
        video_id,
        features,
        gt,
        points,
    })
}

/// Seeded generation of both splits.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut proto_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[spec.seed, 0]));
    let mut protos = Matrix::zeros(spec.n_classes, spec.feature_dim);
    for c in 0..spec.n_classes {
        for (k, v) in unit_vector(spec.feature_dim, &mut proto_rng).into_iter().enumerate() {
            protos.set(c, k, v);
        }
    }
    let bg = unit_vector(spec.feature_dim, &mut proto_rng);
    let split = |tag: u64, name: &str, count: usize| -> Result<Vec<VideoRecord>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[spec.seed, tag]));
        (0..count)
            .map(|i| generate_video(spec, format!("{name}_{i:04}"), &protos, &bg, &mut rng))
            .collect()
    };
    let train = split(1, "train", spec.n_videos)?;
    let test = split(2, "test", spec.n_test_videos)?;
    Ok(SyntheticDataset {
        train,
        test,
        prototypes: protos,
        background_prototype: bg,
    })
}

/// Encodes a `D × T` matrix as a PTAL byte buffer.
pub fn encode_features(m: &Matrix) -> Vec<u8> {
    let (d, t_len) = m.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * d * t_len);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(t_len as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for t in 0..t_len {
        for k in 0..d {
            out.extend_from_slice(&(m.get(k, t) as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Matrix> {
    let truncated = |needed| Error::Truncated {
        path: path.to_path_buf(),
        needed,
        found: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(HEADER_LEN));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "PTAL",
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(HEADER_LEN));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != FEATURE_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let (t_len, d) = (u32_at(8) as usize, u32_at(12) as usize);
    let needed = HEADER_LEN + 4 * t_len * d;
    if bytes.len() < needed {
        return Err(truncated(needed));
    }
    let mut m = Matrix::zeros(d, t_len);
    let mut off = HEADER_LEN;
    for t in 0..t_len {
        for k in 0..d {
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            m.set(k, t, f64::from(v));
            off += 4;
        }
    }
    Ok(m)
}

pub fn write_features(path: &Path, m: &Matrix) -> Result<()> {
    fs::write(path, encode_features(m)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanEntry {
    pub class_id: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointEntry {
    pub t: usize,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    /// Relative to the manifest's directory.
    pub feature_path: String,
    pub t: usize,
    pub d: usize,
    pub gt: Vec<SpanEntry>,
    pub points: Vec<PointEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub n_classes: usize,
    pub feature_dim: usize,
    pub videos: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn video_ids(&self) -> Vec<String> {
        self.videos.iter().map(|v| v.video_id.clone()).collect()
    }
}

fn entry_for(v: &VideoRecord, feature_path: String) -> ManifestEntry {
    ManifestEntry {
        video_id: v.video_id.clone(),
        feature_path,
        t: v.features.cols(),
        d: v.features.rows(),
        gt: v
            .gt
            .iter()
            .map(|g| SpanEntry {
                class_id: g.class_id,
                start: g.start,
                end: g.end,
            })
            .collect(),
        points: v
            .points
            .action
            .iter()
            .filter_map(|p| match p.label {
                PointLabel::Action(c) => Some(PointEntry { t: p.t, class_id: c }),
                PointLabel::Background => None,
            })
            .collect(),
    }
}

/// Writes feature files under `dir/features/` and returns the manifest.
pub fn write_split(dir: &Path, videos: &[VideoRecord], n_classes: usize, feature_dim: usize) -> Result<Manifest> {
    let fdir = dir.join("features");
    fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
    let mut entries = Vec::with_capacity(videos.len());
    for v in videos {
        let rel = format!("features/{}.ptal", v.video_id);
        write_features(&dir.join(&rel), &v.features)?;
        entries.push(entry_for(v, rel));
    }
    Ok(Manifest {
        version: MANIFEST_VERSION,
        n_classes,
        feature_dim,
        videos: entries,
    })
}

pub fn save_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: m.version,
        });
    }
    Ok(m)
}

/// Reads every video listed in the manifest at `path`.
pub fn load_videos(path: &Path) -> Result<(Manifest, Vec<VideoRecord>)> {
    let manifest = load_manifest(path)?;
    let base: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for e in &manifest.videos {
        let fpath = base.join(&e.feature_path);
        let features = read_features(&fpath)?;
        if features.shape() != (e.d, e.t) {
            return Err(Error::dims("manifest", format!("{}x{}", e.d, e.t), format!("{}x{} in {}", features.rows(), features.cols(), fpath.display())));
        }
        let gt = e
            .gt
            .iter()
            .map(|s| GroundTruthInstance {
                video_id: e.video_id.clone(),
                class_id: s.class_id,
                start: s.start,
                end: s.end,
            })
            .collect();
        let action = e
            .points
            .iter()
            .map(|p| PointAnnotation {
                t: p.t,
                label: PointLabel::Action(p.class_id),
            })
            .collect();
        let v = VideoRecord {
            video_id: e.video_id.clone(),
            features,
            gt,
            points: PointSet::new(action, Vec::new()),
        };
        v.points.validate(v.len())?;
        videos.push(v);
    }
    Ok((manifest, videos))
}

/// Human-readable annotation dump: ground truth and points per video.
pub fn export_annotations(path: &Path, manifest: &Manifest) -> Result<()> {
    #[derive(Serialize)]
    struct Ann<'a> {
        video_id: &'a str,
        t: usize,
        gt: &'a [SpanEntry],
        points: &'a [PointEntry],
    }
    let anns: Vec<Ann> = manifest
        .videos
        .iter()
        .map(|e| Ann {
            video_id: &e.video_id,
            t: e.t,
            gt: &e.gt,
            points: &e.points,
        })
        .collect();
    let text = serde_json::to_string_pretty(&anns)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes `train.json`, `test.json`, `annotations_{split}.json` and feature
/// files under `dir`.
pub fn write_dataset(dir: &Path, ds: &SyntheticDataset, spec: &SyntheticSpec) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for (name, videos) in [("train", &ds.train), ("test", &ds.test)] {
        let m = write_split(dir, videos, spec.n_classes, spec.feature_dim)?;
        let mpath = dir.join(format!("{name}.json"));
        save_manifest(&mpath, &m)?;
        export_annotations(&dir.join(format!("annotations_{name}.json")), &m)?;
        out.push(mpath);
    }
    Ok((out[0].clone(), out[1].clone()))
}
