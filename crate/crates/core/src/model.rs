//! Localization head: embedding conv + ReLU, class and background branches,
//! score fusion, and top-k temporal pooling.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ndiff::{ConvParams, Matrix, ParamId, Tape, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PTLH";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const EMBED_KERNEL: usize = 3;
pub const HEAD_KERNEL: usize = 1;

/// Trainable parameters of the head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub embed: ConvParams,
    pub classifier: ConvParams,
    pub background: ConvParams,
}

/// Forward values for one video. `f` is `D x T`, `p` and `phat` are `C x T`,
/// `q` is `1 x T`.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub f: Matrix,
    pub p: Matrix,
    pub q: Matrix,
    pub phat: Matrix,
}

/// Tape handles produced by [`forward_on_tape`].
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub f: Var,
    pub p: Var,
    pub q: Var,
    pub phat: Var,
}

impl HeadParams {
    pub fn zeros(d: usize, c: usize) -> Result<Self> {
        Ok(Self {
            embed: ConvParams::zeros(d, d, EMBED_KERNEL)?,
            classifier: ConvParams::zeros(c, d, HEAD_KERNEL)?,
            background: ConvParams::zeros(1, d, HEAD_KERNEL)?,
        })
    }

    pub fn init<R: Rng>(d: usize, c: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            embed: ConvParams::uniform(d, d, EMBED_KERNEL, rng)?,
            classifier: ConvParams::uniform(c, d, HEAD_KERNEL, rng)?,
            background: ConvParams::uniform(1, d, HEAD_KERNEL, rng)?,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.embed.in_channels()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.out_channels()
    }

    /// Parameter tensors in declaration order; index `i` is `ParamId(i)`.
    pub fn tensors(&self) -> [&Matrix; 6] {
        [
            &self.embed.weight,
            &self.embed.bias,
            &self.classifier.weight,
            &self.classifier.bias,
            &self.background.weight,
            &self.background.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 6] {
        [
            &mut self.embed.weight,
            &mut self.embed.bias,
            &mut self.classifier.weight,
            &mut self.classifier.bias,
            &mut self.background.weight,
            &mut self.background.bias,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.feature_dim();
        for (name, conv, out) in [
            ("embed", &self.embed, d),
            ("classifier", &self.classifier, self.num_classes()),
            ("background", &self.background, 1),
        ] {
            conv.validate()?;
            if conv.in_channels() != d || conv.out_channels() != out {
                return Err(Error::dims(
                    "HeadParams",
                    format!("{name}: {d} -> {out}"),
                    format!("{name}: {} -> {}", conv.in_channels(), conv.out_channels()),
                ));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [
            CHECKPOINT_VERSION,
            self.feature_dim() as u32,
            self.num_classes() as u32,
            self.embed.kernel as u32,
            self.classifier.kernel as u32,
            self.background.kernel as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for t in self.tensors() {
            for v in t.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = |needed| Error::Truncated {
            path: path.to_path_buf(),
            needed,
            found: bytes.len(),
        };
        if bytes.len() < 4 {
            return Err(truncated(4));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "PTLH",
            });
        }
        if bytes.len() < 28 {
            return Err(truncated(28));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let version = u32_at(0) as u32;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                found: version,
            });
        }
        let (d, c) = (u32_at(1), u32_at(2));
        let kernels = [u32_at(3), u32_at(4), u32_at(5)];
        let mut params = Self {
            embed: ConvParams::zeros(d, d, kernels[0])?,
            classifier: ConvParams::zeros(c, d, kernels[1])?,
            background: ConvParams::zeros(1, d, kernels[2])?,
        };
        let total: usize = params.tensors().iter().map(|t| t.len()).sum();
        let needed = 28 + 8 * total;
        if bytes.len() < needed {
            return Err(truncated(needed));
        }
        let mut offset = 28;
        for t in params.tensors_mut() {
            for v in t.as_mut_slice() {
                *v = f64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap());
                offset += 8;
            }
        }
        Ok(params)
    }
}

/// Records the head on `tape`; parameters are registered as `ParamId(0..6)`.
pub fn forward_on_tape(tape: &mut Tape, features: &Matrix, params: &HeadParams) -> Result<HeadVars> {
    if features.rows() != params.feature_dim() {
        return Err(Error::dims(
            "forward",
            format!("D = {}", params.feature_dim()),
            format!("D = {}", features.rows()),
        ));
    }
    if features.cols() == 0 {
        return Err(Error::dims("forward", "T >= 1", "T = 0"));
    }
    let [ew, eb, cw, cb, bw, bb] = params.tensors();
    let x = tape.constant(features.clone())?;
    let ew = tape.param(ParamId(0), ew.clone())?;
    let eb = tape.param(ParamId(1), eb.clone())?;
    let cw = tape.param(ParamId(2), cw.clone())?;
    let cb = tape.param(ParamId(3), cb.clone())?;
    let bw = tape.param(ParamId(4), bw.clone())?;
    let bb = tape.param(ParamId(5), bb.clone())?;

    let h = tape.conv1d(x, ew, eb, params.embed.kernel)?;
    let f = tape.relu(h)?;
    let pl = tape.conv1d(f, cw, cb, params.classifier.kernel)?;
    let p = tape.sigmoid(pl)?;
    let ql = tape.conv1d(f, bw, bb, params.background.kernel)?;
    let q = tape.sigmoid(ql)?;
    let not_bg = tape.one_minus(q)?;
    let phat = tape.mul_row_broadcast(p, not_bg)?;
    Ok(HeadVars { f, p, q, phat })
}

/// Inference-only forward pass.
pub fn forward(features: &Matrix, params: &HeadParams) -> Result<ModelOutput> {
    let mut tape = Tape::new();
    let v = forward_on_tape(&mut tape, features, params)?;
    Ok(ModelOutput {
        f: tape.value(v.f).clone(),
        p: tape.value(v.p).clone(),
        q: tape.value(v.q).clone(),
        phat: tape.value(v.phat).clone(),
    })
}

/// `phat[c][t] = p[c][t] * (1 - q[t])`.
pub fn fuse_scores(p: &Matrix, q: &[f64]) -> Result<Matrix> {
    if p.cols() != q.len() {
        return Err(Error::dims("fuse_scores", format!("Q length {}", p.cols()), format!("Q length {}", q.len())));
    }
    let mut out = p.clone();
    for c in 0..p.rows() {
        for (t, &qt) in q.iter().enumerate() {
            out.set(c, t, p.get(c, t) * (1.0 - qt));
        }
    }
    Ok(out)
}

/// Top-k pooling size: `max(1, floor(T / 8))`.
pub fn topk_size(t_len: usize) -> usize {
    (t_len / 8).max(1)
}

/// Per-class mean of the `k` largest fused scores.
pub fn video_scores(phat: &Matrix) -> Vec<f64> {
    let k = topk_size(phat.cols());
    (0..phat.rows())
        .map(|c| {
            let mut row = phat.row(c).to_vec();
            row.sort_by(|a, b| b.total_cmp(a));
            row[..k].iter().sum::<f64>() / k as f64
        })
        .collect()
}

/// Differentiable counterpart of [`video_scores`]; returns a `C x 1` variable.
pub fn video_scores_on_tape(tape: &mut Tape, phat: Var) -> Result<Var> {
    let k = topk_size(tape.value(phat).cols());
    tape.topk_mean_rows(phat, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(d: usize, t: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::new(d, t, (0..d * t).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_params_give_half_scores() {
        let params = HeadParams::zeros(4, 2).unwrap();
        let out = forward(&random_features(4, 10, 1), &params).unwrap();
        assert!(out.p.as_slice().iter().all(|&v| v == 0.5));
        assert!(out.q.as_slice().iter().all(|&v| v == 0.5));
        assert!(out.phat.as_slice().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn single_segment_video() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = HeadParams::init(3, 2, &mut rng).unwrap();
        let out = forward(&random_features(3, 1, 3), &params).unwrap();
        assert_eq!(out.phat.shape(), (2, 1));
        assert_eq!(video_scores(&out.phat).len(), 2);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = HeadParams::init(6, 3, &mut rng).unwrap();
        let x = random_features(6, 20, 4);
        let a = forward(&x, &params).unwrap();
        let b = forward(&x, &params).unwrap();
        let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.phat), bits(&b.phat));
        assert_eq!(bits(&a.q), bits(&b.q));
    }

    #[test]
    fn dimension_mismatch() {
        let params = HeadParams::zeros(4, 2).unwrap();
        assert!(forward(&random_features(5, 10, 1), &params).is_err());
    }

    #[test]
    fn fuse_examples() {
        let p = Matrix::row_vector(vec![0.8, 0.8, 0.8]);
        let f = fuse_scores(&p, &[0.5, 0.0, 1.0]).unwrap();
        assert!((f.get(0, 0) - 0.4).abs() < 1e-15);
        assert_eq!(f.get(0, 1), 0.8);
        assert_eq!(f.get(0, 2), 0.0);
        assert!(fuse_scores(&p, &[0.1]).is_err());
    }

    #[test]
    fn video_score_examples() {
        let row8 = Matrix::row_vector(vec![0.1, 0.9, 0.3, 0.2, 0.1, 0.1, 0.1, 0.1]);
        assert_eq!(video_scores(&row8), vec![0.9]);
        let mut v16 = vec![0.1; 16];
        v16[3] = 0.9;
        v16[11] = 0.8;
        assert!((video_scores(&Matrix::row_vector(v16))[0] - 0.85).abs() < 1e-15);
        let row5 = Matrix::row_vector(vec![0.2, 0.4, 0.7, 0.1, 0.3]);
        assert_eq!(video_scores(&row5), vec![0.7]);
    }

    #[test]
    fn checkpoint_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("head.bin");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = HeadParams::init(5, 3, &mut rng).unwrap();
        params.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"PTLH");
        assert_eq!(HeadParams::load(&path).unwrap(), params);
        assert!(matches!(
            HeadParams::from_bytes(&bytes[..bytes.len() - 3], &path),
            Err(Error::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(HeadParams::from_bytes(&bad, &path), Err(Error::BadMagic { .. })));
        let mut ver = bytes;
        ver[4] = 9;
        assert!(matches!(HeadParams::from_bytes(&ver, &path), Err(Error::UnsupportedVersion { .. })));
    }

    proptest! {
        #[test]
        fn fusion_identity_and_open_interval(seed in 0u64..1000, t in 1usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = HeadParams::init(4, 3, &mut rng).unwrap();
            let out = forward(&random_features(4, t, seed + 1), &params).unwrap();
            for c in 0..3 {
                for i in 0..t {
                    let want = out.p.get(c, i) * (1.0 - out.q.get(0, i));
                    prop_assert_eq!(out.phat.get(c, i).to_bits(), want.to_bits());
                    prop_assert!(out.phat.get(c, i) > 0.0 && out.phat.get(c, i) < 1.0);
                }
            }
        }

        #[test]
        fn video_scores_permutation_invariant_and_monotone(
            row in prop::collection::vec(0.0f64..1.0, 1..40),
            bump_at in 0usize..40,
            bump in 0.0f64..0.5,
            seed in 0u64..100,
        ) {
            let base = video_scores(&Matrix::row_vector(row.clone()))[0];
            let mut shuffled = row.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
            prop_assert!((video_scores(&Matrix::row_vector(shuffled))[0] - base).abs() < 1e-12);
            let mut raised = row.clone();
            let i = bump_at % raised.len();
            raised[i] += bump;
            prop_assert!(video_scores(&Matrix::row_vector(raised))[0] >= base - 1e-15);
        }
    }
}
