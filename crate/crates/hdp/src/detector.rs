//! Binary real/fake detector: a feature extractor plus a linear head with a
//! logistic output, with gradient access for both training and input-space
//! perturbation, frozen teacher snapshots, and checkpoint persistence.

use crate::error::{Error, Result};
use crate::nn::{Cache, SmallCnn, FEAT_DIM};
use crate::scalar::sigmoid;
use crate::synthdata::Image;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub type FeatureVec = Vec<f32>;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HDPM";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const ARCH_ID: &str = "cnn3-16-32-64";

/// Probabilities reported by `forward_prob` are clamped into this open
/// interval so downstream logs never see an exact 0 or 1.
const PROB_MIN: f32 = 1e-7;
const PROB_MAX: f32 = 1.0 - 1e-7;

/// Anything that scores images and exposes the input-space gradient needed
/// for universal perturbation synthesis. The production detector implements
/// it; tests use small analytic probes.
pub trait Classifier {
    fn input_shape(&self) -> (usize, usize, usize);

    /// P(fake) per image.
    fn prob_fake(&self, batch: &[Image]) -> Result<Vec<f32>>;

    /// 1 iff P(fake) >= 0.5 (ties predict fake).
    fn predict(&self, batch: &[Image]) -> Result<Vec<u8>> {
        Ok(self
            .prob_fake(batch)?
            .into_iter()
            .map(|p| u8::from(p >= 0.5))
            .collect())
    }

    /// Gradient of mean_i log P(fake | x_i + p) with respect to the shared
    /// additive perturbation p, evaluated at the given batch (already
    /// perturbed by the caller).
    fn grad_mean_log_fake(&self, batch: &[Image]) -> Result<Vec<f32>>;
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DetectorMeta {
    pub arch: String,
    pub feat_dim: usize,
    pub input_shape: (usize, usize, usize),
    pub stage: u32,
}

/// The detector: extractor g (conv stack to a d-dim feature) and a linear
/// classification head. Parameters live in one flat f32 buffer.
#[derive(Debug, Clone)]
pub struct Detector {
    pub meta: DetectorMeta,
    net: SmallCnn<f32>,
    frozen: bool,
}

impl Detector {
    pub fn new(c: usize, h: usize, w: usize, seed: u64) -> Detector {
        Detector {
            meta: DetectorMeta {
                arch: ARCH_ID.to_string(),
                feat_dim: FEAT_DIM,
                input_shape: (c, h, w),
                stage: 0,
            },
            net: SmallCnn::new(c, h, w, seed),
            frozen: false,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn params(&self) -> &[f32] {
        &self.net.params
    }

    /// Mutable parameter access for the optimizer; refused on frozen clones.
    pub fn params_mut(&mut self) -> Result<&mut [f32]> {
        if self.frozen {
            return Err(Error::FrozenDetector);
        }
        Ok(&mut self.net.params)
    }

    fn check_batch(&self, batch: &[Image]) -> Result<()> {
        for img in batch {
            if img.shape() != self.meta.input_shape {
                return Err(Error::ShapeMismatch {
                    expected: format!("{:?}", self.meta.input_shape),
                    got: format!("{:?}", img.shape()),
                });
            }
        }
        Ok(())
    }

    /// Forward pass returning the per-image cache (activations + logit).
    pub fn forward_cached(&self, img: &Image) -> Cache<f32> {
        self.net.forward(&img.pixels)
    }

    /// P(fake) per image, clamped into (0, 1).
    pub fn forward_prob(&self, batch: &[Image]) -> Result<Vec<f32>> {
        self.check_batch(batch)?;
        Ok(batch
            .iter()
            .map(|img| {
                self.net
                    .forward(&img.pixels)
                    .prob
                    .clamp(PROB_MIN, PROB_MAX)
            })
            .collect())
    }

    /// Feature vectors g(x), dimension `meta.feat_dim`.
    pub fn features(&self, batch: &[Image]) -> Result<Vec<FeatureVec>> {
        self.check_batch(batch)?;
        Ok(batch
            .iter()
            .map(|img| self.net.forward(&img.pixels).feat)
            .collect())
    }

    /// Backward for one cached image; gradients accumulate into `grads`
    /// (flat, same layout as `params`), and optionally into `d_input`.
    pub fn backward_into(
        &self,
        cache: &Cache<f32>,
        d_logit: f32,
        d_feat: Option<&[f32]>,
        grads: Option<&mut [f32]>,
        d_input: Option<&mut [f32]>,
    ) {
        self.net.backward(cache, d_logit, d_feat, grads, d_input);
    }

    /// Deep copy whose parameters can never be updated again. Outputs equal
    /// the source's at clone time.
    pub fn clone_frozen(&self) -> Detector {
        let mut c = self.clone();
        c.frozen = true;
        c
    }

    // ── checkpoint persistence ───────────────────────────────────────────

    /// File layout: magic "HDPM", u32 version, u32 metadata length, JSON
    /// metadata, then the parameter blob as little-endian f32 in flat layout
    /// order (conv1.w, conv1.b, conv2.w, conv2.b, conv3.w, conv3.b, head.w,
    /// head.b).
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta)?;
        f.write_all(&(meta.len() as u32).to_le_bytes())?;
        f.write_all(&meta)?;
        for p in self.params() {
            f.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Detector> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)
            .map_err(|_| Error::CorruptFile("checkpoint too short".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::CorruptFile("bad checkpoint magic".into()));
        }
        let mut b4 = [0u8; 4];
        f.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                got: version,
            });
        }
        f.read_exact(&mut b4)?;
        let meta_len = u32::from_le_bytes(b4) as usize;
        let mut meta_buf = vec![0u8; meta_len];
        f.read_exact(&mut meta_buf)
            .map_err(|_| Error::CorruptFile("truncated metadata".into()))?;
        let meta: DetectorMeta = serde_json::from_slice(&meta_buf)
            .map_err(|_| Error::CorruptFile("invalid checkpoint metadata".into()))?;
        if meta.arch != ARCH_ID {
            return Err(Error::CorruptFile(format!(
                "unknown architecture id '{}'",
                meta.arch
            )));
        }
        let (c, h, w) = meta.input_shape;
        let mut net: SmallCnn<f32> = SmallCnn::zeroed(c, h, w);
        let mut buf = vec![0u8; net.param_count() * 4];
        f.read_exact(&mut buf)
            .map_err(|_| Error::CorruptFile("truncated parameter blob".into()))?;
        let mut trailing = [0u8; 1];
        if f.read(&mut trailing)? != 0 {
            return Err(Error::CorruptFile("trailing bytes after parameters".into()));
        }
        for (i, p) in net.params.iter_mut().enumerate() {
            *p = f32::from_le_bytes(buf[i * 4..i * 4 + 4].try_into().unwrap());
        }
        Ok(Detector {
            meta,
            net,
            frozen: false,
        })
    }
}

impl Classifier for Detector {
    fn input_shape(&self) -> (usize, usize, usize) {
        self.meta.input_shape
    }

    fn prob_fake(&self, batch: &[Image]) -> Result<Vec<f32>> {
        self.forward_prob(batch)
    }

    fn grad_mean_log_fake(&self, batch: &[Image]) -> Result<Vec<f32>> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        self.check_batch(batch)?;
        let (c, h, w) = self.meta.input_shape;
        let mut grad = vec![0.0f32; c * h * w];
        let inv_n = 1.0 / batch.len() as f32;
        for img in batch {
            let cache = self.net.forward(&img.pixels);
            // d/dlogit of log sigmoid(logit) = 1 - sigma(logit)
            let d_logit = (1.0 - sigmoid(cache.logit)) * inv_n;
            self.net
                .backward(&cache, d_logit, None, None, Some(&mut grad));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        Ok(grad)
    }
}
