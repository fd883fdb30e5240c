//! Reserve mechanism: synthesis of one universal adversarial perturbation per
//! stage from the just-trained model and its real data, with an exact L-inf
//! projection, attack-rate tracking, and pool persistence.
//!
//! A perturbation is refined by sign-gradient ascent on mean log P(fake) over
//! the real generation subset, i.e. toward the stated objective of making the
//! model call real images fake. The `paper_sign` switch flips the update to
//! the literal descending form for comparison.

use crate::detector::Classifier;
use crate::error::{Error, Result};
use crate::rng::{tag, Rng};
use crate::synthdata::Image;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const UAP_MAGIC: &[u8; 4] = b"HDPU";
pub const UAP_VERSION: u32 = 1;

/// One universal perturbation under an L-inf budget.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub delta: Vec<f32>,
    pub shape: (usize, usize, usize),
    pub epsilon: f32,
    pub stage_id: u32,
    pub achieved_attack_rate: f32,
    pub iterations_used: u32,
}

impl Perturbation {
    pub fn zeros(shape: (usize, usize, usize), epsilon: f32, stage_id: u32) -> Perturbation {
        Perturbation {
            delta: vec![0.0; shape.0 * shape.1 * shape.2],
            shape,
            epsilon,
            stage_id,
            achieved_attack_rate: 0.0,
            iterations_used: 0,
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.delta.iter().fold(0.0f32, |m, &d| m.max(d.abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UapConfig {
    pub epsilon: f32,
    pub alpha: f32,
    /// Attack-rate threshold that terminates generation.
    pub sigma: f32,
    pub max_iters: u32,
    pub gen_subset_size: usize,
    pub batch_size: usize,
    /// Use the literal descending update instead of ascending log P(fake).
    pub paper_sign: bool,
    /// Clamp x + delta to [0,1] during generation and replay.
    pub clamp_pseudo: bool,
}

impl Default for UapConfig {
    fn default() -> Self {
        UapConfig {
            epsilon: 0.15,
            alpha: 0.0001,
            sigma: 0.8,
            max_iters: 5000,
            gen_subset_size: 1000,
            batch_size: 64,
            paper_sign: false,
            clamp_pseudo: false,
        }
    }
}

impl UapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("epsilon must be positive".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidConfig("alpha must be positive".into()));
        }
        if !(self.sigma > 0.0 && self.sigma <= 1.0) {
            return Err(Error::InvalidConfig("sigma must be in (0,1]".into()));
        }
        if self.max_iters == 0 || self.gen_subset_size == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "max_iters, gen_subset_size and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn check_shape(img: &Image, shape: (usize, usize, usize)) -> Result<()> {
    if img.shape() != shape {
        return Err(Error::ShapeMismatch {
            expected: format!("{shape:?}"),
            got: format!("{:?}", img.shape()),
        });
    }
    Ok(())
}

/// Pseudo-forged samples: element-wise x + delta, no clamping, inputs
/// untouched.
pub fn make_pseudo(reals: &[Image], p: &Perturbation) -> Result<Vec<Image>> {
    reals
        .iter()
        .map(|img| {
            check_shape(img, p.shape)?;
            let mut out = img.clone();
            for (v, &d) in out.pixels.iter_mut().zip(&p.delta) {
                *v += d;
            }
            Ok(out)
        })
        .collect()
}

/// `make_pseudo` with the optional [0,1] clamp used by the ablation switch.
pub fn make_pseudo_with(reals: &[Image], p: &Perturbation, clamp: bool) -> Result<Vec<Image>> {
    let mut out = make_pseudo(reals, p)?;
    if clamp {
        for img in &mut out {
            img.clamp_unit();
        }
    }
    Ok(out)
}

/// Fraction of reals the model classifies as fake after adding the
/// perturbation.
pub fn attack_rate(m: &dyn Classifier, reals: &[Image], p: &Perturbation) -> Result<f32> {
    attack_rate_with(m, reals, p, false)
}

pub fn attack_rate_with(
    m: &dyn Classifier,
    reals: &[Image],
    p: &Perturbation,
    clamp: bool,
) -> Result<f32> {
    if reals.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let pseudo = make_pseudo_with(reals, p, clamp)?;
    let preds = m.predict(&pseudo)?;
    let fooled = preds.iter().filter(|&&y| y == 1).count();
    Ok(fooled as f32 / reals.len() as f32)
}

fn sign(g: f32) -> f32 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One sign-gradient refinement step followed by the exact L-inf projection.
///
/// The default direction ascends mean log P(fake); `paper_sign` applies the
/// literal descending update instead.
pub fn uap_step(
    p: &mut Perturbation,
    batch: &[Image],
    m: &dyn Classifier,
    alpha: f32,
    epsilon: f32,
    paper_sign: bool,
    clamp: bool,
) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let perturbed = make_pseudo_with(batch, p, clamp)?;
    let grad = m.grad_mean_log_fake(&perturbed)?;
    if grad.len() != p.delta.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} deltas", p.delta.len()),
            got: format!("{} gradient entries", grad.len()),
        });
    }
    let step = if paper_sign { -alpha } else { alpha };
    for (d, &g) in p.delta.iter_mut().zip(&grad) {
        *d = (*d + step * sign(g)).clamp(-epsilon, epsilon);
    }
    Ok(())
}

/// Outcome of `generate_uap`: the perturbation plus whether the attack-rate
/// threshold was actually reached (a warning condition when false, not an
/// error).
#[derive(Debug, Clone)]
pub struct UapGenResult {
    pub perturbation: Perturbation,
    pub reached_sigma: bool,
}

/// Synthesizes a universal perturbation for a frozen model from real samples.
///
/// Starts from zero, sweeps seeded mini-batches with `uap_step`, and checks
/// the attack rate on the whole generation subset after each full sweep
/// (including an initial check before any step). Returns the first
/// perturbation whose rate reaches sigma, otherwise the best-rate one seen
/// when `max_iters` steps are exhausted.
pub fn generate_uap(
    m: &dyn Classifier,
    reals: &[Image],
    cfg: &UapConfig,
    stage_id: u32,
    seed: u64,
) -> Result<UapGenResult> {
    generate_uap_observed(m, reals, cfg, stage_id, seed, |_, _| {})
}

/// `generate_uap` with a per-step observer receiving (iteration index, delta
/// after the step); test oracles replay the trajectory through it.
pub fn generate_uap_observed(
    m: &dyn Classifier,
    reals: &[Image],
    cfg: &UapConfig,
    stage_id: u32,
    seed: u64,
    mut observe: impl FnMut(u32, &[f32]),
) -> Result<UapGenResult> {
    cfg.validate()?;
    if reals.is_empty() {
        return Err(Error::EmptySubset);
    }
    let shape = reals[0].shape();
    let mut p = Perturbation::zeros(shape, cfg.epsilon, stage_id);

    let rate0 = attack_rate_with(m, reals, &p, cfg.clamp_pseudo)?;
    if rate0 >= cfg.sigma {
        p.achieved_attack_rate = rate0;
        p.iterations_used = 0;
        return Ok(UapGenResult {
            perturbation: p,
            reached_sigma: true,
        });
    }
    let mut best_rate = rate0;
    let mut best_delta = p.delta.clone();
    let mut best_iters = 0u32;

    let mut iters = 0u32;
    let mut sweep = 0u64;
    while iters < cfg.max_iters {
        let mut order: Vec<usize> = (0..reals.len()).collect();
        Rng::from_parts(&[tag::UAP, seed, stage_id as u64, sweep]).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Image> = chunk.iter().map(|&i| reals[i].clone()).collect();
            uap_step(
                &mut p,
                &batch,
                m,
                cfg.alpha,
                cfg.epsilon,
                cfg.paper_sign,
                cfg.clamp_pseudo,
            )?;
            iters += 1;
            observe(iters, &p.delta);
            if iters >= cfg.max_iters {
                break;
            }
        }
        let rate = attack_rate_with(m, reals, &p, cfg.clamp_pseudo)?;
        if rate >= cfg.sigma {
            p.achieved_attack_rate = rate;
            p.iterations_used = iters;
            return Ok(UapGenResult {
                perturbation: p,
                reached_sigma: true,
            });
        }
        if rate > best_rate {
            best_rate = rate;
            best_delta = p.delta.clone();
            best_iters = iters;
        }
        sweep += 1;
    }

    p.delta = best_delta;
    p.achieved_attack_rate = best_rate;
    p.iterations_used = if best_iters > 0 { best_iters } else { iters };
    Ok(UapGenResult {
        perturbation: p,
        reached_sigma: false,
    })
}

// ── Pool ───────────────────────────────────────────────────────────────────

/// Ordered pool of per-stage perturbations.
#[derive(Debug, Clone, Default)]
pub struct UapPool {
    entries: Vec<Perturbation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PoolManifestEntry {
    stage_id: u32,
    file: String,
    epsilon: f32,
    attack_rate: f32,
}

impl UapPool {
    pub fn new() -> UapPool {
        UapPool::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Perturbation {
        &self.entries[idx]
    }

    pub fn entries(&self) -> &[Perturbation] {
        &self.entries
    }

    /// Appends the next stage's perturbation; stage ids must arrive as
    /// 1, 2, 3, ... with no duplicates or gaps.
    pub fn append(&mut self, p: Perturbation) -> Result<()> {
        let expected = self.entries.last().map(|e| e.stage_id + 1).unwrap_or(1);
        if self.entries.iter().any(|e| e.stage_id == p.stage_id) {
            return Err(Error::DuplicateStage(p.stage_id));
        }
        if p.stage_id != expected {
            return Err(Error::StageOrder {
                expected,
                got: p.stage_id,
            });
        }
        self.entries.push(p);
        Ok(())
    }

    /// Writes every perturbation plus a JSON manifest into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = Vec::with_capacity(self.entries.len());
        for p in &self.entries {
            let file = format!("uap_{:03}.hdpu", p.stage_id);
            write_uap(p, &dir.join(&file))?;
            manifest.push(PoolManifestEntry {
                stage_id: p.stage_id,
                file,
                epsilon: p.epsilon,
                attack_rate: p.achieved_attack_rate,
            });
        }
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<UapPool> {
        let manifest: Vec<PoolManifestEntry> =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut pool = UapPool::new();
        for entry in manifest {
            let p = read_uap(&dir.join(&entry.file))?;
            if p.stage_id != entry.stage_id {
                return Err(Error::CorruptFile(format!(
                    "manifest stage {} does not match file stage {}",
                    entry.stage_id, p.stage_id
                )));
            }
            pool.append(p)?;
        }
        Ok(pool)
    }
}

/// File layout: magic "HDPU", u32 version, u32 C,H,W, f32 epsilon, f32
/// achieved_attack_rate, u32 stage_id, u32 iterations_used, then C*H*W
/// little-endian f32 deltas.
pub fn write_uap(p: &Perturbation, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(UAP_MAGIC)?;
    f.write_all(&UAP_VERSION.to_le_bytes())?;
    for dim in [p.shape.0 as u32, p.shape.1 as u32, p.shape.2 as u32] {
        f.write_all(&dim.to_le_bytes())?;
    }
    f.write_all(&p.epsilon.to_le_bytes())?;
    f.write_all(&p.achieved_attack_rate.to_le_bytes())?;
    f.write_all(&p.stage_id.to_le_bytes())?;
    f.write_all(&p.iterations_used.to_le_bytes())?;
    for d in &p.delta {
        f.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_uap(path: &Path) -> Result<Perturbation> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|_| Error::CorruptFile("uap file too short".into()))?;
    if &magic != UAP_MAGIC {
        return Err(Error::CorruptFile("bad uap magic".into()));
    }
    let mut b4 = [0u8; 4];
    let mut u32_le = |f: &mut dyn Read| -> Result<u32> {
        f.read_exact(&mut b4)?;
        Ok(u32::from_le_bytes(b4))
    };
    let version = u32_le(&mut f)?;
    if version != UAP_VERSION {
        return Err(Error::VersionMismatch {
            expected: UAP_VERSION,
            got: version,
        });
    }
    let c = u32_le(&mut f)? as usize;
    let h = u32_le(&mut f)? as usize;
    let w = u32_le(&mut f)? as usize;
    let epsilon = f32::from_le_bytes({
        let mut b = [0u8; 4];
        f.read_exact(&mut b)?;
        b
    });
    let achieved_attack_rate = f32::from_le_bytes({
        let mut b = [0u8; 4];
        f.read_exact(&mut b)?;
        b
    });
    let stage_id = u32_le(&mut f)?;
    let iterations_used = u32_le(&mut f)?;
    let n = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::CorruptFile("uap dims overflow".into()))?;
    let mut delta = vec![0.0f32; n];
    for d in &mut delta {
        let mut b = [0u8; 4];
        f.read_exact(&mut b)
            .map_err(|_| Error::CorruptFile("truncated uap deltas".into()))?;
        *d = f32::from_le_bytes(b);
    }
    Ok(Perturbation {
        delta,
        shape: (c, h, w),
        epsilon,
        stage_id,
        achieved_attack_rate,
        iterations_used,
    })
}

/// Expected on-disk size of one perturbation: fixed header + C*H*W f32.
pub fn uap_file_size(shape: (usize, usize, usize)) -> u64 {
    36 + 4 * (shape.0 * shape.1 * shape.2) as u64
}

pub fn uap_path_in(dir: &Path, stage_id: u32) -> PathBuf {
    dir.join(format!("uap_{stage_id:03}.hdpu"))
}
