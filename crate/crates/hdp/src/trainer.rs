//! Per-stage training: plain cross-entropy fine-tuning, the
//! historical-distribution-preserving variant (pseudo-forged replay from the
//! UAP pool plus dual feature distillation against the frozen previous
//! model), and the SFT / Joint baselines.
//!
//! Batches are balanced: half reals, half fakes, shuffled per epoch from
//! seeded streams that do not depend on the method, so the preserving path
//! with every extra term disabled reproduces plain fine-tuning bit for bit.

use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalMatrix, MetricKind};
use crate::losses::{self, DistillNorm, LossBreakdown};
use crate::optim::Adam;
use crate::rng::{tag, Rng};
use crate::synthdata::{Image, Sample, StageDataset};
use crate::uap::{self, UapConfig, UapPool};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Hdp,
    Sft,
    Joint,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Hdp => "hdp",
            Method::Sft => "sft",
            Method::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "hdp" => Ok(Method::Hdp),
            "sft" => Ok(Method::Sft),
            "joint" => Ok(Method::Joint),
            other => Err(Error::InvalidConfig(format!(
                "unknown method '{other}' (expected hdp, sft or joint)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs_per_stage: usize,
    pub beta: f64,
    pub seed: u64,
    pub uap: UapConfig,
    pub buffer_per_stage: usize,
    pub method: Method,
    /// Component toggles for the ablation grid: the pseudo-entropy term, the
    /// pseudo feature distillation, and the real feature distillation.
    pub enable_entropy: bool,
    pub enable_distill_pseudo: bool,
    pub enable_distill_real: bool,
    /// Normalize distillation per element instead of per sample.
    pub distill_per_element: bool,
    /// Record intermediate arrays for the first N batches of every stage.
    #[serde(default)]
    pub trace_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            weight_decay: 1e-5,
            batch_size: 64,
            epochs_per_stage: 10,
            beta: 1.0,
            seed: 0,
            uap: UapConfig::default(),
            buffer_per_stage: 0,
            method: Method::Hdp,
            enable_entropy: true,
            enable_distill_pseudo: true,
            enable_distill_real: true,
            distill_per_element: false,
            trace_batches: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be at least 2".into()));
        }
        if self.epochs_per_stage == 0 {
            return Err(Error::InvalidConfig("epochs must be positive".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::InvalidConfig("beta must be >= 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        self.uap.validate()
    }

    fn distill_norm(&self) -> DistillNorm {
        if self.distill_per_element {
            DistillNorm::PerElementMse
        } else {
            DistillNorm::SquaredL2Mean
        }
    }
}

/// Intermediate arrays for one recorded batch, for recomposition oracles.
#[derive(Debug, Clone)]
pub struct BatchTrace {
    pub stage_id: u32,
    pub batch_index: usize,
    pub probs_ce: Vec<f32>,
    pub labels_ce: Vec<u8>,
    pub probs_pseudo: Vec<f32>,
    pub feats_real_student: Vec<Vec<f32>>,
    pub feats_real_teacher: Vec<Vec<f32>>,
    pub feats_pseudo_student: Vec<Vec<f32>>,
    pub feats_pseudo_teacher: Vec<Vec<f32>>,
    pub breakdown: LossBreakdown,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageResult {
    pub stage_id: u32,
    pub mean_loss: LossBreakdown,
    pub wall_seconds: f64,
    pub checkpoint_path: Option<String>,
    pub uap_path: Option<String>,
    pub uap_attack_rate: Option<f32>,
    pub uap_iterations: Option<u32>,
    pub uap_reached_sigma: Option<bool>,
}

/// Everything a protocol run produces.
pub struct ProtocolRun {
    pub model: Detector,
    pub pool: Option<UapPool>,
    pub stage_results: Vec<StageResult>,
    pub matrix_acc: EvalMatrix,
    pub matrix_auc: EvalMatrix,
    pub traces: Vec<BatchTrace>,
}

/// Seeded-uniform buffer selection: ceil(k/2) reals and floor(k/2) fakes,
/// without replacement.
pub fn select_buffer(stage: &StageDataset, k: usize, seed: u64) -> Result<Vec<Sample>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let real_k = k.div_ceil(2);
    let fake_k = k / 2;
    if k > stage.train_len() || real_k > stage.train_real.len() || fake_k > stage.train_fake.len()
    {
        return Err(Error::KTooLarge {
            k,
            available: stage.train_len(),
        });
    }
    let mut rng = Rng::from_parts(&[tag::BUFFER, seed, stage.stage_id as u64]);
    let mut out = Vec::with_capacity(k);
    for &i in &rng.sample_indices(stage.train_real.len(), real_k) {
        out.push(stage.train_real[i].clone());
    }
    for &i in &rng.sample_indices(stage.train_fake.len(), fake_k) {
        out.push(stage.train_fake[i].clone());
    }
    Ok(out)
}

/// Extra anti-forgetting inputs for one preserving stage.
struct PreserveCtx<'a> {
    teacher: &'a Detector,
    pool: &'a UapPool,
}

/// What one stage's optimization produced.
pub struct StageOutcome {
    pub mean_loss: LossBreakdown,
    pub traces: Vec<BatchTrace>,
}

/// Core per-stage optimization loop shared by every method.
///
/// `reals`/`fakes` may include buffered samples from earlier stages (their
/// `stage_id` differs from `current_stage`); buffered samples contribute to
/// the cross-entropy term only. The preserving terms require `ctx`; an empty
/// pool is an error only when a pool-consuming term (entropy or pseudo
/// distillation) is enabled.
fn train_stage_inner(
    model: &mut Detector,
    reals: &[&Sample],
    fakes: &[&Sample],
    current_stage: u32,
    cfg: &TrainConfig,
    ctx: Option<&PreserveCtx>,
) -> Result<StageOutcome> {
    cfg.validate()?;
    if reals.is_empty() || fakes.is_empty() {
        return Err(Error::EmptyStage);
    }
    if let Some(c) = ctx {
        if c.pool.is_empty() && (cfg.enable_entropy || cfg.enable_distill_pseudo) {
            return Err(Error::EmptyPool);
        }
    }

    let beta = cfg.beta;
    let norm = cfg.distill_norm();
    let half = cfg.batch_size / 2;
    let min_len = reals.len().min(fakes.len());
    let half_eff = half.min(min_len);
    let batches_per_epoch = min_len / half_eff;

    let n_params = model.param_count();
    let mut adam = Adam::new(cfg.lr, cfg.weight_decay, n_params);
    let mut grads = vec![0.0f32; n_params];

    // teacher features are reusable across epochs (the teacher is frozen)
    let mut teacher_real_feats: Vec<Option<Vec<f32>>> = vec![None; reals.len()];
    let mut teacher_pseudo_feats: HashMap<(usize, usize), Vec<f32>> = HashMap::new();

    let mut traces = Vec::new();
    let mut sum = LossBreakdown {
        ce: 0.0,
        pseudo_entropy: 0.0,
        distill_real: 0.0,
        distill_pseudo: 0.0,
        beta,
        total: 0.0,
    };
    let mut n_batches_total = 0usize;
    let mut batch_counter = 0usize;

    for epoch in 0..cfg.epochs_per_stage {
        let mut order_r: Vec<usize> = (0..reals.len()).collect();
        let mut order_f: Vec<usize> = (0..fakes.len()).collect();
        Rng::from_parts(&[tag::SHUFFLE, cfg.seed, current_stage as u64, epoch as u64, 0])
            .shuffle(&mut order_r);
        Rng::from_parts(&[tag::SHUFFLE, cfg.seed, current_stage as u64, epoch as u64, 1])
            .shuffle(&mut order_f);

        for b in 0..batches_per_epoch {
            let r_idx = &order_r[b * half_eff..(b + 1) * half_eff];
            let f_idx = &order_f[b * half_eff..(b + 1) * half_eff];

            // cross-entropy forward over the whole batch
            let mut caches = Vec::with_capacity(2 * half_eff);
            let mut labels = Vec::with_capacity(2 * half_eff);
            for &i in r_idx {
                caches.push(model.forward_cached(&reals[i].image));
                labels.push(0u8);
            }
            for &i in f_idx {
                caches.push(model.forward_cached(&fakes[i].image));
                labels.push(1u8);
            }
            let probs: Vec<f32> = caches.iter().map(|c| c.prob).collect();
            let probs64: Vec<f64> = probs.iter().map(|&p| p as f64).collect();
            let ce = losses::bce(&probs64, &labels)?;
            let inv_n = 1.0 / (2 * half_eff) as f32;

            // preserving terms
            let mut e_val = 0.0f64;
            let mut l_r = 0.0f64;
            let mut l_p = 0.0f64;
            // (position in batch, d_feat) pairs for the real half
            let mut d_feat_real: Vec<Option<Vec<f32>>> = vec![None; half_eff];
            let mut pseudo_caches = Vec::new();
            let mut pseudo_dlogit = Vec::new();
            let mut pseudo_dfeat: Vec<Option<Vec<f32>>> = Vec::new();

            let mut trace_probs_pseudo = Vec::new();
            let mut trace_fr_s = Vec::new();
            let mut trace_fr_t = Vec::new();
            let mut trace_fp_s = Vec::new();
            let mut trace_fp_t = Vec::new();

            if let Some(c) = ctx {
                // positions in the batch's real half that belong to this stage
                let cur: Vec<(usize, usize)> = r_idx
                    .iter()
                    .enumerate()
                    .filter(|(_, &i)| reals[i].stage_id == current_stage)
                    .map(|(pos, &i)| (pos, i))
                    .collect();

                if cfg.enable_distill_real && !cur.is_empty() {
                    let n_cur = cur.len();
                    let mut fs = Vec::with_capacity(n_cur);
                    let mut ft = Vec::with_capacity(n_cur);
                    for &(pos, i) in &cur {
                        fs.push(caches[pos].feat.clone());
                        let tf = teacher_real_feats[i].get_or_insert_with(|| {
                            c.teacher
                                .features(std::slice::from_ref(&reals[i].image))
                                .expect("teacher forward")
                                .pop()
                                .unwrap()
                        });
                        ft.push(tf.clone());
                    }
                    let fs64: Vec<Vec<f64>> = fs
                        .iter()
                        .map(|v| v.iter().map(|&x| x as f64).collect())
                        .collect();
                    let ft64: Vec<Vec<f64>> = ft
                        .iter()
                        .map(|v| v.iter().map(|&x| x as f64).collect())
                        .collect();
                    l_r = losses::feat_mse_with(&fs64, &ft64, norm)?;
                    let denom = match norm {
                        DistillNorm::SquaredL2Mean => n_cur as f32,
                        DistillNorm::PerElementMse => (n_cur * fs[0].len()) as f32,
                    };
                    for (k, &(pos, _)) in cur.iter().enumerate() {
                        let df: Vec<f32> = fs[k]
                            .iter()
                            .zip(&ft[k])
                            .map(|(&s, &t)| (beta as f32) * 2.0 * (s - t) / denom)
                            .collect();
                        d_feat_real[pos] = Some(df);
                    }
                    trace_fr_s = fs;
                    trace_fr_t = ft;
                }

                let need_pseudo =
                    (cfg.enable_entropy || cfg.enable_distill_pseudo) && !cur.is_empty();
                if need_pseudo {
                    let n_pool = c.pool.len();
                    let pool_idx = batch_counter % n_pool;
                    let delta = c.pool.get(pool_idx);
                    let pseudo_imgs: Vec<Image> = {
                        let imgs: Vec<Image> =
                            cur.iter().map(|&(_, i)| reals[i].image.clone()).collect();
                        uap::make_pseudo_with(&imgs, delta, cfg.uap.clamp_pseudo)?
                    };
                    let n_p = pseudo_imgs.len();
                    for img in &pseudo_imgs {
                        pseudo_caches.push(model.forward_cached(img));
                    }
                    if cfg.enable_entropy {
                        let pp: Vec<f32> = pseudo_caches.iter().map(|pc| pc.prob).collect();
                        let pp64: Vec<f64> = pp.iter().map(|&p| p as f64).collect();
                        e_val = losses::pseudo_entropy(&pp64)?;
                        for pc in &pseudo_caches {
                            // d/dlogit of -mean log sigma = (sigma - 1)/n
                            pseudo_dlogit.push((pc.prob - 1.0) / n_p as f32);
                        }
                        trace_probs_pseudo = pp;
                    } else {
                        pseudo_dlogit.resize(n_p, 0.0);
                    }
                    if cfg.enable_distill_pseudo {
                        let fs: Vec<Vec<f32>> =
                            pseudo_caches.iter().map(|pc| pc.feat.clone()).collect();
                        let mut ft = Vec::with_capacity(n_p);
                        for (k, &(_, i)) in cur.iter().enumerate() {
                            let key = (i, pool_idx);
                            let tf = teacher_pseudo_feats.entry(key).or_insert_with(|| {
                                c.teacher
                                    .features(std::slice::from_ref(&pseudo_imgs[k]))
                                    .expect("teacher forward")
                                    .pop()
                                    .unwrap()
                            });
                            ft.push(tf.clone());
                        }
                        let fs64: Vec<Vec<f64>> = fs
                            .iter()
                            .map(|v| v.iter().map(|&x| x as f64).collect())
                            .collect();
                        let ft64: Vec<Vec<f64>> = ft
                            .iter()
                            .map(|v| v.iter().map(|&x| x as f64).collect())
                            .collect();
                        l_p = losses::feat_mse_with(&fs64, &ft64, norm)?;
                        let denom = match norm {
                            DistillNorm::SquaredL2Mean => n_p as f32,
                            DistillNorm::PerElementMse => (n_p * fs[0].len()) as f32,
                        };
                        for k in 0..n_p {
                            let df: Vec<f32> = fs[k]
                                .iter()
                                .zip(&ft[k])
                                .map(|(&s, &t)| (beta as f32) * 2.0 * (s - t) / denom)
                                .collect();
                            pseudo_dfeat.push(Some(df));
                        }
                        trace_fp_s = fs;
                        trace_fp_t = ft;
                    } else {
                        pseudo_dfeat.resize(n_p, None);
                    }
                }
            }

            let e_used = if cfg.enable_entropy { e_val } else { 0.0 };
            let l_r_used = if cfg.enable_distill_real { l_r } else { 0.0 };
            let l_p_used = if cfg.enable_distill_pseudo { l_p } else { 0.0 };
            let breakdown = losses::total_loss(ce, e_used, l_r_used, l_p_used, beta)?;

            // backward: cross-entropy batch (with real-distillation feature
            // gradients), then the pseudo batch
            grads.fill(0.0);
            for (pos, cache) in caches.iter().enumerate() {
                let y = labels[pos] as f32;
                let d_logit = (cache.prob - y) * inv_n;
                let d_feat = if pos < half_eff {
                    d_feat_real[pos].as_deref()
                } else {
                    None
                };
                model.backward_into(cache, d_logit, d_feat, Some(&mut grads), None);
            }
            for (k, cache) in pseudo_caches.iter().enumerate() {
                model.backward_into(
                    cache,
                    pseudo_dlogit[k],
                    pseudo_dfeat[k].as_deref(),
                    Some(&mut grads),
                    None,
                );
            }
            adam.step(model.params_mut()?, &grads);

            if epoch == 0 && traces.len() < cfg.trace_batches {
                traces.push(BatchTrace {
                    stage_id: current_stage,
                    batch_index: batch_counter,
                    probs_ce: probs.clone(),
                    labels_ce: labels.clone(),
                    probs_pseudo: trace_probs_pseudo,
                    feats_real_student: trace_fr_s,
                    feats_real_teacher: trace_fr_t,
                    feats_pseudo_student: trace_fp_s,
                    feats_pseudo_teacher: trace_fp_t,
                    breakdown,
                });
            }

            sum.ce += breakdown.ce;
            sum.pseudo_entropy += breakdown.pseudo_entropy;
            sum.distill_real += breakdown.distill_real;
            sum.distill_pseudo += breakdown.distill_pseudo;
            sum.total += breakdown.total;
            n_batches_total += 1;
            batch_counter += 1;
        }
    }

    let inv = 1.0 / n_batches_total as f64;
    Ok(StageOutcome {
        mean_loss: LossBreakdown {
            ce: sum.ce * inv,
            pseudo_entropy: sum.pseudo_entropy * inv,
            distill_real: sum.distill_real * inv,
            distill_pseudo: sum.distill_pseudo * inv,
            beta,
            total: sum.total * inv,
        },
        traces,
    })
}

/// Plain cross-entropy training on one stage (the base step and the SFT /
/// Joint building block).
pub fn train_stage_base(
    model: &mut Detector,
    stage: &StageDataset,
    cfg: &TrainConfig,
) -> Result<StageOutcome> {
    let reals: Vec<&Sample> = stage.train_real.iter().collect();
    let fakes: Vec<&Sample> = stage.train_fake.iter().collect();
    train_stage_inner(model, &reals, &fakes, stage.stage_id, cfg, None)
}

/// One preserving stage: cross entropy plus pseudo-forged entropy and dual
/// feature distillation against the frozen teacher. `buffered` samples (from
/// earlier stages) are appended to the training set and join the
/// cross-entropy term only.
pub fn train_stage_hdp(
    model: &mut Detector,
    teacher: &Detector,
    stage: &StageDataset,
    pool: &UapPool,
    buffered: &[Sample],
    cfg: &TrainConfig,
) -> Result<StageOutcome> {
    let mut reals: Vec<&Sample> = stage.train_real.iter().collect();
    let mut fakes: Vec<&Sample> = stage.train_fake.iter().collect();
    for s in buffered {
        if s.label == 0 {
            reals.push(s);
        } else {
            fakes.push(s);
        }
    }
    let ctx = PreserveCtx { teacher, pool };
    train_stage_inner(model, &reals, &fakes, stage.stage_id, cfg, Some(&ctx))
}

fn eval_rows(
    model: &Detector,
    stages: &[StageDataset],
) -> Result<(Vec<Option<f64>>, Vec<Option<f64>>)> {
    let mut acc_row = Vec::with_capacity(stages.len());
    let mut auc_row = Vec::with_capacity(stages.len());
    for s in stages {
        let (acc, auc) = evaluate_model(model, s)?;
        acc_row.push(Some(acc));
        auc_row.push(Some(auc));
    }
    Ok((acc_row, auc_row))
}

fn image_shape(stages: &[StageDataset]) -> Result<(usize, usize, usize)> {
    stages
        .first()
        .and_then(|s| s.train_real.first())
        .map(|s| s.image.shape())
        .ok_or(Error::EmptyStage)
}

/// Seeded subsample of a stage's real training images for UAP generation.
fn generation_subset(stage: &StageDataset, cfg: &TrainConfig) -> Vec<Image> {
    let n = stage.train_real.len();
    let k = cfg.uap.gen_subset_size.min(n);
    let mut rng = Rng::from_parts(&[tag::SUBSET, cfg.seed, stage.stage_id as u64]);
    rng.sample_indices(n, k)
        .into_iter()
        .map(|i| stage.train_real[i].image.clone())
        .collect()
}

fn save_stage_artifacts(
    out: Option<&Path>,
    stage_id: u32,
    model: &Detector,
) -> Result<Option<String>> {
    if let Some(dir) = out {
        let stage_dir = dir.join(format!("stage_{stage_id:02}"));
        std::fs::create_dir_all(&stage_dir)?;
        let path = stage_dir.join("checkpoint.hdpm");
        model.save_checkpoint(&path)?;
        Ok(Some(path.to_string_lossy().into_owned()))
    } else {
        Ok(None)
    }
}

fn write_stage_result(out: Option<&Path>, result: &StageResult) -> Result<()> {
    if let Some(dir) = out {
        let stage_dir = dir.join(format!("stage_{:02}", result.stage_id));
        std::fs::create_dir_all(&stage_dir)?;
        std::fs::write(
            stage_dir.join("stage_result.json"),
            serde_json::to_string_pretty(result)?,
        )?;
    }
    Ok(())
}

/// Full preserving run over a protocol: stage 1 trains with cross entropy,
/// later stages add the preserving terms; after every stage (first and last
/// included) a UAP is generated from the freshly trained model and appended
/// to the pool.
pub fn run_protocol_hdp(
    stages: &[StageDataset],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<ProtocolRun> {
    cfg.validate()?;
    if stages.len() < 2 {
        return Err(Error::InvalidConfig("protocol needs at least 2 stages".into()));
    }
    let (c, h, w) = image_shape(stages)?;
    let mut model = Detector::new(c, h, w, cfg.seed);
    let mut pool = UapPool::new();
    let mut results = Vec::new();
    let mut traces = Vec::new();
    let mut matrix_acc = EvalMatrix::new(MetricKind::Acc, stages.len());
    let mut matrix_auc = EvalMatrix::new(MetricKind::Auc, stages.len());
    let mut buffers: Vec<Sample> = Vec::new();
    let pool_dir = out.map(|d| d.join("pool"));

    for stage in stages {
        let t0 = Instant::now();
        let outcome = if stage.stage_id == 1 {
            let mut m = model;
            let o = train_stage_base(&mut m, stage, cfg)?;
            model = m;
            o
        } else {
            let teacher = model.clone_frozen();
            let o = train_stage_hdp(&mut model, &teacher, stage, &pool, &buffers, cfg)?;
            o
        };
        model.meta.stage = stage.stage_id;

        // reserve step: one UAP per completed stage
        let subset = generation_subset(stage, cfg);
        let gen = uap::generate_uap(&model, &subset, &cfg.uap, stage.stage_id, cfg.seed)?;
        let wall = t0.elapsed().as_secs_f64();

        let uap_path = if let Some(dir) = &pool_dir {
            std::fs::create_dir_all(dir)?;
            let path = uap::uap_path_in(dir, stage.stage_id);
            uap::write_uap(&gen.perturbation, &path)?;
            Some(path.to_string_lossy().into_owned())
        } else {
            None
        };
        let rate = gen.perturbation.achieved_attack_rate;
        let iters = gen.perturbation.iterations_used;
        let reached = gen.reached_sigma;
        pool.append(gen.perturbation)?;

        if cfg.buffer_per_stage > 0 {
            buffers.extend(select_buffer(stage, cfg.buffer_per_stage, cfg.seed)?);
        }

        let checkpoint_path = save_stage_artifacts(out, stage.stage_id, &model)?;
        let result = StageResult {
            stage_id: stage.stage_id,
            mean_loss: outcome.mean_loss,
            wall_seconds: wall,
            checkpoint_path,
            uap_path,
            uap_attack_rate: Some(rate),
            uap_iterations: Some(iters),
            uap_reached_sigma: Some(reached),
        };
        write_stage_result(out, &result)?;
        results.push(result);
        traces.extend(outcome.traces);

        let (acc_row, auc_row) = eval_rows(&model, stages)?;
        matrix_acc.push_row(acc_row);
        matrix_auc.push_row(auc_row);
    }

    if let Some(dir) = &pool_dir {
        pool.save(dir)?;
    }

    Ok(ProtocolRun {
        model,
        pool: Some(pool),
        stage_results: results,
        matrix_acc,
        matrix_auc,
        traces,
    })
}

/// Sequential fine-tuning baseline: chain plain cross-entropy training over
/// the stages with no anti-forgetting mechanism.
pub fn run_protocol_sft(
    stages: &[StageDataset],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<ProtocolRun> {
    cfg.validate()?;
    if stages.len() < 2 {
        return Err(Error::InvalidConfig("protocol needs at least 2 stages".into()));
    }
    let (c, h, w) = image_shape(stages)?;
    let mut model = Detector::new(c, h, w, cfg.seed);
    let mut results = Vec::new();
    let mut traces = Vec::new();
    let mut matrix_acc = EvalMatrix::new(MetricKind::Acc, stages.len());
    let mut matrix_auc = EvalMatrix::new(MetricKind::Auc, stages.len());

    for stage in stages {
        let t0 = Instant::now();
        let outcome = train_stage_base(&mut model, stage, cfg)?;
        let wall = t0.elapsed().as_secs_f64();
        model.meta.stage = stage.stage_id;
        let checkpoint_path = save_stage_artifacts(out, stage.stage_id, &model)?;
        let result = StageResult {
            stage_id: stage.stage_id,
            mean_loss: outcome.mean_loss,
            wall_seconds: wall,
            checkpoint_path,
            uap_path: None,
            uap_attack_rate: None,
            uap_iterations: None,
            uap_reached_sigma: None,
        };
        write_stage_result(out, &result)?;
        results.push(result);
        traces.extend(outcome.traces);

        let (acc_row, auc_row) = eval_rows(&model, stages)?;
        matrix_acc.push_row(acc_row);
        matrix_auc.push_row(auc_row);
    }

    Ok(ProtocolRun {
        model,
        pool: None,
        stage_results: results,
        matrix_acc,
        matrix_auc,
        traces,
    })
}

/// Upper-bound baseline: one training run on the union of every stage's
/// training set, evaluated on all tasks.
pub fn run_protocol_joint(
    stages: &[StageDataset],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<ProtocolRun> {
    cfg.validate()?;
    if stages.len() < 2 {
        return Err(Error::InvalidConfig("protocol needs at least 2 stages".into()));
    }
    let (c, h, w) = image_shape(stages)?;
    let mut model = Detector::new(c, h, w, cfg.seed);
    let reals: Vec<&Sample> = stages.iter().flat_map(|s| s.train_real.iter()).collect();
    let fakes: Vec<&Sample> = stages.iter().flat_map(|s| s.train_fake.iter()).collect();

    let t0 = Instant::now();
    // joint training is a single "stage 1" for seeding purposes
    let outcome = train_stage_inner(&mut model, &reals, &fakes, 1, cfg, None)?;
    let wall = t0.elapsed().as_secs_f64();
    model.meta.stage = stages.len() as u32;

    let checkpoint_path = save_stage_artifacts(out, 1, &model)?;
    let result = StageResult {
        stage_id: 1,
        mean_loss: outcome.mean_loss,
        wall_seconds: wall,
        checkpoint_path,
        uap_path: None,
        uap_attack_rate: None,
        uap_iterations: None,
        uap_reached_sigma: None,
    };
    write_stage_result(out, &result)?;

    let mut matrix_acc = EvalMatrix::new(MetricKind::Acc, stages.len());
    let mut matrix_auc = EvalMatrix::new(MetricKind::Auc, stages.len());
    let (acc_row, auc_row) = eval_rows(&model, stages)?;
    matrix_acc.push_row(acc_row);
    matrix_auc.push_row(auc_row);

    Ok(ProtocolRun {
        model,
        pool: None,
        stage_results: vec![result],
        matrix_acc,
        matrix_auc,
        traces: outcome.traces,
    })
}

/// Dispatches on the configured method.
pub fn run_protocol(
    stages: &[StageDataset],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<ProtocolRun> {
    match cfg.method {
        Method::Hdp => run_protocol_hdp(stages, cfg, out),
        Method::Sft => run_protocol_sft(stages, cfg, out),
        Method::Joint => run_protocol_joint(stages, cfg, out),
    }
}

/// Convenience: artifact paths used by protocol runs under an output root.
pub fn pool_dir(out: &Path) -> PathBuf {
    out.join("pool")
}
