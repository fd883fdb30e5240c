//! Acceptance suite: every release-gating criterion as one test with a
//! printed PASS line (run with `--nocapture` to see them).
//!
//! The protocol-level criteria share one set of P1 runs (SFT, the preserving
//! method, and Joint over seeds 0..2) built on first use.

use hdp::detector::Detector;
use hdp::eval::{avg_metric, pre_metric, EvalMatrix};
use hdp::losses;
use hdp::rng::Rng;
use hdp::synthdata::{self, Image, StageDataset, StageSizes};
use hdp::trainer::{self, Method, ProtocolRun, TrainConfig};
use hdp::uap::{self, Perturbation, UapConfig};
use std::path::PathBuf;
use std::sync::OnceLock;

const SEEDS: [u64; 3] = [0, 1, 2];

struct P1Fixture {
    stages: Vec<StageDataset>,
    sft: Vec<ProtocolRun>,
    hdp: Vec<ProtocolRun>,
    joint: Vec<ProtocolRun>,
}

static P1: OnceLock<P1Fixture> = OnceLock::new();

fn p1() -> &'static P1Fixture {
    P1.get_or_init(|| {
        let spec = synthdata::preset("p1").unwrap();
        let stages = synthdata::build_protocol(&spec).unwrap();
        let run_for = |method: Method, seed: u64| -> ProtocolRun {
            let cfg = TrainConfig {
                method,
                seed,
                ..TrainConfig::default()
            };
            eprintln!("[fixture] running {} seed {seed}", method.name());
            trainer::run_protocol(&stages, &cfg, None).unwrap()
        };
        let sft = SEEDS.iter().map(|&s| run_for(Method::Sft, s)).collect();
        let hdp = SEEDS.iter().map(|&s| run_for(Method::Hdp, s)).collect();
        let joint = SEEDS.iter().map(|&s| run_for(Method::Joint, s)).collect();
        P1Fixture {
            stages,
            sft,
            hdp,
            joint,
        }
    })
}

fn diag(m: &EvalMatrix, t: usize) -> f64 {
    m.get(t, t).expect("diagonal entry present")
}

fn pass(criterion: u32, detail: String) {
    println!("ACCEPTANCE {criterion:02} PASS: {detail}");
}

/// Criterion 1: sequential fine-tuning reaches each stage but forgets the
/// earlier ones.
#[test]
fn criterion_01_sft_learns_then_forgets() {
    let fx = p1();
    let t_total = fx.stages.len();
    let mut final_means = Vec::new();
    for (i, run) in fx.sft.iter().enumerate() {
        for t in 1..=t_total {
            let acc = diag(&run.matrix_acc, t);
            assert!(
                acc >= 90.0,
                "seed {}: stage-local ACC at stage {t} is {acc:.2} < 90",
                SEEDS[i]
            );
        }
        let mean_123: f64 = (1..=3)
            .map(|j| run.matrix_acc.get(t_total, j).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!(
            mean_123 <= 75.0,
            "seed {}: final mean ACC over tasks 1-3 is {mean_123:.2} > 75 (no forgetting)",
            SEEDS[i]
        );
        final_means.push(mean_123);

        let total_secs: f64 = run.stage_results.iter().map(|r| r.wall_seconds).sum();
        assert!(
            total_secs <= 600.0,
            "seed {}: SFT runtime {total_secs:.0}s exceeds 10 minutes",
            SEEDS[i]
        );
    }
    pass(
        1,
        format!(
            "SFT stage-local >= 90 on all stages/seeds; final mean over tasks 1-3 = {:?}",
            final_means
                .iter()
                .map(|v| format!("{v:.1}"))
                .collect::<Vec<_>>()
        ),
    );
}

/// Criterion 2: the preserving method lifts PRE by at least 10 points while
/// staying within 5 points of SFT stage-local accuracy.
#[test]
fn criterion_02_hdp_mitigates_forgetting() {
    let fx = p1();
    let t_total = fx.stages.len();
    let mean = |runs: &[ProtocolRun]| -> f64 {
        runs.iter()
            .map(|r| pre_metric(&r.matrix_acc).unwrap())
            .sum::<f64>()
            / runs.len() as f64
    };
    let sft_pre = mean(&fx.sft);
    let hdp_pre = mean(&fx.hdp);
    assert!(
        hdp_pre - sft_pre >= 10.0,
        "PRE gain too small: hdp {hdp_pre:.2} vs sft {sft_pre:.2}"
    );

    for t in 1..=t_total {
        let sft_local: f64 =
            fx.sft.iter().map(|r| diag(&r.matrix_acc, t)).sum::<f64>() / fx.sft.len() as f64;
        let hdp_local: f64 =
            fx.hdp.iter().map(|r| diag(&r.matrix_acc, t)).sum::<f64>() / fx.hdp.len() as f64;
        assert!(
            hdp_local >= sft_local - 5.0,
            "stage {t}: hdp stage-local {hdp_local:.2} more than 5 below sft {sft_local:.2}"
        );
    }

    for (i, run) in fx.hdp.iter().enumerate() {
        let total_secs: f64 = run.stage_results.iter().map(|r| r.wall_seconds).sum();
        assert!(
            total_secs <= 1800.0,
            "seed {}: runtime {total_secs:.0}s exceeds 30 minutes",
            SEEDS[i]
        );
    }
    pass(
        2,
        format!("PRE_acc hdp {hdp_pre:.2} vs sft {sft_pre:.2} (gain {:.2})", hdp_pre - sft_pre),
    );
}

/// Criterion 3: Joint >= preserving >= SFT in final average accuracy.
#[test]
fn criterion_03_joint_bound_ordering() {
    let fx = p1();
    let mean_avg = |runs: &[ProtocolRun]| -> f64 {
        runs.iter()
            .map(|r| avg_metric(&r.matrix_acc).unwrap())
            .sum::<f64>()
            / runs.len() as f64
    };
    let joint = mean_avg(&fx.joint);
    let hdp = mean_avg(&fx.hdp);
    let sft = mean_avg(&fx.sft);
    assert!(joint >= hdp, "joint {joint:.2} < hdp {hdp:.2}");
    assert!(hdp >= sft, "hdp {hdp:.2} < sft {sft:.2}");
    pass(3, format!("AVG_acc joint {joint:.2} >= hdp {hdp:.2} >= sft {sft:.2}"));
}

/// Criterion 4: every pool entry respects the budget exactly and reached the
/// attack-rate threshold (default runs must not trip the warning).
#[test]
fn criterion_04_uap_contract() {
    let fx = p1();
    let cfg = UapConfig::default();
    let mut n_entries = 0;
    for (i, run) in fx.hdp.iter().enumerate() {
        let pool = run.pool.as_ref().expect("preserving run has a pool");
        assert_eq!(pool.len(), fx.stages.len(), "one UAP per stage");
        for p in pool.entries() {
            assert!(
                p.max_abs() <= cfg.epsilon,
                "seed {}: stage {} delta {} exceeds epsilon",
                SEEDS[i],
                p.stage_id,
                p.max_abs()
            );
            assert!(
                p.achieved_attack_rate >= cfg.sigma,
                "seed {}: stage {} rate {} below sigma without warning",
                SEEDS[i],
                p.stage_id,
                p.achieved_attack_rate
            );
            n_entries += 1;
        }
        for r in &run.stage_results {
            assert_eq!(
                r.uap_reached_sigma,
                Some(true),
                "seed {}: stage {} tripped the sigma warning on defaults",
                SEEDS[i],
                r.stage_id
            );
        }
    }
    pass(4, format!("{n_entries} pool entries within budget, all at rate >= 0.8"));
}

/// Criterion 5: analytic gradients of the losses and the detector forward
/// match central finite differences at f64 within 1e-5 relative error.
#[test]
fn criterion_05_gradient_suite() {
    let mut rng = Rng::new(2024);
    let rel = |a: f64, fd: f64| (a - fd).abs() / fd.abs().max(1e-10);

    // losses on 50 random probes
    for probe in 0..50 {
        let n = 2 + rng.below(12);
        let probs: Vec<f64> = (0..n).map(|_| 0.02 + 0.96 * rng.next_f64()).collect();
        let labels: Vec<u8> = (0..n).map(|_| (rng.next_u64() & 1) as u8).collect();
        let i = rng.below(n);
        let h = 1e-6;

        let g = losses::bce_grad(&probs, &labels).unwrap()[i];
        let fd = {
            let mut up = probs.clone();
            let mut dn = probs.clone();
            up[i] += h;
            dn[i] -= h;
            (losses::bce(&up, &labels).unwrap() - losses::bce(&dn, &labels).unwrap()) / (2.0 * h)
        };
        assert!(rel(g, fd) < 1e-5, "probe {probe} bce: {g} vs {fd}");

        let g = losses::pseudo_entropy_grad(&probs).unwrap()[i];
        let fd = {
            let mut up = probs.clone();
            let mut dn = probs.clone();
            up[i] += h;
            dn[i] -= h;
            (losses::pseudo_entropy(&up).unwrap() - losses::pseudo_entropy(&dn).unwrap())
                / (2.0 * h)
        };
        assert!(rel(g, fd) < 1e-5, "probe {probe} entropy: {g} vs {fd}");

        let d = 1 + rng.below(8);
        let mk = |rng: &mut Rng| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..d).map(|_| rng.normal()).collect())
                .collect()
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        let (bi, bj) = (rng.below(n), rng.below(d));
        let g = losses::feat_mse_grad_a(&a, &b, losses::DistillNorm::SquaredL2Mean).unwrap()[bi]
            [bj];
        let fd = {
            let mut up = a.clone();
            let mut dn = a.clone();
            up[bi][bj] += h;
            dn[bi][bj] -= h;
            (losses::feat_mse(&up, &b).unwrap() - losses::feat_mse(&dn, &b).unwrap()) / (2.0 * h)
        };
        if fd.abs() > 1e-7 {
            assert!(rel(g, fd) < 1e-5, "probe {probe} feat_mse: {g} vs {fd}");
        }
    }

    // detector forward at f64: log-prob objective against parameter and
    // input perturbations, 50 probes on a small input
    let net: hdp::nn::SmallCnn<f64> = hdp::nn::SmallCnn::new(3, 8, 8, 99);
    let x: Vec<f64> = (0..3 * 64).map(|_| rng.next_f64()).collect();
    let loss = |net: &hdp::nn::SmallCnn<f64>, x: &[f64]| net.forward(x).logit;
    let cache = net.forward(&x);
    let mut grads = vec![0.0; net.param_count()];
    let mut d_input = vec![0.0; x.len()];
    net.backward(&cache, 1.0, None, Some(&mut grads), Some(&mut d_input));
    let h = 1e-6;
    for probe in 0..50 {
        if probe % 2 == 0 {
            let i = rng.below(net.param_count());
            let mut np = net.clone();
            np.params[i] += h;
            let up = loss(&np, &x);
            np.params[i] -= 2.0 * h;
            let dn = loss(&np, &x);
            let fd = (up - dn) / (2.0 * h);
            if fd.abs() > 1e-7 {
                assert!(rel(grads[i], fd) < 1e-5, "param {i}: {} vs {fd}", grads[i]);
            }
        } else {
            let i = rng.below(x.len());
            let mut xp = x.clone();
            xp[i] += h;
            let up = loss(&net, &xp);
            xp[i] -= 2.0 * h;
            let dn = loss(&net, &xp);
            let fd = (up - dn) / (2.0 * h);
            if fd.abs() > 1e-7 {
                assert!(rel(d_input[i], fd) < 1e-5, "input {i}: {} vs {fd}", d_input[i]);
            }
        }
    }
    pass(5, "losses and detector gradients match finite differences at 1e-5".into());
}

/// Criterion 6: rank-based AUC equals brute-force pairwise enumeration and is
/// invariant under monotone transforms.
#[test]
fn criterion_06_auc_oracle() {
    let mut rng = Rng::new(7);
    for trial in 0..200 {
        let n = 2 + rng.below(49);
        let mut labels: Vec<u8> = (0..n).map(|_| (rng.next_u64() & 1) as u8).collect();
        labels[0] = 0;
        labels[n - 1] = 1;
        // mix of continuous and quantized scores so ties occur
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if rng.next_u64() & 1 == 0 {
                    rng.next_f64()
                } else {
                    (rng.below(8) as f64) / 8.0
                }
            })
            .collect();

        let fast = hdp::eval::auc(&scores, &labels).unwrap();
        // brute force
        let mut num = 0.0;
        let mut pairs = 0.0;
        for i in 0..n {
            for j in 0..n {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        let slow = 100.0 * num / pairs;
        assert!((fast - slow).abs() <= 1e-12, "trial {trial}: {fast} vs {slow}");

        // monotone transforms leave the rank statistic unchanged
        let exp: Vec<f64> = scores.iter().map(|&s| s.exp()).collect();
        assert!((hdp::eval::auc(&exp, &labels).unwrap() - fast).abs() <= 1e-12);
        let affine: Vec<f64> = scores.iter().map(|&s| 7.0 * s + 3.0).collect();
        assert!((hdp::eval::auc(&affine, &labels).unwrap() - fast).abs() <= 1e-12);
    }
    pass(6, "rank AUC equals pairwise enumeration on 200 instances".into());
}

/// Criterion 7: with beta = 0, an empty pool, and the preserving terms
/// disabled, the preserving path reproduces plain fine-tuning per batch.
#[test]
fn criterion_07_reduction_identity() {
    let mut spec = synthdata::preset("p1").unwrap();
    spec.stages.truncate(2);
    spec.height = 16;
    spec.width = 16;
    for e in &mut spec.stages {
        e.sizes = StageSizes {
            train_per_class: 320,
            test_per_class: 8,
        };
    }
    let stages = synthdata::build_protocol(&spec).unwrap();
    let cfg = TrainConfig {
        beta: 0.0,
        enable_entropy: false,
        enable_distill_pseudo: false,
        enable_distill_real: false,
        epochs_per_stage: 1,
        trace_batches: 10,
        ..TrainConfig::default()
    };

    let mut base = Detector::new(3, 16, 16, cfg.seed);
    let ob = trainer::train_stage_base(&mut base, &stages[1], &cfg).unwrap();

    let mut pres = Detector::new(3, 16, 16, cfg.seed);
    let teacher = pres.clone_frozen();
    let empty = uap::UapPool::new();
    let oh = trainer::train_stage_hdp(&mut pres, &teacher, &stages[1], &empty, &[], &cfg).unwrap();

    assert_eq!(ob.traces.len(), 10);
    assert_eq!(oh.traces.len(), 10);
    for (a, b) in ob.traces.iter().zip(&oh.traces) {
        assert!(
            (a.breakdown.ce - b.breakdown.ce).abs() <= 1e-12,
            "batch {}: ce {} vs {}",
            a.batch_index,
            a.breakdown.ce,
            b.breakdown.ce
        );
        assert!(
            (a.breakdown.total - b.breakdown.total).abs() <= 1e-12,
            "batch {}: total {} vs {}",
            a.batch_index,
            a.breakdown.total,
            b.breakdown.total
        );
    }
    assert_eq!(base.params(), pres.params(), "parameter trajectories diverged");
    pass(7, "10-batch loss identity holds to 1e-12 under a shared seed".into());
}

/// Criterion 8: on the two-pixel logistic probe, generation matches an
/// independent step-by-step simulation exactly.
#[test]
fn criterion_08_uap_closed_form_probe() {
    struct Probe;
    impl hdp::detector::Classifier for Probe {
        fn input_shape(&self) -> (usize, usize, usize) {
            (1, 1, 2)
        }
        fn prob_fake(&self, batch: &[Image]) -> hdp::Result<Vec<f32>> {
            Ok(batch
                .iter()
                .map(|img| {
                    let z = img.pixels[0] + img.pixels[1] * -1.0 + -1.0;
                    hdp::scalar::sigmoid(z)
                })
                .collect())
        }
        fn grad_mean_log_fake(&self, batch: &[Image]) -> hdp::Result<Vec<f32>> {
            let probs = self.prob_fake(batch)?;
            let mut g = vec![0.0f32; 2];
            for p in probs {
                g[0] += (1.0 - p) * 1.0 / batch.len() as f32;
                g[1] += (1.0 - p) * -1.0 / batch.len() as f32;
            }
            Ok(g)
        }
    }

    let reals: Vec<Image> = (0..32)
        .map(|i| Image {
            c: 1,
            h: 1,
            w: 2,
            pixels: vec![0.9 - i as f32 * 0.0015, 0.1 + i as f32 * 0.0015],
        })
        .collect();
    let cfg = UapConfig {
        epsilon: 0.15,
        alpha: 0.01,
        sigma: 0.8,
        max_iters: 5000,
        gen_subset_size: 32,
        batch_size: 64,
        paper_sign: false,
        clamp_pseudo: false,
    };

    // independent simulation (no model calls): iterate the update rule
    let mut sim_d = 0.0f32;
    let mut sim: Vec<(u32, f32, f32)> = Vec::new(); // (iter, delta, rate)
    for k in 1..=cfg.max_iters {
        sim_d = (sim_d + cfg.alpha).clamp(-cfg.epsilon, cfg.epsilon);
        let mut fooled = 0;
        for r in &reals {
            let z = (r.pixels[0] + sim_d) + (r.pixels[1] - sim_d) * -1.0 + -1.0;
            if hdp::scalar::sigmoid(z) >= 0.5 {
                fooled += 1;
            }
        }
        let rate = fooled as f32 / 32.0;
        sim.push((k, sim_d, rate));
        if rate >= cfg.sigma {
            break;
        }
    }
    let (sim_iters, _, sim_rate) = *sim.last().unwrap();
    assert!(sim_rate >= cfg.sigma, "simulation never reached sigma");

    let mut traj: Vec<(u32, Vec<f32>)> = Vec::new();
    let out = uap::generate_uap_observed(&Probe, &reals, &cfg, 1, 11, |k, d| {
        traj.push((k, d.to_vec()));
    })
    .unwrap();
    assert!(out.reached_sigma);
    assert_eq!(out.perturbation.iterations_used, sim_iters);
    assert_eq!(out.perturbation.achieved_attack_rate, sim_rate);
    assert_eq!(traj.len(), sim.len());
    for ((k, d), (sk, sd, _)) in traj.iter().zip(&sim) {
        assert_eq!(k, sk);
        assert_eq!(d[0], *sd, "step {k} delta mismatch");
        assert_eq!(d[1], -*sd, "step {k} delta mismatch");
    }
    pass(
        8,
        format!("trajectory of {sim_iters} steps matches the simulation exactly"),
    );
}

/// Criterion 9: the run command is deterministic given identical flags and
/// seed (wall-clock seconds are the only varying report field).
#[test]
fn criterion_09_cmd_run_determinism() {
    let root = std::env::temp_dir().join(format!("hdp_acc9_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).unwrap();
    let mut spec = synthdata::preset("p1").unwrap();
    spec.name = "tiny".into();
    spec.stages.truncate(2);
    for e in &mut spec.stages {
        e.sizes = StageSizes {
            train_per_class: 64,
            test_per_class: 16,
        };
    }
    let proto_path = root.join("tiny.json");
    spec.save(&proto_path).unwrap();

    let mut normalized: Vec<String> = Vec::new();
    for name in ["a", "b"] {
        let out: PathBuf = root.join(name);
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_hdp"))
            .args([
                "run",
                "--protocol",
                proto_path.to_str().unwrap(),
                "--method",
                "hdp",
                "--seed",
                "0",
                "--epochs",
                "2",
                "--gen-subset-size",
                "64",
                "--max-iters",
                "200",
                "--out",
                out.to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(status.success());
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap())
                .unwrap();
        v["per_stage_seconds"] = serde_json::Value::Null;
        normalized.push(serde_json::to_string(&v).unwrap());
    }
    assert_eq!(normalized[0], normalized[1], "reports differ between runs");
    let _ = std::fs::remove_dir_all(&root);
    pass(9, "identical flags and seed give byte-identical reports (timing aside)".into());
}

/// Criterion 10: component ablation — all terms off reproduces SFT-level PRE;
/// all terms on is the best combination on most seeds.
#[test]
fn criterion_10_component_ablation_direction() {
    let fx = p1();
    let mut all_on_best = 0;
    for (i, &seed) in SEEDS.iter().enumerate() {
        let mut pre_by_combo = Vec::new();
        for mask in 0..8u8 {
            let cfg = TrainConfig {
                method: Method::Hdp,
                seed,
                enable_entropy: mask & 1 != 0,
                enable_distill_pseudo: mask & 2 != 0,
                enable_distill_real: mask & 4 != 0,
                ..TrainConfig::default()
            };
            eprintln!("[ablation] seed {seed} combo e{}p{}r{}",
                u8::from(cfg.enable_entropy),
                u8::from(cfg.enable_distill_pseudo),
                u8::from(cfg.enable_distill_real));
            let run = trainer::run_protocol_hdp(&fx.stages, &cfg, None).unwrap();
            let pre = pre_metric(&run.matrix_acc).unwrap();
            pre_by_combo.push((mask, pre));
        }
        let off = pre_by_combo.iter().find(|(m, _)| *m == 0).unwrap().1;
        let sft_pre = pre_metric(&fx.sft[i].matrix_acc).unwrap();
        assert!(
            (off - sft_pre).abs() <= 2.0,
            "seed {seed}: all-off PRE {off:.2} not within 2 of SFT {sft_pre:.2}"
        );
        let on = pre_by_combo.iter().find(|(m, _)| *m == 7).unwrap().1;
        let best = pre_by_combo
            .iter()
            .map(|&(_, p)| p)
            .fold(f64::MIN, f64::max);
        if on >= best {
            all_on_best += 1;
        }
        eprintln!(
            "[ablation] seed {seed}: {:?}",
            pre_by_combo
                .iter()
                .map(|(m, p)| format!("e{}p{}r{}={p:.1}", m & 1, (m >> 1) & 1, (m >> 2) & 1))
                .collect::<Vec<_>>()
        );
    }
    assert!(
        all_on_best >= 2,
        "all-components-on was best on only {all_on_best} of 3 seeds"
    );
    pass(
        10,
        format!("all-off matches SFT; all-on best on {all_on_best}/3 seeds"),
    );
}

/// Generator-difficulty calibration: a freshly trained reference detector
/// reaches at least 90% single-stage test accuracy on every preset stage.
#[test]
fn calibration_every_preset_stage_is_separable() {
    let cfg = TrainConfig::default();
    for preset in ["p1", "p2", "p3"] {
        let spec = synthdata::preset(preset).unwrap();
        let stages = synthdata::build_protocol(&spec).unwrap();
        for stage in &stages {
            let mut model = Detector::new(3, spec.height, spec.width, 0);
            trainer::train_stage_base(&mut model, stage, &cfg).unwrap();
            let (acc, _) = hdp::eval::evaluate_model(&model, stage).unwrap();
            assert!(
                acc >= 90.0,
                "{preset} stage {} reaches only {acc:.2}% single-stage accuracy",
                stage.stage_id
            );
            eprintln!("[calibration] {preset} stage {}: {acc:.2}%", stage.stage_id);
        }
    }
    pass(0, "every preset stage trains to >= 90% in isolation".into());
}

/// A perturbation generated against a trained detector transfers its label
/// flip: the storage bound holds for every file the runs wrote.
#[test]
fn uap_storage_is_constant_per_stage() {
    // byte size is header + C*H*W*4, independent of dataset size
    let shape = (3usize, 32usize, 32usize);
    let dir = std::env::temp_dir().join(format!("hdp_acc_sb_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let p = Perturbation::zeros(shape, 0.15, 1);
    let path = dir.join("p.hdpu");
    uap::write_uap(&p, &path).unwrap();
    assert_eq!(
        std::fs::metadata(&path).unwrap().len(),
        uap::uap_file_size(shape)
    );
    let _ = std::fs::remove_dir_all(&dir);
}
