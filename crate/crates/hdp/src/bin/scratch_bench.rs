// temporary calibration harness; removed before release
use hdp::detector::Detector;
use hdp::synthdata::{self, StageSizes};
use hdp::trainer::{self, Method, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mode = args.first().map(|s| s.as_str()).unwrap_or("speed");

    match mode {
        "speed" => speed(),
        "stage1" => stage1(),
        "kinds" => kinds(),
        "probe" => probe(),
        "sft" => sft_run(args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0)),
        "hdp" => hdp_run(args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0)),
        "order" => order_run(&args[1..]),
        other => eprintln!("unknown mode {other}"),
    }
}

/// Measures delta statistics after stage-1 generation and whether the
/// reference architecture can separate x from x + delta.
fn probe() {
    use hdp::synthdata::{ManipKind, Sample};
    let kind = match std::env::args().nth(2).as_deref() {
        Some("s") => ManipKind::Sharpen,
        Some("m") => ManipKind::Smooth,
        Some("u") => ManipKind::PatchShuffle,
        _ => ManipKind::Blend,
    };
    let mut spec = synthdata::preset("p1").unwrap();
    spec.stages[0].manipulation.kind = kind;
    if let Some(n) = std::env::args().nth(3).and_then(|s| s.parse::<usize>().ok()) {
        for e in &mut spec.stages {
            e.sizes.train_per_class = n;
        }
    }
    println!(
        "stage-1 kind: {kind:?} train {}",
        spec.stages[0].sizes.train_per_class
    );
    let stages = synthdata::build_protocol(&spec).unwrap();
    let cfg = TrainConfig::default();
    let mut model = Detector::new(3, 32, 32, 0);
    trainer::train_stage_base(&mut model, &stages[0], &cfg).unwrap();

    // margin percentiles on the generation subset
    let subset: Vec<_> = stages[0].train_real[..1000]
        .iter()
        .map(|s| s.image.clone())
        .collect();
    let probs = model.forward_prob(&subset).unwrap();
    let mut logits: Vec<f32> = probs.iter().map(|&p| (p / (1.0 - p)).ln()).collect();
    logits.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "real logits: p10 {:.2} p50 {:.2} p80 {:.2} p95 {:.2}",
        logits[100], logits[500], logits[800], logits[950]
    );

    let gen = hdp::uap::generate_uap(&model, &subset, &cfg.uap, 1, 0).unwrap();
    let d = &gen.perturbation.delta;
    let mean_abs: f32 = d.iter().map(|v| v.abs()).sum::<f32>() / d.len() as f32;
    let max_abs = gen.perturbation.max_abs();
    let at_cap = d.iter().filter(|v| v.abs() > 0.9 * max_abs).count();
    println!(
        "delta: iters {} rate {:.3} mean|d| {:.4} max|d| {:.4} near-max {}/{}",
        gen.perturbation.iterations_used,
        gen.perturbation.achieved_attack_rate,
        mean_abs,
        max_abs,
        at_cap,
        d.len()
    );

    // can a fresh reference detector separate x from x+delta?
    let pseudo = hdp::uap::make_pseudo(&subset, &gen.perturbation).unwrap();
    let mk = |imgs: &[hdp::synthdata::Image], label: u8| -> Vec<Sample> {
        imgs.iter()
            .map(|img| Sample {
                image: img.clone(),
                label,
                stage_id: 1,
                manipulation: None,
                seed: 0,
            })
            .collect()
    };
    let test_reals: Vec<_> = stages[0].test_real.iter().map(|s| s.image.clone()).collect();
    let test_pseudo = hdp::uap::make_pseudo(&test_reals, &gen.perturbation).unwrap();
    let sep_stage = hdp::synthdata::StageDataset {
        stage_id: 1,
        train_real: mk(&subset, 0),
        train_fake: mk(&pseudo, 1),
        test_real: mk(&test_reals, 0),
        test_fake: mk(&test_pseudo, 1),
    };
    let mut sep_model = Detector::new(3, 32, 32, 0);
    trainer::train_stage_base(&mut sep_model, &sep_stage, &cfg).unwrap();
    let (acc, auc) = hdp::eval::evaluate_model(&sep_model, &sep_stage).unwrap();
    println!("fresh detector on x vs x+delta: acc {acc:.2} auc {auc:.2}");
}

fn kinds() {
    use hdp::synthdata::{DomainParams, ManipKind, ManipulationSpec, Region, StageEntry};
    let hi_noise = DomainParams {
        blob_count: 5,
        blob_scale: 0.20,
        noise_cutoff: 1.0,
        noise_amp: 0.20,
        palette_seed: 11,
    };
    let lo_noise = DomainParams {
        blob_count: 4,
        blob_scale: 0.22,
        noise_cutoff: 0.35,
        noise_amp: 0.05,
        palette_seed: 12,
    };
    let region = Region { cx: 0.5, cy: 0.5, rx: 0.38, ry: 0.38 };
    let big = Region { cx: 0.5, cy: 0.5, rx: 0.45, ry: 0.45 };
    let cases: Vec<(&str, &DomainParams, ManipKind, Region)> = vec![
        ("hi", &hi_noise, ManipKind::Smooth, region),
        ("hi", &hi_noise, ManipKind::Sharpen, region),
        ("hi", &hi_noise, ManipKind::Blend, region),
        ("hi", &hi_noise, ManipKind::PatchShuffle, region),
        ("lo", &lo_noise, ManipKind::NoisePatch, region),
        ("lo", &lo_noise, ManipKind::Blend, region),
        ("lo", &lo_noise, ManipKind::ColorShift, big),
        ("hi", &hi_noise, ManipKind::NoisePatch, region),
    ];
    for (dname, domain, kind, reg) in cases {
        for seed in [0u64, 1, 2] {
            let entry = StageEntry {
                domain: domain.clone(),
                manipulation: ManipulationSpec { kind, strength: 1.0, region: reg, seed: 0 },
                sizes: Default::default(),
            };
            let stage = hdp::synthdata::build_stage(&entry, 1, 71, 32, 32).unwrap();
            let cfg = TrainConfig { seed, ..TrainConfig::default() };
            let mut model = Detector::new(3, 32, 32, seed);
            let out = trainer::train_stage_base(&mut model, &stage, &cfg).unwrap();
            let (acc, auc) = hdp::eval::evaluate_model(&model, &stage).unwrap();
            let reals: Vec<_> = stage.test_real.iter().map(|s| s.image.clone()).collect();
            let probs = model.forward_prob(&reals).unwrap();
            let mean_logit: f32 =
                probs.iter().map(|&p| (p / (1.0 - p)).ln()).sum::<f32>() / probs.len() as f32;
            println!(
                "{dname} {:14} seed {seed} loss {:.4} acc {:.2} auc {:.2} real-logit {:.2}",
                format!("{kind:?}"),
                out.mean_loss.total,
                acc,
                auc,
                mean_logit
            );
        }
    }
}

fn speed() {
    // raw forward/backward throughput at batch 64, 32x32
    let spec = synthdata::preset("p1").unwrap();
    let mut spec_small = spec.clone();
    for e in &mut spec_small.stages {
        e.sizes = StageSizes {
            train_per_class: 64,
            test_per_class: 8,
        };
    }
    let t0 = Instant::now();
    let stages = synthdata::build_protocol(&spec_small).unwrap();
    println!("datagen 4x(64+8)x2: {:.3}s", t0.elapsed().as_secs_f64());

    let det = Detector::new(3, 32, 32, 0);
    let imgs: Vec<_> = stages[0].train_real.iter().map(|s| s.image.clone()).collect();

    let t0 = Instant::now();
    let reps = 20;
    for _ in 0..reps {
        let _ = det.forward_prob(&imgs).unwrap();
    }
    let fwd = t0.elapsed().as_secs_f64() / reps as f64;
    println!("forward batch64: {:.1} ms", fwd * 1000.0);

    let t0 = Instant::now();
    let mut grads = vec![0.0f32; det.param_count()];
    for _ in 0..reps {
        grads.fill(0.0);
        for img in &imgs {
            let c = det.forward_cached(img);
            det.backward_into(&c, 0.01, None, Some(&mut grads), None);
        }
    }
    let fb = t0.elapsed().as_secs_f64() / reps as f64;
    println!("fwd+param-bwd batch64: {:.1} ms", fb * 1000.0);

    let t0 = Instant::now();
    let mut din = vec![0.0f32; 3 * 32 * 32];
    for _ in 0..reps {
        din.fill(0.0);
        for img in &imgs {
            let c = det.forward_cached(img);
            det.backward_into(&c, 0.01, None, None, Some(&mut din));
        }
    }
    let fi = t0.elapsed().as_secs_f64() / reps as f64;
    println!("fwd+input-bwd batch64: {:.1} ms", fi * 1000.0);
}

fn stage1() {
    // single-stage training: does it hit >= 90% and how confident is it;
    // then UAP generation cost at defaults
    let spec = synthdata::preset("p1").unwrap();
    let t0 = Instant::now();
    let stages = synthdata::build_protocol(&spec).unwrap();
    println!("datagen full p1: {:.2}s", t0.elapsed().as_secs_f64());

    let cfg = TrainConfig::default();
    for (si, stage) in stages.iter().enumerate() {
        let mut model = Detector::new(3, 32, 32, 0);
        let t0 = Instant::now();
        let out = trainer::train_stage_base(&mut model, stage, &cfg).unwrap();
        let train_t = t0.elapsed().as_secs_f64();
        let (acc, auc) = hdp::eval::evaluate_model(&model, stage).unwrap();
        // confidence on reals
        let reals: Vec<_> = stage.test_real.iter().map(|s| s.image.clone()).collect();
        let probs = model.forward_prob(&reals).unwrap();
        let mean_logit: f32 = probs
            .iter()
            .map(|&p| (p / (1.0 - p)).ln())
            .sum::<f32>()
            / probs.len() as f32;

        let t0 = Instant::now();
        let subset: Vec<_> = stage.train_real[..1000]
            .iter()
            .map(|s| s.image.clone())
            .collect();
        let gen = hdp::uap::generate_uap(&model, &subset, &cfg.uap, 1, 0).unwrap();
        let uap_t = t0.elapsed().as_secs_f64();
        println!(
            "stage{}: train {:.1}s loss {:.4} acc {:.2} auc {:.2} real-logit {:.2} | uap {:.1}s iters {} rate {:.3} reached {}",
            si + 1,
            train_t,
            out.mean_loss.total,
            acc,
            auc,
            mean_logit,
            uap_t,
            gen.perturbation.iterations_used,
            gen.perturbation.achieved_attack_rate,
            gen.reached_sigma
        );
    }
}

/// order_run <kinds e.g. m,s,b,u> <method sft|hdp> <seed> [beta] [toggles]
/// kind letters: b=blend u=shuffle m=smooth s=sharpen n=noise c=colorshift
fn order_run(args: &[String]) {
    use hdp::synthdata::ManipKind;
    let kinds: Vec<ManipKind> = args[0]
        .split(',')
        .map(|k| match k {
            "b" => ManipKind::Blend,
            "u" => ManipKind::PatchShuffle,
            "m" => ManipKind::Smooth,
            "s" => ManipKind::Sharpen,
            "n" => ManipKind::NoisePatch,
            "c" => ManipKind::ColorShift,
            other => panic!("unknown kind {other}"),
        })
        .collect();
    let method = match args.get(1).map(|s| s.as_str()).unwrap_or("sft") {
        "hdp" => Method::Hdp,
        _ => Method::Sft,
    };
    let seed: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0);
    let beta: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let toggles = args.get(4).map(|s| s.as_str()).unwrap_or("epr");

    let mut spec = synthdata::preset("p1").unwrap();
    for (e, &kind) in spec.stages.iter_mut().zip(&kinds) {
        e.manipulation.kind = kind;
    }
    if let Some(amp) = args.get(5).and_then(|s| s.parse::<f64>().ok()) {
        for e in &mut spec.stages {
            e.domain.noise_amp = amp;
        }
    }
    if let Some(n) = args.get(6).and_then(|s| s.parse::<usize>().ok()) {
        for e in &mut spec.stages {
            e.sizes.train_per_class = n;
        }
    }
    let stages = synthdata::build_protocol(&spec).unwrap();
    let cfg = TrainConfig {
        seed,
        method,
        beta,
        enable_entropy: toggles.contains('e'),
        enable_distill_pseudo: toggles.contains('p'),
        enable_distill_real: toggles.contains('r'),
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let run = trainer::run_protocol(&stages, &cfg, None).unwrap();
    println!(
        "{} order {:?} seed {seed} beta {beta} {toggles}: {:.0}s",
        method.name(),
        args[0],
        t0.elapsed().as_secs_f64()
    );
    print_matrix(&run.matrix_acc);
    for r in &run.stage_results {
        if r.uap_iterations.is_some() {
            println!(
                "  stage {}: uap iters {:?} rate {:?}",
                r.stage_id, r.uap_iterations, r.uap_attack_rate
            );
        }
    }
    let avg = hdp::eval::avg_metric(&run.matrix_acc).unwrap();
    let pre = hdp::eval::pre_metric(&run.matrix_acc).unwrap();
    let t = stages.len();
    let final_123: f64 =
        (1..t).map(|j| run.matrix_acc.get(t, j).unwrap()).sum::<f64>() / (t - 1) as f64;
    println!("AVG {avg:.2} PRE {pre:.2} final-mean-prev {final_123:.2}");
}

fn sft_run(seed: u64) {
    let spec = synthdata::preset("p1").unwrap();
    let stages = synthdata::build_protocol(&spec).unwrap();
    let cfg = TrainConfig {
        seed,
        method: Method::Sft,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let run = trainer::run_protocol_sft(&stages, &cfg, None).unwrap();
    println!("sft seed {seed}: {:.1}s", t0.elapsed().as_secs_f64());
    print_matrix(&run.matrix_acc);
    let avg = hdp::eval::avg_metric(&run.matrix_acc).unwrap();
    let pre = hdp::eval::pre_metric(&run.matrix_acc).unwrap();
    let final_123: f64 = (1..=3)
        .map(|j| run.matrix_acc.get(4, j).unwrap())
        .sum::<f64>()
        / 3.0;
    println!("AVG {avg:.2} PRE {pre:.2} final-mean-tasks1-3 {final_123:.2}");
}

fn hdp_run(seed: u64) {
    let argv: Vec<String> = std::env::args().collect();
    let beta: f64 = argv.get(3).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let toggles = argv.get(4).map(|s| s.as_str()).unwrap_or("epr");
    let spec = synthdata::preset("p1").unwrap();
    let stages = synthdata::build_protocol(&spec).unwrap();
    let cfg = TrainConfig {
        seed,
        method: Method::Hdp,
        beta,
        enable_entropy: toggles.contains('e'),
        enable_distill_pseudo: toggles.contains('p'),
        enable_distill_real: toggles.contains('r'),
        ..TrainConfig::default()
    };
    println!("beta {beta} toggles {toggles}");
    let t0 = Instant::now();
    let run = trainer::run_protocol_hdp(&stages, &cfg, None).unwrap();
    println!("hdp seed {seed}: {:.1}s", t0.elapsed().as_secs_f64());
    print_matrix(&run.matrix_acc);
    for r in &run.stage_results {
        println!(
            "  stage {}: {:.1}s uap iters {:?} rate {:?} reached {:?}",
            r.stage_id, r.wall_seconds, r.uap_iterations, r.uap_attack_rate, r.uap_reached_sigma
        );
        println!(
            "    loss: ce {:.4} E {:.4} l_r {:.4} l_p {:.4} total {:.4}",
            r.mean_loss.ce,
            r.mean_loss.pseudo_entropy,
            r.mean_loss.distill_real,
            r.mean_loss.distill_pseudo,
            r.mean_loss.total
        );
    }
    let avg = hdp::eval::avg_metric(&run.matrix_acc).unwrap();
    let pre = hdp::eval::pre_metric(&run.matrix_acc).unwrap();
    println!("AVG {avg:.2} PRE {pre:.2}");
}

fn print_matrix(m: &hdp::eval::EvalMatrix) {
    for (t, row) in m.rows.iter().enumerate() {
        let vals: Vec<String> = row
            .iter()
            .map(|v| v.map(|x| format!("{x:6.2}")).unwrap_or("  -  ".into()))
            .collect();
        println!("  after stage {}: [{}]", t + 1, vals.join(", "));
    }
}
