//! Batch command-line front end: builds protocols, runs methods, sweeps
//! ablation grids, renders report tables, and exposes standalone UAP
//! generation and dataset dumps.
//!
//! Configuration precedence is flags > config file > defaults, and the run
//! manifest records the fully resolved result. Exit codes: 0 success, 2 usage
//! error, 3 runtime failure.

use crate::detector::Detector;
use crate::error::Error;
use crate::eval::{avg_metric, pre_final_metric, pre_metric, MetricsReport};
use crate::rng::splitmix64;
use crate::synthdata::{self, ProtocolSpec};
use crate::trainer::{self, Method, StageResult, TrainConfig};
use crate::uap;
use serde::Serialize;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

const USAGE: &str = "\
usage: hdp <command> [flags]

commands:
  run      --protocol {p1|p2|p3|PATH} --method {hdp|sft|joint} --out DIR
           [--seed N] [--beta X] [--epochs N] [--buffer K] [--epsilon X]
           [--alpha X] [--sigma X] [--lr X] [--weight-decay X]
           [--batch-size N] [--max-iters N] [--gen-subset-size N]
           [--uap-batch-size N] [--uap-paper-sign] [--clamp-pseudo]
           [--distill-per-element] [--no-entropy] [--no-distill-pseudo]
           [--no-distill-real] [--config FILE]
  sweep    --grid {sigma=A,B,..|beta=A,B,..|components} plus run flags
  report   --in DIR [--csv FILE]
  gen-uap  --checkpoint FILE --protocol P --stage N --out FILE [uap flags]
  dump     --protocol P --stage N --out DIR [--split {train|test|all}]
";

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(msg) => CliError::Usage(msg),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

pub fn main_entry(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("{USAGE}");
            2
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            3
        }
    }
}

fn dispatch(args: &[String]) -> CliResult<()> {
    let cmd = args
        .first()
        .ok_or_else(|| CliError::Usage("missing command".into()))?;
    let rest = &args[1..];
    match cmd.as_str() {
        "run" => cmd_run(rest),
        "sweep" => cmd_sweep(rest),
        "report" => cmd_report(rest),
        "gen-uap" => cmd_gen_uap(rest),
        "dump" => cmd_dump(rest),
        other => Err(CliError::Usage(format!("unknown command '{other}'"))),
    }
}

// ── flag/config resolution ─────────────────────────────────────────────────

const BOOL_FLAGS: &[&str] = &[
    "uap-paper-sign",
    "clamp-pseudo",
    "distill-per-element",
    "no-entropy",
    "no-distill-pseudo",
    "no-distill-real",
];

/// Parsed command line plus optional config file, with precedence
/// flags > config file > defaults.
struct Opts {
    flags: HashMap<String, String>,
    file: HashMap<String, String>,
}

impl Opts {
    fn parse(args: &[String]) -> CliResult<Opts> {
        let mut flags = HashMap::new();
        let mut i = 0;
        while i < args.len() {
            let arg = &args[i];
            let key = arg
                .strip_prefix("--")
                .ok_or_else(|| CliError::Usage(format!("unexpected argument '{arg}'")))?;
            if BOOL_FLAGS.contains(&key) {
                flags.insert(key.to_string(), "true".to_string());
                i += 1;
            } else {
                let val = args
                    .get(i + 1)
                    .ok_or_else(|| CliError::Usage(format!("flag --{key} needs a value")))?;
                flags.insert(key.to_string(), val.clone());
                i += 2;
            }
        }
        let mut file = HashMap::new();
        if let Some(path) = flags.get("config") {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config '{path}': {e}")))?;
            for (ln, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    CliError::Usage(format!("config line {} is not key=value", ln + 1))
                })?;
                file.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(Opts { flags, file })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.flags
            .get(key)
            .or_else(|| self.file.get(key))
            .map(|s| s.as_str())
    }

    fn require(&self, key: &str) -> CliResult<&str> {
        self.get(key)
            .ok_or_else(|| CliError::Usage(format!("missing required flag --{key}")))
    }

    fn parse_num<T: std::str::FromStr>(&self, key: &str, default: T) -> CliResult<T> {
        match self.get(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| CliError::Usage(format!("invalid value for --{key}: '{s}'"))),
        }
    }

    fn flag_bool(&self, key: &str) -> bool {
        matches!(self.get(key), Some("true") | Some("1") | Some("yes"))
    }
}

fn resolve_train_config(opts: &Opts) -> CliResult<TrainConfig> {
    let method = Method::parse(opts.get("method").unwrap_or("hdp"))?;
    let mut cfg = TrainConfig {
        method,
        ..TrainConfig::default()
    };
    cfg.seed = opts.parse_num("seed", cfg.seed)?;
    cfg.lr = opts.parse_num("lr", cfg.lr)?;
    cfg.weight_decay = opts.parse_num("weight-decay", cfg.weight_decay)?;
    cfg.batch_size = opts.parse_num("batch-size", cfg.batch_size)?;
    cfg.epochs_per_stage = opts.parse_num("epochs", cfg.epochs_per_stage)?;
    cfg.beta = opts.parse_num("beta", cfg.beta)?;
    cfg.buffer_per_stage = opts.parse_num("buffer", cfg.buffer_per_stage)?;
    cfg.uap.epsilon = opts.parse_num("epsilon", cfg.uap.epsilon)?;
    cfg.uap.alpha = opts.parse_num("alpha", cfg.uap.alpha)?;
    cfg.uap.sigma = opts.parse_num("sigma", cfg.uap.sigma)?;
    cfg.uap.max_iters = opts.parse_num("max-iters", cfg.uap.max_iters)?;
    cfg.uap.gen_subset_size = opts.parse_num("gen-subset-size", cfg.uap.gen_subset_size)?;
    cfg.uap.batch_size = opts.parse_num("uap-batch-size", cfg.uap.batch_size)?;
    cfg.uap.paper_sign = opts.flag_bool("uap-paper-sign");
    cfg.uap.clamp_pseudo = opts.flag_bool("clamp-pseudo");
    cfg.distill_per_element = opts.flag_bool("distill-per-element");
    cfg.enable_entropy = !opts.flag_bool("no-entropy");
    cfg.enable_distill_pseudo = !opts.flag_bool("no-distill-pseudo");
    cfg.enable_distill_real = !opts.flag_bool("no-distill-real");

    if !(cfg.uap.sigma > 0.0 && cfg.uap.sigma <= 1.0) {
        return Err(CliError::Usage("sigma must be in (0,1]".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_protocol(opts: &Opts) -> CliResult<ProtocolSpec> {
    let name = opts.require("protocol")?;
    match name {
        "p1" | "p2" | "p3" => Ok(synthdata::preset(name)?),
        path => {
            let spec = ProtocolSpec::load(Path::new(path)).map_err(|e| {
                CliError::Usage(format!("cannot load protocol '{path}': {e}"))
            })?;
            Ok(spec)
        }
    }
}

/// Deterministic hash of the resolved configuration, for report provenance.
fn config_hash(cfg: &TrainConfig, protocol: &ProtocolSpec) -> String {
    let blob = serde_json::to_vec(&(cfg, protocol)).expect("config serializes");
    let mut state = 0x5bd1_e995u64;
    for chunk in blob.chunks(8) {
        let mut b = [0u8; 8];
        b[..chunk.len()].copy_from_slice(chunk);
        state ^= u64::from_le_bytes(b);
        splitmix64(&mut state);
    }
    format!("{state:016x}")
}

// ── run ────────────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct RunManifest<'a> {
    tool_version: &'static str,
    timestamp_unix: u64,
    protocol: &'a ProtocolSpec,
    train: &'a TrainConfig,
    out_dir: String,
    report_path: String,
    /// Stages whose UAP generation stopped below the sigma threshold.
    sigma_unreached_stages: Vec<u32>,
    stage_results: &'a [StageResult],
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn execute_run(
    protocol: &ProtocolSpec,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> CliResult<MetricsReport> {
    std::fs::create_dir_all(out_dir).map_err(Error::Io)?;
    let stages = synthdata::build_protocol(protocol)?;
    let run = trainer::run_protocol(&stages, cfg, Some(out_dir))?;

    let avg_acc = avg_metric(&run.matrix_acc)?;
    let avg_auc = avg_metric(&run.matrix_auc)?;
    let report = MetricsReport {
        protocol: protocol.name.clone(),
        method: cfg.method.name().to_string(),
        seed: cfg.seed,
        beta: cfg.beta,
        epochs: cfg.epochs_per_stage,
        config_hash: config_hash(cfg, protocol),
        avg_acc,
        avg_auc,
        pre_acc: pre_metric(&run.matrix_acc).ok(),
        pre_auc: pre_metric(&run.matrix_auc).ok(),
        pre_final_acc: pre_final_metric(&run.matrix_acc).ok(),
        pre_final_auc: pre_final_metric(&run.matrix_auc).ok(),
        matrix_acc: run.matrix_acc,
        matrix_auc: run.matrix_auc,
        per_stage_seconds: run.stage_results.iter().map(|r| r.wall_seconds).collect(),
    };
    let report_path = out_dir.join("report.json");
    report.save(&report_path)?;

    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        timestamp_unix: now_unix(),
        protocol,
        train: cfg,
        out_dir: out_dir.to_string_lossy().into_owned(),
        report_path: report_path.to_string_lossy().into_owned(),
        sigma_unreached_stages: run
            .stage_results
            .iter()
            .filter(|r| r.uap_reached_sigma == Some(false))
            .map(|r| r.stage_id)
            .collect(),
        stage_results: &run.stage_results,
    };
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(Error::Json)?,
    )
    .map_err(Error::Io)?;
    Ok(report)
}

fn print_report_line(report: &MetricsReport) {
    let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());
    println!(
        "{} {} seed {}: AVG acc {:.2} auc {:.2} | PRE acc {} auc {}",
        report.method,
        report.protocol,
        report.seed,
        report.avg_acc,
        report.avg_auc,
        fmt_opt(report.pre_acc),
        fmt_opt(report.pre_auc),
    );
}

fn cmd_run(args: &[String]) -> CliResult<()> {
    let opts = Opts::parse(args)?;
    let cfg = resolve_train_config(&opts)?;
    let protocol = resolve_protocol(&opts)?;
    let out_dir = PathBuf::from(opts.require("out")?);
    let report = execute_run(&protocol, &cfg, &out_dir)?;
    print_report_line(&report);
    Ok(())
}

// ── sweep ──────────────────────────────────────────────────────────────────

struct GridPoint {
    name: String,
    apply: Box<dyn Fn(&mut TrainConfig)>,
}

fn parse_grid(spec: &str) -> CliResult<Vec<GridPoint>> {
    if let Some(values) = spec.strip_prefix("sigma=") {
        let points: Vec<GridPoint> = values
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| -> CliResult<GridPoint> {
                let v: f32 = s
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad sigma value '{s}'")))?;
                if !(v > 0.0 && v <= 1.0) {
                    return Err(CliError::Usage("sigma must be in (0,1]".into()));
                }
                Ok(GridPoint {
                    name: format!("sigma_{s}"),
                    apply: Box::new(move |c| c.uap.sigma = v),
                })
            })
            .collect::<CliResult<_>>()?;
        if points.is_empty() {
            return Err(CliError::Usage("empty sigma grid".into()));
        }
        Ok(points)
    } else if let Some(values) = spec.strip_prefix("beta=") {
        let points: Vec<GridPoint> = values
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| -> CliResult<GridPoint> {
                let v: f64 = s
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad beta value '{s}'")))?;
                if v < 0.0 {
                    return Err(CliError::Usage("beta must be >= 0".into()));
                }
                Ok(GridPoint {
                    name: format!("beta_{s}"),
                    apply: Box::new(move |c| c.beta = v),
                })
            })
            .collect::<CliResult<_>>()?;
        if points.is_empty() {
            return Err(CliError::Usage("empty beta grid".into()));
        }
        Ok(points)
    } else if spec == "components" {
        // all eight toggle combinations of {entropy, pseudo-distill, real-distill}
        Ok((0..8u8)
            .map(|mask| {
                let e = mask & 1 != 0;
                let p = mask & 2 != 0;
                let r = mask & 4 != 0;
                GridPoint {
                    name: format!(
                        "comp_e{}_p{}_r{}",
                        u8::from(e),
                        u8::from(p),
                        u8::from(r)
                    ),
                    apply: Box::new(move |c| {
                        c.enable_entropy = e;
                        c.enable_distill_pseudo = p;
                        c.enable_distill_real = r;
                    }),
                }
            })
            .collect())
    } else {
        Err(CliError::Usage(format!(
            "unknown grid '{spec}' (expected sigma=..., beta=... or components)"
        )))
    }
}

fn cmd_sweep(args: &[String]) -> CliResult<()> {
    let opts = Opts::parse(args)?;
    let grid_spec = opts.require("grid")?;
    let points = parse_grid(grid_spec)?;
    let base_cfg = resolve_train_config(&opts)?;
    let protocol = resolve_protocol(&opts)?;
    let out_dir = PathBuf::from(opts.require("out")?);
    std::fs::create_dir_all(&out_dir).map_err(Error::Io)?;

    let mut csv = String::from(
        "point,protocol,method,seed,avg_acc,avg_auc,pre_acc,pre_auc,pre_final_acc,pre_final_auc\n",
    );
    for point in &points {
        let mut cfg = base_cfg.clone();
        (point.apply)(&mut cfg);
        let point_dir = out_dir.join(&point.name);
        let report = execute_run(&protocol, &cfg, &point_dir)?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let _ = writeln!(
            csv,
            "{},{},{},{},{:.6},{:.6},{},{},{},{}",
            point.name,
            report.protocol,
            report.method,
            report.seed,
            report.avg_acc,
            report.avg_auc,
            opt(report.pre_acc),
            opt(report.pre_auc),
            opt(report.pre_final_acc),
            opt(report.pre_final_auc),
        );
        print_report_line(&report);
    }
    std::fs::write(out_dir.join("summary.csv"), csv).map_err(Error::Io)?;
    Ok(())
}

// ── report ─────────────────────────────────────────────────────────────────

fn find_reports(dir: &Path, out: &mut Vec<PathBuf>) {
    let Ok(entries) = std::fs::read_dir(dir) else {
        return;
    };
    let mut paths: Vec<PathBuf> = entries.flatten().map(|e| e.path()).collect();
    paths.sort();
    for path in paths {
        if path.is_dir() {
            find_reports(&path, out);
        } else if path.file_name().is_some_and(|n| n == "report.json") {
            out.push(path);
        }
    }
}

fn cmd_report(args: &[String]) -> CliResult<()> {
    let opts = Opts::parse(args)?;
    let in_dir = PathBuf::from(opts.require("in")?);
    let mut paths = Vec::new();
    find_reports(&in_dir, &mut paths);
    if paths.is_empty() {
        return Err(CliError::Usage(format!(
            "no report.json files found under {}",
            in_dir.display()
        )));
    }

    let mut rows = Vec::new();
    for path in &paths {
        let report = MetricsReport::load(path)?;
        // cross-check the stored summaries against the stored matrices
        let (avg_acc, avg_auc, pre_acc, pre_auc) = report.recompute_summaries()?;
        if avg_acc != report.avg_acc
            || avg_auc != report.avg_auc
            || pre_acc != report.pre_acc
            || pre_auc != report.pre_auc
        {
            return Err(CliError::Runtime(format!(
                "summaries in {} do not match their matrices",
                path.display()
            )));
        }
        rows.push(report);
    }

    let opt = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());
    println!(
        "{:<8} {:<10} {:>6} {:>8} {:>8} {:>8} {:>8}",
        "method", "protocol", "seed", "AVG_acc", "AVG_auc", "PRE_acc", "PRE_auc"
    );
    for r in &rows {
        println!(
            "{:<8} {:<10} {:>6} {:>8.2} {:>8.2} {:>8} {:>8}",
            r.method,
            r.protocol,
            r.seed,
            r.avg_acc,
            r.avg_auc,
            opt(r.pre_acc),
            opt(r.pre_auc)
        );
    }

    if let Some(csv_path) = opts.get("csv") {
        let mut csv =
            String::from("method,protocol,seed,avg_acc,avg_auc,pre_acc,pre_auc\n");
        for r in &rows {
            let opt6 = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            let _ = writeln!(
                csv,
                "{},{},{},{:.6},{:.6},{},{}",
                r.method,
                r.protocol,
                r.seed,
                r.avg_acc,
                r.avg_auc,
                opt6(r.pre_acc),
                opt6(r.pre_auc)
            );
        }
        std::fs::write(csv_path, csv).map_err(Error::Io)?;
    }
    Ok(())
}

// ── gen-uap ────────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct GenUapManifest {
    checkpoint: String,
    protocol: String,
    stage: u32,
    epsilon: f32,
    alpha: f32,
    sigma: f32,
    achieved_attack_rate: f32,
    iterations_used: u32,
    sigma_reached: bool,
}

fn cmd_gen_uap(args: &[String]) -> CliResult<()> {
    let opts = Opts::parse(args)?;
    let cfg = resolve_train_config(&opts)?;
    let checkpoint = opts.require("checkpoint")?;
    let protocol = resolve_protocol(&opts)?;
    let stage_no: u32 = opts.parse_num("stage", 0u32)?;
    let out_file = PathBuf::from(opts.require("out")?);
    if stage_no == 0 || stage_no as usize > protocol.stages.len() {
        return Err(CliError::Usage(format!(
            "--stage must be in 1..={}",
            protocol.stages.len()
        )));
    }

    let model = Detector::load_checkpoint(Path::new(checkpoint))?;
    let stages = synthdata::build_protocol(&protocol)?;
    let stage = &stages[stage_no as usize - 1];
    let n = stage.train_real.len();
    let k = cfg.uap.gen_subset_size.min(n);
    let mut rng = crate::rng::Rng::from_parts(&[crate::rng::tag::SUBSET, cfg.seed, stage_no as u64]);
    let subset: Vec<_> = rng
        .sample_indices(n, k)
        .into_iter()
        .map(|i| stage.train_real[i].image.clone())
        .collect();

    let gen = uap::generate_uap(&model, &subset, &cfg.uap, stage_no, cfg.seed)?;
    if let Some(parent) = out_file.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(Error::Io)?;
        }
    }
    uap::write_uap(&gen.perturbation, &out_file)?;
    let manifest = GenUapManifest {
        checkpoint: checkpoint.to_string(),
        protocol: protocol.name.clone(),
        stage: stage_no,
        epsilon: cfg.uap.epsilon,
        alpha: cfg.uap.alpha,
        sigma: cfg.uap.sigma,
        achieved_attack_rate: gen.perturbation.achieved_attack_rate,
        iterations_used: gen.perturbation.iterations_used,
        sigma_reached: gen.reached_sigma,
    };
    std::fs::write(
        out_file.with_extension("hdpu.json"),
        serde_json::to_string_pretty(&manifest).map_err(Error::Json)?,
    )
    .map_err(Error::Io)?;
    println!(
        "attack rate {:.4}, iterations {}",
        gen.perturbation.achieved_attack_rate, gen.perturbation.iterations_used
    );
    if !gen.reached_sigma {
        return Err(CliError::Runtime(format!(
            "attack rate {:.4} below sigma {} after {} iterations (best perturbation written)",
            gen.perturbation.achieved_attack_rate, cfg.uap.sigma, cfg.uap.max_iters
        )));
    }
    Ok(())
}

// ── dump ───────────────────────────────────────────────────────────────────

fn cmd_dump(args: &[String]) -> CliResult<()> {
    let opts = Opts::parse(args)?;
    let protocol = resolve_protocol(&opts)?;
    let stage_no: u32 = opts.parse_num("stage", 0u32)?;
    let out_dir = PathBuf::from(opts.require("out")?);
    let split = opts.get("split").unwrap_or("all");
    if stage_no == 0 || stage_no as usize > protocol.stages.len() {
        return Err(CliError::Usage(format!(
            "--stage must be in 1..={}",
            protocol.stages.len()
        )));
    }
    let stages = synthdata::build_protocol(&protocol)?;
    let stage = &stages[stage_no as usize - 1];
    let mut samples = Vec::new();
    match split {
        "train" => {
            samples.extend(stage.train_real.iter().cloned());
            samples.extend(stage.train_fake.iter().cloned());
        }
        "test" => {
            samples.extend(stage.test_real.iter().cloned());
            samples.extend(stage.test_fake.iter().cloned());
        }
        "all" => {
            samples.extend(stage.train_real.iter().cloned());
            samples.extend(stage.train_fake.iter().cloned());
            samples.extend(stage.test_real.iter().cloned());
            samples.extend(stage.test_fake.iter().cloned());
        }
        other => {
            return Err(CliError::Usage(format!(
                "--split must be train, test or all, got '{other}'"
            )))
        }
    }
    synthdata::dump_samples(&samples, &out_dir)?;
    println!("wrote {} samples to {}", samples.len(), out_dir.display());
    Ok(())
}
