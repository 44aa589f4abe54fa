//! `herbs` command-line entry point.
//!
//! Every failure ends the process with a nonzero status and one stderr line
//! of the form `E_CODE: message`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::data::Phase;
use crate::error::HerbsError;
use crate::eval::{
    evaluate, plot_series, render_heatmap, save_heatmap, write_dump, EvalOptions, EvalReport, HeatSource,
};
use crate::gradcheck::{gradcheck_net, GradcheckConfig};
use crate::train::{Checkpoint, RunConfig, Trainer};

/// Marks a directory as written by this tool; `--overwrite` clears only such directories.
pub const OUTPUT_MARKER: &str = ".herbs-output";
pub const RESOLVED_CONFIG: &str = "resolved_config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code, self.message.replace('\n', " "))
    }
}

impl From<HerbsError> for CliError {
    fn from(e: HerbsError) -> Self {
        let code = match &e {
            HerbsError::UnknownKey(_) => "E_UNKNOWN_KEY",
            HerbsError::InvalidConfig(_)
            | HerbsError::InvalidVariant(_)
            | HerbsError::UnsupportedBackbone(_)
            | HerbsError::InvalidTemperature(_)
            | HerbsError::TopKOutOfRange { .. }
            | HerbsError::MissingHeads(_) => "E_CONFIG",
            HerbsError::Io(_) => "E_IO",
            HerbsError::Dataset(_)
            | HerbsError::Image(_)
            | HerbsError::Empty(_)
            | HerbsError::LabelOutOfRange { .. } => "E_DATA",
            HerbsError::NonFiniteLoss { .. } | HerbsError::NonFiniteParams => "E_NONFINITE",
            HerbsError::Checkpoint(_) | HerbsError::Json(_) => "E_CHECKPOINT",
            _ => "E_INTERNAL",
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new("E_IO", e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "herbs",
    version,
    about = "Background suppression and high-temperature refinement for fine-grained classification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override applied after the file, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace a previous output of this tool.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and write a checkpoint, an epoch log and the resolved config.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint: prediction dump plus text and JSON reports.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate the training split instead of the test split.
        #[arg(long)]
        train_split: bool,
    },
    /// Render heat maps of test images.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `max_score`, `target_class` or `both`.
        #[arg(long, default_value = "both")]
        source: String,
    },
    /// Compare backpropagated gradients with central differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Train and evaluate once per grid value of one parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `lambda_d` or `temperature`, or any config key.
        #[arg(long)]
        param: String,
        /// `a..b` (integers), or a comma list; defaults to 0..9 for lambda_d and 0.5..256 for temperature.
        #[arg(long)]
        values: Option<String>,
    },
}

/// Parses argv, runs the command and returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("bad arguments").trim_start_matches("error: ");
            eprintln!("E_USAGE: {first}");
            return 2;
        }
    };
    init_workers();
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            1
        }
    }
}

fn init_workers() {
    if let Some(n) = std::env::var("HERBS_NUM_WORKERS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

pub fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Train { common, resume } => train(&common, resume),
        Command::Eval { common, checkpoint, train_split } => eval(&common, checkpoint.as_deref(), train_split),
        Command::Visualize { common, checkpoint, source } => visualize(&common, checkpoint.as_deref(), &source),
        Command::Gradcheck { common, samples, tolerance } => gradcheck(&common, samples, tolerance),
        Command::Sweep { common, param, values } => sweep(&common, &param, values.as_deref()),
    }
}

/// Applies `--set` pairs then `--seed` on top of `cfg`.
pub fn apply_overrides(cfg: &mut RunConfig, sets: &[String], seed: Option<u64>) -> CliResult<()> {
    for s in sets {
        let (k, v) =
            s.split_once('=').ok_or_else(|| CliError::new("E_CONFIG", format!("override `{s}` is not key=value")))?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = seed {
        cfg.set("seed", &seed.to_string())?;
    }
    cfg.validate()?;
    Ok(())
}

pub fn resolve_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::new("E_IO", format!("{}: {e}", p.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, &common.sets, common.seed)?;
    Ok(cfg)
}

/// Creates `dir`, refusing to reuse a non-empty one unless `overwrite` is
/// set and the directory carries the marker file.
pub fn prepare_output(dir: &Path, overwrite: bool) -> CliResult<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty {
            if !overwrite {
                return Err(CliError::new(
                    "E_OUTPUT_EXISTS",
                    format!("{} is not empty; pass --overwrite to replace it", dir.display()),
                ));
            }
            if !dir.join(OUTPUT_MARKER).exists() {
                return Err(CliError::new(
                    "E_OUTPUT_EXISTS",
                    format!("{} was not written by herbs; refusing to clear it", dir.display()),
                ));
            }
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    fs::write(dir.join(OUTPUT_MARKER), b"")?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(HerbsError::from)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn train(common: &Common, resume: bool) -> CliResult<()> {
    let out = &common.out;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let (cfg, trainer, split) = if resume {
        if !ckpt_path.exists() {
            return Err(CliError::new("E_NO_CKPT", format!("nothing to resume in {}", out.display())));
        }
        let ckpt = Checkpoint::load(&ckpt_path)?;
        let mut cfg = ckpt.header.config.clone();
        apply_overrides(&mut cfg, &common.sets, common.seed)?;
        let split = cfg.load_data()?;
        let net = ckpt.restore()?;
        (cfg.clone(), Trainer::resume(net, cfg.train, &ckpt)?, split)
    } else {
        let cfg = resolve_config(common)?;
        prepare_output(out, common.overwrite)?;
        let split = cfg.load_data()?;
        let net = cfg.build_net(split.train.num_classes())?;
        (cfg.clone(), Trainer::new(net, cfg.train)?, split)
    };
    fs::write(out.join(RESOLVED_CONFIG), cfg.to_text())?;
    let mut log = fs::OpenOptions::new().create(true).append(true).open(out.join(TRAIN_LOG))?;
    let mut trainer = trainer;
    println!(
        "training variant {} ({} parameters) on {} images for {} epochs",
        trainer.net.cfg.variant,
        trainer.net.num_parameters(),
        split.train.len(),
        cfg.train.epochs
    );
    let names = split.train.class_names.clone();
    trainer.fit(&split.train, |t, r| {
        let line = serde_json::to_string(r)?;
        writeln!(log, "{line}")?;
        println!(
            "epoch {:>3}  T {:<6} lr {:.5}  loss {:.4}  train acc {:.3}",
            r.epoch, r.temperature, r.lr, r.loss_herbs, r.train_acc
        );
        Checkpoint::capture(t, &cfg, &names).save(&ckpt_path)
    })?;
    if trainer.cfg.epochs == 0 || !ckpt_path.exists() {
        Checkpoint::capture(&trainer, &cfg, &names).save(&ckpt_path)?;
    }
    println!("checkpoint written to {}", ckpt_path.display());
    Ok(())
}

fn load_for_eval(common: &Common, checkpoint: Option<&Path>) -> CliResult<(Checkpoint, RunConfig)> {
    let path = checkpoint.ok_or_else(|| CliError::new("E_NO_CKPT", "a --checkpoint path is required"))?;
    if !path.exists() {
        return Err(CliError::new("E_NO_CKPT", format!("{} does not exist", path.display())));
    }
    let ckpt = Checkpoint::load(path)?;
    let mut cfg = ckpt.header.config.clone();
    if let Some(p) = &common.config {
        let text = fs::read_to_string(p)?;
        for line in text.lines().map(|l| l.split('#').next().unwrap_or("").trim()).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| CliError::new("E_CONFIG", format!("bad line `{line}`")))?;
            cfg.set(k, v)?;
        }
    }
    apply_overrides(&mut cfg, &common.sets, common.seed)?;
    Ok((ckpt, cfg))
}

fn eval(common: &Common, checkpoint: Option<&Path>, train_split: bool) -> CliResult<()> {
    let (ckpt, cfg) = load_for_eval(common, checkpoint)?;
    prepare_output(&common.out, common.overwrite)?;
    fs::write(common.out.join(RESOLVED_CONFIG), cfg.to_text())?;
    let net = ckpt.restore()?;
    let split = cfg.load_data()?;
    let data = if train_split { &split.train } else { &split.test };
    let dump = evaluate(&net, data, &cfg.train.augment(), EvalOptions { batch_size: 32, selections: true })?;
    write_dump(&common.out.join("predictions.jsonl"), &dump)?;
    let report = EvalReport::build(
        net.cfg.variant.as_str(),
        &dump,
        &data.fine_to_generic,
        &data.generic_names,
        cfg.eval.generic_threshold,
    )?;
    let text = report.to_text();
    fs::write(common.out.join("report.txt"), &text)?;
    write_json(&common.out.join("report.json"), &report)?;
    print!("{text}");
    Ok(())
}

fn visualize(common: &Common, checkpoint: Option<&Path>, source: &str) -> CliResult<()> {
    let (ckpt, cfg) = load_for_eval(common, checkpoint)?;
    let sources = match source {
        "both" => vec![HeatSource::MaxScore, HeatSource::TargetClass],
        s => vec![HeatSource::parse(s)?],
    };
    prepare_output(&common.out, common.overwrite)?;
    fs::write(common.out.join(RESOLVED_CONFIG), cfg.to_text())?;
    let net = ckpt.restore()?;
    let split = cfg.load_data()?;
    let aug = cfg.train.augment();
    let mut written = 0;
    for sample in split.test.samples.iter().take(cfg.eval.heatmaps) {
        for &src in &sources {
            let (hm, view) = render_heatmap(&net, &sample.image, &aug, src)?;
            save_heatmap(&hm, &view, &common.out, &sample.id)?;
            written += 2;
        }
    }
    println!("wrote {written} images to {}", common.out.display());
    Ok(())
}

fn gradcheck(common: &Common, samples: usize, tolerance: f64) -> CliResult<()> {
    let cfg = resolve_config(common)?;
    prepare_output(&common.out, common.overwrite)?;
    fs::write(common.out.join(RESOLVED_CONFIG), cfg.to_text())?;
    let split = cfg.load_data()?;
    let net = cfg.build_net(split.train.num_classes())?;
    let n = split.train.len().min(2);
    let idx: Vec<usize> = (0..n).collect();
    let batch = split.train.batch(&idx, Phase::Test, &cfg.train.augment(), cfg.train.seed, 0)?;
    let gc = GradcheckConfig { samples, tolerance, seed: cfg.train.seed, ..GradcheckConfig::default() };
    let report = gradcheck_net(&net, &batch, gc)?;
    let text = report.to_text();
    fs::write(common.out.join("gradcheck.txt"), &text)?;
    write_json(&common.out.join("gradcheck.json"), &report)?;
    print!("{text}");
    if !report.passed {
        return Err(CliError::new(
            "E_GRADCHECK",
            format!("max relative error {:.3e} exceeds {:.1e}", report.max_rel_error, tolerance),
        ));
    }
    Ok(())
}

/// `a..b` inclusive integer ranges or comma lists.
pub fn parse_values(spec: &str) -> CliResult<Vec<f64>> {
    let bad = || CliError::new("E_CONFIG", format!("bad --values `{spec}`"));
    if let Some((a, b)) = spec.split_once("..") {
        let a: i64 = a.trim().parse().map_err(|_| bad())?;
        let b: i64 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        return Ok((a..=b).map(|v| v as f64).collect());
    }
    let v: Vec<f64> = spec.split(',').map(|s| s.trim().parse::<f64>().map_err(|_| bad())).collect::<CliResult<_>>()?;
    if v.is_empty() {
        return Err(bad());
    }
    Ok(v)
}

/// Default grid of a sweep parameter.
pub fn default_values(param: &str) -> Option<Vec<f64>> {
    match RunConfig::canonical_key(param) {
        "lambda_d" => Some((0..=9).map(f64::from).collect()),
        "temperature" => Some((0..=9).map(|i| 0.5 * 2f64.powi(i)).collect()),
        _ => None,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub top1: f64,
    pub train_top1: f64,
    pub seconds: f64,
}

fn sweep(common: &Common, param: &str, values: Option<&str>) -> CliResult<()> {
    let base = resolve_config(common)?;
    let key = RunConfig::canonical_key(param).to_string();
    if base.get(&key).is_none() {
        return Err(HerbsError::UnknownKey(param.to_string()).into());
    }
    let grid = match values {
        Some(v) => parse_values(v)?,
        None => default_values(&key)
            .ok_or_else(|| CliError::new("E_CONFIG", format!("no default grid for `{param}`; pass --values")))?,
    };
    prepare_output(&common.out, common.overwrite)?;
    fs::write(common.out.join(RESOLVED_CONFIG), base.to_text())?;
    let split = base.load_data()?;
    let mut rows = Vec::new();
    let mut table = format!("{key}\ttop1\ttrain_top1\n");
    for &value in &grid {
        let mut cfg = base.clone();
        cfg.set(&key, &value.to_string())?;
        cfg.validate()?;
        let start = Instant::now();
        let mut trainer = Trainer::new(cfg.build_net(split.train.num_classes())?, cfg.train)?;
        trainer.fit(&split.train, |_, _| Ok(()))?;
        let aug = cfg.train.augment();
        let top1 = |data| -> CliResult<f64> {
            let dump = evaluate(&trainer.net, data, &aug, EvalOptions::default())?;
            Ok(100.0 * dump.iter().filter(|r| r.fused_pred == r.label).count() as f64 / dump.len() as f64)
        };
        let row = SweepRow {
            value,
            top1: top1(&split.test)?,
            train_top1: top1(&split.train)?,
            seconds: start.elapsed().as_secs_f64(),
        };
        println!("{key} = {value:<8} test top-1 {:.2}%  train top-1 {:.2}%", row.top1, row.train_top1);
        table += &format!("{}\t{:.2}\t{:.2}\n", value, row.top1, row.train_top1);
        rows.push(row);
    }
    fs::write(common.out.join("sweep.tsv"), &table)?;
    write_json(&common.out.join("sweep.json"), &rows)?;
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.value, r.top1)).collect();
    let log_x = key == "temperature" && points.iter().all(|p| p.0 > 0.0);
    plot_series(&points, log_x, &common.out.join("sweep.png"))?;
    Ok(())
}
