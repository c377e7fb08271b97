mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use hammer_core::metrics::{evaluate, MetricsReport};
use hammer_core::synth::{class_counts, gen_pool, read_jsonl, write_jsonl, ManipSample, MixConfig, PerturbConfig};
use hammer_core::training::{
    gradcheck_suite, inspect, load_checkpoint, predict, save_checkpoint, train, TrainState, GRADCHECK_TOLERANCE,
};
use log::info;

use crate::config::RunConfig;

const TRAIN_FILE: &str = "train.jsonl";
const TEST_FILE: &str = "test.jsonl";

#[derive(Parser)]
#[command(name = "hammer", version, about = "Multi-modal manipulation detection and grounding on glyph-world")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a train/test split of glyph-world samples.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Total number of samples across both splits.
        #[arg(long)]
        num: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Share of samples held out for testing.
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        /// Share of written images that receive pixel noise.
        #[arg(long, default_value_t = 0.5)]
        perturb: f64,
        #[arg(long, default_value_t = 0.3)]
        pristine: f64,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory or a samples file.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Score a checkpoint and write a metrics report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Per-sample predictions with attention maps, as JSON.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only the first N samples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Finite-difference check of every loss term.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretty-print a metrics report.
    Report {
        #[arg(long)]
        report: PathBuf,
    },
}

/// A directory resolves to its split file; a file is used as is.
fn samples_path(data: &Path, split: &str) -> PathBuf {
    if data.is_dir() {
        data.join(split)
    } else {
        data.to_path_buf()
    }
}

fn load_samples(data: &Path, split: &str) -> Result<Vec<ManipSample>> {
    let path = samples_path(data, split);
    let samples = read_jsonl(&path).with_context(|| format!("reading {}", path.display()))?;
    if samples.is_empty() {
        bail!("{} holds no samples", path.display());
    }
    info!("{}: {} samples", path.display(), samples.len());
    Ok(samples)
}

fn gen_data(out: &Path, num: usize, seed: u64, test_fraction: f64, perturb: f64, pristine: f64) -> Result<()> {
    if !(0.0..1.0).contains(&test_fraction) {
        bail!("--test-fraction must lie in [0, 1)");
    }
    std::fs::create_dir_all(out)?;
    let pool = gen_pool(seed, num, &MixConfig { pristine_fraction: pristine })?;
    let n_test = (num as f64 * test_fraction).round() as usize;
    let (train_set, test_set) = pool.split_at(num - n_test);
    let mut stats = serde_json::Map::new();
    for (name, split, salt) in [(TRAIN_FILE, train_set, 0u64), (TEST_FILE, test_set, 1)] {
        let cfg = PerturbConfig { fraction: perturb, seed: seed.wrapping_add(salt), ..PerturbConfig::default() };
        write_jsonl(&out.join(name), split, &cfg)?;
        let counts: serde_json::Map<String, serde_json::Value> =
            class_counts(split).into_iter().map(|(k, v)| (k, v.into())).collect();
        info!("{name}: {} samples", split.len());
        for (k, v) in &counts {
            info!("  {k:>24} {v}");
        }
        stats.insert(name.trim_end_matches(".jsonl").to_string(), counts.into());
    }
    std::fs::write(out.join("stats.json"), serde_json::to_string_pretty(&stats)?)?;
    Ok(())
}

fn run_train(config: Option<&Path>, data: Option<&Path>, ckpt: &Path) -> Result<()> {
    let run = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let data = data.map(Path::to_path_buf).or(run.data.clone()).context("no dataset: pass --data or set `data` in the config")?;
    let samples = load_samples(&data, TRAIN_FILE)?;
    let mut state = TrainState::new(&run.model, &run.train)?;
    info!("{} parameters, {} steps per epoch", state.online.numel(), run.train.steps_per_epoch(samples.len()));
    let logs = train(&mut state, &samples, |epoch, loss| info!("epoch {epoch}: mean loss {loss:.4}"))?;
    let skipped = logs.iter().filter(|l| !l.applied).count();
    if skipped > 0 {
        log::warn!("{skipped} updates skipped for non-finite gradients");
    }
    save_checkpoint(&state, ckpt)?;
    info!("wrote {}", ckpt.display());
    Ok(())
}

fn run_eval(ckpt: &Path, data: &Path, report: &Path) -> Result<()> {
    let state = load_checkpoint(ckpt, None)?;
    let samples = load_samples(data, TEST_FILE)?;
    let preds = predict(&state.model, &state.online, &samples)?;
    let r = evaluate(&preds, &samples)?;
    std::fs::write(report, r.to_json()?)?;
    for line in r.table().lines() {
        info!("{line}");
    }
    Ok(())
}

fn run_infer(ckpt: &Path, data: &Path, out: &Path, limit: Option<usize>) -> Result<()> {
    let state = load_checkpoint(ckpt, None)?;
    let mut samples = load_samples(data, TEST_FILE)?;
    if let Some(n) = limit {
        samples.truncate(n);
    }
    let ins = inspect(&state.model, &state.online, &samples)?;
    std::fs::write(out, serde_json::to_string_pretty(&ins)?)?;
    info!("wrote {} inspections to {}", ins.len(), out.display());
    Ok(())
}

fn run_gradcheck(seed: u64) -> Result<bool> {
    let mut ok = true;
    println!("{:<6} {:>14} {:>8}  status", "term", "max_rel_error", "coords");
    for c in gradcheck_suite(seed)? {
        let pass = c.passes();
        ok &= pass;
        println!(
            "{:<6} {:>14.3e} {:>8}  {}",
            c.term,
            c.result.max_rel_error,
            c.result.coords_checked,
            if pass { "ok" } else { "FAIL" }
        );
    }
    if !ok {
        log::error!("gradient check failed: some term has relative error >= {GRADCHECK_TOLERANCE:e}");
    }
    Ok(ok)
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::GenData { out, num, seed, test_fraction, perturb, pristine } => {
            gen_data(&out, num, seed, test_fraction, perturb, pristine)?
        }
        Cmd::Train { config, data, ckpt } => run_train(config.as_deref(), data.as_deref(), &ckpt)?,
        Cmd::Eval { ckpt, data, report } => run_eval(&ckpt, &data, &report)?,
        Cmd::Infer { ckpt, data, out, limit } => run_infer(&ckpt, &data, &out, limit)?,
        Cmd::Gradcheck { seed } => return run_gradcheck(seed),
        Cmd::Report { report } => {
            let text = std::fs::read_to_string(&report).with_context(|| format!("reading {}", report.display()))?;
            print!("{}", MetricsReport::from_json(&text)?.table());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(1)
        }
    }
}
