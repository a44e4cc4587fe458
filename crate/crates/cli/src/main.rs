//! `mdvqa`: prepare features, train, predict, evaluate and compare video
//! quality models from the command line.
//!
//! Exit codes: 0 success, 1 failure or partial failure, 2 invalid invocation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use mdvqa::config::Config;
use mdvqa::encoders::ExtractorRegistry;
use mdvqa::media_io::{DatasetManifest, FrameDirDecoder};
use mdvqa::pipeline::{self, config_echo_path};
use mdvqa::synthetic::SyntheticSpec;

#[derive(Parser, Debug)]
#[command(name = "mdvqa", version, about = "No-reference video quality assessment with multi-dimensional prompts")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Flat key-value configuration file (toml syntax).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Base preset the config file and overrides apply to: toy or full.
    #[arg(long, global = true, value_name = "NAME")]
    preset: Option<String>,
    /// Override one configuration key, e.g. `--set train.lr=5e-4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_override)]
    overrides: Vec<(String, String)>,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// More log output; repeat for debug level.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the procedural degraded-video dataset with known MOS.
    MakeSynthetic(MakeSyntheticArgs),
    /// Sample every video and cache its three feature blocks.
    Prepare(PrepareArgs),
    /// Train on cached features.
    Train(TrainArgs),
    /// Score every video of a manifest with a checkpoint.
    Predict(PredictArgs),
    /// Compare a prediction CSV against manifest MOS.
    Evaluate(EvaluateArgs),
    /// Rank several prediction CSVs by MainScore.
    Report(ReportArgs),
    /// Train every encoder-removal and assembly variant and tabulate them.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct MakeSyntheticArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    n_train: usize,
    #[arg(long, default_value_t = 16)]
    n_holdout: usize,
    #[arg(long, default_value_t = 32)]
    frames: usize,
    #[arg(long, default_value_t = 256)]
    height: usize,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 2025)]
    seed: u64,
}

#[derive(Args, Debug)]
struct PrepareArgs {
    /// Manifest CSV (video_id, uri, optional mos and prompt).
    #[arg(long)]
    manifest: PathBuf,
    /// Feature cache directory.
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    grid_size: Option<usize>,
    #[arg(long)]
    fragment_edge: Option<usize>,
    #[arg(long)]
    clip_length: Option<usize>,
    #[arg(long)]
    alpha: Option<usize>,
    #[arg(long)]
    semantic_frames: Option<usize>,
    /// Fragment sampling seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Frame rate assumed for frame directories.
    #[arg(long, default_value_t = 24.0)]
    fps: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    /// Validation manifest used to pick the best epoch.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    cache: PathBuf,
    /// Run directory for checkpoints, log and config echo.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a `state.ckpt`.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prediction CSV to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: PathBuf,
    /// Manifest carrying the MOS.
    #[arg(long)]
    manifest: PathBuf,
    /// Key-value report file (default: `<predictions>.eval.kv`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Prediction CSVs; the file stem names the model.
    #[arg(required = true)]
    predictions: Vec<PathBuf>,
    /// Also write the ranked table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    /// Directory for the table, CSV and config echo.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_override(s: &str) -> Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Errors in arguments or configuration, reported with exit code 2.
#[derive(Debug)]
struct Invocation(String);

impl std::fmt::Display for Invocation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invocation {}

fn invocation(e: impl std::fmt::Display) -> anyhow::Error {
    Invocation(e.to_string()).into()
}

/// Preset, then config file, then `--set`, then subcommand flags.
fn resolve_config(g: &GlobalArgs, fallback: Option<&Path>, flags: &[(&str, Option<String>)]) -> anyhow::Result<Config> {
    let base = match &g.preset {
        Some(name) => Config::preset(name).map_err(invocation)?,
        None => Config::toy(),
    };
    let file = g.config.as_deref().or(fallback.filter(|p| p.exists()));
    let mut cfg = match file {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| invocation(format!("cannot read config {}: {e}", path.display())))?;
            Config::from_str_with_base(&text, Some(base)).map_err(invocation)?
        }
        None => base,
    };
    for (k, v) in &g.overrides {
        cfg.set(k, v).map_err(invocation)?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v).map_err(invocation)?;
        }
    }
    cfg.validate(&ExtractorRegistry::default()).map_err(invocation)?;
    Ok(cfg)
}

fn flag<T: ToString>(key: &'static str, value: Option<T>) -> (&'static str, Option<String>) {
    (key, value.map(|v| v.to_string()))
}

fn manifest(path: &Path, cfg: &Config) -> anyhow::Result<DatasetManifest> {
    DatasetManifest::load(path, cfg.model.mos_range).with_context(|| format!("loading manifest {}", path.display()))
}

fn workers(g: &GlobalArgs) -> usize {
    g.workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let g = &cli.global;
    match &cli.command {
        Command::MakeSynthetic(a) => {
            let spec = SyntheticSpec {
                n_train: a.n_train,
                n_holdout: a.n_holdout,
                frames: a.frames,
                height: a.height,
                width: a.width,
                seed: a.seed,
                ..SyntheticSpec::default()
            };
            spec.validate().map_err(invocation)?;
            let summary = pipeline::cmd_make_synthetic(&a.out, &spec, workers(g))?;
            println!(
                "wrote {} videos; manifests {}, {}, {}",
                summary.videos,
                summary.manifest.display(),
                summary.train_manifest.display(),
                summary.holdout_manifest.display()
            );
        }
        Command::Prepare(a) => {
            let cfg = resolve_config(
                g,
                None,
                &[
                    flag("sampling.grid_size", a.grid_size),
                    flag("sampling.fragment_edge", a.fragment_edge),
                    flag("sampling.clip_length", a.clip_length),
                    flag("sampling.alpha", a.alpha),
                    flag("sampling.semantic_frames", a.semantic_frames),
                    flag("sampling.seed", a.seed),
                ],
            )?;
            if !(a.fps.is_finite() && a.fps > 0.0) {
                return Err(invocation(format!("--fps must be positive, got {}", a.fps)));
            }
            let m = manifest(&a.manifest, &cfg)?;
            let report = pipeline::cmd_prepare(
                &m,
                &a.cache,
                &cfg,
                &ExtractorRegistry::default(),
                &FrameDirDecoder { fps: a.fps },
                workers(g),
            )?;
            println!(
                "{} cache files written, {} videos already up to date, {} failed",
                report.written,
                report.skipped,
                report.failures.len()
            );
            if !report.failures.is_empty() {
                for (id, msg) in &report.failures {
                    eprintln!("failed: {id}: {msg}");
                }
                return Ok(ExitCode::from(1));
            }
        }
        Command::Train(a) => {
            let cfg = resolve_config(
                g,
                None,
                &[
                    flag("train.epochs", a.epochs),
                    flag("train.lr", a.lr),
                    flag("train.batch_size", a.batch_size),
                    flag("train.seed", a.seed),
                ],
            )?;
            let train = manifest(&a.train, &cfg)?;
            let val = a.val.as_deref().map(|p| manifest(p, &cfg)).transpose()?;
            let (outcome, artifacts) = pipeline::cmd_train(
                &train,
                val.as_ref(),
                &a.cache,
                &a.out,
                &cfg,
                &ExtractorRegistry::default(),
                a.resume.as_deref(),
            )?;
            for l in &outcome.state.history {
                let val = l
                    .val
                    .map(|v| format!("  val main {:.4} plcc {:.4} srocc {:.4}", v.main_score, v.plcc, v.srocc))
                    .unwrap_or_default();
                println!("epoch {:>3}  loss {:.5}  lr {:.3e}{val}", l.epoch, l.train_loss, l.lr);
            }
            println!(
                "best epoch {}; model {}, state {}",
                outcome.best_epoch,
                artifacts.model.display(),
                artifacts.state.display()
            );
        }
        Command::Predict(a) => {
            let echo = a.checkpoint.with_file_name("config.toml");
            let cfg = resolve_config(g, Some(&echo), &[])?;
            let m = manifest(&a.manifest, &cfg)?;
            let records = pipeline::cmd_predict(&m, &a.cache, &a.checkpoint, &a.out, &cfg)?;
            println!("{} predictions written to {}", records.len(), a.out.display());
        }
        Command::Evaluate(a) => {
            let cfg = resolve_config(g, None, &[])?;
            let m = manifest(&a.manifest, &cfg)?;
            let out = a.out.clone().unwrap_or_else(|| {
                let mut name = a.predictions.file_name().unwrap_or_default().to_os_string();
                name.push(".eval.kv");
                a.predictions.with_file_name(name)
            });
            let report = pipeline::cmd_evaluate(&a.predictions, &m, Some(&out))?;
            print!("{report}");
            info!("key-value report written to {}", out.display());
        }
        Command::Report(a) => {
            let cfg = resolve_config(g, None, &[])?;
            let m = manifest(&a.manifest, &cfg)?;
            let rows = pipeline::cmd_report(&m, &a.predictions)?;
            print!("{}", pipeline::render_report_table(&rows));
            if let Some(csv) = &a.csv {
                pipeline::write_report_csv(&rows, csv)?;
                cfg.save(config_echo_path(csv))?;
            }
        }
        Command::Ablate(a) => {
            let cfg = resolve_config(g, None, &[flag("train.epochs", a.epochs), flag("train.seed", a.seed)])?;
            let registry = ExtractorRegistry::default();
            let base = cfg.resolved_model(&registry)?;
            let mut all = base.clone();
            all.drop.clear();
            let modalities = pipeline::required_modalities(&all)?;
            let train = pipeline::load_samples(&manifest(&a.train, &cfg)?, &a.cache, &modalities)?;
            let val = pipeline::load_samples(&manifest(&a.val, &cfg)?, &a.cache, &modalities)?;
            if train.is_empty() || val.is_empty() {
                bail!("ablation needs non-empty train and validation manifests");
            }
            let rows = pipeline::run_ablation(&train, &val, &base, &cfg.train)?;
            fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
            let table = pipeline::render_ablation_table(&rows);
            fs::write(a.out.join("ablation.txt"), &table)?;
            pipeline::write_ablation_csv(&rows, &a.out.join("ablation.csv"))?;
            cfg.save(a.out.join("config.toml"))?;
            print!("{table}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.global.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: configuring worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Invocation>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
