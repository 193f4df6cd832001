//! The `dehaze` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::harness::config::{Preset, RunConfig};
use crate::harness::data::load_pairs;
use crate::harness::eval::{
    evaluate, hazy_report, loss_curve_table, psnr_by_intensity_table, summary,
};
use crate::harness::gradsuite::{run_suite, suite_names};
use crate::harness::train::{parse_loss_log, train, TrainOptions, LOSS_LOG_FILE};
use crate::hazegen::{
    load_image, make_dataset, save_image, write_procedural_scenes, Manifest, Split,
};
use crate::metrics::MetricReport;
use crate::model::{stored_precision, Checkpoint, Network};
use crate::numcore::{Precision, Scalar};

#[derive(Parser, Debug)]
#[command(name = "dehaze", version, about = "Intensity-aware image dehazing")]
struct Cli {
    /// Config file with [model], [train] and [synth] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Single-threaded, fixed-order execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a paired hazy/clean dataset.
    Synth(SynthArgs),
    /// Train a network on a manifest's training split.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest split.
    Eval(EvalArgs),
    /// Dehaze a single image.
    Infer(InferArgs),
    /// Run the finite-difference gradient suites.
    GradCheck(GradCheckArgs),
    /// Write loss-curve and per-intensity PSNR tables.
    PlotData(PlotDataArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Directory of clean images; procedural scenes are generated when absent.
    #[arg(long)]
    clean: Option<PathBuf>,
    /// Number of procedural scenes.
    #[arg(long, default_value_t = 8)]
    scenes: usize,
    /// Side of the procedural scenes.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Manifest file or dataset directory.
    #[arg(long)]
    manifest: PathBuf,
    /// Run directory for the loss log and checkpoints.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr_start: Option<f64>,
    #[arg(long)]
    lr_end: Option<f64>,
    /// Model preset; replaces any [model] section of the config.
    #[arg(long, value_parser = ["tiny", "full"])]
    model: Option<String>,
    #[arg(long, value_parser = ["f32", "f64"])]
    precision: Option<String>,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print progress every N steps.
    #[arg(long, default_value_t = 100)]
    progress: u64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "test"])]
    split: String,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    /// Run only these suites (default: all).
    #[arg(long = "suite")]
    suites: Vec<String>,
    /// List suite names and exit.
    #[arg(long)]
    list: bool,
}

#[derive(Args, Debug)]
struct PlotDataArgs {
    /// Run directory (containing loss.log) or the log itself.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Per-intensity PSNR needs a manifest and a checkpoint.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = ["train", "test"])]
    split: String,
    /// Directory for the tables.
    #[arg(long)]
    out: PathBuf,
}

fn split_of(s: &str) -> Split {
    if s == "train" {
        Split::Train
    } else {
        Split::Test
    }
}

fn synth(cfg: &RunConfig, a: &SynthArgs) -> Result<()> {
    let mut synth = cfg.synth.clone();
    if let Some(s) = a.seed {
        synth.seed = s;
    }
    let clean_dir = match &a.clean {
        Some(d) => d.clone(),
        None => {
            let dir = a.out.join("clean_source");
            write_procedural_scenes(&dir, a.scenes, a.size, a.size, synth.seed)?;
            dir
        }
    };
    let m = make_dataset(&clean_dir, &a.out, &synth)?;
    println!(
        "{} pairs ({} train, {} test), {} errors -> {}",
        m.entries.len(),
        m.split(Split::Train).count(),
        m.split(Split::Test).count(),
        m.errors.len(),
        a.out.display()
    );
    for (path, msg) in &m.errors {
        eprintln!("skipped {path}: {msg}");
    }
    Ok(())
}

fn train_cmd<T: Scalar>(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let pairs = load_pairs::<T>(&manifest, Split::Train)?;
    let opts = TrainOptions {
        resume: a.resume.clone(),
        stop_after: None,
        progress_every: Some(a.progress),
    };
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("config.toml"), cfg.to_toml()?)?;
    let out = train(&pairs, &cfg.model, &cfg.train, &a.out, &opts)?;
    let losses = out.losses();
    println!(
        "trained {} steps, final loss {:.6} -> {}",
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        out.checkpoint.display()
    );
    Ok(())
}

fn load_network<T: Scalar>(path: &Path) -> Result<Network<T>> {
    Network::from_checkpoint(&Checkpoint::<T>::load(path)?)
}

fn eval_cmd<T: Scalar>(a: &EvalArgs) -> Result<()> {
    let net = load_network::<T>(&a.checkpoint)?;
    let manifest = Manifest::load(&a.manifest)?;
    let pairs = load_pairs::<T>(&manifest, split_of(&a.split))?;
    let report = evaluate(&net, &pairs)?;
    match &a.out {
        Some(p) => {
            std::fs::write(p, report.to_text())?;
            println!("{}", summary(&report));
        }
        None => print!("{}", report.to_text()),
    }
    Ok(())
}

fn infer_cmd<T: Scalar>(a: &InferArgs) -> Result<()> {
    let net = load_network::<T>(&a.checkpoint)?;
    let hazy = load_image::<T>(&a.input)?;
    save_image(&a.out, &net.dehaze(&hazy)?)
}

fn grad_check_cmd(a: &GradCheckArgs) -> Result<bool> {
    if a.list {
        suite_names().iter().for_each(|n| println!("{n}"));
        return Ok(true);
    }
    let names: Vec<String> = if a.suites.is_empty() {
        suite_names().into_iter().map(String::from).collect()
    } else {
        a.suites.clone()
    };
    let mut ok = true;
    for name in names {
        let r = run_suite(&name)?
            .ok_or_else(|| Error::Param(format!("unknown suite {name:?} (see --list)")))?;
        println!("{}", r.line());
        ok &= r.passed();
    }
    Ok(ok)
}

fn plot_data_cmd<T: Scalar>(a: &PlotDataArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    let mut wrote = false;
    if let Some(run) = &a.run {
        let log_path = if run.is_dir() {
            run.join(LOSS_LOG_FILE)
        } else {
            run.clone()
        };
        let log = parse_loss_log(&std::fs::read_to_string(&log_path)?)?;
        let path = a.out.join("loss_curve.txt");
        std::fs::write(&path, loss_curve_table(&log))?;
        println!("{}", path.display());
        wrote = true;
    }
    if let (Some(mpath), Some(ckpt)) = (&a.manifest, &a.checkpoint) {
        let manifest = Manifest::load(mpath)?;
        let pairs = load_pairs::<T>(&manifest, split_of(&a.split))?;
        let restored: MetricReport = evaluate(&load_network::<T>(ckpt)?, &pairs)?;
        let table = psnr_by_intensity_table(&manifest, &restored, &hazy_report(&pairs)?)?;
        let path = a.out.join("psnr_by_intensity.txt");
        std::fs::write(&path, table)?;
        println!("{}", path.display());
        wrote = true;
    }
    if !wrote {
        return Err(Error::Param(
            "plot-data needs --run and/or both --manifest and --checkpoint".into(),
        ));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<bool> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if cli.deterministic {
        // every stage already runs on one thread in a fixed order
        eprintln!("deterministic mode: single thread, fixed batch order");
    }
    match &cli.command {
        Command::Synth(a) => synth(&cfg, a).map(|_| true),
        Command::Train(a) => {
            if let Some(p) = &a.model {
                cfg.model = if p == "full" {
                    Preset::Full
                } else {
                    Preset::Tiny
                }
                .model();
            }
            let t = &mut cfg.train;
            t.total_iters = a.iters.unwrap_or(t.total_iters);
            t.batch_size = a.batch.unwrap_or(t.batch_size);
            t.crop = a.crop.unwrap_or(t.crop);
            t.seed = a.seed.unwrap_or(t.seed);
            t.lr_start = a.lr_start.unwrap_or(t.lr_start);
            t.lr_end = a.lr_end.unwrap_or(t.lr_end);
            if let Some(p) = &a.precision {
                t.precision = Precision::from_tag(p).expect("restricted by clap");
            }
            if t.checkpoint_interval > t.total_iters {
                t.checkpoint_interval = 0;
            }
            cfg.train.validate(&cfg.model)?;
            match cfg.train.precision {
                Precision::F32 => train_cmd::<f32>(&cfg, a),
                Precision::F64 => train_cmd::<f64>(&cfg, a),
            }
            .map(|_| true)
        }
        Command::Eval(a) => match stored_precision(&a.checkpoint)? {
            Precision::F32 => eval_cmd::<f32>(a),
            Precision::F64 => eval_cmd::<f64>(a),
        }
        .map(|_| true),
        Command::Infer(a) => match stored_precision(&a.checkpoint)? {
            Precision::F32 => infer_cmd::<f32>(a),
            Precision::F64 => infer_cmd::<f64>(a),
        }
        .map(|_| true),
        Command::GradCheck(a) => grad_check_cmd(a),
        Command::PlotData(a) => plot_data_cmd::<f32>(a).map(|_| true),
    }
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code: 0 on success, 1 on failure, 2 on usage errors.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(true) => 0,
        Ok(false) => {
            eprintln!("error: one or more gradient suites exceeded tolerance");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
