//! The training loop.
//!
//! Each step draws its batch from a ChaCha8 stream keyed by `(seed, step)`,
//! so a run resumed from a checkpoint replays exactly the batches the
//! uninterrupted run would have seen.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::harness::data::{crop, crop_window, Pair};
use crate::harness::optim::{adamw_step, cosine_lr, OptimizerState};
use crate::metrics::{charbonnier, CHARBONNIER_EPS};
use crate::model::{build, Checkpoint, ModelConfig, Network};
use crate::numcore::{Graph, Scalar};

pub const LOSS_LOG_FILE: &str = "loss.log";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
const LOSS_LOG_HEADER: &str = "# step, lr, loss\n";

/// Window of the moving average used to summarise loss curves.
pub const LOSS_AVERAGE_WINDOW: usize = 10;

/// Checkpoint written after `step` completed steps.
pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:08}.ckpt")
}

/// Optional controls for [`train`].
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint instead of starting fresh.
    pub resume: Option<PathBuf>,
    /// Stop after this many completed steps (still writing a checkpoint),
    /// leaving the run resumable.
    pub stop_after: Option<u64>,
    /// Print one progress line every this many steps.
    pub progress_every: Option<u64>,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub network: Network<T>,
    /// `(step, lr, loss)` for every step run in this call and any resumed
    /// prefix.
    pub log: Vec<(u64, f64, f64)>,
    pub checkpoint: PathBuf,
}

impl<T: Scalar> TrainOutcome<T> {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.2).collect()
    }
}

/// Trailing moving average of `values` over `window`, one value per full
/// window.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 {
        return Vec::new();
    }
    values
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

fn log_line(step: u64, lr: f64, loss: f64) -> String {
    format!("{step}, {lr:e}, {loss:e}\n")
}

/// Parses a loss log into `(step, lr, loss)` rows.
pub fn parse_loss_log(text: &str) -> Result<Vec<(u64, f64, f64)>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let bad = || Error::Manifest(format!("loss log line {l:?}"));
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            if f.len() != 3 {
                return Err(bad());
            }
            Ok((
                f[0].parse().map_err(|_| bad())?,
                f[1].parse().map_err(|_| bad())?,
                f[2].parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

struct StepReport {
    loss: f64,
    items: Vec<(String, f64)>,
}

fn run_step<T: Scalar>(
    net: &mut Network<T>,
    opt: &mut OptimizerState<T>,
    pairs: &[Pair<T>],
    cfg: &TrainConfig,
    step: u64,
    lr: f64,
) -> Result<StepReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step);
    net.store_mut().zero_grad();
    let inv_batch = T::of(1.0 / cfg.batch_size as f64);
    let mut items = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let pair = &pairs[rng.random_range(0..pairs.len())];
        let (_, _, h, w) = pair.hazy.dims4()?;
        let (y, x) = crop_window(h, w, cfg.crop, &mut rng)?;
        let hazy = crop(&pair.hazy, y, x, cfg.crop, cfg.crop)?;
        let clean = crop(&pair.clean, y, x, cfg.crop, cfg.crop)?;
        let prior = net.estimate_prior(&hazy)?;
        let g = Graph::new();
        let out = net.forward(&g, &g.constant(hazy), &prior)?;
        let loss = charbonnier(&g, &g.constant(clean), &out, CHARBONNIER_EPS)?;
        let value = loss.data()[0].as_f64();
        items.push((pair.id.clone(), value));
        if !value.is_finite() {
            return Ok(StepReport {
                loss: f64::NAN,
                items,
            });
        }
        let grads = g.backward(&g.scale(&loss, inv_batch)?)?;
        grads.accumulate_into(net.store_mut())?;
    }
    let loss = items.iter().map(|i| i.1).sum::<f64>() / items.len() as f64;
    adamw_step(net.store_mut(), opt, lr)?;
    Ok(StepReport { loss, items })
}

fn save_state<T: Scalar>(
    net: &Network<T>,
    opt: &OptimizerState<T>,
    step: u64,
    path: &Path,
) -> Result<()> {
    let mut ckpt = net.to_checkpoint(step);
    ckpt.tensors.extend(opt.named_tensors(net.store()));
    ckpt.save(path)
}

fn nan_dump<T: Scalar>(
    dir: &Path,
    step: u64,
    lr: f64,
    report: &StepReport,
    net: &Network<T>,
) -> PathBuf {
    let mut text = format!("non-finite loss at step {step}\nlr = {lr:e}\n\n# batch item, loss\n");
    for (id, loss) in &report.items {
        let _ = writeln!(text, "{id}, {loss:e}");
    }
    text.push_str("\n# parameter, l2 norm, all finite\n");
    for (_, name, t) in net.store().iter() {
        let norm = t
            .data()
            .iter()
            .map(|v| v.as_f64().powi(2))
            .sum::<f64>()
            .sqrt();
        let _ = writeln!(text, "{name}, {norm:e}, {}", t.all_finite());
    }
    let path = dir.join(format!("nan_step_{step:08}.txt"));
    let _ = std::fs::write(&path, text);
    path
}

/// Trains a network on `pairs` and writes the loss log and checkpoints into
/// `out_dir`.
///
/// Checkpoints hold the parameters plus the optimizer moments and are written
/// every `checkpoint_interval` steps and at the end. A non-finite loss aborts
/// the run after writing a diagnostic dump.
pub fn train<T: Scalar>(
    pairs: &[Pair<T>],
    model: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    opts: &TrainOptions,
) -> Result<TrainOutcome<T>> {
    model.validate()?;
    cfg.validate(model)?;
    if pairs.is_empty() {
        return Err(Error::Manifest("no training pairs".into()));
    }
    std::fs::create_dir_all(out_dir)?;

    let (mut net, mut opt, mut log) = match &opts.resume {
        None => {
            let net = build::<T>(model, cfg.seed)?;
            let opt = OptimizerState::new(net.store(), cfg.optimizer);
            (net, opt, Vec::new())
        }
        Some(path) => {
            let ckpt = Checkpoint::<T>::load(path)?;
            if &ckpt.config != model {
                return Err(Error::Checkpoint(format!(
                    "{} was written for a different model configuration",
                    path.display()
                )));
            }
            let net = Network::from_checkpoint(&ckpt)?;
            let opt = OptimizerState::from_named(net.store(), cfg.optimizer, ckpt.step, |name| {
                ckpt.tensor(name).cloned()
            })?;
            let log_path = out_dir.join(LOSS_LOG_FILE);
            let mut log = match std::fs::read_to_string(&log_path) {
                Ok(text) => parse_loss_log(&text)?,
                Err(_) => Vec::new(),
            };
            log.retain(|r| r.0 <= ckpt.step);
            if log.len() as u64 != ckpt.step {
                return Err(Error::Checkpoint(format!(
                    "loss log in {} has {} rows, checkpoint is at step {}",
                    out_dir.display(),
                    log.len(),
                    ckpt.step
                )));
            }
            (net, opt, log)
        }
    };

    let mut log_text = String::from(LOSS_LOG_HEADER);
    for &(s, lr, loss) in &log {
        log_text.push_str(&log_line(s, lr, loss));
    }
    let log_path = out_dir.join(LOSS_LOG_FILE);
    std::fs::write(&log_path, &log_text)?;
    let mut log_file = std::fs::OpenOptions::new().append(true).open(&log_path)?;

    let last = opts
        .stop_after
        .map_or(cfg.total_iters, |s| s.min(cfg.total_iters));
    let mut step = opt.step;
    while step < last {
        let lr = cosine_lr(step, cfg.total_iters, cfg.lr_start, cfg.lr_end)?;
        let report = match run_step(&mut net, &mut opt, pairs, cfg, step, lr) {
            Ok(r) => r,
            Err(Error::NonFinite(what)) => {
                let report = StepReport {
                    loss: f64::NAN,
                    items: vec![(format!("non-finite value from {what}"), f64::NAN)],
                };
                let dump = nan_dump(out_dir, step + 1, lr, &report, &net);
                return Err(Error::NonFinite(format!(
                    "{what} at step {} (details in {})",
                    step + 1,
                    dump.display()
                )));
            }
            Err(e) => {
                let _ = save_state(&net, &opt, step, &out_dir.join(checkpoint_name(step)));
                return Err(e);
            }
        };
        if !report.loss.is_finite() {
            let dump = nan_dump(out_dir, step + 1, lr, &report, &net);
            return Err(Error::NonFinite(format!(
                "training loss at step {} (details in {})",
                step + 1,
                dump.display()
            )));
        }
        step += 1;
        log.push((step, lr, report.loss));
        std::io::Write::write_all(&mut log_file, log_line(step, lr, report.loss).as_bytes())?;
        if cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 {
            save_state(&net, &opt, step, &out_dir.join(checkpoint_name(step)))?;
        }
        if let Some(every) = opts.progress_every.filter(|&e| e > 0) {
            if step % every == 0 {
                eprintln!(
                    "step {step}/{}  lr {lr:.3e}  loss {:.5}",
                    cfg.total_iters, report.loss
                );
            }
        }
    }

    let checkpoint = if step == cfg.total_iters {
        out_dir.join(FINAL_CHECKPOINT)
    } else {
        out_dir.join(checkpoint_name(step))
    };
    save_state(&net, &opt, step, &checkpoint)?;
    Ok(TrainOutcome {
        network: net,
        log,
        checkpoint,
    })
}
