//! The training loop: deterministic batches in index order, one JSONL log
//! line per outer step, periodic checkpoints, and bit-exact resume.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{Algorithm, RunConfig};
use crate::dataset::{dataset_from_seed, read_dataset};
use crate::meta::{meta_train_step, reptile_train_step, LossBreakdown};
use crate::optim::AdamState;
use crate::rng::derive;
use crate::taskgen::{purpose, Task};
use crate::{Error, Result};

/// Per-invocation options, distinct from the run's identity in `RunConfig`.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions<'a> {
    /// Train from this dataset file instead of regenerating tasks from the
    /// config seeds. The file must match the config (same variant,
    /// dependence, seeds, and shot counts).
    pub data: Option<&'a Path>,
    /// Continue from this checkpoint.
    pub resume: Option<&'a Path>,
    /// Process at most this many outer steps in this invocation, then save
    /// and return (resume later to finish).
    pub stop_after: Option<u64>,
    /// Suppress stderr progress lines.
    pub quiet: bool,
}

/// What a training invocation produced.
#[derive(Debug)]
pub struct TrainOutcome {
    /// Total trained steps recorded in the final checkpoint.
    pub steps: u64,
    /// Whether the run reached `config.total_steps()`.
    pub completed: bool,
    /// Loss breakdown of the last step this invocation ran, if any.
    pub final_loss: Option<LossBreakdown>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Serialize)]
struct LogLine {
    step: u64,
    #[serde(flatten)]
    loss: LossBreakdown,
}

/// Fields that identify the run's mathematics; the rest (output paths,
/// checkpoint cadence) may differ between the saving and resuming
/// invocations.
fn same_run_identity(a: &RunConfig, b: &RunConfig) -> bool {
    let neutral = |c: &RunConfig| {
        let mut c = c.clone();
        c.out_dir = None;
        c.checkpoint_every = 0;
        c
    };
    neutral(a) == neutral(b)
}

fn load_tasks(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<Task>> {
    let Some(path) = data else {
        let (_, _, tasks) = dataset_from_seed(
            cfg.variant,
            cfg.dependence,
            cfg.data_seed,
            cfg.n_train_tasks,
            cfg.n_support,
            cfg.n_query,
        );
        return Ok(tasks);
    };
    let (header, mut tasks) = read_dataset(path)?;
    let mismatch = |what: &str, file: String, config: String| {
        Err(Error::Config(format!(
            "dataset {} does not match the run config: {what} is {file} in the file, {config} in the config",
            path.display()
        )))
    };
    if header.variant != cfg.variant {
        return mismatch(
            "variant",
            header.variant.name().into(),
            cfg.variant.name().into(),
        );
    }
    if header.dependence != cfg.dependence {
        return mismatch(
            "dependence",
            header.dependence.name().into(),
            cfg.dependence.name().into(),
        );
    }
    if header.master_seed != cfg.data_seed {
        return mismatch(
            "master seed",
            header.master_seed.to_string(),
            cfg.data_seed.to_string(),
        );
    }
    if header.task_seed != derive(cfg.data_seed, purpose::TRAIN_TASKS) {
        return Err(Error::Config(format!(
            "dataset {} was generated with a non-standard task seed; regenerate it from the data seed",
            path.display()
        )));
    }
    if header.n_support != cfg.n_support || header.n_query != cfg.n_query {
        return mismatch(
            "shot counts (support/query)",
            format!("{}/{}", header.n_support, header.n_query),
            format!("{}/{}", cfg.n_support, cfg.n_query),
        );
    }
    if header.n_tasks < cfg.n_train_tasks {
        return Err(Error::Config(format!(
            "dataset {} holds {} tasks but the config trains on {}",
            path.display(),
            header.n_tasks,
            cfg.n_train_tasks
        )));
    }
    tasks.truncate(cfg.n_train_tasks);
    Ok(tasks)
}

/// Run (or continue) training per `cfg`, writing the artifacts into the
/// config's output directory: `config.json` (the normalized run record),
/// `train_log.jsonl`, and `model.ckpt`.
pub fn run_training(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let cfg = cfg.clone().normalize()?;
    let out_dir = cfg.resolve_out_dir();
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let ckpt_path = out_dir.join("model.ckpt");
    let log_path = out_dir.join("train_log.jsonl");
    cfg.save(&out_dir.join("config.json"))?;

    let tasks = load_tasks(&cfg, opts.data)?;
    let steps_per_epoch = cfg.steps_per_epoch();
    let total = cfg.total_steps();

    let (mut params, mut adam, start) = match opts.resume {
        Some(path) => {
            let loaded = load_checkpoint(path)?;
            if !same_run_identity(&loaded.config, &cfg) {
                return Err(Error::Config(format!(
                    "checkpoint {} belongs to a different run configuration",
                    path.display()
                )));
            }
            if loaded.trained_steps > total {
                return Err(Error::Config(format!(
                    "checkpoint has {} trained steps but the config totals {}",
                    loaded.trained_steps, total
                )));
            }
            let needs_adam = cfg.algorithm != Algorithm::Reptile;
            if loaded.adam.is_some() != needs_adam {
                return Err(Error::Checkpoint(
                    "optimizer state does not match the algorithm".into(),
                ));
            }
            (loaded.params, loaded.adam, loaded.trained_steps)
        }
        None => {
            let params = cfg.init_meta_params();
            let adam = (cfg.algorithm != Algorithm::Reptile)
                .then(|| AdamState::new(params.data.len()));
            (params, adam, 0)
        }
    };

    let end = match opts.stop_after {
        Some(n) => total.min(start + n),
        None => total,
    };

    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let outer = cfg.to_outer_config();
    let progress_every = (total / 20).max(1);
    let mut final_loss = None;

    for step in start..end {
        let b = (step % steps_per_epoch) as usize;
        let batch = &tasks[b * cfg.batch_size..(b + 1) * cfg.batch_size];
        let loss = match cfg.algorithm {
            Algorithm::Reptile => reptile_train_step(
                &mut params,
                cfg.k,
                cfg.eta0,
                cfg.reptile_outer_step,
                batch,
                step,
            )?,
            _ => meta_train_step(
                &mut params,
                adam.as_mut().expect("gradient algorithms carry Adam state"),
                &outer,
                batch,
                step,
                cfg.train_seed,
            )?,
        };
        let line = serde_json::to_string(&LogLine { step, loss }).expect("log line serializes");
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        final_loss = Some(loss);
        if !opts.quiet && (step + 1) % progress_every == 0 {
            eprintln!(
                "[{}] step {}/{} total {:.6}",
                cfg.slug(),
                step + 1,
                total,
                loss.total
            );
        }
        let due = cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0;
        if due && step + 1 != end {
            save_checkpoint(&ckpt_path, &params, adam.as_ref(), &cfg, step + 1)?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    if end > start || !ckpt_path.exists() {
        save_checkpoint(&ckpt_path, &params, adam.as_ref(), &cfg, end)?;
    }
    Ok(TrainOutcome {
        steps: end,
        completed: end == total,
        final_loss,
        checkpoint: ckpt_path,
        log: log_path,
        out_dir,
    })
}
