//! Meta-test evaluation and the cross-algorithm comparison table.
//!
//! Evaluation draws fresh tasks from the same meta-distribution the model
//! trained on (rebuilt from the data seed), adapts to each support set,
//! and scores query predictions against the *noiseless* target function —
//! the meta-distribution's hypotheses are known, so the benchmark can
//! measure true function recovery instead of noise-floor regression.
//! Per-task records go to CSV; a JSON summary sits next to it for the
//! `compare` step.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::load_checkpoint;
use crate::config::Algorithm;
use crate::meta::eval_adapt;
use crate::rng::{derive, Stream};
use crate::taskgen::{purpose, sample_task, Dependence, MetaDistribution, Task, Variant};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Seed evaluations use unless one is given; kept apart from the training
/// seeds so meta-test tasks are never the training tasks.
pub const DEFAULT_EVAL_SEED: u64 = 99;

pub const RECORDS_CSV_HEADER: &str = "task_id,mode,family,mse_pre,mse_post";

/// One evaluated task.
#[derive(Clone, Debug)]
pub struct EvalRecord {
    pub task_id: usize,
    pub mode: usize,
    pub family: &'static str,
    pub mse_pre: f64,
    pub mse_post: f64,
}

/// Per-group mean (by covariate mode or by family).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GroupMean {
    pub group: String,
    pub n: usize,
    pub mse_pre_mean: f64,
    pub mse_post_mean: f64,
}

/// The JSON sidecar written next to the records CSV; everything `compare`
/// needs to line evaluations up against each other.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalSummary {
    pub algorithm: Algorithm,
    pub variant: Variant,
    pub dependence: Dependence,
    pub data_seed: u64,
    pub model_seed: u64,
    pub eval_seed: u64,
    pub trained_steps: u64,
    pub n_tasks: usize,
    pub n_support: usize,
    pub n_query: usize,
    pub k: usize,
    pub eta0: f64,
    pub mse_pre_mean: f64,
    pub mse_post_mean: f64,
    /// Half-width of the 95% normal-approximation interval on the mean.
    pub mse_pre_ci95: f64,
    pub mse_post_ci95: f64,
    pub per_mode: Vec<GroupMean>,
    pub per_family: Vec<GroupMean>,
}

/// Overrides for one evaluation invocation; `None` means the value the
/// checkpoint trained with (k, eta0, shot counts) or the default seed.
#[derive(Clone, Copy, Debug, Default)]
pub struct EvalOptions {
    pub eval_seed: Option<u64>,
    pub n_tasks: Option<usize>,
    pub n_query: Option<usize>,
    pub k: Option<usize>,
    pub eta0: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count();
    xs.sum::<f64>() / n as f64
}

/// 1.96·s/√n with the sample standard deviation (n−1 denominator).
fn ci95(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    1.96 * (var / n as f64).sqrt()
}

fn mse(pred: &[f64], target: &[f64]) -> f64 {
    debug_assert_eq!(pred.len(), target.len());
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64
}

/// Draw meta-test task `i` and, for hierarchical models, its latent draw —
/// from one per-task stream, tasks first, so records are reproducible from
/// `(eval_seed, i)` alone.
fn eval_task(
    md: &MetaDistribution,
    eval_seed: u64,
    i: usize,
    n_support: usize,
    n_query: usize,
    d_z: usize,
    hierarchical: bool,
) -> (Task, Option<Tensor>) {
    let mut stream = Stream::new(derive(
        derive(eval_seed, purpose::EVAL_TASKS),
        i as u64,
    ));
    let task = sample_task(md, &mut stream, n_support, n_query);
    let eps = hierarchical.then(|| {
        Tensor::new(vec![1, d_z], stream.normal_vec(d_z)).expect("shape is valid")
    });
    (task, eps)
}

/// Evaluate a checkpoint: fresh tasks, adaptation, noiseless-target MSE.
/// Writes `out_csv` (one row per task) and `<out_csv>.summary.json`.
pub fn run_eval(checkpoint: &Path, opts: &EvalOptions, out_csv: &Path) -> Result<EvalSummary> {
    let loaded = load_checkpoint(checkpoint)?;
    let cfg = loaded.config;
    let params = loaded.params;

    let eval_seed = opts.eval_seed.unwrap_or(DEFAULT_EVAL_SEED);
    let n_tasks = opts.n_tasks.unwrap_or(cfg.eval_tasks);
    let n_query = opts.n_query.unwrap_or(cfg.eval_query);
    let k = opts.k.unwrap_or(cfg.k);
    let eta0 = opts.eta0.unwrap_or(cfg.eta0);
    if n_tasks == 0 || n_query == 0 {
        return Err(Error::Config(
            "evaluation needs at least one task and one query point".into(),
        ));
    }

    let md = MetaDistribution::build(cfg.variant, cfg.dependence, cfg.data_seed);
    let mut records = Vec::with_capacity(n_tasks);
    for i in 0..n_tasks {
        let (task, eps) = eval_task(
            &md,
            eval_seed,
            i,
            cfg.n_support,
            n_query,
            cfg.arch.d_z,
            params.hierarchical,
        );
        let outcome = eval_adapt(&params, false, &task, eps.as_ref(), k, eta0)?;
        let clean: Vec<f64> = task.query_x.iter().map(|&x| task.hypothesis.eval(x)).collect();
        records.push(EvalRecord {
            task_id: i,
            mode: task.mode,
            family: task.hypothesis.family.name(),
            mse_pre: mse(&outcome.pre_pred, &clean),
            mse_post: mse(&outcome.post_pred, &clean),
        });
    }

    let mut csv = String::with_capacity(records.len() * 64);
    csv.push_str(RECORDS_CSV_HEADER);
    csv.push('\n');
    for r in &records {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.task_id, r.mode, r.family, r.mse_pre, r.mse_post
        ));
    }
    fs::write(out_csv, csv).map_err(|e| Error::io(out_csv, e))?;

    let pre: Vec<f64> = records.iter().map(|r| r.mse_pre).collect();
    let post: Vec<f64> = records.iter().map(|r| r.mse_post).collect();
    let group_means = |key: &dyn Fn(&EvalRecord) -> String, order: &[String]| -> Vec<GroupMean> {
        order
            .iter()
            .filter_map(|g| {
                let members: Vec<&EvalRecord> =
                    records.iter().filter(|r| &key(r) == g).collect();
                if members.is_empty() {
                    return None;
                }
                Some(GroupMean {
                    group: g.clone(),
                    n: members.len(),
                    mse_pre_mean: mean(members.iter().map(|r| r.mse_pre)),
                    mse_post_mean: mean(members.iter().map(|r| r.mse_post)),
                })
            })
            .collect()
    };
    let mode_order: Vec<String> = (0..md.n_modes()).map(|m| m.to_string()).collect();
    let family_order: Vec<String> = cfg
        .variant
        .families()
        .iter()
        .map(|f| f.name().to_string())
        .collect();

    let summary = EvalSummary {
        algorithm: cfg.algorithm,
        variant: cfg.variant,
        dependence: cfg.dependence,
        data_seed: cfg.data_seed,
        model_seed: cfg.model_seed,
        eval_seed,
        trained_steps: loaded.trained_steps,
        n_tasks,
        n_support: cfg.n_support,
        n_query,
        k,
        eta0,
        mse_pre_mean: mean(pre.iter().copied()),
        mse_post_mean: mean(post.iter().copied()),
        mse_pre_ci95: ci95(&pre),
        mse_post_ci95: ci95(&post),
        per_mode: group_means(&|r| r.mode.to_string(), &mode_order),
        per_family: group_means(&|r| r.family.to_string(), &family_order),
    };
    let sidecar = summary_path(out_csv);
    fs::write(
        &sidecar,
        serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
    )
    .map_err(|e| Error::io(&sidecar, e))?;
    Ok(summary)
}

/// `records.csv` → `records.csv.summary.json`.
pub fn summary_path(out_csv: &Path) -> PathBuf {
    let mut name = out_csv
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push_str(".summary.json");
    out_csv.with_file_name(name)
}

pub fn load_summary(path: &Path) -> Result<EvalSummary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Invalid(format!("invalid evaluation summary {}: {e}", path.display())))
}

const ALGORITHM_ORDER: [Algorithm; 4] = [
    Algorithm::Ours,
    Algorithm::MmamlLite,
    Algorithm::Maml,
    Algorithm::Reptile,
];
const VARIANT_ORDER: [Variant; 3] = [Variant::Sine, Variant::SineQuadLinear, Variant::Five];

/// Cross-algorithm table: one row per algorithm, one column per variant,
/// cells `post-adaptation MSE ± 95% CI`. All summaries must come from the
/// same evaluation protocol (seed, dependence, task/shot counts) or the
/// comparison is refused.
pub fn run_compare(summaries: &[EvalSummary]) -> Result<String> {
    let first = summaries
        .first()
        .ok_or_else(|| Error::Invalid("compare needs at least one evaluation summary".into()))?;
    for s in summaries {
        let mismatch = |what: &str, a: String, b: String| {
            Err(Error::Invalid(format!(
                "evaluations are not comparable: {what} differs ({a} vs {b})"
            )))
        };
        if s.eval_seed != first.eval_seed {
            return mismatch(
                "eval seed",
                first.eval_seed.to_string(),
                s.eval_seed.to_string(),
            );
        }
        if s.dependence != first.dependence {
            return mismatch(
                "dependence",
                first.dependence.name().into(),
                s.dependence.name().into(),
            );
        }
        if s.data_seed != first.data_seed {
            return mismatch(
                "data seed",
                first.data_seed.to_string(),
                s.data_seed.to_string(),
            );
        }
        if (s.n_tasks, s.n_support, s.n_query) != (first.n_tasks, first.n_support, first.n_query) {
            return mismatch(
                "evaluation sizes (tasks/support/query)",
                format!("{}/{}/{}", first.n_tasks, first.n_support, first.n_query),
                format!("{}/{}/{}", s.n_tasks, s.n_support, s.n_query),
            );
        }
    }

    let mut cells: Vec<Vec<Option<&EvalSummary>>> =
        vec![vec![None; VARIANT_ORDER.len()]; ALGORITHM_ORDER.len()];
    for s in summaries {
        let row = ALGORITHM_ORDER
            .iter()
            .position(|a| *a == s.algorithm)
            .expect("every algorithm is in the order table");
        let col = VARIANT_ORDER
            .iter()
            .position(|v| *v == s.variant)
            .expect("every variant is in the order table");
        if let Some(prior) = cells[row][col] {
            return Err(Error::Invalid(format!(
                "two evaluations for {}/{} (model seeds {} and {}); compare one per cell",
                s.algorithm.name(),
                s.variant.name(),
                prior.model_seed,
                s.model_seed
            )));
        }
        cells[row][col] = Some(s);
    }

    let used_cols: Vec<usize> = (0..VARIANT_ORDER.len())
        .filter(|&c| cells.iter().any(|row| row[c].is_some()))
        .collect();
    let mut out = String::from("algorithm");
    for &c in &used_cols {
        out.push(',');
        out.push_str(VARIANT_ORDER[c].name());
    }
    out.push('\n');
    for (r, algorithm) in ALGORITHM_ORDER.iter().enumerate() {
        if cells[r].iter().all(Option::is_none) {
            continue;
        }
        out.push_str(algorithm.name());
        for &c in &used_cols {
            out.push(',');
            if let Some(s) = cells[r][c] {
                out.push_str(&format!(
                    "{:.6}±{:.6}",
                    s.mse_post_mean, s.mse_post_ci95
                ));
            }
        }
        out.push('\n');
    }
    Ok(out)
}
