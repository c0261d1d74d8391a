//! `covmeta` command-line interface: dataset generation, training,
//! evaluation, cross-algorithm comparison, and the meta-gradient check.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use covmeta::config::{
    Algorithm, EncoderInput, GradMode, Preset, RunConfig, DEFAULT_DATA_SEED,
};
use covmeta::dataset::{dataset_from_seed, write_dataset};
use covmeta::evalrun::{
    load_summary, run_compare, run_eval, summary_path, EvalOptions, EvalSummary,
};
use covmeta::gradcheck::meta_gradcheck;
use covmeta::meta::ElboCovariates;
use covmeta::taskgen::{Dependence, Variant};
use covmeta::train::{run_training, TrainOptions};
use covmeta::{Error, Result};

// Training allocates and frees ~0.5 GB of tape nodes per outer step; the
// system allocator returns those pages to the kernel each step and refaults
// them on the next, which dominates wall time. mimalloc keeps them cached.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(
    name = "covmeta",
    version,
    about = "Covariate-conditioned hierarchical meta-learning on multimodal regression"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a benchmark dataset file.
    Gen(GenArgs),
    /// Train a meta-learner (fresh or resumed).
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint on fresh meta-test tasks.
    Eval(EvalArgs),
    /// Tabulate evaluation summaries: one row per algorithm, one column per
    /// task variant.
    Compare(CompareArgs),
    /// Verify the outer meta-gradient against finite differences on a
    /// miniature model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_parser = Variant::parse)]
    variant: Variant,
    #[arg(long, value_parser = Dependence::parse)]
    dependence: Dependence,
    /// Master data seed (modes, weights, and tasks all derive from it).
    #[arg(long, default_value_t = DEFAULT_DATA_SEED)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    n_tasks: usize,
    #[arg(long, default_value_t = 5)]
    n_support: usize,
    #[arg(long, default_value_t = 10)]
    n_query: usize,
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run config; the flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = Algorithm::parse)]
    algorithm: Option<Algorithm>,
    #[arg(long, value_parser = Variant::parse)]
    variant: Option<Variant>,
    #[arg(long, value_parser = Dependence::parse)]
    dependence: Option<Dependence>,
    /// Named setting bundle applied before the individual flag overrides.
    #[arg(long, value_parser = Preset::parse)]
    preset: Option<Preset>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    model_seed: Option<u64>,
    #[arg(long)]
    train_seed: Option<u64>,
    /// Inner-loop steps.
    #[arg(long)]
    k: Option<usize>,
    /// Inner-loop step size.
    #[arg(long)]
    eta0: Option<f64>,
    /// Outer Adam learning rate.
    #[arg(long)]
    eta1: Option<f64>,
    /// Reconstruction weight.
    #[arg(long)]
    alpha_r: Option<f64>,
    /// KL weight.
    #[arg(long)]
    alpha_kl: Option<f64>,
    /// Weight decay (defaults to 5e-4 for hierarchical algorithms, 0 for
    /// plain ones).
    #[arg(long)]
    alpha_l2: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_parser = EncoderInput::parse)]
    encoder_input: Option<EncoderInput>,
    #[arg(long, value_parser = ElboCovariates::parse)]
    elbo_covariates: Option<ElboCovariates>,
    /// Outer-gradient mode: exact or first-order.
    #[arg(long, value_parser = GradMode::parse)]
    mode: Option<GradMode>,
    #[arg(long)]
    n_train_tasks: Option<usize>,
    #[arg(long)]
    n_support: Option<usize>,
    #[arg(long)]
    n_query: Option<usize>,
    #[arg(long)]
    eval_tasks: Option<usize>,
    #[arg(long)]
    eval_query: Option<usize>,
    #[arg(long)]
    reptile_outer_step: Option<f64>,
    /// Save a checkpoint every N outer steps (0 = final only).
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Train from this dataset file instead of regenerating tasks from the
    /// config seeds.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many outer steps in this invocation (resume later).
    #[arg(long)]
    max_steps: Option<u64>,
    /// Suppress progress output.
    #[arg(long)]
    quiet: bool,
}

impl TrainArgs {
    fn build_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => {
                let (Some(algorithm), Some(variant), Some(dependence)) =
                    (self.algorithm, self.variant, self.dependence)
                else {
                    return Err(Error::Config(
                        "without --config, all of --algorithm, --variant and --dependence are required"
                            .into(),
                    ));
                };
                RunConfig::new(algorithm, variant, dependence)
            }
        };
        if let Some(p) = self.preset {
            cfg.apply_preset(p);
        }
        macro_rules! set {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { cfg.$field = v; })*
            };
        }
        set!(
            algorithm,
            variant,
            dependence,
            data_seed,
            model_seed,
            train_seed,
            k,
            eta0,
            eta1,
            alpha_r,
            alpha_kl,
            batch_size,
            epochs,
            encoder_input,
            elbo_covariates,
            mode,
            n_train_tasks,
            n_support,
            n_query,
            eval_tasks,
            eval_query,
            reptile_outer_step,
            checkpoint_every,
        );
        if let Some(v) = self.alpha_l2 {
            cfg.alpha_l2 = Some(v);
        }
        if let Some(dir) = &self.out_dir {
            cfg.out_dir = Some(dir.clone());
        }
        cfg.normalize()
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Trained model checkpoint.
    checkpoint: PathBuf,
    #[arg(long)]
    eval_seed: Option<u64>,
    /// Number of meta-test tasks (default: the checkpoint's eval_tasks).
    #[arg(long)]
    eval_tasks: Option<usize>,
    /// Query points per task (default: the checkpoint's eval_query).
    #[arg(long)]
    eval_query: Option<usize>,
    /// Adaptation steps (default: the checkpoint's k).
    #[arg(long)]
    k: Option<usize>,
    /// Adaptation step size (default: the checkpoint's eta0).
    #[arg(long)]
    eta0: Option<f64>,
    /// Records CSV path (default: eval_records.csv next to the checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Evaluation outputs: records CSVs (their summary sidecars are used)
    /// or the .summary.json files themselves.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Also write the table to this CSV file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// ours / mmaml-lite check the hierarchical model, maml the plain one.
    #[arg(long, value_parser = Algorithm::parse, default_value = "ours")]
    algorithm: Algorithm,
    #[arg(long, value_parser = GradMode::parse, default_value = "exact")]
    mode: GradMode,
    /// Inner-loop steps to unroll.
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 11)]
    seed: u64,
}

fn cmd_gen(args: &GenArgs) -> Result<ExitCode> {
    let (md, task_seed, tasks) = dataset_from_seed(
        args.variant,
        args.dependence,
        args.seed,
        args.n_tasks,
        args.n_support,
        args.n_query,
    );
    write_dataset(&args.out, &md, task_seed, &tasks)?;
    println!(
        "wrote {} {}/{} tasks ({}-shot, {} query) to {}",
        tasks.len(),
        args.variant.name(),
        args.dependence.name(),
        args.n_support,
        args.n_query,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(args: &TrainArgs) -> Result<ExitCode> {
    let cfg = args.build_config()?;
    let outcome = run_training(
        &cfg,
        &TrainOptions {
            data: args.data.as_deref(),
            resume: args.resume.as_deref(),
            stop_after: args.max_steps,
            quiet: args.quiet,
        },
    )?;
    if let Some(loss) = outcome.final_loss {
        println!(
            "[{}] {} after {}/{} steps; last total {:.6} (recon {:.6}, kl {:.6}, task-nll {:.6}, l2 {:.6})",
            cfg.slug(),
            if outcome.completed { "finished" } else { "paused" },
            outcome.steps,
            cfg.total_steps(),
            loss.total,
            loss.recon,
            loss.kl,
            loss.task_nll,
            loss.l2,
        );
    } else {
        println!(
            "[{}] nothing to do ({} steps already trained)",
            cfg.slug(),
            outcome.steps
        );
    }
    println!("checkpoint: {}", outcome.checkpoint.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: &EvalArgs) -> Result<ExitCode> {
    let out_csv = args.out.clone().unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or_else(|| std::path::Path::new("."))
            .join("eval_records.csv")
    });
    let summary = run_eval(
        &args.checkpoint,
        &EvalOptions {
            eval_seed: args.eval_seed,
            n_tasks: args.eval_tasks,
            n_query: args.eval_query,
            k: args.k,
            eta0: args.eta0,
        },
        &out_csv,
    )?;
    println!(
        "{}/{}/{}: mse_post {:.6} ± {:.6} (pre {:.6}) over {} tasks (eval seed {})",
        summary.algorithm.name(),
        summary.variant.name(),
        summary.dependence.name(),
        summary.mse_post_mean,
        summary.mse_post_ci95,
        summary.mse_pre_mean,
        summary.n_tasks,
        summary.eval_seed,
    );
    println!("records: {}", out_csv.display());
    println!("summary: {}", summary_path(&out_csv).display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_compare(args: &CompareArgs) -> Result<ExitCode> {
    let summaries: Vec<EvalSummary> = args
        .inputs
        .iter()
        .map(|p| {
            let path = if p.to_string_lossy().ends_with(".summary.json") {
                p.clone()
            } else {
                summary_path(p)
            };
            load_summary(&path)
        })
        .collect::<Result<_>>()?;
    let table = run_compare(&summaries)?;
    print!("{table}");
    if let Some(out) = &args.out {
        std::fs::write(out, &table).map_err(|e| Error::io(out, e))?;
        eprintln!("table written to {}", out.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<ExitCode> {
    if args.algorithm == Algorithm::Reptile {
        return Err(Error::Config(
            "reptile has no outer gradient to check; use ours, mmaml-lite, or maml".into(),
        ));
    }
    let report = meta_gradcheck(
        args.algorithm.hierarchical(),
        args.mode == GradMode::FirstOrder,
        args.k,
        args.seed,
    )?;
    print!("{}", report.render());
    if report.passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(2))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Gen(args) => cmd_gen(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Compare(args) => cmd_compare(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
