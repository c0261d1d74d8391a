//! Run configuration: one JSON document that pins every knob of a training
//! or evaluation run, with strict parsing (unknown fields are rejected) and
//! explicit defaults so a config written today reproduces the same run
//! later.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::meta::{AdaptOptions, ElboCovariates, MetaParams, OuterConfig, DEFAULT_ETA0, DEFAULT_K};
use crate::nets::ArchSpec;
use crate::optim::AdamConfig;
use crate::taskgen::{Dependence, Variant};
use crate::{Error, Result};

/// Data seed the default benchmark runs use. Chosen (and pinned by test)
/// for well-separated covariate modes — sine-variant mode means 9.65,
/// −9.94, 2.68 with spreads 3.4–5.4 and no weight below 0.26 — so
/// per-mode result tables are informative rather than an accident of
/// overlapping modes.
pub const DEFAULT_DATA_SEED: u64 = 2;

/// Which meta-learner a run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Covariate-conditioned hierarchical meta-learner (encoder + gates +
    /// decoder around the task network).
    Ours,
    Maml,
    Reptile,
    /// Ablation: the same hierarchical machinery but the modulation is
    /// inferred from (x, y) pairs with no covariate reconstruction or KL
    /// term.
    MmamlLite,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Ours => "ours",
            Algorithm::Maml => "maml",
            Algorithm::Reptile => "reptile",
            Algorithm::MmamlLite => "mmaml-lite",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "ours" => Algorithm::Ours,
            "maml" => Algorithm::Maml,
            "reptile" => Algorithm::Reptile,
            "mmaml-lite" => Algorithm::MmamlLite,
            other => {
                return Err(Error::Config(format!(
                    "unknown algorithm {other:?} (expected ours, maml, reptile, or mmaml-lite)"
                )))
            }
        })
    }

    /// Whether the algorithm trains the hierarchical model (encoder, gates,
    /// decoder) rather than a plain task network.
    pub fn hierarchical(self) -> bool {
        matches!(self, Algorithm::Ours | Algorithm::MmamlLite)
    }
}

/// How the outer gradient treats the unrolled inner loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GradMode {
    #[default]
    Exact,
    FirstOrder,
}

impl GradMode {
    pub fn name(self) -> &'static str {
        match self {
            GradMode::Exact => "exact",
            GradMode::FirstOrder => "first-order",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "exact" => GradMode::Exact,
            "first-order" => GradMode::FirstOrder,
            other => {
                return Err(Error::Config(format!(
                    "unknown gradient mode {other:?} (expected exact or first-order)"
                )))
            }
        })
    }
}

/// What the encoder reads from the support set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderInput {
    #[default]
    Covariates,
    Pairs,
}

impl EncoderInput {
    pub fn width(self) -> usize {
        match self {
            EncoderInput::Covariates => 1,
            EncoderInput::Pairs => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EncoderInput::Covariates => "covariates",
            EncoderInput::Pairs => "pairs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "covariates" => EncoderInput::Covariates,
            "pairs" => EncoderInput::Pairs,
            other => {
                return Err(Error::Config(format!(
                    "unknown encoder input {other:?} (expected covariates or pairs)"
                )))
            }
        })
    }
}

/// Named bundles of non-default settings, applied over a base config.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Softer prior: KL weight 0.01 instead of 0.1.
    WorkshopKl,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "workshop-kl" => Preset::WorkshopKl,
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?} (expected workshop-kl)"
                )))
            }
        })
    }
}

fn default_data_seed() -> u64 {
    DEFAULT_DATA_SEED
}
fn default_model_seed() -> u64 {
    1
}
fn default_train_seed() -> u64 {
    1
}
fn default_k() -> usize {
    DEFAULT_K
}
fn default_eta0() -> f64 {
    DEFAULT_ETA0
}
fn default_eta1() -> f64 {
    1e-3
}
fn default_alpha_r() -> f64 {
    0.2
}
fn default_alpha_kl() -> f64 {
    0.1
}
fn default_batch_size() -> usize {
    25
}
fn default_epochs() -> usize {
    10
}
fn default_n_train_tasks() -> usize {
    10_000
}
fn default_n_support() -> usize {
    5
}
fn default_n_query() -> usize {
    10
}
fn default_eval_tasks() -> usize {
    1000
}
fn default_eval_query() -> usize {
    100
}
fn default_reptile_outer_step() -> f64 {
    1.0
}

/// Everything a run needs, JSON-serializable. Unknown fields are rejected;
/// omitted fields take the documented defaults.
///
/// `normalize()` must run before the config is used: it applies the
/// algorithm-fixed fields (mmaml-lite always reads pairs and carries no
/// reconstruction/KL term; plain-model algorithms have no ELBO terms at
/// all), resolves the weight-decay default, syncs the encoder width into
/// the architecture, and validates. Checkpoints store the normalized form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub variant: Variant,
    pub dependence: Dependence,
    #[serde(default = "default_data_seed")]
    pub data_seed: u64,
    #[serde(default = "default_model_seed")]
    pub model_seed: u64,
    #[serde(default = "default_train_seed")]
    pub train_seed: u64,
    /// Inner-loop steps.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Inner-loop step size.
    #[serde(default = "default_eta0")]
    pub eta0: f64,
    /// Outer Adam learning rate.
    #[serde(default = "default_eta1")]
    pub eta1: f64,
    /// Reconstruction weight.
    #[serde(default = "default_alpha_r")]
    pub alpha_r: f64,
    /// KL weight.
    #[serde(default = "default_alpha_kl")]
    pub alpha_kl: f64,
    /// Weight decay on the meta-parameters. `None` means the per-algorithm
    /// default: 5e-4 for the hierarchical algorithms, 0 for the plain ones.
    #[serde(default)]
    pub alpha_l2: Option<f64>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub encoder_input: EncoderInput,
    /// Which covariates the reconstruction term scores.
    #[serde(default)]
    pub elbo_covariates: ElboCovariates,
    #[serde(default)]
    pub mode: GradMode,
    #[serde(default = "default_n_train_tasks")]
    pub n_train_tasks: usize,
    #[serde(default = "default_n_support")]
    pub n_support: usize,
    #[serde(default = "default_n_query")]
    pub n_query: usize,
    #[serde(default = "default_eval_tasks")]
    pub eval_tasks: usize,
    #[serde(default = "default_eval_query")]
    pub eval_query: usize,
    /// Step size of the reptile outer update.
    #[serde(default = "default_reptile_outer_step")]
    pub reptile_outer_step: f64,
    /// Save a checkpoint every this many outer steps (0 = final only).
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Where train/eval outputs go; defaults to `runs/<slug>`.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub arch: ArchSpec,
}

impl RunConfig {
    /// A config with every optional field at its default.
    pub fn new(algorithm: Algorithm, variant: Variant, dependence: Dependence) -> Self {
        RunConfig {
            algorithm,
            variant,
            dependence,
            data_seed: default_data_seed(),
            model_seed: default_model_seed(),
            train_seed: default_train_seed(),
            k: default_k(),
            eta0: default_eta0(),
            eta1: default_eta1(),
            alpha_r: default_alpha_r(),
            alpha_kl: default_alpha_kl(),
            alpha_l2: None,
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            encoder_input: EncoderInput::default(),
            elbo_covariates: ElboCovariates::Query,
            mode: GradMode::default(),
            n_train_tasks: default_n_train_tasks(),
            n_support: default_n_support(),
            n_query: default_n_query(),
            eval_tasks: default_eval_tasks(),
            eval_query: default_eval_query(),
            reptile_outer_step: default_reptile_outer_step(),
            checkpoint_every: 0,
            out_dir: None,
            arch: ArchSpec::default(),
        }
    }

    pub fn apply_preset(&mut self, preset: Preset) {
        match preset {
            Preset::WorkshopKl => self.alpha_kl = 0.01,
        }
    }

    /// Apply algorithm-fixed fields, resolve defaults that depend on the
    /// algorithm, and validate. Returns the normalized config that run
    /// outputs and checkpoints record.
    pub fn normalize(mut self) -> Result<Self> {
        match self.algorithm {
            Algorithm::MmamlLite => {
                // The ablation's identity: modulation inferred from (x, y)
                // pairs, no covariate reconstruction, no KL.
                self.encoder_input = EncoderInput::Pairs;
                self.alpha_r = 0.0;
                self.alpha_kl = 0.0;
            }
            Algorithm::Maml | Algorithm::Reptile => {
                // Plain task network: there is no encoder or decoder for
                // these weights to apply to.
                self.alpha_r = 0.0;
                self.alpha_kl = 0.0;
            }
            Algorithm::Ours => {}
        }
        if self.alpha_l2.is_none() {
            self.alpha_l2 = Some(if self.algorithm.hierarchical() {
                5e-4
            } else {
                0.0
            });
        }
        self.arch.enc_in = self.encoder_input.width();
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let positive = [
            ("eta1", self.eta1),
            ("reptile_outer_step", self.reptile_outer_step),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("eta0", self.eta0),
            ("alpha_r", self.alpha_r),
            ("alpha_kl", self.alpha_kl),
            ("alpha_l2", self.alpha_l2.unwrap_or(0.0)),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if self.k > 0 && self.eta0 == 0.0 {
            return Err(Error::Config(
                "eta0 must be positive when k > 0".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.n_train_tasks < self.batch_size {
            return Err(Error::Config(format!(
                "n_train_tasks ({}) must be at least batch_size ({})",
                self.n_train_tasks, self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        for (name, v) in [
            ("n_support", self.n_support),
            ("n_query", self.n_query),
            ("eval_tasks", self.eval_tasks),
            ("eval_query", self.eval_query),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Weight decay after `normalize()`; the per-algorithm default before.
    pub fn resolved_alpha_l2(&self) -> f64 {
        self.alpha_l2.unwrap_or(if self.algorithm.hierarchical() {
            5e-4
        } else {
            0.0
        })
    }

    /// Full training batches per epoch (a trailing partial batch is unused).
    pub fn steps_per_epoch(&self) -> u64 {
        (self.n_train_tasks / self.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.epochs as u64
    }

    /// Short name for labeling outputs, e.g. `ours-sine-dependent-s1`.
    pub fn slug(&self) -> String {
        format!(
            "{}-{}-{}-s{}",
            self.algorithm.name(),
            self.variant.name(),
            self.dependence.name(),
            self.model_seed
        )
    }

    /// Output directory: the configured one, or `runs/<slug>`.
    pub fn resolve_out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(self.slug()))
    }

    pub fn to_outer_config(&self) -> OuterConfig {
        OuterConfig {
            alpha_r: self.alpha_r,
            alpha_kl: self.alpha_kl,
            alpha_l2: self.resolved_alpha_l2(),
            elbo: self.elbo_covariates,
            adapt: AdaptOptions {
                k: self.k,
                eta0: self.eta0,
                first_order: self.mode == GradMode::FirstOrder,
            },
            adam: AdamConfig {
                lr: self.eta1,
                ..AdamConfig::default()
            },
            bypass_encoder: false,
        }
    }

    /// Fresh meta-parameters for this config (hierarchical or plain per the
    /// algorithm), initialized from `model_seed`.
    pub fn init_meta_params(&self) -> MetaParams {
        if self.algorithm.hierarchical() {
            MetaParams::hierarchical(self.arch.clone(), self.model_seed)
        } else {
            MetaParams::plain(self.arch.clone(), self.model_seed)
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_pretty() + "\n").map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}
