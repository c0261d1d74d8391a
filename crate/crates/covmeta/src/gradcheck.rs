//! Finite-difference verification of the outer meta-gradient.
//!
//! The check rebuilds the complete outer objective — unrolled inner loop,
//! encoder, gates, reconstruction, KL, every weighted term — on a model
//! small enough that central differences over *every* parameter coordinate
//! finish in seconds, then compares the taped gradient against the numeric
//! one group by group (θ_base / encoder / gates / decoder for the
//! hierarchical model, θ0 for the plain one).
//!
//! First-order mode with k ≥ 1 deliberately drops the curvature term of
//! the meta-gradient, so its report is marked expected-divergent rather
//! than failed.

use crate::meta::{
    outer_objective_grad, AdaptOptions, ElboCovariates, MetaParams, OuterConfig,
};
use crate::nets::ArchSpec;
use crate::optim::AdamConfig;
use crate::rng::{derive, Stream};
use crate::taskgen::{purpose, sample_task, Dependence, MetaDistribution, Task, Variant};
use crate::Result;

/// Largest per-group relative error the check accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Base central-difference step; scaled by `max(1, |β_i|)` per coordinate.
const FD_STEP: f64 = 1e-5;

const N_TASKS: usize = 2;
const N_SUPPORT: usize = 5;
const N_QUERY: usize = 4;

/// One block group's comparison between taped and numeric gradients.
#[derive(Clone, Debug)]
pub struct GroupCheck {
    /// Leading segment of the block names in this group (e.g. "encoder").
    pub group: String,
    pub n_coords: usize,
    /// `‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖)` over the group's coordinates.
    pub rel_err: f64,
    /// `‖g_tape‖` over the group, for scale context.
    pub grad_norm: f64,
}

/// Full report for one configuration of the check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Human-readable configuration label, e.g. "hierarchical/exact".
    pub label: String,
    pub n_params: usize,
    pub k: usize,
    pub first_order: bool,
    /// First-order mode with k ≥ 1 is not supposed to match the full
    /// gradient; the report then documents the divergence instead of
    /// failing on it.
    pub expected_divergent: bool,
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
    /// Largest group relative error.
    pub worst: f64,
}

impl GradCheckReport {
    /// Whether every group is within tolerance. Expected-divergent
    /// configurations report `true` regardless of the measured error.
    pub fn passed(&self) -> bool {
        self.expected_divergent || self.worst <= self.tolerance
    }

    /// Multi-line table for terminal output.
    pub fn render(&self) -> String {
        let mut out = format!(
            "meta-gradient check: {} (k={}, {} parameters, tolerance {:.0e})\n",
            self.label, self.k, self.n_params, self.tolerance
        );
        out.push_str(&format!(
            "  {:<12} {:>7} {:>12} {:>12}   status\n",
            "group", "coords", "rel err", "grad norm"
        ));
        for g in &self.groups {
            let status = if self.expected_divergent {
                "info"
            } else if g.rel_err <= self.tolerance {
                "ok"
            } else {
                "FAIL"
            };
            out.push_str(&format!(
                "  {:<12} {:>7} {:>12.3e} {:>12.3e}   {}\n",
                g.group, g.n_coords, g.rel_err, g.grad_norm, status
            ));
        }
        if self.expected_divergent {
            out.push_str(&format!(
                "  first-order mode with k={} drops the curvature term; \
                 divergence from the full gradient is expected (worst {:.3e})\n",
                self.k, self.worst
            ));
        } else {
            out.push_str(&format!(
                "  worst {:.3e} (tolerance {:.0e}) — {}\n",
                self.worst,
                self.tolerance,
                if self.passed() { "PASS" } else { "FAIL" }
            ));
        }
        out
    }
}

fn miniature_tasks(seed: u64) -> Vec<Task> {
    let md = MetaDistribution::build(Variant::Sine, Dependence::Dependent, seed);
    (0..N_TASKS)
        .map(|i| {
            let mut s = Stream::new(derive(derive(seed, purpose::TRAIN_TASKS), i as u64));
            sample_task(&md, &mut s, N_SUPPORT, N_QUERY)
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Run the check: build a miniature model (hierarchical or plain), take the
/// taped gradient of the outer objective at the initial parameters, then
/// probe every coordinate with central differences and compare per group.
pub fn meta_gradcheck(
    hierarchical: bool,
    first_order: bool,
    k: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let arch = ArchSpec::miniature();
    let params = if hierarchical {
        MetaParams::hierarchical(arch, derive(seed, 7))
    } else {
        MetaParams::plain(arch, derive(seed, 7))
    };
    let outer = OuterConfig {
        alpha_r: if hierarchical { 0.2 } else { 0.0 },
        alpha_kl: if hierarchical { 0.1 } else { 0.0 },
        alpha_l2: if hierarchical { 5e-4 } else { 0.0 },
        elbo: ElboCovariates::Query,
        adapt: AdaptOptions {
            k,
            eta0: crate::meta::DEFAULT_ETA0,
            first_order,
        },
        adam: AdamConfig::default(),
        bypass_encoder: false,
    };
    let tasks = miniature_tasks(seed);
    let step = 0;
    let train_seed = seed;

    let (_, grad) = outer_objective_grad(&params, &outer, &tasks, step, train_seed, true)?;
    let g_tape = grad.expect("gradient requested").data().to_vec();

    let base = params.data.clone();
    let mut probe = params.clone();
    let mut eval_total = |data: Vec<f64>| -> Result<f64> {
        probe.data = data;
        let (bd, _) = outer_objective_grad(&probe, &outer, &tasks, step, train_seed, false)?;
        Ok(bd.total)
    };

    let n = base.len();
    let mut g_fd = vec![0.0; n];
    for i in 0..n {
        let h = FD_STEP * base[i].abs().max(1.0);
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        g_fd[i] = (eval_total(plus)? - eval_total(minus)?) / (2.0 * h);
    }

    // Group coordinates by the leading segment of their block name, in
    // layout order.
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for block in &params.layout.blocks {
        let key = block
            .name
            .split('.')
            .next()
            .expect("block names are non-empty")
            .to_string();
        let len: usize = block.shape.iter().product();
        let coords = block.offset..block.offset + len;
        match groups.last_mut() {
            Some((k, idx)) if *k == key => idx.extend(coords),
            _ => groups.push((key, coords.collect())),
        }
    }

    let mut checks = Vec::with_capacity(groups.len());
    let mut worst: f64 = 0.0;
    for (name, idx) in groups {
        let a: Vec<f64> = idx.iter().map(|&i| g_tape[i]).collect();
        let b: Vec<f64> = idx.iter().map(|&i| g_fd[i]).collect();
        let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let scale = norm(&a).max(norm(&b)).max(1e-12);
        let rel_err = norm(&diff) / scale;
        worst = worst.max(rel_err);
        checks.push(GroupCheck {
            group: name,
            n_coords: idx.len(),
            rel_err,
            grad_norm: norm(&a),
        });
    }

    Ok(GradCheckReport {
        label: format!(
            "{}/{}",
            if hierarchical { "hierarchical" } else { "plain" },
            if first_order { "first-order" } else { "exact" }
        ),
        n_params: n,
        k,
        first_order,
        expected_divergent: first_order && k >= 1,
        tolerance: GRADCHECK_TOLERANCE,
        groups: checks,
        worst,
    })
}
