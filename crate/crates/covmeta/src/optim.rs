//! Optimizers.
//!
//! * [`sgd_step`] composes one gradient-descent update as tape nodes, so an
//!   unrolled inner loop stays differentiable end to end.
//! * [`AdamState`] is the plain (non-differentiated) outer-loop optimizer on
//!   the flattened meta-parameter vector, with bias correction.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};

/// One SGD update `param − eta·grad`, recorded on the tape. `grad` may be a
/// gradient node (exact mode) or a re-inserted constant (first-order mode).
pub fn sgd_step(tape: &mut Tape, param: NodeId, grad: NodeId, eta: f64) -> Result<NodeId> {
    let scaled = tape.scale(grad, eta)?;
    tape.sub(param, scaled)
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second-moment accumulators plus the bias-correction step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
        }
    }

    /// Rebuild from checkpointed parts.
    pub fn m(&self) -> &[f64] {
        &self.m
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn from_parts(m: Vec<f64>, v: Vec<f64>, step: u64) -> Result<Self> {
        if m.len() != v.len() {
            return Err(Error::Invalid(format!(
                "adam moment lengths differ: {} vs {}",
                m.len(),
                v.len()
            )));
        }
        Ok(AdamState { m, v, step })
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// One bias-corrected update, in place.
    pub fn apply(&mut self, cfg: &AdamConfig, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Invalid(format!(
                "adam dimension mismatch: state {}, params {}, grad {}",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "adam" });
        }
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sgd_shrinks_quadratic_by_exact_dyadic_factor() {
        // Minimizing ½λ² with η=0.25 gives λ_K = λ₀·(1−η)^K; all arithmetic
        // is dyadic, so λ₃ = 27/64 = 0.421875 must hold bitwise — and the
        // meta-gradient dλ₃/dλ₀ = (1−η)³ is the same number.
        let mut tape = Tape::new(true);
        let lam0 = tape.input(Tensor::scalar(1.0));
        let mut lam = lam0;
        for _ in 0..3 {
            let sq = tape.square(lam).unwrap();
            let loss = tape.scale(sq, 0.5).unwrap();
            let g = tape.backward_nodes(loss, &[lam]).unwrap()[0];
            lam = sgd_step(&mut tape, lam, g, 0.25).unwrap();
        }
        assert_eq!(tape.value(lam).data()[0].to_bits(), 0.421875f64.to_bits());
        let outer = tape.backward_values(lam, &[lam0]).unwrap().remove(0);
        assert_eq!(outer.data()[0].to_bits(), 0.421875f64.to_bits());
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(2);
        let mut p = vec![0.5, -0.5];
        st.apply(&cfg, &mut p, &[3.0, -0.2]).unwrap();
        // after bias correction the first update is −lr·g/(|g|+ε)
        assert!((p[0] - (0.5 - 1e-3)).abs() < 1e-9, "{}", p[0]);
        assert!((p[1] - (-0.5 + 1e-3)).abs() < 1e-9, "{}", p[1]);
    }

    #[test]
    fn adam_constant_gradient_keeps_unit_steps() {
        let cfg = AdamConfig::with_lr(0.01);
        let mut st = AdamState::new(1);
        let mut p = vec![0.0];
        for k in 1..=5 {
            st.apply(&cfg, &mut p, &[2.0]).unwrap();
            // constant g ⇒ m̂=g, v̂=g² at every step ⇒ each Δ = −lr·g/(|g|+ε)
            assert!(
                (p[0] + 0.01 * k as f64).abs() < 1e-8,
                "step {k}: {}",
                p[0]
            );
        }
        assert_eq!(st.step_count(), 5);
    }

    #[test]
    fn adam_is_deterministic() {
        let cfg = AdamConfig::default();
        let run = || {
            let mut st = AdamState::new(3);
            let mut p = vec![0.1, 0.2, 0.3];
            for k in 0..10 {
                let g: Vec<f64> = p.iter().map(|x| x * (k as f64 - 4.0)).collect();
                st.apply(&cfg, &mut p, &g).unwrap();
            }
            (p, st)
        };
        let (p1, s1) = run();
        let (p2, s2) = run();
        assert_eq!(p1, p2);
        assert_eq!(s1.first_moment(), s2.first_moment());
        assert_eq!(s1.second_moment(), s2.second_moment());
    }

    #[test]
    fn adam_rejects_mismatch_and_nonfinite() {
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(2);
        let mut p = vec![0.0; 3];
        assert!(st.apply(&cfg, &mut p, &[1.0, 2.0]).is_err());
        let mut p = vec![0.0; 2];
        assert!(matches!(
            st.apply(&cfg, &mut p, &[f64::NAN, 0.0]),
            Err(Error::NonFinite { .. })
        ));
        assert!(AdamState::from_parts(vec![0.0], vec![0.0, 0.0], 1).is_err());
    }
}
