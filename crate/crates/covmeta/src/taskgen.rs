//! Synthetic multimodal few-shot regression benchmark.
//!
//! A meta-distribution is a P-component mixture over covariate modes: mode
//! p draws covariates from N(μ_p, σ_p²) with μ_p ~ U(−10,10) and
//! σ_p ~ U(0,10), and mixture weights come from a symmetric Dirichlet(1).
//! Each task also owns a regression hypothesis from one of five families.
//!
//! Two regimes connect covariates and hypotheses:
//! * **dependent** — the task's mode determines its hypothesis: either the
//!   family itself (multi-family variants) or, for the single-family sine
//!   variant, the p-th equal sub-interval of every parameter range;
//! * **independent** — the family and parameters are drawn uniformly over
//!   their full ranges, carrying no information about the mode.
//!
//! Per-task draw order (fixed; dataset files depend on it):
//! mode → family (only when independent and multi-family) → parameters
//! (sign coin where applicable, then amplitude, then the rest in the
//! family's documented order) → support covariates → support noise →
//! query covariates → query noise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive, Stream};

/// Observation noise standard deviation for every benchmark variant.
pub const NOISE_SIGMA: f64 = 0.3;

/// Substream purposes hung off user-facing seeds (documented so files can
/// be regenerated from their headers).
pub mod purpose {
    /// Mode/weight hyperdraws of the meta-distribution.
    pub const MODES: u64 = 0;
    /// Per-task streams of a generated dataset.
    pub const TRAIN_TASKS: u64 = 1;
    /// Per-task streams of an evaluation run.
    pub const EVAL_TASKS: u64 = 2;
    /// Latent-noise streams during training (one per outer step).
    pub const TRAIN_EPS: u64 = 3;
    /// Latent-noise streams during evaluation (one per task).
    pub const EVAL_EPS: u64 = 4;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Sine,
    Quad,
    Linear,
    TransformedL1,
    Tanh,
}

impl Family {
    pub fn tag(self) -> u8 {
        match self {
            Family::Sine => 0,
            Family::Quad => 1,
            Family::Linear => 2,
            Family::TransformedL1 => 3,
            Family::Tanh => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => Family::Sine,
            1 => Family::Quad,
            2 => Family::Linear,
            3 => Family::TransformedL1,
            4 => Family::Tanh,
            other => return Err(Error::Dataset(format!("unknown family tag {other}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Sine => "sine",
            Family::Quad => "quad",
            Family::Linear => "linear",
            Family::TransformedL1 => "transformed-l1",
            Family::Tanh => "tanh",
        }
    }
}

/// Benchmark variant: which families participate and how many modes exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Sine,
    SineQuadLinear,
    Five,
}

impl Variant {
    pub fn families(self) -> &'static [Family] {
        match self {
            Variant::Sine => &[Family::Sine],
            Variant::SineQuadLinear => &[Family::Sine, Family::Quad, Family::Linear],
            Variant::Five => &[
                Family::Sine,
                Family::Quad,
                Family::Linear,
                Family::TransformedL1,
                Family::Tanh,
            ],
        }
    }

    pub fn n_modes(self) -> usize {
        self.families().len().max(3)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sine => "sine",
            Variant::SineQuadLinear => "sine-quad-linear",
            Variant::Five => "five",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "sine" => Variant::Sine,
            "sine-quad-linear" | "sql" => Variant::SineQuadLinear,
            "five" => Variant::Five,
            other => {
                return Err(Error::Config(format!(
                    "unknown variant {other:?} (expected sine, sine-quad-linear, or five)"
                )))
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dependence {
    /// Mode determines the hypothesis (family or parameter sub-intervals).
    Dependent,
    /// Hypothesis drawn independently of the mode.
    Independent,
}

impl Dependence {
    pub fn name(self) -> &'static str {
        match self {
            Dependence::Dependent => "dependent",
            Dependence::Independent => "independent",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "dependent" | "case-i" => Dependence::Dependent,
            "independent" | "case-ii" => Dependence::Independent,
            other => {
                return Err(Error::Config(format!(
                    "unknown dependence {other:?} (expected dependent or independent)"
                )))
            }
        })
    }
}

/// A concrete regression hypothesis. Parameters a family does not use stay
/// zero. This is the single source of truth for noiseless targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub family: Family,
    pub a: f64,
    pub w: f64,
    pub c: f64,
    pub b: f64,
}

impl Hypothesis {
    pub fn eval(&self, x: f64) -> f64 {
        match self.family {
            Family::Sine => self.a * ((self.w * x).sin() + self.b),
            Family::Quad => self.a * (x - self.c) * (x - self.c) + self.b,
            Family::Linear => self.a * x + self.b,
            Family::TransformedL1 => self.a * (x - self.c).abs() + self.b,
            Family::Tanh => self.a * (x - self.c).tanh() + self.b,
        }
    }
}

/// Full parameter ranges per family (amplitude sign for quad and the
/// transformed-L1 family is a separate fair coin).
pub const SINE_A: (f64, f64) = (0.1, 5.0);
pub const SINE_W: (f64, f64) = (0.5, 2.0);
pub const SINE_B: (f64, f64) = (0.0, std::f64::consts::TAU);
pub const BOWL_A_MAG: (f64, f64) = (0.02, 0.15);
pub const OFFSET_RANGE: (f64, f64) = (-3.0, 3.0);

/// The p-th (0-indexed) of `n` equal sub-intervals of `range`.
pub fn sub_interval(range: (f64, f64), p: usize, n: usize) -> (f64, f64) {
    let width = (range.1 - range.0) / n as f64;
    (range.0 + p as f64 * width, range.0 + (p + 1) as f64 * width)
}

/// Sine parameter ranges for mode `p` of `n` in the dependent regime: the
/// p-th equal sub-interval of the amplitude, frequency, and phase ranges.
pub fn sine_partition(p: usize, n: usize) -> ((f64, f64), (f64, f64), (f64, f64)) {
    (
        sub_interval(SINE_A, p, n),
        sub_interval(SINE_W, p, n),
        sub_interval(SINE_B, p, n),
    )
}

/// One covariate mode: x ~ N(mu, sigma²).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSpec {
    pub mu: f64,
    pub sigma: f64,
}

/// A fully instantiated benchmark meta-distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaDistribution {
    pub variant: Variant,
    pub dependence: Dependence,
    pub modes: Vec<ModeSpec>,
    pub weights: Vec<f64>,
    pub noise_sigma: f64,
    pub master_seed: u64,
}

impl MetaDistribution {
    /// Instantiate modes and weights from `master_seed`. Hyperdraw order:
    /// for each mode p, μ_p then σ_p; then the Dirichlet weight vector.
    pub fn build(variant: Variant, dependence: Dependence, master_seed: u64) -> Self {
        let p = variant.n_modes();
        let mut stream = Stream::new(derive(master_seed, purpose::MODES));
        let modes: Vec<ModeSpec> = (0..p)
            .map(|_| ModeSpec {
                mu: stream.uniform(-10.0, 10.0),
                sigma: stream.uniform(0.0, 10.0),
            })
            .collect();
        let weights = stream.dirichlet(p);
        MetaDistribution {
            variant,
            dependence,
            modes,
            weights,
            noise_sigma: NOISE_SIGMA,
            master_seed,
        }
    }

    /// Same distribution with a different observation-noise level (0 gives
    /// noiseless targets; dataset files are unaffected).
    pub fn with_noise_sigma(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }
}

/// One sampled task: covariate mode, hypothesis, and noisy observations.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub mode: usize,
    pub hypothesis: Hypothesis,
    pub support_x: Vec<f64>,
    pub support_y: Vec<f64>,
    pub query_x: Vec<f64>,
    pub query_y: Vec<f64>,
}

fn draw_hypothesis(md: &MetaDistribution, mode: usize, stream: &mut Stream) -> Hypothesis {
    let families = md.variant.families();
    let family = match md.dependence {
        Dependence::Dependent if families.len() > 1 => families[mode % families.len()],
        Dependence::Dependent => families[0],
        Dependence::Independent if families.len() > 1 => {
            families[stream.categorical(&vec![1.0; families.len()])]
        }
        Dependence::Independent => families[0],
    };
    let mut h = Hypothesis {
        family,
        a: 0.0,
        w: 0.0,
        c: 0.0,
        b: 0.0,
    };
    match family {
        Family::Sine => {
            let ((a_lo, a_hi), (w_lo, w_hi), (b_lo, b_hi)) = if md.dependence
                == Dependence::Dependent
                && md.variant == Variant::Sine
            {
                sine_partition(mode, md.n_modes())
            } else {
                (SINE_A, SINE_W, SINE_B)
            };
            h.a = stream.uniform(a_lo, a_hi);
            h.w = stream.uniform(w_lo, w_hi);
            h.b = stream.uniform(b_lo, b_hi);
        }
        Family::Quad | Family::TransformedL1 => {
            let sign = if stream.coin() { 1.0 } else { -1.0 };
            h.a = sign * stream.uniform(BOWL_A_MAG.0, BOWL_A_MAG.1);
            h.c = stream.uniform(OFFSET_RANGE.0, OFFSET_RANGE.1);
            h.b = stream.uniform(OFFSET_RANGE.0, OFFSET_RANGE.1);
        }
        Family::Linear => {
            h.a = stream.uniform(OFFSET_RANGE.0, OFFSET_RANGE.1);
            h.b = stream.uniform(OFFSET_RANGE.0, OFFSET_RANGE.1);
        }
        Family::Tanh => {
            h.a = stream.uniform(OFFSET_RANGE.0, OFFSET_RANGE.1);
            h.c = stream.uniform(OFFSET_RANGE.0, OFFSET_RANGE.1);
            h.b = stream.uniform(OFFSET_RANGE.0, OFFSET_RANGE.1);
        }
    }
    h
}

/// Draw one task from `md` using `stream` (see the module docs for the
/// frozen draw order).
pub fn sample_task(
    md: &MetaDistribution,
    stream: &mut Stream,
    n_support: usize,
    n_query: usize,
) -> Task {
    let mode = stream.categorical(&md.weights);
    let hypothesis = draw_hypothesis(md, mode, stream);
    let spec = md.modes[mode];

    let support_x: Vec<f64> = (0..n_support)
        .map(|_| spec.mu + spec.sigma * stream.normal())
        .collect();
    let support_y: Vec<f64> = support_x
        .iter()
        .map(|&x| hypothesis.eval(x) + md.noise_sigma * stream.normal())
        .collect();
    let query_x: Vec<f64> = (0..n_query)
        .map(|_| spec.mu + spec.sigma * stream.normal())
        .collect();
    let query_y: Vec<f64> = query_x
        .iter()
        .map(|&x| hypothesis.eval(x) + md.noise_sigma * stream.normal())
        .collect();

    Task {
        mode,
        hypothesis,
        support_x,
        support_y,
        query_x,
        query_y,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hypothesis_anchors() {
        let h = |family, a, w, c, b| Hypothesis { family, a, w, c, b };
        // sine: a·(sin(w·x) + b) — the phase-like parameter is inside the
        // amplitude factor
        assert!((h(Family::Sine, 2.0, 1.0, 0.0, 0.5).eval(0.0) - 1.0).abs() < 1e-15);
        let quarter = std::f64::consts::FRAC_PI_4;
        assert!((h(Family::Sine, 1.0, 2.0, 0.0, 0.0).eval(quarter) - 1.0).abs() < 1e-12);
        assert!((h(Family::Quad, 0.1, 0.0, 1.0, -2.0).eval(3.0) - (-1.6)).abs() < 1e-12);
        assert!((h(Family::Linear, 2.0, 0.0, 0.0, -1.0).eval(1.5) - 2.0).abs() < 1e-15);
        assert!((h(Family::TransformedL1, -0.05, 0.0, 0.0, 1.0).eval(-4.0) - 0.8).abs() < 1e-12);
        assert!((h(Family::Tanh, 3.0, 0.0, 1.0, 0.5).eval(1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sine_partition_frozen_intervals() {
        let ((a_lo, a_hi), _, _) = sine_partition(0, 3);
        assert!((a_lo - 0.1).abs() < 1e-15);
        assert!((a_hi - 1.7333333333333334).abs() < 1e-12);
        let (_, (w_lo, w_hi), _) = sine_partition(2, 3);
        assert!((w_lo - 1.5).abs() < 1e-12);
        assert!((w_hi - 2.0).abs() < 1e-12);
        let (_, _, (b_lo, b_hi)) = sine_partition(1, 3);
        let third = std::f64::consts::TAU / 3.0;
        assert!((b_lo - third).abs() < 1e-12);
        assert!((b_hi - 2.0 * third).abs() < 1e-12);
    }

    #[test]
    fn build_is_deterministic_with_ranged_hyperdraws() {
        let md = MetaDistribution::build(Variant::Five, Dependence::Dependent, 42);
        let md2 = MetaDistribution::build(Variant::Five, Dependence::Dependent, 42);
        assert_eq!(md, md2);
        assert_eq!(md.modes.len(), 5);
        assert_eq!(md.weights.len(), 5);
        assert!((md.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for m in &md.modes {
            assert!((-10.0..10.0).contains(&m.mu));
            assert!((0.0..10.0).contains(&m.sigma));
        }
        assert_eq!(md.noise_sigma, NOISE_SIGMA);
        let other = MetaDistribution::build(Variant::Five, Dependence::Dependent, 43);
        assert_ne!(md.modes, other.modes);
    }

    #[test]
    fn dependent_family_is_a_function_of_mode() {
        let md = MetaDistribution::build(Variant::SineQuadLinear, Dependence::Dependent, 7);
        let expect = [Family::Sine, Family::Quad, Family::Linear];
        let mut seen = [false; 3];
        let mut stream = Stream::new(1);
        for _ in 0..2_000 {
            let t = sample_task(&md, &mut stream, 5, 10);
            assert_eq!(t.hypothesis.family, expect[t.mode]);
            seen[t.mode] = true;
        }
        assert!(seen.iter().all(|&s| s), "all modes visited");
        let md5 = MetaDistribution::build(Variant::Five, Dependence::Dependent, 7);
        let mut stream = Stream::new(2);
        for _ in 0..2_000 {
            let t = sample_task(&md5, &mut stream, 5, 10);
            assert_eq!(t.hypothesis.family.tag() as usize, t.mode);
        }
    }

    #[test]
    fn dependent_sine_parameters_respect_mode_partitions() {
        let md = MetaDistribution::build(Variant::Sine, Dependence::Dependent, 3);
        let mut stream = Stream::new(9);
        for _ in 0..3_000 {
            let t = sample_task(&md, &mut stream, 5, 10);
            let ((a_lo, a_hi), (w_lo, w_hi), (b_lo, b_hi)) = sine_partition(t.mode, 3);
            let h = t.hypothesis;
            assert_eq!(h.family, Family::Sine);
            assert!(h.a >= a_lo && h.a < a_hi, "a={} mode={}", h.a, t.mode);
            assert!(h.w >= w_lo && h.w < w_hi);
            assert!(h.b >= b_lo && h.b < b_hi);
        }
    }

    #[test]
    fn independent_parameters_cover_full_ranges() {
        let md = MetaDistribution::build(Variant::Five, Dependence::Independent, 11);
        let mut stream = Stream::new(13);
        let mut fam_counts = [0usize; 5];
        let mut pos_a = 0usize;
        let mut neg_a = 0usize;
        let n = 10_000;
        for _ in 0..n {
            let t = sample_task(&md, &mut stream, 3, 3);
            let h = t.hypothesis;
            fam_counts[h.family.tag() as usize] += 1;
            match h.family {
                Family::Sine => {
                    assert!(h.a >= SINE_A.0 && h.a < SINE_A.1);
                    assert!(h.w >= SINE_W.0 && h.w < SINE_W.1);
                    assert!(h.b >= SINE_B.0 && h.b < SINE_B.1);
                }
                Family::Quad | Family::TransformedL1 => {
                    assert!(h.a.abs() >= BOWL_A_MAG.0 && h.a.abs() < BOWL_A_MAG.1);
                    if h.a > 0.0 {
                        pos_a += 1;
                    } else {
                        neg_a += 1;
                    }
                    assert!((-3.0..3.0).contains(&h.c));
                    assert!((-3.0..3.0).contains(&h.b));
                }
                Family::Linear | Family::Tanh => {
                    assert!((-3.0..3.0).contains(&h.a));
                    assert!((-3.0..3.0).contains(&h.b));
                }
            }
        }
        // uniform family draw: each ≈ n/5; 4σ binomial bound ≈ 4·√(n·0.2·0.8)
        let bound = 4.0 * (n as f64 * 0.2 * 0.8).sqrt();
        for (i, &c) in fam_counts.iter().enumerate() {
            assert!(
                (c as f64 - n as f64 / 5.0).abs() < bound,
                "family {i}: {c} of {n}"
            );
        }
        // amplitude sign coin is fair
        let total = (pos_a + neg_a) as f64;
        assert!((pos_a as f64 - total / 2.0).abs() < 4.0 * (total * 0.25).sqrt());
    }

    #[test]
    fn tasks_are_deterministic_and_noise_has_declared_scale() {
        let md = MetaDistribution::build(Variant::SineQuadLinear, Dependence::Dependent, 5);
        let t1 = sample_task(&md, &mut Stream::new(77), 5, 100);
        let t2 = sample_task(&md, &mut Stream::new(77), 5, 100);
        assert_eq!(t1, t2);
        assert_eq!(t1.support_x.len(), 5);
        assert_eq!(t1.query_x.len(), 100);

        // residuals y − f(x) across many tasks: mean ≈ 0, std ≈ 0.3
        let mut resid = Vec::new();
        let mut stream = Stream::new(123);
        for _ in 0..300 {
            let t = sample_task(&md, &mut stream, 5, 20);
            for (x, y) in t.query_x.iter().zip(&t.query_y) {
                resid.push(y - t.hypothesis.eval(*x));
            }
        }
        let n = resid.len() as f64;
        let mean = resid.iter().sum::<f64>() / n;
        let var = resid.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "residual mean {mean}");
        assert!((var.sqrt() - NOISE_SIGMA).abs() < 0.01, "residual std {}", var.sqrt());

        // noiseless override pins y to f(x) exactly
        let clean = md.clone().with_noise_sigma(0.0);
        let t = sample_task(&clean, &mut Stream::new(9), 3, 3);
        for (x, y) in t.query_x.iter().zip(&t.query_y) {
            assert_eq!(*y, t.hypothesis.eval(*x));
        }
    }

    #[test]
    fn covariates_follow_their_mode() {
        // per-mode covariate sample mean within CLT bounds of the mode mean
        let md = MetaDistribution::build(Variant::SineQuadLinear, Dependence::Dependent, 21);
        let mut stream = Stream::new(4);
        let mut sums = vec![0.0; 3];
        let mut sq = vec![0.0; 3];
        let mut counts = vec![0usize; 3];
        for _ in 0..4_000 {
            let t = sample_task(&md, &mut stream, 10, 0);
            for x in &t.support_x {
                sums[t.mode] += x;
                sq[t.mode] += x * x;
                counts[t.mode] += 1;
            }
        }
        for p in 0..3 {
            if counts[p] < 500 {
                continue; // a rare mode in this weight draw; skip its bound
            }
            let n = counts[p] as f64;
            let mean = sums[p] / n;
            let sd = (sq[p] / n - mean * mean).sqrt();
            let spec = md.modes[p];
            assert!(
                (mean - spec.mu).abs() < 5.0 * spec.sigma / n.sqrt() + 1e-9,
                "mode {p}: mean {mean} vs {}",
                spec.mu
            );
            assert!((sd - spec.sigma).abs() < 0.1 * spec.sigma + 0.05);
        }
    }

    #[test]
    fn variant_and_dependence_parse_round_trip() {
        for v in [Variant::Sine, Variant::SineQuadLinear, Variant::Five] {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert_eq!(Variant::parse("sql").unwrap(), Variant::SineQuadLinear);
        assert!(Variant::parse("nope").is_err());
        for d in [Dependence::Dependent, Dependence::Independent] {
            assert_eq!(Dependence::parse(d.name()).unwrap(), d);
        }
        assert_eq!(Dependence::parse("case-i").unwrap(), Dependence::Dependent);
        assert_eq!(
            Dependence::parse("case-ii").unwrap(),
            Dependence::Independent
        );
        assert!(Dependence::parse("case-iii").is_err());
    }
}
