//! Utility-distribution oracles and the payoff-rate fixed points built on them.
//!
//! Every pairwise utility law exposes three oracles: the CDF, the survival
//! function and the tail expectation `T(θ) = ∫_θ^∞ u dF(u)`. Everything else in
//! the crate (thresholds, matching rates, welfare) is expressed through them.
//!
//! The scalar `A(θ) = T(θ) / (δ + S(θ))` is the long-run payoff rate of an agent
//! who meets a single opposite type at unit rate and accepts iff `u ≥ θ`. It is
//! unimodal on `θ ≥ 0` and its maximum `ρ` is also its unique fixed point, so
//! `ρ` is found by bisecting the sign change of `T(θ) − θ·(δ + S(θ))`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Width of the uniform noise used to smooth point masses unless overridden.
pub const DEFAULT_NOISE_WIDTH: f64 = 1e-6;

/// Absolute bracket width at which bisection stops.
pub const BISECTION_TOL: f64 = 1e-12;
pub const BISECTION_MAX_ITER: usize = 200;
const MAX_BRACKET_DOUBLINGS: usize = 64;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// A continuous law for the symmetric utility shared by a matched pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum UtilityDist {
    Normal {
        mean: f64,
        stddev: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// A point mass at `value` spread uniformly over `value ± width/2`.
    PointMass {
        value: f64,
        width: f64,
    },
    Mixture {
        weights: Vec<f64>,
        components: Vec<UtilityDist>,
    },
}

impl UtilityDist {
    pub fn normal(mean: f64, stddev: f64) -> Self {
        UtilityDist::Normal { mean, stddev }
    }

    pub fn uniform(lo: f64, hi: f64) -> Self {
        UtilityDist::Uniform { lo, hi }
    }

    pub fn point_mass(value: f64, width: f64) -> Self {
        UtilityDist::PointMass { value, width }
    }

    pub fn mixture(weights: Vec<f64>, components: Vec<UtilityDist>) -> Self {
        UtilityDist::Mixture {
            weights,
            components,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            UtilityDist::Normal { mean, stddev } => {
                if !mean.is_finite() || !stddev.is_finite() || *stddev <= 0.0 {
                    return Err(Error::validation(format!(
                        "normal needs finite mean and stddev > 0 (got mean={mean}, stddev={stddev})"
                    )));
                }
            }
            UtilityDist::Uniform { lo, hi } => {
                if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                    return Err(Error::validation(format!(
                        "uniform needs finite lo < hi (got lo={lo}, hi={hi})"
                    )));
                }
            }
            UtilityDist::PointMass { value, width } => {
                if !value.is_finite() || !width.is_finite() || *width <= 0.0 {
                    return Err(Error::validation(format!(
                        "point_mass needs finite value and width > 0 (got value={value}, width={width})"
                    )));
                }
            }
            UtilityDist::Mixture {
                weights,
                components,
            } => {
                if weights.is_empty() || weights.len() != components.len() {
                    return Err(Error::validation(
                        "mixture needs one weight per component and at least one component",
                    ));
                }
                if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
                    return Err(Error::validation("mixture weights must be nonnegative"));
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::validation(format!(
                        "mixture weights must sum to 1 (got {total})"
                    )));
                }
                for c in components {
                    c.validate()?;
                }
            }
        }
        Ok(())
    }

    /// `P(u ≤ θ)`.
    pub fn cdf(&self, theta: f64) -> f64 {
        match self {
            UtilityDist::Normal { mean, stddev } => {
                if theta == f64::NEG_INFINITY {
                    return 0.0;
                }
                0.5 * erfc(-(theta - mean) / (stddev * std::f64::consts::SQRT_2))
            }
            UtilityDist::Uniform { lo, hi } => uniform_cdf(*lo, *hi, theta),
            UtilityDist::PointMass { value, width } => {
                uniform_cdf(value - 0.5 * width, value + 0.5 * width, theta)
            }
            UtilityDist::Mixture {
                weights,
                components,
            } => weights
                .iter()
                .zip(components)
                .map(|(w, c)| w * c.cdf(theta))
                .sum(),
        }
    }

    /// `P(u ≥ θ)`; computed directly rather than as `1 − cdf` to keep tails accurate.
    pub fn survival(&self, theta: f64) -> f64 {
        match self {
            UtilityDist::Normal { mean, stddev } => {
                if theta == f64::NEG_INFINITY {
                    return 1.0;
                }
                0.5 * erfc((theta - mean) / (stddev * std::f64::consts::SQRT_2))
            }
            UtilityDist::Uniform { lo, hi } => 1.0 - uniform_cdf(*lo, *hi, theta),
            UtilityDist::PointMass { value, width } => {
                1.0 - uniform_cdf(value - 0.5 * width, value + 0.5 * width, theta)
            }
            UtilityDist::Mixture {
                weights,
                components,
            } => weights
                .iter()
                .zip(components)
                .map(|(w, c)| w * c.survival(theta))
                .sum(),
        }
    }

    /// `∫_θ^∞ u dF(u)`.
    pub fn tail_expectation(&self, theta: f64) -> f64 {
        match self {
            UtilityDist::Normal { mean, stddev } => {
                if theta == f64::NEG_INFINITY {
                    return *mean;
                }
                let z = (theta - mean) / stddev;
                mean * self.survival(theta) + stddev * FRAC_1_SQRT_2PI * (-0.5 * z * z).exp()
            }
            UtilityDist::Uniform { lo, hi } => uniform_tail(*lo, *hi, theta),
            UtilityDist::PointMass { value, width } => {
                uniform_tail(value - 0.5 * width, value + 0.5 * width, theta)
            }
            UtilityDist::Mixture {
                weights,
                components,
            } => weights
                .iter()
                .zip(components)
                .map(|(w, c)| w * c.tail_expectation(theta))
                .sum(),
        }
    }

    /// Density at `θ`.
    pub fn density(&self, theta: f64) -> f64 {
        match self {
            UtilityDist::Normal { mean, stddev } => {
                let z = (theta - mean) / stddev;
                FRAC_1_SQRT_2PI * (-0.5 * z * z).exp() / stddev
            }
            UtilityDist::Uniform { lo, hi } => uniform_density(*lo, *hi, theta),
            UtilityDist::PointMass { value, width } => {
                uniform_density(value - 0.5 * width, value + 0.5 * width, theta)
            }
            UtilityDist::Mixture {
                weights,
                components,
            } => weights
                .iter()
                .zip(components)
                .map(|(w, c)| w * c.density(theta))
                .sum(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.tail_expectation(f64::NEG_INFINITY)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            UtilityDist::Normal { mean, stddev } => Normal::new(*mean, *stddev)
                .expect("validated normal")
                .sample(rng),
            UtilityDist::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            UtilityDist::PointMass { value, width } => {
                value - 0.5 * width + width * rng.random::<f64>()
            }
            UtilityDist::Mixture {
                weights,
                components,
            } => {
                let mut pick = rng.random::<f64>();
                for (w, c) in weights.iter().zip(components) {
                    if pick < *w {
                        return c.sample(rng);
                    }
                    pick -= w;
                }
                components.last().expect("validated mixture").sample(rng)
            }
        }
    }
}

fn uniform_cdf(lo: f64, hi: f64, theta: f64) -> f64 {
    if theta <= lo {
        0.0
    } else if theta >= hi {
        1.0
    } else {
        (theta - lo) / (hi - lo)
    }
}

fn uniform_tail(lo: f64, hi: f64, theta: f64) -> f64 {
    if theta <= lo {
        0.5 * (lo + hi)
    } else if theta >= hi {
        0.0
    } else {
        (hi - theta) * (hi + theta) / (2.0 * (hi - lo))
    }
}

fn uniform_density(lo: f64, hi: f64, theta: f64) -> f64 {
    if theta < lo || theta > hi {
        0.0
    } else {
        1.0 / (hi - lo)
    }
}

/// `A(θ) = T(θ) / (δ + S(θ))`.
pub fn payoff_rate(dist: &UtilityDist, delta: f64, theta: f64) -> f64 {
    dist.tail_expectation(theta) / (delta + dist.survival(theta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoResult {
    pub rho: f64,
    pub argmax_threshold: f64,
    pub iterations: usize,
}

/// Maximum of `A` over `θ ≥ 0`, located as its fixed point.
pub fn solve_rho(dist: &UtilityDist, delta: f64) -> Result<RhoResult> {
    debug_assert!(delta > 0.0);
    let g = |t: f64| dist.tail_expectation(t) - t * (delta + dist.survival(t));
    let hi = dist.tail_expectation(0.0).max(0.0) / delta + 1.0;
    let (rho, iterations) = bisect_sign_change(g, hi)?;
    Ok(RhoResult {
        rho,
        argmax_threshold: rho,
        iterations,
    })
}

/// One opposite-side prospect in an assortment: meeting `rate`, the partner's
/// threshold `floor`, and the pair's utility law.
#[derive(Debug, Clone, Copy)]
pub struct MeetingTerm<'a> {
    pub rate: f64,
    pub floor: f64,
    pub dist: &'a UtilityDist,
}

/// `B(θ) = Σ λ_i T_i(max(θ, θ_i)) / (δ + Σ λ_i S_i(max(θ, θ_i)))`.
pub fn payoff_rate_multi(terms: &[MeetingTerm<'_>], delta: f64, theta: f64) -> f64 {
    let (num, den) = merged_tail(terms, theta);
    num / (delta + den)
}

fn merged_tail(terms: &[MeetingTerm<'_>], theta: f64) -> (f64, f64) {
    let mut num = 0.0;
    let mut den = 0.0;
    for t in terms.iter().filter(|t| t.rate > 0.0) {
        let cut = theta.max(t.floor);
        num += t.rate * t.dist.tail_expectation(cut);
        den += t.rate * t.dist.survival(cut);
    }
    (num, den)
}

/// Unique fixed point `θ = B(θ)` on `θ ≥ 0`; zero for an empty assortment.
pub fn solve_payoff_fixed_point(terms: &[MeetingTerm<'_>], delta: f64) -> Result<f64> {
    debug_assert!(delta > 0.0);
    let g = |t: f64| {
        let (num, den) = merged_tail(terms, t);
        num - t * (delta + den)
    };
    let (num0, _) = merged_tail(terms, 0.0);
    let hi = num0.max(0.0) / delta + 1.0;
    bisect_with_tol(g, hi, 0.0).map(|(t, _)| t)
}

/// Unique fixed point of `θ·α = Σ γ_i T_i(max(θ, θ_i))`, the threshold of a type
/// whose meeting flows `γ_i` (rather than rates) are held fixed.
pub fn solve_flow_fixed_point(terms: &[MeetingTerm<'_>], arrival: f64) -> Result<f64> {
    debug_assert!(arrival > 0.0);
    let g = |t: f64| merged_tail(terms, t).0 - t * arrival;
    let hi = merged_tail(terms, 0.0).0.max(0.0) / arrival + 1.0;
    bisect_with_tol(g, hi, 0.0).map(|(t, _)| t)
}

/// Root of `g` on `[0, ∞)` for a `g` that is positive left of the root and
/// nonpositive right of it. Returns `(root, iterations)`; `0` when `g(0) ≤ 0`.
pub fn bisect_sign_change<F: Fn(f64) -> f64>(g: F, hi: f64) -> Result<(f64, usize)> {
    bisect_with_tol(g, hi, BISECTION_TOL)
}

/// As [`bisect_sign_change`] with an explicit bracket tolerance; `0` bisects
/// until the bracket cannot be split in floating point.
pub fn bisect_with_tol<F: Fn(f64) -> f64>(g: F, hi: f64, tol: f64) -> Result<(f64, usize)> {
    let g0 = g(0.0);
    if g0.is_nan() {
        return Err(Error::NonConvergence("payoff oracle returned NaN at 0".into()));
    }
    if g0 <= 0.0 {
        return Ok((0.0, 0));
    }
    let mut hi = if hi.is_finite() && hi > 0.0 { hi } else { 1.0 };
    let mut doublings = 0;
    while !(g(hi) <= 0.0) {
        doublings += 1;
        if doublings > MAX_BRACKET_DOUBLINGS {
            return Err(Error::NonConvergence(format!(
                "no sign change found below {hi:e}"
            )));
        }
        hi *= 2.0;
    }
    let mut lo = 0.0;
    let mut iterations = 0;
    while hi - lo > tol && iterations < BISECTION_MAX_ITER {
        let mid = lo + 0.5 * (hi - lo);
        if mid <= lo || mid >= hi {
            break;
        }
        iterations += 1;
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo + 0.5 * (hi - lo), iterations))
}
