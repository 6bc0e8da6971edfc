//! Stationary equilibrium under fixed assortments, feasibility audits and the
//! random-meeting baseline.
//!
//! Per-type vectors (thresholds, matching rates, masses) are indexed by global
//! node: men first, then women (see [`MarketSpec::node`]).

use serde::Serialize;

use crate::dist::{payoff_rate_multi, solve_flow_fixed_point, solve_payoff_fixed_point, MeetingTerm};
use crate::error::{Error, Result};
use crate::market::{AssortmentSet, MarketSpec, PairFlow, Side};

/// Sup-norm change at which best-response iteration stops.
pub const BR_TOL: f64 = 1e-10;
/// Relative tolerance of every audit.
pub const AUDIT_TOL: f64 = 1e-9;
/// Outer iterations allowed for the random-meeting fixed point.
pub const RANDOM_MEETING_MAX_ITER: usize = 10_000;
const RANDOM_MEETING_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Serialize)]
pub struct EquilibriumOutcome {
    pub thresholds: Vec<f64>,
    pub match_rate: Vec<f64>,
    pub mass: Vec<f64>,
    #[serde(skip)]
    pub flows: PairFlow,
    pub welfare: f64,
    pub iterations: usize,
    /// Threshold vector after each synchronous round, starting with the initial one.
    #[serde(skip)]
    pub trace: Vec<Vec<f64>>,
}

impl EquilibriumOutcome {
    pub fn threshold(&self, spec: &MarketSpec, side: Side, i: usize) -> f64 {
        self.thresholds[spec.node(side, i)]
    }

    pub fn mass_of(&self, spec: &MarketSpec, side: Side, i: usize) -> f64 {
        self.mass[spec.node(side, i)]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FeasibilityReport {
    pub capacity_slack: Vec<f64>,
    /// `m_m λ_m(w) − m_w λ_w(m)` per (man, woman).
    pub flow_imbalance: Vec<Vec<f64>>,
    pub ok: bool,
    pub worst_violation: f64,
    /// Human-readable location of the worst violation, if any.
    pub worst_at: Option<String>,
}

fn terms_for<'a>(
    spec: &'a MarketSpec,
    lambda: &AssortmentSet,
    thresholds: &[f64],
    side: Side,
    i: usize,
) -> Vec<MeetingTerm<'a>> {
    let other = side.opposite();
    lambda
        .row(side, i)
        .iter()
        .enumerate()
        .map(|(j, &rate)| MeetingTerm {
            rate,
            floor: thresholds[spec.node(other, j)],
            dist: spec.pair_dist(side, i, j),
        })
        .collect()
}

/// `ξ_θ = Σ λ_θ(θ′) S(max(θ_θ, θ_θ′))` for every type.
pub fn match_rate(spec: &MarketSpec, lambda: &AssortmentSet, thresholds: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; spec.n_types()];
    for side in [Side::Men, Side::Women] {
        let other = side.opposite();
        for i in 0..spec.types(side).len() {
            let own = thresholds[spec.node(side, i)];
            out[spec.node(side, i)] = lambda
                .row(side, i)
                .iter()
                .enumerate()
                .filter(|(_, &r)| r > 0.0)
                .map(|(j, &r)| {
                    let cut = own.max(thresholds[spec.node(other, j)]);
                    r * spec.pair_dist(side, i, j).survival(cut)
                })
                .sum();
        }
    }
    out
}

/// Best response of type `i` on `side` to the opposite side's thresholds.
pub fn best_response_threshold(
    spec: &MarketSpec,
    lambda: &AssortmentSet,
    thresholds: &[f64],
    side: Side,
    i: usize,
) -> Result<f64> {
    let terms = terms_for(spec, lambda, thresholds, side, i);
    Ok(solve_payoff_fixed_point(&terms, spec.delta)?.max(0.0))
}

fn best_response_map(spec: &MarketSpec, lambda: &AssortmentSet, theta: &[f64]) -> Result<Vec<f64>> {
    let mut next = vec![0.0; theta.len()];
    for side in [Side::Men, Side::Women] {
        for i in 0..spec.types(side).len() {
            next[spec.node(side, i)] = best_response_threshold(spec, lambda, theta, side, i)?;
        }
    }
    Ok(next)
}

fn sup_change(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn round_limit(spec: &MarketSpec) -> usize {
    (100 * (spec.n_types() + 1)).max(1000)
}

/// Unique stationary equilibrium, iterating best responses from zero thresholds.
pub fn solve_equilibrium(spec: &MarketSpec, lambda: &AssortmentSet) -> Result<EquilibriumOutcome> {
    solve_equilibrium_from(spec, lambda, &vec![0.0; spec.n_types()])
}

/// As [`solve_equilibrium`] but starting from `init`.
pub fn solve_equilibrium_from(
    spec: &MarketSpec,
    lambda: &AssortmentSet,
    init: &[f64],
) -> Result<EquilibriumOutcome> {
    lambda.validate(spec)?;
    if init.len() != spec.n_types() {
        return Err(Error::validation("initial threshold vector has the wrong length"));
    }
    let limit = round_limit(spec);
    let mut theta = init.to_vec();
    let mut trace = vec![theta.clone()];
    let mut iterations = 0;
    loop {
        let next = best_response_map(spec, lambda, &theta)?;
        iterations += 1;
        let change = sup_change(&next, &theta);
        theta = next;
        trace.push(theta.clone());
        if change <= BR_TOL {
            break;
        }
        if iterations >= limit {
            return Err(Error::IterationLimit {
                limit,
                last_change: change,
                trace,
            });
        }
    }
    Ok(outcome_at(spec, lambda, theta, iterations, trace))
}

fn outcome_at(
    spec: &MarketSpec,
    lambda: &AssortmentSet,
    thresholds: Vec<f64>,
    iterations: usize,
    trace: Vec<Vec<f64>>,
) -> EquilibriumOutcome {
    let xi = match_rate(spec, lambda, &thresholds);
    let mass: Vec<f64> = (0..spec.n_types())
        .map(|k| {
            let (side, i) = spec.node_type(k);
            spec.arrival(side, i) / (spec.delta + xi[k])
        })
        .collect();
    let mut flows = PairFlow::zeros(spec.n_men(), spec.n_women());
    for m in 0..spec.n_men() {
        for w in 0..spec.n_women() {
            flows.gamma[m][w] = mass[spec.node(Side::Men, m)] * lambda.men[m][w];
        }
    }
    let welfare = welfare_of(spec, &flows, &thresholds);
    EquilibriumOutcome {
        thresholds,
        match_rate: xi,
        mass,
        flows,
        welfare,
        iterations,
        trace,
    }
}

/// `2 Σ γ_mw T(max(θ_m, θ_w))`.
pub fn welfare_of(spec: &MarketSpec, flows: &PairFlow, thresholds: &[f64]) -> f64 {
    let mut total = 0.0;
    for m in 0..spec.n_men() {
        for w in 0..spec.n_women() {
            let g = flows.gamma[m][w];
            if g > 0.0 {
                let cut = thresholds[spec.node(Side::Men, m)].max(thresholds[spec.node(Side::Women, w)]);
                total += g * spec.dist[m][w].tail_expectation(cut);
            }
        }
    }
    2.0 * total
}

pub fn welfare(spec: &MarketSpec, outcome: &EquilibriumOutcome) -> f64 {
    welfare_of(spec, &outcome.flows, &outcome.thresholds)
}

/// Capacity and flow-balance audit of an assortment at its equilibrium masses.
pub fn check_feasibility(
    spec: &MarketSpec,
    lambda: &AssortmentSet,
    outcome: &EquilibriumOutcome,
) -> FeasibilityReport {
    let mut worst = 0.0f64;
    let mut worst_at = None;
    let mut capacity_slack = vec![0.0; spec.n_types()];
    for side in [Side::Men, Side::Women] {
        for i in 0..spec.types(side).len() {
            let slack = 1.0 - lambda.row(side, i).iter().sum::<f64>();
            capacity_slack[spec.node(side, i)] = slack;
            if -slack > worst {
                worst = -slack;
                worst_at = Some(format!("capacity of {}", spec.types(side)[i].label));
            }
        }
    }
    let mut flow_imbalance = vec![vec![0.0; spec.n_women()]; spec.n_men()];
    for m in 0..spec.n_men() {
        for w in 0..spec.n_women() {
            let a = outcome.mass[spec.node(Side::Men, m)] * lambda.men[m][w];
            let b = outcome.mass[spec.node(Side::Women, w)] * lambda.women[w][m];
            flow_imbalance[m][w] = a - b;
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1.0);
            if rel > worst {
                worst = rel;
                worst_at = Some(format!(
                    "flow balance of pair ({}, {})",
                    spec.men[m].label, spec.women[w].label
                ));
            }
        }
    }
    FeasibilityReport {
        capacity_slack,
        flow_imbalance,
        ok: worst <= AUDIT_TOL,
        worst_violation: worst,
        worst_at,
    }
}

/// Converts pair flows into assortments. Thresholds are solved in flow
/// coordinates (`θ·α = Σ γ T(max(θ, θ′))`), masses follow from stationarity and
/// `λ = γ / m`. The returned outcome is that state, checked to be a best
/// response profile under `λ`.
///
/// The state is not re-solved from `λ`: when a threshold sits inside a narrow
/// smoothing band, masses react to threshold perturbations at rate `1/width`
/// and a fresh solve from rounded rates drifts far from the flows it was built
/// for. In flow coordinates the same equilibrium is well conditioned.
pub fn assortments_from_flows(
    spec: &MarketSpec,
    flows: &PairFlow,
) -> Result<(AssortmentSet, EquilibriumOutcome)> {
    let n = spec.n_types();
    let limit = round_limit(spec);
    let mut theta = vec![0.0; n];
    let mut trace = vec![theta.clone()];
    let mut rounds = 0;
    loop {
        let mut next = vec![0.0; n];
        for side in [Side::Men, Side::Women] {
            let other = side.opposite();
            for i in 0..spec.types(side).len() {
                let terms: Vec<MeetingTerm<'_>> = (0..spec.types(other).len())
                    .map(|j| MeetingTerm {
                        rate: flows.get(side, i, j),
                        floor: theta[spec.node(other, j)],
                        dist: spec.pair_dist(side, i, j),
                    })
                    .collect();
                next[spec.node(side, i)] =
                    solve_flow_fixed_point(&terms, spec.arrival(side, i))?.max(0.0);
            }
        }
        rounds += 1;
        let change = sup_change(&next, &theta);
        theta = next;
        trace.push(theta.clone());
        if change <= BR_TOL {
            break;
        }
        if rounds >= limit {
            return Err(Error::IterationLimit {
                limit,
                last_change: change,
                trace,
            });
        }
    }
    let mut mass = vec![0.0; n];
    for side in [Side::Men, Side::Women] {
        let other = side.opposite();
        for i in 0..spec.types(side).len() {
            let matched: f64 = (0..spec.types(other).len())
                .map(|j| {
                    let g = flows.get(side, i, j);
                    if g > 0.0 {
                        let cut = theta[spec.node(side, i)].max(theta[spec.node(other, j)]);
                        g * spec.pair_dist(side, i, j).survival(cut)
                    } else {
                        0.0
                    }
                })
                .sum();
            let m = (spec.arrival(side, i) - matched) / spec.delta;
            if !(m > 0.0) {
                return Err(Error::CertificateViolation(format!(
                    "flows leave no stationary mass for {}",
                    spec.types(side)[i].label
                )));
            }
            mass[spec.node(side, i)] = m;
        }
    }
    let mut lambda = AssortmentSet::for_market(spec);
    for m in 0..spec.n_men() {
        for w in 0..spec.n_women() {
            let g = flows.gamma[m][w];
            if g > 0.0 {
                lambda.men[m][w] = g / mass[spec.node(Side::Men, m)];
                lambda.women[w][m] = g / mass[spec.node(Side::Women, w)];
            }
        }
    }
    for k in 0..n {
        let (side, i) = spec.node_type(k);
        let resid = best_response_residual(spec, &lambda, &theta, side, i);
        if resid > AUDIT_TOL * theta[k].max(1.0) {
            return Err(Error::CertificateViolation(format!(
                "{} is not best-responding under the derived assortments (off by {resid:e})",
                spec.types(side)[i].label
            )));
        }
    }
    let match_rate = match_rate(spec, &lambda, &theta);
    let welfare = welfare_of(spec, flows, &theta);
    let outcome = EquilibriumOutcome {
        thresholds: theta,
        match_rate,
        mass,
        flows: flows.clone(),
        welfare,
        iterations: rounds,
        trace,
    };
    Ok((lambda, outcome))
}

/// Distance between `θ` and the payoff it earns, `|B(θ) − θ|`, for one type.
pub fn best_response_residual(
    spec: &MarketSpec,
    lambda: &AssortmentSet,
    thresholds: &[f64],
    side: Side,
    i: usize,
) -> f64 {
    let terms = terms_for(spec, lambda, thresholds, side, i);
    let own = thresholds[spec.node(side, i)];
    (payoff_rate_multi(&terms, spec.delta, own) - own).abs()
}

#[derive(Debug, Clone)]
pub struct RandomMeeting {
    pub assortments: AssortmentSet,
    pub outcome: EquilibriumOutcome,
    pub outer_iterations: usize,
    /// Whether oscillation switched the outer loop to damped updates.
    pub damped: bool,
}

fn proportional_mixing(spec: &MarketSpec, mass: &[f64]) -> AssortmentSet {
    let total = |side: Side| -> f64 {
        (0..spec.types(side).len())
            .map(|i| mass[spec.node(side, i)])
            .sum()
    };
    let big = total(Side::Men).max(total(Side::Women));
    let mut a = AssortmentSet::for_market(spec);
    for m in 0..spec.n_men() {
        for w in 0..spec.n_women() {
            a.men[m][w] = mass[spec.node(Side::Women, w)] / big;
            a.women[w][m] = mass[spec.node(Side::Men, m)] / big;
        }
    }
    a
}

/// Equilibrium when every agent meets the opposite side in proportion to its
/// population and the short side meets at full capacity.
///
/// Plain fixed-point iteration on masses until the update grows. After that
/// each coordinate moves toward its image by a step that starts at half the
/// gap, grows by 20% while the direction holds and halves on every reversal.
/// Thresholds that land inside a narrow point-mass band make the mass map
/// nearly vertical, and the halving turns the update into a bracketing search.
pub fn random_meeting_equilibrium(spec: &MarketSpec) -> Result<RandomMeeting> {
    let mut mass: Vec<f64> = (0..spec.n_types())
        .map(|k| {
            let (side, i) = spec.node_type(k);
            spec.arrival(side, i) / spec.delta
        })
        .collect();
    let mut damped = false;
    let mut prev_change = f64::INFINITY;
    let mut prev_mass = mass.clone();
    let mut step = vec![0.0; mass.len()];
    let mut dir = vec![0.0f64; mass.len()];
    for outer in 1..=RANDOM_MEETING_MAX_ITER {
        let lambda = proportional_mixing(spec, &mass);
        let outcome = solve_equilibrium(spec, &lambda)?;
        let change = mass
            .iter()
            .zip(&outcome.mass)
            .map(|(a, b)| (a - b).abs() / a.abs().max(1.0))
            .fold(0.0, f64::max);
        if change <= RANDOM_MEETING_TOL {
            return Ok(RandomMeeting {
                assortments: lambda,
                outcome,
                outer_iterations: outer,
                damped,
            });
        }
        if change > prev_change && !damped {
            damped = true;
            for (k, s) in step.iter_mut().enumerate() {
                *s = 0.5 * (outcome.mass[k] - mass[k]).abs();
            }
            tracing::debug!(outer, change, "random-meeting iteration oscillates; damping");
        }
        prev_change = change;
        prev_mass.clone_from(&mass);
        if damped {
            for k in 0..mass.len() {
                let gap = outcome.mass[k] - mass[k];
                let d = gap.signum();
                if gap == 0.0 {
                    continue;
                }
                if d == dir[k] {
                    step[k] *= 1.2;
                } else if dir[k] != 0.0 {
                    step[k] *= 0.5;
                }
                dir[k] = d;
                mass[k] += d * step[k].min(gap.abs());
            }
        } else {
            mass.clone_from(&outcome.mass);
        }
    }
    Err(Error::NonConvergence(format!(
        "random-meeting masses did not settle in {RANDOM_MEETING_MAX_ITER} iterations; last two iterates {prev_mass:?} and {mass:?}"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{solve_rho, UtilityDist};
    use crate::market::{gen_horizontal, gen_vertical_example, TypeInfo};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    pub(crate) fn single_pair() -> (MarketSpec, AssortmentSet) {
        let spec = MarketSpec::new(
            1.0,
            vec![TypeInfo::new("m1", 1.0)],
            vec![TypeInfo::new("w1", 1.0)],
            vec![vec![UtilityDist::uniform(0.0, 1.0)]],
        )
        .unwrap();
        let mut a = AssortmentSet::for_market(&spec);
        a.men[0][0] = 1.0;
        a.women[0][0] = 1.0;
        (spec, a)
    }

    #[test]
    fn match_rate_examples() {
        let (spec, a) = single_pair();
        let zero = AssortmentSet::for_market(&spec);
        assert_eq!(match_rate(&spec, &zero, &[0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(match_rate(&spec, &a, &[0.0, 0.0]), vec![1.0, 1.0]);
        let t = 0.2679;
        let xi = match_rate(&spec, &a, &[t, t]);
        assert_abs_diff_eq!(xi[0], 1.0 - t, epsilon = 1e-15);
    }

    #[test]
    fn best_response_examples() {
        let (spec, a) = single_pair();
        let zero = AssortmentSet::for_market(&spec);
        assert_eq!(best_response_threshold(&spec, &zero, &[0.0, 0.0], Side::Men, 0).unwrap(), 0.0);
        let br = best_response_threshold(&spec, &a, &[0.0, 0.0], Side::Men, 0).unwrap();
        assert_abs_diff_eq!(br, 2.0 - 3f64.sqrt(), epsilon = 1e-11);
        // Grid oracle on B(θ) − θ.
        let b = |t: f64| (1.0 - t * t) / 2.0 / (1.0 + 1.0 - t) - t;
        let best = (0..=100_000)
            .map(|k| k as f64 / 100_000.0)
            .min_by(|x, y| b(*x).abs().total_cmp(&b(*y).abs()))
            .unwrap();
        assert!((best - br).abs() <= 1e-5);

        let pm = MarketSpec::new(
            0.25,
            vec![TypeInfo::new("m1", 1.0)],
            vec![TypeInfo::new("w1", 1.0)],
            vec![vec![UtilityDist::point_mass(5.0, 1e-6)]],
        )
        .unwrap();
        let mut a = AssortmentSet::for_market(&pm);
        a.men[0][0] = 1.0;
        a.women[0][0] = 1.0;
        let br = best_response_threshold(&pm, &a, &[0.0, 0.0], Side::Men, 0).unwrap();
        assert_abs_diff_eq!(br, 4.0, epsilon = 1e-6);
    }

    #[test]
    fn symmetric_single_pair_closed_form() {
        let (spec, a) = single_pair();
        let out = solve_equilibrium(&spec, &a).unwrap();
        let s3 = 3f64.sqrt();
        for k in 0..2 {
            assert_abs_diff_eq!(out.thresholds[k], 2.0 - s3, epsilon = 1e-10);
            assert_abs_diff_eq!(out.match_rate[k], s3 - 1.0, epsilon = 1e-10);
            assert_abs_diff_eq!(out.mass[k], 1.0 / s3, epsilon = 1e-10);
        }
        assert_abs_diff_eq!(out.welfare, (4.0 * s3 - 6.0) / s3, epsilon = 1e-10);
        assert_abs_diff_eq!(welfare(&spec, &out), out.welfare, epsilon = 1e-15);
        let rep = check_feasibility(&spec, &a, &out);
        assert!(rep.ok);
        assert_abs_diff_eq!(rep.capacity_slack[0], 0.0);
        assert_abs_diff_eq!(rep.flow_imbalance[0][0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_design() {
        let (spec, _) = single_pair();
        let zero = AssortmentSet::for_market(&spec);
        let out = solve_equilibrium(&spec, &zero).unwrap();
        assert_eq!(out.thresholds, vec![0.0, 0.0]);
        assert_eq!(out.match_rate, vec![0.0, 0.0]);
        assert_eq!(out.mass, vec![1.0, 1.0]);
        assert_eq!(out.welfare, 0.0);
        let rep = check_feasibility(&spec, &zero, &out);
        assert!(rep.ok);
        assert_eq!(rep.capacity_slack, vec![1.0, 1.0]);
    }

    #[test]
    fn one_sided_rate_is_imbalanced() {
        let (spec, _) = single_pair();
        let mut a = AssortmentSet::for_market(&spec);
        a.men[0][0] = 0.5;
        let out = solve_equilibrium(&spec, &a).unwrap();
        let rep = check_feasibility(&spec, &a, &out);
        assert!(!rep.ok);
        assert!(rep.worst_at.unwrap().contains("(m1, w1)"));
    }

    #[test]
    fn vertical_diagonal_design() {
        let spec = gen_vertical_example(100.0, 0.01, 0.01, 1e-6).unwrap();
        let mut a = AssortmentSet::for_market(&spec);
        // mH <-> wL, mL <-> wH
        a.men[0][1] = 1.0;
        a.women[1][0] = 1.0;
        a.men[1][0] = 1.0;
        a.women[0][1] = 1.0;
        let out = solve_equilibrium(&spec, &a).unwrap();
        let expected = 2.0 * ((1.0 + 0.01) + 1.0) / 1.01;
        assert_abs_diff_eq!(out.welfare, expected, epsilon = 1e-4);
    }

    #[test]
    fn random_meeting_single_pair_is_directed() {
        let (spec, a) = single_pair();
        let rm = random_meeting_equilibrium(&spec).unwrap();
        let direct = solve_equilibrium(&spec, &a).unwrap();
        assert_abs_diff_eq!(rm.assortments.men[0][0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(rm.outcome.welfare, direct.welfare, epsilon = 1e-9);
        assert!(check_feasibility(&spec, &rm.assortments, &rm.outcome).ok);
    }

    #[test]
    fn random_meeting_symmetric_2x2() {
        let d = UtilityDist::uniform(0.0, 1.0);
        let spec = MarketSpec::new(
            1.0,
            vec![TypeInfo::new("m1", 1.0), TypeInfo::new("m2", 1.0)],
            vec![TypeInfo::new("w1", 1.0), TypeInfo::new("w2", 1.0)],
            vec![vec![d.clone(), d.clone()], vec![d.clone(), d]],
        )
        .unwrap();
        let rm = random_meeting_equilibrium(&spec).unwrap();
        let total: f64 = rm.outcome.mass[..2].iter().sum();
        for m in 0..2 {
            for w in 0..2 {
                assert_abs_diff_eq!(
                    rm.assortments.men[m][w],
                    rm.outcome.mass[2 + w] / total,
                    epsilon = 1e-8
                );
            }
        }
        // Identical laws everywhere: same as a single pair at unit rate.
        let (one, a) = single_pair();
        let direct = solve_equilibrium(&one, &a).unwrap();
        assert_abs_diff_eq!(rm.outcome.thresholds[0], direct.thresholds[0], epsilon = 1e-8);
    }

    #[test]
    fn random_meeting_loses_in_horizontal_market() {
        let spec = gen_horizontal(4, 5.0, UtilityDist::normal(8.0, 0.1), 1e-6).unwrap();
        let rm = random_meeting_equilibrium(&spec).unwrap();
        let mut a = AssortmentSet::for_market(&spec);
        for i in 0..4 {
            a.men[i][i] = 1.0;
            a.women[i][i] = 1.0;
        }
        let direct = solve_equilibrium(&spec, &a).unwrap();
        assert!(rm.outcome.welfare < direct.welfare);
        assert!(check_feasibility(&spec, &rm.assortments, &rm.outcome).ok);
    }

    #[test]
    fn flows_round_trip_through_assortments() {
        let (spec, a) = single_pair();
        let out = solve_equilibrium(&spec, &a).unwrap();
        let (lambda, again) = assortments_from_flows(&spec, &out.flows).unwrap();
        assert_abs_diff_eq!(lambda.men[0][0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(again.welfare, out.welfare, epsilon = 1e-9);
    }

    #[test]
    fn first_best_thresholds_single_pair() {
        // With γ = β/(δ + S(ρ)) at β = α the flow equilibrium plays ρ.
        let (spec, _) = single_pair();
        let rho = solve_rho(&spec.dist[0][0], 1.0).unwrap().rho;
        let gamma = 1.0 / (1.0 + 1.0 - rho);
        let flows = PairFlow {
            gamma: vec![vec![gamma]],
        };
        let (_, out) = assortments_from_flows(&spec, &flows).unwrap();
        assert_abs_diff_eq!(out.thresholds[0], rho, epsilon = 1e-9);
    }

    fn random_market(rng: &mut impl Rng, max_side: usize) -> (MarketSpec, AssortmentSet) {
        let nm = rng.random_range(1..=max_side);
        let nw = rng.random_range(1..=max_side);
        let men = (0..nm)
            .map(|i| TypeInfo::new(format!("m{}", i + 1), rng.random_range(0.2..3.0)))
            .collect();
        let women = (0..nw)
            .map(|i| TypeInfo::new(format!("w{}", i + 1), rng.random_range(0.2..3.0)))
            .collect();
        let dist = (0..nm)
            .map(|_| {
                (0..nw)
                    .map(|_| match rng.random_range(0..3) {
                        0 => UtilityDist::normal(rng.random_range(-1.0..5.0), rng.random_range(0.1..2.0)),
                        1 => {
                            let lo = rng.random_range(-1.0..3.0);
                            UtilityDist::uniform(lo, lo + rng.random_range(0.2..4.0))
                        }
                        _ => UtilityDist::point_mass(rng.random_range(0.0..5.0), 1e-3),
                    })
                    .collect()
            })
            .collect();
        let spec = MarketSpec::new(rng.random_range(0.05..3.0), men, women, dist).unwrap();
        let mut a = AssortmentSet::for_market(&spec);
        for side in [Side::Men, Side::Women] {
            let n_other = spec.types(side.opposite()).len();
            for i in 0..spec.types(side).len() {
                let raw: Vec<f64> = (0..n_other).map(|_| rng.random_range(0.0..1.0)).collect();
                let total: f64 = raw.iter().sum::<f64>().max(1e-9);
                let cap = rng.random_range(0.2..1.0);
                for (j, r) in raw.into_iter().enumerate() {
                    a.set(side, i, j, cap * r / total);
                }
            }
        }
        (spec, a)
    }

    #[test]
    fn oracle_grid_on_tiny_markets() {
        // 1×1 and 2×1: scan the men's threshold on a grid; women best-respond
        // exactly given it; the equilibrium is the grid point with the smallest
        // best-response residual.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let (spec, a) = loop {
                let (s, a) = random_market(&mut rng, 2);
                if s.n_men() == 1 {
                    break (s, a);
                }
            };
            let out = solve_equilibrium(&spec, &a).unwrap();
            let hi = 10.0;
            let n = 20_000;
            let mut best = (f64::INFINITY, 0.0);
            for k in 0..=n {
                let tm = hi * k as f64 / n as f64;
                let mut th = vec![0.0; spec.n_types()];
                th[0] = tm;
                for w in 0..spec.n_women() {
                    let node = spec.node(Side::Women, w);
                    th[node] = best_response_threshold(&spec, &a, &th, Side::Women, w).unwrap();
                }
                let resid = (best_response_threshold(&spec, &a, &th, Side::Men, 0).unwrap() - tm).abs();
                if resid < best.0 {
                    best = (resid, tm);
                }
            }
            assert!((best.1 - out.thresholds[0]).abs() <= 2.0 * hi / n as f64 + 1e-9,
                "grid {} vs solver {}", best.1, out.thresholds[0]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn equilibrium_invariants(seed in 0u64..u64::MAX) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (spec, a) = random_market(&mut rng, 3);
            let out = solve_equilibrium(&spec, &a).unwrap();
            prop_assert!(out.iterations <= 2 * spec.n_types() + 2,
                "{} rounds for {} types", out.iterations, spec.n_types());
            // Stationarity, matching rate and payoff identity.
            let xi = match_rate(&spec, &a, &out.thresholds);
            for k in 0..spec.n_types() {
                let (side, i) = spec.node_type(k);
                let alpha = spec.arrival(side, i);
                prop_assert!(((spec.delta + out.match_rate[k]) * out.mass[k] - alpha).abs() <= 1e-9 * alpha);
                prop_assert!((xi[k] - out.match_rate[k]).abs() <= 1e-9);
                let terms = terms_for(&spec, &a, &out.thresholds, side, i);
                let payoff = payoff_rate_multi(&terms, spec.delta, out.thresholds[k]);
                prop_assert!((payoff - out.thresholds[k]).abs() <= 1e-9 * out.thresholds[k].max(1.0));
            }
            // Alternation on the trace from zero.
            let odd: Vec<&Vec<f64>> = out.trace.iter().skip(1).step_by(2).collect();
            let even: Vec<&Vec<f64>> = out.trace.iter().step_by(2).collect();
            for w in odd.windows(2) {
                for k in 0..spec.n_types() {
                    prop_assert!(w[1][k] <= w[0][k] + 1e-12);
                }
            }
            for w in even.windows(2) {
                for k in 0..spec.n_types() {
                    prop_assert!(w[1][k] >= w[0][k] - 1e-12);
                }
            }
            // Uniqueness from random starts.
            for _ in 0..20 {
                let init: Vec<f64> = (0..spec.n_types()).map(|_| rng.random_range(0.0..10.0)).collect();
                let other = solve_equilibrium_from(&spec, &a, &init).unwrap();
                for k in 0..spec.n_types() {
                    prop_assert!((other.thresholds[k] - out.thresholds[k]).abs() <= 1e-8);
                }
            }
        }

        #[test]
        fn scaling_covariance(seed in 0u64..u64::MAX, k in 0.1..10.0f64) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (spec, a) = random_market(&mut rng, 3);
            let base = solve_equilibrium(&spec, &a).unwrap();
            let scaled = solve_equilibrium(&spec.scale_arrivals(k), &a).unwrap();
            for i in 0..spec.n_types() {
                prop_assert!((scaled.thresholds[i] - base.thresholds[i]).abs() <= 1e-12);
                prop_assert!((scaled.mass[i] - k * base.mass[i]).abs() <= 1e-9 * k * base.mass[i]);
            }
            prop_assert!((scaled.welfare - k * base.welfare).abs() <= 1e-9 * (k * base.welfare).max(1.0));
        }
    }
}
