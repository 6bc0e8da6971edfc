//! Assortment design with an approximation certificate.
//!
//! The first-best forest is cut into vertex-disjoint stars, each star is solved
//! with incentives taken into account, and the resulting pair flows are turned
//! back into assortments whose equilibrium is audited against the first best.

use std::collections::VecDeque;
use std::ops::Add;

use serde::Serialize;

use crate::dist::{solve_flow_fixed_point, MeetingTerm};
use crate::equilibrium::{assortments_from_flows, check_feasibility, EquilibriumOutcome, FeasibilityReport};
use crate::error::{Error, Result};
use crate::firstbest::{solve_first_best, RHO_FLOOR};
use crate::market::{AssortmentSet, MarketSpec, PairFlow, Side};

/// Lower bound on `welfare / first-best` guaranteed by the design.
pub const CERTIFIED_RATIO: f64 = 0.25;
const RATIO_SLACK: f64 = 1e-9;

/// A star of the decomposition: `center` joined to each of `leaves` by an edge
/// of the matching weight. Nodes are global type indices.
#[derive(Debug, Clone, PartialEq)]
pub struct StarEdges<W> {
    pub center: usize,
    pub leaves: Vec<usize>,
    pub weights: Vec<W>,
}

impl<W: Copy + Add<Output = W> + Default> StarEdges<W> {
    pub fn weight(&self) -> W {
        self.weights.iter().fold(W::default(), |a, &b| a + b)
    }
}

/// Splits a weighted forest into vertex-disjoint stars keeping at least half
/// the weight. Each tree is rooted at its lowest node, edges are classed by the
/// parity of the parent's depth and the heavier class is kept, ties going to
/// the even class.
pub fn forest_to_stars<W>(n_nodes: usize, edges: &[(usize, usize, W)]) -> Result<Vec<StarEdges<W>>>
where
    W: Copy + PartialOrd + Add<Output = W> + Default,
{
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_nodes];
    for (k, &(a, b, _)) in edges.iter().enumerate() {
        if a >= n_nodes || b >= n_nodes || a == b {
            return Err(Error::validation(format!("edge {k} ({a}, {b}) is not a valid forest edge")));
        }
        adj[a].push((b, k));
        adj[b].push((a, k));
    }
    for list in &mut adj {
        list.sort_unstable();
    }
    let mut seen = vec![false; n_nodes];
    let mut out = Vec::new();
    for start in 0..n_nodes {
        if seen[start] || adj[start].is_empty() {
            continue;
        }
        // Collect the component.
        let mut comp = vec![start];
        seen[start] = true;
        let mut head = 0;
        while head < comp.len() {
            let v = comp[head];
            head += 1;
            for &(u, _) in &adj[v] {
                if !seen[u] {
                    seen[u] = true;
                    comp.push(u);
                }
            }
        }
        let n_edges: usize = comp.iter().map(|&v| adj[v].len()).sum::<usize>() / 2;
        if n_edges + 1 != comp.len() {
            return Err(Error::validation("edge set contains a cycle"));
        }
        let root = start;

        let mut depth = vec![usize::MAX; n_nodes];
        depth[root] = 0;
        let mut order = vec![root];
        let mut queue = VecDeque::from([root]);
        let mut children: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_nodes];
        while let Some(v) = queue.pop_front() {
            for &(u, k) in &adj[v] {
                if depth[u] == usize::MAX {
                    depth[u] = depth[v] + 1;
                    children[v].push((u, k));
                    order.push(u);
                    queue.push_back(u);
                }
            }
        }
        let mut class = [W::default(), W::default()];
        for &v in &order {
            for &(_, k) in &children[v] {
                class[depth[v] % 2] = class[depth[v] % 2] + edges[k].2;
            }
        }
        let keep = if class[0] >= class[1] { 0 } else { 1 };
        for &v in &order {
            if depth[v] % 2 == keep && !children[v].is_empty() {
                out.push(StarEdges {
                    center: v,
                    leaves: children[v].iter().map(|&(u, _)| u).collect(),
                    weights: children[v].iter().map(|&(_, k)| edges[k].2).collect(),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct StarLeaf {
    /// Index on the side opposite the center.
    pub index: usize,
    /// First-best flow of the star on this edge.
    pub beta: f64,
    pub rho: f64,
}

/// A star-shaped submarket with its own first best, leaves by `ρ` descending.
#[derive(Debug, Clone, Serialize)]
pub struct StarMarket {
    pub center_side: Side,
    pub center: usize,
    pub leaves: Vec<StarLeaf>,
}

impl StarMarket {
    /// Greedy fractional knapsack over the candidate leaves `(index, ρ)`.
    pub fn new(spec: &MarketSpec, center_side: Side, center: usize, candidates: &[(usize, f64)]) -> Self {
        let mut sorted: Vec<(usize, f64)> = candidates
            .iter()
            .copied()
            .filter(|&(_, rho)| rho >= RHO_FLOOR)
            .collect();
        sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut left = spec.arrival(center_side, center);
        let mut leaves = Vec::new();
        for (index, rho) in sorted {
            if left <= 0.0 {
                break;
            }
            let beta = spec.arrival(center_side.opposite(), index).min(left);
            left -= beta;
            leaves.push(StarLeaf { index, beta, rho });
        }
        StarMarket {
            center_side,
            center,
            leaves,
        }
    }

    pub fn fb_welfare(&self) -> f64 {
        2.0 * self.leaves.iter().map(|l| l.rho * l.beta).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StarCase {
    /// All first-best flows are kept.
    Case1,
    /// The last leaf is dropped.
    Case2a,
    /// Only the last leaf is kept, at full capacity.
    Case2b,
}

#[derive(Debug, Clone, Serialize)]
pub struct StarSolution {
    pub star: StarMarket,
    pub case_taken: StarCase,
    /// First-best flows `γ*` per leaf.
    pub gamma_star: Vec<f64>,
    /// Flows actually emitted per leaf.
    pub gamma: Vec<f64>,
    pub center_hat: f64,
    pub leaf_hat: Vec<f64>,
    /// Equilibrium thresholds of the emitted design: center, then leaves.
    pub eq_center_threshold: f64,
    pub eq_leaf_thresholds: Vec<f64>,
    pub welfare: f64,
    pub fb_welfare: f64,
}

fn flow_to_pair(star: &StarMarket, leaf: usize) -> (usize, usize) {
    match star.center_side {
        Side::Men => (star.center, star.leaves[leaf].index),
        Side::Women => (star.leaves[leaf].index, star.center),
    }
}

/// Threshold a leaf would play if it met the center at flow `γ*` and the center
/// accepted everything above it: the root of `θ·α = γ* T(θ)`.
pub fn idealized_leaf_threshold(gamma_star: f64, arrival: f64, dist: &crate::dist::UtilityDist) -> Result<f64> {
    if gamma_star <= 0.0 {
        return Ok(0.0);
    }
    let term = [MeetingTerm {
        rate: gamma_star,
        floor: 0.0,
        dist,
    }];
    solve_flow_fixed_point(&term, arrival)
}

/// Center threshold against leaves playing `leaf_hat`: the root of
/// `θ·α_c = Σ γ*_i T_i(max(θ, θ̂_i))`.
pub fn idealized_center_threshold(
    spec: &MarketSpec,
    star: &StarMarket,
    gamma_star: &[f64],
    leaf_hat: &[f64],
) -> Result<f64> {
    let terms: Vec<MeetingTerm<'_>> = star
        .leaves
        .iter()
        .enumerate()
        .map(|(i, l)| MeetingTerm {
            rate: gamma_star[i],
            floor: leaf_hat[i],
            dist: spec.pair_dist(star.center_side, star.center, l.index),
        })
        .collect();
    solve_flow_fixed_point(&terms, spec.arrival(star.center_side, star.center))
}

pub fn solve_star(spec: &MarketSpec, star: StarMarket) -> Result<StarSolution> {
    let side = star.center_side;
    let n = star.leaves.len();
    let fb_welfare = star.fb_welfare();
    let dist_of = |i: usize| spec.pair_dist(side, star.center, star.leaves[i].index);
    let gamma_star: Vec<f64> = (0..n)
        .map(|i| {
            let l = &star.leaves[i];
            l.beta / (spec.delta + dist_of(i).survival(l.rho))
        })
        .collect();
    let mut leaf_hat = Vec::with_capacity(n);
    for i in 0..n {
        let l = &star.leaves[i];
        let alpha = spec.arrival(side.opposite(), l.index);
        if l.beta >= alpha {
            leaf_hat.push(l.rho);
        } else {
            leaf_hat.push(idealized_leaf_threshold(gamma_star[i], alpha, dist_of(i))?);
        }
    }
    if n == 0 {
        return Ok(StarSolution {
            star,
            case_taken: StarCase::Case1,
            gamma_star,
            gamma: Vec::new(),
            center_hat: 0.0,
            leaf_hat,
            eq_center_threshold: 0.0,
            eq_leaf_thresholds: Vec::new(),
            welfare: 0.0,
            fb_welfare,
        });
    }
    let center_hat = idealized_center_threshold(spec, &star, &gamma_star, &leaf_hat)?;
    let last = n - 1;
    let (case_taken, gamma) = if center_hat > star.leaves[last].rho {
        (StarCase::Case1, gamma_star.clone())
    } else {
        let s_a: f64 = star.leaves[..last].iter().map(|l| l.rho * l.beta).sum();
        let s_b = star.leaves[last].rho * star.leaves[last].beta;
        if s_a >= s_b {
            let mut g = gamma_star.clone();
            g[last] = 0.0;
            (StarCase::Case2a, g)
        } else {
            let l = &star.leaves[last];
            let beta = spec
                .arrival(side, star.center)
                .min(spec.arrival(side.opposite(), l.index));
            let mut g = vec![0.0; n];
            g[last] = beta / (spec.delta + dist_of(last).survival(l.rho));
            (StarCase::Case2b, g)
        }
    };
    let mut flows = PairFlow::zeros(spec.n_men(), spec.n_women());
    for (i, &g) in gamma.iter().enumerate() {
        let (m, w) = flow_to_pair(&star, i);
        flows.gamma[m][w] = g;
    }
    let (_, outcome) = assortments_from_flows(spec, &flows)?;
    let eq_center_threshold = outcome.threshold(spec, side, star.center);
    let eq_leaf_thresholds = star
        .leaves
        .iter()
        .map(|l| outcome.threshold(spec, side.opposite(), l.index))
        .collect();
    Ok(StarSolution {
        star,
        case_taken,
        gamma_star,
        gamma,
        center_hat,
        leaf_hat,
        eq_center_threshold,
        eq_leaf_thresholds,
        welfare: outcome.welfare,
        fb_welfare,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DesignedSolution {
    #[serde(skip)]
    pub assortments: AssortmentSet,
    pub outcome: EquilibriumOutcome,
    pub fb_objective: f64,
    pub ratio: f64,
    pub stars: Vec<StarSolution>,
    pub feasibility: FeasibilityReport,
    /// Sum of `ρβ` over the first-best forest and over the kept stars.
    pub forest_weight: f64,
    pub star_weight: f64,
}

/// The full pipeline: first best, star decomposition, per-star incentives,
/// assortments and audit.
pub fn design_search(spec: &MarketSpec) -> Result<DesignedSolution> {
    let fb = solve_first_best(spec)?;
    let edges: Vec<(usize, usize, f64)> = fb
        .support_edges
        .iter()
        .map(|&(m, w)| {
            (
                spec.node(Side::Men, m),
                spec.node(Side::Women, w),
                fb.rho[m][w] * fb.beta[m][w],
            )
        })
        .collect();
    let forest_weight = edges.iter().map(|e| e.2).sum();
    let stars = forest_to_stars(spec.n_types(), &edges)?;
    let star_weight = stars.iter().map(|s| s.weight()).sum();

    let mut solutions = Vec::with_capacity(stars.len());
    let mut flows = PairFlow::zeros(spec.n_men(), spec.n_women());
    for s in &stars {
        let (side, center) = spec.node_type(s.center);
        let candidates: Vec<(usize, f64)> = s
            .leaves
            .iter()
            .map(|&leaf| {
                let (_, j) = spec.node_type(leaf);
                let rho = match side {
                    Side::Men => fb.rho[center][j],
                    Side::Women => fb.rho[j][center],
                };
                (j, rho)
            })
            .collect();
        let star = StarMarket::new(spec, side, center, &candidates);
        let sol = solve_star(spec, star)?;
        for (i, &g) in sol.gamma.iter().enumerate() {
            let (m, w) = flow_to_pair(&sol.star, i);
            flows.gamma[m][w] = g;
        }
        solutions.push(sol);
    }

    let (assortments, outcome) = assortments_from_flows(spec, &flows)?;
    let feasibility = check_feasibility(spec, &assortments, &outcome);
    let raw = if fb.objective > 0.0 {
        outcome.welfare / fb.objective
    } else {
        1.0
    };
    if raw > 1.0 + RATIO_SLACK {
        tracing::warn!(ratio = raw, "design exceeds first best; clamping");
    }
    let ratio = raw.min(1.0 + RATIO_SLACK);
    if !feasibility.ok {
        return Err(Error::CertificateViolation(format!(
            "designed assortments are infeasible: {} off by {:e}",
            feasibility.worst_at.clone().unwrap_or_default(),
            feasibility.worst_violation
        )));
    }
    if ratio < CERTIFIED_RATIO - RATIO_SLACK {
        return Err(Error::CertificateViolation(format!(
            "design welfare {} is only {ratio} of first best {}",
            outcome.welfare, fb.objective
        )));
    }
    Ok(DesignedSolution {
        assortments,
        outcome,
        fb_objective: fb.objective,
        ratio,
        stars: solutions,
        feasibility,
        forest_weight,
        star_weight,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{solve_rho, UtilityDist, DEFAULT_NOISE_WIDTH};
    use crate::equilibrium::solve_equilibrium;
    use crate::market::{gen_gap_example, gen_horizontal, gen_star, TypeInfo};
    use approx::assert_abs_diff_eq;
    use num_rational::Ratio;
    use proptest::prelude::*;

    #[test]
    fn stars_of_small_forests() {
        let one = forest_to_stars(2, &[(0, 1, 7u64)]).unwrap();
        assert_eq!(one, vec![StarEdges { center: 0, leaves: vec![1], weights: vec![7] }]);

        let path = forest_to_stars(3, &[(0, 1, 2u64), (1, 2, 3u64)]).unwrap();
        assert_eq!(path.len(), 1);
        assert_eq!(path[0].center, 1);
        assert_eq!(path[0].leaves, vec![2]);
        assert!(2 * path[0].weight() >= 5);

        let star: Vec<(usize, usize, u64)> = (1..6).map(|i| (0, i, i as u64)).collect();
        let out = forest_to_stars(6, &star).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].center, 0);
        assert_eq!(out[0].weight(), 15);

        assert!(forest_to_stars(3, &[(0, 1, 1u64), (1, 2, 1), (2, 0, 1)]).is_err());
    }

    #[test]
    fn leaf_threshold_examples() {
        let u = UtilityDist::uniform(0.0, 1.0);
        let rho = solve_rho(&u, 1.0).unwrap().rho;
        // Saturated: β = α.
        let g = 1.0 / (1.0 + 1.0 - rho);
        assert_abs_diff_eq!(idealized_leaf_threshold(g, 1.0, &u).unwrap(), rho, epsilon = 1e-11);
        assert_eq!(idealized_leaf_threshold(0.0, 1.0, &u).unwrap(), 0.0);
        // Half-filled last leaf, against a grid oracle.
        let g = 0.5 / (2.0 - rho);
        let th = idealized_leaf_threshold(g, 1.0, &u).unwrap();
        assert!(th < rho);
        let resid = |t: f64| t - g * (1.0 - t * t) / 2.0;
        let grid = (0..=1_000_000)
            .map(|k| k as f64 / 1_000_000.0)
            .min_by(|a, b| resid(*a).abs().total_cmp(&resid(*b).abs()))
            .unwrap();
        assert!((grid - th).abs() <= 2e-6);
    }

    #[test]
    fn center_threshold_examples() {
        let u = UtilityDist::uniform(0.0, 1.0);
        let spec = gen_star(1.0, 1.0, &[(1.0, u.clone())]).unwrap();
        let rho = solve_rho(&u, 1.0).unwrap().rho;
        let star = StarMarket::new(&spec, Side::Men, 0, &[(0, rho)]);
        let g = [1.0 / (2.0 - rho)];
        let c = idealized_center_threshold(&spec, &star, &g, &[rho]).unwrap();
        assert_abs_diff_eq!(c, rho, epsilon = 1e-11);
        assert_eq!(idealized_center_threshold(&spec, &star, &[0.0], &[rho]).unwrap(), 0.0);

        // Two identical half leaves behave like one merged leaf.
        let two = gen_star(1.0, 1.0, &[(0.5, u.clone()), (0.5, u.clone())]).unwrap();
        let star2 = StarMarket::new(&two, Side::Men, 0, &[(0, rho), (1, rho)]);
        let g2 = [0.5 / (2.0 - rho), 0.5 / (2.0 - rho)];
        let c2 = idealized_center_threshold(&two, &star2, &g2, &[rho, rho]).unwrap();
        assert_abs_diff_eq!(c2, c, epsilon = 1e-11);
    }

    #[test]
    fn single_leaf_star_matches_first_best() {
        let spec = gen_star(1.0, 1.0, &[(1.0, UtilityDist::uniform(0.0, 1.0))]).unwrap();
        let d = design_search(&spec).unwrap();
        assert_abs_diff_eq!(d.ratio, 1.0, epsilon = 1e-9);
        assert_eq!(d.stars.len(), 1);
        assert_abs_diff_eq!(d.stars[0].welfare, d.stars[0].fb_welfare, epsilon = 1e-9);
    }

    #[test]
    fn horizontal_design_is_first_best() {
        let spec = gen_horizontal(4, 1.0, UtilityDist::normal(8.0, 0.1), DEFAULT_NOISE_WIDTH).unwrap();
        let d = design_search(&spec).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(d.assortments.men[i][i], 1.0, epsilon = 1e-9);
            for j in 0..4 {
                if i != j {
                    assert_eq!(d.assortments.men[i][j], 0.0);
                }
            }
        }
        assert_abs_diff_eq!(d.ratio, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn gap_example_star() {
        let spec = gen_gap_example(0.3, 1e-6).unwrap();
        let d = design_search(&spec).unwrap();
        let e = 0.1;
        assert_abs_diff_eq!(d.fb_objective, (4.0 - e) / (1.0 + e), epsilon = 1e-6);
        assert!(d.ratio >= 0.25);
        let s = &d.stars[0];
        assert!(s.welfare >= 0.5 * s.fb_welfare - 1e-9);
        assert!(d.outcome.welfare <= 2.0 + 0.05);
    }

    fn random_market(seed: u64, max_side: usize) -> MarketSpec {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let nm = rng.random_range(1..=max_side);
        let nw = rng.random_range(1..=max_side);
        let men = (0..nm).map(|i| TypeInfo::new(format!("m{i}"), rng.random_range(0.2..3.0))).collect();
        let women = (0..nw).map(|i| TypeInfo::new(format!("w{i}"), rng.random_range(0.2..3.0))).collect();
        let dist = (0..nm)
            .map(|_| {
                (0..nw)
                    .map(|_| match rng.random_range(0..3) {
                        0 => UtilityDist::normal(rng.random_range(-1.0..6.0), rng.random_range(0.1..2.0)),
                        1 => {
                            let lo = rng.random_range(-1.0..3.0);
                            UtilityDist::uniform(lo, lo + rng.random_range(0.2..5.0))
                        }
                        _ => UtilityDist::point_mass(rng.random_range(0.0..8.0), 1e-3),
                    })
                    .collect()
            })
            .collect();
        MarketSpec::new(rng.random_range(0.05..3.0), men, women, dist).unwrap()
    }

    fn check_star_bounds(s: &StarSolution) -> std::result::Result<(), String> {
        if s.welfare < 0.5 * s.fb_welfare - 1e-9 * s.fb_welfare.max(1.0) {
            return Err(format!("star welfare {} < half of {}", s.welfare, s.fb_welfare));
        }
        let kept: Vec<usize> = match s.case_taken {
            StarCase::Case1 => (0..s.star.leaves.len()).collect(),
            StarCase::Case2a => (0..s.star.leaves.len().saturating_sub(1)).collect(),
            StarCase::Case2b => vec![],
        };
        for i in kept {
            let tol = 1e-8 * s.leaf_hat[i].max(1.0);
            if s.eq_leaf_thresholds[i] > s.leaf_hat[i] + tol {
                return Err(format!("leaf {i} plays above its idealized threshold"));
            }
            if s.eq_center_threshold.max(s.eq_leaf_thresholds[i]) < s.leaf_hat[i] - tol {
                return Err(format!("pair threshold of leaf {i} below the idealized one"));
            }
        }
        Ok(())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn retention_is_exact(n in 2usize..40, seed in 0u64..u64::MAX) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut edges = Vec::new();
            for v in 1..n {
                if rng.random_bool(0.85) {
                    let p = rng.random_range(0..v);
                    edges.push((p, v, Ratio::new(rng.random_range(1i128..1000), rng.random_range(1i128..50))));
                }
            }
            let total = edges.iter().fold(Ratio::from_integer(0), |a, e| a + e.2);
            let stars = forest_to_stars(n, &edges).unwrap();
            let kept = stars.iter().fold(Ratio::from_integer(0), |a, s| a + s.weight());
            prop_assert!(kept * 2 >= total);
            let mut used = vec![false; n];
            for s in &stars {
                for &v in std::iter::once(&s.center).chain(&s.leaves) {
                    prop_assert!(!used[v], "stars share node {}", v);
                    used[v] = true;
                }
            }
        }

        #[test]
        fn design_certificate(seed in 0u64..u64::MAX) {
            let spec = random_market(seed, 3);
            let d = design_search(&spec).unwrap();
            prop_assert!(d.ratio >= 0.25 - 1e-9 && d.ratio <= 1.0 + 1e-9);
            prop_assert!(d.feasibility.ok);
            prop_assert!(2.0 * d.star_weight >= d.forest_weight * (1.0 - 1e-12));
            for s in &d.stars {
                check_star_bounds(s).map_err(TestCaseError::fail)?;
            }
            // A fresh solve of the emitted assortments lands on the same thresholds.
            let again = solve_equilibrium(&spec, &d.assortments).unwrap();
            for k in 0..spec.n_types() {
                prop_assert!((again.thresholds[k] - d.outcome.thresholds[k]).abs()
                    <= 1e-6 * again.thresholds[k].max(1.0));
            }
            prop_assert!(d.outcome.welfare <= d.fb_objective + 1e-6 * d.fb_objective.max(1.0));
        }
    }
}
