//! Reduction from MAX3LIN2 to a matching market, and the welfare bounds that
//! separate nearly satisfiable instances from barely satisfiable ones.

use std::path::Path;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{FromPrimitive, One, ToPrimitive, Zero};
use serde::Serialize;

use crate::dist::UtilityDist;
use crate::equilibrium::{assortments_from_flows, EquilibriumOutcome};
use crate::error::{Error, Result};
use crate::market::{AssortmentSet, MarketSpec, PairFlow, TypeInfo};

/// Satisfying bit patterns before the right-hand side is XORed in.
pub const PATTERNS: [[u8; 3]; 4] = [[0, 0, 0], [0, 1, 1], [1, 0, 1], [1, 1, 0]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Equation {
    /// Zero-based variable indices.
    pub vars: [usize; 3],
    pub rhs: u8,
}

impl Equation {
    pub fn satisfied_by(&self, assignment: &[u8]) -> bool {
        self.vars.iter().fold(0, |acc, &v| acc ^ assignment[v]) == self.rhs
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Lin2Instance {
    pub n: usize,
    pub equations: Vec<Equation>,
}

impl Lin2Instance {
    pub fn new(n: usize, equations: Vec<Equation>) -> Result<Self> {
        let inst = Lin2Instance { n, equations };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        if self.equations.is_empty() {
            return Err(Error::validation("instance has no equations"));
        }
        for (l, e) in self.equations.iter().enumerate() {
            let [i, j, k] = e.vars;
            if i == j || j == k || i == k {
                return Err(Error::validation(format!(
                    "equation {} repeats a variable",
                    l + 1
                )));
            }
            if let Some(&v) = e.vars.iter().find(|&&v| v >= self.n) {
                return Err(Error::validation(format!(
                    "equation {} uses variable {} but n = {}",
                    l + 1,
                    v + 1,
                    self.n
                )));
            }
            if e.rhs > 1 {
                return Err(Error::validation(format!("equation {} has a non-bit right side", l + 1)));
            }
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.equations.len()
    }

    /// Number of equations containing each variable.
    pub fn occurrences(&self) -> Vec<usize> {
        let mut occ = vec![0; self.n];
        for e in &self.equations {
            for &v in &e.vars {
                occ[v] += 1;
            }
        }
        occ
    }

    /// Value variable `v` takes under pattern `p` of equation `l`, or `None`
    /// if `v` is not in the equation.
    pub fn pattern_bit(&self, l: usize, p: usize, v: usize) -> Option<u8> {
        let e = &self.equations[l];
        e.vars
            .iter()
            .position(|&x| x == v)
            .map(|pos| PATTERNS[p][pos] ^ e.rhs)
    }

    pub fn satisfied(&self, assignment: &[u8]) -> usize {
        self.equations.iter().filter(|e| e.satisfied_by(assignment)).count()
    }
}

/// Parse one equation per line as `i j k b` with one-based indices. Blank
/// lines and `#` comments are skipped; `n` is the largest index seen.
pub fn parse_instance(text: &str) -> Result<Lin2Instance> {
    let mut equations = Vec::new();
    let mut n = 0;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |msg: &str| Error::Schema {
            path: format!("line {}", lineno + 1),
            message: msg.to_string(),
        };
        if fields.len() != 4 {
            return Err(bad("expected four fields `i j k b`"));
        }
        let mut nums = [0usize; 4];
        for (slot, f) in nums.iter_mut().zip(&fields) {
            *slot = f.parse().map_err(|_| bad(&format!("not a non-negative integer: {f}")))?;
        }
        let [i, j, k, b] = nums;
        if i == 0 || j == 0 || k == 0 {
            return Err(bad("variable indices start at 1"));
        }
        if b > 1 {
            return Err(bad("right-hand side must be 0 or 1"));
        }
        n = n.max(i).max(j).max(k);
        equations.push(Equation {
            vars: [i - 1, j - 1, k - 1],
            rhs: b as u8,
        });
    }
    Lin2Instance::new(n, equations)
}

pub fn load_instance(path: &Path) -> Result<Lin2Instance> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_instance(&text)
}

#[derive(Debug, Clone)]
pub struct ReductionMarket {
    pub spec: MarketSpec,
    pub instance: Lin2Instance,
    /// Men index of `x_{i,b}`.
    pub var_type: Vec<[usize; 2]>,
    /// Women index of `s_i`.
    pub switch_type: Vec<usize>,
    /// Women index of the equation type for each pattern in [`PATTERNS`] order.
    pub eq_type: Vec<[usize; 4]>,
}

impl ReductionMarket {
    pub fn pattern_bit(&self, l: usize, p: usize, v: usize) -> Option<u8> {
        self.instance.pattern_bit(l, p, v)
    }
}

pub fn switch_payoff(delta: f64) -> f64 {
    2.0 * (1.0 + 2.0 * delta)
}

pub fn reduce(instance: &Lin2Instance, delta: f64, noise: f64) -> Result<ReductionMarket> {
    instance.validate()?;
    let occ = instance.occurrences();
    if let Some(v) = occ.iter().position(|&c| c == 0) {
        // Its two variable types and switch type would have no arrivals.
        return Err(Error::validation(format!("variable {} appears in no equation", v + 1)));
    }
    let n = instance.n;
    let mut men = Vec::with_capacity(2 * n);
    let mut var_type = Vec::with_capacity(n);
    for (i, &mi) in occ.iter().enumerate() {
        var_type.push([men.len(), men.len() + 1]);
        for b in 0..2 {
            men.push(TypeInfo::new(format!("x{}_{}", i + 1, b), 4.0 * mi as f64));
        }
    }
    let mut women = Vec::with_capacity(n + 4 * instance.m());
    let mut switch_type = Vec::with_capacity(n);
    for (i, &mi) in occ.iter().enumerate() {
        switch_type.push(women.len());
        women.push(TypeInfo::new(format!("s{}", i + 1), 4.0 * mi as f64));
    }
    let mut eq_type = Vec::with_capacity(instance.m());
    for l in 0..instance.m() {
        let mut idx = [0; 4];
        for (p, pat) in PATTERNS.iter().enumerate() {
            idx[p] = women.len();
            women.push(TypeInfo::new(
                format!("e{}_{}{}{}", l + 1, pat[0], pat[1], pat[2]),
                3.0,
            ));
        }
        eq_type.push(idx);
    }
    let zero = UtilityDist::point_mass(0.0, noise);
    let mut dist = vec![vec![zero; women.len()]; men.len()];
    for i in 0..n {
        for b in 0..2u8 {
            let x = var_type[i][b as usize];
            dist[x][switch_type[i]] = UtilityDist::point_mass(switch_payoff(delta), noise);
            for (l, types) in eq_type.iter().enumerate() {
                for (p, &w) in types.iter().enumerate() {
                    if instance.pattern_bit(l, p, i) == Some(b) {
                        dist[x][w] = UtilityDist::point_mass(1.0, noise);
                    }
                }
            }
        }
    }
    Ok(ReductionMarket {
        spec: MarketSpec::new(delta, men, women, dist)?,
        instance: instance.clone(),
        var_type,
        switch_type,
        eq_type,
    })
}

#[derive(Debug, Clone)]
pub struct AssignmentWelfare {
    /// Closed-form welfare, one side's payoff counted once.
    pub welfare: f64,
    /// Same value accumulated pair by pair over the construction in exact
    /// arithmetic, with `δ` taken as its exact binary value.
    pub exact: BigRational,
    pub satisfied: usize,
    /// Meeting flows of the construction.
    pub flows: PairFlow,
    pub assortments: AssortmentSet,
    /// Equilibrium of the construction; its welfare counts both sides.
    pub outcome: EquilibriumOutcome,
}

fn rational(x: f64) -> BigRational {
    BigRational::from_f64(x).expect("finite value")
}

/// Closed formula `2(1+2δ)/(1+δ)·Σ 4 m_i + 12/(1+δ)·(#satisfied)` in exact
/// arithmetic.
pub fn complete_formula(instance: &Lin2Instance, delta: &BigRational, satisfied: usize) -> BigRational {
    let one = BigRational::one();
    let two = BigRational::from_integer(BigInt::from(2));
    let total_occ: usize = instance.occurrences().iter().sum();
    let switch = &two * (&one + &two * delta) / (&one + delta)
        * BigRational::from_integer(BigInt::from(4 * total_occ));
    let eq = BigRational::from_integer(BigInt::from(12 * satisfied)) / (&one + delta);
    switch + eq
}

/// Welfare of the construction that follows `assignment`: every `s_i` is
/// matched with `x_{i, a_i ⊕ 1}`, and every satisfied equation fills all four
/// of its types from the variable types `x_{i, a_i}`.
pub fn assignment_welfare(red: &ReductionMarket, assignment: &[u8]) -> Result<AssignmentWelfare> {
    let inst = &red.instance;
    if assignment.len() != inst.n || assignment.iter().any(|&b| b > 1) {
        return Err(Error::validation(format!(
            "assignment must be {} bits",
            inst.n
        )));
    }
    let occ = inst.occurrences();
    let spec = &red.spec;
    let delta = spec.delta;
    let delta_q = rational(delta);
    let one = BigRational::one();
    let switch_q = BigRational::from_integer(BigInt::from(2)) * (&one + BigRational::from_integer(BigInt::from(2)) * &delta_q);

    // beta: accepted flow scaled by (1 + δ), i.e. arrivals consumed.
    let mut beta = vec![vec![0u64; spec.n_women()]; spec.n_men()];
    let mut exact = BigRational::zero();
    for i in 0..inst.n {
        let x = red.var_type[i][(assignment[i] ^ 1) as usize];
        let b = 4 * occ[i] as u64;
        beta[x][red.switch_type[i]] = b;
        exact += &switch_q * BigRational::from_integer(BigInt::from(b));
    }
    let mut satisfied = 0;
    for (l, e) in inst.equations.iter().enumerate() {
        if !e.satisfied_by(assignment) {
            continue;
        }
        satisfied += 1;
        let local = e.vars.map(|v| assignment[v] ^ e.rhs);
        let full = PATTERNS.iter().position(|p| *p == local).expect("satisfying pattern");
        for (pos, &v) in e.vars.iter().enumerate() {
            let x = red.var_type[v][assignment[v] as usize];
            beta[x][red.eq_type[l][full]] += 1;
            // The one other pattern that agrees with the assignment only here.
            let lone = (0..4)
                .find(|&p| p != full && PATTERNS[p][pos] == local[pos])
                .expect("pattern agreeing in one place");
            beta[x][red.eq_type[l][lone]] += 3;
            exact += BigRational::from_integer(BigInt::from(4));
        }
    }
    exact /= &one + &delta_q;

    let mut flows = PairFlow::zeros(spec.n_men(), spec.n_women());
    for (row, brow) in flows.gamma.iter_mut().zip(&beta) {
        for (g, &b) in row.iter_mut().zip(brow) {
            *g = b as f64 / (1.0 + delta);
        }
    }
    let (assortments, outcome) = assortments_from_flows(spec, &flows)?;
    let welfare = complete_formula(inst, &delta_q, satisfied)
        .to_f64()
        .unwrap_or(f64::NAN);
    Ok(AssignmentWelfare {
        welfare,
        exact,
        satisfied,
        flows,
        assortments,
        outcome,
    })
}

/// Lower bound on the optimum when at least `(1−ε)m` equations can be satisfied.
pub fn completeness_bound(m: usize, delta: f64, eps: f64) -> f64 {
    (36.0 + 48.0 * delta - 12.0 * eps) * m as f64 / (1.0 + delta)
}

/// Upper bound on the optimum when at most `(½+ε)m` equations can be satisfied.
pub fn soundness_bound(m: usize, delta: f64, eps: f64) -> f64 {
    (34.5 + 48.0 * delta + 3.0 * eps) * m as f64 / (1.0 + delta)
}

/// Upper bound from an explicit satisfiable count: satisfied equations are
/// worth at most 12 and the rest at most 9, on top of the switch payoff.
pub fn soundness_bound_for_count(m: usize, satisfiable: usize, delta: f64) -> f64 {
    let m_f = m as f64;
    let s = satisfiable.min(m) as f64;
    (12.0 * m_f * switch_payoff(delta) + 9.0 * (m_f - s) + 12.0 * s) / (1.0 + delta)
}

/// Completeness over soundness, the inapproximability factor.
pub fn gap_ratio(delta: f64, eps: f64) -> f64 {
    completeness_bound(1, delta, eps) / soundness_bound(1, delta, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::check_feasibility;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn one_eq(rhs: u8) -> Lin2Instance {
        Lin2Instance::new(3, vec![Equation { vars: [0, 1, 2], rhs }]).unwrap()
    }

    pub(crate) fn random_instance(rng: &mut impl Rng, max_n: usize, max_m: usize) -> Lin2Instance {
        let n = rng.random_range(3..=max_n);
        let m = rng.random_range(1..=max_m);
        let equations = (0..m)
            .map(|_| {
                let mut vars = [0; 3];
                let mut k = 0;
                while k < 3 {
                    let v = rng.random_range(0..n);
                    if !vars[..k].contains(&v) {
                        vars[k] = v;
                        k += 1;
                    }
                }
                Equation { vars, rhs: rng.random_range(0..2) }
            })
            .collect::<Vec<Equation>>();
        // Renumber so every variable occurs.
        let mut used: Vec<usize> = equations.iter().flat_map(|e| e.vars).collect();
        used.sort_unstable();
        used.dedup();
        let equations = equations
            .into_iter()
            .map(|e| Equation {
                vars: e.vars.map(|v| used.binary_search(&v).unwrap()),
                rhs: e.rhs,
            })
            .collect();
        Lin2Instance::new(used.len(), equations).unwrap()
    }

    fn bits(mask: usize, n: usize) -> Vec<u8> {
        (0..n).map(|i| ((mask >> i) & 1) as u8).collect()
    }

    #[test]
    fn single_equation_types() {
        let red = reduce(&one_eq(0), 0.01, 1e-6).unwrap();
        assert_eq!(red.spec.n_men(), 6);
        assert_eq!(red.spec.n_women(), 3 + 4);
        let labels: Vec<_> = red.eq_type[0]
            .iter()
            .map(|&w| red.spec.women[w].label.clone())
            .collect();
        assert_eq!(labels, ["e1_000", "e1_011", "e1_101", "e1_110"]);
        assert_abs_diff_eq!(red.spec.pair_dist(crate::market::Side::Men, 0, 0).mean(), 2.04, epsilon = 1e-12);
        // Pattern 011 with b=0 wants x2 = 1, so x2_1 likes e1_011 and x2_0 does not.
        let x2_1 = red.var_type[1][1];
        let x2_0 = red.var_type[1][0];
        assert_eq!(red.spec.dist[x2_1][red.eq_type[0][1]].mean(), 1.0);
        assert_eq!(red.spec.dist[x2_0][red.eq_type[0][1]].mean(), 0.0);
    }

    #[test]
    fn patterns_xor_to_rhs() {
        for rhs in 0..2 {
            let red = reduce(&one_eq(rhs), 0.1, 1e-6).unwrap();
            for p in 0..4 {
                let a: Vec<u8> = (0..3).map(|v| red.pattern_bit(0, p, v).unwrap()).collect();
                assert!(red.instance.equations[0].satisfied_by(&a));
            }
        }
    }

    #[test]
    fn arrival_counts_occurrences() {
        let inst = Lin2Instance::new(
            4,
            vec![
                Equation { vars: [0, 1, 2], rhs: 0 },
                Equation { vars: [0, 2, 3], rhs: 1 },
            ],
        )
        .unwrap();
        let red = reduce(&inst, 0.01, 1e-6).unwrap();
        assert_eq!(red.spec.men[red.var_type[0][1]].arrival, 8.0);
        assert_eq!(red.spec.women[red.switch_type[0]].arrival, 8.0);
        assert_eq!(red.spec.women[red.switch_type[1]].arrival, 4.0);
        assert_eq!(red.spec.women[red.eq_type[1][2]].arrival, 3.0);
    }

    #[test]
    fn welfare_examples() {
        for delta in [1e-3f64, 0.01, 0.5] {
            let red = reduce(&one_eq(1), delta, 1e-6).unwrap();
            let d = red.spec.delta;
            // 1 ⊕ 0 ⊕ 0 = 1 satisfies every equation.
            let full = assignment_welfare(&red, &[1, 0, 0]).unwrap();
            assert_eq!(full.satisfied, 1);
            assert_abs_diff_eq!(full.welfare, (36.0 + 48.0 * d) / (1.0 + d), epsilon = 1e-12);
            let none = assignment_welfare(&red, &[0, 0, 0]).unwrap();
            assert_abs_diff_eq!(none.welfare, 24.0 * (1.0 + 2.0 * d) / (1.0 + d), epsilon = 1e-12);
        }
        // Half of the equations satisfied: (30 + 48δ) m / (1 + δ) by hand.
        let inst = Lin2Instance::new(
            3,
            vec![
                Equation { vars: [0, 1, 2], rhs: 0 },
                Equation { vars: [0, 1, 2], rhs: 1 },
            ],
        )
        .unwrap();
        let red = reduce(&inst, 0.25, 1e-6).unwrap();
        let w = assignment_welfare(&red, &[0, 0, 0]).unwrap();
        assert_eq!(w.satisfied, 1);
        assert_abs_diff_eq!(w.welfare, (30.0 + 48.0 * 0.25) * 2.0 / 1.25, epsilon = 1e-12);
    }

    #[test]
    fn bound_examples() {
        assert_abs_diff_eq!(soundness_bound(1, 0.0, 0.0), 34.5);
        assert_abs_diff_eq!(soundness_bound(1, 1.0, 0.0), 82.5 / 2.0);
        assert_abs_diff_eq!(gap_ratio(0.0, 0.0), 24.0 / 23.0, epsilon = 1e-15);
        // Count form agrees with the ε form at m' = (½ + ε) m.
        assert_abs_diff_eq!(
            soundness_bound_for_count(8, 5, 0.1),
            soundness_bound(8, 0.1, 5.0 / 8.0 - 0.5),
            epsilon = 1e-12
        );
    }

    #[test]
    fn parse_examples() {
        let inst = parse_instance("# comment\n1 2 3 0\n\n2 3 4 1  # trailing\n").unwrap();
        assert_eq!(inst.n, 4);
        assert_eq!(inst.equations[1], Equation { vars: [1, 2, 3], rhs: 1 });
        assert!(matches!(parse_instance("1 2 0"), Err(Error::Schema { .. })));
        assert!(matches!(parse_instance("1 1 2 0"), Err(Error::Validation(_))));
        assert!(matches!(parse_instance("1 2 3 2"), Err(Error::Schema { .. })));
        assert!(parse_instance("").is_err());
        let gap = parse_instance("1 2 4 0").unwrap();
        assert!(matches!(reduce(&gap, 0.1, 1e-6), Err(Error::Validation(_))));
    }

    #[test]
    fn construction_is_feasible_equilibrium() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let inst = random_instance(&mut rng, 3, 3);
            let red = reduce(&inst, 0.05, 1e-6).unwrap();
            for mask in 0..1 << inst.n {
                let a = bits(mask, inst.n);
                let w = assignment_welfare(&red, &a).unwrap();
                let rep = check_feasibility(&red.spec, &w.assortments, &w.outcome);
                assert!(rep.ok, "{:?}", rep.worst_at);
                // Every accepted meeting carries its full payoff, counted on both sides.
                assert_abs_diff_eq!(w.outcome.welfare, 2.0 * w.welfare, epsilon = 1e-9 * w.welfare);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn exact_matches_formula(seed in 0u64..u64::MAX, delta in 1e-4f64..2.0) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let inst = random_instance(&mut rng, 6, 8);
            let red = reduce(&inst, delta, 1e-6).unwrap();
            let dq = rational(delta);
            for mask in 0..1 << inst.n {
                let a = bits(mask, inst.n);
                let w = assignment_welfare(&red, &a).unwrap();
                prop_assert_eq!(w.satisfied, inst.satisfied(&a));
                prop_assert_eq!(&w.exact, &complete_formula(&inst, &dq, w.satisfied));
                let eps = 1.0 - w.satisfied as f64 / inst.m() as f64;
                prop_assert!(w.welfare >= completeness_bound(inst.m(), delta, eps) * (1.0 - 1e-12));
            }
        }
    }
}
