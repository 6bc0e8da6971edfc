//! First-best relaxation: a transportation LP over pair capacities, solved by a
//! primal transportation simplex whose basis is a spanning tree, so the optimal
//! support is always a forest.

use serde::Serialize;

use crate::dist::solve_rho;
use crate::error::Result;
use crate::market::{MarketSpec, PairFlow};

/// Pair values below this are treated as worthless and never enter the LP.
pub const RHO_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Serialize)]
pub struct FirstBestSolution {
    pub beta: Vec<Vec<f64>>,
    pub rho: Vec<Vec<f64>>,
    pub objective: f64,
    pub support_edges: Vec<(usize, usize)>,
}

pub fn rho_matrix(spec: &MarketSpec) -> Result<Vec<Vec<f64>>> {
    spec.dist
        .iter()
        .map(|row| {
            row.iter()
                .map(|d| solve_rho(d, spec.delta).map(|r| r.rho))
                .collect()
        })
        .collect()
}

pub fn solve_first_best(spec: &MarketSpec) -> Result<FirstBestSolution> {
    let rho = rho_matrix(spec)?;
    let alpha_m: Vec<f64> = spec.men.iter().map(|t| t.arrival).collect();
    let alpha_w: Vec<f64> = spec.women.iter().map(|t| t.arrival).collect();
    Ok(solve_transport(&alpha_m, &alpha_w, &rho))
}

/// Maximizes `2 Σ ρ β` subject to row sums `≤ α_m` and column sums `≤ α_w`.
pub fn solve_transport(alpha_m: &[f64], alpha_w: &[f64], rho: &[Vec<f64>]) -> FirstBestSolution {
    let nm = alpha_m.len();
    let nw = alpha_w.len();
    let mut tp = Transport::new(alpha_m, alpha_w, rho);
    tp.optimize();
    let mut beta = vec![vec![0.0; nw]; nm];
    let mut support_edges = Vec::new();
    let mut objective = 0.0;
    for &(i, j) in &tp.basis {
        if i < nm && j < nw && tp.x[i][j] > 0.0 {
            beta[i][j] = tp.x[i][j];
        }
    }
    for i in 0..nm {
        for j in 0..nw {
            if beta[i][j] > 0.0 {
                support_edges.push((i, j));
                objective += 2.0 * rho[i][j] * beta[i][j];
            }
        }
    }
    FirstBestSolution {
        beta,
        rho: rho.to_vec(),
        objective,
        support_edges,
    }
}

/// `γ = β / (δ + S(ρ))` per pair, with the pairwise thresholds `ρ`.
pub fn first_best_to_flows(spec: &MarketSpec, fb: &FirstBestSolution) -> (PairFlow, Vec<Vec<f64>>) {
    let mut flows = PairFlow::zeros(spec.n_men(), spec.n_women());
    for (i, row) in fb.beta.iter().enumerate() {
        for (j, &b) in row.iter().enumerate() {
            if b > 0.0 {
                flows.gamma[i][j] = b / (spec.delta + spec.dist[i][j].survival(fb.rho[i][j]));
            }
        }
    }
    (flows, fb.rho.clone())
}

/// Balanced transportation tableau with a slack row and a slack column.
struct Transport {
    rows: usize,
    cols: usize,
    profit: Vec<Vec<Option<f64>>>,
    x: Vec<Vec<f64>>,
    basis: Vec<(usize, usize)>,
    tol: f64,
}

impl Transport {
    fn new(alpha_m: &[f64], alpha_w: &[f64], rho: &[Vec<f64>]) -> Self {
        let nm = alpha_m.len();
        let nw = alpha_w.len();
        let rows = nm + 1;
        let cols = nw + 1;
        let mut profit = vec![vec![Some(0.0); cols]; rows];
        let mut scale: f64 = 1.0;
        for i in 0..nm {
            for j in 0..nw {
                profit[i][j] = (rho[i][j] >= RHO_FLOOR).then_some(rho[i][j]);
                scale = scale.max(rho[i][j].abs());
            }
        }
        let mut x = vec![vec![0.0; cols]; rows];
        let mut basis = Vec::with_capacity(rows + cols - 1);
        for (i, &a) in alpha_m.iter().enumerate() {
            x[i][nw] = a;
            basis.push((i, nw));
        }
        for (j, &a) in alpha_w.iter().enumerate() {
            x[nm][j] = a;
            basis.push((nm, j));
        }
        basis.push((nm, nw));
        Transport {
            rows,
            cols,
            profit,
            x,
            basis,
            tol: 1e-12 * scale,
        }
    }

    fn potentials(&self) -> (Vec<f64>, Vec<f64>) {
        // Root u[last row] = 0 and walk the tree.
        let mut u = vec![f64::NAN; self.rows];
        let mut v = vec![f64::NAN; self.cols];
        u[self.rows - 1] = 0.0;
        let mut changed = true;
        while changed {
            changed = false;
            for &(i, j) in &self.basis {
                let c = self.profit[i][j].unwrap_or(0.0);
                if !u[i].is_nan() && v[j].is_nan() {
                    v[j] = c - u[i];
                    changed = true;
                } else if u[i].is_nan() && !v[j].is_nan() {
                    u[i] = c - v[j];
                    changed = true;
                }
            }
        }
        (u, v)
    }

    fn entering(&self) -> Option<(usize, usize)> {
        let (u, v) = self.potentials();
        for i in 0..self.rows {
            for j in 0..self.cols {
                if let Some(c) = self.profit[i][j] {
                    if self.basis.contains(&(i, j)) {
                        continue;
                    }
                    if c - u[i] - v[j] > self.tol {
                        return Some((i, j));
                    }
                }
            }
        }
        None
    }

    /// Tree path from column `j` back to row `i`, as basic cells in order.
    fn path(&self, i: usize, j: usize) -> Vec<(usize, usize)> {
        // Nodes: rows 0..rows, columns rows..rows+cols.
        let n = self.rows + self.cols;
        let mut prev: Vec<Option<(usize, (usize, usize))>> = vec![None; n];
        let start = self.rows + j;
        let target = i;
        let mut seen = vec![false; n];
        seen[start] = true;
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(node) = queue.pop_front() {
            if node == target {
                break;
            }
            for &(r, c) in &self.basis {
                let (a, b) = (r, self.rows + c);
                let next = if a == node {
                    b
                } else if b == node {
                    a
                } else {
                    continue;
                };
                if !seen[next] {
                    seen[next] = true;
                    prev[next] = Some((node, (r, c)));
                    queue.push_back(next);
                }
            }
        }
        let mut out = Vec::new();
        let mut node = target;
        while node != start {
            let (p, cell) = prev[node].expect("basis is a spanning tree");
            out.push(cell);
            node = p;
        }
        out.reverse();
        out
    }

    fn optimize(&mut self) {
        let max_pivots = 50 * (self.rows * self.cols + 10);
        for _ in 0..max_pivots {
            let Some((i, j)) = self.entering() else {
                return;
            };
            let path = self.path(i, j);
            // Cells on the path alternate −, +, −, … starting next to column j.
            let minus: Vec<(usize, usize)> = path.iter().copied().step_by(2).collect();
            let plus: Vec<(usize, usize)> = path.iter().copied().skip(1).step_by(2).collect();
            let leave = *minus
                .iter()
                .min_by(|a, b| {
                    self.x[a.0][a.1]
                        .total_cmp(&self.x[b.0][b.1])
                        .then((a.0 * self.cols + a.1).cmp(&(b.0 * self.cols + b.1)))
                })
                .expect("cycle has a decreasing cell");
            let theta = self.x[leave.0][leave.1].max(0.0);
            self.x[i][j] += theta;
            for &(r, c) in &plus {
                self.x[r][c] += theta;
            }
            for &(r, c) in &minus {
                self.x[r][c] = (self.x[r][c] - theta).max(0.0);
            }
            self.x[leave.0][leave.1] = 0.0;
            let pos = self.basis.iter().position(|&e| e == leave).expect("leaving cell is basic");
            self.basis[pos] = (i, j);
        }
        tracing::warn!("transportation simplex hit its pivot budget");
    }
}

/// Brute-force references for tiny instances.
pub mod oracle {
    use super::FirstBestSolution;

    /// Maximum of `2 Σ ρ β` over all vertices of the capacity polytope, found by
    /// enumerating every choice of tight constraints. Intended for ≤ 3×3.
    pub fn first_best_oracle(alpha_m: &[f64], alpha_w: &[f64], rho: &[Vec<f64>]) -> f64 {
        let nm = alpha_m.len();
        let nw = alpha_w.len();
        let k = nm * nw;
        // Constraint rows a·β ≤ b: rows, columns, then −β ≤ 0.
        let mut cons: Vec<(Vec<f64>, f64)> = Vec::new();
        for i in 0..nm {
            let mut a = vec![0.0; k];
            for j in 0..nw {
                a[i * nw + j] = 1.0;
            }
            cons.push((a, alpha_m[i]));
        }
        for j in 0..nw {
            let mut a = vec![0.0; k];
            for i in 0..nm {
                a[i * nw + j] = 1.0;
            }
            cons.push((a, alpha_w[j]));
        }
        for v in 0..k {
            let mut a = vec![0.0; k];
            a[v] = -1.0;
            cons.push((a, 0.0));
        }
        let mut best = 0.0f64;
        let mut chosen = Vec::with_capacity(k);
        enumerate(&cons, k, 0, &mut chosen, &mut |sel| {
            if let Some(x) = solve_square(&cons, sel, k) {
                let feasible = cons.iter().all(|(a, b)| {
                    a.iter().zip(&x).map(|(p, q)| p * q).sum::<f64>() <= b + 1e-9
                });
                if feasible {
                    let obj: f64 = (0..k).map(|v| 2.0 * rho[v / nw][v % nw] * x[v]).sum();
                    best = best.max(obj);
                }
            }
        });
        best
    }

    fn enumerate<F: FnMut(&[usize])>(
        cons: &[(Vec<f64>, f64)],
        k: usize,
        start: usize,
        chosen: &mut Vec<usize>,
        f: &mut F,
    ) {
        if chosen.len() == k {
            f(chosen);
            return;
        }
        for c in start..cons.len() {
            if cons.len() - c < k - chosen.len() {
                break;
            }
            chosen.push(c);
            enumerate(cons, k, c + 1, chosen, f);
            chosen.pop();
        }
    }

    fn solve_square(cons: &[(Vec<f64>, f64)], sel: &[usize], k: usize) -> Option<Vec<f64>> {
        let mut m: Vec<Vec<f64>> = sel
            .iter()
            .map(|&c| {
                let mut row = cons[c].0.clone();
                row.push(cons[c].1);
                row
            })
            .collect();
        for col in 0..k {
            let piv = (col..k).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
            if m[piv][col].abs() < 1e-12 {
                return None;
            }
            m.swap(col, piv);
            for r in 0..k {
                if r != col {
                    let f = m[r][col] / m[col][col];
                    if f != 0.0 {
                        for c in col..=k {
                            m[r][c] -= f * m[col][c];
                        }
                    }
                }
            }
        }
        Some((0..k).map(|r| m[r][k] / m[r][r]).collect())
    }

    /// True iff `edges` (man, woman) contain no cycle.
    pub fn is_forest(n_men: usize, n_women: usize, edges: &[(usize, usize)]) -> bool {
        let mut parent: Vec<usize> = (0..n_men + n_women).collect();
        fn find(p: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            let mut y = x;
            while p[y] != r {
                let next = p[y];
                p[y] = r;
                y = next;
            }
            r
        }
        for &(m, w) in edges {
            let a = find(&mut parent, m);
            let b = find(&mut parent, n_men + w);
            if a == b {
                return false;
            }
            parent[a] = b;
        }
        true
    }

    /// Checks the capacity constraints and the reported objective of a solution.
    pub fn audit(fb: &FirstBestSolution, alpha_m: &[f64], alpha_w: &[f64]) -> Result<(), String> {
        for (i, row) in fb.beta.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if s > alpha_m[i] + 1e-9 * alpha_m[i].max(1.0) {
                return Err(format!("row {i} uses {s} > {}", alpha_m[i]));
            }
            if row.iter().any(|&b| b < 0.0) {
                return Err(format!("row {i} has a negative entry"));
            }
        }
        for (j, &a) in alpha_w.iter().enumerate() {
            let s: f64 = fb.beta.iter().map(|r| r[j]).sum();
            if s > a + 1e-9 * a.max(1.0) {
                return Err(format!("column {j} uses {s} > {a}"));
            }
        }
        let obj: f64 = fb
            .beta
            .iter()
            .zip(&fb.rho)
            .flat_map(|(b, r)| b.iter().zip(r).map(|(x, y)| 2.0 * x * y))
            .sum();
        if (obj - fb.objective).abs() > 1e-9 * obj.abs().max(1.0) {
            return Err(format!("objective {} disagrees with 2Σρβ = {obj}", fb.objective));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::oracle::*;
    use super::*;
    use crate::dist::UtilityDist;
    use crate::market::{gen_star, TypeInfo};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn diagonal_2x2() {
        let fb = solve_transport(&[1.0, 1.0], &[1.0, 1.0], &[vec![2.0, 1.0], vec![1.0, 2.0]]);
        assert_abs_diff_eq!(fb.objective, 8.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fb.beta[0][0], 1.0);
        assert_abs_diff_eq!(fb.beta[1][1], 1.0);
        assert_eq!(fb.support_edges, vec![(0, 0), (1, 1)]);
        assert_abs_diff_eq!(
            first_best_oracle(&[1.0, 1.0], &[1.0, 1.0], &[vec![2.0, 1.0], vec![1.0, 2.0]]),
            8.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn star_knapsack() {
        let fb = solve_transport(&[2.0], &[1.5, 1.0], &[vec![3.0, 1.0]]);
        assert_abs_diff_eq!(fb.beta[0][0], 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(fb.beta[0][1], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(fb.objective, 10.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_values() {
        let fb = solve_transport(&[1.0, 2.0], &[1.0], &[vec![0.0], vec![0.0]]);
        assert_eq!(fb.objective, 0.0);
        assert!(fb.support_edges.is_empty());
        assert_eq!(first_best_oracle(&[1.0, 2.0], &[1.0], &[vec![0.0], vec![0.0]]), 0.0);
        assert_abs_diff_eq!(first_best_oracle(&[0.7], &[2.0], &[vec![1.5]]), 2.1, epsilon = 1e-12);
    }

    #[test]
    fn flows_examples() {
        let spec = gen_star(0.25, 1.0, &[(1.0, UtilityDist::point_mass(5.0, 1e-6))]).unwrap();
        let fb = solve_first_best(&spec).unwrap();
        assert_abs_diff_eq!(fb.rho[0][0], 4.0, epsilon = 1e-9);
        let (flows, th) = first_best_to_flows(&spec, &fb);
        assert_abs_diff_eq!(flows.gamma[0][0], 0.8, epsilon = 1e-12);
        assert_eq!(th[0][0], fb.rho[0][0]);

        let spec = MarketSpec::new(
            1.0,
            vec![TypeInfo::new("m1", 1.0)],
            vec![TypeInfo::new("w1", 1.0), TypeInfo::new("w2", 1.0)],
            vec![vec![UtilityDist::uniform(0.0, 1.0), UtilityDist::uniform(-2.0, -1.0)]],
        )
        .unwrap();
        let fb = solve_first_best(&spec).unwrap();
        let (flows, _) = first_best_to_flows(&spec, &fb);
        assert_abs_diff_eq!(flows.gamma[0][0], 1.0 / 3f64.sqrt(), epsilon = 1e-11);
        assert_eq!(flows.gamma[0][1], 0.0);
    }

    #[test]
    fn forest_check() {
        assert!(is_forest(2, 2, &[(0, 0), (0, 1), (1, 1)]));
        assert!(!is_forest(2, 2, &[(0, 0), (0, 1), (1, 1), (1, 0)]));
    }

    fn arb_instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
        (1usize..=3, 1usize..=3).prop_flat_map(|(nm, nw)| {
            (
                prop::collection::vec(0.1..3.0f64, nm),
                prop::collection::vec(0.1..3.0f64, nw),
                prop::collection::vec(
                    prop::collection::vec(prop_oneof![1 => Just(0.0), 1 => Just(1.0), 4 => 0.0..5.0f64], nw),
                    nm,
                ),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn matches_vertex_oracle((am, aw, rho) in arb_instance()) {
            let fb = solve_transport(&am, &aw, &rho);
            audit(&fb, &am, &aw).map_err(TestCaseError::fail)?;
            prop_assert!(is_forest(am.len(), aw.len(), &fb.support_edges));
            let best = first_best_oracle(&am, &aw, &rho);
            prop_assert!((fb.objective - best).abs() <= 1e-6 * best.max(1.0),
                "simplex {} vs oracle {}", fb.objective, best);
        }

        #[test]
        fn monotone_in_arrivals((am, aw, rho) in arb_instance(), bump in 0.0..2.0f64, pick in 0usize..6) {
            let base = solve_transport(&am, &aw, &rho).objective;
            let (mut am2, mut aw2) = (am.clone(), aw.clone());
            if pick % 2 == 0 {
                let k = pick / 2 % am2.len();
                am2[k] += bump;
            } else {
                let k = pick / 2 % aw2.len();
                aw2[k] += bump;
            }
            prop_assert!(solve_transport(&am2, &aw2, &rho).objective >= base - 1e-9 * base.max(1.0));
        }
    }
}
