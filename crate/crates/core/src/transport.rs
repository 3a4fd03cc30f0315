//! Exact discrete optimal transport by the transportation simplex
//! (MODI / u-v potentials) on a dense cost matrix.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Optimal coupling between two finite marginals.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    /// Basic cells `(row, col, mass)`; non-listed cells carry no mass.
    pub flows: Vec<(usize, usize, f64)>,
    pub cost: f64,
    pub iterations: usize,
}

impl TransportPlan {
    pub fn row_marginal(&self, rows: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows];
        for &(i, _, x) in &self.flows {
            out[i] += x;
        }
        out
    }

    pub fn col_marginal(&self, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; cols];
        for &(_, j, x) in &self.flows {
            out[j] += x;
        }
        out
    }
}

#[derive(Clone, Copy)]
struct Cell {
    row: usize,
    col: usize,
    flow: f64,
}

/// Solves `min Σ c_ij x_ij` over couplings of `supply` and `demand`.
///
/// `cost` is row-major with `supply.len()` rows. The marginals must be
/// nonnegative with equal totals up to rounding; the demand side is rescaled
/// to the supply total before the simplex starts.
pub fn solve_transport(supply: &[f64], demand: &[f64], cost: &[f64]) -> Result<TransportPlan> {
    let m = supply.len();
    let n = demand.len();
    if m == 0 || n == 0 {
        return Err(Error::Transport("empty marginal".into()));
    }
    if cost.len() != m * n {
        return Err(Error::Transport(format!(
            "cost matrix has {} entries, expected {}",
            cost.len(),
            m * n
        )));
    }
    let total_a: f64 = supply.iter().sum();
    let total_b: f64 = demand.iter().sum();
    if !(total_a > 0.0) || !(total_b > 0.0) {
        return Err(Error::Transport("marginals must carry positive mass".into()));
    }
    if (total_a - total_b).abs() > 1e-9 * total_a.max(total_b) {
        return Err(Error::Transport(format!(
            "unbalanced marginals: {total_a} vs {total_b}"
        )));
    }
    let scale = total_a / total_b;
    let mut a: Vec<f64> = supply.to_vec();
    let mut b: Vec<f64> = demand.iter().map(|x| x * scale).collect();

    // North-west corner start: exactly m + n - 1 basic cells forming a tree.
    let mut basis: Vec<Cell> = Vec::with_capacity(m + n - 1);
    let (mut i, mut j) = (0usize, 0usize);
    loop {
        let q = a[i].min(b[j]).max(0.0);
        basis.push(Cell { row: i, col: j, flow: q });
        a[i] -= q;
        b[j] -= q;
        if i == m - 1 && j == n - 1 {
            break;
        }
        if (a[i] <= 0.0 && i < m - 1) || j == n - 1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    debug_assert_eq!(basis.len(), m + n - 1);

    let cmax = cost.iter().fold(0.0f64, |acc, c| acc.max(c.abs()));
    let tol = 1e-12 * cmax.max(1e-300);
    let max_iter = 50 * (m + n) * (m + n) + 1000;

    let mut in_basis = vec![usize::MAX; m * n];
    for (k, c) in basis.iter().enumerate() {
        in_basis[c.row * n + c.col] = k;
    }

    let mut u = vec![0.0; m];
    let mut v = vec![0.0; n];
    let mut iterations = 0usize;
    // Node ids: rows are 0..m, columns m..m+n.
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); m + n];
    loop {
        iterations += 1;
        if iterations > max_iter {
            return Err(Error::Transport(format!(
                "simplex did not converge within {max_iter} pivots"
            )));
        }
        for list in adj.iter_mut() {
            list.clear();
        }
        for (k, c) in basis.iter().enumerate() {
            adj[c.row].push(k);
            adj[m + c.col].push(k);
        }

        // Potentials: u_0 = 0 and u_i + v_j = c_ij on basic cells.
        let mut seen = vec![false; m + n];
        let mut queue = VecDeque::new();
        seen[0] = true;
        u[0] = 0.0;
        queue.push_back(0usize);
        while let Some(node) = queue.pop_front() {
            for &k in &adj[node] {
                let c = basis[k];
                let (other, is_row) = if node < m { (m + c.col, false) } else { (c.row, true) };
                if seen[other] {
                    continue;
                }
                seen[other] = true;
                let cij = cost[c.row * n + c.col];
                if is_row {
                    u[c.row] = cij - v[c.col];
                } else {
                    v[c.col] = cij - u[c.row];
                }
                queue.push_back(other);
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Transport("basis is not a spanning tree".into()));
        }

        // Dantzig entering rule.
        let mut best = -tol;
        let mut entering = None;
        for r in 0..m {
            for c in 0..n {
                if in_basis[r * n + c] != usize::MAX {
                    continue;
                }
                let red = cost[r * n + c] - u[r] - v[c];
                if red < best {
                    best = red;
                    entering = Some((r, c));
                }
            }
        }
        let Some((p, q)) = entering else { break };

        // Tree path from row node p to column node m + q.
        let target = m + q;
        let mut parent_edge = vec![usize::MAX; m + n];
        let mut visited = vec![false; m + n];
        visited[p] = true;
        queue.clear();
        queue.push_back(p);
        while let Some(node) = queue.pop_front() {
            if node == target {
                break;
            }
            for &k in &adj[node] {
                let c = basis[k];
                let other = if node < m { m + c.col } else { c.row };
                if !visited[other] {
                    visited[other] = true;
                    parent_edge[other] = k;
                    queue.push_back(other);
                }
            }
        }
        // Walk back from the column node; edges alternate -, +, -, ... starting
        // at the edge touching column q.
        let mut path = Vec::new();
        let mut node = target;
        while node != p {
            let k = parent_edge[node];
            path.push(k);
            let c = basis[k];
            node = if node >= m { c.row } else { m + c.col };
        }
        let mut theta = f64::INFINITY;
        let mut leaving = usize::MAX;
        for (pos, &k) in path.iter().enumerate() {
            if pos % 2 == 0 && (basis[k].flow < theta || (basis[k].flow == theta && k < leaving)) {
                theta = basis[k].flow;
                leaving = k;
            }
        }
        for (pos, &k) in path.iter().enumerate() {
            if pos % 2 == 0 {
                basis[k].flow -= theta;
            } else {
                basis[k].flow += theta;
            }
        }
        let old = basis[leaving];
        in_basis[old.row * n + old.col] = usize::MAX;
        basis[leaving] = Cell {
            row: p,
            col: q,
            flow: theta,
        };
        in_basis[p * n + q] = leaving;
    }

    let mut total = 0.0;
    let flows: Vec<(usize, usize, f64)> = basis
        .iter()
        .map(|c| {
            let x = c.flow.max(0.0);
            total += x * cost[c.row * n + c.col];
            (c.row, c.col, x)
        })
        .collect();
    Ok(TransportPlan {
        flows,
        cost: total,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_coupling_has_zero_cost() {
        let w = [0.2, 0.3, 0.5];
        let mut cost = vec![0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                cost[i * 3 + j] = (i as f64 - j as f64).abs();
            }
        }
        let plan = solve_transport(&w, &w, &cost).unwrap();
        assert!(plan.cost.abs() < 1e-15);
    }

    #[test]
    fn marginals_are_preserved() {
        let a = [0.1, 0.4, 0.25, 0.25];
        let b = [0.5, 0.3, 0.2];
        let cost: Vec<f64> = (0..12).map(|k| ((k * 7) % 5) as f64 + 0.5).collect();
        let plan = solve_transport(&a, &b, &cost).unwrap();
        for (x, y) in plan.row_marginal(4).iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-14);
        }
        for (x, y) in plan.col_marginal(3).iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn brute_force_on_permutations() {
        // Uniform 3x3 marginals: the optimum is attained at a permutation
        // matrix (Birkhoff), so enumeration of the 6 permutations is exact.
        let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let best = perms
            .iter()
            .map(|p| (0..3).map(|i| cost[i * 3 + p[i]]).sum::<f64>() / 3.0)
            .fold(f64::INFINITY, f64::min);
        let w = [1.0 / 3.0; 3];
        let plan = solve_transport(&w, &w, &cost).unwrap();
        assert!((plan.cost - best).abs() < 1e-12);
    }

    #[test]
    fn rejects_unbalanced() {
        assert!(solve_transport(&[1.0], &[0.5], &[0.0]).is_err());
    }
}
