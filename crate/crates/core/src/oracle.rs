//! Independent reference computations used to cross-check the solvers.
//!
//! Everything here is deliberately naive: exhaustive enumeration, closed
//! forms and exact convolutions, with no code shared with the routines they
//! check.

use crate::lattice::LatticeGraph;

/// Infimum of path weight from `x` to every vertex, by enumerating all
/// simple paths. Exponential time; intended for graphs of at most 16 vertices.
pub fn brute_force_path_infimum(graph: &LatticeGraph, weights: &[f64], x: usize) -> Vec<f64> {
    fn walk(
        graph: &LatticeGraph,
        weights: &[f64],
        v: usize,
        cost: f64,
        visited: &mut [bool],
        best: &mut [f64],
    ) {
        if cost < best[v] {
            best[v] = cost;
        }
        for inc in graph.neighbors(v) {
            if !visited[inc.neighbor] {
                visited[inc.neighbor] = true;
                walk(graph, weights, inc.neighbor, cost + weights[inc.edge], visited, best);
                visited[inc.neighbor] = false;
            }
        }
    }
    let n = graph.num_vertices();
    let mut best = vec![f64::INFINITY; n];
    let mut visited = vec![false; n];
    visited[x] = true;
    walk(graph, weights, x, 0.0, &mut visited, &mut best);
    best
}

/// `P_0[X_t = 1]` for two vertices joined by an edge of conductance `omega`
/// with `theta = 1`.
pub fn two_state_transition(omega: f64, t: f64) -> f64 {
    (1.0 - (-2.0 * omega * t).exp()) / 2.0
}

/// Law of `sum_{k=1}^{l} B_k` with independent `B_k ~ Bernoulli(1/k)`;
/// entry `j` is the probability of the value `j`.
pub fn record_count_pmf(l: usize) -> Vec<f64> {
    let mut pmf = vec![1.0];
    for k in 1..=l {
        let q = 1.0 / k as f64;
        let mut next = vec![0.0; pmf.len() + 1];
        for (j, &p) in pmf.iter().enumerate() {
            next[j] += p * (1.0 - q);
            next[j + 1] += p * q;
        }
        pmf = next;
    }
    pmf
}

/// `sum_{k=1}^{n} 1/k`
pub fn harmonic(n: usize) -> f64 {
    (1..=n).map(|k| 1.0 / k as f64).sum()
}

/// Dense matrix exponential `exp(t Q)` by scaling and squaring of a Taylor
/// series; `q` is row-major `n x n`.
pub fn dense_expm(q: &[f64], n: usize, t: f64) -> Vec<f64> {
    let norm = (0..n)
        .map(|i| (0..n).map(|j| (q[i * n + j] * t).abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let scale = t / 2f64.powi(squarings as i32);
    let a: Vec<f64> = q.iter().map(|v| v * scale).collect();
    let mut result = identity(n);
    let mut term = identity(n);
    for k in 1..=30 {
        term = matmul(&term, &a, n);
        term.iter_mut().for_each(|v| *v /= k as f64);
        result.iter_mut().zip(&term).for_each(|(r, v)| *r += v);
    }
    for _ in 0..squarings {
        result = matmul(&result, &result, n);
    }
    result
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    (0..n).for_each(|i| m[i * n + i] = 1.0);
    m
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik != 0.0 {
                for j in 0..n {
                    c[i * n + j] += aik * b[k * n + j];
                }
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Boundary;

    #[test]
    fn path_enumeration_on_a_line() {
        let g = LatticeGraph::new(1, &[4], Boundary::Box).unwrap();
        let best = brute_force_path_infimum(&g, &[1.0, 2.0, 3.0], 0);
        assert_eq!(best, vec![0.0, 1.0, 3.0, 6.0]);
    }

    #[test]
    fn record_pmf_sums_to_one() {
        let pmf = record_count_pmf(100);
        assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mean: f64 = pmf.iter().enumerate().map(|(j, p)| j as f64 * p).sum();
        assert!((mean - harmonic(100)).abs() < 1e-10);
        assert_eq!(pmf[0], 0.0);
    }

    #[test]
    fn expm_two_state() {
        let q = [-1.0, 1.0, 1.0, -1.0];
        let p = dense_expm(&q, 2, 1.0);
        assert!((p[1] - two_state_transition(1.0, 1.0)).abs() < 1e-14);
    }
}
