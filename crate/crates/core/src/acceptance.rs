//! The acceptance suite: twelve end-to-end checks, each with a runtime budget.
//!
//! Every check is deterministic (fixed seeds) and returns an [`Outcome`]
//! whose `pass` flag also requires the check to finish within its budget.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::environment::{stream_rng, Distribution, EnvSpec, Environment, LayeredSpec, SpeedMeasure};
use crate::error::Result;
use crate::heat_kernel::{
    apriori_check, carne_f, carne_f_bounds, carne_f_numeric, compare_mc_exact,
    envelope_fit_and_verify, heat_kernel_all, heat_kernel_field, mc_walk, FitConfig,
    HeatKernelField, Regime, Split,
};
use crate::lattice::{Boundary, LatticeGraph};
use crate::metric::{
    certify_feasible, chemical_weights, duality_gap_from_fields, greedy_path,
    intrinsic_distance_field, intrinsic_distance_matrix, lower_bound_report, path_sum_check,
    record_stats, GreedyVariant, MetricField,
};
use crate::oracle::{brute_force_path_infimum, two_state_transition};
use crate::stats::{log_grid, loglog_slope, mean};
use crate::environment::LayeredField;

#[derive(Debug, Clone, Serialize)]
pub struct Outcome {
    pub id: usize,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub elapsed: Duration,
    pub budget: Duration,
}

impl Outcome {
    pub fn line(&self) -> String {
        format!(
            "[{}] {:>2} {:<28} {:>8.2}s / {:>4}s  {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.elapsed.as_secs_f64(),
            self.budget.as_secs(),
            self.detail
        )
    }
}

type Check = fn() -> Result<(bool, String)>;

pub struct Criterion {
    pub id: usize,
    pub name: &'static str,
    pub budget: Duration,
    check: Check,
}

impl Criterion {
    pub fn run(&self) -> Outcome {
        let start = Instant::now();
        let (ok, detail) = match (self.check)() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let elapsed = start.elapsed();
        Outcome {
            id: self.id,
            name: self.name,
            pass: ok && elapsed <= self.budget,
            detail,
            elapsed,
            budget: self.budget,
        }
    }
}

const fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

pub fn criteria() -> Vec<Criterion> {
    let c = |id, name, budget, check| Criterion { id, name, budget, check };
    vec![
        c(1, "two-state heat kernel", secs(1), two_state_oracle),
        c(2, "metric vs path enumeration", secs(10), metric_oracle),
        c(3, "dual certificate", secs(30), dual_certificate),
        c(4, "semigroup and reversibility", secs(60), semigroup_suite),
        c(5, "on-diagonal scaling", secs(300), on_diagonal_scaling),
        c(6, "held-out envelope", secs(300), envelope_verification),
        c(7, "tilted a-priori bound", secs(60), apriori_bound),
        c(8, "Carne function", secs(1), carne_function),
        c(9, "greedy path sums", secs(120), greedy_path_sums),
        c(10, "record asymptotics", secs(60), record_asymptotics),
        c(11, "intrinsic lower bound", secs(120), intrinsic_lower_bound),
        c(12, "Monte Carlo vs exact", secs(120), monte_carlo_vs_exact),
    ]
}

pub fn run_all() -> Vec<Outcome> {
    criteria().iter().map(Criterion::run).collect()
}

fn graph(extents: &[usize], boundary: Boundary) -> Arc<LatticeGraph> {
    Arc::new(LatticeGraph::new(extents.len(), extents, boundary).expect("valid lattice"))
}

fn iid(g: &Arc<LatticeGraph>, dist: Distribution, seed: u64) -> Result<Environment> {
    Environment::from_spec(g.clone(), &EnvSpec::Iid { dist, seed })
}

const LOGNORMAL: Distribution = Distribution::Lognormal { m: 0.0, s: 1.5 };
const PARETO4: Distribution = Distribution::Pareto { alpha: 4.0, scale: 1.0 };
const ELLIPTIC: Distribution = Distribution::Uniform { a: 1.0, b: 2.0 };

fn two_state_oracle() -> Result<(bool, String)> {
    let g = graph(&[2], Boundary::Box);
    let env = Environment::constant(g, 1.0)?;
    let theta = SpeedMeasure::vsrw(&env);
    let times = [0.1, 1.0, 10.0];
    let field = heat_kernel_field(&env, &theta, 0, &times, 1e-10)?;
    let err = times
        .iter()
        .enumerate()
        .map(|(i, &t)| (field.probs[i][1] - two_state_transition(1.0, t)).abs())
        .fold(0.0, f64::max);
    Ok((err <= 1e-10, format!("max error {err:.2e} (tol 1e-10)")))
}

fn metric_oracle() -> Result<(bool, String)> {
    let small = graph(&[4, 4], Boundary::Box);
    let worst = (0..30u64)
        .into_par_iter()
        .map(|seed| {
            let env = iid(&small, LOGNORMAL, seed)?;
            let theta = SpeedMeasure::vsrw(&env);
            let weights = chemical_weights(&env, &theta);
            let mut worst = 0.0f64;
            for x in 0..16 {
                let fast = intrinsic_distance_field(&env, &theta, x)?;
                let slow = brute_force_path_infimum(&small, &weights, x);
                for y in 0..16 {
                    worst = worst.max((fast.at(y) - slow[y]).abs());
                }
            }
            Ok(worst)
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let big = graph(&[16, 16], Boundary::Box);
    let mut csrw_exact = true;
    for seed in 0..10u64 {
        let env = iid(&big, LOGNORMAL, 100 + seed)?;
        let all = intrinsic_distance_matrix(&env, &SpeedMeasure::csrw(&env));
        for (x, row) in all.iter().enumerate() {
            let hops = big.bfs_distances(x)?;
            csrw_exact &= row.iter().zip(&hops).all(|(d, &h)| *d == h as f64);
        }
    }
    Ok((
        worst <= 1e-12 && csrw_exact,
        format!("max |dijkstra - enumeration| {worst:.1e}; CSRW equals graph distance: {csrw_exact}"),
    ))
}

fn dual_certificate() -> Result<(bool, String)> {
    let g = graph(&[8, 8], Boundary::Box);
    let results = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let env = iid(&g, LOGNORMAL, 200 + seed)?;
            let theta = SpeedMeasure::vsrw(&env);
            let fields: Vec<MetricField> = (0..64)
                .map(|x| intrinsic_distance_field(&env, &theta, x))
                .collect::<Result<_>>()?;
            let mut infeasible = 0;
            let mut gap = 0.0f64;
            for fx in &fields {
                if !certify_feasible(&env, &theta, &fx.distances, 1e-12)?.feasible {
                    infeasible += 1;
                }
                for fy in &fields {
                    gap = gap.max(duality_gap_from_fields(fx, fy));
                }
            }
            Ok((infeasible, gap))
        })
        .collect::<Result<Vec<_>>>()?;
    let infeasible: usize = results.iter().map(|r| r.0).sum();
    let gap = results.iter().map(|r| r.1).fold(0.0, f64::max);
    Ok((
        infeasible == 0 && gap <= 1e-10,
        format!("infeasible certificates {infeasible}/640; max duality gap {gap:.1e}"),
    ))
}

fn semigroup_suite() -> Result<(bool, String)> {
    let g = graph(&[16, 16], Boundary::Torus);
    let env = iid(&g, PARETO4, 4)?;
    let theta = SpeedMeasure::vsrw(&env);
    let times = [1.0, 2.0, 4.0, 8.0];
    let all = heat_kernel_all(&env, &theta, &times, 1e-12)?;
    let eps = all.iter().map(|f| f.error).fold(0.0, f64::max);
    let n = g.num_vertices();
    let th = theta.values();
    let mut mass = 0.0f64;
    let mut negative = 0usize;
    let mut rev = 0.0f64;
    let mut rev_ok = true;
    for f in &all {
        for i in 0..times.len() {
            mass = mass.max((f.mass(i) - 1.0).abs());
            negative += f.probs[i].iter().filter(|&&p| p < 0.0).count();
        }
    }
    for i in 0..times.len() {
        for x in 0..n {
            for y in 0..n {
                let d = (all[x].density(i, y) - all[y].density(i, x)).abs();
                rev = rev.max(d);
                rev_ok &= d <= eps * (1.0 / th[x] + 1.0 / th[y]);
            }
        }
    }
    // p(t+s,x,y) = sum_z p(t,x,z) p(s,z,y) theta(z), with (t, s) in {(1,1),(2,2),(4,4)}
    let mut ck = 0.0f64;
    let mut ck_ok = true;
    for (i, j) in [(0, 1), (1, 2), (2, 3)] {
        let worst = (0..n)
            .into_par_iter()
            .map(|x| {
                let mut w = 0.0f64;
                let mut ok = true;
                for y in 0..n {
                    let lhs: f64 = (0..n)
                        .map(|z| all[x].density(i, z) * all[z].density(i, y) * th[z])
                        .sum();
                    let d = (lhs - all[x].density(j, y)).abs();
                    w = w.max(d);
                    ok &= d <= 3.0 * eps / th[y];
                }
                (w, ok)
            })
            .reduce(|| (0.0, true), |a, b| (a.0.max(b.0), a.1 && b.1));
        ck = ck.max(worst.0);
        ck_ok &= worst.1;
    }
    Ok((
        mass <= eps && negative == 0 && rev_ok && ck_ok,
        format!(
            "eps {eps:.1e}; mass {mass:.1e}; negatives {negative}; reversibility {rev:.1e}; Chapman-Kolmogorov {ck:.1e}"
        ),
    ))
}

fn elliptic_times() -> Vec<f64> {
    log_grid(4.0, 64.0, 9)
}

fn elliptic_field() -> Result<(Environment, SpeedMeasure, HeatKernelField)> {
    let g = graph(&[128, 128], Boundary::Torus);
    let env = iid(&g, ELLIPTIC, 5)?;
    let theta = SpeedMeasure::vsrw(&env);
    let field = heat_kernel_field(&env, &theta, 0, &elliptic_times(), 1e-14)?;
    Ok((env, theta, field))
}

fn on_diagonal_scaling() -> Result<(bool, String)> {
    let (_, _, field) = elliptic_field()?;
    let diag: Vec<f64> = (0..field.times.len()).map(|i| field.density(i, 0)).collect();
    let slope = loglog_slope(&field.times, &diag);
    Ok((
        (slope + 1.0).abs() <= 0.10,
        format!("slope {slope:.4} (target -1.00 +- 0.10)"),
    ))
}

fn envelope_verification() -> Result<(bool, String)> {
    let (env, theta, field) = elliptic_field()?;
    let metric = intrinsic_distance_field(&env, &theta, 0)?;
    let hops = env.graph().bfs_distances(0)?;
    let config = FitConfig::new(0.5, 2.0, Split::Checkerboard, vec![Regime::Near]);
    let report = envelope_fit_and_verify(&field, &metric, &hops, 2, &config)?;
    let fit = &report.fits[0];
    let p = &fit.params;
    Ok((
        report.total_violations() == 0,
        format!(
            "c2 {:.3} c3 {:.3} gamma {:.2}; fit {} test {}; violations {}; worst test p/env {:.4}",
            p.c2,
            p.c3,
            p.gamma,
            fit.fit_indices.len(),
            fit.test_indices.len(),
            fit.violations.len(),
            fit.worst_test_ratio
        ),
    ))
}

fn apriori_bound() -> Result<(bool, String)> {
    let g = graph(&[8, 8], Boundary::Torus);
    let env = iid(&g, LOGNORMAL, 7)?;
    let theta = SpeedMeasure::vsrw(&env);
    let times: Vec<f64> = (0..=16).map(|k| k as f64 * 0.25).collect();
    let worst = (0..20u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(7_000, k);
            let raw: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
            let max_grad = g
                .edges()
                .iter()
                .map(|e| (raw[e.plus] - raw[e.minus]).abs())
                .fold(0.0, f64::max);
            let shrink = rng.random_range(0.2..1.0) / max_grad;
            let phi: Vec<f64> = raw.iter().map(|r| (r * shrink).exp()).collect();
            let f: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
            Ok(apriori_check(&env, &theta, &phi, &f, &times, 1e-12)?.min_relative_margin())
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    Ok((
        worst >= -1e-8,
        format!("min margin / ||phi f|| {worst:.3e} (floor -1e-8)"),
    ))
}

fn carne_function() -> Result<(bool, String)> {
    let mut diff = 0.0f64;
    let mut bounds = true;
    for s in log_grid(1e-3, 1e3, 50) {
        diff = diff.max((carne_f(s)? - carne_f_numeric(s)?).abs());
        bounds &= carne_f_bounds(s)?.holds();
    }
    Ok((
        diff <= 1e-10 && bounds,
        format!("max |closed - numeric| {diff:.1e}; bounds hold: {bounds}"),
    ))
}

fn greedy_path_sums() -> Result<(bool, String)> {
    let alpha0 = 2.0;
    let grid = [1_000, 10_000, 100_000];
    let slopes = (0..20u64)
        .into_par_iter()
        .map(|seed| {
            let field = LayeredField::new(2, LayeredSpec { alpha0, seed })?;
            let path = greedy_path(&field, &[0, 0], 100_000, GreedyVariant::FirstStepRestricted)?;
            Ok(path_sum_check(&path.conductances, 2, alpha0, &grid)?.loglog_slope)
        })
        .collect::<Result<Vec<f64>>>()?;
    let m = mean(&slopes);
    let ceiling = 1.0 - 1.0 / (2.0 * alpha0) + 0.05;
    Ok((
        m <= ceiling && m >= 0.5,
        format!("mean slope {m:.4} over 20 seeds (window [0.5, {ceiling:.2}])"),
    ))
}

fn record_asymptotics() -> Result<(bool, String)> {
    const L: usize = 1_000_000;
    let alpha0 = 2.0;
    let alpha = 2.5;
    let decades = [1_000usize, 10_000, 100_000, 1_000_000];
    let per_seed = (0..50u64)
        .into_par_iter()
        .map(|seed| {
            let law = Distribution::Pareto { alpha: alpha0, scale: 1.0 };
            let mut rng = stream_rng(10_000 + seed, 0);
            let values: Vec<f64> = (0..L).map(|_| law.sample(&mut rng)).collect();
            let rec = record_stats(&values)?;
            let ratio = rec.count_upto(L - 1) as f64 / (L as f64).ln();
            // M_n uses the first n values: running_max[n - 1]
            let fractions: Vec<f64> = decades
                .windows(2)
                .map(|w| {
                    let bad = (w[0]..w[1])
                        .filter(|&n| rec.running_max[n - 1] < (n as f64).powf(1.0 / alpha))
                        .count();
                    bad as f64 / (w[1] - w[0]) as f64
                })
                .collect();
            Ok((ratio, fractions))
        })
        .collect::<Result<Vec<_>>>()?;
    let ratio = mean(&per_seed.iter().map(|r| r.0).collect::<Vec<_>>());
    let fractions: Vec<f64> = (0..3)
        .map(|k| mean(&per_seed.iter().map(|r| r.1[k]).collect::<Vec<_>>()))
        .collect();
    let vanishing = fractions.windows(2).all(|w| w[1] <= w[0]) && fractions[2] <= 1e-3;
    Ok((
        (0.75..=1.25).contains(&ratio) && vanishing,
        format!(
            "mean N(L)/ln L {ratio:.4}; violation fractions of M_n >= n^(1/{alpha}) per decade {:.2e} {:.2e} {:.2e}",
            fractions[0], fractions[1], fractions[2]
        ),
    ))
}

fn intrinsic_lower_bound() -> Result<(bool, String)> {
    let g = graph(&[258, 258], Boundary::Torus);
    let env = Environment::layered(g.clone(), LayeredSpec { alpha0: 2.0, seed: 11 })?;
    let theta = SpeedMeasure::vsrw(&env);
    let x = g.index(&[129, 129])?;
    let rep = lower_bound_report(&env, &theta, x, 1.9, &[16, 32, 64, 128])?;
    let ratios: Vec<String> = rep.rows.iter().map(|r| format!("{:.3}", r.ratio)).collect();
    let unclipped = rep.rows.iter().all(|r| !r.clipped);
    Ok((
        rep.c_hat > 0.0 && rep.spread <= 4.0 && unclipped,
        format!(
            "ratios [{}]; c_hat {:.3}; spread {:.3} (max 4)",
            ratios.join(", "),
            rep.c_hat,
            rep.spread
        ),
    ))
}

fn monte_carlo_vs_exact() -> Result<(bool, String)> {
    let g = graph(&[16, 16], Boundary::Torus);
    let env = iid(&g, PARETO4, 12)?;
    let theta = SpeedMeasure::csrw(&env);
    let field = heat_kernel_field(&env, &theta, 0, &[8.0], 1e-12)?;
    let stats = mc_walk(&env, &theta, 0, 8.0, 100_000, 12, &[8.0])?;
    let cmp = compare_mc_exact(&stats, &field, 10.0)?;
    Ok((
        cmp.fraction >= 0.95,
        format!(
            "{}/{} cells within 3 SE ({:.3}); worst z {:.2}",
            cmp.agree, cmp.cells, cmp.fraction, cmp.worst_z
        ),
    ))
}
