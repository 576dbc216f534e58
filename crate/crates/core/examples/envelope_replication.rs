//! Held-out envelope verification repeated over many environments.
//!
//! Usage: `envelope_replication <extent> <first-seed> <count>`. Prints, for
//! each fit objective, how many environments leave at least one held-out
//! violation and the largest held-out ratio `p / envelope`.

use std::sync::Arc;

use rayon::prelude::*;
use rcm_lab::environment::{Distribution, Environment, SpeedMeasure};
use rcm_lab::heat_kernel::{
    envelope_fit_and_verify, heat_kernel_field, FitConfig, FitObjective, Regime, Split,
};
use rcm_lab::lattice::{Boundary, LatticeGraph};
use rcm_lab::metric::intrinsic_distance_field;
use rcm_lab::stats::log_grid;

fn arg(i: usize, default: u64) -> u64 {
    std::env::args()
        .nth(i)
        .map(|a| a.parse().expect("integer argument"))
        .unwrap_or(default)
}

fn main() {
    let extent = arg(1, 64) as usize;
    let first = arg(2, 0);
    let count = arg(3, 20);
    let g = Arc::new(LatticeGraph::new(2, &[extent, extent], Boundary::Torus).unwrap());
    let times = log_grid(4.0, 64.0, 9);
    let objectives = [
        FitObjective::MeanLogGap,
        FitObjective::MaxLogGap,
        FitObjective::MinPrefactor,
    ];
    let rows: Vec<Vec<(usize, f64, f64)>> = (first..first + count)
        .into_par_iter()
        .map(|seed| {
            let env = Environment::iid(g.clone(), Distribution::Uniform { a: 1.0, b: 2.0 }, seed)
                .unwrap();
            let theta = SpeedMeasure::vsrw(&env);
            let field = heat_kernel_field(&env, &theta, 0, &times, 1e-14).unwrap();
            let metric = intrinsic_distance_field(&env, &theta, 0).unwrap();
            let hops = g.bfs_distances(0).unwrap();
            objectives
                .iter()
                .map(|&objective| {
                    let mut cfg = FitConfig::new(0.5, 2.0, Split::Checkerboard, vec![Regime::Near]);
                    cfg.objective = objective;
                    let rep = envelope_fit_and_verify(&field, &metric, &hops, 2, &cfg).unwrap();
                    let fit = &rep.fits[0];
                    (fit.violations.len(), fit.worst_test_ratio, fit.params.c3)
                })
                .collect()
        })
        .collect();
    println!("{extent}x{extent} torus, seeds {first}..{}", first + count);
    for (k, objective) in objectives.iter().enumerate() {
        let failing = rows.iter().filter(|r| r[k].0 > 0).count();
        let worst = rows.iter().map(|r| r[k].1).fold(0.0, f64::max);
        let c3 = rows.iter().map(|r| r[k].2).sum::<f64>() / count as f64;
        println!(
            "{objective:?}: environments with violations {failing}/{count}; worst held-out ratio {worst:.4}; mean c3 {c3:.3}"
        );
    }
}
