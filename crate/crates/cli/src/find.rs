//! `find-orbits`: seeded variational and shooting campaigns with deduplication.

use brakekit::dynamics::{brake_shoot, BrakeOrbit, IntegratorOptions, ShootingOptions};
use brakekit::loopspace::{
    find_critical, full_gradient_check, mean_action, refine, richardson, riesz_gradient, w12_inner, CriticalPointReport, SearchOptions,
    SymmetricLoop,
};
use brakekit::model::{LagrangianSpec, TorusSpace, TWO_PI};
use brakekit::sampling::fiber_samples;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Config, Guess};
use crate::failure::{code, Failure};
use crate::store::{canonical_lift, loop_distance, OrbitRecord, Store};

/// Emitted orbits must pass these.
pub const FULL_GRADIENT_LIMIT: f64 = 1e-6;
pub const BRAKE_RESIDUAL_LIMIT: f64 = 1e-6;
/// Loops slower than this everywhere are snapped to an exact constant.
pub const CONSTANT_SPEED: f64 = 1e-6;

pub const VARIATIONAL: &str = "variational";
pub const SHOOTING: &str = "shooting";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FindSummary {
    pub system_id: String,
    pub period: usize,
    pub attempts: usize,
    pub converged: usize,
    pub orbits: Vec<String>,
    pub new_orbits: usize,
}

/// Explicit guesses first, then `seeds` random ones from the campaign RNG.
pub fn campaign_guesses(cfg: &Config) -> Vec<Guess> {
    let n = &cfg.numerics;
    let mut rng = ChaCha8Rng::seed_from_u64(n.rng_seed);
    let periods = &cfg.system.torus.periods;
    let mut out = n.guesses.clone();
    for _ in 0..n.seeds {
        let center = periods.iter().map(|l| l * rng.random::<f64>()).collect();
        let amplitude = periods.iter().map(|l| l * rng.random_range(-0.3..0.3)).collect();
        out.push(Guess { center, amplitude });
    }
    out
}

fn search_options(cfg: &Config) -> SearchOptions {
    SearchOptions { tol: cfg.numerics.gradient_tol, descent_iters: cfg.numerics.descent_iters, ..Default::default() }
}

fn shooting_options(cfg: &Config) -> ShootingOptions {
    ShootingOptions {
        tol: cfg.numerics.shooting_tol,
        integrator: IntegratorOptions::with_tol(cfg.numerics.integrator_tol),
        ..Default::default()
    }
}

fn polish(cfg: &Config, start: &SymmetricLoop) -> Option<CriticalPointReport> {
    let opts = SearchOptions { descent_iters: 0, ..search_options(cfg) };
    find_critical(&cfg.system.l_theta, start, &opts).ok().filter(|r| r.converged)
}

fn variational(cfg: &Config, g: &Guess) -> Option<CriticalPointReport> {
    let m = cfg.numerics.period;
    let start = SymmetricLoop::from_fn(cfg.spec.dim, m, cfg.numerics.grid, |t| {
        let c = (TWO_PI * t / m as f64).cos();
        g.center.iter().zip(&g.amplitude).map(|(a, b)| a + b * c).collect()
    })
    .ok()?;
    find_critical(&cfg.system.l_theta, &start, &search_options(cfg)).ok().filter(|r| r.converged)
}

/// Shoots from `q(0)` of the guess, then polishes the sampled orbit on the grid.
fn shooting(cfg: &Config, g: &Guess) -> Option<CriticalPointReport> {
    let sys = &cfg.system;
    let q0: Vec<f64> = g.center.iter().zip(&g.amplitude).map(|(a, b)| a + b).collect();
    let m = cfg.numerics.period;
    let orbit = brake_shoot(&sys.hamiltonian, &sys.theta, &q0, m as f64, &shooting_options(cfg)).ok()?;
    let start = SymmetricLoop::from_fn(cfg.spec.dim, m, cfg.numerics.grid, |t| orbit.position(t)).ok()?;
    polish(cfg, &start)
}

fn lattice_gap(a: &[f64], b: &[f64], periods: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(periods)
        .map(|((x, y), l)| {
            let d = x - y;
            (d - l * (d / l).round()).abs()
        })
        .fold(0.0, f64::max)
}

/// Sup distance between the Richardson-extrapolated loop and the shot orbit
/// through the same brake point.
fn cross_agreement(cfg: &Config, curve: &SymmetricLoop, orbit: &BrakeOrbit) -> Option<f64> {
    let l = &cfg.system.l_theta;
    let opts = search_options(cfg);
    let fine = refine(l, curve, 2, &opts).ok().filter(|r| r.converged)?.critical;
    let finer = refine(l, &fine, 2, &opts).ok().filter(|r| r.converged)?.critical;
    let rich = richardson(&fine, &finer).ok()?;
    let periods = &cfg.system.torus.periods;
    let h = rich.step();
    Some(
        (0..rich.half_nodes())
            .map(|j| lattice_gap(rich.half_node(j), &orbit.position(j as f64 * h), periods))
            .fold(0.0, f64::max),
    )
}

/// Record for a converged loop, or `None` when it fails the emission gates.
fn certify(cfg: &Config, system_id: &str, report: &CriticalPointReport, method: &str) -> Option<OrbitRecord> {
    let sys = &cfg.system;
    let mut curve = canonical_lift(&report.critical, &sys.torus);
    let mut full_gradient = full_gradient_check(&sys.l_theta, &curve).ok()?;
    if curve.max_speed() < CONSTANT_SPEED {
        let rest = snap_constant(&curve);
        let g = full_gradient_check(&sys.l_theta, &rest).ok()?;
        if g <= full_gradient.max(cfg.numerics.gradient_tol) {
            curve = canonical_lift(&rest, &sys.torus);
            full_gradient = g;
        }
    }
    let m = curve.period as f64;
    let orbit = brake_shoot(&sys.hamiltonian, &sys.theta, curve.half_node(0), m, &shooting_options(cfg)).ok()?;
    if full_gradient >= FULL_GRADIENT_LIMIT || orbit.residual >= BRAKE_RESIDUAL_LIMIT {
        return None;
    }
    let cross_agreement = cross_agreement(cfg, &curve, &orbit)?;
    let max_speed = curve.max_speed();
    Some(OrbitRecord {
        id: OrbitRecord::compute_id(system_id, &curve),
        system_id: system_id.to_string(),
        period: curve.period,
        grid: curve.grid,
        dim: curve.dim,
        constant: max_speed < CONSTANT_SPEED,
        action: mean_action(&sys.l_theta, &curve),
        gradient_norm: even_gradient(&sys.l_theta, &curve)?,
        full_gradient,
        max_speed,
        brake_residual: orbit.residual,
        shooting_residual: orbit.shooting_residual,
        cross_agreement,
        methods: vec![method.to_string()],
        curve,
    })
}

/// `t ↦ t + m/2` maps brake orbits to brake orbits when `m` is even or `L` is
/// invariant under the half shift.
fn half_shift_is_symmetry(l: &LagrangianSpec, torus: &TorusSpace, m: usize) -> bool {
    m % 2 == 0
        || fiber_samples(&torus.periods, 2.0, 64)
            .iter()
            .all(|s| (l.value(s.t, &s.q, &s.w) - l.value(s.t + 0.5, &s.q, &s.w)).abs() < 1e-12)
}

fn even_gradient(l: &LagrangianSpec, curve: &SymmetricLoop) -> Option<f64> {
    let r = riesz_gradient(l, curve).ok()?;
    Some(w12_inner(&r, &r).ok()?.max(0.0).sqrt())
}

/// The constant loop at the mean of the half-grid samples.
fn snap_constant(curve: &SymmetricLoop) -> SymmetricLoop {
    let d = curve.dim;
    let k = curve.half_nodes() as f64;
    let mean: Vec<f64> = (0..d).map(|i| (0..curve.half_nodes()).map(|j| curve.half_node(j)[i]).sum::<f64>() / k).collect();
    SymmetricLoop { half: (0..curve.half_nodes()).flat_map(|_| mean.clone()).collect(), ..curve.clone() }
}

fn merge_methods(into: &mut Vec<String>, from: &[String]) {
    into.extend(from.iter().cloned());
    into.sort();
    into.dedup();
}

pub fn find_orbits(cfg: &Config, store: &Store) -> Result<FindSummary, Failure> {
    let system_id = cfg.system_id();
    let guesses = campaign_guesses(cfg);
    let jobs: Vec<(usize, &str)> =
        (0..guesses.len()).flat_map(|i| [(i, VARIATIONAL), (i, SHOOTING)]).collect();
    let found: Vec<Option<OrbitRecord>> = jobs
        .par_iter()
        .map(|(i, method)| {
            let report = if *method == VARIATIONAL { variational(cfg, &guesses[*i]) } else { shooting(cfg, &guesses[*i]) };
            report.and_then(|r| certify(cfg, &system_id, &r, method))
        })
        .collect();
    let converged = found.iter().filter(|r| r.is_some()).count();
    if converged == 0 {
        return Err(Failure::new(code::NO_CONVERGENCE, format!("no seed converged ({} attempts)", jobs.len())));
    }
    let half_shift = half_shift_is_symmetry(&cfg.system.l_theta, &cfg.system.torus, cfg.numerics.period);
    let mut records = store.orbits_of(&system_id)?;
    let existing = records.len();
    let mut touched: Vec<usize> = vec![];
    for rec in found.into_iter().flatten() {
        let hit = records.iter().position(|r| {
            loop_distance(&r.curve, &rec.curve, &cfg.system.torus, half_shift).is_some_and(|d| d < cfg.numerics.dedup_tol)
        });
        let at = match hit {
            Some(k) => {
                let methods = rec.methods.clone();
                merge_methods(&mut records[k].methods, &methods);
                k
            }
            None => {
                records.push(rec);
                records.len() - 1
            }
        };
        if !touched.contains(&at) {
            touched.push(at);
        }
    }
    touched.sort();
    for &k in &touched {
        store.write_orbit(&records[k])?;
    }
    Ok(FindSummary {
        system_id,
        period: cfg.numerics.period,
        attempts: jobs.len(),
        converged,
        orbits: touched.iter().map(|&k| records[k].id.clone()).collect(),
        new_orbits: records.len() - existing,
    })
}
