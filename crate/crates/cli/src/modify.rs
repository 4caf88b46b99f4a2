//! `modify-check`: convex quadratic modification certificates over a list of speeds.

use brakekit::modification::{
    build_modification, check_quadratic_growth, coincidence_defect, compute_constants, growth_floor,
    hessian_t_independence, reversibility_defect, verify_orbit_preservation, GrowthCertificate, HessianComparison,
    ModificationParams, PreservationReport,
};
use brakekit::model::LagrangianSpec;
use brakekit::Error;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::failure::{code, Failure};
use crate::report::check_integrity;
use crate::store::{content_hash, Store};

/// Round-off allowance for exact coincidence on `|v| ≤ T, L_θ ≤ λ`.
pub const COINCIDENCE_TOL: f64 = 1e-12;
pub const PRESERVATION_TOL: f64 = 1e-10;
pub const HESSIAN_TOL: f64 = 1e-12;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpeedRow {
    pub t: f64,
    pub params: ModificationParams,
    /// (M1) largest jet deviation from `L_θ` where they must coincide.
    pub coincidence: f64,
    pub coincidence_samples: usize,
    /// (M3) `min L_T − (|v| − C)` over the sample.
    pub growth_floor: f64,
    /// (M2) sampled quadratic-growth constants.
    pub growth: GrowthCertificate,
    pub reversibility: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OrbitRow {
    pub orbit_id: String,
    pub t: f64,
    /// `None` when the orbit is not slower than `T`.
    pub preservation: Option<PreservationReport>,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairRow {
    pub orbit_id: String,
    pub comparison: HessianComparison,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModifyCertificate {
    pub system_id: String,
    pub k: f64,
    pub c: f64,
    pub speeds: Vec<SpeedRow>,
    pub orbits: Vec<OrbitRow>,
    pub pairs: Vec<PairRow>,
    pub all_pass: bool,
}

fn speed_row(cfg: &Config, t: f64, k: f64, c: f64) -> Result<(SpeedRow, LagrangianSpec), Failure> {
    let l = &cfg.system.l_theta;
    let (lt, params) = build_modification(l, t, k, c).map_err(|e| match e {
        Error::InfeasibleParams(m) => Failure::new(code::CERTIFICATE, format!("T={t}: {m}")),
        e => e.into(),
    })?;
    let (coincidence, coincidence_samples) = coincidence_defect(l, &lt, &params, 2000);
    let wmax = 4.0 * params.saturation_radius;
    let floor = growth_floor(&lt, params.c, wmax, cfg.numerics.growth_samples);
    let growth = check_quadratic_growth(&lt, wmax, 64);
    let reversibility = reversibility_defect(&lt, wmax, 2000);
    let pass = coincidence <= COINCIDENCE_TOL && floor >= 0.0 && growth.passed && reversibility < 1e-12;
    Ok((SpeedRow { t, params, coincidence, coincidence_samples, growth_floor: floor, growth, reversibility, pass }, lt))
}

/// Speeds to test: the explicit list, else the config list, else `2U` and `3U`
/// for the fastest stored orbit `U`.
pub fn speed_list(cfg: &Config, store: &Store, explicit: &[f64]) -> Result<Vec<f64>, Failure> {
    if !explicit.is_empty() {
        return Ok(explicit.to_vec());
    }
    if !cfg.numerics.modification_t.is_empty() {
        return Ok(cfg.numerics.modification_t.clone());
    }
    let u = store.orbits_of(&cfg.system_id())?.iter().map(|r| r.max_speed).fold(0.5, f64::max);
    Ok(vec![2.0 * u, 3.0 * u])
}

pub fn modify_check(cfg: &Config, store: &Store, speeds: &[f64]) -> Result<ModifyCertificate, Failure> {
    if speeds.iter().any(|t| !(*t > 0.0)) {
        return Err(Failure::schema("speeds must be positive"));
    }
    let sys = &cfg.system;
    let (k, c) = compute_constants(&sys.hamiltonian, &sys.theta);
    let built: Vec<(SpeedRow, LagrangianSpec)> =
        speeds.par_iter().map(|&t| speed_row(cfg, t, k, c)).collect::<Result<_, _>>()?;
    let orbits = store.orbits_of(&cfg.system_id())?;
    for rec in &orbits {
        check_integrity(cfg, rec)?;
    }
    let mut orbit_rows = vec![];
    let mut pairs = vec![];
    for rec in &orbits {
        for (row, lt) in &built {
            let preservation = match verify_orbit_preservation(&sys.l_theta, lt, row.t, &rec.curve, PRESERVATION_TOL) {
                Ok(r) => Some(r),
                Err(Error::SpeedTooHigh { .. }) => None,
                Err(e) => return Err(e.into()),
            };
            let pass = preservation.as_ref().is_none_or(|r| r.passed);
            orbit_rows.push(OrbitRow { orbit_id: rec.id.clone(), t: row.t, preservation, pass });
        }
        let admitted: Vec<&(SpeedRow, LagrangianSpec)> = built.iter().filter(|(r, _)| rec.max_speed < r.t).collect();
        for w in admitted.windows(2) {
            let comparison = hessian_t_independence((&w[0].1, w[0].0.t), (&w[1].1, w[1].0.t), &rec.curve)?;
            let pass = comparison.max_deviation < HESSIAN_TOL && comparison.indices_agree();
            pairs.push(PairRow { orbit_id: rec.id.clone(), comparison, pass });
        }
    }
    let speeds: Vec<SpeedRow> = built.into_iter().map(|(r, _)| r).collect();
    let all_pass =
        speeds.iter().all(|r| r.pass) && orbit_rows.iter().all(|r| r.pass) && pairs.iter().all(|r| r.pass);
    let cert = ModifyCertificate { system_id: cfg.system_id(), k, c, speeds, orbits: orbit_rows, pairs, all_pass };
    let key = content_hash(&format!("{}\n{:?}", cfg.system_id(), speeds_key(&cert)));
    store.write(&format!("certificates/modify-{}.json", &key[..16]), &cert)?;
    Ok(cert)
}

fn speeds_key(cert: &ModifyCertificate) -> Vec<f64> {
    cert.speeds.iter().map(|r| r.t).collect()
}

pub fn modify_status(cert: &ModifyCertificate) -> Result<(), Failure> {
    if cert.all_pass {
        return Ok(());
    }
    let mut bad = vec![];
    bad.extend(cert.speeds.iter().filter(|r| !r.pass).map(|r| format!("T={} certificates", r.t)));
    bad.extend(cert.orbits.iter().filter(|r| !r.pass).map(|r| format!("orbit {} at T={}", r.orbit_id, r.t)));
    bad.extend(cert.pairs.iter().filter(|r| !r.pass).map(|r| format!("Hessian of {}", r.orbit_id)));
    Err(Failure::new(code::CERTIFICATE, format!("modification certificate violated: {}", bad.join(", "))))
}
