//! `index`: index identities and inequalities for a stored orbit.

use brakekit::index::{verify_relations, RelationOptions, RelationsReport};
use brakekit::loopspace::full_gradient_check;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::failure::{code, Failure};
use crate::find::FULL_GRADIENT_LIMIT;
use crate::store::{OrbitRecord, Store};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IndexReport {
    pub orbit_id: String,
    pub system_id: String,
    pub k: Vec<usize>,
    pub gradient_residual: f64,
    pub relations: RelationsReport,
    pub all_pass: bool,
    pub failures: Vec<(usize, String)>,
}

/// Rejects records whose samples no longer describe a critical loop.
pub fn check_integrity(cfg: &Config, rec: &OrbitRecord) -> Result<f64, Failure> {
    let system_id = cfg.system_id();
    if rec.system_id != system_id {
        return Err(Failure::schema(format!("orbit {} belongs to system {}, not {system_id}", rec.id, rec.system_id)));
    }
    let residual = full_gradient_check(&cfg.system.l_theta, &rec.curve)?;
    let hash_ok = OrbitRecord::compute_id(&rec.system_id, &rec.curve) == rec.id;
    if residual >= FULL_GRADIENT_LIMIT || !hash_ok {
        return Err(Failure::schema(format!(
            "orbit {} is not a critical loop: gradient residual {residual:e} (recorded {:e}, limit {FULL_GRADIENT_LIMIT:e}); content hash {}",
            rec.id,
            rec.full_gradient,
            if hash_ok { "matches" } else { "does not match" }
        )));
    }
    Ok(residual)
}

pub fn index_report(cfg: &Config, store: &Store, orbit: &str, ks: &[usize]) -> Result<IndexReport, Failure> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Failure::schema("k values must be positive"));
    }
    let rec = store.orbit(orbit)?;
    let gradient_residual = check_integrity(cfg, &rec)?;
    let opts = RelationOptions {
        mean_k_max: cfg.numerics.mean_k_max,
        max_doublings: cfg.numerics.max_doublings,
        ..Default::default()
    };
    let relations = verify_relations(&cfg.system.l_theta, &rec.curve, ks, &opts)?;
    let report = IndexReport {
        orbit_id: rec.id.clone(),
        system_id: rec.system_id.clone(),
        k: ks.to_vec(),
        gradient_residual,
        all_pass: relations.all_pass(),
        failures: relations.failures(),
        relations,
    };
    store.write(&format!("reports/{}/index.json", rec.id), &report)?;
    Ok(report)
}

/// Exit status for a finished report.
pub fn index_status(report: &IndexReport) -> Result<(), Failure> {
    if report.all_pass {
        Ok(())
    } else {
        Err(Failure::new(code::IDENTITY, format!("index checks failed for {}: {:?}", report.orbit_id, report.failures)))
    }
}
