//! Directory store of orbit records keyed by content hash.
//!
//! ```text
//! <root>/orbits/<id>.json        record with the half-grid loop
//! <root>/orbits/<id>.csv         t, q1…qN over one period
//! <root>/reports/<id>/index.json
//! <root>/certificates/modify-<hash>.json
//! <root>/bangert/<hash>/manifest.json, loops/*.csv
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use brakekit::loopspace::{w12_inner, SymmetricLoop};
use brakekit::model::TorusSpace;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::failure::Failure;

pub fn content_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrbitRecord {
    pub id: String,
    pub system_id: String,
    pub period: usize,
    pub grid: usize,
    pub dim: usize,
    pub constant: bool,
    pub action: f64,
    /// W^{1,2} norm of the even-subspace gradient.
    pub gradient_norm: f64,
    /// W^{1,2} norm of the unrestricted gradient.
    pub full_gradient: f64,
    pub max_speed: f64,
    pub brake_residual: f64,
    pub shooting_residual: f64,
    /// Sup distance between the extrapolated variational loop and the shot orbit.
    pub cross_agreement: f64,
    /// Which independent searches reached this orbit.
    pub methods: Vec<String>,
    #[serde(rename = "loop")]
    pub curve: SymmetricLoop,
}

impl OrbitRecord {
    /// Hash of everything but the method list, so merging does not rename.
    pub fn compute_id(system_id: &str, curve: &SymmetricLoop) -> String {
        content_hash(&format!("{system_id}\n{}", serde_json::to_string(curve).expect("loop serializes")))
    }
}

/// Translates a loop so its `t = 0` node lies in the fundamental domain.
pub fn canonical_lift(curve: &SymmetricLoop, torus: &TorusSpace) -> SymmetricLoop {
    let shift: Vec<f64> = curve.half_node(0).iter().zip(&torus.periods).map(|(q, l)| -l * (q / l).floor()).collect();
    curve.translate(&shift)
}

/// W^{1,2} distance after the best lattice translation, and the time shift
/// by `m/2` when `half_shift` says it is a symmetry of the system.
pub fn loop_distance(a: &SymmetricLoop, b: &SymmetricLoop, torus: &TorusSpace, half_shift: bool) -> Option<f64> {
    if a.dim != b.dim || a.period != b.period || a.grid != b.grid {
        return None;
    }
    let mut best = f64::INFINITY;
    let candidates = if half_shift { vec![b.clone(), b.shift_half_period()] } else { vec![b.clone()] };
    for c in candidates {
        let shift: Vec<f64> = a
            .half_node(0)
            .iter()
            .zip(c.half_node(0))
            .zip(&torus.periods)
            .map(|((x, y), l)| l * ((x - y) / l).round())
            .collect();
        let c = c.translate(&shift);
        let d = a.difference(&c).ok()?;
        best = best.min(w12_inner(&d, &d).ok()?.max(0.0).sqrt());
    }
    Some(best)
}

pub struct Store {
    pub root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, Failure> {
        let root = root.into();
        fs::create_dir_all(root.join("orbits"))?;
        Ok(Store { root })
    }

    fn orbit_path(&self, id: &str, ext: &str) -> PathBuf {
        self.root.join("orbits").join(format!("{id}.{ext}"))
    }

    pub fn write_orbit(&self, rec: &OrbitRecord) -> Result<(), Failure> {
        write_json(&self.orbit_path(&rec.id, "json"), rec)?;
        fs::write(self.orbit_path(&rec.id, "csv"), rec.curve.to_csv())?;
        Ok(())
    }

    /// All records in id order.
    pub fn orbits(&self) -> Result<Vec<OrbitRecord>, Failure> {
        let mut names: Vec<PathBuf> = fs::read_dir(self.root.join("orbits"))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        names.sort();
        names.iter().map(|p| read_json(p)).collect()
    }

    pub fn orbits_of(&self, system_id: &str) -> Result<Vec<OrbitRecord>, Failure> {
        Ok(self.orbits()?.into_iter().filter(|r| r.system_id == system_id).collect())
    }

    /// Looks an orbit up by id or unique id prefix.
    pub fn orbit(&self, id: &str) -> Result<OrbitRecord, Failure> {
        let exact = self.orbit_path(id, "json");
        if exact.exists() {
            return read_json(&exact);
        }
        let hits: Vec<OrbitRecord> = self.orbits()?.into_iter().filter(|r| r.id.starts_with(id)).collect();
        match hits.len() {
            1 => Ok(hits.into_iter().next().unwrap()),
            0 => Err(Failure::schema(format!("no orbit {id} in {}", self.root.display()))),
            _ => Err(Failure::schema(format!("orbit prefix {id} is ambiguous"))),
        }
    }

    pub fn write(&self, rel: &str, value: &impl Serialize) -> Result<PathBuf, Failure> {
        let path = self.root.join(rel);
        write_json(&path, value)?;
        Ok(path)
    }

    pub fn write_text(&self, rel: &str, text: &str) -> Result<PathBuf, Failure> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, text)?;
        Ok(path)
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Failure::schema(format!("{}: {e}", path.display())))
}
