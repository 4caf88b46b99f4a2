//! Configuration documents: a system definition plus a `numerics` block.

use std::path::Path;

use brakekit::system::{builtin, System, SystemSpec};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::failure::Failure;
use crate::store::content_hash;

/// An explicit starting loop `q(t) = center + amplitude·cos(2πt/m)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Guess {
    pub center: Vec<f64>,
    pub amplitude: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Numerics {
    /// Cells per unit time; even.
    pub grid: usize,
    /// Loop period in units of the time period.
    pub period: usize,
    /// Even-subspace gradient target of the variational search.
    pub gradient_tol: f64,
    pub integrator_tol: f64,
    pub shooting_tol: f64,
    /// Number of random seeds per campaign.
    pub seeds: usize,
    pub rng_seed: u64,
    pub descent_iters: usize,
    pub dedup_tol: f64,
    pub guesses: Vec<Guess>,
    pub mean_k_max: usize,
    pub max_doublings: usize,
    pub modification_t: Vec<f64>,
    pub growth_samples: usize,
}

impl Default for Numerics {
    fn default() -> Self {
        Numerics {
            grid: 256,
            period: 1,
            gradient_tol: 1e-12,
            integrator_tol: 1e-12,
            shooting_tol: 1e-10,
            seeds: 8,
            rng_seed: 0,
            descent_iters: 0,
            dedup_tol: 1e-5,
            guesses: vec![],
            mean_k_max: 64,
            max_doublings: 4,
            modification_t: vec![],
            growth_samples: 10_000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Config {
    pub spec: SystemSpec,
    pub numerics: Numerics,
    pub system: System,
}

/// Command-line overrides applied after loading.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub grid: Option<usize>,
    pub tol: Option<f64>,
    pub seed: Option<u64>,
}

impl Config {
    /// Parses a document `{dim, periods?, theta?, lagrangian, numerics?}`.
    pub fn from_json(text: &str) -> Result<Self, Failure> {
        let mut doc: Value = serde_json::from_str(text).map_err(|e| Failure::schema(format!("config: {e}")))?;
        let obj = doc.as_object_mut().ok_or_else(|| Failure::schema("config must be a JSON object"))?;
        let numerics = match obj.remove("numerics") {
            Some(v) => serde_json::from_value(v).map_err(|e| Failure::schema(format!("numerics: {e}")))?,
            None => Numerics::default(),
        };
        let spec: SystemSpec = serde_json::from_value(doc).map_err(|e| Failure::schema(format!("system: {e}")))?;
        Self::new(spec, numerics)
    }

    pub fn new(spec: SystemSpec, numerics: Numerics) -> Result<Self, Failure> {
        let system = spec.build().map_err(|e| Failure::schema(format!("system: {e}")))?;
        let cfg = Config { spec, numerics, system };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `builtin:NAME` or a path to a JSON document.
    pub fn load(source: &str) -> Result<Self, Failure> {
        if let Some(name) = source.strip_prefix("builtin:") {
            let spec = builtin(name).ok_or_else(|| Failure::schema(format!("no built-in system named {name}")))?;
            return Self::new(spec, Numerics::default());
        }
        let text = std::fs::read_to_string(Path::new(source))
            .map_err(|e| Failure::schema(format!("cannot read config {source}: {e}")))?;
        Self::from_json(&text)
    }

    pub fn apply(mut self, o: &Overrides) -> Result<Self, Failure> {
        if let Some(g) = o.grid {
            self.numerics.grid = g;
        }
        if let Some(t) = o.tol {
            self.numerics.gradient_tol = t;
        }
        if let Some(s) = o.seed {
            self.numerics.rng_seed = s;
        }
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), Failure> {
        let n = &self.numerics;
        let dim = self.spec.dim;
        if n.grid < 4 || n.grid % 2 != 0 {
            return Err(Failure::schema("numerics.grid must be even and at least 4"));
        }
        if n.period == 0 {
            return Err(Failure::schema("numerics.period must be positive"));
        }
        for tol in [n.gradient_tol, n.integrator_tol, n.shooting_tol, n.dedup_tol] {
            if !(tol > 0.0 && tol.is_finite()) {
                return Err(Failure::schema("tolerances must be positive"));
            }
        }
        if n.guesses.iter().any(|g| g.center.len() != dim || g.amplitude.len() != dim) {
            return Err(Failure::schema("each guess needs dim centers and amplitudes"));
        }
        if n.modification_t.iter().any(|t| !(*t > 0.0)) {
            return Err(Failure::schema("modification speeds must be positive"));
        }
        Ok(())
    }

    /// Content hash of the system definition; orbits are keyed under it.
    pub fn system_id(&self) -> String {
        content_hash(&serde_json::to_string(&self.spec).expect("system spec serializes"))
    }
}
