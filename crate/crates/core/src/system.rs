//! JSON system definitions.
//!
//! ```json
//! {"dim": 1, "periods": [1.0], "theta": ["0.3"],
//!  "lagrangian": {"builtin": "pendulum", "amplitude": 1.5}}
//! ```
//!
//! `lagrangian` is the reversible `L_θ`; the system Lagrangian is
//! `L = L_θ + θ(q)·v` and the flow is the twisted one of `H = dual(L_θ)(q, p + θ)`.
//! Expressions use the grammar of [`crate::expr`]: numbers, `pi`, `t`,
//! `q`/`q1…qN`, `v`/`v1…vN`, `+ − * / ^`, `sin cos exp`.

use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::legendre::twisted_hamiltonian;
use crate::model::{
    magnetic_lagrangian, ExprFunction, HamiltonianSpec, LagrangianSpec, Mechanical, OneForm, Potential, TorusSpace,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "builtin", rename_all = "snake_case", deny_unknown_fields)]
pub enum LagrangianConfig {
    /// `|v|²/2`.
    Kinetic,
    /// `v²/2 − a·cos(2πq)` on `T¹`.
    Pendulum { amplitude: f64 },
    /// `m|v|²/2 + c|v|⁴/4 − V(t, q)`.
    Mechanical {
        #[serde(default = "one")]
        mass: f64,
        #[serde(default)]
        quartic: f64,
        #[serde(default = "zero_expr")]
        potential: String,
    },
    /// Any expression in `t`, `q`, `v`.
    Expr { expr: String },
}

fn one() -> f64 {
    1.0
}

fn zero_expr() -> String {
    "0".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub periods: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<String>>,
    pub lagrangian: LagrangianConfig,
}

/// A loaded system: torus, one-form, `L_θ`, `L` and the twisted `H`.
#[derive(Clone, Debug)]
pub struct System {
    pub spec: SystemSpec,
    pub torus: TorusSpace,
    pub theta: OneForm,
    pub l_theta: LagrangianSpec,
    pub lagrangian: LagrangianSpec,
    pub hamiltonian: HamiltonianSpec,
}

impl SystemSpec {
    pub fn build(&self) -> Result<System> {
        let n = self.dim;
        if n == 0 {
            return Err(Error::Invalid("dim must be positive".into()));
        }
        let torus = match &self.periods {
            Some(p) if p.len() != n => return Err(Error::Invalid("periods must have dim entries".into())),
            Some(p) => TorusSpace::with_periods(p.clone())?,
            None => TorusSpace::new(n),
        };
        let theta = match &self.theta {
            Some(c) => OneForm::from_exprs(&c.iter().map(String::as_str).collect::<Vec<_>>(), n)?,
            None => OneForm::zero(n),
        };
        let l_theta = match &self.lagrangian {
            LagrangianConfig::Kinetic => {
                LagrangianSpec::new(Arc::new(Mechanical::new(1.0, 0.0, Potential::zero(n))?), "kinetic")
            }
            LagrangianConfig::Pendulum { amplitude } => {
                if n != 1 {
                    return Err(Error::Invalid("the pendulum lives on T¹".into()));
                }
                crate::model::pendulum(*amplitude)
            }
            LagrangianConfig::Mechanical { mass, quartic, potential } => LagrangianSpec::new(
                Arc::new(Mechanical::new(*mass, *quartic, Potential::parse(potential, n)?)?),
                format!("mechanical({potential})"),
            ),
            LagrangianConfig::Expr { expr } => {
                LagrangianSpec::new(Arc::new(ExprFunction::lagrangian(expr, n)?), expr.clone())
            }
        };
        check_structure(&l_theta, &theta, &torus)?;
        let lagrangian = magnetic_lagrangian(&l_theta, &theta);
        let hamiltonian = twisted_hamiltonian(&l_theta, &theta);
        Ok(System { spec: self.clone(), torus, theta, l_theta, lagrangian, hamiltonian })
    }
}

/// Periodicity in `t` and on the lattice, and reversibility `L_θ(−t,q,−v) = L_θ(t,q,v)`.
fn check_structure(l: &LagrangianSpec, theta: &OneForm, torus: &TorusSpace) -> Result<()> {
    let n = torus.dim;
    let mut s = 0.137_f64;
    for _ in 0..32 {
        let mut next = || {
            s = (s * 97.13 + 0.271).fract();
            s
        };
        let t = next();
        let q: Vec<f64> = (0..n).map(|i| next() * torus.periods[i]).collect();
        let v: Vec<f64> = (0..n).map(|_| 2.0 * next() - 1.0).collect();
        let back: Vec<f64> = v.iter().map(|x| -x).collect();
        let dr = (l.value(t, &q, &v) - l.value(-t, &q, &back)).abs();
        if dr > 1e-9 {
            return Err(Error::Invalid(format!("L_θ is not reversible in (t, v) (defect {dr:e})")));
        }
        for i in 0..n {
            let mut shifted = q.clone();
            shifted[i] += torus.periods[i];
            let dl = (l.value(t, &q, &v) - l.value(t, &shifted, &v)).abs();
            let dt = (l.value(t, &q, &v) - l.value(t + 1.0, &q, &v)).abs();
            let dth = (theta.eval(&q) - theta.eval(&shifted)).amax();
            if dl.max(dt).max(dth) > 1e-9 {
                return Err(Error::Invalid(format!("system is not periodic in t and on the lattice (defect {:e})", dl.max(dt).max(dth))));
            }
        }
    }
    Ok(())
}

/// Named systems shipped with the library.
pub fn builtin_systems() -> Vec<(&'static str, SystemSpec)> {
    let mech = |potential: &str, quartic: f64| LagrangianConfig::Mechanical { mass: 1.0, quartic, potential: potential.into() };
    vec![
        ("free", SystemSpec { dim: 1, periods: None, theta: None, lagrangian: LagrangianConfig::Kinetic }),
        ("free-t2", SystemSpec { dim: 2, periods: None, theta: None, lagrangian: LagrangianConfig::Kinetic }),
        (
            "pendulum",
            SystemSpec { dim: 1, periods: None, theta: None, lagrangian: LagrangianConfig::Pendulum { amplitude: 1.0 } },
        ),
        (
            "magnetic-pendulum",
            SystemSpec {
                dim: 1,
                periods: None,
                theta: Some(vec!["0.3".into()]),
                lagrangian: LagrangianConfig::Pendulum { amplitude: 1.5 },
            },
        ),
        (
            "magnetic-t2",
            SystemSpec {
                dim: 2,
                periods: None,
                theta: Some(vec!["0".into(), "sin(2*pi*q1)/(2*pi)".into()]),
                lagrangian: mech("0.2*cos(2*pi*q1)*cos(2*pi*q2)", 0.0),
            },
        ),
        ("quartic", SystemSpec { dim: 1, periods: None, theta: None, lagrangian: mech("0.3*cos(2*pi*q)", 0.5) }),
        (
            "forced",
            SystemSpec {
                dim: 1,
                periods: None,
                theta: None,
                lagrangian: LagrangianConfig::Expr { expr: "v^2/2 + 0.1*v^4 - 0.2*cos(2*pi*t)*cos(2*pi*q)".into() },
            },
        ),
    ]
}

pub fn builtin(name: &str) -> Option<SystemSpec> {
    builtin_systems().into_iter().find(|(n, _)| *n == name).map(|(_, s)| s)
}
