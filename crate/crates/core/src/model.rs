//! Flat tori, one-forms, Lagrangian and Hamiltonian function specs, and the
//! involutions that define brake orbits.
//!
//! Lagrangians and Hamiltonians share one representation: a function of
//! `(t, q, w)` where the fiber variable `w` is a velocity `v` or a momentum
//! `p`. Every spec returns its value together with exact first and second
//! partials in a [`Jet`].

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{Expr, Scope, Var};
use crate::sampling::{fiber_samples, unit_directions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusSpace {
    pub dim: usize,
    pub periods: Vec<f64>,
}

impl TorusSpace {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 1, "torus dimension must be positive");
        TorusSpace { dim, periods: vec![1.0; dim] }
    }

    pub fn with_periods(periods: Vec<f64>) -> Result<Self> {
        if periods.is_empty() || periods.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
            return Err(Error::Invalid("torus periods must be positive".into()));
        }
        Ok(TorusSpace { dim: periods.len(), periods })
    }

    pub fn reduce(&self, q: &[f64]) -> Vec<f64> {
        q.iter()
            .zip(&self.periods)
            .map(|(x, l)| {
                let r = x.rem_euclid(*l);
                if r >= *l {
                    0.0
                } else {
                    r
                }
            })
            .collect()
    }

    /// Displacement `to - from` along the minimal lattice lift.
    pub fn min_lift(&self, from: &[f64], to: &[f64]) -> Vec<f64> {
        from.iter()
            .zip(to)
            .zip(&self.periods)
            .map(|((a, b), l)| {
                let d = b - a;
                d - l * (d / l).round()
            })
            .collect()
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        self.min_lift(a, b).iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn injectivity_radius(&self) -> f64 {
        0.5 * self.periods.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// Value and exact partials of a function of `(t, q, w)`.
///
/// `dqw[(i, j)] = ∂²f/∂qᵢ∂wⱼ` and `dtw[j] = ∂²f/∂t∂wⱼ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub dq: DVector<f64>,
    pub dw: DVector<f64>,
    pub dqq: DMatrix<f64>,
    pub dqw: DMatrix<f64>,
    pub dww: DMatrix<f64>,
    pub dtw: DVector<f64>,
}

impl Jet {
    pub fn zeros(n: usize) -> Self {
        Jet {
            value: 0.0,
            dq: DVector::zeros(n),
            dw: DVector::zeros(n),
            dqq: DMatrix::zeros(n, n),
            dqw: DMatrix::zeros(n, n),
            dww: DMatrix::zeros(n, n),
            dtw: DVector::zeros(n),
        }
    }
}

pub trait FiberFunction: Send + Sync {
    fn dim(&self) -> usize;
    fn jet(&self, t: f64, q: &[f64], w: &[f64]) -> Jet;
    fn value(&self, t: f64, q: &[f64], w: &[f64]) -> f64 {
        self.jet(t, q, w).value
    }
    /// Analytic Fenchel dual when one is known in closed form.
    fn closed_form_dual(&self) -> Option<Arc<dyn FiberFunction>> {
        None
    }
}

/// A Lagrangian `L(t, q, v)`, 1-periodic in `t` and lattice-periodic in `q`.
#[derive(Clone)]
pub struct LagrangianSpec {
    pub f: Arc<dyn FiberFunction>,
    pub reversible: bool,
    pub label: String,
}

/// A Hamiltonian `H(t, q, p)`; `symmetric` records (H3) for the one-form it
/// was built against.
#[derive(Clone)]
pub struct HamiltonianSpec {
    pub f: Arc<dyn FiberFunction>,
    pub symmetric: bool,
    pub label: String,
}

impl std::fmt::Debug for LagrangianSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "LagrangianSpec({}, reversible={})", self.label, self.reversible)
    }
}

impl std::fmt::Debug for HamiltonianSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "HamiltonianSpec({}, symmetric={})", self.label, self.symmetric)
    }
}

impl LagrangianSpec {
    pub fn new(f: Arc<dyn FiberFunction>, label: impl Into<String>) -> Self {
        let mut spec = LagrangianSpec { f, reversible: false, label: label.into() };
        spec.reversible = check_symmetry(Symmetric::Lagrangian(&spec), &OneForm::zero(spec.dim()), 400)
            < 1e-12;
        spec
    }
    pub fn dim(&self) -> usize {
        self.f.dim()
    }
    pub fn jet(&self, t: f64, q: &[f64], v: &[f64]) -> Jet {
        self.f.jet(t, q, v)
    }
    pub fn value(&self, t: f64, q: &[f64], v: &[f64]) -> f64 {
        self.f.value(t, q, v)
    }
}

impl HamiltonianSpec {
    /// Builds the Hamiltonian and records whether it is symmetric under `R₁` for `theta`.
    pub fn new(f: Arc<dyn FiberFunction>, theta: &OneForm, label: impl Into<String>) -> Self {
        let mut spec = HamiltonianSpec { f, symmetric: false, label: label.into() };
        spec.symmetric = check_symmetry(Symmetric::Hamiltonian(&spec), theta, 400) < 1e-12;
        spec
    }
    pub fn dim(&self) -> usize {
        self.f.dim()
    }
    pub fn jet(&self, t: f64, q: &[f64], p: &[f64]) -> Jet {
        self.f.jet(t, q, p)
    }
    pub fn value(&self, t: f64, q: &[f64], p: &[f64]) -> f64 {
        self.f.value(t, q, p)
    }
}

/// Expression with all partials needed for a [`Jet`], differentiated once.
#[derive(Clone, Debug)]
pub struct ExprJet {
    n: usize,
    f: Expr,
    dq: Vec<Expr>,
    dw: Vec<Expr>,
    dqq: Vec<Expr>,
    dqw: Vec<Expr>,
    dww: Vec<Expr>,
    dtw: Vec<Expr>,
}

impl ExprJet {
    pub fn new(f: Expr, n: usize) -> Self {
        let dq: Vec<Expr> = (0..n).map(|i| f.diff(Var::Q(i))).collect();
        let dw: Vec<Expr> = (0..n).map(|i| f.diff(Var::W(i))).collect();
        let mut dqq = Vec::with_capacity(n * n);
        let mut dqw = Vec::with_capacity(n * n);
        let mut dww = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                dqq.push(dq[i].diff(Var::Q(j)));
                dqw.push(dq[i].diff(Var::W(j)));
                dww.push(dw[i].diff(Var::W(j)));
            }
        }
        let dtw = dw.iter().map(|e| e.diff(Var::T)).collect();
        ExprJet { n, f, dq, dw, dqq, dqw, dww, dtw }
    }

    pub fn eval(&self, t: f64, q: &[f64], w: &[f64]) -> Jet {
        let n = self.n;
        let ev = |e: &Expr| e.eval(t, q, w);
        Jet {
            value: ev(&self.f),
            dq: DVector::from_iterator(n, self.dq.iter().map(ev)),
            dw: DVector::from_iterator(n, self.dw.iter().map(ev)),
            dqq: DMatrix::from_row_iterator(n, n, self.dqq.iter().map(ev)),
            dqw: DMatrix::from_row_iterator(n, n, self.dqw.iter().map(ev)),
            dww: DMatrix::from_row_iterator(n, n, self.dww.iter().map(ev)),
            dtw: DVector::from_iterator(n, self.dtw.iter().map(ev)),
        }
    }

    pub fn value(&self, t: f64, q: &[f64], w: &[f64]) -> f64 {
        self.f.eval(t, q, w)
    }
}

/// A Lagrangian or Hamiltonian given by one expression.
pub struct ExprFunction {
    jet: ExprJet,
}

impl ExprFunction {
    pub fn lagrangian(src: &str, dim: usize) -> Result<Self> {
        Ok(ExprFunction { jet: ExprJet::new(Expr::parse(src, Scope::lagrangian(dim))?, dim) })
    }
    pub fn hamiltonian(src: &str, dim: usize) -> Result<Self> {
        Ok(ExprFunction { jet: ExprJet::new(Expr::parse(src, Scope::hamiltonian(dim))?, dim) })
    }
}

impl FiberFunction for ExprFunction {
    fn dim(&self) -> usize {
        self.jet.n
    }
    fn jet(&self, t: f64, q: &[f64], w: &[f64]) -> Jet {
        self.jet.eval(t, q, w)
    }
    fn value(&self, t: f64, q: &[f64], w: &[f64]) -> f64 {
        self.jet.value(t, q, w)
    }
}

/// A potential `V(t, q)` with gradient and Hessian.
#[derive(Clone, Debug)]
pub struct Potential {
    n: usize,
    v: Expr,
    dq: Vec<Expr>,
    dqq: Vec<Expr>,
}

impl Potential {
    pub fn parse(src: &str, dim: usize) -> Result<Self> {
        let v = Expr::parse(src, Scope::time_position(dim))?;
        let dq: Vec<Expr> = (0..dim).map(|i| v.diff(Var::Q(i))).collect();
        let dqq = (0..dim)
            .flat_map(|i| (0..dim).map(move |j| (i, j)))
            .map(|(i, j)| dq[i].diff(Var::Q(j)))
            .collect();
        Ok(Potential { n: dim, v, dq, dqq })
    }

    pub fn zero(dim: usize) -> Self {
        Potential::parse("0", dim).expect("zero potential")
    }

    pub fn value(&self, t: f64, q: &[f64]) -> f64 {
        self.v.eval(t, q, &[])
    }
}

/// `L = m|v|²/2 + c|v|⁴/4 − V(t,q)`.
pub struct Mechanical {
    pub mass: f64,
    pub quartic: f64,
    pub potential: Potential,
}

impl Mechanical {
    pub fn new(mass: f64, quartic: f64, potential: Potential) -> Result<Self> {
        if !(mass > 0.0) || quartic < 0.0 {
            return Err(Error::Invalid("mass must be positive and quartic coefficient non-negative".into()));
        }
        Ok(Mechanical { mass, quartic, potential })
    }
}

impl FiberFunction for Mechanical {
    fn dim(&self) -> usize {
        self.potential.n
    }

    fn jet(&self, t: f64, q: &[f64], v: &[f64]) -> Jet {
        let n = self.dim();
        let pot = &self.potential;
        let vv = DVector::from_column_slice(v);
        let r2 = vv.norm_squared();
        let m = self.mass;
        let c4 = self.quartic;
        let mut jet = Jet::zeros(n);
        jet.value = 0.5 * m * r2 + 0.25 * c4 * r2 * r2 - pot.value(t, q);
        for i in 0..n {
            jet.dq[i] = -pot.dq[i].eval(t, q, &[]);
            jet.dw[i] = (m + c4 * r2) * v[i];
            for j in 0..n {
                jet.dqq[(i, j)] = -pot.dqq[i * n + j].eval(t, q, &[]);
                let delta = if i == j { 1.0 } else { 0.0 };
                jet.dww[(i, j)] = (m + c4 * r2) * delta + 2.0 * c4 * v[i] * v[j];
            }
        }
        jet
    }

    fn value(&self, t: f64, q: &[f64], v: &[f64]) -> f64 {
        let r2: f64 = v.iter().map(|x| x * x).sum();
        0.5 * self.mass * r2 + 0.25 * self.quartic * r2 * r2 - self.potential.value(t, q)
    }

    fn closed_form_dual(&self) -> Option<Arc<dyn FiberFunction>> {
        (self.quartic == 0.0).then(|| {
            Arc::new(MechanicalHamiltonian { mass: self.mass, potential: self.potential.clone() })
                as Arc<dyn FiberFunction>
        })
    }
}

/// `H = |p|²/(2m) + V(t,q)`, the dual of a quadratic [`Mechanical`] Lagrangian.
pub struct MechanicalHamiltonian {
    pub mass: f64,
    pub potential: Potential,
}

impl FiberFunction for MechanicalHamiltonian {
    fn dim(&self) -> usize {
        self.potential.n
    }

    fn jet(&self, t: f64, q: &[f64], p: &[f64]) -> Jet {
        let n = self.dim();
        let pot = &self.potential;
        let mut jet = Jet::zeros(n);
        jet.value = p.iter().map(|x| x * x).sum::<f64>() / (2.0 * self.mass) + pot.value(t, q);
        for i in 0..n {
            jet.dq[i] = pot.dq[i].eval(t, q, &[]);
            jet.dw[i] = p[i] / self.mass;
            jet.dww[(i, i)] = 1.0 / self.mass;
            for j in 0..n {
                jet.dqq[(i, j)] = pot.dqq[i * n + j].eval(t, q, &[]);
            }
        }
        jet
    }

    fn value(&self, t: f64, q: &[f64], p: &[f64]) -> f64 {
        p.iter().map(|x| x * x).sum::<f64>() / (2.0 * self.mass) + self.potential.value(t, q)
    }

    fn closed_form_dual(&self) -> Option<Arc<dyn FiberFunction>> {
        Some(Arc::new(Mechanical { mass: self.mass, quartic: 0.0, potential: self.potential.clone() }))
    }
}

/// Free particle `|v|²/2` on `T^N`.
pub fn kinetic(dim: usize) -> LagrangianSpec {
    let f = Mechanical::new(1.0, 0.0, Potential::zero(dim)).expect("kinetic");
    LagrangianSpec::new(Arc::new(f), "kinetic")
}

/// Pendulum `v²/2 − a·cos(2πq)` on `T¹`.
pub fn pendulum(amplitude: f64) -> LagrangianSpec {
    let pot = Potential::parse(&format!("{amplitude:e}*cos(2*pi*q)"), 1).expect("pendulum potential");
    let f = Mechanical::new(1.0, 0.0, pot).expect("pendulum");
    LagrangianSpec::new(Arc::new(f), format!("pendulum({amplitude})"))
}

/// Smooth lattice-periodic one-form `θ = Σ θᵢ(q) dqᵢ`.
#[derive(Clone, Debug)]
pub struct OneForm {
    n: usize,
    comps: Vec<Expr>,
    jac: Vec<Expr>,
    second: Vec<Expr>,
    constant: bool,
}

impl OneForm {
    pub fn from_exprs(srcs: &[&str], dim: usize) -> Result<Self> {
        if srcs.len() != dim {
            return Err(Error::Invalid(format!(
                "one-form needs {dim} components, got {}",
                srcs.len()
            )));
        }
        let comps = srcs
            .iter()
            .map(|s| Expr::parse(s, Scope::position(dim)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_components(comps))
    }

    fn from_components(comps: Vec<Expr>) -> Self {
        let n = comps.len();
        let mut jac = Vec::with_capacity(n * n);
        let mut second = Vec::with_capacity(n * n * n);
        for ci in &comps {
            for j in 0..n {
                jac.push(ci.diff(Var::Q(j)));
            }
        }
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    second.push(jac[i * n + j].diff(Var::Q(k)));
                }
            }
        }
        let constant = jac.iter().all(Expr::is_zero);
        OneForm { n, comps, jac, second, constant }
    }

    pub fn zero(dim: usize) -> Self {
        Self::constant(&vec![0.0; dim])
    }

    pub fn constant(c: &[f64]) -> Self {
        Self::from_components(c.iter().map(|x| Expr::constant(*x)).collect())
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn is_zero(&self) -> bool {
        self.comps.iter().all(Expr::is_zero)
    }

    pub fn is_constant(&self) -> bool {
        self.constant
    }

    pub fn eval(&self, q: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.n, self.comps.iter().map(|e| e.eval(0.0, q, &[])))
    }

    /// `J[(i, j)] = ∂θᵢ/∂qⱼ`.
    pub fn jacobian(&self, q: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.n, self.n, self.jac.iter().map(|e| e.eval(0.0, q, &[])))
    }

    /// `out[i][(j, k)] = ∂²θᵢ/∂qⱼ∂qₖ`.
    pub fn second(&self, q: &[f64]) -> Vec<DMatrix<f64>> {
        let n = self.n;
        (0..n)
            .map(|i| {
                DMatrix::from_row_iterator(
                    n,
                    n,
                    self.second[i * n * n..(i + 1) * n * n].iter().map(|e| e.eval(0.0, q, &[])),
                )
            })
            .collect()
    }

    /// `σ[(j, i)] = ∂θᵢ/∂qⱼ − ∂θⱼ/∂qᵢ`, the coefficients of `dθ`.
    pub fn curvature(&self, q: &[f64]) -> DMatrix<f64> {
        let jac = self.jacobian(q);
        jac.transpose() - jac
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TangentPoint {
    pub q: Vec<f64>,
    pub v: Vec<f64>,
}

impl PhasePoint {
    pub fn new(torus: &TorusSpace, q: &[f64], p: &[f64]) -> Self {
        PhasePoint { q: torus.reduce(q), p: p.to_vec() }
    }
}

impl TangentPoint {
    pub fn new(torus: &TorusSpace, q: &[f64], v: &[f64]) -> Self {
        TangentPoint { q: torus.reduce(q), v: v.to_vec() }
    }
}

/// `R₁(q, p) = (q, −p − 2θ(q))`.
pub fn involution_r1(theta: &OneForm, x: &PhasePoint) -> PhasePoint {
    let th = theta.eval(&x.q);
    PhasePoint { q: x.q.clone(), p: x.p.iter().zip(th.iter()).map(|(p, a)| -p - 2.0 * a).collect() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftDirection {
    Forward,
    Inverse,
}

/// `Φ(q, p) = (q, p − θ(q))` and its inverse.
pub fn momentum_shift(theta: &OneForm, x: &PhasePoint, direction: ShiftDirection) -> PhasePoint {
    let th = theta.eval(&x.q);
    let s = match direction {
        ShiftDirection::Forward => -1.0,
        ShiftDirection::Inverse => 1.0,
    };
    PhasePoint { q: x.q.clone(), p: x.p.iter().zip(th.iter()).map(|(p, a)| p + s * a).collect() }
}

/// The unique point of `Fix(R₁)` over `q`.
pub fn fixed_set_point(theta: &OneForm, q: &[f64]) -> PhasePoint {
    PhasePoint { q: q.to_vec(), p: theta.eval(q).iter().map(|a| -a).collect() }
}

/// `L + θ[v]`.
pub struct Magnetic {
    base: Arc<dyn FiberFunction>,
    theta: OneForm,
}

impl FiberFunction for Magnetic {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn jet(&self, t: f64, q: &[f64], v: &[f64]) -> Jet {
        let mut jet = self.base.jet(t, q, v);
        if self.theta.is_zero() {
            return jet;
        }
        let vv = DVector::from_column_slice(v);
        let th = self.theta.eval(q);
        jet.value += th.dot(&vv);
        jet.dw += &th;
        if !self.theta.is_constant() {
            let jac = self.theta.jacobian(q);
            jet.dq += jac.transpose() * &vv;
            jet.dqw += jac.transpose();
            for (i, h) in self.theta.second(q).iter().enumerate() {
                jet.dqq += h * v[i];
            }
        }
        jet
    }

    fn value(&self, t: f64, q: &[f64], v: &[f64]) -> f64 {
        let th = self.theta.eval(q);
        self.base.value(t, q, v) + th.iter().zip(v).map(|(a, b)| a * b).sum::<f64>()
    }

    fn closed_form_dual(&self) -> Option<Arc<dyn FiberFunction>> {
        let h = self.base.closed_form_dual()?;
        Some(Arc::new(Shifted::new(h, self.theta.clone(), -1.0)))
    }
}

/// `L_θ(t,q,v) = L(t,q,v) + θ(q)[v]`; the fiber Hessian is untouched.
pub fn magnetic_lagrangian(l: &LagrangianSpec, theta: &OneForm) -> LagrangianSpec {
    let f = Magnetic { base: l.f.clone(), theta: theta.clone() };
    LagrangianSpec::new(Arc::new(f), format!("{} + θ[v]", l.label))
}

/// `H(t, q, p + s·θ(q))` with `s = ±1`.
pub struct Shifted {
    base: Arc<dyn FiberFunction>,
    theta: OneForm,
    sign: f64,
}

impl Shifted {
    pub fn new(base: Arc<dyn FiberFunction>, theta: OneForm, sign: f64) -> Self {
        Shifted { base, theta, sign }
    }
}

impl FiberFunction for Shifted {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn jet(&self, t: f64, q: &[f64], p: &[f64]) -> Jet {
        let s = self.sign;
        let th = self.theta.eval(q);
        let shifted: Vec<f64> = p.iter().zip(th.iter()).map(|(a, b)| a + s * b).collect();
        let mut jet = self.base.jet(t, q, &shifted);
        if self.theta.is_constant() {
            return jet;
        }
        // chain rule through P = p + sθ(q): ∂P/∂q = sJ
        let jac = &self.theta.jacobian(q) * s;
        let hp = jet.dw.clone();
        let dq = &jet.dq + jac.transpose() * &hp;
        let mut dqq = &jet.dqq + &jet.dqw * &jac + jac.transpose() * jet.dqw.transpose()
            + jac.transpose() * &jet.dww * &jac;
        for (i, h) in self.theta.second(q).iter().enumerate() {
            dqq += h * (s * hp[i]);
        }
        let dqw = &jet.dqw + jac.transpose() * &jet.dww;
        jet.dq = dq;
        jet.dqq = dqq;
        jet.dqw = dqw;
        jet
    }

    fn value(&self, t: f64, q: &[f64], p: &[f64]) -> f64 {
        let th = self.theta.eval(q);
        let shifted: Vec<f64> = p.iter().zip(th.iter()).map(|(a, b)| a + self.sign * b).collect();
        self.base.value(t, q, &shifted)
    }
}

/// `H ∘ Φ`, i.e. `(t,q,p) ↦ H(t, q, p − θ(q))`.
pub fn compose_with_shift(h: &HamiltonianSpec, theta: &OneForm, sym_form: &OneForm) -> HamiltonianSpec {
    let f = Shifted::new(h.f.clone(), theta.clone(), -1.0);
    HamiltonianSpec::new(Arc::new(f), sym_form, format!("{} ∘ Φ", h.label))
}

pub enum Symmetric<'a> {
    Lagrangian(&'a LagrangianSpec),
    Hamiltonian(&'a HamiltonianSpec),
}

/// Sup over a fixed sample grid of `|L(−t,q,−v) − L(t,q,v)|` or of
/// `|H(−t, R₁(q,p)) − H(t,q,p)|`.
pub fn check_symmetry(spec: Symmetric<'_>, theta: &OneForm, samples: usize) -> f64 {
    let n = match &spec {
        Symmetric::Lagrangian(l) => l.dim(),
        Symmetric::Hamiltonian(h) => h.dim(),
    };
    let periods = vec![1.0; n];
    let mut worst: f64 = 0.0;
    for s in fiber_samples(&periods, 3.0, samples) {
        let d = match &spec {
            Symmetric::Lagrangian(l) => {
                let neg: Vec<f64> = s.w.iter().map(|x| -x).collect();
                l.value(-s.t, &s.q, &neg) - l.value(s.t, &s.q, &s.w)
            }
            Symmetric::Hamiltonian(h) => {
                let x = PhasePoint { q: s.q.clone(), p: s.w.clone() };
                let r = involution_r1(theta, &x);
                h.value(-s.t, &r.q, &r.p) - h.value(s.t, &s.q, &s.w)
            }
        };
        worst = worst.max(d.abs());
    }
    worst
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TonelliReport {
    pub min_fiber_eigenvalue: f64,
    /// `min over directions of f(t,q,r·u)/r` at the ladder radii.
    pub growth_ladder: Vec<(f64, f64)>,
    pub convex: bool,
    pub superlinear: bool,
}

/// Sampled (L1)/(L2) or (H1)/(H2) certificate: positive fiber Hessian and
/// growth of `f/|w|` along a radial ladder.
pub fn check_tonelli(f: &dyn FiberFunction, samples: usize) -> TonelliReport {
    let n = f.dim();
    let periods = vec![1.0; n];
    let mut min_eig = f64::INFINITY;
    for s in fiber_samples(&periods, 4.0, samples) {
        let jet = f.jet(s.t, &s.q, &s.w);
        let e = jet.dww.symmetric_eigenvalues().min();
        min_eig = min_eig.min(e);
    }
    let base = fiber_samples(&periods, 1.0, samples.min(64));
    let dirs = unit_directions(n, 16);
    let radii = [1.0, 4.0, 16.0, 64.0, 256.0];
    let growth_ladder: Vec<(f64, f64)> = radii
        .iter()
        .map(|&r| {
            let mut m = f64::INFINITY;
            for s in &base {
                for u in &dirs {
                    let w: Vec<f64> = u.iter().map(|x| x * r).collect();
                    m = m.min(f.value(s.t, &s.q, &w) / r);
                }
            }
            (r, m)
        })
        .collect();
    let superlinear = growth_ladder.windows(2).all(|w| w[1].1 > w[0].1)
        && growth_ladder.last().map(|x| x.1 > 2.0 * growth_ladder[1].1.max(1.0)).unwrap_or(false);
    TonelliReport {
        min_fiber_eigenvalue: min_eig,
        growth_ladder,
        convex: min_eig > 0.0,
        superlinear,
    }
}

/// `2π` as used by the built-in trigonometric families.
pub const TWO_PI: f64 = 2.0 * PI;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn theta03() -> OneForm {
        OneForm::from_exprs(&["0.3"], 1).unwrap()
    }

    fn sample_points(count: usize) -> Vec<PhasePoint> {
        crate::sampling::fiber_samples(&[1.0], 2.0, count)
            .into_iter()
            .map(|s| PhasePoint { q: s.q, p: s.w })
            .collect()
    }

    #[test]
    fn r1_examples() {
        let x = PhasePoint { q: vec![0.2], p: vec![0.5] };
        assert_eq!(involution_r1(&OneForm::zero(1), &x).p, vec![-0.5]);
        let x = PhasePoint { q: vec![0.2], p: vec![0.1] };
        let y = involution_r1(&theta03(), &x);
        assert!((y.p[0] + 0.7).abs() < 1e-15);
        assert_eq!(y.q, vec![0.2]);
    }

    #[test]
    fn r1_is_an_involution() {
        let theta = OneForm::from_exprs(&["0.3+0.2*sin(2*pi*q)"], 1).unwrap();
        for x in sample_points(100) {
            let y = involution_r1(&theta, &involution_r1(&theta, &x));
            assert!((y.p[0] - x.p[0]).abs() < 1e-14);
        }
    }

    #[test]
    fn shift_examples_and_conjugation() {
        let x = PhasePoint { q: vec![0.2], p: vec![0.1] };
        assert_eq!(momentum_shift(&OneForm::zero(1), &x, ShiftDirection::Forward), x);
        let y = momentum_shift(&theta03(), &x, ShiftDirection::Forward);
        assert!((y.p[0] + 0.2).abs() < 1e-15);
        let theta = OneForm::from_exprs(&["0.3*cos(2*pi*q)"], 1).unwrap();
        let zero = OneForm::zero(1);
        for x in sample_points(100) {
            let back = momentum_shift(
                &theta,
                &momentum_shift(&theta, &x, ShiftDirection::Inverse),
                ShiftDirection::Forward,
            );
            assert!((back.p[0] - x.p[0]).abs() < 1e-15);
            let a = momentum_shift(&theta, &x, ShiftDirection::Inverse);
            let b = involution_r1(&zero, &a);
            let c = momentum_shift(&theta, &b, ShiftDirection::Forward);
            let d = involution_r1(&theta, &x);
            assert!((c.p[0] - d.p[0]).abs() < 1e-14);
        }
    }

    #[test]
    fn fixed_set_examples() {
        assert_eq!(fixed_set_point(&OneForm::zero(1), &[0.4]).p, vec![0.0]);
        assert!((fixed_set_point(&theta03(), &[0.4]).p[0] + 0.3).abs() < 1e-15);
        let theta = OneForm::from_exprs(&["sin(2*pi*q1)", "0.2*cos(2*pi*(q1+q2))"], 2).unwrap();
        for s in crate::sampling::halton(2, 100) {
            let x = fixed_set_point(&theta, &s);
            let y = involution_r1(&theta, &x);
            let err: f64 = x.p.iter().zip(&y.p).map(|(a, b)| (a - b).abs()).sum();
            assert!(err < 1e-14);
        }
    }

    #[test]
    fn magnetic_lagrangian_examples() {
        let l = kinetic(1);
        let lt = magnetic_lagrangian(&l, &OneForm::zero(1));
        assert_eq!(lt.value(0.0, &[0.1], &[2.0]), l.value(0.0, &[0.1], &[2.0]));
        let lt = magnetic_lagrangian(&l, &theta03());
        assert!((lt.value(0.0, &[0.1], &[2.0]) - 2.6).abs() < 1e-15);
    }

    #[test]
    fn magnetic_term_breaks_reversibility_by_exactly_twice_theta() {
        // L_θ(−t,q,−v) − L_θ(t,q,v) = −2θ(q)[v] for reversible L
        let theta = OneForm::from_exprs(&["0.3+0.1*cos(2*pi*q)"], 1).unwrap();
        let l = pendulum(1.0);
        assert!(l.reversible);
        let lt = magnetic_lagrangian(&l, &theta);
        assert!(!lt.reversible);
        for s in crate::sampling::fiber_samples(&[1.0], 3.0, 200) {
            let lhs = lt.value(-s.t, &s.q, &[-s.w[0]]) - lt.value(s.t, &s.q, &s.w);
            let rhs = -2.0 * theta.eval(&s.q)[0] * s.w[0];
            assert!((lhs - rhs).abs() < 1e-13);
        }
        // subtracting θ[v] from a reversible L_θ recovers it exactly
        let minus = OneForm::from_exprs(&["-0.3-0.1*cos(2*pi*q)"], 1).unwrap();
        let back = magnetic_lagrangian(&lt, &minus);
        assert!(back.reversible);
    }

    #[test]
    fn magnetic_jet_preserves_fiber_hessian_and_matches_fd() {
        let theta = OneForm::from_exprs(&["sin(2*pi*q2)", "0.5*cos(2*pi*q1)*sin(2*pi*q2)"], 2).unwrap();
        let base = LagrangianSpec::new(
            Arc::new(ExprFunction::lagrangian("0.5*(v1^2+v2^2) + 0.1*v1^4 - cos(2*pi*q1)", 2).unwrap()),
            "l",
        );
        let lt = magnetic_lagrangian(&base, &theta);
        let (t, q, v) = (0.2, [0.3, 0.7], [0.4, -0.9]);
        let j0 = base.jet(t, &q, &v);
        let j = lt.jet(t, &q, &v);
        assert_eq!(j.dww, j0.dww);
        let h = 1e-6;
        for k in 0..2 {
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            let fd = (lt.value(t, &qp, &v) - lt.value(t, &qm, &v)) / (2.0 * h);
            assert!((fd - j.dq[k]).abs() < 1e-7);
            let jp = lt.jet(t, &qp, &v);
            let jm = lt.jet(t, &qm, &v);
            for i in 0..2 {
                let fdq = (jp.dq[i] - jm.dq[i]) / (2.0 * h);
                assert!((fdq - j.dqq[(i, k)]).abs() < 1e-6);
                let fdw = (jp.dw[i] - jm.dw[i]) / (2.0 * h);
                assert!((fdw - j.dqw[(k, i)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn symmetry_checks() {
        let zero = OneForm::zero(1);
        let h = HamiltonianSpec::new(Arc::new(ExprFunction::hamiltonian("p^2/2", 1).unwrap()), &zero, "h");
        assert_eq!(check_symmetry(Symmetric::Hamiltonian(&h), &zero, 1000), 0.0);
        assert!(h.symmetric);
        let theta = theta03();
        let h = HamiltonianSpec::new(
            Arc::new(ExprFunction::hamiltonian("(p+0.3)^2/2", 1).unwrap()),
            &theta,
            "h",
        );
        assert!(check_symmetry(Symmetric::Hamiltonian(&h), &theta, 1000) < 1e-14);
        let h = HamiltonianSpec::new(Arc::new(ExprFunction::hamiltonian("p^3", 1).unwrap()), &zero, "h");
        assert!(check_symmetry(Symmetric::Hamiltonian(&h), &zero, 1000) > 0.1);
        assert!(!h.symmetric);
    }

    #[test]
    fn shifted_hamiltonian_jet_matches_fd() {
        let theta = OneForm::from_exprs(&["0.2*sin(2*pi*q2)", "0.3*cos(2*pi*q1)"], 2).unwrap();
        let base: Arc<dyn FiberFunction> =
            Arc::new(ExprFunction::hamiltonian("0.5*(p1^2+p2^2) + 0.1*p1^4 + cos(2*pi*q1)*p2", 2).unwrap());
        let s = Shifted::new(base, theta, 1.0);
        let (t, q, p) = (0.1, [0.21, 0.63], [0.5, -0.4]);
        let j = s.jet(t, &q, &p);
        let h = 1e-6;
        for k in 0..2 {
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            let fd = (s.value(t, &qp, &p) - s.value(t, &qm, &p)) / (2.0 * h);
            assert!((fd - j.dq[k]).abs() < 1e-7);
            let jp = s.jet(t, &qp, &p);
            let jm = s.jet(t, &qm, &p);
            for i in 0..2 {
                assert!(((jp.dq[i] - jm.dq[i]) / (2.0 * h) - j.dqq[(i, k)]).abs() < 1e-6);
                assert!(((jp.dw[i] - jm.dw[i]) / (2.0 * h) - j.dqw[(k, i)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn evaluations_are_lattice_periodic() {
        let theta = OneForm::from_exprs(&["0.3+0.2*sin(2*pi*q1)*cos(2*pi*q2)", "cos(4*pi*q1)"], 2).unwrap();
        let l = magnetic_lagrangian(
            &LagrangianSpec::new(
                Arc::new(Mechanical::new(1.0, 0.0, Potential::parse("cos(2*pi*q1)+0.5*sin(2*pi*q2)", 2).unwrap()).unwrap()),
                "m",
            ),
            &theta,
        );
        for s in crate::sampling::fiber_samples(&[1.0, 1.0], 2.0, 100) {
            let shifted = [s.q[0] + 1.0, s.q[1] - 1.0];
            assert!((l.value(s.t, &s.q, &s.w) - l.value(s.t, &shifted, &s.w)).abs() < 1e-12);
            assert!((theta.eval(&s.q) - theta.eval(&shifted)).norm() < 1e-12);
        }
    }

    #[test]
    fn torus_distance_uses_minimal_lift() {
        let t = TorusSpace::new(1);
        assert!((t.distance(&[0.9], &[0.1]) - 0.2).abs() < 1e-15);
        assert!((t.min_lift(&[0.9], &[0.1])[0] - 0.2).abs() < 1e-15);
        assert_eq!(t.reduce(&[-0.25]), vec![0.75]);
        assert!(TorusSpace::with_periods(vec![1.0, -2.0]).is_err());
        assert_eq!(TorusSpace::with_periods(vec![2.0, 1.0]).unwrap().injectivity_radius(), 0.5);
    }

    #[test]
    fn tonelli_certificates() {
        let r = check_tonelli(kinetic(2).f.as_ref(), 200);
        assert!(r.convex && r.superlinear);
        assert!((r.min_fiber_eigenvalue - 1.0).abs() < 1e-14);
        let linear = ExprFunction::lagrangian("v + 0.5*v^2*0", 1).unwrap();
        let r = check_tonelli(&linear, 50);
        assert!(!r.convex && !r.superlinear);
    }

    proptest! {
        #[test]
        fn involution_and_shift_invariants(q in -2.0f64..2.0, p in -5.0f64..5.0, a in -1.0f64..1.0, b in -1.0f64..1.0) {
            let theta = OneForm::from_exprs(&[&format!("{a} + {b}*sin(2*pi*q)")], 1).unwrap();
            let x = PhasePoint { q: vec![q], p: vec![p] };
            let back = involution_r1(&theta, &involution_r1(&theta, &x));
            prop_assert!((back.p[0] - p).abs() < 1e-12);
            let there = momentum_shift(&theta, &x, ShiftDirection::Forward);
            let again = momentum_shift(&theta, &there, ShiftDirection::Inverse);
            prop_assert!((again.p[0] - p).abs() < 1e-12);
            let fixed = fixed_set_point(&theta, &[q]);
            prop_assert!((involution_r1(&theta, &fixed).p[0] - fixed.p[0]).abs() < 1e-12);
            // Φ⁻¹ maps Fix(R₁) onto the zero section
            prop_assert!((momentum_shift(&theta, &fixed, ShiftDirection::Inverse).p[0]).abs() < 1e-12);
        }
    }
}
