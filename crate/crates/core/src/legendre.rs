//! Fenchel/Legendre duality between Lagrangian and Hamiltonian specs.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{
    FiberFunction, HamiltonianSpec, Jet, LagrangianSpec, OneForm, PhasePoint, Shifted, TangentPoint,
};

pub const NEWTON_TOL: f64 = 1e-12;
pub const NEWTON_MAX_ITER: usize = 50;

/// Solves `∂_w F(t,q,w) = x` for the maximiser of `w·x − F(t,q,w)`.
///
/// Returns `(w*, w*·x − F(t,q,w*))`.
pub fn conjugate_point(
    f: &dyn FiberFunction,
    t: f64,
    q: &[f64],
    x: &[f64],
    start: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, f64)> {
    let n = f.dim();
    let xv = DVector::from_column_slice(x);
    let mut w = match start {
        Some(s) => DVector::from_column_slice(s),
        None => DVector::zeros(n),
    };
    let objective = |w: &DVector<f64>| w.dot(&xv) - f.value(t, q, w.as_slice());
    let scale = 1.0 + xv.amax();
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let jet = f.jet(t, q, w.as_slice());
        let r = &xv - &jet.dw;
        residual = r.amax();
        if !residual.is_finite() {
            break;
        }
        if residual < tol * scale {
            return Ok((w.clone(), w.dot(&xv) - jet.value));
        }
        let d = match jet.dww.clone().cholesky() {
            Some(ch) => ch.solve(&r),
            None => r.clone(),
        };
        let g0 = w.dot(&xv) - jet.value;
        let slope = r.dot(&d);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = &w + &d * alpha;
            let g = objective(&trial);
            if g.is_finite() && g >= g0 + 1e-4 * alpha * slope - 1e-15 * g0.abs().max(1.0) {
                w = trial;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            w += &d * alpha;
        }
    }
    Err(Error::NonConvergence { iterations: max_iter, residual })
}

/// `L(t,q,v) = max_p {p·v − H(t,q,p)}` with its maximiser.
pub fn fenchel_l_from_h(h: &HamiltonianSpec, t: f64, q: &[f64], v: &[f64]) -> Result<(f64, DVector<f64>)> {
    let start = h.f.closed_form_dual().map(|l| l.jet(t, q, v).dw);
    let (p, val) = conjugate_point(
        h.f.as_ref(),
        t,
        q,
        v,
        start.as_ref().map(|s| s.as_slice()),
        NEWTON_TOL,
        NEWTON_MAX_ITER,
    )?;
    Ok((val, p))
}

/// `H(t,q,p) = max_v {p·v − L(t,q,v)}` with its maximiser.
pub fn fenchel_h_from_l(l: &LagrangianSpec, t: f64, q: &[f64], p: &[f64]) -> Result<(f64, DVector<f64>)> {
    let start = l.f.closed_form_dual().map(|h| h.jet(t, q, p).dw);
    let (v, val) = conjugate_point(
        l.f.as_ref(),
        t,
        q,
        p,
        start.as_ref().map(|s| s.as_slice()),
        NEWTON_TOL,
        NEWTON_MAX_ITER,
    )?;
    Ok((val, v))
}

/// `(q, p) ↦ (q, ∂_p H(t,q,p))`.
pub fn legendre_map(h: &HamiltonianSpec, x: &PhasePoint, t: f64) -> TangentPoint {
    let jet = h.jet(t, &x.q, &x.p);
    TangentPoint { q: x.q.clone(), v: jet.dw.as_slice().to_vec() }
}

/// Solves `∂_p H(t,q,p) = v`.
pub fn dual_momentum(h: &HamiltonianSpec, t: f64, q: &[f64], v: &[f64]) -> Result<DVector<f64>> {
    fenchel_l_from_h(h, t, q, v).map(|(_, p)| p)
}

/// The Fenchel dual of a fiber function, evaluated pointwise by Newton, with
/// partials from the implicit function theorem.
pub struct Dual {
    base: Arc<dyn FiberFunction>,
}

impl Dual {
    pub fn new(base: Arc<dyn FiberFunction>) -> Self {
        Dual { base }
    }

    fn solve(&self, t: f64, q: &[f64], x: &[f64]) -> Option<(DVector<f64>, f64)> {
        conjugate_point(self.base.as_ref(), t, q, x, None, NEWTON_TOL, NEWTON_MAX_ITER).ok()
    }
}

fn nan_jet(n: usize) -> Jet {
    let mut j = Jet::zeros(n);
    j.value = f64::NAN;
    j.dw.fill(f64::NAN);
    j.dq.fill(f64::NAN);
    j
}

impl FiberFunction for Dual {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn jet(&self, t: f64, q: &[f64], x: &[f64]) -> Jet {
        let n = self.dim();
        let Some((w, value)) = self.solve(t, q, x) else {
            return nan_jet(n);
        };
        let b = self.base.jet(t, q, w.as_slice());
        let Some(inv) = b.dww.clone().try_inverse() else {
            return nan_jet(n);
        };
        let inv: DMatrix<f64> = (&inv + inv.transpose()) * 0.5;
        let qw_inv = &b.dqw * &inv;
        let dqq = -&b.dqq + &qw_inv * b.dqw.transpose();
        Jet {
            value,
            dq: -&b.dq,
            dw: w,
            dqq: (&dqq + dqq.transpose()) * 0.5,
            dqw: -qw_inv,
            dww: inv.clone(),
            dtw: -(&inv * &b.dtw),
        }
    }

    fn value(&self, t: f64, q: &[f64], x: &[f64]) -> f64 {
        self.solve(t, q, x).map(|(_, v)| v).unwrap_or(f64::NAN)
    }

    fn closed_form_dual(&self) -> Option<Arc<dyn FiberFunction>> {
        Some(self.base.clone())
    }
}

fn dual_function(f: &Arc<dyn FiberFunction>) -> Arc<dyn FiberFunction> {
    f.closed_form_dual().unwrap_or_else(|| Arc::new(Dual::new(f.clone())))
}

/// The Hamiltonian dual to `l`; `theta` is used only to record (H3).
pub fn hamiltonian_of(l: &LagrangianSpec, theta: &OneForm) -> HamiltonianSpec {
    HamiltonianSpec::new(dual_function(&l.f), theta, format!("dual({})", l.label))
}

/// The Lagrangian dual to `h`.
pub fn lagrangian_of(h: &HamiltonianSpec) -> LagrangianSpec {
    LagrangianSpec::new(dual_function(&h.f), format!("dual({})", h.label))
}

/// The twisted Hamiltonian `H(t,q,p) = H_θ(t, q, p + θ(q))` whose flow on
/// `(T*M, ω₀ − π*dθ)` projects to the Euler-Lagrange flow of the reversible
/// `l_theta`. It is `R₁`-symmetric whenever `l_theta` is reversible.
pub fn twisted_hamiltonian(l_theta: &LagrangianSpec, theta: &OneForm) -> HamiltonianSpec {
    let h0 = dual_function(&l_theta.f);
    let f = Shifted::new(h0, theta.clone(), 1.0);
    HamiltonianSpec::new(Arc::new(f), theta, format!("twisted({})", l_theta.label))
}
