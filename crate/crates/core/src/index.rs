//! Linearisation along brake orbits, fundamental solutions, Morse indices of
//! the discretised Hessian, and Conley-Zehnder and `L₀` Maslov-type indices.
//!
//! The linearised system is `u̇ = JB(t)u` with `u = (ξ, y)`, `ξ` the momentum
//! variation, `y` the position variation, `J = [[0, −I], [I, 0]]` and
//! `ω(u, v) = ⟨Ju, v⟩ = dξ∧dy`. `Q = ∂²L/∂v∂q`, so `ξ = Pẏ + Qy`.
//!
//! Maslov-type indices are computed as spectral flow: for a Lagrangian frame
//! `Z = [X; Y]` the phase of `det(X + iY)` is tracked continuously, and the
//! endpoint eigen-angles of `W = VVᵀ`, `V = U₀*U`, close the count.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use crate::dynamics::{integrate, integrate_el, IntegratorOptions, Trajectory};
use crate::error::{Error, Result};
use crate::loopspace::{gram, hessian, Space, SymmetricLoop};
use crate::model::{LagrangianSpec, TangentPoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexPair {
    pub index: i64,
    pub nullity: usize,
}

impl IndexPair {
    pub fn new(index: i64, nullity: usize) -> Self {
        IndexPair { index, nullity }
    }
}

#[derive(Clone, Debug)]
pub struct LinearizedCoefficients {
    pub times: Vec<f64>,
    pub p: Vec<DMatrix<f64>>,
    pub q: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    /// `max ‖P(−t) − P(t)‖ + ‖Q(−t) + Q(t)‖ + ‖R(−t) − R(t)‖` over nodes.
    pub symmetry_residual: f64,
}

fn coefficients_at(l: &LagrangianSpec, t: f64, q: &[f64], v: &[f64]) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let jet = l.jet(t, q, v);
    (jet.dww, jet.dqw.transpose(), jet.dqq)
}

/// `P, Q, R` at the grid nodes of `γ`, velocities from the even
/// trigonometric interpolant.
pub fn linearize(l: &LagrangianSpec, g: &SymmetricLoop) -> LinearizedCoefficients {
    let coeffs = g.cosine_coefficients();
    let m = g.period as f64;
    let n = g.cells();
    let times: Vec<f64> = (0..n).map(|j| j as f64 * g.step()).collect();
    let vel = |t: f64| -> Vec<f64> {
        let mut v = vec![0.0; g.dim];
        for (k, a) in coeffs.iter().enumerate() {
            let w = TAU * k as f64 / m;
            let s = -w * (w * t).sin();
            for (vi, ai) in v.iter_mut().zip(a) {
                *vi += ai * s;
            }
        }
        v
    };
    let mut p = Vec::with_capacity(n);
    let mut q = Vec::with_capacity(n);
    let mut r = Vec::with_capacity(n);
    for (j, &t) in times.iter().enumerate() {
        let (a, b, c) = coefficients_at(l, t, g.node(j as i64), &vel(t));
        p.push(a);
        q.push(b);
        r.push(c);
    }
    let mut sym: f64 = 0.0;
    for j in 0..n {
        let k = (n - j) % n;
        let d = (&p[j] - &p[k]).amax() + (&q[j] + &q[k]).amax() + (&r[j] - &r[k]).amax();
        sym = sym.max(d);
    }
    LinearizedCoefficients { times, p, q, r, symmetry_residual: sym }
}

/// `B = [[P⁻¹, −P⁻¹Q], [−QᵀP⁻¹, QᵀP⁻¹Q − R]]`.
pub fn assemble_b(p: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, node: usize) -> Result<DMatrix<f64>> {
    let n = p.nrows();
    let pi = p.clone().cholesky().ok_or(Error::SingularP { node })?.inverse();
    let mut b = DMatrix::zeros(2 * n, 2 * n);
    let piq = &pi * q;
    b.view_mut((0, 0), (n, n)).copy_from(&pi);
    b.view_mut((0, n), (n, n)).copy_from(&(-&piq));
    b.view_mut((n, 0), (n, n)).copy_from(&(-piq.transpose()));
    b.view_mut((n, n), (n, n)).copy_from(&(q.transpose() * &piq - r));
    Ok((&b + b.transpose()) * 0.5)
}

/// `B` at every node of a linearisation.
pub fn assemble_b_samples(c: &LinearizedCoefficients) -> Result<Vec<DMatrix<f64>>> {
    (0..c.times.len()).map(|j| assemble_b(&c.p[j], &c.q[j], &c.r[j], j)).collect()
}

pub fn standard_j(n: usize) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        j[(i, n + i)] = -1.0;
        j[(n + i, i)] = 1.0;
    }
    j
}

/// A time-dependent symmetric `B(t)`, possibly driven by auxiliary state.
pub trait LinearField: Sync {
    /// Half the phase dimension.
    fn dim(&self) -> usize;
    fn aux_init(&self) -> DVector<f64> {
        DVector::zeros(0)
    }
    fn aux_rate(&self, _t: f64, _aux: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(DVector::zeros(0))
    }
    fn b(&self, t: f64, aux: &DVector<f64>) -> Result<DMatrix<f64>>;
}

pub struct ConstantB(pub DMatrix<f64>);

impl LinearField for ConstantB {
    fn dim(&self) -> usize {
        self.0.nrows() / 2
    }
    fn b(&self, _t: f64, _aux: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.0.clone())
    }
}

/// Periodic piecewise-linear interpolation of nodal `B` samples.
pub struct SampledB {
    pub period: f64,
    pub samples: Vec<DMatrix<f64>>,
}

impl LinearField for SampledB {
    fn dim(&self) -> usize {
        self.samples[0].nrows() / 2
    }
    fn b(&self, t: f64, _aux: &DVector<f64>) -> Result<DMatrix<f64>> {
        let n = self.samples.len();
        let s = t.rem_euclid(self.period) / self.period * n as f64;
        let j = (s.floor() as usize).min(n - 1);
        let a = s - j as f64;
        Ok(&self.samples[j] * (1.0 - a) + &self.samples[(j + 1) % n] * a)
    }
}

/// `B` along the Euler-Lagrange solution through `(q₀, v₀)`, integrated
/// alongside the fundamental solution.
pub struct OrbitB {
    pub lagrangian: LagrangianSpec,
    pub q0: Vec<f64>,
    pub v0: Vec<f64>,
}

impl LinearField for OrbitB {
    fn dim(&self) -> usize {
        self.lagrangian.dim()
    }
    fn aux_init(&self) -> DVector<f64> {
        DVector::from_iterator(2 * self.dim(), self.q0.iter().chain(&self.v0).cloned())
    }
    fn aux_rate(&self, t: f64, aux: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.dim();
        let y = TangentPoint { q: aux.rows(0, n).iter().cloned().collect(), v: aux.rows(n, n).iter().cloned().collect() };
        let (qd, vd) = crate::dynamics::el_field(&self.lagrangian, t, &y)?;
        let mut out = DVector::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&qd);
        out.rows_mut(n, n).copy_from(&vd);
        Ok(out)
    }
    fn b(&self, t: f64, aux: &DVector<f64>) -> Result<DMatrix<f64>> {
        let n = self.dim();
        let q: Vec<f64> = aux.rows(0, n).iter().cloned().collect();
        let v: Vec<f64> = aux.rows(n, n).iter().cloned().collect();
        let (p, qq, r) = coefficients_at(&self.lagrangian, t, &q, &v);
        assemble_b(&p, &qq, &r, 0)
    }
}

/// Newton on `q₀ ↦ v(m/2)` for the Euler-Lagrange flow started at rest,
/// turning an approximate even critical loop into an accurate brake point.
pub fn polish_brake_point(l: &LagrangianSpec, q0: &[f64], period: f64, tol: f64) -> Result<Vec<f64>> {
    let n = l.dim();
    let opts = IntegratorOptions::with_tol(1e-13);
    let resid = |q: &DVector<f64>| -> Result<DVector<f64>> {
        let y = TangentPoint { q: q.as_slice().to_vec(), v: vec![0.0; n] };
        let tr = integrate_el(l, &y, 0.0, 0.5 * period, &opts)?;
        Ok(tr.last().rows(n, n).into_owned())
    };
    let mut q = DVector::from_column_slice(q0);
    let mut r = resid(&q)?;
    for it in 0..30 {
        if r.amax() < tol {
            return Ok(q.as_slice().to_vec());
        }
        let mut jac = DMatrix::zeros(n, n);
        let h = 1e-6;
        for j in 0..n {
            let mut a = q.clone();
            let mut b = q.clone();
            a[j] += h;
            b[j] -= h;
            jac.set_column(j, &((resid(&a)? - resid(&b)?) / (2.0 * h)));
        }
        let step = jac
            .svd(true, true)
            .solve(&(-&r), 1e-14)
            .map_err(|e| Error::SolverFailure(e.to_string()))?;
        let mut alpha = 1.0;
        loop {
            let trial = &q + &step * alpha;
            let rt = resid(&trial)?;
            if rt.amax() < r.amax() || alpha < 1e-3 {
                q = trial;
                r = rt;
                break;
            }
            alpha *= 0.5;
        }
        if it == 29 {
            break;
        }
    }
    if r.amax() < tol {
        Ok(q.as_slice().to_vec())
    } else {
        Err(Error::NonConvergence { iterations: 30, residual: r.amax() })
    }
}

/// Sampled fundamental solution `Ψ` of `u̇ = JBu`, `Ψ(0) = I`.
#[derive(Clone, Debug)]
pub struct SymplecticPath {
    pub dim: usize,
    pub end: f64,
    trajectory: Trajectory,
}

impl SymplecticPath {
    pub fn psi(&self, t: f64) -> DMatrix<f64> {
        let m = 2 * self.dim;
        let x = self.trajectory.state(t);
        DMatrix::from_column_slice(m, m, &x.as_slice()[..m * m])
    }

    pub fn times(&self) -> &[f64] {
        &self.trajectory.times
    }

    pub fn matrices(&self) -> Vec<DMatrix<f64>> {
        self.times().iter().map(|t| self.psi(*t)).collect()
    }

    /// `max ‖ΨᵀJΨ − J‖` over the accepted steps.
    pub fn symplectic_defect(&self) -> f64 {
        let j = standard_j(self.dim);
        self.times().iter().map(|t| {
            let p = self.psi(*t);
            (p.transpose() * &j * &p - &j).amax()
        }).fold(0.0, f64::max)
    }
}

pub fn fundamental_solution(field: &dyn LinearField, end: f64, tol: f64) -> Result<SymplecticPath> {
    let n = field.dim();
    let m = 2 * n;
    let j = standard_j(n);
    let aux0 = field.aux_init();
    let na = aux0.len();
    let mut x0 = DVector::zeros(m * m + na);
    for i in 0..m {
        x0[i * m + i] = 1.0;
    }
    x0.rows_mut(m * m, na).copy_from(&aux0);
    let rate = |t: f64, x: &DVector<f64>| -> Result<DVector<f64>> {
        let aux = x.rows(m * m, na).into_owned();
        let b = field.b(t, &aux)?;
        let psi = DMatrix::from_column_slice(m, m, &x.as_slice()[..m * m]);
        let d = &j * b * psi;
        let mut out = DVector::zeros(m * m + na);
        out.rows_mut(0, m * m).copy_from_slice(d.as_slice());
        if na > 0 {
            out.rows_mut(m * m, na).copy_from(&field.aux_rate(t, &aux)?);
        }
        Ok(out)
    };
    let opts = IntegratorOptions { tol, ..IntegratorOptions::default() };
    let trajectory = integrate(rate, &x0, 0.0, end, &opts)?;
    Ok(SymplecticPath { dim: n, end, trajectory })
}

fn c(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    m.map(|x| Complex64::new(x, 0.0))
}

fn cdet(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Complex64 {
    let z = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| Complex64::new(x[(i, j)], y[(i, j)]));
    z.determinant()
}

/// Orthonormal complex frame `(X + iY)(ZᵀZ)^{-1/2}`.
fn unitary_frame(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<Complex64> {
    let g = x.transpose() * x + y.transpose() * y;
    let e = g.symmetric_eigen();
    let inv_sqrt = &e.eigenvectors
        * DMatrix::from_diagonal(&e.eigenvalues.map(|l| 1.0 / l.sqrt()))
        * e.eigenvectors.transpose();
    let z = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| Complex64::new(x[(i, j)], y[(i, j)]));
    z * c(&inv_sqrt)
}

/// Eigen-angles in `[0, 2π)` of a symmetric unitary `W = A + iB`; `A` and
/// `B` commute, so a generic combination diagonalises both.
fn symmetric_unitary_angles(w: &DMatrix<Complex64>) -> Result<Vec<f64>> {
    let a = w.map(|z| z.re);
    let b = w.map(|z| z.im);
    let a = (&a + a.transpose()) * 0.5;
    let b = (&b + b.transpose()) * 0.5;
    for s in [0.618_033_988_749_895, 1.324_717_957_244_746, 0.377_964_473_009_227] {
        let e = (&a + &b * s).symmetric_eigen();
        let v = &e.eigenvectors;
        let mut angles = Vec::with_capacity(w.nrows());
        let mut recon = DMatrix::<Complex64>::zeros(w.nrows(), w.ncols());
        for k in 0..w.nrows() {
            let col = v.column(k);
            let re = col.dot(&(&a * col));
            let im = col.dot(&(&b * col));
            let ang = im.atan2(re).rem_euclid(TAU);
            angles.push(ang);
            let lam = Complex64::from_polar(1.0, ang);
            let cc = col.map(|x| Complex64::new(x, 0.0));
            recon += &cc * cc.transpose() * lam;
        }
        if (recon - w).iter().map(|z| z.norm()).fold(0.0, f64::max) < 1e-8 {
            return Ok(angles);
        }
    }
    Err(Error::SolverFailure("could not diagonalise the endpoint unitary".into()))
}

/// Snap tolerance for endpoint eigen-angles at `1`.
pub const ANGLE_SNAP: f64 = 1e-6;

/// Net counter-clockwise passages through `1` of the eigenvalues of
/// `W(t)`, endpoint eigenvalues at `1` counted as arrived. Returns the count
/// and the number of endpoint angles snapped to zero.
fn spectral_flow(
    frame: &dyn Fn(f64) -> (DMatrix<f64>, DMatrix<f64>),
    u0: &DMatrix<Complex64>,
    end: f64,
) -> Result<(i64, usize)> {
    let pieces = ((end * 64.0).ceil() as usize).max(64);
    let mut phase = 0.0;
    let (x, y) = frame(0.0);
    let mut prev = cdet(&x, &y);
    let mut t_prev = 0.0;
    for k in 1..=pieces {
        let t = end * k as f64 / pieces as f64;
        phase += unwrap_between(frame, t_prev, prev, t, 0)?;
        let (x, y) = frame(t);
        prev = cdet(&x, &y);
        t_prev = t;
    }
    let (x, y) = frame(end);
    let u = unitary_frame(&x, &y);
    let v = u0.adjoint() * u;
    let w = &v * v.transpose();
    let angles = symmetric_unitary_angles(&w)?;
    let mut sum = 0.0;
    let mut zeros = 0;
    for a in angles {
        if a < ANGLE_SNAP || TAU - a < ANGLE_SNAP {
            zeros += 1;
        } else {
            sum += a - TAU;
        }
    }
    let raw = (2.0 * phase - sum) / TAU;
    let rounded = raw.round();
    if (raw - rounded).abs() > 1e-3 {
        return Err(Error::SolverFailure(format!("spectral flow is not an integer: {raw}")));
    }
    Ok((rounded as i64, zeros))
}

fn unwrap_between(
    frame: &dyn Fn(f64) -> (DMatrix<f64>, DMatrix<f64>),
    t0: f64,
    d0: Complex64,
    t1: f64,
    depth: usize,
) -> Result<f64> {
    let (x, y) = frame(t1);
    let d1 = cdet(&x, &y);
    let jump = (d1 / d0).arg();
    if jump.abs() <= 1.0 {
        return Ok(jump);
    }
    if depth > 40 {
        return Err(Error::IllConditionedCrossing(format!("phase of det(X+iY) jumps near t={t0}")));
    }
    let tm = 0.5 * (t0 + t1);
    let (xm, ym) = frame(tm);
    let dm = cdet(&xm, &ym);
    Ok(unwrap_between(frame, t0, d0, tm, depth + 1)? + unwrap_between(frame, tm, dm, t1, depth + 1)?)
}

/// Splits a `4N × k` frame `[A; C]` of `(ℝ²ᴺ, −ω) ⊕ (ℝ²ᴺ, ω)` into `X + iY`
/// coordinates; `(−ω)` swaps the roles of `ξ` and `y` in the first factor.
fn split_graph(a: &DMatrix<f64>, c: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = a.nrows();
    let n = m / 2;
    let k = a.ncols();
    let mut x = DMatrix::zeros(m, k);
    let mut y = DMatrix::zeros(m, k);
    x.view_mut((0, 0), (n, k)).copy_from(&a.rows(n, n));
    x.view_mut((n, 0), (n, k)).copy_from(&c.rows(0, n));
    y.view_mut((0, 0), (n, k)).copy_from(&a.rows(0, n));
    y.view_mut((n, 0), (n, k)).copy_from(&c.rows(n, n));
    (x, y)
}

fn diagonal_reference(m: usize) -> DMatrix<Complex64> {
    let id = DMatrix::identity(m, m);
    let (x, y) = split_graph(&id, &id);
    unitary_frame(&x, &y)
}

fn count_small_singular(m: &DMatrix<f64>, scale: f64) -> usize {
    m.clone().singular_values().iter().filter(|s| **s < 1e-6 * scale).count()
}

/// `Z(ZᵀZ)^{-1/2}`: same column span, positive determinant change.
fn orthonormalize(z: &DMatrix<f64>) -> DMatrix<f64> {
    let e = (z.transpose() * z).symmetric_eigen();
    let s = &e.eigenvectors
        * DMatrix::from_diagonal(&e.eigenvalues.map(|l| 1.0 / l.sqrt()))
        * e.eigenvectors.transpose();
    z * s
}

/// Growth allowed within one segment before the frame is renormalised.
const SEGMENT_GROWTH: f64 = 1e3;

#[derive(Clone, Debug)]
struct Segment {
    start: f64,
    end: f64,
    /// Static upper block of a graph frame.
    top: Option<DMatrix<f64>>,
    trajectory: Trajectory,
}

/// A Lagrangian frame transported by `u̇ = JBu`, renormalised on
/// segments so that hyperbolic growth never overflows. Renormalisation
/// multiplies `det(X + iY)` by a positive real, leaving its phase intact.
#[derive(Clone, Debug)]
pub struct FramePath {
    pub dim: usize,
    pub end: f64,
    cols: usize,
    segments: Vec<Segment>,
}

impl FramePath {
    /// Transports `z0` (`2N` rows); with `graph` the frame is `[A; C]`
    /// with only `C` moving, as for the graph of `Ψ`.
    fn transport(field: &dyn LinearField, z0: &DMatrix<f64>, top0: Option<DMatrix<f64>>, end: f64, tol: f64) -> Result<Self> {
        let n = field.dim();
        let m = 2 * n;
        let cols = z0.ncols();
        let j = standard_j(n);
        let opts = IntegratorOptions { tol, ..IntegratorOptions::default() };
        let mut segments = Vec::new();
        let mut z = z0.clone();
        let mut top = top0;
        let mut aux = field.aux_init();
        let na = aux.len();
        let mut t = 0.0;
        let mut len = end.min(0.5);
        while t < end {
            let t1 = (t + len).min(end);
            let mut x0 = DVector::zeros(m * cols + na);
            x0.rows_mut(0, m * cols).copy_from_slice(z.as_slice());
            x0.rows_mut(m * cols, na).copy_from(&aux);
            let rate = |s: f64, x: &DVector<f64>| -> Result<DVector<f64>> {
                let a = x.rows(m * cols, na).into_owned();
                let zz = DMatrix::from_column_slice(m, cols, &x.as_slice()[..m * cols]);
                let d = &j * field.b(s, &a)? * zz;
                let mut out = DVector::zeros(m * cols + na);
                out.rows_mut(0, m * cols).copy_from_slice(d.as_slice());
                if na > 0 {
                    out.rows_mut(m * cols, na).copy_from(&field.aux_rate(s, &a)?);
                }
                Ok(out)
            };
            let tr = match integrate(rate, &x0, t, t1, &opts) {
                Ok(tr) => tr,
                Err(Error::BlowUp { .. }) if len > 1e-6 => {
                    len *= 0.5;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let last = tr.last().clone();
            let zend = DMatrix::from_column_slice(m, cols, &last.as_slice()[..m * cols]);
            let growth = zend.amax();
            if growth > SEGMENT_GROWTH && t1 - t > 1e-6 {
                len *= 0.5;
                continue;
            }
            segments.push(Segment { start: t, end: t1, top: top.clone(), trajectory: tr });
            aux = last.rows(m * cols, na).into_owned();
            let full = match &top {
                Some(a) => {
                    let mut s = DMatrix::zeros(2 * m, cols);
                    s.view_mut((0, 0), (m, cols)).copy_from(a);
                    s.view_mut((m, 0), (m, cols)).copy_from(&zend);
                    s
                }
                None => zend,
            };
            let o = orthonormalize(&full);
            match &mut top {
                Some(a) => {
                    *a = o.rows(0, m).into_owned();
                    z = o.rows(m, m).into_owned();
                }
                None => z = o,
            }
            if growth < 0.1 * SEGMENT_GROWTH {
                len *= 2.0;
            }
            t = t1;
        }
        Ok(FramePath { dim: n, end, cols, segments })
    }

    /// The frame at `t`: `2N × cols`, or `4N × cols` for graph frames.
    pub fn frame(&self, t: f64) -> DMatrix<f64> {
        let i = self.segments.partition_point(|s| s.end < t).min(self.segments.len() - 1);
        let s = &self.segments[i];
        let m = 2 * self.dim;
        let x = s.trajectory.state(t.clamp(s.start, s.end));
        let c = DMatrix::from_column_slice(m, self.cols, &x.as_slice()[..m * self.cols]);
        match &s.top {
            Some(a) => {
                let mut z = DMatrix::zeros(2 * m, self.cols);
                z.view_mut((0, 0), (m, self.cols)).copy_from(a);
                z.view_mut((m, 0), (m, self.cols)).copy_from(&c);
                z
            }
            None => c,
        }
    }

    fn is_graph(&self) -> bool {
        self.segments[0].top.is_some()
    }
}

/// Graph of `Ψ` in `(ℝ²ᴺ ⊕ ℝ²ᴺ, (−ω) ⊕ ω)` for `t ∈ [0, end]`.
pub fn graph_path(field: &dyn LinearField, end: f64, tol: f64) -> Result<FramePath> {
    let m = 2 * field.dim();
    let id = DMatrix::identity(m, m);
    FramePath::transport(field, &id, Some(id.clone()), end, tol)
}

/// `Ψ(t)L₀` with `L₀ = {(0, y)}`.
pub fn l0_path(field: &dyn LinearField, end: f64, tol: f64) -> Result<FramePath> {
    let n = field.dim();
    let mut z = DMatrix::zeros(2 * n, n);
    z.view_mut((n, 0), (n, n)).fill_with_identity();
    FramePath::transport(field, &z, None, end, tol)
}

/// Crossing-perturbation half-width relative to the path length.
pub const CROSSING_DELTA: f64 = 1e-4;

fn frame_xy(path: &FramePath, t: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let z = path.frame(t);
    let m = 2 * path.dim;
    if path.is_graph() {
        split_graph(&z.rows(0, m).into_owned(), &z.rows(m, m).into_owned())
    } else {
        let n = path.dim;
        (z.rows(0, n).into_owned(), z.rows(n, n).into_owned())
    }
}

fn raw_flow(path: &FramePath, end: f64) -> Result<(i64, usize)> {
    let frame = |t: f64| frame_xy(path, t);
    let u0 = if path.is_graph() {
        diagonal_reference(2 * path.dim)
    } else {
        DMatrix::from_diagonal_element(path.dim, path.dim, Complex64::new(0.0, 1.0))
    };
    spectral_flow(&frame, &u0, end)
}

fn checked(path: &FramePath, end: f64, nullity: usize) -> Result<i64> {
    let delta = CROSSING_DELTA * end;
    if end + delta > path.end * (1.0 + 1e-12) {
        return Err(Error::Invalid(format!("path ends at {} before {}", path.end, end + delta)));
    }
    let (i, snapped) = raw_flow(path, end)?;
    if snapped != nullity {
        return Err(Error::IllConditionedCrossing(format!(
            "{snapped} endpoint angles at 1 but nullity {nullity}"
        )));
    }
    let (a, _) = raw_flow(path, end - delta)?;
    let (b, _) = raw_flow(path, end + delta)?;
    if (a - b).unsigned_abs() as usize > nullity {
        return Err(Error::IllConditionedCrossing(format!(
            "index jumps from {a} to {b} across the endpoint with nullity {nullity}"
        )));
    }
    Ok(i)
}

/// Conley-Zehnder pair of `Ψ` on `[0, end]`; the path must extend past
/// `end` by [`CROSSING_DELTA`]`·end`.
pub fn cz_index(path: &FramePath, end: f64) -> Result<IndexPair> {
    if !path.is_graph() {
        return Err(Error::Invalid("Conley-Zehnder index needs a graph frame".into()));
    }
    let m = 2 * path.dim;
    let z = orthonormalize(&path.frame(end));
    let nu = count_small_singular(&(z.rows(0, m) - z.rows(m, m)), 1.0);
    let i = checked(path, end, nu)?;
    Ok(IndexPair::new(i - path.dim as i64, nu))
}

/// `L₀` pair on `[0, end]`: spectral flow of `Ψ(t)L₀` against `L₀`.
pub fn l0_index(path: &FramePath, end: f64) -> Result<IndexPair> {
    if path.is_graph() {
        return Err(Error::Invalid("L0 index needs a transported L0 frame".into()));
    }
    let n = path.dim;
    let z = orthonormalize(&path.frame(end));
    let nu = count_small_singular(&z.rows(0, n).into_owned(), 1.0);
    let i = checked(path, end, nu)?;
    Ok(IndexPair::new(i - n as i64, nu))
}

/// Graph and `L₀` paths long enough for every iterate up to `k`.
pub fn iterate_paths(field: &dyn LinearField, period: f64, k: usize, tol: f64) -> Result<(FramePath, FramePath)> {
    let end = k as f64 * period * (1.0 + 2.0 * CROSSING_DELTA);
    let (g, l) = rayon::join(|| graph_path(field, end, tol), || l0_path(field, 0.5 * end, tol));
    Ok((g?, l?))
}

/// `(i(Ψ,k), ν(Ψ,k))` on `[0, kτ]` and `(i_{L₀}(Ψ,k), ν_{L₀}(Ψ,k))` on `[0, kτ/2]`.
pub fn iterated_indices(field: &dyn LinearField, period: f64, k: usize, tol: f64) -> Result<(IndexPair, IndexPair)> {
    let (g, l) = iterate_paths(field, period, k, tol)?;
    let end = k as f64 * period;
    Ok((cz_index(&g, end)?, l0_index(&l, 0.5 * end)?))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct MeanIndex {
    pub cz: f64,
    pub cz_uncertainty: f64,
    pub l0: f64,
    pub l0_uncertainty: f64,
}

fn slope(ks: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = ks.len() as f64;
    let mk = ks.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = ks.iter().map(|k| (k - mk).powi(2)).sum();
    let sxy: f64 = ks.iter().zip(ys).map(|(k, y)| (k - mk) * (y - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mk;
    let rss: f64 = ks.iter().zip(ys).map(|(k, y)| (y - a - b * k).powi(2)).sum();
    let se = if n > 2.0 { (rss / (n - 2.0) / sxx).sqrt() } else { 0.0 };
    // integer rounding alone bounds the slope error by about 1/k_max
    (b, se + 1.0 / ks.iter().cloned().fold(1.0, f64::max))
}

/// Least-squares slopes of `i(Ψ,k)` and `i_{L₀}(Ψ,k)` over `k = 1, 2, 4, …, k_max`.
pub fn mean_index(field: &dyn LinearField, period: f64, k_max: usize, tol: f64) -> Result<MeanIndex> {
    let mut ks = vec![];
    let mut k = 1;
    while k <= k_max.max(1) {
        ks.push(k);
        k *= 2;
    }
    let (g, l) = iterate_paths(field, period, *ks.last().unwrap(), tol)?;
    let pairs: Vec<(i64, i64)> = ks
        .par_iter()
        .map(|&k| {
            let end = k as f64 * period;
            Ok((cz_index(&g, end)?.index, l0_index(&l, 0.5 * end)?.index))
        })
        .collect::<Result<_>>()?;
    let kf: Vec<f64> = ks.iter().map(|k| *k as f64).collect();
    let (cz, cu) = slope(&kf, &pairs.iter().map(|p| p.0 as f64).collect::<Vec<_>>());
    let (l0, lu) = slope(&kf, &pairs.iter().map(|p| p.1 as f64).collect::<Vec<_>>());
    Ok(MeanIndex { cz, cz_uncertainty: cu, l0, l0_uncertainty: lu })
}

/// `max_node max(‖P‖, ‖R‖) + ‖Q‖` along the loop.
fn coefficient_scale(l: &LagrangianSpec, g: &SymmetricLoop) -> f64 {
    let c = linearize(l, g);
    (0..c.times.len())
        .map(|j| c.p[j].amax().max(c.r[j].amax()) + c.q[j].amax())
        .fold(0.0, f64::max)
}

/// Null threshold `100·h²·Λ` for the generalised eigenproblem `Hx = λGx`.
pub fn null_threshold(l: &LagrangianSpec, g: &SymmetricLoop) -> f64 {
    100.0 * g.step().powi(2) * coefficient_scale(l, g)
}

/// `(m⁻, m⁰)` of the discretised Hessian of the `k`-th iterate on one grid.
pub fn morse_index_on_grid(l: &LagrangianSpec, g: &SymmetricLoop, k: usize, space: Space) -> Result<IndexPair> {
    let gk = g.iterate(k)?;
    let h = hessian(l, &gk, space);
    let gm = gram(&gk, space);
    // the iterate repeats the nodes of γ with the same step, so the scale is γ's
    let eps = null_threshold(l, g);
    let neg = h.scaled_add(&gm, eps).inertia()?.negative;
    let nonpos = h.scaled_add(&gm, -eps).inertia()?.negative;
    Ok(IndexPair::new(neg as i64, nonpos - neg))
}

/// Morse pair with grid doubling until two successive grids agree.
pub fn morse_index(l: &LagrangianSpec, g: &SymmetricLoop, k: usize, space: Space) -> Result<IndexPair> {
    Ok(morse_index_stable(l, g, k, space, 4)?.0)
}

/// Returns the stable pair and the grid it stabilised on.
pub fn morse_index_stable(
    l: &LagrangianSpec,
    g: &SymmetricLoop,
    k: usize,
    space: Space,
    max_doublings: usize,
) -> Result<(IndexPair, usize)> {
    let mut grid = g.grid;
    let mut prev = morse_index_on_grid(l, g, k, space)?;
    for _ in 0..max_doublings {
        grid *= 2;
        let fine = g.resample(grid)?;
        let next = morse_index_on_grid(l, &fine, k, space)?;
        if next == prev {
            return Ok((next, grid));
        }
        prev = next;
    }
    Err(Error::NonConvergence { iterations: max_doublings, residual: f64::NAN })
}

/// Morse pairs from Fourier modes for constant `P, Q, R` on a loop of
/// period `period`: full space uses `Pω² + R + iω(Qᵀ − Q)` with each
/// eigenvalue of `j ≥ 1` counted twice; the even subspace uses `Pω² + R`.
pub fn fourier_morse_oracle(
    p: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    period: f64,
    space: Space,
) -> IndexPair {
    let n = p.nrows();
    let pmin = p.clone().symmetric_eigenvalues().min();
    let bound = r.amax() * n as f64 + q.amax() * n as f64 * 2.0;
    let mut neg = 0i64;
    let mut zero = 0usize;
    let mut j = 0usize;
    loop {
        let w = TAU * j as f64 / period;
        if j > 0 && pmin * w * w > bound + 1.0 && pmin * w * w > 2.0 * w * q.amax() * n as f64 {
            break;
        }
        let mult = if j == 0 { 1 } else { match space { Space::Full => 2, Space::Symmetric => 1 } };
        let mut count = |e: f64, scale: f64| {
            if e.abs() <= 1e-9 * scale.max(1.0) {
                zero += mult;
            } else if e < 0.0 {
                neg += mult as i64;
            }
        };
        let base = p * (w * w) + r;
        let scale = base.amax();
        match space {
            Space::Symmetric => {
                for e in base.symmetric_eigenvalues().iter() {
                    count(*e, scale);
                }
            }
            Space::Full => {
                let skew = (q.transpose() - q) * w;
                // Hermitian base + i·skew as a real symmetric 2n×2n matrix; each eigenvalue appears twice
                let mut big = DMatrix::zeros(2 * n, 2 * n);
                big.view_mut((0, 0), (n, n)).copy_from(&base);
                big.view_mut((n, n), (n, n)).copy_from(&base);
                big.view_mut((0, n), (n, n)).copy_from(&(-&skew));
                big.view_mut((n, 0), (n, n)).copy_from(&skew);
                let mut ev: Vec<f64> = big.symmetric_eigenvalues().iter().cloned().collect();
                ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
                for e in ev.iter().step_by(2) {
                    count(*e, scale);
                }
            }
        }
        j += 1;
    }
    IndexPair::new(neg, zero)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Check {
    pub name: String,
    pub lhs: String,
    pub rhs: String,
    pub pass: bool,
}

impl Check {
    fn new(name: &str, lhs: impl std::fmt::Debug, rhs: impl std::fmt::Debug, pass: bool) -> Self {
        Check { name: name.into(), lhs: format!("{lhs:?}"), rhs: format!("{rhs:?}"), pass }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct IterateReport {
    pub k: usize,
    pub morse_full: IndexPair,
    pub morse_sym: IndexPair,
    pub cz: IndexPair,
    pub l0: IndexPair,
    /// Grid on which both Morse pairs were stable over the last two doublings.
    pub stable_grid: usize,
    pub checks: Vec<Check>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RelationsReport {
    pub dim: usize,
    pub period: usize,
    pub mean: MeanIndex,
    pub iterates: Vec<IterateReport>,
    /// The `L₀` convention is pinned by calibration against the Morse identity.
    pub convention: String,
}

impl RelationsReport {
    pub fn all_pass(&self) -> bool {
        self.iterates.iter().all(|r| r.checks.iter().all(|c| c.pass))
    }

    pub fn failures(&self) -> Vec<(usize, String)> {
        self.iterates
            .iter()
            .flat_map(|r| r.checks.iter().filter(|c| !c.pass).map(move |c| (r.k, c.name.clone())))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct RelationOptions {
    pub ode_tol: f64,
    pub mean_k_max: usize,
    pub max_doublings: usize,
    /// `|î|` below this counts as zero mean index.
    pub zero_mean: f64,
}

impl Default for RelationOptions {
    fn default() -> Self {
        RelationOptions { ode_tol: 1e-12, mean_k_max: 64, max_doublings: 4, zero_mean: 0.05 }
    }
}

/// The Euler-Lagrange linear field along the brake orbit through `γ(0)`.
pub fn orbit_field(l: &LagrangianSpec, g: &SymmetricLoop) -> Result<OrbitB> {
    let q0 = polish_brake_point(l, g.half_node(0), g.period as f64, 1e-11)?;
    Ok(OrbitB { lagrangian: l.clone(), v0: vec![0.0; q0.len()], q0 })
}

/// Every index identity and inequality for the iterates `ks` of a critical
/// even loop.
pub fn verify_relations(
    l: &LagrangianSpec,
    g: &SymmetricLoop,
    ks: &[usize],
    opts: &RelationOptions,
) -> Result<RelationsReport> {
    let field = orbit_field(l, g)?;
    let n = g.dim;
    let tau = g.period as f64;
    let mean = mean_index(&field, tau, opts.mean_k_max, opts.ode_tol)?;
    let iterates = ks
        .par_iter()
        .map(|&k| {
            let (full, grid_a) = morse_index_stable(l, g, k, Space::Full, opts.max_doublings)?;
            let (sym, grid_b) = morse_index_stable(l, g, k, Space::Symmetric, opts.max_doublings)?;
            let (cz, l0) = iterated_indices(&field, tau, k, opts.ode_tol)?;
            let nn = n as i64;
            let kk = k as f64;
            let mut checks = vec![
                Check::new("morse_full = cz", full, cz, full == cz),
                Check::new(
                    "morse_sym = l0 + N",
                    sym,
                    (l0.index + nn, l0.nullity),
                    sym.index == l0.index + nn && sym.nullity == l0.nullity,
                ),
                Check::new("m0(A) <= 2N", full.nullity, 2 * n, full.nullity <= 2 * n),
                Check::new("m0(EA) <= m0(A)", sym.nullity, full.nullity, sym.nullity <= full.nullity),
                Check::new("m-(EA) <= m-(A)", sym.index, full.index, sym.index <= full.index),
                Check::new("0 <= m-(EA)", 0, sym.index, sym.index >= 0),
                Check::new(
                    "i + nu <= k*mean + N",
                    cz.index + cz.nullity as i64,
                    kk * mean.cz + nn as f64,
                    (cz.index + cz.nullity as i64) as f64 <= kk * (mean.cz + mean.cz_uncertainty) + nn as f64,
                ),
            ];
            if mean.cz.abs() <= opts.zero_mean {
                let s = sym.index + sym.nullity as i64;
                checks.push(Check::new("m-(EA) + m0(EA) <= N (zero mean index)", s, n, s <= nn));
            }
            Ok(IterateReport { k, morse_full: full, morse_sym: sym, cz, l0, stable_grid: grid_a.max(grid_b), checks })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RelationsReport {
        dim: n,
        period: g.period,
        mean,
        iterates,
        convention: "calibrated: L0 = {(0,y)}, index = spectral flow on [0, k·period/2] minus N".into(),
    })
}
