//! Twisted Hamiltonian and Euler-Lagrange fields, adaptive integration,
//! flow conjugacy under the momentum shift, and brake-orbit shooting.
//!
//! Phase states are stored as `[q; p]` with `q` in lifted (unreduced)
//! coordinates so trajectories stay continuous across the lattice.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    compose_with_shift, fixed_set_point, momentum_shift, HamiltonianSpec, LagrangianSpec, OneForm,
    PhasePoint, ShiftDirection, TangentPoint,
};

/// `(q̇, ṗ)` with `ṗ = −H_q + (Jᵀ − J)q̇`, `J = ∂θ/∂q`.
pub fn twisted_field(
    h: &HamiltonianSpec,
    theta: &OneForm,
    t: f64,
    x: &PhasePoint,
) -> (DVector<f64>, DVector<f64>) {
    let jet = h.jet(t, &x.q, &x.p);
    let qdot = jet.dw;
    let mut pdot = -jet.dq;
    if !theta.is_constant() {
        pdot += theta.curvature(&x.q) * &qdot;
    }
    (qdot, pdot)
}

/// `(q̇, v̇)` with `L_vv v̇ = L_q − L_qvᵀ v − ∂ₜL_v`.
pub fn el_field(l: &LagrangianSpec, t: f64, y: &TangentPoint) -> Result<(DVector<f64>, DVector<f64>)> {
    let jet = l.jet(t, &y.q, &y.v);
    let v = DVector::from_column_slice(&y.v);
    let rhs = &jet.dq - jet.dqw.transpose() * &v - &jet.dtw;
    let chol = jet.dww.clone().cholesky().ok_or(Error::SingularMass { t })?;
    let vdot = chol.solve(&rhs);
    if vdot.iter().any(|x| !x.is_finite()) {
        return Err(Error::SingularMass { t });
    }
    Ok((v, vdot))
}

/// The twisted momentum `p = ∂_v L_θ − θ(q)` of a tangent point, for the
/// Hamiltonian built by `legendre::twisted_hamiltonian`.
pub fn tangent_to_phase(l_theta: &LagrangianSpec, theta: &OneForm, t: f64, y: &TangentPoint) -> PhasePoint {
    let jet = l_theta.jet(t, &y.q, &y.v);
    let p = jet.dw - theta.eval(&y.q);
    PhasePoint { q: y.q.clone(), p: p.as_slice().to_vec() }
}

#[derive(Clone, Debug)]
pub struct IntegratorOptions {
    /// Relative and absolute local error target per step.
    pub tol: f64,
    /// State norm beyond which integration aborts with `BlowUp`.
    pub ceiling: f64,
    pub max_steps: usize,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        IntegratorOptions { tol: 1e-10, ceiling: 1e6, max_steps: 2_000_000 }
    }
}

impl IntegratorOptions {
    pub fn with_tol(tol: f64) -> Self {
        IntegratorOptions { tol, ..Default::default() }
    }
}

/// Accepted steps with the fifth-order continuous extension of each.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    dense: Vec<[DVector<f64>; 4]>,
}

impl Trajectory {
    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn last(&self) -> &DVector<f64> {
        self.states.last().unwrap()
    }

    /// Dense-output state at `t`, clamped to the covered interval.
    pub fn state(&self, t: f64) -> DVector<f64> {
        let t = t.clamp(self.start(), self.end());
        let k = match self.times.partition_point(|s| *s <= t) {
            0 => 0,
            k => (k - 1).min(self.times.len() - 2),
        };
        if self.times.len() < 2 {
            return self.states[0].clone();
        }
        let h = self.times[k + 1] - self.times[k];
        let s = (t - self.times[k]) / h;
        let s1 = 1.0 - s;
        let [r2, r3, r4, r5] = &self.dense[k];
        &self.states[k] + (r2 + (r3 + (r4 + r5 * s1) * s) * s1) * s
    }

    /// `count + 1` equispaced samples over the covered interval.
    pub fn resample(&self, count: usize) -> Vec<(f64, DVector<f64>)> {
        let (a, b) = (self.start(), self.end());
        (0..=count)
            .map(|i| {
                let t = a + (b - a) * i as f64 / count as f64;
                (t, self.state(t))
            })
            .collect()
    }

    /// CSV with a header row; `labels` names the state components.
    pub fn to_csv(&self, count: usize, labels: &[String]) -> String {
        let mut out = String::from("t");
        for l in labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (t, x) in self.resample(count) {
            out.push_str(&format!("{t}"));
            for v in x.iter() {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Dormand-Prince 5(4) with step-size control and dense output.
pub fn integrate<F>(f: F, x0: &DVector<f64>, t0: f64, t1: f64, opts: &IntegratorOptions) -> Result<Trajectory>
where
    F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    if !(t1 > t0) {
        return Err(Error::Invalid(format!("integration interval [{t0}, {t1}] is empty")));
    }
    let tol = opts.tol;
    let scale = |a: &DVector<f64>, b: &DVector<f64>, i: usize| tol + tol * a[i].abs().max(b[i].abs());
    let norm = |e: &DVector<f64>, a: &DVector<f64>, b: &DVector<f64>| {
        let n = e.len().max(1) as f64;
        (e.iter().enumerate().map(|(i, x)| (x / scale(a, b, i)).powi(2)).sum::<f64>() / n).sqrt()
    };
    let check = |t: f64, x: &DVector<f64>| -> Result<()> {
        let m = x.amax();
        if !m.is_finite() || m > opts.ceiling {
            Err(Error::BlowUp { t, norm: m })
        } else {
            Ok(())
        }
    };
    check(t0, x0)?;
    let mut t = t0;
    let mut x = x0.clone();
    let mut k1 = f(t, &x)?;
    let span = t1 - t0;
    let mut h = {
        let d0 = norm(&x, &x, &x);
        let d1 = norm(&k1, &x, &x);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let x1 = &x + &k1 * h0;
        let k = f(t + h0, &x1)?;
        let d2 = norm(&(k - &k1), &x, &x) / h0;
        let h1 = if d1.max(d2) <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / d1.max(d2)).powf(0.2) };
        (100.0 * h0).min(h1).min(span)
    };
    let mut traj = Trajectory { times: vec![t], states: vec![x.clone()], dense: Vec::new() };
    let mut steps = 0;
    while t < t1 {
        steps += 1;
        if steps > opts.max_steps {
            return Err(Error::NonConvergence { iterations: steps, residual: t1 - t });
        }
        let last = t + h >= t1 - 1e-14 * span.max(t1.abs());
        if last {
            h = t1 - t;
        }
        if h <= 1e-14 * t.abs().max(span) {
            return Err(Error::StepUnderflow { t });
        }
        let k2 = f(t + C2 * h, &(&x + &k1 * (A21 * h)))?;
        let k3 = f(t + C3 * h, &(&x + (&k1 * A31 + &k2 * A32) * h))?;
        let k4 = f(t + C4 * h, &(&x + (&k1 * A41 + &k2 * A42 + &k3 * A43) * h))?;
        let k5 = f(t + C5 * h, &(&x + (&k1 * A51 + &k2 * A52 + &k3 * A53 + &k4 * A54) * h))?;
        let k6 = f(t + h, &(&x + (&k1 * A61 + &k2 * A62 + &k3 * A63 + &k4 * A64 + &k5 * A65) * h))?;
        let xn = &x + (&k1 * A71 + &k3 * A73 + &k4 * A74 + &k5 * A75 + &k6 * A76) * h;
        let k7 = f(t + h, &xn)?;
        let err = (&k1 * E1 + &k3 * E3 + &k4 * E4 + &k5 * E5 + &k6 * E6 + &k7 * E7) * h;
        let e = norm(&err, &x, &xn);
        if !e.is_finite() {
            check(t + h, &xn)?;
            h *= 0.2;
            continue;
        }
        if e <= 1.0 {
            check(t + h, &xn)?;
            let diff = &xn - &x;
            let bspl = &k1 * h - &diff;
            let r4 = &diff - &k7 * h - &bspl;
            let r5 = (&k1 * D1 + &k3 * D3 + &k4 * D4 + &k5 * D5 + &k6 * D6 + &k7 * D7) * h;
            traj.dense.push([diff, bspl, r4, r5]);
            t = if last { t1 } else { t + h };
            x = xn;
            k1 = k7;
            traj.times.push(t);
            traj.states.push(x.clone());
            h *= (0.9 * e.max(1e-10).powf(-0.2)).min(5.0);
        } else {
            h *= (0.9 * e.powf(-0.2)).max(0.2);
        }
    }
    Ok(traj)
}

fn phase_state(x: &PhasePoint) -> DVector<f64> {
    DVector::from_iterator(x.q.len() * 2, x.q.iter().chain(x.p.iter()).cloned())
}

fn split(n: usize, x: &DVector<f64>) -> PhasePoint {
    PhasePoint { q: x.rows(0, n).iter().cloned().collect(), p: x.rows(n, n).iter().cloned().collect() }
}

/// Integrates the twisted Hamiltonian field from `x0`.
pub fn integrate_twisted(
    h: &HamiltonianSpec,
    theta: &OneForm,
    x0: &PhasePoint,
    t0: f64,
    t1: f64,
    opts: &IntegratorOptions,
) -> Result<Trajectory> {
    let n = h.dim();
    let field = |t: f64, x: &DVector<f64>| {
        let (qd, pd) = twisted_field(h, theta, t, &split(n, x));
        let mut out = DVector::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&qd);
        out.rows_mut(n, n).copy_from(&pd);
        Ok(out)
    };
    integrate(field, &phase_state(x0), t0, t1, opts)
}

/// Integrates the Euler-Lagrange field from `y0`; states are `[q; v]`.
pub fn integrate_el(
    l: &LagrangianSpec,
    y0: &TangentPoint,
    t0: f64,
    t1: f64,
    opts: &IntegratorOptions,
) -> Result<Trajectory> {
    let n = l.dim();
    let field = |t: f64, x: &DVector<f64>| {
        let y = TangentPoint { q: x.rows(0, n).iter().cloned().collect(), v: x.rows(n, n).iter().cloned().collect() };
        let (qd, vd) = el_field(l, t, &y)?;
        let mut out = DVector::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&qd);
        out.rows_mut(n, n).copy_from(&vd);
        Ok(out)
    };
    let x0 = DVector::from_iterator(2 * n, y0.q.iter().chain(y0.v.iter()).cloned());
    integrate(field, &x0, t0, t1, opts)
}

/// `sup ‖Φ(Ψ_{H∘Φ}^t(x)) − Ψ_H^t(Φ(x))‖` over sampled initial points and
/// `t ∈ [0, horizon]`, where `Ψ_{H∘Φ}` is the untwisted flow and `Ψ_H` the
/// twisted one.
pub fn verify_conjugacy(
    h: &HamiltonianSpec,
    theta: &OneForm,
    horizon: f64,
    samples: usize,
    opts: &IntegratorOptions,
) -> Result<f64> {
    let n = h.dim();
    let zero = OneForm::zero(n);
    let h_theta = compose_with_shift(h, theta, &zero);
    let periods = vec![1.0; n];
    let points = crate::sampling::fiber_samples(&periods, 1.0, samples);
    let mut worst: f64 = 0.0;
    for s in points {
        let x = PhasePoint { q: s.q.clone(), p: s.w.clone() };
        let plain = integrate_twisted(&h_theta, &zero, &x, 0.0, horizon, opts)?;
        let twisted = integrate_twisted(h, theta, &momentum_shift(theta, &x, ShiftDirection::Forward), 0.0, horizon, opts)?;
        for i in 0..=64 {
            let t = horizon * i as f64 / 64.0;
            let a = momentum_shift(theta, &split(n, &plain.state(t)), ShiftDirection::Forward);
            let b = split(n, &twisted.state(t));
            let d = phase_state(&a) - phase_state(&b);
            worst = worst.max(d.amax());
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct ShootingOptions {
    /// Newton stops once `‖p(τ/2) + θ(q(τ/2))‖∞ < tol`.
    pub tol: f64,
    pub max_iter: usize,
    pub fd_step: f64,
    pub integrator: IntegratorOptions,
}

impl Default for ShootingOptions {
    fn default() -> Self {
        ShootingOptions { tol: 1e-10, max_iter: 50, fd_step: 1e-6, integrator: IntegratorOptions::with_tol(1e-12) }
    }
}

/// A `τ`-periodic twisted trajectory with `x(0), x(τ/2) ∈ Fix(R₁)`.
#[derive(Clone, Debug)]
pub struct BrakeOrbit {
    pub period: f64,
    pub trajectory: Trajectory,
    /// `sup_t ‖R₁(x(τ−t)) − x(t)‖`.
    pub residual: f64,
    /// `‖p(τ/2) + θ(q(τ/2))‖∞` at the returned initial point.
    pub shooting_residual: f64,
    pub iterations: usize,
}

impl BrakeOrbit {
    pub fn dim(&self) -> usize {
        self.trajectory.states[0].len() / 2
    }

    pub fn phase_point(&self, t: f64) -> PhasePoint {
        split(self.dim(), &self.trajectory.state(t))
    }

    /// Lifted configuration `q(t)`, extended `τ`-periodically.
    pub fn position(&self, t: f64) -> Vec<f64> {
        let s = t.rem_euclid(self.period);
        self.phase_point(s).q
    }

    /// Velocity `∂_p H` along the orbit.
    pub fn velocity(&self, h: &HamiltonianSpec, t: f64) -> DVector<f64> {
        let s = t.rem_euclid(self.period);
        let x = self.phase_point(s);
        h.jet(s, &x.q, &x.p).dw
    }
}

fn half_residual(
    h: &HamiltonianSpec,
    theta: &OneForm,
    q0: &[f64],
    tau: f64,
    opts: &IntegratorOptions,
) -> Result<DVector<f64>> {
    let n = q0.len();
    let traj = integrate_twisted(h, theta, &fixed_set_point(theta, q0), 0.0, 0.5 * tau, opts)?;
    let end = split(n, traj.last());
    Ok(DVector::from_column_slice(&end.p) + theta.eval(&end.q))
}

/// Newton on `q₀ ↦ p(τ/2) + θ(q(τ/2))` for trajectories started on `Fix(R₁)`.
pub fn brake_shoot(
    h: &HamiltonianSpec,
    theta: &OneForm,
    q0_guess: &[f64],
    tau: f64,
    opts: &ShootingOptions,
) -> Result<BrakeOrbit> {
    if !(tau > 0.0) {
        return Err(Error::Invalid("period must be positive".into()));
    }
    let n = h.dim();
    let mut q0 = DVector::from_column_slice(q0_guess);
    let mut r = half_residual(h, theta, q0.as_slice(), tau, &opts.integrator)?;
    let mut iterations = 0;
    while r.amax() >= opts.tol {
        if iterations >= opts.max_iter {
            return Err(Error::NonConvergence { iterations, residual: r.amax() });
        }
        iterations += 1;
        let mut jac = nalgebra::DMatrix::zeros(n, n);
        for j in 0..n {
            let mut a = q0.clone();
            let mut b = q0.clone();
            a[j] += opts.fd_step;
            b[j] -= opts.fd_step;
            let ra = half_residual(h, theta, a.as_slice(), tau, &opts.integrator)?;
            let rb = half_residual(h, theta, b.as_slice(), tau, &opts.integrator)?;
            jac.set_column(j, &((ra - rb) / (2.0 * opts.fd_step)));
        }
        let step = jac
            .clone()
            .svd(true, true)
            .solve(&(-&r), 1e-12 * jac.amax().max(1e-300))
            .map_err(|e| Error::SolverFailure(e.to_string()))?;
        // damp steps that would jump more than a quarter period of the lattice
        let scale = (0.25 / step.amax().max(1e-300)).min(1.0);
        let mut alpha = scale;
        let r0 = r.amax();
        loop {
            let trial = &q0 + &step * alpha;
            match half_residual(h, theta, trial.as_slice(), tau, &opts.integrator) {
                Ok(rt) if rt.amax() < r0 || alpha < 1e-3 => {
                    q0 = trial;
                    r = rt;
                    break;
                }
                Ok(_) | Err(Error::BlowUp { .. }) if alpha >= 1e-3 => alpha *= 0.5,
                Ok(rt) => {
                    q0 = trial;
                    r = rt;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }
    let shooting_residual = r.amax();
    let start = fixed_set_point(theta, q0.as_slice());
    let trajectory = integrate_twisted(h, theta, &start, 0.0, tau, &opts.integrator)?;
    let residual = brake_residual(theta, &trajectory, tau);
    let limit = 10.0 * opts.tol;
    if residual > limit {
        return Err(Error::SymmetryViolation { residual, limit });
    }
    Ok(BrakeOrbit { period: tau, trajectory, residual, shooting_residual, iterations })
}

/// `sup_t ‖R₁(x(τ−t)) − x(t)‖∞` on a fixed sample of `t ∈ [0, τ]`.
pub fn brake_residual(theta: &OneForm, orbit: &Trajectory, tau: f64) -> f64 {
    let n = orbit.states[0].len() / 2;
    let mut worst: f64 = 0.0;
    for i in 0..=512 {
        let t = tau * i as f64 / 512.0;
        let a = split(n, &orbit.state(t));
        let b = split(n, &orbit.state(tau - t));
        let rb = crate::model::involution_r1(theta, &b);
        let d = a.q.iter().zip(&rb.q).chain(a.p.iter().zip(&rb.p)).map(|(x, y)| (x - y).abs());
        worst = d.fold(worst, f64::max);
    }
    worst
}

/// JSON-friendly orbit record: equispaced samples `[t, q…, p…]` over one period.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct OrbitSamples {
    pub period: f64,
    pub samples: Vec<Vec<f64>>,
    pub brake_residual: f64,
    pub shooting_residual: f64,
}

impl BrakeOrbit {
    pub fn samples(&self, count: usize) -> OrbitSamples {
        OrbitSamples {
            period: self.period,
            samples: self
                .trajectory
                .resample(count)
                .into_iter()
                .map(|(t, x)| std::iter::once(t).chain(x.iter().cloned()).collect())
                .collect(),
            brake_residual: self.residual,
            shooting_residual: self.shooting_residual,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::legendre::twisted_hamiltonian;
    use crate::model::{kinetic, pendulum, ExprFunction, TWO_PI};
    use std::sync::Arc;

    fn ham(src: &str, n: usize, theta: &OneForm) -> HamiltonianSpec {
        HamiltonianSpec::new(Arc::new(ExprFunction::hamiltonian(src, n).unwrap()), theta, src)
    }

    fn t2_theta() -> OneForm {
        OneForm::from_exprs(&["0", "sin(2*pi*q1)/(2*pi)"], 2).unwrap()
    }

    #[test]
    fn untwisted_and_closed_forms_reduce_to_hamilton() {
        let h = ham("p^2/2 + cos(2*pi*q)", 1, &OneForm::zero(1));
        let x = PhasePoint { q: vec![0.3], p: vec![0.4] };
        let (a, b) = twisted_field(&h, &OneForm::zero(1), 0.0, &x);
        let (c, d) = twisted_field(&h, &OneForm::constant(&[0.7]), 0.0, &x);
        assert!((a[0] - 0.4).abs() < 1e-15);
        assert!((b[0] - TWO_PI * (TWO_PI * 0.3).sin()).abs() < 1e-12);
        assert_eq!((a, b), (c, d));
    }

    #[test]
    fn el_field_examples() {
        let y = TangentPoint { q: vec![0.3], v: vec![0.8] };
        let (qd, vd) = el_field(&kinetic(1), 0.0, &y).unwrap();
        assert_eq!((qd[0], vd[0]), (0.8, 0.0));
        // L = v²/2 − cos(2πq)/(4π²): L_q = sin(2πq)/(2π)
        let l = pendulum(1.0 / (TWO_PI * TWO_PI));
        for q in [0.1, 0.3, 0.77] {
            let (_, vd) = el_field(&l, 0.0, &TangentPoint { q: vec![q], v: vec![0.2] }).unwrap();
            let h = 1e-6;
            let fd = (l.value(0.0, &[q + h], &[0.2]) - l.value(0.0, &[q - h], &[0.2])) / (2.0 * h);
            assert!((vd[0] - (TWO_PI * q).sin() / TWO_PI).abs() < 1e-12);
            assert!((vd[0] - fd).abs() < 1e-8);
        }
        let singular = LagrangianSpec::new(Arc::new(ExprFunction::lagrangian("q", 1).unwrap()), "q");
        assert!(matches!(el_field(&singular, 0.0, &y), Err(Error::SingularMass { .. })));
    }

    #[test]
    fn legendre_image_of_el_field_is_the_twisted_field() {
        let theta = OneForm::from_exprs(&["0.3 + 0.2*sin(2*pi*q)"], 1).unwrap();
        let l = pendulum(1.5);
        let h = twisted_hamiltonian(&l, &theta);
        let mut worst: f64 = 0.0;
        for s in crate::sampling::fiber_samples(&[1.0], 2.0, 100) {
            let y = TangentPoint { q: s.q.clone(), v: s.w.clone() };
            let (qd, vd) = el_field(&l, s.t, &y).unwrap();
            let x = tangent_to_phase(&l, &theta, s.t, &y);
            let jet = l.jet(s.t, &y.q, &y.v);
            // d/dt (L_v − θ) along the EL solution
            let pdot = jet.dqw.transpose() * &qd + &jet.dww * &vd + &jet.dtw - theta.jacobian(&y.q) * &qd;
            let (hq, hp) = twisted_field(&h, &theta, s.t, &x);
            worst = worst.max((hq - qd).amax()).max((hp - pdot).amax());
        }
        assert!(worst < 1e-9, "{worst}");
    }

    #[test]
    fn free_particle_and_small_oscillation() {
        let h = ham("p^2/2", 1, &OneForm::zero(1));
        let opts = IntegratorOptions::with_tol(1e-12);
        let tr = integrate_twisted(&h, &OneForm::zero(1), &PhasePoint { q: vec![0.0], p: vec![0.5] }, 0.0, 2.0, &opts)
            .unwrap();
        let q = tr.last()[0].rem_euclid(1.0);
        assert!(q.min(1.0 - q) < 1e-10);
        // H = p²/2 + a(1 − cos 2πq) linearises to p²/2 + a(2π)²q²/2
        let a = 1.0;
        let h = ham("p^2/2 - cos(2*pi*q)", 1, &OneForm::zero(1));
        let amp = 1e-3;
        let tr = integrate_twisted(&h, &OneForm::zero(1), &PhasePoint { q: vec![amp], p: vec![0.0] }, 0.0, 3.0, &opts)
            .unwrap();
        let w = TWO_PI * f64::sqrt(a);
        for i in 0..=30 {
            let t = 0.1 * i as f64;
            assert!((tr.state(t)[0] - amp * (w * t).cos()).abs() < 1e-6);
        }
    }

    #[test]
    fn energy_is_conserved_under_the_twist() {
        let theta = t2_theta();
        let h = ham("(p1^2 + p2^2)/2", 2, &theta);
        let x0 = PhasePoint { q: vec![0.1, 0.2], p: vec![0.7, -0.4] };
        let tr = integrate_twisted(&h, &theta, &x0, 0.0, 10.0, &IntegratorOptions::with_tol(1e-10)).unwrap();
        let e0 = h.value(0.0, &x0.q, &x0.p);
        for (t, x) in tr.resample(200) {
            let p = split(2, &x);
            assert!((h.value(t, &p.q, &p.p) - e0).abs() < 1e-8);
        }
        // the twist does bend the trajectory
        let straight = integrate_twisted(&h, &OneForm::zero(2), &x0, 0.0, 10.0, &IntegratorOptions::default()).unwrap();
        assert!((straight.last() - tr.last()).amax() > 1e-2);
    }

    #[test]
    fn dense_output_is_fifth_order_accurate() {
        let f = |_t: f64, x: &DVector<f64>| Ok(DVector::from_vec(vec![x[1], -x[0]]));
        let tr = integrate(f, &DVector::from_vec(vec![1.0, 0.0]), 0.0, 10.0, &IntegratorOptions::with_tol(1e-12)).unwrap();
        for i in 0..1000 {
            let t = 0.01 * i as f64 + 0.0037;
            assert!((tr.state(t)[0] - t.cos()).abs() < 1e-10);
        }
    }

    #[test]
    fn blow_up_is_detected() {
        let f = |_t: f64, x: &DVector<f64>| Ok(DVector::from_vec(vec![x[0] * x[0]]));
        let r = integrate(f, &DVector::from_vec(vec![1.0]), 0.0, 2.0, &IntegratorOptions::default());
        assert!(matches!(r, Err(Error::BlowUp { .. })));
        assert!(integrate(f, &DVector::from_vec(vec![1.0]), 1.0, 1.0, &IntegratorOptions::default()).is_err());
    }

    #[test]
    fn conjugacy_examples() {
        let opts = IntegratorOptions::with_tol(1e-10);
        let h = ham("p^2/2", 1, &OneForm::zero(1));
        assert!(verify_conjugacy(&h, &OneForm::zero(1), 1.0, 8, &opts).unwrap() < 1e-12);
        assert!(verify_conjugacy(&h, &OneForm::constant(&[0.3]), 1.0, 8, &opts).unwrap() < 1e-7);
        let theta = t2_theta();
        let h2 = ham("(p1^2 + p2^2)/2", 2, &theta);
        assert!(verify_conjugacy(&h2, &theta, 1.0, 8, &opts).unwrap() < 1e-6);
    }

    #[test]
    fn opposite_twist_sign_breaks_conjugacy() {
        let theta = t2_theta();
        let flipped = OneForm::from_exprs(&["0", "-sin(2*pi*q1)/(2*pi)"], 2).unwrap();
        let h2 = ham("(p1^2 + p2^2)/2", 2, &theta);
        let h_theta = compose_with_shift(&h2, &theta, &OneForm::zero(2));
        // integrate the twisted field with the wrong curvature and compare
        let x = PhasePoint { q: vec![0.1, 0.2], p: vec![0.5, 0.3] };
        let opts = IntegratorOptions::with_tol(1e-10);
        let plain = integrate_twisted(&h_theta, &OneForm::zero(2), &x, 0.0, 1.0, &opts).unwrap();
        let wrong = integrate_twisted(&h2, &flipped, &momentum_shift(&theta, &x, ShiftDirection::Forward), 0.0, 1.0, &opts)
            .unwrap();
        let a = momentum_shift(&theta, &split(2, plain.last()), ShiftDirection::Forward);
        assert!((phase_state(&a) - wrong.last()).amax() > 1e-3);
    }

    #[test]
    fn constant_brake_orbits() {
        let zero = OneForm::zero(1);
        let h = twisted_hamiltonian(&pendulum(1.0 / (TWO_PI * TWO_PI)), &zero);
        for q0 in [0.0, 0.5] {
            let orbit = brake_shoot(&h, &zero, &[q0], 1.0, &ShootingOptions::default()).unwrap();
            assert!(orbit.residual < 1e-12);
            assert!((orbit.position(0.3)[0] - q0).abs() < 1e-12);
        }
        let free = twisted_hamiltonian(&kinetic(1), &zero);
        let orbit = brake_shoot(&free, &zero, &[0.37], 1.0, &ShootingOptions::default()).unwrap();
        assert!(orbit.residual < 1e-14);
        assert_eq!(orbit.iterations, 0);
    }

    #[test]
    fn magnetic_pendulum_brake_orbit() {
        let theta = OneForm::constant(&[0.3]);
        let h = twisted_hamiltonian(&pendulum(1.5), &theta);
        assert!(h.symmetric);
        let orbit = brake_shoot(&h, &theta, &[0.2], 1.0, &ShootingOptions::default()).unwrap();
        assert!(orbit.residual < 1e-8);
        let q0 = orbit.position(0.0)[0];
        assert!((q0 - 0.225913).abs() < 1e-5, "{q0}");
        // turning point at τ/2 on the mirror image across the stable equilibrium
        assert!((orbit.position(0.5)[0] - (1.0 - q0)).abs() < 1e-8);
        // Lagrangian projection is even in t
        for i in 0..20 {
            let t = 0.05 * i as f64;
            assert!((orbit.position(t)[0] - orbit.position(1.0 - t)[0]).abs() < 1e-8);
            assert!((orbit.velocity(&h, t)[0] + orbit.velocity(&h, 1.0 - t)[0]).abs() < 1e-8);
        }
    }

    #[test]
    fn non_brake_trajectory_has_large_residual() {
        let theta = OneForm::constant(&[0.3]);
        let h = twisted_hamiltonian(&pendulum(1.5), &theta);
        let x0 = PhasePoint { q: vec![0.2], p: vec![0.5] };
        let tr = integrate_twisted(&h, &theta, &x0, 0.0, 1.0, &IntegratorOptions::default()).unwrap();
        assert!(brake_residual(&theta, &tr, 1.0) > 0.01);
        let c = integrate_twisted(&h, &theta, &fixed_set_point(&theta, &[0.5]), 0.0, 1.0, &IntegratorOptions::default())
            .unwrap();
        assert!(brake_residual(&theta, &c, 1.0) < 1e-12);
    }

    #[test]
    fn asymmetric_hamiltonian_raises_symmetry_violation() {
        // p³-type odd terms break (H3); the reflected half no longer solves the flow
        let zero = OneForm::zero(1);
        let h = ham("p^2/2 + 0.3*p*cos(2*pi*t) + 0.2*cos(2*pi*q)", 1, &zero);
        assert!(!h.symmetric);
        let r = brake_shoot(&h, &zero, &[0.1], 1.0, &ShootingOptions::default());
        assert!(matches!(r, Err(Error::SymmetryViolation { .. }) | Err(Error::NonConvergence { .. })), "{r:?}");
    }

    #[test]
    fn csv_and_samples() {
        let theta = OneForm::constant(&[0.3]);
        let h = twisted_hamiltonian(&pendulum(1.5), &theta);
        let orbit = brake_shoot(&h, &theta, &[0.2], 1.0, &ShootingOptions::default()).unwrap();
        let csv = orbit.trajectory.to_csv(8, &["q".into(), "p".into()]);
        assert_eq!(csv.lines().count(), 10);
        assert!(csv.starts_with("t,q,p\n"));
        let s = orbit.samples(16);
        assert_eq!(s.samples.len(), 17);
        assert_eq!(s.samples[0][0], 0.0);
    }
}
