//! Convex quadratic `T`-modification of a reversible Tonelli Lagrangian,
//! `L_{θ,T} = λ·φ(L_θ/λ) + ψ(|v|²)`, with sampled certificates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::index::{morse_index, IndexPair};
use crate::linalg::gauss_legendre;
use crate::loopspace::{hessian, mean_action, riesz_gradient, w12_inner, Space, SymmetricLoop};
use crate::model::{FiberFunction, HamiltonianSpec, Jet, LagrangianSpec, OneForm};
use crate::sampling::{fiber_samples, halton, unit_directions};

/// Safety factor applied to sampled maxima.
pub const MARGIN: f64 = 1.1;
/// Largest admissible `μ`.
pub const MU_CEILING: f64 = 1e8;

fn bump(x: f64) -> f64 {
    if x <= 0.0 { 0.0 } else { (-1.0 / x).exp() }
}

fn bump_d(x: f64) -> f64 {
    if x <= 0.0 { 0.0 } else { (-1.0 / x).exp() / (x * x) }
}

/// `C^∞` smoothstep: `0` below `0`, `1` above `1`, `β(x) + β(1−x) = 1`.
pub fn smoothstep(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        let a = bump(x);
        a / (a + bump(1.0 - x))
    }
}

fn smoothstep_d(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    let (a, b) = (bump(x), bump(1.0 - x));
    (bump_d(x) * b + a * bump_d(1.0 - x)) / ((a + b) * (a + b))
}

/// `∫₀ˣ β` for `x ∈ [0, 1]`, using `β(u) + β(1−u) = 1` to integrate only up
/// to `1/2`.
fn smoothstep_integral(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 0.5 + (x - 1.0);
    }
    if x > 0.5 {
        return x - 0.5 + smoothstep_integral(1.0 - x);
    }
    let (nodes, weights) = gauss_legendre(16);
    let panels = 8;
    let h = x / panels as f64;
    let mut s = 0.0;
    for k in 0..panels {
        for (u, w) in nodes.iter().zip(&weights) {
            s += w * h * smoothstep(h * (k as f64 + u));
        }
    }
    s
}

/// `φ(s) = s` for `s ≤ 1`, `φ ≡ 3/2` for `s ≥ 2`, `φ′ = 1 − β(s − 1)` between.
#[derive(Clone, Copy, Debug)]
pub struct Phi;

impl Phi {
    pub fn value(s: f64) -> f64 {
        if s <= 1.0 {
            s
        } else {
            let x = (s - 1.0).min(1.0);
            1.0 + x - smoothstep_integral(x)
        }
    }
    pub fn d1(s: f64) -> f64 {
        if s <= 1.0 { 1.0 } else { 1.0 - smoothstep(s - 1.0) }
    }
    pub fn d2(s: f64) -> f64 {
        -smoothstep_d(s - 1.0)
    }
}

/// `ψ(s) = 0` for `s ≤ T²`, `μs − 2μT²` for `s ≥ 4T²`, and the quintic blend
/// `3T²μ·G((s − T²)/3T²)`, `G = 8x³/3 − 3x⁴ + x⁵`, between.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct Psi {
    pub t: f64,
    pub mu: f64,
}

impl Psi {
    pub fn value(&self, s: f64) -> f64 {
        let t2 = self.t * self.t;
        if s <= t2 {
            0.0
        } else if s >= 4.0 * t2 {
            self.mu * s - 2.0 * self.mu * t2
        } else {
            let x = (s - t2) / (3.0 * t2);
            3.0 * t2 * self.mu * x * x * x * (8.0 / 3.0 - 3.0 * x + x * x)
        }
    }
    pub fn d1(&self, s: f64) -> f64 {
        let t2 = self.t * self.t;
        if s <= t2 {
            0.0
        } else if s >= 4.0 * t2 {
            self.mu
        } else {
            let x = (s - t2) / (3.0 * t2);
            self.mu * x * x * (8.0 - 12.0 * x + 5.0 * x * x)
        }
    }
    pub fn d2(&self, s: f64) -> f64 {
        let t2 = self.t * self.t;
        if s <= t2 || s >= 4.0 * t2 {
            0.0
        } else {
            let x = (s - t2) / (3.0 * t2);
            self.mu * x * (16.0 - 36.0 * x + 20.0 * x * x) / (3.0 * t2)
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModificationParams {
    pub t: f64,
    pub lambda: f64,
    pub mu: f64,
    pub k: f64,
    pub c: f64,
    /// Sampled `min L_{1,T}`.
    pub min_l1: f64,
    /// Radius beyond which `L_θ ≥ 2λ` on every sample, so `L_{1,T}` is constant.
    pub saturation_radius: f64,
}

impl ModificationParams {
    pub fn psi(&self) -> Psi {
        Psi { t: self.t, mu: self.mu }
    }
}

/// `L_{θ,T}`; returns the `L_θ` jet verbatim where `|v| ≤ T` and `L_θ ≤ λ`.
pub struct Modified {
    base: Arc<dyn FiberFunction>,
    lambda: f64,
    psi: Psi,
}

impl Modified {
    fn l1_jet(&self, t: f64, q: &[f64], v: &[f64]) -> Jet {
        let mut jet = self.base.jet(t, q, v);
        let s = jet.value / self.lambda;
        if s <= 1.0 {
            return jet;
        }
        let d1 = Phi::d1(s);
        let d2 = Phi::d2(s) / self.lambda;
        let h = 1e-5;
        let lt = (self.base.value(t + h, q, v) - self.base.value(t - h, q, v)) / (2.0 * h);
        let (lq, lw) = (jet.dq.clone(), jet.dw.clone());
        jet.value = self.lambda * Phi::value(s);
        jet.dqq = &jet.dqq * d1 + &lq * lq.transpose() * d2;
        jet.dqw = &jet.dqw * d1 + &lq * lw.transpose() * d2;
        jet.dww = &jet.dww * d1 + &lw * lw.transpose() * d2;
        jet.dtw = &jet.dtw * d1 + &lw * (lt * d2);
        jet.dq = lq * d1;
        jet.dw = lw * d1;
        jet
    }
}

impl FiberFunction for Modified {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn jet(&self, t: f64, q: &[f64], v: &[f64]) -> Jet {
        let r2: f64 = v.iter().map(|x| x * x).sum();
        let mut jet = self.l1_jet(t, q, v);
        if r2 <= self.psi.t * self.psi.t {
            return jet;
        }
        let vv = DVector::from_column_slice(v);
        let (p1, p2) = (self.psi.d1(r2), self.psi.d2(r2));
        jet.value += self.psi.value(r2);
        jet.dw += &vv * (2.0 * p1);
        jet.dww += DMatrix::identity(v.len(), v.len()) * (2.0 * p1) + &vv * vv.transpose() * (4.0 * p2);
        jet
    }

    fn value(&self, t: f64, q: &[f64], v: &[f64]) -> f64 {
        let r2: f64 = v.iter().map(|x| x * x).sum();
        let l = self.base.value(t, q, v);
        let l1 = if l <= self.lambda { l } else { self.lambda * Phi::value(l / self.lambda) };
        l1 + self.psi.value(r2)
    }
}

/// Sample grid over `(t, q)` used by every maximisation here.
fn base_points(n: usize) -> Vec<(f64, Vec<f64>)> {
    let mut pts: Vec<(f64, Vec<f64>)> = halton(1 + n, 192).into_iter().map(|u| (u[0] - 0.5, u[1..].to_vec())).collect();
    let side: usize = if n == 1 { 64 } else { 12 };
    let total = side.pow(n as u32);
    for k in 0..total {
        let mut q = Vec::with_capacity(n);
        let mut r = k;
        for _ in 0..n {
            q.push((r % side) as f64 / side as f64);
            r /= side;
        }
        pts.push((0.0, q.clone()));
        pts.push((0.25, q));
    }
    pts
}

/// `K = max ‖θ(q)‖` and `C = max H(t, q, p)` over `‖p‖ ≤ K + 1`, on fixed
/// seeded grids. `H` is convex in `p`, so the sphere suffices.
pub fn compute_constants(h: &HamiltonianSpec, theta: &OneForm) -> (f64, f64) {
    let n = h.dim();
    let pts = base_points(n);
    let k = pts.iter().map(|(_, q)| theta.eval(q).norm()).fold(0.0, f64::max);
    let dirs = unit_directions(n, 64);
    let mut c = f64::NEG_INFINITY;
    for (t, q) in &pts {
        for d in &dirs {
            let p: Vec<f64> = d.iter().map(|x| x * (k + 1.0)).collect();
            c = c.max(h.value(*t, q, &p));
        }
    }
    (k, c)
}

fn sphere_extrema(l: &LagrangianSpec, pts: &[(f64, Vec<f64>)], dirs: &[Vec<f64>], r: f64) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (t, q) in pts {
        for d in dirs {
            let v: Vec<f64> = d.iter().map(|x| x * r).collect();
            let y = l.value(*t, q, &v);
            lo = lo.min(y);
            hi = hi.max(y);
        }
    }
    (lo, hi)
}

/// Builds `L_{θ,T}` for a reversible Tonelli `L_θ`, with `C = C(H, θ)` from
/// [`compute_constants`].
pub fn build_modification(l_theta: &LagrangianSpec, t: f64, k: f64, c: f64) -> Result<(LagrangianSpec, ModificationParams)> {
    if !(t > 0.0) {
        return Err(Error::Invalid(format!("T must be positive, got {t}")));
    }
    if !l_theta.reversible {
        return Err(Error::PreconditionViolated(format!("{} is not reversible", l_theta.label)));
    }
    let n = l_theta.dim();
    let pts = base_points(n);
    let dirs = unit_directions(n, 48);
    // L_θ is convex in v: its maximum over the ball sits on the sphere
    let (_, lmax) = sphere_extrema(l_theta, &pts, &dirs, 2.0 * t);
    let lambda = (MARGIN * lmax.abs()).max(lmax).max(1.0);
    let mut radii: Vec<f64> = (0..=40).map(|j| 2.0 * t * j as f64 / 40.0).collect();
    let mut r = 2.0 * t;
    loop {
        let (lo, _) = sphere_extrema(l_theta, &pts, &dirs, r);
        if lo >= 2.0 * lambda {
            break;
        }
        r *= 1.25;
        radii.push(r);
        if r > 1e8 {
            return Err(Error::InfeasibleParams("L_θ does not reach 2λ on the sample ladder".into()));
        }
    }
    let saturation = r;
    let mut lmin = f64::INFINITY;
    for rr in &radii {
        lmin = lmin.min(sphere_extrema(l_theta, &pts, &dirs, *rr).0);
    }
    let min_l1 = lambda * Phi::value(lmin / lambda);
    let min_l1 = min_l1 - (MARGIN - 1.0) * min_l1.abs();
    let mut mu = (1.0 / (4.0 * t)).max((2.0 * t - c - min_l1) / (2.0 * t * t)).max(1e-12);
    let shell: Vec<f64> = (0..=60).map(|j| 2.0 * t + (saturation - 2.0 * t) * j as f64 / 60.0).collect();
    let probe = Modified { base: l_theta.f.clone(), lambda, psi: Psi { t, mu: 0.0 } };
    let mut worst = f64::INFINITY;
    for rr in &shell {
        for (tt, q) in &pts {
            for d in &dirs {
                let v: Vec<f64> = d.iter().map(|x| x * rr).collect();
                worst = worst.min(probe.l1_jet(*tt, q, &v).dww.symmetric_eigenvalues().min());
            }
        }
    }
    while mu + worst <= 0.0 {
        mu *= 2.0;
        if mu > MU_CEILING {
            return Err(Error::InfeasibleParams(format!("μ exceeds {MU_CEILING:e}")));
        }
    }
    mu *= MARGIN;
    let params = ModificationParams { t, lambda, mu, k, c, min_l1, saturation_radius: saturation };
    let f = Modified { base: l_theta.f.clone(), lambda, psi: params.psi() };
    let mut spec = LagrangianSpec::new(Arc::new(f), format!("{} modified at T={t}", l_theta.label));
    spec.reversible = true;
    Ok((spec, params))
}

/// `(M1)`: maximum deviation of value and partials on samples with
/// `|v| ≤ T` and `L_θ ≤ λ`; zero when the coincidence is exact.
pub fn coincidence_defect(l_theta: &LagrangianSpec, l_t: &LagrangianSpec, params: &ModificationParams, samples: usize) -> (f64, usize) {
    let n = l_theta.dim();
    let mut worst: f64 = 0.0;
    let mut used = 0;
    for s in fiber_samples(&vec![1.0; n], params.t / (n as f64).sqrt(), samples) {
        let a = l_theta.jet(s.t, &s.q, &s.w);
        if a.value > params.lambda {
            continue;
        }
        used += 1;
        let b = l_t.jet(s.t, &s.q, &s.w);
        let d = [
            (a.value - b.value).abs(),
            (&a.dq - &b.dq).amax(),
            (&a.dw - &b.dw).amax(),
            (&a.dqq - &b.dqq).amax(),
            (&a.dqw - &b.dqw).amax(),
            (&a.dww - &b.dww).amax(),
        ];
        worst = d.iter().cloned().fold(worst, f64::max);
    }
    (worst, used)
}

/// `(M3)`: smallest `L_{θ,T}(t,q,v) − (‖v‖ − C)` over samples out to
/// radius `wmax`.
pub fn growth_floor(l_t: &LagrangianSpec, c: f64, wmax: f64, samples: usize) -> f64 {
    let n = l_t.dim();
    fiber_samples(&vec![1.0; n], wmax, samples)
        .iter()
        .map(|s| {
            let r = s.w.iter().map(|x| x * x).sum::<f64>().sqrt();
            l_t.value(s.t, &s.q, &s.w) - (r - c)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Reversibility defect `max |L(−t, q, −v) − L(t, q, v)|` on samples.
pub fn reversibility_defect(l: &LagrangianSpec, wmax: f64, samples: usize) -> f64 {
    let n = l.dim();
    fiber_samples(&vec![1.0; n], wmax, samples)
        .iter()
        .map(|s| {
            let w: Vec<f64> = s.w.iter().map(|x| -x).collect();
            (l.value(-s.t, &s.q, &w) - l.value(s.t, &s.q, &s.w)).abs()
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GrowthWitness {
    pub bound: String,
    pub t: f64,
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GrowthCertificate {
    pub l1: f64,
    pub l2: f64,
    pub inner_radius: f64,
    pub outer_radius: f64,
    pub passed: bool,
    pub witness: Option<GrowthWitness>,
}

/// Sampled quadratic-growth constants: `l₁|u|² ≤ uᵀL_vv u`, `‖L_vv‖ ≤ l₂`,
/// `‖L_qv‖ ≤ l₂(1+|v|)`, `‖L_qq‖ ≤ l₂(1+|v|²)`. The constants come from an
/// inner radius ladder and must still hold, up to 5%, on an outer ladder
/// reaching `16 · inner_radius`.
pub fn check_quadratic_growth(l: &LagrangianSpec, inner_radius: f64, samples: usize) -> GrowthCertificate {
    let n = l.dim();
    let base: Vec<(f64, Vec<f64>)> = halton(1 + n, samples.clamp(8, 256)).into_iter().map(|u| (u[0] - 0.5, u[1..].to_vec())).collect();
    let dirs = unit_directions(n, 24);
    let ladder = |lo: f64, hi: f64, steps: usize| -> Vec<f64> {
        (0..=steps).map(|j| if lo == 0.0 && j == 0 { 0.0 } else { lo.max(hi / 1024.0) * (hi / lo.max(hi / 1024.0)).powf(j as f64 / steps as f64) }).collect()
    };
    let scan = |radii: &[f64]| -> (f64, f64, Option<GrowthWitness>) {
        let mut l1 = f64::INFINITY;
        let mut l2: f64 = 0.0;
        let mut arg = None;
        for &r in radii {
            for (t, q) in &base {
                for d in &dirs {
                    let v: Vec<f64> = d.iter().map(|x| x * r).collect();
                    let j = l.jet(*t, q, &v);
                    let eig = j.dww.symmetric_eigenvalues();
                    l1 = l1.min(eig.min());
                    let terms = [
                        ("|L_vv| <= l2", eig.amax()),
                        ("|L_qv| <= l2(1+|v|)", j.dqw.norm() / (1.0 + r)),
                        ("|L_qq| <= l2(1+|v|^2)", j.dqq.norm() / (1.0 + r * r)),
                    ];
                    for (name, x) in terms {
                        if x > l2 {
                            l2 = x;
                            arg = Some(GrowthWitness { bound: name.into(), t: *t, q: q.clone(), v: v.clone(), ratio: x });
                        }
                    }
                }
            }
        }
        (l1, l2, arg)
    };
    let (l1_in, l2_in, _) = scan(&ladder(0.0, inner_radius, 24));
    let (l1_out, l2_out, arg) = scan(&ladder(inner_radius, 16.0 * inner_radius, 12));
    let bounded = l2_out <= 1.05 * l2_in + 1e-12;
    let l1 = l1_in.min(l1_out);
    let witness = if bounded {
        None
    } else {
        arg.map(|mut w| {
            w.ratio /= l2_in.max(f64::MIN_POSITIVE);
            w
        })
    };
    GrowthCertificate {
        l1,
        l2: l2_in.max(l2_out),
        inner_radius,
        outer_radius: 16.0 * inner_radius,
        passed: bounded && l1 > 0.0,
        witness,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PreservationReport {
    pub t: f64,
    pub max_speed: f64,
    pub gradient_norm: f64,
    pub base_gradient_norm: f64,
    pub action: f64,
    pub base_action: f64,
    pub passed: bool,
}

fn check_speed(g: &SymmetricLoop, t: f64) -> Result<f64> {
    let s = g.max_speed();
    if s >= t {
        Err(Error::SpeedTooHigh { speed: s, t })
    } else {
        Ok(s)
    }
}

/// A critical loop of `L_θ` slower than `T` stays critical for `L_{θ,T}`
/// with the same action.
pub fn verify_orbit_preservation(l_theta: &LagrangianSpec, l_t: &LagrangianSpec, t: f64, g: &SymmetricLoop, tol: f64) -> Result<PreservationReport> {
    let max_speed = check_speed(g, t)?;
    let norm = |l: &LagrangianSpec| -> Result<f64> {
        let r = riesz_gradient(l, g)?;
        Ok(w12_inner(&r, &r)?.sqrt())
    };
    let gradient_norm = norm(l_t)?;
    let action = mean_action(l_t, g);
    let base_action = mean_action(l_theta, g);
    Ok(PreservationReport {
        t,
        max_speed,
        gradient_norm,
        base_gradient_norm: norm(l_theta)?,
        action,
        base_action,
        passed: gradient_norm < tol && (action - base_action).abs() <= 1e-14 * base_action.abs().max(1.0),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct HessianComparison {
    pub t1: f64,
    pub t2: f64,
    pub max_deviation: f64,
    pub full: (IndexPair, IndexPair),
    pub symmetric: (IndexPair, IndexPair),
}

impl HessianComparison {
    pub fn indices_agree(&self) -> bool {
        self.full.0 == self.full.1 && self.symmetric.0 == self.symmetric.1
    }
}

/// Maximum entry deviation between the discretised Hessians of two
/// modifications at `γ`, and the Morse pairs from each.
pub fn hessian_t_independence(
    l_t1: (&LagrangianSpec, f64),
    l_t2: (&LagrangianSpec, f64),
    g: &SymmetricLoop,
) -> Result<HessianComparison> {
    check_speed(g, l_t1.1.min(l_t2.1))?;
    let mut dev: f64 = 0.0;
    for space in [Space::Full, Space::Symmetric] {
        let a = hessian(l_t1.0, g, space);
        let b = hessian(l_t2.0, g, space);
        dev = dev.max((a.to_dense() - b.to_dense()).amax());
    }
    let pair = |space| -> Result<(IndexPair, IndexPair)> {
        Ok((morse_index(l_t1.0, g, 1, space)?, morse_index(l_t2.0, g, 1, space)?))
    };
    Ok(HessianComparison { t1: l_t1.1, t2: l_t2.1, max_deviation: dev, full: pair(Space::Full)?, symmetric: pair(Space::Symmetric)? })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SpeedRow {
    pub label: String,
    pub action: f64,
    pub period: usize,
    pub max_speed: f64,
    pub admitted: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SpeedBoundReport {
    pub alpha: f64,
    pub m: usize,
    pub rows: Vec<SpeedRow>,
    /// Empirical `T̃(α, m)`: the largest admitted speed.
    pub t_tilde: f64,
}

impl SpeedBoundReport {
    pub fn exceeds(&self, speed: f64) -> bool {
        speed > self.t_tilde
    }
}

/// Max speeds of the orbits with mean action `≤ α` and period `≤ m`.
pub fn speed_bound_report(l: &LagrangianSpec, orbits: &[(String, SymmetricLoop)], alpha: f64, m: usize) -> SpeedBoundReport {
    let rows: Vec<SpeedRow> = orbits
        .iter()
        .map(|(label, g)| {
            let action = mean_action(l, g);
            SpeedRow { label: label.clone(), action, period: g.period, max_speed: g.max_speed(), admitted: action <= alpha && g.period <= m }
        })
        .collect();
    let t_tilde = rows.iter().filter(|r| r.admitted).map(|r| r.max_speed).fold(0.0, f64::max);
    SpeedBoundReport { alpha, m, rows, t_tilde }
}
