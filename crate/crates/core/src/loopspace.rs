//! Discretised space of even loops `γ(−t) = γ(t)` on a flat torus.
//!
//! A loop of integer period `m` lives on the uniform grid `t_j = j·h`,
//! `h = 1/grid`, with `n = grid·m` cells per period. Only the half grid
//! `j = 0..=n/2` is stored; node `j` of the full grid is node `min(j, n−j)`
//! of the half grid. Coordinates are lifted, and even loops have zero
//! winding, so the lift closes up.
//!
//! The action uses the midpoint cell rule
//! `Σ_c h·L(t_c + h/2, (q_c + q_{c+1})/2, (q_{c+1} − q_c)/h)`, whose
//! quadratic part has no spurious grid-scale null modes.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::BlockTri;
use crate::model::{FiberFunction, Jet, LagrangianSpec};

pub const DEFAULT_GRID: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetricLoop {
    pub dim: usize,
    pub period: usize,
    /// Cells per unit time; even.
    pub grid: usize,
    /// Node-major half-grid samples, `(n/2 + 1)·dim` entries.
    pub half: Vec<f64>,
}

/// An even section along a loop, stored like [`SymmetricLoop`].
#[derive(Clone, Debug, PartialEq)]
pub struct LoopTangent {
    pub dim: usize,
    pub period: usize,
    pub grid: usize,
    pub half: DVector<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Space {
    /// All `n`-periodic grid functions.
    Full,
    /// Even grid functions, on the half grid.
    Symmetric,
}

impl SymmetricLoop {
    pub fn from_fn(dim: usize, period: usize, grid: usize, f: impl Fn(f64) -> Vec<f64>) -> Result<Self> {
        if dim == 0 || period == 0 || grid < 2 || grid % 2 != 0 {
            return Err(Error::Invalid(format!("bad loop shape dim={dim} period={period} grid={grid}")));
        }
        let n = grid * period;
        let h = 1.0 / grid as f64;
        let mut half = Vec::with_capacity((n / 2 + 1) * dim);
        for j in 0..=n / 2 {
            let q = f(j as f64 * h);
            if q.len() != dim {
                return Err(Error::Invalid("loop sample has the wrong dimension".into()));
            }
            half.extend(q);
        }
        Ok(SymmetricLoop { dim, period, grid, half })
    }

    pub fn constant(q: &[f64], period: usize, grid: usize) -> Result<Self> {
        Self::from_fn(q.len(), period, grid, |_| q.to_vec())
    }

    /// Cells per period.
    pub fn cells(&self) -> usize {
        self.grid * self.period
    }

    pub fn step(&self) -> f64 {
        1.0 / self.grid as f64
    }

    pub fn half_nodes(&self) -> usize {
        self.cells() / 2 + 1
    }

    pub fn half_node(&self, j: usize) -> &[f64] {
        &self.half[j * self.dim..(j + 1) * self.dim]
    }

    /// Full-grid node `j`, any integer `j` (periodic, even).
    pub fn node(&self, j: i64) -> &[f64] {
        let n = self.cells() as i64;
        let r = j.rem_euclid(n);
        self.half_node(r.min(n - r) as usize)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.cells()).map(|j| j as f64 * self.step()).collect()
    }

    /// Piecewise-linear value at any `t`.
    pub fn eval(&self, t: f64) -> Vec<f64> {
        let s = t * self.grid as f64;
        let j = s.floor();
        let a = s - j;
        let j = j as i64;
        self.node(j).iter().zip(self.node(j + 1)).map(|(x, y)| x + a * (y - x)).collect()
    }

    /// `max_j ‖γ(t_j) − γ(−t_j)‖`; zero by construction, kept as a check.
    pub fn reflection_residual(&self) -> f64 {
        let n = self.cells() as i64;
        (0..n)
            .map(|j| self.node(j).iter().zip(self.node(-j)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max)
    }

    pub fn max_speed(&self) -> f64 {
        let n = self.cells() as i64;
        let g = self.grid as f64;
        (0..n / 2)
            .map(|c| {
                self.node(c).iter().zip(self.node(c + 1)).map(|(a, b)| ((b - a) * g).powi(2)).sum::<f64>().sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// The loop traversed `n` times, of period `n·m`.
    pub fn iterate(&self, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Invalid("iteration count must be positive".into()));
        }
        let cells = self.cells() as i64;
        let mut half = Vec::with_capacity((self.cells() * n / 2 + 1) * self.dim);
        for j in 0..=(self.cells() * n / 2) as i64 {
            half.extend_from_slice(self.node(j.rem_euclid(cells)));
        }
        Ok(SymmetricLoop { dim: self.dim, period: self.period * n, grid: self.grid, half })
    }

    /// `t ↦ γ(t + m/2)`, the other evenness-preserving shift.
    pub fn shift_half_period(&self) -> Self {
        let n2 = (self.cells() / 2) as i64;
        let mut half = Vec::with_capacity(self.half.len());
        for j in 0..=n2 {
            half.extend_from_slice(self.node(j + n2));
        }
        SymmetricLoop { half, ..self.clone() }
    }

    /// Adds the lattice vector `k·periods` to every sample.
    pub fn translate(&self, shift: &[f64]) -> Self {
        let mut out = self.clone();
        for (i, x) in out.half.iter_mut().enumerate() {
            *x += shift[i % self.dim];
        }
        out
    }

    /// The same loop viewed as a 1-periodic loop of `L(nt, q, v/n)`.
    pub fn rescale_to_unit_period(&self) -> Self {
        SymmetricLoop { period: 1, grid: self.grid * self.period, ..self.clone() }
    }

    /// Even trigonometric interpolant on a new grid.
    pub fn resample(&self, grid: usize) -> Result<Self> {
        let coeffs = self.cosine_coefficients();
        let m = self.period as f64;
        Self::from_fn(self.dim, self.period, grid, |t| {
            let mut q = vec![0.0; self.dim];
            for (k, a) in coeffs.iter().enumerate() {
                let c = (std::f64::consts::TAU * k as f64 * t / m).cos();
                for (qi, ai) in q.iter_mut().zip(a) {
                    *qi += ai * c;
                }
            }
            q
        })
    }

    /// Coefficients `a_k` of `Σ a_k cos(2πkt/m)`, `k = 0..=n/2`, with the
    /// doubling of interior modes already applied.
    pub fn cosine_coefficients(&self) -> Vec<Vec<f64>> {
        let n = self.cells();
        let nn = n as i64;
        (0..=n / 2)
            .map(|k| {
                let mut a = vec![0.0; self.dim];
                for j in 0..nn {
                    let c = (std::f64::consts::TAU * ((j * k as i64) % nn) as f64 / n as f64).cos();
                    for (ai, x) in a.iter_mut().zip(self.node(j)) {
                        *ai += x * c;
                    }
                }
                let w = if k == 0 || k == n / 2 { 1.0 } else { 2.0 } / n as f64;
                a.iter().map(|x| x * w).collect()
            })
            .collect()
    }

    /// CSV `t,q1,…,qN` over one full period including the closing node.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for i in 1..=self.dim {
            out.push_str(&format!(",q{i}"));
        }
        out.push('\n');
        for j in 0..=self.cells() as i64 {
            out.push_str(&format!("{}", j as f64 * self.step()));
            for x in self.node(j) {
                out.push_str(&format!(",{x}"));
            }
            out.push('\n');
        }
        out
    }

    fn same_grid(&self, other: &Self) -> Result<()> {
        if self.dim != other.dim || self.period != other.period || self.grid != other.grid {
            return Err(Error::GridMismatch(format!(
                "({}, {}, {}) vs ({}, {}, {})",
                self.dim, self.period, self.grid, other.dim, other.period, other.grid
            )));
        }
        Ok(())
    }

    /// The section `other − self` (lifted difference).
    pub fn difference(&self, other: &Self) -> Result<LoopTangent> {
        self.same_grid(other)?;
        let half = DVector::from_iterator(self.half.len(), other.half.iter().zip(&self.half).map(|(a, b)| a - b));
        Ok(LoopTangent { dim: self.dim, period: self.period, grid: self.grid, half })
    }

    /// `γ + s·ξ` in the flat chart.
    pub fn displaced(&self, xi: &LoopTangent, s: f64) -> Self {
        let mut out = self.clone();
        for (x, d) in out.half.iter_mut().zip(xi.half.iter()) {
            *x += s * d;
        }
        out
    }

    /// Sup-norm distance of full-grid samples.
    pub fn sup_distance(&self, other: &Self) -> Result<f64> {
        self.same_grid(other)?;
        Ok(self.half.iter().zip(&other.half).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }
}

impl LoopTangent {
    pub fn zeros(like: &SymmetricLoop) -> Self {
        LoopTangent { dim: like.dim, period: like.period, grid: like.grid, half: DVector::zeros(like.half.len()) }
    }

    pub fn from_fn(like: &SymmetricLoop, f: impl Fn(f64) -> Vec<f64>) -> Self {
        let h = like.step();
        let half = DVector::from_iterator(
            like.half.len(),
            (0..like.half_nodes()).flat_map(|j| f(j as f64 * h)),
        );
        LoopTangent { dim: like.dim, period: like.period, grid: like.grid, half }
    }

    /// The `i`-th coordinate unit vector of the half basis.
    pub fn basis(like: &SymmetricLoop, i: usize) -> Self {
        let mut t = Self::zeros(like);
        t.half[i] = 1.0;
        t
    }

    pub fn scale(&self, a: f64) -> Self {
        LoopTangent { half: &self.half * a, ..self.clone() }
    }

    fn cells(&self) -> usize {
        self.grid * self.period
    }

    /// Full-grid vector, node-major.
    pub fn unfold(&self) -> DVector<f64> {
        let n = self.cells();
        let d = self.dim;
        DVector::from_fn(n * d, |k, _| {
            let j = k / d;
            self.half[j.min(n - j) * d + k % d]
        })
    }
}

/// Sums full-grid node values into the half basis: `b[j] += b[n−j]`.
pub fn fold(full: &DVector<f64>, dim: usize, cells: usize) -> DVector<f64> {
    let mut half = DVector::zeros((cells / 2 + 1) * dim);
    for j in 0..cells {
        let h = j.min(cells - j);
        for i in 0..dim {
            half[h * dim + i] += full[j * dim + i];
        }
    }
    half
}

/// W^{1,2} inner product over the full period.
pub fn w12_inner(xi: &LoopTangent, zeta: &LoopTangent) -> Result<f64> {
    if xi.dim != zeta.dim || xi.period != zeta.period || xi.grid != zeta.grid {
        return Err(Error::GridMismatch("tangent grids differ".into()));
    }
    let n = xi.cells();
    let d = xi.dim;
    let h = 1.0 / xi.grid as f64;
    let a = xi.unfold();
    let b = zeta.unfold();
    let mut s = 0.0;
    for c in 0..n {
        let c1 = (c + 1) % n;
        for i in 0..d {
            let (x0, x1) = (a[c * d + i], a[c1 * d + i]);
            let (y0, y1) = (b[c * d + i], b[c1 * d + i]);
            s += h * 0.5 * (x0 * y0 + x1 * y1) + (x1 - x0) * (y1 - y0) / h;
        }
    }
    Ok(s)
}

/// Per-cell midpoint data `(t, q̄, Δq/h)` for cells `0..n`.
fn cell_points(g: &SymmetricLoop) -> Vec<(f64, Vec<f64>, Vec<f64>)> {
    let h = g.step();
    let gr = g.grid as f64;
    (0..g.cells() as i64)
        .map(|c| {
            let a = g.node(c);
            let b = g.node(c + 1);
            let mid = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
            let vel = a.iter().zip(b).map(|(x, y)| (y - x) * gr).collect();
            ((c as f64 + 0.5) * h, mid, vel)
        })
        .collect()
}

fn cell_jets(l: &dyn FiberFunction, g: &SymmetricLoop) -> Vec<Jet> {
    cell_points(g).into_par_iter().map(|(t, q, v)| l.jet(t, &q, &v)).collect()
}

/// `EA(γ) = (1/m) ∫₀^m L(t, γ, γ̇) dt` by the midpoint cell rule.
pub fn mean_action(l: &LagrangianSpec, g: &SymmetricLoop) -> f64 {
    let h = g.step();
    let s: f64 = cell_points(g).into_par_iter().map(|(t, q, v)| l.value(t, &q, &v)).sum();
    h * s / g.period as f64
}

/// Full-grid differential of `EA`, node-major.
fn differential_full(jets: &[Jet], g: &SymmetricLoop) -> DVector<f64> {
    let n = g.cells();
    let d = g.dim;
    let h = g.step();
    let w = 1.0 / g.period as f64;
    let mut b = DVector::zeros(n * d);
    for (c, jet) in jets.iter().enumerate() {
        let c1 = (c + 1) % n;
        for i in 0..d {
            let lq = 0.5 * h * jet.dq[i] * w;
            let lv = jet.dw[i] * w;
            b[c * d + i] += lq - lv;
            b[c1 * d + i] += lq + lv;
        }
    }
    b
}

/// Differential of `EA` on the half basis.
pub fn differential(l: &LagrangianSpec, g: &SymmetricLoop) -> DVector<f64> {
    let jets = cell_jets(l.f.as_ref(), g);
    fold(&differential_full(&jets, g), g.dim, g.cells())
}

/// `dEA(γ)[ξ]`.
pub fn action_differential(l: &LagrangianSpec, g: &SymmetricLoop, xi: &LoopTangent) -> Result<f64> {
    if xi.dim != g.dim || xi.period != g.period || xi.grid != g.grid {
        return Err(Error::GridMismatch("tangent does not live on the loop's grid".into()));
    }
    let jets = cell_jets(l.f.as_ref(), g);
    Ok(differential_full(&jets, g).dot(&xi.unfold()))
}

fn assemble(
    g: &SymmetricLoop,
    space: Space,
    cell: impl Fn(usize) -> DMatrix<f64> + Sync,
) -> BlockTri {
    let n = g.cells();
    let d = g.dim;
    let blocks: Vec<DMatrix<f64>> = (0..n).into_par_iter().map(&cell).collect();
    let (nodes, cyclic) = match space {
        Space::Full => (n, true),
        Space::Symmetric => (n / 2 + 1, false),
    };
    let map = |j: usize| match space {
        Space::Full => j % n,
        Space::Symmetric => {
            let j = j % n;
            j.min(n - j)
        }
    };
    let mut m = BlockTri::zeros(nodes, d, cyclic);
    for (c, blk) in blocks.iter().enumerate() {
        let (a, b) = (map(c), map(c + 1));
        let m00 = blk.view((0, 0), (d, d)).into_owned();
        let m01 = blk.view((0, d), (d, d)).into_owned();
        let m11 = blk.view((d, d), (d, d)).into_owned();
        m.add_block(a, a, &m00);
        m.add_block(b, b, &m11);
        m.add_block(a, b, &m01);
    }
    m
}

/// W^{1,2} Gram matrix over the full period.
pub fn gram(g: &SymmetricLoop, space: Space) -> BlockTri {
    let d = g.dim;
    let h = g.step();
    assemble(g, space, |_| {
        let mut blk = DMatrix::zeros(2 * d, 2 * d);
        for i in 0..d {
            blk[(i, i)] = 0.5 * h + 1.0 / h;
            blk[(d + i, d + i)] = 0.5 * h + 1.0 / h;
            blk[(i, d + i)] = -1.0 / h;
            blk[(d + i, i)] = -1.0 / h;
        }
        blk
    })
}

/// Second variation of `∫₀^m L` (no `1/m`) as a block matrix.
pub fn hessian(l: &LagrangianSpec, g: &SymmetricLoop, space: Space) -> BlockTri {
    let jets = cell_jets(l.f.as_ref(), g);
    hessian_from_jets(&jets, g, space)
}

fn hessian_from_jets(jets: &[Jet], g: &SymmetricLoop, space: Space) -> BlockTri {
    let d = g.dim;
    let h = g.step();
    // A maps (ξ_c, ξ_{c+1}) to (ξ̄, Δξ/h)
    let mut a = DMatrix::zeros(2 * d, 2 * d);
    for i in 0..d {
        a[(i, i)] = 0.5;
        a[(i, d + i)] = 0.5;
        a[(d + i, i)] = -1.0 / h;
        a[(d + i, d + i)] = 1.0 / h;
    }
    assemble(g, space, |c| {
        let jet = &jets[c];
        let mut loc = DMatrix::zeros(2 * d, 2 * d);
        loc.view_mut((0, 0), (d, d)).copy_from(&jet.dqq);
        loc.view_mut((0, d), (d, d)).copy_from(&jet.dqw);
        loc.view_mut((d, 0), (d, d)).copy_from(&jet.dqw.transpose());
        loc.view_mut((d, d), (d, d)).copy_from(&jet.dww);
        a.transpose() * loc * &a * h
    })
}

/// Riesz representative of `dEA(γ)` in the W^{1,2} metric, even subspace.
pub fn riesz_gradient(l: &LagrangianSpec, g: &SymmetricLoop) -> Result<LoopTangent> {
    let b = differential(l, g);
    let half = gram(g, Space::Symmetric).solve(&b)?;
    Ok(LoopTangent { dim: g.dim, period: g.period, grid: g.grid, half })
}

fn gradient_norm(gram: &BlockTri, b: &DVector<f64>) -> Result<f64> {
    let x = gram.solve(b)?;
    Ok(b.dot(&x).max(0.0).sqrt())
}

/// W^{1,2} norm of the unrestricted gradient at an even loop.
pub fn full_gradient_check(l: &LagrangianSpec, g: &SymmetricLoop) -> Result<f64> {
    let jets = cell_jets(l.f.as_ref(), g);
    gradient_norm(&gram(g, Space::Full), &differential_full(&jets, g))
}

/// `L(nt, q, v/n)`.
pub struct Rescaled {
    base: Arc<dyn FiberFunction>,
    n: f64,
}

impl FiberFunction for Rescaled {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn jet(&self, t: f64, q: &[f64], v: &[f64]) -> Jet {
        let n = self.n;
        let w: Vec<f64> = v.iter().map(|x| x / n).collect();
        let mut jet = self.base.jet(n * t, q, &w);
        jet.dw /= n;
        jet.dqw /= n;
        jet.dww /= n * n;
        jet
    }

    fn value(&self, t: f64, q: &[f64], v: &[f64]) -> f64 {
        let w: Vec<f64> = v.iter().map(|x| x / self.n).collect();
        self.base.value(self.n * t, q, &w)
    }
}

/// `L̃(t,q,v) = L(nt, q, v/n)` for `n` a power of two.
pub fn time_rescale(l: &LagrangianSpec, n: usize) -> Result<LagrangianSpec> {
    if !n.is_power_of_two() {
        return Err(Error::Invalid(format!("rescaling factor {n} is not a power of two")));
    }
    if n == 1 {
        return Ok(l.clone());
    }
    let f = Rescaled { base: l.f.clone(), n: n as f64 };
    Ok(LagrangianSpec { f: Arc::new(f), reversible: l.reversible, label: format!("{}∘(×{n})", l.label) })
}

#[derive(Clone, Debug)]
pub struct SearchOptions {
    /// Target W^{1,2} norm of the even-subspace gradient.
    pub tol: f64,
    pub descent_iters: usize,
    pub newton_iters: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions { tol: 1e-9, descent_iters: 200, newton_iters: 60 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CriticalPointReport {
    pub critical: SymmetricLoop,
    pub gradient_norm: f64,
    pub action: f64,
    pub converged: bool,
    pub max_speed: f64,
    pub iterations: usize,
}

fn state(l: &LagrangianSpec, g: &SymmetricLoop, gm: &BlockTri) -> Result<(Vec<Jet>, DVector<f64>, f64)> {
    let jets = cell_jets(l.f.as_ref(), g);
    let b = fold(&differential_full(&jets, g), g.dim, g.cells());
    let norm = gradient_norm(gm, &b)?;
    Ok((jets, b, norm))
}

/// Gradient descent with Armijo steps, then Newton on the discrete
/// Euler-Lagrange equations with the gradient norm as merit function.
pub fn find_critical(l: &LagrangianSpec, g0: &SymmetricLoop, opts: &SearchOptions) -> Result<CriticalPointReport> {
    let gm = gram(g0, Space::Symmetric);
    let mut g = g0.clone();
    let (mut jets, mut b, mut norm) = state(l, &g, &gm)?;
    let mut iterations = 0;
    let descent = |g: &mut SymmetricLoop,
                       jets: &mut Vec<Jet>,
                       b: &mut DVector<f64>,
                       norm: &mut f64,
                       steps: usize,
                       iterations: &mut usize|
     -> Result<()> {
        let mut alpha = 1.0;
        for _ in 0..steps {
            if *norm < opts.tol {
                break;
            }
            *iterations += 1;
            let grad = gm.solve(b)?;
            let e0 = mean_action(l, g);
            let slope = norm.powi(2);
            let mut moved = false;
            for _ in 0..60 {
                let mut trial = g.clone();
                for (x, d) in trial.half.iter_mut().zip(grad.iter()) {
                    *x -= alpha * d;
                }
                let e = mean_action(l, &trial);
                if e.is_finite() && e <= e0 - 1e-4 * alpha * slope {
                    *g = trial;
                    moved = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !moved {
                break;
            }
            let s = state(l, g, &gm)?;
            *jets = s.0;
            *b = s.1;
            *norm = s.2;
            alpha = (alpha * 2.0).min(1.0);
        }
        Ok(())
    };
    descent(&mut g, &mut jets, &mut b, &mut norm, opts.descent_iters, &mut iterations)?;
    let mut stalled = 0;
    for _ in 0..opts.newton_iters {
        if norm < opts.tol {
            break;
        }
        iterations += 1;
        let hess = hessian_from_jets(&jets, &g, Space::Symmetric);
        let scale = 1.0 / g.period as f64;
        let mut step = None;
        // tiny Gram shifts regularise exactly degenerate critical manifolds
        for mu in [0.0, 1e-12, 1e-9, 1e-6] {
            let shifted = BlockTri {
                diag: hess.diag.iter().map(|m| m * scale).collect(),
                upper: hess.upper.iter().map(|m| m * scale).collect(),
                ..hess.clone()
            }
            .scaled_add(&gm, mu);
            if let Ok(s) = shifted.solve(&(-&b)) {
                if s.iter().all(|x| x.is_finite()) {
                    step = Some(s);
                    break;
                }
            }
        }
        let Some(step) = step else {
            descent(&mut g, &mut jets, &mut b, &mut norm, 20, &mut iterations)?;
            continue;
        };
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let mut trial = g.clone();
            for (x, d) in trial.half.iter_mut().zip(step.iter()) {
                *x += alpha * d;
            }
            if let Ok((tj, tb, tn)) = state(l, &trial, &gm) {
                if tn.is_finite() && tn < norm {
                    g = trial;
                    jets = tj;
                    b = tb;
                    norm = tn;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            stalled += 1;
            if stalled > 2 {
                break;
            }
            descent(&mut g, &mut jets, &mut b, &mut norm, 20, &mut iterations)?;
        }
    }
    Ok(CriticalPointReport {
        action: mean_action(l, &g),
        max_speed: g.max_speed(),
        converged: norm < opts.tol,
        gradient_norm: norm,
        critical: g,
        iterations,
    })
}

/// Re-solves a critical loop on a grid `factor` times finer, starting from
/// its trigonometric interpolant.
pub fn refine(l: &LagrangianSpec, g: &SymmetricLoop, factor: usize, opts: &SearchOptions) -> Result<CriticalPointReport> {
    let start = g.resample(g.grid * factor)?;
    find_critical(l, &start, &SearchOptions { descent_iters: 0, ..opts.clone() })
}

/// `(4·fine − coarse)/3` on the coarse nodes, cancelling the `h²` term of
/// the midpoint rule.
pub fn richardson(coarse: &SymmetricLoop, fine: &SymmetricLoop) -> Result<SymmetricLoop> {
    if fine.grid != 2 * coarse.grid || fine.period != coarse.period || fine.dim != coarse.dim {
        return Err(Error::GridMismatch("Richardson needs a grid exactly twice as fine".into()));
    }
    let d = coarse.dim;
    let half = (0..coarse.half_nodes())
        .flat_map(|j| {
            let c = coarse.half_node(j);
            let f = fine.half_node(2 * j);
            (0..d).map(move |i| (4.0 * f[i] - c[i]) / 3.0).collect::<Vec<_>>()
        })
        .collect();
    Ok(SymmetricLoop { half, ..coarse.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::model::{kinetic, magnetic_lagrangian, pendulum, OneForm, TWO_PI};
    use approx::assert_relative_eq;

    fn wave(a: f64, c: f64, grid: usize) -> SymmetricLoop {
        SymmetricLoop::from_fn(1, 1, grid, |t| vec![c + a * (TWO_PI * t).cos()]).unwrap()
    }

    #[test]
    fn loop_shape_and_evenness() {
        let g = SymmetricLoop::from_fn(2, 2, 16, |t| vec![t.sin(), 1.0 + t * t]).unwrap();
        assert_eq!(g.cells(), 32);
        assert_eq!(g.half_nodes(), 17);
        assert_eq!(g.node(-3), g.node(3));
        assert_eq!(g.node(29), g.node(3));
        assert_eq!(g.reflection_residual(), 0.0);
        assert!(SymmetricLoop::from_fn(1, 1, 15, |_| vec![0.0]).is_err());
        assert!(SymmetricLoop::from_fn(1, 0, 16, |_| vec![0.0]).is_err());
    }

    #[test]
    fn w12_examples() {
        let g = wave(0.0, 0.0, 256);
        let one = LoopTangent::from_fn(&g, |_| vec![1.0]);
        assert_relative_eq!(w12_inner(&one, &one).unwrap(), 1.0, epsilon = 1e-13);
        let exact = 0.5 + TWO_PI * TWO_PI / 2.0;
        let err = |grid| {
            let g = wave(0.0, 0.0, grid);
            let c = LoopTangent::from_fn(&g, |t| vec![(TWO_PI * t).cos()]);
            (w12_inner(&c, &c).unwrap() - exact).abs()
        };
        assert!(err(256) < 1e-2);
        assert!(err(128) / err(256) > 3.5);
        let c = LoopTangent::from_fn(&g, |t| vec![(TWO_PI * t).cos()]);
        let s = LoopTangent::from_fn(&g, |t| vec![(2.0 * TWO_PI * t).cos() + t]);
        assert_relative_eq!(w12_inner(&c.scale(2.5), &s).unwrap(), 2.5 * w12_inner(&c, &s).unwrap(), epsilon = 1e-12);
        let other = wave(0.0, 0.0, 128);
        assert!(matches!(w12_inner(&c, &LoopTangent::zeros(&other)), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn mean_action_examples() {
        let l = kinetic(1);
        assert_eq!(mean_action(&l, &wave(0.0, 0.3, 64)), 0.0);
        let exact = std::f64::consts::PI.powi(2) * 0.01;
        let e = |grid| (mean_action(&l, &wave(0.1, 0.0, grid)) - exact).abs();
        assert!(e(256) < 1e-4);
        assert!(e(128) / e(256) > 3.5);
        let p = pendulum(0.7);
        let g = SymmetricLoop::from_fn(1, 1, 64, |t| vec![0.2 + 0.1 * (TWO_PI * t).cos()]).unwrap();
        for n in [1, 2, 3, 5] {
            assert!((mean_action(&p, &g.iterate(n).unwrap()) - mean_action(&p, &g)).abs() < 1e-12);
        }
    }

    #[test]
    fn iterate_examples() {
        let g = wave(0.2, 0.1, 32);
        assert_eq!(g.iterate(1).unwrap(), g);
        let c = SymmetricLoop::constant(&[0.4], 1, 32).unwrap();
        assert_eq!(c.iterate(3).unwrap(), SymmetricLoop::constant(&[0.4], 3, 32).unwrap());
        let g3 = g.iterate(3).unwrap();
        assert_eq!(g3.reflection_residual(), 0.0);
        for j in 0..96 {
            assert_eq!(g3.node(j), g.node(j % 32));
        }
    }

    #[test]
    fn differential_matches_finite_differences_and_is_linear() {
        let theta = OneForm::from_exprs(&["0.3 + 0.2*sin(2*pi*q)"], 1).unwrap();
        let l = magnetic_lagrangian(&pendulum(0.5), &theta);
        let g = SymmetricLoop::from_fn(1, 1, 64, |t| vec![0.3 + 0.2 * (TWO_PI * t).cos() + 0.05 * (2.0 * TWO_PI * t).cos()])
            .unwrap();
        let xi = LoopTangent::from_fn(&g, |t| vec![(TWO_PI * t).cos() + 0.3]);
        let zeta = LoopTangent::from_fn(&g, |t| vec![(3.0 * TWO_PI * t).cos()]);
        let d = action_differential(&l, &g, &xi).unwrap();
        let h = 1e-6;
        let fd = (mean_action(&l, &g.displaced(&xi, h)) - mean_action(&l, &g.displaced(&xi, -h))) / (2.0 * h);
        assert!((d - fd).abs() < 1e-7);
        let sum = LoopTangent { half: &xi.half * 2.0 + &zeta.half, ..xi.clone() };
        let lin = 2.0 * d + action_differential(&l, &g, &zeta).unwrap();
        assert!((action_differential(&l, &g, &sum).unwrap() - lin).abs() < 1e-12);
    }

    #[test]
    fn riesz_gradient_pairs_with_the_differential() {
        let l = pendulum(0.5);
        let g = SymmetricLoop::from_fn(1, 1, 32, |t| vec![0.3 + 0.2 * (TWO_PI * t).cos()]).unwrap();
        let grad = riesz_gradient(&l, &g).unwrap();
        for i in 0..g.half_nodes() {
            let e = LoopTangent::basis(&g, i);
            let a = action_differential(&l, &g, &e).unwrap();
            assert!((a - w12_inner(&grad, &e).unwrap()).abs() < 1e-10);
        }
        let step = grad.scale(-1e-3);
        assert!(mean_action(&l, &g.displaced(&step, 1.0)) < mean_action(&l, &g));
    }

    #[test]
    fn hessian_matches_second_differences() {
        let theta = OneForm::from_exprs(&["0.3 + 0.2*sin(2*pi*q)"], 1).unwrap();
        let l = magnetic_lagrangian(&pendulum(0.5), &theta);
        let g = SymmetricLoop::from_fn(1, 1, 16, |t| vec![0.3 + 0.2 * (TWO_PI * t).cos()]).unwrap();
        let xi = LoopTangent::from_fn(&g, |t| vec![(TWO_PI * t).cos() + 0.3]);
        for space in [Space::Symmetric, Space::Full] {
            let hm = hessian(&l, &g, space);
            let v = match space {
                Space::Symmetric => xi.half.clone(),
                Space::Full => xi.unfold(),
            };
            let quad = v.dot(&hm.mul_vec(&v));
            let h = 1e-4;
            let fd = (mean_action(&l, &g.displaced(&xi, h)) - 2.0 * mean_action(&l, &g)
                + mean_action(&l, &g.displaced(&xi, -h)))
                / (h * h);
            assert!((quad - fd).abs() < 1e-4 * quad.abs().max(1.0), "{space:?} {quad} {fd}");
        }
    }

    #[test]
    fn find_critical_examples() {
        let p = pendulum(1.0);
        let start = SymmetricLoop::from_fn(1, 1, 64, |t| vec![0.47 + 0.02 * (2.0 * TWO_PI * t).cos()]).unwrap();
        let r = find_critical(&p, &start, &SearchOptions { descent_iters: 0, ..Default::default() }).unwrap();
        assert!(r.converged);
        assert!(r.critical.sup_distance(&SymmetricLoop::constant(&[0.5], 1, 64).unwrap()).unwrap() < 1e-9);

        let free = kinetic(1);
        let start = SymmetricLoop::from_fn(1, 1, 64, |t| vec![0.2 + 0.1 * (TWO_PI * t).cos() - 0.05 * (3.0 * TWO_PI * t).cos()])
            .unwrap();
        let r = find_critical(&free, &start, &SearchOptions::default()).unwrap();
        assert!(r.converged && r.action.abs() < 1e-12);
        let q = r.critical.node(0)[0];
        assert!(r.critical.sup_distance(&SymmetricLoop::constant(&[q], 1, 64).unwrap()).unwrap() < 1e-9);
    }

    #[test]
    fn constant_critical_loops_are_fully_critical() {
        let p = pendulum(1.0);
        for q in [0.0, 0.5] {
            let g = SymmetricLoop::constant(&[q], 1, 64).unwrap();
            assert!(full_gradient_check(&p, &g).unwrap() < 1e-10);
            assert!(riesz_gradient(&p, &g).unwrap().half.amax() < 1e-10);
        }
    }

    #[test]
    fn magnetic_brake_orbit_by_variational_search() {
        let theta = OneForm::constant(&[0.3]);
        let l = pendulum(1.5);
        let start = SymmetricLoop::from_fn(1, 1, 128, |t| vec![0.5 - 0.27 * (TWO_PI * t).cos()]).unwrap();
        let r = find_critical(&l, &start, &SearchOptions { descent_iters: 0, ..Default::default() }).unwrap();
        assert!(r.converged, "{}", r.gradient_norm);
        let full = full_gradient_check(&l, &r.critical).unwrap();
        assert!(full < 10.0 * r.gradient_norm.max(1e-12), "{full}");
        let _ = theta;
        assert!((r.critical.node(0)[0] - 0.2259).abs() < 1e-3);
    }

    #[test]
    fn richardson_improves_a_quadratic_error() {
        let f = |t: f64| vec![(TWO_PI * t).cos()];
        let c = SymmetricLoop::from_fn(1, 1, 32, f).unwrap();
        let c2 = SymmetricLoop::from_fn(1, 1, 32, |t| vec![(TWO_PI * t).cos() + 1e-3]).unwrap();
        let fine = SymmetricLoop::from_fn(1, 1, 64, |t| vec![(TWO_PI * t).cos() + 0.25e-3]).unwrap();
        let r = richardson(&c2, &fine).unwrap();
        assert!(r.sup_distance(&c).unwrap() < 1e-15);
    }

    #[test]
    fn resample_is_spectrally_accurate() {
        let f = |t: f64| vec![0.3 + 0.2 * (TWO_PI * t).cos() + 0.01 * (3.0 * TWO_PI * t).cos()];
        let g = SymmetricLoop::from_fn(1, 2, 32, f).unwrap();
        let fine = g.resample(128).unwrap();
        let exact = SymmetricLoop::from_fn(1, 2, 128, f).unwrap();
        assert!(fine.sup_distance(&exact).unwrap() < 1e-13);
    }

    #[test]
    fn time_rescale_examples() {
        let p = pendulum(0.7);
        assert_eq!(time_rescale(&p, 1).unwrap().label, p.label);
        assert!(time_rescale(&p, 3).is_err());
        let g = SymmetricLoop::from_fn(1, 2, 64, |t| vec![0.3 + 0.1 * (std::f64::consts::PI * t).cos()]).unwrap();
        let lt = time_rescale(&p, 2).unwrap();
        let unit = g.rescale_to_unit_period();
        assert!((mean_action(&lt, &unit) - mean_action(&p, &g)).abs() < 1e-10);
        let free = time_rescale(&kinetic(1), 4).unwrap();
        let c = SymmetricLoop::constant(&[0.2], 1, 64).unwrap();
        assert!(riesz_gradient(&free, &c).unwrap().half.amax() < 1e-14);
        assert_eq!(mean_action(&free, &c), 0.0);
    }

    proptest! {
        #[test]
        fn action_is_invariant_under_iteration_and_lattice_shift(
            a in -0.3f64..0.3,
            c in -1.0f64..1.0,
            n in 1usize..5,
            shift in -3i32..3,
        ) {
            let l = pendulum(0.8);
            let g = wave(a, c, 32);
            let base = mean_action(&l, &g);
            prop_assert!((mean_action(&l, &g.iterate(n).unwrap()) - base).abs() < 1e-12);
            prop_assert!((mean_action(&l, &g.translate(&[shift as f64])) - base).abs() < 1e-12);
        }

        #[test]
        fn w12_inner_is_symmetric_and_positive(a in -1.0f64..1.0, b in -1.0f64..1.0, c in -1.0f64..1.0) {
            let g = wave(0.1, 0.2, 32);
            let x = LoopTangent::from_fn(&g, |t| vec![a + b * (TWO_PI * t).cos()]);
            let y = LoopTangent::from_fn(&g, |t| vec![c * (2.0 * TWO_PI * t).cos() + b]);
            prop_assert!((w12_inner(&x, &y).unwrap() - w12_inner(&y, &x).unwrap()).abs() < 1e-12);
            prop_assert!(w12_inner(&x, &x).unwrap() >= 0.0);
        }
    }
}
