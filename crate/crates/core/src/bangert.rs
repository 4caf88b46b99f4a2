//! Time-reversible Bangert homotopy on flat tori: path algebra, broken
//! geodesics, the even loops `θ^{⟨2n⟩}(x)`, the action estimate and the
//! simplex homotopy for `q ∈ {1, 2}`.
//!
//! Paths are polylines in the lift `ℝᴺ`; loops from a family are the
//! piecewise-linear interpolants of their grid samples, so every path here
//! is a genuine `W^{1,2}` curve and its action is computed segment by
//! segment with corners at knots.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::loopspace::{mean_action, SymmetricLoop};
use crate::model::{LagrangianSpec, TorusSpace};

/// Sub-segments per geodesic piece, for quadrature along straight lines.
pub const GEODESIC_KNOTS: usize = 16;
/// Endpoint matching tolerance for concatenation.
pub const ENDPOINT_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct PathSegment {
    /// Non-decreasing knot times; the domain is `[times[0], times[last]]`.
    pub times: Vec<f64>,
    /// Lifted positions at the knots.
    pub points: Vec<DVector<f64>>,
}

impl PathSegment {
    pub fn new(times: Vec<f64>, points: Vec<DVector<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != points.len() || times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Invalid("path knots must be non-empty and ordered".into()));
        }
        Ok(PathSegment { times, points })
    }

    pub fn constant(q: &[f64], a: f64, b: f64) -> Self {
        let p = DVector::from_column_slice(q);
        PathSegment { times: vec![a, b], points: vec![p.clone(), p] }
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.times[0], *self.times.last().unwrap())
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn start(&self) -> &DVector<f64> {
        &self.points[0]
    }

    pub fn end(&self) -> &DVector<f64> {
        self.points.last().unwrap()
    }

    pub fn eval(&self, t: f64) -> DVector<f64> {
        let (a, b) = self.domain();
        if t <= a {
            return self.points[0].clone();
        }
        if t >= b {
            return self.end().clone();
        }
        let k = self.times.partition_point(|s| *s <= t).clamp(1, self.times.len() - 1);
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        if t1 <= t0 {
            return self.points[k].clone();
        }
        let s = (t - t0) / (t1 - t0);
        &self.points[k - 1] * (1.0 - s) + &self.points[k] * s
    }

    /// Affine time change onto `[a, b]`.
    pub fn reparametrize(&self, a: f64, b: f64) -> Result<Self> {
        if !(b > a) {
            return Err(Error::Invalid(format!("reparametrization interval [{a}, {b}] is empty")));
        }
        let (a1, b1) = self.domain();
        let times = if b1 > a1 {
            self.times.iter().map(|t| (t - a1) / (b1 - a1) * (b - a) + a).collect()
        } else {
            let k = self.times.len().max(2) - 1;
            (0..self.times.len()).map(|j| a + (b - a) * j as f64 / k as f64).collect()
        };
        let mut out = PathSegment { times, points: self.points.clone() };
        if out.times.len() == 1 {
            out.times.push(b);
            out.points.push(out.points[0].clone());
        }
        *out.times.last_mut().unwrap() = b;
        out.times[0] = a;
        Ok(out)
    }

    /// The path run backwards over the same domain.
    pub fn inverse(&self) -> Self {
        let (a, b) = self.domain();
        let times = self.times.iter().rev().map(|t| a + b - t).collect();
        let points = self.points.iter().rev().cloned().collect();
        PathSegment { times, points }
    }

    pub fn translate(&self, shift: &DVector<f64>) -> Self {
        PathSegment { times: self.times.clone(), points: self.points.iter().map(|p| p + shift).collect() }
    }

    /// `α₁ * α₂` on `[a₁, b₁ + b₂ − a₂]`; `α₂` is moved by the lattice vector
    /// that makes the lifts meet.
    pub fn concatenate(&self, other: &Self, torus: &TorusSpace) -> Result<Self> {
        let p = self.end();
        let q = other.start();
        let shift = DVector::from_iterator(
            p.len(),
            p.iter().zip(q.iter()).zip(&torus.periods).map(|((a, b), l)| l * ((a - b) / l).round()),
        );
        let gap = (p - (q + &shift)).amax();
        if gap > ENDPOINT_TOL {
            return Err(Error::EndpointMismatch { gap });
        }
        let (_, b1) = self.domain();
        let (a2, b2) = other.domain();
        let moved = other.translate(&shift);
        let mut out = self.clone();
        for (t, x) in moved.times.iter().zip(&moved.points).skip(1) {
            out.times.push(t - a2 + b1);
            out.points.push(x.clone());
        }
        if let Some(t) = out.times.last_mut() {
            *t = b1 + b2 - a2;
        }
        Ok(out)
    }

    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| (&w[1] - &w[0]).norm()).sum()
    }

    /// `∫ L(t, α, α̇) dt` by the midpoint rule on each knot interval.
    pub fn action(&self, l: &LagrangianSpec) -> f64 {
        let mut s = 0.0;
        for k in 1..self.times.len() {
            let dt = self.times[k] - self.times[k - 1];
            if dt <= 0.0 {
                continue;
            }
            let (a, b) = (&self.points[k - 1], &self.points[k]);
            let mid: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| 0.5 * (x + y)).collect();
            let vel: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| (y - x) / dt).collect();
            s += dt * l.value(0.5 * (self.times[k] + self.times[k - 1]), &mid, &vel);
        }
        s
    }

    /// Sup of the lifted difference at the given times.
    pub fn sup_distance(&self, other: &Self, times: &[f64]) -> f64 {
        times.iter().map(|t| (self.eval(*t) - other.eval(*t)).amax()).fold(0.0, f64::max)
    }
}

/// Straight segment from `q` along the minimal lift to `q′`, on `[0, 1]`.
pub fn shortest_geodesic(torus: &TorusSpace, q: &[f64], q2: &[f64]) -> Result<PathSegment> {
    let d = torus.min_lift(q, q2);
    let dist = d.iter().map(|x| x * x).sum::<f64>().sqrt();
    let radius = torus.injectivity_radius();
    if dist >= radius {
        return Err(Error::TooFar { distance: dist, radius });
    }
    let p = DVector::from_column_slice(q);
    let d = DVector::from_vec(d);
    let k = GEODESIC_KNOTS;
    let times = (0..=k).map(|j| j as f64 / k as f64).collect();
    let points = (0..=k).map(|j| &p + &d * (j as f64 / k as f64)).collect();
    Ok(PathSegment { times, points })
}

/// One period of a loop as a polyline through its grid nodes, on `[0, m]`.
pub fn loop_path(g: &SymmetricLoop) -> PathSegment {
    let n = g.cells();
    let times = (0..=n).map(|j| j as f64 * g.step()).collect();
    let points = (0..=n as i64).map(|j| DVector::from_column_slice(g.node(j))).collect();
    PathSegment { times, points }
}

type LoopMap = Arc<dyn Fn(f64) -> SymmetricLoop + Send + Sync>;

/// A continuous map `x ↦ θ(x)` from `[x₀, x₁]` to even 1-periodic loops.
#[derive(Clone)]
pub struct LoopFamily {
    pub x0: f64,
    pub x1: f64,
    pub torus: TorusSpace,
    map: LoopMap,
}

impl std::fmt::Debug for LoopFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "LoopFamily[{}, {}]", self.x0, self.x1)
    }
}

impl LoopFamily {
    pub fn new(torus: TorusSpace, x0: f64, x1: f64, map: impl Fn(f64) -> SymmetricLoop + Send + Sync + 'static) -> Result<Self> {
        if !(x1 >= x0) {
            return Err(Error::Invalid(format!("parameter interval [{x0}, {x1}] is empty")));
        }
        let fam = LoopFamily { x0, x1, torus, map: Arc::new(map) };
        let a = fam.at(x0);
        for x in [x0, 0.5 * (x0 + x1), x1] {
            let g = fam.at(x);
            if g.period != 1 || g.dim != fam.torus.dim || g.grid != a.grid {
                return Err(Error::Invalid("family loops must share dimension and grid and have period 1".into()));
            }
        }
        Ok(fam)
    }

    /// Piecewise-linear interpolation in `x` between equally spaced node loops.
    pub fn from_nodes(torus: TorusSpace, x0: f64, x1: f64, nodes: Vec<SymmetricLoop>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::Invalid("a sampled family needs at least two nodes".into()));
        }
        let m = nodes.len() - 1;
        let nodes = Arc::new(nodes);
        Self::new(torus, x0, x1, move |x| {
            let s = if x1 > x0 { ((x - x0) / (x1 - x0)).clamp(0.0, 1.0) * m as f64 } else { 0.0 };
            let j = (s.floor() as usize).min(m - 1);
            let a = s - j as f64;
            let (g0, g1) = (&nodes[j], &nodes[j + 1]);
            let half = g0.half.iter().zip(&g1.half).map(|(p, q)| p + a * (q - p)).collect();
            SymmetricLoop { half, ..g0.clone() }
        })
    }

    /// The same family restricted to `[a, b] ⊂ [x₀, x₁]`.
    pub fn restrict(&self, a: f64, b: f64) -> Result<Self> {
        let map = self.map.clone();
        Self::new(self.torus.clone(), a, b, move |x| map(x))
    }

    pub fn at(&self, x: f64) -> SymmetricLoop {
        (self.map)(x.clamp(self.x0, self.x1))
    }

    pub fn ev(&self, x: f64) -> Vec<f64> {
        self.at(x).half_node(0).to_vec()
    }

    pub fn grid(&self) -> usize {
        self.at(self.x0).grid
    }

    /// Largest `ρ = (x₁ − x₀)/2^k` whose sampled modulus of continuity of
    /// `ev ∘ θ`, with safety factor 2, stays below the injectivity radius.
    pub fn choose_rho(&self) -> Result<f64> {
        let d = self.x1 - self.x0;
        if d == 0.0 {
            return Ok(1.0);
        }
        let m = 512;
        let pts: Vec<Vec<f64>> = (0..=m).map(|j| self.ev(self.x0 + d * j as f64 / m as f64)).collect();
        let radius = self.torus.injectivity_radius();
        for k in 0..=9 {
            let window = m >> k;
            let mut modulus: f64 = 0.0;
            for i in 0..=m {
                for j in i + 1..=(i + window).min(m) {
                    modulus = modulus.max(self.torus.distance(&pts[i], &pts[j]));
                }
            }
            if 2.0 * modulus < radius {
                return Ok(d / (1 << k) as f64);
            }
        }
        Err(Error::TooFar { distance: f64::NAN, radius })
    }
}

/// `θ_a^b`: shortest geodesics between `ev∘θ` at `a`, the grid points
/// `x₀ + jρ` strictly inside `(a, b)`, and `b`, each on its own parameter
/// interval. Degenerate when `a = b`.
pub fn broken_geodesic(family: &LoopFamily, a: f64, b: f64, rho: f64) -> Result<PathSegment> {
    if b < a || !(rho > 0.0) {
        return Err(Error::Invalid(format!("bad broken geodesic request [{a}, {b}] with ρ={rho}")));
    }
    let start = family.ev(a);
    if a == b {
        return Ok(PathSegment::constant(&start, a, a));
    }
    let mut breaks = vec![a];
    let j0 = ((a - family.x0) / rho).floor() as i64 + 1;
    let mut j = j0;
    loop {
        let x = family.x0 + j as f64 * rho;
        if x >= b - 1e-14 * rho {
            break;
        }
        if x > a + 1e-14 * rho {
            breaks.push(x);
        }
        j += 1;
    }
    breaks.push(b);
    let mut path: Option<PathSegment> = None;
    let mut here = DVector::from_column_slice(&start);
    for w in breaks.windows(2) {
        let to = family.ev(w[1]);
        let seg = shortest_geodesic(&family.torus, here.as_slice(), &to)?.reparametrize(w[0], w[1])?;
        here = seg.end().clone();
        path = Some(match path {
            None => seg,
            Some(p) => p.concatenate(&seg, &family.torus)?,
        });
    }
    Ok(path.unwrap())
}

/// Accumulates pieces on consecutive time intervals, dropping zero-length ones.
struct Builder<'a> {
    torus: &'a TorusSpace,
    path: PathSegment,
}

impl<'a> Builder<'a> {
    fn new(torus: &'a TorusSpace, start: &[f64]) -> Self {
        Builder { torus, path: PathSegment { times: vec![0.0], points: vec![DVector::from_column_slice(start)] } }
    }

    fn push(&mut self, seg: &PathSegment, a: f64, b: f64) -> Result<()> {
        if b - a <= 0.0 {
            return Ok(());
        }
        let seg = seg.reparametrize(a, b)?;
        self.path = self.path.concatenate(&seg, self.torus)?;
        Ok(())
    }

    fn copies(&mut self, g: &PathSegment, from: f64, count: usize) -> Result<()> {
        for k in 0..count {
            self.push(g, from + k as f64, from + k as f64 + 1.0)?;
        }
        Ok(())
    }
}

/// Which table of the reparametrisation a parameter falls in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// `x = x₀ + y`.
    First,
    /// `x = x₀ + (l/n)(x₁ − x₀) + y`, `1 ≤ l ≤ n − 2`.
    Middle(usize),
    /// `x = x₀ + ((n−1)/n)(x₁ − x₀) + y`.
    Last,
    /// `x = x₁`.
    End,
}

/// Splits `x` into its regime and the moving offset `u = ny ∈ [0, x₁ − x₀)`.
pub fn regime(family: &LoopFamily, n: usize, x: f64) -> (Regime, f64) {
    let d = family.x1 - family.x0;
    if x >= family.x1 || d == 0.0 {
        return (Regime::End, d);
    }
    let s = (x - family.x0).max(0.0) * n as f64 / d;
    let l = (s.floor() as usize).min(n - 1);
    let u = ((s - l as f64) * d).max(0.0);
    let r = if l == 0 {
        Regime::First
    } else if l == n - 1 {
        Regime::Last
    } else {
        Regime::Middle(l)
    };
    (r, u)
}

/// The non-iterate part of the half loop: its pieces start at `offset` and
/// span `width` units of time.
fn window(family: &LoopFamily, r: Regime, u: f64, rho: f64, b: &mut Builder<'_>, offset: f64) -> Result<f64> {
    let (x0, x1) = (family.x0, family.x1);
    let xm = x0 + u;
    let moving = loop_path(&family.at(xm));
    let w = x1 - xm;
    let first = |b: &mut Builder<'_>| -> Result<()> {
        let g1 = broken_geodesic(family, x0, xm, rho)?;
        let split = offset + u / (u + 1.0);
        b.push(&g1, offset, split)?;
        b.push(&moving, split, offset + 1.0)
    };
    let second = |b: &mut Builder<'_>, from: f64| -> Result<()> {
        let g2 = broken_geodesic(family, xm, x1, rho)?;
        let split = from + w / (w + 1.0);
        b.push(&g2, from, split)?;
        b.push(&loop_path(&family.at(x1)), split, from + 1.0)
    };
    match r {
        Regime::First => {
            first(b)?;
            Ok(1.0)
        }
        Regime::Middle(_) => {
            first(b)?;
            second(b, offset + 1.0)?;
            Ok(2.0)
        }
        Regime::Last => {
            b.push(&moving, offset, offset + 1.0)?;
            second(b, offset + 1.0)?;
            Ok(2.0)
        }
        Regime::End => Ok(0.0),
    }
}

/// `θ^{⟨2n⟩}(x)` on `[0, n]`; the loop is its even `2n`-periodic extension.
pub fn theta_2n_half(family: &LoopFamily, n: usize, x: f64, rho: f64) -> Result<PathSegment> {
    if n < 2 {
        return Err(Error::Invalid("the construction needs n ≥ 2".into()));
    }
    let (r, u) = regime(family, n, x);
    let a = loop_path(&family.at(family.x0));
    let c = loop_path(&family.at(family.x1));
    let (before, after, start) = match r {
        Regime::First => (n - 1, 0, family.ev(family.x0)),
        Regime::Middle(l) => (n - l - 1, l - 1, family.ev(family.x0)),
        Regime::Last => (0, n - 2, family.ev(family.x0 + u)),
        Regime::End => (0, n, family.ev(family.x1)),
    };
    let mut b = Builder::new(&family.torus, &start);
    b.copies(&a, 0.0, before)?;
    let width = window(family, r, u, rho, &mut b, before as f64)?;
    b.copies(&c, before as f64 + width, after)?;
    Ok(b.path)
}

/// Samples a half path on `[0, n]` as an even loop of period `2n`.
pub fn sample_even(half: &PathSegment, n: usize, grid: usize) -> Result<SymmetricLoop> {
    let dim = half.dim();
    SymmetricLoop::from_fn(dim, 2 * n, grid, |t| half.eval(t).as_slice().to_vec())
}

/// `θ^{⟨2n⟩}(x)` as a grid loop; exactly the iterate at `x₀` and `x₁`.
pub fn theta_2n(family: &LoopFamily, n: usize, x: f64, rho: f64) -> Result<SymmetricLoop> {
    if x <= family.x0 {
        return family.at(family.x0).iterate(2 * n);
    }
    if x >= family.x1 {
        return family.at(family.x1).iterate(2 * n);
    }
    sample_even(&theta_2n_half(family, n, x, rho)?, n, family.grid())
}

/// `EA^{[2n]}(θ^{⟨2n⟩}(x))` from the half path; `L` is reversible, so the
/// reflected half contributes the same.
pub fn theta_2n_action(l: &LagrangianSpec, family: &LoopFamily, n: usize, x: f64, rho: f64) -> Result<f64> {
    if x <= family.x0 || x >= family.x1 {
        return Ok(mean_action(l, &family.at(x)));
    }
    Ok(theta_2n_half(family, n, x, rho)?.action(l) / n as f64)
}

/// `θ̂(x)`: the Step 2 loop with the powers of `θ(x₀)` and `θ(x₁)` erased,
/// as an even loop of period 2. The half `[0, 1]` runs `θ_{x₀}^{x}` and
/// `θ(x)` on `[0, 1/2]` (split as in the reparametrisation tables) and
/// `θ_x^{x₁}` on `[1/2, 1]`. Returns the loop and `∫₀² L`.
pub fn hat_loop(l: &LagrangianSpec, family: &LoopFamily, x: f64, rho: f64) -> Result<(SymmetricLoop, f64)> {
    let u = (x - family.x0).max(0.0);
    let g1 = broken_geodesic(family, family.x0, x, rho)?;
    let g2 = broken_geodesic(family, x, family.x1, rho)?;
    let mut b = Builder::new(&family.torus, &family.ev(family.x0));
    let split = 0.5 * u / (u + 1.0);
    b.push(&g1, 0.0, split)?;
    b.push(&loop_path(&family.at(x)), split, 0.5)?;
    b.push(&g2, 0.5, 1.0)?;
    let action = 2.0 * b.path.action(l);
    Ok((sample_even(&b.path, 1, family.grid())?, action))
}

/// Parameter samples `u_k = k(x₁ − x₀)/64` shared by the constants and the
/// checks, so the bound is evaluated where `C(θ)` was maximised.
pub const PARAMETER_SAMPLES: usize = 64;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FamilyConstants {
    pub rho: f64,
    /// `max{EA(θ(x₀)), EA(θ(x₁))}`.
    pub endpoint_max: f64,
    /// `C(θ) = max 2·(A_window − width·endpoint_max)` over regimes and `u`.
    pub c_theta: f64,
    /// `max_x EA(θ̂(x))`, reported alongside.
    pub hat_max: f64,
}

/// `C(θ)` is the largest excess of a half-loop window over the endpoint
/// action rate; with it `EA^{[2n]}(θ^{⟨2n⟩}(x)) ≤ max + C(θ)/(2n)` is an
/// identity-level bound for every `n`, since windows do not depend on `n`.
pub fn family_constants(l: &LagrangianSpec, family: &LoopFamily) -> Result<FamilyConstants> {
    let rho = family.choose_rho()?;
    let m = mean_action(l, &family.at(family.x0)).max(mean_action(l, &family.at(family.x1)));
    let d = family.x1 - family.x0;
    let us: Vec<f64> = (0..=PARAMETER_SAMPLES).map(|k| d * k as f64 / PARAMETER_SAMPLES as f64).collect();
    let excess: Vec<f64> = us
        .par_iter()
        .map(|&u| -> Result<f64> {
            let mut best = f64::NEG_INFINITY;
            for r in [Regime::First, Regime::Middle(1), Regime::Last] {
                let start = if r == Regime::Last { family.ev(family.x0 + u) } else { family.ev(family.x0) };
                let mut b = Builder::new(&family.torus, &start);
                let width = window(family, r, u, rho, &mut b, 0.0)?;
                best = best.max(2.0 * (b.path.action(l) - width * m));
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;
    let hats: Vec<f64> = us
        .par_iter()
        .map(|&u| hat_loop(l, family, family.x0 + u, rho).map(|h| h.1))
        .collect::<Result<_>>()?;
    Ok(FamilyConstants {
        rho,
        endpoint_max: m,
        c_theta: excess.into_iter().fold(f64::NEG_INFINITY, f64::max),
        hat_max: hats.into_iter().fold(f64::NEG_INFINITY, f64::max),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BangertSample {
    pub x: f64,
    pub action: f64,
    pub bound: f64,
    pub reflection_residual: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BangertOutput {
    pub n: usize,
    pub constants: FamilyConstants,
    pub samples: Vec<BangertSample>,
    pub loops: Vec<SymmetricLoop>,
    /// Sup gap across each regime junction `x₀ + l(x₁ − x₀)/n`.
    pub junction_gap: f64,
    /// `θ^{⟨2n⟩}(x₁)` against the `2n`-fold iterate.
    pub end_matches_iterate: bool,
}

/// Slack allowed in the action bound for quadrature round-off.
pub fn quadrature_slack(scale: f64) -> f64 {
    1e-9 * (1.0 + scale.abs())
}

impl BangertOutput {
    pub fn bound_holds(&self) -> bool {
        self.samples.iter().all(|s| s.action <= s.bound + quadrature_slack(s.bound))
    }
    pub fn all_even(&self) -> bool {
        self.samples.iter().all(|s| s.reflection_residual < 1e-12)
    }
}

/// `θ^{⟨2n⟩}` on the parameter samples, with the action bound and
/// continuity checks.
pub fn build_theta_2n(l: &LagrangianSpec, family: &LoopFamily, n: usize) -> Result<BangertOutput> {
    let constants = family_constants(l, family)?;
    let d = family.x1 - family.x0;
    let rho = constants.rho;
    let xs: Vec<f64> = (0..=PARAMETER_SAMPLES)
        .map(|k| if k == PARAMETER_SAMPLES { family.x1 } else { family.x0 + d * k as f64 / PARAMETER_SAMPLES as f64 })
        .collect();
    let bound = constants.endpoint_max + constants.c_theta / (2 * n) as f64;
    let built: Vec<(SymmetricLoop, BangertSample)> = xs
        .par_iter()
        .map(|&x| -> Result<_> {
            let g = theta_2n(family, n, x, rho)?;
            let action = theta_2n_action(l, family, n, x, rho)?;
            let s = BangertSample { x, action, bound, reflection_residual: g.reflection_residual() };
            Ok((g, s))
        })
        .collect::<Result<_>>()?;
    let mut gap: f64 = 0.0;
    if d > 0.0 {
        let times: Vec<f64> = (0..=n * family.grid()).map(|j| j as f64 / family.grid() as f64).collect();
        for j in 1..n {
            let xj = family.x0 + d * j as f64 / n as f64;
            let left = theta_2n_half(family, n, xj - 1e-9 * d, rho)?;
            let right = theta_2n_half(family, n, xj, rho)?;
            gap = gap.max(left.sup_distance(&right, &times));
        }
    }
    let end_matches_iterate = theta_2n(family, n, family.x1, rho)? == family.at(family.x1).iterate(2 * n)?;
    let (loops, samples) = built.into_iter().unzip();
    Ok(BangertOutput { n, constants, samples, loops, junction_gap: gap, end_matches_iterate })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ActionBoundRow {
    pub n: usize,
    pub max_excess: f64,
    pub c_theta_over_2n: f64,
    pub holds: bool,
}

/// The action estimate for each `n`: excess of `EA^{[2n]}(θ^{⟨2n⟩}(x))` over
/// the endpoint maximum against `C(θ)/(2n)`.
pub fn action_bound_check(l: &LagrangianSpec, family: &LoopFamily, ns: &[usize]) -> Result<Vec<ActionBoundRow>> {
    ns.iter()
        .map(|&n| {
            let out = build_theta_2n(l, family, n)?;
            let m = out.constants.endpoint_max;
            let max_excess = out.samples.iter().map(|s| s.action - m).fold(f64::NEG_INFINITY, f64::max);
            Ok(ActionBoundRow { n, max_excess, c_theta_over_2n: out.constants.c_theta / (2 * n) as f64, holds: out.bound_holds() })
        })
        .collect()
}

type SimplexMap = Arc<dyn Fn(&[f64]) -> SymmetricLoop + Send + Sync>;

/// A singular simplex `σ: Δ^q → EH(1)`, `Δ^q = {z ≥ 0, Σz ≤ 1} ⊂ ℝ^q`.
#[derive(Clone)]
pub struct Simplex {
    pub q: usize,
    pub torus: TorusSpace,
    map: SimplexMap,
}

impl Simplex {
    pub fn new(q: usize, torus: TorusSpace, map: impl Fn(&[f64]) -> SymmetricLoop + Send + Sync + 'static) -> Result<Self> {
        if !(1..=2).contains(&q) {
            return Err(Error::Unsupported(format!("simplex dimension {q}; only 1 and 2 are implemented")));
        }
        Ok(Simplex { q, torus, map: Arc::new(map) })
    }

    pub fn at(&self, z: &[f64]) -> SymmetricLoop {
        (self.map)(z)
    }

    /// `(y, x)` coordinates along `L⊥ ⊕ L`, `L` through the origin and the barycenter.
    pub fn split(&self, z: &[f64]) -> (f64, f64) {
        match self.q {
            1 => (0.0, z[0]),
            _ => ((z[0] - z[1]) / 2f64.sqrt(), (z[0] + z[1]) / 2f64.sqrt()),
        }
    }

    pub fn join(&self, y: f64, x: f64) -> Vec<f64> {
        match self.q {
            1 => vec![x],
            _ => vec![(x + y) / 2f64.sqrt(), (x - y) / 2f64.sqrt()],
        }
    }

    /// Maximal `[x₀, x₁]` with `{y} × [x₀, x₁] ⊂ sΔ^q`, if any.
    pub fn chord(&self, y: f64, s: f64) -> Option<(f64, f64)> {
        match self.q {
            1 => Some((0.0, s)),
            _ => {
                let hi = s / 2f64.sqrt();
                (y.abs() <= hi + 1e-15).then(|| (y.abs().min(hi), hi))
            }
        }
    }

    pub fn contains_scaled(&self, z: &[f64], s: f64) -> bool {
        let tol = 1e-12;
        z.iter().all(|c| *c >= -tol) && z.iter().sum::<f64>() <= s + tol
    }

    pub fn on_boundary(&self, z: &[f64]) -> bool {
        let tol = 1e-12;
        z.iter().any(|c| c.abs() <= tol) || (z.iter().sum::<f64>() - 1.0).abs() <= tol
    }

    /// The chord family `x ↦ σ(y, x)` on `[x₀(y,s), x₁(y,s)]`.
    pub fn chord_family(&self, y: f64, s: f64) -> Result<Option<LoopFamily>> {
        let Some((a, b)) = self.chord(y, s) else { return Ok(None) };
        let me = self.clone();
        LoopFamily::new(self.torus.clone(), a, b, move |x| me.at(&me.join(y, x))).map(Some)
    }

    /// Sample points of `Δ^q`: `side + 1` per edge.
    pub fn grid(&self, side: usize) -> Vec<Vec<f64>> {
        match self.q {
            1 => (0..=side).map(|k| vec![k as f64 / side as f64]).collect(),
            _ => {
                let mut out = vec![];
                for i in 0..=side {
                    for j in 0..=side - i {
                        out.push(vec![i as f64 / side as f64, j as f64 / side as f64]);
                    }
                }
                out
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct HomotopySample {
    pub s: f64,
    pub z: Vec<f64>,
    pub action: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HomotopyReport {
    pub q: usize,
    pub n: usize,
    pub c1: f64,
    pub c2: f64,
    pub epsilon: f64,
    pub c_sigma: f64,
    pub n_bar: usize,
    pub samples: Vec<HomotopySample>,
    /// `B(0, ·) = σ^{[2n]}` on every sample.
    pub cond_i: bool,
    /// `EA^{[2n]}(B(1, z)) < c₁` on every sample.
    pub cond_ii: bool,
    /// `B(s, z) = B(0, z)` for every boundary sample and every `s`.
    pub cond_iii: bool,
    /// `EA^{[2n]}(B(s, z)) < c₂` everywhere.
    pub below_c2: bool,
    pub all_even: bool,
    #[serde(skip)]
    pub loops: Vec<SymmetricLoop>,
}

impl HomotopyReport {
    pub fn certified(&self) -> bool {
        self.cond_i && self.cond_ii && self.cond_iii && self.below_c2 && self.all_even
    }
}

#[derive(Clone, Debug)]
pub struct HomotopyOptions {
    pub s_steps: usize,
    pub side: usize,
    pub keep_loops: bool,
}

impl Default for HomotopyOptions {
    fn default() -> Self {
        HomotopyOptions { s_steps: 4, side: 64, keep_loops: false }
    }
}

/// `B_σ^{[2n]}(s, z)` and its action.
pub fn homotopy_point(l: &LagrangianSpec, sigma: &Simplex, n: usize, s: f64, z: &[f64]) -> Result<(SymmetricLoop, f64)> {
    if s > 0.0 && sigma.contains_scaled(z, s) {
        let (y, x) = sigma.split(z);
        if let Some(fam) = sigma.chord_family(y, s)? {
            let x = snap(x, fam.x0, fam.x1);
            let rho = fam.choose_rho()?;
            let g = theta_2n(&fam, n, x, rho)?;
            let a = theta_2n_action(l, &fam, n, x, rho)?;
            return Ok((g, a));
        }
    }
    let g = sigma.at(z).iterate(2 * n)?;
    let a = mean_action(l, &g);
    Ok((g, a))
}

fn snap(x: f64, a: f64, b: f64) -> f64 {
    let tol = 1e-12 * (1.0 + b.abs());
    if (x - a).abs() <= tol {
        a
    } else if (x - b).abs() <= tol {
        b
    } else {
        x.clamp(a, b)
    }
}

/// `C(σ)` over the sampled `s` and the chords through the sampled `z`.
pub fn c_sigma(l: &LagrangianSpec, sigma: &Simplex, opts: &HomotopyOptions) -> Result<f64> {
    let mut ys: Vec<f64> = sigma.grid(opts.side.min(16)).iter().map(|z| sigma.split(z).0).collect();
    ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ys.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let mut jobs = vec![];
    for k in 1..=opts.s_steps {
        let s = k as f64 / opts.s_steps as f64;
        for y in &ys {
            jobs.push((s, *y));
        }
    }
    let cs: Vec<f64> = jobs
        .par_iter()
        .map(|(s, y)| -> Result<f64> {
            match sigma.chord_family(*y, *s)? {
                Some(f) if f.x1 > f.x0 => Ok(family_constants(l, &f)?.c_theta),
                _ => Ok(f64::NEG_INFINITY),
            }
        })
        .collect::<Result<_>>()?;
    Ok(cs.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// Smallest admissible `n̄ = ⌈C(σ)/2ε⌉`, at least 1.
pub fn n_bar(c_sigma: f64, epsilon: f64) -> usize {
    ((c_sigma / (2.0 * epsilon)).ceil().max(1.0)) as usize
}

/// Samples `B_σ^{[2n]}` and certifies conditions (i)–(iii).
pub fn bangert_homotopy(
    l: &LagrangianSpec,
    sigma: &Simplex,
    n: usize,
    c1: f64,
    c2: f64,
    epsilon: f64,
    opts: &HomotopyOptions,
) -> Result<HomotopyReport> {
    let zs = sigma.grid(opts.side);
    for z in &zs {
        let a = mean_action(l, &sigma.at(z));
        if a >= c2 - epsilon {
            return Err(Error::PreconditionViolated(format!("EA(σ({z:?})) = {a} is not below c₂ − ε = {}", c2 - epsilon)));
        }
        if sigma.on_boundary(z) && a >= c1 - epsilon {
            return Err(Error::PreconditionViolated(format!("boundary EA(σ({z:?})) = {a} is not below c₁ − ε = {}", c1 - epsilon)));
        }
    }
    let cs = c_sigma(l, sigma, opts)?;
    let nb = n_bar(cs, epsilon);
    if n < nb.max(2) {
        return Err(Error::PreconditionViolated(format!("n = {n} is below n̄ = {nb} (or 2)")));
    }
    let mut jobs = vec![];
    for k in 0..=opts.s_steps {
        for z in &zs {
            jobs.push((k as f64 / opts.s_steps as f64, z.clone()));
        }
    }
    let pts: Vec<(SymmetricLoop, HomotopySample)> = jobs
        .par_iter()
        .map(|(s, z)| -> Result<_> {
            let (g, a) = homotopy_point(l, sigma, n, *s, z)?;
            Ok((g, HomotopySample { s: *s, z: z.clone(), action: a }))
        })
        .collect::<Result<_>>()?;
    let mut cond_i = true;
    let mut cond_ii = true;
    let mut cond_iii = true;
    let mut below = true;
    let mut even = true;
    let per_s = zs.len();
    for (idx, (g, smp)) in pts.iter().enumerate() {
        let zi = idx % per_s;
        let base = sigma.at(&zs[zi]).iterate(2 * n)?;
        even &= g.reflection_residual() < 1e-12 && g.period == 2 * n;
        below &= smp.action < c2;
        if smp.s == 0.0 {
            cond_i &= *g == base;
        }
        if smp.s == 1.0 {
            cond_ii &= smp.action < c1;
        }
        if sigma.on_boundary(&zs[zi]) {
            cond_iii &= g.sup_distance(&pts[zi].0)? < 1e-12;
        }
    }
    let loops = if opts.keep_loops { pts.iter().map(|p| p.0.clone()).collect() } else { vec![] };
    Ok(HomotopyReport {
        q: sigma.q,
        n,
        c1,
        c2,
        epsilon,
        c_sigma: cs,
        n_bar: nb,
        samples: pts.into_iter().map(|p| p.1).collect(),
        cond_i,
        cond_ii,
        cond_iii,
        below_c2: below,
        all_even: even,
        loops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{kinetic, pendulum, TWO_PI};
    use proptest::prelude::*;

    fn t1() -> TorusSpace {
        TorusSpace::new(1)
    }

    fn seg(a: f64, b: f64) -> PathSegment {
        PathSegment::new(vec![0.0, 1.0], vec![DVector::from_element(1, a), DVector::from_element(1, b)]).unwrap()
    }

    fn constant_family(x0: f64, x1: f64, from: f64, to: f64) -> LoopFamily {
        LoopFamily::new(t1(), x0, x1, move |x| {
            let s = if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.0 };
            SymmetricLoop::constant(&[from + s * (to - from)], 1, 32).unwrap()
        })
        .unwrap()
    }

    #[test]
    fn reparametrize_examples() {
        let a = seg(0.1, 0.4);
        assert_eq!(a.reparametrize(0.0, 1.0).unwrap(), a);
        let c = PathSegment::constant(&[0.3], 0.0, 1.0).reparametrize(2.0, 7.0).unwrap();
        assert!(c.points.iter().all(|p| p[0] == 0.3));
        let twice = a.reparametrize(2.0, 5.0).unwrap().reparametrize(-1.0, 0.5).unwrap();
        let direct = a.reparametrize(-1.0, 0.5).unwrap();
        for t in [-1.0, -0.3, 0.1, 0.5] {
            assert!((twice.eval(t) - direct.eval(t)).amax() < 1e-14);
        }
        assert!(a.reparametrize(1.0, 1.0).is_err());
    }

    #[test]
    fn concatenate_examples() {
        let a = seg(0.0, 0.3);
        let b = seg(0.3, 0.5);
        let ab = a.concatenate(&b, &t1()).unwrap();
        assert_eq!(ab.domain(), (0.0, 2.0));
        assert!((ab.end()[0] - ab.start()[0] - 0.5).abs() < 1e-15);
        let stay = a.concatenate(&PathSegment::constant(&[0.3], 0.0, 1.0), &t1()).unwrap();
        assert!(stay.points.iter().all(|p| (0.0..=0.3).contains(&p[0])));
        let back = a.concatenate(&a.inverse(), &t1()).unwrap();
        assert_eq!(back.start(), back.end());
        assert!(matches!(a.concatenate(&seg(0.4, 0.5), &t1()), Err(Error::EndpointMismatch { .. })));
        // lifts differing by a lattice vector still join
        assert!(a.concatenate(&seg(1.3, 1.5), &t1()).is_ok());
    }

    #[test]
    fn geodesic_examples() {
        let g = shortest_geodesic(&t1(), &[0.9], &[0.1]).unwrap();
        assert!((g.end()[0] - 1.1).abs() < 1e-15);
        assert!((g.length() - 0.2).abs() < 1e-14);
        let still = shortest_geodesic(&t1(), &[0.4], &[0.4]).unwrap();
        assert_eq!(still.length(), 0.0);
        assert!(matches!(shortest_geodesic(&t1(), &[0.0], &[0.5]), Err(Error::TooFar { .. })));
    }

    proptest! {
        #[test]
        fn geodesic_length_is_torus_distance(a in 0.0f64..3.0, b in 0.0f64..3.0, c in -2.0f64..2.0, d in -2.0f64..2.0) {
            let torus = TorusSpace::with_periods(vec![1.0, 1.5]).unwrap();
            let (p, q) = ([a, c], [b, d]);
            // lattice enumeration oracle
            let mut best = f64::INFINITY;
            for i in -4..=4 {
                for j in -4..=4 {
                    let dx = q[0] - p[0] + i as f64;
                    let dy = q[1] - p[1] + 1.5 * j as f64;
                    best = best.min((dx * dx + dy * dy).sqrt());
                }
            }
            match shortest_geodesic(&torus, &p, &q) {
                Ok(g) => prop_assert!((g.length() - best).abs() < 1e-14),
                Err(Error::TooFar { .. }) => prop_assert!(best >= 0.5 - 1e-12),
                Err(e) => prop_assert!(false, "{e}"),
            }
        }

        #[test]
        fn concatenation_keeps_endpoints(a in -1.0f64..1.0, b in -0.4f64..0.4, c in -0.4f64..0.4) {
            let p = seg(a, a + b);
            let q = seg(a + b, a + b + c).reparametrize(3.0, 4.5).unwrap();
            let pq = p.concatenate(&q, &t1()).unwrap();
            prop_assert_eq!(pq.domain(), (0.0, 2.5));
            prop_assert!((pq.end()[0] - (a + b + c)).abs() < 1e-14);
            prop_assert!((pq.length() - b.abs() - c.abs()).abs() < 1e-13);
        }
    }

    #[test]
    fn broken_geodesic_examples() {
        let fam = constant_family(0.0, 0.5, 0.0, 0.5);
        let g = broken_geodesic(&fam, 0.0, 0.5, 0.3).unwrap();
        assert_eq!(g.domain(), (0.0, 0.5));
        assert!((g.start()[0]).abs() < 1e-15 && (g.end()[0] - 0.5).abs() < 1e-15);
        assert!((g.length() - 0.5).abs() < 1e-14);
        // two geodesic pieces, each with its own knots
        assert_eq!(g.times.iter().filter(|t| (**t - 0.3).abs() < 1e-15).count(), 1);
        let still = LoopFamily::new(t1(), 0.0, 1.0, |_| SymmetricLoop::constant(&[0.2], 1, 32).unwrap()).unwrap();
        assert_eq!(broken_geodesic(&still, 0.0, 0.7, 0.25).unwrap().length(), 0.0);
        let wide = constant_family(0.0, 1.0, 0.0, 0.9);
        let rho = wide.choose_rho().unwrap();
        assert!(rho <= 0.5);
        let g = broken_geodesic(&wide, 0.0, 0.8, rho).unwrap();
        assert!((g.end()[0] - 0.72).abs() < 1e-14);
    }

    fn pendulum_family() -> LoopFamily {
        LoopFamily::new(t1(), 0.0, 1.0, |x| {
            SymmetricLoop::from_fn(1, 1, 32, move |t| vec![0.5 * x + 0.05 * (1.0 + x) * (TWO_PI * t).cos()]).unwrap()
        })
        .unwrap()
    }

    #[test]
    fn theta_2n_endpoints_and_evenness() {
        let l = pendulum(1.0);
        let fam = pendulum_family();
        for n in [2usize, 3, 4] {
            let out = build_theta_2n(&l, &fam, n).unwrap();
            assert!(out.end_matches_iterate);
            assert_eq!(out.loops[0], fam.at(0.0).iterate(2 * n).unwrap());
            assert!(out.all_even());
            assert!(out.loops.iter().all(|g| g.period == 2 * n));
            assert!(out.bound_holds(), "n={n}");
            assert!(out.junction_gap < 1e-6, "n={n} gap {}", out.junction_gap);
            // the x₀ construction through the tables agrees with the iterate
            let half = theta_2n_half(&fam, n, 0.0, out.constants.rho).unwrap();
            let g = sample_even(&half, n, 32).unwrap();
            assert!(g.sup_distance(&out.loops[0]).unwrap() < 1e-14);
        }
    }

    #[test]
    fn constant_family_has_degenerate_geodesics() {
        let l = pendulum(1.0);
        let rest = SymmetricLoop::constant(&[0.3], 1, 32).unwrap();
        let ea = mean_action(&l, &rest);
        let fam = LoopFamily::new(t1(), 0.0, 1.0, move |_| rest.clone()).unwrap();
        for n in [2, 4] {
            let out = build_theta_2n(&l, &fam, n).unwrap();
            assert!(out.samples.iter().all(|s| (s.action - ea).abs() < 1e-12));
        }
        assert!(family_constants(&l, &fam).unwrap().c_theta.abs() < 1e-12);
        // a moving loop is only reparametrised: the bound holds and C(θ) ≥ 0
        let gamma = SymmetricLoop::from_fn(1, 1, 32, |t| vec![0.5 + 0.1 * (TWO_PI * t).cos()]).unwrap();
        let fam = LoopFamily::new(t1(), 0.0, 1.0, move |_| gamma.clone()).unwrap();
        let rows = action_bound_check(&l, &fam, &[2, 4, 8]).unwrap();
        assert!(rows.iter().all(|r| r.holds && r.c_theta_over_2n >= 0.0), "{rows:?}");
    }

    #[test]
    fn two_constant_family_bound_decays() {
        let l = kinetic(1);
        let fam = constant_family(0.0, 1.0, 0.0, 0.5);
        let rows = action_bound_check(&l, &fam, &[2, 4, 8]).unwrap();
        assert!(rows.iter().all(|r| r.holds));
        let c = family_constants(&l, &fam).unwrap();
        assert!(c.c_theta > 0.0 && c.c_theta.is_finite());
        assert!(c.hat_max > 0.0 && c.hat_max.is_finite());
        // excess ~ C/(2n)
        for w in rows.windows(2) {
            let ratio = w[0].max_excess / w[1].max_excess;
            assert!((ratio - 2.0).abs() < 0.4, "{rows:?}");
        }
    }

    #[test]
    fn hat_loop_is_independent_of_n() {
        let l = pendulum(1.0);
        let fam = pendulum_family();
        let rho = fam.choose_rho().unwrap();
        let (g, a) = hat_loop(&l, &fam, 0.4, rho).unwrap();
        assert_eq!(g.period, 2);
        assert!(g.reflection_residual() < 1e-12);
        assert!(a.is_finite());
    }

    #[test]
    fn homotopy_q1() {
        let l = kinetic(1);
        let sigma = Simplex::new(1, t1(), |z| SymmetricLoop::constant(&[0.5 * z[0]], 1, 32).unwrap()).unwrap();
        let eps = 0.05;
        let opts = HomotopyOptions { s_steps: 4, side: 64, keep_loops: false };
        let cs = c_sigma(&l, &sigma, &opts).unwrap();
        let n = n_bar(cs, eps).max(2);
        let rep = bangert_homotopy(&l, &sigma, n, eps * 1.01 + 0.0, 1.0, eps, &opts).unwrap();
        assert!(rep.certified(), "{rep:?}");
        assert_eq!(rep.n_bar, n_bar(cs, eps));
        assert!(matches!(
            bangert_homotopy(&l, &sigma, n, 0.01, 1.0, eps, &opts),
            Err(Error::PreconditionViolated(_))
        ));
    }

    #[test]
    fn homotopy_q2() {
        let l = pendulum(0.2);
        let torus = TorusSpace::new(1);
        let sigma = Simplex::new(2, torus, |z| {
            let (a, b) = (z[0], z[1]);
            SymmetricLoop::from_fn(1, 1, 16, move |t| vec![0.3 * a + 0.05 * b * (TWO_PI * t).cos()]).unwrap()
        })
        .unwrap();
        let opts = HomotopyOptions { s_steps: 2, side: 6, keep_loops: false };
        let eps = 0.1;
        let cs = c_sigma(&l, &sigma, &opts).unwrap();
        let n = n_bar(cs, eps).max(2);
        let amax = sigma.grid(6).iter().map(|z| mean_action(&l, &sigma.at(z))).fold(f64::NEG_INFINITY, f64::max);
        let rep = bangert_homotopy(&l, &sigma, n, amax + eps + 1e-3, amax + 1.0, eps, &opts).unwrap();
        assert!(rep.certified(), "{rep:?}");
        assert!(Simplex::new(3, TorusSpace::new(1), |_| SymmetricLoop::constant(&[0.0], 1, 8).unwrap()).is_err());
    }
}
