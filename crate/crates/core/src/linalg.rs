//! Block tridiagonal symmetric matrices, optionally cyclic, with an
//! unpivoted block LDLᵀ used for solves and Sylvester inertia counts.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Symmetric matrix with `n` diagonal blocks of size `b`; `upper[i]` couples
/// node `i` to node `i+1`, and when `cyclic`, `upper[n-1]` couples node
/// `n-1` to node `0`.
#[derive(Clone, Debug)]
pub struct BlockTri {
    pub block: usize,
    pub diag: Vec<DMatrix<f64>>,
    pub upper: Vec<DMatrix<f64>>,
    pub cyclic: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Inertia {
    pub negative: usize,
    pub zero: usize,
    pub positive: usize,
}

impl BlockTri {
    pub fn zeros(nodes: usize, block: usize, cyclic: bool) -> Self {
        let links = if cyclic { nodes } else { nodes.saturating_sub(1) };
        BlockTri {
            block,
            diag: vec![DMatrix::zeros(block, block); nodes],
            upper: vec![DMatrix::zeros(block, block); links],
            cyclic,
        }
    }

    pub fn nodes(&self) -> usize {
        self.diag.len()
    }

    pub fn size(&self) -> usize {
        self.nodes() * self.block
    }

    /// Adds `m` to the `(i, j)` block; `j` must be `i`, `i+1` or the cyclic
    /// neighbour. The transposed block is implied.
    pub fn add_block(&mut self, i: usize, j: usize, m: &DMatrix<f64>) {
        let n = self.nodes();
        if i == j {
            self.diag[i] += m;
        } else if j == i + 1 {
            self.upper[i] += m;
        } else if i == j + 1 {
            self.upper[j] += m.transpose();
        } else if self.cyclic && i == n - 1 && j == 0 {
            self.upper[n - 1] += m;
        } else if self.cyclic && i == 0 && j == n - 1 {
            self.upper[n - 1] += m.transpose();
        } else {
            panic!("block ({i},{j}) outside the tridiagonal pattern");
        }
    }

    pub fn scaled_add(&self, other: &BlockTri, s: f64) -> BlockTri {
        BlockTri {
            block: self.block,
            diag: self.diag.iter().zip(&other.diag).map(|(a, b)| a + b * s).collect(),
            upper: self.upper.iter().zip(&other.upper).map(|(a, b)| a + b * s).collect(),
            cyclic: self.cyclic,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let b = self.block;
        let n = self.nodes();
        let mut m = DMatrix::zeros(n * b, n * b);
        for i in 0..n {
            let mut view = m.view_mut((i * b, i * b), (b, b));
            view += &self.diag[i];
        }
        for (i, u) in self.upper.iter().enumerate() {
            let j = (i + 1) % n;
            let mut view = m.view_mut((i * b, j * b), (b, b));
            view += u;
            let mut view = m.view_mut((j * b, i * b), (b, b));
            view += u.transpose();
        }
        m
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let b = self.block;
        let n = self.nodes();
        let mut y = DVector::zeros(n * b);
        for i in 0..n {
            let xi = x.rows(i * b, b);
            let mut yi = y.rows_mut(i * b, b);
            yi += &self.diag[i] * xi;
        }
        for (i, u) in self.upper.iter().enumerate() {
            let j = (i + 1) % n;
            let xi = x.rows(i * b, b).into_owned();
            let xj = x.rows(j * b, b).into_owned();
            let mut yi = y.rows_mut(i * b, b);
            yi += u * &xj;
            let mut yj = y.rows_mut(j * b, b);
            yj += u.transpose() * &xi;
        }
        y
    }

    pub fn factor(&self) -> Result<BlockLdl> {
        BlockLdl::new(self)
    }

    pub fn inertia(&self) -> Result<Inertia> {
        Ok(self.factor()?.inertia)
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        self.factor()?.solve(rhs)
    }
}

/// `A = L D Lᵀ` for a [`BlockTri`]; cyclic matrices are factored as an
/// arrowhead with the last node as border.
#[derive(Clone, Debug)]
pub struct BlockLdl {
    block: usize,
    d_inv: Vec<DMatrix<f64>>,
    /// coupling of node `i` to `i+1` after elimination (for `i+1` < last when cyclic)
    c: Vec<DMatrix<f64>>,
    /// coupling of node `i` to the border node (cyclic only)
    e: Vec<DMatrix<f64>>,
    cyclic: bool,
    pub inertia: Inertia,
}

fn sym_inertia(m: &DMatrix<f64>, acc: &mut Inertia) {
    let scale = m.amax().max(1e-300);
    for e in m.clone().symmetric_eigenvalues().iter() {
        if e.abs() <= 1e-15 * scale {
            acc.zero += 1;
        } else if *e < 0.0 {
            acc.negative += 1;
        } else {
            acc.positive += 1;
        }
    }
}

fn invert(m: &DMatrix<f64>, node: usize) -> Result<DMatrix<f64>> {
    let s = (m + m.transpose()) * 0.5;
    let inv = s
        .try_inverse()
        .ok_or_else(|| Error::SolverFailure(format!("zero pivot block at node {node}")))?;
    if inv.iter().any(|x| !x.is_finite()) {
        return Err(Error::SolverFailure(format!("non-finite pivot inverse at node {node}")));
    }
    Ok(inv)
}

impl BlockLdl {
    fn new(a: &BlockTri) -> Result<Self> {
        let n = a.nodes();
        let b = a.block;
        let mut inertia = Inertia { negative: 0, zero: 0, positive: 0 };
        if n == 0 {
            return Err(Error::SolverFailure("empty matrix".into()));
        }
        let cyclic = a.cyclic && n >= 3;
        if a.cyclic && n < 3 {
            // two or fewer nodes: fold the cyclic link into a plain one
            let mut plain = BlockTri::zeros(n, b, false);
            plain.diag = a.diag.clone();
            if n == 2 {
                plain.upper[0] = &a.upper[0] + a.upper[1].transpose();
            } else {
                plain.diag[0] += &a.upper[0] + a.upper[0].transpose();
            }
            return BlockLdl::new(&plain);
        }
        let last = n - 1;
        let chain_end = if cyclic { last } else { n };
        let mut d_inv = Vec::with_capacity(n);
        let mut c = Vec::with_capacity(n);
        let mut e = Vec::new();
        let mut d = a.diag[0].clone();
        let mut border = if cyclic { Some(a.upper[last].transpose()) } else { None };
        let mut d_last = if cyclic { a.diag[last].clone() } else { DMatrix::zeros(b, b) };
        for i in 0..chain_end {
            sym_inertia(&d, &mut inertia);
            let di = invert(&d, i)?;
            if cyclic {
                let mut ei = border.take().unwrap();
                if i + 1 == last {
                    ei += &a.upper[i];
                    d_last -= ei.transpose() * &di * &ei;
                    c.push(DMatrix::zeros(b, b));
                    e.push(ei);
                    d_inv.push(di);
                    break;
                }
                let ci = a.upper[i].clone();
                d_last -= ei.transpose() * &di * &ei;
                let next_border = -(ci.transpose() * &di * &ei);
                d = &a.diag[i + 1] - ci.transpose() * &di * &ci;
                border = Some(next_border);
                c.push(ci);
                e.push(ei);
                d_inv.push(di);
            } else {
                if i + 1 < n {
                    let ci = a.upper[i].clone();
                    d = &a.diag[i + 1] - ci.transpose() * &di * &ci;
                    c.push(ci);
                } else {
                    c.push(DMatrix::zeros(b, b));
                }
                d_inv.push(di);
            }
        }
        if cyclic {
            sym_inertia(&d_last, &mut inertia);
            d_inv.push(invert(&d_last, last)?);
        }
        Ok(BlockLdl { block: b, d_inv, c, e, cyclic, inertia })
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        let b = self.block;
        let n = self.d_inv.len();
        if rhs.len() != n * b {
            return Err(Error::SolverFailure("right-hand side has the wrong length".into()));
        }
        let blk = |v: &DVector<f64>, i: usize| v.rows(i * b, b).into_owned();
        // forward: y_{i+1} = r_{i+1} − Cᵢᵀ Dᵢ⁻¹ yᵢ ; y_last −= Σ Eᵢᵀ Dᵢ⁻¹ yᵢ
        let mut y = rhs.clone();
        let chain = if self.cyclic { n - 1 } else { n };
        let mut last_acc = if self.cyclic { blk(rhs, n - 1) } else { DVector::zeros(0) };
        for i in 0..chain {
            let yi = blk(&y, i);
            let w = &self.d_inv[i] * &yi;
            if self.cyclic {
                last_acc -= self.e[i].transpose() * &w;
                if i + 2 < n {
                    let upd = self.c[i].transpose() * &w;
                    let mut next = y.rows_mut((i + 1) * b, b);
                    next -= upd;
                }
            } else if i + 1 < n {
                let upd = self.c[i].transpose() * &w;
                let mut next = y.rows_mut((i + 1) * b, b);
                next -= upd;
            }
        }
        if self.cyclic {
            y.rows_mut((n - 1) * b, b).copy_from(&last_acc);
        }
        // backward
        let mut x = DVector::zeros(n * b);
        if self.cyclic {
            let xl = &self.d_inv[n - 1] * blk(&y, n - 1);
            x.rows_mut((n - 1) * b, b).copy_from(&xl);
            for i in (0..n - 1).rev() {
                let mut r = blk(&y, i) - &self.e[i] * &xl;
                if i + 2 < n {
                    r -= &self.c[i] * blk(&x, i + 1);
                }
                let xi = &self.d_inv[i] * r;
                x.rows_mut(i * b, b).copy_from(&xi);
            }
        } else {
            for i in (0..n).rev() {
                let mut r = blk(&y, i);
                if i + 1 < n {
                    r -= &self.c[i] * blk(&x, i + 1);
                }
                let xi = &self.d_inv[i] * r;
                x.rows_mut(i * b, b).copy_from(&xi);
            }
        }
        Ok(x)
    }
}

/// Gauss-Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let n = order;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else if n == 1 { x } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = 0.5 * (1.0 - x);
        nodes[n - 1 - i] = 0.5 * (1.0 + x);
        weights[i] = 0.5 * w;
        weights[n - 1 - i] = 0.5 * w;
    }
    (nodes, weights)
}
