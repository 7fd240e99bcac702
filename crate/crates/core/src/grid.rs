//! Dense tensor fields on the flat torus `T^n = [0, 2π)^n`.
//!
//! Fields are sampled on a uniform grid with `N` points per axis. Values are
//! stored grid-major: all tensor components of node 0, then node 1, and so on.
//! Within a node the component index runs over the covariant slots first and
//! the contravariant slots after them, each slot taking values in `0..n`, in
//! row-major order.
//!
//! Differentiation is spectral. The first derivative along an axis is the
//! Fourier multiplier `iξ` (Nyquist mode dropped), applied in physical space
//! as the equivalent circulant stencil so that every node performs the same
//! floating point operations. A consequence is that all derived operators are
//! bit-exactly equivariant under translations by whole grid cells.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Uniform periodic grid on `[0, 2π)^n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Grid {
    dim: usize,
    points: usize,
}

impl Grid {
    pub fn new(dim: usize, points: usize) -> Result<Self> {
        if !(2..=4).contains(&dim) {
            return Err(Error::InvalidGrid(format!("dimension {dim} outside 2..=4")));
        }
        if points < 8 || !points.is_multiple_of(2) {
            return Err(Error::InvalidGrid(format!(
                "points per axis must be even and >= 8, got {points}"
            )));
        }
        Ok(Self { dim, points })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn spacing(&self) -> f64 {
        2.0 * PI / self.points as f64
    }

    pub fn nodes(&self) -> usize {
        self.points.pow(self.dim as u32)
    }

    /// Linear stride of `axis` in the node numbering (axis 0 is outermost).
    pub fn stride(&self, axis: usize) -> usize {
        self.points.pow((self.dim - 1 - axis) as u32)
    }

    pub fn multi_index(&self, node: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim];
        let mut rest = node;
        for axis in (0..self.dim).rev() {
            idx[axis] = rest % self.points;
            rest /= self.points;
        }
        idx
    }

    pub fn node_index(&self, idx: &[usize]) -> usize {
        idx.iter().fold(0, |acc, &i| acc * self.points + (i % self.points))
    }

    pub fn coords(&self, node: usize) -> Vec<f64> {
        let h = self.spacing();
        self.multi_index(node).into_iter().map(|i| i as f64 * h).collect()
    }

    /// Signed wavenumber of DFT index `j` in `-N/2+1 ..= N/2`.
    pub fn wavenumber(&self, j: usize) -> i64 {
        let n = self.points as i64;
        let j = j as i64;
        if j <= n / 2 {
            j
        } else {
            j - n
        }
    }

    /// DFT index holding wavenumber `k`.
    pub fn mode_index(&self, k: i64) -> usize {
        k.rem_euclid(self.points as i64) as usize
    }

    /// Largest wavenumber kept by the 2/3 dealiasing rule.
    pub fn dealias_cutoff(&self) -> i64 {
        (self.points / 3) as i64
    }

    /// Wavenumber vector of every DFT node.
    pub fn mode(&self, node: usize) -> Vec<i64> {
        self.multi_index(node).into_iter().map(|j| self.wavenumber(j)).collect()
    }

    pub fn mode_node(&self, xi: &[i64]) -> usize {
        let idx: Vec<usize> = xi.iter().map(|&k| self.mode_index(k)).collect();
        self.node_index(&idx)
    }

    /// Stencil weights `c_m`, `m = 1 .. N/2-1`, of the spectral first
    /// derivative: `f'(x_i) = Σ c_m (f_{i+m} - f_{i-m})`. Obtained by summing
    /// the multiplier `iξ` over the resolved band.
    pub fn derivative_stencil(&self) -> Vec<f64> {
        let n = self.points;
        let h = self.spacing();
        (1..n / 2)
            .map(|m| {
                let s: f64 = (1..n / 2).map(|k| k as f64 * (k as f64 * m as f64 * h).sin()).sum();
                2.0 * s / n as f64
            })
            .collect()
    }
}

pub(crate) fn pow_usize(base: usize, exp: usize) -> usize {
    base.pow(exp as u32)
}

/// A `(p, q)` tensor field: `p` covariant slots followed by `q` contravariant
/// slots.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    grid: Grid,
    lower: usize,
    upper: usize,
    values: Vec<f64>,
}

impl TensorField {
    pub fn zeros(grid: Grid, lower: usize, upper: usize) -> Self {
        let ncomp = pow_usize(grid.dim(), lower + upper);
        Self {
            grid,
            lower,
            upper,
            values: vec![0.0; grid.nodes() * ncomp],
        }
    }

    pub fn from_values(grid: Grid, lower: usize, upper: usize, values: Vec<f64>) -> Result<Self> {
        let ncomp = pow_usize(grid.dim(), lower + upper);
        if values.len() != grid.nodes() * ncomp {
            return Err(Error::RankMismatch(format!(
                "expected {} values for a ({lower},{upper}) field, got {}",
                grid.nodes() * ncomp,
                values.len()
            )));
        }
        let field = Self {
            grid,
            lower,
            upper,
            values,
        };
        field.check_finite("field")?;
        Ok(field)
    }

    /// Builds a field from a function of the node coordinates returning all
    /// components of that node.
    pub fn from_fn(grid: Grid, lower: usize, upper: usize, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Self {
        let ncomp = pow_usize(grid.dim(), lower + upper);
        let mut values = Vec::with_capacity(grid.nodes() * ncomp);
        for node in 0..grid.nodes() {
            let comps = f(&grid.coords(node));
            assert_eq!(comps.len(), ncomp, "component count");
            values.extend_from_slice(&comps);
        }
        Self {
            grid,
            lower,
            upper,
            values,
        }
    }

    pub fn scalar_fn(grid: Grid, mut f: impl FnMut(&[f64]) -> f64) -> Self {
        Self::from_fn(grid, 0, 0, |x| vec![f(x)])
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn lower(&self) -> usize {
        self.lower
    }

    pub fn upper(&self) -> usize {
        self.upper
    }

    pub fn rank(&self) -> usize {
        self.lower + self.upper
    }

    pub fn ncomp(&self) -> usize {
        pow_usize(self.grid.dim(), self.rank())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn node(&self, node: usize) -> &[f64] {
        let nc = self.ncomp();
        &self.values[node * nc..(node + 1) * nc]
    }

    pub fn node_mut(&mut self, node: usize) -> &mut [f64] {
        let nc = self.ncomp();
        &mut self.values[node * nc..(node + 1) * nc]
    }

    /// One component as a scalar field.
    pub fn component(&self, comp: usize) -> TensorField {
        let nc = self.ncomp();
        let values = (0..self.grid.nodes()).map(|i| self.values[i * nc + comp]).collect();
        TensorField {
            grid: self.grid,
            lower: 0,
            upper: 0,
            values,
        }
    }

    pub fn same_shape(&self, other: &TensorField) -> bool {
        self.grid == other.grid && self.lower == other.lower && self.upper == other.upper
    }

    fn require_same_shape(&self, other: &TensorField, op: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::RankMismatch(format!(
                "{op}: ({},{}) on {:?} vs ({},{}) on {:?}",
                self.lower, self.upper, self.grid, other.lower, other.upper, other.grid
            )))
        }
    }

    pub fn check_finite(&self, what: &'static str) -> Result<()> {
        let nc = self.ncomp();
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(pos) => Err(Error::NonFinite {
                what,
                node: self.grid.multi_index(pos / nc),
            }),
        }
    }

    pub fn add(&self, other: &TensorField) -> Result<TensorField> {
        self.require_same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &TensorField) -> Result<TensorField> {
        self.require_same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn scale(&self, s: f64) -> TensorField {
        self.map(|v| s * v)
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: f64, other: &TensorField) -> Result<TensorField> {
        self.require_same_shape(other, "axpy")?;
        Ok(self.zip_map(other, |a, b| a + s * b))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> TensorField {
        TensorField {
            grid: self.grid,
            lower: self.lower,
            upper: self.upper,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &TensorField, f: impl Fn(f64, f64) -> f64) -> TensorField {
        TensorField {
            grid: self.grid,
            lower: self.lower,
            upper: self.upper,
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Multiplies every component by a scalar field.
    pub fn mul_scalar_field(&self, s: &TensorField) -> Result<TensorField> {
        if s.grid != self.grid || s.rank() != 0 {
            return Err(Error::RankMismatch("expected a scalar field on the same grid".into()));
        }
        let nc = self.ncomp();
        let mut out = self.clone();
        for (node, chunk) in out.values.chunks_mut(nc).enumerate() {
            let f = s.values[node];
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        Ok(out)
    }

    /// Replaces a covariant rank-2 field by its symmetric part; exact symmetry
    /// by construction (both slots written from the same average).
    pub fn symmetrized(&self) -> TensorField {
        assert!(self.lower == 2 && self.upper == 0, "symmetrize needs a (2,0) field");
        let n = self.grid.dim();
        let mut out = self.clone();
        for chunk in out.values.chunks_mut(n * n) {
            for i in 0..n {
                for j in i + 1..n {
                    let avg = 0.5 * (chunk[i * n + j] + chunk[j * n + i]);
                    chunk[i * n + j] = avg;
                    chunk[j * n + i] = avg;
                }
            }
        }
        out
    }

    /// Largest `|F_ij - F_ji|` of a covariant rank-2 field.
    pub fn max_asymmetry(&self) -> f64 {
        assert!(self.rank() == 2);
        let n = self.grid.dim();
        let mut worst: f64 = 0.0;
        for chunk in self.values.chunks(n * n) {
            for i in 0..n {
                for j in i + 1..n {
                    worst = worst.max((chunk[i * n + j] - chunk[j * n + i]).abs());
                }
            }
        }
        worst
    }

    /// Pulls the field back along the translation by `cells` whole grid cells:
    /// the result at node `x` is the value at node `x + cells`.
    pub fn translated(&self, cells: &[i64]) -> TensorField {
        let grid = self.grid;
        let nc = self.ncomp();
        let mut values = vec![0.0; self.values.len()];
        for node in 0..grid.nodes() {
            let idx: Vec<usize> = grid
                .multi_index(node)
                .iter()
                .zip(cells)
                .map(|(&i, &c)| (i as i64 + c).rem_euclid(grid.points() as i64) as usize)
                .collect();
            let src = grid.node_index(&idx);
            values[node * nc..(node + 1) * nc].copy_from_slice(&self.values[src * nc..(src + 1) * nc]);
        }
        TensorField {
            grid,
            lower: self.lower,
            upper: self.upper,
            values,
        }
    }
}

/// Symmetric positive definite covariant 2-tensor field.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricField(TensorField);

impl MetricField {
    /// Validates symmetry (exact) and positive definiteness at every node.
    pub fn new(field: TensorField) -> Result<Self> {
        if field.lower() != 2 || field.upper() != 0 {
            return Err(Error::RankMismatch(format!(
                "metric must be a (2,0) field, got ({},{})",
                field.lower(),
                field.upper()
            )));
        }
        field.check_finite("metric")?;
        let n = field.grid().dim();
        for node in 0..field.grid().nodes() {
            let m = field.node(node);
            let asym = (0..n).any(|i| (0..i).any(|j| m[i * n + j] != m[j * n + i]));
            if asym || DMatrix::from_row_slice(n, n, m).cholesky().is_none() {
                return Err(Error::SingularMetric {
                    node: field.grid().multi_index(node),
                });
            }
        }
        Ok(Self(field))
    }

    pub fn flat(grid: Grid) -> Self {
        let n = grid.dim();
        Self(TensorField::from_fn(grid, 2, 0, |_| identity_values(n)))
    }

    /// Builds a metric from a function returning the full `n x n` matrix at
    /// each point; the upper triangle is mirrored so storage is symmetric.
    pub fn from_fn(grid: Grid, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Result<Self> {
        let n = grid.dim();
        let field = TensorField::from_fn(grid, 2, 0, |x| {
            let mut m = f(x);
            for i in 0..n {
                for j in 0..i {
                    m[i * n + j] = m[j * n + i];
                }
            }
            m
        });
        Self::new(field)
    }

    pub fn grid(&self) -> Grid {
        self.0.grid()
    }

    pub fn field(&self) -> &TensorField {
        &self.0
    }

    pub fn into_field(self) -> TensorField {
        self.0
    }

    /// Pointwise inverse `g^{ij}` as a `(0,2)` field.
    pub fn inverse(&self) -> Result<TensorField> {
        let grid = self.grid();
        let n = grid.dim();
        let mut out = TensorField::zeros(grid, 0, 2);
        for node in 0..grid.nodes() {
            let m = DMatrix::from_row_slice(n, n, self.0.node(node));
            let inv = m.try_inverse().ok_or_else(|| Error::SingularMetric {
                node: grid.multi_index(node),
            })?;
            let dst = out.node_mut(node);
            for i in 0..n {
                for j in 0..n {
                    dst[i * n + j] = inv[(i, j)];
                }
            }
        }
        Ok(out)
    }

    /// Pointwise `sqrt(det g)`.
    pub fn volume_density(&self) -> TensorField {
        let grid = self.grid();
        let n = grid.dim();
        TensorField {
            grid,
            lower: 0,
            upper: 0,
            values: (0..grid.nodes())
                .map(|node| DMatrix::from_row_slice(n, n, self.0.node(node)).determinant().sqrt())
                .collect(),
        }
    }

    /// Smallest eigenvalue over all nodes.
    pub fn min_eigenvalue(&self) -> f64 {
        let n = self.grid().dim();
        (0..self.grid().nodes())
            .map(|node| {
                DMatrix::from_row_slice(n, n, self.0.node(node))
                    .symmetric_eigenvalues()
                    .min()
            })
            .fold(f64::INFINITY, f64::min)
    }
}

pub(crate) fn identity_values(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

/// Componentwise partial derivative along `axis` (0-based).
pub fn spectral_derivative(field: &TensorField, axis: usize) -> Result<TensorField> {
    field.check_finite("spectral_derivative input")?;
    let grid = field.grid();
    if axis >= grid.dim() {
        return Err(Error::InvalidGrid(format!("axis {axis} out of range")));
    }
    Ok(derivative_unchecked(field, axis, &grid.derivative_stencil()))
}

pub(crate) fn derivative_unchecked(field: &TensorField, axis: usize, stencil: &[f64]) -> TensorField {
    let grid = field.grid();
    let n_pts = grid.points();
    let stride = grid.stride(axis);
    let nc = field.ncomp();
    let src = field.values();
    let mut out = vec![0.0; src.len()];
    for node in 0..grid.nodes() {
        let pos = (node / stride) % n_pts;
        let base = node - pos * stride;
        let dst = &mut out[node * nc..(node + 1) * nc];
        for (k, &cm) in stencil.iter().enumerate() {
            let m = k + 1;
            let plus = (base + ((pos + m) % n_pts) * stride) * nc;
            let minus = (base + ((pos + n_pts - m) % n_pts) * stride) * nc;
            for c in 0..nc {
                dst[c] += cm * (src[plus + c] - src[minus + c]);
            }
        }
    }
    TensorField {
        grid,
        lower: field.lower(),
        upper: field.upper(),
        values: out,
    }
}

/// All first partials of a field: `result[axis]`.
pub(crate) fn gradient_all(field: &TensorField) -> Vec<TensorField> {
    let stencil = field.grid().derivative_stencil();
    (0..field.grid().dim())
        .map(|axis| derivative_unchecked(field, axis, &stencil))
        .collect()
}

/// Applies `mat` (row-major `n x n`) to one slot of a node's components:
/// `out[.., a, ..] = Σ_b mat[a][b] * comps[.., b, ..]`.
pub(crate) fn apply_to_slot(comps: &[f64], n: usize, rank: usize, slot: usize, mat: &[f64]) -> Vec<f64> {
    let stride = pow_usize(n, rank - 1 - slot);
    let mut out = vec![0.0; comps.len()];
    for (c, o) in out.iter_mut().enumerate() {
        let a = (c / stride) % n;
        let base = c - a * stride;
        let mut acc = 0.0;
        for b in 0..n {
            acc += mat[a * n + b] * comps[base + b * stride];
        }
        *o = acc;
    }
    out
}

/// Pointwise inner product `<F, G>_h` of two same-rank fields; covariant slots
/// are contracted with `h^{-1}` and contravariant ones with `h`.
pub fn pointwise_inner(f: &TensorField, g: &TensorField, h: &MetricField) -> Result<TensorField> {
    if !f.same_shape(g) || f.grid() != h.grid() {
        return Err(Error::RankMismatch("pointwise_inner: shapes differ".into()));
    }
    let grid = f.grid();
    let n = grid.dim();
    let rank = f.rank();
    let h_inv = h.inverse()?;
    let flat = is_identity_field(h.field());
    let mut out = TensorField::zeros(grid, 0, 0);
    for node in 0..grid.nodes() {
        let mut raised = g.node(node).to_vec();
        if !flat {
            for slot in 0..rank {
                let mat = if slot < f.lower() {
                    h_inv.node(node)
                } else {
                    h.field().node(node)
                };
                raised = apply_to_slot(&raised, n, rank, slot, mat);
            }
        }
        out.values[node] = f.node(node).iter().zip(&raised).map(|(a, b)| a * b).sum();
    }
    Ok(out)
}

fn is_identity_field(f: &TensorField) -> bool {
    let id = identity_values(f.grid().dim());
    f.values().chunks(id.len()).all(|c| c == id.as_slice())
}

/// `∫ <F, G>_h dv_h`, equal-weight quadrature.
pub fn l2_inner(f: &TensorField, g: &TensorField, h: &MetricField) -> Result<f64> {
    let pointwise = pointwise_inner(f, g, h)?;
    let density = h.volume_density();
    let cell = h.grid().spacing().powi(h.grid().dim() as i32);
    Ok(pointwise
        .values()
        .iter()
        .zip(density.values())
        .map(|(p, d)| p * d)
        .sum::<f64>()
        * cell)
}

pub fn l2_norm(f: &TensorField, h: &MetricField) -> Result<f64> {
    Ok(l2_inner(f, f, h)?.max(0.0).sqrt())
}

/// Cardinal weights of trigonometric interpolation on one axis at coordinate
/// `x` (already reduced to `[0, 2π)`). One-hot when `x` sits on a node.
pub(crate) fn cardinal_weights(points: usize, x: f64) -> Vec<f64> {
    let h = 2.0 * PI / points as f64;
    let r = x / h;
    let nearest = r.round();
    let mut w = vec![0.0; points];
    if (r - nearest).abs() < 1e-12 {
        w[(nearest as i64).rem_euclid(points as i64) as usize] = 1.0;
        return w;
    }
    // S_N(θ) = sin(Nθ/2) / (N tan(θ/2)), θ = x - x_j; sin(N(x - x_j)/2) = (-1)^j sin(Nx/2).
    let s = (points as f64 * x / 2.0).sin();
    for (j, wj) in w.iter_mut().enumerate() {
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        let theta = x - j as f64 * h;
        *wj = sign * s / (points as f64 * (theta / 2.0).tan());
    }
    w
}

pub(crate) fn reduce_angle(x: f64) -> f64 {
    let r = x.rem_euclid(2.0 * PI);
    if r >= 2.0 * PI {
        0.0
    } else {
        r
    }
}

/// Trigonometric interpolation of all components at an off-grid point.
pub fn interpolate(field: &TensorField, point: &[f64]) -> Result<Vec<f64>> {
    let grid = field.grid();
    if point.len() != grid.dim() {
        return Err(Error::RankMismatch(format!(
            "point has {} coordinates, grid dimension {}",
            point.len(),
            grid.dim()
        )));
    }
    if point.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            what: "interpolation point",
            node: vec![],
        });
    }
    let weights: Vec<Vec<f64>> = point
        .iter()
        .map(|&x| cardinal_weights(grid.points(), reduce_angle(x)))
        .collect();
    Ok(contract_weights(field, &weights))
}

fn contract_weights(field: &TensorField, weights: &[Vec<f64>]) -> Vec<f64> {
    let grid = field.grid();
    let nc = field.ncomp();
    let mut acc = vec![0.0; nc];
    let mut idx = vec![0usize; grid.dim()];
    accumulate(field, weights, 0, 1.0, &mut idx, &mut acc, nc);
    acc
}

fn accumulate(
    field: &TensorField,
    weights: &[Vec<f64>],
    axis: usize,
    w: f64,
    idx: &mut Vec<usize>,
    acc: &mut [f64],
    nc: usize,
) {
    let grid = field.grid();
    if axis == grid.dim() {
        let node = grid.node_index(idx);
        let src = &field.values()[node * nc..(node + 1) * nc];
        for (a, s) in acc.iter_mut().zip(src) {
            *a += w * s;
        }
        return;
    }
    for (j, &wj) in weights[axis].iter().enumerate() {
        if wj == 0.0 {
            continue;
        }
        idx[axis] = j;
        accumulate(field, weights, axis + 1, w * wj, idx, acc, nc);
    }
}

/// Cardinal weights on one axis for the point `x_base + offset`, with the
/// phase of each node computed from the integer difference `base - j`. Two
/// points with equal `(base mod N, offset)` get bit-identical weights.
pub(crate) fn relative_weights(points: usize, base: i64, offset: f64) -> Vec<f64> {
    let h = 2.0 * PI / points as f64;
    let np = points as i64;
    let r = offset / h;
    let nearest = r.round();
    let mut w = vec![0.0; points];
    if (r - nearest).abs() < 1e-12 {
        w[(base + nearest as i64).rem_euclid(np) as usize] = 1.0;
        return w;
    }
    let s = (points as f64 * offset / 2.0).sin();
    for (j, wj) in w.iter_mut().enumerate() {
        let m = (base - j as i64).rem_euclid(np);
        let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
        let theta = m as f64 * h + offset;
        *wj = sign * s / (points as f64 * (theta / 2.0).tan());
    }
    w
}

/// Interpolates every component at `x_base + offset` (base in cells).
pub(crate) fn interpolate_relative(field: &TensorField, base: &[i64], offset: &[f64]) -> Vec<f64> {
    let grid = field.grid();
    let nc = field.ncomp();
    let mut flat = vec![1.0];
    for (&b, &o) in base.iter().zip(offset) {
        let w = relative_weights(grid.points(), b, o);
        let mut next = Vec::with_capacity(flat.len() * w.len());
        for &f in &flat {
            next.extend(w.iter().map(|&x| f * x));
        }
        flat = next;
    }
    let mut acc = vec![0.0; nc];
    for (node, &w) in flat.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let src = &field.values[node * nc..(node + 1) * nc];
        for (a, s) in acc.iter_mut().zip(src) {
            *a += w * s;
        }
    }
    acc
}

/// Interpolates at many points; returns one component vector per point.
pub fn interpolate_many(field: &TensorField, points: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    points.iter().map(|p| interpolate(field, p)).collect()
}

/// Cached forward and inverse n-dimensional FFTs for one grid.
#[derive(Clone)]
pub struct Spectral {
    grid: Grid,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Spectral {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Spectral").field("grid", &self.grid).finish()
    }
}

impl Spectral {
    pub fn new(grid: Grid) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            grid,
            forward: planner.plan_fft_forward(grid.points()),
            inverse: planner.plan_fft_inverse(grid.points()),
        }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    fn transform(&self, data: &mut [Complex64], fft: &Arc<dyn Fft<f64>>) {
        let n = self.grid.points();
        let mut line = vec![Complex64::new(0.0, 0.0); n];
        for axis in 0..self.grid.dim() {
            let stride = self.grid.stride(axis);
            for start in 0..self.grid.nodes() {
                if !(start / stride).is_multiple_of(n) {
                    continue;
                }
                for (k, l) in line.iter_mut().enumerate() {
                    *l = data[start + k * stride];
                }
                fft.process(&mut line);
                for (k, l) in line.iter().enumerate() {
                    data[start + k * stride] = *l;
                }
            }
        }
    }

    /// Unnormalized forward transform of one scalar component.
    pub fn forward(&self, scalar: &[f64]) -> Vec<Complex64> {
        let mut data: Vec<Complex64> = scalar.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut data, &self.forward);
        data
    }

    /// Inverse transform including the `1/N^n` normalization; returns the
    /// real part.
    pub fn inverse(&self, modes: &[Complex64]) -> Vec<f64> {
        let mut data = modes.to_vec();
        self.transform(&mut data, &self.inverse);
        let norm = 1.0 / self.grid.nodes() as f64;
        data.into_iter().map(|c| c.re * norm).collect()
    }

    /// Forward transform of every component of a field; `result[comp][mode]`.
    pub fn forward_field(&self, field: &TensorField) -> Vec<Vec<Complex64>> {
        (0..field.ncomp())
            .map(|c| self.forward(field.component(c).values()))
            .collect()
    }

    pub fn inverse_field(&self, modes: &[Vec<Complex64>], lower: usize, upper: usize) -> TensorField {
        let grid = self.grid;
        let nc = modes.len();
        let mut values = vec![0.0; grid.nodes() * nc];
        for (c, m) in modes.iter().enumerate() {
            for (node, v) in self.inverse(m).into_iter().enumerate() {
                values[node * nc + c] = v;
            }
        }
        TensorField {
            grid,
            lower,
            upper,
            values,
        }
    }

    /// True when the mode survives the 2/3 rule.
    pub fn keeps(&self, mode_node: usize) -> bool {
        let cut = self.grid.dealias_cutoff();
        self.grid.mode(mode_node).iter().all(|k| k.abs() <= cut)
    }

    /// Zeroes every mode beyond the 2/3 cutoff.
    pub fn dealias(&self, field: &TensorField) -> TensorField {
        let mut modes = self.forward_field(field);
        for m in modes.iter_mut() {
            for (node, c) in m.iter_mut().enumerate() {
                if !self.keeps(node) {
                    *c = Complex64::new(0.0, 0.0);
                }
            }
        }
        self.inverse_field(&modes, field.lower(), field.upper())
    }
}

/// Random band-limited field: every mode with all `|ξ_i| <= band` gets a
/// random cosine and sine coefficient in `[-amplitude, amplitude]`.
pub fn random_band_limited(
    grid: Grid,
    lower: usize,
    upper: usize,
    band: i64,
    amplitude: f64,
    rng: &mut impl Rng,
) -> TensorField {
    let n = grid.dim();
    let ncomp = pow_usize(n, lower + upper);
    let mut modes: Vec<(Vec<i64>, Vec<f64>, Vec<f64>)> = Vec::new();
    let side = (2 * band + 1) as usize;
    for flat in 0..side.pow(n as u32) {
        let mut rest = flat;
        let xi: Vec<i64> = (0..n)
            .map(|_| {
                let k = (rest % side) as i64 - band;
                rest /= side;
                k
            })
            .collect();
        let a: Vec<f64> = (0..ncomp).map(|_| rng.gen_range(-amplitude..=amplitude)).collect();
        let b: Vec<f64> = (0..ncomp).map(|_| rng.gen_range(-amplitude..=amplitude)).collect();
        modes.push((xi, a, b));
    }
    TensorField::from_fn(grid, lower, upper, |x| {
        let mut out = vec![0.0; ncomp];
        for (xi, a, b) in &modes {
            let phase: f64 = xi.iter().zip(x).map(|(&k, &xv)| k as f64 * xv).sum();
            let (s, c) = phase.sin_cos();
            for comp in 0..ncomp {
                out[comp] += a[comp] * c + b[comp] * s;
            }
        }
        out
    })
}

const MAGIC: &[u8; 4] = b"GFLO";
pub const SNAPSHOT_VERSION: u32 = 1;

/// Serializes a field in the binary snapshot format.
pub fn write_snapshot(field: &TensorField, mut out: impl Write) -> Result<()> {
    out.write_all(MAGIC)?;
    for v in [
        SNAPSHOT_VERSION,
        field.grid().dim() as u32,
        field.grid().points() as u32,
        field.lower() as u32,
        field.upper() as u32,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    for v in field.values() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_snapshot(mut input: impl Read) -> Result<TensorField> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let mut header = [0u32; 5];
    for h in header.iter_mut() {
        let mut b = [0u8; 4];
        input.read_exact(&mut b)?;
        *h = u32::from_le_bytes(b);
    }
    let [version, dim, points, lower, upper] = header;
    if version != SNAPSHOT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let grid = Grid::new(dim as usize, points as usize)?;
    let count = grid.nodes() * pow_usize(dim as usize, (lower + upper) as usize);
    let mut bytes = vec![0u8; count * 8];
    input.read_exact(&mut bytes)?;
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    TensorField::from_values(grid, lower as usize, upper as usize, values)
}

pub fn save_snapshot(field: &TensorField, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_snapshot(field, std::io::BufWriter::new(file))
}

pub fn load_snapshot(path: &Path) -> Result<TensorField> {
    read_snapshot(std::io::BufReader::new(std::fs::File::open(path)?))
}
