//! Christoffel symbols, Ricci and scalar curvature, covariant derivatives,
//! rough Laplacian powers, the flow ansatz tensor and Lie derivatives.
//!
//! Christoffel fields are `(2,1)` tensor fields with component `[a, b, c]`
//! holding `Γ^c_{ab}`. Covariant derivatives append the derivative index as
//! the last covariant slot: `(∇F)_{i..j m}^{u..}` is `∇_m F_{i..j}^{u..}`.

use crate::error::{Error, Result};
use crate::grid::{gradient_all, pow_usize, MetricField, TensorField};

/// How the gauge weights `alpha`, `beta` are chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GaugeWeights {
    /// `alpha = 1/2 + a_eff - b`, `beta = b - a_eff`.
    Canonical,
    Custom {
        alpha: f64,
        beta: f64,
    },
}

/// Coefficients of the flow `(-1)^{k+1} c (Δ^k Ric + a Δ^k S g - b Δ^{k-1} ∇²S)`
/// and of its gauge field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowParams {
    pub n: usize,
    pub k: usize,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub weights: GaugeWeights,
    /// Extra multiple of `(Δ^k S) g`, folded into `a` as `a + shift / c`.
    pub obstruction_shift: f64,
}

impl FlowParams {
    pub fn new(n: usize, k: usize, a: f64, b: f64, c: f64) -> Result<Self> {
        let p = Self {
            n,
            k,
            a,
            b,
            c,
            weights: GaugeWeights::Canonical,
            obstruction_shift: 0.0,
        };
        p.validate()?;
        Ok(p)
    }

    /// Top-order coefficients of the ambient obstruction tensor in even
    /// dimension `n >= 4` (the Bach tensor for `n = 4`).
    pub fn obstruction(n: usize) -> Result<Self> {
        if n < 4 || !n.is_multiple_of(2) {
            return Err(Error::InvalidParams(format!(
                "obstruction coefficients need even n >= 4, got {n}"
            )));
        }
        let half = n / 2;
        let nf = n as f64;
        let factorial: f64 = (1..=half - 2).map(|i| i as f64).product();
        let c = 1.0 / ((nf - 2.0) * 2f64.powi(half as i32 - 2) * factorial);
        Self::new(
            n,
            half - 1,
            -1.0 / (2.0 * (nf - 1.0)),
            (nf - 2.0) / (2.0 * (nf - 1.0)),
            c,
        )
    }

    /// The four-dimensional Bach coefficients `(k, a, b, c) = (1, -1/6, 1/3, 1/2)`
    /// used in dimension `n`.
    pub fn bach_type(n: usize) -> Result<Self> {
        Self::new(n, 1, -1.0 / 6.0, 1.0 / 3.0, 0.5)
    }

    pub fn with_shift(mut self, shift: f64) -> Result<Self> {
        self.obstruction_shift = shift;
        self.validate()?;
        Ok(self)
    }

    pub fn with_weights(mut self, alpha: f64, beta: f64) -> Result<Self> {
        self.weights = GaugeWeights::Custom { alpha, beta };
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.a,
            self.b,
            self.c,
            self.obstruction_shift,
            self.alpha(),
            self.beta(),
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParams("non-finite coefficient".into()));
        }
        if self.n < 2 {
            return Err(Error::InvalidParams(format!("dimension {} < 2", self.n)));
        }
        if self.c <= 0.0 {
            return Err(Error::InvalidParams(format!("c must be positive, got {}", self.c)));
        }
        if self.k == 0 && self.b != 0.0 {
            return Err(Error::InvalidParams("k = 0 requires b = 0".into()));
        }
        if self.k == 0 && self.beta() != 0.0 {
            return Err(Error::InvalidParams("k = 0 requires beta = 0".into()));
        }
        if self.obstruction_shift < 0.0 {
            return Err(Error::InvalidParams("obstruction shift must be >= 0".into()));
        }
        Ok(())
    }

    pub fn a_eff(&self) -> f64 {
        if self.obstruction_shift == 0.0 {
            self.a
        } else {
            self.a + self.obstruction_shift / self.c
        }
    }

    pub fn alpha(&self) -> f64 {
        match self.weights {
            GaugeWeights::Canonical => {
                if self.k == 0 {
                    0.5
                } else {
                    0.5 + self.a_eff() - self.b
                }
            }
            GaugeWeights::Custom { alpha, .. } => alpha,
        }
    }

    pub fn beta(&self) -> f64 {
        match self.weights {
            GaugeWeights::Canonical => {
                if self.k == 0 {
                    0.0
                } else {
                    self.b - self.a_eff()
                }
            }
            GaugeWeights::Custom { beta, .. } => beta,
        }
    }

    /// `(-1)^{k+1} c`, the overall factor of the ansatz tensor.
    pub fn ansatz_factor(&self) -> f64 {
        if self.k.is_multiple_of(2) {
            -self.c
        } else {
            self.c
        }
    }
}

/// Christoffel symbols together with Ricci and scalar curvature.
#[derive(Debug, Clone)]
pub struct CurvaturePack {
    pub christoffel: TensorField,
    pub ricci: TensorField,
    pub scalar: TensorField,
    pub(crate) inverse: TensorField,
}

/// Index digits of every component of a rank-`rank` tensor in dimension `n`.
pub(crate) fn digit_table(n: usize, rank: usize) -> Vec<Vec<usize>> {
    (0..pow_usize(n, rank))
        .map(|mut c| {
            let mut d = vec![0; rank];
            for slot in (0..rank).rev() {
                d[slot] = c % n;
                c /= n;
            }
            d
        })
        .collect()
}

pub(crate) fn comp_index(digits: &[usize], n: usize) -> usize {
    digits.iter().fold(0, |acc, &d| acc * n + d)
}

fn christoffel_with(g: &MetricField, inv: &TensorField) -> TensorField {
    let grid = g.grid();
    let n = grid.dim();
    let dg = gradient_all(g.field());
    let mut out = TensorField::zeros(grid, 2, 1);
    let mut lowered = vec![0.0; n];
    for node in 0..grid.nodes() {
        let ginv = inv.node(node);
        let d = |m: usize, i: usize, j: usize| dg[m].node(node)[i * n + j];
        let vals = out.node_mut(node);
        for a in 0..n {
            for b in a..n {
                for (dd, l) in lowered.iter_mut().enumerate() {
                    *l = 0.5 * (d(a, dd, b) + d(b, a, dd) - d(dd, a, b));
                }
                for c in 0..n {
                    let v: f64 = (0..n).map(|dd| ginv[c * n + dd] * lowered[dd]).sum();
                    vals[(a * n + b) * n + c] = v;
                    vals[(b * n + a) * n + c] = v;
                }
            }
        }
    }
    out
}

/// `Γ^c_{ab} = ½ g^{cd}(∂_a g_{db} + ∂_b g_{ad} - ∂_d g_{ab})`, stored as `[a, b, c]`.
pub fn christoffel(g: &MetricField) -> Result<TensorField> {
    let inv = g.inverse()?;
    Ok(christoffel_with(g, &inv))
}

pub fn ricci_scalar(g: &MetricField) -> Result<CurvaturePack> {
    let grid = g.grid();
    let n = grid.dim();
    let inverse = g.inverse()?;
    let gamma = christoffel_with(g, &inverse);
    let dgamma = gradient_all(&gamma);
    let gi = |a: usize, b: usize, c: usize| (a * n + b) * n + c;
    let mut ricci = TensorField::zeros(grid, 2, 0);
    let mut scalar = TensorField::zeros(grid, 0, 0);
    for node in 0..grid.nodes() {
        let gam = gamma.node(node);
        let mut ric = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut v = 0.0;
                for x in 0..n {
                    v += dgamma[x].node(node)[gi(i, j, x)];
                    v -= dgamma[i].node(node)[gi(x, j, x)];
                    for y in 0..n {
                        v += gam[gi(x, y, x)] * gam[gi(i, j, y)];
                        v -= gam[gi(i, y, x)] * gam[gi(x, j, y)];
                    }
                }
                ric[i * n + j] = v;
            }
        }
        let dst = ricci.node_mut(node);
        for i in 0..n {
            for j in 0..n {
                dst[i * n + j] = 0.5 * (ric[i * n + j] + ric[j * n + i]);
            }
        }
        let inv = inverse.node(node);
        scalar.values_mut()[node] = (0..n * n).map(|c| inv[c] * dst[c]).sum();
    }
    Ok(CurvaturePack {
        christoffel: gamma,
        ricci,
        scalar,
        inverse,
    })
}

/// Covariant derivative with separate connections for the covariant and the
/// contravariant slots. `None` stands for a vanishing connection.
pub fn connection_derivative(
    f: &TensorField,
    lower_gamma: Option<&TensorField>,
    upper_gamma: Option<&TensorField>,
) -> TensorField {
    let grid = f.grid();
    let n = grid.dim();
    let (p, q) = (f.lower(), f.upper());
    let rank = p + q;
    let partials = gradient_all(f);
    let mut out = TensorField::zeros(grid, p + 1, q);
    let lower_gamma = lower_gamma.filter(|g| g.max_abs() != 0.0 && p > 0);
    let upper_gamma = upper_gamma.filter(|g| g.max_abs() != 0.0 && q > 0);

    // Per output component: derivative index, source component and the list of
    // (connection component, source component, sign) correction terms.
    struct Plan {
        m: usize,
        src: usize,
        terms: Vec<(usize, usize, f64)>,
    }
    let plans: Vec<Plan> = digit_table(n, rank + 1)
        .into_iter()
        .map(|d| {
            let m = d[p];
            let mut e: Vec<usize> = d[..p].to_vec();
            e.extend_from_slice(&d[p + 1..]);
            let src = comp_index(&e, n);
            let mut terms = Vec::new();
            for s in 0..rank {
                let is_lower = s < p;
                if (is_lower && lower_gamma.is_none()) || (!is_lower && upper_gamma.is_none()) {
                    continue;
                }
                for c in 0..n {
                    let mut e2 = e.clone();
                    e2[s] = c;
                    let src2 = comp_index(&e2, n);
                    if is_lower {
                        terms.push(((m * n + e[s]) * n + c, src2, -1.0));
                    } else {
                        terms.push(((m * n + c) * n + e[s], src2, 1.0));
                    }
                }
            }
            Plan { m, src, terms }
        })
        .collect();

    for node in 0..grid.nodes() {
        let fv = f.node(node);
        let lg = lower_gamma.map(|g| g.node(node));
        let ug = upper_gamma.map(|g| g.node(node));
        let dst = out.node_mut(node);
        for (c, plan) in plans.iter().enumerate() {
            let mut v = partials[plan.m].node(node)[plan.src];
            for &(gc, sc, sign) in &plan.terms {
                let gam = if sign < 0.0 { lg.unwrap() } else { ug.unwrap() };
                v += sign * gam[gc] * fv[sc];
            }
            dst[c] = v;
        }
    }
    out
}

/// Contracts two covariant slots `s1 < s2` with the inverse metric `inv`.
pub(crate) fn trace_lower(f: &TensorField, inv: &TensorField, s1: usize, s2: usize) -> TensorField {
    let grid = f.grid();
    let n = grid.dim();
    let rank = f.rank();
    assert!(s1 < s2 && s2 < f.lower());
    let mut out = TensorField::zeros(grid, f.lower() - 2, f.upper());
    let plans: Vec<Vec<(usize, usize)>> = digit_table(n, rank - 2)
        .into_iter()
        .map(|d| {
            let mut terms = Vec::with_capacity(n * n);
            for a in 0..n {
                for b in 0..n {
                    let mut e = d.clone();
                    e.insert(s1, a);
                    e.insert(s2, b);
                    terms.push((a * n + b, comp_index(&e, n)));
                }
            }
            terms
        })
        .collect();
    for node in 0..grid.nodes() {
        let fv = f.node(node);
        let iv = inv.node(node);
        let dst = out.node_mut(node);
        for (c, terms) in plans.iter().enumerate() {
            dst[c] = terms.iter().map(|&(ic, fc)| iv[ic] * fv[fc]).sum();
        }
    }
    out
}

/// `g^{ab} ∇_a ∇_b F` for the connections given, traced over the two
/// appended derivative slots.
pub(crate) fn laplacian_with(
    f: &TensorField,
    inv: &TensorField,
    lower_gamma: Option<&TensorField>,
    upper_gamma: Option<&TensorField>,
) -> TensorField {
    let p = f.lower();
    let d1 = connection_derivative(f, lower_gamma, upper_gamma);
    let d2 = connection_derivative(&d1, lower_gamma, upper_gamma);
    trace_lower(&d2, inv, p, p + 1)
}

/// `k`-fold rough Laplacian `g^{ab}∇_a∇_b` with the Levi-Civita connection of `g`.
pub fn rough_laplacian_power(f: &TensorField, g: &MetricField, k: i64) -> Result<TensorField> {
    if k < 0 {
        return Err(Error::InvalidParams(format!("negative Laplacian power {k}")));
    }
    if f.grid() != g.grid() {
        return Err(Error::RankMismatch("field and metric on different grids".into()));
    }
    f.check_finite("rough_laplacian_power input")?;
    let inv = g.inverse()?;
    let gamma = christoffel_with(g, &inv);
    Ok(laplacian_power_with(f, &inv, &gamma, k as usize))
}

fn laplacian_power_with(f: &TensorField, inv: &TensorField, gamma: &TensorField, k: usize) -> TensorField {
    let mut cur = f.clone();
    for _ in 0..k {
        cur = laplacian_with(&cur, inv, Some(gamma), Some(gamma));
    }
    cur
}

/// `(-1)^{k+1} c (Δ^k Ric + a_eff Δ^k S g - b Δ^{k-1} ∇²S)` with the lower
/// order tail set to zero.
pub fn ansatz_tensor(g: &MetricField, params: &FlowParams) -> Result<TensorField> {
    params.validate()?;
    let pack = ricci_scalar(g)?;
    ansatz_from_pack(g, &pack, params)
}

pub(crate) fn ansatz_from_pack(g: &MetricField, pack: &CurvaturePack, params: &FlowParams) -> Result<TensorField> {
    let k = params.k;
    let inv = &pack.inverse;
    let gamma = &pack.christoffel;
    let mut inner = laplacian_power_with(&pack.ricci, inv, gamma, k);
    let a = params.a_eff();
    if a != 0.0 {
        let lap_s = laplacian_power_with(&pack.scalar, inv, gamma, k);
        let term = g.field().mul_scalar_field(&lap_s)?;
        inner = inner.axpy(a, &term)?;
    }
    if params.b != 0.0 {
        let hess = connection_derivative(&connection_derivative(&pack.scalar, None, None), Some(gamma), None);
        let term = laplacian_power_with(&hess, inv, gamma, k - 1);
        inner = inner.axpy(-params.b, &term)?;
    }
    let out = inner.scale(params.ansatz_factor()).symmetrized();
    out.check_finite("ansatz tensor")?;
    Ok(out)
}

/// `(L_W g)_{ij} = W^m ∂_m g_{ij} + g_{mj} ∂_i W^m + g_{im} ∂_j W^m`.
pub fn lie_derivative(w: &TensorField, g: &MetricField) -> Result<TensorField> {
    if w.lower() != 0 || w.upper() != 1 || w.grid() != g.grid() {
        return Err(Error::RankMismatch(
            "lie_derivative needs a vector field on the metric's grid".into(),
        ));
    }
    let grid = g.grid();
    let n = grid.dim();
    let dg = gradient_all(g.field());
    let dw = gradient_all(w);
    let mut out = TensorField::zeros(grid, 2, 0);
    for node in 0..grid.nodes() {
        let wv = w.node(node);
        let gv = g.field().node(node);
        let dst = out.node_mut(node);
        for i in 0..n {
            for j in i..n {
                let mut v = 0.0;
                for m in 0..n {
                    v += wv[m] * dg[m].node(node)[i * n + j];
                    v += gv[m * n + j] * dw[i].node(node)[m];
                    v += gv[i * n + m] * dw[j].node(node)[m];
                }
                dst[i * n + j] = v;
                dst[j * n + i] = v;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{interpolate, random_band_limited, spectral_derivative, Grid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conformal(grid: Grid, f: &TensorField) -> MetricField {
        let n = grid.dim();
        let vals = f.values().to_vec();
        let mut node = 0;
        MetricField::from_fn(grid, |_| {
            let e = (2.0 * vals[node]).exp();
            node += 1;
            let mut m = vec![0.0; n * n];
            for i in 0..n {
                m[i * n + i] = e;
            }
            m
        })
        .unwrap()
    }

    fn smooth_scalar(grid: Grid, seed: u64) -> TensorField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random_band_limited(grid, 0, 0, 1, 0.2 / 27.0, &mut rng)
    }

    pub(crate) fn random_metric(grid: Grid, seed: u64, amp: f64) -> MetricField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let modes = 3f64.powi(grid.dim() as i32);
        let u = random_band_limited(grid, 2, 0, 1, amp / modes, &mut rng).symmetrized();
        let id = MetricField::flat(grid);
        MetricField::new(id.field().add(&u).unwrap()).unwrap()
    }

    #[test]
    fn params_validation_and_presets() {
        assert!(FlowParams::new(3, 0, 0.0, 0.1, 1.0).is_err());
        assert!(FlowParams::new(3, 1, 0.0, 0.0, 0.0).is_err());
        assert!(FlowParams::new(3, 1, 0.0, 0.0, 1.0).unwrap().with_shift(-1.0).is_err());
        let bach = FlowParams::obstruction(4).unwrap();
        assert_eq!((bach.k, bach.c), (1, 0.5));
        assert!((bach.a + 1.0 / 6.0).abs() < 1e-15 && (bach.b - 1.0 / 3.0).abs() < 1e-15);
        let o6 = FlowParams::obstruction(6).unwrap();
        assert_eq!(o6.k, 2);
        assert!((o6.c - 1.0 / 8.0).abs() < 1e-15);
        let shifted = bach.with_shift(0.05).unwrap();
        assert!((shifted.a_eff() - (-1.0 / 6.0 + 0.1)).abs() < 1e-15);
        assert!((shifted.alpha() - (0.5 + shifted.a_eff() - shifted.b)).abs() < 1e-15);
    }

    #[test]
    fn flat_metric_has_no_curvature() {
        let grid = Grid::new(3, 8).unwrap();
        let pack = ricci_scalar(&MetricField::flat(grid)).unwrap();
        assert_eq!(pack.christoffel.max_abs(), 0.0);
        assert_eq!(pack.ricci.max_abs(), 0.0);
        assert_eq!(pack.scalar.max_abs(), 0.0);
    }

    #[test]
    fn conformal_christoffel_closed_form() {
        let grid = Grid::new(3, 16).unwrap();
        let f = smooth_scalar(grid, 2);
        let g = conformal(grid, &f);
        let gamma = christoffel(&g).unwrap();
        let df: Vec<TensorField> = (0..3).map(|a| spectral_derivative(&f, a).unwrap()).collect();
        let mut worst: f64 = 0.0;
        for node in 0..grid.nodes() {
            let d: Vec<f64> = (0..3).map(|a| df[a].values()[node]).collect();
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        let mut v = 0.0;
                        if k == i {
                            v += d[j];
                        }
                        if k == j {
                            v += d[i];
                        }
                        if i == j {
                            v -= d[k];
                        }
                        worst = worst.max((gamma.node(node)[(i * 3 + j) * 3 + k] - v).abs());
                    }
                }
            }
        }
        assert!(worst < 1e-8, "{worst}");
    }

    #[test]
    fn christoffel_matches_finite_difference_definition() {
        // g = diag(1 + 0.3 sin(x0 + 2 x1), 1, 1); FD oracle through interpolation.
        let grid = Grid::new(3, 16).unwrap();
        let entry = |x: &[f64]| 1.0 + 0.3 * (x[0] + 2.0 * x[1]).sin();
        let g = MetricField::from_fn(grid, |x| vec![entry(x), 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let gamma = christoffel(&g).unwrap();
        let h = 1e-4;
        for node in [0, 100, 777, 4000] {
            let x = grid.coords(node);
            let metric_at = |p: &[f64]| interpolate(g.field(), p).unwrap();
            let mut dg = vec![vec![0.0; 9]; 3];
            for m in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[m] += h;
                xm[m] -= h;
                let (gp, gm) = (metric_at(&xp), metric_at(&xm));
                for c in 0..9 {
                    dg[m][c] = (gp[c] - gm[c]) / (2.0 * h);
                }
            }
            let g0 = g.field().node(node);
            for a in 0..3 {
                for b in 0..3 {
                    for c in 0..3 {
                        let low = 0.5 * (dg[a][c * 3 + b] + dg[b][a * 3 + c] - dg[c][a * 3 + b]);
                        let expected = low / g0[c * 3 + c];
                        assert!((gamma.node(node)[(a * 3 + b) * 3 + c] - expected).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn conformal_scalar_curvature_closed_form() {
        let grid = Grid::new(3, 16).unwrap();
        let f = smooth_scalar(grid, 4);
        let g = conformal(grid, &f);
        let s = ricci_scalar(&g).unwrap().scalar;
        let n = 3.0;
        let mut lap = TensorField::zeros(grid, 0, 0);
        let mut grad2 = TensorField::zeros(grid, 0, 0);
        for a in 0..3 {
            let d = spectral_derivative(&f, a).unwrap();
            lap = lap.add(&spectral_derivative(&d, a).unwrap()).unwrap();
            grad2 = grad2.add(&d.map(|v| v * v)).unwrap();
        }
        for node in 0..grid.nodes() {
            let expected = -2.0
                * (n - 1.0)
                * (-2.0 * f.values()[node]).exp()
                * (lap.values()[node] + (n - 2.0) / 2.0 * grad2.values()[node]);
            assert!((s.values()[node] - expected).abs() < 1e-7);
        }
    }

    #[test]
    fn ricci_is_symmetric_and_scale_invariant() {
        let grid = Grid::new(3, 8).unwrap();
        let g = random_metric(grid, 7, 0.1);
        let pack = ricci_scalar(&g).unwrap();
        assert!(pack.ricci.max_asymmetry() <= 1e-10);
        let lam = 2.5;
        let scaled = MetricField::new(g.field().scale(lam)).unwrap();
        let pack2 = ricci_scalar(&scaled).unwrap();
        let rel = |a: &TensorField, b: &TensorField| a.sub(b).unwrap().max_abs() / b.max_abs();
        assert!(rel(&pack2.ricci, &pack.ricci) <= 1e-10);
        assert!(rel(&pack2.scalar, &pack.scalar.scale(1.0 / lam)) <= 1e-10);
    }

    #[test]
    fn laplacian_examples() {
        let grid = Grid::new(3, 8).unwrap();
        let delta = MetricField::flat(grid);
        let f = TensorField::scalar_fn(grid, |x| (2.0 * x[0]).cos());
        assert_eq!(rough_laplacian_power(&f, &delta, 0).unwrap(), f);
        assert!(rough_laplacian_power(&f, &delta, -1).is_err());
        let lap = rough_laplacian_power(&f, &delta, 1).unwrap();
        assert!(lap.sub(&f.scale(-4.0)).unwrap().max_abs() < 1e-12);
        // single 2-tensor mode, ξ = (1, 2, 0): Δ² multiplies by |ξ|⁴ = 25
        let mode = TensorField::from_fn(grid, 2, 0, |x| {
            let c = (x[0] + 2.0 * x[1]).cos();
            vec![c, 0.5 * c, 0.0, 0.5 * c, -c, 0.0, 0.0, 0.0, 2.0 * c]
        });
        let lap2 = rough_laplacian_power(&mode, &delta, 2).unwrap();
        assert!(lap2.sub(&mode.scale(25.0)).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn ansatz_examples() {
        let grid = Grid::new(3, 8).unwrap();
        let params = FlowParams::bach_type(3).unwrap();
        assert_eq!(ansatz_tensor(&MetricField::flat(grid), &params).unwrap().max_abs(), 0.0);

        let g = random_metric(grid, 9, 0.1);
        let rf = FlowParams::new(3, 0, 0.0, 0.0, 2.0).unwrap();
        let t = ansatz_tensor(&g, &rf).unwrap();
        let ric = ricci_scalar(&g).unwrap().ricci;
        assert_eq!(t, ric.scale(-2.0));

        let t = ansatz_tensor(&g, &params).unwrap();
        assert!(t.max_asymmetry() <= 1e-10);
        assert!(ansatz_tensor(&g, &FlowParams { b: 0.5, ..rf }).is_err());
    }

    #[test]
    fn ansatz_is_translation_equivariant() {
        let grid = Grid::new(3, 8).unwrap();
        let g = random_metric(grid, 10, 0.1);
        let params = FlowParams::bach_type(3).unwrap();
        let shift = [3, -1, 5];
        let lhs = ansatz_tensor(&MetricField::new(g.field().translated(&shift)).unwrap(), &params).unwrap();
        let rhs = ansatz_tensor(&g, &params).unwrap().translated(&shift);
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn lie_derivative_examples() {
        let grid = Grid::new(3, 8).unwrap();
        let delta = MetricField::flat(grid);
        let zero = TensorField::zeros(grid, 0, 1);
        assert_eq!(lie_derivative(&zero, &delta).unwrap().max_abs(), 0.0);
        let constant = TensorField::from_fn(grid, 0, 1, |_| vec![0.3, -1.0, 2.0]);
        assert_eq!(lie_derivative(&constant, &delta).unwrap().max_abs(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = random_metric(grid, 13, 0.1);
        let w1 = random_band_limited(grid, 0, 1, 1, 0.5, &mut rng);
        let w2 = random_band_limited(grid, 0, 1, 1, 0.5, &mut rng);
        let lhs = lie_derivative(&w1.axpy(-2.0, &w2).unwrap(), &g).unwrap();
        let rhs = lie_derivative(&w1, &g)
            .unwrap()
            .axpy(-2.0, &lie_derivative(&w2, &g).unwrap())
            .unwrap();
        assert!(lhs.sub(&rhs).unwrap().max_abs() <= 1e-12 * rhs.max_abs().max(1.0));
    }

    #[test]
    fn lie_derivative_matches_flow_difference_quotient() {
        // Oracle: (φ_t^* g - g)/t with φ_t(x) = x + tW(x), t = 1e-5.
        let grid = Grid::new(2, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = random_band_limited(grid, 0, 1, 1, 0.5, &mut rng);
        let g = random_metric(grid, 22, 0.2);
        let lie = lie_derivative(&w, &g).unwrap();
        let t = 1e-5;
        for node in (0..grid.nodes()).step_by(23) {
            let x = grid.coords(node);
            let phi = |p: &[f64]| -> Vec<f64> {
                let wp = interpolate(&w, p).unwrap();
                (0..2).map(|i| p[i] + t * wp[i]).collect()
            };
            // Jacobian of φ_t by centered differences of the interpolated flow map.
            let hstep = 1e-4;
            let mut jac = [[0.0; 2]; 2];
            for j in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += hstep;
                xm[j] -= hstep;
                let (pp, pm) = (phi(&xp), phi(&xm));
                for a in 0..2 {
                    jac[a][j] = (pp[a] - pm[a]) / (2.0 * hstep);
                }
            }
            let gphi = interpolate(g.field(), &phi(&x)).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    let mut pulled = 0.0;
                    for a in 0..2 {
                        for b in 0..2 {
                            pulled += jac[a][i] * jac[b][j] * gphi[a * 2 + b];
                        }
                    }
                    let dq = (pulled - g.field().node(node)[i * 2 + j]) / t;
                    let exact = lie.node(node)[i * 2 + j];
                    assert!((dq - exact).abs() < 1e-3 * exact.abs().max(1.0), "{dq} vs {exact}");
                }
            }
        }
    }
}
