//! Difference tensor, mixed covariant derivative and the DeTurck field
//! `W = (-1)^k c [α (Δ^{g,h})^k V + β (Δ^{g,h})^{k-1} Z]`.
//!
//! The mixed covariant derivative `∇^{g,h}` corrects covariant slots with the
//! Christoffel symbols of `g` and contravariant slots with those of `h`.

use crate::curvature::{christoffel, connection_derivative, laplacian_with, trace_lower, FlowParams};
use crate::error::{Error, Result};
use crate::grid::{MetricField, TensorField};

/// `A^{g,h} = Γ^g - Γ^h` as a `(2,1)` field, component `[a, b, c]` = `A^c_{ab}`.
pub fn difference_tensor(g: &MetricField, h: &MetricField) -> Result<TensorField> {
    check_grids(g, h)?;
    christoffel(g)?.sub(&christoffel(h)?)
}

fn check_grids(g: &MetricField, h: &MetricField) -> Result<()> {
    if g.grid() != h.grid() {
        return Err(Error::RankMismatch("metrics live on different grids".into()));
    }
    Ok(())
}

/// `∇^{g,h} F`, appending the derivative index as the last covariant slot.
pub fn mixed_covariant_derivative(f: &TensorField, g: &MetricField, h: &MetricField) -> Result<TensorField> {
    check_grids(g, h)?;
    if f.grid() != g.grid() {
        return Err(Error::RankMismatch("field and metrics on different grids".into()));
    }
    let gg = christoffel(g)?;
    let gh = christoffel(h)?;
    Ok(connection_derivative(f, Some(&gg), Some(&gh)))
}

/// Reusable pieces of the gauge construction for one pair `(g, h)`.
pub struct GaugeContext {
    pub g_inverse: TensorField,
    pub gamma_g: TensorField,
    pub gamma_h: TensorField,
    pub difference: TensorField,
}

impl GaugeContext {
    pub fn new(g: &MetricField, h: &MetricField) -> Result<Self> {
        check_grids(g, h)?;
        let gamma_g = christoffel(g)?;
        let gamma_h = christoffel(h)?;
        let difference = gamma_g.sub(&gamma_h)?;
        Ok(Self {
            g_inverse: g.inverse()?,
            gamma_g,
            gamma_h,
            difference,
        })
    }

    fn mixed(&self, f: &TensorField) -> TensorField {
        connection_derivative(f, Some(&self.gamma_g), Some(&self.gamma_h))
    }

    /// Map Laplacian `tr_g ∇^{g,h}∇^{g,h}`.
    pub fn laplacian(&self, f: &TensorField) -> TensorField {
        laplacian_with(f, &self.g_inverse, Some(&self.gamma_g), Some(&self.gamma_h))
    }

    /// `V^γ = g^{αβ} A^γ_{αβ}`.
    pub fn v_field(&self) -> TensorField {
        trace_lower(&self.difference, &self.g_inverse, 0, 1)
    }

    /// `Z^γ = g^{μα} g^{νβ} ∇_μ ∇_ν A^γ_{αβ}` with mixed derivatives.
    pub fn z_field(&self) -> TensorField {
        // components of ∇∇A are [α, β, ν, μ, γ]
        let d2 = self.mixed(&self.mixed(&self.difference));
        let inner = trace_lower(&d2, &self.g_inverse, 1, 2);
        trace_lower(&inner, &self.g_inverse, 0, 1)
    }

    pub fn deturck_field(&self, params: &FlowParams) -> Result<TensorField> {
        params.validate()?;
        let k = params.k;
        let grid = self.difference.grid();
        let mut w = TensorField::zeros(grid, 0, 1);
        if params.alpha() != 0.0 {
            let mut v = self.v_field();
            for _ in 0..k {
                v = self.laplacian(&v);
            }
            w = w.axpy(params.alpha(), &v)?;
        }
        if params.beta() != 0.0 {
            let mut z = self.z_field();
            for _ in 1..k {
                z = self.laplacian(&z);
            }
            w = w.axpy(params.beta(), &z)?;
        }
        let sign = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
        let w = w.scale(sign * params.c);
        w.check_finite("gauge field")?;
        Ok(w)
    }
}

/// The DeTurck vector field of `g` relative to the background `h`.
pub fn deturck_field(g: &MetricField, h: &MetricField, params: &FlowParams) -> Result<TensorField> {
    params.validate()?;
    GaugeContext::new(g, h)?.deturck_field(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::{christoffel, connection_derivative, GaugeWeights};
    use crate::grid::{random_band_limited, spectral_derivative, Grid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_metric(grid: Grid, seed: u64, amp: f64) -> MetricField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let modes = 3f64.powi(grid.dim() as i32);
        let u = random_band_limited(grid, 2, 0, 1, amp / modes, &mut rng).symmetrized();
        MetricField::new(MetricField::flat(grid).field().add(&u).unwrap()).unwrap()
    }

    #[test]
    fn difference_tensor_basics() {
        let grid = Grid::new(3, 8).unwrap();
        let g = random_metric(grid, 1, 0.2);
        let h = random_metric(grid, 2, 0.2);
        assert_eq!(difference_tensor(&g, &g).unwrap().max_abs(), 0.0);
        let a = difference_tensor(&g, &h).unwrap();
        for node in 0..grid.nodes() {
            let v = a.node(node);
            for x in 0..3 {
                for y in 0..3 {
                    for z in 0..3 {
                        assert!((v[(x * 3 + y) * 3 + z] - v[(y * 3 + x) * 3 + z]).abs() <= 1e-13);
                    }
                }
            }
        }
    }

    #[test]
    fn difference_from_flat_is_conformal_christoffel() {
        let grid = Grid::new(3, 16).unwrap();
        let f = TensorField::scalar_fn(grid, |x| 0.05 * (x[0] - x[2]).sin() + 0.03 * x[1].cos());
        let fv = f.values().to_vec();
        let mut node = 0;
        let g = MetricField::from_fn(grid, |_| {
            let e = (2.0 * fv[node]).exp();
            node += 1;
            vec![e, 0.0, 0.0, 0.0, e, 0.0, 0.0, 0.0, e]
        })
        .unwrap();
        let a = difference_tensor(&g, &MetricField::flat(grid)).unwrap();
        let df: Vec<TensorField> = (0..3).map(|i| spectral_derivative(&f, i).unwrap()).collect();
        for node in 0..grid.nodes() {
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        let d = |m: usize| df[m].values()[node];
                        let mut expected = 0.0;
                        if k == i {
                            expected += d(j);
                        }
                        if k == j {
                            expected += d(i);
                        }
                        if i == j {
                            expected -= d(k);
                        }
                        assert!((a.node(node)[(i * 3 + j) * 3 + k] - expected).abs() < 1e-8);
                    }
                }
            }
        }
    }

    #[test]
    fn mixed_derivative_with_equal_metrics_is_levi_civita() {
        let grid = Grid::new(3, 8).unwrap();
        let g = random_metric(grid, 3, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_band_limited(grid, 1, 1, 1, 0.1, &mut rng);
        let mixed = mixed_covariant_derivative(&f, &g, &g).unwrap();
        let gamma = christoffel(&g).unwrap();
        let lc = connection_derivative(&f, Some(&gamma), Some(&gamma));
        assert!(mixed.sub(&lc).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn mixed_derivative_of_identity_is_minus_difference() {
        let grid = Grid::new(3, 8).unwrap();
        let g = random_metric(grid, 5, 0.2);
        let h = random_metric(grid, 6, 0.2);
        let id = TensorField::from_fn(grid, 1, 1, |_| crate::grid::identity_values(3));
        let d = mixed_covariant_derivative(&id, &g, &h).unwrap();
        let a = difference_tensor(&g, &h).unwrap();
        // d has components [b, m, a]; -A^a_{mb}
        for node in 0..grid.nodes() {
            for b in 0..3 {
                for m in 0..3 {
                    for x in 0..3 {
                        let lhs = d.node(node)[(b * 3 + m) * 3 + x];
                        let rhs = -a.node(node)[(m * 3 + b) * 3 + x];
                        assert!((lhs - rhs).abs() <= 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn vector_field_upper_index_correction() {
        let grid = Grid::new(3, 8).unwrap();
        let g = random_metric(grid, 7, 0.2);
        let h = random_metric(grid, 8, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_band_limited(grid, 0, 1, 1, 0.1, &mut rng);
        let gamma = christoffel(&g).unwrap();
        let lc = connection_derivative(&x, Some(&gamma), Some(&gamma));
        let mixed = mixed_covariant_derivative(&x, &g, &h).unwrap();
        let a = difference_tensor(&g, &h).unwrap();
        for node in 0..grid.nodes() {
            for m in 0..3 {
                for c in 0..3 {
                    let corr: f64 = (0..3)
                        .map(|e| a.node(node)[(m * 3 + e) * 3 + c] * x.node(node)[e])
                        .sum();
                    let diff = lc.node(node)[m * 3 + c] - mixed.node(node)[m * 3 + c];
                    assert!((diff - corr).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn inverse_background_metric_is_parallel() {
        // h^{-1} is not band-limited, so resolve it on a finer grid
        let grid = Grid::new(3, 24).unwrap();
        let g = random_metric(grid, 10, 0.1);
        let h = random_metric(grid, 11, 0.1);
        let h_inv = h.inverse().unwrap();
        let d = mixed_covariant_derivative(&h_inv, &g, &h).unwrap();
        assert!(d.max_abs() <= 1e-10, "{}", d.max_abs());
    }

    #[test]
    fn deturck_examples() {
        let grid = Grid::new(3, 8).unwrap();
        let g = random_metric(grid, 12, 0.2);
        let h = random_metric(grid, 13, 0.2);
        let bach = FlowParams::bach_type(3).unwrap();
        assert_eq!(deturck_field(&g, &g, &bach).unwrap().max_abs(), 0.0);

        let rd = FlowParams::new(3, 0, 0.0, 0.0, 2.0).unwrap();
        assert_eq!(rd.weights, GaugeWeights::Canonical);
        let w = deturck_field(&g, &h, &rd).unwrap();
        let a = difference_tensor(&g, &h).unwrap();
        let inv = g.inverse().unwrap();
        for node in 0..grid.nodes() {
            for c in 0..3 {
                let v: f64 = (0..9).map(|ab| inv.node(node)[ab] * a.node(node)[ab * 3 + c]).sum();
                assert!((w.node(node)[c] - v).abs() <= 1e-12);
            }
        }
        assert!(FlowParams::new(3, 0, 0.0, 0.0, 2.0)
            .unwrap()
            .with_weights(0.5, 0.1)
            .is_err());
    }

    #[test]
    fn deturck_field_is_translation_equivariant() {
        let grid = Grid::new(3, 8).unwrap();
        let g = random_metric(grid, 14, 0.2);
        let h = random_metric(grid, 15, 0.2);
        let params = FlowParams::bach_type(3).unwrap();
        let shift = [1, 4, -3];
        let tg = MetricField::new(g.field().translated(&shift)).unwrap();
        let th = MetricField::new(h.field().translated(&shift)).unwrap();
        let lhs = deturck_field(&tg, &th, &params).unwrap();
        let rhs = deturck_field(&g, &h, &params).unwrap().translated(&shift);
        assert_eq!(lhs, rhs);
    }
}
