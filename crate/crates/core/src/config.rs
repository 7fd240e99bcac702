//! Run configuration: a flat TOML table.
//!
//! ```toml
//! n = 3
//! points = 16
//! preset = "bach"          # "custom" (default), "bach" or "obstruction"
//! # k, a, b, c             # required for "custom"
//! obstruction_shift = 0.0
//! # gauge_alpha, gauge_beta  (both or neither; default canonical weights)
//! perturbation = "modes"   # "flat", "modes" or "random"
//! modes = [[1, 0, 0]]
//! amplitudes = [1e-5]
//! # etas = [[...]]         # n*n row-major per mode; default |ξ|²δ - ξ⊗ξ normalized
//! # amplitude, band        # for "random"
//! # dt                     # default c_dt / max ρ(Σ_sym)
//! c_dt = 0.5
//! horizon = 0.1
//! stride = 1
//! seed = 0
//! ```

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curvature::FlowParams;
use crate::error::{Error, Result};
use crate::flow::default_dt;
use crate::grid::{identity_values, random_band_limited, Grid, MetricField, TensorField};

/// Environment variable that overrides `output_dir`.
pub const OUT_DIR_ENV: &str = "GFLOW_OUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Custom,
    Bach,
    Obstruction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    #[default]
    Flat,
    Modes,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UniquenessVariant {
    #[default]
    DtHalving,
    Identical,
}

fn default_c_dt() -> f64 {
    0.5
}

fn default_one() -> usize {
    1
}

fn default_band() -> i64 {
    1
}

fn default_samples() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub n: usize,
    pub points: usize,
    #[serde(default)]
    pub preset: Preset,
    pub k: Option<usize>,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub c: Option<f64>,
    #[serde(default)]
    pub obstruction_shift: f64,
    pub gauge_alpha: Option<f64>,
    pub gauge_beta: Option<f64>,
    #[serde(default)]
    pub perturbation: Perturbation,
    #[serde(default)]
    pub modes: Vec<Vec<i64>>,
    #[serde(default)]
    pub amplitudes: Vec<f64>,
    #[serde(default)]
    pub etas: Vec<Vec<f64>>,
    pub amplitude: Option<f64>,
    #[serde(default = "default_band")]
    pub band: i64,
    pub dt: Option<f64>,
    #[serde(default = "default_c_dt")]
    pub c_dt: f64,
    pub horizon: f64,
    #[serde(default = "default_one")]
    pub stride: usize,
    pub output_dir: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub allow_unstable: bool,
    #[serde(default)]
    pub reconstruct: bool,
    #[serde(default)]
    pub uniqueness_variant: UniquenessVariant,
    pub pair_mode: Option<Vec<i64>>,
    pub pair_amplitude: Option<f64>,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.n, self.points)
    }

    pub fn params(&self) -> Result<FlowParams> {
        let base = match self.preset {
            Preset::Bach => FlowParams::bach_type(self.n)?,
            Preset::Obstruction => FlowParams::obstruction(self.n)?,
            Preset::Custom => {
                let need = |v: Option<f64>, name: &str| {
                    v.ok_or_else(|| Error::Config(format!("custom preset needs `{name}`")))
                };
                let k = self.k.ok_or_else(|| Error::Config("custom preset needs `k`".into()))?;
                FlowParams::new(self.n, k, need(self.a, "a")?, need(self.b, "b")?, need(self.c, "c")?)?
            }
        };
        if self.preset != Preset::Custom
            && (self.k.is_some() || self.a.is_some() || self.b.is_some() || self.c.is_some())
        {
            return Err(Error::Config(
                "k, a, b, c are only accepted with the custom preset".into(),
            ));
        }
        let p = base.with_shift(self.obstruction_shift)?;
        match (self.gauge_alpha, self.gauge_beta) {
            (None, None) => Ok(p),
            (Some(al), Some(be)) => p.with_weights(al, be),
            _ => Err(Error::Config(
                "gauge_alpha and gauge_beta must be given together".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid()?;
        self.params()?;
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(Error::Config("dt must be positive".into()));
            }
        }
        if !(self.c_dt > 0.0) {
            return Err(Error::Config("c_dt must be positive".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        let cut = grid.dealias_cutoff();
        let check_mode = |xi: &[i64]| -> Result<()> {
            if xi.len() != self.n {
                return Err(Error::Config(format!("mode {xi:?} needs {} entries", self.n)));
            }
            if xi.iter().any(|k| k.abs() > cut) {
                return Err(Error::Config(format!(
                    "mode {xi:?} lies beyond the dealiased band |ξ_i| <= {cut}"
                )));
            }
            Ok(())
        };
        match self.perturbation {
            Perturbation::Flat => {}
            Perturbation::Modes => {
                if self.modes.is_empty() || self.modes.len() != self.amplitudes.len() {
                    return Err(Error::Config(
                        "modes and amplitudes must be nonempty and equally long".into(),
                    ));
                }
                if !self.etas.is_empty() && self.etas.len() != self.modes.len() {
                    return Err(Error::Config("etas must match modes".into()));
                }
                for xi in &self.modes {
                    check_mode(xi)?;
                }
                if self.amplitudes.iter().any(|&a| !(a > 0.0)) {
                    return Err(Error::Config("amplitudes must be positive".into()));
                }
                for eta in &self.etas {
                    let n = self.n;
                    if eta.len() != n * n || (0..n).any(|i| (0..n).any(|j| eta[i * n + j] != eta[j * n + i])) {
                        return Err(Error::Config("each eta must be a symmetric n*n row-major list".into()));
                    }
                }
            }
            Perturbation::Random => {
                if !self.amplitude.is_some_and(|a| a > 0.0) {
                    return Err(Error::Config("random perturbation needs a positive amplitude".into()));
                }
                if self.band < 1 || self.band > cut {
                    return Err(Error::Config(format!("band must lie in 1..={cut}")));
                }
            }
        }
        if let Some(xi) = &self.pair_mode {
            check_mode(xi)?;
        }
        if self.pair_amplitude.is_some_and(|a| !(a > 0.0)) {
            return Err(Error::Config("pair_amplitude must be positive".into()));
        }
        Ok(())
    }

    /// `η` of the i-th configured mode.
    pub fn eta(&self, i: usize) -> DMatrix<f64> {
        match self.etas.get(i) {
            Some(v) => DMatrix::from_row_slice(self.n, self.n, v),
            None => witness_direction(&self.modes[i]),
        }
    }

    pub fn initial_metric(&self) -> Result<MetricField> {
        let grid = self.grid()?;
        let n = self.n;
        let u = match self.perturbation {
            Perturbation::Flat => TensorField::zeros(grid, 2, 0),
            Perturbation::Modes => {
                let mut u = TensorField::zeros(grid, 2, 0);
                for (i, (xi, &amp)) in self.modes.iter().zip(&self.amplitudes).enumerate() {
                    u = u.add(&mode_field(grid, xi, &self.eta(i), amp))?;
                }
                u
            }
            Perturbation::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let amp = self.amplitude.unwrap_or(0.0);
                random_band_limited(grid, 2, 0, self.band, amp, &mut rng).symmetrized()
            }
        };
        let mut field = u;
        let id = identity_values(n);
        for node in 0..grid.nodes() {
            for (v, d) in field.node_mut(node).iter_mut().zip(&id) {
                *v += d;
            }
        }
        MetricField::new(field).map_err(|_| Error::Config("initial metric is not positive definite".into()))
    }

    /// `(dt, steps)` with `dt` adjusted so that `steps * dt = horizon`.
    pub fn time_steps(&self) -> Result<(f64, usize)> {
        let dt = match self.dt {
            Some(dt) => dt,
            None => default_dt(self.grid()?, &self.params()?, self.c_dt)?,
        };
        let steps = ((self.horizon / dt) - 1e-9).ceil().max(1.0) as usize;
        Ok((self.horizon / steps as f64, steps))
    }

    /// `<base>/<experiment>-<hash prefix>`, with `base` from the environment
    /// override, then `output_dir`, then `geoflow-out`.
    pub fn run_dir(&self, experiment: &str) -> PathBuf {
        let base = std::env::var(OUT_DIR_ENV)
            .ok()
            .filter(|s| !s.is_empty())
            .or_else(|| self.output_dir.clone())
            .unwrap_or_else(|| "geoflow-out".into());
        PathBuf::from(base).join(format!("{experiment}-{}", &self.hash()[..12]))
    }
}

/// `(|ξ|² δ - ξ⊗ξ) / |·|`, or `δ/√n` at `ξ = 0`.
pub fn witness_direction(xi: &[i64]) -> DMatrix<f64> {
    let n = xi.len();
    let s: f64 = xi.iter().map(|&k| (k * k) as f64).sum();
    let m = DMatrix::from_fn(n, n, |i, j| if i == j { s } else { 0.0 } - (xi[i] * xi[j]) as f64);
    let norm = m.norm();
    if norm == 0.0 {
        DMatrix::identity(n, n) / (n as f64).sqrt()
    } else {
        m / norm
    }
}

/// `ε η cos(ξ·x)` as a symmetric field.
pub fn mode_field(grid: Grid, xi: &[i64], eta: &DMatrix<f64>, eps: f64) -> TensorField {
    let n = grid.dim();
    TensorField::from_fn(grid, 2, 0, |x| {
        let phase: f64 = xi.iter().zip(x).map(|(&k, &v)| k as f64 * v).sum();
        let c = eps * phase.cos();
        (0..n * n).map(|ij| c * eta[(ij / n, ij % n)]).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "n = 3\npoints = 8\npreset = \"bach\"\nhorizon = 0.1\n";

    #[test]
    fn parses_and_hashes_stably() {
        let a = RunConfig::from_toml(BASE).unwrap();
        let b = RunConfig::from_toml(&a.to_toml()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let c = RunConfig::from_toml(&format!("{BASE}seed = 3\n")).unwrap();
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.params().unwrap(), FlowParams::bach_type(3).unwrap());
        assert_eq!(a.perturbation, Perturbation::Flat);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            "n = 3\npoints = 8\nhorizon = 0.1\n",
            "n = 3\npoints = 8\npreset = \"bach\"\nhorizon = 0.0\n",
            "n = 3\npoints = 8\npreset = \"bach\"\nhorizon = 1.0\nbogus = 1\n",
            "n = 3\npoints = 8\npreset = \"bach\"\nhorizon = 1.0\nperturbation = \"modes\"\nmodes = [[3, 0, 0]]\namplitudes = [1e-5]\n",
            "n = 3\npoints = 8\npreset = \"bach\"\nhorizon = 1.0\nperturbation = \"modes\"\nmodes = [[1, 0, 0]]\namplitudes = [-1e-5]\n",
            "n = 3\npoints = 8\npreset = \"bach\"\nhorizon = 1.0\nperturbation = \"random\"\n",
            "n = 3\npoints = 8\npreset = \"bach\"\nk = 1\nhorizon = 1.0\n",
            "n = 3\npoints = 8\npreset = \"bach\"\nhorizon = 1.0\ngauge_alpha = 0.1\n",
        ];
        for text in bad {
            assert!(RunConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn mode_perturbation_and_time_steps() {
        let text = format!("{BASE}perturbation = \"modes\"\nmodes = [[1, 1, 0]]\namplitudes = [1e-3]\ndt = 0.03\n");
        let cfg = RunConfig::from_toml(&text).unwrap();
        let g = cfg.initial_metric().unwrap();
        let expected = 1.0 + 1e-3 * cfg.eta(0)[(0, 0)];
        assert!((g.field().node(0)[0] - expected).abs() < 1e-15);
        let (dt, steps) = cfg.time_steps().unwrap();
        assert_eq!(steps, 4);
        assert!((dt * steps as f64 - 0.1).abs() < 1e-15);
        let w = witness_direction(&[1, 1, 0]);
        assert!((w.norm() - 1.0).abs() < 1e-15);
        assert!((w.trace() - 2.0 * w[(2, 2)]).abs() < 1e-15);
    }

    #[test]
    fn default_dt_scales_with_band() {
        let cfg = RunConfig::from_toml(BASE).unwrap();
        let (dt, _) = cfg.time_steps().unwrap();
        let coarse = default_dt(cfg.grid().unwrap(), &cfg.params().unwrap(), 0.5).unwrap();
        assert!(dt <= coarse && dt > 0.5 * coarse);
    }
}
