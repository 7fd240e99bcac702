//! Experiment drivers behind the CLI subcommands and their records.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{mode_field, witness_direction, RunConfig, UniquenessVariant};
use crate::curvature::FlowParams;
use crate::error::{Error, Result};
use crate::flow::{
    energy_monitor, mode_coefficients, perturbation, reconstruct_pure_flow, run_adjusted, run_with, sobolev_energy,
    time_derivatives, AdjustedRun, AdjustedStepper, FlowState, PureFlow, RunOptions,
};
use crate::grid::{l2_inner, l2_norm, random_band_limited, save_snapshot, Grid, MetricField, TensorField};
use crate::jet::{verify_identities, IdentityReport};
use crate::symbol::{
    check_strong_ellipticity, flat_linearized_operator, reduced_form_residual, sym_coords, symbol_matrix, Verdict,
};

/// Per-time rows plus verdict and summary values of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub experiment: String,
    pub config_hash: String,
    pub columns: Vec<String>,
    /// First column is `t`; `None` cells are written empty.
    pub rows: Vec<Vec<Option<f64>>>,
    pub verdict: String,
    pub summary: BTreeMap<String, f64>,
}

impl ExperimentRecord {
    fn new(experiment: &str, cfg: &RunConfig, columns: Vec<String>) -> Self {
        Self {
            experiment: experiment.into(),
            config_hash: cfg.hash(),
            columns,
            rows: Vec::new(),
            verdict: String::new(),
            summary: BTreeMap::new(),
        }
    }

    pub fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let idx = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[idx]).collect())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let t: Vec<f64> = self.rows.iter().map(|r| r[0].unwrap_or(f64::NAN)).collect();
        if t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Format("record rows must be strictly increasing in t".into()));
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.to_string()))?;
        w.write_record(&self.columns).map_err(|e| Error::Io(e.to_string()))?;
        for row in &self.rows {
            let cells: Vec<String> = row
                .iter()
                .map(|v| v.map(|x| format!("{x:?}")).unwrap_or_default())
                .collect();
            w.write_record(&cells).map_err(|e| Error::Io(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    experiment: &'a str,
    config_hash: &'a str,
    verdict: &'a str,
    n: usize,
    points: usize,
    k: usize,
    a: f64,
    b: f64,
    c: f64,
    obstruction_shift: f64,
    alpha: f64,
    beta: f64,
    dt: f64,
    steps: usize,
    csv: &'a str,
    times: Vec<f64>,
    files: Vec<String>,
    summary: &'a BTreeMap<String, f64>,
}

fn write_manifest(
    dir: &Path,
    rec: &ExperimentRecord,
    params: &FlowParams,
    grid: Grid,
    (dt, steps): (f64, usize),
    times: Vec<f64>,
    files: Vec<String>,
) -> Result<()> {
    let m = Manifest {
        experiment: &rec.experiment,
        config_hash: &rec.config_hash,
        verdict: &rec.verdict,
        n: grid.dim(),
        points: grid.points(),
        k: params.k,
        a: params.a,
        b: params.b,
        c: params.c,
        obstruction_shift: params.obstruction_shift,
        alpha: params.alpha(),
        beta: params.beta(),
        dt,
        steps,
        csv: "record.csv",
        times,
        files,
        summary: &rec.summary,
    };
    let text = toml::to_string(&m).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("manifest.toml"), text)?;
    Ok(())
}

/// Decay (negative: growth) rate of `ε η cos(ξ·x)` predicted by the
/// symbol: the Rayleigh quotient of `Σ(ξ)` at `η`.
pub fn predicted_rate(params: &FlowParams, xi: &[i64], eta: &DMatrix<f64>) -> f64 {
    let x = sym_coords(eta);
    let xf: Vec<f64> = xi.iter().map(|&k| k as f64).collect();
    let s = symbol_matrix(params, &xf);
    x.dot(&(&s * &x)) / x.dot(&x)
}

/// Amplitude of `exp(-tΣ(ξ)) ε η`.
pub fn linear_amplitude(params: &FlowParams, xi: &[i64], eta: &DMatrix<f64>, eps: f64, t: f64) -> f64 {
    let xf: Vec<f64> = xi.iter().map(|&k| k as f64).collect();
    let s = symbol_matrix(params, &xf);
    ((&s * -t).exp() * sym_coords(eta) * eps).norm()
}

/// Euclidean norm of the mode coefficients.
pub fn mode_amplitude(u: &TensorField, xi: &[i64]) -> Result<f64> {
    Ok(mode_coefficients(u, xi)?
        .iter()
        .map(|z| z.norm_sqr())
        .sum::<f64>()
        .sqrt())
}

#[derive(Debug, Clone)]
pub struct FlowOutcome {
    pub dir: PathBuf,
    pub record: ExperimentRecord,
    pub run: AdjustedRun,
}

/// Runs the gauge-fixed flow, writing snapshots, `record.csv` and `manifest.toml`.
pub fn run_flow(cfg: &RunConfig, dir: &Path) -> Result<FlowOutcome> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let params = cfg.params()?;
    let h = MetricField::flat(grid);
    let g0 = cfg.initial_metric()?;
    let (dt, steps) = cfg.time_steps()?;
    fs::create_dir_all(dir)?;

    let tracked: Vec<Vec<i64>> = if cfg.perturbation == crate::config::Perturbation::Modes {
        cfg.modes.clone()
    } else {
        Vec::new()
    };
    let mut columns: Vec<String> = ["t", "l2_norm", "sup_norm", "energy_e", "pure_residual"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for i in 0..tracked.len() {
        columns.push(format!("mode_{i}"));
    }
    let mut rec = ExperimentRecord::new("flow", cfg, columns);
    let stepper = AdjustedStepper::new(&h, &params, dt, cfg.allow_unstable)?;
    let opts = RunOptions {
        dt,
        steps,
        stride: cfg.stride,
        allow_unstable: cfg.allow_unstable,
    };
    let mut files = Vec::new();
    let mut times = Vec::new();
    let m = params.k + 1;
    let run = run_with(&stepper, &g0, &opts, |s| {
        let u = perturbation(&s.g);
        let name = format!("snap_{:05}.gflo", files.len());
        save_snapshot(s.g.field(), &dir.join(&name))?;
        files.push(name);
        times.push(s.t);
        let mut row = vec![
            Some(s.t),
            Some(l2_norm(&u, &h)?),
            Some(u.max_abs()),
            Some(sobolev_energy(&u, m, false)),
            None,
        ];
        for xi in &tracked {
            row.push(Some(mode_amplitude(&u, xi)?));
        }
        rec.rows.push(row);
        Ok(())
    })?;

    if cfg.reconstruct && run.halted.is_none() && run.states.len() >= 3 {
        let pure = reconstruct_pure_flow(&run.states, &h, &params, None)?;
        for (row, r) in rec.rows.iter_mut().zip(&pure.residual) {
            row[4] = Some(*r);
        }
        rec.summary.insert("max_pure_residual".into(), pure.max_residual());
    }

    for (i, xi) in tracked.iter().enumerate() {
        let eta = cfg.eta(i);
        let amp0 = cfg.amplitudes[i];
        let col = 5 + i;
        let predicted = predicted_rate(&params, xi, &eta);
        rec.summary.insert(format!("mode_{i}_predicted_rate"), predicted);
        // measured over the rows that stay in the small-amplitude regime
        let usable: Vec<&Vec<Option<f64>>> = rec
            .rows
            .iter()
            .take_while(|r| r[2].is_some_and(|s| s <= 1e-2))
            .collect();
        if let Some(last) = usable.last().filter(|r| r[0].unwrap_or(0.0) > 0.0) {
            let (t, a) = (last[0].unwrap_or(0.0), last[col].unwrap_or(0.0));
            let a0 = usable[0][col].unwrap_or(amp0);
            rec.summary
                .insert(format!("mode_{i}_measured_rate"), -(a / a0).ln() / t);
        }
        let worst = usable
            .iter()
            .map(|r| {
                let expected = linear_amplitude(&params, xi, &eta, amp0, r[0].unwrap_or(0.0));
                (r[col].unwrap_or(0.0) - expected).abs() / expected
            })
            .fold(0.0f64, f64::max);
        rec.summary.insert(format!("mode_{i}_linear_prediction_error"), worst);
    }

    let fixed = rec
        .rows
        .iter()
        .all(|r| r[1].unwrap_or(1.0) <= 1e-12 && r[2].unwrap_or(1.0) <= 1e-12);
    rec.verdict = if run.halted.is_some() {
        "halted"
    } else if fixed {
        "fixed-point"
    } else {
        "completed"
    }
    .into();
    if let Some(Error::Halted { t, .. }) = &run.halted {
        rec.summary.insert("halted_at".into(), *t);
    }
    rec.write_csv(&dir.join("record.csv"))?;
    write_manifest(dir, &rec, &params, grid, (dt, steps), times, files)?;
    Ok(FlowOutcome {
        dir: dir.to_path_buf(),
        record: rec,
        run,
    })
}

/// One reconstructed pure-flow solution and its time derivatives.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub dt: f64,
    pub pure: PureFlow,
    pub dgdt: Vec<TensorField>,
}

pub fn reconstruct_with_dt(
    g0: &MetricField,
    h: &MetricField,
    params: &FlowParams,
    dt: f64,
    steps: usize,
) -> Result<Reconstruction> {
    let opts = RunOptions {
        dt,
        steps,
        stride: 1,
        allow_unstable: false,
    };
    let run = run_adjusted(g0, h, params, &opts)?;
    if let Some(e) = run.halted {
        return Err(e);
    }
    let pure = reconstruct_pure_flow(&run.states, h, params, None)?;
    let fields: Vec<&TensorField> = pure.states.iter().map(|s| s.g.field()).collect();
    let dgdt = time_derivatives(&fields, dt)?;
    Ok(Reconstruction { dt, pure, dgdt })
}

/// Reconstructions at `dt`, `dt/2`, `dt/4` over the same horizon.
#[derive(Debug, Clone)]
pub struct RefinementLadder {
    pub levels: Vec<Reconstruction>,
}

impl RefinementLadder {
    pub fn build(
        g0: &MetricField,
        h: &MetricField,
        params: &FlowParams,
        dt: f64,
        steps: usize,
        levels: usize,
    ) -> Result<Self> {
        let levels = (0..levels)
            .map(|l| {
                let f = 1usize << l;
                reconstruct_with_dt(g0, h, params, dt / f as f64, steps * f)
            })
            .collect::<Result<_>>()?;
        Ok(Self { levels })
    }

    /// `max_t` pure-flow residual of level `l`.
    pub fn residual(&self, l: usize) -> f64 {
        self.levels[l].pure.max_residual()
    }

    /// `max_t ‖∂_t ḡ_l - ∂_t ḡ_{l+1}‖_{L²}` at the times of level `l`: the
    /// estimated time-discretization error of the residual at level `l`.
    pub fn derivative_error(&self, l: usize, h: &MetricField) -> Result<f64> {
        let (a, b) = (&self.levels[l], &self.levels[l + 1]);
        let mut worst: f64 = 0.0;
        for (i, d) in a.dgdt.iter().enumerate() {
            worst = worst.max(l2_norm(&d.sub(&b.dgdt[2 * i])?, h)?);
        }
        Ok(worst)
    }

    /// `max_t ‖ḡ_l - ḡ_{l+1}‖_∞` at the times of level `l`.
    pub fn metric_difference(&self, l: usize) -> Result<f64> {
        compare_reconstructions(&self.levels[l].pure.states, &self.levels[l + 1].pure.states, 2)
    }
}

/// `max_t ‖ḡ₁ - ḡ₂‖_∞` where sample `i` of the first sequence is matched
/// with sample `ratio * i` of the second.
pub fn compare_reconstructions(a: &[FlowState], b: &[FlowState], ratio: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (i, s) in a.iter().enumerate() {
        let other = b
            .get(ratio * i)
            .ok_or_else(|| Error::InvalidParams("reconstructions cover different horizons".into()))?;
        if s.g.grid() != other.g.grid() {
            return Err(Error::RankMismatch("reconstructions live on different grids".into()));
        }
        if (s.t - other.t).abs() > 1e-9 * s.t.abs().max(1.0) {
            return Err(Error::InvalidParams("reconstruction sample times differ".into()));
        }
        worst = worst.max(s.g.field().sub(other.g.field())?.max_abs());
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniquenessReport {
    pub sup_difference: f64,
    /// Richardson bound `C (dt² + (dt/2)²)` with `C` fitted on the finer pair.
    pub error_bound: f64,
    /// `sup diff(dt, dt/2) / sup diff(dt/2, dt/4)`.
    pub shrink_factor: Option<f64>,
    pub k_hat: f64,
    pub k_hat_refined: f64,
    pub energy_bounded: bool,
    pub verdict: &'static str,
}

impl UniquenessReport {
    pub fn k_hat_stable(&self) -> bool {
        (self.k_hat - self.k_hat_refined).abs() <= 0.1 * self.k_hat_refined.abs()
    }
}

#[derive(Debug, Clone)]
pub struct UniquenessOutcome {
    pub dir: PathBuf,
    pub record: ExperimentRecord,
    pub report: UniquenessReport,
}

/// Two pure-flow reconstructions from the same initial data, plus the
/// energy of a perturbed pair at two time steps.
pub fn run_uniqueness(cfg: &RunConfig, dir: &Path) -> Result<UniquenessOutcome> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let params = cfg.params()?;
    let h = MetricField::flat(grid);
    let g0 = cfg.initial_metric()?;
    let (dt, steps) = cfg.time_steps()?;
    fs::create_dir_all(dir)?;

    let (sup_difference, error_bound, shrink, coarse) = match cfg.uniqueness_variant {
        UniquenessVariant::Identical => {
            let a = reconstruct_with_dt(&g0, &h, &params, dt, steps)?;
            let b = reconstruct_with_dt(&g0, &h, &params, dt, steps)?;
            let d = compare_reconstructions(&a.pure.states, &b.pure.states, 1)?;
            (d, 0.0, None, a)
        }
        UniquenessVariant::DtHalving => {
            let ladder = RefinementLadder::build(&g0, &h, &params, dt, steps, 3)?;
            let d01 = ladder.metric_difference(0)?;
            let d12 = ladder.metric_difference(1)?;
            let c = d12 / ((dt / 2.0).powi(2) - (dt / 4.0).powi(2));
            let bound = c * (dt.powi(2) + (dt / 2.0).powi(2));
            let shrink = (d12 > 0.0).then(|| d01 / d12);
            (
                d01,
                bound,
                shrink,
                ladder.levels.into_iter().next().expect("three levels"),
            )
        }
    };

    // perturbed pair: e(t) of the difference of two gauge-fixed runs
    let pair_mode = cfg.pair_mode.clone().unwrap_or_else(|| {
        let mut v = vec![0; cfg.n];
        v[0] = 1;
        v
    });
    let pair_amp = cfg.pair_amplitude.unwrap_or(1e-6);
    let eta = witness_direction(&pair_mode);
    let g0b = MetricField::new(g0.field().add(&mode_field(grid, &pair_mode, &eta, pair_amp))?)?;
    let m = params.k + 1;
    let energy_at = |dt: f64, steps: usize| -> Result<crate::flow::EnergySeries> {
        let opts = RunOptions {
            dt,
            steps,
            stride: 1,
            allow_unstable: false,
        };
        let a = run_adjusted(&g0, &h, &params, &opts)?;
        let b = run_adjusted(&g0b, &h, &params, &opts)?;
        if let Some(e) = a.halted.or(b.halted) {
            return Err(e);
        }
        energy_monitor(&a.states, &b.states, m)
    };
    let (energy, refined) = match cfg.uniqueness_variant {
        UniquenessVariant::Identical => {
            let e = energy_at(dt, steps)?;
            (e.clone(), e)
        }
        UniquenessVariant::DtHalving => (energy_at(dt, steps)?, energy_at(dt / 2.0, 2 * steps)?),
    };
    let k_hat = energy.k_max().unwrap_or(0.0);
    let k_hat_refined = refined.k_max().unwrap_or(0.0);
    let energy_bounded = energy.bounded_by(k_hat) && refined.bounded_by(k_hat_refined);

    let mut report = UniquenessReport {
        sup_difference,
        error_bound,
        shrink_factor: shrink,
        k_hat,
        k_hat_refined,
        energy_bounded,
        verdict: "",
    };
    report.verdict = if sup_difference <= error_bound && report.k_hat_stable() && energy_bounded {
        "consistent-with-uniqueness"
    } else {
        "inconclusive"
    };

    let columns = ["t", "pure_residual", "energy_e", "k_hat"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rec = ExperimentRecord::new("uniqueness", cfg, columns);
    for (i, s) in coarse.pure.states.iter().enumerate() {
        rec.rows.push(vec![
            Some(s.t),
            Some(coarse.pure.residual[i]),
            energy.e.get(i).copied(),
            energy.k_hat.get(i).copied().flatten(),
        ]);
    }
    rec.verdict = report.verdict.into();
    rec.summary.insert("sup_difference".into(), report.sup_difference);
    rec.summary.insert("error_bound".into(), report.error_bound);
    if let Some(s) = report.shrink_factor {
        rec.summary.insert("shrink_factor".into(), s);
    }
    rec.summary.insert("k_hat".into(), report.k_hat);
    rec.summary.insert("k_hat_refined".into(), report.k_hat_refined);
    rec.write_csv(&dir.join("record.csv"))?;
    let times = coarse.pure.states.iter().map(|s| s.t).collect();
    write_manifest(dir, &rec, &params, grid, (dt, steps), times, Vec::new())?;
    Ok(UniquenessOutcome {
        dir: dir.to_path_buf(),
        record: rec,
        report,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GardingReport {
    pub lambda: f64,
    pub samples: usize,
    /// `min_u ∫<-Lu, u> - Λ‖∂^{k+1}u‖²` over unit-L² samples.
    pub worst_margin: f64,
}

/// `∫<-Lu, u> - Λ‖∂^{k+1} u‖²_{L²}` for one field, with `L` the flat
/// linearization assembled in physical space.
pub fn garding_margin(params: &FlowParams, u: &TensorField, lambda: f64) -> Result<f64> {
    let h = MetricField::flat(u.grid());
    let lu = flat_linearized_operator(params, u)?;
    let lhs = -l2_inner(&lu, u, &h)?;
    let top = sobolev_energy(u, params.k + 1, false) - sobolev_energy(u, 0, false) / 2.0;
    Ok(lhs - lambda * top)
}

/// Samples random band-limited symmetric fields, normalized in L².
pub fn garding(params: &FlowParams, grid: Grid, samples: usize, band: i64, seed: u64) -> Result<GardingReport> {
    let report = check_strong_ellipticity(params);
    if report.verdict != Verdict::StronglyElliptic {
        return Err(Error::InvalidParams(format!(
            "Gårding check needs strongly elliptic parameters, got {}",
            report.verdict.as_str()
        )));
    }
    let h = MetricField::flat(grid);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::INFINITY;
    for _ in 0..samples {
        let u = random_band_limited(grid, 2, 0, band, 1.0, &mut rng).symmetrized();
        let norm = l2_norm(&u, &h)?;
        let u = if norm > 0.0 { u.scale(1.0 / norm) } else { u };
        worst = worst.min(garding_margin(params, &u, report.lambda)?);
    }
    Ok(GardingReport {
        lambda: report.lambda,
        samples,
        worst_margin: if samples == 0 { 0.0 } else { worst },
    })
}

pub fn run_garding(cfg: &RunConfig) -> Result<GardingReport> {
    cfg.validate()?;
    garding(&cfg.params()?, cfg.grid()?, cfg.samples, cfg.band, cfg.seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub identities: IdentityReport,
    pub symbol_residual: f64,
    pub symbol_draws: usize,
}

impl VerifyReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.identities.passes(tol) && self.symbol_residual <= tol
    }
}

impl std::fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.identities)?;
        writeln!(
            f,
            "{:<52} {:>6} {:>12.3e} {:>7}",
            "symbol_reduced_form", "-", self.symbol_residual, self.symbol_draws
        )
    }
}

pub fn verify_all(seed: u64, order: usize, trials: usize) -> Result<VerifyReport> {
    let draws = 10_000;
    Ok(VerifyReport {
        identities: verify_identities(seed, order, trials)?,
        symbol_residual: reduced_form_residual(draws, seed)?,
        symbol_draws: draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn garding_zero_field_is_tight() {
        let grid = Grid::new(3, 8).unwrap();
        let params = FlowParams::new(3, 1, 0.0, 0.0, 1.0).unwrap();
        let u = TensorField::zeros(grid, 2, 0);
        assert_eq!(garding_margin(&params, &u, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn garding_rejects_non_elliptic() {
        let grid = Grid::new(3, 8).unwrap();
        let params = FlowParams::new(3, 1, -0.3, 0.0, 1.0).unwrap();
        assert!(garding(&params, grid, 3, 1, 0).is_err());
    }

    #[test]
    fn reconstructions_on_different_grids_are_rejected() {
        let coarse = [FlowState::new(MetricField::flat(Grid::new(3, 8).unwrap()))];
        let fine = [FlowState::new(MetricField::flat(Grid::new(3, 10).unwrap()))];
        assert!(matches!(
            compare_reconstructions(&coarse, &fine, 1),
            Err(Error::RankMismatch(_))
        ));
        assert_eq!(compare_reconstructions(&coarse, &coarse, 1).unwrap(), 0.0);
    }

    #[test]
    fn record_rejects_non_monotone_time() {
        let cfg = RunConfig::from_toml("n = 3\npoints = 8\npreset = \"bach\"\nhorizon = 0.1\n").unwrap();
        let mut rec = ExperimentRecord::new("flow", &cfg, vec!["t".into()]);
        rec.rows = vec![vec![Some(0.0)], vec![Some(0.0)]];
        let dir = tempfile::tempdir().unwrap();
        assert!(rec.write_csv(&dir.path().join("r.csv")).is_err());
    }

    #[test]
    fn predicted_rate_of_witness_mode() {
        let params = FlowParams::new(3, 1, -0.3, 0.0, 1.0).unwrap();
        let xi = [2, 2, 2];
        let rate = predicted_rate(&params, &xi, &witness_direction(&xi));
        assert!((rate + 14.4).abs() < 1e-12);
    }
}
