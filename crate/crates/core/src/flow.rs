//! Time integration of the gauge-fixed flow `∂_t g = T(g) + L_{W(g,h)} g`,
//! the diffeomorphism ODE `∂_t φ = -W ∘ φ`, and reconstruction of the pure
//! flow `ḡ = φ^* g`.
//!
//! The stepper is an integrating-factor Heun scheme: the flat-background
//! linearization `Σ(ξ)` is integrated exactly per Fourier mode and the
//! remainder `F(g) + Σ û` is advanced explicitly with two stages.

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex64;

use crate::curvature::{ansatz_tensor, lie_derivative, FlowParams};
use crate::error::{Error, Result};
use crate::gauge::GaugeContext;
use crate::grid::{
    derivative_unchecked, identity_values, interpolate_relative, pointwise_inner, Grid, MetricField, Spectral,
    TensorField,
};
use crate::symbol::{check_strong_ellipticity, sym_basis, symbol_matrix, Verdict};

/// One sample of a flow run. `w` is the gauge field at this state, kept for
/// reconstruction; `phi` is set on reconstructed pure-flow states.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub t: f64,
    pub g: MetricField,
    pub w: Option<TensorField>,
    pub phi: Option<DiffeoField>,
}

impl FlowState {
    pub fn new(g: MetricField) -> Self {
        Self {
            t: 0.0,
            g,
            w: None,
            phi: None,
        }
    }
}

/// `T(g) + L_W g` and `W` itself.
pub fn adjusted_rhs(g: &MetricField, h: &MetricField, params: &FlowParams) -> Result<(TensorField, TensorField)> {
    let w = GaugeContext::new(g, h)?.deturck_field(params)?;
    let f = ansatz_tensor(g, params)?.add(&lie_derivative(&w, g)?)?;
    Ok((f, w))
}

/// `dt = c_dt / max_ξ ρ(Σ_sym(ξ))` over the modes kept by dealiasing.
pub fn default_dt(grid: Grid, params: &FlowParams, c_dt: f64) -> Result<f64> {
    params.validate()?;
    if grid.dim() != params.n {
        return Err(Error::RankMismatch("grid and parameter dimensions differ".into()));
    }
    let cut = grid.dealias_cutoff();
    let mut rho: f64 = 0.0;
    let n = grid.dim();
    // Σ is even in ξ and permutation-symmetric, so the corner mode is the largest;
    // scanning the whole band is still cheap and avoids relying on that.
    let side = (2 * cut + 1) as usize;
    for flat in 0..side.pow(n as u32) {
        let mut rest = flat;
        let xi: Vec<f64> = (0..n)
            .map(|_| {
                let k = (rest % side) as i64 - cut;
                rest /= side;
                k as f64
            })
            .collect();
        let s = symbol_matrix(params, &xi);
        let sym = (&s + s.transpose()) * 0.5;
        let ev = sym.symmetric_eigenvalues();
        rho = ev.iter().fold(rho, |m, v| m.max(v.abs()));
    }
    if rho == 0.0 {
        return Err(Error::InvalidParams("symbol vanishes on the whole band".into()));
    }
    Ok(c_dt / rho)
}

/// Integrating-factor stepper for a fixed grid, background, parameters and `dt`.
pub struct AdjustedStepper {
    grid: Grid,
    h: MetricField,
    params: FlowParams,
    dt: f64,
    spectral: Spectral,
    basis: Vec<DMatrix<f64>>,
    /// Per mode node: `Σ(ξ)` and `exp(-dt Σ(ξ))` in the orthonormal basis;
    /// `None` for modes removed by dealiasing.
    ops: Vec<Option<(DMatrix<f64>, DMatrix<f64>)>>,
}

type Modes = Vec<Vec<Complex64>>;

impl AdjustedStepper {
    /// Rejects parameters that are not strongly elliptic unless
    /// `allow_unstable` is set (instability experiments).
    pub fn new(h: &MetricField, params: &FlowParams, dt: f64, allow_unstable: bool) -> Result<Self> {
        params.validate()?;
        let grid = h.grid();
        if grid.dim() != params.n {
            return Err(Error::RankMismatch("grid and parameter dimensions differ".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParams(format!("time step must be positive, got {dt}")));
        }
        let report = check_strong_ellipticity(params);
        if report.verdict != Verdict::StronglyElliptic && !allow_unstable {
            return Err(Error::InvalidParams(format!(
                "flow parameters are {}; pass the unstable flag to integrate anyway",
                report.verdict.as_str()
            )));
        }
        let spectral = Spectral::new(grid);
        let ops = (0..grid.nodes())
            .map(|node| {
                if !spectral.keeps(node) {
                    return None;
                }
                let xi: Vec<f64> = grid.mode(node).iter().map(|&k| k as f64).collect();
                let sigma = symbol_matrix(params, &xi);
                let e = (&sigma * -dt).exp();
                Some((sigma, e))
            })
            .collect();
        Ok(Self {
            grid,
            h: h.clone(),
            params: *params,
            dt,
            spectral,
            basis: sym_basis(grid.dim()),
            ops,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    fn apply(&self, node: usize, m: &DMatrix<f64>, modes: &Modes, out: &mut Modes, scale: f64) {
        let n = self.grid.dim();
        let q = self.basis.len();
        let mut re = DVector::zeros(q);
        let mut im = DVector::zeros(q);
        for (qi, b) in self.basis.iter().enumerate() {
            let (mut r, mut i) = (0.0, 0.0);
            for a in 0..n {
                for c in 0..n {
                    let z = modes[a * n + c][node];
                    r += b[(a, c)] * z.re;
                    i += b[(a, c)] * z.im;
                }
            }
            re[qi] = r;
            im[qi] = i;
        }
        let re = m * re;
        let im = m * im;
        for a in 0..n {
            for c in 0..n {
                let (mut r, mut i) = (0.0, 0.0);
                for (qi, b) in self.basis.iter().enumerate() {
                    r += b[(a, c)] * re[qi];
                    i += b[(a, c)] * im[qi];
                }
                out[a * n + c][node] += Complex64::new(r, i) * scale;
            }
        }
    }

    fn zero_modes(&self) -> Modes {
        let n = self.grid.dim();
        vec![vec![Complex64::new(0.0, 0.0); self.grid.nodes()]; n * n]
    }

    fn metric_from_modes(&self, u: &Modes, t: f64) -> Result<MetricField> {
        let n = self.grid.dim();
        let mut field = self.spectral.inverse_field(u, 2, 0);
        let id = identity_values(n);
        for node in 0..self.grid.nodes() {
            for (v, d) in field.node_mut(node).iter_mut().zip(&id) {
                *v += d;
            }
        }
        if let Err(e) = field.check_finite("metric") {
            return Err(Error::Halted {
                t,
                reason: e.to_string(),
            });
        }
        MetricField::new(field.symmetrized()).map_err(|e| Error::Halted {
            t,
            reason: e.to_string(),
        })
    }

    fn perturbation_modes(&self, g: &MetricField) -> Modes {
        let n = self.grid.dim();
        let mut u = g.field().clone();
        let id = identity_values(n);
        for node in 0..self.grid.nodes() {
            for (v, d) in u.node_mut(node).iter_mut().zip(&id) {
                *v -= d;
            }
        }
        let mut modes = self.spectral.forward_field(&u);
        self.mask(&mut modes);
        modes
    }

    fn mask(&self, modes: &mut Modes) {
        for (node, op) in self.ops.iter().enumerate() {
            if op.is_none() {
                for m in modes.iter_mut() {
                    m[node] = Complex64::new(0.0, 0.0);
                }
            }
        }
    }

    /// Remainder `F(g) + Σ û` in mode space, plus `W(g)`.
    fn remainder(&self, g: &MetricField, u: &Modes, t: f64) -> Result<(Modes, TensorField)> {
        let (f, w) = adjusted_rhs(g, &self.h, &self.params).map_err(|e| Error::Halted {
            t,
            reason: e.to_string(),
        })?;
        let mut modes = self.spectral.forward_field(&f);
        for (node, op) in self.ops.iter().enumerate() {
            if let Some((sigma, _)) = op {
                self.apply(node, sigma, u, &mut modes, 1.0);
            }
        }
        self.mask(&mut modes);
        Ok((modes, w))
    }

    fn propagate(&self, u: &Modes) -> Modes {
        let mut out = self.zero_modes();
        for (node, op) in self.ops.iter().enumerate() {
            if let Some((_, e)) = op {
                self.apply(node, e, u, &mut out, 1.0);
            }
        }
        out
    }

    /// Advances one step; returns the new state and `W` at the old state.
    pub fn step(&self, state: &FlowState) -> Result<(FlowState, TensorField)> {
        if state.g.grid() != self.grid {
            return Err(Error::RankMismatch("state grid differs from stepper grid".into()));
        }
        let dt = self.dt;
        let u0 = self.perturbation_modes(&state.g);
        let g0 = self.metric_from_modes(&u0, state.t)?;
        let (n0, w0) = self.remainder(&g0, &u0, state.t)?;

        let axpy = |u: &Modes, s: f64, v: &Modes| -> Modes {
            u.iter()
                .zip(v)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y * s).collect())
                .collect()
        };
        let u1 = self.propagate(&axpy(&u0, dt, &n0));
        let g1 = self.metric_from_modes(&u1, state.t + dt)?;
        let (n1, _) = self.remainder(&g1, &u1, state.t + dt)?;
        let u_next = axpy(&self.propagate(&axpy(&u0, 0.5 * dt, &n0)), 0.5 * dt, &n1);
        let g_next = self.metric_from_modes(&u_next, state.t + dt)?;
        Ok((
            FlowState {
                t: state.t + dt,
                g: g_next,
                w: None,
                phi: None,
            },
            w0,
        ))
    }

    pub fn gauge_field(&self, g: &MetricField) -> Result<TensorField> {
        GaugeContext::new(g, &self.h)?.deturck_field(&self.params)
    }
}

/// One step of the gauge-fixed flow.
pub fn step_adjusted_flow(state: &FlowState, h: &MetricField, params: &FlowParams, dt: f64) -> Result<FlowState> {
    let stepper = AdjustedStepper::new(h, params, dt, false)?;
    Ok(stepper.step(state)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub dt: f64,
    pub steps: usize,
    /// Keep every `stride`-th state (the final state is always kept).
    pub stride: usize,
    pub allow_unstable: bool,
}

/// Sampled states of a gauge-fixed run, each carrying its `W`.
#[derive(Debug, Clone)]
pub struct AdjustedRun {
    pub states: Vec<FlowState>,
    pub dt: f64,
    /// Set when the run stopped early (positivity loss, non-finite values).
    pub halted: Option<Error>,
}

pub fn run_adjusted(g0: &MetricField, h: &MetricField, params: &FlowParams, opts: &RunOptions) -> Result<AdjustedRun> {
    let stepper = AdjustedStepper::new(h, params, opts.dt, opts.allow_unstable)?;
    run_with(&stepper, g0, opts, |_| Ok(()))
}

/// Drives `stepper`, calling `observe` on every kept state.
pub fn run_with(
    stepper: &AdjustedStepper,
    g0: &MetricField,
    opts: &RunOptions,
    mut observe: impl FnMut(&FlowState) -> Result<()>,
) -> Result<AdjustedRun> {
    if opts.stride == 0 {
        return Err(Error::InvalidParams("snapshot stride must be positive".into()));
    }
    let mut states = Vec::new();
    let mut cur = FlowState::new(g0.clone());
    let mut halted = None;
    for step in 0..opts.steps {
        match stepper.step(&cur) {
            Ok((next, w)) => {
                if step % opts.stride == 0 {
                    cur.w = Some(w);
                    observe(&cur)?;
                    states.push(cur);
                }
                cur = next;
            }
            Err(e @ Error::Halted { .. }) => {
                halted = Some(e);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    if halted.is_none() {
        cur.w = Some(stepper.gauge_field(&cur.g)?);
        observe(&cur)?;
        states.push(cur);
    }
    Ok(AdjustedRun {
        states,
        dt: opts.dt,
        halted,
    })
}

/// `φ(x_i) = x_{i + shift} + d(x_i)`: a periodic diffeomorphism stored as a
/// whole-cell shift plus a displacement field.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffeoField {
    shift: Vec<i64>,
    displacement: TensorField,
}

impl DiffeoField {
    pub fn identity(grid: Grid) -> Self {
        Self {
            shift: vec![0; grid.dim()],
            displacement: TensorField::zeros(grid, 0, 1),
        }
    }

    /// `φ(x) = x + cells · h`.
    pub fn translation(grid: Grid, cells: &[i64]) -> Result<Self> {
        if cells.len() != grid.dim() {
            return Err(Error::RankMismatch("shift length differs from grid dimension".into()));
        }
        Ok(Self {
            shift: cells.to_vec(),
            displacement: TensorField::zeros(grid, 0, 1),
        })
    }

    pub fn from_displacement(displacement: TensorField) -> Result<Self> {
        if displacement.lower() != 0 || displacement.upper() != 1 {
            return Err(Error::RankMismatch("displacement must be a vector field".into()));
        }
        displacement.check_finite("displacement")?;
        let phi = Self {
            shift: vec![0; displacement.grid().dim()],
            displacement,
        };
        phi.check_jacobian()?;
        Ok(phi)
    }

    pub fn grid(&self) -> Grid {
        self.displacement.grid()
    }

    pub fn shift(&self) -> &[i64] {
        &self.shift
    }

    pub fn displacement(&self) -> &TensorField {
        &self.displacement
    }

    /// `φ(x_node)` in coordinates (not reduced modulo 2π).
    pub fn point(&self, node: usize) -> Vec<f64> {
        let grid = self.grid();
        let h = grid.spacing();
        grid.multi_index(node)
            .iter()
            .zip(&self.shift)
            .zip(self.displacement.node(node))
            .map(|((&i, &s), &d)| (i as i64 + s) as f64 * h + d)
            .collect()
    }

    fn base(&self, node: usize) -> Vec<i64> {
        self.grid()
            .multi_index(node)
            .iter()
            .zip(&self.shift)
            .map(|(&i, &s)| i as i64 + s)
            .collect()
    }

    /// Values of `f ∘ φ` at every node.
    pub fn compose(&self, f: &TensorField) -> Result<TensorField> {
        if f.grid() != self.grid() {
            return Err(Error::RankMismatch(
                "field and diffeomorphism on different grids".into(),
            ));
        }
        let grid = self.grid();
        let mut out = TensorField::zeros(grid, f.lower(), f.upper());
        for node in 0..grid.nodes() {
            let v = interpolate_relative(f, &self.base(node), self.displacement.node(node));
            out.node_mut(node).copy_from_slice(&v);
        }
        Ok(out)
    }

    /// `∂_i φ^α = δ + ∂_i d^α`; component `[i, α]` at each node.
    pub fn jacobian(&self) -> TensorField {
        let grid = self.grid();
        let n = grid.dim();
        let stencil = grid.derivative_stencil();
        let grads: Vec<TensorField> = (0..n)
            .map(|i| derivative_unchecked(&self.displacement, i, &stencil))
            .collect();
        let mut jac = TensorField::from_fn(grid, 1, 1, |_| identity_values(n));
        for node in 0..grid.nodes() {
            let v = jac.node_mut(node);
            for (i, grad) in grads.iter().enumerate() {
                for a in 0..n {
                    v[i * n + a] += grad.node(node)[a];
                }
            }
        }
        jac
    }

    pub fn check_jacobian(&self) -> Result<()> {
        let grid = self.grid();
        let n = grid.dim();
        let jac = self.jacobian();
        for node in 0..grid.nodes() {
            let det = DMatrix::from_row_slice(n, n, jac.node(node)).determinant();
            if !(det > 0.0 && det.is_finite()) {
                return Err(Error::DegenerateJacobian {
                    node: grid.multi_index(node),
                    det,
                });
            }
        }
        Ok(())
    }
}

/// One RK4 step of `∂_t φ = -W ∘ φ` with `W` frozen over the step.
pub fn step_diffeo(phi: &DiffeoField, w: &TensorField, dt: f64) -> Result<DiffeoField> {
    step_diffeo_varying(phi, [w, w, w], dt)
}

/// RK4 step with `W` at the start, midpoint and end of the step.
pub fn step_diffeo_varying(phi: &DiffeoField, w: [&TensorField; 3], dt: f64) -> Result<DiffeoField> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParams(format!("time step must be positive, got {dt}")));
    }
    let grid = phi.grid();
    for wi in w {
        if wi.grid() != grid || wi.lower() != 0 || wi.upper() != 1 {
            return Err(Error::RankMismatch(
                "gauge field must be a vector field on the diffeo grid".into(),
            ));
        }
    }
    let n = grid.dim();
    let mut next = phi.displacement.clone();
    for node in 0..grid.nodes() {
        let base = phi.base(node);
        let d0 = phi.displacement.node(node);
        let eval = |field: &TensorField, d: &[f64]| -> Vec<f64> {
            interpolate_relative(field, &base, d).into_iter().map(|v| -v).collect()
        };
        let shifted = |s: f64, k: &[f64]| -> Vec<f64> { d0.iter().zip(k).map(|(a, b)| a + s * b).collect() };
        let k1 = eval(w[0], d0);
        let k2 = eval(w[1], &shifted(0.5 * dt, &k1));
        let k3 = eval(w[1], &shifted(0.5 * dt, &k2));
        let k4 = eval(w[2], &shifted(dt, &k3));
        let out = next.node_mut(node);
        for a in 0..n {
            out[a] = d0[a] + dt / 6.0 * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a]);
        }
    }
    next.check_finite("displacement")?;
    let phi = DiffeoField {
        shift: phi.shift.clone(),
        displacement: next,
    };
    phi.check_jacobian()?;
    Ok(phi)
}

/// `ḡ_{ij}(x) = ∂_i φ^α ∂_j φ^β g_{αβ}(φ(x))`.
pub fn pullback_metric(g: &MetricField, phi: &DiffeoField) -> Result<MetricField> {
    phi.check_jacobian()?;
    let grid = g.grid();
    let n = grid.dim();
    let composed = phi.compose(g.field())?;
    let jac = phi.jacobian();
    let mut out = TensorField::zeros(grid, 2, 0);
    for node in 0..grid.nodes() {
        let j = jac.node(node);
        let gv = composed.node(node);
        let o = out.node_mut(node);
        for i in 0..n {
            for k in i..n {
                let mut acc = 0.0;
                for a in 0..n {
                    for b in 0..n {
                        acc += j[i * n + a] * j[k * n + b] * gv[a * n + b];
                    }
                }
                o[i * n + k] = acc;
                o[k * n + i] = acc;
            }
        }
    }
    MetricField::new(out)
}

/// Sum that does not depend on the order of the terms.
fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// `‖F‖_{L²(h)}`, invariant (bit-exactly) under permutations of the nodes.
pub fn l2_norm_sorted(f: &TensorField, h: &MetricField) -> Result<f64> {
    let p = pointwise_inner(f, f, h)?;
    let dens = h.volume_density();
    let cell = h.grid().spacing().powi(h.grid().dim() as i32);
    let terms: Vec<f64> = p.values().iter().zip(dens.values()).map(|(a, b)| a * b).collect();
    Ok((sorted_sum(terms) * cell).max(0.0).sqrt())
}

/// Second-order time derivative of uniformly sampled fields: centered in
/// the interior, one-sided three-point stencils at the ends.
pub fn time_derivatives(fields: &[&TensorField], dt: f64) -> Result<Vec<TensorField>> {
    let m = fields.len();
    if m < 3 {
        return Err(Error::InvalidParams(
            "time derivatives need at least three samples".into(),
        ));
    }
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let d = if i == 0 {
            fields[0].scale(-1.5).axpy(2.0, fields[1])?.axpy(-0.5, fields[2])?
        } else if i == m - 1 {
            fields[m - 1]
                .scale(1.5)
                .axpy(-2.0, fields[m - 2])?
                .axpy(0.5, fields[m - 3])?
        } else {
            fields[i + 1].sub(fields[i - 1])?.scale(0.5)
        };
        out.push(d.scale(1.0 / dt));
    }
    Ok(out)
}

/// Pure-flow reconstruction: `ḡ(t)` and the residual `‖∂_t ḡ - T(ḡ)‖_{L²}`.
#[derive(Debug, Clone)]
pub struct PureFlow {
    pub states: Vec<FlowState>,
    pub residual: Vec<f64>,
}

impl PureFlow {
    pub fn max_residual(&self) -> f64 {
        self.residual.iter().fold(0.0, |m, &r| m.max(r))
    }
}

fn uniform_spacing(run: &[FlowState]) -> Result<f64> {
    if run.len() < 3 {
        return Err(Error::InvalidParams(
            "reconstruction needs at least three stored states".into(),
        ));
    }
    let dt = run[1].t - run[0].t;
    for pair in run.windows(2) {
        let d = pair[1].t - pair[0].t;
        if !(d > 0.0) || (d - dt).abs() > 1e-9 * dt.max(1.0) {
            return Err(Error::InvalidParams(
                "stored states must be uniformly spaced in time".into(),
            ));
        }
    }
    Ok(dt)
}

/// Co-integrates `φ` against the stored gauge fields (RK4, midpoint `W` by
/// linear interpolation in time) and pulls each stored metric back.
pub fn reconstruct_pure_flow(
    run: &[FlowState],
    h: &MetricField,
    params: &FlowParams,
    phi0: Option<DiffeoField>,
) -> Result<PureFlow> {
    let dt = uniform_spacing(run)?;
    let grid = h.grid();
    let mut phi = phi0.unwrap_or_else(|| DiffeoField::identity(grid));
    let mut states = Vec::with_capacity(run.len());
    for (i, s) in run.iter().enumerate() {
        let gbar = pullback_metric(&s.g, &phi).map_err(|e| Error::Halted {
            t: s.t,
            reason: e.to_string(),
        })?;
        states.push(FlowState {
            t: s.t,
            g: gbar,
            w: None,
            phi: Some(phi.clone()),
        });
        if i + 1 < run.len() {
            let w0 =
                s.w.as_ref()
                    .ok_or_else(|| Error::InvalidParams("stored state lacks its gauge field".into()))?;
            let w1 = run[i + 1]
                .w
                .as_ref()
                .ok_or_else(|| Error::InvalidParams("stored state lacks its gauge field".into()))?;
            let mid = w0.add(w1)?.scale(0.5);
            phi = step_diffeo_varying(&phi, [w0, &mid, w1], dt).map_err(|e| Error::Halted {
                t: s.t,
                reason: e.to_string(),
            })?;
        }
    }
    let residual = pure_residual(&states, h, params, dt)?;
    Ok(PureFlow { states, residual })
}

/// `‖∂_t g - T(g)‖_{L²(h)}` at each sample of a uniformly spaced sequence.
pub fn pure_residual(states: &[FlowState], h: &MetricField, params: &FlowParams, dt: f64) -> Result<Vec<f64>> {
    let fields: Vec<&TensorField> = states.iter().map(|s| s.g.field()).collect();
    let dts = time_derivatives(&fields, dt)?;
    states
        .iter()
        .zip(&dts)
        .map(|(s, d)| l2_norm_sorted(&d.sub(&ansatz_tensor(&s.g, params)?)?, h))
        .collect()
}

/// `e(t) = ‖w‖² + ‖∂^m w‖²` for `w = g₁ - g₂`, with flat-background norms
/// evaluated by Parseval (Nyquist modes carry no derivative).
#[derive(Debug, Clone, PartialEq)]
pub struct EnergySeries {
    pub t: Vec<f64>,
    pub e: Vec<f64>,
    /// `log(e(t)/e(0))/t`, absent at `t = 0` or when `e(0) = 0`.
    pub k_hat: Vec<Option<f64>>,
}

impl EnergySeries {
    /// Largest empirical rate, so that `e(t) <= e(0) exp(K t)` on the series.
    pub fn k_max(&self) -> Option<f64> {
        self.k_hat
            .iter()
            .flatten()
            .copied()
            .fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
    }

    pub fn bounded_by(&self, k: f64) -> bool {
        let e0 = self.e[0];
        self.t
            .iter()
            .zip(&self.e)
            .all(|(&t, &e)| e <= e0 * (k * t).exp() * (1.0 + 1e-12) + 1e-300)
    }
}

pub fn sobolev_energy(w: &TensorField, m: usize, skip_zero_mode: bool) -> f64 {
    let grid = w.grid();
    let spectral = Spectral::new(grid);
    let nyq = grid.points() as i64 / 2;
    let modes = spectral.forward_field(w);
    let nodes = grid.nodes() as f64;
    let cell = grid.spacing().powi(grid.dim() as i32);
    let mut total = 0.0;
    for node in 0..grid.nodes() {
        let xi = grid.mode(node);
        if skip_zero_mode && xi.iter().all(|&k| k == 0) {
            continue;
        }
        let weight = if m == 0 {
            1.0
        } else if xi.iter().any(|&k| k.abs() == nyq) {
            0.0
        } else {
            (xi.iter().map(|&k| (k * k) as f64).sum::<f64>()).powi(m as i32)
        };
        let amp: f64 = modes.iter().map(|c| c[node].norm_sqr()).sum();
        total += (1.0 + weight) * amp;
    }
    total * cell / nodes
}

/// Energy of the difference of two runs sampled at the same times.
pub fn energy_monitor(run1: &[FlowState], run2: &[FlowState], m: usize) -> Result<EnergySeries> {
    energy_series(run1, run2, m, false)
}

/// Same as [`energy_monitor`] with the spatial mean of `w` removed.
pub fn energy_monitor_without_mean(run1: &[FlowState], run2: &[FlowState], m: usize) -> Result<EnergySeries> {
    energy_series(run1, run2, m, true)
}

fn energy_series(run1: &[FlowState], run2: &[FlowState], m: usize, skip_zero: bool) -> Result<EnergySeries> {
    if run1.len() != run2.len() || run1.is_empty() {
        return Err(Error::InvalidParams(
            "runs must have the same nonzero number of samples".into(),
        ));
    }
    let mut series = EnergySeries {
        t: Vec::new(),
        e: Vec::new(),
        k_hat: Vec::new(),
    };
    for (a, b) in run1.iter().zip(run2) {
        if a.g.grid() != b.g.grid() {
            return Err(Error::RankMismatch("runs live on different grids".into()));
        }
        if (a.t - b.t).abs() > 1e-12 * a.t.abs().max(1.0) {
            return Err(Error::InvalidParams(format!("sample times differ: {} vs {}", a.t, b.t)));
        }
        let w = a.g.field().sub(b.g.field())?;
        series.t.push(a.t);
        series.e.push(sobolev_energy(&w, m, skip_zero));
    }
    let (t0, e0) = (series.t[0], series.e[0]);
    series.k_hat = series
        .t
        .iter()
        .zip(&series.e)
        .map(|(&t, &e)| (t > t0 && e0 > 0.0 && e > 0.0).then(|| (e / e0).ln() / (t - t0)))
        .collect();
    Ok(series)
}

/// Complex amplitude of mode `ξ` in each component, scaled so that
/// `ε η cos(ξ·x)` has amplitude `ε η`.
pub fn mode_coefficients(u: &TensorField, xi: &[i64]) -> Result<Vec<Complex64>> {
    let grid = u.grid();
    if xi.len() != grid.dim() {
        return Err(Error::RankMismatch("mode has the wrong dimension".into()));
    }
    let spectral = Spectral::new(grid);
    let node = grid.mode_node(xi);
    let factor = if xi.iter().all(|&k| k == 0) { 1.0 } else { 2.0 } / grid.nodes() as f64;
    Ok(spectral.forward_field(u).iter().map(|c| c[node] * factor).collect())
}

/// `g - δ`.
pub fn perturbation(g: &MetricField) -> TensorField {
    let n = g.grid().dim();
    let id = identity_values(n);
    let mut u = g.field().clone();
    for node in 0..g.grid().nodes() {
        for (v, d) in u.node_mut(node).iter_mut().zip(&id) {
            *v -= d;
        }
    }
    u
}

/// `δ + ε η cos(ξ·x)`.
pub fn single_mode_metric(grid: Grid, xi: &[i64], eta: &DMatrix<f64>, eps: f64) -> Result<MetricField> {
    let n = grid.dim();
    MetricField::from_fn(grid, |x| {
        let phase: f64 = xi.iter().zip(x).map(|(&k, &v)| k as f64 * v).sum();
        let c = eps * phase.cos();
        let mut v = identity_values(n);
        for i in 0..n {
            for j in 0..n {
                v[i * n + j] += c * eta[(i, j)];
            }
        }
        v
    })
}
