//! Principal symbols of the flow and gauge building blocks, the combined
//! symbol of the gauge-fixed operator, strong ellipticity decisions and the
//! linearization at the flat metric.
//!
//! Symmetric matrices are identified with `R^{n(n+1)/2}` through the
//! orthonormal (Frobenius) basis `E_ii`, `(E_ij + E_ji)/√2` for `i < j`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::curvature::{ansatz_tensor, lie_derivative, FlowParams, GaugeWeights};
use crate::error::{Error, Result};
use crate::gauge::deturck_field;
use crate::grid::{derivative_unchecked, gradient_all, Grid, MetricField, TensorField};

/// Distance from the threshold `-1/(2(n-1))` within which `a_eff` counts as critical.
pub const THRESHOLD_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct SymbolInput {
    pub params: FlowParams,
    pub xi: Vec<f64>,
    /// Row-major `n x n`, symmetric.
    pub eta: Vec<f64>,
    /// Row-major `n x n`, symmetric positive definite.
    pub metric: Vec<f64>,
}

impl SymbolInput {
    pub fn new(params: FlowParams, xi: Vec<f64>, eta: Vec<f64>) -> Self {
        let n = xi.len();
        let mut metric = vec![0.0; n * n];
        for i in 0..n {
            metric[i * n + i] = 1.0;
        }
        Self {
            params,
            xi,
            eta,
            metric,
        }
    }

    pub fn with_metric(mut self, metric: Vec<f64>) -> Self {
        self.metric = metric;
        self
    }

    fn invariants(&self) -> Result<Invariants> {
        let n = self.xi.len();
        if self.eta.len() != n * n || self.metric.len() != n * n {
            return Err(Error::RankMismatch(format!("symbol input needs {n}x{n} matrices")));
        }
        let g_inv = DMatrix::from_row_slice(n, n, &self.metric)
            .try_inverse()
            .ok_or_else(|| Error::InvalidParams("symbol metric is singular".into()))?;
        let eta = DMatrix::from_row_slice(n, n, &self.eta);
        let xi = DVector::from_column_slice(&self.xi);
        let xi_up = &g_inv * &xi;
        let eta_mixed = &g_inv * &eta; // η^i_j
        let s = xi.dot(&xi_up);
        let t = eta_mixed.trace();
        let q = xi_up.dot(&(&eta * &xi_up));
        let e2 = (&eta_mixed * &eta_mixed).trace();
        // tr(η⊗η)_{jk} = g^{il} η_ij η_kl
        let tr_eta_eta = eta.transpose() * &g_inv * &eta;
        let p2 = xi_up.dot(&(&tr_eta_eta * &xi_up));
        Ok(Invariants { s, t, q, e2, p2 })
    }
}

/// `s = |ξ|²`, `t = tr η`, `q = <ξ⊗ξ, η>`, `e2 = |η|²`, `p2 = <ξ⊗ξ, tr(η⊗η)>`.
#[derive(Debug, Clone, Copy)]
struct Invariants {
    s: f64,
    t: f64,
    q: f64,
    e2: f64,
    p2: f64,
}

fn sign(k: usize) -> f64 {
    if k.is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

/// The linearized building blocks whose principal symbols are known in closed form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    /// `Δ^k Ric`
    Ricci,
    /// `(Δ^k S) g`
    ScalarG,
    /// `Δ^{k-1} ∇²S`
    HessScalar,
    /// `L_{(Δ^{g,h})^k V} g`
    LieV,
    /// `L_{(Δ^{g,h})^{k-1} Z} g`
    LieZ,
}

impl Block {
    pub const ALL: [Block; 5] = [
        Block::Ricci,
        Block::ScalarG,
        Block::HessScalar,
        Block::LieV,
        Block::LieZ,
    ];
}

impl FromStr for Block {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ricci" => Ok(Block::Ricci),
            "scalar_g" => Ok(Block::ScalarG),
            "hess_scalar" => Ok(Block::HessScalar),
            "lie_V" | "lie_v" => Ok(Block::LieV),
            "lie_Z" | "lie_z" => Ok(Block::LieZ),
            other => Err(Error::InvalidParams(format!("unknown symbol block '{other}'"))),
        }
    }
}

/// `<σ_ξ(block) η, η>` with all contractions taken with `input.metric`.
pub fn building_block_symbol(block: Block, input: &SymbolInput) -> Result<f64> {
    let k = input.params.k;
    let Invariants { s, t, q, e2, p2 } = input.invariants()?;
    let needs_k = matches!(block, Block::HessScalar | Block::LieZ);
    if needs_k && k == 0 {
        return Err(Error::InvalidParams(format!("{block:?} needs k >= 1")));
    }
    let value = match block {
        Block::Ricci => sign(k) * 0.5 * s.powi(k as i32) * (s * e2 + t * q - 2.0 * p2),
        Block::ScalarG => sign(k) * s.powi(k as i32) * (s * t * t - t * q),
        Block::HessScalar => sign(k - 1) * s.powi(k as i32 - 1) * (q * q - s * t * q),
        Block::LieV => sign(k + 1) * s.powi(k as i32) * (2.0 * p2 - t * q),
        Block::LieZ => sign(k - 1) * s.powi(k as i32 - 1) * (2.0 * s * p2 - q * q),
    };
    Ok(value)
}

/// Symbol of minus the linearized gauge-fixed operator:
/// `c|ξ|^{2k-2}[½|ξ|⁴|η|² + (2α+2β-1)|ξ|²<ξξ,tr ηη> + (b-β)<ξξ,η>²
///  + (½-a-b-α)|ξ|² tr η <ξξ,η> + a(|ξ|² tr η)²]`.
pub fn combined_symbol(input: &SymbolInput) -> Result<f64> {
    let p = &input.params;
    let Invariants { s, t, q, e2, p2 } = input.invariants()?;
    if s == 0.0 {
        return Ok(0.0);
    }
    let (a, b, c) = (p.a_eff(), p.b, p.c);
    let (alpha, beta) = (p.alpha(), p.beta());
    let bracket = 0.5 * s * s * e2
        + (2.0 * alpha + 2.0 * beta - 1.0) * s * p2
        + (b - beta) * q * q
        + (0.5 - a - b - alpha) * s * t * q
        + a * (s * t) * (s * t);
    Ok(c * s.powi(p.k as i32 - 1) * bracket)
}

/// `c|ξ|^{2k-2}[½|ξ|⁴|η|² + a<ξ⊗ξ - |ξ|²g, η>²]`, valid for canonical weights.
pub fn reduced_symbol(input: &SymbolInput) -> Result<f64> {
    let p = &input.params;
    let Invariants { s, t, q, e2, .. } = input.invariants()?;
    if s == 0.0 {
        return Ok(0.0);
    }
    let m = q - s * t;
    Ok(p.c * s.powi(p.k as i32 - 1) * (0.5 * s * s * e2 + p.a_eff() * m * m))
}

/// Natural magnitude `c|ξ|^{2k+2}|η|²` of the symbol, used to measure
/// relative errors of identities whose terms may cancel.
pub fn symbol_scale(input: &SymbolInput) -> Result<f64> {
    let Invariants { s, e2, .. } = input.invariants()?;
    Ok(input.params.c * s.powi(input.params.k as i32 + 1) * e2)
}

/// Weighted sum of the five building blocks reproducing [`combined_symbol`].
pub fn block_sum_symbol(input: &SymbolInput) -> Result<f64> {
    let p = &input.params;
    let k = p.k;
    let f = sign(k) * p.c;
    let mut flow = building_block_symbol(Block::Ricci, input)?;
    flow += p.a_eff() * building_block_symbol(Block::ScalarG, input)?;
    let mut gauge = p.alpha() * building_block_symbol(Block::LieV, input)?;
    if k >= 1 {
        flow -= p.b * building_block_symbol(Block::HessScalar, input)?;
        gauge += p.beta() * building_block_symbol(Block::LieZ, input)?;
    }
    Ok(f * flow - f * gauge)
}

/// Index pairs `(i, j)`, `i <= j`, of the orthonormal symmetric basis.
pub fn sym_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((i, j));
        }
    }
    pairs
}

pub fn sym_basis(n: usize) -> Vec<DMatrix<f64>> {
    sym_pairs(n)
        .into_iter()
        .map(|(i, j)| {
            let mut m = DMatrix::zeros(n, n);
            if i == j {
                m[(i, i)] = 1.0;
            } else {
                let v = std::f64::consts::FRAC_1_SQRT_2;
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
            m
        })
        .collect()
}

/// Coordinates of a symmetric matrix in the orthonormal basis.
pub fn sym_coords(m: &DMatrix<f64>) -> DVector<f64> {
    let pairs = sym_pairs(m.nrows());
    DVector::from_iterator(
        pairs.len(),
        pairs.iter().map(|&(i, j)| {
            if i == j {
                m[(i, i)]
            } else {
                std::f64::consts::SQRT_2 * 0.5 * (m[(i, j)] + m[(j, i)])
            }
        }),
    )
}

pub fn sym_from_coords(n: usize, x: &DVector<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for (b, xb) in sym_basis(n).iter().zip(x.iter()) {
        m += b * *xb;
    }
    m
}

/// The flat-background operator `Σ(ξ)` applied to a symmetric matrix: for
/// `g = δ + η e^{i ξ·x}` the linearized right side is `-Σ(ξ) η e^{i ξ·x}`.
pub fn apply_symbol_operator(params: &FlowParams, xi: &[f64], eta: &DMatrix<f64>) -> DMatrix<f64> {
    let n = xi.len();
    let k = params.k as i32;
    let x = DVector::from_column_slice(xi);
    let s = x.dot(&x);
    let t = eta.trace();
    let v = eta * &x;
    let q = x.dot(&v);
    let p = &x * x.transpose();
    let sym_xv = &x * v.transpose() + &v * x.transpose();
    let id = DMatrix::<f64>::identity(n, n);
    let ms = -s;
    let pow = |e: i32| ms.powi(e);
    let (a, b, c) = (params.a_eff(), params.b, params.c);
    let (alpha, beta) = (params.alpha(), params.beta());

    let ricci = (eta * s - &sym_xv + &p * t) * 0.5;
    let s_lin = s * t - q;
    let mut flow = ricci * pow(k) + &id * (a * pow(k) * s_lin);
    if params.k >= 1 && b != 0.0 {
        flow += &p * (b * pow(k - 1) * s_lin);
    }
    let flow = flow * (sign(params.k + 1) * c);

    let lie_v = -(&sym_xv - &p * t);
    let mut gauge = lie_v * (alpha * pow(k));
    if params.k >= 1 && beta != 0.0 {
        let lie_z = &sym_xv * s - &p * q;
        gauge += lie_z * (beta * pow(k - 1));
    }
    let gauge = gauge * (sign(params.k) * c);
    -(flow + gauge)
}

/// Analytic `Σ(ξ)` in the orthonormal symmetric basis.
pub fn symbol_matrix(params: &FlowParams, xi: &[f64]) -> DMatrix<f64> {
    let n = xi.len();
    let basis = sym_basis(n);
    let m = basis.len();
    let mut out = DMatrix::zeros(m, m);
    for (qi, bq) in basis.iter().enumerate() {
        let image = sym_coords(&apply_symbol_operator(params, xi, bq));
        out.set_column(qi, &image);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    StronglyElliptic,
    Critical,
    NotElliptic,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::StronglyElliptic => "strongly_elliptic",
            Verdict::Critical => "critical",
            Verdict::NotElliptic => "not_elliptic",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymbolReport {
    pub verdict: Verdict,
    pub lambda: f64,
    pub witness_xi: Option<Vec<f64>>,
    pub witness_eta: Option<Vec<f64>>,
}

fn fmt_list(v: &[f64]) -> String {
    let items: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
    format!("[{}]", items.join(","))
}

impl fmt::Display for SymbolReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "verdict={} lambda={}", self.verdict.as_str(), self.lambda)?;
        match (&self.witness_xi, &self.witness_eta) {
            (Some(x), Some(e)) => write!(f, " witness_xi={} witness_eta={}", fmt_list(x), fmt_list(e)),
            _ => write!(f, " witness_xi=none witness_eta=none"),
        }
    }
}

/// `η = |ξ|² g - ξ⊗ξ` at `ξ = e_1`, `g = δ`.
pub fn witness(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xi = vec![0.0; n];
    xi[0] = 1.0;
    let mut eta = vec![0.0; n * n];
    for i in 1..n {
        eta[i * n + i] = 1.0;
    }
    (xi, eta)
}

/// Strong ellipticity of the gauge-fixed operator at a flat background.
///
/// With canonical weights the decision is the threshold comparison
/// `a_eff > -1/(2(n-1))` and `Λ = c(½ + min(0, a_eff(n-1)))`. Custom weights
/// fall back to the sampled minimum of the normalized symbol.
pub fn check_strong_ellipticity(params: &FlowParams) -> SymbolReport {
    let n = params.n;
    if let GaugeWeights::Custom { .. } = params.weights {
        let (min, xi, eta) = minimize_symbol(params, 20_000, 0x5eed);
        let lambda = params.c * min;
        let verdict = if lambda.abs() <= THRESHOLD_TOLERANCE {
            Verdict::Critical
        } else if lambda > 0.0 {
            Verdict::StronglyElliptic
        } else {
            Verdict::NotElliptic
        };
        let (witness_xi, witness_eta) = if verdict == Verdict::StronglyElliptic {
            (None, None)
        } else {
            (Some(xi), Some(eta))
        };
        return SymbolReport {
            verdict,
            lambda: if verdict == Verdict::Critical { 0.0 } else { lambda },
            witness_xi,
            witness_eta,
        };
    }
    let threshold = -1.0 / (2.0 * (n as f64 - 1.0));
    let a = params.a_eff();
    let (xi, eta) = witness(n);
    if (a - threshold).abs() <= THRESHOLD_TOLERANCE {
        SymbolReport {
            verdict: Verdict::Critical,
            lambda: 0.0,
            witness_xi: Some(xi),
            witness_eta: Some(eta),
        }
    } else if a > threshold {
        SymbolReport {
            verdict: Verdict::StronglyElliptic,
            lambda: params.c * (0.5 + (a * (n as f64 - 1.0)).min(0.0)),
            witness_xi: None,
            witness_eta: None,
        }
    } else {
        SymbolReport {
            verdict: Verdict::NotElliptic,
            lambda: params.c * (0.5 + a * (n as f64 - 1.0)),
            witness_xi: Some(xi),
            witness_eta: Some(eta),
        }
    }
}

fn normalized_symbol(params: &FlowParams, xi: &[f64], eta: &DMatrix<f64>) -> f64 {
    let input = SymbolInput::new(*params, xi.to_vec(), eta.as_slice().to_vec());
    let x2: f64 = xi.iter().map(|v| v * v).sum();
    let e2 = eta.norm_squared();
    combined_symbol(&input).expect("well-formed input") / (params.c * x2.powi(params.k as i32 + 1) * e2)
}

/// Quadratic form `η ↦ combined_symbol(ξ, η)/c` as a matrix in the orthonormal basis.
fn quadratic_form(params: &FlowParams, xi: &[f64]) -> DMatrix<f64> {
    let n = xi.len();
    let basis = sym_basis(n);
    let m = basis.len();
    let form = |eta: &DMatrix<f64>| {
        let input = SymbolInput::new(*params, xi.to_vec(), eta.as_slice().to_vec());
        combined_symbol(&input).expect("well-formed input") / params.c
    };
    let mut out = DMatrix::zeros(m, m);
    for p in 0..m {
        for q in p..m {
            let v = 0.25 * (form(&(&basis[p] + &basis[q])) - form(&(&basis[p] - &basis[q])));
            out[(p, q)] = v;
            out[(q, p)] = v;
        }
    }
    out
}

fn random_unit(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Returns the minimum and a minimizing `(ξ, η)`.
fn minimize_symbol(params: &FlowParams, samples: usize, seed: u64) -> (f64, Vec<f64>, Vec<f64>) {
    let n = params.n;
    let m = n * (n + 1) / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (wx, we) = witness(n);
    let mut best = (
        normalized_symbol(params, &wx, &DMatrix::from_row_slice(n, n, &we)),
        wx,
        we,
    );
    for _ in 0..samples {
        let xi = random_unit(&mut rng, n);
        let coords = DVector::from_vec(random_unit(&mut rng, m));
        let eta = sym_from_coords(n, &coords);
        let v = normalized_symbol(params, &xi, &eta);
        if v < best.0 {
            best = (v, xi, eta.as_slice().to_vec());
        }
    }
    // Local descent: minimize exactly over η (smallest eigenvalue of the form)
    // and by accept-if-better perturbations over ξ.
    let refine = |xi: &[f64]| -> (f64, Vec<f64>) {
        let eig = quadratic_form(params, xi).symmetric_eigen();
        let (idx, val) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
        let eta = sym_from_coords(n, &eig.eigenvectors.column(idx).into_owned());
        let x2: f64 = xi.iter().map(|v| v * v).sum();
        (val / x2.powi(params.k as i32 + 1), eta.as_slice().to_vec())
    };
    let mut xi = best.1.clone();
    let (mut val, mut eta) = refine(&xi);
    let mut step = 0.1;
    for _ in 0..200 {
        let dir = random_unit(&mut rng, n);
        let cand: Vec<f64> = xi.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
        let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cand: Vec<f64> = cand.into_iter().map(|x| x / norm).collect();
        let (v, e) = refine(&cand);
        if v < val {
            xi = cand;
            val = v;
            eta = e;
        } else {
            step *= 0.97;
        }
    }
    if val < best.0 {
        (val, xi, eta)
    } else {
        best
    }
}

/// Minimum of `combined_symbol / (c |ξ|^{2k+2} |η|²)` over random unit
/// directions and the analytic witness, refined by local descent.
pub fn brute_force_min(params: &FlowParams, samples: usize) -> Result<f64> {
    if samples < 10_000 {
        return Err(Error::InvalidParams(format!(
            "need at least 10^4 samples, got {samples}"
        )));
    }
    Ok(minimize_symbol(params, samples, 0xb7f0).0)
}

/// Largest gap between the combined symbol and its reduced form over
/// `draws` random inputs (`n` in 2..=5, `k` in 1..=3, canonical weights),
/// relative to `max(c|ξ|^{2k+2}|η|², |value|)`.
pub fn reduced_form_residual(draws: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for draw in 0..draws {
        let n = 2 + draw % 4;
        let k = 1 + (draw / 4) % 3;
        let params = FlowParams::new(
            n,
            k,
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(0.1..2.0),
        )?;
        let xi: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut eta = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = rng.gen_range(-1.0..1.0);
                eta[i * n + j] = v;
                eta[j * n + i] = v;
            }
        }
        let input = SymbolInput::new(params, xi, eta);
        let combined = combined_symbol(&input)?;
        let reduced = reduced_symbol(&input)?;
        let scale = symbol_scale(&input)?.max(combined.abs());
        if scale > 0.0 {
            worst = worst.max((combined - reduced).abs() / scale);
        }
    }
    Ok(worst)
}

/// Grid used to resolve a single mode `ξ` without touching Nyquist.
pub fn mode_grid(n: usize, xi: &[i64]) -> Result<Grid> {
    let max = xi.iter().map(|k| k.unsigned_abs() as usize).max().unwrap_or(0);
    let mut points = 8;
    while points / 2 <= max {
        points += 2;
    }
    Grid::new(n, points)
}

/// Full gauge-fixed right side `T(g) + L_{W(g, δ)} g` at background `δ`.
pub fn adjusted_operator(g: &MetricField, params: &FlowParams) -> Result<TensorField> {
    let h = MetricField::flat(g.grid());
    let w = deturck_field(g, &h, params)?;
    ansatz_tensor(g, params)?.add(&lie_derivative(&w, g)?)
}

/// Numerical `Σ(ξ)` from centered amplitude differences (ε = 1e-6) of the
/// full nonlinear operator at the flat metric, in the orthonormal basis.
pub fn linearize_at_flat(params: &FlowParams, xi: &[i64]) -> Result<DMatrix<f64>> {
    linearize_with(params, xi, |g| adjusted_operator(g, params))
}

/// Same as [`linearize_at_flat`] for the ansatz tensor alone.
pub fn linearize_ansatz_at_flat(params: &FlowParams, xi: &[i64]) -> Result<DMatrix<f64>> {
    linearize_with(params, xi, |g| ansatz_tensor(g, params))
}

fn linearize_with(
    params: &FlowParams,
    xi: &[i64],
    op: impl Fn(&MetricField) -> Result<TensorField>,
) -> Result<DMatrix<f64>> {
    params.validate()?;
    let n = params.n;
    if xi.len() != n || xi.iter().all(|&k| k == 0) {
        return Err(Error::InvalidParams(
            "linearization needs a nonzero frequency of length n".into(),
        ));
    }
    let grid = mode_grid(n, xi)?;
    let eps = 1e-6;
    let phase = |x: &[f64]| xi.iter().zip(x).map(|(&k, &v)| k as f64 * v).sum::<f64>().cos();
    let cos_field = TensorField::scalar_fn(grid, phase);
    let basis = sym_basis(n);
    let m = basis.len();
    let mut out = DMatrix::zeros(m, m);
    for (qi, bq) in basis.iter().enumerate() {
        let eval = |amp: f64| -> Result<TensorField> {
            let g = MetricField::from_fn(grid, |x| {
                let c = amp * phase(x);
                let mut v = crate::grid::identity_values(n);
                for i in 0..n {
                    for j in 0..n {
                        v[i * n + j] += c * bq[(i, j)];
                    }
                }
                v
            })?;
            op(&g)
        };
        let diff = eval(eps)?.sub(&eval(-eps)?)?.scale(0.5 / eps);
        // project each component onto cos(ξ·x)
        let weight = 2.0 / grid.nodes() as f64;
        let mut image = DMatrix::zeros(n, n);
        for node in 0..grid.nodes() {
            let c = cos_field.values()[node];
            let d = diff.node(node);
            for i in 0..n {
                for j in 0..n {
                    image[(i, j)] += weight * c * d[i * n + j];
                }
            }
        }
        out.set_column(qi, &(-sym_coords(&image)));
    }
    Ok(out)
}

/// `Σ_a ∂_a∂_a` componentwise.
fn flat_laplacian(f: &TensorField) -> TensorField {
    let grid = f.grid();
    let stencil = grid.derivative_stencil();
    let mut out = TensorField::zeros(grid, f.lower(), f.upper());
    for a in 0..grid.dim() {
        let d = derivative_unchecked(&derivative_unchecked(f, a, &stencil), a, &stencil);
        out = out.add(&d).expect("same shape");
    }
    out
}

fn flat_laplacian_power(f: &TensorField, k: usize) -> TensorField {
    (0..k).fold(f.clone(), |acc, _| flat_laplacian(&acc))
}

/// Linearization of the gauge-fixed operator at the flat metric, applied to a
/// symmetric field `u` in physical space, assembled from the explicit
/// first variations of `Ric`, `S`, `A`, `V` and `Z` at `δ`.
pub fn flat_linearized_operator(params: &FlowParams, u: &TensorField) -> Result<TensorField> {
    params.validate()?;
    if u.lower() != 2 || u.upper() != 0 {
        return Err(Error::RankMismatch("expected a symmetric (2,0) field".into()));
    }
    let grid = u.grid();
    let n = grid.dim();
    let k = params.k;
    let d1 = gradient_all(u);
    let d2: Vec<Vec<TensorField>> = d1.iter().map(gradient_all).collect();
    let at = |f: &TensorField, node: usize, i: usize, j: usize| f.node(node)[i * n + j];

    let mut ric = TensorField::zeros(grid, 2, 0);
    let mut scal = TensorField::zeros(grid, 0, 0);
    let mut a_lin = TensorField::zeros(grid, 2, 1);
    for node in 0..grid.nodes() {
        let mut r = vec![0.0; n * n];
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                let mut v = 0.0;
                for x in 0..n {
                    v += at(&d2[x][i], node, x, j) + at(&d2[x][j], node, i, x) - at(&d2[x][x], node, i, j);
                    v -= at(&d2[i][j], node, x, x);
                }
                r[i * n + j] = 0.5 * v;
                s += at(&d2[i][j], node, i, j);
                if i == j {
                    for x in 0..n {
                        s -= at(&d2[x][x], node, i, i);
                    }
                }
            }
        }
        ric.node_mut(node).copy_from_slice(&r);
        scal.values_mut()[node] = s;
        let av = a_lin.node_mut(node);
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    av[(a * n + b) * n + c] =
                        0.5 * (at(&d1[a], node, c, b) + at(&d1[b], node, a, c) - at(&d1[c], node, a, b));
                }
            }
        }
    }
    let ric = ric.symmetrized();
    let delta = MetricField::flat(grid);

    let mut inner = flat_laplacian_power(&ric, k);
    let a = params.a_eff();
    if a != 0.0 {
        let ls = flat_laplacian_power(&scal, k);
        inner = inner.axpy(a, &delta.field().mul_scalar_field(&ls)?)?;
    }
    if params.b != 0.0 {
        let ds = gradient_all(&scal);
        let mut hess = TensorField::zeros(grid, 2, 0);
        for (i, di) in ds.iter().enumerate() {
            for (j, dij) in gradient_all(di).into_iter().enumerate() {
                for node in 0..grid.nodes() {
                    hess.node_mut(node)[i * n + j] = dij.values()[node];
                }
            }
        }
        inner = inner.axpy(-params.b, &flat_laplacian_power(&hess.symmetrized(), k - 1))?;
    }
    let flow = inner.scale(params.ansatz_factor());

    let mut w = TensorField::zeros(grid, 0, 1);
    if params.alpha() != 0.0 {
        let mut v = TensorField::zeros(grid, 0, 1);
        for node in 0..grid.nodes() {
            let av = a_lin.node(node).to_vec();
            for c in 0..n {
                v.node_mut(node)[c] = (0..n).map(|x| av[(x * n + x) * n + c]).sum();
            }
        }
        w = w.axpy(params.alpha(), &flat_laplacian_power(&v, k))?;
    }
    if params.beta() != 0.0 {
        let da = gradient_all(&a_lin);
        let mut z = TensorField::zeros(grid, 0, 1);
        for (x, dax) in da.iter().enumerate() {
            for (y, daxy) in gradient_all(dax).into_iter().enumerate() {
                for node in 0..grid.nodes() {
                    for c in 0..n {
                        z.node_mut(node)[c] += daxy.node(node)[(x * n + y) * n + c];
                    }
                }
            }
        }
        w = w.axpy(params.beta(), &flat_laplacian_power(&z, k - 1))?;
    }
    let w = w.scale(sign(k) * params.c);
    let dw = gradient_all(&w);
    let mut lie = TensorField::zeros(grid, 2, 0);
    for node in 0..grid.nodes() {
        for i in 0..n {
            for j in 0..n {
                lie.node_mut(node)[i * n + j] = dw[i].node(node)[j] + dw[j].node(node)[i];
            }
        }
    }
    flow.add(&lie)
}
