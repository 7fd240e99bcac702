//! Truncated Taylor jets at the origin and tensors over maps built from them.
//!
//! A [`Jet`] of order `r` in `n` variables stores the Taylor coefficients
//! `c_α` of `Σ c_α x^α` for every multi-index with `|α| <= r`, in graded
//! order, so the coefficients of a lower-order truncation form a prefix.
//! Differentiation lowers the order by one; products and compositions are
//! truncated to the smaller order of their inputs.
//!
//! [`JetTensor`] components are jets in the source variables. Every slot is
//! tagged as co- or contravariant and as belonging to the source manifold `M`
//! or the target `N` of a map `φ: M -> N`; tensors on a single manifold use
//! the identity map.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

struct JetSpace {
    monos: Vec<Vec<u8>>,
    degree: Vec<usize>,
    /// Number of monomials of degree `<= d`.
    len_upto: Vec<usize>,
    /// `(i, j, k)` with `x^{α_i} x^{α_j} = x^{α_k}`.
    mul: Vec<(u32, u32, u32)>,
    /// Per variable: `(src, dst, factor)` with `∂_m x^{α_src} = factor x^{α_dst}`.
    deriv: Vec<Vec<(u32, u32, f64)>>,
    /// For monomials of degree >= 1: `(parent, var)` with `α = α_parent + e_var`.
    parent: Vec<(usize, usize)>,
}

impl JetSpace {
    fn build(n: usize, order: usize) -> Self {
        let mut monos: Vec<Vec<u8>> = Vec::new();
        let mut len_upto = Vec::new();
        for d in 0..=order {
            let mut cur = vec![0u8; n];
            push_degree(&mut monos, &mut cur, 0, d);
            len_upto.push(monos.len());
        }
        let index: HashMap<Vec<u8>, usize> = monos.iter().cloned().enumerate().map(|(i, m)| (m, i)).collect();
        let degree: Vec<usize> = monos.iter().map(|m| m.iter().map(|&v| v as usize).sum()).collect();
        let mut mul = Vec::new();
        for i in 0..monos.len() {
            for j in 0..monos.len() {
                if degree[i] + degree[j] > order {
                    continue;
                }
                let sum: Vec<u8> = monos[i].iter().zip(&monos[j]).map(|(a, b)| a + b).collect();
                mul.push((i as u32, j as u32, index[&sum] as u32));
            }
        }
        let mut deriv = vec![Vec::new(); n];
        for (src, m) in monos.iter().enumerate() {
            for (var, table) in deriv.iter_mut().enumerate() {
                if m[var] > 0 {
                    let mut lower = m.clone();
                    lower[var] -= 1;
                    table.push((src as u32, index[&lower] as u32, m[var] as f64));
                }
            }
        }
        let parent = monos
            .iter()
            .map(|m| match m.iter().position(|&v| v > 0) {
                None => (0, 0),
                Some(var) => {
                    let mut p = m.clone();
                    p[var] -= 1;
                    (index[&p], var)
                }
            })
            .collect();
        Self {
            monos,
            degree,
            len_upto,
            mul,
            deriv,
            parent,
        }
    }
}

fn push_degree(out: &mut Vec<Vec<u8>>, cur: &mut Vec<u8>, var: usize, left: usize) {
    if var + 1 == cur.len() {
        cur[var] = left as u8;
        out.push(cur.clone());
        cur[var] = 0;
        return;
    }
    for v in (0..=left).rev() {
        cur[var] = v as u8;
        push_degree(out, cur, var + 1, left - v);
    }
    cur[var] = 0;
}

thread_local! {
    static SPACES: RefCell<HashMap<(usize, usize), Rc<JetSpace>>> = RefCell::new(HashMap::new());
}

fn space(n: usize, order: usize) -> Rc<JetSpace> {
    SPACES.with(|s| {
        s.borrow_mut()
            .entry((n, order))
            .or_insert_with(|| Rc::new(JetSpace::build(n, order)))
            .clone()
    })
}

fn space_len(n: usize, order: usize) -> usize {
    space(n, order).len_upto[order]
}

/// Truncated Taylor expansion of a scalar function at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    n: usize,
    order: usize,
    coeffs: Vec<f64>,
}

impl Jet {
    pub fn zero(n: usize, order: usize) -> Self {
        Self {
            n,
            order,
            coeffs: vec![0.0; space_len(n, order)],
        }
    }

    pub fn constant(n: usize, order: usize, value: f64) -> Self {
        let mut j = Self::zero(n, order);
        j.coeffs[0] = value;
        j
    }

    /// The coordinate function `x^var`.
    pub fn variable(n: usize, order: usize, var: usize) -> Self {
        let mut j = Self::zero(n, order);
        if order >= 1 {
            let sp = space(n, order);
            let idx = (0..sp.monos.len())
                .find(|&i| sp.degree[i] == 1 && sp.monos[i][var] == 1)
                .expect("linear monomial");
            j.coeffs[idx] = 1.0;
        }
        j
    }

    pub fn random(n: usize, order: usize, rng: &mut impl Rng) -> Self {
        let len = space_len(n, order);
        Self {
            n,
            order,
            coeffs: (0..len).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
        }
    }

    /// Homogeneous random polynomial of the given degree (zero if above the order).
    pub fn random_homogeneous(n: usize, order: usize, degree: usize, rng: &mut impl Rng) -> Self {
        let sp = space(n, order);
        let mut j = Self::zero(n, order);
        for (i, c) in j.coeffs.iter_mut().enumerate() {
            if sp.degree[i] == degree {
                *c = rng.gen_range(-1.0..=1.0);
            }
        }
        j
    }

    pub fn from_coeffs(n: usize, order: usize, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != space_len(n, order) {
            return Err(Error::RankMismatch(format!(
                "jet of order {order} in {n} variables needs {} coefficients",
                space_len(n, order)
            )));
        }
        Ok(Self { n, order, coeffs })
    }

    pub fn vars(&self) -> usize {
        self.n
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Value at the origin.
    pub fn value(&self) -> f64 {
        self.coeffs[0]
    }

    /// Coefficients of the monomials of exactly degree `d`.
    pub fn degree_part(&self, d: usize) -> &[f64] {
        let sp = space(self.n, self.order);
        let start = if d == 0 { 0 } else { sp.len_upto[d - 1] };
        &self.coeffs[start..sp.len_upto[d]]
    }

    pub fn truncate(&self, order: usize) -> Jet {
        assert!(order <= self.order, "cannot raise jet order");
        Jet {
            n: self.n,
            order,
            coeffs: self.coeffs[..space_len(self.n, order)].to_vec(),
        }
    }

    fn common(&self, other: &Jet) -> (Jet, Jet) {
        assert_eq!(self.n, other.n, "jets in different variable counts");
        let o = self.order.min(other.order);
        (self.truncate(o), other.truncate(o))
    }

    pub fn add(&self, other: &Jet) -> Jet {
        let (mut a, b) = self.common(other);
        a.coeffs.iter_mut().zip(&b.coeffs).for_each(|(x, y)| *x += y);
        a
    }

    pub fn sub(&self, other: &Jet) -> Jet {
        let (mut a, b) = self.common(other);
        a.coeffs.iter_mut().zip(&b.coeffs).for_each(|(x, y)| *x -= y);
        a
    }

    pub fn scale(&self, s: f64) -> Jet {
        Jet {
            n: self.n,
            order: self.order,
            coeffs: self.coeffs.iter().map(|c| c * s).collect(),
        }
    }

    pub fn mul(&self, other: &Jet) -> Jet {
        let (a, b) = self.common(other);
        let sp = space(a.n, a.order);
        let mut out = vec![0.0; a.coeffs.len()];
        for &(i, j, k) in &sp.mul {
            out[k as usize] += a.coeffs[i as usize] * b.coeffs[j as usize];
        }
        Jet {
            n: a.n,
            order: a.order,
            coeffs: out,
        }
    }

    /// `self += s * a * b`, truncated to the common order.
    fn add_product(&mut self, s: f64, a: &Jet, b: &Jet) {
        let o = self.order.min(a.order).min(b.order);
        if o < self.order {
            *self = self.truncate(o);
        }
        let sp = space(self.n, o);
        for &(i, j, k) in &sp.mul {
            self.coeffs[k as usize] += s * a.coeffs[i as usize] * b.coeffs[j as usize];
        }
    }

    pub fn deriv(&self, var: usize) -> Result<Jet> {
        if self.order == 0 {
            return Err(Error::OrderExhausted(format!(
                "derivative of an order-0 jet in x^{var}"
            )));
        }
        let sp = space(self.n, self.order);
        let mut out = vec![0.0; space_len(self.n, self.order - 1)];
        for &(src, dst, f) in &sp.deriv[var] {
            if sp.degree[src as usize] <= self.order && (dst as usize) < out.len() {
                out[dst as usize] += f * self.coeffs[src as usize];
            }
        }
        Ok(Jet {
            n: self.n,
            order: self.order - 1,
            coeffs: out,
        })
    }

    /// `exp` of the jet.
    pub fn exp(&self) -> Jet {
        let c0 = self.value();
        let mut nil = self.clone();
        nil.coeffs[0] = 0.0;
        let mut term = Jet::constant(self.n, self.order, 1.0);
        let mut sum = term.clone();
        for j in 1..=self.order {
            term = term.mul(&nil).scale(1.0 / j as f64);
            sum = sum.add(&term);
        }
        sum.scale(c0.exp())
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, c| m.max(c.abs()))
    }

    /// Lowest degree with a nonzero coefficient (`None` for the zero jet).
    pub fn valuation(&self) -> Option<usize> {
        let sp = space(self.n, self.order);
        self.coeffs.iter().position(|&c| c != 0.0).map(|i| sp.degree[i])
    }
}

/// Variance and covariance of one tensor slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    LowerSrc,
    UpperSrc,
    LowerDst,
    UpperDst,
}

impl Slot {
    fn is_src(self) -> bool {
        matches!(self, Slot::LowerSrc | Slot::UpperSrc)
    }

    fn to_dst(self) -> Slot {
        match self {
            Slot::LowerSrc => Slot::LowerDst,
            Slot::UpperSrc => Slot::UpperDst,
            s => s,
        }
    }
}

/// Tensor whose components are jets in the source variables.
#[derive(Debug, Clone, PartialEq)]
pub struct JetTensor {
    pub n_src: usize,
    pub n_dst: usize,
    pub slots: Vec<Slot>,
    pub comps: Vec<Jet>,
}

impl JetTensor {
    fn dims_of(n_src: usize, n_dst: usize, slots: &[Slot]) -> Vec<usize> {
        slots.iter().map(|s| if s.is_src() { n_src } else { n_dst }).collect()
    }

    pub fn dims(&self) -> Vec<usize> {
        Self::dims_of(self.n_src, self.n_dst, &self.slots)
    }

    pub fn zeros(n_src: usize, n_dst: usize, slots: Vec<Slot>, order: usize) -> Self {
        let count: usize = Self::dims_of(n_src, n_dst, &slots).iter().product();
        Self {
            n_src,
            n_dst,
            slots,
            comps: vec![Jet::zero(n_src, order); count],
        }
    }

    pub fn random(n_src: usize, n_dst: usize, slots: Vec<Slot>, order: usize, rng: &mut impl Rng) -> Self {
        let mut t = Self::zeros(n_src, n_dst, slots, order);
        for c in t.comps.iter_mut() {
            *c = Jet::random(n_src, order, rng);
        }
        t
    }

    pub fn order(&self) -> usize {
        self.comps.iter().map(Jet::order).min().unwrap_or(0)
    }

    pub fn rank(&self) -> usize {
        self.slots.len()
    }

    pub fn index(&self, digits: &[usize]) -> usize {
        self.dims().iter().zip(digits).fold(0, |acc, (&d, &i)| acc * d + i)
    }

    pub fn digits(&self, mut c: usize) -> Vec<usize> {
        let dims = self.dims();
        let mut out = vec![0; dims.len()];
        for s in (0..dims.len()).rev() {
            out[s] = c % dims[s];
            c /= dims[s];
        }
        out
    }

    pub fn get(&self, digits: &[usize]) -> &Jet {
        &self.comps[self.index(digits)]
    }

    pub fn truncate(&self, order: usize) -> JetTensor {
        JetTensor {
            comps: self.comps.iter().map(|c| c.truncate(order.min(c.order()))).collect(),
            ..self.clone()
        }
    }

    fn require_same_shape(&self, other: &JetTensor) -> Result<()> {
        if self.slots != other.slots || self.n_src != other.n_src || self.n_dst != other.n_dst {
            return Err(Error::RankMismatch(format!(
                "jet tensors with slots {:?} and {:?}",
                self.slots, other.slots
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &JetTensor) -> Result<JetTensor> {
        self.require_same_shape(other)?;
        Ok(JetTensor {
            comps: self.comps.iter().zip(&other.comps).map(|(a, b)| a.add(b)).collect(),
            ..self.clone()
        })
    }

    pub fn sub(&self, other: &JetTensor) -> Result<JetTensor> {
        self.require_same_shape(other)?;
        Ok(JetTensor {
            comps: self.comps.iter().zip(&other.comps).map(|(a, b)| a.sub(b)).collect(),
            ..self.clone()
        })
    }

    pub fn scale(&self, s: f64) -> JetTensor {
        JetTensor {
            comps: self.comps.iter().map(|c| c.scale(s)).collect(),
            ..self.clone()
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.comps.iter().fold(0.0, |m, c| m.max(c.max_abs()))
    }

    /// Reorders slots: slot `s` of the result is slot `perm[s]` of `self`.
    pub fn permute(&self, perm: &[usize]) -> JetTensor {
        let slots: Vec<Slot> = perm.iter().map(|&p| self.slots[p]).collect();
        let mut out = JetTensor::zeros(self.n_src, self.n_dst, slots, self.order());
        for c in 0..out.comps.len() {
            let d = out.digits(c);
            let mut src = vec![0; d.len()];
            for (s, &p) in perm.iter().enumerate() {
                src[p] = d[s];
            }
            out.comps[c] = self.get(&src).clone();
        }
        out
    }

    /// Largest coefficient difference scaled by `max(1, |self|, |other|)`.
    pub fn residual(&self, other: &JetTensor) -> Result<f64> {
        self.require_same_shape(other)?;
        let o = self.order().min(other.order());
        let (a, b) = (self.truncate(o), other.truncate(o));
        let diff = a.sub(&b)?.max_abs();
        Ok(diff / 1f64.max(a.max_abs()).max(b.max_abs()))
    }

    /// Contracts slots `s1 < s2` against a two-slot tensor: `Σ_{ab} m[a,b] F[..a..b..]`.
    pub fn trace_pair(&self, s1: usize, s2: usize, m: &JetTensor) -> Result<JetTensor> {
        if s1 >= s2 || s2 >= self.rank() || m.rank() != 2 {
            return Err(Error::RankMismatch("bad trace slots".into()));
        }
        let dims = self.dims();
        let (d1, d2) = (dims[s1], dims[s2]);
        let mut slots = self.slots.clone();
        slots.remove(s2);
        slots.remove(s1);
        let o = self.order().min(m.order());
        let mut out = JetTensor::zeros(self.n_src, self.n_dst, slots, o);
        for c in 0..out.comps.len() {
            let rest = out.digits(c);
            let mut acc = Jet::zero(self.n_src, o);
            for a in 0..d1 {
                for b in 0..d2 {
                    let mut full = rest.clone();
                    full.insert(s1, a);
                    full.insert(s2, b);
                    acc.add_product(1.0, &m.comps[a * d2 + b], self.get(&full));
                }
            }
            out.comps[c] = acc;
        }
        Ok(out)
    }

    /// Replaces slot `s` using a two-slot tensor: `out[..i..] = Σ_β m[i, β] F[..β..]`.
    fn contract_slot(&self, s: usize, m: &JetTensor, new_kind: Slot) -> JetTensor {
        let mut slots = self.slots.clone();
        slots[s] = new_kind;
        let o = self.order().min(m.order());
        let mut out = JetTensor::zeros(self.n_src, self.n_dst, slots, o);
        let inner = self.dims()[s];
        let mdims = m.dims();
        for c in 0..out.comps.len() {
            let d = out.digits(c);
            let mut acc = Jet::zero(self.n_src, o);
            let mut src = d.clone();
            for beta in 0..inner {
                src[s] = beta;
                acc.add_product(1.0, &m.comps[d[s] * mdims[1] + beta], self.get(&src));
            }
            out.comps[c] = acc;
        }
        out
    }
}

/// Metric jet on the source manifold of its variables; degree-0 part SPD.
#[derive(Debug, Clone, PartialEq)]
pub struct JetMetric(JetTensor);

impl JetMetric {
    pub fn new(t: JetTensor) -> Result<Self> {
        if t.slots != [Slot::LowerSrc, Slot::LowerSrc] {
            return Err(Error::RankMismatch(
                "metric jets have two covariant source slots".into(),
            ));
        }
        let n = t.n_src;
        let m0 = DMatrix::from_fn(n, n, |i, j| t.comps[i * n + j].value());
        let sym = (0..n).all(|i| (0..n).all(|j| t.comps[i * n + j] == t.comps[j * n + i]));
        if !sym || m0.cholesky().is_none() {
            return Err(Error::SingularMetric { node: vec![] });
        }
        Ok(Self(t))
    }

    pub fn flat(n: usize, order: usize) -> Self {
        let mut t = JetTensor::zeros(n, n, vec![Slot::LowerSrc, Slot::LowerSrc], order);
        for i in 0..n {
            t.comps[i * n + i] = Jet::constant(n, order, 1.0);
        }
        Self(t)
    }

    /// `I + 0.2 S` at the origin with random symmetric `S`; higher
    /// coefficients uniform in `[-1, 1]`.
    pub fn random(n: usize, order: usize, rng: &mut impl Rng) -> Self {
        let mut t = JetTensor::zeros(n, n, vec![Slot::LowerSrc, Slot::LowerSrc], order);
        for i in 0..n {
            for j in i..n {
                let mut jet = Jet::random(n, order, rng);
                jet.coeffs[0] = if i == j { 1.0 } else { 0.0 } + 0.2 * rng.gen_range(-1.0..=1.0);
                t.comps[i * n + j] = jet.clone();
                t.comps[j * n + i] = jet;
            }
        }
        Self::new(t).expect("diagonally dominant")
    }

    pub fn tensor(&self) -> &JetTensor {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.n_src
    }

    pub fn order(&self) -> usize {
        self.0.order()
    }

    /// Inverse metric as a `(UpperSrc, UpperSrc)` tensor, by a Neumann series
    /// around the value at the origin.
    pub fn inverse(&self) -> JetTensor {
        let n = self.dim();
        let o = self.order();
        let g0 = DMatrix::from_fn(n, n, |i, j| self.0.comps[i * n + j].value());
        let g0_inv = g0.try_inverse().expect("validated SPD");
        // N = g - g0, K = -g0^{-1} N; g^{-1} = Σ_j K^j g0^{-1}
        let mut k = vec![Jet::zero(n, o); n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = Jet::zero(n, o);
                for l in 0..n {
                    let mut nl = self.0.comps[l * n + j].truncate(o);
                    nl.coeffs[0] = 0.0;
                    acc = acc.add(&nl.scale(-g0_inv[(i, l)]));
                }
                k[i * n + j] = acc;
            }
        }
        let const_mat =
            |m: &DMatrix<f64>| -> Vec<Jet> { (0..n * n).map(|c| Jet::constant(n, o, m[(c / n, c % n)])).collect() };
        let mut term = const_mat(&g0_inv);
        let mut sum = term.clone();
        for _ in 0..o {
            term = mat_mul(&k, &term, n);
            sum = sum.iter().zip(&term).map(|(a, b)| a.add(b)).collect();
        }
        JetTensor {
            n_src: n,
            n_dst: n,
            slots: vec![Slot::UpperSrc, Slot::UpperSrc],
            comps: sum,
        }
    }
}

fn mat_mul(a: &[Jet], b: &[Jet], n: usize) -> Vec<Jet> {
    let o = a[0].order().min(b[0].order());
    let vars = a[0].vars();
    (0..n * n)
        .map(|c| {
            let (i, j) = (c / n, c % n);
            let mut acc = Jet::zero(vars, o);
            for l in 0..n {
                acc.add_product(1.0, &a[i * n + l], &b[l * n + j]);
            }
            acc
        })
        .collect()
}

/// `Γ^c_{ab} = ½ g^{cd}(∂_a g_{db} + ∂_b g_{ad} - ∂_d g_{ab})` as a
/// `[LowerSrc, LowerSrc, UpperSrc]` tensor of order `order - 1`.
pub fn jet_christoffel(g: &JetMetric) -> Result<JetTensor> {
    let n = g.dim();
    if g.order() == 0 {
        return Err(Error::OrderExhausted("Christoffel symbols need order >= 1".into()));
    }
    let o = g.order() - 1;
    let inv = g.inverse();
    let t = g.tensor();
    let mut dg: Vec<Vec<Jet>> = Vec::with_capacity(n);
    for m in 0..n {
        dg.push(t.comps.iter().map(|c| c.deriv(m)).collect::<Result<Vec<_>>>()?);
    }
    let mut out = JetTensor::zeros(n, n, vec![Slot::LowerSrc, Slot::LowerSrc, Slot::UpperSrc], o);
    for a in 0..n {
        for b in a..n {
            let lowered: Vec<Jet> = (0..n)
                .map(|d| {
                    dg[a][d * n + b]
                        .add(&dg[b][a * n + d])
                        .sub(&dg[d][a * n + b])
                        .scale(0.5)
                })
                .collect();
            for c in 0..n {
                let mut acc = Jet::zero(n, o);
                for (d, l) in lowered.iter().enumerate() {
                    acc.add_product(1.0, &inv.comps[c * n + d], l);
                }
                out.comps[(a * n + b) * n + c] = acc.clone();
                out.comps[(b * n + a) * n + c] = acc;
            }
        }
    }
    Ok(out)
}

/// Map `φ: M -> N` with `φ(0) = 0` and invertible differential at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct JetMap {
    pub comps: Vec<Jet>,
}

impl JetMap {
    pub fn new(comps: Vec<Jet>) -> Result<Self> {
        if comps.is_empty() {
            return Err(Error::RankMismatch("empty map".into()));
        }
        if comps.iter().any(|c| c.value() != 0.0) {
            return Err(Error::InvalidParams("jet maps must fix the origin".into()));
        }
        let map = Self { comps };
        let lin = map.linear_part();
        if lin.nrows() != lin.ncols() || lin.determinant().abs() < 1e-12 {
            return Err(Error::InvalidParams("jet map differential is not invertible".into()));
        }
        Ok(map)
    }

    pub fn identity(n: usize, order: usize) -> Self {
        Self {
            comps: (0..n).map(|i| Jet::variable(n, order, i)).collect(),
        }
    }

    /// Linear part `I + 0.3 R`; higher coefficients uniform in `[-1, 1]`.
    pub fn random(n: usize, order: usize, rng: &mut impl Rng) -> Self {
        loop {
            let comps: Vec<Jet> = (0..n)
                .map(|i| {
                    let mut j = Jet::random(n, order, rng);
                    j.coeffs[0] = 0.0;
                    let sp = space(n, order);
                    for (idx, m) in sp.monos.iter().enumerate() {
                        if sp.degree[idx] == 1 {
                            let var = m.iter().position(|&v| v == 1).unwrap();
                            j.coeffs[idx] = if var == i { 1.0 } else { 0.0 } + 0.3 * rng.gen_range(-1.0..=1.0);
                        }
                    }
                    j
                })
                .collect();
            if let Ok(map) = Self::new(comps) {
                return map;
            }
        }
    }

    pub fn n_src(&self) -> usize {
        self.comps[0].vars()
    }

    pub fn n_dst(&self) -> usize {
        self.comps.len()
    }

    pub fn order(&self) -> usize {
        self.comps.iter().map(Jet::order).min().unwrap_or(0)
    }

    /// Jacobian at the origin, `rows = components`.
    pub fn linear_part(&self) -> DMatrix<f64> {
        let n = self.n_src();
        DMatrix::from_fn(self.n_dst(), n, |a, i| {
            if self.comps[a].order() == 0 {
                0.0
            } else {
                self.comps[a].deriv(i).map(|d| d.value()).unwrap_or(0.0)
            }
        })
    }

    /// `dφ` as a `[LowerSrc, UpperDst]` tensor: component `[i, α] = ∂_i φ^α`.
    pub fn differential(&self) -> Result<JetTensor> {
        let (ns, nd) = (self.n_src(), self.n_dst());
        let mut out = JetTensor::zeros(
            ns,
            nd,
            vec![Slot::LowerSrc, Slot::UpperDst],
            self.order().saturating_sub(1),
        );
        for i in 0..ns {
            for a in 0..nd {
                out.comps[i * nd + a] = self.comps[a].deriv(i)?;
            }
        }
        Ok(out)
    }

    /// Products `φ^β` for every monomial `β` of the target space up to the
    /// map's order, reused across compositions.
    fn powers(&self, order: usize) -> Vec<Jet> {
        let sp = space(self.n_dst(), order);
        let o = order.min(self.order());
        let mut pw: Vec<Jet> = Vec::with_capacity(sp.monos.len());
        for (idx, _) in sp.monos.iter().enumerate() {
            if idx == 0 {
                pw.push(Jet::constant(self.n_src(), o, 1.0));
            } else {
                let (parent, var) = sp.parent[idx];
                let p = pw[parent].mul(&self.comps[var].truncate(o));
                pw.push(p);
            }
        }
        pw
    }

    fn compose_with(&self, f: &Jet, powers: &[Jet]) -> Jet {
        let o = f.order().min(self.order());
        let sp = space(f.vars(), f.order());
        let mut acc = Jet::zero(self.n_src(), o);
        for (idx, c) in f.coeffs.iter().enumerate() {
            if *c != 0.0 && sp.degree[idx] <= o {
                let p = &powers[idx];
                acc.coeffs.iter_mut().zip(&p.coeffs).for_each(|(a, b)| *a += c * b);
            }
        }
        acc
    }

    /// `f ∘ φ` for a jet `f` in the target variables.
    pub fn compose(&self, f: &Jet) -> Jet {
        let pw = self.powers(f.order());
        self.compose_with(f, &pw)
    }

    /// `φ ∘ ψ`.
    pub fn after(&self, psi: &JetMap) -> JetMap {
        let o = self.order().min(psi.order());
        let pw = psi.powers(o);
        JetMap {
            comps: self
                .comps
                .iter()
                .map(|c| psi.compose_with(&c.truncate(o), &pw))
                .collect(),
        }
    }

    /// Inverse map by fixed-point iteration `ψ = L^{-1}(y - N∘ψ)`, where
    /// `L` and `N` are the linear and nonlinear parts of `φ`.
    pub fn inverse(&self) -> Result<JetMap> {
        let n = self.n_src();
        if self.n_dst() != n {
            return Err(Error::InvalidParams("only equidimensional maps are invertible".into()));
        }
        let o = self.order();
        let l_inv = self
            .linear_part()
            .try_inverse()
            .ok_or_else(|| Error::InvalidParams("singular linear part".into()))?;
        let sp = space(n, o);
        let nonlinear: Vec<Jet> = self
            .comps
            .iter()
            .map(|c| {
                let mut j = c.truncate(o);
                for (idx, v) in j.coeffs.iter_mut().enumerate() {
                    if sp.degree[idx] <= 1 {
                        *v = 0.0;
                    }
                }
                j
            })
            .collect();
        let apply_l_inv = |v: &[Jet]| -> Vec<Jet> {
            (0..n)
                .map(|i| {
                    let mut acc = Jet::zero(n, o);
                    for (a, va) in v.iter().enumerate() {
                        acc = acc.add(&va.scale(l_inv[(i, a)]));
                    }
                    acc
                })
                .collect()
        };
        let ids: Vec<Jet> = (0..n).map(|i| Jet::variable(n, o, i)).collect();
        let mut psi = JetMap {
            comps: apply_l_inv(&ids),
        };
        for _ in 0..o {
            let pw = psi.powers(o);
            let rhs: Vec<Jet> = ids
                .iter()
                .zip(&nonlinear)
                .map(|(y, nl)| y.sub(&psi.compose_with(nl, &pw)))
                .collect();
            psi = JetMap {
                comps: apply_l_inv(&rhs),
            };
        }
        Ok(psi)
    }

    /// Adds a jet to every component (the perturbation must vanish at 0).
    pub fn perturbed(&self, delta: &[Jet]) -> Result<JetMap> {
        JetMap::new(self.comps.iter().zip(delta).map(|(a, b)| a.add(b)).collect())
    }
}

/// Composes every component of a tensor living on `N` (jets in `N`'s
/// variables) with `φ`, relabelling its slots as target slots.
pub fn compose_tensor(f: &JetTensor, phi: &JetMap) -> JetTensor {
    let pw = phi.powers(f.order());
    JetTensor {
        n_src: phi.n_src(),
        n_dst: phi.n_dst(),
        slots: f.slots.iter().map(|s| s.to_dst()).collect(),
        comps: f.comps.iter().map(|c| phi.compose_with(c, &pw)).collect(),
    }
}

/// `φ^* F` for `F` on `N`: covariant source slots are contracted with `dφ`,
/// target slots are composed with `φ`. Contravariant source slots cannot be
/// pulled back and are rejected.
pub fn pullback(f: &JetTensor, phi: &JetMap) -> Result<JetTensor> {
    if f.slots.contains(&Slot::UpperSrc) {
        return Err(Error::RankMismatch("contravariant slots on N do not pull back".into()));
    }
    if f.n_src != phi.n_dst() {
        return Err(Error::RankMismatch(
            "tensor dimension differs from the map's target".into(),
        ));
    }
    let pw = phi.powers(f.order());
    let composed = JetTensor {
        n_src: phi.n_src(),
        n_dst: phi.n_dst(),
        slots: f
            .slots
            .iter()
            .map(|s| if *s == Slot::LowerSrc { Slot::LowerDst } else { *s })
            .collect(),
        comps: f.comps.iter().map(|c| phi.compose_with(c, &pw)).collect(),
    };
    let dphi = phi.differential()?;
    let mut out = composed;
    for (s, kind) in f.slots.iter().enumerate() {
        if *kind == Slot::LowerSrc {
            out = out.contract_slot(s, &dphi, Slot::LowerSrc);
        }
    }
    Ok(out)
}

/// Pullback of a metric jet.
pub fn pullback_metric(g: &JetMetric, phi: &JetMap) -> Result<JetMetric> {
    JetMetric::new(symmetrize_pair(&pullback(g.tensor(), phi)?))
}

fn symmetrize_pair(t: &JetTensor) -> JetTensor {
    let n = t.n_src;
    let mut out = t.clone();
    for i in 0..n {
        for j in i + 1..n {
            let avg = t.comps[i * n + j].add(&t.comps[j * n + i]).scale(0.5);
            out.comps[i * n + j] = avg.clone();
            out.comps[j * n + i] = avg;
        }
    }
    out
}

/// Connection data for covariant derivatives of tensors over `φ`.
#[derive(Debug, Clone)]
pub struct MapContext {
    pub dphi: JetTensor,
    /// Christoffel symbols of the source metric `ḡ`.
    pub gamma_src: JetTensor,
    /// `Σ_μ ∂_m φ^μ (Γ^h ∘ φ)^γ_{μβ}` as `[LowerSrc m, LowerDst β, UpperDst γ]`.
    pub gamma_dst: JetTensor,
    pub src_inverse: JetTensor,
    /// `h ∘ φ` and its inverse, with target slots.
    pub dst_metric: JetTensor,
    pub dst_inverse: JetTensor,
}

impl MapContext {
    pub fn new(src: &JetMetric, dst: &JetMetric, phi: &JetMap) -> Result<Self> {
        let dphi = phi.differential()?;
        let gamma_src = jet_christoffel(src)?;
        let gamma_h = compose_tensor(&jet_christoffel(dst)?, phi);
        let (ns, nd) = (phi.n_src(), phi.n_dst());
        let o = dphi.order().min(gamma_h.order());
        let mut gamma_dst = JetTensor::zeros(ns, nd, vec![Slot::LowerSrc, Slot::LowerDst, Slot::UpperDst], o);
        for m in 0..ns {
            for b in 0..nd {
                for c in 0..nd {
                    let mut acc = Jet::zero(ns, o);
                    for mu in 0..nd {
                        acc.add_product(1.0, &dphi.comps[m * nd + mu], &gamma_h.comps[(mu * nd + b) * nd + c]);
                    }
                    gamma_dst.comps[(m * nd + b) * nd + c] = acc;
                }
            }
        }
        Ok(Self {
            dphi,
            gamma_src,
            gamma_dst,
            src_inverse: src.inverse(),
            dst_metric: compose_tensor(dst.tensor(), phi),
            dst_inverse: compose_tensor(&dst.inverse(), phi),
        })
    }

    /// Identity-map context on one manifold: `∇^{g,h}` corrects source
    /// slots with `Γ^g` and target slots with `Γ^h`.
    pub fn identity(g: &JetMetric, h: &JetMetric) -> Result<Self> {
        let o = g.order().min(h.order());
        Self::new(g, h, &JetMap::identity(g.dim(), o))
    }

    /// Map covariant derivative; the derivative index is appended as a new
    /// last slot of kind `LowerSrc`. Lowers the order by one.
    pub fn derivative(&self, f: &JetTensor) -> Result<JetTensor> {
        let ns = f.n_src;
        let mut slots = f.slots.clone();
        slots.push(Slot::LowerSrc);
        let partials: Vec<Vec<Jet>> = (0..ns)
            .map(|m| f.comps.iter().map(|c| c.deriv(m)).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?;
        let o = (f.order() - 1).min(self.gamma_src.order()).min(self.gamma_dst.order());
        let mut out = JetTensor::zeros(ns, f.n_dst, slots, o);
        let dims = f.dims();
        let nd = f.n_dst;
        for c in 0..out.comps.len() {
            let d = out.digits(c);
            let m = d[f.rank()];
            let e = &d[..f.rank()];
            let mut acc = partials[m][f.index(e)].truncate(o);
            let mut e2 = e.to_vec();
            for (s, kind) in f.slots.iter().enumerate() {
                for x in 0..dims[s] {
                    e2[s] = x;
                    let fx = &f.comps[f.index(&e2)];
                    match kind {
                        Slot::LowerSrc => acc.add_product(-1.0, &self.gamma_src.comps[(m * ns + e[s]) * ns + x], fx),
                        Slot::UpperSrc => acc.add_product(1.0, &self.gamma_src.comps[(m * ns + x) * ns + e[s]], fx),
                        Slot::LowerDst => acc.add_product(-1.0, &self.gamma_dst.comps[(m * nd + e[s]) * nd + x], fx),
                        Slot::UpperDst => acc.add_product(1.0, &self.gamma_dst.comps[(m * nd + x) * nd + e[s]], fx),
                    }
                }
                e2[s] = e[s];
            }
            out.comps[c] = acc;
        }
        Ok(out)
    }

    /// `tr_ḡ ∇∇F` over the two appended slots.
    pub fn laplacian(&self, f: &JetTensor) -> Result<JetTensor> {
        let r = f.rank();
        let d2 = self.derivative(&self.derivative(f)?)?;
        d2.trace_pair(r, r + 1, &self.src_inverse)
    }
}

/// Difference tensor `A = Γ^g - Γ^h` on one manifold as
/// `[LowerSrc, LowerSrc, UpperDst]`.
pub fn jet_difference(g: &JetMetric, h: &JetMetric) -> Result<JetTensor> {
    let gg = jet_christoffel(g)?;
    let gh = jet_christoffel(h)?;
    let mut a = gg.sub(&gh)?;
    a.slots[2] = Slot::UpperDst;
    Ok(a)
}

/// `V^γ = g^{αβ} A^γ_{αβ}`.
pub fn jet_v_field(g: &JetMetric, h: &JetMetric) -> Result<JetTensor> {
    jet_difference(g, h)?.trace_pair(0, 1, &g.inverse())
}

/// `Z^γ = g^{μα} g^{νβ} ∇_μ∇_ν A^γ_{αβ}` with mixed derivatives.
pub fn jet_z_field(g: &JetMetric, h: &JetMetric) -> Result<JetTensor> {
    let ctx = MapContext::identity(g, h)?;
    let a = jet_difference(g, h)?;
    // slots of ∇∇A: [α, β, γ, ν, μ]
    let d2 = ctx.derivative(&ctx.derivative(&a)?)?;
    let inv = g.inverse();
    let t = d2.trace_pair(1, 3, &inv)?; // [α, γ, μ]
    t.trace_pair(0, 2, &inv)
}

/// `dφ` of the identity map on `N`, `[LowerSrc, UpperDst]`.
pub fn d_identity(n: usize, order: usize) -> JetTensor {
    let mut t = JetTensor::zeros(n, n, vec![Slot::LowerSrc, Slot::UpperDst], order);
    for i in 0..n {
        t.comps[i * n + i] = Jet::constant(n, order, 1.0);
    }
    t
}

/// One line of the identity report.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityRow {
    pub name: &'static str,
    pub required_order: usize,
    /// `None` when the jet order is below `required_order`.
    pub max_residual: Option<f64>,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityReport {
    pub seed: u64,
    pub order: usize,
    pub rows: Vec<IdentityRow>,
}

impl IdentityReport {
    /// All evaluated identities within `tol` (rows skipped for order are ignored).
    pub fn passes(&self, tol: f64) -> bool {
        self.rows.iter().all(|r| r.max_residual.is_none_or(|v| v <= tol))
    }

    pub fn worst(&self) -> f64 {
        self.rows.iter().filter_map(|r| r.max_residual).fold(0.0, f64::max)
    }

    pub fn row(&self, name: &str) -> Option<&IdentityRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

impl fmt::Display for IdentityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<52} {:>6} {:>12} {:>7}",
            "identity", "order", "max_resid", "trials"
        )?;
        for r in &self.rows {
            match r.max_residual {
                Some(v) => writeln!(f, "{:<52} {:>6} {:>12.3e} {:>7}", r.name, r.required_order, v, r.trials)?,
                None => writeln!(
                    f,
                    "{:<52} {:>6} {:>12} {:>7}  insufficient order (jet order {} < {})",
                    r.name, r.required_order, "-", 0, self.order, r.required_order
                )?,
            }
        }
        Ok(())
    }
}

/// Identity names and the jet order each one needs.
pub const IDENTITIES: [(&str, usize); 15] = [
    ("mixed_derivative_of_d_id_is_minus_A", 1),
    ("levi_civita_minus_mixed_is_A_correction", 1),
    ("pulled_back_metric_is_parallel", 2),
    ("target_metric_along_map_is_parallel", 2),
    ("pullback_of_d_id_is_d_phi", 1),
    ("pullback_is_identity_for_identity_map", 0),
    ("trace_naturality_lower_pair", 1),
    ("trace_naturality_upper_pair", 1),
    ("derivative_commutes_with_pullback", 2),
    ("laplacian_commutes_with_pullback", 3),
    ("pullback_of_A_is_minus_hessian_of_phi", 2),
    ("pullback_of_V_is_minus_laplacian_of_phi", 2),
    ("pullback_of_laplacian_V_is_minus_bilaplacian_of_phi", 4),
    ("z_relation_free_of_fourth_derivatives", 5),
    ("commutator_vanishes_flat_affine", 2),
];

/// Runs every identity on `trials` seeded random jets in dimension 3.
pub fn verify_identities(seed: u64, order: usize, trials: usize) -> Result<IdentityReport> {
    verify_identities_in(3, seed, order, trials)
}

pub fn verify_identities_in(n: usize, seed: u64, order: usize, trials: usize) -> Result<IdentityReport> {
    if order < 1 {
        return Err(Error::OrderExhausted("identity checks need jets of order >= 1".into()));
    }
    let mut worst = vec![0.0f64; IDENTITIES.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let res = run_trial(n, order, &mut rng)?;
        for (w, r) in worst.iter_mut().zip(res) {
            if let Some(r) = r {
                *w = w.max(r);
            }
        }
    }
    let rows = IDENTITIES
        .iter()
        .zip(worst)
        .map(|(&(name, required_order), w)| IdentityRow {
            name,
            required_order,
            max_residual: (order >= required_order).then_some(w),
            trials,
        })
        .collect();
    Ok(IdentityReport { seed, order, rows })
}

fn run_trial(n: usize, order: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Option<f64>>> {
    let mut out = Vec::with_capacity(IDENTITIES.len());
    let ok = |req: usize| order >= req;
    // metrics g, h on N; map φ: M -> N; ḡ = φ^* g
    let g = JetMetric::random(n, order, rng);
    let h = JetMetric::random(n, order, rng);
    let phi = JetMap::random(n, order, rng);
    let f_mixed = JetTensor::random(n, n, vec![Slot::LowerSrc, Slot::LowerDst, Slot::UpperDst], order, rng);

    // ∇^{g,h} d id = -A
    out.push(if ok(1) {
        let ctx = MapContext::identity(&g, &h)?;
        let lhs = ctx.derivative(&d_identity(n, order))?; // [b, a, m]
        let a = jet_difference(&g, &h)?; // [m, b, a]
        let rhs = a.permute(&[1, 2, 0]).scale(-1.0);
        Some(lhs.residual(&relabel(&rhs, &lhs.slots))?)
    } else {
        None
    });

    // ∇^g F - ∇^{g,h} F = A-corrections on target slots
    out.push(if ok(1) {
        let f = JetTensor::random(n, n, vec![Slot::LowerSrc, Slot::UpperDst], order, rng);
        let lc = MapContext::identity(&g, &g)?.derivative(&f)?;
        let mixed = MapContext::identity(&g, &h)?.derivative(&f)?;
        let a = jet_difference(&g, &h)?;
        let o = lc.order().min(a.order());
        let mut corr = JetTensor::zeros(n, n, lc.slots.clone(), o);
        for c in 0..corr.comps.len() {
            let d = corr.digits(c); // [i, γ, m]
            let mut acc = Jet::zero(n, o);
            for x in 0..n {
                acc.add_product(1.0, a.get(&[d[2], x, d[1]]), f.get(&[d[0], x]));
            }
            corr.comps[c] = acc;
        }
        Some(lc.sub(&mixed)?.residual(&corr)?)
    } else {
        None
    });

    let gbar = if ok(1) { Some(pullback_metric(&g, &phi)?) } else { None };
    let map_ctx = match &gbar {
        Some(gb) if ok(2) => Some(MapContext::new(gb, &h, &phi)?),
        _ => None,
    };

    // ∇^{ḡ,h} ḡ = 0 and ∇^{ḡ,h}(h∘φ) = 0
    out.push(match (&map_ctx, &gbar) {
        (Some(ctx), Some(gb)) => {
            let d = ctx.derivative(gb.tensor())?;
            Some(d.max_abs() / 1f64.max(gb.tensor().max_abs()))
        }
        _ => None,
    });
    out.push(match &map_ctx {
        Some(ctx) => {
            let d = ctx.derivative(&ctx.dst_metric)?;
            Some(d.max_abs() / 1f64.max(ctx.dst_metric.max_abs()))
        }
        None => None,
    });

    // φ^*(d id) = dφ
    out.push(if ok(1) {
        let lhs = pullback(&d_identity(n, order), &phi)?;
        Some(lhs.residual(&phi.differential()?)?)
    } else {
        None
    });

    // id^* F = F
    out.push({
        let f = JetTensor::random(n, n, vec![Slot::LowerSrc, Slot::UpperDst], order, rng);
        let id = JetMap::identity(n, order);
        let lhs = pullback(&f, &id)?;
        Some(lhs.residual(&relabel(&f, &lhs.slots))?)
    });

    // tr^{ḡ} φ^*F = φ^*(tr^g F) and (h∘φ)-contraction of target slots
    out.push(match &gbar {
        Some(gb) => {
            let f = JetTensor::random(n, n, vec![Slot::LowerSrc, Slot::LowerSrc, Slot::UpperDst], order, rng);
            let lhs = pullback(&f, &phi)?.trace_pair(0, 1, &gb.inverse())?;
            let rhs = pullback(&f.trace_pair(0, 1, &g.inverse())?, &phi)?;
            Some(lhs.residual(&rhs)?)
        }
        None => None,
    });
    out.push(if ok(1) {
        let f = JetTensor::random(n, n, vec![Slot::LowerSrc, Slot::UpperDst, Slot::UpperDst], order, rng);
        let hd = relabel(h.tensor(), &[Slot::LowerDst, Slot::LowerDst]);
        let lhs = pullback(&f, &phi)?.trace_pair(1, 2, &compose_tensor(&hd, &phi))?;
        let rhs = pullback(&f.trace_pair(1, 2, &hd)?, &phi)?;
        Some(lhs.residual(&rhs)?)
    } else {
        None
    });

    let id_ctx = if ok(1) {
        Some(MapContext::identity(&g, &h)?)
    } else {
        None
    };

    // ∇^{ḡ,h} φ^*F = φ^*(∇^{g,h} F)
    out.push(match (&map_ctx, &id_ctx) {
        (Some(ctx), Some(ictx)) => {
            let lhs = ctx.derivative(&pullback(&f_mixed, &phi)?)?;
            let rhs = pullback(&ictx.derivative(&f_mixed)?, &phi)?;
            Some(lhs.residual(&rhs)?)
        }
        _ => None,
    });

    // Δ^{ḡ,h} φ^*F = φ^*(Δ^{g,h} F)
    out.push(match (&map_ctx, &id_ctx) {
        (Some(ctx), Some(ictx)) if ok(3) => {
            let lhs = ctx.laplacian(&pullback(&f_mixed, &phi)?)?;
            let rhs = pullback(&ictx.laplacian(&f_mixed)?, &phi)?;
            Some(lhs.residual(&rhs)?)
        }
        _ => None,
    });

    // φ^*A = -∇^{ḡ,h} dφ and φ^*V = -Δ^{ḡ,h} φ
    let hess_phi = match &map_ctx {
        Some(ctx) => Some(ctx.derivative(&phi.differential()?)?), // [i, α, m]
        None => None,
    };
    out.push(match &hess_phi {
        Some(hp) => {
            let pa = pullback(&jet_difference(&g, &h)?, &phi)?; // [i, j, α]
            let rhs = pa.permute(&[0, 2, 1]).scale(-1.0);
            Some(hp.residual(&relabel(&rhs, &hp.slots))?)
        }
        None => None,
    });
    let lap_phi = match (&map_ctx, &hess_phi) {
        (Some(ctx), Some(hp)) => Some(hp.trace_pair(0, 2, &ctx.src_inverse)?),
        _ => None,
    };
    out.push(match &lap_phi {
        Some(lp) => {
            let pv = pullback(&jet_v_field(&g, &h)?, &phi)?;
            Some(pv.residual(&lp.scale(-1.0))?)
        }
        None => None,
    });

    // k = 1: φ^*(Δ^{g,h} V) = -(Δ^{ḡ,h})² φ
    out.push(match (&map_ctx, &id_ctx, &lap_phi) {
        (Some(ctx), Some(ictx), Some(lp)) if ok(4) => {
            let lhs = pullback(&ictx.laplacian(&jet_v_field(&g, &h)?)?, &phi)?;
            let rhs = ctx.laplacian(lp)?.scale(-1.0);
            Some(lhs.residual(&rhs)?)
        }
        _ => None,
    });

    // Z relation: with ḡ and h fixed, φ^*Z + (Δ^{ḡ,h})²φ at the origin does
    // not change when φ is perturbed by a homogeneous quartic.
    out.push(if ok(5) {
        let gb = JetMetric::random(n, order, rng);
        let quartic: Vec<Jet> = (0..n).map(|_| Jet::random_homogeneous(n, order, 4, rng)).collect();
        let d0 = z_relation_defect(&gb, &h, &phi)?;
        let d1 = z_relation_defect(&gb, &h, &phi.perturbed(&quartic)?)?;
        let v0: Vec<f64> = d0.comps.iter().map(Jet::value).collect();
        let v1: Vec<f64> = d1.comps.iter().map(Jet::value).collect();
        let scale = v0.iter().chain(&v1).fold(1.0f64, |m, v| m.max(v.abs()));
        Some(v0.iter().zip(&v1).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale)
    } else {
        None
    });

    // flat constant metrics, affine map: ∇_a∇_b F = ∇_b∇_a F exactly
    out.push(if ok(2) {
        let flat = JetMetric::flat(n, order);
        let lin = phi.linear_part();
        let affine = JetMap::new(
            (0..n)
                .map(|a| {
                    let mut j = Jet::zero(n, order);
                    for i in 0..n {
                        j = j.add(&Jet::variable(n, order, i).scale(lin[(a, i)]));
                    }
                    j
                })
                .collect(),
        )?;
        let gb = pullback_metric(&flat, &affine)?;
        let ctx = MapContext::new(&gb, &flat, &affine)?;
        let d2 = ctx.derivative(&ctx.derivative(&pullback(&f_mixed, &affine)?)?)?;
        let r = d2.rank();
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        Some(d2.residual(&d2.permute(&perm))?)
    } else {
        None
    });

    Ok(out)
}

/// `φ^* Z^{g,h} + (Δ^{ḡ,h})² φ` with `g = (φ^{-1})^* ḡ`.
pub fn z_relation_defect(gbar: &JetMetric, h: &JetMetric, phi: &JetMap) -> Result<JetTensor> {
    let psi = phi.inverse()?;
    let g = pullback_metric(gbar, &psi)?;
    let z = pullback(&jet_z_field(&g, h)?, phi)?;
    let ctx = MapContext::new(gbar, h, phi)?;
    let hess = ctx.derivative(&phi.differential()?)?;
    let lap = hess.trace_pair(0, 2, &ctx.src_inverse)?;
    let bilap = ctx.laplacian(&lap)?;
    z.add(&bilap)
}

fn relabel(t: &JetTensor, slots: &[Slot]) -> JetTensor {
    JetTensor {
        slots: slots.to_vec(),
        ..t.clone()
    }
}
