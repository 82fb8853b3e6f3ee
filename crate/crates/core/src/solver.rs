//! Penalized LCNMF kernel.
//!
//! Minimizes
//!
//! ```text
//! L(C, S) = ‖X − CS‖²_F + α‖BCA − Y‖²_F + β‖FSD − Z‖²_F
//! ```
//!
//! over non-negative `C` (n×K) and `S` (K×p), alternating between the two
//! factors (sources first). Two block methods are available.
//!
//! [`Method::Multiplicative`] multiplies each factor by the ratio of the
//! negative to the positive part of its gradient:
//!
//! ```text
//! S ← S ⊙ (CᵀX + βFᵀZDᵀ) ⊘ (CᵀCS + βFᵀFSDDᵀ)
//! C ← C ⊙ (XSᵀ + αBᵀYAᵀ) ⊘ (CSSᵀ + αBᵀBCAAᵀ)
//! ```
//!
//! Because every matrix involved is non-negative, both positive gradient parts
//! are non-negative linear operators of the factor being updated and the
//! classical auxiliary-function argument carries over: the loss never
//! increases. An `eps_floor` in the denominators guards against division by
//! zero.
//!
//! [`Method::Anls`] minimizes the loss exactly over each factor in turn, which
//! is a non-negative least-squares problem. `B` only couples days of the same
//! month, so the concentration block splits into one small problem per month;
//! the source block is a single problem of size `K·p`. Each exact block step
//! also never increases the loss. When the monthly penalty is stiff compared
//! with the fit term, multiplicative steps barely move the concentrations
//! within a month, while exact block steps are unaffected by that imbalance.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::nnls::nnls_gram;

#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    /// n×K concentrations.
    pub c: Array2<f64>,
    /// K×p sources.
    pub s: Array2<f64>,
}

impl FactorPair {
    pub fn new(c: Array2<f64>, s: Array2<f64>) -> Self {
        FactorPair { c, s }
    }

    pub fn rank(&self) -> usize {
        self.s.nrows()
    }

    pub fn reconstruct(&self) -> Array2<f64> {
        self.c.dot(&self.s)
    }

    /// Largest deviation of a concentration row sum from one.
    pub fn max_c_row_sum_deviation(&self) -> f64 {
        max_row_sum_deviation(self.c.view())
    }

    /// Largest deviation of a source row sum from one.
    pub fn max_s_row_sum_deviation(&self) -> f64 {
        max_row_sum_deviation(self.s.view())
    }
}

pub fn max_row_sum_deviation(m: ArrayView2<f64>) -> f64 {
    m.rows()
        .into_iter()
        .map(|r| (r.sum() - 1.0).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Exact alternating non-negative least squares.
    #[default]
    Anls,
    /// Multiplicative updates.
    Multiplicative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub method: Method,
    pub alpha: f64,
    pub beta: f64,
    pub max_iters: usize,
    /// Per-iteration relative loss decrease below which an iteration counts
    /// as stalled.
    pub rel_tol: f64,
    /// Consecutive stalled iterations required to declare convergence.
    pub window: usize,
    pub eps_floor: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: Method::Anls,
            alpha: 3e-10,
            beta: 1.0,
            max_iters: 5000,
            rel_tol: 1e-8,
            window: 10,
            eps_floor: 1e-12,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        if !(self.eps_floor > 0.0) || !(self.rel_tol > 0.0) {
            return Err(Error::Config("eps_floor and rel_tol must be positive".into()));
        }
        if self.max_iters == 0 || self.window == 0 {
            return Err(Error::Config("max_iters and window must be positive".into()));
        }
        Ok(())
    }
}

/// The three loss terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    /// ‖X − CS‖²_F
    pub fit: f64,
    /// ‖BCA − Y‖²_F
    pub pen_c: f64,
    /// ‖FSD − Z‖²_F
    pub pen_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverResult {
    pub factors: FactorPair,
    /// Total loss at the initial point followed by the loss after every iteration.
    pub loss_trace: Vec<f64>,
    pub converged: bool,
    pub iters: usize,
    pub terms: LossTerms,
}

fn check_dims(x: ArrayView2<f64>, c: ArrayView2<f64>, s: ArrayView2<f64>, cons: &ConstraintSet) -> Result<()> {
    let (n, p) = x.dim();
    let (cn, k) = c.dim();
    let (sk, sp) = s.dim();
    if cn != n || sk != k || sp != p {
        return Err(Error::DimensionMismatch(format!(
            "X is {n}×{p}, C is {cn}×{k}, S is {sk}×{sp}"
        )));
    }
    cons.check_dims(n, k, p)
}

fn sq_norm(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Evaluates the penalized loss and its three terms.
pub fn loss(
    x: ArrayView2<f64>,
    c: ArrayView2<f64>,
    s: ArrayView2<f64>,
    cons: &ConstraintSet,
    alpha: f64,
    beta: f64,
) -> Result<LossTerms> {
    check_dims(x, c, s, cons)?;
    Ok(loss_unchecked(x, c, s, cons, alpha, beta))
}

fn loss_unchecked(
    x: ArrayView2<f64>,
    c: ArrayView2<f64>,
    s: ArrayView2<f64>,
    cons: &ConstraintSet,
    alpha: f64,
    beta: f64,
) -> LossTerms {
    let fit = sq_norm(&(&x - &c.dot(&s)));
    let pen_c = cons
        .monthly
        .as_ref()
        .map_or(0.0, |mc| sq_norm(&(mc.b.dot(&c).dot(&mc.a) - &mc.y)));
    let pen_s = cons
        .sources
        .as_ref()
        .map_or(0.0, |sc| sq_norm(&(sc.f.dot(&s).dot(&sc.d) - &sc.z)));
    LossTerms {
        total: fit + alpha * pen_c + beta * pen_s,
        fit,
        pen_c,
        pen_s,
    }
}

/// Constant parts of the update ratios, computed once per fit.
struct Kernel<'a> {
    x: ArrayView2<'a, f64>,
    cons: &'a ConstraintSet,
    alpha: f64,
    beta: f64,
    eps: f64,
    /// BᵀYAᵀ (n×K)
    byat: Option<Array2<f64>>,
    /// AAᵀ (K×K)
    aat: Option<Array2<f64>>,
    /// FᵀZDᵀ (K×p)
    fzdt: Option<Array2<f64>>,
    /// FᵀF (K×K)
    ftf: Option<Array2<f64>>,
    /// DDᵀ (p×p)
    ddt: Option<Array2<f64>>,
    /// Groups of days coupled through `B`, with the matching block of `BᵀB`.
    day_blocks: Vec<(Vec<usize>, Array2<f64>)>,
}

impl<'a> Kernel<'a> {
    fn new(x: ArrayView2<'a, f64>, cons: &'a ConstraintSet, alpha: f64, beta: f64, eps: f64) -> Self {
        let (byat, aat) = match &cons.monthly {
            Some(mc) if alpha != 0.0 => (
                Some(mc.b.t().dot(&mc.y).dot(&mc.a.t())),
                Some(mc.a.dot(&mc.a.t())),
            ),
            _ => (None, None),
        };
        let (fzdt, ftf, ddt) = match &cons.sources {
            Some(sc) if beta != 0.0 => (
                Some(sc.f.t().dot(&sc.z).dot(&sc.d.t())),
                Some(sc.f.t().dot(&sc.f)),
                Some(sc.d.dot(&sc.d.t())),
            ),
            _ => (None, None, None),
        };
        let day_blocks = match &cons.monthly {
            Some(mc) if alpha != 0.0 => coupled_days(mc.b.view()),
            _ => (0..x.nrows()).map(|i| (vec![i], Array2::zeros((1, 1)))).collect(),
        };
        Kernel {
            x,
            cons,
            alpha,
            beta,
            eps,
            byat,
            aat,
            fzdt,
            ftf,
            ddt,
            day_blocks,
        }
    }

    /// Exact minimizer over `S ≥ 0` for fixed `C`, warm-started at `s`.
    fn solve_s(&self, c: ArrayView2<f64>, s: ArrayView2<f64>) -> Array2<f64> {
        let (k, p) = s.dim();
        let ctc = c.t().dot(&c);
        let mut num = c.t().dot(&self.x);
        let coupled = match (&self.fzdt, &self.ftf, &self.ddt) {
            (Some(fzdt), Some(ftf), Some(ddt)) => {
                num.scaled_add(self.beta, fzdt);
                Some((ftf, ddt))
            }
            _ => None,
        };
        let mut out = Array2::zeros((k, p));
        match coupled {
            Some((ftf, ddt)) => {
                let idx = |kk: usize, h: usize| kk * p + h;
                let gram = DMatrix::from_fn(k * p, k * p, |r, q| {
                    let (k1, h1) = (r / p, r % p);
                    let (k2, h2) = (q / p, q % p);
                    let fit = if h1 == h2 { ctc[[k1, k2]] } else { 0.0 };
                    fit + self.beta * ftf[[k1, k2]] * ddt[[h1, h2]]
                });
                let rhs = DVector::from_fn(k * p, |r, _| num[[r / p, r % p]]);
                let start: Vec<f64> = (0..k * p).map(|r| s[[r / p, r % p]]).collect();
                let sol = nnls_gram(&gram, &rhs, &start);
                for kk in 0..k {
                    for h in 0..p {
                        out[[kk, h]] = sol[idx(kk, h)];
                    }
                }
            }
            None => {
                // columns decouple
                let gram = DMatrix::from_fn(k, k, |a, b| ctc[[a, b]]);
                for h in 0..p {
                    let rhs = DVector::from_fn(k, |r, _| num[[r, h]]);
                    let start: Vec<f64> = s.column(h).to_vec();
                    for (kk, v) in nnls_gram(&gram, &rhs, &start).into_iter().enumerate() {
                        out[[kk, h]] = v;
                    }
                }
            }
        }
        out
    }

    /// Exact minimizer over `C ≥ 0` for fixed `S`, warm-started at `c`.
    fn solve_c(&self, c: ArrayView2<f64>, s: ArrayView2<f64>) -> Array2<f64> {
        let k = s.nrows();
        let g = s.dot(&s.t());
        let mut num = self.x.dot(&s.t());
        let penalty = match (&self.byat, &self.aat) {
            (Some(byat), Some(aat)) => {
                num.scaled_add(self.alpha, byat);
                Some(aat)
            }
            _ => None,
        };
        let mut out = Array2::zeros(c.dim());
        for (days, btb) in &self.day_blocks {
            let d = days.len();
            let gram = DMatrix::from_fn(d * k, d * k, |r, q| {
                let (a, k1) = (r / k, r % k);
                let (b, k2) = (q / k, q % k);
                let fit = if a == b { g[[k1, k2]] } else { 0.0 };
                fit + penalty.map_or(0.0, |aat| self.alpha * btb[[a, b]] * aat[[k1, k2]])
            });
            let rhs = DVector::from_fn(d * k, |r, _| num[[days[r / k], r % k]]);
            let start: Vec<f64> = (0..d * k).map(|r| c[[days[r / k], r % k]]).collect();
            for (r, v) in nnls_gram(&gram, &rhs, &start).into_iter().enumerate() {
                out[[days[r / k], r % k]] = v;
            }
        }
        out
    }

    fn update_s(&self, c: ArrayView2<f64>, s: ArrayView2<f64>) -> Result<Array2<f64>> {
        let ct = c.t();
        let mut num = ct.dot(&self.x);
        let mut den = ct.dot(&c).dot(&s);
        if let (Some(fzdt), Some(ftf), Some(ddt)) = (&self.fzdt, &self.ftf, &self.ddt) {
            num.scaled_add(self.beta, fzdt);
            den.scaled_add(self.beta, &ftf.dot(&s).dot(ddt));
        }
        self.ratio_step(s, num, den, "S update")
    }

    fn update_c(&self, c: ArrayView2<f64>, s: ArrayView2<f64>) -> Result<Array2<f64>> {
        let st = s.t();
        let mut num = self.x.dot(&st);
        let mut den = c.dot(&s.dot(&st));
        if let (Some(byat), Some(aat), Some(mc)) = (&self.byat, &self.aat, &self.cons.monthly) {
            num.scaled_add(self.alpha, byat);
            let bc = mc.b.dot(&c);
            den.scaled_add(self.alpha, &mc.b.t().dot(&bc.dot(aat)));
        }
        self.ratio_step(c, num, den, "C update")
    }

    fn ratio_step(
        &self,
        current: ArrayView2<f64>,
        num: Array2<f64>,
        mut den: Array2<f64>,
        what: &'static str,
    ) -> Result<Array2<f64>> {
        let eps = self.eps;
        Zip::from(&mut den)
            .and(&current)
            .and(&num)
            .for_each(|d, &cur, &nu| *d = cur * nu / (*d + eps));
        if den.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFiniteEntry(what));
        }
        Ok(den)
    }
}

/// One multiplicative update of the sources.
pub fn update_s(
    x: ArrayView2<f64>,
    c: ArrayView2<f64>,
    s: ArrayView2<f64>,
    cons: &ConstraintSet,
    beta: f64,
    eps_floor: f64,
) -> Result<Array2<f64>> {
    check_dims(x, c, s, cons)?;
    Kernel::new(x, cons, 0.0, beta, eps_floor).update_s(c, s)
}

/// One multiplicative update of the concentrations.
pub fn update_c(
    x: ArrayView2<f64>,
    c: ArrayView2<f64>,
    s: ArrayView2<f64>,
    cons: &ConstraintSet,
    alpha: f64,
    eps_floor: f64,
) -> Result<Array2<f64>> {
    check_dims(x, c, s, cons)?;
    Kernel::new(x, cons, alpha, 0.0, eps_floor).update_c(c, s)
}

/// Analytic gradients `(∇_C L, ∇_S L)`.
pub fn gradients(
    x: ArrayView2<f64>,
    c: ArrayView2<f64>,
    s: ArrayView2<f64>,
    cons: &ConstraintSet,
    alpha: f64,
    beta: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    check_dims(x, c, s, cons)?;
    let residual = c.dot(&s) - x;
    let mut dc = residual.dot(&s.t()) * 2.0;
    let mut ds = c.t().dot(&residual) * 2.0;
    if let Some(mc) = &cons.monthly {
        let r = mc.b.dot(&c).dot(&mc.a) - &mc.y;
        dc.scaled_add(2.0 * alpha, &mc.b.t().dot(&r).dot(&mc.a.t()));
    }
    if let Some(sc) = &cons.sources {
        let r = sc.f.dot(&s).dot(&sc.d) - &sc.z;
        ds.scaled_add(2.0 * beta, &sc.f.t().dot(&r).dot(&sc.d.t()));
    }
    Ok((dc, ds))
}

/// Connected groups of columns of `b` (days sharing a nonzero row), each with
/// its block of `BᵀB`.
fn coupled_days(b: ArrayView2<f64>) -> Vec<(Vec<usize>, Array2<f64>)> {
    let n = b.ncols();
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for row in b.rows() {
        let mut first = None;
        for (i, &v) in row.iter().enumerate() {
            if v != 0.0 {
                match first {
                    None => first = Some(i),
                    Some(f) => {
                        let (ra, rb) = (root(&mut parent, f), root(&mut parent, i));
                        parent[ra.max(rb)] = ra.min(rb);
                    }
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = std::collections::BTreeMap::new();
    for i in 0..n {
        let r = root(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    groups
        .into_values()
        .map(|days| {
            let cols = b.select(ndarray::Axis(1), &days);
            let btb = cols.t().dot(&cols);
            (days, btb)
        })
        .collect()
}

/// Initial factors: every source row is flat `1/p`; every concentration row
/// is uniform on the simplex (normalized unit exponentials).
pub fn init_factors(n: usize, k: usize, p: usize, seed: u64) -> FactorPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = Array2::zeros((n, k));
    for mut row in c.rows_mut() {
        for v in row.iter_mut() {
            let e: f64 = Exp1.sample(&mut rng);
            *v = e;
        }
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    let s = Array2::from_elem((k, p), 1.0 / p as f64);
    FactorPair { c, s }
}

/// Loss changes below this are floating-point noise around an exact fit.
const ROUNDOFF_LOSS: f64 = 1e-20;

/// Tracks the stopping rule shared by the factorization and the projection.
#[derive(Debug)]
pub(crate) struct StallCounter {
    rel_tol: f64,
    window: usize,
    stalled: usize,
}

impl StallCounter {
    pub(crate) fn new(rel_tol: f64, window: usize) -> Self {
        StallCounter {
            rel_tol,
            window,
            stalled: 0,
        }
    }

    /// Records one step; returns true once `window` consecutive steps have
    /// decreased the loss by less than `rel_tol` relative.
    pub(crate) fn push(&mut self, prev: f64, next: f64) -> bool {
        let drop = prev - next;
        let decrease = if prev > 0.0 { drop / prev } else { 0.0 };
        if decrease < self.rel_tol || drop.abs() < ROUNDOFF_LOSS {
            self.stalled += 1;
        } else {
            self.stalled = 0;
        }
        self.stalled >= self.window
    }
}

/// Alternates source and concentration updates until the loss stalls.
pub fn fit(
    x: ArrayView2<f64>,
    cons: &ConstraintSet,
    config: &SolverConfig,
    init: FactorPair,
) -> Result<SolverResult> {
    config.validate()?;
    check_dims(x, init.c.view(), init.s.view(), cons)?;
    if init.c.iter().chain(init.s.iter()).any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::NonFiniteEntry("initial factors"));
    }
    let kernel = Kernel::new(x, cons, config.alpha, config.beta, config.eps_floor);
    let FactorPair { mut c, mut s } = init;

    let mut terms = loss_unchecked(x, c.view(), s.view(), cons, config.alpha, config.beta);
    if !terms.total.is_finite() {
        return Err(Error::Diverged { iter: 0, loss: terms.total });
    }
    let mut trace = Vec::with_capacity(config.max_iters.min(10_000) + 1);
    trace.push(terms.total);
    let mut stall = StallCounter::new(config.rel_tol, config.window);
    let mut converged = false;
    let mut iters = 0;
    while iters < config.max_iters {
        match config.method {
            Method::Multiplicative => {
                s = kernel.update_s(c.view(), s.view())?;
                c = kernel.update_c(c.view(), s.view())?;
            }
            Method::Anls => {
                s = kernel.solve_s(c.view(), s.view());
                c = kernel.solve_c(c.view(), s.view());
            }
        }
        iters += 1;
        let next = loss_unchecked(x, c.view(), s.view(), cons, config.alpha, config.beta);
        if !next.total.is_finite() {
            return Err(Error::Diverged {
                iter: iters,
                loss: next.total,
            });
        }
        let prev = terms.total;
        terms = next;
        trace.push(terms.total);
        if stall.push(prev, terms.total) {
            converged = true;
            break;
        }
    }
    Ok(SolverResult {
        factors: FactorPair { c, s },
        loss_trace: trace,
        converged,
        iters,
        terms,
    })
}
