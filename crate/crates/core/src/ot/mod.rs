//! Optimal transport between basis sets.
//!
//! A layer's `B` basis matrices are treated as `B` equally weighted points;
//! the ground cost between two points is the squared Euclidean distance of
//! the flattened matrices. [`exact_emd`] solves the transport LP exactly and
//! [`sinkhorn`] solves its entropic relaxation by alternating row/column
//! scaling.

mod assignment;
mod flow;

pub use assignment::hungarian;

use thiserror::Error;

use crate::numkernel::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OtError {
    #[error("basis shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("cost matrix is {rows}×{cols} but marginals have lengths {r} and {c}")]
    MarginalLength { rows: usize, cols: usize, r: usize, c: usize },
    #[error("marginal masses differ: {0} vs {1}")]
    MarginalMismatch(f64, f64),
    #[error("marginals must be non-negative and finite")]
    NegativeMass,
    #[error("cost entries must be non-negative and finite")]
    InvalidCost,
    #[error("sinkhorn lambda must be positive and finite, got {0}")]
    InvalidLambda(f64),
}

pub type Result<T> = std::result::Result<T, OtError>;

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub m: Tensor,
    pub provenance: String,
}

impl CostMatrix {
    pub fn new(m: Tensor, provenance: impl Into<String>) -> Result<Self> {
        if m.shape().len() != 2 || !m.data().iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(OtError::InvalidCost);
        }
        Ok(Self {
            m,
            provenance: provenance.into(),
        })
    }

    pub fn rows(&self) -> usize {
        self.m.rows()
    }

    pub fn cols(&self) -> usize {
        self.m.cols()
    }
}

/// A coupling `P` with its marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub p: Tensor,
    pub r: Vec<f64>,
    pub c: Vec<f64>,
}

impl TransportPlan {
    /// Largest absolute deviation of the row and column sums from `r` and `c`.
    pub fn marginal_violation(&self) -> f64 {
        let (n, m) = (self.p.rows(), self.p.cols());
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let s: f64 = self.p.row(i).iter().sum();
            worst = worst.max((s - self.r[i]).abs());
        }
        for j in 0..m {
            let s: f64 = (0..n).map(|i| self.p.get(i, j)).sum();
            worst = worst.max((s - self.c[j]).abs());
        }
        worst
    }

    pub fn cost(&self, m: &CostMatrix) -> f64 {
        self.p.data().iter().zip(m.m.data()).map(|(p, c)| p * c).sum()
    }

    /// `h(P) = −Σ p log p` with `0 log 0 = 0`.
    pub fn entropy(&self) -> f64 {
        -self.p.data().iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }
}

pub fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Squared Euclidean cost between two basis sets given as lists of equally
/// shaped tensors.
pub fn basis_cost_matrix(vk: &[Tensor], vj: &[Tensor]) -> Result<CostMatrix> {
    let shape = vk.first().or(vj.first()).map(|t| t.shape().to_vec()).unwrap_or_default();
    for t in vk.iter().chain(vj) {
        if t.shape() != shape.as_slice() {
            return Err(OtError::ShapeMismatch(shape, t.shape().to_vec()));
        }
    }
    let dim = shape.iter().product();
    let flat = |v: &[Tensor]| v.iter().flat_map(|t| t.data().iter().copied()).collect::<Vec<f64>>();
    let m = sq_dists(&flat(vk), &flat(vj), dim);
    CostMatrix::new(Tensor::new(vec![vk.len(), vj.len()], m).expect("sized"), "squared euclidean")
}

/// Pairwise squared distances between the rows of `a` and `b` (each `dim` wide).
pub fn sq_dists(a: &[f64], b: &[f64], dim: usize) -> Vec<f64> {
    let (n, m) = (a.len() / dim.max(1), b.len() / dim.max(1));
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let ai = &a[i * dim..(i + 1) * dim];
        for j in 0..m {
            out.push(sq_dist(ai, &b[j * dim..(j + 1) * dim]));
        }
    }
    out
}

/// `‖a − b‖²` with four independent accumulators so the loop vectorizes;
/// the summation order is still fixed.
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| (x - y) * (x - y)).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            let d = x[k] - y[k];
            acc[k] += d * d;
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn check_marginals(r: &[f64], c: &[f64], m: &CostMatrix) -> Result<()> {
    if r.len() != m.rows() || c.len() != m.cols() {
        return Err(OtError::MarginalLength {
            rows: m.rows(),
            cols: m.cols(),
            r: r.len(),
            c: c.len(),
        });
    }
    if r.iter().chain(c).any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(OtError::NegativeMass);
    }
    let (sr, sc): (f64, f64) = (r.iter().sum(), c.iter().sum());
    if (sr - sc).abs() > 1e-9 {
        return Err(OtError::MarginalMismatch(sr, sc));
    }
    Ok(())
}

/// Exact earth mover's distance `min_{P ∈ U(r,c)} ⟨P, M⟩`.
///
/// Uniform square instances are solved as an assignment problem (an optimal
/// plan is a permutation scaled by `1/n`); anything else goes through the
/// general transportation LP.
pub fn exact_emd(r: &[f64], c: &[f64], m: &CostMatrix) -> Result<(f64, TransportPlan)> {
    check_marginals(r, c, m)?;
    let (n, k) = (m.rows(), m.cols());
    let is_uniform = |v: &[f64]| v.iter().all(|&x| (x - v[0]).abs() <= 1e-15);
    let p = if n == k && n > 0 && is_uniform(r) && is_uniform(c) {
        let assign = hungarian(m.m.data(), n);
        let mut p = vec![0.0; n * n];
        for (i, &j) in assign.iter().enumerate() {
            p[i * n + j] = r[i];
        }
        p
    } else {
        flow::transport_lp(r, c, m.m.data())
    };
    let plan = TransportPlan {
        p: Tensor::new(vec![n, k], p).expect("sized"),
        r: r.to_vec(),
        c: c.to_vec(),
    };
    Ok((plan.cost(m), plan))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    pub lambda: f64,
    pub max_iters: usize,
    /// Stop once the largest row-marginal deviation drops below this
    /// (columns are exact after each column update).
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            max_iters: 1000,
            tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SinkhornResult {
    /// Transport cost `⟨P, M⟩`.
    pub distance: f64,
    /// `h(P)`; the regularized objective is `distance − entropy / λ`.
    pub entropy: f64,
    pub plan: TransportPlan,
    pub iterations: usize,
    pub converged: bool,
    pub log_domain: bool,
}

impl SinkhornResult {
    pub fn objective(&self, lambda: f64) -> f64 {
        self.distance - self.entropy / lambda
    }
}

/// Entropy-regularized transport by Sinkhorn scaling.
///
/// Switches to log-domain updates when `λ·max(M) > 500`. When `max_iters`
/// is reached the iterate with the smallest marginal violation is used and
/// `converged` is false. Either way the plan is finally projected onto the
/// transport polytope, so it is always feasible and its cost never drops
/// below the exact optimum.
pub fn sinkhorn(r: &[f64], c: &[f64], m: &CostMatrix, cfg: &SinkhornConfig) -> Result<SinkhornResult> {
    if !(cfg.lambda > 0.0 && cfg.lambda.is_finite()) {
        return Err(OtError::InvalidLambda(cfg.lambda));
    }
    check_marginals(r, c, m)?;
    let max_cost = m.m.data().iter().cloned().fold(0.0, f64::max);
    let log_domain = cfg.lambda * max_cost > 500.0;
    let (p, iterations, converged) = if log_domain {
        sinkhorn_log(r, c, m, cfg)
    } else {
        sinkhorn_plain(r, c, m, cfg)
    };
    let p = round_to_polytope(p, r, c);
    let plan = TransportPlan {
        p: Tensor::new(vec![m.rows(), m.cols()], p).expect("sized"),
        r: r.to_vec(),
        c: c.to_vec(),
    };
    Ok(SinkhornResult {
        distance: plan.cost(m),
        entropy: plan.entropy(),
        plan,
        iterations,
        converged,
        log_domain,
    })
}

/// Make a nonnegative matrix satisfy the marginals exactly: shrink rows
/// that carry too much mass, then columns, then add the missing mass as a
/// rank-one correction. Moves at most as much mass as the violation.
fn round_to_polytope(mut p: Vec<f64>, r: &[f64], c: &[f64]) -> Vec<f64> {
    let (n, k) = (r.len(), c.len());
    for i in 0..n {
        let row = &mut p[i * k..(i + 1) * k];
        let s: f64 = row.iter().sum();
        if s > r[i] {
            let x = r[i] / s;
            row.iter_mut().for_each(|v| *v *= x);
        }
    }
    let mut col = vec![0.0; k];
    for i in 0..n {
        for (acc, v) in col.iter_mut().zip(&p[i * k..(i + 1) * k]) {
            *acc += v;
        }
    }
    let y: Vec<f64> = col.iter().zip(c).map(|(&s, &cj)| if s > cj { cj / s } else { 1.0 }).collect();
    for i in 0..n {
        for (v, yj) in p[i * k..(i + 1) * k].iter_mut().zip(&y) {
            *v *= yj;
        }
    }
    let err_r: Vec<f64> = (0..n).map(|i| (r[i] - p[i * k..(i + 1) * k].iter().sum::<f64>()).max(0.0)).collect();
    let err_c: Vec<f64> = (0..k).map(|j| (c[j] - (0..n).map(|i| p[i * k + j]).sum::<f64>()).max(0.0)).collect();
    let total: f64 = err_c.iter().sum();
    if total > 0.0 {
        for i in 0..n {
            for j in 0..k {
                p[i * k + j] += err_r[i] * err_c[j] / total;
            }
        }
    }
    p
}

fn sinkhorn_plain(r: &[f64], c: &[f64], m: &CostMatrix, cfg: &SinkhornConfig) -> (Vec<f64>, usize, bool) {
    let (n, k) = (m.rows(), m.cols());
    let kern: Vec<f64> = m.m.data().iter().map(|&x| (-cfg.lambda * x).exp()).collect();
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; k];
    let mut kv = vec![0.0; n];
    let mut best = (f64::INFINITY, u.clone(), v.clone());
    let mut iters = 0;
    let mut converged = false;
    while iters < cfg.max_iters {
        iters += 1;
        for i in 0..n {
            let s: f64 = kern[i * k..(i + 1) * k].iter().zip(&v).map(|(a, b)| a * b).sum();
            u[i] = if r[i] == 0.0 { 0.0 } else { r[i] / s };
        }
        for j in 0..k {
            let s: f64 = (0..n).map(|i| kern[i * k + j] * u[i]).sum();
            v[j] = if c[j] == 0.0 { 0.0 } else { c[j] / s };
        }
        for i in 0..n {
            kv[i] = kern[i * k..(i + 1) * k].iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let err = (0..n).map(|i| (u[i] * kv[i] - r[i]).abs()).fold(0.0, f64::max);
        if err < best.0 {
            best = (err, u.clone(), v.clone());
        }
        if err < cfg.tol {
            converged = true;
            break;
        }
        if !err.is_finite() {
            break;
        }
    }
    let (_, u, v) = best;
    let mut p = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k {
            p[i * k + j] = u[i] * kern[i * k + j] * v[j];
        }
    }
    (p, iters, converged)
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + xs.map(|x| (x - mx).exp()).sum::<f64>().ln()
}

fn sinkhorn_log(r: &[f64], c: &[f64], m: &CostMatrix, cfg: &SinkhornConfig) -> (Vec<f64>, usize, bool) {
    let (n, k) = (m.rows(), m.cols());
    let neg: Vec<f64> = m.m.data().iter().map(|&x| -cfg.lambda * x).collect();
    let log_r: Vec<f64> = r.iter().map(|x| x.ln()).collect();
    let log_c: Vec<f64> = c.iter().map(|x| x.ln()).collect();
    let mut lu = vec![0.0; n];
    let mut lv = vec![0.0; k];
    let mut best = (f64::INFINITY, lu.clone(), lv.clone());
    let mut iters = 0;
    let mut converged = false;
    while iters < cfg.max_iters {
        iters += 1;
        for i in 0..n {
            lu[i] = log_r[i] - log_sum_exp((0..k).map(|j| neg[i * k + j] + lv[j]));
        }
        for j in 0..k {
            lv[j] = log_c[j] - log_sum_exp((0..n).map(|i| neg[i * k + j] + lu[i]));
        }
        let err = (0..n)
            .map(|i| {
                let row: f64 = (0..k).map(|j| (lu[i] + neg[i * k + j] + lv[j]).exp()).sum();
                (row - r[i]).abs()
            })
            .fold(0.0, f64::max);
        if err < best.0 {
            best = (err, lu.clone(), lv.clone());
        }
        if err < cfg.tol {
            converged = true;
            break;
        }
        if err.is_nan() {
            break;
        }
    }
    let (_, lu, lv) = best;
    let mut p = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k {
            p[i * k + j] = (lu[i] + neg[i * k + j] + lv[j]).exp();
        }
    }
    (p, iters, converged)
}

/// `∂⟨P, M⟩ / ∂M` with the plan held fixed: the plan itself.
pub fn sinkhorn_grad_cost(plan: &TransportPlan) -> Tensor {
    plan.p.clone()
}

/// Chain a cost-matrix gradient through the squared Euclidean ground cost:
/// `∂/∂a_i = Σ_j G_ij · 2 (a_i − b_j) = 2 (Σ_j G_ij) a_i − 2 Σ_j G_ij b_j`
/// for flattened rows of `a`, `b`.
pub fn chain_sq_euclidean(grad_m: &Tensor, a: &[f64], b: &[f64], dim: usize) -> Vec<f64> {
    let (n, k) = (grad_m.rows(), grad_m.cols());
    let mut out = vec![0.0; n * dim];
    for i in 0..n {
        let gi = grad_m.row(i);
        let oi = &mut out[i * dim..(i + 1) * dim];
        for (j, &w) in gi.iter().enumerate().take(k) {
            if w == 0.0 {
                continue;
            }
            for (o, &y) in oi.iter_mut().zip(&b[j * dim..(j + 1) * dim]) {
                *o -= w * y;
            }
        }
        let s: f64 = gi.iter().sum();
        for (o, &x) in oi.iter_mut().zip(&a[i * dim..(i + 1) * dim]) {
            *o = 2.0 * (s * x + *o);
        }
    }
    out
}

/// Sinkhorn comparison of two basis sets.
#[derive(Debug, Clone)]
pub struct BasisDistance {
    /// Transport cost `⟨P, M⟩`.
    pub cost: f64,
    /// Regularized objective `⟨P, M⟩ − h(P)/λ`.
    pub objective: f64,
    /// Envelope gradient with respect to the rows of `a`. It is the exact
    /// gradient of `objective` at convergence and an approximation for `cost`.
    pub grad: Vec<f64>,
}

/// Compare two stacked basis sets (`B` rows of `dim` values each, uniform
/// marginals, squared Euclidean ground cost).
pub fn basis_distance(a: &[f64], b: &[f64], dim: usize, cfg: &SinkhornConfig) -> Result<BasisDistance> {
    if a.len() != b.len() || dim == 0 || !a.len().is_multiple_of(dim) {
        return Err(OtError::ShapeMismatch(vec![a.len()], vec![b.len()]));
    }
    let n = a.len() / dim;
    let cost = CostMatrix::new(Tensor::new(vec![n, n], sq_dists(a, b, dim)).expect("sized"), "squared euclidean")?;
    let w = uniform(n);
    let res = sinkhorn(&w, &w, &cost, cfg)?;
    let grad = chain_sq_euclidean(&sinkhorn_grad_cost(&res.plan), a, b, dim);
    Ok(BasisDistance {
        cost: res.distance,
        objective: res.objective(cfg.lambda),
        grad,
    })
}
