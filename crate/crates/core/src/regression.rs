//! Softmax regression with an exponential-mass penalty:
//!
//! ```text
//! u(x) = exp(Ax)        α(x) = <u(x), 1>        f(x) = u(x) / α(x)
//! c(x) = f(x) - b
//! L(x) = 0.5 ||c(x)||² + λ ||exp(Ax)||₁ + 0.5 ||diag(w) A x||²
//! ```
//!
//! Gradient and Hessian are analytic. Each Hessian is `Aᵀ (B(x) + W²) A`,
//! assembled one term at a time so each term can be checked on its own.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

/// Largest `log α` for which `α = exp(log α)` is still finite.
const MAX_LOG_MASS: f64 = 709.0;

#[derive(Debug, Error, PartialEq)]
pub enum RegressionError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("Hessian is singular even after ridge damping at iteration {0}")]
    SingularHessian(usize),
    #[error("no convergence after {iterations} iterations (grad norm {grad_norm:e})")]
    MaxIterExceeded { iterations: usize, grad_norm: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionProblem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub w: DVector<f64>,
    /// Target lower bound on the Hessian spectrum.
    pub l: f64,
    /// Radius with `||A|| <= R`.
    pub radius: f64,
    /// Multiplier on the exponential-mass term; 1 gives the plain loss.
    pub sparse_weight: f64,
}

pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    a.clone().singular_values().max()
}

pub fn sigma_min(a: &DMatrix<f64>) -> f64 {
    a.clone().singular_values().min()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(h: &DMatrix<f64>) -> f64 {
    h.clone().symmetric_eigenvalues().min()
}

impl RegressionProblem {
    pub fn new(
        a: DMatrix<f64>,
        b: DVector<f64>,
        w: DVector<f64>,
        l: f64,
        radius: f64,
    ) -> Result<Self, RegressionError> {
        let n = a.nrows();
        if n == 0 || a.ncols() == 0 {
            return Err(RegressionError::InvalidProblem("A must be non-empty".into()));
        }
        if b.len() != n || w.len() != n {
            return Err(RegressionError::InvalidProblem(format!(
                "A has {n} rows but b has {} and w has {}",
                b.len(),
                w.len()
            )));
        }
        if a.iter().chain(b.iter()).chain(w.iter()).any(|v| !v.is_finite()) {
            return Err(RegressionError::InvalidProblem("non-finite input".into()));
        }
        if b.iter().any(|&v| v < 0.0) || b.sum() > 1.0 + 1e-12 {
            return Err(RegressionError::InvalidProblem("need b >= 0 and ||b||_1 <= 1".into()));
        }
        if w.iter().any(|&v| v <= 0.0) {
            return Err(RegressionError::InvalidProblem("weights must be positive".into()));
        }
        if !(l > 0.0) {
            return Err(RegressionError::InvalidProblem("l must be positive".into()));
        }
        let norm = spectral_norm(&a);
        if norm > radius * (1.0 + 1e-12) {
            return Err(RegressionError::InvalidProblem(format!(
                "||A|| = {norm} exceeds R = {radius}"
            )));
        }
        Ok(Self {
            a,
            b,
            w,
            l,
            radius,
            sparse_weight: 1.0,
        })
    }

    pub fn with_sparse_weight(mut self, lambda: f64) -> Self {
        self.sparse_weight = lambda;
        self
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn d(&self) -> usize {
        self.a.ncols()
    }

    /// `200 exp(R²) + l / σ_min(A)²`.
    pub fn pd_weight_floor(&self) -> f64 {
        let s = sigma_min(&self.a);
        200.0 * (self.radius * self.radius).exp() + self.l / (s * s)
    }

    /// `20 + l / σ_min(A)²`, the weaker floor that only promises `H ⪰ l I`.
    pub fn weak_pd_weight_floor(&self) -> f64 {
        let s = sigma_min(&self.a);
        20.0 + self.l / (s * s)
    }

    pub fn pd_condition_holds(&self) -> bool {
        let floor = self.pd_weight_floor();
        self.w.iter().all(|wi| wi * wi >= floor)
    }

    /// Gaussian `A` rescaled to spectral norm `radius`, random `b` on the
    /// simplex scaled to mass in `[0.5, 1]`, and weights placed at
    /// `w_i² = floor · (1 + U(0, 0.5))` for the given floor.
    pub fn random(n: usize, d: usize, radius: f64, l: f64, seed: u64, floor: WeightFloor) -> Self {
        assert!(n >= d, "need n >= d for a full-column-rank A");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = spectral_norm(&a);
        a *= radius / norm;
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let mass = rng.random_range(0.5..1.0);
        let total: f64 = raw.iter().sum();
        let b = DVector::from_iterator(n, raw.iter().map(|v| mass * v / total));
        let mut p = Self {
            a,
            b,
            w: DVector::from_element(n, 1.0),
            l,
            radius,
            sparse_weight: 1.0,
        };
        let base = match floor {
            WeightFloor::Strong => p.pd_weight_floor(),
            WeightFloor::Weak => p.weak_pd_weight_floor(),
            WeightFloor::Fixed(v) => v,
        };
        p.w = DVector::from_fn(n, |_, _| (base * (1.0 + rng.random_range(0.0..0.5))).sqrt());
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightFloor {
    /// `200 exp(R²) + l/σ_min²`.
    Strong,
    /// `20 + l/σ_min²`.
    Weak,
    /// Explicit `w_i²` base.
    Fixed(f64),
}

/// Intermediate quantities at one point.
#[derive(Debug, Clone)]
struct Eval {
    z: DVector<f64>,
    u: DVector<f64>,
    alpha: f64,
    f: DVector<f64>,
    c: DVector<f64>,
}

fn evaluate(p: &RegressionProblem, x: &DVector<f64>) -> Result<Eval, RegressionError> {
    if x.len() != p.d() || x.iter().any(|v| !v.is_finite()) {
        return Err(RegressionError::NonFinite(format!(
            "x must be a finite vector of length {}",
            p.d()
        )));
    }
    let z = &p.a * x;
    let m = z.max();
    let shifted_sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
    let log_alpha = m + shifted_sum.ln();
    if log_alpha > MAX_LOG_MASS {
        return Err(RegressionError::NonFinite(format!(
            "exp mass e^{log_alpha:.1} overflows"
        )));
    }
    let f = z.map(|v| (v - log_alpha).exp());
    let u = z.map(f64::exp);
    let c = &f - &p.b;
    Ok(Eval {
        alpha: log_alpha.exp(),
        z,
        u,
        f,
        c,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Loss {
    pub exp: f64,
    pub sparse: f64,
    pub reg: f64,
    pub total: f64,
}

pub fn loss(p: &RegressionProblem, x: &DVector<f64>) -> Result<Loss, RegressionError> {
    let e = evaluate(p, x)?;
    let exp = 0.5 * e.c.norm_squared();
    let sparse = p.sparse_weight * e.alpha;
    let reg = 0.5 * e.z.component_mul(&p.w).norm_squared();
    Ok(Loss {
        exp,
        sparse,
        reg,
        total: exp + sparse + reg,
    })
}

/// `α(x) = ||exp(Ax)||₁`.
pub fn exp_mass(p: &RegressionProblem, x: &DVector<f64>) -> Result<f64, RegressionError> {
    Ok(evaluate(p, x)?.alpha)
}

/// `f(x) = exp(Ax) / α(x)`.
pub fn softmax(p: &RegressionProblem, x: &DVector<f64>) -> Result<DVector<f64>, RegressionError> {
    Ok(evaluate(p, x)?.f)
}

/// Gradient of each loss term, in `(exp, sparse, reg)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTerms {
    pub exp: DVector<f64>,
    pub sparse: DVector<f64>,
    pub reg: DVector<f64>,
}

impl GradientTerms {
    pub fn total(&self) -> DVector<f64> {
        &self.exp + &self.sparse + &self.reg
    }
}

pub fn gradient_terms(p: &RegressionProblem, x: &DVector<f64>) -> Result<GradientTerms, RegressionError> {
    let e = evaluate(p, x)?;
    let at = p.a.transpose();
    // d L_exp / dz = (diag(f) - f fᵀ) c
    let fc = e.f.dot(&e.c);
    let v = e.f.component_mul(&e.c) - &e.f * fc;
    let w2 = p.w.component_mul(&p.w);
    Ok(GradientTerms {
        exp: &at * v,
        sparse: &at * (&e.u * p.sparse_weight),
        reg: &at * w2.component_mul(&e.z),
    })
}

pub fn gradient(p: &RegressionProblem, x: &DVector<f64>) -> Result<DVector<f64>, RegressionError> {
    Ok(gradient_terms(p, x)?.total())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HessianTerms {
    pub exp: DMatrix<f64>,
    pub sparse: DMatrix<f64>,
    pub reg: DMatrix<f64>,
}

impl HessianTerms {
    pub fn total(&self) -> DMatrix<f64> {
        symmetrize(&self.exp + &self.sparse + &self.reg)
    }
}

fn symmetrize(h: DMatrix<f64>) -> DMatrix<f64> {
    (&h + h.transpose()) * 0.5
}

/// `B(x)` for the softmax term, with `P = diag(f) - f fᵀ`:
/// `P² + diag(c) P - (fᵀc) P - f (Pc)ᵀ`.
fn softmax_curvature(e: &Eval) -> DMatrix<f64> {
    let n = e.f.len();
    let p = DMatrix::from_diagonal(&e.f) - &e.f * e.f.transpose();
    let pc = &p * &e.c;
    let fc = e.f.dot(&e.c);
    let mut b = &p * &p;
    for r in 0..n {
        for col in 0..n {
            b[(r, col)] += e.c[r] * p[(r, col)] - fc * p[(r, col)] - e.f[r] * pc[col];
        }
    }
    symmetrize(b)
}

pub fn hessian_terms(p: &RegressionProblem, x: &DVector<f64>) -> Result<HessianTerms, RegressionError> {
    let e = evaluate(p, x)?;
    let at = p.a.transpose();
    let b_exp = softmax_curvature(&e);
    let scaled = |diag: &DVector<f64>| {
        let mut m = p.a.clone();
        for (mut row, s) in m.row_iter_mut().zip(diag.iter()) {
            row *= *s;
        }
        symmetrize(&at * m)
    };
    Ok(HessianTerms {
        exp: symmetrize(&at * b_exp * &p.a),
        sparse: scaled(&(&e.u * p.sparse_weight)),
        reg: scaled(&p.w.component_mul(&p.w)),
    })
}

pub fn hessian(p: &RegressionProblem, x: &DVector<f64>) -> Result<DMatrix<f64>, RegressionError> {
    Ok(hessian_terms(p, x)?.total())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzCheck {
    /// `||H(x) - H(y)|| / ||x - y||`.
    pub ratio: f64,
    /// `n² exp(40 R²)`; may be `inf`.
    pub bound: f64,
    pub holds: bool,
}

pub fn check_hessian_lipschitz(
    p: &RegressionProblem,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<LipschitzCheck, RegressionError> {
    let dist = (x - y).norm();
    let n = p.n() as f64;
    let bound = n * n * (40.0 * p.radius * p.radius).exp();
    if dist == 0.0 {
        return Ok(LipschitzCheck { ratio: 0.0, bound, holds: true });
    }
    let diff = hessian(p, x)? - hessian(p, y)?;
    let spec = diff.symmetric_eigenvalues().amax();
    let ratio = spec / dist;
    Ok(LipschitzCheck {
        ratio,
        bound,
        holds: ratio <= bound,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverState {
    pub iter: usize,
    pub x: Vec<f64>,
    pub loss: f64,
    pub grad_norm: f64,
    pub min_eig: f64,
    /// The step used the ridge-damped Hessian.
    pub damped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverTrajectory {
    pub states: Vec<SolverState>,
    pub converged: bool,
}

impl SolverTrajectory {
    pub fn last(&self) -> &SolverState {
        self.states.last().expect("trajectory has the initial state")
    }

    pub fn iterations(&self) -> usize {
        self.last().iter
    }

    pub fn solution(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.last().x)
    }

    pub fn grad_norm_strictly_decreasing(&self) -> bool {
        self.states.windows(2).all(|w| w[1].grad_norm < w[0].grad_norm)
    }
}

/// Newton iteration `x ← x - H⁻¹ g` with the exact Hessian, stopping once
/// `||g|| <= tol`. A Hessian Cholesky cannot factor is retried with
/// `H + λI`, `λ = 1e-8 · tr(H)/d`, and the step is marked damped.
pub fn newton_solve(
    p: &RegressionProblem,
    x0: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<SolverTrajectory, RegressionError> {
    let mut x = x0.clone();
    let mut states = Vec::new();
    let mut damped = false;
    for iter in 0..=max_iter {
        let g = gradient(p, &x)?;
        let h = hessian(p, &x)?;
        let grad_norm = g.norm();
        states.push(SolverState {
            iter,
            x: x.iter().copied().collect(),
            loss: loss(p, &x)?.total,
            grad_norm,
            min_eig: min_eigenvalue(&h),
            damped,
        });
        if grad_norm <= tol {
            return Ok(SolverTrajectory { states, converged: true });
        }
        if iter == max_iter {
            break;
        }
        let step = match h.clone().cholesky() {
            Some(ch) => {
                damped = false;
                ch.solve(&g)
            }
            None => {
                let d = p.d();
                let ridge = 1e-8 * h.trace().abs().max(f64::MIN_POSITIVE) / d as f64;
                let shifted = h + DMatrix::identity(d, d) * ridge;
                damped = true;
                shifted
                    .clone()
                    .cholesky()
                    .map(|ch| ch.solve(&g))
                    .or_else(|| shifted.lu().solve(&g))
                    .ok_or(RegressionError::SingularHessian(iter))?
            }
        };
        x -= step;
    }
    Err(RegressionError::MaxIterExceeded {
        iterations: max_iter,
        grad_norm: states.last().map_or(f64::NAN, |s| s.grad_norm),
    })
}
