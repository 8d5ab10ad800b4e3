use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::problem::{NoiseSpec, Problem, ProblemKind};
use super::rng::{aux_stream, gradient_stream};
use super::vector::{dist_sq, norm_sq, ParameterVector};
use crate::error::{Error, Result};

/// Constants consumed by the convergence bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConstants {
    /// Smoothness constant `L` shared by every `f_i`.
    pub smoothness: f64,
    /// Bound on `E‖∇F_i − ∇f_i‖²`.
    pub sigma2: f64,
    /// Bound on `(1/m) Σ ‖∇f − ∇f_i‖²`.
    pub zeta2: f64,
    /// Lower bound on `f`.
    pub f_inf: f64,
    #[serde(default)]
    pub estimated: EstimateFlags,
}

/// Marks which constants are numerical estimates rather than exact values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateFlags {
    pub smoothness: bool,
    pub sigma2: bool,
    pub zeta2: bool,
    pub f_inf: bool,
}

impl ProblemConstants {
    pub fn any_estimated(&self) -> bool {
        let e = self.estimated;
        e.smoothness || e.sigma2 || e.zeta2 || e.f_inf
    }
}

pub(crate) const POWER_TOLERANCE: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 200_000;

/// Largest eigenvalue of a symmetric PSD matrix by power iteration, stopped
/// once the Rayleigh quotient changes by less than `tol` relative.
pub fn power_iteration(a: &DMatrix<f64>, tol: f64) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    // Deterministic, non-symmetric start so it is unlikely to be orthogonal
    // to the top eigenvector.
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.37 * ((i as f64 + 1.0) * 1.618).sin());
    v /= v.norm();
    let mut lambda = 0.0;
    for iter in 0..POWER_MAX_ITERS {
        let av = a * &v;
        let norm = av.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&av);
        v = av / norm;
        if iter > 0 && (next - lambda).abs() <= tol * next.abs() {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Smoothness, noise, diversity and lower-bound constants for a problem.
///
/// Quadratics get exact `L` and `f_inf`; `ζ²` is exact when every worker
/// shares one curvature matrix and a grid supremum otherwise. Logistic and
/// MLP problems always come back estimate-flagged.
pub fn problem_constants(problem: &Problem) -> Result<ProblemConstants> {
    let mut flags = EstimateFlags::default();
    let smoothness = match problem.kind() {
        ProblemKind::Quadratic => problem
            .quadratic_shards()
            .expect("quadratic")
            .iter()
            .map(|(a, _)| power_iteration(a, POWER_TOLERANCE))
            .fold(0.0, f64::max),
        ProblemKind::Logistic => {
            flags.smoothness = true;
            0.25 * problem
                .logistic_gram()
                .expect("logistic")
                .iter()
                .map(|g| power_iteration(g, POWER_TOLERANCE))
                .fold(0.0, f64::max)
        }
        ProblemKind::Mlp => {
            flags.smoothness = true;
            sampled_smoothness(problem, 400, 0x5eed)? * 2.0
        }
    };
    if !(smoothness > 0.0) {
        return Err(Error::config(
            "objective has zero curvature; smoothness constant must be positive",
        ));
    }

    let grid = reference_grid(problem)?;

    let sigma2 = match problem.noise() {
        NoiseSpec::AdditiveGaussian { sigma } => sigma * sigma,
        NoiseSpec::Minibatch { .. } => {
            flags.sigma2 = true;
            sampled_sigma2(problem, &grid, 256)?
        }
    };

    let zeta2 = match exact_zeta2(problem) {
        Some(z) => z,
        None => {
            flags.zeta2 = true;
            let mut sup = 0.0f64;
            for x in &grid {
                sup = sup.max(diversity_at(problem, x)?);
            }
            sup
        }
    };

    let f_inf = match problem.kind() {
        ProblemKind::Quadratic => {
            let x_star = quadratic_minimizer(problem);
            problem.global_loss(&x_star)?
        }
        _ => {
            flags.f_inf = true;
            0.0
        }
    };

    Ok(ProblemConstants {
        smoothness,
        sigma2,
        zeta2,
        f_inf,
        estimated: flags,
    })
}

/// `(1/m) Σ ‖∇f(x) − ∇f_i(x)‖²` at a single point.
pub fn diversity_at(problem: &Problem, x: &[f64]) -> Result<f64> {
    let grads = (0..problem.workers())
        .map(|i| problem.worker_full_gradient(i, x))
        .collect::<Result<Vec<_>>>()?;
    let mean = super::vector::ordered_mean(grads.iter().map(|g| &g[..]));
    let total: f64 = grads.iter().map(|g| dist_sq(g, &mean)).sum();
    Ok(total / problem.workers() as f64)
}

/// With one shared `A`, `∇f − ∇f_i = A (b_i − b̄)` is constant in `x`.
/// The mean offset is accumulated as `(1/m) Σ_j (b_j − b_i)` so identical
/// targets give exactly zero.
fn exact_zeta2(problem: &Problem) -> Option<f64> {
    let shards = problem.quadratic_shards()?;
    let a0 = shards[0].0;
    if shards.iter().any(|(a, _)| *a != a0) {
        return None;
    }
    let m = shards.len() as f64;
    let mut total = 0.0;
    for (_, bi) in &shards {
        let mut offset = DVector::zeros(bi.len());
        for (_, bj) in &shards {
            offset += *bj - *bi;
        }
        offset /= m;
        total += (a0 * offset).norm_squared();
    }
    Some(total / m)
}

pub(crate) fn quadratic_minimizer(problem: &Problem) -> ParameterVector {
    let shards = problem.quadratic_shards().expect("quadratic");
    let d = problem.dim();
    let mut a_sum = DMatrix::zeros(d, d);
    let mut rhs = DVector::zeros(d);
    for (a, b) in &shards {
        a_sum += *a;
        rhs += *a * *b;
    }
    let svd = a_sum.svd(true, true);
    let x = svd.solve(&rhs, 1e-12).expect("svd with u and v");
    ParameterVector::from(x.as_slice().to_vec())
}

/// Points at which grid-based suprema are taken.
fn reference_grid(problem: &Problem) -> Result<Vec<ParameterVector>> {
    let d = problem.dim();
    match problem.kind() {
        ProblemKind::Quadratic => {
            let center = quadratic_minimizer(problem);
            let radius = 1.0 + norm_sq(&center).sqrt();
            let mut grid = vec![center.clone()];
            for j in 0..d {
                for sign in [1.0, -1.0] {
                    let mut p = center.clone();
                    p[j] += sign * radius;
                    grid.push(p);
                }
            }
            Ok(grid)
        }
        _ => {
            let mut rng = aux_stream(0, 10);
            let mut grid = vec![ParameterVector::zeros(d)];
            for _ in 0..16 {
                grid.push((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
            }
            Ok(grid)
        }
    }
}

fn sampled_sigma2(problem: &Problem, grid: &[ParameterVector], draws: usize) -> Result<f64> {
    let mut sup = 0.0f64;
    for i in 0..problem.workers() {
        let mut rng = gradient_stream(0xc0ffee, i);
        for x in grid.iter().take(5) {
            let exact = problem.worker_full_gradient(i, x)?;
            let mut acc = 0.0;
            for _ in 0..draws {
                let g = problem.worker_stochastic_gradient(i, x, &mut rng)?;
                acc += dist_sq(&g, &exact);
            }
            sup = sup.max(acc / draws as f64);
        }
    }
    Ok(sup)
}

/// Largest observed `‖∇f_i(x) − ∇f_i(y)‖ / ‖x − y‖` over random pairs drawn
/// around the origin (unit Gaussian points, alternating near and far
/// partners). Valid as an estimate within that region only.
pub fn sampled_smoothness(problem: &Problem, pairs: usize, seed: u64) -> Result<f64> {
    let d = problem.dim();
    let mut rng = aux_stream(seed, 11);
    let mut sup = 0.0f64;
    for p in 0..pairs {
        let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let step = if p % 2 == 0 { 1e-3 } else { 1.0 };
        let y: Vec<f64> = x
            .iter()
            .map(|xi| xi + step * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let denom = dist_sq(&x, &y).sqrt();
        for i in 0..problem.workers() {
            let gx = problem.worker_full_gradient(i, &x)?;
            let gy = problem.worker_full_gradient(i, &y)?;
            sup = sup.max(dist_sq(&gx, &gy).sqrt() / denom);
        }
    }
    Ok(sup)
}
