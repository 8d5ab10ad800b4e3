use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::rng::{aux_stream, data_stream, WorkerRng};
use super::vector::ParameterVector;
use crate::error::{check_dim, Error, Result};

/// Synthetic objective families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemSpec {
    /// `f_i(x) = ½ (x − b_i)ᵀ A_i (x − b_i)` with generated PSD `A_i`.
    Quadratic {
        dim: usize,
        #[serde(default = "default_min_curvature")]
        min_curvature: f64,
        #[serde(default = "default_max_curvature")]
        max_curvature: f64,
        /// One curvature matrix for all workers (only the targets differ).
        #[serde(default = "default_true")]
        shared_curvature: bool,
        /// Standard deviation of the per-worker target offsets.
        #[serde(default)]
        heterogeneity: f64,
    },
    /// Quadratic with caller-supplied `A_i` and `b_i`. A single matrix or
    /// target is broadcast to every worker.
    QuadraticExplicit {
        matrices: Vec<Vec<Vec<f64>>>,
        targets: Vec<Vec<f64>>,
    },
    /// Binary logistic regression on Gaussian features.
    Logistic {
        dim: usize,
        #[serde(default = "default_samples")]
        samples_per_worker: usize,
        /// Symmetric label-flip probability applied on every worker.
        #[serde(default)]
        label_noise: f64,
        /// Probability of flipping the worker's "own" class (positive for
        /// even ranks, negative for odd ranks). Zero gives statistically
        /// identical shards.
        #[serde(default)]
        heterogeneity: f64,
        #[serde(default = "default_feature_scale")]
        feature_scale: f64,
    },
    /// Two-layer tanh network `vᵀ tanh(W a + c) + b0` under squared loss,
    /// fitted to a random teacher network.
    Mlp {
        inputs: usize,
        hidden: usize,
        #[serde(default = "default_samples")]
        samples_per_worker: usize,
        /// Per-worker target shift, `±heterogeneity` by rank parity.
        #[serde(default)]
        heterogeneity: f64,
        #[serde(default = "default_target_noise")]
        target_noise: f64,
    },
}

fn default_min_curvature() -> f64 {
    0.1
}
fn default_max_curvature() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_samples() -> usize {
    256
}
fn default_feature_scale() -> f64 {
    1.0
}
fn default_target_noise() -> f64 {
    0.1
}

/// How stochastic gradients deviate from the exact worker gradient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NoiseSpec {
    /// `∇f_i(x) + η` with `η ~ N(0, (σ²/d) I)`, so `E‖η‖² = σ²`.
    AdditiveGaussian { sigma: f64 },
    /// Average gradient over `batch_size` shard points drawn without
    /// replacement.
    Minibatch { batch_size: usize },
}

#[derive(Clone, Debug)]
struct QuadraticShard {
    a: DMatrix<f64>,
    b: DVector<f64>,
}

/// Row-major sample matrix with one target per row.
#[derive(Clone, Debug)]
struct SampleShard {
    features: Vec<f64>,
    targets: Vec<f64>,
    width: usize,
}

impl SampleShard {
    fn len(&self) -> usize {
        self.targets.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.width..(i + 1) * self.width]
    }
}

#[derive(Clone, Debug)]
enum Objective {
    Quadratic(Vec<QuadraticShard>),
    Logistic(Vec<SampleShard>),
    Mlp {
        shards: Vec<SampleShard>,
        inputs: usize,
        hidden: usize,
    },
}

/// A distributed objective `f(x) = (1/m) Σ f_i(x)` together with its
/// stochastic gradient model.
#[derive(Clone, Debug)]
pub struct Problem {
    objective: Objective,
    noise: NoiseSpec,
    dim: usize,
    workers: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProblemKind {
    Quadratic,
    Logistic,
    Mlp,
}

impl Problem {
    /// Builds the problem. Shards are deterministic functions of `seed`.
    pub fn build(spec: &ProblemSpec, noise: NoiseSpec, workers: usize, seed: u64) -> Result<Self> {
        if workers == 0 {
            return Err(Error::config("worker count must be at least 1"));
        }
        match noise {
            NoiseSpec::AdditiveGaussian { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                return Err(Error::config(format!("noise sigma must be finite and ≥ 0, got {sigma}")));
            }
            NoiseSpec::Minibatch { batch_size } => {
                if batch_size == 0 {
                    return Err(Error::config("minibatch size must be positive"));
                }
                if matches!(spec, ProblemSpec::Quadratic { .. } | ProblemSpec::QuadraticExplicit { .. }) {
                    return Err(Error::config(
                        "quadratic problems have no samples; use additive-gaussian noise",
                    ));
                }
            }
            _ => {}
        }
        let (objective, dim) = match spec {
            ProblemSpec::Quadratic {
                dim,
                min_curvature,
                max_curvature,
                shared_curvature,
                heterogeneity,
            } => {
                if *dim == 0 {
                    return Err(Error::config("problem dimension must be positive"));
                }
                if !(*min_curvature >= 0.0 && max_curvature >= min_curvature) {
                    return Err(Error::config(
                        "quadratic curvatures must satisfy 0 ≤ min_curvature ≤ max_curvature",
                    ));
                }
                if !(*heterogeneity >= 0.0) {
                    return Err(Error::config("heterogeneity must be ≥ 0"));
                }
                let shards = generate_quadratic(
                    *dim,
                    *min_curvature,
                    *max_curvature,
                    *shared_curvature,
                    *heterogeneity,
                    workers,
                    seed,
                );
                (Objective::Quadratic(shards), *dim)
            }
            ProblemSpec::QuadraticExplicit { matrices, targets } => {
                let (shards, dim) = explicit_quadratic(matrices, targets, workers)?;
                (Objective::Quadratic(shards), dim)
            }
            ProblemSpec::Logistic {
                dim,
                samples_per_worker,
                label_noise,
                heterogeneity,
                feature_scale,
            } => {
                if *dim == 0 || *samples_per_worker == 0 {
                    return Err(Error::config("logistic dimension and shard size must be positive"));
                }
                for (name, p) in [("label_noise", label_noise), ("heterogeneity", heterogeneity)] {
                    if !(0.0..=0.5).contains(p) {
                        return Err(Error::config(format!("{name} must lie in [0, 0.5], got {p}")));
                    }
                }
                let shards = generate_logistic(
                    *dim,
                    *samples_per_worker,
                    *label_noise,
                    *heterogeneity,
                    *feature_scale,
                    workers,
                    seed,
                );
                (Objective::Logistic(shards), *dim)
            }
            ProblemSpec::Mlp {
                inputs,
                hidden,
                samples_per_worker,
                heterogeneity,
                target_noise,
            } => {
                if *inputs == 0 || *hidden == 0 || *samples_per_worker == 0 {
                    return Err(Error::config("mlp sizes must be positive"));
                }
                let shards = generate_mlp(
                    *inputs,
                    *hidden,
                    *samples_per_worker,
                    *heterogeneity,
                    *target_noise,
                    workers,
                    seed,
                );
                (
                    Objective::Mlp {
                        shards,
                        inputs: *inputs,
                        hidden: *hidden,
                    },
                    mlp_param_count(*inputs, *hidden),
                )
            }
        };
        if let (NoiseSpec::Minibatch { batch_size }, Some(n)) = (noise, shard_len(&objective)) {
            if batch_size > n {
                return Err(Error::config(format!(
                    "minibatch size {batch_size} exceeds shard size {n}"
                )));
            }
        }
        Ok(Self {
            objective,
            noise,
            dim,
            workers,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn noise(&self) -> NoiseSpec {
        self.noise
    }

    pub fn kind(&self) -> ProblemKind {
        match self.objective {
            Objective::Quadratic(_) => ProblemKind::Quadratic,
            Objective::Logistic(_) => ProblemKind::Logistic,
            Objective::Mlp { .. } => ProblemKind::Mlp,
        }
    }

    fn check_worker(&self, worker: usize) -> Result<()> {
        if worker < self.workers {
            Ok(())
        } else {
            Err(Error::config(format!(
                "unknown worker {worker} (problem has {} workers)",
                self.workers
            )))
        }
    }

    /// Exact expected loss of one worker.
    pub fn worker_loss(&self, worker: usize, x: &[f64]) -> Result<f64> {
        self.check_worker(worker)?;
        check_dim(self.dim, x.len())?;
        Ok(match &self.objective {
            Objective::Quadratic(shards) => {
                let s = &shards[worker];
                let r = DVector::from_column_slice(x) - &s.b;
                0.5 * r.dot(&(&s.a * &r))
            }
            Objective::Logistic(shards) => {
                let s = &shards[worker];
                let total: f64 = (0..s.len())
                    .map(|j| softplus(-s.targets[j] * dot(s.row(j), x)))
                    .sum();
                total / s.len() as f64
            }
            Objective::Mlp {
                shards,
                inputs,
                hidden,
            } => {
                let s = &shards[worker];
                let net = MlpView::new(x, *inputs, *hidden);
                let mut hbuf = vec![0.0; *hidden];
                let total: f64 = (0..s.len())
                    .map(|j| {
                        let r = net.forward(s.row(j), &mut hbuf) - s.targets[j];
                        0.5 * r * r
                    })
                    .sum();
                total / s.len() as f64
            }
        })
    }

    /// `f(x) = (1/m) Σ f_i(x)`, noise free.
    pub fn global_loss(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        let mut total = 0.0;
        for i in 0..self.workers {
            total += self.worker_loss(i, x)?;
        }
        Ok(total / self.workers as f64)
    }

    /// Exact `∇f_i(x)`.
    pub fn worker_full_gradient(&self, worker: usize, x: &[f64]) -> Result<ParameterVector> {
        self.check_worker(worker)?;
        check_dim(self.dim, x.len())?;
        Ok(match &self.objective {
            Objective::Quadratic(shards) => {
                let s = &shards[worker];
                let r = DVector::from_column_slice(x) - &s.b;
                ParameterVector::from((&s.a * r).as_slice().to_vec())
            }
            _ => {
                let n = shard_len(&self.objective).unwrap_or(0);
                self.sample_gradient(worker, x, 0..n)
            }
        })
    }

    /// Exact `∇f(x)`, averaged in worker-rank order.
    pub fn global_gradient(&self, x: &[f64]) -> Result<ParameterVector> {
        let grads = (0..self.workers)
            .map(|i| self.worker_full_gradient(i, x))
            .collect::<Result<Vec<_>>>()?;
        Ok(super::vector::ordered_mean(grads.iter().map(|g| &g[..])))
    }

    /// Unbiased stochastic gradient drawn from the worker's private stream.
    pub fn worker_stochastic_gradient(
        &self,
        worker: usize,
        x: &[f64],
        rng: &mut WorkerRng,
    ) -> Result<ParameterVector> {
        match self.noise {
            NoiseSpec::AdditiveGaussian { sigma } => {
                let mut g = self.worker_full_gradient(worker, x)?;
                if sigma > 0.0 {
                    let std = sigma / (self.dim as f64).sqrt();
                    for gi in g.iter_mut() {
                        let eta: f64 = rng.sample(StandardNormal);
                        *gi += std * eta;
                    }
                }
                Ok(g)
            }
            NoiseSpec::Minibatch { batch_size } => {
                self.check_worker(worker)?;
                check_dim(self.dim, x.len())?;
                let n = shard_len(&self.objective).expect("minibatch noise requires samples");
                let mut picked = index::sample(rng, n, batch_size).into_vec();
                picked.sort_unstable();
                Ok(self.sample_gradient(worker, x, picked.into_iter()))
            }
        }
    }

    /// Average per-sample gradient over `indices` (ascending order keeps the
    /// full-batch and full-size-minibatch paths bitwise identical).
    fn sample_gradient(
        &self,
        worker: usize,
        x: &[f64],
        indices: impl Iterator<Item = usize>,
    ) -> ParameterVector {
        let mut g = ParameterVector::zeros(self.dim);
        let mut count = 0usize;
        match &self.objective {
            Objective::Quadratic(_) => unreachable!("quadratics have no samples"),
            Objective::Logistic(shards) => {
                let s = &shards[worker];
                for j in indices {
                    let a = s.row(j);
                    let y = s.targets[j];
                    let coef = -y * sigmoid(-y * dot(a, x));
                    g.axpy(coef, a);
                    count += 1;
                }
            }
            Objective::Mlp {
                shards,
                inputs,
                hidden,
            } => {
                let s = &shards[worker];
                let net = MlpView::new(x, *inputs, *hidden);
                let mut hbuf = vec![0.0; *hidden];
                for j in indices {
                    net.accumulate_gradient(s.row(j), s.targets[j], &mut hbuf, &mut g);
                    count += 1;
                }
            }
        }
        let n = count.max(1) as f64;
        for gi in g.iter_mut() {
            *gi /= n;
        }
        g
    }

    pub(crate) fn quadratic_shards(&self) -> Option<Vec<(&DMatrix<f64>, &DVector<f64>)>> {
        match &self.objective {
            Objective::Quadratic(shards) => Some(shards.iter().map(|s| (&s.a, &s.b)).collect()),
            _ => None,
        }
    }

    /// Per-worker `(1/n) AᵀA` for logistic shards, used for the smoothness
    /// estimate.
    pub(crate) fn logistic_gram(&self) -> Option<Vec<DMatrix<f64>>> {
        match &self.objective {
            Objective::Logistic(shards) => Some(
                shards
                    .iter()
                    .map(|s| {
                        let a = DMatrix::from_row_slice(s.len(), s.width, &s.features);
                        (a.transpose() * &a) / s.len() as f64
                    })
                    .collect(),
            ),
            _ => None,
        }
    }

    /// Samples per worker shard; `None` for quadratics.
    pub fn shard_len(&self) -> Option<usize> {
        shard_len(&self.objective)
    }
}

fn shard_len(objective: &Objective) -> Option<usize> {
    match objective {
        Objective::Quadratic(_) => None,
        Objective::Logistic(shards) | Objective::Mlp { shards, .. } => {
            shards.iter().map(SampleShard::len).min()
        }
    }
}

pub(crate) fn mlp_param_count(inputs: usize, hidden: usize) -> usize {
    hidden * inputs + 2 * hidden + 1
}

/// Borrowed view of flat MLP parameters laid out as `[W (row-major), c, v, b0]`.
struct MlpView<'a> {
    w: &'a [f64],
    c: &'a [f64],
    v: &'a [f64],
    b0: f64,
    inputs: usize,
}

impl<'a> MlpView<'a> {
    fn new(x: &'a [f64], inputs: usize, hidden: usize) -> Self {
        let (w, rest) = x.split_at(hidden * inputs);
        let (c, rest) = rest.split_at(hidden);
        let (v, rest) = rest.split_at(hidden);
        Self {
            w,
            c,
            v,
            b0: rest[0],
            inputs,
        }
    }

    fn forward(&self, a: &[f64], hbuf: &mut [f64]) -> f64 {
        let mut out = self.b0;
        for (h, ((wrow, c), v)) in hbuf
            .iter_mut()
            .zip(self.w.chunks_exact(self.inputs).zip(self.c).zip(self.v))
        {
            *h = (dot(wrow, a) + c).tanh();
            out += v * *h;
        }
        out
    }

    fn accumulate_gradient(&self, a: &[f64], y: f64, hbuf: &mut [f64], g: &mut [f64]) {
        let hidden = self.c.len();
        let r = self.forward(a, hbuf) - y;
        let (gw, rest) = g.split_at_mut(hidden * self.inputs);
        let (gc, rest) = rest.split_at_mut(hidden);
        let (gv, gb) = rest.split_at_mut(hidden);
        gb[0] += r;
        for (unit, h) in hbuf.iter().enumerate() {
            gv[unit] += r * h;
            let delta = r * self.v[unit] * (1.0 - h * h);
            gc[unit] += delta;
            let row = &mut gw[unit * self.inputs..(unit + 1) * self.inputs];
            for (gwj, aj) in row.iter_mut().zip(a) {
                *gwj += delta * aj;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn gaussian_vec(rng: &mut WorkerRng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn random_orthogonal(rng: &mut WorkerRng, dim: usize) -> DMatrix<f64> {
    let g = DMatrix::from_vec(dim, dim, gaussian_vec(rng, dim * dim, 1.0));
    g.qr().q()
}

fn spectrum_matrix(q: &DMatrix<f64>, spectrum: &[f64]) -> DMatrix<f64> {
    let d = DMatrix::from_diagonal(&DVector::from_column_slice(spectrum));
    let a = q * d * q.transpose();
    (&a + a.transpose()) * 0.5
}

fn generate_quadratic(
    dim: usize,
    min_curv: f64,
    max_curv: f64,
    shared: bool,
    heterogeneity: f64,
    workers: usize,
    seed: u64,
) -> Vec<QuadraticShard> {
    let spectrum: Vec<f64> = if dim == 1 {
        vec![max_curv]
    } else {
        (0..dim)
            .map(|j| min_curv + (max_curv - min_curv) * j as f64 / (dim - 1) as f64)
            .collect()
    };
    let mut aux = aux_stream(seed, 0);
    let center = gaussian_vec(&mut aux, dim, 1.0);
    let shared_a = shared.then(|| spectrum_matrix(&random_orthogonal(&mut aux, dim), &spectrum));
    (0..workers)
        .map(|i| {
            let mut rng = data_stream(seed, i);
            let a = match &shared_a {
                Some(a) => a.clone(),
                None => spectrum_matrix(&random_orthogonal(&mut rng, dim), &spectrum),
            };
            let offset = gaussian_vec(&mut rng, dim, heterogeneity);
            let b = DVector::from_iterator(dim, center.iter().zip(&offset).map(|(c, o)| c + o));
            QuadraticShard { a, b }
        })
        .collect()
}

fn explicit_quadratic(
    matrices: &[Vec<Vec<f64>>],
    targets: &[Vec<f64>],
    workers: usize,
) -> Result<(Vec<QuadraticShard>, usize)> {
    let pick = |len: usize, what: &str| -> Result<()> {
        if len == 1 || len == workers {
            Ok(())
        } else {
            Err(Error::config(format!(
                "quadratic-explicit needs 1 or {workers} {what}, got {len}"
            )))
        }
    };
    pick(matrices.len(), "matrices")?;
    pick(targets.len(), "targets")?;
    let dim = targets[0].len();
    if dim == 0 {
        return Err(Error::config("quadratic-explicit targets must be non-empty"));
    }
    let mut shards = Vec::with_capacity(workers);
    for i in 0..workers {
        let rows = &matrices[if matrices.len() == 1 { 0 } else { i }];
        let b = &targets[if targets.len() == 1 { 0 } else { i }];
        check_dim(dim, b.len())?;
        check_dim(dim, rows.len())?;
        for row in rows {
            check_dim(dim, row.len())?;
        }
        let a = DMatrix::from_fn(dim, dim, |r, c| rows[r][c]);
        if (&a - a.transpose()).abs().max() > 1e-12 * (1.0 + a.abs().max()) {
            return Err(Error::config(format!("matrix of worker {i} is not symmetric")));
        }
        let eig = a.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| l < -1e-12 * (1.0 + a.abs().max())) {
            return Err(Error::config(format!(
                "matrix of worker {i} is not positive semidefinite"
            )));
        }
        shards.push(QuadraticShard {
            a,
            b: DVector::from_column_slice(b),
        });
    }
    Ok((shards, dim))
}

fn generate_logistic(
    dim: usize,
    n: usize,
    label_noise: f64,
    heterogeneity: f64,
    feature_scale: f64,
    workers: usize,
    seed: u64,
) -> Vec<SampleShard> {
    let mut aux = aux_stream(seed, 1);
    let teacher = gaussian_vec(&mut aux, dim, 1.0 / (dim as f64).sqrt());
    (0..workers)
        .map(|i| {
            let mut rng = data_stream(seed, i);
            let own_class = if i % 2 == 0 { 1.0 } else { -1.0 };
            let features = gaussian_vec(&mut rng, n * dim, feature_scale);
            let targets = features
                .chunks_exact(dim)
                .map(|a| {
                    let mut y = if dot(a, &teacher) >= 0.0 { 1.0 } else { -1.0 };
                    // Draw both coins for every sample so the stream layout
                    // does not depend on the parameters.
                    let flip_sym: f64 = rng.random();
                    let flip_own: f64 = rng.random();
                    if flip_sym < label_noise {
                        y = -y;
                    }
                    if y == own_class && flip_own < heterogeneity {
                        y = -y;
                    }
                    y
                })
                .collect();
            SampleShard {
                features,
                targets,
                width: dim,
            }
        })
        .collect()
}

fn generate_mlp(
    inputs: usize,
    hidden: usize,
    n: usize,
    heterogeneity: f64,
    target_noise: f64,
    workers: usize,
    seed: u64,
) -> Vec<SampleShard> {
    let mut aux = aux_stream(seed, 2);
    let teacher = gaussian_vec(&mut aux, mlp_param_count(inputs, hidden), 1.0);
    let net = MlpView::new(&teacher, inputs, hidden);
    let mut hbuf = vec![0.0; hidden];
    (0..workers)
        .map(|i| {
            let mut rng = data_stream(seed, i);
            let shift = if i % 2 == 0 { heterogeneity } else { -heterogeneity };
            let features = gaussian_vec(&mut rng, n * inputs, 1.0);
            let targets = features
                .chunks_exact(inputs)
                .map(|a| {
                    let eps: f64 = rng.sample(StandardNormal);
                    net.forward(a, &mut hbuf) + shift + target_noise * eps
                })
                .collect();
            SampleShard {
                features,
                targets,
                width: inputs,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::gradient_stream;

    fn explicit(a: Vec<Vec<Vec<f64>>>, b: Vec<Vec<f64>>, m: usize, sigma: f64) -> Problem {
        Problem::build(
            &ProblemSpec::QuadraticExplicit {
                matrices: a,
                targets: b,
            },
            NoiseSpec::AdditiveGaussian { sigma },
            m,
            0,
        )
        .unwrap()
    }

    fn logistic(m: usize, noise: NoiseSpec) -> Problem {
        Problem::build(
            &ProblemSpec::Logistic {
                dim: 5,
                samples_per_worker: 40,
                label_noise: 0.1,
                heterogeneity: 0.2,
                feature_scale: 1.0,
            },
            noise,
            m,
            7,
        )
        .unwrap()
    }

    #[test]
    fn symmetric_quadratic_minimum_is_zero() {
        let p = explicit(vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]], vec![vec![0.0, 0.0]], 3, 0.0);
        assert_eq!(p.global_loss(&[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn two_worker_quadratic_loss() {
        let p = explicit(vec![vec![vec![1.0]]], vec![vec![1.0], vec![-1.0]], 2, 0.0);
        assert_eq!(p.global_loss(&[0.0]).unwrap(), 0.5);
    }

    #[test]
    fn logistic_at_zero_is_ln2() {
        let p = logistic(3, NoiseSpec::AdditiveGaussian { sigma: 0.0 });
        let x = vec![0.0; 5];
        for i in 0..3 {
            assert!((p.worker_loss(i, &x).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        }
        assert!((p.global_loss(&x).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn identity_quadratic_gradient() {
        let p = explicit(vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]], vec![vec![0.0, 0.0]], 1, 0.0);
        assert_eq!(&p.worker_full_gradient(0, &[2.0, 0.0]).unwrap()[..], &[2.0, 0.0]);
    }

    #[test]
    fn gradient_vanishes_at_target() {
        let p = explicit(
            vec![vec![vec![2.0, 0.5], vec![0.5, 1.0]]],
            vec![vec![0.3, -1.2]],
            1,
            0.0,
        );
        assert_eq!(&p.worker_full_gradient(0, &[0.3, -1.2]).unwrap()[..], &[0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = explicit(vec![vec![vec![1.0]]], vec![vec![0.0]], 1, 0.0);
        assert!(matches!(p.global_loss(&[0.0, 1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn unknown_worker_is_rejected() {
        let p = explicit(vec![vec![vec![1.0]]], vec![vec![0.0]], 2, 0.0);
        assert!(matches!(p.worker_full_gradient(2, &[0.0]), Err(Error::Config(_))));
    }

    #[test]
    fn zero_sigma_is_exact() {
        let p = explicit(vec![vec![vec![3.0]]], vec![vec![1.0]], 1, 0.0);
        let mut rng = gradient_stream(1, 0);
        let g = p.worker_stochastic_gradient(0, &[2.0], &mut rng).unwrap();
        assert_eq!(g, p.worker_full_gradient(0, &[2.0]).unwrap());
    }

    #[test]
    fn full_batch_equals_full_gradient() {
        let p = logistic(2, NoiseSpec::Minibatch { batch_size: 40 });
        let x = vec![0.1, -0.2, 0.3, 0.0, 0.5];
        let mut rng = gradient_stream(3, 1);
        let g = p.worker_stochastic_gradient(1, &x, &mut rng).unwrap();
        assert_eq!(g, p.worker_full_gradient(1, &x).unwrap());
    }

    #[test]
    fn minibatch_larger_than_shard_is_rejected() {
        let err = Problem::build(
            &ProblemSpec::Logistic {
                dim: 2,
                samples_per_worker: 4,
                label_noise: 0.0,
                heterogeneity: 0.0,
                feature_scale: 1.0,
            },
            NoiseSpec::Minibatch { batch_size: 5 },
            1,
            0,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn quadratic_rejects_minibatch_noise() {
        let err = Problem::build(
            &ProblemSpec::Quadratic {
                dim: 2,
                min_curvature: 0.1,
                max_curvature: 1.0,
                shared_curvature: true,
                heterogeneity: 0.0,
            },
            NoiseSpec::Minibatch { batch_size: 1 },
            1,
            0,
        );
        assert!(err.is_err());
    }

    #[test]
    fn explicit_quadratic_rejects_indefinite_matrix() {
        let err = Problem::build(
            &ProblemSpec::QuadraticExplicit {
                matrices: vec![vec![vec![1.0, 0.0], vec![0.0, -1.0]]],
                targets: vec![vec![0.0, 0.0]],
            },
            NoiseSpec::AdditiveGaussian { sigma: 0.0 },
            1,
            0,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn shards_are_seed_deterministic() {
        let a = logistic(2, NoiseSpec::AdditiveGaussian { sigma: 0.0 });
        let b = logistic(2, NoiseSpec::AdditiveGaussian { sigma: 0.0 });
        let x = [0.2, 0.1, -0.3, 0.4, 0.0];
        assert_eq!(a.global_loss(&x).unwrap(), b.global_loss(&x).unwrap());
    }

    #[test]
    fn generated_curvature_is_shared_when_requested() {
        let p = Problem::build(
            &ProblemSpec::Quadratic {
                dim: 4,
                min_curvature: 0.5,
                max_curvature: 2.0,
                shared_curvature: true,
                heterogeneity: 1.0,
            },
            NoiseSpec::AdditiveGaussian { sigma: 0.0 },
            3,
            11,
        )
        .unwrap();
        let shards = p.quadratic_shards().unwrap();
        assert_eq!(shards[0].0, shards[2].0);
        assert_ne!(shards[0].1, shards[2].1);
    }
}
