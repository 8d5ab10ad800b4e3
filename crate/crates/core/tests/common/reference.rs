//! Independent implementations of the classical methods SlowMo reduces to.
//! They share only the problem definition and the per-worker gradient
//! streams with the simulator.

use slowmo::numerics::rng::gradient_stream;
use slowmo::{ExperimentConfig, Problem};

pub fn problem_of(cfg: &ExperimentConfig) -> Problem {
    Problem::build(&cfg.problem, cfg.noise, cfg.workers, cfg.seed).unwrap()
}

pub fn x0_of(cfg: &ExperimentConfig, dim: usize) -> Vec<f64> {
    cfg.init.initial_point(dim, cfg.seed).unwrap().into_vec()
}

pub fn mean(vs: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; vs[0].len()];
    for v in vs {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    out.iter().map(|o| o / vs.len() as f64).collect()
}

/// `h ← βh + ḡ`, `x ← x − γh` with the simulator's gradient streams.
pub fn heavy_ball(cfg: &ExperimentConfig, beta: f64, gamma: f64) -> Vec<Vec<f64>> {
    let p = problem_of(cfg);
    let mut rngs: Vec<_> = (0..cfg.workers).map(|i| gradient_stream(cfg.seed, i)).collect();
    let mut x = x0_of(cfg, p.dim());
    let mut h = vec![0.0; p.dim()];
    let mut out = vec![x.clone()];
    for _ in 0..cfg.total_steps {
        let grads: Vec<Vec<f64>> = rngs
            .iter_mut()
            .enumerate()
            .map(|(i, r)| p.worker_stochastic_gradient(i, &x, r).unwrap().into_vec())
            .collect();
        let g = mean(&grads);
        for j in 0..x.len() {
            h[j] = beta * h[j] + g[j];
            x[j] -= gamma * h[j];
        }
        out.push(x.clone());
    }
    out
}

/// Local SGD (plain gradient, no momentum) with averaging every `tau` steps;
/// returns the worker-average model before every step and at the end.
/// With `alpha`/`beta` it applies the block-momentum filter
/// `Δ ← βΔ + α(x̄_τ − x₀)`, `x₀ ← x₀ + Δ`.
pub fn block_momentum(cfg: &ExperimentConfig, tau: u64, alpha: f64, beta: f64, gamma: f64) -> Vec<Vec<f64>> {
    let p = problem_of(cfg);
    let m = cfg.workers;
    let mut rngs: Vec<_> = (0..m).map(|i| gradient_stream(cfg.seed, i)).collect();
    let mut anchor = x0_of(cfg, p.dim());
    let mut delta = vec![0.0; p.dim()];
    let mut out = Vec::new();
    let mut done = 0;
    while done < cfg.total_steps {
        let mut xs = vec![anchor.clone(); m];
        let steps = tau.min(cfg.total_steps - done);
        for _ in 0..steps {
            out.push(mean(&xs));
            for (i, x) in xs.iter_mut().enumerate() {
                let g = p.worker_stochastic_gradient(i, x, &mut rngs[i]).unwrap();
                for (xj, gj) in x.iter_mut().zip(g.iter()) {
                    *xj -= gamma * gj;
                }
            }
        }
        done += steps;
        let end = mean(&xs);
        for j in 0..anchor.len() {
            delta[j] = beta * delta[j] + alpha * (end[j] - anchor[j]);
            anchor[j] += delta[j];
        }
    }
    out.push(anchor);
    out
}

/// Lookahead on one worker: fast weights take `tau` SGD steps from the
/// slow weights φ, then `φ ← φ + α(θ − φ)`.
pub fn lookahead(cfg: &ExperimentConfig, tau: u64, alpha: f64, gamma: f64) -> Vec<Vec<f64>> {
    let p = problem_of(cfg);
    let mut rng = gradient_stream(cfg.seed, 0);
    let mut slow = x0_of(cfg, p.dim());
    let mut out = Vec::new();
    for _ in 0..cfg.total_steps / tau {
        let mut fast = slow.clone();
        for _ in 0..tau {
            out.push(fast.clone());
            let g = p.worker_stochastic_gradient(0, &fast, &mut rng).unwrap();
            fast.iter_mut().zip(g.iter()).for_each(|(f, g)| *f -= gamma * g);
        }
        slow.iter_mut().zip(&fast).for_each(|(s, f)| *s += alpha * (f - *s));
    }
    out.push(slow);
    out
}
