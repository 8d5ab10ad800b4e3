//! Local update directions and the buffer strategies applied at the start of
//! each outer iteration.
//!
//! The caller applies `x ← x − γ·d` with the returned direction `d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ordered_mean, ParameterVector};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OptimizerKind {
    PlainSgd,
    /// `h′ = β h + g`, `d = β h′ + g`.
    SgdNesterov { momentum: f64 },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BufferStrategy {
    /// Zero all buffers and restart the bias-correction counter.
    Reset,
    /// Keep every worker's buffers as they are.
    Maintain,
    /// Replace each buffer by the across-worker mean.
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseOptimizerConfig {
    pub rule: OptimizerKind,
    pub buffer_strategy: BufferStrategy,
}

impl BaseOptimizerConfig {
    pub fn plain_sgd() -> Self {
        Self {
            rule: OptimizerKind::PlainSgd,
            buffer_strategy: BufferStrategy::Reset,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must lie in [0, 1), got {v}")))
            }
        };
        match self.rule {
            OptimizerKind::PlainSgd => Ok(()),
            OptimizerKind::SgdNesterov { momentum } => in_unit("local momentum", momentum),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                in_unit("beta1", beta1)?;
                in_unit("beta2", beta2)?;
                if eps > 0.0 {
                    Ok(())
                } else {
                    Err(Error::config(format!("adam eps must be > 0, got {eps}")))
                }
            }
        }
    }
}

/// Per-worker optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerBuffers {
    /// First moment (`h`).
    pub first: ParameterVector,
    /// Second moment (`v`), Adam only.
    pub second: ParameterVector,
    /// Number of updates since the last reset; Adam's bias-correction index.
    pub step: u64,
}

impl OptimizerBuffers {
    pub fn zeros(dim: usize) -> Self {
        Self {
            first: ParameterVector::zeros(dim),
            second: ParameterVector::zeros(dim),
            step: 0,
        }
    }

    fn reset(&mut self) {
        self.first.set_zero();
        self.second.set_zero();
        self.step = 0;
    }
}

fn bias_correction(beta: f64, step: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Internal(
            "adam bias correction evaluated at step 0".into(),
        ));
    }
    let exp = i32::try_from(step).unwrap_or(i32::MAX);
    Ok(1.0 - beta.powi(exp))
}

/// Computes the local direction `d` for `gradient` and advances `buffers`.
pub fn local_direction(
    kind: &OptimizerKind,
    buffers: &mut OptimizerBuffers,
    gradient: &[f64],
) -> Result<ParameterVector> {
    crate::error::check_dim(buffers.first.dim(), gradient.len())?;
    buffers.step += 1;
    match *kind {
        OptimizerKind::PlainSgd => Ok(ParameterVector::from(gradient.to_vec())),
        OptimizerKind::SgdNesterov { momentum } => {
            let mut d = ParameterVector::zeros(gradient.len());
            for ((h, di), g) in buffers.first.iter_mut().zip(d.iter_mut()).zip(gradient) {
                *h = momentum * *h + g;
                *di = momentum * *h + g;
            }
            Ok(d)
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            let c1 = bias_correction(beta1, buffers.step)?;
            let c2 = bias_correction(beta2, buffers.step)?;
            let mut d = ParameterVector::zeros(gradient.len());
            for (((h, v), di), g) in buffers
                .first
                .iter_mut()
                .zip(buffers.second.iter_mut())
                .zip(d.iter_mut())
                .zip(gradient)
            {
                *h = beta1 * *h + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let h_hat = *h / c1;
                let v_hat = *v / c2;
                *di = h_hat / (v_hat.sqrt() + eps);
            }
            Ok(d)
        }
    }
}

/// Applies the configured strategy to every worker's buffers. Averaging
/// sums in worker-rank order.
pub fn apply_buffer_strategy(strategy: BufferStrategy, buffers: &mut [&mut OptimizerBuffers]) {
    match strategy {
        BufferStrategy::Maintain => {}
        BufferStrategy::Reset => buffers.iter_mut().for_each(|b| b.reset()),
        BufferStrategy::Average => {
            if buffers.is_empty() {
                return;
            }
            let first = ordered_mean(buffers.iter().map(|b| &b.first[..]));
            let second = ordered_mean(buffers.iter().map(|b| &b.second[..]));
            for b in buffers.iter_mut() {
                b.first = first.clone();
                b.second = second.clone();
            }
        }
    }
}
