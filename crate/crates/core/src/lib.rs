//! A deterministic simulator for SlowMo: `m` workers run `τ` steps of a base
//! optimizer (locally, or with all-reduce, gossip or push-sum communication),
//! then average exactly and apply a slow momentum update.
//!
//! ```
//! use slowmo::harness::parse_config_str;
//!
//! let config = parse_config_str(r#"{
//!     "workers": 4,
//!     "total_steps": 48,
//!     "problem": {"kind": "quadratic", "dim": 5},
//!     "protocol": {"kind": "local"},
//!     "slowmo": {"tau": 12, "beta": 0.5, "learning_rate": {"base": 0.5}}
//! }"#).unwrap();
//! let trace = slowmo::run(&config).unwrap();
//! assert_eq!(trace.len(), 49);
//! assert!(trace.records[48].loss < trace.records[0].loss);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod harness;
pub mod numerics;
pub mod optim;
pub mod protocol;
pub mod sim;
pub mod slowmo;
pub mod theory;
pub mod topology;

pub use error::{Error, Result};
pub use harness::ExperimentConfig;
pub use numerics::{ParameterVector, Problem, ProblemConstants};
pub use sim::{run, MetricsTrace, Simulation, StepRecord};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/outer-loop.md")]
    mod outer_loop {}
    #[doc = include_str!("../../../book/src/base-optimizers.md")]
    mod base_optimizers {}
    #[doc = include_str!("../../../book/src/protocols.md")]
    mod protocols {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/theory.md")]
    mod theory {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
