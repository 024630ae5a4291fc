//! Mixtures of factor analyzers trained with truncated variational EM,
//! together with exact EM and k-means + factor-analyzer baselines.
//!
//! The usual entry point is [`trainer::train`] with a [`TrainConfig`]:
//!
//! ```
//! use vmfa_core::synth::{gen_synthetic, SyntheticSpec};
//! use vmfa_core::{train, TrainConfig};
//!
//! let sample = gen_synthetic(&SyntheticSpec { n: 600, ..SyntheticSpec::default() }).unwrap();
//! let config = TrainConfig { n_components: 5, latent_dim: 2, cprime: 2, gsize: 3, ..TrainConfig::default() };
//! let out = train(&config, &sample.data, None).unwrap();
//! assert!(out.report.summary.nll_train.is_finite());
//! ```

pub mod baselines;
pub mod bench;
pub mod dataset;
pub mod error;
pub mod estep;
pub mod init;
pub mod io;
pub mod model;
pub mod mstep;
pub mod synth;
pub mod trainer;

pub use dataset::{Dataset, Split};
pub use error::{MfaError, Result};
pub use estep::{DistanceMode, VarState};
pub use init::InitMethod;
pub use model::{ComponentCache, Counter, MfaParams, VarianceFloor};
pub use trainer::{train, Algo, TrainConfig, TrainOutcome, TrainReport};
