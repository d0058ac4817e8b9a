#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Gibbs samplers for infinite Gaussian mixtures in the stick-breaking
//! representation.
//!
//! The crate covers three layers:
//!
//! * [`stick_prior`]: stick-breaking priors over explicit cluster labels
//!   (Dirichlet process, Pitman-Yor, constant Beta sticks, single-parameter
//!   pseudo-count families), their posterior expected weights and the exact
//!   marginal probability of a label vector.
//! * [`mixture_gibbs`] and [`label_moves`]: a collapsed Gibbs sampler for a
//!   single mixture with normal-Wishart clusters, plus Metropolis-Hastings
//!   moves that swap or permute labels so the chain mixes over labelings.
//! * [`ddp`]: time-sliced mixtures coupled through a Gaussian prior on the
//!   cluster mean trajectories, with interval label-swap moves.
//!
//! [`diagnostics`] turns label samples into label-invariant association
//! summaries and [`data_io`] provides the dataset generators and readers.

pub mod config;
pub mod data_io;
pub mod ddp;
pub mod diagnostics;
pub mod distributions;
pub mod error;
pub mod label_moves;
pub mod mixture_gibbs;
pub mod rng;
pub mod stick_prior;

pub use error::{Error, Result};

pub use config::RunConfig;
pub use data_io::Dataset;
pub use ddp::{CouplingKernel, CouplingParams, DdpChainConfig, DdpRecord, DdpState, IntervalStrategy};
pub use diagnostics::{AssociationMatrix, TraceRow};
pub use distributions::{ClusterStats, GaussianParams, InverseWishartPrior, NormalWishartPrior};
pub use label_moves::{MoveProposal, MoveSchedule};
pub use mixture_gibbs::{ChainConfig, ChainRecord, Initialization, MixtureState};
pub use rng::ChainRng;
pub use stick_prior::{PriorFamily, StickPrior};

