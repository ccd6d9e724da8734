//! Sequential Monte Carlo in the resampling-matrix formulation.
//!
//! Every resampling step is described by a nonnegative matrix whose rows are the
//! current particles plus one extra row for the absorbing *coffin* state, and whose
//! columns are the offspring slots. Row sums are the incoming weights, column sums
//! are the offspring weights, and each offspring is drawn independently from its
//! column. Random-population schemes (Bernoulli, pruning/enrichment, rejection
//! control) become fixed-size ensembles in which some offspring are coffins.
//!
//! Modules:
//!
//! - [`fk`]: particles, weighted ensembles and the Feynman-Kac model trait.
//! - [`matrix`]: the resampling matrix, validation, sampling and the quadratic-form
//!   resampling variance.
//! - [`schemes`]: deterministic builders mapping weights to scheme matrices.
//! - [`engine`]: the SMC loop, estimators and the martingale error decomposition.
//! - [`oracle`]: exact computations on small finite-state chains.
//! - [`experiments`]: the replicated-experiment harness behind the `smc-lab` binary.

pub mod engine;
pub mod experiments;
pub mod fk;
pub mod matrix;
pub mod oracle;
pub mod schemes;
pub mod suite;

pub use engine::{run, run_with_options, ErrorDecomposition, RunOptions, SmcError, SmcRun};
pub use fk::{FeynmanKacModel, ModelError, ParticleState, WeightedEnsemble};
pub use matrix::{MatrixError, Offspring, ResamplingMatrix, Tolerance, Violation};
pub use oracle::{EtaSquared, FiniteChainModel, HTables, OracleError, OracleScheme};
pub use schemes::{SchemeError, SchemeSpec, SortKey};
