//! Temporal-difference policy evaluation with linear function approximation.
//!
//! The crate builds the Markov chain induced by a policy, solves for the true
//! value function and the TD fixed points exactly, certifies that the mean
//! TD update is a gradient splitting of an explicit quadratic, simulates
//! projected TD(0), TD(lambda) and mean-adjusted TD(0) with iterate
//! averaging, and evaluates the finite-time bounds those algorithms satisfy.
//!
//! ```
//! use tdsplit_core::{reference_chain, td0_fixed_point, splitting_certificate_td0, FeatureMap};
//!
//! let chain = reference_chain(0.5).unwrap();
//! let features = FeatureMap::identity(2);
//! let fp = td0_fixed_point(&chain, &features).unwrap();
//! assert!((fp.theta_star[0] - 11.0 / 6.0).abs() < 1e-12);
//! assert!(splitting_certificate_td0(&chain, &features).unwrap().holds());
//! ```

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bellman;
pub mod bounds;
pub mod error;
pub mod features;
pub mod geometry;
pub mod harness;
pub mod learner;
pub mod mdp;

pub use bellman::{
    bellman_apply, corollary1_gap, mean_direction_td0, mean_direction_td_lambda, splitting_certificate_td0,
    splitting_certificate_td_lambda, t_lambda_apply, td0_fixed_point, td_lambda_fixed_point, true_value, FixedPoint,
    SplittingCertificate, TLambdaMode, TrueValue,
};
pub use bounds::{
    bhandari_rhs, compute_t0, corollary2_rhs, corollary3_rhs, corollary4_rhs, dirichlet_only_rhs, BoundInputs,
    BoundReport, BoundSetup, Corollary3Mode,
};
pub use error::{Error, Result};
pub use features::{FeatureMap, FeatureSpec};
pub use geometry::{d_norm_sq, dirichlet_sq, laplacian, reversibilization, SpectralSummary, ValueVector};
pub use harness::{ExperimentConfig, Report};
pub use learner::{run_experiment, Algo, ProjectionSpec, RunResult, RunSpec, StepSize};
pub use mdp::{
    induce_chain, mixing_time, reference_chain, sample_trajectory, InducedChain, InstanceFile, Mdp, Policy, Start,
    Transition,
};
