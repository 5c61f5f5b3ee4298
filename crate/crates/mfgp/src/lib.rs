//! Multi-fidelity spatio-temporal Gaussian processes with Vecchia-approximated,
//! fully likelihood-based inference.
//!
//! The model couples an abundant low-fidelity (LF) observation process with a
//! sparse high-fidelity (HF) one through
//!
//! `y_H(x) = rho(s) * f_L(x) + delta(x) + noise`,
//!
//! where `f_L` and `delta` are independent zero-mean GPs with separable
//! space-time squared-exponential kernels and `rho(s)` is a (possibly
//! spatially varying) coupling coefficient. The joint covariance is never
//! formed: it is decomposed as `K = A Sigma_w A' + D_eps`, each latent process
//! gets its own Vecchia factor, and all solves with `K` go through the Woodbury
//! identity and a sparse Cholesky factorization of the auxiliary precision
//! `H = Sigma_w^-1 + A' D_eps^-1 A` with a fill-reducing (AMD) permutation.
//!
//! Crate layout:
//! - [`kernels`]: separable space-time covariance functions and Gram builders;
//! - [`vecchia`]: orderings, neighbor selection, sparse inverse-Cholesky factors;
//! - [`sparse`]: CSC matrices, AMD ordering, sparse LDL' factorization;
//! - [`mfstruct`]: multi-fidelity system assembly and Woodbury solves;
//! - [`meanmodel`]: GLS mean removal (global and spatial-trend designs), REML;
//! - [`rho`]: constant / polynomial / empirical-GP coupling models;
//! - [`inference`]: NLML evaluation, hyperparameter fitting, prediction, GP baselines;
//! - [`simulate`]: synthetic multi-fidelity data generator;
//! - [`oracle`]: dense exact reference implementations and validation metrics;
//! - [`harness`]: configuration, CSV ingestion, LOSO-CV, experiment drivers.

pub mod error;
pub mod harness;
pub mod inference;
pub mod kernels;
pub mod meanmodel;
pub mod mfstruct;
pub mod oracle;
pub mod rho;
pub mod simulate;
pub mod sparse;
pub mod vecchia;

mod optim;

pub use error::{Error, Result};
pub use inference::{FitResult, InferenceConfig, MfData, MfHyperParams, Prediction};
pub use kernels::{KernelParams, SpaceTimePoint};
pub use mfstruct::{MfSystem, NoiseModel};
pub use rho::RhoModel;
pub use simulate::{SimConfig, SimDataset};


pub use vecchia::{ConditioningRule, OrderingStrategy, VecchiaFactor};

/// Relative jitter added to latent-process covariance diagonals wherever a
/// factorization or small solve is performed: the absolute jitter is this
/// constant times the kernel's signal amplitude. Applied identically in the
/// sparse (Vecchia/Woodbury) and dense (oracle) paths so the two pipelines
/// factor the same matrix.
pub const JITTER_SCALE: f64 = 1e-8;
