//! pertlab: a desk-scale laboratory for studying adversarial perturbations.
//!
//! The crate trains small image classifiers from scratch on a tape-based
//! reverse-mode autodiff engine, attacks them with FGSM / PGD / MI-FGSM,
//! dissects the resulting perturbations in the spatial, frequency (Haar
//! wavelet) and latent (autoencoder) domains, and evaluates an adaptive
//! compression defense that channel-compresses high-frequency feature bands
//! and spatially compresses the low-frequency band before reconstruction.
//!
//! Everything is deterministic: every stochastic operation takes an explicit
//! seed, and experiment runs with equal configs produce byte-identical
//! reports.

pub mod acm;
pub mod attacks;
pub mod checkpoint;
pub mod classifier;
pub mod dataio;
pub mod error;
pub mod harness;
pub mod rng;
pub mod scalar;
pub mod surgery;
pub mod tensor;
pub mod wavelet;

pub use acm::{AcmConfig, AcmModel, AcmTrainConfig};
pub use attacks::{AdversarialExample, AttackConfig, AttackKind, Defense, IdentityDefense};
pub use classifier::{ClassifierConfig, CnnModel};
pub use dataio::{Dataset, LabeledImage};
pub use error::{Error, Result};
pub use harness::{ExperimentConfig, ExperimentReport};
pub use scalar::Scalar;
pub use surgery::{Autoencoder, SurgeryDomain, SurgerySpec};
pub use tensor::{AdamState, Tape, Tensor, Var};
pub use wavelet::{Band, BandMask, SubBands};
