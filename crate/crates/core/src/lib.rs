//! Local causal models and counterfactual data augmentation for factored
//! dynamics.
//!
//! The crate is organized bottom-up:
//!
//! * [`factored`] – component-decomposed vector spaces, local masks and the
//!   partition machinery used to find swappable component groups.
//! * [`envs`] – deterministic environments that report their ground-truth
//!   local mask alongside every step.
//! * [`scm`] – finite structural causal models with brute-force structural
//!   minimality, local model induction and checks of the local-model theory.
//! * [`augment`] – the counterfactual swap, its validation, batch pipelines
//!   and mask providers.
//! * [`nn`] – a small reverse-mode autodiff tape, MLPs, attention and Adam.
//! * [`sandy`] – mask learners (mixture of MLP experts, stacked attention),
//!   ROC evaluation and the dynamics-modelling experiment.
//! * [`dataset`] – the binary transition dataset format.
//! * [`par`] – data-parallel helpers with a sequential fallback.

pub mod augment;
pub mod dataset;
pub mod envs;
pub mod error;
pub mod factored;
pub mod nn;
pub mod par;
pub mod sandy;
pub mod scm;

pub use error::{Error, Result};
pub use factored::{
    ComponentPartition, FactoredSpace, FactoredVector, IndependentComponentSet, LocalMask,
    Provenance, Transition, VectorKind,
};
