//! metalab: a desk-scale meta-learning laboratory.
//!
//! Implements MAML, first-order MAML, ANIL, and NIL end to end on synthetic
//! few-shot task families, together with the analysis machinery needed to
//! study rapid learning vs feature reuse: layer freezing, CCA/CKA
//! representational similarity, per-layer weight distances, and a
//! policy-gradient meta-RL track on a 2-D navigation task family.
//!
//! The crate is organized as a library with runnable examples (see
//! `examples/`) plus a thin `metalab` CLI binary driving the experiment
//! harness.
//!
//! Module map:
//! - [`tensor`], [`tape`], [`linalg`], [`params`], [`rng`]: the numeric core
//!   (dense tensors, a re-differentiable reverse-mode tape that supports
//!   gradients of gradients, a Jacobi SVD, named parameter sets).
//! - [`taskgen`]: synthetic task families (sinusoid regression, procedural
//!   glyph classification) and episodic N-way k-shot samplers.
//! - [`model`]: conv/MLP backbones with head/body partition and activation
//!   capture.
//! - [`algos`]: inner-loop adaptation, meta-objective, and outer-loop
//!   trainers for MAML / FOMAML / ANIL plus baseline training regimes.
//! - [`inference`]: adapted evaluation, the layer-freezing protocol, and the
//!   head-free NIL classifier.
//! - [`repsim`]: CCA / linear CKA similarity and weight-distance analyses.
//! - [`metarl`]: 2-D navigation meta-RL with REINFORCE inner adaptation.
//! - [`harness`]: config parsing, experiment orchestration, presets, timing
//!   benchmark, and report emission.

pub mod algos;
pub mod error;
pub mod harness;
pub mod inference;
pub mod linalg;
pub mod metarl;
pub mod model;
pub mod params;
pub mod recordio;
pub mod repsim;
pub mod rng;
pub mod tape;
pub mod taskgen;
pub mod tensor;

pub use error::{Error, Result};
