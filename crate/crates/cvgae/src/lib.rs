//! Conditional variational graph autoencoder for molecular conformation
//! generation: SDF ingestion and featurization, message-passing prior /
//! posterior / likelihood networks trained with a post-alignment likelihood,
//! sampling inference, and an RMSD/diversity evaluation harness.

pub mod align;
pub mod autodiff;
pub mod cli;
pub mod eval;
pub mod molgraph;
pub mod mpnn;
pub mod train;
pub mod vae;
