//! Likelihood-free Bayesian inference for exchangeable SNP data.
//!
//! The crate simulates labeled SNP windows from a coalescent-with-recombination
//! generative model ([`coalescent`]), defines recombination maps, the hotspot
//! label, and the network input encoding ([`hotspot`]), implements a
//! permutation-invariant neural network with exact analytic gradients
//! ([`exchnet`]), trains it under a fresh-batch-per-step regime or from a fixed
//! dataset ([`training`]), and scores the resulting posteriors with
//! calibration, ROC, coverage, and KL-to-oracle diagnostics ([`eval`]).
//!
//! All randomness flows through counter-derived [`rng`] streams so that every
//! result is a deterministic function of a single root seed, independent of
//! the worker count used by the data-parallel paths in [`par`].

pub mod coalescent;
pub mod eval;
pub mod exchnet;
pub mod hotspot;
pub mod io;
pub mod par;
pub mod rng;
pub mod training;
