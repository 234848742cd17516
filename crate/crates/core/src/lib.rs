//! Simulation and numerical analysis of critical contact processes on
//! finite kernel spaces and continuum tori.
//!
//! The crate is organised around [`space::KernelSpace`]: the walk and contact
//! simulators sample from it, the correlation hierarchy integrates against
//! it, and the estimators compare the two.

pub mod alias;
pub mod contact;
pub mod estimators;
pub mod hierarchy;
pub mod kernel_io;
pub mod rng;
pub mod space;
pub mod sparse;
pub mod stats;
pub mod walk;

mod union_find;
