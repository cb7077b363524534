//! Cascade neural network for predicting surface plasmon polariton
//! wavelength and propagation length of thin metal films, trained through a
//! four-stage producer/consumer pipeline with spectral output validation.

pub mod cascade;
pub mod dataset;
pub mod nncore;
pub mod omegaval;
pub mod physics;
pub mod pipeline;
pub mod provenance;
