//! Desk-scale laboratory for studying Bayesian neural network uncertainty
//! and adversarial robustness on synthetic data with known input density.
//!
//! The crate is organised around the experiment lifecycle:
//!
//! - [`diffgraph`]: minimal reverse-mode differentiation over scalar losses
//! - [`netmodel`]: classifier networks, dropout masks, parameter flattening
//! - [`inference`]: HMC, MC dropout and deep-ensemble posteriors, MAP training
//! - [`uncertainty`]: predictive entropy and mutual information
//! - [`manifold`]: synthetic latent-mixture datasets with ground-truth density
//! - [`attacks`]: FGM/MIM, noise controls, latent-grid and on-sphere attacks
//! - [`evalharness`]: metrics, theory audits and experiment runners
//! - [`config`]: run configuration and seed derivation

pub mod attacks;
pub mod config;
pub mod diffgraph;
pub mod evalharness;
pub mod inference;
pub mod manifold;
pub mod netmodel;
pub mod uncertainty;
