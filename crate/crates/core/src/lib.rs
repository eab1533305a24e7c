//! Deep hedging across a family of market models.
//!
//! A single feed-forward network produces hedge ratios for every task in the
//! family. Each task (one parameterized market model) owns a low-dimensional
//! embedding vector that is concatenated with the market features, so a new
//! market regime can be absorbed by fitting one embedding row while the
//! shared weights stay frozen.
//!
//! Modules, bottom-up:
//!
//! - [`market_models`]: seeded path simulation for GBM, Heston, Heston with
//!   jumps and Barndorff-Nielsen-Shephard.
//! - [`claims`]: payoff, gains from trading and terminal PnL.
//! - [`neural`]: embedding table plus SELU MLP with hand-written backprop.
//! - [`training`]: quadratic hedging loss, Adam, full and embedding-only fits.
//! - [`analytic`]: Black-Scholes price, delta and delta-hedging benchmark.
//! - [`evaluation`]: PnL statistics, histograms, delta slices, implied vols.

pub mod analytic;
pub mod claims;
pub mod error;
pub mod evaluation;
pub mod market_models;
pub mod neural;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
