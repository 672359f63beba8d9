//! Simulation and analysis toolkit for a single quantum dot strongly coupled
//! to a photonic-crystal nanocavity.

pub mod cli;
pub mod dynamics;
pub mod error;
pub mod fitkit;
pub mod hbt;
pub mod hilbert;
pub mod instrument;
pub mod polariton;
pub mod rng;
pub mod specdiff;
pub mod spectrum;
pub mod trajectories;
pub mod units;

pub use error::{Error, Result};
