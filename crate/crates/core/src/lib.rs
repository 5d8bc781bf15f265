//! Spot-price index construction and simulation of index-tracking VM
//! migration policies.

pub mod catalog;
pub mod index;
pub mod policies;
pub mod presets;
pub mod prices;
mod records;
pub mod simulator;
pub mod synth;
pub mod tracking;

use thiserror::Error;

/// Umbrella error for callers that touch several modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Catalog(#[from] catalog::CatalogError),
    #[error(transparent)]
    Price(#[from] prices::PriceError),
    #[error(transparent)]
    Index(#[from] index::IndexError),
    #[error(transparent)]
    Tracking(#[from] tracking::TrackingError),
    #[error(transparent)]
    Policy(#[from] policies::PolicyError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
    #[error(transparent)]
    Simulation(#[from] simulator::SimError),
}
