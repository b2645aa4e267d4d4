//! Retrieval of backscatter, extinction, lidar ratio and optical depth from
//! photon-counting high spectral resolution lidar images.

pub mod crossval;
pub mod error;
pub mod experiment;
pub mod forward;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod pipelines;
pub mod simulate;
pub mod standard;
pub mod tv;
pub mod types;

pub use error::{Error, Result};
pub use grid::{adjoint_cumulative_integral, cumulative_integral, transmittance, Grid};
pub use types::{
    invalid_count, AlgorithmTag, Calibration, Channel, EnergyImage, InversionProducts, Observation,
    PhotonImage, ScatterScene,
};

/// The guide's chapters, compiled so their examples stay runnable.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/measurement-model.md")]
    mod measurement_model {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/standard-inversion.md")]
    mod standard_inversion {}
    #[doc = include_str!("../../../book/src/poisson-tv.md")]
    mod poisson_tv {}
    #[doc = include_str!("../../../book/src/choosing-weights.md")]
    mod choosing_weights {}
    #[doc = include_str!("../../../book/src/lidar-ratio-and-extinction.md")]
    mod lidar_ratio_and_extinction {}
    #[doc = include_str!("../../../book/src/scoring.md")]
    mod scoring {}
    #[doc = include_str!("../../../book/src/command-line.md")]
    mod command_line {}
}
