//! Factor-model feature extraction for Wi-Fi CSI sensor matrices.
//!
//! The crate is organised around the processing chain:
//!
//! * [`csi`] ingests CSIF frames and produces amplitude and sanitized phase matrices.
//! * [`spectral`] holds the Marčenko–Pastur reference law, empirical spectra and
//!   distances between spectral distributions, and the spiked-eigenvalue limit.
//! * [`hdfm`] removes temporal factors until the residual spectrum matches the
//!   noise law, selecting the factor count and returning the temporal factors.
//! * [`synth`] generates seeded noise and spiked factor models with known truth.
//! * [`features`] computes STFT spectrograms, amplitude/phase fusion and summaries.
//! * [`classify`] provides small native classifiers and accuracy/precision/recall/F1.
//! * [`pipeline`] and [`cli`] wire the pieces together for batch runs.

pub mod classify;
pub mod cli;
pub mod csi;
pub mod error;
pub mod features;
pub mod hdfm;
pub mod io;
pub mod pipeline;
pub mod rng;
pub mod spectral;
pub mod synth;

pub use error::{Error, Result};

/// Dense real matrix used throughout (rows = sensor channels, columns = time).
pub type RealMatrix = nalgebra::DMatrix<f64>;

/// Returns an error if any entry of `m` is NaN or infinite.
pub fn ensure_finite(m: &RealMatrix, what: &str) -> Result<()> {
    if let Some(pos) = m.iter().position(|v| !v.is_finite()) {
        let (r, c) = (pos % m.nrows(), pos / m.nrows());
        return Err(Error::Validation(format!(
            "{what}: non-finite entry at ({r}, {c})"
        )));
    }
    Ok(())
}
