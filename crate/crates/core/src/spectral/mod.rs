//! Spectral tools: sample covariance, eigen-spectra, the Marčenko–Pastur law,
//! empirical CDFs with distances between them, and the spiked-eigenvalue limit.

mod ecdf;
mod eigen;
mod mp;

pub use ecdf::{ks_to_cdf, spectral_distance, Ecdf, Metric};
pub use eigen::{covariance, eigenvalues, spectrum_of, symmetric_eigen, symmetric_eigenvalues, EigenSpectrum};
pub use mp::{mp_cdf, mp_edges, mp_median, mp_pdf, spiked_limit, MpParams, MpQuantiles};

use std::io::Write;

use crate::error::{Error, Result};

/// Writes `index,eigenvalue` rows.
pub fn write_spectrum_csv<W: Write>(mut w: W, spectrum: &EigenSpectrum) -> Result<()> {
    let io = |e| Error::io("<spectrum csv>", e);
    writeln!(w, "index,eigenvalue").map_err(io)?;
    for (i, v) in spectrum.values().iter().enumerate() {
        writeln!(w, "{i},{v:e}").map_err(io)?;
    }
    Ok(())
}

/// Writes the reference law as `x,pdf,cdf` over `points` evenly spaced
/// abscissae spanning the support (with a 10% margin on each side).
pub fn write_mp_reference_csv<W: Write>(mut w: W, params: MpParams, points: usize) -> Result<()> {
    let io = |e| Error::io("<mp csv>", e);
    let (a, b) = mp_edges(params);
    let margin = 0.1 * (b - a);
    let lo = (a - margin).max(0.0);
    let hi = b + margin;
    let table = MpQuantiles::new(params.c());
    writeln!(w, "x,pdf,cdf").map_err(io)?;
    let points = points.max(2);
    for k in 0..points {
        let x = lo + (hi - lo) * k as f64 / (points - 1) as f64;
        let cdf = table.cdf(x / params.sigma2());
        writeln!(w, "{x:e},{:e},{cdf:e}", mp_pdf(x, params)).map_err(io)?;
    }
    Ok(())
}
