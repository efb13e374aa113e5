//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use csi_hdfm::classify::{self, ConfusionMatrix};
use csi_hdfm::csi::{self, Complex64, SlopeFit};
use csi_hdfm::features::{self, StftConfig, Window};
use csi_hdfm::hdfm::{self, HdfmConfig, Reference, Sigma2Mode};
use csi_hdfm::spectral::{self, Metric, MpParams};
use csi_hdfm::{synth, Error, RealMatrix};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> PyResult<RealMatrix> {
    let n = rows.len();
    let t = rows.first().map_or(0, Vec::len);
    if n == 0 || t == 0 {
        return Err(PyValueError::new_err("matrix must be non-empty"));
    }
    if rows.iter().any(|r| r.len() != t) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(RealMatrix::from_fn(n, t, |i, j| rows[i][j]))
}

fn to_rows(m: &RealMatrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn params(sigma2: f64, c: f64) -> PyResult<MpParams> {
    MpParams::new(sigma2, c).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (x, c, sigma2 = 1.0))]
fn mp_pdf(x: f64, c: f64, sigma2: f64) -> PyResult<f64> {
    Ok(spectral::mp_pdf(x, params(sigma2, c)?))
}

#[pyfunction]
#[pyo3(signature = (x, c, sigma2 = 1.0))]
fn mp_cdf(x: f64, c: f64, sigma2: f64) -> PyResult<f64> {
    Ok(spectral::mp_cdf(x, params(sigma2, c)?))
}

#[pyfunction]
#[pyo3(signature = (c, sigma2 = 1.0))]
fn mp_edges(c: f64, sigma2: f64) -> PyResult<(f64, f64)> {
    Ok(spectral::mp_edges(params(sigma2, c)?))
}

/// Almost-sure limit of the top sample eigenvalue for a spike of strength `lam`.
#[pyfunction]
#[pyo3(signature = (lam, c, sigma2 = 1.0))]
fn spiked_limit(lam: f64, c: f64, sigma2: f64) -> PyResult<f64> {
    Ok(spectral::spiked_limit(lam, params(sigma2, c)?))
}

/// Eigenvalues of `(1/T) R Rᵀ`, ascending.
#[pyfunction]
fn eigenvalues(r: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let s = spectral::spectrum_of(&to_matrix(&r)?).map_err(py_err)?;
    Ok(s.values().to_vec())
}

#[pyfunction]
#[pyo3(signature = (n, t, sigma2 = 1.0, seed = 0))]
fn gen_noise(n: usize, t: usize, sigma2: f64, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    Ok(to_rows(&synth::gen_noise(n, t, sigma2, seed).map_err(py_err)?))
}

#[pyclass(module = "csi_hdfm_py", get_all)]
struct SpikedSample {
    r: Vec<Vec<f64>>,
    loadings: Vec<Vec<f64>>,
    factors: Vec<Vec<f64>>,
}

#[pyfunction]
#[pyo3(signature = (n, t, strengths, sigma2 = 1.0, seed = 0))]
fn gen_spiked(n: usize, t: usize, strengths: Vec<f64>, sigma2: f64, seed: u64) -> PyResult<SpikedSample> {
    let s = synth::gen_spiked(&synth::SpikedModelSpec {
        n,
        t,
        strengths,
        sigma2,
        seed,
    })
    .map_err(py_err)?;
    Ok(SpikedSample {
        r: to_rows(&s.r),
        loadings: to_rows(&s.loadings),
        factors: to_rows(&s.factors),
    })
}

#[pyclass(module = "csi_hdfm_py", get_all)]
struct HdfmResult {
    p_hat: usize,
    sigma2_hat: f64,
    /// `(p, distance, sigma2)` per scanned level.
    distance_curve: Vec<(usize, f64, f64)>,
    features: Vec<Vec<f64>>,
    loadings: Vec<Vec<f64>>,
}

/// Selects the factor count of `r` by matching residual spectra to the
/// Marčenko–Pastur law.
#[pyfunction]
#[pyo3(signature = (r, p_max = None, metric = "wasserstein1", reference = "analytic_mp", mc_trials = 10, sigma2 = None, seed = 0))]
fn fit_factor_count(
    r: Vec<Vec<f64>>,
    p_max: Option<usize>,
    metric: &str,
    reference: &str,
    mc_trials: usize,
    sigma2: Option<f64>,
    seed: u64,
) -> PyResult<HdfmResult> {
    let r = to_matrix(&r)?;
    let config = HdfmConfig {
        p_max: p_max.unwrap_or_else(|| 15.min(r.nrows() - 1)),
        metric: metric.parse::<Metric>().map_err(py_err)?,
        reference: reference.parse::<Reference>().map_err(py_err)?,
        mc_trials,
        sigma2_mode: sigma2.map_or(Sigma2Mode::FitDistance, Sigma2Mode::Fixed),
        seed,
        ..HdfmConfig::default()
    };
    let res = hdfm::fit_factor_count(&r, &config).map_err(py_err)?;
    Ok(HdfmResult {
        p_hat: res.p_hat,
        sigma2_hat: res.sigma2_hat,
        distance_curve: res.distance_curve.iter().map(|l| (l.p, l.distance, l.sigma2)).collect(),
        features: to_rows(&res.features),
        loadings: to_rows(&res.decomposition.loadings),
    })
}

/// Top-`p` PCA scores `Lᵀ R`.
#[pyfunction]
fn pca_compress(r: Vec<Vec<f64>>, p: usize) -> PyResult<Vec<Vec<f64>>> {
    Ok(to_rows(&hdfm::pca_compress(&to_matrix(&r)?, p).map_err(py_err)?))
}

#[pyfunction]
fn max_principal_angle_deg(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    hdfm::max_principal_angle_deg(&to_matrix(&a)?, &to_matrix(&b)?).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (phase, subcarrier_index = None, slope_fit = "least_squares"))]
fn sanitize_phase(phase: Vec<Vec<f64>>, subcarrier_index: Option<Vec<i32>>, slope_fit: &str) -> PyResult<Vec<Vec<f64>>> {
    let fit = match slope_fit {
        "least_squares" | "ls" => SlopeFit::LeastSquares,
        "end_points" | "endpoints" => SlopeFit::EndPoints,
        other => return Err(PyValueError::new_err(format!("unknown slope fit {other:?}"))),
    };
    let k = subcarrier_index.unwrap_or_else(|| csi::INTEL5300_SUBCARRIERS.to_vec());
    Ok(to_rows(&csi::sanitize_phase(&to_matrix(&phase)?, &k, fit).map_err(py_err)?))
}

/// Short-time Fourier transform magnitude in dB, `freq_bins x time_frames`.
#[pyfunction]
#[pyo3(signature = (signal, window_len = 256, hop_len = 64, nfft = 256, sample_rate_hz = 1000.0, window = "hann", detrend = true))]
fn stft(
    signal: Vec<f64>,
    window_len: usize,
    hop_len: usize,
    nfft: usize,
    sample_rate_hz: f64,
    window: &str,
    detrend: bool,
) -> PyResult<Vec<Vec<f64>>> {
    let window = match window {
        "hann" => Window::Hann,
        "rectangular" | "rect" => Window::Rectangular,
        other => return Err(PyValueError::new_err(format!("unknown window {other:?}"))),
    };
    let config = StftConfig {
        window_len,
        hop_len,
        nfft,
        sample_rate_hz,
        window,
        detrend,
    };
    Ok(to_rows(&features::stft(&signal, &config).map_err(py_err)?.magnitude_db))
}

/// Per-row summary statistics of a feature matrix, flattened row by row.
#[pyfunction]
fn summarize(matrix: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    features::summarize(&to_matrix(&matrix)?).map_err(py_err)
}

#[pyclass(module = "csi_hdfm_py", get_all)]
struct Metrics {
    accuracy: f64,
    precision: f64,
    recall: f64,
    f1: f64,
    /// `(precision, recall, f1)` per class.
    per_class: Vec<(f64, f64, f64)>,
}

/// Metrics from a row-major `k x k` confusion matrix (rows are true labels).
#[pyfunction]
fn metrics(counts: Vec<Vec<u64>>) -> PyResult<Metrics> {
    let k = counts.len();
    if counts.iter().any(|r| r.len() != k) {
        return Err(PyValueError::new_err("confusion matrix must be square"));
    }
    let cm = ConfusionMatrix::from_counts(k, counts.concat()).map_err(py_err)?;
    let m = classify::metrics(&cm).map_err(py_err)?;
    Ok(Metrics {
        accuracy: m.accuracy,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        per_class: m.per_class.iter().map(|c| (c.precision, c.recall, c.f1)).collect(),
    })
}

/// A CSI frame: `N = n_tx·n_rx·n_sc` rows by `T` packets of complex gains.
#[pyclass(module = "csi_hdfm_py")]
struct CsiFrame {
    inner: csi::CsiFrame,
}

#[pymethods]
impl CsiFrame {
    #[new]
    #[pyo3(signature = (n_tx, n_rx, n_sc, sample_rate_hz, real, imag = None))]
    fn new(n_tx: u16, n_rx: u16, n_sc: u16, sample_rate_hz: f64, real: Vec<Vec<f64>>, imag: Option<Vec<Vec<f64>>>) -> PyResult<Self> {
        let re = to_matrix(&real)?;
        let im = match imag {
            Some(rows) => to_matrix(&rows)?,
            None => RealMatrix::zeros(re.nrows(), re.ncols()),
        };
        if im.shape() != re.shape() {
            return Err(PyValueError::new_err("real and imaginary parts differ in shape"));
        }
        let data = re.zip_map(&im, Complex64::new);
        let inner = csi::CsiFrame::new(n_tx, n_rx, n_sc, sample_rate_hz, data).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: csi::load_frame(&path).map_err(py_err)?,
        })
    }

    fn store(&self, path: PathBuf) -> PyResult<()> {
        csi::store_frame(&path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.n(), self.inner.t())
    }

    #[getter]
    fn antennas(&self) -> (u16, u16, u16) {
        (self.inner.n_tx(), self.inner.n_rx(), self.inner.n_sc())
    }

    #[getter]
    fn sample_rate_hz(&self) -> f64 {
        self.inner.sample_rate_hz()
    }

    fn amplitude(&self) -> Vec<Vec<f64>> {
        to_rows(&csi::amplitude(&self.inner))
    }

    /// Raw phase in `(-π, π]`.
    fn phase(&self) -> Vec<Vec<f64>> {
        to_rows(&csi::phase(&self.inner).0)
    }

    fn __repr__(&self) -> String {
        let (n, t) = self.shape();
        format!("CsiFrame(n={n}, t={t}, fs={})", self.inner.sample_rate_hz())
    }
}

#[pymodule]
fn csi_hdfm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<CsiFrame>()?;
    m.add_class::<HdfmResult>()?;
    m.add_class::<SpikedSample>()?;
    m.add_class::<Metrics>()?;
    m.add_function(wrap_pyfunction!(mp_pdf, m)?)?;
    m.add_function(wrap_pyfunction!(mp_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(mp_edges, m)?)?;
    m.add_function(wrap_pyfunction!(spiked_limit, m)?)?;
    m.add_function(wrap_pyfunction!(eigenvalues, m)?)?;
    m.add_function(wrap_pyfunction!(gen_noise, m)?)?;
    m.add_function(wrap_pyfunction!(gen_spiked, m)?)?;
    m.add_function(wrap_pyfunction!(fit_factor_count, m)?)?;
    m.add_function(wrap_pyfunction!(pca_compress, m)?)?;
    m.add_function(wrap_pyfunction!(max_principal_angle_deg, m)?)?;
    m.add_function(wrap_pyfunction!(sanitize_phase, m)?)?;
    m.add_function(wrap_pyfunction!(stft, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    Ok(())
}
