//! STFT spectrograms, amplitude/phase fusion and fixed-length row summaries.

use std::io::Write;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::RealMatrix;

/// Lower clamp of the spectrogram magnitude in dB.
pub const DB_FLOOR: f64 = -120.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    /// Periodic Hann window.
    #[default]
    Hann,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / len as f64).cos())
                .collect(),
            Window::Rectangular => vec![1.0; len],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop_len: usize,
    pub nfft: usize,
    pub sample_rate_hz: f64,
    pub window: Window,
    /// Subtract each frame's mean before windowing.
    pub detrend: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_len: 256,
            hop_len: 64,
            nfft: 256,
            sample_rate_hz: 1000.0,
            window: Window::Hann,
            detrend: true,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 {
            return Err(Error::InvalidArgument("window_len must be at least 1".into()));
        }
        if self.hop_len == 0 {
            return Err(Error::InvalidArgument("hop_len must be at least 1".into()));
        }
        if self.nfft < self.window_len {
            return Err(Error::InvalidArgument(format!(
                "nfft {} is shorter than window_len {}",
                self.nfft, self.window_len
            )));
        }
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        Ok(())
    }
}

/// Reusable transform for one configuration.
pub struct FrameTransform {
    config: StftConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl FrameTransform {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(config.nfft);
        Ok(Self {
            window: config.window.coefficients(config.window_len),
            fft,
            config,
        })
    }

    /// Full `nfft`-point spectrum of one `window_len` frame (detrended,
    /// windowed, zero-padded).
    pub fn spectrum(&self, frame: &[f64]) -> Vec<Complex64> {
        assert_eq!(frame.len(), self.config.window_len, "frame length must equal window_len");
        let mean = if self.config.detrend {
            frame.iter().sum::<f64>() / frame.len() as f64
        } else {
            0.0
        };
        let mut buf = vec![Complex64::new(0.0, 0.0); self.config.nfft];
        for ((b, x), w) in buf.iter_mut().zip(frame).zip(&self.window) {
            *b = Complex64::new((x - mean) * w, 0.0);
        }
        self.fft.process(&mut buf);
        buf
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub freq_bins: usize,
    pub time_frames: usize,
    /// `freq_bins x time_frames`.
    pub magnitude_db: RealMatrix,
    pub sample_rate_hz: f64,
    pub window_len: usize,
    pub hop_len: usize,
    pub nfft: usize,
}

pub fn to_db(magnitude: f64) -> f64 {
    (20.0 * (magnitude + 1e-12).log10()).max(DB_FLOOR)
}

pub fn stft(signal: &[f64], config: &StftConfig) -> Result<Spectrogram> {
    let transform = FrameTransform::new(*config)?;
    if signal.len() < config.window_len {
        return Err(Error::InvalidArgument(format!(
            "signal of {} samples is shorter than the {}-sample window",
            signal.len(),
            config.window_len
        )));
    }
    if signal.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("signal has non-finite samples".into()));
    }
    let freq_bins = config.nfft / 2 + 1;
    let time_frames = (signal.len() - config.window_len) / config.hop_len + 1;
    let mut magnitude_db = RealMatrix::zeros(freq_bins, time_frames);
    for f in 0..time_frames {
        let start = f * config.hop_len;
        let spec = transform.spectrum(&signal[start..start + config.window_len]);
        for k in 0..freq_bins {
            magnitude_db[(k, f)] = to_db(spec[k].norm());
        }
    }
    Ok(Spectrogram {
        freq_bins,
        time_frames,
        magnitude_db,
        sample_rate_hz: config.sample_rate_hz,
        window_len: config.window_len,
        hop_len: config.hop_len,
        nfft: config.nfft,
    })
}

impl Spectrogram {
    pub fn frequency_hz(&self, bin: usize) -> f64 {
        bin as f64 * self.sample_rate_hz / self.nfft as f64
    }

    /// Centre time of a frame in seconds.
    pub fn time_s(&self, frame: usize) -> f64 {
        (frame * self.hop_len) as f64 / self.sample_rate_hz + self.window_len as f64 / (2.0 * self.sample_rate_hz)
    }

    /// Bin of maximal magnitude per frame (lowest bin on ties).
    pub fn peak_bins(&self) -> Vec<usize> {
        (0..self.time_frames)
            .map(|f| {
                let col = self.magnitude_db.column(f);
                let mut best = 0;
                for k in 1..self.freq_bins {
                    if col[k] > col[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    /// One row per frequency bin: `freq_hz` then one dB value per frame.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "freq_hz")?;
        for f in 0..self.time_frames {
            write!(w, ",t_{}", self.time_s(f))?;
        }
        writeln!(w)?;
        for k in 0..self.freq_bins {
            write!(w, "{}", self.frequency_hz(k))?;
            for f in 0..self.time_frames {
                write!(w, ",{}", self.magnitude_db[(k, f)])?;
            }
            writeln!(w)?;
        }
        w.flush()
    }

    /// 8-bit image, frames left to right, highest frequency on the top row;
    /// `[DB_FLOOR, max]` maps linearly onto `[0, 255]`.
    pub fn to_pgm_pixels(&self) -> Vec<u8> {
        let max = self.magnitude_db.max();
        let span = max - DB_FLOOR;
        let mut px = Vec::with_capacity(self.freq_bins * self.time_frames);
        for k in (0..self.freq_bins).rev() {
            for f in 0..self.time_frames {
                let v = if span > 0.0 {
                    ((self.magnitude_db[(k, f)] - DB_FLOOR) / span * 255.0).round()
                } else {
                    0.0
                };
                px.push(v.clamp(0.0, 255.0) as u8);
            }
        }
        px
    }

    pub fn write_pgm<W: Write>(&self, w: W) -> std::io::Result<()> {
        crate::io::write_pgm(w, self.time_frames, self.freq_bins, &self.to_pgm_pixels())
    }
}

/// Amplitude factors stacked above phase factors (`2p x T`).
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeatures {
    matrix: RealMatrix,
    p: usize,
}

impl FusedFeatures {
    pub fn matrix(&self) -> &RealMatrix {
        &self.matrix
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn into_matrix(self) -> RealMatrix {
        self.matrix
    }
}

pub fn fuse(amp_factors: &RealMatrix, phase_factors: &RealMatrix) -> Result<FusedFeatures> {
    if amp_factors.shape() != phase_factors.shape() {
        return Err(Error::Shape(format!(
            "amplitude factors {:?} and phase factors {:?} differ",
            amp_factors.shape(),
            phase_factors.shape()
        )));
    }
    let (p, t) = amp_factors.shape();
    let mut matrix = RealMatrix::zeros(2 * p, t);
    matrix.rows_mut(0, p).copy_from(amp_factors);
    matrix.rows_mut(p, p).copy_from(phase_factors);
    Ok(FusedFeatures { matrix, p })
}

pub fn unstack(fused: &FusedFeatures) -> (RealMatrix, RealMatrix) {
    let p = fused.p;
    (fused.matrix.rows(0, p).into_owned(), fused.matrix.rows(p, p).into_owned())
}

/// Statistics emitted per row by [`summarize`].
pub const SUMMARY_STATS: [&str; 6] = ["mean", "std", "min", "max", "iqr", "mean_abs_diff"];

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per row: mean, population standard deviation, min, max, interquartile
/// range and mean absolute successive difference, concatenated row by row.
pub fn summarize(features: &RealMatrix) -> Result<Vec<f64>> {
    let t = features.ncols();
    if t < 8 {
        return Err(Error::InvalidArgument(format!("summaries need at least 8 columns, got {t}")));
    }
    crate::ensure_finite(features, "features")?;
    let mut out = Vec::with_capacity(6 * features.nrows());
    let mut sorted = vec![0.0; t];
    for row in features.row_iter() {
        let mean = row.sum() / t as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64;
        for (s, v) in sorted.iter_mut().zip(row.iter()) {
            *s = *v;
        }
        sorted.sort_by(f64::total_cmp);
        let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
        let mad = row.iter().zip(row.iter().skip(1)).map(|(a, b)| (b - a).abs()).sum::<f64>() / (t - 1) as f64;
        out.extend_from_slice(&[mean, var.sqrt(), sorted[0], sorted[t - 1], iqr, mad]);
    }
    Ok(out)
}
