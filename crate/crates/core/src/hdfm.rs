//! High-dimensional factor model: `R = L F + U`.
//!
//! Temporal factors are removed one principal component at a time. For each
//! level `p` the spectrum of the residual covariance is compared against the
//! Marčenko–Pastur law (or a Monte Carlo noise reference) and the level whose
//! residual looks most like pure noise is kept.
//!
//! Removing `p` components leaves the residual in an `(N - p)`-dimensional
//! subspace: its covariance has `p` structural zero eigenvalues and `N - p`
//! nonzero ones. Only the nonzero part is compared, against the law of an
//! `(N - p) x T` noise matrix.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::spectral::{
    covariance, mp_median, spectral_distance, symmetric_eigen, symmetric_eigenvalues, Ecdf,
    EigenSpectrum, Metric, MpParams, MpQuantiles,
};
use crate::synth::gen_noise;
use crate::{ensure_finite, RealMatrix};

/// `R = L F + U` at level `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorDecomposition {
    /// `N x p`, orthonormal columns.
    pub loadings: RealMatrix,
    /// `p x T`, row `j` is the `j`-th temporal factor.
    pub factors: RealMatrix,
    /// `N x T`.
    pub residual: RealMatrix,
    pub level: usize,
}

impl FactorDecomposition {
    /// `L F + U`.
    pub fn reconstruct(&self) -> RealMatrix {
        &self.loadings * &self.factors + &self.residual
    }
}

/// Eigen-decomposition of `(1/T) R Rᵀ`, shared by every level.
#[derive(Debug, Clone)]
pub struct PrincipalBasis {
    /// Descending eigenvalues.
    pub values: Vec<f64>,
    /// Matching unit eigenvectors in columns, largest component positive.
    pub vectors: DMatrix<f64>,
    pub t: usize,
}

impl PrincipalBasis {
    pub fn new(r: &RealMatrix) -> Result<Self> {
        ensure_finite(r, "input matrix")?;
        let cov = covariance(r)?;
        let (values, vectors) = symmetric_eigen(&cov)?;
        Ok(Self {
            values,
            vectors,
            t: r.ncols(),
        })
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    pub fn loadings(&self, p: usize) -> RealMatrix {
        self.vectors.columns(0, p).into_owned()
    }

    /// Nonzero part of the level-`p` residual spectrum.
    pub fn residual_spectrum(&self, p: usize) -> Result<EigenSpectrum> {
        EigenSpectrum::new(self.values[p..].to_vec(), self.n() - p, self.t)
    }

    pub fn decompose(&self, r: &RealMatrix, p: usize) -> FactorDecomposition {
        let loadings = self.loadings(p);
        let factors = loadings.transpose() * r;
        let residual = r - &loadings * &factors;
        FactorDecomposition {
            loadings,
            factors,
            residual,
            level: p,
        }
    }
}

fn check_level(r: &RealMatrix, p: usize) -> Result<()> {
    let limit = r.nrows().min(r.ncols());
    if p > limit {
        return Err(Error::InvalidArgument(format!(
            "level {p} exceeds min(N, T) = {limit}"
        )));
    }
    Ok(())
}

/// Top-`p` unit eigenvectors `L` of `(1/T) R Rᵀ` and the factors `F = Lᵀ R`.
pub fn top_principal_components(r: &RealMatrix, p: usize) -> Result<(RealMatrix, RealMatrix)> {
    check_level(r, p)?;
    let d = PrincipalBasis::new(r)?.decompose(r, p);
    Ok((d.loadings, d.factors))
}

pub fn decompose(r: &RealMatrix, p: usize) -> Result<FactorDecomposition> {
    check_level(r, p)?;
    Ok(PrincipalBasis::new(r)?.decompose(r, p))
}

/// The `p`-level residual `R - L⁽ᵖ⁾F⁽ᵖ⁾`.
pub fn residual(r: &RealMatrix, p: usize) -> Result<RealMatrix> {
    Ok(decompose(r, p)?.residual)
}

/// Temporal factors `F⁽ᵖ⁾` (`p x T`).
pub fn extract_features(r: &RealMatrix, p: usize) -> Result<RealMatrix> {
    if p == 0 {
        return Err(Error::InvalidArgument("feature extraction needs p >= 1".into()));
    }
    Ok(top_principal_components(r, p)?.1)
}

/// Fixed-`p` principal-component compression, the linear baseline.
pub fn pca_compress(r: &RealMatrix, p: usize) -> Result<RealMatrix> {
    extract_features(r, p)
}

/// Noise variance by median matching: `median(spectrum) / m_c`, where `m_c`
/// is the median of the unit-variance law at the spectrum's aspect ratio.
pub fn estimate_sigma2(spectrum: &EigenSpectrum) -> Result<f64> {
    let median = spectrum
        .median()
        .ok_or_else(|| Error::InvalidArgument("empty spectrum".into()))?;
    if median <= 0.0 || spectrum.top().unwrap_or(0.0) <= 0.0 {
        return Err(Error::InvalidArgument(
            "cannot estimate noise variance from a spectrum whose median is zero".into(),
        ));
    }
    Ok(median / mp_median(spectrum.c())?)
}

/// Reference distribution for the residual spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    #[default]
    AnalyticMp,
    /// Pooled spectra of seeded Gaussian noise matrices.
    MonteCarlo,
}

impl std::str::FromStr for Reference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analytic_mp" | "analytic" | "mp" => Ok(Reference::AnalyticMp),
            "monte_carlo" | "mc" => Ok(Reference::MonteCarlo),
            other => Err(Error::InvalidArgument(format!("unknown reference {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sigma2Mode {
    /// Median matching on each level's residual spectrum ([`estimate_sigma2`]).
    FitMedian,
    Fixed(f64),
    /// Chosen per level to minimise the Wasserstein-1 distance between the
    /// residual spectrum and the scaled reference, i.e. a joint fit of
    /// `(p, σ²)`.
    #[default]
    FitDistance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    SmallestP,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HdfmConfig {
    pub p_max: usize,
    pub metric: Metric,
    pub reference: Reference,
    pub mc_trials: usize,
    pub seed: u64,
    pub sigma2_mode: Sigma2Mode,
    pub tie_break: TieBreak,
    /// Levels whose distance lies within `parsimony_tolerance` of the minimum
    /// count as tied. Measured in units of one eigenvalue's share of the
    /// spectrum: `σ̂²/N` for Wasserstein-1, `1/N` for Kolmogorov–Smirnov.
    pub parsimony_tolerance: f64,
    /// Stop the scan at the first level whose distance is at or below this value.
    pub early_stop_tolerance: Option<f64>,
}

impl Default for HdfmConfig {
    fn default() -> Self {
        Self {
            p_max: 15,
            metric: Metric::Wasserstein1,
            reference: Reference::AnalyticMp,
            mc_trials: 10,
            seed: 0,
            sigma2_mode: Sigma2Mode::FitDistance,
            tie_break: TieBreak::SmallestP,
            parsimony_tolerance: 0.35,
            early_stop_tolerance: None,
        }
    }
}

impl HdfmConfig {
    fn validate(&self, n: usize) -> Result<()> {
        if self.p_max >= n {
            return Err(Error::InvalidArgument(format!(
                "p_max = {} must be below N = {n}",
                self.p_max
            )));
        }
        if self.mc_trials == 0 {
            return Err(Error::InvalidArgument("mc_trials must be at least 1".into()));
        }
        if !(self.parsimony_tolerance >= 0.0 && self.parsimony_tolerance.is_finite()) {
            return Err(Error::InvalidArgument("parsimony_tolerance must be nonnegative".into()));
        }
        if let Some(t) = self.early_stop_tolerance {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::InvalidArgument("early_stop_tolerance must be nonnegative".into()));
            }
        }
        if let Sigma2Mode::Fixed(v) = self.sigma2_mode {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("fixed sigma2 must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// One point of the distance curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelScore {
    pub p: usize,
    pub distance: f64,
    pub sigma2: f64,
}

#[derive(Debug, Clone)]
pub struct HdfmResult {
    pub p_hat: usize,
    pub sigma2_hat: f64,
    pub distance_curve: Vec<LevelScore>,
    /// `p̂ x T` temporal factors.
    pub features: RealMatrix,
    pub decomposition: FactorDecomposition,
}

/// Rows whose values never change over time.
pub fn degenerate_rows(r: &RealMatrix) -> Vec<usize> {
    (0..r.nrows())
        .filter(|&i| {
            let row = r.row(i);
            let first = row[0];
            row.iter().all(|&v| v == first)
        })
        .collect()
}

/// Standard-noise spectra for the Monte Carlo reference. The leading
/// `(N-p) x (N-p)` block of an `N x N` noise covariance is the covariance of
/// the first `N-p` noise rows, so one draw per trial serves every level.
struct NoiseBank {
    covariances: Vec<DMatrix<f64>>,
}

impl NoiseBank {
    fn new(n: usize, t: usize, trials: usize, seed: u64) -> Result<Self> {
        let covariances = (0..trials)
            .into_par_iter()
            .map(|k| covariance(&gen_noise(n, t, 1.0, derive_seed(seed, &[0x4d43, k as u64]))?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { covariances })
    }

    fn pooled(&self, m: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(m * self.covariances.len());
        for c in &self.covariances {
            let block = c.view((0, 0), (m, m)).into_owned();
            out.extend(symmetric_eigenvalues(&block)?.into_iter().map(|v| v.max(0.0)));
        }
        Ok(out)
    }
}

fn level_score(
    basis: &PrincipalBasis,
    p: usize,
    config: &HdfmConfig,
    bank: Option<&NoiseBank>,
) -> Result<LevelScore> {
    let spectrum = basis.residual_spectrum(p)?;
    let m = spectrum.len();
    let unit: Vec<f64> = match bank {
        None => {
            let params = MpParams::for_shape(1.0, m, basis.t)?;
            MpQuantiles::new(params.c()).midpoint_quantiles(m)
        }
        Some(bank) => bank.pooled(m)?,
    };
    let sigma2 = match config.sigma2_mode {
        Sigma2Mode::FitMedian => estimate_sigma2(&spectrum)?,
        Sigma2Mode::Fixed(v) => v,
        Sigma2Mode::FitDistance => w1_scale_fit(spectrum.values(), &unit),
    };
    let reference: Vec<f64> = unit.iter().map(|v| v * sigma2).collect();
    let distance = spectral_distance(
        &Ecdf::from_samples(spectrum.values())?,
        &Ecdf::from_samples(&reference)?,
        config.metric,
    )?;
    Ok(LevelScore { p, distance, sigma2 })
}

/// Scale `s` minimising `∫|Q_x(u) - s·Q_ref(u)| du`: a weighted median of
/// the quantile ratios with the reference quantiles as weights.
fn w1_scale_fit(samples: &[f64], unit_reference: &[f64]) -> f64 {
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let mut r = unit_reference.to_vec();
    r.sort_by(f64::total_cmp);
    let m = x.len();
    let k = r.len();
    // reference quantile at each sample's midpoint level
    let mut pairs: Vec<(f64, f64)> = (0..m)
        .filter_map(|i| {
            let idx = (((i as f64 + 0.5) / m as f64) * k as f64) as usize;
            let q = r[idx.min(k - 1)];
            (q > 0.0).then(|| (x[i] / q, q))
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let mut acc = 0.0;
    for (ratio, w) in &pairs {
        acc += w;
        if acc >= 0.5 * total {
            return *ratio;
        }
    }
    pairs.last().map_or(1.0, |p| p.0)
}

/// Picks the smallest level whose distance is within the parsimony
/// tolerance of the curve minimum.
pub fn select_level(curve: &[LevelScore], metric: Metric, tolerance: f64, n: usize) -> Option<usize> {
    let best = curve
        .iter()
        .min_by(|a, b| a.distance.total_cmp(&b.distance).then(a.p.cmp(&b.p)))?;
    let unit = match metric {
        Metric::Wasserstein1 => best.sigma2 / n as f64,
        Metric::KolmogorovSmirnov => 1.0 / n as f64,
    };
    let threshold = best.distance + tolerance * unit;
    curve.iter().find(|s| s.distance <= threshold).map(|s| s.p)
}

/// Selects the number of temporal factors and returns them.
pub fn fit_factor_count(r: &RealMatrix, config: &HdfmConfig) -> Result<HdfmResult> {
    let (n, t) = r.shape();
    if n < 4 {
        return Err(Error::InvalidArgument(format!("need at least 4 rows, got {n}")));
    }
    if n > t {
        return Err(Error::InvalidArgument(format!(
            "need N <= T for the noise law (got {n} x {t}); transpose or collect more samples"
        )));
    }
    config.validate(n)?;
    ensure_finite(r, "input matrix")?;
    let bad = degenerate_rows(r);
    if !bad.is_empty() {
        return Err(Error::DegenerateRows(bad));
    }

    let basis = PrincipalBasis::new(r)?;
    let bank = match config.reference {
        Reference::AnalyticMp => None,
        Reference::MonteCarlo => Some(NoiseBank::new(n, t, config.mc_trials, config.seed)?),
    };
    let mut curve = (0..=config.p_max)
        .into_par_iter()
        .map(|p| level_score(&basis, p, config, bank.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    if let Some(tol) = config.early_stop_tolerance {
        if let Some(stop) = curve.iter().position(|s| s.distance <= tol) {
            curve.truncate(stop + 1);
        }
    }

    let p_hat = select_level(&curve, config.metric, config.parsimony_tolerance, n)
        .expect("distance curve has at least one level");
    let sigma2_hat = curve[p_hat].sigma2;
    let decomposition = basis.decompose(r, p_hat);
    Ok(HdfmResult {
        p_hat,
        sigma2_hat,
        features: decomposition.factors.clone(),
        distance_curve: curve,
        decomposition,
    })
}

/// Largest principal angle, in degrees, between the row spans of `a` and
/// `b` (both `k x T`, any `k`). Returns 90 when the ranks differ.
pub fn max_principal_angle_deg(a: &RealMatrix, b: &RealMatrix) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!("row spans in R^{} and R^{}", a.ncols(), b.ncols())));
    }
    if a.nrows() != b.nrows() {
        return Ok(90.0);
    }
    if a.nrows() == 0 {
        return Ok(0.0);
    }
    let qa = a.transpose().qr().q();
    let qb = b.transpose().qr().q();
    let sv = (qa.transpose() * qb).singular_values();
    let smallest = sv.iter().copied().fold(f64::INFINITY, f64::min).clamp(0.0, 1.0);
    Ok(smallest.acos().to_degrees())
}
