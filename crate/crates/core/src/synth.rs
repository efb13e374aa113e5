//! Seeded synthetic ground truth: Gaussian noise, spiked factor models, and
//! labelled multi-class datasets.

use std::collections::HashSet;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csi::CsiFrame;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::RealMatrix;

/// I.i.d. `N(0, sigma2)` matrix of shape `n x t`.
pub fn gen_noise(n: usize, t: usize, sigma2: f64, seed: u64) -> Result<RealMatrix> {
    if n == 0 || t == 0 {
        return Err(Error::InvalidArgument(format!("noise shape must be nonzero, got {n}x{t}")));
    }
    if !(sigma2.is_finite() && sigma2 > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma2 must be positive, got {sigma2}")));
    }
    Ok(standard_gaussian(n, t, seed) * sigma2.sqrt())
}

fn standard_gaussian(n: usize, t: usize, seed: u64) -> RealMatrix {
    let mut rng = rng_from_seed(seed);
    // fill row by row so the stream order matches the row-major file layout
    let mut m = DMatrix::zeros(n, t);
    for i in 0..n {
        for j in 0..t {
            m[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    m
}

/// Seeded random `n x p` matrix with orthonormal columns (Gram–Schmidt on a
/// Gaussian draw, sign fixed by a positive `R` diagonal).
pub fn random_orthonormal(n: usize, p: usize, seed: u64) -> Result<RealMatrix> {
    if p > n {
        return Err(Error::InvalidArgument(format!("cannot fit {p} orthonormal columns in dimension {n}")));
    }
    if p == 0 {
        return Ok(DMatrix::zeros(n, 0));
    }
    let g = standard_gaussian(n, p, seed);
    let qr = g.qr();
    let (q, r) = qr.unpack();
    let mut q = q.columns(0, p).into_owned();
    for j in 0..p {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

/// Parameters of `R = L F + U`: `L = Q diag(√λ)`, standard Gaussian `F`,
/// noise `U ~ N(0, σ²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikedModelSpec {
    pub n: usize,
    pub t: usize,
    pub strengths: Vec<f64>,
    pub sigma2: f64,
    pub seed: u64,
}

impl SpikedModelSpec {
    pub fn validate(&self) -> Result<()> {
        let p = self.strengths.len();
        if self.n == 0 || self.t == 0 {
            return Err(Error::InvalidArgument("n and t must be positive".into()));
        }
        if p >= self.n {
            return Err(Error::InvalidArgument(format!(
                "factor count {p} must be below n = {}",
                self.n
            )));
        }
        if !(self.sigma2.is_finite() && self.sigma2 > 0.0) {
            return Err(Error::InvalidArgument("sigma2 must be positive".into()));
        }
        if self.strengths.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument("strengths must be positive".into()));
        }
        if self.strengths.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::InvalidArgument("strengths must be strictly descending".into()));
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.strengths.len()
    }

    /// Aspect ratio `n/t`.
    pub fn c(&self) -> f64 {
        self.n as f64 / self.t as f64
    }
}

/// A planted factor model with its ground truth parts.
#[derive(Debug, Clone)]
pub struct SpikedSample {
    pub r: RealMatrix,
    pub loadings: RealMatrix,
    pub factors: RealMatrix,
    pub noise: RealMatrix,
}

pub fn gen_spiked(spec: &SpikedModelSpec) -> Result<SpikedSample> {
    spec.validate()?;
    let p = spec.p();
    let q = random_orthonormal(spec.n, p, derive_seed(spec.seed, &[1]))?;
    let mut loadings = q;
    for (j, s) in spec.strengths.iter().enumerate() {
        loadings.column_mut(j).scale_mut(s.sqrt());
    }
    let factors = if p == 0 {
        DMatrix::zeros(0, spec.t)
    } else {
        standard_gaussian(p, spec.t, derive_seed(spec.seed, &[2]))
    };
    let noise = gen_noise(spec.n, spec.t, spec.sigma2, derive_seed(spec.seed, &[3]))?;
    let r = &loadings * &factors + &noise;
    Ok(SpikedSample {
        r,
        loadings,
        factors,
        noise,
    })
}

/// One activity class: a label and the template its frames are drawn from.
/// The template's seed is ignored; frame seeds derive from the dataset seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTemplate {
    pub label: String,
    pub model: SpikedModelSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub classes: Vec<ClassTemplate>,
    pub frames_per_class: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct LabeledMatrix {
    pub label: String,
    pub class_index: usize,
    pub frame_index: usize,
    pub seed: u64,
    pub matrix: RealMatrix,
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::InvalidArgument("dataset needs at least one class".into()));
        }
        if self.frames_per_class == 0 {
            return Err(Error::InvalidArgument("frames_per_class must be at least 1".into()));
        }
        let mut seen = HashSet::new();
        for c in &self.classes {
            if c.label.is_empty() {
                return Err(Error::InvalidArgument("class labels must be nonempty".into()));
            }
            if !seen.insert(c.label.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate label {:?}", c.label)));
            }
            c.model.validate()?;
        }
        Ok(())
    }

    pub fn frame_seed(&self, class_index: usize, frame_index: usize) -> u64 {
        derive_seed(self.seed, &[class_index as u64, frame_index as u64])
    }
}

/// Draws every frame of the dataset in class-major order. Frames are
/// generated in parallel; the output order never depends on scheduling.
pub fn gen_labeled_dataset(spec: &SyntheticDatasetSpec) -> Result<Vec<LabeledMatrix>> {
    spec.validate()?;
    let jobs: Vec<(usize, usize)> = (0..spec.classes.len())
        .flat_map(|c| (0..spec.frames_per_class).map(move |f| (c, f)))
        .collect();
    jobs.par_iter()
        .map(|&(ci, fi)| {
            let class = &spec.classes[ci];
            let seed = spec.frame_seed(ci, fi);
            let model = SpikedModelSpec {
                seed,
                ..class.model.clone()
            };
            Ok(LabeledMatrix {
                label: class.label.clone(),
                class_index: ci,
                frame_index: fi,
                seed,
                matrix: gen_spiked(&model)?.r,
            })
        })
        .collect()
}

/// Wraps a real matrix as a CSI frame with zero phase. Entries are shifted
/// by `offset = ceil(max |x|) + 1` so the amplitude channel reproduces
/// `offset + x` exactly; the offset is returned for the ground truth record.
pub fn to_csi_frame(m: &RealMatrix, n_tx: u16, n_rx: u16, sample_rate_hz: f64) -> Result<(CsiFrame, f64)> {
    let per_pair = n_tx as usize * n_rx as usize;
    if per_pair == 0 || !m.nrows().is_multiple_of(per_pair) || m.nrows() / per_pair > u16::MAX as usize {
        return Err(Error::InvalidArgument(format!(
            "{} rows do not split over {n_tx}x{n_rx} antenna pairs",
            m.nrows()
        )));
    }
    let offset = m.amax().ceil() + 1.0;
    let shifted = m.add_scalar(offset);
    let frame = CsiFrame::from_real(n_tx, n_rx, (m.nrows() / per_pair) as u16, sample_rate_hz, &shifted)?;
    Ok((frame, offset))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_moments() {
        let m = gen_noise(200, 200, 2.0, 11).unwrap();
        let n = m.len() as f64;
        let mean = m.mean();
        assert!(mean.abs() < 4.0 * 2f64.sqrt() / n.sqrt());
        for seed in 0..20 {
            let m = gen_noise(200, 200, 2.0, seed).unwrap();
            let mean = m.mean();
            let var = m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            assert!((var / 2.0 - 1.0).abs() < 0.05, "seed {seed}: {var}");
        }
    }

    #[test]
    fn noise_is_seeded() {
        assert_eq!(gen_noise(5, 7, 1.0, 3).unwrap(), gen_noise(5, 7, 1.0, 3).unwrap());
        assert_ne!(gen_noise(5, 7, 1.0, 3).unwrap(), gen_noise(5, 7, 1.0, 4).unwrap());
        assert!(gen_noise(0, 7, 1.0, 3).is_err());
    }

    #[test]
    fn orthonormal_frame() {
        let q = random_orthonormal(30, 4, 9).unwrap();
        let g = q.transpose() * &q;
        assert!((g - DMatrix::identity(4, 4)).amax() < 1e-12);
    }

    #[test]
    fn spec_validation() {
        let mut s = SpikedModelSpec { n: 5, t: 10, strengths: vec![3.0, 2.0], sigma2: 1.0, seed: 0 };
        assert!(s.validate().is_ok());
        s.strengths = vec![2.0, 3.0];
        assert!(s.validate().is_err());
        s.strengths = vec![5.0, 4.0, 3.0, 2.0, 1.0];
        assert!(s.validate().is_err());
    }

    #[test]
    fn zero_factors_is_pure_noise() {
        let spec = SpikedModelSpec { n: 6, t: 20, strengths: vec![], sigma2: 1.0, seed: 5 };
        let s = gen_spiked(&spec).unwrap();
        assert_eq!(s.r, s.noise);
        assert_eq!(s.factors.nrows(), 0);
    }

    #[test]
    fn factor_spectrum_concentrates() {
        // Nonzero eigenvalues of (1/T)(LF)(LF)ᵀ at T = 100 p, averaged over 20
        // seeds. A single draw has ~8% relative spread (√(2/T)), so the 10%
        // bound is checked on the seed average.
        let strengths = vec![9.0, 5.0, 2.0];
        let mut mean = [0.0; 3];
        for seed in 0..20 {
            let spec = SpikedModelSpec { n: 40, t: 300, strengths: strengths.clone(), sigma2: 1.0, seed };
            let s = gen_spiked(&spec).unwrap();
            let lf = &s.loadings * &s.factors;
            let vals = crate::spectral::spectrum_of(&lf).unwrap();
            for (m, v) in mean.iter_mut().zip(vals.values()) {
                *m += v / 20.0;
            }
            assert!(vals.values()[3] < 1e-9);
        }
        for (m, lam) in mean.iter().zip(&strengths) {
            assert!((m - lam).abs() / lam < 0.10, "{m} vs {lam}");
        }
    }

    #[test]
    fn dataset_counts_and_determinism() {
        let model = SpikedModelSpec { n: 8, t: 16, strengths: vec![4.0], sigma2: 1.0, seed: 0 };
        let spec = SyntheticDatasetSpec {
            classes: vec![
                ClassTemplate { label: "a".into(), model: model.clone() },
                ClassTemplate { label: "b".into(), model: model.clone() },
            ],
            frames_per_class: 10,
            seed: 42,
        };
        let d = gen_labeled_dataset(&spec).unwrap();
        assert_eq!(d.len(), 20);
        assert_eq!(d.iter().filter(|r| r.label == "a").count(), 10);
        let again = gen_labeled_dataset(&spec).unwrap();
        assert!(d.iter().zip(&again).all(|(x, y)| x.matrix == y.matrix && x.label == y.label));

        let mut dup = spec.clone();
        dup.classes[1].label = "a".into();
        assert!(gen_labeled_dataset(&dup).is_err());
    }
}
