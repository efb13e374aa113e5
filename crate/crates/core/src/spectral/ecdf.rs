use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distance between two spectral distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `∫ |F_a - F_b| dx`
    #[default]
    Wasserstein1,
    /// `sup |F_a - F_b|`
    KolmogorovSmirnov,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wasserstein1" | "wasserstein" | "w1" => Ok(Metric::Wasserstein1),
            "kolmogorov_smirnov" | "ks" => Ok(Metric::KolmogorovSmirnov),
            other => Err(Error::InvalidArgument(format!("unknown metric {other:?}"))),
        }
    }
}

/// Right-continuous empirical step function over a sorted support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ecdf {
    points: Vec<f64>,
    cum: Vec<f64>,
}

impl Ecdf {
    /// ECDF of equally weighted samples. Duplicate values are merged.
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("ECDF needs at least one sample".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("ECDF samples must be finite".into()));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let mut points = Vec::with_capacity(sorted.len());
        let mut cum = Vec::with_capacity(sorted.len());
        for (i, &x) in sorted.iter().enumerate() {
            let w = (i + 1) as f64 / n;
            if points.last() == Some(&x) {
                *cum.last_mut().unwrap() = w;
            } else {
                points.push(x);
                cum.push(w);
            }
        }
        *cum.last_mut().unwrap() = 1.0;
        Ok(Self { points, cum })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cum
    }

    /// `F(x) = P(X <= x)`.
    pub fn eval(&self, x: f64) -> f64 {
        let k = self.points.partition_point(|&p| p <= x);
        if k == 0 {
            0.0
        } else {
            self.cum[k - 1]
        }
    }
}

/// Distance between two ECDFs, integrated exactly over the merged support.
pub fn spectral_distance(a: &Ecdf, b: &Ecdf, metric: Metric) -> Result<f64> {
    if a.points.is_empty() || b.points.is_empty() {
        return Err(Error::InvalidArgument("empty ECDF".into()));
    }
    let (mut i, mut j) = (0usize, 0usize);
    let (mut fa, mut fb) = (0.0f64, 0.0f64);
    let mut prev: Option<f64> = None;
    let mut w1 = 0.0;
    let mut ks = 0.0f64;
    while i < a.points.len() || j < b.points.len() {
        let x = match (a.points.get(i), b.points.get(j)) {
            (Some(&xa), Some(&xb)) => xa.min(xb),
            (Some(&xa), None) => xa,
            (None, Some(&xb)) => xb,
            (None, None) => unreachable!(),
        };
        if let Some(p) = prev {
            w1 += (fa - fb).abs() * (x - p);
        }
        while i < a.points.len() && a.points[i] <= x {
            fa = a.cum[i];
            i += 1;
        }
        while j < b.points.len() && b.points[j] <= x {
            fb = b.cum[j];
            j += 1;
        }
        ks = ks.max((fa - fb).abs());
        prev = Some(x);
    }
    Ok(match metric {
        Metric::Wasserstein1 => w1,
        Metric::KolmogorovSmirnov => ks,
    })
}

/// Kolmogorov–Smirnov distance between an ECDF and a continuous CDF,
/// checking both sides of every jump.
pub fn ks_to_cdf<F: Fn(f64) -> f64>(e: &Ecdf, cdf: F) -> f64 {
    let mut below = 0.0;
    let mut worst = 0.0f64;
    for (&x, &f) in e.points.iter().zip(e.cum.iter()) {
        let g = cdf(x);
        worst = worst.max((g - below).abs()).max((f - g).abs());
        below = f;
    }
    worst
}
