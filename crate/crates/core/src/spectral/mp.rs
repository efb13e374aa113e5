use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Noise variance and aspect ratio `c = N/T` of a Marčenko–Pastur law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpParams {
    sigma2: f64,
    c: f64,
}

impl MpParams {
    pub fn new(sigma2: f64, c: f64) -> Result<Self> {
        if !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise variance must be positive, got {sigma2}"
            )));
        }
        if !(c.is_finite() && c > 0.0 && c <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "aspect ratio must lie in (0, 1], got {c}"
            )));
        }
        Ok(Self { sigma2, c })
    }

    /// Parameters for an `n x t` noise matrix.
    pub fn for_shape(sigma2: f64, n: usize, t: usize) -> Result<Self> {
        if t == 0 {
            return Err(Error::InvalidArgument("t must be positive".into()));
        }
        Self::new(sigma2, n as f64 / t as f64)
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn c(&self) -> f64 {
        self.c
    }
}

/// Support edges `(a, b)` with `a = σ²(1-√c)²`, `b = σ²(1+√c)²`.
pub fn mp_edges(params: MpParams) -> (f64, f64) {
    let s = params.c.sqrt();
    (params.sigma2 * (1.0 - s).powi(2), params.sigma2 * (1.0 + s).powi(2))
}

pub fn mp_pdf(x: f64, params: MpParams) -> f64 {
    let (a, b) = mp_edges(params);
    if !(x >= a && x <= b) || x <= 0.0 {
        return 0.0;
    }
    ((b - x) * (x - a)).max(0.0).sqrt() / (2.0 * PI * params.c * params.sigma2 * x)
}

/// The density after the substitution `x = a + h(1 + sin θ)`, `h = (b-a)/2`.
/// Both square-root edge singularities disappear, so the integrand is smooth
/// on `[-π/2, π/2]` (including `c = 1`, where `a = 0`).
#[derive(Debug, Clone, Copy)]
struct AngularDensity {
    a: f64,
    h: f64,
    scale: f64,
}

impl AngularDensity {
    fn new(params: MpParams) -> Self {
        let (a, b) = mp_edges(params);
        let h = 0.5 * (b - a);
        Self {
            a,
            h,
            scale: h * h / (2.0 * PI * params.c * params.sigma2),
        }
    }

    fn eval(&self, theta: f64) -> f64 {
        let s = theta.sin();
        let up = 1.0 + s;
        let x = self.a + self.h * up;
        if x <= 0.0 {
            // only reachable at θ = -π/2 with a = 0, where the limit is 2h·scale/h
            return 2.0 * self.scale / self.h;
        }
        self.scale * (1.0 - s) * up / x
    }

    fn theta_of(&self, x: f64) -> f64 {
        ((x - self.a) / self.h - 1.0).clamp(-1.0, 1.0).asin()
    }

    fn x_of(&self, theta: f64) -> f64 {
        self.a + self.h * (1.0 + theta.sin())
    }
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    fa: f64,
    b: f64,
    fb: f64,
    m: f64,
    fm: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, fa, m, fm, lm, flm, left, 0.5 * tol, depth - 1)
        + simpson_step(f, m, fm, b, fb, rm, frm, right, 0.5 * tol, depth - 1)
}

pub(crate) fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let m = 0.5 * (a + b);
    let (fa, fb, fm) = (f(a), f(b), f(m));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(&f, a, fa, b, fb, m, fm, whole, tol, 48)
}

/// Cumulative distribution of the law, by adaptive quadrature of the density.
pub fn mp_cdf(x: f64, params: MpParams) -> f64 {
    let (a, b) = mp_edges(params);
    if x <= a {
        return 0.0;
    }
    if x >= b {
        return 1.0;
    }
    let g = AngularDensity::new(params);
    let hi = g.theta_of(x);
    adaptive_simpson(|t| g.eval(t), -FRAC_PI_2, hi, 1e-12).clamp(0.0, 1.0)
}

/// Median of the unit-variance law at aspect ratio `c`, by bisection on [`mp_cdf`].
pub fn mp_median(c: f64) -> Result<f64> {
    let params = MpParams::new(1.0, c)?;
    let (mut lo, mut hi) = mp_edges(params);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if mp_cdf(mid, params) < 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Limit of a sample eigenvalue produced by a population spike of strength
/// `lambda` on top of noise: isolated at `(λ+σ²)(λ+σ²c)/λ` above the
/// threshold `σ²√c`, stuck at the bulk edge `b` otherwise.
pub fn spiked_limit(lambda: f64, params: MpParams) -> f64 {
    let s2 = params.sigma2;
    let threshold = s2 * params.c.sqrt();
    if lambda > threshold {
        (lambda + s2) * (lambda + s2 * params.c) / lambda
    } else {
        mp_edges(params).1
    }
}

const GL5_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL5_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189,
    0.478_628_670_499_366,
    0.568_888_888_888_889,
    0.478_628_670_499_366,
    0.236_926_885_056_189,
];

/// Tabulated unit-variance law at a fixed aspect ratio for fast CDF and
/// quantile evaluation. Scale results by σ² for other noise levels.
#[derive(Debug, Clone)]
pub struct MpQuantiles {
    c: f64,
    density: AngularDensity,
    step: f64,
    cum: Vec<f64>,
    raw: Vec<f64>,
}

impl MpQuantiles {
    const PANELS: usize = 2048;

    pub fn new(c: f64) -> Self {
        let params = MpParams { sigma2: 1.0, c };
        let density = AngularDensity::new(params);
        let step = PI / Self::PANELS as f64;
        let mut cum = Vec::with_capacity(Self::PANELS + 1);
        let mut raw = Vec::with_capacity(Self::PANELS);
        cum.push(0.0);
        let mut acc = 0.0;
        for k in 0..Self::PANELS {
            let lo = -FRAC_PI_2 + k as f64 * step;
            let piece = gauss_legendre(&density, lo, lo + step);
            raw.push(piece);
            acc += piece;
            cum.push(acc);
        }
        let total = acc;
        for v in &mut cum {
            *v /= total;
        }
        Self {
            c,
            density,
            step,
            cum,
            raw,
        }
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn edges(&self) -> (f64, f64) {
        mp_edges(MpParams { sigma2: 1.0, c: self.c })
    }

    fn panel_integral(&self, k: usize, theta: f64) -> f64 {
        let lo = -FRAC_PI_2 + k as f64 * self.step;
        let full = self.cum[k + 1] - self.cum[k];
        let raw_full = self.raw[k];
        if raw_full <= 0.0 {
            return 0.0;
        }
        full * gauss_legendre(&self.density, lo, theta) / raw_full
    }

    /// CDF of the unit-variance law.
    pub fn cdf(&self, x: f64) -> f64 {
        let (a, b) = self.edges();
        if x <= a {
            return 0.0;
        }
        if x >= b {
            return 1.0;
        }
        let theta = self.density.theta_of(x);
        let k = (((theta + FRAC_PI_2) / self.step) as usize).min(Self::PANELS - 1);
        (self.cum[k] + self.panel_integral(k, theta)).clamp(0.0, 1.0)
    }

    /// Quantile of the unit-variance law.
    pub fn quantile(&self, u: f64) -> f64 {
        let (a, b) = self.edges();
        if u <= 0.0 {
            return a;
        }
        if u >= 1.0 {
            return b;
        }
        let k = self.cum.partition_point(|&v| v <= u).saturating_sub(1).min(Self::PANELS - 1);
        let target = u - self.cum[k];
        let mut lo = -FRAC_PI_2 + k as f64 * self.step;
        let mut hi = lo + self.step;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.panel_integral(k, mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        self.density.x_of(0.5 * (lo + hi))
    }

    /// `count` quantiles at the midpoints `(i + 1/2) / count`, ascending.
    pub fn midpoint_quantiles(&self, count: usize) -> Vec<f64> {
        (0..count)
            .map(|i| self.quantile((i as f64 + 0.5) / count as f64))
            .collect()
    }
}

fn gauss_legendre(g: &AngularDensity, lo: f64, hi: f64) -> f64 {
    let half = 0.5 * (hi - lo);
    let mid = 0.5 * (hi + lo);
    GL5_NODES
        .iter()
        .zip(GL5_WEIGHTS.iter())
        .map(|(&n, &w)| w * g.eval(mid + half * n))
        .sum::<f64>()
        * half
}
