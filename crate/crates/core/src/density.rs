//! Densities of Gaussian variables pushed through the network activations.
//!
//! For `Y = phi(X)` with `X ~ N(mu, sigma^2)` and `h = phi^-1`,
//! `f_Y(y) = f_X(h(y)) |h'(y)|`, where
//!
//! * tanh: `h(y) = ln((1 + y) / (1 - y)) / 2`, `h'(y) = 1 / (1 - y^2)`
//! * sigmoid: `h(y) = ln(y / (1 - y))`, `h'(y) = 1 / (y (1 - y))`

use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::math::{atanh, cosh, exp, ln, normal_cdf, sinh, sq, sqrt, tanh};
use crate::network::Activation;
use crate::rng::{seeded, streams};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianSpec {
    pub mu: f64,
    pub sigma: f64,
}

impl GaussianSpec {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !(mu.is_finite() && sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidParameter(alloc::format!("need finite mu and sigma > 0, got ({mu}, {sigma})")));
        }
        Ok(Self { mu, sigma })
    }

    pub fn pdf(&self, x: f64) -> f64 {
        INV_SQRT_2PI / self.sigma * exp(-0.5 * sq((x - self.mu) / self.sigma))
    }

    pub fn cdf(&self, x: f64) -> f64 {
        normal_cdf((x - self.mu) / self.sigma)
    }
}

/// Open interval the activation maps the real line onto.
pub fn support(act: Activation) -> (f64, f64) {
    match act {
        Activation::Tanh => (-1.0, 1.0),
        Activation::Sigmoid => (0.0, 1.0),
    }
}

fn check_support(y: f64, act: Activation) -> Result<()> {
    let (lo, hi) = support(act);
    if y > lo && y < hi {
        Ok(())
    } else {
        Err(Error::OutsideDensitySupport(y))
    }
}

/// `h(y) = phi^-1(y)`.
pub fn inverse_activation(y: f64, act: Activation) -> Result<f64> {
    check_support(y, act)?;
    Ok(match act {
        Activation::Tanh => atanh(y),
        Activation::Sigmoid => ln(y / (1.0 - y)),
    })
}

fn inverse_derivative(y: f64, act: Activation) -> f64 {
    match act {
        Activation::Tanh => 1.0 / (1.0 - y * y),
        Activation::Sigmoid => 1.0 / (y * (1.0 - y)),
    }
}

pub fn transformed_density(y: f64, g: &GaussianSpec, act: Activation) -> Result<f64> {
    let h = inverse_activation(y, act)?;
    Ok(g.pdf(h) * inverse_derivative(y, act))
}

/// `P(Y <= y)`; saturates to 0 and 1 outside the support.
pub fn transformed_cdf(y: f64, g: &GaussianSpec, act: Activation) -> f64 {
    let (lo, hi) = support(act);
    if y <= lo {
        0.0
    } else if y >= hi {
        1.0
    } else {
        g.cdf(inverse_activation(y, act).expect("inside support"))
    }
}

/// Partial sum of the odd power series of `h`, keeping powers up to `order`.
///
/// tanh: `y + y^3/3 + y^5/5 + ...`. Sigmoid, with `u = 2y - 1`:
/// `2 (u + u^3/3 + u^5/5 + ...)`, the same series expanded about `y = 1/2`.
pub fn taylor_inverse(y: f64, act: Activation, order: usize) -> f64 {
    let (u, scale) = match act {
        Activation::Tanh => (y, 1.0),
        Activation::Sigmoid => (2.0 * y - 1.0, 2.0),
    };
    let u2 = u * u;
    let mut term = u;
    let mut sum = 0.0;
    let mut k = 1;
    while k <= order {
        sum += term / k as f64;
        term *= u2;
        k += 2;
    }
    scale * sum
}

/// Tanh-sinh quadrature of `f` over the open interval `(a, b)`. Nodes that
/// round onto an endpoint are skipped, as are nodes where `f` is not finite.
pub fn tanh_sinh(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    const T_MAX: f64 = 4.0;
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let node = |t: f64| -> f64 {
        let u = core::f64::consts::FRAC_PI_2 * sinh(t);
        let x = mid + half * tanh(u);
        if !(x > a && x < b) {
            return 0.0;
        }
        let w = half * core::f64::consts::FRAC_PI_2 * cosh(t) / sq(cosh(u));
        let v = f(x) * w;
        if v.is_finite() {
            v
        } else {
            0.0
        }
    };
    let mut h = 0.5;
    let mut sum = node(0.0);
    let mut t = h;
    while t <= T_MAX {
        sum += node(t) + node(-t);
        t += h;
    }
    let mut estimate = h * sum;
    for _ in 0..10 {
        h *= 0.5;
        let mut t = h;
        while t <= T_MAX {
            sum += node(t) + node(-t);
            t += 2.0 * h;
        }
        let next = h * sum;
        let done = (next - estimate).abs() <= tol;
        estimate = next;
        if done {
            break;
        }
    }
    estimate
}

/// `int f_Y` over the activation's support.
pub fn density_mass(g: &GaussianSpec, act: Activation) -> f64 {
    let (lo, hi) = support(act);
    tanh_sinh(|y| transformed_density(y, g, act).unwrap_or(0.0), lo, hi, 1e-12)
}

/// Two-sided Kolmogorov-Smirnov statistic of `sorted` against `cdf`.
pub fn ks_statistic(sorted: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianityReport {
    pub mean: f64,
    pub sd: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    /// KS distance to the closed-form transformed density.
    pub ks_closed_form: f64,
    /// KS distance to a Gaussian with the sample mean and standard deviation.
    pub ks_gaussian: f64,
}

pub const MIN_GAUSSIANITY_SAMPLES: usize = 10_000;

/// Samples `phi(X)` and summarises how Gaussian it looks.
pub fn gaussianity_check(g: &GaussianSpec, act: Activation, n_samples: usize, seed: u64) -> Result<GaussianityReport> {
    if n_samples < MIN_GAUSSIANITY_SAMPLES {
        return Err(Error::SampleTooSmall { required: MIN_GAUSSIANITY_SAMPLES, actual: n_samples });
    }
    let mut rng = seeded(seed, streams::DENSITY);
    let mut y: Vec<f64> = (0..n_samples)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            act.apply(g.mu + g.sigma * z)
        })
        .collect();
    let n = n_samples as f64;
    let mean = y.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in &y {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let sd = sqrt(m2);
    let skewness = m3 / (m2 * sd);
    let excess_kurtosis = m4 / (m2 * m2) - 3.0;
    y.sort_by(f64::total_cmp);
    let ks_closed_form = ks_statistic(&y, |v| transformed_cdf(v, g, act));
    let matched = GaussianSpec { mu: mean, sigma: sd };
    let ks_gaussian = ks_statistic(&y, |v| matched.cdf(v));
    Ok(GaussianityReport { mean, sd, skewness, excess_kurtosis, ks_closed_form, ks_gaussian })
}
