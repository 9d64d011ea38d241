//! Symmetric, centred Normal Inverse Gaussian noise.
//!
//! Only the `NIG(a, 0, δ·t, 0)` family is represented: the increment of an
//! NIG Lévy process with `Z_1 ~ NIG(a, 0, δ, 0)` over a time span `t`.
//! Asymmetry and location are not expressible with [`NigParams`].

use crate::error::{Error, Result};
use crate::special::bessel_k1_scaled;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::f64::consts::PI;

/// Parameters of an `NIG(a, 0, delta * t, 0)` law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NigParams {
    a: f64,
    delta: f64,
    t: f64,
}

impl NigParams {
    pub fn new(a: f64, delta: f64, t: f64) -> Result<Self> {
        for (name, v) in [("a", a), ("delta", delta), ("t", t)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!("NIG parameter {name} must be finite and > 0, got {v}")));
            }
        }
        Ok(Self { a, delta, t })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    /// Effective scale `δ·t`.
    pub fn scale(&self) -> f64 {
        self.delta * self.t
    }

    /// Variance of the law, `δ·t / a`.
    pub fn variance(&self) -> f64 {
        self.scale() / self.a
    }

    pub fn density(&self, z: f64) -> f64 {
        let d = self.scale();
        let a = self.a;
        let rho = d.hypot(z);
        let arg = a * rho;
        // e^{a d} K1(a rho) = e^{a d - a rho} * (e^{a rho} K1(a rho))
        let k1s = bessel_k1_scaled(arg).expect("a > 0 and rho > 0");
        a * d / PI * (a * d - arg).exp() * k1s / rho
    }
}

/// NIG density at `z`.
pub fn nig_density(z: f64, p: &NigParams) -> f64 {
    p.density(z)
}

/// Draw from an inverse Gaussian law by the Michael–Schucany–Haas method.
///
/// The root is evaluated in the rationalised form `mean / (1 + r + sqrt(r (2 + r)))`
/// which avoids cancellation when `mean * chi2 / shape` is large.
pub fn sample_inverse_gaussian<R: Rng + ?Sized>(mean: f64, shape: f64, rng: &mut R) -> f64 {
    let n: f64 = rng.sample(StandardNormal);
    let r = mean * n * n / (2.0 * shape);
    let x = mean / (1.0 + r + (r * (2.0 + r)).sqrt());
    let u: f64 = rng.random();
    if u * (mean + x) <= mean {
        x
    } else {
        mean * mean / x
    }
}

impl Distribution<f64> for NigParams {
    /// Normal variance-mean mixture: `V ~ IG(δt/a, (δt)^2)`, return `sqrt(V) * N(0,1)`.
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let d = self.scale();
        let v = sample_inverse_gaussian(d / self.a, d * d, rng);
        let n: f64 = rng.sample(StandardNormal);
        v.sqrt() * n
    }
}

/// `count` i.i.d. draws from `p`.
pub fn sample_nig<R: Rng + ?Sized>(p: &NigParams, count: usize, rng: &mut R) -> Vec<f64> {
    (0..count).map(|_| p.sample(rng)).collect()
}

/// Cauchy density with location `loc` and scale `scale`.
#[inline]
pub fn cauchy_density(z: f64, loc: f64, scale: f64) -> f64 {
    let u = (z - loc) / scale;
    1.0 / (scale * PI * (1.0 + u * u))
}

#[inline]
pub fn standard_cauchy_density(z: f64) -> f64 {
    cauchy_density(z, 0.0, 1.0)
}

/// Grid used by [`std_cauchy_limit_check`]: `[-10, 10]` in steps of 0.01.
pub fn cauchy_limit_grid() -> Vec<f64> {
    (0..=2000).map(|i| -10.0 + 0.01 * i as f64).collect()
}

/// Sup-norm distance between the standardized increment density
/// `NIG(a h |δ|, 0, 1, 0)` and the standard Cauchy density, for each `h`.
///
/// `h = 0` maps to a gap of 0.
pub fn std_cauchy_limit_check(a: f64, delta: f64, h_values: &[f64]) -> Result<Vec<f64>> {
    if h_values.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Domain("h values must be strictly decreasing".into()));
    }
    let grid = cauchy_limit_grid();
    h_values
        .iter()
        .map(|&h| {
            if h == 0.0 {
                return Ok(0.0);
            }
            if h < 0.0 {
                return Err(Error::Domain(format!("h must be >= 0, got {h}")));
            }
            let p = NigParams::new(a * h * delta.abs(), 1.0, 1.0)?;
            Ok(grid
                .iter()
                .map(|&z| (p.density(z) - standard_cauchy_density(z)).abs())
                .fold(0.0, f64::max))
        })
        .collect()
}
