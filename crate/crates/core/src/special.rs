//! Modified Bessel function of the second kind, order one.
//!
//! Two regimes: the ascending series (A&S 9.6.11 with n = 1) for x <= 2 and
//! Steed's continued fraction (Temme's CF2) for x > 2. The CF2 branch yields
//! the exponentially scaled value `e^x K1(x)` directly, which is what the NIG
//! density needs for large arguments.

use crate::error::{Error, Result};
use std::f64::consts::PI;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
const SERIES_CUTOFF: f64 = 2.0;
const MAX_ITER: usize = 10_000;

/// Value of `K1(x)` together with an underflow indicator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct K1Value {
    pub value: f64,
    /// Set when `K1(x)` is below the smallest normal `f64`; `value` is then 0.
    pub underflow: bool,
}

fn check_arg(x: f64) -> Result<()> {
    if x.is_nan() || x <= 0.0 {
        return Err(Error::Domain(format!("K1 requires x > 0, got {x}")));
    }
    Ok(())
}

/// `K1(x)` for `x > 0`.
pub fn bessel_k1(x: f64) -> Result<K1Value> {
    check_arg(x)?;
    if x <= SERIES_CUTOFF {
        return Ok(K1Value {
            value: k1_series(x),
            underflow: false,
        });
    }
    if x.is_infinite() {
        return Ok(K1Value {
            value: 0.0,
            underflow: true,
        });
    }
    let v = k1_scaled_cf2(x) * (-x).exp();
    if v < f64::MIN_POSITIVE {
        Ok(K1Value {
            value: 0.0,
            underflow: true,
        })
    } else {
        Ok(K1Value {
            value: v,
            underflow: false,
        })
    }
}

/// Exponentially scaled `e^x K1(x)`; finite for every `x > 0`.
pub fn bessel_k1_scaled(x: f64) -> Result<f64> {
    check_arg(x)?;
    if x <= SERIES_CUTOFF {
        Ok(k1_series(x) * x.exp())
    } else if x.is_infinite() {
        Ok(0.0)
    } else {
        Ok(k1_scaled_cf2(x))
    }
}

fn k1_series(x: f64) -> f64 {
    let y = 0.25 * x * x;
    let log_half = (0.5 * x).ln();
    // psi(k+1) and psi(k+2)
    let mut psi1 = -EULER_GAMMA;
    let mut psi2 = 1.0 - EULER_GAMMA;
    let mut t = 1.0; // y^k / (k! (k+1)!)
    let mut acc = 0.0;
    for k in 0..MAX_ITER {
        let term = t * (log_half - 0.5 * (psi1 + psi2));
        acc += term;
        if term.abs() <= 1e-17 * acc.abs() && k > 0 {
            break;
        }
        let kf = k as f64;
        t *= y / ((kf + 1.0) * (kf + 2.0));
        psi1 += 1.0 / (kf + 1.0);
        psi2 += 1.0 / (kf + 2.0);
    }
    1.0 / x + 0.5 * x * acc
}

fn k1_scaled_cf2(x: f64) -> f64 {
    let mut b = 2.0 * (1.0 + x);
    let mut d = 1.0 / b;
    let mut h = d;
    let mut delh = d;
    let mut q1 = 0.0;
    let mut q2 = 1.0;
    let a1 = 0.25;
    let mut q = a1;
    let mut c = a1;
    let mut a = -a1;
    let mut s = 1.0 + q * delh;
    for i in 1..MAX_ITER {
        let fi = i as f64;
        a -= 2.0 * fi;
        c = -a * c / (fi + 1.0);
        let qnew = (q1 - b * q2) / a;
        q1 = q2;
        q2 = qnew;
        q += c * qnew;
        b += 2.0;
        d = 1.0 / (b + a * d);
        delh *= b * d - 1.0;
        h += delh;
        let dels = q * delh;
        s += dels;
        if (dels / s).abs() < f64::EPSILON {
            break;
        }
    }
    let h = a1 * h;
    let k0_scaled = (PI / (2.0 * x)).sqrt() / s;
    k0_scaled * (x + 0.5 - h) / x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k1(x: f64) -> f64 {
        bessel_k1(x).unwrap().value
    }

    #[test]
    fn known_values() {
        // reference values from A&S table 9.8 / mpmath
        let cases = [
            (0.1, 9.853_844_780_870_606),
            (1.0, 0.601_907_230_197_234_6),
            (2.0, 0.139_865_881_816_522_46),
            (2.5, 0.073_890_816_347_747_05),
            (5.0, 0.004_044_613_445_452_164),
            (10.0, 1.864_877_345_382_558_5e-5),
        ];
        for (x, want) in cases {
            let got = k1(x);
            assert!(((got - want) / want).abs() < 1e-13, "K1({x}) = {got}, want {want}");
        }
    }

    #[test]
    fn branches_agree_at_cutoff() {
        let x = SERIES_CUTOFF;
        let series = k1_series(x);
        let cf = k1_scaled_cf2(x) * (-x).exp();
        assert!(((series - cf) / cf).abs() < 1e-14);
    }

    #[test]
    fn small_argument_asymptote() {
        let x = 1e-6;
        let v = x * k1(x);
        assert!((0.999999..=1.000001).contains(&v));
    }

    #[test]
    fn domain_and_underflow() {
        assert!(bessel_k1(0.0).is_err());
        assert!(bessel_k1(-1.0).is_err());
        assert!(bessel_k1(f64::NAN).is_err());
        let big = bessel_k1(800.0).unwrap();
        assert!(big.underflow);
        assert_eq!(big.value, 0.0);
        assert!(!bessel_k1(700.0).unwrap().underflow);
        assert!(bessel_k1_scaled(800.0).unwrap() > 0.0);
    }

    #[test]
    fn monotone_decreasing() {
        let mut prev = f64::INFINITY;
        let mut x = 1e-8;
        while x < 700.0 {
            let v = k1(x);
            assert!(v < prev, "not decreasing at {x}");
            prev = v;
            x *= 1.07;
        }
    }
}
