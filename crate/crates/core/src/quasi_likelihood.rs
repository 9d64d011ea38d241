//! Cauchy quasi-likelihood and the modified EM objective.
//!
//! For regime `i` the transition `X_{t_{j-1}} -> X_{t_j}` is approximated by a
//! Cauchy law with location `μ_{j-1} = X_{t_{j-1}} + λ (b(i) - X_{t_{j-1}}) h`
//! and scale `δ h`. The objective
//!
//! ```text
//! H_n(θ; θ') = Σ_j Σ_i Σ_k log{ f(X_j | X_{j-1}, i; θ) · P_h(i, k) } · w[j, i, k]
//! ```
//!
//! weights each `(i, k)` pair by the smoothed pairwise regime probabilities
//! computed at `θ'`. Parameter vectors are ordered `(b(1), …, b(N), λ, δ)`.
//!
//! Derivatives are assembled from the scalar building blocks in [`k`], each
//! evaluated at the residual `r = X_j - μ_{j-1}` and the gap
//! `c = b(i) - X_{j-1}`. The Hessian is checked against finite differences of
//! the gradient in the tests.

use crate::ctmc::GeneratorMatrix;
use crate::error::{Error, Result};
use crate::numeric::{tree_reduce, tree_sum, CompensatedSum};
use crate::sim::ObservationSeries;
use nalgebra::DMatrix;
use std::f64::consts::PI;

/// Estimation target `(b(1..N), λ, δ)`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Theta {
    pub b: Vec<f64>,
    pub lambda: f64,
    pub delta: f64,
}

impl Theta {
    pub fn new(b: Vec<f64>, lambda: f64, delta: f64) -> Result<Self> {
        let t = Self { b, lambda, delta };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.b.is_empty() {
            return Err(Error::Domain("theta needs at least one regime level".into()));
        }
        if self.b.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("regime levels must be finite".into()));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::Domain(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(Error::Domain(format!("delta must be > 0, got {}", self.delta)));
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.b.len()
    }

    /// Number of free coordinates, `N + 2`.
    pub fn dim(&self) -> usize {
        self.b.len() + 2
    }

    pub fn lambda_index(&self) -> usize {
        self.b.len()
    }

    pub fn delta_index(&self) -> usize {
        self.b.len() + 1
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.b.clone();
        v.push(self.lambda);
        v.push(self.delta);
        v
    }

    /// Inverse of [`Theta::to_vec`]; no validation.
    pub fn from_slice(v: &[f64]) -> Self {
        let n = v.len() - 2;
        Self {
            b: v[..n].to_vec(),
            lambda: v[n],
            delta: v[n + 1],
        }
    }

    /// Pairs of (0-based) states whose levels coincide. Iterates may collide
    /// transiently, so this is a warning rather than an error.
    pub fn coincident_levels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.b.len() {
            for k in i + 1..self.b.len() {
                if self.b[i] == self.b[k] {
                    out.push((i, k));
                }
            }
        }
        out
    }
}

/// Smoothed pairwise regime probabilities
/// `w[j, i, k] = P(α_{t_{j-1}} = i, α_{t_j} = k | X_{0..n})` for `j = 1..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedPairProbs {
    n: usize,
    n_states: usize,
    w: Vec<f64>,
}

impl SmoothedPairProbs {
    /// Builds from a flat `(j - 1, i, k)` row-major buffer.
    pub fn from_flat(n: usize, n_states: usize, w: Vec<f64>) -> Result<Self> {
        if w.len() != n * n_states * n_states {
            return Err(Error::Dimension(format!(
                "expected {} pair weights, got {}",
                n * n_states * n_states,
                w.len()
            )));
        }
        Ok(Self { n, n_states, w })
    }

    /// Every pair `(i, k)` gets `1 / N^2` at every step.
    pub fn uniform(n: usize, n_states: usize) -> Self {
        let v = 1.0 / (n_states * n_states) as f64;
        Self {
            n,
            n_states,
            w: vec![v; n * n_states * n_states],
        }
    }

    /// All mass on the transitions of a known regime path (`n + 1` states).
    pub fn from_path(states: &[usize], n_states: usize) -> Self {
        let n = states.len() - 1;
        let mut w = vec![0.0; n * n_states * n_states];
        for j in 1..=n {
            w[(j - 1) * n_states * n_states + states[j - 1] * n_states + states[j]] = 1.0;
        }
        Self { n, n_states, w }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    /// Weight for `j ∈ 1..=n`.
    #[inline]
    pub fn get(&self, j: usize, i: usize, k: usize) -> f64 {
        self.w[(j - 1) * self.n_states * self.n_states + i * self.n_states + k]
    }

    /// The `N × N` slice for step `j ∈ 1..=n`.
    #[inline]
    pub fn slice(&self, j: usize) -> &[f64] {
        let s = self.n_states * self.n_states;
        &self.w[(j - 1) * s..j * s]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.w
    }

    /// `Σ_k w[j, i, k]`: weight of regime `i` at `t_{j-1}`.
    #[inline]
    pub fn prev_marginal(&self, j: usize, i: usize) -> f64 {
        let row = &self.slice(j)[i * self.n_states..(i + 1) * self.n_states];
        row.iter().sum()
    }

    /// `Σ_i w[j, i, k]`: weight of regime `k` at `t_j`.
    pub fn next_marginal(&self, j: usize, k: usize) -> f64 {
        (0..self.n_states).map(|i| self.get(j, i, k)).sum()
    }

    /// Entries in `[0, 1]` and slices summing to one within `tol`.
    pub fn check(&self, tol: f64) -> Result<()> {
        for j in 1..=self.n {
            let s = self.slice(j);
            if let Some(v) = s.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Numerical {
                    stage: "pair weights",
                    index: j,
                    detail: format!("entry {v} outside [0, 1]"),
                });
            }
            let total: f64 = s.iter().sum();
            if (total - 1.0).abs() > tol {
                return Err(Error::Numerical {
                    stage: "pair weights",
                    index: j,
                    detail: format!("slice sums to {total}"),
                });
            }
        }
        Ok(())
    }
}

/// `μ_{j-1} = x_prev + λ (b_i - x_prev) h`.
#[inline]
pub fn mu_prev(x_prev: f64, b_i: f64, lambda: f64, h: f64) -> f64 {
    x_prev + lambda * (b_i - x_prev) * h
}

/// Cauchy transition density with location `μ_{j-1}` and scale `δ h`.
#[inline]
pub fn cauchy_transition_density(x_next: f64, x_prev: f64, b_i: f64, theta: &Theta, h: f64) -> f64 {
    let r = x_next - mu_prev(x_prev, b_i, theta.lambda, h);
    k::k2(r, theta.delta, h)
}

#[inline]
fn log_cauchy(r: f64, delta: f64, h: f64) -> f64 {
    let s = delta * h;
    let u = r / s;
    -(s * PI).ln() - u.ln_1p_sq()
}

trait Ln1pSq {
    fn ln_1p_sq(self) -> f64;
}

impl Ln1pSq for f64 {
    /// `ln(1 + x^2)` without overflow for large `|x|`.
    #[inline]
    fn ln_1p_sq(self) -> f64 {
        let a = self.abs();
        if a > 1e150 {
            2.0 * a.ln()
        } else {
            (a * a).ln_1p()
        }
    }
}

/// Scalar building blocks of the first and second derivatives.
///
/// `r` is the residual `X_j - μ_{j-1}`, `c` the gap `b(i) - X_{j-1}`.
pub mod k {
    use std::f64::consts::PI;

    /// `π r² / (δ² h) - h π`
    #[inline]
    pub fn k1(r: f64, delta: f64, h: f64) -> f64 {
        PI * r * r / (delta * delta * h) - h * PI
    }

    /// The Cauchy density itself, `1 / (δ h π (1 + (r / (δ h))²))`.
    #[inline]
    pub fn k2(r: f64, delta: f64, h: f64) -> f64 {
        let s = delta * h;
        let u = r / s;
        1.0 / (s * PI * (1.0 + u * u))
    }

    /// `2 π r c / δ`
    #[inline]
    pub fn k3(r: f64, c: f64, delta: f64) -> f64 {
        2.0 * PI * r * c / delta
    }

    /// `2 π r λ / δ`
    #[inline]
    pub fn k4(r: f64, lambda: f64, delta: f64) -> f64 {
        2.0 * PI * r * lambda / delta
    }

    /// `-2 π r² / (δ³ h)`
    #[inline]
    pub fn k5(r: f64, delta: f64, h: f64) -> f64 {
        -2.0 * PI * r * r / (delta * delta * delta * h)
    }

    /// `-2 π h c² / δ`
    #[inline]
    pub fn k6(c: f64, delta: f64, h: f64) -> f64 {
        -2.0 * PI * h * c * c / delta
    }

    /// `-2 π r c / δ²`
    ///
    /// The λδ cross term. Carrying an extra `1/h` here would break the match
    /// with `∂_δ` of the λ-gradient.
    #[inline]
    pub fn k7(r: f64, c: f64, delta: f64) -> f64 {
        -2.0 * PI * r * c / (delta * delta)
    }

    /// `-2 π r λ / δ²`
    #[inline]
    pub fn k8(r: f64, lambda: f64, delta: f64) -> f64 {
        -2.0 * PI * r * lambda / (delta * delta)
    }

    /// `2 π (r - λ c h) / δ`, i.e. `2π (X_j - (X_{j-1} + 2 λ c h)) / δ`.
    #[inline]
    pub fn k9(r: f64, c: f64, lambda: f64, delta: f64, h: f64) -> f64 {
        2.0 * PI * (r - lambda * c * h) / delta
    }
}

/// First and second derivatives of `H_n` in the generator entries.
#[derive(Debug, Clone, PartialEq)]
pub struct QDerivatives {
    pub n_states: usize,
    /// Row-major `∂ H_n / ∂ q_lm`.
    pub first: Vec<f64>,
    /// Row-major `∂² H_n / ∂ q_lm²`; all mixed second derivatives are zero.
    pub second: Vec<f64>,
}

impl QDerivatives {
    pub fn first(&self, l: usize, m: usize) -> f64 {
        self.first[l * self.n_states + m]
    }

    pub fn second(&self, l: usize, m: usize) -> f64 {
        self.second[l * self.n_states + m]
    }
}

/// `H_n(·; θ')` for fixed observations, generator and pair weights.
#[derive(Debug, Clone, Copy)]
pub struct QuasiLikelihood<'a> {
    g: &'a GeneratorMatrix,
    obs: &'a ObservationSeries,
    w: &'a SmoothedPairProbs,
    parallel: bool,
}

impl<'a> QuasiLikelihood<'a> {
    pub fn new(g: &'a GeneratorMatrix, obs: &'a ObservationSeries, w: &'a SmoothedPairProbs) -> Result<Self> {
        let n = obs.n();
        if w.n() != n {
            return Err(Error::Dimension(format!("{} observation steps but {} weight slices", n, w.n())));
        }
        if w.n_states() != g.n_states() {
            return Err(Error::Dimension(format!(
                "generator has {} states, weights have {}",
                g.n_states(),
                w.n_states()
            )));
        }
        g.check_step(obs.h)?;
        Ok(Self {
            g,
            obs,
            w,
            parallel: false,
        })
    }

    /// Evaluate the sums over `j` on the rayon pool. Results are
    /// bit-identical to sequential evaluation.
    pub fn parallel(mut self, on: bool) -> Self {
        self.parallel = on;
        self
    }

    fn check_theta(&self, theta: &Theta) -> Result<()> {
        theta.validate()?;
        if theta.n_states() != self.g.n_states() {
            return Err(Error::Dimension(format!(
                "theta has {} levels, generator has {} states",
                theta.n_states(),
                self.g.n_states()
            )));
        }
        Ok(())
    }

    /// `Σ_j Σ_{i,k} w[j,i,k] log P_h(i,k)`; independent of θ.
    pub fn transition_term(&self) -> Result<f64> {
        let n_states = self.g.n_states();
        let p = self.g.transition_matrix(self.obs.h)?;
        // Locate any impossible transition carrying weight before summing.
        for j in 1..=self.obs.n() {
            let s = self.w.slice(j);
            for (idx, (&wv, &pv)) in s.iter().zip(&p).enumerate() {
                if wv > 0.0 && pv <= 0.0 {
                    return Err(Error::ImpossibleTransition {
                        j,
                        i: idx / n_states + 1,
                        k: idx % n_states + 1,
                    });
                }
            }
        }
        Ok(tree_sum(self.obs.n(), self.parallel, |jj| {
            let s = self.w.slice(jj + 1);
            let mut acc = CompensatedSum::new();
            for (&wv, &pv) in s.iter().zip(&p) {
                if wv > 0.0 {
                    acc.add(wv * pv.ln());
                }
            }
            acc.value()
        }))
    }

    /// `Σ_j Σ_i m[j,i] log f(X_j | X_{j-1}, i; θ)` with `m[j,i] = Σ_k w[j,i,k]`.
    pub fn density_term(&self, theta: &Theta) -> Result<f64> {
        self.check_theta(theta)?;
        let x = &self.obs.x;
        let h = self.obs.h;
        let n_states = theta.n_states();
        Ok(tree_sum(self.obs.n(), self.parallel, |jj| {
            let j = jj + 1;
            let (xp, xn) = (x[j - 1], x[j]);
            let mut acc = CompensatedSum::new();
            for i in 0..n_states {
                let m = self.w.prev_marginal(j, i);
                if m > 0.0 {
                    let r = xn - mu_prev(xp, theta.b[i], theta.lambda, h);
                    acc.add(m * log_cauchy(r, theta.delta, h));
                }
            }
            acc.value()
        }))
    }

    /// `H_n(θ; θ')`.
    pub fn value(&self, theta: &Theta) -> Result<f64> {
        Ok(self.density_term(theta)? + self.transition_term()?)
    }

    /// Contribution of step `j ∈ 1..=n` to `H_n`.
    pub fn term(&self, theta: &Theta, j: usize) -> Result<f64> {
        self.check_theta(theta)?;
        let p = self.g.transition_matrix(self.obs.h)?;
        let n_states = theta.n_states();
        let (xp, xn) = (self.obs.x[j - 1], self.obs.x[j]);
        let mut acc = CompensatedSum::new();
        for i in 0..n_states {
            let r = xn - mu_prev(xp, theta.b[i], theta.lambda, self.obs.h);
            let lf = log_cauchy(r, theta.delta, self.obs.h);
            for kk in 0..n_states {
                let wv = self.w.get(j, i, kk);
                if wv > 0.0 {
                    let pv = p[i * n_states + kk];
                    if pv <= 0.0 {
                        return Err(Error::ImpossibleTransition { j, i: i + 1, k: kk + 1 });
                    }
                    acc.add(wv * (lf + pv.ln()));
                }
            }
        }
        Ok(acc.value())
    }

    /// Analytic gradient over `(b(1..N), λ, δ)`.
    pub fn gradient(&self, theta: &Theta) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        let dim = theta.dim();
        let n_states = theta.n_states();
        let (li, di) = (theta.lambda_index(), theta.delta_index());
        let (lambda, delta, h) = (theta.lambda, theta.delta, self.obs.h);
        let x = &self.obs.x;
        let sums = tree_reduce(
            self.obs.n(),
            self.parallel,
            vec![0.0; dim],
            |s, e| {
                let mut acc = vec![CompensatedSum::new(); dim];
                for jj in s..e {
                    let j = jj + 1;
                    let (xp, xn) = (x[j - 1], x[j]);
                    for i in 0..n_states {
                        let m = self.w.prev_marginal(j, i);
                        if m == 0.0 {
                            continue;
                        }
                        let c = theta.b[i] - xp;
                        let r = xn - (xp + lambda * c * h);
                        let k2 = k::k2(r, delta, h);
                        acc[i].add(m * k2 * k::k4(r, lambda, delta));
                        acc[li].add(m * k2 * k::k3(r, c, delta));
                        acc[di].add(m * k2 * k::k1(r, delta, h));
                    }
                }
                acc.iter().map(|a| a.value()).collect()
            },
            add_vec,
        );
        Ok(sums)
    }

    /// Analytic Hessian over `(b(1..N), λ, δ)`; the b–b block is diagonal.
    pub fn hessian(&self, theta: &Theta) -> Result<DMatrix<f64>> {
        self.check_theta(theta)?;
        let dim = theta.dim();
        let n_states = theta.n_states();
        let (li, di) = (theta.lambda_index(), theta.delta_index());
        let (lambda, delta, h) = (theta.lambda, theta.delta, self.obs.h);
        let x = &self.obs.x;
        // Packed as: [bb(0..N), b_lambda(0..N), b_delta(0..N), ll, ld, dd]
        let packed = tree_reduce(
            self.obs.n(),
            self.parallel,
            vec![0.0; 3 * n_states + 3],
            |s, e| {
                let mut acc = vec![CompensatedSum::new(); 3 * n_states + 3];
                for jj in s..e {
                    let j = jj + 1;
                    let (xp, xn) = (x[j - 1], x[j]);
                    for i in 0..n_states {
                        let m = self.w.prev_marginal(j, i);
                        if m == 0.0 {
                            continue;
                        }
                        let c = theta.b[i] - xp;
                        let r = xn - (xp + lambda * c * h);
                        let k1 = k::k1(r, delta, h);
                        let k2 = k::k2(r, delta, h);
                        let k3 = k::k3(r, c, delta);
                        let k4 = k::k4(r, lambda, delta);
                        let k22 = k2 * k2;
                        let bb = k22 * k4 * k4 + k2 * (-2.0 * PI * h * lambda * lambda / delta);
                        let bl = k22 * k3 * k4 + k2 * k::k9(r, c, lambda, delta, h);
                        let bd = k22 * k1 * k4 + k2 * k::k8(r, lambda, delta);
                        let ll = k22 * k3 * k3 + k2 * k::k6(c, delta, h);
                        let ld = k22 * k3 * k1 + k2 * k::k7(r, c, delta);
                        let dd = k22 * k1 * k1 + k2 * k::k5(r, delta, h);
                        acc[i].add(m * bb);
                        acc[n_states + i].add(m * bl);
                        acc[2 * n_states + i].add(m * bd);
                        acc[3 * n_states].add(m * ll);
                        acc[3 * n_states + 1].add(m * ld);
                        acc[3 * n_states + 2].add(m * dd);
                    }
                }
                acc.iter().map(|a| a.value()).collect()
            },
            add_vec,
        );
        let mut hm = DMatrix::<f64>::zeros(dim, dim);
        for i in 0..n_states {
            hm[(i, i)] = packed[i];
            hm[(i, li)] = packed[n_states + i];
            hm[(li, i)] = packed[n_states + i];
            hm[(i, di)] = packed[2 * n_states + i];
            hm[(di, i)] = packed[2 * n_states + i];
        }
        hm[(li, li)] = packed[3 * n_states];
        hm[(li, di)] = packed[3 * n_states + 1];
        hm[(di, li)] = packed[3 * n_states + 1];
        hm[(di, di)] = packed[3 * n_states + 2];
        Ok(hm)
    }

    /// Derivatives of `H_n` in each generator entry, treating every `q_lm`
    /// as a free coordinate.
    pub fn q_derivatives(&self) -> Result<QDerivatives> {
        let n_states = self.g.n_states();
        let h = self.obs.h;
        let mut totals = vec![0.0; n_states * n_states];
        for (idx, t) in totals.iter_mut().enumerate() {
            let (l, m) = (idx / n_states, idx % n_states);
            *t = tree_sum(self.obs.n(), self.parallel, |jj| self.w.get(jj + 1, l, m));
        }
        let mut first = vec![0.0; n_states * n_states];
        let mut second = vec![0.0; n_states * n_states];
        for l in 0..n_states {
            for m in 0..n_states {
                let idx = l * n_states + m;
                let tot = totals[idx];
                if l == m {
                    let d = 1.0 + self.g.rate(l, l) * h;
                    if tot > 0.0 && d <= 0.0 {
                        return Err(Error::ImpossibleTransition { j: 0, i: l + 1, k: m + 1 });
                    }
                    if tot > 0.0 {
                        first[idx] = h / d * tot;
                        second[idx] = -h * h / (d * d) * tot;
                    }
                } else {
                    let q = self.g.rate(l, m);
                    if tot > 0.0 {
                        if q <= 0.0 {
                            return Err(Error::ImpossibleTransition { j: 0, i: l + 1, k: m + 1 });
                        }
                        first[idx] = tot / q;
                        second[idx] = -tot / (q * q);
                    }
                }
            }
        }
        Ok(QDerivatives {
            n_states,
            first,
            second,
        })
    }
}

fn add_vec(mut a: Vec<f64>, b: Vec<f64>) -> Vec<f64> {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
    a
}

/// `H_n(θ; θ')` evaluated sequentially.
pub fn h_n(theta: &Theta, g: &GeneratorMatrix, obs: &ObservationSeries, w: &SmoothedPairProbs) -> Result<f64> {
    QuasiLikelihood::new(g, obs, w)?.value(theta)
}

pub fn grad_h(theta: &Theta, g: &GeneratorMatrix, obs: &ObservationSeries, w: &SmoothedPairProbs) -> Result<Vec<f64>> {
    QuasiLikelihood::new(g, obs, w)?.gradient(theta)
}

pub fn hessian_h(
    theta: &Theta,
    g: &GeneratorMatrix,
    obs: &ObservationSeries,
    w: &SmoothedPairProbs,
) -> Result<DMatrix<f64>> {
    QuasiLikelihood::new(g, obs, w)?.hessian(theta)
}

pub fn grad_h_q(
    theta: &Theta,
    g: &GeneratorMatrix,
    obs: &ObservationSeries,
    w: &SmoothedPairProbs,
) -> Result<QDerivatives> {
    let ql = QuasiLikelihood::new(g, obs, w)?;
    ql.check_theta(theta)?;
    ql.q_derivatives()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctmc::{transition_prob_approx, validate_generator};
    use crate::nig::cauchy_density;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_regime_q() -> GeneratorMatrix {
        validate_generator(&[vec![-0.009, 0.009], vec![0.005, -0.005]]).unwrap()
    }

    struct Instance {
        theta: Theta,
        g: GeneratorMatrix,
        obs: ObservationSeries,
        w: SmoothedPairProbs,
    }

    fn random_instance(seed: u64, n: usize, n_states: usize) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = (0..n_states).map(|_| rng.random_range(0.0..10.0)).collect();
        let theta = Theta::new(b, rng.random_range(0.5..5.0), rng.random_range(0.3..3.0)).unwrap();
        let q: Vec<Vec<f64>> = (0..n_states)
            .map(|i| {
                let mut row: Vec<f64> = (0..n_states).map(|_| rng.random_range(0.01..1.0)).collect();
                row[i] = 0.0;
                row[i] = -row.iter().sum::<f64>();
                row
            })
            .collect();
        let g = validate_generator(&q).unwrap();
        let mut x = vec![rng.random_range(0.0..10.0)];
        for _ in 0..n {
            let prev = *x.last().unwrap();
            x.push(prev + rng.random_range(-1.0..1.0));
        }
        let obs = ObservationSeries::new(x, 0.1).unwrap();
        let mut flat = Vec::new();
        for _ in 0..n {
            let s: Vec<f64> = (0..n_states * n_states).map(|_| rng.random::<f64>()).collect();
            let tot: f64 = s.iter().sum();
            flat.extend(s.iter().map(|v| v / tot));
        }
        let w = SmoothedPairProbs::from_flat(n, n_states, flat).unwrap();
        Instance { theta, g, obs, w }
    }

    /// Straight triple loop, naive logs of the two factors.
    fn brute_force_h(inst: &Instance) -> f64 {
        let n_states = inst.theta.n_states();
        let h = inst.obs.h;
        let mut total = 0.0;
        for j in 1..=inst.obs.n() {
            for i in 0..n_states {
                let loc = inst.obs.x[j - 1] + inst.theta.lambda * (inst.theta.b[i] - inst.obs.x[j - 1]) * h;
                let f = cauchy_density(inst.obs.x[j], loc, inst.theta.delta * h);
                for k in 0..n_states {
                    let p = transition_prob_approx(&inst.g, h, i, k).unwrap();
                    total += (f * p).ln() * inst.w.get(j, i, k);
                }
            }
        }
        total
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn mu_prev_examples() {
        assert!((mu_prev(2.0, 6.0, 2.0, 0.1) - 2.8).abs() < 1e-15);
        assert_eq!(mu_prev(3.5, 3.5, 2.0, 0.1), 3.5);
        assert_eq!(mu_prev(3.5, 9.0, 0.0, 0.1), 3.5);
    }

    #[test]
    fn cauchy_examples() {
        let th = Theta::new(vec![6.0], 2.0, 1.0).unwrap();
        let mu = mu_prev(2.0, 6.0, 2.0, 0.1);
        let mode = cauchy_transition_density(mu, 2.0, 6.0, &th, 0.1);
        assert!((mode - 1.0 / (0.1 * PI)).abs() < 1e-14);
        let half = cauchy_transition_density(mu + 0.1, 2.0, 6.0, &th, 0.1);
        assert!((half - mode / 2.0).abs() < 1e-14);
        let v = cauchy_transition_density(mu + 0.25, 2.0, 6.0, &th, 0.1);
        assert!((v - mode / 7.25).abs() < 1e-14);
    }

    #[test]
    fn degenerate_single_term() {
        let th = Theta::new(vec![4.0], 1.5, 0.7).unwrap();
        let g = GeneratorMatrix::single_state();
        let obs = ObservationSeries::new(vec![1.0, 1.3], 0.1).unwrap();
        let w = SmoothedPairProbs::uniform(1, 1);
        let got = h_n(&th, &g, &obs, &w).unwrap();
        let loc = 1.0 + 1.5 * 3.0 * 0.1;
        let expect = cauchy_density(1.3, loc, 0.07).ln();
        assert!((got - expect).abs() < 1e-14);
    }

    #[test]
    fn matches_brute_force() {
        for seed in 0..20 {
            let inst = random_instance(seed, 5, 2);
            let got = h_n(&inst.theta, &inst.g, &inst.obs, &inst.w).unwrap();
            let expect = brute_force_h(&inst);
            assert!((got - expect).abs() < 1e-12 * expect.abs().max(1.0), "{got} vs {expect}");
        }
    }

    #[test]
    fn mode_bound() {
        let g = two_regime_q();
        let th = Theta::new(vec![6.0, 3.0], 2.0, 1.0).unwrap();
        let states = [0usize, 0, 1, 1, 1];
        let mut x = vec![1.0];
        for j in 1..states.len() {
            let prev = x[j - 1];
            x.push(mu_prev(prev, th.b[states[j - 1]], 2.0, 0.1));
        }
        let obs = ObservationSeries::new(x, 0.1).unwrap();
        let w = SmoothedPairProbs::from_path(&states, 2);
        let got = h_n(&th, &g, &obs, &w).unwrap();
        let bound = 4.0 * (1.0 / (0.1 * PI)).ln() + 0.9991f64.ln() + 0.0009f64.ln() + 2.0 * 0.9995f64.ln();
        assert!((got - bound).abs() < 1e-12);
    }

    #[test]
    fn impossible_transition_is_reported() {
        let g = validate_generator(&[vec![0.0, 0.0], vec![0.5, -0.5]]).unwrap();
        let th = Theta::new(vec![1.0, 2.0], 1.0, 1.0).unwrap();
        let obs = ObservationSeries::new(vec![0.0, 0.1, 0.2], 0.1).unwrap();
        let ok = SmoothedPairProbs::from_path(&[0, 0, 0], 2);
        assert!(h_n(&th, &g, &obs, &ok).unwrap().is_finite());
        let bad = SmoothedPairProbs::from_path(&[0, 0, 1], 2);
        match h_n(&th, &g, &obs, &bad) {
            Err(Error::ImpossibleTransition { j: 2, i: 1, k: 2 }) => {}
            other => panic!("{other:?}"),
        }
    }

    fn fd_gradient(ql: &QuasiLikelihood, theta: &Theta) -> Vec<f64> {
        let v = theta.to_vec();
        (0..v.len())
            .map(|c| {
                let step = 1e-6 * v[c].abs().max(1.0);
                let mut up = v.clone();
                up[c] += step;
                let mut dn = v.clone();
                dn[c] -= step;
                (ql.value(&Theta::from_slice(&up)).unwrap() - ql.value(&Theta::from_slice(&dn)).unwrap()) / (2.0 * step)
            })
            .collect()
    }

    fn fd_hessian(ql: &QuasiLikelihood, theta: &Theta) -> DMatrix<f64> {
        let v = theta.to_vec();
        let d = v.len();
        let mut m = DMatrix::zeros(d, d);
        for c in 0..d {
            let step = 1e-6 * v[c].abs().max(1.0);
            let mut up = v.clone();
            up[c] += step;
            let mut dn = v.clone();
            dn[c] -= step;
            let gu = ql.gradient(&Theta::from_slice(&up)).unwrap();
            let gd = ql.gradient(&Theta::from_slice(&dn)).unwrap();
            for r in 0..d {
                m[(r, c)] = (gu[r] - gd[r]) / (2.0 * step);
            }
        }
        m
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..10 {
            let inst = random_instance(100 + seed, 50, 2);
            let ql = QuasiLikelihood::new(&inst.g, &inst.obs, &inst.w).unwrap();
            let g = ql.gradient(&inst.theta).unwrap();
            let fd = fd_gradient(&ql, &inst.theta);
            for c in 0..g.len() {
                assert!(rel(g[c], fd[c]) < 1e-5, "seed {seed} coord {c}: {} vs {}", g[c], fd[c]);
            }
        }
    }

    #[test]
    fn hessian_matches_finite_differences() {
        for seed in 0..10 {
            let inst = random_instance(200 + seed, 20, 3);
            let ql = QuasiLikelihood::new(&inst.g, &inst.obs, &inst.w).unwrap();
            let h = ql.hessian(&inst.theta).unwrap();
            let fd = fd_hessian(&ql, &inst.theta);
            for r in 0..h.nrows() {
                for c in 0..h.ncols() {
                    assert!(rel(h[(r, c)], fd[(r, c)]) < 1e-4, "({r},{c}): {} vs {}", h[(r, c)], fd[(r, c)]);
                }
            }
            assert_eq!(h[(0, 1)], 0.0);
            assert_eq!(h[(1, 2)], 0.0);
            assert_eq!((&h - h.transpose()).amax(), 0.0);
        }
    }

    #[test]
    fn absent_state_has_zero_gradient() {
        let inst = random_instance(7, 30, 2);
        let w = SmoothedPairProbs::from_path(&vec![0; 31], 2);
        let g = grad_h(&inst.theta, &inst.g, &inst.obs, &w).unwrap();
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn q_derivatives_hand_arithmetic() {
        let g = two_regime_q();
        let n = 10;
        let obs = ObservationSeries::new((0..=n).map(|j| j as f64 * 0.1).collect(), 0.1).unwrap();
        let w = SmoothedPairProbs::uniform(n, 2);
        let th = Theta::new(vec![6.0, 3.0], 2.0, 1.0).unwrap();
        let d = grad_h_q(&th, &g, &obs, &w).unwrap();
        assert!((d.first(0, 0) - 10.0 * 0.1 / 0.9991 * 0.25).abs() < 1e-12);
        assert!((d.first(1, 1) - 10.0 * 0.1 / 0.9995 * 0.25).abs() < 1e-12);
        assert!((d.first(0, 1) - 10.0 * 0.25 / 0.009).abs() < 1e-10);
        assert!((d.second(0, 0) + 10.0 * 0.01 / (0.9991 * 0.9991) * 0.25).abs() < 1e-12);
        assert!((d.second(1, 0) + 10.0 * 0.25 / (0.005 * 0.005)).abs() < 1e-6);
        let none = SmoothedPairProbs::from_path(&vec![1; n + 1], 2);
        assert_eq!(grad_h_q(&th, &g, &obs, &none).unwrap().first(0, 0), 0.0);
    }

    #[test]
    fn q_derivatives_match_finite_differences() {
        let inst = random_instance(11, 40, 2);
        let ql = QuasiLikelihood::new(&inst.g, &inst.obs, &inst.w).unwrap();
        let d = ql.q_derivatives().unwrap();
        // Perturb one entry as a free coordinate: transition term only.
        let base = inst.g.transition_matrix(0.1).unwrap();
        for l in 0..2 {
            for m in 0..2 {
                let q = inst.g.rate(l, m);
                let step = 1e-6 * q.abs().max(1.0);
                let eval = |dq: f64| {
                    let mut total = 0.0;
                    for j in 1..=inst.obs.n() {
                        for i in 0..2 {
                            for k in 0..2 {
                                let mut p = base[i * 2 + k];
                                if i == l && k == m {
                                    p += dq * 0.1;
                                }
                                total += inst.w.get(j, i, k) * p.ln();
                            }
                        }
                    }
                    total
                };
                let fd = (eval(step) - eval(-step)) / (2.0 * step);
                assert!(rel(d.first(l, m), fd) < 1e-6, "({l},{m}) {} vs {fd}", d.first(l, m));
                let s2 = 1e-3 * q.abs().max(0.01);
                let fd2 = (eval(s2) - 2.0 * eval(0.0) + eval(-s2)) / (s2 * s2);
                assert!(rel(d.second(l, m), fd2) < 1e-3, "({l},{m}) {} vs {fd2}", d.second(l, m));
            }
        }
    }

    #[test]
    fn additivity() {
        let inst = random_instance(3, 25, 2);
        let ql = QuasiLikelihood::new(&inst.g, &inst.obs, &inst.w).unwrap();
        let total = ql.value(&inst.theta).unwrap();
        let terms: f64 = (1..=25).map(|j| ql.term(&inst.theta, j).unwrap()).sum();
        assert!((total - terms).abs() < 1e-11 * total.abs());
    }

    #[test]
    fn parallel_is_bit_identical() {
        let inst = random_instance(5, 3000, 2);
        let a = QuasiLikelihood::new(&inst.g, &inst.obs, &inst.w).unwrap();
        let b = a.parallel(true);
        assert_eq!(a.value(&inst.theta).unwrap().to_bits(), b.value(&inst.theta).unwrap().to_bits());
        assert_eq!(a.gradient(&inst.theta).unwrap(), b.gradient(&inst.theta).unwrap());
        assert_eq!(a.hessian(&inst.theta).unwrap(), b.hessian(&inst.theta).unwrap());
    }

    proptest! {
        #[test]
        fn label_permutation_invariance(seed in 0u64..1000) {
            let inst = random_instance(seed, 8, 3);
            let perm = [2usize, 0, 1];
            let b: Vec<f64> = (0..3).map(|i| inst.theta.b[perm[i]]).collect();
            let th = Theta::new(b, inst.theta.lambda, inst.theta.delta).unwrap();
            let q: Vec<Vec<f64>> = (0..3)
                .map(|i| (0..3).map(|k| inst.g.rate(perm[i], perm[k])).collect())
                .collect();
            let g = validate_generator(&q).unwrap();
            let mut flat = Vec::new();
            for j in 1..=8 {
                for i in 0..3 {
                    for k in 0..3 {
                        flat.push(inst.w.get(j, perm[i], perm[k]));
                    }
                }
            }
            let w = SmoothedPairProbs::from_flat(8, 3, flat).unwrap();
            let a = h_n(&inst.theta, &inst.g, &inst.obs, &inst.w).unwrap();
            let b = h_n(&th, &g, &inst.obs, &w).unwrap();
            prop_assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        }
    }
}
