//! Forward filter and approximate backward pairwise smoother.
//!
//! Indexing: observation times are `t_0, …, t_n`. `filtered[j]` conditions on
//! `X_{t_0..t_j}`; `predicted_pair[j]` and `predicted_marginal[j]` (for
//! `j = 1..=n`) describe `(α_{t_{j-1}}, α_{t_j})` given `X_{t_0..t_{j-1}}`.
//! The smoothed pair for the transition `t_{j-1} -> t_j` is stored at index
//! `j` of [`SmoothedPairProbs`].
//!
//! The backward pass uses the approximation
//!
//! ```text
//! P(α_{j-1}=i, α_j=k | X_{0..n}) ≈ P(α_j=k | X_{0..n}) · P(α_{j-1}=i, α_j=k | X_{0..j-1}) / P(α_j=k | X_{0..j-1})
//! ```
//!
//! which ignores that the transition density of `X_{t_j}` depends on
//! `α_{t_{j-1}}`. The filter itself is exact for the approximate model.

use crate::ctmc::GeneratorMatrix;
use crate::error::{Error, Result};
use crate::quasi_likelihood::{mu_prev, SmoothedPairProbs, Theta};
use crate::sim::ObservationSeries;
use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    n: usize,
    n_states: usize,
    /// `(n + 1) × N`
    filtered: Vec<f64>,
    /// `n × N × N`, slice `j - 1` holds step `j`.
    predicted_pair: Vec<f64>,
    /// `n × N`
    predicted_marginal: Vec<f64>,
    /// Sum of log normalizers.
    log_evidence: f64,
    /// Steps at which the log-space fallback was used.
    pub fallback_steps: Vec<usize>,
}

impl FilterState {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    /// `P(α_{t_j} = · | X_{0..j})` for `j ∈ 0..=n`.
    pub fn filtered(&self, j: usize) -> &[f64] {
        &self.filtered[j * self.n_states..(j + 1) * self.n_states]
    }

    /// `P(α_{t_{j-1}} = i, α_{t_j} = k | X_{0..j-1})` for `j ∈ 1..=n`, row-major in `(i, k)`.
    pub fn predicted_pair(&self, j: usize) -> &[f64] {
        let s = self.n_states * self.n_states;
        &self.predicted_pair[(j - 1) * s..j * s]
    }

    /// `P(α_{t_j} = · | X_{0..j-1})` for `j ∈ 1..=n`.
    pub fn predicted_marginal(&self, j: usize) -> &[f64] {
        &self.predicted_marginal[(j - 1) * self.n_states..j * self.n_states]
    }

    /// `log p(X_1, …, X_n | X_0)` under the Cauchy and first-order transition
    /// approximations.
    pub fn log_evidence(&self) -> f64 {
        self.log_evidence
    }

    /// Slices on the simplex within `tol`, and predicted pairs marginalize to
    /// predicted marginals within `tol`.
    pub fn check(&self, tol: f64) -> Result<()> {
        for j in 0..=self.n {
            check_simplex("filter", j, self.filtered(j), tol)?;
        }
        for j in 1..=self.n {
            check_simplex("prediction", j, self.predicted_pair(j), tol)?;
            check_simplex("prediction", j, self.predicted_marginal(j), tol)?;
            for k in 0..self.n_states {
                let s: f64 = (0..self.n_states).map(|i| self.predicted_pair(j)[i * self.n_states + k]).sum();
                if (s - self.predicted_marginal(j)[k]).abs() > tol {
                    return Err(Error::Numerical {
                        stage: "prediction",
                        index: j,
                        detail: format!("pair marginal {s} differs from marginal {}", self.predicted_marginal(j)[k]),
                    });
                }
            }
        }
        Ok(())
    }
}

fn check_simplex(stage: &'static str, index: usize, v: &[f64], tol: f64) -> Result<()> {
    if let Some(x) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Numerical {
            stage,
            index,
            detail: format!("entry {x} outside [0, 1]"),
        });
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > tol {
        return Err(Error::Numerical {
            stage,
            index,
            detail: format!("slice sums to {s}"),
        });
    }
    Ok(())
}

/// Uniform initial filter probabilities.
pub fn uniform_probs(n_states: usize) -> Vec<f64> {
    vec![1.0 / n_states as f64; n_states]
}

/// Forward pass of the filter for parameters `theta`.
pub fn forward_filter(
    theta: &Theta,
    g: &GeneratorMatrix,
    obs: &ObservationSeries,
    initial_probs: &[f64],
) -> Result<FilterState> {
    theta.validate()?;
    let n_states = g.n_states();
    if theta.n_states() != n_states || initial_probs.len() != n_states {
        return Err(Error::Dimension(format!(
            "generator has {n_states} states, theta {} and initial probabilities {}",
            theta.n_states(),
            initial_probs.len()
        )));
    }
    check_simplex("initial probabilities", 0, initial_probs, 1e-9)?;
    let h = obs.h;
    let p = g.transition_matrix(h)?;
    let n = obs.n();
    let scale = theta.delta * h;
    let mut filtered = Vec::with_capacity((n + 1) * n_states);
    let total0: f64 = initial_probs.iter().sum();
    filtered.extend(initial_probs.iter().map(|v| v / total0));
    let mut predicted_pair = vec![0.0; n * n_states * n_states];
    let mut predicted_marginal = vec![0.0; n * n_states];
    let mut log_evidence = 0.0;
    let mut fallback_steps = Vec::new();
    let mut u = vec![0.0; n_states];
    let mut emis = vec![0.0; n_states];
    for j in 1..=n {
        let prev = filtered[(j - 1) * n_states..j * n_states].to_vec();
        let pp = &mut predicted_pair[(j - 1) * n_states * n_states..j * n_states * n_states];
        let pm = &mut predicted_marginal[(j - 1) * n_states..j * n_states];
        for i in 0..n_states {
            for k in 0..n_states {
                let v = p[i * n_states + k] * prev[i];
                pp[i * n_states + k] = v;
                pm[k] += v;
            }
        }
        let (xp, xn) = (obs.x[j - 1], obs.x[j]);
        for (k, e) in emis.iter_mut().enumerate() {
            let z = (xn - mu_prev(xp, theta.b[k], theta.lambda, h)) / scale;
            *e = 1.0 / (scale * PI * (1.0 + z * z));
        }
        let mut total = combine(&emis, &p, &prev, &mut u);
        let mut log_shift = 0.0;
        if !(total > 0.0 && total.is_finite()) {
            // Underflow: rescale the emission terms by their largest log value.
            let logs: Vec<f64> = (0..n_states)
                .map(|k| {
                    let z = (xn - mu_prev(xp, theta.b[k], theta.lambda, h)) / scale;
                    let a = z.abs();
                    let l1p = if a > 1e150 { 2.0 * a.ln() } else { (a * a).ln_1p() };
                    -(scale * PI).ln() - l1p
                })
                .collect();
            log_shift = logs
                .iter()
                .zip(&prev)
                .filter(|(_, &w)| w > 0.0)
                .map(|(l, _)| *l)
                .fold(f64::NEG_INFINITY, f64::max);
            for (e, l) in emis.iter_mut().zip(&logs) {
                *e = (l - log_shift).exp();
            }
            total = combine(&emis, &p, &prev, &mut u);
            fallback_steps.push(j);
            if !(total > 0.0 && total.is_finite()) {
                return Err(Error::Numerical {
                    stage: "forward filter",
                    index: j,
                    detail: "normalizing constant is zero".into(),
                });
            }
        }
        log_evidence += total.ln() + log_shift;
        filtered.extend(u.iter().map(|v| v / total));
    }
    Ok(FilterState {
        n,
        n_states,
        filtered,
        predicted_pair,
        predicted_marginal,
        log_evidence,
        fallback_steps,
    })
}

/// `u_i = Σ_k e_k P(k, i) prev_k`; returns `Σ_i u_i`.
fn combine(emis: &[f64], p: &[f64], prev: &[f64], u: &mut [f64]) -> f64 {
    let n = emis.len();
    for (i, ui) in u.iter_mut().enumerate() {
        *ui = (0..n).map(|k| emis[k] * p[k * n + i] * prev[k]).sum();
    }
    u.iter().sum()
}

/// Smoother output: pair weights plus the smoothed marginals they imply.
#[derive(Debug, Clone, PartialEq)]
pub struct Smoothed {
    pub pairs: SmoothedPairProbs,
    /// `(n + 1) × N`
    marginals: Vec<f64>,
}

impl Smoothed {
    /// `P(α_{t_j} = · | X_{0..n})` for `j ∈ 0..=n`.
    pub fn marginal(&self, j: usize) -> &[f64] {
        let n = self.pairs.n_states();
        &self.marginals[j * n..(j + 1) * n]
    }

    /// Most probable state at each `t_j` (0-based).
    pub fn argmax_path(&self) -> Vec<usize> {
        (0..=self.pairs.n())
            .map(|j| {
                let m = self.marginal(j);
                (0..m.len()).fold(0, |b, k| if m[k] > m[b] { k } else { b })
            })
            .collect()
    }

    /// Simplex and pair/marginal consistency checks within `tol`.
    pub fn check(&self, tol: f64) -> Result<()> {
        let n_states = self.pairs.n_states();
        self.pairs.check(tol)?;
        for j in 0..=self.pairs.n() {
            check_simplex("smoother", j, self.marginal(j), tol)?;
        }
        for j in 1..=self.pairs.n() {
            for k in 0..n_states {
                let s = self.pairs.next_marginal(j, k);
                if (s - self.marginal(j)[k]).abs() > tol {
                    return Err(Error::Numerical {
                        stage: "smoother",
                        index: j,
                        detail: format!("pair marginal {s} differs from marginal {}", self.marginal(j)[k]),
                    });
                }
            }
            for i in 0..n_states {
                let s = self.pairs.prev_marginal(j, i);
                if (s - self.marginal(j - 1)[i]).abs() > tol {
                    return Err(Error::Numerical {
                        stage: "smoother",
                        index: j,
                        detail: format!("pair marginal {s} differs from marginal {}", self.marginal(j - 1)[i]),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Backward pass producing pairwise smoothed probabilities.
pub fn backward_smooth(fs: &FilterState) -> Result<Smoothed> {
    let (n, ns) = (fs.n, fs.n_states);
    let mut marginals = vec![0.0; (n + 1) * ns];
    marginals[n * ns..].copy_from_slice(fs.filtered(n));
    let mut w = vec![0.0; n * ns * ns];
    for j in (1..=n).rev() {
        let pp = fs.predicted_pair(j);
        let pm = fs.predicted_marginal(j);
        let slice = &mut w[(j - 1) * ns * ns..j * ns * ns];
        for k in 0..ns {
            let sm = marginals[j * ns + k];
            for i in 0..ns {
                let num = sm * pp[i * ns + k];
                slice[i * ns + k] = if num == 0.0 {
                    0.0
                } else if pm[k] > 0.0 {
                    num / pm[k]
                } else {
                    return Err(Error::Numerical {
                        stage: "backward smoother",
                        index: j,
                        detail: format!("predicted probability of state {} is zero", k + 1),
                    });
                };
            }
        }
        let total: f64 = slice.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::Numerical {
                stage: "backward smoother",
                index: j,
                detail: format!("pair slice sums to {total}"),
            });
        }
        slice.iter_mut().for_each(|v| *v /= total);
        for i in 0..ns {
            marginals[(j - 1) * ns + i] = slice[i * ns..(i + 1) * ns].iter().sum();
        }
    }
    Ok(Smoothed {
        pairs: SmoothedPairProbs::from_flat(n, ns, w)?,
        marginals,
    })
}

/// Forward filter followed by the backward pass.
pub fn smooth(
    theta: &Theta,
    g: &GeneratorMatrix,
    obs: &ObservationSeries,
    initial_probs: &[f64],
) -> Result<(FilterState, Smoothed)> {
    let fs = forward_filter(theta, g, obs, initial_probs)?;
    let sm = backward_smooth(&fs)?;
    Ok((fs, sm))
}
