//! Generator matrices and the hidden regime chain.
//!
//! States are 0-based everywhere in the API; files and CLI output use
//! 1-based labels.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

const ROW_SUM_TOL: f64 = 1e-9;

/// Validated CTMC generator: non-negative off-diagonal rates, zero row sums.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMatrix {
    n: usize,
    q: Vec<f64>,
}

/// Non-fatal properties of a generator worth surfacing to the user.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GeneratorFlags {
    /// Some off-diagonal rate is exactly zero.
    pub zero_rates: bool,
    /// States with no outgoing rate.
    pub absorbing: Vec<usize>,
}

impl GeneratorFlags {
    pub fn absorbing_everywhere(&self, n: usize) -> bool {
        self.absorbing.len() == n
    }
}

/// Validates a raw square rate matrix.
///
/// The diagonal of the returned generator is recomputed as `-Σ_{j≠i} q_ij`
/// so rows sum to zero to rounding; the input is not modified.
pub fn validate_generator(q_raw: &[Vec<f64>]) -> Result<GeneratorMatrix> {
    let n = q_raw.len();
    if n < 2 {
        return Err(Error::InvalidGenerator(format!("need at least 2 states, got {n}")));
    }
    let mut q = Vec::with_capacity(n * n);
    for (i, row) in q_raw.iter().enumerate() {
        if row.len() != n {
            return Err(Error::InvalidGenerator(format!(
                "row {} has {} entries, expected {n}",
                i + 1,
                row.len()
            )));
        }
        let mut off = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::InvalidGenerator(format!("row {}: entry {} is not finite", i + 1, j + 1)));
            }
            if j != i {
                if v < 0.0 {
                    return Err(Error::InvalidGenerator(format!(
                        "row {}: negative off-diagonal rate q[{},{}] = {v}",
                        i + 1,
                        i + 1,
                        j + 1
                    )));
                }
                off += v;
            }
        }
        let sum = off + row[i];
        if sum.abs() > ROW_SUM_TOL {
            return Err(Error::InvalidGenerator(format!("row {}: row sum {sum} is not 0", i + 1)));
        }
        for (j, &v) in row.iter().enumerate() {
            q.push(if j == i { -off } else { v });
        }
    }
    Ok(GeneratorMatrix { n, q })
}

impl GeneratorMatrix {
    /// One-state zero generator, for degenerate non-switching setups.
    pub fn single_state() -> Self {
        Self { n: 1, q: vec![0.0] }
    }

    pub fn n_states(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn rate(&self, i: usize, k: usize) -> f64 {
        self.q[i * self.n + k]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.q.chunks(self.n).map(|r| r.to_vec()).collect()
    }

    pub fn flags(&self) -> GeneratorFlags {
        let mut flags = GeneratorFlags::default();
        for i in 0..self.n {
            let mut out = 0.0;
            for k in 0..self.n {
                if k != i {
                    if self.rate(i, k) == 0.0 {
                        flags.zero_rates = true;
                    }
                    out += self.rate(i, k);
                }
            }
            if out == 0.0 {
                flags.absorbing.push(i);
            }
        }
        flags
    }

    /// Largest step for which every `1 + q_ii * step` is a probability.
    pub fn max_step(&self) -> f64 {
        let m = (0..self.n).map(|i| -self.rate(i, i)).fold(0.0, f64::max);
        if m == 0.0 {
            f64::INFINITY
        } else {
            1.0 / m
        }
    }

    /// Checks `1 + q_ii * step >= 0` for all states.
    pub fn check_step(&self, step: f64) -> Result<()> {
        if !(step.is_finite() && step >= 0.0) {
            return Err(Error::Config(format!("step must be finite and >= 0, got {step}")));
        }
        for i in 0..self.n {
            let value = 1.0 + self.rate(i, i) * step;
            if value < 0.0 {
                return Err(Error::StepSize {
                    state: i + 1,
                    step,
                    value,
                    limit: self.max_step(),
                });
            }
        }
        Ok(())
    }

    /// Row-major one-step kernel `P[i][k]` with the o(h) terms dropped.
    ///
    /// The diagonal is formed as `1 - Σ_{k≠i} q_ik h`, which equals
    /// `1 + q_ii h` and makes each row sum to one.
    pub fn transition_matrix(&self, h: f64) -> Result<Vec<f64>> {
        self.check_step(h)?;
        let n = self.n;
        let mut p = vec![0.0; n * n];
        for i in 0..n {
            let mut off = 0.0;
            for k in 0..n {
                if k != i {
                    let v = self.rate(i, k) * h;
                    p[i * n + k] = v;
                    off += v;
                }
            }
            p[i * n + i] = 1.0 - off;
        }
        Ok(p)
    }

    /// Stationary distribution `π` solving `π Q = 0`, `Σ π = 1`.
    pub fn stationary_distribution(&self) -> Result<Vec<f64>> {
        let n = self.n;
        // Replace the last equation of Q^T π = 0 with the normalisation.
        let mut a = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for k in 0..n {
                a[(k, i)] = self.rate(i, k);
            }
        }
        for i in 0..n {
            a[(n - 1, i)] = 1.0;
        }
        let mut rhs = DVector::<f64>::zeros(n);
        rhs[n - 1] = 1.0;
        a.lu()
            .solve(&rhs)
            .map(|v| v.iter().copied().collect())
            .ok_or_else(|| Error::Numerical {
                stage: "stationary distribution",
                index: 0,
                detail: "generator is reducible".into(),
            })
    }
}

/// `P(α_{t+h} = k | α_t = i)` with the o(h) terms dropped.
pub fn transition_prob_approx(g: &GeneratorMatrix, h: f64, i: usize, k: usize) -> Result<f64> {
    g.check_step(h)?;
    if i >= g.n || k >= g.n {
        return Err(Error::Dimension(format!("state index out of range for {} states", g.n)));
    }
    Ok(if i == k {
        1.0 + g.rate(i, i) * h
    } else {
        g.rate(i, k) * h
    })
}

/// A regime path on an equally spaced grid (0-based states).
#[derive(Debug, Clone, PartialEq)]
pub struct ChainPath {
    pub states: Vec<usize>,
    pub step: f64,
}

impl ChainPath {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn initial_state(&self) -> usize {
        self.states[0]
    }

    /// Every `factor`-th state, starting with the first.
    pub fn thin(&self, factor: usize) -> ChainPath {
        ChainPath {
            states: self.states.iter().step_by(factor).copied().collect(),
            step: self.step * factor as f64,
        }
    }

    /// Fraction of grid points spent in each state.
    pub fn occupancy(&self, n_states: usize) -> Vec<f64> {
        let mut counts = vec![0usize; n_states];
        for &s in &self.states {
            counts[s] += 1;
        }
        counts.iter().map(|&c| c as f64 / self.states.len() as f64).collect()
    }
}

/// Discrete-grid approximation of the CTMC: at each step jump `i -> j` with
/// probability `q_ij * step`, otherwise stay. Returns `n_steps + 1` states.
pub fn simulate_chain<R: Rng + ?Sized>(
    g: &GeneratorMatrix,
    step: f64,
    n_steps: usize,
    initial: usize,
    rng: &mut R,
) -> Result<ChainPath> {
    if initial >= g.n {
        return Err(Error::Config(format!(
            "initial state {} out of range 1..={}",
            initial + 1,
            g.n
        )));
    }
    let p = g.transition_matrix(step)?;
    let n = g.n;
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut cur = initial;
    states.push(cur);
    for _ in 0..n_steps {
        cur = draw_next(&p[cur * n..(cur + 1) * n], cur, rng);
        states.push(cur);
    }
    Ok(ChainPath { states, step })
}

fn draw_next<R: Rng + ?Sized>(row: &[f64], cur: usize, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    // Off-diagonal targets first; the remaining mass is "stay".
    let mut acc = 0.0;
    for (k, &p) in row.iter().enumerate() {
        if k == cur {
            continue;
        }
        acc += p;
        if u < acc {
            return k;
        }
    }
    cur
}
