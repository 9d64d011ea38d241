//! The modified EM iteration.
//!
//! Each iteration runs the filter and smoother at the current estimate
//! `θ^{(m)}`, builds `H_n(·; θ^{(m)})` from the smoothed pair weights and takes
//! one ascent step: `θ^{(m)} + ρ ∇H_n` (first order) or a Newton step with a
//! first-order fallback. Iterates are clamped into the parameter boxes.

use crate::ctmc::{validate_generator, GeneratorMatrix};
use crate::error::{Error, Result};
use crate::quasi_likelihood::{QuasiLikelihood, Theta};
use crate::sim::ObservationSeries;
use crate::smoother::{smooth, uniform_probs, FilterState, Smoothed};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Termination {
    /// `|H_{m+1} - H_m| / |H_m|`
    D1,
    /// `|θ_{m+1} - θ_m| / |θ_m|`
    D2,
    /// `|θ_{m+1} - θ_m|`
    #[default]
    D3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MStep {
    #[default]
    FirstOrder,
    Newton,
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi
    }
}

/// Compact parameter region; one interval shared by all drift levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaBoxes {
    pub b: Interval,
    pub lambda: Interval,
    pub delta: Interval,
}

impl Default for ThetaBoxes {
    fn default() -> Self {
        Self {
            b: Interval::new(0.0, 10.0),
            lambda: Interval::new(1e-6, 10.0),
            delta: Interval::new(1e-6, 5.0),
        }
    }
}

impl ThetaBoxes {
    pub fn validate(&self) -> Result<()> {
        for (name, iv) in [("b", self.b), ("lambda", self.lambda), ("delta", self.delta)] {
            if !iv.valid() {
                return Err(Error::Config(format!("box for {name} is not a finite interval: {iv:?}")));
            }
        }
        if self.lambda.lo <= 0.0 || self.delta.lo <= 0.0 {
            return Err(Error::Config("boxes for lambda and delta need positive lower bounds".into()));
        }
        Ok(())
    }

    /// Clamp a parameter vector into the boxes. Lower bounds of λ and δ are
    /// kept strictly inside by a rounding-scale margin.
    pub fn project(&self, v: &mut [f64]) {
        let n = v.len() - 2;
        for x in v[..n].iter_mut() {
            *x = x.clamp(self.b.lo, self.b.hi);
        }
        v[n] = clamp_positive(v[n], self.lambda);
        v[n + 1] = clamp_positive(v[n + 1], self.delta);
    }

    fn draw<R: Rng>(&self, n_states: usize, rng: &mut R) -> Theta {
        let b = (0..n_states).map(|_| uniform_closed(self.b, rng)).collect();
        // Positive coordinates are drawn from (lo, hi].
        let lambda = self.lambda.hi - (self.lambda.hi - self.lambda.lo) * rng.random::<f64>();
        let delta = self.delta.hi - (self.delta.hi - self.delta.lo) * rng.random::<f64>();
        Theta { b, lambda, delta }
    }
}

fn uniform_closed<R: Rng>(iv: Interval, rng: &mut R) -> f64 {
    iv.lo + (iv.hi - iv.lo) * rng.random::<f64>()
}

fn clamp_positive(x: f64, iv: Interval) -> f64 {
    if iv.lo == iv.hi {
        return iv.lo;
    }
    let floor = iv.lo + 16.0 * f64::EPSILON * iv.lo.abs().max(1.0);
    x.clamp(floor.min(iv.hi), iv.hi)
}

/// ChaCha stream for random starting points, distinct from the simulator's
/// chain and noise streams so one seed can drive a whole replication.
pub const INIT_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    Explicit(Theta),
    /// Uniform in the boxes, from its own seed.
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub epsilon: f64,
    pub rho: f64,
    pub max_iters: usize,
    pub termination: Termination,
    pub m_step: MStep,
    pub update_q: bool,
    pub boxes: ThetaBoxes,
    pub init: InitPolicy,
    /// Defaults to uniform.
    pub initial_filter_probs: Option<Vec<f64>>,
    /// Newton falls back to first order above this Hessian condition number.
    pub newton_cond_cap: f64,
    /// Evaluate `H_n` sums on the rayon pool (bit-identical results).
    pub parallel: bool,
    /// Record per-iteration wall time; `false` writes zeros so traces are
    /// byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            rho: 1e-4,
            max_iters: 300,
            termination: Termination::D3,
            m_step: MStep::FirstOrder,
            update_q: false,
            boxes: ThetaBoxes::default(),
            init: InitPolicy::Random { seed: 0 },
            initial_filter_probs: None,
            newton_cond_cap: 1e12,
            parallel: false,
            record_wall_time: true,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(Error::Config(format!("rho must be > 0, got {}", self.rho)));
        }
        if self.max_iters < 1 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        self.boxes.validate()?;
        if let InitPolicy::Explicit(t) = &self.init {
            t.validate()?;
        }
        Ok(())
    }

    /// Starting point for a model with `n_states` regimes.
    pub fn initial_theta(&self, n_states: usize) -> Result<Theta> {
        match &self.init {
            InitPolicy::Explicit(t) => {
                if t.n_states() != n_states {
                    return Err(Error::Dimension(format!(
                        "initial theta has {} levels, model has {n_states} states",
                        t.n_states()
                    )));
                }
                Ok(t.clone())
            }
            InitPolicy::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(INIT_STREAM);
                Ok(self.boxes.draw(n_states, &mut rng))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    MaxItersReached,
    NumericalFailure,
}

impl FitStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            FitStatus::Converged => "converged",
            FitStatus::MaxItersReached => "max_iters_reached",
            FitStatus::NumericalFailure => "numerical_failure",
        }
    }
}

/// One trace row. Row 0 is the starting point, with `h` equal to
/// `H_n(θ^{(0)}; θ^{(0)})` and `stat` NaN. Row `m + 1` holds `θ^{(m+1)}`,
/// `H_n(θ^{(m+1)}; θ^{(m)})` and the termination statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub theta: Theta,
    pub h: f64,
    pub stat: f64,
    pub elapsed_ms: f64,
    /// `true` when a Newton step was requested but the first-order fallback ran.
    pub newton_fallback: bool,
    /// `H_n(θ^{(m+1)}; θ^{(m)}) < H_n(θ^{(m)}; θ^{(m)})` beyond rounding.
    pub ascent_violation: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmTrace {
    pub records: Vec<TraceRecord>,
    pub warnings: Vec<String>,
}

impl EmTrace {
    pub fn ascent_violations(&self) -> usize {
        self.records.iter().filter(|r| r.ascent_violation).count()
    }
}

#[derive(Debug, Clone)]
pub struct EmResult {
    /// Last iterate.
    pub estimate: Theta,
    pub generator: GeneratorMatrix,
    pub trace: EmTrace,
    pub status: FitStatus,
    /// Number of M-steps taken.
    pub iterations: usize,
    pub elapsed_ms: f64,
    /// Failure description when `status` is `NumericalFailure`.
    pub failure: Option<String>,
}

/// `θ + ρ ∇H`, projected into the boxes.
pub fn first_order_step(theta: &Theta, grad: &[f64], rho: f64, boxes: &ThetaBoxes) -> Result<Theta> {
    if let Some(c) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical {
            stage: "gradient",
            index: c,
            detail: format!("non-finite component {}", grad[c]),
        });
    }
    let mut v = theta.to_vec();
    for (x, g) in v.iter_mut().zip(grad) {
        *x += rho * g;
    }
    boxes.project(&mut v);
    Ok(Theta::from_slice(&v))
}

/// Newton update `θ - (∇²H)^{-1} ∇H`, projected into the boxes.
///
/// Falls back to [`first_order_step`] when the Hessian is singular or worse
/// conditioned than `cond_cap`, or when the Newton direction is not an ascent
/// direction. The flag in the result reports whether the fallback ran.
pub fn newton_step(
    theta: &Theta,
    grad: &[f64],
    hess: &DMatrix<f64>,
    rho: f64,
    boxes: &ThetaBoxes,
    cond_cap: f64,
) -> Result<(Theta, bool)> {
    if let Some(dir) = newton_direction(grad, hess, cond_cap) {
        let mut v = theta.to_vec();
        for (x, d) in v.iter_mut().zip(dir.iter()) {
            *x += d;
        }
        boxes.project(&mut v);
        return Ok((Theta::from_slice(&v), false));
    }
    Ok((first_order_step(theta, grad, rho, boxes)?, true))
}

fn newton_direction(grad: &[f64], hess: &DMatrix<f64>, cond_cap: f64) -> Option<DVector<f64>> {
    if grad.iter().any(|g| !g.is_finite()) || hess.iter().any(|h| !h.is_finite()) {
        return None;
    }
    let sv = hess.clone().svd(false, false).singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > 0.0 && smax / smin < cond_cap) {
        return None;
    }
    let g = DVector::from_column_slice(grad);
    let dir = -hess.clone().lu().solve(&g)?;
    if g.dot(&dir) > 0.0 && dir.iter().all(|d| d.is_finite()) {
        Some(dir)
    } else {
        None
    }
}

/// Termination statistic with Euclidean norms. Returns the statistic and
/// whether D1/D2 had to fall back to D3 because of a zero denominator.
pub fn termination_stat(kind: Termination, theta_m: &Theta, theta_m1: &Theta, h_m: f64, h_m1: f64) -> (f64, bool) {
    let a = theta_m.to_vec();
    let b = theta_m1.to_vec();
    let diff = a.iter().zip(&b).map(|(x, y)| (y - x) * (y - x)).sum::<f64>().sqrt();
    match kind {
        Termination::D3 => (diff, false),
        Termination::D2 => {
            let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                (diff, true)
            } else {
                (diff / norm, false)
            }
        }
        Termination::D1 => {
            if h_m == 0.0 {
                (diff, true)
            } else {
                ((h_m1 - h_m).abs() / h_m.abs(), false)
            }
        }
    }
}

/// Coordinate-wise squared error `(est - truth)^2` over `(b, λ, δ)`.
pub fn quadratic_error(estimate: &Theta, truth: &Theta) -> Result<Vec<f64>> {
    if estimate.n_states() != truth.n_states() {
        return Err(Error::Dimension(format!(
            "estimate has {} levels, truth has {}",
            estimate.n_states(),
            truth.n_states()
        )));
    }
    Ok(estimate
        .to_vec()
        .iter()
        .zip(truth.to_vec())
        .map(|(e, t)| (e - t) * (e - t))
        .collect())
}

/// Regimes relabelled by decreasing drift level; returns the permutation
/// `perm` with `sorted.b[r] = theta.b[perm[r]]`.
pub fn sort_by_level(theta: &Theta) -> (Theta, Vec<usize>) {
    let mut perm: Vec<usize> = (0..theta.n_states()).collect();
    perm.sort_by(|&i, &k| theta.b[k].total_cmp(&theta.b[i]).then(i.cmp(&k)));
    let b = perm.iter().map(|&i| theta.b[i]).collect();
    (
        Theta {
            b,
            lambda: theta.lambda,
            delta: theta.delta,
        },
        perm,
    )
}

/// Rounding-scale slack used when flagging ascent violations.
fn ascent_tolerance(h: f64) -> f64 {
    64.0 * f64::EPSILON * h.abs().max(1.0)
}

/// Gradient step on the free off-diagonal rates with `q_ll = -Σ_{m≠l} q_lm`.
fn update_generator(g: &GeneratorMatrix, ql: &QuasiLikelihood, rho: f64, h: f64) -> Result<GeneratorMatrix> {
    let d = ql.q_derivatives()?;
    let mut rows = g.rows();
    for (l, row) in rows.iter_mut().enumerate() {
        for (m, q) in row.iter_mut().enumerate() {
            if l != m {
                let grad = d.first(l, m) - d.first(l, l);
                *q = (*q + rho * grad).max(1e-8);
            }
        }
        row[l] = 0.0;
        row[l] = -row.iter().sum::<f64>();
    }
    let out = validate_generator(&rows)?;
    out.check_step(h)?;
    Ok(out)
}

/// Everything one E-step produces.
pub struct EStep {
    pub filter: FilterState,
    pub smoothed: Smoothed,
}

/// Runs the filter and smoother at `theta`.
pub fn e_step(theta: &Theta, g: &GeneratorMatrix, obs: &ObservationSeries, probs: &[f64]) -> Result<EStep> {
    let (filter, smoothed) = smooth(theta, g, obs, probs)?;
    Ok(EStep { filter, smoothed })
}

/// Fits `θ` to `obs` for generator `g`.
///
/// Configuration errors are returned as `Err`; failures inside the iteration
/// end the fit with [`FitStatus::NumericalFailure`] and keep the last good
/// iterate.
pub fn em_fit(obs: &ObservationSeries, g: &GeneratorMatrix, cfg: &EmConfig) -> Result<EmResult> {
    em_fit_with(obs, g, cfg, |_, _| {})
}

/// As [`em_fit`], calling `inspect(m, &e_step)` after every E-step.
pub fn em_fit_with<F>(obs: &ObservationSeries, g: &GeneratorMatrix, cfg: &EmConfig, mut inspect: F) -> Result<EmResult>
where
    F: FnMut(usize, &EStep),
{
    cfg.validate()?;
    g.check_step(obs.h)?;
    let n_states = g.n_states();
    let probs = cfg.initial_filter_probs.clone().unwrap_or_else(|| uniform_probs(n_states));
    if probs.len() != n_states {
        return Err(Error::Dimension(format!(
            "{} initial filter probabilities for {n_states} states",
            probs.len()
        )));
    }
    let mut v0 = cfg.initial_theta(n_states)?.to_vec();
    cfg.boxes.project(&mut v0);
    let mut theta = Theta::from_slice(&v0);
    theta.validate()?;
    let mut gen = g.clone();
    let start = Instant::now();
    let elapsed = |s: &Instant| {
        if cfg.record_wall_time {
            s.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        }
    };
    let mut trace = EmTrace::default();
    let mut status = FitStatus::MaxItersReached;
    let mut failure = None;
    let mut iterations = 0;
    for m in 0..cfg.max_iters {
        let step = (|| -> Result<(Theta, f64, f64, bool, GeneratorMatrix)> {
            let es = e_step(&theta, &gen, obs, &probs)?;
            inspect(m, &es);
            let ql = QuasiLikelihood::new(&gen, obs, &es.smoothed.pairs)?.parallel(cfg.parallel);
            let h_m = ql.value(&theta)?;
            let grad = ql.gradient(&theta)?;
            let (next, fallback) = match cfg.m_step {
                MStep::FirstOrder => (first_order_step(&theta, &grad, cfg.rho, &cfg.boxes)?, false),
                MStep::Newton => {
                    let hess = ql.hessian(&theta)?;
                    newton_step(&theta, &grad, &hess, cfg.rho, &cfg.boxes, cfg.newton_cond_cap)?
                }
            };
            let h_m1 = ql.value(&next)?;
            if !h_m1.is_finite() {
                return Err(Error::Numerical {
                    stage: "objective",
                    index: m + 1,
                    detail: format!("H = {h_m1}"),
                });
            }
            let next_gen = if cfg.update_q {
                update_generator(&gen, &ql, cfg.rho, obs.h)?
            } else {
                gen.clone()
            };
            Ok((next, h_m, h_m1, fallback, next_gen))
        })();
        let (next, h_m, h_m1, fallback, next_gen) = match step {
            Ok(s) => s,
            Err(e) => {
                status = FitStatus::NumericalFailure;
                failure = Some(
                    Error::Iteration {
                        iteration: m + 1,
                        source: Box::new(e),
                    }
                    .to_string(),
                );
                break;
            }
        };
        if m == 0 {
            trace.records.push(TraceRecord {
                iter: 0,
                theta: theta.clone(),
                h: h_m,
                stat: f64::NAN,
                elapsed_ms: 0.0,
                newton_fallback: false,
                ascent_violation: false,
            });
        }
        let violation = h_m1 < h_m - ascent_tolerance(h_m);
        if violation {
            trace
                .warnings
                .push(format!("iteration {}: H decreased from {h_m} to {h_m1}", m + 1));
        }
        if fallback {
            trace
                .warnings
                .push(format!("iteration {}: Newton step rejected, first-order step used", m + 1));
        }
        let (stat, stat_fallback) = termination_stat(cfg.termination, &theta, &next, h_m, h_m1);
        if stat_fallback {
            trace
                .warnings
                .push(format!("iteration {}: zero denominator, D3 used", m + 1));
        }
        let coincide = next.coincident_levels();
        if !coincide.is_empty() {
            trace
                .warnings
                .push(format!("iteration {}: coincident drift levels {coincide:?}", m + 1));
        }
        theta = next;
        gen = next_gen;
        iterations = m + 1;
        trace.records.push(TraceRecord {
            iter: m + 1,
            theta: theta.clone(),
            h: h_m1,
            stat,
            elapsed_ms: elapsed(&start),
            newton_fallback: fallback,
            ascent_violation: violation,
        });
        if stat < cfg.epsilon {
            status = FitStatus::Converged;
            break;
        }
    }
    Ok(EmResult {
        estimate: theta,
        generator: gen,
        trace,
        status,
        iterations,
        elapsed_ms: elapsed(&start),
        failure,
    })
}
