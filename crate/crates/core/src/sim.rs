//! Euler simulation of the regime-switching OU-type model
//! `dX = λ (b(α_t) - X) dt + dZ_t` with NIG noise.
//!
//! The chain and the state are advanced on a fine grid of step
//! `obs_step / fine_factor` and the result is thinned to the observation grid.

use crate::ctmc::{simulate_chain, ChainPath, GeneratorMatrix};
use crate::error::{Error, Result};
use crate::nig::NigParams;
use crate::numeric::median;
use crate::quasi_likelihood::Theta;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream used for the chain; noise uses [`NOISE_STREAM`].
const CHAIN_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;

/// Observations `X_{t_0}, …, X_{t_n}` on a grid of step `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSeries {
    pub x: Vec<f64>,
    pub h: f64,
    pub t0: f64,
}

impl ObservationSeries {
    pub fn new(x: Vec<f64>, h: f64) -> Result<Self> {
        if x.len() < 2 {
            return Err(Error::Config(format!("need at least 2 observations, got {}", x.len())));
        }
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::Config(format!("observation step must be > 0, got {h}")));
        }
        if let Some(j) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                stage: "observations",
                index: j,
                detail: "non-finite value".into(),
            });
        }
        Ok(Self { x, h, t0: 0.0 })
    }

    /// Number of transitions `n` (the series holds `n + 1` values).
    pub fn n(&self) -> usize {
        self.x.len() - 1
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.x.len()).map(|j| self.t0 + j as f64 * self.h).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub theta_true: Theta,
    pub a: f64,
    pub generator: GeneratorMatrix,
    pub horizon: f64,
    pub obs_step: f64,
    pub fine_factor: usize,
    pub x0: f64,
    /// 0-based initial regime.
    pub alpha0: usize,
    pub seed: u64,
}

impl SimulationConfig {
    /// The setting of the two-regime numerical study with a given horizon.
    pub fn two_regime(horizon: f64, seed: u64) -> Self {
        Self {
            theta_true: Theta {
                b: vec![6.0, 3.0],
                lambda: 2.0,
                delta: 1.0,
            },
            a: 0.3,
            generator: crate::ctmc::validate_generator(&[vec![-0.009, 0.009], vec![0.005, -0.005]])
                .expect("static generator"),
            horizon,
            obs_step: 0.1,
            fine_factor: 10,
            x0: 0.0,
            alpha0: 0,
            seed,
        }
    }

    /// Number of observation steps `T / h`.
    pub fn n_obs(&self) -> Result<usize> {
        let ratio = self.horizon / self.obs_step;
        let n = ratio.round();
        if !(ratio.is_finite() && n >= 1.0 && (ratio - n).abs() <= 1e-9 * n.max(1.0)) {
            return Err(Error::Config(format!(
                "horizon {} is not a positive integer multiple of the observation step {}",
                self.horizon, self.obs_step
            )));
        }
        Ok(n as usize)
    }

    pub fn fine_step(&self) -> f64 {
        self.obs_step / self.fine_factor as f64
    }

    pub fn validate(&self) -> Result<()> {
        self.theta_true.validate()?;
        if self.theta_true.n_states() != self.generator.n_states() {
            return Err(Error::Dimension(format!(
                "{} drift levels for a {}-state generator",
                self.theta_true.n_states(),
                self.generator.n_states()
            )));
        }
        if !(self.a.is_finite() && self.a > 0.0) {
            return Err(Error::Domain(format!("a must be > 0, got {}", self.a)));
        }
        if !(self.obs_step.is_finite() && self.obs_step > 0.0) {
            return Err(Error::Config(format!("observation step must be > 0, got {}", self.obs_step)));
        }
        if self.fine_factor < 1 {
            return Err(Error::Config("fine_factor must be >= 1".into()));
        }
        if !self.x0.is_finite() {
            return Err(Error::Config("x0 must be finite".into()));
        }
        if self.alpha0 >= self.generator.n_states() {
            return Err(Error::Config(format!(
                "alpha0 = {} outside 1..={}",
                self.alpha0 + 1,
                self.generator.n_states()
            )));
        }
        self.n_obs()?;
        self.generator.check_step(self.fine_step())
    }
}

/// Supplier of additive noise increments over a step of length `step`.
pub trait NoiseSource {
    fn increment(&mut self, step: f64) -> f64;
}

/// I.i.d. `NIG(a, 0, δ·step, 0)` increments.
#[derive(Debug, Clone)]
pub struct NigNoise<R> {
    a: f64,
    delta: f64,
    rng: R,
}

impl<R: rand::Rng> NigNoise<R> {
    pub fn new(a: f64, delta: f64, rng: R) -> Self {
        Self { a, delta, rng }
    }
}

impl<R: rand::Rng> NoiseSource for NigNoise<R> {
    fn increment(&mut self, step: f64) -> f64 {
        let p = NigParams::new(self.a, self.delta, step).expect("validated noise parameters");
        rand::Rng::sample(&mut self.rng, p)
    }
}

/// Noise switched off; the recursion becomes a deterministic Euler ODE solver.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn increment(&mut self, _step: f64) -> f64 {
        0.0
    }
}

/// Output of [`simulate_path`].
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPath {
    pub obs: ObservationSeries,
    /// Hidden chain on the observation grid (ground truth, not for estimation).
    pub chain: ChainPath,
    pub fine_chain: ChainPath,
    /// The full fine-grid state path.
    pub fine_x: Vec<f64>,
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Simulates the model for `cfg`; deterministic in `cfg.seed`.
pub fn simulate_path(cfg: &SimulationConfig) -> Result<SimulatedPath> {
    let mut noise = NigNoise::new(cfg.a, cfg.theta_true.delta, rng_stream(cfg.seed, NOISE_STREAM));
    simulate_path_with(cfg, &mut noise)
}

/// As [`simulate_path`] with a caller-supplied noise source. The chain is
/// still driven by `cfg.seed`.
pub fn simulate_path_with(cfg: &SimulationConfig, noise: &mut dyn NoiseSource) -> Result<SimulatedPath> {
    cfg.validate()?;
    let n = cfg.n_obs()?;
    let m = cfg.fine_factor;
    let step = cfg.fine_step();
    let mut chain_rng = rng_stream(cfg.seed, CHAIN_STREAM);
    let fine_chain = simulate_chain(&cfg.generator, step, n * m, cfg.alpha0, &mut chain_rng)?;
    let dz: Vec<f64> = (0..n * m).map(|_| noise.increment(step)).collect();
    let fine_x = euler(&cfg.theta_true, cfg.x0, &fine_chain.states, 1, step, &dz);
    if let Some(l) = fine_x.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            stage: "simulation",
            index: l,
            detail: "state left the finite range".into(),
        });
    }
    let x: Vec<f64> = fine_x.iter().step_by(m).copied().collect();
    let obs = ObservationSeries::new(x, cfg.obs_step)?;
    let chain = fine_chain.thin(m);
    Ok(SimulatedPath {
        obs,
        chain,
        fine_chain,
        fine_x,
    })
}

/// Euler recursion on a grid of step `stride * fine_step`, reading the regime
/// at the left end of each step from `states` (given on the fine grid) and
/// aggregating `stride` consecutive fine increments `dz`.
fn euler(theta: &Theta, x0: f64, states: &[usize], stride: usize, fine_step: f64, dz: &[f64]) -> Vec<f64> {
    let steps = dz.len() / stride;
    let dt = fine_step * stride as f64;
    let mut x = Vec::with_capacity(steps + 1);
    let mut cur = x0;
    x.push(cur);
    for l in 0..steps {
        let b = theta.b[states[l * stride]];
        let inc: f64 = dz[l * stride..(l + 1) * stride].iter().sum();
        cur += theta.lambda * (b - cur) * dt + inc;
        x.push(cur);
    }
    x
}

/// Result of [`self_convergence_test`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    /// Steps `h / 2^k`, `k = 0..levels`.
    pub steps: Vec<f64>,
    /// Monte Carlo `E sup_t |X^{(k)}_t - X^{ref}_t|^2` per step.
    pub gaps: Vec<f64>,
    /// Per-replication successive ratios `gap_k / gap_{k+1}`, as medians.
    pub median_ratios: Vec<f64>,
}

impl ConvergenceReport {
    /// `gaps[k] / gaps[k + 1]`.
    pub fn ratios(&self) -> Vec<f64> {
        self.gaps.windows(2).map(|w| w[0] / w[1]).collect()
    }
}

/// Coupled-refinement strong convergence check.
///
/// For each replication one reference path is generated at step
/// `h / 2^levels` together with its chain. Coarse paths at steps `h / 2^k`,
/// `k < levels`, reuse the same chain (sampled at their grid points) and the
/// same noise (summed over the fine increments in each coarse step). The sup
/// is taken over the coarse grid. `replications` independent seeds
/// `cfg.seed + r` are averaged.
pub fn self_convergence_test(
    cfg: &SimulationConfig,
    levels: usize,
    replications: usize,
    zero_noise: bool,
) -> Result<ConvergenceReport> {
    if levels < 2 {
        return Err(Error::Config(format!("levels must be >= 2, got {levels}")));
    }
    if replications == 0 {
        return Err(Error::Config("replications must be >= 1".into()));
    }
    cfg.validate()?;
    let n = cfg.n_obs()?;
    let finest = 1usize << levels;
    let fine_step = cfg.obs_step / finest as f64;
    cfg.generator.check_step(fine_step)?;
    let mut sums = vec![0.0; levels];
    let mut per_rep_ratios: Vec<Vec<f64>> = vec![Vec::with_capacity(replications); levels - 1];
    for r in 0..replications {
        let seed = cfg.seed.wrapping_add(r as u64);
        let mut chain_rng = rng_stream(seed, CHAIN_STREAM);
        let chain = simulate_chain(&cfg.generator, fine_step, n * finest, cfg.alpha0, &mut chain_rng)?;
        let dz: Vec<f64> = if zero_noise {
            vec![0.0; n * finest]
        } else {
            let mut noise = NigNoise::new(cfg.a, cfg.theta_true.delta, rng_stream(seed, NOISE_STREAM));
            (0..n * finest).map(|_| noise.increment(fine_step)).collect()
        };
        let reference = euler(&cfg.theta_true, cfg.x0, &chain.states, 1, fine_step, &dz);
        let mut gaps = Vec::with_capacity(levels);
        for (k, sum) in sums.iter_mut().enumerate() {
            let stride = finest >> k;
            let coarse = euler(&cfg.theta_true, cfg.x0, &chain.states, stride, fine_step, &dz);
            let sup = coarse
                .iter()
                .enumerate()
                .map(|(l, &v)| (v - reference[l * stride]).powi(2))
                .fold(0.0, f64::max);
            *sum += sup;
            gaps.push(sup);
        }
        for k in 0..levels - 1 {
            if gaps[k + 1] > 0.0 {
                per_rep_ratios[k].push(gaps[k] / gaps[k + 1]);
            }
        }
    }
    Ok(ConvergenceReport {
        steps: (0..levels).map(|k| cfg.obs_step / (1usize << k) as f64).collect(),
        gaps: sums.iter().map(|s| s / replications as f64).collect(),
        median_ratios: per_rep_ratios.iter().map(|v| median(v)).collect(),
    })
}
