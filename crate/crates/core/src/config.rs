//! JSON configuration with sections `simulation`, `em` and `experiment`.
//!
//! States are 1-based in the file (`alpha0`) and 0-based in the library.

use crate::ctmc::{validate_generator, GeneratorMatrix};
use crate::em::{EmConfig, InitPolicy, Interval, MStep, Termination, ThetaBoxes};
use crate::error::{Error, Result};
use crate::quasi_likelihood::Theta;
use crate::sim::SimulationConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Environment variable overriding `experiment.seed_base` and `simulation.seed`.
pub const SEED_ENV: &str = "SWITCHEM_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub simulation: SimulationSection,
    #[serde(default)]
    pub em: EmSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

/// Model and simulation settings. The true parameters are optional so the
/// same file can drive `fit` on external data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default = "default_a")]
    pub a: f64,
    pub generator: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default = "default_obs_step")]
    pub obs_step: f64,
    #[serde(default = "default_fine_factor")]
    pub fine_factor: usize,
    #[serde(default)]
    pub x0: f64,
    /// 1-based; defaults to the regime with the largest drift level.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha0: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_a() -> f64 {
    0.3
}

fn default_obs_step() -> f64 {
    0.1
}

fn default_fine_factor() -> usize {
    10
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSection {
    pub b: [f64; 2],
    pub lambda: [f64; 2],
    pub delta: [f64; 2],
}

impl Default for BoxSection {
    fn default() -> Self {
        let d = ThetaBoxes::default();
        Self {
            b: [d.b.lo, d.b.hi],
            lambda: [d.lambda.lo, d.lambda.hi],
            delta: [d.delta.lo, d.delta.hi],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSection {
    /// Uniform in the boxes. Without `seed` the replication seed is used.
    Random {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Explicit { b: Vec<f64>, lambda: f64, delta: f64 },
}

impl Default for InitSection {
    fn default() -> Self {
        InitSection::Random { seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmSection {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default)]
    pub termination: Termination,
    #[serde(default)]
    pub m_step: MStep,
    #[serde(default)]
    pub update_q: bool,
    #[serde(default)]
    pub boxes: BoxSection,
    #[serde(default)]
    pub init: InitSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_filter_probs: Option<Vec<f64>>,
    #[serde(default = "default_cond_cap")]
    pub newton_cond_cap: f64,
    #[serde(default)]
    pub parallel: bool,
    #[serde(default = "default_true")]
    pub record_wall_time: bool,
}

fn default_epsilon() -> f64 {
    0.05
}

fn default_rho() -> f64 {
    1e-4
}

fn default_max_iters() -> usize {
    300
}

fn default_cond_cap() -> f64 {
    1e12
}

fn default_true() -> bool {
    true
}

impl Default for EmSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub seed_base: u64,
    #[serde(default)]
    pub emit_probs: bool,
    #[serde(default = "default_true")]
    pub emit_trace: bool,
    /// Also write the fine-grid chain from `simulate`.
    #[serde(default)]
    pub emit_chain: bool,
    /// Include the hidden regime column in `path.csv`.
    #[serde(default = "default_true")]
    pub emit_alpha: bool,
}

fn default_replications() -> usize {
    1
}

impl Default for ExperimentSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl ConfigFile {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("line {}, column {}: {e}", e.line(), e.column())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies the `SWITCHEM_SEED` override if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed: u64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
            self.simulation.seed = seed;
            self.experiment.seed_base = seed;
        }
        Ok(())
    }

    pub fn generator(&self) -> Result<GeneratorMatrix> {
        validate_generator(&self.simulation.generator)
            .map_err(|e| Error::Config(format!("simulation.generator: {e}")))
    }

    /// True parameters if `b`, `lambda` and `delta` are all given.
    pub fn truth(&self) -> Result<Option<Theta>> {
        let s = &self.simulation;
        match (&s.b, s.lambda, s.delta) {
            (Some(b), Some(l), Some(d)) => Ok(Some(
                Theta::new(b.clone(), l, d).map_err(|e| Error::Config(format!("simulation: {e}")))?,
            )),
            (None, None, None) => Ok(None),
            _ => Err(Error::Config("simulation: give all of b, lambda, delta or none".into())),
        }
    }

    /// Simulation settings for the given seed.
    pub fn simulation(&self, seed: u64) -> Result<SimulationConfig> {
        let truth = self
            .truth()?
            .ok_or_else(|| Error::Config("simulation: b, lambda and delta are required to simulate".into()))?;
        let horizon = self
            .simulation
            .horizon
            .ok_or_else(|| Error::Config("simulation.horizon is required to simulate".into()))?;
        let generator = self.generator()?;
        let alpha0 = match self.simulation.alpha0 {
            Some(0) => return Err(Error::Config("simulation.alpha0 is 1-based".into())),
            Some(a) => a - 1,
            None => (0..truth.n_states())
                .fold(0, |best, i| if truth.b[i] > truth.b[best] { i } else { best }),
        };
        let cfg = SimulationConfig {
            theta_true: truth,
            a: self.simulation.a,
            generator,
            horizon,
            obs_step: self.simulation.obs_step,
            fine_factor: self.simulation.fine_factor,
            x0: self.simulation.x0,
            alpha0,
            seed,
        };
        cfg.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("simulation: {m}")),
            other => other,
        })?;
        Ok(cfg)
    }

    /// EM settings; a random start without its own seed uses `seed`.
    pub fn em(&self, seed: u64) -> Result<EmConfig> {
        let e = &self.em;
        let iv = |v: [f64; 2]| Interval::new(v[0], v[1]);
        let init = match &e.init {
            InitSection::Random { seed: s } => InitPolicy::Random { seed: s.unwrap_or(seed) },
            InitSection::Explicit { b, lambda, delta } => InitPolicy::Explicit(Theta {
                b: b.clone(),
                lambda: *lambda,
                delta: *delta,
            }),
        };
        let cfg = EmConfig {
            epsilon: e.epsilon,
            rho: e.rho,
            max_iters: e.max_iters,
            termination: e.termination,
            m_step: e.m_step,
            update_q: e.update_q,
            boxes: ThetaBoxes {
                b: iv(e.boxes.b),
                lambda: iv(e.boxes.lambda),
                delta: iv(e.boxes.delta),
            },
            init,
            initial_filter_probs: e.initial_filter_probs.clone(),
            newton_cond_cap: e.newton_cond_cap,
            parallel: e.parallel,
            record_wall_time: e.record_wall_time,
        };
        cfg.validate().map_err(|e| Error::Config(format!("em: {e}")))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator()?;
        self.truth()?;
        self.em(0)?;
        if self.experiment.replications < 1 {
            return Err(Error::Config("experiment.replications must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_REGIME: &str = r#"{
        "simulation": {
            "b": [6, 3], "lambda": 2, "delta": 1, "a": 0.3,
            "generator": [[-0.009, 0.009], [0.005, -0.005]],
            "horizon": 500, "obs_step": 0.1, "seed": 7
        },
        "em": { "epsilon": 0.02 },
        "experiment": { "replications": 3, "seed_base": 100 }
    }"#;

    #[test]
    fn parses_two_regime_config() {
        let c = ConfigFile::from_json(TWO_REGIME).unwrap();
        c.validate().unwrap();
        let sim = c.simulation(7).unwrap();
        assert_eq!(sim.alpha0, 0);
        assert_eq!(sim.n_obs().unwrap(), 5000);
        let em = c.em(5).unwrap();
        assert_eq!(em.epsilon, 0.02);
        assert_eq!(em.max_iters, 300);
        assert_eq!(em.init, InitPolicy::Random { seed: 5 });
    }

    #[test]
    fn malformed_generator_names_row() {
        let bad = TWO_REGIME.replace("[0.005, -0.005]", "[0.005, -0.004]");
        let c = ConfigFile::from_json(&bad).unwrap();
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("row 2"), "{msg}");
    }

    #[test]
    fn unknown_field_reports_position() {
        let bad = TWO_REGIME.replace("\"a\": 0.3", "\"aa\": 0.3");
        let msg = ConfigFile::from_json(&bad).unwrap_err().to_string();
        assert!(msg.contains("line 3") && msg.contains("aa"), "{msg}");
    }

    #[test]
    fn truth_is_all_or_nothing() {
        let c = ConfigFile::from_json(&TWO_REGIME.replace("\"lambda\": 2, ", "")).unwrap();
        assert!(c.truth().is_err());
    }

    #[test]
    fn round_trips_through_serde() {
        let c = ConfigFile::from_json(TWO_REGIME).unwrap();
        let again = ConfigFile::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(c, again);
    }
}
