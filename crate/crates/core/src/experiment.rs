//! The three CLI workflows: simulate, fit and replicated experiments.
//!
//! Replication `r` uses seed `seed_base + r` for the path and, unless the
//! config fixes one, for the random starting point.

use crate::config::ConfigFile;
use crate::em::{em_fit, sort_by_level, EmResult, FitStatus};
use crate::error::{Error, Result};
use crate::io::{fmt9, write_atomic, write_chain_csv, write_path_csv, write_probs_csv, write_trace_csv, FitReport};
use crate::numeric::{median, quantile};
use crate::quasi_likelihood::Theta;
use crate::sim::{simulate_path, ObservationSeries};
use crate::smoother::{smooth, uniform_probs};
use rayon::prelude::*;
use std::path::Path;

/// What `simulate` produced.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSummary {
    pub n: usize,
    pub horizon: f64,
    pub h: f64,
    pub seed: u64,
}

pub fn run_simulate(cfg: &ConfigFile, out: &Path) -> Result<SimulateSummary> {
    let seed = cfg.simulation.seed;
    let sim = cfg.simulation(seed)?;
    let path = simulate_path(&sim)?;
    std::fs::create_dir_all(out)?;
    let chain = cfg.experiment.emit_alpha.then_some(&path.chain);
    write_path_csv(&out.join("path.csv"), &path.obs, chain)?;
    if cfg.experiment.emit_chain {
        write_chain_csv(&out.join("chain_fine.csv"), &path.fine_chain)?;
    }
    Ok(SimulateSummary {
        n: path.obs.n(),
        horizon: sim.horizon,
        h: sim.obs_step,
        seed,
    })
}

fn run_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Fits `obs` and writes `result.json`, `trace.csv` and optionally
/// `probs.csv` into `out`.
fn fit_and_write(cfg: &ConfigFile, obs: &ObservationSeries, seed: u64, out: &Path) -> Result<(EmResult, FitReport)> {
    let g = cfg.generator()?;
    let em = cfg.em(seed)?;
    let truth = cfg.truth()?;
    let result = em_fit(obs, &g, &em)?;
    let report = FitReport::new(&result, truth.as_ref(), serde_json::to_value(cfg)?, seed)?;
    std::fs::create_dir_all(out)?;
    if cfg.experiment.emit_trace {
        write_trace_csv(&out.join("trace.csv"), &result.trace, g.n_states())?;
    }
    if cfg.experiment.emit_probs && result.status != FitStatus::NumericalFailure {
        let probs = em.initial_filter_probs.clone().unwrap_or_else(|| uniform_probs(g.n_states()));
        let (fs, sm) = smooth(&result.estimate, &result.generator, obs, &probs)?;
        write_probs_csv(&out.join("probs.csv"), &fs, &sm)?;
    }
    report.write(&out.join("result.json"))?;
    Ok((result, report))
}

/// `fit`: estimate from a data file. The observation step is read from the
/// file's time column.
pub fn run_fit(cfg: &ConfigFile, data: &Path, out: &Path, jobs: usize) -> Result<FitReport> {
    cfg.validate()?;
    let obs = crate::io::read_path_csv(data)?;
    let seed = cfg.simulation.seed;
    let (_, report) = run_pool(jobs, || fit_and_write(cfg, &obs, seed, out))??;
    Ok(report)
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub rep: usize,
    pub seed: u64,
    /// Sorted by decreasing drift level.
    pub estimate: Option<Theta>,
    pub quadratic_error: Option<Vec<f64>>,
    pub iterations: usize,
    /// `converged`, `max_iters_reached`, `numerical_failure` or `error`.
    pub status: String,
    pub message: Option<String>,
}

impl ReplicationRecord {
    pub fn succeeded(&self) -> bool {
        self.status == "converged" || self.status == "max_iters_reached"
    }
}

fn run_replication(cfg: &ConfigFile, rep: usize, out: &Path) -> ReplicationRecord {
    let seed = cfg.experiment.seed_base.wrapping_add(rep as u64);
    let attempt = || -> Result<(EmResult, FitReport)> {
        let sim = cfg.simulation(seed)?;
        let path = simulate_path(&sim)?;
        fit_and_write(cfg, &path.obs, seed, &out.join(format!("rep_{rep:04}")))
    };
    match attempt() {
        Ok((result, report)) => {
            let (sorted, _) = sort_by_level(&result.estimate);
            let ok = result.status != FitStatus::NumericalFailure;
            ReplicationRecord {
                rep,
                seed,
                estimate: ok.then_some(sorted),
                quadratic_error: if ok {
                    report
                        .quadratic_error
                        .map(|q| [q.b, vec![q.lambda, q.delta]].concat())
                } else {
                    None
                },
                iterations: result.iterations,
                status: result.status.as_str().into(),
                message: result.failure,
            }
        }
        Err(e) => ReplicationRecord {
            rep,
            seed,
            estimate: None,
            quadratic_error: None,
            iterations: 0,
            status: "error".into(),
            message: Some(e.to_string()),
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub records: Vec<ReplicationRecord>,
    /// Per-coordinate medians over successful replications, `(b, λ, δ)`.
    pub medians: Vec<f64>,
}

impl ExperimentSummary {
    pub fn successes(&self) -> usize {
        self.records.iter().filter(|r| r.succeeded()).count()
    }

    /// At least half the replications finished without failure.
    pub fn acceptable(&self) -> bool {
        2 * self.successes() >= self.records.len()
    }
}

/// `experiment`: simulate and fit every replication on a pool of `jobs`
/// workers, then write `summary.csv` and `aggregate.csv`.
pub fn run_experiment(cfg: &ConfigFile, out: &Path, jobs: usize) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let n_states = cfg.generator()?.n_states();
    std::fs::create_dir_all(out)?;
    let reps = cfg.experiment.replications;
    let records: Vec<ReplicationRecord> = run_pool(jobs, || {
        (0..reps)
            .into_par_iter()
            .map(|r| run_replication(cfg, r, out))
            .collect()
    })?;
    let ok: Vec<&ReplicationRecord> = records.iter().filter(|r| r.succeeded()).collect();
    let dim = n_states + 2;
    let column = |f: &dyn Fn(&ReplicationRecord) -> Option<f64>| -> Vec<f64> { ok.iter().filter_map(|r| f(r)).collect() };
    let est_cols: Vec<Vec<f64>> = (0..dim)
        .map(|c| column(&|r| r.estimate.as_ref().map(|t| t.to_vec()[c])))
        .collect();
    let qe_cols: Vec<Vec<f64>> = (0..dim)
        .map(|c| column(&|r| r.quadratic_error.as_ref().map(|q| q[c])))
        .collect();
    let iters: Vec<f64> = ok.iter().map(|r| r.iterations as f64).collect();

    let mut header = vec!["rep".to_string(), "seed".to_string()];
    let names: Vec<String> = (1..=n_states)
        .map(|i| format!("b{i}"))
        .chain(["lambda".to_string(), "delta".to_string()])
        .collect();
    header.extend(names.iter().cloned());
    header.extend(names.iter().map(|n| format!("qe_{n}")));
    header.extend(["iters".to_string(), "status".to_string()]);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for r in &records {
        let mut row = vec![r.rep.to_string(), r.seed.to_string()];
        match &r.estimate {
            Some(t) => row.extend(t.to_vec().iter().map(|v| fmt9(*v))),
            None => row.extend(std::iter::repeat_n(String::new(), dim)),
        }
        match &r.quadratic_error {
            Some(q) => row.extend(q.iter().map(|v| fmt9(*v))),
            None => row.extend(std::iter::repeat_n(String::new(), dim)),
        }
        row.push(r.iterations.to_string());
        row.push(r.status.clone());
        w.write_record(&row)?;
    }
    let med = |c: &Vec<f64>| if c.is_empty() { String::new() } else { fmt9(median(c)) };
    let mut agg = vec!["median".to_string(), String::new()];
    agg.extend(est_cols.iter().map(med));
    agg.extend(qe_cols.iter().map(med));
    agg.push(med(&iters));
    agg.push(format!("ok {}/{}", ok.len(), records.len()));
    w.write_record(&agg)?;
    write_atomic(&out.join("summary.csv"), &w.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;

    let mut a = csv::Writer::from_writer(Vec::new());
    let mut aheader = vec!["stat".to_string()];
    aheader.extend(names.iter().cloned());
    aheader.extend(names.iter().map(|n| format!("qe_{n}")));
    a.write_record(&aheader)?;
    type Stat = fn(&[f64]) -> f64;
    let stats: [(&str, Stat); 4] = [
        ("median", median),
        ("q25", |v| quantile(v, 0.25)),
        ("q75", |v| quantile(v, 0.75)),
        ("iqr", |v| quantile(v, 0.75) - quantile(v, 0.25)),
    ];
    for (name, f) in stats {
        let mut row = vec![name.to_string()];
        row.extend(est_cols.iter().chain(&qe_cols).map(|c| if c.is_empty() { String::new() } else { fmt9(f(c)) }));
        a.write_record(&row)?;
    }
    write_atomic(&out.join("aggregate.csv"), &a.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;

    Ok(ExperimentSummary {
        medians: est_cols.iter().map(|c| median(c)).collect(),
        records,
    })
}
