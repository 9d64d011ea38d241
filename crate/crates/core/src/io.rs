//! CSV and JSON output, and reading observation files.
//!
//! CSV numbers are written with 9 significant digits (C `%.9g` style); JSON
//! uses shortest round-trip formatting.

use crate::ctmc::ChainPath;
use crate::em::{EmResult, EmTrace};
use crate::error::{Error, Result};
use crate::quasi_likelihood::Theta;
use crate::sim::ObservationSeries;
use crate::smoother::{FilterState, Smoothed};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// `%.9g` formatting.
pub fn fmt9(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{x:.8e}");
    let (mant, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent");
    if !(-4..9).contains(&exp) {
        let mant = trim_zeros(mant);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mant}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Writes `contents` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn csv_bytes(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// `path.csv`: `t,x[,alpha_true]` with 1-based regimes.
pub fn write_path_csv(path: &Path, obs: &ObservationSeries, chain: Option<&ChainPath>) -> Result<()> {
    let mut header = vec!["t".to_string(), "x".to_string()];
    if chain.is_some() {
        header.push("alpha_true".into());
    }
    let times = obs.times();
    let rows = (0..obs.x.len()).map(|j| {
        let mut r = vec![fmt9(times[j]), fmt9(obs.x[j])];
        if let Some(c) = chain {
            r.push((c.states[j] + 1).to_string());
        }
        r
    });
    write_atomic(path, &csv_bytes(&header, rows)?)
}

/// Fine-grid chain: `t,alpha` with 1-based regimes.
pub fn write_chain_csv(path: &Path, chain: &ChainPath) -> Result<()> {
    let rows = chain
        .states
        .iter()
        .enumerate()
        .map(|(l, s)| vec![fmt9(l as f64 * chain.step), (s + 1).to_string()]);
    write_atomic(path, &csv_bytes(&["t".into(), "alpha".into()], rows)?)
}

/// Reads a `path.csv`-style file. Only the `t` and `x` columns are used; the
/// step is taken from the time column, which must be equally spaced.
pub fn read_path_csv(path: &Path) -> Result<ObservationSeries> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (ti, xi) = match (col("t"), col("x")) {
        (Some(t), Some(x)) => (t, x),
        _ => {
            return Err(Error::Config(format!(
                "{}: header must contain columns t and x, found {:?}",
                path.display(),
                headers.iter().collect::<Vec<_>>()
            )))
        }
    };
    let mut t = Vec::new();
    let mut x = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |i: usize, name: &str| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    Error::Config(format!("{}: row {}: bad value in column {name}", path.display(), line + 2))
                })
        };
        t.push(parse(ti, "t")?);
        x.push(parse(xi, "x")?);
    }
    if t.len() < 2 {
        return Err(Error::Config(format!("{}: need at least 2 rows", path.display())));
    }
    let h = (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64;
    for (j, w) in t.windows(2).enumerate() {
        if ((w[1] - w[0]) - h).abs() > 1e-6 * h.abs().max(1e-12) {
            return Err(Error::Config(format!(
                "{}: time column is not equally spaced at row {}",
                path.display(),
                j + 3
            )));
        }
    }
    let mut obs = ObservationSeries::new(x, h).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    obs.t0 = t[0];
    Ok(obs)
}

fn theta_header(n_states: usize) -> Vec<String> {
    let mut h: Vec<String> = (1..=n_states).map(|i| format!("b{i}")).collect();
    h.push("lambda".into());
    h.push("delta".into());
    h
}

/// `trace.csv`: `iter,b1..bN,lambda,delta,H,stat,elapsed_ms`.
pub fn trace_csv_bytes(trace: &EmTrace, n_states: usize) -> Result<Vec<u8>> {
    let mut header = vec!["iter".to_string()];
    header.extend(theta_header(n_states));
    header.extend(["H", "stat", "elapsed_ms"].map(String::from));
    let rows = trace.records.iter().map(|r| {
        let mut row = vec![r.iter.to_string()];
        row.extend(r.theta.to_vec().iter().map(|v| fmt9(*v)));
        row.push(fmt9(r.h));
        row.push(fmt9(r.stat));
        row.push(fmt9(r.elapsed_ms));
        row
    });
    csv_bytes(&header, rows)
}

pub fn write_trace_csv(path: &Path, trace: &EmTrace, n_states: usize) -> Result<()> {
    write_atomic(path, &trace_csv_bytes(trace, n_states)?)
}

/// `probs.csv`: `j,state,filtered,smoothed` (1-based states).
pub fn write_probs_csv(path: &Path, fs: &FilterState, sm: &Smoothed) -> Result<()> {
    let ns = fs.n_states();
    let rows = (0..=fs.n()).flat_map(|j| {
        (0..ns).map(move |i| {
            vec![
                j.to_string(),
                (i + 1).to_string(),
                fmt9(fs.filtered(j)[i]),
                fmt9(sm.marginal(j)[i]),
            ]
        })
    });
    let header = ["j", "state", "filtered", "smoothed"].map(String::from);
    write_atomic(path, &csv_bytes(&header, rows)?)
}

/// Parameter vector as written to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaJson {
    pub b: Vec<f64>,
    pub lambda: f64,
    pub delta: f64,
}

impl From<&Theta> for ThetaJson {
    fn from(t: &Theta) -> Self {
        Self {
            b: t.b.clone(),
            lambda: t.lambda,
            delta: t.delta,
        }
    }
}

impl ThetaJson {
    fn from_vec(v: &[f64]) -> Self {
        let t = Theta::from_slice(v);
        (&t).into()
    }
}

/// Contents of `result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Regimes relabelled by decreasing drift level.
    pub estimate: ThetaJson,
    /// Estimate in the labelling used during fitting.
    pub estimate_raw: ThetaJson,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadratic_error: Option<ThetaJson>,
    pub status: String,
    pub iterations: usize,
    pub elapsed_ms: f64,
    pub generator: Vec<Vec<f64>>,
    pub ascent_violations: usize,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub config: serde_json::Value,
    pub seed: u64,
}

impl FitReport {
    pub fn new(result: &EmResult, truth: Option<&Theta>, config: serde_json::Value, seed: u64) -> Result<Self> {
        let (sorted, _) = crate::em::sort_by_level(&result.estimate);
        let quadratic_error = match truth {
            Some(t) => {
                let (ts, _) = crate::em::sort_by_level(t);
                Some(ThetaJson::from_vec(&crate::em::quadratic_error(&sorted, &ts)?))
            }
            None => None,
        };
        Ok(Self {
            estimate: (&sorted).into(),
            estimate_raw: (&result.estimate).into(),
            quadratic_error,
            status: result.status.as_str().into(),
            iterations: result.iterations,
            elapsed_ms: result.elapsed_ms,
            generator: result.generator.rows(),
            ascent_violations: result.trace.ascent_violations(),
            warnings: result.trace.warnings.clone(),
            failure: result.failure.clone(),
            config,
            seed,
        })
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_json()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
