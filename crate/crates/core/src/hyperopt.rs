//! Sequential Bayesian optimization with a Gaussian-process surrogate and
//! expected-improvement acquisition.
//!
//! Points live in the unit cube internally; [`SearchSpace`] maps them to and
//! from hyperparameter values. The objective is minimized.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::align::TrainConfig;
use crate::error::{Error, Result};
use crate::rng::{rng_for, rng_indexed};

/// Number of quasi-random trials before the surrogate takes over.
pub const INITIAL_TRIALS: usize = 5;
/// Random candidates scored by the acquisition per suggestion.
pub const RANDOM_CANDIDATES: usize = 1024;
/// Gaussian perturbations of the incumbent added to the candidate pool.
pub const LOCAL_CANDIDATES: usize = 128;
pub const DEFAULT_BUDGET: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    Linear,
    Log10,
    Integer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub scale: Scale,
}

impl Dimension {
    pub fn new(name: impl Into<String>, lower: f64, upper: f64, scale: Scale) -> Self {
        Dimension { name: name.into(), lower, upper, scale }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lower.is_finite() && self.upper.is_finite() && self.lower < self.upper) {
            return Err(Error::InvalidArgument(format!(
                "dimension `{}` needs finite lower < upper, got [{}, {}]",
                self.name, self.lower, self.upper
            )));
        }
        if self.scale == Scale::Log10 && self.lower <= 0.0 {
            return Err(Error::InvalidArgument(format!("log-scale dimension `{}` needs a positive lower bound", self.name)));
        }
        Ok(())
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lower && v <= self.upper && (self.scale != Scale::Integer || v.fract() == 0.0)
    }

    pub fn to_unit(&self, v: f64) -> f64 {
        let u = match self.scale {
            Scale::Log10 => (v.log10() - self.lower.log10()) / (self.upper.log10() - self.lower.log10()),
            _ => (v - self.lower) / (self.upper - self.lower),
        };
        u.clamp(0.0, 1.0)
    }

    pub fn from_unit(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        match self.scale {
            Scale::Linear => self.lower + u * (self.upper - self.lower),
            Scale::Log10 => {
                let (a, b) = (self.lower.log10(), self.upper.log10());
                10f64.powf(a + u * (b - a)).clamp(self.lower, self.upper)
            }
            Scale::Integer => (self.lower + u * (self.upper - self.lower)).round().clamp(self.lower, self.upper),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dims: Vec<Dimension>,
}

impl Default for SearchSpace {
    /// The training hyperparameter ranges.
    fn default() -> Self {
        SearchSpace {
            dims: vec![
                Dimension::new("lr", 1e-7, 1e-3, Scale::Log10),
                Dimension::new("epochs", 100.0, 800.0, Scale::Integer),
                Dimension::new("h2_prime", 256.0, 2048.0, Scale::Integer),
                Dimension::new("h2", 256.0, 2048.0, Scale::Integer),
                Dimension::new("h", 256.0, 4096.0, Scale::Integer),
                Dimension::new("dropout", 0.0, 0.5, Scale::Linear),
            ],
        }
    }
}

impl SearchSpace {
    pub fn new(dims: Vec<Dimension>) -> Result<Self> {
        let s = SearchSpace { dims };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::InvalidArgument("search space has no dimensions".into()));
        }
        for d in &self.dims {
            d.validate()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn contains(&self, values: &[f64]) -> bool {
        values.len() == self.dims.len() && self.dims.iter().zip(values).all(|(d, &v)| d.contains(v))
    }

    pub fn encode(&self, values: &[f64]) -> Vec<f64> {
        self.dims.iter().zip(values).map(|(d, &v)| d.to_unit(v)).collect()
    }

    pub fn decode(&self, unit: &[f64]) -> Vec<f64> {
        self.dims.iter().zip(unit).map(|(d, &u)| d.from_unit(u)).collect()
    }

    /// Reads the searched fields out of a training config, in dimension order.
    /// Dimensions that do not name a config field are an error.
    pub fn point_of(&self, cfg: &TrainConfig) -> Result<Vec<f64>> {
        self.dims
            .iter()
            .map(|d| {
                Ok(match d.name.as_str() {
                    "lr" => cfg.lr,
                    "epochs" => f64::from(cfg.epochs),
                    "h2_prime" => cfg.h2_prime as f64,
                    "h2" => cfg.h2 as f64,
                    "h" => cfg.h as f64,
                    "dropout" => cfg.dropout,
                    other => return Err(Error::InvalidArgument(format!("`{other}` is not a training hyperparameter"))),
                })
            })
            .collect()
    }

    /// Overwrites the searched fields of `base` with `values`.
    pub fn apply(&self, base: &TrainConfig, values: &[f64]) -> Result<TrainConfig> {
        if values.len() != self.dims.len() {
            return Err(Error::Dimension(format!("{} values for {} dimensions", values.len(), self.dims.len())));
        }
        let mut cfg = base.clone();
        for (d, &v) in self.dims.iter().zip(values) {
            match d.name.as_str() {
                "lr" => cfg.lr = v,
                "epochs" => cfg.epochs = v.round() as u32,
                "h2_prime" => cfg.h2_prime = v.round() as usize,
                "h2" => cfg.h2 = v.round() as usize,
                "h" => cfg.h = v.round() as usize,
                "dropout" => cfg.dropout = v,
                other => return Err(Error::InvalidArgument(format!("`{other}` is not a training hyperparameter"))),
            }
        }
        Ok(cfg)
    }

    /// Fails with the first field of `cfg` outside the space.
    pub fn check_config(&self, cfg: &TrainConfig) -> Result<()> {
        let point = self.point_of(cfg)?;
        for (d, v) in self.dims.iter().zip(point) {
            if !d.contains(v) {
                return Err(Error::InvalidArgument(format!(
                    "{} = {} lies outside the search space [{}, {}]",
                    d.name, v, d.lower, d.upper
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrialStatus {
    Completed,
    Failed,
}

impl fmt::Display for TrialStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrialStatus::Completed => "completed",
            TrialStatus::Failed => "failed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub values: Vec<f64>,
    /// `None` exactly when the trial failed.
    pub objective: Option<f64>,
    pub status: TrialStatus,
}

impl Trial {
    pub fn completed(index: usize, values: Vec<f64>, objective: f64) -> Self {
        Trial { index, values, objective: Some(objective), status: TrialStatus::Completed }
    }

    pub fn failed(index: usize, values: Vec<f64>) -> Self {
        Trial { index, values, objective: None, status: TrialStatus::Failed }
    }
}

/// Kernel hyperparameters on the standardized objective scale.
#[derive(Debug, Clone, PartialEq)]
pub struct GpHyper {
    pub length_scales: Vec<f64>,
    pub noise: f64,
}

/// Squared-exponential kernel with unit signal variance.
pub fn se_kernel(a: &[f64], b: &[f64], length_scales: &[f64]) -> f64 {
    let r2: f64 = a.iter().zip(b).zip(length_scales).map(|((x, y), l)| ((x - y) / l).powi(2)).sum();
    (-0.5 * r2).exp()
}

const LENGTH_GRID: [f64; 8] = [0.05, 0.1, 0.2, 0.3, 0.5, 0.8, 1.2, 2.0];
const NOISE_GRID: [f64; 4] = [1e-8, 1e-4, 1e-2, 1e-1];
const JITTER: [f64; 6] = [0.0, 1e-12, 1e-10, 1e-8, 1e-6, 1e-4];

/// GP regression on unit-cube inputs. Targets are standardized before fitting
/// and the posterior is reported on the original scale.
#[derive(Debug, Clone)]
pub struct GpModel {
    x: Vec<Vec<f64>>,
    y_mean: f64,
    y_std: f64,
    hyper: GpHyper,
    /// Lower Cholesky factor of K + (noise + jitter)·I, row-major.
    chol: Vec<f64>,
    alpha: Vec<f64>,
    log_marginal: f64,
}

fn cholesky(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0 && d.is_finite()) {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
        for k in j + 1..n {
            a[j * n + k] = 0.0;
        }
    }
    true
}

fn forward_sub(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

fn backward_sub_t(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

impl GpModel {
    /// Fits with fixed kernel hyperparameters.
    pub fn fit_with(x: Vec<Vec<f64>>, y: &[f64], hyper: GpHyper) -> Result<Self> {
        let n = x.len();
        if n == 0 || y.len() != n {
            return Err(Error::InvalidArgument(format!("GP needs matching non-empty inputs, got {} points and {} targets", n, y.len())));
        }
        let dim = x[0].len();
        if x.iter().any(|p| p.len() != dim) || hyper.length_scales.len() != dim {
            return Err(Error::Dimension("GP inputs and length scales disagree in dimension".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("GP targets must be finite".into()));
        }
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64;
        let y_std = if var > 0.0 { var.sqrt() } else { 1.0 };
        let ys: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_std).collect();

        let mut base = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let k = se_kernel(&x[i], &x[j], &hyper.length_scales);
                base[i * n + j] = k;
                base[j * n + i] = k;
            }
        }
        for jitter in JITTER {
            let mut a = base.clone();
            for i in 0..n {
                a[i * n + i] += hyper.noise + jitter;
            }
            if cholesky(&mut a, n) {
                let z = forward_sub(&a, n, &ys);
                let alpha = backward_sub_t(&a, n, &z);
                let log_det: f64 = (0..n).map(|i| a[i * n + i].ln()).sum();
                let fit: f64 = ys.iter().zip(&alpha).map(|(a, b)| a * b).sum();
                let log_marginal = -0.5 * fit - log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
                return Ok(GpModel { x, y_mean, y_std, hyper, chol: a, alpha, log_marginal });
            }
        }
        Err(Error::Numerical("kernel matrix is singular after jitter escalation".into()))
    }

    /// Fits kernel hyperparameters by maximizing the marginal likelihood over
    /// a fixed grid: a shared length scale with each noise level, then one
    /// coordinate sweep over per-dimension length scales.
    pub fn fit(x: Vec<Vec<f64>>, y: &[f64]) -> Result<Self> {
        let dim = x.first().map(Vec::len).unwrap_or(0);
        let mut best: Option<GpModel> = None;
        let consider = |m: Result<GpModel>, best: &mut Option<GpModel>| {
            if let Ok(m) = m {
                if best.as_ref().is_none_or(|b| m.log_marginal > b.log_marginal) {
                    *best = Some(m);
                }
            }
        };
        for &noise in &NOISE_GRID {
            for &l in &LENGTH_GRID {
                let h = GpHyper { length_scales: vec![l; dim], noise };
                consider(GpModel::fit_with(x.clone(), y, h), &mut best);
            }
        }
        let Some(mut incumbent) = best else {
            return GpModel::fit_with(x, y, GpHyper { length_scales: vec![0.3; dim], noise: 1e-4 });
        };
        if dim > 1 {
            for d in 0..dim {
                let mut round = Some(incumbent.clone());
                for &l in &LENGTH_GRID {
                    let mut h = incumbent.hyper.clone();
                    h.length_scales[d] = l;
                    consider(GpModel::fit_with(x.clone(), y, h), &mut round);
                }
                incumbent = round.expect("seeded with the incumbent");
            }
        }
        Ok(incumbent)
    }

    pub fn hyper(&self) -> &GpHyper {
        &self.hyper
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_marginal
    }

    pub fn num_points(&self) -> usize {
        self.x.len()
    }

    /// Posterior mean and variance of the latent function at `x`.
    pub fn posterior(&self, x: &[f64]) -> (f64, f64) {
        let n = self.x.len();
        let k: Vec<f64> = self.x.iter().map(|p| se_kernel(p, x, &self.hyper.length_scales)).collect();
        let mean_s: f64 = k.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        let v = forward_sub(&self.chol, n, &k);
        let var_s = (1.0 - v.iter().map(|e| e * e).sum::<f64>()).max(0.0);
        (self.y_mean + self.y_std * mean_s, self.y_std * self.y_std * var_s)
    }
}

pub fn gp_posterior(model: &GpModel, x: &[f64]) -> (f64, f64) {
    model.posterior(x)
}

/// Closed-form expected improvement below `best` for a Gaussian posterior.
pub fn expected_improvement(mean: f64, variance: f64, best: f64) -> f64 {
    let gain = best - mean;
    let sd = variance.max(0.0).sqrt();
    if sd < 1e-300 {
        return gain.max(0.0);
    }
    let z = gain / sd;
    let normal = Normal::standard();
    (gain * normal.cdf(z) + sd * normal.pdf(z)).max(0.0)
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

fn nth_prime(n: usize) -> u64 {
    let mut found = 0;
    let mut c = 1u64;
    loop {
        c += 1;
        if (2..c).take_while(|d| d * d <= c).all(|d| !c.is_multiple_of(d)) {
            if found == n {
                return c;
            }
            found += 1;
        }
    }
}

/// Point `index` of a Halton sequence, rotated by a seed-dependent shift.
pub fn halton_point(index: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, "hyperopt/halton-shift");
    (0..dim)
        .map(|d| {
            let shift: f64 = rng.random();
            (radical_inverse(index as u64 + 1, nth_prime(d)) + shift).fract()
        })
        .collect()
}

fn completed(history: &[Trial]) -> impl Iterator<Item = (&Trial, f64)> {
    history.iter().filter_map(|t| match (t.status, t.objective) {
        (TrialStatus::Completed, Some(v)) if v.is_finite() => Some((t, v)),
        _ => None,
    })
}

/// Candidate pool in unit coordinates for the acquisition step: seeded
/// uniform draws plus Gaussian perturbations of the incumbent.
pub fn acquisition_candidates(space: &SearchSpace, history: &[Trial], seed: u64) -> Vec<Vec<f64>> {
    let dim = space.len();
    let mut rng = rng_indexed(seed, "hyperopt/candidates", history.len() as u64);
    let mut out: Vec<Vec<f64>> = (0..RANDOM_CANDIDATES).map(|_| (0..dim).map(|_| rng.random::<f64>()).collect()).collect();
    let incumbent = completed(history).min_by(|a, b| a.1.total_cmp(&b.1)).map(|(t, _)| space.encode(&t.values));
    if let Some(center) = incumbent {
        for i in 0..LOCAL_CANDIDATES {
            let step = if i % 2 == 0 { 0.05 } else { 0.01 };
            out.push(
                center
                    .iter()
                    .map(|&c| {
                        let z: f64 = rng.sample(StandardNormal);
                        (c + step * z).clamp(0.0, 1.0)
                    })
                    .collect(),
            );
        }
    }
    out
}

/// Fits the surrogate on completed trials, in unit coordinates of the
/// rounded values.
pub fn fit_surrogate(space: &SearchSpace, history: &[Trial]) -> Result<Option<(GpModel, f64)>> {
    let (x, y): (Vec<Vec<f64>>, Vec<f64>) = completed(history).map(|(t, v)| (space.encode(&t.values), v)).unzip();
    if x.is_empty() {
        return Ok(None);
    }
    let best = y.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(Some((GpModel::fit(x, &y)?, best)))
}

/// Next configuration to evaluate, in hyperparameter values.
pub fn suggest(space: &SearchSpace, history: &[Trial], seed: u64) -> Result<Vec<f64>> {
    space.validate()?;
    let n_done = completed(history).count();
    if history.len() < INITIAL_TRIALS || n_done == 0 {
        return Ok(space.decode(&halton_point(history.len(), space.len(), seed)));
    }
    let (gp, best) = fit_surrogate(space, history)?.expect("at least one completed trial");
    let mut chosen: Option<(f64, Vec<f64>)> = None;
    for c in acquisition_candidates(space, history, seed) {
        let (m, v) = gp.posterior(&c);
        let ei = expected_improvement(m, v, best);
        if chosen.as_ref().is_none_or(|(e, _)| ei > *e) {
            chosen = Some((ei, c));
        }
    }
    Ok(space.decode(&chosen.expect("candidate pool is non-empty").1))
}

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub best: Trial,
    pub history: Vec<Trial>,
}

fn run_trial<F>(objective: &mut F, index: usize, values: Vec<f64>) -> Trial
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    match objective(&values) {
        Ok(v) if v.is_finite() => Trial::completed(index, values, v),
        _ => Trial::failed(index, values),
    }
}

fn best_of(history: Vec<Trial>) -> Result<OptimizeResult> {
    let best = completed(&history)
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(t, _)| t.clone())
        .ok_or_else(|| Error::Numerical("every trial failed".into()))?;
    Ok(OptimizeResult { best, history })
}

/// Continues `history` until it holds `budget` trials. Errors and non-finite
/// objective values mark the trial failed; the loop goes on.
pub fn optimize_from<F>(space: &SearchSpace, mut objective: F, budget: usize, seed: u64, mut history: Vec<Trial>) -> Result<OptimizeResult>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if budget == 0 {
        return Err(Error::InvalidArgument("budget must be at least 1".into()));
    }
    while history.len() < budget {
        let values = suggest(space, &history, seed)?;
        let trial = run_trial(&mut objective, history.len(), values);
        history.push(trial);
    }
    best_of(history)
}

pub fn optimize<F>(space: &SearchSpace, objective: F, budget: usize, seed: u64) -> Result<OptimizeResult>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    optimize_from(space, objective, budget, seed, Vec::new())
}

/// Uniform random search with the same trial bookkeeping.
pub fn random_search<F>(space: &SearchSpace, mut objective: F, budget: usize, seed: u64) -> Result<OptimizeResult>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if budget == 0 {
        return Err(Error::InvalidArgument("budget must be at least 1".into()));
    }
    space.validate()?;
    let mut rng = rng_for(seed, "hyperopt/random-search");
    let mut history = Vec::with_capacity(budget);
    for i in 0..budget {
        let u: Vec<f64> = (0..space.len()).map(|_| rng.random::<f64>()).collect();
        history.push(run_trial(&mut objective, i, space.decode(&u)));
    }
    best_of(history)
}

/// Writes `trial,<dim names…>,objective,status`.
pub fn write_history_csv(path: impl AsRef<Path>, space: &SearchSpace, history: &[Trial]) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header = vec!["trial".to_string()];
    header.extend(space.dims.iter().map(|d| d.name.clone()));
    header.extend(["objective".to_string(), "status".to_string()]);
    w.write_record(&header).map_err(io)?;
    for t in history {
        let mut row = vec![t.index.to_string()];
        row.extend(t.values.iter().map(|v| v.to_string()));
        row.push(t.objective.map(|v| v.to_string()).unwrap_or_default());
        row.push(t.status.to_string());
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history_csv(path: impl AsRef<Path>, space: &SearchSpace) -> Result<Vec<Trial>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let headers = r.headers().map_err(|e| Error::format(path, e.to_string()))?.clone();
    let mut expected = vec!["trial".to_string()];
    expected.extend(space.dims.iter().map(|d| d.name.clone()));
    expected.extend(["objective".to_string(), "status".to_string()]);
    if headers.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::format(path, format!("history header does not match the search space; expected {}", expected.join(","))));
    }
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let num = |col: usize| -> Result<f64> {
            rec[col].trim().parse::<f64>().map_err(|e| Error::Parse {
                path: path.into(),
                row: row + 1,
                column: expected[col].clone(),
                message: e.to_string(),
            })
        };
        let index = num(0)? as usize;
        let values = (1..=space.len()).map(num).collect::<Result<Vec<_>>>()?;
        let k = space.len() + 1;
        let trial = match rec[k + 1].trim() {
            "completed" => Trial::completed(index, values, num(k)?),
            "failed" => Trial::failed(index, values),
            other => return Err(Error::format(path, format!("row {}: unknown status `{other}`", row + 1))),
        };
        out.push(trial);
    }
    Ok(out)
}
