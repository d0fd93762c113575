//! Experiment harness: run configuration, synthetic data, dataset and CSV
//! I/O, trial execution, sweeps, audits and summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{
    derive_seed, dpsgd_truncated, estimate_with_plan, sgd_noise_sigma, CurvatureRule, EstimatorReport, ExpFamilyPlan,
    PipelineOptions, SGDConfig, SensitivityRule,
};
use crate::expfam::{distance, gaussian_mean_family, gaussian_precision_family, FamilySpec};
use crate::gaussian::{self, matrix, CovariancePlan};
use crate::privacy::{gaussian_sigma, BudgetLedger, Composition, NoiseMode, PrivacyBudget};
use crate::truncation::{preprocess, rejection_sample_truncated, Dataset, SurvivalSet};
use crate::warmstart;

/// Environment variable capping the number of parallel trials.
pub const THREADS_ENV: &str = "TRUNCDP_THREADS";

/// Which pipeline a configuration drives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Mean,
    Cov,
    Expfam,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Mean => "mean",
            Task::Cov => "cov",
            Task::Expfam => "expfam",
        }
    }
}

/// Family driven by the `expfam` task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FamilySelector {
    GaussianMean,
    GaussianPrecision,
}

impl FamilySelector {
    fn as_str(&self) -> &'static str {
        match self {
            FamilySelector::GaussianMean => "gaussian_mean",
            FamilySelector::GaussianPrecision => "gaussian_precision",
        }
    }
}

/// Flat `key=value` experiment definition.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub d: usize,
    /// Statistic dimension; checked against the family when given.
    pub m: Option<usize>,
    pub epsilon: f64,
    pub delta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub seed: u64,
    pub trials: usize,
    /// Truncated samples per SGD chunk; the planner decides when absent.
    pub n: Option<usize>,
    /// Values of `n` for `sweep`.
    pub sweep: Vec<usize>,
    pub family: FamilySelector,
    /// Lower eigenvalue bound of the covariance (`cov` and precision family).
    pub lambda: f64,
    /// Upper eigenvalue bound of the covariance (`cov`).
    pub upper: f64,
    /// Ground truth: mean vector, covariance diagonal, or natural parameter.
    pub truth: Vec<f64>,
    pub curvature: CurvatureRule,
    pub sensitivity: SensitivityRule,
    pub chunks: Option<usize>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub test_mode: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Mean,
            d: 2,
            m: None,
            epsilon: 0.5,
            delta: 1e-6,
            alpha: 0.25,
            beta: 0.1,
            rho: 0.5,
            seed: 0,
            trials: 1,
            n: None,
            sweep: Vec::new(),
            family: FamilySelector::GaussianMean,
            lambda: 0.01,
            upper: 1.0,
            truth: Vec::new(),
            curvature: CurvatureRule::default(),
            sensitivity: SensitivityRule::default(),
            chunks: None,
            data: None,
            out: None,
            test_mode: false,
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| config_err(format!("{key}: cannot parse '{value}'")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_num(key, v.trim())).collect()
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parses `key=value` lines; `#` starts a comment. Unknown keys, repeated
    /// keys and out-of-range values are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(config_err(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "task" => {
                self.task = match value {
                    "mean" => Task::Mean,
                    "cov" => Task::Cov,
                    "expfam" => Task::Expfam,
                    _ => return Err(config_err(format!("task: unknown '{value}'"))),
                }
            }
            "d" => self.d = parse_num(key, value)?,
            "m" => self.m = Some(parse_num(key, value)?),
            "epsilon" => self.epsilon = parse_num(key, value)?,
            "delta" => self.delta = parse_num(key, value)?,
            "alpha" => self.alpha = parse_num(key, value)?,
            "beta" => self.beta = parse_num(key, value)?,
            "rho" => self.rho = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "trials" => self.trials = parse_num(key, value)?,
            "n" => self.n = Some(parse_num(key, value)?),
            "sweep" => self.sweep = parse_list(key, value)?,
            "family" => {
                self.family = match value {
                    "gaussian_mean" => FamilySelector::GaussianMean,
                    "gaussian_precision" => FamilySelector::GaussianPrecision,
                    _ => return Err(config_err(format!("family: unknown '{value}'"))),
                }
            }
            "lambda" => self.lambda = parse_num(key, value)?,
            "upper" => self.upper = parse_num(key, value)?,
            "truth" => self.truth = parse_list(key, value)?,
            "curvature" => {
                self.curvature = match value {
                    "analytic" => CurvatureRule::Analytic,
                    v if v.starts_with("calibrated") => {
                        let n_mc = match v.strip_prefix("calibrated:") {
                            Some(k) => parse_num(key, k)?,
                            None if v == "calibrated" => 4000,
                            None => return Err(config_err(format!("curvature: unknown '{value}'"))),
                        };
                        CurvatureRule::Calibrated { n_mc }
                    }
                    v => CurvatureRule::Fixed(parse_num(key, v)?),
                }
            }
            "sensitivity" => {
                self.sensitivity = match value {
                    "averaged" => SensitivityRule::AveragedGradient,
                    "per_sample" => SensitivityRule::PerSample,
                    _ => return Err(config_err(format!("sensitivity: unknown '{value}'"))),
                }
            }
            "chunks" => self.chunks = Some(parse_num(key, value)?),
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "test_mode" => self.test_mode = parse_num(key, value)?,
            _ => return Err(config_err(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Renders the configuration so that [`RunConfig::parse`] restores it.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "task={}", self.task.as_str());
        let _ = writeln!(s, "d={}", self.d);
        if let Some(m) = self.m {
            let _ = writeln!(s, "m={m}");
        }
        for (k, v) in [("epsilon", self.epsilon), ("delta", self.delta), ("alpha", self.alpha), ("beta", self.beta), ("rho", self.rho)] {
            let _ = writeln!(s, "{k}={v:?}");
        }
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "trials={}", self.trials);
        if let Some(n) = self.n {
            let _ = writeln!(s, "n={n}");
        }
        let _ = writeln!(s, "sweep={}", join(&self.sweep));
        let _ = writeln!(s, "family={}", self.family.as_str());
        let _ = writeln!(s, "lambda={:?}", self.lambda);
        let _ = writeln!(s, "upper={:?}", self.upper);
        let truth: Vec<String> = self.truth.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(s, "truth={}", truth.join(","));
        let curvature = match self.curvature {
            CurvatureRule::Calibrated { n_mc } => format!("calibrated:{n_mc}"),
            CurvatureRule::Analytic => "analytic".into(),
            CurvatureRule::Fixed(c) => format!("{c:?}"),
        };
        let _ = writeln!(s, "curvature={curvature}");
        let sensitivity = match self.sensitivity {
            SensitivityRule::AveragedGradient => "averaged",
            SensitivityRule::PerSample => "per_sample",
        };
        let _ = writeln!(s, "sensitivity={sensitivity}");
        if let Some(c) = self.chunks {
            let _ = writeln!(s, "chunks={c}");
        }
        if let Some(p) = &self.data {
            let _ = writeln!(s, "data={}", p.display());
        }
        if let Some(p) = &self.out {
            let _ = writeln!(s, "out={}", p.display());
        }
        let _ = writeln!(s, "test_mode={}", self.test_mode);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let open = |v: f64, name: &str| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(config_err(format!("{name} must lie in (0, 1), got {v}")))
            }
        };
        open(self.epsilon, "epsilon")?;
        open(self.delta, "delta")?;
        open(self.alpha, "alpha")?;
        open(self.beta, "beta")?;
        open(self.rho, "rho")?;
        if self.d == 0 {
            return Err(config_err("d must be at least 1"));
        }
        if self.trials == 0 {
            return Err(config_err("trials must be at least 1"));
        }
        if self.n == Some(0) || self.sweep.contains(&0) || self.chunks == Some(0) {
            return Err(config_err("n, sweep values and chunks must be positive"));
        }
        if self.task == Task::Cov || self.family == FamilySelector::GaussianPrecision {
            if !(self.lambda > 0.0 && self.lambda <= self.upper && self.upper.is_finite()) {
                return Err(config_err(format!("need 0 < lambda <= upper, got {} and {}", self.lambda, self.upper)));
            }
        }
        let expected_truth = match (self.task, self.family) {
            (Task::Mean, _) | (Task::Cov, _) | (Task::Expfam, FamilySelector::GaussianMean) => self.d,
            (Task::Expfam, FamilySelector::GaussianPrecision) => matrix::packed_len(self.d),
        };
        if !self.truth.is_empty() && self.truth.len() != expected_truth {
            return Err(config_err(format!("truth needs {expected_truth} values, got {}", self.truth.len())));
        }
        if let Some(m) = self.m {
            let family_m = match (self.task, self.family) {
                (Task::Expfam, FamilySelector::GaussianPrecision) | (Task::Cov, _) => matrix::packed_len(self.d),
                _ => self.d,
            };
            if m != family_m {
                return Err(config_err(format!("m = {m} does not match the family's statistic dimension {family_m}")));
            }
        }
        if self.task == Task::Cov && self.truth.iter().any(|&v| v < self.lambda || v > self.upper) {
            return Err(config_err("covariance diagonal must lie in [lambda, upper]"));
        }
        Ok(())
    }

    pub fn budget(&self) -> Result<PrivacyBudget> {
        PrivacyBudget::new(self.epsilon, self.delta)
    }

    pub fn noise(&self) -> Result<NoiseMode> {
        if self.test_mode {
            NoiseMode::test_mode().map_err(|e| config_err(e.to_string()))
        } else {
            Ok(NoiseMode::calibrated())
        }
    }

    pub fn options(&self, n: Option<usize>) -> Result<PipelineOptions> {
        Ok(PipelineOptions {
            rho: self.rho,
            curvature: self.curvature,
            sensitivity: self.sensitivity,
            noise: self.noise()?,
            chunks: self.chunks,
            sgd_samples: n,
            ..PipelineOptions::default()
        })
    }

    /// Family of the `expfam` task (or the mean family for `mean`).
    pub fn family(&self) -> Result<FamilySpec> {
        match (self.task, self.family) {
            (Task::Expfam, FamilySelector::GaussianPrecision) => gaussian_precision_family(self.d, self.lambda),
            _ => gaussian_mean_family(self.d),
        }
    }
}

/// Known parameters of the synthetic data.
#[derive(Clone, Debug, PartialEq)]
pub enum Truth {
    Mean(Vec<f64>),
    Covariance(DMatrix<f64>),
    Theta(Vec<f64>),
}

impl Truth {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let d = cfg.d;
        Ok(match cfg.task {
            Task::Mean => Truth::Mean(if cfg.truth.is_empty() { vec![0.0; d] } else { cfg.truth.clone() }),
            Task::Cov => {
                let diag = if cfg.truth.is_empty() {
                    (0..d)
                        .map(|i| if d == 1 { cfg.upper } else { cfg.lambda + (cfg.upper - cfg.lambda) * i as f64 / (d - 1) as f64 })
                        .collect()
                } else {
                    cfg.truth.clone()
                };
                Truth::Covariance(DMatrix::from_diagonal(&DVector::from_vec(diag)))
            }
            Task::Expfam => {
                let family = cfg.family()?;
                let theta = if cfg.truth.is_empty() {
                    match cfg.family {
                        FamilySelector::GaussianMean => vec![0.0; d],
                        FamilySelector::GaussianPrecision => matrix::pack(&(DMatrix::identity(d, d) * 16.0)),
                    }
                } else {
                    cfg.truth.clone()
                };
                if !family.theta_space.contains(&theta, 1e-9) {
                    return Err(config_err("truth lies outside the parameter space"));
                }
                Truth::Theta(theta)
            }
        })
    }

    /// Error metric of an estimate: Euclidean for vectors, relative Frobenius
    /// for covariances.
    pub fn error(&self, estimate: &[f64]) -> Result<f64> {
        match self {
            Truth::Mean(t) | Truth::Theta(t) => Ok(distance(t, estimate)),
            Truth::Covariance(sigma) => {
                let d = sigma.nrows();
                gaussian::relative_frobenius_error(sigma, &DMatrix::from_row_slice(d, d, estimate))
            }
        }
    }
}

/// Draws `rows` i.i.d. samples from the distribution named by `truth`.
pub fn generate(cfg: &RunConfig, truth: &Truth, rows: usize, seed: u64) -> Result<Dataset> {
    let d = cfg.d;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = Dataset::with_capacity(d, rows);
    match truth {
        Truth::Mean(mu) => {
            let mut x = vec![0.0; d];
            for _ in 0..rows {
                for (xi, m) in x.iter_mut().zip(mu) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *xi = m + z;
                }
                out.push(&x)?;
            }
        }
        Truth::Covariance(sigma) => {
            let root = matrix::sqrt_pd(sigma)?;
            for _ in 0..rows {
                let z = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(&mut rng)));
                out.push((&root * z).as_slice())?;
            }
        }
        Truth::Theta(theta) => {
            let family = cfg.family()?;
            let mut x = vec![0.0; d];
            for _ in 0..rows {
                family.sample_into(theta, &mut rng, &mut x)?;
                out.push(&x)?;
            }
        }
    }
    Ok(out)
}

/// Writes `# d=<d> n=<n> seed=<s>` followed by one whitespace-separated row
/// per sample.
pub fn write_dataset(path: &Path, data: &Dataset, seed: u64) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_dataset_to(&mut w, data, seed)?;
    w.flush()?;
    Ok(())
}

pub fn write_dataset_to(w: &mut impl Write, data: &Dataset, seed: u64) -> Result<()> {
    writeln!(w, "# d={} n={} seed={}", data.d(), data.len(), seed)?;
    for row in data.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Reads a dataset written by [`write_dataset`]; returns it with its seed.
pub fn read_dataset(path: &Path) -> Result<(Dataset, u64)> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| config_err("dataset file is empty"))??;
    let fields: BTreeMap<&str, &str> = header
        .trim_start_matches('#')
        .split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .collect();
    let get = |k: &str| -> Result<u64> {
        fields.get(k).ok_or_else(|| config_err(format!("dataset header lacks '{k}'")))?.parse().map_err(|_| config_err(format!("bad header field '{k}'")))
    };
    let (d, n, seed) = (get("d")? as usize, get("n")? as usize, get("seed")?);
    let mut data = Dataset::with_capacity(d, n);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| config_err(format!("bad value '{v}'"))))
            .collect::<Result<_>>()?;
        data.push(&row)?;
    }
    if data.len() != n {
        return Err(config_err(format!("header promises {n} rows, file has {}", data.len())));
    }
    Ok((data, seed))
}

/// One line of the results CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub task: String,
    pub d: usize,
    /// Truncated samples per SGD chunk.
    pub n: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub alpha: f64,
    pub trial: usize,
    pub error: f64,
    pub success: bool,
    pub wall_ms: f64,
    pub seed: u64,
}

/// Plan for one trial of `cfg` with SGD sample override `n`.
pub enum TrialPlan {
    ExpFamily(ExpFamilyPlan),
    Covariance(CovariancePlan),
}

impl TrialPlan {
    pub fn new(cfg: &RunConfig, n: Option<usize>) -> Result<Self> {
        let opts = cfg.options(n)?;
        let budget = cfg.budget()?;
        Ok(match cfg.task {
            Task::Cov => TrialPlan::Covariance(CovariancePlan::new(cfg.d, budget, cfg.alpha, cfg.beta, cfg.lambda, cfg.upper, &opts)?),
            _ => TrialPlan::ExpFamily(ExpFamilyPlan::new(&cfg.family()?, budget, cfg.alpha, cfg.beta, &opts)?),
        })
    }

    pub fn total_raw(&self) -> usize {
        match self {
            TrialPlan::ExpFamily(p) => p.total_raw(),
            TrialPlan::Covariance(p) => p.total_raw(),
        }
    }
}

/// Runs one trial: uses `data` when given, otherwise synthesises exactly the
/// raw sample count the plan needs from the trial seed.
pub fn run_trial(cfg: &RunConfig, n: Option<usize>, trial: usize, data: Option<&Dataset>) -> Result<(EstimatorReport, TrialResult)> {
    let seed = derive_seed(cfg.seed, trial as u64);
    let plan = TrialPlan::new(cfg, n)?;
    let truth = Truth::from_config(cfg)?;
    let generated;
    let raw = match data {
        Some(d) => d,
        None => {
            generated = generate(cfg, &truth, plan.total_raw(), derive_seed(seed, 0xDA7A))?;
            &generated
        }
    };
    let opts = cfg.options(n)?;
    let report = match &plan {
        TrialPlan::ExpFamily(p) => estimate_with_plan(&cfg.family()?, raw, p, &opts, seed)?,
        TrialPlan::Covariance(p) => gaussian::estimate_covariance_with_plan(raw, p, &opts, seed)?,
    };
    let error = truth.error(&report.estimate)?;
    let result = TrialResult {
        task: cfg.task.as_str().into(),
        d: cfg.d,
        n: report.n_truncated,
        epsilon: cfg.epsilon,
        delta: cfg.delta,
        alpha: cfg.alpha,
        trial,
        error,
        success: error <= cfg.alpha,
        wall_ms: report.wall_ms,
        seed,
    };
    Ok((report, result))
}

/// Thread count from [`THREADS_ENV`], defaulting to the available cores.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&k: &usize| k > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|k| k.get()).unwrap_or(1))
}

/// Runs `cfg.trials` trials for every value in the sweep grid (or the planned
/// `n` when the grid is empty), in parallel over trials. Results come back in
/// grid-then-trial order.
pub fn sweep(cfg: &RunConfig, threads: usize) -> Result<Vec<TrialResult>> {
    let grid: Vec<Option<usize>> = if cfg.sweep.is_empty() { vec![cfg.n] } else { cfg.sweep.iter().map(|&n| Some(n)).collect() };
    let jobs: Vec<(Option<usize>, usize)> = grid.iter().flat_map(|&n| (0..cfg.trials).map(move |t| (n, t))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| config_err(format!("thread pool: {e}")))?;
    pool.install(|| jobs.par_iter().map(|&(n, t)| run_trial(cfg, n, t, None).map(|(_, r)| r)).collect())
}

/// Per-`n` aggregate of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub task: String,
    pub d: usize,
    pub n: usize,
    pub trials: usize,
    pub success_rate: f64,
    pub median_error: f64,
    pub mean_wall_ms: f64,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let k = values.len();
    if k == 0 {
        f64::NAN
    } else if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}

/// Groups results by `(task, d, n)`.
pub fn summarize(results: &[TrialResult]) -> Vec<SweepSummary> {
    let mut groups: BTreeMap<(String, usize, usize), Vec<&TrialResult>> = BTreeMap::new();
    for r in results {
        groups.entry((r.task.clone(), r.d, r.n)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((task, d, n), rs)| {
            let mut errors: Vec<f64> = rs.iter().map(|r| r.error).collect();
            SweepSummary {
                task,
                d,
                n,
                trials: rs.len(),
                success_rate: rs.iter().filter(|r| r.success).count() as f64 / rs.len() as f64,
                median_error: median(&mut errors),
                mean_wall_ms: rs.iter().map(|r| r.wall_ms).sum::<f64>() / rs.len() as f64,
            }
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let k = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Number of adjacent increases in a sequence.
pub fn count_inversions(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] > w[0]).count()
}

pub fn write_csv<T: Serialize>(w: impl Write, rows: &[T]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    for r in rows {
        writer.serialize(r).map_err(|e| config_err(format!("csv: {e}")))?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<TrialResult>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| config_err(format!("csv: {e}")))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| config_err(format!("csv: {e}"))))
        .collect()
}

/// Outcome of [`audit`].
#[derive(Clone, Debug, Default, Serialize)]
pub struct AuditReport {
    pub gradient_iterations: u64,
    pub gradient_violations: u64,
    pub max_grad_norm: f64,
    pub grad_bound: f64,
    /// Edits whose output stayed unchanged, differed by one kept point, or
    /// differed by one point after a fill change.
    pub neighbor_cases: [usize; 3],
    pub neighbor_failures: usize,
    pub sigma_checks: usize,
    pub sigma_mismatches: usize,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.gradient_violations == 0 && self.neighbor_failures == 0 && self.sigma_mismatches == 0
    }
}

/// Size of the multiset difference between two datasets.
pub fn multiset_difference(a: &Dataset, b: &Dataset) -> usize {
    let key = |row: &[f64]| row.iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
    let mut counts: BTreeMap<Vec<u64>, i64> = BTreeMap::new();
    for r in a.rows() {
        *counts.entry(key(r)).or_default() += 1;
    }
    for r in b.rows() {
        *counts.entry(key(r)).or_default() -= 1;
    }
    counts.values().filter(|&&c| c > 0).map(|&c| c as usize).sum()
}

/// Checks every single-row replacement of `raw` by a candidate value:
/// preprocessing must yield outputs whose multisets differ in at most one
/// element. Returns the case tallies and the failure count.
pub fn preprocess_neighbor_audit(
    raw: &Dataset,
    candidates: &[Vec<f64>],
    s: &SurvivalSet,
    n: usize,
    dummy: &[f64],
) -> Result<([usize; 3], usize)> {
    let base = preprocess(raw.rows(), raw.d(), s, n, dummy, 0)?;
    let base_kept = raw.rows().filter(|x| s.contains(x)).count().min(n);
    let mut cases = [0usize; 3];
    let mut failures = 0;
    for i in 0..raw.len() {
        for c in candidates {
            let mut edited = raw.clone();
            edited.values_mut()[i * raw.d()..(i + 1) * raw.d()].copy_from_slice(c);
            let out = preprocess(edited.rows(), raw.d(), s, n, dummy, 0)?;
            let diff = multiset_difference(&base.points, &out.points);
            let kept = edited.rows().filter(|x| s.contains(x)).count().min(n);
            if diff > 1 {
                failures += 1;
            } else if diff == 0 {
                cases[0] += 1;
            } else if kept == base_kept {
                cases[1] += 1;
            } else {
                cases[2] += 1;
            }
        }
    }
    Ok((cases, failures))
}

/// Gradient-bound, neighbouring-preservation and calibration audit for `cfg`
/// (mean family, `n` truncated samples, a full `n^2`-iteration run).
pub fn audit(cfg: &RunConfig) -> Result<AuditReport> {
    let mut report = AuditReport::default();
    let d = cfg.d;
    let family = gaussian_mean_family(d)?;
    let budget = cfg.budget()?;
    let n = cfg.n.unwrap_or(200);
    let truth = match Truth::from_config(&RunConfig { task: Task::Mean, ..cfg.clone() })? {
        Truth::Mean(mu) => mu,
        _ => unreachable!("mean task yields a mean"),
    };
    let sgd = SGDConfig::new(&family, &truth, &truth, 1.0, cfg.rho, n, budget, cfg.seed)?
        .with_noise(cfg.noise()?)
        .with_sensitivity_rule(cfg.sensitivity);
    let mut rng = StdRng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut points = Dataset::with_capacity(d, n);
    let mut x = vec![0.0; d];
    for _ in 0..n {
        rejection_sample_truncated(&family, &truth, &sgd.survival, sgd.rejection_cap, &mut rng, &mut x)?;
        points.push(&x)?;
    }
    let data = preprocess(points.rows(), d, &sgd.survival, n, &truth, cfg.seed)?;
    let mut ledger = BudgetLedger::with_limit(budget);
    let run = dpsgd_truncated(&family, &data, &sgd, &mut ledger, "audit", Composition::Sequential)?;
    report.gradient_iterations = run.iterations;
    report.gradient_violations = run.bound_violations;
    report.max_grad_norm = run.max_grad_norm;
    report.grad_bound = sgd.grad_bound;

    let line = |v: &[f64]| Dataset::new(1, v.to_vec());
    let raw = line(&[-2.0, 0.5, 1.5, -0.5, 3.0, 0.25])?;
    let pool: Vec<Vec<f64>> = [-3.0, -1.0, 0.0, 0.75, 2.0, 4.0].iter().map(|&v| vec![v]).collect();
    let configs = [
        (SurvivalSet::data_ball(1.0)?, 3usize),
        (SurvivalSet::data_ball(2.5)?, 6),
        (SurvivalSet::All, 4),
    ];
    for (s, k) in &configs {
        let (cases, failures) = preprocess_neighbor_audit(&raw, &pool, s, *k, &[0.0])?;
        for (t, c) in report.neighbor_cases.iter_mut().zip(cases) {
            *t += c;
        }
        report.neighbor_failures += failures;
    }

    let mut check = |got: f64, want: f64| {
        report.sigma_checks += 1;
        if (got - want).abs() > 1e-12 * want.abs().max(1.0) {
            report.sigma_mismatches += 1;
        }
    };
    let (eps, del) = (budget.epsilon, budget.delta);
    for sens in [1e-3, 0.5, 7.0] {
        check(gaussian_sigma(sens, &budget), 2.0 * sens * (1.25 / del).ln() / eps);
        check(sgd_noise_sigma(sens, n, &budget), (32.0 * sens * sens * (n as f64 / del).ln() * (1.0 / del).ln()).sqrt() / eps);
    }
    check(sgd.noise_scale, sgd_noise_sigma(sgd.sensitivity, n, &budget));
    let ws = warmstart::warm_start_sensitivity(d, 4.0, cfg.rho, n, warmstart::C_WS)?;
    check(ws, 2.0 * ((d as f64).sqrt() / (1.0 - cfg.rho) + 4.0) / n as f64);
    Ok(report)
}

/// Process exit code for an error: 2 configuration, 3 over budget,
/// 4 rejection cap or conditioning failure, 1 anything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidParameter(_) | Error::InvalidDimension(_) => 2,
        Error::OverBudget(_) => 3,
        Error::RejectionCapExceeded { .. } | Error::Conditioning(_) | Error::NotPositiveDefinite => 4,
        _ => 1,
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn config_text_round_trips(
            d in 1usize..6,
            eps in 0.01f64..0.99,
            delta in 1e-12f64..1e-2,
            alpha in 0.01f64..1.0,
            rho in 0.05f64..0.95,
            seed in any::<u64>(),
            trials in 1usize..100,
            sweep in prop::collection::vec(2usize..10_000, 0..5),
            truth_seed in prop::collection::vec(-100.0f64..100.0, 6),
            with_truth in any::<bool>(),
            curvature in prop_oneof![
                Just(CurvatureRule::Analytic),
                (1usize..10_000).prop_map(|n_mc| CurvatureRule::Calibrated { n_mc }),
                (0.01f64..2.0).prop_map(CurvatureRule::Fixed),
            ],
        ) {
            let cfg = RunConfig {
                d,
                epsilon: eps,
                delta,
                alpha,
                rho,
                seed,
                trials,
                sweep,
                truth: if with_truth { truth_seed[..d].to_vec() } else { Vec::new() },
                curvature,
                ..RunConfig::default()
            };
            prop_assume!(cfg.validate().is_ok());
            prop_assert_eq!(RunConfig::parse(&cfg.to_config_string()).unwrap(), cfg);
        }
    }
}
