//! End-to-end Gaussian estimators: the mean pipeline, the recursive
//! covariance preconditioner and the covariance pipeline built on the
//! precision family.

pub mod matrix;

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::{
    derive_seed, estimate_exp_family, report_from_run, run_exp_family, EstimatorReport, ExpFamilyPlan, PipelineOptions,
};
use crate::expfam::{gaussian_mean_family, gaussian_precision_family};
use crate::privacy::{gaussian_mechanism_symmetric, gaussian_sigma, BudgetLedger, Composition, NoiseMode, PrivacyBudget};
use crate::truncation::{preprocess, required_raw_samples, Dataset, SurvivalSet, TruncatedDataset};

/// Lower sandwich constant: the preconditioned covariance is at least
/// `C_LOWER rho^2` in every direction.
pub const C_LOWER: f64 = 0.1;
/// Upper sandwich constant: the preconditioned covariance is at most
/// `C_UPPER ln(1/rho)` in every direction.
pub const C_UPPER: f64 = 4.0;
/// Share of the covariance budget spent on the preconditioner.
pub const PRECONDITIONER_SHARE: f64 = 0.3;
/// Spectral-norm allowance for the privacy noise of one preconditioner step.
pub const PRECONDITIONER_NOISE_LIMIT: f64 = 0.125;

/// Private estimate of the mean of `N(mu, I)` from `raw`.
pub fn estimate_mean(
    raw: &Dataset,
    budget: PrivacyBudget,
    alpha: f64,
    beta: f64,
    opts: &PipelineOptions,
    seed: u64,
) -> Result<EstimatorReport> {
    let family = gaussian_mean_family(raw.d())?;
    estimate_exp_family(&family, raw, budget, alpha, beta, opts, seed)
}

/// Sample plan of [`estimate_mean`].
pub fn plan_mean(d: usize, budget: PrivacyBudget, alpha: f64, beta: f64, opts: &PipelineOptions) -> Result<ExpFamilyPlan> {
    ExpFamilyPlan::new(&gaussian_mean_family(d)?, budget, alpha, beta, opts)
}

/// Condition proxy `8 ln(2/rho) / (lambda rho^2)`.
pub fn preconditioner_kappa(lambda: f64, rho: f64) -> f64 {
    8.0 * (2.0 / rho).ln() / (lambda * rho * rho)
}

/// Iteration count `ceil(log2 kappa')`, at least one.
pub fn preconditioner_iterations(kappa: f64) -> usize {
    (kappa.log2().ceil() as usize).max(1)
}

/// Clip radius `3 sqrt(d) ln(n d / (rho beta))`.
pub fn preconditioner_clip_radius(n: usize, d: usize, rho: f64, beta: f64) -> f64 {
    3.0 * (d as f64).sqrt() * (n as f64 * d as f64 / (rho * beta)).ln()
}

/// Frobenius swap sensitivity `2 R^2 / n` of the clipped second moment.
pub fn preconditioner_sensitivity(clip: f64, n: usize) -> f64 {
    2.0 * clip * clip / n as f64
}

/// Smallest `n` at which every step's symmetric noise has spectral norm at
/// most [`PRECONDITIONER_NOISE_LIMIT`] with probability `1 - beta`, using the
/// bound `sigma (2 sqrt(d) + 2 sqrt(2 ln(2v/beta)))`.
pub fn preconditioner_sample_size(d: usize, lambda: f64, rho: f64, beta: f64, budget: &PrivacyBudget) -> usize {
    let v = preconditioner_iterations(preconditioner_kappa(lambda, rho));
    let step = budget.divided(v);
    let spread = 2.0 * (d as f64).sqrt() + 2.0 * (2.0 * (2.0 * v as f64 / beta).ln()).sqrt();
    let mut n = 1usize;
    for _ in 0..64 {
        let clip = preconditioner_clip_radius(n, d, rho, beta);
        let per_unit = gaussian_sigma(preconditioner_sensitivity(clip, 1), &step);
        let next = (per_unit * spread / PRECONDITIONER_NOISE_LIMIT).ceil().max(1.0) as usize;
        if next == n {
            break;
        }
        n = next;
    }
    n
}

/// One iteration of the preconditioner.
#[derive(Clone, Debug, Serialize)]
pub struct PreconditionerState {
    /// Preconditioner applied to the data in this iteration (row-major).
    pub a: Vec<f64>,
    pub iteration: usize,
    pub kappa_prime: f64,
    pub clip_radius: f64,
    pub sigma: f64,
    /// Noisy second moment of the transformed, clipped data (row-major).
    pub z: Vec<f64>,
    pub clipped_fraction: f64,
    /// Condition number of the transformed empirical second moment.
    pub condition: f64,
}

/// Output of [`precondition_covariance`].
#[derive(Clone, Debug)]
pub struct Preconditioned {
    pub sigma_hat: DMatrix<f64>,
    pub states: Vec<PreconditionerState>,
}

impl Preconditioned {
    /// Whether more than a `beta` fraction of points was clipped in any step.
    pub fn clipping_flagged(&self, beta: f64) -> bool {
        self.states.iter().any(|s| s.clipped_fraction > beta)
    }
}

/// Recursive preconditioner: starting from `I / sqrt(kappa')`, each step
/// releases the clipped second moment of the transformed data and updates
/// `A <- (Z + I/4)^{-1/2} A`. Returns `A^{-1} Z A^{-1}` for the last step.
#[allow(clippy::too_many_arguments)]
pub fn precondition_covariance(
    data: &TruncatedDataset,
    budget: &PrivacyBudget,
    beta: f64,
    lambda: f64,
    rho: f64,
    noise: NoiseMode,
    rng: &mut StdRng,
    ledger: &mut BudgetLedger,
) -> Result<Preconditioned> {
    let d = data.points.d();
    let n = data.points.len();
    if n == 0 {
        return Err(Error::InsufficientData("preconditioner needs at least one sample".into()));
    }
    if !(lambda > 0.0 && lambda <= 0.125) {
        return Err(Error::InvalidParameter(format!("lambda must lie in (0, 1/8], got {lambda}")));
    }
    let kappa = preconditioner_kappa(lambda, rho);
    let v = preconditioner_iterations(kappa);
    let clip = preconditioner_clip_radius(n, d, rho, beta);
    let step_budget = budget.divided(v);
    let sens = preconditioner_sensitivity(clip, n);

    let mut raw_moment = DMatrix::<f64>::zeros(d, d);
    for x in data.points.rows() {
        let x = DVector::from_column_slice(x);
        raw_moment += &x * x.transpose();
    }
    raw_moment /= n as f64;

    let mut a = DMatrix::<f64>::identity(d, d) / kappa.sqrt();
    let mut states = Vec::with_capacity(v);
    let mut z = DMatrix::<f64>::zeros(d, d);
    let mut y = vec![0.0; d];
    for i in 0..v {
        let mut second = DMatrix::<f64>::zeros(d, d);
        let mut clipped = 0usize;
        for x in data.points.rows() {
            for (r, yr) in y.iter_mut().enumerate() {
                *yr = (0..d).map(|c| a[(r, c)] * x[c]).sum();
            }
            let len = y.iter().map(|t| t * t).sum::<f64>().sqrt();
            if len > clip {
                clipped += 1;
                let scale = clip / len;
                y.iter_mut().for_each(|t| *t *= scale);
            }
            for r in 0..d {
                for c in r..d {
                    second[(r, c)] += y[r] * y[c];
                }
            }
        }
        for r in 0..d {
            for c in 0..r {
                second[(r, c)] = second[(c, r)];
            }
        }
        second /= n as f64;
        ledger.charge(format!("precondition[{i}]"), step_budget, Composition::Sequential)?;
        let released = gaussian_mechanism_symmetric(&second, sens, &step_budget, noise, rng)?;
        z = released.value;
        let transformed = &a * &raw_moment * &a;
        let (w, _) = matrix::sym_eig(&transformed)?;
        states.push(PreconditionerState {
            a: a.transpose().as_slice().to_vec(),
            iteration: i,
            kappa_prime: kappa,
            clip_radius: clip,
            sigma: released.sigma,
            z: z.transpose().as_slice().to_vec(),
            clipped_fraction: clipped as f64 / n as f64,
            condition: w[d - 1] / w[0],
        });
        if i + 1 < v {
            let u = &z + DMatrix::<f64>::identity(d, d) * 0.25;
            let root = matrix::inv_sqrt(&u).map_err(|_| {
                Error::Conditioning(format!("preconditioner step {i}: Z + I/4 is not positive definite"))
            })?;
            a = root * a;
        }
    }
    let a_inv = matrix::inv_pd(&matrix::symmetrize(&a))?;
    let sigma_hat = matrix::symmetrize(&(&a_inv * z * &a_inv));
    Ok(Preconditioned { sigma_hat, states })
}

/// Sample plan of [`estimate_covariance`].
#[derive(Clone, Debug, Serialize)]
pub struct CovariancePlan {
    pub d: usize,
    pub budget: PrivacyBudget,
    /// Data are multiplied by this factor so that the covariance is at most `I/8`.
    pub scale: f64,
    pub scaled_lambda: f64,
    pub precondition_budget: PrivacyBudget,
    pub precondition_n: usize,
    pub precondition_raw: usize,
    pub kappa_prime: f64,
    pub precondition_iterations: usize,
    /// Factor applied to preconditioned data before the precision pipeline.
    pub second_scale: f64,
    /// Lower eigenvalue bound of the rescaled preconditioned covariance.
    pub precision_lambda: f64,
    pub main: ExpFamilyPlan,
}

impl CovariancePlan {
    pub fn new(
        d: usize,
        budget: PrivacyBudget,
        alpha: f64,
        beta: f64,
        lambda: f64,
        upper: f64,
        opts: &PipelineOptions,
    ) -> Result<Self> {
        if !(lambda > 0.0 && lambda <= upper && upper.is_finite()) {
            return Err(Error::InvalidParameter(format!("need 0 < lambda <= Lambda, got {lambda}, {upper}")));
        }
        let rho = opts.rho;
        let scale = 1.0 / (8.0 * upper).sqrt();
        let scaled_lambda = lambda * scale * scale;
        let precondition_budget = budget.scaled(PRECONDITIONER_SHARE);
        let main_budget = budget.scaled(1.0 - PRECONDITIONER_SHARE);
        let kappa_prime = preconditioner_kappa(scaled_lambda, rho);
        let precondition_n = preconditioner_sample_size(d, scaled_lambda, rho, beta, &precondition_budget);
        let precondition_raw = required_raw_samples(precondition_n, rho, beta)?;
        let second_scale = (1.0 / (8.0 * C_UPPER * (1.0 / rho).ln())).sqrt();
        let precision_lambda = C_LOWER * rho * rho * second_scale * second_scale;
        let family = gaussian_precision_family(d, precision_lambda)?;
        let main = ExpFamilyPlan::new(&family, main_budget, alpha, beta, opts)?;
        Ok(Self {
            d,
            budget,
            scale,
            scaled_lambda,
            precondition_budget,
            precondition_n,
            precondition_raw,
            kappa_prime,
            precondition_iterations: preconditioner_iterations(kappa_prime),
            second_scale,
            precision_lambda,
            main,
        })
    }

    /// Total raw sample count, saturating at `usize::MAX`.
    pub fn total_raw(&self) -> usize {
        self.precondition_raw.saturating_add(self.main.total_raw())
    }
}

/// Radius `sqrt(d) / (1 - rho)` of the data ball used by the preconditioner.
pub fn preconditioner_data_radius(d: usize, rho: f64) -> f64 {
    (d as f64).sqrt() / (1.0 - rho)
}

/// Private estimate of the covariance of `N(0, Sigma)` with
/// `lambda I <= Sigma <= upper I`. The report's estimate is the row-major
/// covariance matrix.
#[allow(clippy::too_many_arguments)]
pub fn estimate_covariance(
    raw: &Dataset,
    budget: PrivacyBudget,
    alpha: f64,
    beta: f64,
    lambda: f64,
    upper: f64,
    opts: &PipelineOptions,
    seed: u64,
) -> Result<EstimatorReport> {
    let plan = CovariancePlan::new(raw.d(), budget, alpha, beta, lambda, upper, opts)?;
    estimate_covariance_with_plan(raw, &plan, opts, seed)
}

/// As [`estimate_covariance`] with a precomputed plan.
pub fn estimate_covariance_with_plan(
    raw: &Dataset,
    plan: &CovariancePlan,
    opts: &PipelineOptions,
    seed: u64,
) -> Result<EstimatorReport> {
    let start = Instant::now();
    let d = plan.d;
    if raw.d() != d {
        return Err(Error::InvalidDimension(format!("data has dimension {}, plan expects {d}", raw.d())));
    }
    if raw.len() < plan.total_raw() {
        return Err(Error::InsufficientData(format!("plan needs {} raw samples, got {}", plan.total_raw(), raw.len())));
    }
    let rho = opts.rho;
    let beta = plan.main.beta;
    let mut ledger = BudgetLedger::with_limit(plan.budget);

    let pre_raw = raw.view_range(0, plan.precondition_raw);
    let scaled = Dataset::new(d, pre_raw.values().iter().map(|v| v * plan.scale).collect())?;
    let ball = SurvivalSet::data_ball(preconditioner_data_radius(d, rho))?;
    let pre_data = preprocess(scaled.rows(), d, &ball, plan.precondition_n, &vec![0.0; d], derive_seed(seed, 11))?;
    let mut rng = StdRng::seed_from_u64(derive_seed(seed, 12));
    let rough = precondition_covariance(
        &pre_data,
        &plan.precondition_budget,
        beta,
        plan.scaled_lambda,
        rho,
        opts.noise,
        &mut rng,
        &mut ledger,
    )?
    .sigma_hat;

    let whiten = matrix::inv_sqrt(&rough)
        .map_err(|_| Error::Conditioning("rough covariance is not positive definite".into()))?;
    let transform = whiten * (plan.scale * plan.second_scale);
    let main_raw = raw.view_range(plan.precondition_raw, raw.len());
    let mut main_data = Dataset::with_capacity(d, main_raw.len());
    for x in main_raw.rows() {
        let y = &transform * DVector::from_column_slice(x);
        main_data.push(y.as_slice())?;
    }
    let family = gaussian_precision_family(d, plan.precision_lambda)?;
    let run = run_exp_family(&family, main_data.view(), &plan.main, opts, derive_seed(seed, 13), &mut ledger)?;
    let precision = matrix::unpack(&run.boost.estimate, d);
    let inner = matrix::inv_pd(&precision)?;
    let sigma_hat = unprecondition(&inner, &rough, plan.scale * plan.second_scale)?;

    let mut report = report_from_run(&run, &plan.main, ledger, seed, start);
    report.estimate = sigma_hat.transpose().as_slice().to_vec();
    report.n_raw = plan.total_raw();
    Ok(report)
}

/// Maps a covariance estimated on data transformed by
/// `factor * rough^{-1/2}` back to the original coordinates.
pub fn unprecondition(inner: &DMatrix<f64>, rough: &DMatrix<f64>, factor: f64) -> Result<DMatrix<f64>> {
    let root = matrix::sqrt_pd(rough)?;
    Ok(matrix::symmetrize(&(&root * inner * &root / (factor * factor))))
}

/// `||I - Sigma^{-1/2} hat Sigma^{-1/2}||_F / ||I||_F`.
pub fn relative_frobenius_error(truth: &DMatrix<f64>, estimate: &DMatrix<f64>) -> Result<f64> {
    let w = matrix::inv_sqrt(truth)?;
    let d = truth.nrows();
    let gap = DMatrix::<f64>::identity(d, d) - &w * estimate * &w;
    Ok(gap.norm() / (d as f64).sqrt())
}
