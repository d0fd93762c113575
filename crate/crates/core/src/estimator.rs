//! Projected DP-SGD on the truncated negative log-likelihood, the sample-size
//! and curvature formulas it relies on, boosting across disjoint chunks, and
//! the end-to-end exponential-family pipeline.

use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expfam::{distance, norm, project_ball, suff_stat_moments_mc, FamilySpec, ParamVec, SuffStatVec, ThetaSpace};
use crate::gaussian::matrix;
use crate::privacy::{BudgetLedger, Composition, NoiseMode, PrivacyBudget};
use crate::truncation::{
    default_dummy, default_rejection_cap, make_sgd_survival_set, preprocess, rejection_sample_truncated,
    rejection_sample_with_stat, required_raw_samples, sgd_survival_radius, DataView, Dataset, SurvivalSet,
    TruncatedDataset,
};
use crate::warmstart::{self, BoxEstimate, WarmStartOutcome};

/// Anti-concentration constant in [`strong_convexity_constant`].
pub const C_ANTI: f64 = 1.0;
/// Constant in [`uniform_convergence_sample_size`].
pub const C_UC: f64 = 8.0;
pub const DYKSTRA_MAX_ITER: usize = 10_000;
pub const DYKSTRA_TOL: f64 = 1e-9;

/// Shares of the budget spent on the bounding box, the warm start and SGD.
pub const BBOX_SHARE: f64 = 0.2;
pub const WARM_SHARE: f64 = 0.2;
pub const SGD_SHARE: f64 = 0.6;

/// Splitmix64 mixing of a master seed and a stream index.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Lower bound `(1/2) (rho^2 e^{-6 R^2} / (4 c_anti k))^{2k} lambda` on the
/// strong convexity of the truncated NLL over the projection set.
pub fn strong_convexity_constant(lambda: f64, rho: f64, r: f64, k: u32, c_anti: f64) -> f64 {
    let base = rho * rho * (-6.0 * r * r).exp() / (4.0 * c_anti * k as f64);
    0.5 * base.powi(2 * k as i32) * lambda
}

/// `ceil(c_uc (m + R^2) ln(1/beta) / (lambda^2 eta^4 alpha^2))`.
pub fn uniform_convergence_sample_size(m: usize, r: f64, lambda: f64, eta: f64, alpha: f64, beta: f64, c_uc: f64) -> usize {
    let n = c_uc * (m as f64 + r * r) * (1.0 / beta).ln() / (lambda * lambda * eta.powi(4) * alpha * alpha);
    n.ceil() as usize
}

/// Per-step noise scale `sqrt(32 sensitivity^2 ln(n/delta) ln(1/delta)) / epsilon`.
pub fn sgd_noise_sigma(sensitivity: f64, n: usize, budget: &PrivacyBudget) -> f64 {
    let d = budget.delta;
    (32.0 * sensitivity * sensitivity * (n as f64 / d).ln() * (1.0 / d).ln()).sqrt() / budget.epsilon
}

/// Which swap sensitivity feeds the DP-SGD noise formula.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum SensitivityRule {
    /// `G / n`: the effect of one swap on the averaged empirical gradient.
    #[default]
    AveragedGradient,
    /// `G`: the effect of one swap on a single sampled gradient.
    PerSample,
}

impl SensitivityRule {
    pub fn sensitivity(&self, grad_bound: f64, n: usize) -> f64 {
        match self {
            SensitivityRule::AveragedGradient => grad_bound / n as f64,
            SensitivityRule::PerSample => grad_bound,
        }
    }
}

/// `B(center, radius) ∩ Θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet {
    pub center: Vec<f64>,
    pub radius: f64,
    pub theta_space: ThetaSpace,
}

impl ProjectionSet {
    pub fn contains(&self, v: &[f64], tol: f64) -> bool {
        distance(v, &self.center) <= self.radius + tol && self.theta_space.contains(v, tol)
    }

    /// Projection onto the intersection; Dykstra's alternating scheme when Θ
    /// is not the whole space.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        if matches!(self.theta_space, ThetaSpace::All) {
            return project_ball(v, &self.center, self.radius);
        }
        if self.contains(v, 0.0) {
            return v.to_vec();
        }
        dykstra(v, |u| project_ball(u, &self.center, self.radius), |u| self.theta_space.project(u))
    }

    fn project_in_place(&self, v: &mut [f64]) {
        if matches!(self.theta_space, ThetaSpace::All) {
            let dist = distance(v, &self.center);
            if dist > self.radius {
                let scale = self.radius / dist;
                for (x, c) in v.iter_mut().zip(&self.center) {
                    *x = c + (*x - c) * scale;
                }
            }
        } else {
            let p = self.project(v);
            v.copy_from_slice(&p);
        }
    }
}

/// Dykstra's alternating projections onto the intersection of two closed
/// convex sets. Stops after [`DYKSTRA_MAX_ITER`] rounds or once successive
/// iterates move less than [`DYKSTRA_TOL`].
pub fn dykstra(v: &[f64], proj_a: impl Fn(&[f64]) -> Vec<f64>, proj_b: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let m = v.len();
    let mut x = v.to_vec();
    let mut p = vec![0.0; m];
    let mut q = vec![0.0; m];
    for _ in 0..DYKSTRA_MAX_ITER {
        let xp: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + b).collect();
        let y = proj_a(&xp);
        for i in 0..m {
            p[i] = xp[i] - y[i];
        }
        let yq: Vec<f64> = y.iter().zip(&q).map(|(a, b)| a + b).collect();
        let next = proj_b(&yq);
        for i in 0..m {
            q[i] = yq[i] - next[i];
        }
        let moved = distance(&next, &x);
        x = next;
        if moved < DYKSTRA_TOL {
            break;
        }
    }
    x
}

/// Everything one DP-SGD run needs.
#[derive(Clone, Debug)]
pub struct SGDConfig {
    /// Truncated sample count.
    pub n: usize,
    /// Number of iterations, `n^2` by default.
    pub iterations: u64,
    /// Curvature `c` of the step size `1 / (c t)`.
    pub step_curvature: f64,
    /// Bound on every realised gradient norm: twice the survival radius.
    pub grad_bound: f64,
    pub sensitivity: f64,
    /// Calibrated per-step noise scale.
    pub noise_scale: f64,
    pub budget: PrivacyBudget,
    pub projection: ProjectionSet,
    pub survival: SurvivalSet,
    pub rejection_cap: u64,
    pub noise: NoiseMode,
    pub seed: u64,
}

impl SGDConfig {
    /// Configuration around warm start `(theta0, tau0)` with radius `r`:
    /// survival ball of radius `sqrt(m/(1-rho)) + 2r` around `tau0` and
    /// projection set `B(theta0, 2r) ∩ Θ`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        family: &FamilySpec,
        theta0: &[f64],
        tau0: &[f64],
        r: f64,
        rho: f64,
        n: usize,
        budget: PrivacyBudget,
        seed: u64,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("n must be at least 1".into()));
        }
        let survival = make_sgd_survival_set(family, tau0, rho, r)?;
        let radius = sgd_survival_radius(family.m, rho, r)?;
        let grad_bound = 2.0 * radius;
        let rule = SensitivityRule::default();
        let sensitivity = rule.sensitivity(grad_bound, n);
        let projection = ProjectionSet { center: theta0.to_vec(), radius: 2.0 * r, theta_space: family.theta_space.clone() };
        Ok(Self {
            n,
            iterations: (n as u64) * (n as u64),
            step_curvature: family.lambda,
            grad_bound,
            sensitivity,
            noise_scale: sgd_noise_sigma(sensitivity, n, &budget),
            budget,
            projection,
            survival,
            rejection_cap: default_rejection_cap(0.1, rho),
            noise: NoiseMode::calibrated(),
            seed,
        })
    }

    pub fn with_step_curvature(mut self, c: f64) -> Self {
        self.step_curvature = c;
        self
    }

    pub fn with_iterations(mut self, t: u64) -> Self {
        self.iterations = t;
        self
    }

    pub fn with_noise(mut self, noise: NoiseMode) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_rejection_cap(mut self, cap: u64) -> Self {
        self.rejection_cap = cap;
        self
    }

    /// Restricts the survival set further, e.g. to a known pre-truncation set.
    pub fn with_known_set(mut self, known: SurvivalSet) -> Self {
        self.survival = self.survival.intersect(known);
        self
    }

    pub fn with_sensitivity_rule(mut self, rule: SensitivityRule) -> Self {
        self.sensitivity = rule.sensitivity(self.grad_bound, self.n);
        self.noise_scale = sgd_noise_sigma(self.sensitivity, self.n, &self.budget);
        self
    }

    /// Step size `1 / (c t)` at iteration `t >= 1`.
    pub fn step_size(&self, t: u64) -> f64 {
        1.0 / (self.step_curvature * t as f64)
    }
}

/// One stochastic gradient `T(y) - T(x)` of the truncated NLL at `theta`,
/// with `y` drawn from `q_theta` truncated to `s`.
pub fn gradient_estimate(
    family: &FamilySpec,
    theta: &[f64],
    x: &[f64],
    s: &SurvivalSet,
    cap: u64,
    rng: &mut StdRng,
) -> Result<SuffStatVec> {
    if !s.contains(x) {
        return Err(Error::InvalidParameter("data point lies outside the survival set".into()));
    }
    let mut y = vec![0.0; family.d];
    rejection_sample_truncated(family, theta, s, cap, rng, &mut y)?;
    let ty = family.statistic(&y);
    let tx = family.statistic(x);
    Ok(SuffStatVec(ty.iter().zip(tx.iter()).map(|(a, b)| a - b).collect()))
}

/// Result of one DP-SGD run.
#[derive(Clone, Debug, Serialize)]
pub struct SgdRun {
    pub theta: ParamVec,
    pub iterations: u64,
    pub max_grad_norm: f64,
    /// Realised gradients whose norm exceeded the configured bound.
    pub bound_violations: u64,
    pub rejection_attempts: u64,
}

/// Projected noisy SGD on the truncated NLL of `data`, charging
/// `cfg.budget` to `ledger`.
pub fn dpsgd_truncated(
    family: &FamilySpec,
    data: &TruncatedDataset,
    cfg: &SGDConfig,
    ledger: &mut BudgetLedger,
    label: &str,
    composition: Composition,
) -> Result<SgdRun> {
    let m = family.m;
    let n = data.points.len();
    if n == 0 || data.points.d() != family.d {
        return Err(Error::InvalidDimension("dataset does not match the family".into()));
    }
    if !(cfg.step_curvature > 0.0 && cfg.step_curvature.is_finite()) {
        return Err(Error::InvalidParameter(format!("step curvature must be positive, got {}", cfg.step_curvature)));
    }
    if !data.points.rows().all(|x| cfg.survival.contains(x)) {
        return Err(Error::InvalidParameter("dataset has points outside the survival set".into()));
    }
    ledger.charge(label, cfg.budget, composition)?;

    let stat_fn = family.statistic_fn();
    let mut stats = vec![0.0; n * m];
    for (x, t) in data.points.rows().zip(stats.chunks_exact_mut(m)) {
        stat_fn(x, t);
    }
    let sigma = cfg.noise.effective(cfg.noise_scale);
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut theta = cfg.projection.project(&cfg.projection.center);
    let mut y = vec![0.0; family.d];
    let mut ty = vec![0.0; m];
    let mut g = vec![0.0; m];
    let mut run = SgdRun { theta: ParamVec::zeros(m), iterations: cfg.iterations, max_grad_norm: 0.0, bound_violations: 0, rejection_attempts: 0 };

    for t in 1..=cfg.iterations {
        let i = rng.random_range(0..n);
        run.rejection_attempts +=
            rejection_sample_with_stat(family, &stat_fn, &theta, &cfg.survival, cfg.rejection_cap, &mut rng, &mut y, &mut ty)?;
        let tx = &stats[i * m..(i + 1) * m];
        for j in 0..m {
            g[j] = ty[j] - tx[j];
        }
        let gn = norm(&g);
        run.max_grad_norm = run.max_grad_norm.max(gn);
        if gn > cfg.grad_bound {
            run.bound_violations += 1;
        }
        let step = cfg.step_size(t);
        if sigma > 0.0 {
            for j in 0..m {
                let xi: f64 = rng.sample(StandardNormal);
                theta[j] -= step * (g[j] + sigma * xi);
            }
        } else {
            for j in 0..m {
                theta[j] -= step * g[j];
            }
        }
        cfg.projection.project_in_place(&mut theta);
    }
    run.theta = ParamVec(theta);
    Ok(run)
}

/// How the SGD step-size curvature is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum CurvatureRule {
    /// Smallest eigenvalue of the truncated statistic covariance, estimated by
    /// Monte Carlo at the centre of the projection set and at the points
    /// `center ± radius e_i` projected back onto it.
    Calibrated { n_mc: usize },
    /// The analytic bound of [`strong_convexity_constant`].
    Analytic,
    Fixed(f64),
}

impl Default for CurvatureRule {
    fn default() -> Self {
        CurvatureRule::Calibrated { n_mc: 4000 }
    }
}

/// Monte-Carlo lower estimate of the truncated NLL curvature over `k`. Uses
/// only the projection set and the survival set, never the data.
pub fn calibrate_curvature(
    family: &FamilySpec,
    survival: &SurvivalSet,
    k: &ProjectionSet,
    n_mc: usize,
    cap: u64,
    seed: u64,
) -> Result<f64> {
    let mut probes = vec![k.project(&k.center)];
    for i in 0..family.m {
        for sign in [-1.0, 1.0] {
            let mut p = k.center.clone();
            p[i] += sign * k.radius;
            probes.push(k.project(&p));
        }
    }
    let mut lowest = f64::INFINITY;
    for (j, p) in probes.iter().enumerate() {
        let mom = suff_stat_moments_mc(family, p, survival, n_mc, cap, derive_seed(seed, j as u64))?;
        let (w, _) = matrix::sym_eig(&mom.covariance)?;
        lowest = lowest.min(w[0]);
    }
    if lowest > 0.0 && lowest.is_finite() {
        Ok(lowest)
    } else {
        Err(Error::Conditioning("statistic covariance is singular on the projection set".into()))
    }
}

/// Output of [`boost`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoostOutcome {
    pub estimate: ParamVec,
    pub index: usize,
    /// False when no candidate had the required majority and the fallback
    /// was used.
    pub confident: bool,
}

/// Returns the lowest-index candidate within `alpha / 2` of at least half of
/// the others; otherwise the candidate close to the most others.
pub fn boost(candidates: &[ParamVec], alpha: f64) -> Result<BoostOutcome> {
    let v = candidates.len();
    if v == 0 {
        return Err(Error::InvalidParameter("boosting needs at least one candidate".into()));
    }
    if v == 1 {
        return Ok(BoostOutcome { estimate: candidates[0].clone(), index: 0, confident: true });
    }
    let close: Vec<usize> = (0..v)
        .map(|i| (0..v).filter(|&j| j != i && distance(&candidates[i], &candidates[j]) <= alpha / 2.0).count())
        .collect();
    if let Some(i) = (0..v).find(|&i| 2 * close[i] >= v) {
        return Ok(BoostOutcome { estimate: candidates[i].clone(), index: i, confident: true });
    }
    let best = (0..v)
        .max_by(|&a, &b| {
            close[a].cmp(&close[b]).then_with(|| {
                let sa: f64 = candidates.iter().map(|c| distance(c, &candidates[a])).sum();
                let sb: f64 = candidates.iter().map(|c| distance(c, &candidates[b])).sum();
                sb.total_cmp(&sa)
            })
            .then(b.cmp(&a))
        })
        .unwrap_or(0);
    Ok(BoostOutcome { estimate: candidates[best].clone(), index: best, confident: false })
}

/// Tunable constants of the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Constants {
    pub c_anti: f64,
    pub c_uc: f64,
    pub c_ws: f64,
}

impl Default for Constants {
    fn default() -> Self {
        Self { c_anti: C_ANTI, c_uc: C_UC, c_ws: warmstart::C_WS }
    }
}

/// Options of [`estimate_exp_family`] beyond budget and accuracy.
#[derive(Clone, Debug)]
pub struct PipelineOptions {
    /// Survival-mass parameter for the warm-start and SGD sets.
    pub rho: f64,
    /// Known set the raw data is already truncated to.
    pub known_set: SurvivalSet,
    /// Lower bound on the mass of `known_set`.
    pub known_mass: f64,
    /// Padding point inside `known_set` for the bounding-box stage.
    pub known_dummy: Option<Vec<f64>>,
    pub constants: Constants,
    pub curvature: CurvatureRule,
    pub sensitivity: SensitivityRule,
    pub noise: NoiseMode,
    /// Overrides the number of boosting chunks.
    pub chunks: Option<usize>,
    /// Overrides the truncated sample count of each SGD chunk.
    pub sgd_samples: Option<usize>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            rho: 0.5,
            known_set: SurvivalSet::All,
            known_mass: 1.0,
            known_dummy: None,
            constants: Constants::default(),
            curvature: CurvatureRule::default(),
            sensitivity: SensitivityRule::default(),
            noise: NoiseMode::calibrated(),
            chunks: None,
            sgd_samples: None,
        }
    }
}

/// Number of boosting chunks `ceil(log2(1/beta)) + 1`.
pub fn boosting_chunks(beta: f64) -> usize {
    (1.0 / beta).log2().ceil() as usize + 1
}

/// Warm-start radius handed to SGD: `max(1, 4 ln(1/rho) / lambda)`.
pub fn sgd_warm_radius(lambda: f64, rho: f64) -> f64 {
    (4.0 * (1.0 / rho).ln() / lambda).max(1.0)
}

/// Smallest `n` for which the final-iterate privacy noise, of order
/// `sqrt(m) sigma / (lambda sqrt(T))`, stays below `alpha / 4`.
pub fn sgd_privacy_sample_size(
    m: usize,
    grad_bound: f64,
    lambda: f64,
    alpha: f64,
    budget: &PrivacyBudget,
    rule: SensitivityRule,
) -> usize {
    let mut n = 1usize;
    for _ in 0..64 {
        let sigma = sgd_noise_sigma(rule.sensitivity(grad_bound, n), n, budget);
        let ratio = 4.0 * (m as f64).sqrt() * sigma * n as f64 / (lambda * alpha);
        let next = match rule {
            SensitivityRule::AveragedGradient => ratio.sqrt(),
            SensitivityRule::PerSample => ratio / n as f64,
        }
        .ceil()
        .max(1.0) as usize;
        if next == n {
            break;
        }
        n = next;
    }
    n
}

/// Sample sizes and budget split of one pipeline run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExpFamilyPlan {
    pub m: usize,
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub budget: PrivacyBudget,
    pub bbox_budget: PrivacyBudget,
    pub warm_budget: PrivacyBudget,
    pub sgd_budget: PrivacyBudget,
    /// Truncated samples for the bounding box.
    pub bbox_n: usize,
    pub bin_length: f64,
    /// Statistic-space radius guaranteed by the bounding box.
    pub bbox_radius: f64,
    pub warm_n: usize,
    pub warm_halvings: usize,
    /// Parameter-space radius handed from the warm start to SGD.
    pub sgd_radius: f64,
    pub sgd_n: usize,
    pub chunks: usize,
    pub raw_bbox: usize,
    pub raw_warm: usize,
    pub raw_chunk: usize,
}

impl ExpFamilyPlan {
    pub fn new(family: &FamilySpec, budget: PrivacyBudget, alpha: f64, beta: f64, opts: &PipelineOptions) -> Result<Self> {
        for (v, name) in [(alpha, "alpha"), (beta, "beta")] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidParameter(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        let rho = opts.rho;
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::InvalidParameter(format!("rho must lie in (0, 1), got {rho}")));
        }
        if !(opts.known_mass > 0.0 && opts.known_mass <= 1.0) {
            return Err(Error::InvalidParameter("known_mass must lie in (0, 1]".into()));
        }
        let m = family.m;
        let bbox_budget = budget.scaled(BBOX_SHARE);
        let warm_budget = budget.scaled(WARM_SHARE);
        let sgd_budget = budget.scaled(SGD_SHARE);

        let bbox_n = warmstart::bbox_sample_size(beta, &bbox_budget.divided(m));
        let bin_length = warmstart::bbox_bin_length(bbox_n, opts.known_mass, beta, family.eta);
        let bbox_radius = warmstart::bbox_radius(m, bin_length);
        let warm_halvings = warmstart::warm_start_halvings(bbox_radius, m);
        let warm_n = warmstart::warm_start_sample_size(m, bbox_radius, rho, &warm_budget, beta, opts.constants.c_ws)?;

        let sgd_radius = sgd_warm_radius(family.lambda, rho);
        let grad_bound = 2.0 * sgd_survival_radius(m, rho, sgd_radius)?;
        let sgd_n = match opts.sgd_samples {
            Some(n) => n,
            None => {
                let uc = uniform_convergence_sample_size(m, sgd_radius, family.lambda, family.eta, alpha, beta, opts.constants.c_uc);
                let dp = sgd_privacy_sample_size(m, grad_bound, family.lambda, alpha, &sgd_budget, opts.sensitivity);
                uc.max(dp)
            }
        };
        let chunks = opts.chunks.unwrap_or_else(|| boosting_chunks(beta)).max(1);

        let raw_bbox = if opts.known_set.is_all() { bbox_n } else { required_raw_samples(bbox_n, opts.known_mass, beta)? };
        let stage_mass = rho * opts.known_mass;
        let raw_warm = required_raw_samples(warm_n, stage_mass, beta)?;
        let raw_chunk = required_raw_samples(sgd_n, stage_mass, beta)?;

        let plan = Self {
            m,
            alpha,
            beta,
            rho,
            budget,
            bbox_budget,
            warm_budget,
            sgd_budget,
            bbox_n,
            bin_length,
            bbox_radius,
            warm_n,
            warm_halvings,
            sgd_radius,
            sgd_n,
            chunks,
            raw_bbox,
            raw_warm,
            raw_chunk,
        };
        let mut ledger = BudgetLedger::with_limit(budget);
        plan.charge_all(&mut ledger)?;
        Ok(plan)
    }

    /// Total raw sample count the plan consumes, saturating at `usize::MAX`.
    pub fn total_raw(&self) -> usize {
        self.raw_bbox.saturating_add(self.raw_warm).saturating_add(self.chunks.saturating_mul(self.raw_chunk))
    }

    /// SGD iterations per chunk.
    pub fn iterations_per_chunk(&self) -> u64 {
        (self.sgd_n as u64).saturating_mul(self.sgd_n as u64)
    }

    fn charge_all(&self, ledger: &mut BudgetLedger) -> Result<()> {
        let coord = self.bbox_budget.divided(self.m);
        for i in 0..self.m {
            ledger.charge(format!("bbox[{i}]"), coord, Composition::Sequential)?;
        }
        let step = self.warm_budget.divided(self.warm_halvings + 1);
        for i in 0..=self.warm_halvings {
            ledger.charge(format!("warm[{i}]"), step, Composition::Sequential)?;
        }
        for k in 0..self.chunks {
            ledger.charge(format!("sgd[{k}]"), self.sgd_budget, Composition::Parallel(0))?;
        }
        Ok(())
    }
}

/// Final estimate plus run metadata.
#[derive(Clone, Debug, Serialize)]
pub struct EstimatorReport {
    pub estimate: Vec<f64>,
    pub confident: bool,
    pub budget_spent: PrivacyBudget,
    pub ledger: BudgetLedger,
    pub n_raw: usize,
    pub n_truncated: usize,
    pub chunks: usize,
    pub iterations: u64,
    pub grad_bound: f64,
    pub max_grad_norm: f64,
    pub bound_violations: u64,
    pub step_curvature: f64,
    pub warm_start: Vec<f64>,
    pub seed: u64,
    #[serde(skip)]
    pub wall_ms: f64,
}

/// Intermediate results of one pipeline run.
#[derive(Clone, Debug)]
pub struct ExpFamilyRun {
    pub bbox: BoxEstimate,
    pub warm: WarmStartOutcome,
    pub candidates: Vec<ParamVec>,
    pub runs: Vec<SgdRun>,
    pub boost: BoostOutcome,
    pub grad_bound: f64,
    pub step_curvature: f64,
}

/// Bounding box, recursive warm start, DP-SGD on disjoint chunks and
/// boosting, following `plan`. Charges go to `ledger`.
pub fn run_exp_family(
    family: &FamilySpec,
    raw: DataView<'_>,
    plan: &ExpFamilyPlan,
    opts: &PipelineOptions,
    seed: u64,
    ledger: &mut BudgetLedger,
) -> Result<ExpFamilyRun> {
    if raw.d() != family.d {
        return Err(Error::InvalidDimension(format!("data has dimension {}, family expects {}", raw.d(), family.d)));
    }
    if raw.len() < plan.total_raw() {
        return Err(Error::InsufficientData(format!("plan needs {} raw samples, got {}", plan.total_raw(), raw.len())));
    }
    let beta = plan.beta;
    let rho = plan.rho;
    let cap = default_rejection_cap(beta, rho * opts.known_mass);

    let bbox_raw = raw.slice(0, plan.raw_bbox);
    let warm_raw = raw.slice(plan.raw_bbox, plan.raw_bbox + plan.raw_warm);
    let chunk_start = plan.raw_bbox + plan.raw_warm;

    let dummy = match &opts.known_dummy {
        Some(x) => x.clone(),
        None => default_dummy(family, &opts.known_set),
    };
    let bbox_data = preprocess(bbox_raw.rows(), family.d, &opts.known_set, plan.bbox_n, &dummy, derive_seed(seed, 1))?;
    let mut rng = StdRng::seed_from_u64(derive_seed(seed, 2));
    let bbox = warmstart::bounding_box(family, &bbox_data, &plan.bbox_budget, beta, opts.known_mass, opts.noise, &mut rng, ledger)?;

    let warm = warmstart::recursive_warm_start(
        family,
        warm_raw,
        &plan.warm_budget,
        &bbox.tau,
        plan.bbox_radius,
        rho,
        plan.warm_n,
        &opts.known_set,
        opts.noise,
        derive_seed(seed, 3),
        ledger,
    )?;

    let probe = SGDConfig::new(family, &warm.theta, &warm.tau, plan.sgd_radius, rho, plan.sgd_n, plan.sgd_budget, 0)?
        .with_known_set(opts.known_set.clone())
        .with_sensitivity_rule(opts.sensitivity);
    let step_curvature = match opts.curvature {
        CurvatureRule::Calibrated { n_mc } => {
            calibrate_curvature(family, &probe.survival, &probe.projection, n_mc, cap, derive_seed(seed, 4))?
        }
        CurvatureRule::Analytic => {
            strong_convexity_constant(family.lambda, rho, plan.sgd_radius, family.degree_k, opts.constants.c_anti)
        }
        CurvatureRule::Fixed(c) => c,
    };

    let mut candidates = Vec::with_capacity(plan.chunks);
    let mut runs = Vec::with_capacity(plan.chunks);
    let sgd_dummy = default_dummy(family, &probe.survival);
    for k in 0..plan.chunks {
        let lo = chunk_start + k * plan.raw_chunk;
        let chunk = raw.slice(lo, lo + plan.raw_chunk);
        let stream = 100 + 2 * k as u64;
        let data = preprocess(chunk.rows(), family.d, &probe.survival, plan.sgd_n, &sgd_dummy, derive_seed(seed, stream))?;
        let cfg = SGDConfig { seed: derive_seed(seed, stream + 1), ..probe.clone() }
            .with_step_curvature(step_curvature)
            .with_noise(opts.noise)
            .with_rejection_cap(cap);
        let run = dpsgd_truncated(family, &data, &cfg, ledger, &format!("sgd[{k}]"), Composition::Parallel(0))?;
        candidates.push(run.theta.clone());
        runs.push(run);
    }
    let boost = boost(&candidates, plan.alpha)?;
    Ok(ExpFamilyRun { bbox, warm, candidates, runs, boost, grad_bound: probe.grad_bound, step_curvature })
}

/// Private estimate of the natural parameter from raw samples of `q_theta*`
/// (possibly already truncated to `opts.known_set`).
pub fn estimate_exp_family(
    family: &FamilySpec,
    raw: &Dataset,
    budget: PrivacyBudget,
    alpha: f64,
    beta: f64,
    opts: &PipelineOptions,
    seed: u64,
) -> Result<EstimatorReport> {
    let plan = ExpFamilyPlan::new(family, budget, alpha, beta, opts)?;
    estimate_with_plan(family, raw, &plan, opts, seed)
}

/// As [`estimate_exp_family`] with a precomputed plan.
pub fn estimate_with_plan(
    family: &FamilySpec,
    raw: &Dataset,
    plan: &ExpFamilyPlan,
    opts: &PipelineOptions,
    seed: u64,
) -> Result<EstimatorReport> {
    let start = Instant::now();
    let mut ledger = BudgetLedger::with_limit(plan.budget);
    let run = run_exp_family(family, raw.view(), plan, opts, seed, &mut ledger)?;
    Ok(report_from_run(&run, plan, ledger, seed, start))
}

pub(crate) fn report_from_run(run: &ExpFamilyRun, plan: &ExpFamilyPlan, ledger: BudgetLedger, seed: u64, start: Instant) -> EstimatorReport {
    EstimatorReport {
        estimate: run.boost.estimate.0.clone(),
        confident: run.boost.confident,
        budget_spent: ledger.total(),
        ledger,
        n_raw: plan.total_raw(),
        n_truncated: plan.sgd_n,
        chunks: plan.chunks,
        iterations: run.runs.iter().map(|r| r.iterations).sum(),
        grad_bound: run.grad_bound,
        max_grad_norm: run.runs.iter().map(|r| r.max_grad_norm).fold(0.0, f64::max),
        bound_violations: run.runs.iter().map(|r| r.bound_violations).sum(),
        step_curvature: run.step_curvature,
        warm_start: run.warm.theta.0.clone(),
        seed,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn spectral_set(center: Vec<f64>, radius: f64) -> ProjectionSet {
        ProjectionSet { center, radius, theta_space: ThetaSpace::SpectralBox { d: 2, lower: 0.5, upper: 3.0 } }
    }

    proptest! {
        #[test]
        fn ball_projection_is_idempotent_and_inside(
            v in prop::collection::vec(-50.0f64..50.0, 3),
            c in prop::collection::vec(-5.0f64..5.0, 3),
            r in 0.1f64..10.0,
        ) {
            let set = ProjectionSet { center: c, radius: r, theta_space: ThetaSpace::All };
            let p = set.project(&v);
            prop_assert!(set.contains(&p, 1e-9));
            let q = set.project(&p);
            prop_assert!(distance(&p, &q) <= 1e-12);
        }

        #[test]
        fn intersection_projection_is_idempotent_and_inside(v in prop::collection::vec(-6.0f64..6.0, 3)) {
            let center = crate::gaussian::matrix::pack(&nalgebra::DMatrix::identity(2, 2));
            let set = spectral_set(center, 1.5);
            let p = set.project(&v);
            prop_assert!(set.contains(&p, 1e-6));
            let q = set.project(&p);
            prop_assert!(distance(&p, &q) <= 1e-6);
        }
    }
}
