//! Prior-free initialisation: a coarse bounding box from per-coordinate
//! private histograms, then a recursive warm start that halves the distance
//! bound at every step.

use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::derive_seed;
use crate::expfam::{distance, FamilySpec, ParamVec, SuffStatVec};
use crate::privacy::{gaussian_mechanism, histogram_sample_size, private_histogram, BudgetLedger, Composition, NoiseMode, PrivacyBudget};
use crate::truncation::{default_dummy, preprocess, warm_survival_radius, DataView, SurvivalSet, TruncatedDataset};

/// Swap constant of the one-step sensitivity: two points each move the mean
/// by at most `radius / n`.
pub const C_WS: f64 = 2.0;

/// Bin length `ln(2n/(rho beta)) / (2 eta)` of the bounding-box histograms.
pub fn bbox_bin_length(n: usize, rho: f64, beta: f64, eta: f64) -> f64 {
    (2.0 * n as f64 / (rho * beta)).ln() / (2.0 * eta)
}

/// Per-coordinate histogram sample count
/// `8 ln(4/(beta delta))/epsilon + ln(4/beta)/2` for the coordinate budget.
pub fn bbox_sample_size(beta: f64, coordinate_budget: &PrivacyBudget) -> usize {
    histogram_sample_size(1.0, beta, coordinate_budget)
}

/// Statistic-space radius `1.5 s sqrt(m)` covered when every coordinate mean
/// lies in its three-bin window.
pub fn bbox_radius(m: usize, bin_length: f64) -> f64 {
    1.5 * bin_length * (m as f64).sqrt()
}

/// Output of [`bounding_box`].
#[derive(Clone, Debug, Serialize)]
pub struct BoxEstimate {
    pub theta: ParamVec,
    pub tau: SuffStatVec,
    /// Index of the heaviest released bin per coordinate.
    pub bins: Vec<i64>,
    pub bin_length: f64,
}

impl BoxEstimate {
    /// Whether `value` lies in the three-bin window around coordinate `i`.
    pub fn window_contains(&self, i: usize, value: f64) -> bool {
        let lo = (self.bins[i] - 1) as f64 * self.bin_length;
        let hi = (self.bins[i] + 2) as f64 * self.bin_length;
        value >= lo && value < hi
    }
}

/// Per-coordinate stable histograms of the statistic with budget `budget/m`
/// each; the heaviest bin's midpoint gives each coordinate of the estimate.
#[allow(clippy::too_many_arguments)]
pub fn bounding_box(
    family: &FamilySpec,
    data: &TruncatedDataset,
    budget: &PrivacyBudget,
    beta: f64,
    rho: f64,
    noise: NoiseMode,
    rng: &mut StdRng,
    ledger: &mut BudgetLedger,
) -> Result<BoxEstimate> {
    let m = family.m;
    let n = data.points.len();
    if n == 0 {
        return Err(Error::InsufficientData("bounding box needs at least one sample".into()));
    }
    let bin_length = bbox_bin_length(n, rho, beta, family.eta);
    let coord_budget = budget.divided(m);
    let stats = data.points.map_rows(m, |x, t| family.statistic_into(x, t));
    let mut tau = vec![0.0; m];
    let mut bins = vec![0; m];
    let mut column = vec![0.0; n];
    for i in 0..m {
        for (c, t) in column.iter_mut().zip(stats.rows()) {
            *c = t[i];
        }
        ledger.charge(format!("bbox[{i}]"), coord_budget, Composition::Sequential)?;
        let hist = private_histogram(&column, bin_length, &coord_budget, noise, rng)?;
        let (j, _) = hist
            .argmax()
            .ok_or_else(|| Error::InsufficientData(format!("histogram of coordinate {i} released no bin")))?;
        bins[i] = j;
        tau[i] = hist.midpoint(j);
    }
    let theta = family.moment_match_projected(&tau)?;
    Ok(BoxEstimate { theta, tau: SuffStatVec(tau), bins, bin_length })
}

/// One-step sensitivity `c_ws (R + sqrt(m)/(1-rho)) / n`, i.e. `c_ws` times
/// the warm survival radius over `n`.
pub fn warm_start_sensitivity(m: usize, r: f64, rho: f64, n: usize, c_ws: f64) -> Result<f64> {
    Ok(c_ws * warm_survival_radius(m, rho, r)? / n as f64)
}

/// Privatised mean of the statistic over `data` (already restricted to the
/// warm survival ball of radius for `r`).
#[allow(clippy::too_many_arguments)]
pub fn warm_start_one_step(
    family: &FamilySpec,
    data: &TruncatedDataset,
    r: f64,
    rho: f64,
    budget: &PrivacyBudget,
    c_ws: f64,
    noise: NoiseMode,
    rng: &mut StdRng,
    ledger: &mut BudgetLedger,
    label: &str,
) -> Result<(SuffStatVec, f64)> {
    let m = family.m;
    let n = data.points.len();
    if n == 0 {
        return Err(Error::InsufficientData("warm start needs at least one sample".into()));
    }
    let mut mean = vec![0.0; m];
    let mut t = vec![0.0; m];
    for x in data.points.rows() {
        family.statistic_into(x, &mut t);
        for (a, b) in mean.iter_mut().zip(&t) {
            *a += b;
        }
    }
    for a in &mut mean {
        *a /= n as f64;
    }
    let sens = warm_start_sensitivity(m, r, rho, n, c_ws)?;
    ledger.charge(label, *budget, Composition::Sequential)?;
    let released = gaussian_mechanism(&mean, sens, budget, noise, rng)?;
    Ok((SuffStatVec(released.value), released.sigma))
}

/// Number of halving steps `ceil(log2(R / sqrt(m)))`, zero when `R <= sqrt(m)`.
pub fn warm_start_halvings(r: f64, m: usize) -> usize {
    let ratio = r / (m as f64).sqrt();
    if ratio <= 1.0 {
        0
    } else {
        ratio.log2().ceil() as usize
    }
}

/// Accuracy target `4 ln(1/rho) + 4` of the final warm-start step.
pub fn alpha_final(rho: f64) -> f64 {
    4.0 * (1.0 / rho).ln() + 4.0
}

/// Samples for one step at radius `r` to be within `alpha` with probability
/// `1 - beta`: half of `alpha` for the sampling error and half for the noise.
pub fn warm_start_step_samples(m: usize, r: f64, rho: f64, alpha: f64, step_budget: &PrivacyBudget, beta: f64, c_ws: f64) -> Result<usize> {
    let tail = (2.0 * (2.0 / beta).ln()).sqrt();
    let mf = m as f64;
    let noise = 2.0 * c_ws * warm_survival_radius(m, rho, r)? * (1.25 / step_budget.delta).ln() * (mf.sqrt() + tail) * 2.0
        / (step_budget.epsilon * alpha);
    let sampling = 4.0 * mf * (1.0 + tail).powi(2) / (alpha * alpha);
    Ok(noise.max(sampling).ceil() as usize)
}

/// Radius and accuracy target of every step: halving steps at `R 2^-i` with
/// target `R 2^-(i+1)`, then the final step at `R 2^-v` with [`alpha_final`].
pub fn warm_start_schedule(r: f64, m: usize, rho: f64) -> Vec<(f64, f64)> {
    let v = warm_start_halvings(r, m);
    let mut steps: Vec<(f64, f64)> = (0..v).map(|i| {
        let ri = r / 2f64.powi(i as i32);
        (ri, ri / 2.0)
    }).collect();
    steps.push((r / 2f64.powi(v as i32), alpha_final(rho)));
    steps
}

/// Samples that satisfy every step of the schedule for starting radius `r`.
pub fn warm_start_sample_size(m: usize, r: f64, rho: f64, budget: &PrivacyBudget, beta: f64, c_ws: f64) -> Result<usize> {
    let steps = warm_start_schedule(r, m, rho);
    let step_budget = budget.divided(steps.len());
    let step_beta = beta / steps.len() as f64;
    let mut n = 1;
    for (ri, ai) in steps {
        n = n.max(warm_start_step_samples(m, ri, rho, ai, &step_budget, step_beta, c_ws)?);
    }
    Ok(n)
}

/// Output of [`recursive_warm_start`].
#[derive(Clone, Debug, Serialize)]
pub struct WarmStartOutcome {
    pub theta: ParamVec,
    pub tau: SuffStatVec,
    /// Radius used at every step.
    pub radii: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// Steps whose noisy mean left the survival ball inflated by `6 sigma sqrt(m)`.
    pub drift_flags: Vec<bool>,
}

/// Recursive warm start from `(tau0, r)`: every step re-centres the warm
/// survival ball at the current statistic estimate, filters `raw` to it and
/// releases a noisy mean with budget `budget / (v + 1)`.
#[allow(clippy::too_many_arguments)]
pub fn recursive_warm_start(
    family: &FamilySpec,
    raw: DataView<'_>,
    budget: &PrivacyBudget,
    tau0: &[f64],
    r: f64,
    rho: f64,
    n: usize,
    known_set: &SurvivalSet,
    noise: NoiseMode,
    seed: u64,
    ledger: &mut BudgetLedger,
) -> Result<WarmStartOutcome> {
    if tau0.len() != family.m {
        return Err(Error::InvalidDimension("initial statistic has the wrong length".into()));
    }
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::InvalidParameter(format!("warm-start radius must be positive, got {r}")));
    }
    let steps = warm_start_schedule(r, family.m, rho);
    let step_budget = budget.divided(steps.len());
    let mut rng = StdRng::seed_from_u64(seed);
    let mut tau = tau0.to_vec();
    let mut out = WarmStartOutcome {
        theta: ParamVec::zeros(family.m),
        tau: SuffStatVec::zeros(family.m),
        radii: Vec::with_capacity(steps.len()),
        sigmas: Vec::with_capacity(steps.len()),
        drift_flags: Vec::with_capacity(steps.len()),
    };
    for (i, &(ri, _)) in steps.iter().enumerate() {
        let radius = warm_survival_radius(family.m, rho, ri)?;
        let ball = SurvivalSet::stat_ball(family, tau.clone(), radius)?;
        let set = ball.intersect(known_set.clone());
        let dummy = default_dummy(family, &set);
        let data = preprocess(raw.rows(), family.d, &set, n, &dummy, derive_seed(seed, 1 + i as u64))?;
        let (next, sigma) = warm_start_one_step(
            family,
            &data,
            ri,
            rho,
            &step_budget,
            C_WS,
            noise,
            &mut rng,
            ledger,
            &format!("warm[{i}]"),
        )?;
        let drift = distance(&next, &tau) > radius + 6.0 * sigma * (family.m as f64).sqrt();
        out.radii.push(ri);
        out.sigmas.push(sigma);
        out.drift_flags.push(drift);
        tau = next.0;
    }
    out.theta = family.moment_match_projected(&tau)?;
    out.tau = SuffStatVec(tau);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::gaussian_mean_family;
    use crate::truncation::Dataset;
    use approx::assert_abs_diff_eq;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_rows(mu: &[f64], n: usize, seed: u64) -> Dataset {
        let mut rng = StdRng::seed_from_u64(seed);
        let d = mu.len();
        let mut ds = Dataset::with_capacity(d, n);
        let mut x = vec![0.0; d];
        for _ in 0..n {
            for (xi, m) in x.iter_mut().zip(mu) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *xi = m + z;
            }
            ds.push(&x).unwrap();
        }
        ds
    }

    #[test]
    fn bin_length_example() {
        assert_abs_diff_eq!(bbox_bin_length(100, 1.0, 0.1, 1.0), 2000f64.ln() / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(bbox_bin_length(100, 1.0, 0.1, 1.0), 3.8005, epsilon = 1e-4);
    }

    #[test]
    fn halvings_examples() {
        assert_eq!(warm_start_halvings(2.0, 4), 0);
        assert_eq!(warm_start_halvings(1.0, 4), 0);
        assert_eq!(warm_start_halvings(32.0, 4), 4);
        assert_eq!(warm_start_halvings(33.0, 4), 5);
    }

    #[test]
    fn schedule_halves_radius() {
        let steps = warm_start_schedule(32.0, 4, 0.5);
        assert_eq!(steps.len(), 5);
        for w in steps.windows(2) {
            assert_eq!(w[1].0, w[0].0 / 2.0);
        }
        for &(r, a) in &steps[..4] {
            assert_eq!(a, r / 2.0);
        }
        assert_abs_diff_eq!(steps[4].1, 4.0 * 2f64.ln() + 4.0, epsilon = 1e-12);
    }

    #[test]
    fn sensitivity_is_twice_radius_over_n() {
        let s = warm_start_sensitivity(4, 3.0, 0.5, 50, C_WS).unwrap();
        assert_abs_diff_eq!(s, 2.0 * (4.0 + 3.0) / 50.0, epsilon = 1e-15);
    }

    #[test]
    fn bounding_box_covers_mean_without_noise() {
        let f = gaussian_mean_family(1).unwrap();
        let b = PrivacyBudget::new(0.5, 1e-6).unwrap();
        let beta = 0.1;
        let n = 200;
        let mut hits = 0;
        for trial in 0..200 {
            let raw = gaussian_rows(&[0.0], n, trial);
            let data = preprocess(raw.rows(), 1, &SurvivalSet::All, n, &[0.0], trial).unwrap();
            let mut rng = StdRng::seed_from_u64(trial);
            let mut ledger = BudgetLedger::new();
            let bx = bounding_box(&f, &data, &b, beta, 1.0, NoiseMode::test_mode().unwrap(), &mut rng, &mut ledger).unwrap();
            if bx.window_contains(0, 0.0) {
                hits += 1;
            }
        }
        assert!(hits >= 190, "hits {hits}");
    }

    #[test]
    fn bounding_box_charges_per_coordinate() {
        let f = gaussian_mean_family(3).unwrap();
        let b = PrivacyBudget::new(0.6, 3e-6).unwrap();
        let n = bbox_sample_size(0.1, &b.divided(3));
        let raw = gaussian_rows(&[5.0, -5.0, 0.0], n, 1);
        let data = preprocess(raw.rows(), 3, &SurvivalSet::All, n, &[0.0; 3], 1).unwrap();
        let mut rng = StdRng::seed_from_u64(2);
        let mut ledger = BudgetLedger::with_limit(b);
        let bx = bounding_box(&f, &data, &b, 0.1, 1.0, NoiseMode::calibrated(), &mut rng, &mut ledger).unwrap();
        assert_eq!(ledger.entries().len(), 3);
        assert_abs_diff_eq!(ledger.total().epsilon, 0.6, epsilon = 1e-12);
        assert!(f.theta_space.contains(&bx.theta, 0.0));
        assert!(distance(&bx.tau, &[5.0, -5.0, 0.0]) <= bbox_radius(3, bx.bin_length));
    }

    #[test]
    fn one_step_without_noise_is_empirical_mean() {
        let f = gaussian_mean_family(2).unwrap();
        let raw = Dataset::from_rows(2, &[vec![1.0, 0.0], vec![3.0, 2.0]]).unwrap();
        let data = preprocess(raw.rows(), 2, &SurvivalSet::All, 2, &[0.0, 0.0], 0).unwrap();
        let b = PrivacyBudget::new(0.5, 1e-6).unwrap();
        let mut rng = StdRng::seed_from_u64(0);
        let mut ledger = BudgetLedger::new();
        let (mean, sigma) =
            warm_start_one_step(&f, &data, 4.0, 0.5, &b, C_WS, NoiseMode::test_mode().unwrap(), &mut rng, &mut ledger, "w")
                .unwrap();
        assert_eq!(mean.0, vec![2.0, 1.0]);
        let sens = 2.0 * (2f64.sqrt() / 0.5 + 4.0) / 2.0;
        assert_abs_diff_eq!(sigma, 2.0 * sens * (1.25e6f64).ln() / 0.5, epsilon = 1e-9);
    }

    #[test]
    fn recursive_warm_start_charges_each_step() {
        let f = gaussian_mean_family(2).unwrap();
        let b = PrivacyBudget::new(0.5, 1e-6).unwrap();
        let raw = gaussian_rows(&[3.0, 0.0], 2000, 5);
        let mut ledger = BudgetLedger::new();
        let out = recursive_warm_start(
            &f,
            raw.view(),
            &b,
            &[0.0, 0.0],
            8.0,
            0.5,
            500,
            &SurvivalSet::All,
            NoiseMode::test_mode().unwrap(),
            3,
            &mut ledger,
        )
        .unwrap();
        let v = warm_start_halvings(8.0, 2);
        assert_eq!(ledger.entries().len(), v + 1);
        assert_eq!(out.radii.len(), v + 1);
        assert!(distance(&out.theta, &[3.0, 0.0]) < 1.0);
        assert!(out.drift_flags.iter().all(|d| !d));
    }
}
