//! Privacy primitives: the Gaussian mechanism (vector and symmetric-matrix
//! forms), a stable histogram over countably many bins, and a budget ledger
//! implementing simple and parallel composition.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::rngs::StdRng;
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::gaussian::matrix;

/// An `(epsilon, delta)` pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    /// Both parameters must lie strictly inside `(0, 1)`.
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        for (v, name) in [(epsilon, "epsilon"), (delta, "delta")] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidParameter(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(Self { epsilon, delta })
    }

    /// Both parameters multiplied by `fraction`.
    pub fn scaled(&self, fraction: f64) -> Self {
        Self { epsilon: self.epsilon * fraction, delta: self.delta * fraction }
    }

    /// Both parameters divided by `k`.
    pub fn divided(&self, k: usize) -> Self {
        let k = k.max(1) as f64;
        Self { epsilon: self.epsilon / k, delta: self.delta / k }
    }
}

/// Whether mechanisms add their calibrated noise. Noise can only be switched
/// off in builds with debug assertions, so release artefacts are always
/// private.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct NoiseMode {
    disabled: bool,
}

impl NoiseMode {
    pub fn calibrated() -> Self {
        Self { disabled: false }
    }

    /// Noise-free mode for deterministic testing.
    pub fn test_mode() -> Result<Self> {
        if cfg!(debug_assertions) {
            Ok(Self { disabled: true })
        } else {
            Err(Error::Config("noise can only be disabled in debug builds".into()))
        }
    }

    pub fn is_disabled(&self) -> bool {
        self.disabled
    }

    /// Scale actually applied for a calibrated scale `sigma`.
    pub fn effective(&self, sigma: f64) -> f64 {
        if self.disabled {
            0.0
        } else {
            sigma
        }
    }
}

/// Gaussian-mechanism scale `2 * sensitivity * ln(1.25 / delta) / epsilon`.
pub fn gaussian_sigma(sensitivity: f64, budget: &PrivacyBudget) -> f64 {
    2.0 * sensitivity * (1.25 / budget.delta).ln() / budget.epsilon
}

/// Output of a Gaussian mechanism together with the scale it used.
#[derive(Clone, Debug)]
pub struct Released<T> {
    pub value: T,
    /// Calibrated scale (reported even when noise is disabled).
    pub sigma: f64,
}

/// Adds independent `N(0, sigma^2)` noise to every coordinate of `v`.
pub fn gaussian_mechanism(
    v: &[f64],
    sensitivity: f64,
    budget: &PrivacyBudget,
    noise: NoiseMode,
    rng: &mut StdRng,
) -> Result<Released<Vec<f64>>> {
    if !(sensitivity > 0.0 && sensitivity.is_finite()) {
        return Err(Error::InvalidParameter(format!("sensitivity must be positive, got {sensitivity}")));
    }
    ensure_finite(v, "gaussian_mechanism")?;
    let sigma = gaussian_sigma(sensitivity, budget);
    let scale = noise.effective(sigma);
    let value = v
        .iter()
        .map(|x| {
            let z: f64 = rng.sample(StandardNormal);
            x + scale * z
        })
        .collect();
    Ok(Released { value, sigma })
}

/// Adds a symmetric Gaussian matrix whose upper-triangle entries are
/// independent `N(0, sigma^2)`.
pub fn gaussian_mechanism_symmetric(
    z: &DMatrix<f64>,
    sensitivity: f64,
    budget: &PrivacyBudget,
    noise: NoiseMode,
    rng: &mut StdRng,
) -> Result<Released<DMatrix<f64>>> {
    if !matrix::is_symmetric(z, 0.0) {
        return Err(Error::NotSymmetric);
    }
    if !(sensitivity > 0.0 && sensitivity.is_finite()) {
        return Err(Error::InvalidParameter(format!("sensitivity must be positive, got {sensitivity}")));
    }
    ensure_finite(z.as_slice(), "gaussian_mechanism_symmetric")?;
    let sigma = gaussian_sigma(sensitivity, budget);
    let scale = noise.effective(sigma);
    let d = z.nrows();
    let mut out = z.clone();
    for i in 0..d {
        for j in i..d {
            let e: f64 = rng.sample(StandardNormal);
            out[(i, j)] += scale * e;
            if i != j {
                out[(j, i)] = out[(i, j)];
            }
        }
    }
    Ok(Released { value: out, sigma })
}

/// Laplace scale `2 / (n epsilon)` of the stable histogram.
pub fn histogram_laplace_scale(n: usize, budget: &PrivacyBudget) -> f64 {
    2.0 / (n as f64 * budget.epsilon)
}

/// Release threshold `2 ln(2/delta) / (n epsilon) + 1/n`.
pub fn histogram_threshold(n: usize, budget: &PrivacyBudget) -> f64 {
    let n = n as f64;
    2.0 * (2.0 / budget.delta).ln() / (n * budget.epsilon) + 1.0 / n
}

/// Sample size `ceil(8 ln(4/(beta delta))/(epsilon alpha) + ln(4/beta)/(2 alpha^2))`
/// for sup-norm accuracy `alpha` with probability `1 - beta`.
pub fn histogram_sample_size(alpha: f64, beta: f64, budget: &PrivacyBudget) -> usize {
    let a = 8.0 * (4.0 / (beta * budget.delta)).ln() / (budget.epsilon * alpha);
    let b = (4.0 / beta).ln() / (2.0 * alpha * alpha);
    (a + b).ceil() as usize
}

/// Released bins of a stable histogram.
#[derive(Clone, Debug, PartialEq)]
pub struct PrivateHistogram {
    pub bin_length: f64,
    /// Noisy masses of the released bins, keyed by bin index `j` of `[j s, (j+1) s)`.
    pub masses: BTreeMap<i64, f64>,
    pub threshold: f64,
}

impl PrivateHistogram {
    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    /// Released bin with the largest mass; ties go to the lowest index.
    pub fn argmax(&self) -> Option<(i64, f64)> {
        let mut best: Option<(i64, f64)> = None;
        for (&j, &p) in &self.masses {
            if best.is_none_or(|(_, q)| p > q) {
                best = Some((j, p));
            }
        }
        best
    }

    pub fn midpoint(&self, j: i64) -> f64 {
        (j as f64 + 0.5) * self.bin_length
    }
}

pub fn bin_index(value: f64, bin_length: f64) -> i64 {
    (value / bin_length).floor() as i64
}

/// Stable histogram: Laplace noise on every non-empty bin's empirical mass and
/// release of the bins whose noisy mass reaches [`histogram_threshold`].
pub fn private_histogram(
    values: &[f64],
    bin_length: f64,
    budget: &PrivacyBudget,
    noise: NoiseMode,
    rng: &mut StdRng,
) -> Result<PrivateHistogram> {
    if !(bin_length > 0.0 && bin_length.is_finite()) {
        return Err(Error::InvalidParameter(format!("bin length must be positive, got {bin_length}")));
    }
    ensure_finite(values, "private_histogram")?;
    let n = values.len();
    if n == 0 {
        return Ok(PrivateHistogram { bin_length, masses: BTreeMap::new(), threshold: f64::INFINITY });
    }
    if budget.delta >= 1.0 / n as f64 {
        return Err(Error::InvalidParameter(format!(
            "histogram needs delta < 1/n, got delta = {} with n = {n}",
            budget.delta
        )));
    }
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for &v in values {
        *counts.entry(bin_index(v, bin_length)).or_default() += 1;
    }
    let scale = noise.effective(histogram_laplace_scale(n, budget));
    let threshold = if noise.is_disabled() { 0.0 } else { histogram_threshold(n, budget) };
    let mut masses = BTreeMap::new();
    for (j, c) in counts {
        let e1: f64 = rng.sample(Exp1);
        let e2: f64 = rng.sample(Exp1);
        let noisy = c as f64 / n as f64 + scale * (e1 - e2);
        if noisy >= threshold {
            masses.insert(j, noisy);
        }
    }
    Ok(PrivateHistogram { bin_length, masses, threshold })
}

/// How a charge composes with the others.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Composition {
    Sequential,
    /// Charges on disjoint data sharing a group id cost their maximum.
    Parallel(u32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Charge {
    pub label: String,
    pub budget: PrivacyBudget,
    pub composition: Composition,
}

/// Records every privacy charge of a pipeline run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    limit: Option<PrivacyBudget>,
    entries: Vec<Charge>,
}

const LIMIT_SLACK: f64 = 1e-12;

impl BudgetLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// A ledger that rejects charges pushing the total above `limit`.
    pub fn with_limit(limit: PrivacyBudget) -> Self {
        Self { limit: Some(limit), entries: Vec::new() }
    }

    pub fn limit(&self) -> Option<PrivacyBudget> {
        self.limit
    }

    pub fn entries(&self) -> &[Charge] {
        &self.entries
    }

    pub fn charge(&mut self, label: impl Into<String>, budget: PrivacyBudget, composition: Composition) -> Result<()> {
        let label = label.into();
        if !(budget.epsilon > 0.0 && budget.delta > 0.0) {
            return Err(Error::InvalidParameter(format!("charge '{label}' must be positive")));
        }
        self.entries.push(Charge { label: label.clone(), budget, composition });
        if let Some(limit) = self.limit {
            let total = self.total();
            if total.epsilon > limit.epsilon * (1.0 + LIMIT_SLACK) || total.delta > limit.delta * (1.0 + LIMIT_SLACK) {
                self.entries.pop();
                return Err(Error::OverBudget(format!(
                    "charge '{label}' brings the total to ({}, {}) above the limit ({}, {})",
                    total.epsilon, total.delta, limit.epsilon, limit.delta
                )));
            }
        }
        Ok(())
    }

    /// Sum over sequential charges plus the maximum of each parallel group.
    /// Terms are added in sorted order so the total does not depend on the
    /// order of the charges.
    pub fn total(&self) -> PrivacyBudget {
        let mut eps = Vec::new();
        let mut del = Vec::new();
        let mut groups: BTreeMap<u32, (f64, f64)> = BTreeMap::new();
        for c in &self.entries {
            match c.composition {
                Composition::Sequential => {
                    eps.push(c.budget.epsilon);
                    del.push(c.budget.delta);
                }
                Composition::Parallel(g) => {
                    let e = groups.entry(g).or_insert((0.0, 0.0));
                    e.0 = e.0.max(c.budget.epsilon);
                    e.1 = e.1.max(c.budget.delta);
                }
            }
        }
        for (e, d) in groups.into_values() {
            eps.push(e);
            del.push(d);
        }
        PrivacyBudget { epsilon: sorted_sum(eps), delta: sorted_sum(del) }
    }
}

fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn budget(e: f64, d: f64) -> PrivacyBudget {
        PrivacyBudget::new(e, d).unwrap()
    }

    #[test]
    fn sigma_examples() {
        let b = PrivacyBudget { epsilon: 1.0, delta: 0.05 };
        assert_abs_diff_eq!(gaussian_sigma(1.0, &b), 6.437_751_649_736_401, epsilon = 1e-12);
        assert_abs_diff_eq!(gaussian_sigma(0.5, &budget(0.5, 0.05)), 2.0 * 25f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn budget_range_is_open() {
        assert!(PrivacyBudget::new(1.0, 0.1).is_err());
        assert!(PrivacyBudget::new(0.5, 0.0).is_err());
        assert!(PrivacyBudget::new(0.5, 1e-6).is_ok());
    }

    #[test]
    fn mechanism_variance_matches_sigma() {
        let mut rng = StdRng::seed_from_u64(1);
        let b = budget(0.5, 0.01);
        let calls = 100_000;
        let mut sum_sq = 0.0;
        let mut sigma = 0.0;
        for _ in 0..calls {
            let r = gaussian_mechanism(&[3.0], 0.1, &b, NoiseMode::calibrated(), &mut rng).unwrap();
            sum_sq += (r.value[0] - 3.0).powi(2);
            sigma = r.sigma;
        }
        let var = sum_sq / calls as f64;
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.05);
    }

    #[test]
    fn mechanism_rejects_non_finite() {
        let mut rng = StdRng::seed_from_u64(1);
        let r = gaussian_mechanism(&[f64::NAN], 1.0, &budget(0.5, 0.01), NoiseMode::calibrated(), &mut rng);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn symmetric_noise_is_exactly_symmetric() {
        let mut rng = StdRng::seed_from_u64(2);
        let z = DMatrix::identity(5, 5);
        let b = budget(0.5, 1e-3);
        let r = gaussian_mechanism_symmetric(&z, 1.0, &b, NoiseMode::calibrated(), &mut rng).unwrap();
        let noise = &r.value - &z;
        assert_eq!(noise, noise.transpose());
        assert_eq!(r.sigma, gaussian_sigma(1.0, &b));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(gaussian_mechanism_symmetric(&asym, 1.0, &b, NoiseMode::calibrated(), &mut rng).is_err());
    }

    #[test]
    fn symmetric_noise_spectral_norm() {
        let mut rng = StdRng::seed_from_u64(3);
        let d = 16;
        let b = budget(0.5, 1e-3);
        let sigma = gaussian_sigma(1.0, &b);
        let trials = 200;
        let ok = (0..trials)
            .filter(|_| {
                let r = gaussian_mechanism_symmetric(&DMatrix::zeros(d, d), 1.0, &b, NoiseMode::calibrated(), &mut rng)
                    .unwrap();
                matrix::spectral_norm(&r.value).unwrap() <= 3.0 * sigma * (d as f64).sqrt()
            })
            .count();
        assert!(ok as f64 >= 0.99 * trials as f64);
    }

    #[test]
    fn noiseless_histogram_counts() {
        let mut rng = StdRng::seed_from_u64(4);
        let h = private_histogram(&[0.1, 0.2, 1.5], 1.0, &budget(0.5, 0.01), NoiseMode::test_mode().unwrap(), &mut rng)
            .unwrap();
        assert_eq!(h.masses.len(), 2);
        assert_abs_diff_eq!(h.masses[&0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(h.masses[&1], 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(h.argmax().unwrap().0, 0);
    }

    #[test]
    fn empty_histogram() {
        let mut rng = StdRng::seed_from_u64(4);
        let h = private_histogram(&[], 1.0, &budget(0.5, 0.01), NoiseMode::calibrated(), &mut rng).unwrap();
        assert!(h.is_empty());
    }

    #[test]
    fn histogram_requires_small_delta() {
        let mut rng = StdRng::seed_from_u64(4);
        let r = private_histogram(&[0.0, 1.0], 1.0, &budget(0.5, 0.6), NoiseMode::calibrated(), &mut rng);
        assert!(r.is_err());
    }

    #[test]
    fn histogram_size_formula() {
        let b = budget(0.5, 1e-6);
        let expected = (8.0 * (4e7f64).ln() / 0.05 + 40f64.ln() / 0.02).ceil() as usize;
        assert_eq!(histogram_sample_size(0.1, 0.1, &b), expected);
    }

    #[test]
    fn singleton_release_probability_below_delta() {
        let n = 1000;
        let b = budget(0.5, 1e-3);
        let scale = histogram_laplace_scale(n, &b);
        let gap = histogram_threshold(n, &b) - 1.0 / n as f64;
        let p_release = 0.5 * (-gap / scale).exp();
        assert!(p_release <= b.delta);
    }

    #[test]
    fn histogram_mode_of_standard_normal() {
        let mut rng = StdRng::seed_from_u64(5);
        let b = budget(0.5, 1e-6);
        let trials = 200;
        let hits = (0..trials)
            .filter(|_| {
                let v: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
                let h = private_histogram(&v, 1.0, &b, NoiseMode::calibrated(), &mut rng).unwrap();
                matches!(h.argmax(), Some((-1, _)) | Some((0, _)))
            })
            .count();
        assert!(hits as f64 >= 0.95 * trials as f64);
    }

    #[test]
    fn ledger_compositions() {
        let mut l = BudgetLedger::new();
        l.charge("a", budget(0.1, 1e-6), Composition::Sequential).unwrap();
        l.charge("b", budget(0.1, 1e-6), Composition::Sequential).unwrap();
        let t = l.total();
        assert_abs_diff_eq!(t.epsilon, 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(t.delta, 2e-6, epsilon = 1e-20);

        let mut p = BudgetLedger::new();
        for i in 0..4 {
            p.charge(format!("chunk{i}"), budget(0.3, 1e-6), Composition::Parallel(0)).unwrap();
        }
        assert_eq!(p.total(), budget(0.3, 1e-6));
    }

    #[test]
    fn ledger_rejects_over_budget() {
        let mut l = BudgetLedger::with_limit(budget(0.5, 1e-6));
        l.charge("a", budget(0.3, 5e-7), Composition::Sequential).unwrap();
        assert!(matches!(l.charge("b", budget(0.3, 1e-7), Composition::Sequential), Err(Error::OverBudget(_))));
        assert_eq!(l.entries().len(), 1);
    }

    #[test]
    fn ledger_total_is_order_independent() {
        let charges = [0.1, 0.2, 0.3, 0.07, 0.11];
        let mut a = BudgetLedger::new();
        let mut b = BudgetLedger::new();
        for &e in &charges {
            a.charge("x", budget(e, 1e-7), Composition::Sequential).unwrap();
        }
        for &e in charges.iter().rev() {
            b.charge("x", budget(e, 1e-7), Composition::Sequential).unwrap();
        }
        assert_eq!(a.total().epsilon.to_bits(), b.total().epsilon.to_bits());
    }

    #[test]
    fn noise_mode_default_is_calibrated() {
        assert!(!NoiseMode::default().is_disabled());
        assert_eq!(NoiseMode::calibrated().effective(2.0), 2.0);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn composition(tag: u8) -> Composition {
        if tag < 2 {
            Composition::Sequential
        } else {
            Composition::Parallel(u32::from(tag % 3))
        }
    }

    proptest! {
        #[test]
        fn ledger_total_ignores_charge_order(
            charges in prop::collection::vec((1e-4f64..0.5, 1e-9f64..1e-3, 0u8..6), 1..12),
            seed in any::<u64>(),
        ) {
            let mut forward = BudgetLedger::new();
            for (i, (e, d, tag)) in charges.iter().enumerate() {
                forward.charge(format!("c{i}"), PrivacyBudget { epsilon: *e, delta: *d }, composition(*tag)).unwrap();
            }
            let mut order: Vec<usize> = (0..charges.len()).collect();
            let mut rng = <StdRng as rand::SeedableRng>::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let mut shuffled = BudgetLedger::new();
            for i in order {
                let (e, d, tag) = charges[i];
                shuffled.charge(format!("c{i}"), PrivacyBudget { epsilon: e, delta: d }, composition(tag)).unwrap();
            }
            prop_assert_eq!(forward.total(), shuffled.total());
        }

        #[test]
        fn limited_ledger_never_exceeds_limit(charges in prop::collection::vec(0.01f64..0.3, 1..20)) {
            let limit = PrivacyBudget::new(0.9, 1e-5).unwrap();
            let mut ledger = BudgetLedger::with_limit(limit);
            for (i, e) in charges.iter().enumerate() {
                let _ = ledger.charge(format!("c{i}"), PrivacyBudget { epsilon: *e, delta: 1e-7 }, Composition::Sequential);
            }
            let total = ledger.total();
            prop_assert!(total.epsilon <= limit.epsilon * (1.0 + 1e-9));
            prop_assert!(total.delta <= limit.delta * (1.0 + 1e-9));
        }
    }
}
