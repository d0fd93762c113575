//! Survival sets, the padding/truncation preprocessing that keeps neighbouring
//! datasets neighbouring, and rejection sampling from truncated families.

use std::fmt;
use std::sync::Arc;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::expfam::{distance, norm, FamilySpec, StatisticFn};

pub type PredicateFn = Arc<dyn Fn(&[f64]) -> bool + Send + Sync>;

/// Multiplier in [`required_raw_samples`].
pub const RAW_SAMPLE_FACTOR: f64 = 4.0;
/// Multiplier in [`default_rejection_cap`].
pub const REJECTION_CAP_FACTOR: f64 = 200.0;

/// Row-major collection of points in `R^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    d: usize,
    values: Vec<f64>,
}

impl Dataset {
    pub fn new(d: usize, values: Vec<f64>) -> Result<Self> {
        if d == 0 || values.len() % d != 0 {
            return Err(Error::InvalidDimension(format!("{} values do not form rows of length {d}", values.len())));
        }
        Ok(Self { d, values })
    }

    pub fn empty(d: usize) -> Self {
        Self { d, values: Vec::new() }
    }

    pub fn with_capacity(d: usize, rows: usize) -> Self {
        Self { d, values: Vec::with_capacity(d * rows) }
    }

    pub fn from_rows(d: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut out = Self::with_capacity(d, rows.len());
        for r in rows {
            out.push(r)?;
        }
        Ok(out)
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.d {
            return Err(Error::InvalidDimension(format!("row of length {} in a {}-dimensional dataset", row.len(), self.d)));
        }
        self.values.extend_from_slice(row);
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.d)
    }

    /// Rows `start..end` without copying.
    pub fn row_range(&self, start: usize, end: usize) -> std::slice::ChunksExact<'_, f64> {
        self.values[start * self.d..end * self.d].chunks_exact(self.d)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Applies `f` to every row, producing rows of dimension `d_out`.
    pub fn map_rows(&self, d_out: usize, mut f: impl FnMut(&[f64], &mut [f64])) -> Dataset {
        let mut values = vec![0.0; self.len() * d_out];
        for (src, dst) in self.rows().zip(values.chunks_exact_mut(d_out)) {
            f(src, dst);
        }
        Dataset { d: d_out, values }
    }
}

/// Borrowed rows of a [`Dataset`].
#[derive(Clone, Copy, Debug)]
pub struct DataView<'a> {
    d: usize,
    values: &'a [f64],
}

impl<'a> DataView<'a> {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'a, f64> {
        self.values.chunks_exact(self.d)
    }

    pub fn values(&self) -> &'a [f64] {
        self.values
    }

    pub fn slice(&self, start: usize, end: usize) -> DataView<'a> {
        DataView { d: self.d, values: &self.values[start * self.d..end * self.d] }
    }
}

impl Dataset {
    pub fn view(&self) -> DataView<'_> {
        DataView { d: self.d, values: &self.values }
    }

    /// Rows `start..end` as a borrowed view.
    pub fn view_range(&self, start: usize, end: usize) -> DataView<'_> {
        self.view().slice(start, end)
    }
}

/// Membership predicate over data space.
#[derive(Clone)]
pub enum SurvivalSet {
    All,
    /// `{x : ||T(x) - center|| <= radius}`.
    StatBall { center: Vec<f64>, radius: f64, statistic: StatisticFn },
    /// `{x : ||x|| <= radius}`.
    DataBall { radius: f64 },
    Predicate(PredicateFn),
    Intersection(Vec<SurvivalSet>),
}

impl fmt::Debug for SurvivalSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SurvivalSet::All => write!(f, "All"),
            SurvivalSet::StatBall { center, radius, .. } => {
                f.debug_struct("StatBall").field("center", center).field("radius", radius).finish()
            }
            SurvivalSet::DataBall { radius } => f.debug_struct("DataBall").field("radius", radius).finish(),
            SurvivalSet::Predicate(_) => write!(f, "Predicate"),
            SurvivalSet::Intersection(parts) => f.debug_list().entries(parts).finish(),
        }
    }
}

impl SurvivalSet {
    pub fn stat_ball(family: &FamilySpec, center: Vec<f64>, radius: f64) -> Result<Self> {
        if center.len() != family.m {
            return Err(Error::InvalidDimension("statistic ball centre has the wrong length".into()));
        }
        if !(radius >= 0.0 && radius.is_finite()) {
            return Err(Error::InvalidParameter(format!("ball radius must be finite and non-negative, got {radius}")));
        }
        Ok(SurvivalSet::StatBall { center, radius, statistic: family.statistic_fn() })
    }

    pub fn data_ball(radius: f64) -> Result<Self> {
        if !(radius >= 0.0 && radius.is_finite()) {
            return Err(Error::InvalidParameter(format!("ball radius must be finite and non-negative, got {radius}")));
        }
        Ok(SurvivalSet::DataBall { radius })
    }

    pub fn predicate(f: PredicateFn) -> Self {
        SurvivalSet::Predicate(f)
    }

    pub fn intersect(self, other: SurvivalSet) -> SurvivalSet {
        match (self, other) {
            (SurvivalSet::All, s) | (s, SurvivalSet::All) => s,
            (SurvivalSet::Intersection(mut a), SurvivalSet::Intersection(b)) => {
                a.extend(b);
                SurvivalSet::Intersection(a)
            }
            (SurvivalSet::Intersection(mut a), s) | (s, SurvivalSet::Intersection(mut a)) => {
                a.push(s);
                SurvivalSet::Intersection(a)
            }
            (a, b) => SurvivalSet::Intersection(vec![a, b]),
        }
    }

    pub fn is_all(&self) -> bool {
        matches!(self, SurvivalSet::All)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            SurvivalSet::All => true,
            SurvivalSet::StatBall { center, radius, statistic } => {
                let mut t = vec![0.0; center.len()];
                statistic(x, &mut t);
                distance(&t, center) <= *radius
            }
            SurvivalSet::DataBall { radius } => norm(x) <= *radius,
            SurvivalSet::Predicate(f) => f(x),
            SurvivalSet::Intersection(parts) => parts.iter().all(|p| p.contains(x)),
        }
    }

    /// Membership when the statistic of `x` under `stat_fn` is already known.
    pub(crate) fn contains_with_stat(&self, x: &[f64], tx: &[f64], stat_fn: &StatisticFn) -> bool {
        match self {
            SurvivalSet::StatBall { center, radius, statistic } if Arc::ptr_eq(statistic, stat_fn) => {
                distance(tx, center) <= *radius
            }
            SurvivalSet::Intersection(parts) => parts.iter().all(|p| p.contains_with_stat(x, tx, stat_fn)),
            other => other.contains(x),
        }
    }

    /// The first statistic ball in the set, if any.
    pub fn stat_ball_parts(&self) -> Option<(&[f64], f64)> {
        match self {
            SurvivalSet::StatBall { center, radius, .. } => Some((center, *radius)),
            SurvivalSet::Intersection(parts) => parts.iter().find_map(|p| p.stat_ball_parts()),
            _ => None,
        }
    }
}

/// Radius `sqrt(m / (1 - rho)) + 2 R` of the statistic ball used by DP-SGD.
pub fn sgd_survival_radius(m: usize, rho: f64, r: f64) -> Result<f64> {
    check_open_unit(rho, "rho")?;
    Ok((m as f64 / (1.0 - rho)).sqrt() + 2.0 * r)
}

/// Radius `sqrt(m) / (1 - rho) + R` of the warm-start statistic ball.
pub fn warm_survival_radius(m: usize, rho: f64, r: f64) -> Result<f64> {
    check_open_unit(rho, "rho")?;
    Ok((m as f64).sqrt() / (1.0 - rho) + r)
}

/// Statistic ball around `tau0` with radius [`sgd_survival_radius`].
pub fn make_sgd_survival_set(family: &FamilySpec, tau0: &[f64], rho: f64, r: f64) -> Result<SurvivalSet> {
    if r < 1.0 {
        return Err(Error::InvalidParameter(format!("warm-start radius must be at least 1, got {r}")));
    }
    let radius = sgd_survival_radius(family.m, rho, r)?;
    SurvivalSet::stat_ball(family, tau0.to_vec(), radius)
}

fn check_open_unit(v: f64, name: &str) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} must lie in (0, 1), got {v}")))
    }
}

/// Raw sample count `ceil(4 n log(1/beta) / rho)` that yields at least `n`
/// survivors of a set with mass `rho` with probability `1 - beta`.
pub fn required_raw_samples(n: usize, rho: f64, beta: f64) -> Result<usize> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidParameter(format!("rho must lie in (0, 1], got {rho}")));
    }
    check_open_unit(beta, "beta")?;
    Ok((RAW_SAMPLE_FACTOR * n as f64 * (1.0 / beta).ln() / rho).ceil() as usize)
}

/// Default attempt cap `200 log(2/beta) / rho` for rejection sampling.
pub fn default_rejection_cap(beta: f64, rho: f64) -> u64 {
    (REJECTION_CAP_FACTOR * (2.0 / beta).ln() / rho).ceil().max(1.0) as u64
}

/// Exactly `n` points, all inside the survival set they were filtered by.
#[derive(Clone, Debug)]
pub struct TruncatedDataset {
    pub points: Dataset,
    pub n: usize,
    pub seed: u64,
    fill_count: usize,
}

impl TruncatedDataset {
    /// Number of dummy rows added to reach `n`.
    pub fn fill_count(&self) -> usize {
        self.fill_count
    }
}

/// Keeps the members of `s` in input order, pads with copies of `dummy` or
/// keeps only the first `n`, then shuffles uniformly with `seed`.
pub fn preprocess<'a, I>(raw: I, d: usize, s: &SurvivalSet, n: usize, dummy: &[f64], seed: u64) -> Result<TruncatedDataset>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    if n == 0 {
        return Err(Error::InvalidParameter("n must be at least 1".into()));
    }
    if dummy.len() != d {
        return Err(Error::InvalidDimension("dummy point has the wrong dimension".into()));
    }
    if !s.contains(dummy) {
        return Err(Error::InvalidParameter("dummy point lies outside the survival set".into()));
    }
    let mut kept = Dataset::with_capacity(d, n);
    for x in raw {
        if kept.len() == n {
            break;
        }
        if s.contains(x) {
            kept.push(x)?;
        }
    }
    let fill_count = n - kept.len();
    for _ in 0..fill_count {
        kept.push(dummy)?;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut StdRng::seed_from_u64(seed));
    let mut points = Dataset::with_capacity(d, n);
    for &i in &order {
        points.push(kept.row(i))?;
    }
    Ok(TruncatedDataset { points, n, seed, fill_count })
}

/// Default dummy point for a set: a preimage of a statistic-ball centre when
/// the family provides one, otherwise the origin.
pub fn default_dummy(family: &FamilySpec, s: &SurvivalSet) -> Vec<f64> {
    let origin = vec![0.0; family.d];
    let candidate = s.stat_ball_parts().and_then(|(center, _)| family.preimage(center));
    match candidate {
        Some(x) if s.contains(&x) => x,
        _ => origin,
    }
}

/// Draws from `q_theta` until a draw lands in `s`; writes it to `out` and
/// returns the number of attempts used.
pub fn rejection_sample_truncated(
    family: &FamilySpec,
    theta: &[f64],
    s: &SurvivalSet,
    cap: u64,
    rng: &mut StdRng,
    out: &mut [f64],
) -> Result<u64> {
    if cap == 0 {
        return Err(Error::InvalidParameter("rejection cap must be at least 1".into()));
    }
    for attempt in 1..=cap {
        family.sample_into(theta, rng, out)?;
        if s.contains(out) {
            return Ok(attempt);
        }
    }
    Err(Error::RejectionCapExceeded { cap })
}

/// As [`rejection_sample_truncated`], also writing the accepted statistic.
pub(crate) fn rejection_sample_with_stat(
    family: &FamilySpec,
    stat_fn: &StatisticFn,
    theta: &[f64],
    s: &SurvivalSet,
    cap: u64,
    rng: &mut StdRng,
    y: &mut [f64],
    ty: &mut [f64],
) -> Result<u64> {
    for attempt in 1..=cap {
        family.sample_into(theta, rng, y)?;
        stat_fn(y, ty);
        if s.contains_with_stat(y, ty, stat_fn) {
            return Ok(attempt);
        }
    }
    Err(Error::RejectionCapExceeded { cap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::gaussian_mean_family;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn line(points: &[f64]) -> Dataset {
        Dataset::new(1, points.to_vec()).unwrap()
    }

    fn positive() -> SurvivalSet {
        SurvivalSet::predicate(Arc::new(|x: &[f64]| x[0] > 0.0))
    }

    fn sorted(ds: &Dataset) -> Vec<f64> {
        let mut v = ds.values().to_vec();
        v.sort_by(f64::total_cmp);
        v
    }

    #[test]
    fn sgd_radius_examples() {
        assert_abs_diff_eq!(sgd_survival_radius(4, 0.5, 1.0).unwrap(), 8f64.sqrt() + 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sgd_survival_radius(1, 0.75, 1.0).unwrap(), 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sgd_survival_radius(9, 0.5, 2.0).unwrap(), 18f64.sqrt() + 4.0, epsilon = 1e-12);
        assert!(sgd_survival_radius(4, 1.0, 1.0).is_err());
        assert!(sgd_survival_radius(4, 0.0, 1.0).is_err());
    }

    #[test]
    fn pads_with_dummies() {
        let raw = line(&[1.0, -1.0, 2.0, -3.0, 3.0]);
        let out = preprocess(raw.rows(), 1, &positive(), 4, &[0.5], 1).unwrap();
        assert_eq!(out.points.len(), 4);
        assert_eq!(out.fill_count(), 1);
        assert_eq!(sorted(&out.points), vec![0.5, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn keeps_first_survivors() {
        let raw = line(&[1.0, 2.0, -1.0, 3.0, 4.0, -2.0, 5.0, 6.0]);
        let out = preprocess(raw.rows(), 1, &positive(), 4, &[0.5], 2).unwrap();
        assert_eq!(out.fill_count(), 0);
        assert_eq!(sorted(&out.points), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn rejects_dummy_outside() {
        let raw = line(&[1.0]);
        assert!(preprocess(raw.rows(), 1, &positive(), 2, &[-1.0], 0).is_err());
    }

    #[test]
    fn shuffle_is_seeded() {
        let raw = line(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let a = preprocess(raw.rows(), 1, &positive(), 6, &[0.5], 9).unwrap();
        let b = preprocess(raw.rows(), 1, &positive(), 6, &[0.5], 9).unwrap();
        assert_eq!(a.points, b.points);
    }

    #[test]
    fn raw_sample_formula() {
        assert!(required_raw_samples(100, 1.0, 0.5).unwrap() >= 100);
        let n = required_raw_samples(100, 0.5, 0.1).unwrap();
        assert_eq!(n, (4.0 * 100.0 * 10f64.ln() / 0.5_f64).ceil() as usize);
        let small = required_raw_samples(100, 1e-6, 0.1).unwrap();
        assert!(small > 100_000_000);
        assert!(required_raw_samples(10, 0.0, 0.1).is_err());
    }

    #[test]
    fn raw_samples_yield_enough_survivors() {
        let n = 100;
        let big_n = required_raw_samples(n, 0.5, 0.1).unwrap();
        let mut rng = StdRng::seed_from_u64(21);
        let ok = (0..500)
            .filter(|_| (0..big_n).filter(|_| rng.random::<f64>() < 0.5).count() >= n)
            .count();
        assert!(ok >= 450);
    }

    #[test]
    fn rejection_all_space_uses_one_attempt() {
        let f = gaussian_mean_family(2).unwrap();
        let mut rng = StdRng::seed_from_u64(1);
        let mut y = [0.0; 2];
        assert_eq!(rejection_sample_truncated(&f, &[0.0, 0.0], &SurvivalSet::All, 1, &mut rng, &mut y).unwrap(), 1);
    }

    #[test]
    fn rejection_half_line_acceptance() {
        let f = gaussian_mean_family(1).unwrap();
        let s = positive();
        let mut rng = StdRng::seed_from_u64(2);
        let mut y = [0.0];
        let calls = 10_000;
        let mut attempts = 0;
        for _ in 0..calls {
            attempts += rejection_sample_truncated(&f, &[0.0], &s, 1000, &mut rng, &mut y).unwrap();
            assert!(y[0] > 0.0);
        }
        let rate = calls as f64 / attempts as f64;
        assert!((rate - 0.5).abs() < 0.02, "acceptance rate {rate}");
    }

    #[test]
    fn rejection_cap_is_reported() {
        let f = gaussian_mean_family(1).unwrap();
        let never = SurvivalSet::predicate(Arc::new(|_: &[f64]| false));
        let mut rng = StdRng::seed_from_u64(3);
        let mut y = [0.0];
        assert!(matches!(
            rejection_sample_truncated(&f, &[0.0], &never, 5, &mut rng, &mut y),
            Err(Error::RejectionCapExceeded { cap: 5 })
        ));
    }

    #[test]
    fn attempt_counts_respect_geometric_tail() {
        let f = gaussian_mean_family(1).unwrap();
        let s = SurvivalSet::predicate(Arc::new(|x: &[f64]| x[0] > 1.0));
        let mass = 0.158_655_253_931_457_05;
        let beta = 0.1;
        let bound = 2.0 * (1.0 / beta as f64).ln() / mass;
        let mut rng = StdRng::seed_from_u64(4);
        let mut y = [0.0];
        let trials = 2000;
        let within = (0..trials)
            .filter(|_| rejection_sample_truncated(&f, &[0.0], &s, 100_000, &mut rng, &mut y).unwrap() as f64 <= bound)
            .count();
        assert!(within as f64 >= (1.0 - beta) * trials as f64);
    }

    #[test]
    fn default_dummy_is_inside() {
        let f = gaussian_mean_family(3).unwrap();
        let s = make_sgd_survival_set(&f, &[1.0, 2.0, 3.0], 0.5, 1.0).unwrap();
        let x = default_dummy(&f, &s);
        assert_eq!(x, vec![1.0, 2.0, 3.0]);
        assert!(s.contains(&x));
    }

    #[test]
    fn intersection_flattens() {
        let a = SurvivalSet::data_ball(1.0).unwrap();
        let s = SurvivalSet::All.intersect(a.clone()).intersect(positive());
        assert!(matches!(&s, SurvivalSet::Intersection(p) if p.len() == 2));
        assert!(s.contains(&[0.5]));
        assert!(!s.contains(&[-0.5]));
        assert!(!s.contains(&[1.5]));
    }
}
