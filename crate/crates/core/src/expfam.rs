//! Exponential families `q(x) ∝ h(x) exp(<theta, T(x)>)` described by their
//! statistic, a sampler, the moment-matching map and the parameter space.
//!
//! Two Gaussian instances are provided: the unit-covariance mean family and
//! the zero-mean precision family.

use std::fmt;
use std::ops::{Deref, DerefMut};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::error::{ensure_finite, Error, Result};
use crate::gaussian::matrix::{self, packed_len};
use crate::truncation::{rejection_sample_truncated, SurvivalSet};

/// Writes `T(x)` into the output slice.
pub type StatisticFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// Draws one point of `q_theta` into the output slice.
pub type SamplerFn = Arc<dyn Fn(&[f64], &mut StdRng, &mut [f64]) -> Result<()> + Send + Sync>;
/// Maps a mean statistic to the natural parameter with that mean.
pub type MomentMatchFn = Arc<dyn Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync>;
/// Returns a data point whose statistic is (close to) the given one.
pub type PreimageFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

macro_rules! coord_vec {
    ($name:ident, $doc:literal) => {
        #[doc = $doc]
        #[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
        pub struct $name(pub Vec<f64>);

        impl Deref for $name {
            type Target = [f64];
            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl DerefMut for $name {
            fn deref_mut(&mut self) -> &mut [f64] {
                &mut self.0
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(v: Vec<f64>) -> Self {
                Self(v)
            }
        }

        impl $name {
            pub fn zeros(m: usize) -> Self {
                Self(vec![0.0; m])
            }

            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }
        }
    };
}

coord_vec!(ParamVec, "Natural parameter coordinates.");
coord_vec!(SuffStatVec, "Sufficient-statistic coordinates.");

/// Euclidean distance between two coordinate slices.
pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Closed convex parameter space.
#[derive(Clone, Debug, PartialEq)]
pub enum ThetaSpace {
    All,
    Ball { center: Vec<f64>, radius: f64 },
    /// Packed symmetric matrices with spectrum inside `[lower, upper]`.
    SpectralBox { d: usize, lower: f64, upper: f64 },
}

impl ThetaSpace {
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        match self {
            ThetaSpace::All => v.to_vec(),
            ThetaSpace::Ball { center, radius } => project_ball(v, center, *radius),
            ThetaSpace::SpectralBox { d, lower, upper } => {
                let m = matrix::unpack(v, *d);
                match matrix::clamp_spectrum(&m, *lower, *upper) {
                    Ok(c) => matrix::pack(&c),
                    Err(_) => matrix::pack(&(DMatrix::identity(*d, *d) * *lower)),
                }
            }
        }
    }

    /// Membership with an absolute slack `tol`.
    pub fn contains(&self, v: &[f64], tol: f64) -> bool {
        match self {
            ThetaSpace::All => v.iter().all(|x| x.is_finite()),
            ThetaSpace::Ball { center, radius } => distance(v, center) <= radius + tol,
            ThetaSpace::SpectralBox { d, lower, upper } => {
                match matrix::sym_eig(&matrix::unpack(v, *d)) {
                    Ok((w, _)) => w[0] >= lower - tol && w[w.len() - 1] <= upper + tol,
                    Err(_) => false,
                }
            }
        }
    }
}

/// Euclidean projection onto the closed ball `B(center, radius)`.
pub fn project_ball(v: &[f64], center: &[f64], radius: f64) -> Vec<f64> {
    let dist = distance(v, center);
    if dist <= radius {
        return v.to_vec();
    }
    let scale = radius / dist;
    v.iter().zip(center).map(|(x, c)| c + (x - c) * scale).collect()
}

/// Which built-in family a `FamilySpec` was created from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FamilyKind {
    GaussianMean,
    GaussianPrecision,
    Custom,
}

/// An exponential family together with the constants the estimators need.
#[derive(Clone)]
pub struct FamilySpec {
    /// Statistic dimension.
    pub m: usize,
    /// Data dimension.
    pub d: usize,
    /// Polynomial degree of the statistic.
    pub degree_k: u32,
    /// Lower spectral bound of the statistic covariance.
    pub lambda: f64,
    /// Interiority margin of the parameter space.
    pub eta: f64,
    pub theta_space: ThetaSpace,
    pub kind: FamilyKind,
    statistic: StatisticFn,
    sampler: SamplerFn,
    moment_match: MomentMatchFn,
    robust_moment_match: Option<MomentMatchFn>,
    preimage: Option<PreimageFn>,
}

impl fmt::Debug for FamilySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FamilySpec")
            .field("kind", &self.kind)
            .field("m", &self.m)
            .field("d", &self.d)
            .field("degree_k", &self.degree_k)
            .field("lambda", &self.lambda)
            .field("eta", &self.eta)
            .field("theta_space", &self.theta_space)
            .finish()
    }
}

impl FamilySpec {
    /// A user-supplied family. The sampler must draw exactly from `q_theta`.
    #[allow(clippy::too_many_arguments)]
    pub fn custom(
        m: usize,
        d: usize,
        degree_k: u32,
        lambda: f64,
        eta: f64,
        theta_space: ThetaSpace,
        statistic: StatisticFn,
        sampler: SamplerFn,
        moment_match: MomentMatchFn,
    ) -> Result<Self> {
        if m == 0 || d == 0 {
            return Err(Error::InvalidDimension("family dimensions must be positive".into()));
        }
        check_unit_interval(lambda, "lambda")?;
        check_unit_interval(eta, "eta")?;
        Ok(Self {
            m,
            d,
            degree_k,
            lambda,
            eta,
            theta_space,
            kind: FamilyKind::Custom,
            statistic,
            sampler,
            moment_match,
            robust_moment_match: None,
            preimage: None,
        })
    }

    /// Supplies a map from statistics to data points, used to build dummy
    /// points for padding.
    pub fn with_preimage(mut self, preimage: PreimageFn) -> Self {
        self.preimage = Some(preimage);
        self
    }

    pub fn statistic_into(&self, x: &[f64], out: &mut [f64]) {
        (self.statistic)(x, out)
    }

    pub fn statistic(&self, x: &[f64]) -> SuffStatVec {
        let mut out = vec![0.0; self.m];
        (self.statistic)(x, &mut out);
        SuffStatVec(out)
    }

    pub fn statistic_fn(&self) -> StatisticFn {
        Arc::clone(&self.statistic)
    }

    pub fn sample_into(&self, theta: &[f64], rng: &mut StdRng, out: &mut [f64]) -> Result<()> {
        (self.sampler)(theta, rng, out)
    }

    pub fn sample(&self, theta: &[f64], rng: &mut StdRng) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.d];
        (self.sampler)(theta, rng, &mut out)?;
        Ok(out)
    }

    pub fn moment_match(&self, tau: &[f64]) -> Result<ParamVec> {
        if tau.len() != self.m {
            return Err(Error::InvalidDimension(format!("statistic has length {}, expected {}", tau.len(), self.m)));
        }
        ensure_finite(tau, "moment_match")?;
        (self.moment_match)(tau).map(ParamVec)
    }

    /// Moment matching that always lands in the parameter space: statistics
    /// outside the valid range are first pulled back into it.
    pub fn moment_match_projected(&self, tau: &[f64]) -> Result<ParamVec> {
        ensure_finite(tau, "moment_match_projected")?;
        match &self.robust_moment_match {
            Some(f) => f(tau).map(ParamVec),
            None => Ok(self.project(&self.moment_match(tau)?)),
        }
    }

    pub fn project(&self, v: &[f64]) -> ParamVec {
        ParamVec(self.theta_space.project(v))
    }

    /// A data point whose statistic is as close as the family allows to `tau`.
    pub fn preimage(&self, tau: &[f64]) -> Option<Vec<f64>> {
        self.preimage.as_ref().map(|f| f(tau))
    }
}

fn check_unit_interval(v: f64, name: &str) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} must lie in (0, 1], got {v}")))
    }
}

/// `N(mu, I)` in natural parameter `mu` with statistic `T(x) = x`.
pub fn gaussian_mean_family(d: usize) -> Result<FamilySpec> {
    if d == 0 {
        return Err(Error::InvalidDimension("d must be at least 1".into()));
    }
    let statistic: StatisticFn = Arc::new(|x: &[f64], out: &mut [f64]| out.copy_from_slice(x));
    let sampler: SamplerFn = Arc::new(|theta: &[f64], rng: &mut StdRng, out: &mut [f64]| {
        for (o, mu) in out.iter_mut().zip(theta) {
            let z: f64 = rng.sample(StandardNormal);
            *o = mu + z;
        }
        Ok(())
    });
    let moment_match: MomentMatchFn = Arc::new(|tau: &[f64]| Ok(tau.to_vec()));
    let mut spec = FamilySpec::custom(d, d, 1, 1.0, 1.0, ThetaSpace::All, statistic, sampler, moment_match)?;
    spec.kind = FamilyKind::GaussianMean;
    Ok(spec.with_preimage(Arc::new(|tau: &[f64]| tau.to_vec())))
}

/// `N(0, M^{-1})` in natural parameter `M` (packed), statistic
/// `T(x) = packed(-x x^T / 2)` and parameter space `{7 I <= M <= (2/lambda) I}`.
///
/// `lambda` is the lower spectral bound of the covariance; the family's own
/// `lambda` constant becomes `min(lambda^2, sqrt(lambda)) / 4`.
pub fn gaussian_precision_family(d: usize, lambda: f64) -> Result<FamilySpec> {
    if d == 0 {
        return Err(Error::InvalidDimension("d must be at least 1".into()));
    }
    if !(lambda > 0.0 && lambda < 0.125) {
        return Err(Error::InvalidParameter(format!("lambda must lie in (0, 1/8), got {lambda}")));
    }
    let m = packed_len(d);
    let lower = 7.0;
    let upper = 2.0 / lambda;

    let statistic: StatisticFn = Arc::new(move |x: &[f64], out: &mut [f64]| {
        let mut k = 0;
        for i in 0..d {
            for j in i..d {
                out[k] = if i == j { -0.5 * x[i] * x[i] } else { -std::f64::consts::FRAC_1_SQRT_2 * x[i] * x[j] };
                k += 1;
            }
        }
    });
    let sampler: SamplerFn = Arc::new(move |theta: &[f64], rng: &mut StdRng, out: &mut [f64]| {
        let root = matrix::inv_sqrt(&matrix::unpack(theta, d))?;
        let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        out.copy_from_slice((root * z).as_slice());
        Ok(())
    });
    let moment_match: MomentMatchFn = Arc::new(move |tau: &[f64]| {
        let sigma = matrix::unpack(tau, d) * -2.0;
        Ok(matrix::pack(&matrix::inv_pd(&sigma)?))
    });
    let robust: MomentMatchFn = Arc::new(move |tau: &[f64]| {
        let sigma = matrix::unpack(tau, d) * -2.0;
        let clamped = matrix::clamp_spectrum(&sigma, 1.0 / upper, 1.0 / lower)?;
        Ok(matrix::pack(&matrix::inv_pd(&clamped)?))
    });
    let direction = vec![1.0 / (d as f64).sqrt(); d];
    let dir_stat = {
        let u = DVector::from_vec(direction.clone());
        matrix::pack(&(&u * u.transpose()))
    };
    let preimage: PreimageFn = Arc::new(move |tau: &[f64]| {
        let proj: f64 = dir_stat.iter().zip(tau).map(|(p, t)| p * t).sum();
        let t = (-2.0 * proj).max(0.0);
        direction.iter().map(|u| u * t.sqrt()).collect()
    });

    let theta_space = ThetaSpace::SpectralBox { d, lower, upper };
    let family_lambda = lambda.powi(2).min(lambda.sqrt()) / 4.0;
    let mut spec = FamilySpec::custom(m, d, 2, family_lambda, 1.0, theta_space, statistic, sampler, moment_match)?;
    spec.kind = FamilyKind::GaussianPrecision;
    spec.robust_moment_match = Some(robust);
    Ok(spec.with_preimage(preimage))
}

/// Monte-Carlo mean of the statistic with per-coordinate standard errors.
#[derive(Clone, Debug)]
pub struct McMoments {
    pub mean: SuffStatVec,
    pub std_err: Vec<f64>,
    pub covariance: DMatrix<f64>,
}

/// Monte-Carlo moments of `T(y)` for `y ~ q_theta` truncated to `s`, from
/// `n_mc` accepted draws. Deterministic given `seed`.
pub fn suff_stat_moments_mc(
    family: &FamilySpec,
    theta: &[f64],
    s: &SurvivalSet,
    n_mc: usize,
    cap: u64,
    seed: u64,
) -> Result<McMoments> {
    if n_mc < 2 {
        return Err(Error::InvalidParameter("n_mc must be at least 2".into()));
    }
    let m = family.m;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut y = vec![0.0; family.d];
    let mut t = vec![0.0; m];
    let mut mean = vec![0.0; m];
    let mut m2 = DMatrix::<f64>::zeros(m, m);
    for k in 0..n_mc {
        rejection_sample_truncated(family, theta, s, cap, &mut rng, &mut y)?;
        family.statistic_into(&y, &mut t);
        let w = 1.0 / (k + 1) as f64;
        let delta: Vec<f64> = t.iter().zip(&mean).map(|(a, b)| a - b).collect();
        for i in 0..m {
            mean[i] += delta[i] * w;
        }
        for i in 0..m {
            let di = t[i] - mean[i];
            for j in 0..m {
                m2[(i, j)] += delta[j] * di;
            }
        }
    }
    let covariance = matrix::symmetrize(&(m2 / (n_mc - 1) as f64));
    let std_err = (0..m).map(|i| (covariance[(i, i)] / n_mc as f64).sqrt()).collect();
    Ok(McMoments { mean: SuffStatVec(mean), std_err, covariance })
}

/// Monte-Carlo estimate of `E[T(y)]` for `y ~ q_theta` truncated to `s`.
pub fn mean_suff_stat_mc(
    family: &FamilySpec,
    theta: &[f64],
    s: &SurvivalSet,
    n_mc: usize,
    cap: u64,
    seed: u64,
) -> Result<SuffStatVec> {
    suff_stat_moments_mc(family, theta, s, n_mc, cap, seed).map(|m| m.mean)
}
