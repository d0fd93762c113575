//! Independent numerical oracles shared by the integration tests.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use truncdp::Dataset;

/// Moments of `N(mean, I_d)` conditioned on the ball `|x - center| <= radius`.
#[derive(Clone, Debug)]
pub struct BallMoments {
    pub mean: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub mass: f64,
}

fn simpson(n_intervals: usize, a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
    let k = n_intervals + n_intervals % 2;
    let h = (b - a) / k as f64;
    let mut acc = f(a) + f(b);
    for i in 1..k {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + h * i as f64);
    }
    acc * h / 3.0
}

/// Two-dimensional quadrature in the axial coordinate `t` along
/// `mean - center` and the perpendicular radius `s`: `t ~ N(a, 1)` with
/// `a = |mean - center|`, and `s` has the chi density with `d - 1` degrees of
/// freedom.
pub fn gaussian_ball_moments(mean: &[f64], center: &[f64], radius: f64) -> BallMoments {
    let d = mean.len();
    let offset: Vec<f64> = mean.iter().zip(center).map(|(m, c)| m - c).collect();
    let a = offset.iter().map(|v| v * v).sum::<f64>().sqrt();
    let u: Vec<f64> = if a > 0.0 {
        offset.iter().map(|v| v / a).collect()
    } else {
        let mut e = vec![0.0; d];
        e[0] = 1.0;
        e
    };
    let k = d - 1;
    let phi = |t: f64| (-(t - a) * (t - a) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let full = if k == 0 { 1.0 } else { simpson(4000, 0.0, 12.0f64.max(radius), |s| s.powi(k as i32 - 1) * (-s * s / 2.0).exp()) };
    let perp = |t: f64, power: i32| -> f64 {
        let top = (radius * radius - t * t).max(0.0).sqrt();
        if k == 0 {
            return if power == 0 { 1.0 } else { 0.0 };
        }
        let dens = |s: f64| s.powi(k as i32 - 1 + power) * (-s * s / 2.0).exp();
        simpson(800, 0.0, top, dens) / full
    };
    let grid = 1600;
    let z0 = simpson(grid, -radius, radius, |t| phi(t) * perp(t, 0));
    let z1 = simpson(grid, -radius, radius, |t| t * phi(t) * perp(t, 0));
    let z2 = simpson(grid, -radius, radius, |t| t * t * phi(t) * perp(t, 0));
    let zs = simpson(grid, -radius, radius, |t| phi(t) * perp(t, 2));
    let et = z1 / z0;
    let var_t = z2 / z0 - et * et;
    let per_perp = if k == 0 { 0.0 } else { zs / z0 / k as f64 };
    let uu = DVector::from_vec(u.clone());
    let proj = &uu * uu.transpose();
    let covariance = &proj * var_t + (DMatrix::identity(d, d) - &proj) * per_perp;
    let mean_out = center.iter().zip(&u).map(|(c, ui)| c + ui * et).collect();
    BallMoments { mean: mean_out, covariance, mass: z0 }
}

fn project_ball(v: &[f64], center: &[f64], radius: f64) -> Vec<f64> {
    let dist = v.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    if dist <= radius {
        v.to_vec()
    } else {
        v.iter().zip(center).map(|(a, c)| c + (a - c) * radius / dist).collect()
    }
}

/// Truncated maximum-likelihood estimate of the mean of `N(theta, I)` given
/// the empirical mean of data restricted to the ball `(s_center, s_radius)`,
/// by projected gradient descent over `B(k_center, k_radius)` using the
/// quadrature mean map.
pub fn truncated_mle_oracle(
    data_mean: &[f64],
    s_center: &[f64],
    s_radius: f64,
    k_center: &[f64],
    k_radius: f64,
) -> Vec<f64> {
    let mut theta = k_center.to_vec();
    for _ in 0..400 {
        let model = gaussian_ball_moments(&theta, s_center, s_radius).mean;
        let next: Vec<f64> = theta.iter().zip(model.iter().zip(data_mean)).map(|(t, (m, x))| t - 0.8 * (m - x)).collect();
        let next = project_ball(&next, k_center, k_radius);
        let moved = next.iter().zip(&theta).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        theta = next;
        if moved < 1e-11 {
            break;
        }
    }
    theta
}

/// `rows` samples of `N(mean, I)` as a dataset.
pub fn standard_gaussian_rows(mean: &[f64], rows: usize, seed: u64) -> Dataset {
    let d = mean.len();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(rows * d);
    for _ in 0..rows {
        for m in mean {
            let z: f64 = StandardNormal.sample(&mut rng);
            values.push(m + z);
        }
    }
    Dataset::new(d, values).expect("consistent dimensions")
}

/// Uniform point on the sphere of radius `r` around `center`.
pub fn sphere_point(center: &[f64], r: f64, rng: &mut StdRng) -> Vec<f64> {
    let z: Vec<f64> = center.iter().map(|_| StandardNormal.sample(rng)).collect();
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    center.iter().zip(&z).map(|(c, v)| c + r * v / norm).collect()
}

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
