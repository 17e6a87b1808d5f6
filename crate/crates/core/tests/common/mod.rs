//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vlaplace::model::{sigmoid, FnMapping, GaussianPrior, GenerativeModel, LikelihoodFamily, SigmoidLinear};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| normal(rng))
}

pub fn normal_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| normal(rng))
}

/// `LLᵀ/n + floor·I` with Gaussian `L`.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let l = normal_mat(rng, n, n);
    let m = &l * l.transpose() / n as f64 + DMatrix::identity(n, n) * floor;
    (&m + m.transpose()) * 0.5
}

/// Diagonal with entries uniform in `[lo, hi)`.
pub fn random_diagonal(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| rng.random_range(lo..hi)))
}

/// `log N(y; mean, cov)` via an independent Cholesky factorization.
pub fn gaussian_log_density(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let n = y.len() as f64;
    let chol = cov.clone().cholesky().expect("covariance must be PD");
    let r = y - mean;
    let z = chol.l().solve_lower_triangular(&r).expect("triangular solve");
    let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + log_det + z.norm_squared())
}

/// Richardson-extrapolated central difference of a scalar function.
pub fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut out = DVector::zeros(x.len());
    let mut probe = x.clone();
    let central = |j: usize, h: f64, probe: &mut DVector<f64>| {
        probe[j] = x[j] + h;
        let plus = f(probe);
        probe[j] = x[j] - h;
        let minus = f(probe);
        probe[j] = x[j];
        (plus - minus) / (2.0 * h)
    };
    for j in 0..x.len() {
        let coarse = central(j, h, &mut probe);
        let fine = central(j, h / 2.0, &mut probe);
        out[j] = (4.0 * fine - coarse) / 3.0;
    }
    out
}

/// Richardson-extrapolated central-difference Jacobian of a vector function.
pub fn fd_jacobian(f: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let n_out = f(x).len();
    let mut out = DMatrix::zeros(n_out, x.len());
    let mut probe = x.clone();
    for j in 0..x.len() {
        let mut central = |h: f64| {
            probe[j] = x[j] + h;
            let plus = f(&probe);
            probe[j] = x[j] - h;
            let minus = f(&probe);
            probe[j] = x[j];
            (plus - minus) / (2.0 * h)
        };
        let coarse = central(h);
        let fine = central(h / 2.0);
        out.set_column(j, &((fine * 4.0 - coarse) / 3.0));
    }
    out
}

/// `max |a − b| / max(1, max |b|)`.
pub fn scaled_error(a: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    (a - reference).amax() / reference.amax().max(1.0)
}

pub fn as_column(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

/// `gᵢ = σ(Aᵢᵀθ − bᵢ)` as an opaque closure mapping with analytic Jacobian,
/// so the energy takes the generic first-order path.
pub fn opaque_sigmoid(weights: &DMatrix<f64>, offsets: &DVector<f64>) -> FnMapping {
    let (w1, o1) = (weights.clone(), offsets.clone());
    let (w2, o2) = (weights.clone(), offsets.clone());
    FnMapping::new(weights.ncols(), weights.nrows(), move |t| (&w1 * t - &o1).map(sigmoid)).with_jacobian(move |t| {
        let g = (&w2 * t - &o2).map(sigmoid);
        let mut jac = w2.clone();
        for (i, mut row) in jac.row_iter_mut().enumerate() {
            row *= g[i] * (1.0 - g[i]);
        }
        jac
    })
}

/// Two-outcome mapping `(σ(zᵢ), 1 − σ(zᵢ))` interleaved per observation.
pub fn opaque_two_outcome(weights: &DMatrix<f64>, offsets: &DVector<f64>) -> FnMapping {
    let n_y = weights.nrows();
    let (w1, o1) = (weights.clone(), offsets.clone());
    let (w2, o2) = (weights.clone(), offsets.clone());
    FnMapping::new(weights.ncols(), 2 * n_y, move |t| {
        let g = (&w1 * t - &o1).map(sigmoid);
        DVector::from_fn(2 * n_y, |k, _| if k % 2 == 0 { g[k / 2] } else { 1.0 - g[k / 2] })
    })
    .with_jacobian(move |t| {
        let g = (&w2 * t - &o2).map(sigmoid);
        let mut jac = DMatrix::zeros(2 * n_y, w2.ncols());
        for i in 0..n_y {
            let row = w2.row(i) * (g[i] * (1.0 - g[i]));
            jac.set_row(2 * i, &row);
            jac.set_row(2 * i + 1, &(-row));
        }
        jac
    })
}

/// Logistic model with a `Ga(1, 1)` hyperprior on the parameter precision
/// and data simulated from a prior draw.
pub fn random_logistic(rng: &mut ChaCha8Rng, n_theta: usize, n_y: usize) -> (GenerativeModel, DMatrix<f64>) {
    let weights = normal_mat(rng, n_y, n_theta);
    let offsets = normal_vec(rng, n_y) * 0.5;
    let theta = normal_vec(rng, n_theta);
    let g = (&weights * &theta - &offsets).map(sigmoid);
    let y = DMatrix::from_fn(n_y, 1, |i, _| f64::from(rng.random::<f64>() < g[i]));
    let model = GenerativeModel::new(
        Arc::new(SigmoidLinear::new(weights, offsets).unwrap()),
        GaussianPrior::isotropic(DVector::zeros(n_theta), 1.0),
        LikelihoodFamily::Bernoulli,
    )
    .with_param_hyperprior(1.0, 1.0);
    (model, y)
}

/// Gaussian model with `gᵢ = exp(aᵢᵀθ)`, `Ga(1, 1)` hyperpriors on both
/// precisions and data simulated at noise standard deviation 0.3.
pub fn random_exp_gaussian(rng: &mut ChaCha8Rng, n_theta: usize, n_y: usize) -> (GenerativeModel, DMatrix<f64>) {
    let a = normal_mat(rng, n_y, n_theta) * 0.5;
    let theta = normal_vec(rng, n_theta);
    let (a1, a2) = (a.clone(), a.clone());
    let mapping = FnMapping::new(n_theta, n_y, move |t| (&a1 * t).map(f64::exp)).with_jacobian(move |t| {
        let g = (&a2 * t).map(f64::exp);
        let mut jac = a2.clone();
        for (i, mut row) in jac.row_iter_mut().enumerate() {
            row *= g[i];
        }
        jac
    });
    let mean = (&a * &theta).map(f64::exp);
    let y = DMatrix::from_fn(n_y, 1, |i, _| mean[i] + 0.3 * normal(rng));
    let model = GenerativeModel::new(
        Arc::new(mapping),
        GaussianPrior::isotropic(DVector::zeros(n_theta), 1.0),
        LikelihoodFamily::Gaussian {
            precision: DMatrix::identity(n_y, n_y),
        },
    )
    .with_noise_hyperprior(1.0, 1.0)
    .with_param_hyperprior(1.0, 1.0);
    (model, y)
}
