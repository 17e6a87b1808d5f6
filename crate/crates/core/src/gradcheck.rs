//! Finite-difference checks of Jacobians, energy gradients and exact
//! Hessians at random parameter draws around the prior mean.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::energy::{self, EffectivePrecisions};
use crate::error::Result;
use crate::experiments::sample_prior;
use crate::model::{finite_difference_jacobian, GenerativeModel, GammaHyperprior, DEFAULT_FD_STEP};

/// Default pass threshold on every relative error.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct GradientCheckOptions {
    pub draws: usize,
    pub seed: u64,
    /// Draws are `μ₀ + spread · L z` with `Σ₀ = LLᵀ`.
    pub spread: f64,
    pub tolerance: f64,
}

impl Default for GradientCheckOptions {
    fn default() -> Self {
        Self {
            draws: 20,
            seed: 0,
            spread: 0.5,
            tolerance: GRADIENT_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheckReport {
    pub draws: usize,
    pub max_jacobian_error: f64,
    pub max_gradient_error: f64,
    /// `None` when the model's Hessian is a Gauss–Newton approximation and
    /// cannot be compared with finite differences.
    pub max_hessian_error: Option<f64>,
    pub tolerance: f64,
}

impl GradientCheckReport {
    pub fn passed(&self) -> bool {
        self.max_jacobian_error <= self.tolerance
            && self.max_gradient_error <= self.tolerance
            && self.max_hessian_error.is_none_or(|e| e <= self.tolerance)
    }
}

/// `max |a − b| / max(1, max |b|)`.
pub fn relative_error(analytic: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    let scale = reference.amax().max(1.0);
    (analytic - reference).amax() / scale
}

/// Central differences of the energy value.
pub fn fd_energy_gradient(
    model: &GenerativeModel,
    data: &DMatrix<f64>,
    theta: &DVector<f64>,
    precisions: &EffectivePrecisions,
    step: f64,
) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(theta.len());
    let mut probe = theta.clone();
    for j in 0..theta.len() {
        let h = step * (1.0 + theta[j].abs());
        probe[j] = theta[j] + h;
        let plus = energy::variational_energy(model, data, &probe, precisions)?.value;
        probe[j] = theta[j] - h;
        let minus = energy::variational_energy(model, data, &probe, precisions)?.value;
        probe[j] = theta[j];
        out[j] = (plus - minus) / (2.0 * h);
    }
    Ok(out)
}

/// Central differences of the analytic gradient, symmetrised.
pub fn fd_energy_hessian(
    model: &GenerativeModel,
    data: &DMatrix<f64>,
    theta: &DVector<f64>,
    precisions: &EffectivePrecisions,
    step: f64,
) -> Result<DMatrix<f64>> {
    let n = theta.len();
    let mut out = DMatrix::zeros(n, n);
    let mut probe = theta.clone();
    for j in 0..n {
        let h = step * (1.0 + theta[j].abs());
        probe[j] = theta[j] + h;
        let plus = energy::variational_energy(model, data, &probe, precisions)?.gradient;
        probe[j] = theta[j] - h;
        let minus = energy::variational_energy(model, data, &probe, precisions)?.gradient;
        probe[j] = theta[j];
        out.set_column(j, &((plus - minus) / (2.0 * h)));
    }
    Ok(crate::linalg::symmetrize(&out))
}

/// Compare analytic and finite-difference derivatives at `options.draws`
/// parameter draws. Hyperparameters are held at their prior means.
pub fn check_gradients(
    model: &GenerativeModel,
    data: &DMatrix<f64>,
    options: &GradientCheckOptions,
) -> Result<GradientCheckReport> {
    let precisions = EffectivePrecisions::expected(
        model,
        model.noise_hyperprior.as_ref().map_or(1.0, GammaHyperprior::initial_mean),
        model.param_precision_hyperprior.as_ref().map_or(1.0, GammaHyperprior::initial_mean),
    )?;
    let exact_hessian = energy::has_exact_hessian(model);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut report = GradientCheckReport {
        draws: options.draws,
        max_jacobian_error: 0.0,
        max_gradient_error: 0.0,
        max_hessian_error: exact_hessian.then_some(0.0),
        tolerance: options.tolerance,
    };
    for _ in 0..options.draws {
        let offset = sample_prior(model, &mut rng)? - &model.prior.mean;
        let theta = &model.prior.mean + offset * options.spread;

        let jac = model.mapping.jacobian(&theta)?;
        let fd_jac = finite_difference_jacobian(model.mapping.as_ref(), &theta, DEFAULT_FD_STEP)?;
        report.max_jacobian_error = report.max_jacobian_error.max(relative_error(&jac, &fd_jac));

        let eval = energy::variational_energy(model, data, &theta, &precisions)?;
        let fd_grad = fd_energy_gradient(model, data, &theta, &precisions, DEFAULT_FD_STEP)?;
        let err = relative_error(
            &DMatrix::from_column_slice(theta.len(), 1, eval.gradient.as_slice()),
            &DMatrix::from_column_slice(theta.len(), 1, fd_grad.as_slice()),
        );
        report.max_gradient_error = report.max_gradient_error.max(err);

        if let Some(max) = report.max_hessian_error.as_mut() {
            let fd_hess = fd_energy_hessian(model, data, &theta, &precisions, 1e-4)?;
            *max = max.max(relative_error(&eval.hessian, &fd_hess));
        }
    }
    Ok(report)
}
