//! Laplace posterior and free energy for fixed precisions.
//!
//! The posterior mean maximises the variational energy by regularised
//! Gauss–Newton ascent; the covariance is the inverse negative Hessian at the
//! mean, and the free energy is `F = I(μ) + ½ log|Σ| + (n_θ/2) log 2π`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::energy::{self, EffectivePrecisions, EnergyEvaluation};
use crate::error::{Error, Result};
use crate::hyperparams::{self, GammaPosterior};
use crate::linalg::{self, SpdFactor};
use crate::model::{validate_model, GenerativeModel};

/// Largest number of consecutive step rejections before giving up on a step.
pub const MAX_STEP_REJECTIONS: usize = 12;
const MIN_DAMPING: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    PriorMean,
    Vector(DVector<f64>),
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Gradient tolerance, relative to `1 + |I|`.
    pub grad_tol: f64,
    /// Free-energy change tolerance between outer iterations.
    pub fe_tol: f64,
    pub init: Init,
    /// Outer sweeps for hyperparameter models.
    pub max_sweeps: usize,
    /// Relative change in hyperparameter means that still counts as moving.
    pub precision_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 256,
            grad_tol: 1e-6,
            fe_tol: 1e-6,
            init: Init::PriorMean,
            max_sweeps: 128,
            precision_tol: 1e-9,
        }
    }
}

impl FitOptions {
    pub(crate) fn initial_theta(&self, model: &GenerativeModel) -> Result<DVector<f64>> {
        match &self.init {
            Init::PriorMean => Ok(model.prior.mean.clone()),
            Init::Vector(v) if v.len() == model.n_theta() => Ok(v.clone()),
            Init::Vector(v) => Err(Error::Dimension(format!(
                "initial theta has length {}, expected {}",
                v.len(),
                model.n_theta()
            ))),
        }
    }
}

/// `q(θ) = N(mean, covariance)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Diagnostics {
    /// Probabilities clamped into `[ε, 1 − ε]`, summed over all evaluations.
    pub clamped_probabilities: usize,
    /// Gauss–Newton steps rejected and retried with stronger damping.
    pub step_rejections: usize,
    /// Diagonal jitter was needed to invert the final Hessian.
    pub covariance_jitter: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub posterior: GaussianPosterior,
    /// Laplace free energy `F` at the final mean.
    pub free_energy: f64,
    /// Free energy after each outer iteration (Gauss–Newton step, or VB sweep
    /// for hyperparameter models).
    pub free_energy_trajectory: Vec<f64>,
    /// `F̃ = F + ΔF` for hyperparameter models.
    pub corrected_free_energy: Option<f64>,
    /// `F̃` involves an improper (Jeffreys) hyperprior and is only defined up
    /// to a model-independent constant.
    pub pseudo_free_energy: bool,
    pub noise_precision: Option<GammaPosterior>,
    pub param_precision: Option<GammaPosterior>,
    pub iterations: usize,
    pub converged: bool,
    pub diagnostics: Diagnostics,
}

/// Result of maximising the variational energy.
#[derive(Debug, Clone)]
pub struct Maximum {
    pub mean: DVector<f64>,
    pub energy: EnergyEvaluation,
    pub iterations: usize,
    pub converged: bool,
    pub trajectory: Vec<f64>,
    pub diagnostics: Diagnostics,
}

/// Laplace free energy at an arbitrary iterate, using its own Hessian.
fn iterate_free_energy(eval: &EnergyEvaluation) -> Result<f64> {
    let factor = SpdFactor::new(&-&eval.hessian)?;
    let n = eval.gradient.len() as f64;
    Ok(eval.value - 0.5 * factor.log_det() + 0.5 * n * (2.0 * PI).ln())
}

/// Maximise `I(θ)` from `init` by damped Gauss–Newton:
/// `Δθ = (−H + τI)⁻¹ ∇I`, accepted only when `I` does not decrease.
pub fn maximize_variational_energy(
    model: &GenerativeModel,
    data: &DMatrix<f64>,
    precisions: &EffectivePrecisions,
    init: &DVector<f64>,
    options: &FitOptions,
) -> Result<Maximum> {
    if init.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("initial theta is not finite".into()));
    }
    let mut diagnostics = Diagnostics::default();
    let mut theta = init.clone();
    let mut eval = energy::variational_energy(model, data, &theta, precisions)?;
    diagnostics.clamped_probabilities += eval.clamped;
    if !eval.is_finite() {
        return Err(Error::Domain("variational energy is not finite at the initial theta".into()));
    }

    let n = theta.len();
    let mut damping = 0.0_f64;
    let mut iterations = 0;
    let mut trajectory = Vec::new();
    let mut last_change = f64::INFINITY;
    let mut free_energy = iterate_free_energy(&eval)?;
    let converged = loop {
        let grad_ok = linalg::inf_norm(&eval.gradient) <= options.grad_tol * (1.0 + eval.value.abs());
        if grad_ok && (iterations == 0 || last_change.abs() <= options.fe_tol) {
            break true;
        }
        if iterations >= options.max_iter {
            break false;
        }

        let neg_hessian = -&eval.hessian;
        let mut accepted = None;
        for _ in 0..=MAX_STEP_REJECTIONS {
            let mut system = neg_hessian.clone();
            for i in 0..n {
                system[(i, i)] += damping;
            }
            let step = match SpdFactor::strict(&system) {
                Some(f) => f.solve(&eval.gradient),
                None => {
                    damping = (10.0 * damping).max(MIN_DAMPING);
                    diagnostics.step_rejections += 1;
                    continue;
                }
            };
            let candidate = &theta + step;
            match energy::variational_energy(model, data, &candidate, precisions) {
                Ok(next) if next.is_finite() && next.value >= eval.value => {
                    diagnostics.clamped_probabilities += next.clamped;
                    damping /= 10.0;
                    accepted = Some((candidate, next));
                    break;
                }
                Ok(next) => {
                    diagnostics.clamped_probabilities += next.clamped;
                }
                Err(Error::Evaluation { .. }) => {}
                Err(e) => return Err(e),
            }
            damping = (10.0 * damping).max(MIN_DAMPING);
            diagnostics.step_rejections += 1;
        }
        let Some((candidate, next)) = accepted else {
            if SpdFactor::strict(&neg_hessian).is_none() {
                return Err(Error::NumericalFailure(
                    "negative Hessian is not positive definite after maximal damping".into(),
                ));
            }
            // No ascent direction left at working precision.
            break grad_ok;
        };
        theta = candidate;
        eval = next;
        iterations += 1;
        let updated = iterate_free_energy(&eval)?;
        last_change = updated - free_energy;
        free_energy = updated;
        trajectory.push(free_energy);
    };
    if trajectory.is_empty() {
        trajectory.push(free_energy);
    }
    Ok(Maximum {
        mean: theta,
        energy: eval,
        iterations,
        converged,
        trajectory,
        diagnostics,
    })
}

/// `Σ = (−H)⁻¹` via Cholesky (with jitter retry), symmetrised.
pub fn posterior_covariance(hessian: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(SpdFactor::new(&-hessian)?.inverse())
}

/// `F = I(μ) + ½ log|Σ| + (n_θ/2) log 2π`.
pub fn laplace_free_energy(energy_value: f64, covariance: &DMatrix<f64>) -> Result<f64> {
    let log_det = SpdFactor::new(covariance)?.log_det();
    let n = covariance.nrows() as f64;
    Ok(energy_value + 0.5 * log_det + 0.5 * n * (2.0 * PI).ln())
}

/// Accuracy/complexity split of the Gaussian-family free energy:
/// `F = accuracy − complexity`.
#[derive(Debug, Clone, Copy)]
pub struct FreeEnergyDecomposition {
    /// `−½(n_y log 2π + log|Q| + ε̂_yᵀQ⁻¹ε̂_y)`
    pub accuracy: f64,
    /// `½(ε̂_θᵀΣ₀⁻¹ε̂_θ + log|Σ₀| − log|Σ|)`
    pub complexity: f64,
}

/// Recompute the Gaussian free energy from residuals and covariances alone.
pub fn gaussian_decomposition(
    data_residual: &DVector<f64>,
    prior_residual: &DVector<f64>,
    precisions: &EffectivePrecisions,
    covariance: &DMatrix<f64>,
) -> Result<FreeEnergyDecomposition> {
    let noise = precisions
        .noise
        .as_ref()
        .ok_or_else(|| Error::Domain("decomposition needs a noise precision".into()))?;
    let n_y = data_residual.len() as f64;
    let accuracy = -0.5
        * (n_y * (2.0 * PI).ln() - noise.log_det + linalg::quad_form(&noise.matrix, data_residual));
    let log_det_cov = SpdFactor::new(covariance)?.log_det();
    let complexity = 0.5
        * (linalg::quad_form(&precisions.prior.matrix, prior_residual) - precisions.prior.log_det - log_det_cov);
    Ok(FreeEnergyDecomposition { accuracy, complexity })
}

/// Fit with fixed precisions starting from `options.init`; models carrying
/// hyperpriors are handed to [`hyperparams::vb_fit`].
pub fn fit(model: &GenerativeModel, data: &DMatrix<f64>, options: &FitOptions) -> Result<FitReport> {
    validate_model(model, data).into_result()?;
    if model.has_hyperpriors() {
        return hyperparams::vb_fit(model, data, options).map(Into::into);
    }
    let precisions = EffectivePrecisions::fixed(model)?;
    let init = options.initial_theta(model)?;
    let max = maximize_variational_energy(model, data, &precisions, &init, options)?;
    let factor = SpdFactor::new(&-&max.energy.hessian)?;
    let covariance = factor.inverse();
    let free_energy = laplace_free_energy(max.energy.value, &covariance)?;
    let mut diagnostics = max.diagnostics;
    diagnostics.covariance_jitter = factor.jitter > 0.0;
    Ok(FitReport {
        posterior: GaussianPosterior {
            mean: max.mean,
            covariance,
        },
        free_energy,
        free_energy_trajectory: max.trajectory,
        corrected_free_energy: None,
        pseudo_free_energy: false,
        noise_precision: None,
        param_precision: None,
        iterations: max.iterations,
        converged: max.converged,
        diagnostics,
    })
}
