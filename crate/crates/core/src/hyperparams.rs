//! Mean-field Gamma posteriors over precision hyperparameters.
//!
//! A noise precision `λ_y` scales the Gaussian noise basis (`Q⁻¹ = λ_yΦ_y`)
//! and a parameter precision `λ_θ` scales the prior basis (`Σ₀⁻¹ = λ_θΦ_θ`).
//! Their posteriors `q(λ) = Ga(a, b)` are updated in closed form given the
//! Laplace posterior over θ, and the free energy picks up the correction
//!
//! ```text
//! ΔF = Σ_x (n_x/2)(⟨log λ_x⟩ − log⟨λ_x⟩) − KL(q(λ_x) ‖ p(λ_x))
//! ```
//!
//! so that `F̃ = F + ΔF`, where `F` is the Laplace free energy evaluated
//! with the expected precisions `⟨λ⟩`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::energy::{self, EffectivePrecisions};
use crate::error::{Error, Result};
use crate::linalg::{self, SpdFactor};
use crate::model::{self, validate_model, GammaHyperprior, GenerativeModel, LikelihoodFamily};
use crate::optimizer::{
    laplace_free_energy, maximize_variational_energy, posterior_covariance, Diagnostics, FitOptions, FitReport,
    GaussianPosterior,
};
use crate::special::{digamma, ln_gamma};

/// `Ga(λ; a, b) ∝ λ^(a−1) e^(−bλ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPosterior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPosterior {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 0.0 && shape.is_finite() && rate > 0.0 && rate.is_finite()) {
            return Err(Error::Domain(format!("invalid Gamma parameters a = {shape}, b = {rate}")));
        }
        Ok(Self { shape, rate })
    }

    /// `⟨λ⟩ = a/b`.
    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    /// `⟨log λ⟩ = ψ(a) − log b`.
    pub fn mean_log(&self) -> f64 {
        digamma(self.shape) - self.rate.ln()
    }

    /// Differential entropy `a − log b + log Γ(a) + (1 − a)ψ(a)`.
    pub fn entropy(&self) -> f64 {
        self.shape - self.rate.ln() + ln_gamma(self.shape) + (1.0 - self.shape) * digamma(self.shape)
    }
}

/// `(⟨λ⟩, ⟨log λ⟩)`.
pub fn gamma_moments(g: &GammaPosterior) -> (f64, f64) {
    (g.mean(), g.mean_log())
}

/// `KL(Ga(a, b) ‖ Ga(a⁰, b⁰))`.
pub fn gamma_kl(q: &GammaPosterior, p: &GammaPosterior) -> f64 {
    let (a, b, a0, b0) = (q.shape, q.rate, p.shape, p.rate);
    (a - a0) * digamma(a) - ln_gamma(a) + ln_gamma(a0) + a0 * (b / b0).ln() + a * (b0 - b) / b
}

/// Divergence from the hyperprior. For the improper Jeffreys prior
/// `p(λ) ∝ 1/λ` the infinite normaliser is dropped, leaving
/// `⟨log q⟩ − ⟨log(1/λ)⟩ = aψ(a) − a − log Γ(a)`; the result is then only
/// defined up to a constant shared by all models.
pub fn hyperprior_divergence(q: &GammaPosterior, prior: &GammaHyperprior) -> f64 {
    if prior.is_jeffreys() {
        q.shape * digamma(q.shape) - q.shape - ln_gamma(q.shape)
    } else {
        gamma_kl(q, &GammaPosterior { shape: prior.shape, rate: prior.rate })
    }
}

/// `a = a⁰ + n_y/2`, `b = b⁰ + ½(ε̂_yᵀΦ_yε̂_y + tr[JᵀΦ_yJΣ])`.
pub fn update_noise_precision(
    prior: &GammaHyperprior,
    residual: &DVector<f64>,
    jacobian: &DMatrix<f64>,
    covariance: &DMatrix<f64>,
    basis: &DMatrix<f64>,
) -> Result<GammaPosterior> {
    let n_y = residual.len();
    if basis.shape() != (n_y, n_y) || jacobian.nrows() != n_y || jacobian.ncols() != covariance.nrows() {
        return Err(Error::Dimension("noise precision update: mismatched shapes".into()));
    }
    let curvature = jacobian.transpose() * basis * jacobian;
    let spread = linalg::quad_form(basis, residual) + linalg::trace_of_product(&curvature, covariance);
    GammaPosterior::new(prior.shape + 0.5 * n_y as f64, prior.rate + 0.5 * spread)
}

/// `a = a⁰ + n_θ/2`, `b = b⁰ + ½(ε̂_θᵀΦ_θε̂_θ + tr[Φ_θΣ])`.
pub fn update_param_precision(
    prior: &GammaHyperprior,
    prior_residual: &DVector<f64>,
    covariance: &DMatrix<f64>,
    basis: &DMatrix<f64>,
) -> Result<GammaPosterior> {
    let n = prior_residual.len();
    if basis.shape() != (n, n) || covariance.shape() != (n, n) {
        return Err(Error::Dimension("parameter precision update: mismatched shapes".into()));
    }
    let spread = linalg::quad_form(basis, prior_residual) + linalg::trace_of_product(basis, covariance);
    GammaPosterior::new(prior.shape + 0.5 * n as f64, prior.rate + 0.5 * spread)
}

/// One hyperparameter set entering `ΔF`: its prior, posterior and the number
/// of variables it scales.
#[derive(Debug, Clone, Copy)]
pub struct HyperTerm<'a> {
    pub prior: &'a GammaHyperprior,
    pub posterior: &'a GammaPosterior,
    pub count: usize,
}

/// `ΔF` from posterior moments and the explicit divergence.
pub fn delta_free_energy(terms: &[HyperTerm<'_>]) -> f64 {
    terms
        .iter()
        .map(|t| {
            let (mean, mean_log) = gamma_moments(t.posterior);
            0.5 * t.count as f64 * (mean_log - mean.ln()) - hyperprior_divergence(t.posterior, t.prior)
        })
        .sum()
}

/// Algebraic rearrangement of [`delta_free_energy`]:
/// `Σ_x a⁰ log(b⁰/b) − (n_x/2) log a − log Γ(a⁰) + log Γ(a) + a(1 − b⁰/b)`.
///
/// It coincides with the moment form only when `a = a⁰ + n_x/2`, where the
/// digamma terms cancel; proper hyperpriors only.
pub fn delta_free_energy_closed_form(terms: &[HyperTerm<'_>]) -> f64 {
    terms
        .iter()
        .map(|t| {
            let (a0, b0) = (t.prior.shape, t.prior.rate);
            let (a, b) = (t.posterior.shape, t.posterior.rate);
            a0 * (b0 / b).ln() - 0.5 * t.count as f64 * a.ln() - ln_gamma(a0) + ln_gamma(a) + a * (1.0 - b0 / b)
        })
        .sum()
}

fn hyper_terms<'a>(
    model: &'a GenerativeModel,
    noise: Option<&'a GammaPosterior>,
    param: Option<&'a GammaPosterior>,
    n_y: usize,
) -> Vec<HyperTerm<'a>> {
    let mut terms = Vec::with_capacity(2);
    if let (Some(prior), Some(posterior)) = (model.noise_hyperprior.as_ref(), noise) {
        terms.push(HyperTerm { prior, posterior, count: n_y });
    }
    if let (Some(prior), Some(posterior)) = (model.param_precision_hyperprior.as_ref(), param) {
        terms.push(HyperTerm { prior, posterior, count: model.n_theta() });
    }
    terms
}

fn observation_count(model: &GenerativeModel) -> usize {
    match &model.family {
        LikelihoodFamily::Gaussian { precision } => precision.nrows(),
        _ => 0,
    }
}

/// The mean-field objective at an arbitrary `(μ, Σ, q(λ))`:
///
/// ```text
/// Î(μ) + ½ tr[Ĥ(μ)Σ] + ½ log|Σ| + (n_θ/2) log 2πe + ΔF
/// ```
///
/// with `Î`, `Ĥ` evaluated at the expected precisions. The hyperparameter
/// updates maximise it exactly in `q(λ)`; at `Σ = −Ĥ⁻¹` it equals `F + ΔF`.
pub fn corrected_free_energy(
    model: &GenerativeModel,
    data: &DMatrix<f64>,
    mean: &DVector<f64>,
    covariance: &DMatrix<f64>,
    noise: Option<&GammaPosterior>,
    param: Option<&GammaPosterior>,
) -> Result<f64> {
    let precisions = EffectivePrecisions::expected(
        model,
        noise.map_or(1.0, GammaPosterior::mean),
        param.map_or(1.0, GammaPosterior::mean),
    )?;
    let eval = energy::variational_energy(model, data, mean, &precisions)?;
    let n = mean.len() as f64;
    let log_det = SpdFactor::new(covariance)?.log_det();
    let laplace = eval.value
        + 0.5 * linalg::trace_of_product(&eval.hessian, covariance)
        + 0.5 * log_det
        + 0.5 * n * (2.0 * PI * std::f64::consts::E).ln();
    Ok(laplace + delta_free_energy(&hyper_terms(model, noise, param, observation_count(model))))
}

/// Converged (or last) state of the alternating scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct VBState {
    pub theta_posterior: GaussianPosterior,
    pub noise_precision: Option<GammaPosterior>,
    pub param_precision: Option<GammaPosterior>,
    /// `F̃ = F + ΔF`.
    pub corrected_free_energy: f64,
    /// `F` at the expected precisions.
    pub free_energy: f64,
    /// `F̃` after each sweep.
    pub trajectory: Vec<f64>,
    pub pseudo_free_energy: bool,
    pub sweeps: usize,
    pub converged: bool,
    pub diagnostics: Diagnostics,
}

impl From<VBState> for FitReport {
    fn from(s: VBState) -> Self {
        FitReport {
            posterior: s.theta_posterior,
            free_energy: s.free_energy,
            free_energy_trajectory: s.trajectory,
            corrected_free_energy: Some(s.corrected_free_energy),
            pseudo_free_energy: s.pseudo_free_energy,
            noise_precision: s.noise_precision,
            param_precision: s.param_precision,
            iterations: s.sweeps,
            converged: s.converged,
            diagnostics: s.diagnostics,
        }
    }
}

fn relative_change(old: f64, new: f64) -> f64 {
    (new - old).abs() / old.abs().max(f64::MIN_POSITIVE)
}

/// Alternate a Gauss–Newton θ-step at the current `⟨λ⟩` with closed-form
/// Gamma updates until `F̃` and `⟨λ⟩` stop moving.
///
/// The θ-step starts from the previous mean. Before the first λ-step the
/// expected precisions are the hyperprior means (1 for a Jeffreys prior).
pub fn vb_fit(model: &GenerativeModel, data: &DMatrix<f64>, options: &FitOptions) -> Result<VBState> {
    validate_model(model, data).into_result()?;
    if !model.has_hyperpriors() {
        return Err(Error::Domain("model has no hyperpriors".into()));
    }
    if options.max_sweeps == 0 {
        return Err(Error::Domain("at least one sweep is required".into()));
    }
    let noise_basis = match (&model.noise_hyperprior, &model.family) {
        (Some(_), LikelihoodFamily::Gaussian { precision }) => Some(precision.clone()),
        (Some(_), _) => return Err(Error::Domain("noise hyperprior requires the gaussian family".into())),
        (None, _) => None,
    };
    let param_basis = match model.param_precision_hyperprior {
        Some(_) => Some(model.param_basis()?),
        None => None,
    };
    let pseudo = [&model.noise_hyperprior, &model.param_precision_hyperprior]
        .iter()
        .any(|h| h.as_ref().is_some_and(GammaHyperprior::is_jeffreys));

    let mut noise_mean = model.noise_hyperprior.as_ref().map_or(1.0, GammaHyperprior::initial_mean);
    let mut param_mean = model.param_precision_hyperprior.as_ref().map_or(1.0, GammaHyperprior::initial_mean);
    let mut theta = options.initial_theta(model)?;
    let mut trajectory = Vec::new();
    let mut diagnostics = Diagnostics::default();
    let n_y = observation_count(model);

    let mut sweeps = 0;
    loop {
        sweeps += 1;
        let precisions = EffectivePrecisions::expected(model, noise_mean, param_mean)?;
        let max = maximize_variational_energy(model, data, &precisions, &theta, options)?;
        diagnostics.clamped_probabilities += max.diagnostics.clamped_probabilities;
        diagnostics.step_rejections += max.diagnostics.step_rejections;
        theta = max.mean;
        let covariance = posterior_covariance(&max.energy.hessian)?;

        let noise_q = match (&model.noise_hyperprior, &noise_basis) {
            (Some(prior), Some(basis)) => {
                let residual = max
                    .energy
                    .data_residual
                    .as_ref()
                    .ok_or_else(|| Error::Domain("noise update needs a data residual".into()))?;
                let jac = model::jacobian_checked(model.mapping.as_ref(), &theta)?;
                Some(update_noise_precision(prior, residual, &jac, &covariance, basis)?)
            }
            _ => None,
        };
        let param_q = match (&model.param_precision_hyperprior, &param_basis) {
            (Some(prior), Some(basis)) => Some(update_param_precision(
                prior,
                &max.energy.prior_residual,
                &covariance,
                basis,
            )?),
            _ => None,
        };
        let new_noise_mean = noise_q.as_ref().map_or(noise_mean, GammaPosterior::mean);
        let new_param_mean = param_q.as_ref().map_or(param_mean, GammaPosterior::mean);

        let precisions = EffectivePrecisions::expected(model, new_noise_mean, new_param_mean)?;
        let eval = energy::variational_energy(model, data, &theta, &precisions)?;
        let factor = SpdFactor::new(&-&eval.hessian)?;
        diagnostics.covariance_jitter = factor.jitter > 0.0;
        let covariance = factor.inverse();
        let free_energy = laplace_free_energy(eval.value, &covariance)?;
        let delta = delta_free_energy(&hyper_terms(model, noise_q.as_ref(), param_q.as_ref(), n_y));
        let corrected = free_energy + delta;

        let fe_change = trajectory.last().map_or(f64::INFINITY, |&prev: &f64| (corrected - prev).abs());
        let moved = relative_change(noise_mean, new_noise_mean).max(relative_change(param_mean, new_param_mean));
        trajectory.push(corrected);
        noise_mean = new_noise_mean;
        param_mean = new_param_mean;

        let converged = max.converged && fe_change <= options.fe_tol && moved <= options.precision_tol;
        if converged || sweeps >= options.max_sweeps {
            return Ok(VBState {
                theta_posterior: GaussianPosterior { mean: theta, covariance },
                noise_precision: noise_q,
                param_precision: param_q,
                corrected_free_energy: corrected,
                free_energy,
                trajectory,
                pseudo_free_energy: pseudo,
                sweeps,
                converged,
                diagnostics,
            });
        }
    }
}
