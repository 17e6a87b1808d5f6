//! Closed-form results for the general linear model `y = Xθ + ε`,
//! `ε ~ N(0, (λΦ_y)⁻¹)`, at the frequentist limit (flat prior on θ,
//! Jeffreys prior `p(λ) ∝ 1/λ`).
//!
//! With `ν = (n_y − n_θ)/2` and `s = yᵀPy`, the marginal likelihood is
//!
//! ```text
//! log p(y|m) = (n_θ − n_y)/2 · log 2π + ½ log|Φ_y| − ½ log|XᵀΦ_yX|
//!              + log Γ(ν) − ν log(s/2)
//! ```
//!
//! Everything is computed in log space.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::hyperparams::VBState;
use crate::linalg::{self, SpdFactor};
use crate::model::{GaussianPrior, GenerativeModel, LikelihoodFamily, LinearMapping};
use crate::quadrature::{integrate, QuadratureOptions};
use crate::special::ln_gamma;

/// `yᵀPy` at or below this is treated as a perfect fit.
pub const DEGENERATE_RESIDUAL: f64 = 1e-14;

/// Prior variance multiplier used to approximate a flat prior on θ.
pub const FLAT_PRIOR_SCALE: f64 = 1e8;

#[derive(Debug, Clone, PartialEq)]
pub struct GlmProblem {
    pub design: DMatrix<f64>,
    pub noise_basis: DMatrix<f64>,
    pub data: DVector<f64>,
}

impl GlmProblem {
    /// Checks shapes, `n_y > n_θ`, full column rank of `X` and `Φ_y ≻ 0`.
    pub fn new(design: DMatrix<f64>, noise_basis: DMatrix<f64>, data: DVector<f64>) -> Result<Self> {
        let (n_y, n_theta) = design.shape();
        if data.len() != n_y {
            return Err(Error::Dimension(format!("{} observations for a {n_y}-row design", data.len())));
        }
        if noise_basis.shape() != (n_y, n_y) {
            return Err(Error::Dimension(format!(
                "noise basis is {}x{}, expected {n_y}x{n_y}",
                noise_basis.nrows(),
                noise_basis.ncols()
            )));
        }
        if n_y <= n_theta {
            return Err(Error::Dimension(format!("need more observations than parameters ({n_y} <= {n_theta})")));
        }
        if design.iter().chain(data.iter()).chain(noise_basis.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("problem has non-finite entries".into()));
        }
        if !linalg::is_symmetric(&noise_basis, 1e-10) || SpdFactor::strict(&noise_basis).is_none() {
            return Err(Error::Domain("noise basis is not symmetric positive definite".into()));
        }
        if column_rank(&design) < n_theta {
            return Err(Error::RankDeficient);
        }
        Ok(Self { design, noise_basis, data })
    }

    /// `Φ_y = I`.
    pub fn isotropic(design: DMatrix<f64>, data: DVector<f64>) -> Result<Self> {
        let n_y = design.nrows();
        Self::new(design, DMatrix::identity(n_y, n_y), data)
    }

    pub fn n_y(&self) -> usize {
        self.design.nrows()
    }

    pub fn n_theta(&self) -> usize {
        self.design.ncols()
    }

    fn gram(&self) -> DMatrix<f64> {
        self.design.transpose() * &self.noise_basis * &self.design
    }

    /// Generative model at the frequentist limit: prior `N(0, s·I)` with
    /// `s = 1e8 · var(y)` and a Jeffreys hyperprior on the noise precision.
    pub fn flat_model(&self) -> GenerativeModel {
        let n = self.n_y() as f64;
        let mean = self.data.mean();
        let var = self.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let scale = FLAT_PRIOR_SCALE * var.max(1.0);
        GenerativeModel::new(
            Arc::new(LinearMapping::new(self.design.clone())),
            GaussianPrior::isotropic(DVector::zeros(self.n_theta()), scale),
            LikelihoodFamily::Gaussian {
                precision: self.noise_basis.clone(),
            },
        )
        .with_noise_hyperprior(0.0, 0.0)
    }
}

fn column_rank(x: &DMatrix<f64>) -> usize {
    if x.ncols() == 0 {
        return 0;
    }
    let sv = x.clone().singular_values();
    let max = sv.max();
    let tol = x.nrows().max(x.ncols()) as f64 * f64::EPSILON * max;
    sv.iter().filter(|&&s| s > tol).count()
}

/// Limits of the VB estimators as the priors become non-informative.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequentistEstimates {
    /// `(XᵀΦ_yX)⁻¹XᵀΦ_yy`
    pub mean: DVector<f64>,
    /// `(XᵀΦ_yX)⁻¹`; the posterior covariance is this divided by `⟨λ_y⟩`.
    pub covariance_scale: DMatrix<f64>,
    /// `n_y/2`
    pub noise_shape: f64,
    /// `½ · n_y/(n_y − n_θ) · (y − Xμ)ᵀΦ_y(y − Xμ)`
    pub noise_rate: f64,
    /// `⟨λ_y⟩⁻¹ = (y − Xμ)ᵀΦ_y(y − Xμ)/(n_y − n_θ)`
    pub noise_variance: f64,
}

pub fn frequentist_estimators(problem: &GlmProblem) -> Result<FrequentistEstimates> {
    let factor = SpdFactor::strict(&problem.gram()).ok_or(Error::RankDeficient)?;
    let mean = factor.solve(&(problem.design.transpose() * &problem.noise_basis * &problem.data));
    let residual = &problem.data - &problem.design * &mean;
    let rss = linalg::quad_form(&problem.noise_basis, &residual);
    let (n_y, n_theta) = (problem.n_y() as f64, problem.n_theta() as f64);
    Ok(FrequentistEstimates {
        mean,
        covariance_scale: factor.inverse(),
        noise_shape: 0.5 * n_y,
        noise_rate: 0.5 * n_y / (n_y - n_theta) * rss,
        noise_variance: rss / (n_y - n_theta),
    })
}

/// `P = Φ_y − Φ_yX(XᵀΦ_yX)⁻¹XᵀΦ_y`.
pub fn residual_projector(problem: &GlmProblem) -> Result<DMatrix<f64>> {
    let factor = SpdFactor::strict(&problem.gram()).ok_or(Error::RankDeficient)?;
    let phi_x = &problem.noise_basis * &problem.design;
    let p = &problem.noise_basis - &phi_x * factor.solve_matrix(&phi_x.transpose());
    Ok(linalg::symmetrize(&p))
}

/// Ingredients shared by the evidence and the pseudo free energy.
struct EvidenceTerms {
    log_det_phi: f64,
    log_det_gram: f64,
    /// `yᵀPy`
    residual: f64,
    nu: f64,
}

fn evidence_terms(problem: &GlmProblem) -> Result<EvidenceTerms> {
    let p = residual_projector(problem)?;
    let residual = linalg::quad_form(&p, &problem.data);
    if residual <= DEGENERATE_RESIDUAL {
        return Err(Error::DegenerateEvidence(residual));
    }
    Ok(EvidenceTerms {
        log_det_phi: SpdFactor::new(&problem.noise_basis)?.log_det(),
        log_det_gram: SpdFactor::new(&problem.gram())?.log_det(),
        residual,
        nu: 0.5 * (problem.n_y() - problem.n_theta()) as f64,
    })
}

/// `log p(y|m) = log ∫∫ N(y; Xθ, (λΦ_y)⁻¹) λ⁻¹ dθ dλ` in closed form.
pub fn exact_log_evidence(problem: &GlmProblem) -> Result<f64> {
    let t = evidence_terms(problem)?;
    let (n_y, n_theta) = (problem.n_y() as f64, problem.n_theta() as f64);
    Ok(0.5 * (n_theta - n_y) * (2.0 * PI).ln() + 0.5 * t.log_det_phi - 0.5 * t.log_det_gram + ln_gamma(t.nu)
        - t.nu * (0.5 * t.residual).ln())
}

/// The same evidence by adaptive quadrature over `u = log λ`, with the
/// Gaussian θ-integral done analytically at each `λ`:
///
/// ```text
/// ∫ N(y; Xθ, (λΦ_y)⁻¹) dθ = (2π)^((n_θ−n_y)/2) λ^ν |Φ_y|^½ |XᵀΦ_yX|^(−½) exp(−λ r/2)
/// ```
///
/// where `r = min_θ (y − Xθ)ᵀΦ_y(y − Xθ)` is obtained by least squares.
pub fn log_evidence_by_quadrature(problem: &GlmProblem, opts: QuadratureOptions) -> Result<f64> {
    let (n_y, n_theta) = (problem.n_y(), problem.n_theta());
    let gram = problem.gram();
    let gram_factor = SpdFactor::strict(&gram).ok_or(Error::RankDeficient)?;
    let theta_hat = gram_factor.solve(&(problem.design.transpose() * &problem.noise_basis * &problem.data));
    let r = linalg::quad_form(&problem.noise_basis, &(&problem.data - &problem.design * theta_hat));
    if r <= DEGENERATE_RESIDUAL {
        return Err(Error::DegenerateEvidence(r));
    }
    let nu = 0.5 * (n_y - n_theta) as f64;
    let constant = 0.5 * (n_theta as f64 - n_y as f64) * (2.0 * PI).ln()
        + 0.5 * SpdFactor::new(&problem.noise_basis)?.log_det()
        - 0.5 * gram_factor.log_det();
    // log of the integrand in u, including the Jacobian dλ/λ = du
    let log_f = |u: f64| nu * u - 0.5 * r * u.exp();
    let peak = (2.0 * nu / r).ln();
    let shift = log_f(peak);
    let lo = (1e-6f64).ln().min(peak - 60.0 / nu - 5.0);
    let hi = (1e6f64).ln().max(peak + 6.0);
    let integral = integrate(|u| (log_f(u) - shift).exp(), lo, hi, opts)?;
    Ok(constant + shift + integral.value.ln())
}

/// Pseudo free-energy limit: the frequentist-limit free energy with the
/// improper prior entropy terms removed,
///
/// ```text
/// F∞ = −(n_y/2) log 2π + ½ log|Φ_y| − ½ log|XᵀΦ_yX| − ν log(s/2)
///      + ν log ν − (n_y/2) log(n_y/2) + log Γ(n_y/2) + n_θ/2
/// ```
pub fn pseudo_free_energy_limit(problem: &GlmProblem) -> Result<f64> {
    let t = evidence_terms(problem)?;
    let (n_y, n_theta) = (problem.n_y() as f64, problem.n_theta() as f64);
    let half_n = 0.5 * n_y;
    Ok(-half_n * (2.0 * PI).ln() + 0.5 * t.log_det_phi - 0.5 * t.log_det_gram - t.nu * (0.5 * t.residual).ln()
        + t.nu * t.nu.ln()
        - half_n * half_n.ln()
        + ln_gamma(half_n)
        + 0.5 * n_theta)
}

/// `F∞` recovered from a fit of [`GlmProblem::flat_model`]: the reported
/// pseudo score with the prior terms `−½ log|Σ₀| − ½ ε̂_θᵀΣ₀⁻¹ε̂_θ` of the
/// complexity penalty removed.
pub fn pseudo_free_energy_from_fit(model: &GenerativeModel, state: &VBState) -> Result<f64> {
    let prior = &model.prior;
    let precision = prior.precision()?;
    let log_det = SpdFactor::new(&prior.cov)?.log_det();
    let residual = &prior.mean - &state.theta_posterior.mean;
    Ok(state.corrected_free_energy + 0.5 * (log_det + linalg::quad_form(&precision, &residual)))
}

/// `F∞ − log p(y|m)`, which depends only on the dimensions:
///
/// ```text
/// (n_θ/2)(1 − log 2π) + ν log ν − (n_y/2) log(n_y/2) − log Γ(ν) + log Γ(n_y/2)
/// ```
pub fn pseudo_evidence_offset(n_y: usize, n_theta: usize) -> f64 {
    let nu = 0.5 * (n_y - n_theta) as f64;
    let half_n = 0.5 * n_y as f64;
    0.5 * n_theta as f64 * (1.0 - (2.0 * PI).ln()) + nu * nu.ln() - half_n * half_n.ln() - ln_gamma(nu)
        + ln_gamma(half_n)
}

/// Stirling approximation of [`pseudo_evidence_offset`]:
/// `−(n_θ/2) log 2π − ½ log(n_y/(n_y − n_θ))`.
pub fn pseudo_evidence_offset_stirling(n_y: usize, n_theta: usize) -> f64 {
    let (n_y, n_theta) = (n_y as f64, n_theta as f64);
    -0.5 * n_theta * (2.0 * PI).ln() - 0.5 * (n_y / (n_y - n_theta)).ln()
}

/// Both sides of `log Γ(x) − x log x ≈ −½ log x − x + ½ log 2π`.
pub fn stirling_check(x: f64) -> (f64, f64) {
    let lhs = ln_gamma(x) - x * x.ln();
    let rhs = -0.5 * x.ln() - x + 0.5 * (2.0 * PI).ln();
    (lhs, rhs)
}
