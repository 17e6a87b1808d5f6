//! Variational energy `I(θ) = log p(y|θ,m) + log p(θ|m)` with its gradient
//! and a negative-definite Hessian for every likelihood family.
//!
//! All normalising constants (`log 2π`, log-determinants, binomial and
//! multinomial coefficients) are kept in the value so that free energies are
//! comparable across models. Hessians drop second derivatives of the mapping
//! (Gauss–Newton form), except on the sigmoid-linear paths where the logistic
//! Hessian is exact.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, SpdFactor};
use crate::model::{self, GenerativeModel, LikelihoodFamily, SigmoidLinear};
use crate::special::ln_factorial;

/// Probabilities are clamped to `[ε, 1 − ε]` before taking logs.
pub const PROBABILITY_CLAMP: f64 = 1e-8;

/// A precision matrix together with its log-determinant.
#[derive(Debug, Clone)]
pub struct Precision {
    pub matrix: DMatrix<f64>,
    pub log_det: f64,
}

impl Precision {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let log_det = SpdFactor::strict(&matrix)
            .ok_or_else(|| Error::Domain("precision matrix not PD".into()))?
            .log_det();
        Ok(Self { matrix, log_det })
    }

    /// `scale · self`, adjusting the log-determinant analytically.
    pub fn scaled(&self, scale: f64) -> Self {
        Self {
            matrix: &self.matrix * scale,
            log_det: self.log_det + self.matrix.nrows() as f64 * scale.ln(),
        }
    }
}

/// The noise precision `Q⁻¹` (Gaussian family only) and prior precision
/// `Σ₀⁻¹` an energy evaluation uses.
#[derive(Debug, Clone)]
pub struct EffectivePrecisions {
    pub noise: Option<Precision>,
    pub prior: Precision,
}

impl EffectivePrecisions {
    /// The model's fixed precisions: `Q⁻¹ = Φ_y`, `Σ₀⁻¹ = cov⁻¹`.
    pub fn fixed(model: &GenerativeModel) -> Result<Self> {
        let noise = match &model.family {
            LikelihoodFamily::Gaussian { precision } => Some(Precision::new(precision.clone())?),
            _ => None,
        };
        Ok(Self {
            noise,
            prior: Precision::new(model.prior.precision()?)?,
        })
    }

    /// Precisions with hyperparameter expectations substituted:
    /// `Q⁻¹ = ⟨λ_y⟩Φ_y` when the model has a noise hyperprior and
    /// `Σ₀⁻¹ = ⟨λ_θ⟩Φ_θ` when it has a parameter hyperprior.
    pub fn expected(model: &GenerativeModel, noise_mean: f64, param_mean: f64) -> Result<Self> {
        let mut out = Self::fixed(model)?;
        if model.noise_hyperprior.is_some() {
            out.noise = out.noise.map(|q| q.scaled(noise_mean));
        }
        if model.param_precision_hyperprior.is_some() {
            out.prior = Precision::new(model.param_basis()?)?.scaled(param_mean);
        }
        Ok(out)
    }
}

/// `I(θ)` with its derivatives.
#[derive(Debug, Clone)]
pub struct EnergyEvaluation {
    pub value: f64,
    pub gradient: DVector<f64>,
    /// Symmetric; `-hessian` is positive definite.
    pub hessian: DMatrix<f64>,
    /// `y − g(θ)` for the Gaussian family.
    pub data_residual: Option<DVector<f64>>,
    /// `μ₀ − θ`.
    pub prior_residual: DVector<f64>,
    /// Number of probabilities clamped into `[ε, 1 − ε]`.
    pub clamped: usize,
}

impl EnergyEvaluation {
    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.gradient.iter().all(|v| v.is_finite())
            && self.hessian.iter().all(|v| v.is_finite())
    }
}

/// Prior contribution, shared by every family.
struct PriorTerm {
    value: f64,
    gradient: DVector<f64>,
    hessian: DMatrix<f64>,
    residual: DVector<f64>,
}

fn prior_term(model: &GenerativeModel, theta: &DVector<f64>, precision: &Precision) -> Result<PriorTerm> {
    let n = model.n_theta();
    if theta.len() != n {
        return Err(Error::Dimension(format!("theta has length {}, expected {n}", theta.len())));
    }
    let residual = &model.prior.mean - theta;
    let weighted = &precision.matrix * &residual;
    let value = -0.5 * (n as f64 * (2.0 * PI).ln() - precision.log_det + residual.dot(&weighted));
    Ok(PriorTerm {
        value,
        gradient: weighted,
        hessian: -&precision.matrix,
        residual,
    })
}

fn finish(prior: PriorTerm, data_value: f64, data_gradient: DVector<f64>, data_hessian: DMatrix<f64>) -> (f64, DVector<f64>, DMatrix<f64>, DVector<f64>) {
    let hessian = linalg::symmetrize(&(prior.hessian + data_hessian));
    (prior.value + data_value, prior.gradient + data_gradient, hessian, prior.residual)
}

fn clamp_probability(g: f64, clamped: &mut usize) -> f64 {
    if g < PROBABILITY_CLAMP {
        *clamped += 1;
        PROBABILITY_CLAMP
    } else if g > 1.0 - PROBABILITY_CLAMP {
        *clamped += 1;
        1.0 - PROBABILITY_CLAMP
    } else {
        g
    }
}

/// Single-column observations as a vector.
fn column(data: &DMatrix<f64>, n_expected: usize) -> Result<DVector<f64>> {
    if data.ncols() != 1 && data.nrows() > 0 {
        return Err(Error::Dimension(format!("expected one data column, got {}", data.ncols())));
    }
    if data.nrows() != n_expected {
        return Err(Error::Dimension(format!(
            "{} observations for a mapping with {n_expected} outputs",
            data.nrows()
        )));
    }
    Ok(DVector::from_iterator(data.nrows(), data.iter().copied()))
}

/// Gaussian observations `y ~ N(g(θ), Q)`.
///
/// Gradient `Jᵀ Q⁻¹ ε_y + Σ₀⁻¹ ε_θ`, Hessian `−(Jᵀ Q⁻¹ J + Σ₀⁻¹)`.
pub fn gaussian_energy(
    model: &GenerativeModel,
    data: &DMatrix<f64>,
    theta: &DVector<f64>,
    precisions: &EffectivePrecisions,
) -> Result<EnergyEvaluation> {
    let noise = precisions
        .noise
        .as_ref()
        .ok_or_else(|| Error::Domain("gaussian energy needs a noise precision".into()))?;
    let mapping = model.mapping.as_ref();
    let y = column(data, mapping.n_out())?;
    let n_y = y.len();
    let prior = prior_term(model, theta, &precisions.prior)?;

    let g = model::eval_checked(mapping, theta, None)?;
    let jac = model::jacobian_checked(mapping, theta)?;
    let residual = y - g;
    let weighted = &noise.matrix * &residual;
    let value = -0.5 * (n_y as f64 * (2.0 * PI).ln() - noise.log_det + residual.dot(&weighted));
    let gradient = jac.transpose() * weighted;
    let hessian = -(jac.transpose() * &noise.matrix * &jac);

    let (value, gradient, hessian, prior_residual) = finish(prior, value, gradient, hessian);
    Ok(EnergyEvaluation {
        value,
        gradient,
        hessian,
        data_residual: Some(residual),
        prior_residual,
        clamped: 0,
    })
}

fn check_binary(y: &DVector<f64>) -> Result<()> {
    match y.iter().position(|&v| v != 0.0 && v != 1.0) {
        Some(i) => Err(Error::Domain(format!("bernoulli observation {} at row {i} is not 0 or 1", y[i]))),
        None => Ok(()),
    }
}

/// Bernoulli observations with a generic mapping and first-order Hessian.
pub fn bernoulli_energy(
    model: &GenerativeModel,
    data: &DMatrix<f64>,
    theta: &DVector<f64>,
    precisions: &EffectivePrecisions,
) -> Result<EnergyEvaluation> {
    let mapping = model.mapping.as_ref();
    let y = column(data, mapping.n_out())?;
    check_binary(&y)?;
    let prior = prior_term(model, theta, &precisions.prior)?;
    let g = model::eval_checked(mapping, theta, None)?;
    let jac = model::jacobian_checked(mapping, theta)?;

    let n = theta.len();
    let mut clamped = 0;
    let mut value = 0.0;
    let mut weights_grad = DVector::zeros(y.len());
    let mut weights_hess = DVector::zeros(y.len());
    for i in 0..y.len() {
        let gi = clamp_probability(g[i], &mut clamped);
        value += y[i] * gi.ln() + (1.0 - y[i]) * (1.0 - gi).ln();
        weights_grad[i] = (y[i] - gi) / (gi * (1.0 - gi));
        weights_hess[i] = y[i] / (gi * gi) + (1.0 - y[i]) / ((1.0 - gi) * (1.0 - gi));
    }
    let gradient = jac.transpose() * weights_grad;
    let hessian = -weighted_gram(&jac, &weights_hess, n);

    let (value, gradient, hessian, prior_residual) = finish(prior, value, gradient, hessian);
    Ok(EnergyEvaluation {
        value,
        gradient,
        hessian,
        data_residual: None,
        prior_residual,
        clamped,
    })
}

/// `Σᵢ wᵢ JᵢJᵢᵀ` over the rows of `jac`.
fn weighted_gram(jac: &DMatrix<f64>, weights: &DVector<f64>, n: usize) -> DMatrix<f64> {
    let mut scaled = jac.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= weights[i];
    }
    if jac.nrows() == 0 {
        return DMatrix::zeros(n, n);
    }
    jac.transpose() * scaled
}

/// Sigmoid-linear path shared by the Bernoulli (`k ≡ 1`) and binomial
/// families: gradient `Σᵢ (yᵢ − kᵢgᵢ)Aᵢ`, exact Hessian `−Σᵢ kᵢgᵢ(1 − gᵢ)AᵢAᵢᵀ`.
fn sigmoid_counts(
    sig: &SigmoidLinear,
    y: &DVector<f64>,
    trials: &[f64],
    theta: &DVector<f64>,
    clamped: &mut usize,
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let z = sig.logits(theta);
    let mut value = 0.0;
    let mut weights_grad = DVector::zeros(y.len());
    let mut weights_hess = DVector::zeros(y.len());
    for i in 0..y.len() {
        let raw = model::sigmoid(z[i]);
        let gi = clamp_probability(raw, clamped);
        value += y[i] * gi.ln() + (trials[i] - y[i]) * (1.0 - gi).ln();
        weights_grad[i] = y[i] - trials[i] * raw;
        weights_hess[i] = trials[i] * raw * (1.0 - raw);
    }
    let gradient = sig.weights.transpose() * weights_grad;
    let hessian = -weighted_gram(&sig.weights, &weights_hess, theta.len());
    (value, gradient, hessian)
}

/// Bernoulli observations through a sigmoid-linear mapping, with the exact
/// logistic Hessian `−Σ₀⁻¹ − Σᵢ gᵢ(1 − gᵢ)AᵢAᵢᵀ`.
pub fn bernoulli_sigmoid_energy(
    model: &GenerativeModel,
    data: &DMatrix<f64>,
    theta: &DVector<f64>,
    precisions: &EffectivePrecisions,
) -> Result<EnergyEvaluation> {
    let sig = model
        .mapping
        .as_sigmoid_linear()
        .ok_or_else(|| Error::Domain("mapping is not sigmoid-linear".into()))?;
    let y = column(data, sig.weights.nrows())?;
    check_binary(&y)?;
    let prior = prior_term(model, theta, &precisions.prior)?;
    let mut clamped = 0;
    let ones = vec![1.0; y.len()];
    let (value, gradient, hessian) = sigmoid_counts(sig, &y, &ones, theta, &mut clamped);
    let (value, gradient, hessian, prior_residual) = finish(prior, value, gradient, hessian);
    Ok(EnergyEvaluation {
        value,
        gradient,
        hessian,
        data_residual: None,
        prior_residual,
        clamped,
    })
}

fn check_binomial(y: &DVector<f64>, trials: &[u64]) -> Result<()> {
    if trials.len() != y.len() {
        return Err(Error::Dimension(format!("{} trial counts for {} observations", trials.len(), y.len())));
    }
    for (i, (&yi, &k)) in y.iter().zip(trials).enumerate() {
        if !(yi >= 0.0 && yi.fract() == 0.0 && yi <= k as f64) || k == 0 {
            return Err(Error::Domain(format!("binomial observation {yi} at row {i} is outside 0..={k}")));
        }
    }
    Ok(())
}

fn log_binomial_coefficients(y: &DVector<f64>, trials: &[u64]) -> f64 {
    y.iter()
        .zip(trials)
        .map(|(&yi, &k)| {
            let yi = yi as u64;
            ln_factorial(k) - ln_factorial(yi) - ln_factorial(k - yi)
        })
        .sum()
}

/// Binomial observations: `yᵢ` successes out of `kᵢ` trials. Uses the exact
/// sigmoid-linear derivatives when the mapping has that structure.
pub fn binomial_energy(
    model: &GenerativeModel,
    data: &DMatrix<f64>,
    theta: &DVector<f64>,
    precisions: &EffectivePrecisions,
) -> Result<EnergyEvaluation> {
    let LikelihoodFamily::Binomial { trials } = &model.family else {
        return Err(Error::Domain("binomial energy needs the binomial family".into()));
    };
    let mapping = model.mapping.as_ref();
    let y = column(data, mapping.n_out())?;
    check_binomial(&y, trials)?;
    let prior = prior_term(model, theta, &precisions.prior)?;
    let k: Vec<f64> = trials.iter().map(|&k| k as f64).collect();
    let mut clamped = 0;

    let (value, gradient, hessian) = if let Some(sig) = mapping.as_sigmoid_linear() {
        sigmoid_counts(sig, &y, &k, theta, &mut clamped)
    } else {
        let g = model::eval_checked(mapping, theta, None)?;
        let jac = model::jacobian_checked(mapping, theta)?;
        let mut value = 0.0;
        let mut weights_grad = DVector::zeros(y.len());
        let mut weights_hess = DVector::zeros(y.len());
        for i in 0..y.len() {
            let gi = clamp_probability(g[i], &mut clamped);
            value += y[i] * gi.ln() + (k[i] - y[i]) * (1.0 - gi).ln();
            weights_grad[i] = (y[i] - k[i] * gi) / (gi * (1.0 - gi));
            weights_hess[i] = y[i] / (gi * gi) + (k[i] - y[i]) / ((1.0 - gi) * (1.0 - gi));
        }
        (value, jac.transpose() * weights_grad, -weighted_gram(&jac, &weights_hess, theta.len()))
    };
    let value = value + log_binomial_coefficients(&y, trials);
    let (value, gradient, hessian, prior_residual) = finish(prior, value, gradient, hessian);
    Ok(EnergyEvaluation {
        value,
        gradient,
        hessian,
        data_residual: None,
        prior_residual,
        clamped,
    })
}

/// Multinomial observations: row `i` holds `m` outcome counts summing to `kᵢ`;
/// `g_{ij}(θ)` are the matching outcome probabilities. First-order Hessian
/// `−Σ₀⁻¹ − Σᵢⱼ y_ij/g_ij² ∂g_ij ∂g_ijᵀ`.
pub fn multinomial_energy(
    model: &GenerativeModel,
    data: &DMatrix<f64>,
    theta: &DVector<f64>,
    precisions: &EffectivePrecisions,
) -> Result<EnergyEvaluation> {
    let LikelihoodFamily::Multinomial { trials, outcomes } = &model.family else {
        return Err(Error::Domain("multinomial energy needs the multinomial family".into()));
    };
    let m = *outcomes;
    let n_y = data.nrows();
    if data.ncols() != m {
        return Err(Error::Dimension(format!("expected {m} count columns, got {}", data.ncols())));
    }
    if trials.len() != n_y {
        return Err(Error::Dimension(format!("{} trial counts for {n_y} observations", trials.len())));
    }
    for (i, row) in data.row_iter().enumerate() {
        if row.iter().any(|&v| !(v >= 0.0 && v.fract() == 0.0)) {
            return Err(Error::Domain(format!("multinomial row {i} has non-integer or negative counts")));
        }
        let total: f64 = row.iter().sum();
        if total != trials[i] as f64 {
            return Err(Error::Domain(format!(
                "multinomial support violated at row {i}: counts sum to {total} but k = {}",
                trials[i]
            )));
        }
    }
    let mapping = model.mapping.as_ref();
    if mapping.n_out() != n_y * m {
        return Err(Error::Dimension(format!(
            "mapping produces {} outputs, expected {}",
            mapping.n_out(),
            n_y * m
        )));
    }
    let prior = prior_term(model, theta, &precisions.prior)?;
    let g = model::eval_checked(mapping, theta, None)?;
    let jac = model::jacobian_checked(mapping, theta)?;

    let mut clamped = 0;
    let mut value = 0.0;
    let mut weights_grad = DVector::zeros(n_y * m);
    let mut weights_hess = DVector::zeros(n_y * m);
    for i in 0..n_y {
        let mut coefficient = ln_factorial(trials[i]);
        for j in 0..m {
            let idx = i * m + j;
            let yij = data[(i, j)];
            let gij = clamp_probability(g[idx], &mut clamped);
            coefficient -= ln_factorial(yij as u64);
            value += yij * gij.ln();
            weights_grad[idx] = yij / gij;
            weights_hess[idx] = yij / (gij * gij);
        }
        value += coefficient;
    }
    let gradient = jac.transpose() * weights_grad;
    let hessian = -weighted_gram(&jac, &weights_hess, theta.len());
    let (value, gradient, hessian, prior_residual) = finish(prior, value, gradient, hessian);
    Ok(EnergyEvaluation {
        value,
        gradient,
        hessian,
        data_residual: None,
        prior_residual,
        clamped,
    })
}

/// Dispatch on the model's family, taking the sigmoid fast path when the
/// mapping exposes it.
pub fn variational_energy(
    model: &GenerativeModel,
    data: &DMatrix<f64>,
    theta: &DVector<f64>,
    precisions: &EffectivePrecisions,
) -> Result<EnergyEvaluation> {
    match &model.family {
        LikelihoodFamily::Gaussian { .. } => gaussian_energy(model, data, theta, precisions),
        LikelihoodFamily::Bernoulli if model.mapping.as_sigmoid_linear().is_some() => {
            bernoulli_sigmoid_energy(model, data, theta, precisions)
        }
        LikelihoodFamily::Bernoulli => bernoulli_energy(model, data, theta, precisions),
        LikelihoodFamily::Binomial { .. } => binomial_energy(model, data, theta, precisions),
        LikelihoodFamily::Multinomial { .. } => multinomial_energy(model, data, theta, precisions),
    }
}

/// Whether the family/mapping pair has an exact (not Gauss–Newton) Hessian.
pub fn has_exact_hessian(model: &GenerativeModel) -> bool {
    match &model.family {
        LikelihoodFamily::Gaussian { .. } => model.mapping.is_affine(),
        LikelihoodFamily::Bernoulli | LikelihoodFamily::Binomial { .. } => model.mapping.as_sigmoid_linear().is_some(),
        LikelihoodFamily::Multinomial { .. } => false,
    }
}
