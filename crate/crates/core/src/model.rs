//! Generative-model types: observation mappings, Gaussian priors, Gamma
//! hyperpriors and likelihood families, plus model validation.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result, ValidationReport};
use crate::linalg::{self, SpdFactor};

/// Base step for central differences; scaled by `1 + |θⱼ|` per coordinate.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Tolerance on `Σⱼ g_ij = 1` for multinomial mappings, checked at the prior mean.
pub const SIMPLEX_TOLERANCE: f64 = 1e-10;

/// A deterministic map `g : θ ↦ g(θ)` from parameters to predicted data
/// moments, with its Jacobian `∂g/∂θ` (`n_out × n_theta`).
///
/// Implementations must be re-entrant; the same mapping is shared across
/// concurrent fits. When `jacobian` is not overridden it falls back to
/// [`finite_difference_jacobian`].
pub trait ObservationMapping: Send + Sync + fmt::Debug {
    fn n_theta(&self) -> usize;
    fn n_out(&self) -> usize;
    fn eval(&self, theta: &DVector<f64>) -> Result<DVector<f64>>;

    fn jacobian(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        finite_difference_jacobian(self, theta, DEFAULT_FD_STEP)
    }

    /// Exposes the sigmoid-linear structure so the energy can use the exact
    /// logistic Hessian.
    fn as_sigmoid_linear(&self) -> Option<&SigmoidLinear> {
        None
    }

    /// `g` is affine in θ, so Gauss–Newton Hessians of Gaussian energies are
    /// exact.
    fn is_affine(&self) -> bool {
        false
    }
}

/// Central-difference Jacobian. Column `j` is
/// `(g(θ + hⱼeⱼ) − g(θ − hⱼeⱼ)) / (2hⱼ)` with `hⱼ = step · (1 + |θⱼ|)`.
pub fn finite_difference_jacobian<M: ObservationMapping + ?Sized>(
    mapping: &M,
    theta: &DVector<f64>,
    step: f64,
) -> Result<DMatrix<f64>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {step}")));
    }
    check_len("theta", theta.len(), mapping.n_theta())?;
    let n_out = mapping.n_out();
    let mut jac = DMatrix::zeros(n_out, theta.len());
    let mut probe = theta.clone();
    for j in 0..theta.len() {
        let h = step * (1.0 + theta[j].abs());
        probe[j] = theta[j] + h;
        let plus = eval_checked(mapping, &probe, Some(j))?;
        probe[j] = theta[j] - h;
        let minus = eval_checked(mapping, &probe, Some(j))?;
        probe[j] = theta[j];
        jac.set_column(j, &((plus - minus) / (2.0 * h)));
    }
    Ok(jac)
}

/// Evaluate `g(θ)` and reject wrong lengths or non-finite outputs.
pub(crate) fn eval_checked<M: ObservationMapping + ?Sized>(
    mapping: &M,
    theta: &DVector<f64>,
    coordinate: Option<usize>,
) -> Result<DVector<f64>> {
    let out = mapping.eval(theta)?;
    check_len("mapping output", out.len(), mapping.n_out())?;
    if let Some(output) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::Evaluation { output, coordinate });
    }
    Ok(out)
}

pub(crate) fn jacobian_checked<M: ObservationMapping + ?Sized>(
    mapping: &M,
    theta: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let jac = mapping.jacobian(theta)?;
    if jac.nrows() != mapping.n_out() || jac.ncols() != mapping.n_theta() {
        return Err(Error::Dimension(format!(
            "jacobian is {}x{}, expected {}x{}",
            jac.nrows(),
            jac.ncols(),
            mapping.n_out(),
            mapping.n_theta()
        )));
    }
    if let Some(k) = jac.iter().position(|v| !v.is_finite()) {
        return Err(Error::Evaluation {
            output: k % jac.nrows().max(1),
            coordinate: Some(k / jac.nrows().max(1)),
        });
    }
    Ok(jac)
}

fn check_len(what: &str, got: usize, expected: usize) -> Result<()> {
    if got == expected {
        Ok(())
    } else {
        Err(Error::Dimension(format!("{what} has length {got}, expected {expected}")))
    }
}

/// `g(θ) = Xθ`.
#[derive(Debug, Clone)]
pub struct LinearMapping {
    pub design: DMatrix<f64>,
    /// Declared Jacobian. Defaults to the design matrix; a different value is
    /// only useful for exercising gradient checks.
    pub declared_jacobian: Option<DMatrix<f64>>,
}

impl LinearMapping {
    pub fn new(design: DMatrix<f64>) -> Self {
        Self {
            design,
            declared_jacobian: None,
        }
    }
}

impl ObservationMapping for LinearMapping {
    fn n_theta(&self) -> usize {
        self.design.ncols()
    }
    fn n_out(&self) -> usize {
        self.design.nrows()
    }
    fn eval(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("theta", theta.len(), self.n_theta())?;
        Ok(&self.design * theta)
    }
    fn jacobian(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_len("theta", theta.len(), self.n_theta())?;
        Ok(self.declared_jacobian.clone().unwrap_or_else(|| self.design.clone()))
    }
    fn is_affine(&self) -> bool {
        true
    }
}

/// Logistic mapping `gᵢ(θ) = 1 / (1 + exp(−Aᵢᵀθ + bᵢ))`.
///
/// Row `i` of `weights` holds `Aᵢᵀ`; `offsets[i]` is `bᵢ`.
#[derive(Debug, Clone)]
pub struct SigmoidLinear {
    pub weights: DMatrix<f64>,
    pub offsets: DVector<f64>,
}

impl SigmoidLinear {
    pub fn new(weights: DMatrix<f64>, offsets: DVector<f64>) -> Result<Self> {
        check_len("sigmoid offsets", offsets.len(), weights.nrows())?;
        Ok(Self { weights, offsets })
    }

    /// Linear predictor `Aᵢᵀθ − bᵢ`.
    pub fn logits(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.weights * theta - &self.offsets
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ObservationMapping for SigmoidLinear {
    fn n_theta(&self) -> usize {
        self.weights.ncols()
    }
    fn n_out(&self) -> usize {
        self.weights.nrows()
    }
    fn eval(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("theta", theta.len(), self.n_theta())?;
        Ok(self.logits(theta).map(sigmoid))
    }
    fn jacobian(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let g = self.eval(theta)?;
        let mut jac = self.weights.clone();
        for (i, mut row) in jac.row_iter_mut().enumerate() {
            row *= g[i] * (1.0 - g[i]);
        }
        Ok(jac)
    }
    fn as_sigmoid_linear(&self) -> Option<&SigmoidLinear> {
        Some(self)
    }
}

/// Softmax over contiguous blocks of `outcomes` logits:
/// `g_{i·}(θ) = softmax(X_{i·}θ + c_{i·})`, where `X_{i·}` is the block of
/// `outcomes` rows of `design` belonging to observation `i`.
#[derive(Debug, Clone)]
pub struct SoftmaxLinear {
    pub design: DMatrix<f64>,
    pub offsets: DVector<f64>,
    pub outcomes: usize,
}

impl SoftmaxLinear {
    pub fn new(design: DMatrix<f64>, offsets: DVector<f64>, outcomes: usize) -> Result<Self> {
        if outcomes < 2 {
            return Err(Error::Domain("softmax mapping needs at least two outcomes".into()));
        }
        if !design.nrows().is_multiple_of(outcomes) {
            return Err(Error::Dimension(format!(
                "softmax design has {} rows, not a multiple of {outcomes} outcomes",
                design.nrows()
            )));
        }
        check_len("softmax offsets", offsets.len(), design.nrows())?;
        Ok(Self {
            design,
            offsets,
            outcomes,
        })
    }
}

impl ObservationMapping for SoftmaxLinear {
    fn n_theta(&self) -> usize {
        self.design.ncols()
    }
    fn n_out(&self) -> usize {
        self.design.nrows()
    }
    fn eval(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("theta", theta.len(), self.n_theta())?;
        let mut z = &self.design * theta + &self.offsets;
        for block in z.as_mut_slice().chunks_mut(self.outcomes) {
            let max = block.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in block.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in block.iter_mut() {
                *v /= total;
            }
        }
        Ok(z)
    }
    fn jacobian(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let g = self.eval(theta)?;
        let m = self.outcomes;
        let mut jac = DMatrix::zeros(self.n_out(), self.n_theta());
        for start in (0..self.n_out()).step_by(m) {
            // mean design row under the block's probabilities
            let mut mean_row = nalgebra::RowDVector::zeros(self.n_theta());
            for k in start..start + m {
                mean_row += self.design.row(k) * g[k];
            }
            for k in start..start + m {
                jac.set_row(k, &((self.design.row(k) - &mean_row) * g[k]));
            }
        }
        Ok(jac)
    }
}

type MapFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;
type JacFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;

/// A mapping backed by closures, with an optional analytic Jacobian.
pub struct FnMapping {
    n_theta: usize,
    n_out: usize,
    f: Box<MapFn>,
    jac: Option<Box<JacFn>>,
}

impl FnMapping {
    pub fn new<F>(n_theta: usize, n_out: usize, f: F) -> Self
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        Self {
            n_theta,
            n_out,
            f: Box::new(f),
            jac: None,
        }
    }

    pub fn with_jacobian<J>(mut self, jac: J) -> Self
    where
        J: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.jac = Some(Box::new(jac));
        self
    }
}

impl fmt::Debug for FnMapping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnMapping")
            .field("n_theta", &self.n_theta)
            .field("n_out", &self.n_out)
            .field("analytic_jacobian", &self.jac.is_some())
            .finish()
    }
}

impl ObservationMapping for FnMapping {
    fn n_theta(&self) -> usize {
        self.n_theta
    }
    fn n_out(&self) -> usize {
        self.n_out
    }
    fn eval(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("theta", theta.len(), self.n_theta)?;
        Ok((self.f)(theta))
    }
    fn jacobian(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        match &self.jac {
            Some(j) => {
                check_len("theta", theta.len(), self.n_theta)?;
                Ok(j(theta))
            }
            None => finite_difference_jacobian(self, theta, DEFAULT_FD_STEP),
        }
    }
}

/// `p(θ|m) = N(mean, cov)`.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianPrior {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { mean, cov }
    }

    /// Isotropic prior `N(mean, variance · I)`.
    pub fn isotropic(mean: DVector<f64>, variance: f64) -> Self {
        let n = mean.len();
        Self {
            mean,
            cov: DMatrix::identity(n, n) * variance,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `Σ₀⁻¹`, via Cholesky.
    pub fn precision(&self) -> Result<DMatrix<f64>> {
        SpdFactor::strict(&self.cov)
            .map(|f| f.inverse())
            .ok_or_else(|| Error::Domain("prior covariance not PD".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HyperpriorTarget {
    Noise,
    Parameters,
}

/// `Ga(shape, rate)` prior on a precision hyperparameter. `(0, 0)` is the
/// improper Jeffreys prior `p(λ) ∝ 1/λ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaHyperprior {
    pub shape: f64,
    pub rate: f64,
    pub target: HyperpriorTarget,
}

impl GammaHyperprior {
    pub fn new(shape: f64, rate: f64, target: HyperpriorTarget) -> Self {
        Self { shape, rate, target }
    }

    pub fn jeffreys(target: HyperpriorTarget) -> Self {
        Self::new(0.0, 0.0, target)
    }

    pub fn is_jeffreys(&self) -> bool {
        self.shape == 0.0 && self.rate == 0.0
    }

    /// Proper iff both parameters are strictly positive.
    pub fn is_proper(&self) -> bool {
        self.shape > 0.0 && self.rate > 0.0
    }

    /// Prior mean `a⁰/b⁰`, or 1 when the prior is improper.
    pub fn initial_mean(&self) -> f64 {
        if self.is_proper() {
            self.shape / self.rate
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone)]
pub enum LikelihoodFamily {
    /// `y ~ N(g(θ), Q)` with `Q⁻¹ = λ_y Φ_y`; `λ_y = 1` unless a noise
    /// hyperprior is attached.
    Gaussian { precision: DMatrix<f64> },
    Bernoulli,
    Binomial { trials: Vec<u64> },
    /// Data rows hold `outcomes` contiguous counts per observation.
    Multinomial { trials: Vec<u64>, outcomes: usize },
}

impl LikelihoodFamily {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Gaussian { .. } => "gaussian",
            Self::Bernoulli => "bernoulli",
            Self::Binomial { .. } => "binomial",
            Self::Multinomial { .. } => "multinomial",
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self, Self::Gaussian { .. })
    }

    /// Columns expected in the observation matrix.
    pub fn data_columns(&self) -> usize {
        match self {
            Self::Multinomial { outcomes, .. } => *outcomes,
            _ => 1,
        }
    }
}

/// Likelihood family, observation mapping and Gaussian prior, plus optional
/// Gamma hyperpriors on the noise and parameter precisions.
///
/// With a parameter hyperprior the prior precision becomes `λ_θ Φ_θ`; `Φ_θ`
/// defaults to the inverse prior covariance.
#[derive(Debug, Clone)]
pub struct GenerativeModel {
    pub mapping: Arc<dyn ObservationMapping>,
    pub prior: GaussianPrior,
    pub family: LikelihoodFamily,
    pub noise_hyperprior: Option<GammaHyperprior>,
    pub param_precision_hyperprior: Option<GammaHyperprior>,
    pub param_precision_basis: Option<DMatrix<f64>>,
}

impl GenerativeModel {
    pub fn new(mapping: Arc<dyn ObservationMapping>, prior: GaussianPrior, family: LikelihoodFamily) -> Self {
        Self {
            mapping,
            prior,
            family,
            noise_hyperprior: None,
            param_precision_hyperprior: None,
            param_precision_basis: None,
        }
    }

    pub fn with_noise_hyperprior(mut self, shape: f64, rate: f64) -> Self {
        self.noise_hyperprior = Some(GammaHyperprior::new(shape, rate, HyperpriorTarget::Noise));
        self
    }

    pub fn with_param_hyperprior(mut self, shape: f64, rate: f64) -> Self {
        self.param_precision_hyperprior = Some(GammaHyperprior::new(shape, rate, HyperpriorTarget::Parameters));
        self
    }

    pub fn with_param_basis(mut self, basis: DMatrix<f64>) -> Self {
        self.param_precision_basis = Some(basis);
        self
    }

    pub fn n_theta(&self) -> usize {
        self.prior.dim()
    }

    pub fn has_hyperpriors(&self) -> bool {
        self.noise_hyperprior.is_some() || self.param_precision_hyperprior.is_some()
    }

    /// `Φ_θ`: the explicit basis, or `Σ₀⁻¹`.
    pub fn param_basis(&self) -> Result<DMatrix<f64>> {
        match &self.param_precision_basis {
            Some(b) => Ok(b.clone()),
            None => self.prior.precision(),
        }
    }
}

/// Check every model/data invariant and report the violations.
///
/// `data` holds one observation per row: a single column for the Gaussian,
/// Bernoulli and binomial families, `m` outcome counts for multinomial.
pub fn validate_model(model: &GenerativeModel, data: &DMatrix<f64>) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n_theta = model.n_theta();
    let mapping = &model.mapping;

    if mapping.n_theta() != n_theta {
        report.push(format!(
            "mapping expects {} parameters but the prior mean has {n_theta}",
            mapping.n_theta()
        ));
    }
    let cov = &model.prior.cov;
    if cov.nrows() != n_theta || cov.ncols() != n_theta {
        report.push(format!(
            "prior covariance is {}x{}, expected {n_theta}x{n_theta}",
            cov.nrows(),
            cov.ncols()
        ));
    } else {
        if !linalg::is_symmetric(cov, 1e-10) {
            report.push("prior covariance not symmetric");
        }
        if SpdFactor::strict(cov).is_none() {
            report.push("prior covariance not PD");
        }
    }
    if model.prior.mean.iter().any(|v| !v.is_finite()) {
        report.push("prior mean has non-finite entries");
    }
    if data.iter().any(|v| !v.is_finite()) {
        report.push("data contain non-finite values");
    }

    let n_y = data.nrows();
    let cols = model.family.data_columns();
    if data.ncols() != cols && n_y > 0 {
        report.push(format!(
            "{} data need {cols} column(s) per row, got {}",
            model.family.name(),
            data.ncols()
        ));
    }

    match &model.family {
        LikelihoodFamily::Gaussian { precision } => {
            if precision.nrows() != n_y || precision.ncols() != n_y {
                report.push(format!(
                    "noise precision basis is {}x{}, expected {n_y}x{n_y}",
                    precision.nrows(),
                    precision.ncols()
                ));
            } else {
                if !linalg::is_symmetric(precision, 1e-10) {
                    report.push("noise precision basis not symmetric");
                }
                if SpdFactor::strict(precision).is_none() {
                    report.push("noise precision basis not PD");
                }
            }
            check_outputs(&mut report, mapping.n_out(), n_y);
        }
        LikelihoodFamily::Bernoulli => {
            check_outputs(&mut report, mapping.n_out(), n_y);
            if let Some(i) = data.column(0).iter().position(|&v| v != 0.0 && v != 1.0) {
                report.push(format!("bernoulli observation at row {i} is not 0 or 1"));
            }
        }
        LikelihoodFamily::Binomial { trials } => {
            check_outputs(&mut report, mapping.n_out(), n_y);
            if trials.len() != n_y {
                report.push(format!("{} trial counts for {n_y} observations", trials.len()));
            }
            if let Some(i) = trials.iter().position(|&k| k < 1) {
                report.push(format!("binomial trial count at index {i} must be at least 1"));
            }
            if data.ncols() == 1 {
                for (i, (&y, &k)) in data.column(0).iter().zip(trials).enumerate() {
                    if !is_count(y) || y > k as f64 {
                        report.push(format!("binomial observation {y} at row {i} is outside 0..={k}"));
                    }
                }
            }
        }
        LikelihoodFamily::Multinomial { trials, outcomes } => {
            if *outcomes < 2 {
                report.push("multinomial family needs at least two outcomes");
            }
            check_outputs(&mut report, mapping.n_out(), n_y * outcomes);
            if trials.len() != n_y {
                report.push(format!("{} trial counts for {n_y} observations", trials.len()));
            }
            if data.ncols() == *outcomes {
                for (i, row) in data.row_iter().enumerate() {
                    if row.iter().any(|&v| !is_count(v)) {
                        report.push(format!("multinomial row {i} has non-integer or negative counts"));
                        continue;
                    }
                    let total: f64 = row.iter().sum();
                    if let Some(&k) = trials.get(i) {
                        if total != k as f64 {
                            report.push(format!(
                                "multinomial support violated at row {i}: counts sum to {total} but k = {k}"
                            ));
                        }
                    }
                }
            }
            if mapping.n_out() == n_y * outcomes && mapping.n_theta() == n_theta && *outcomes >= 2 {
                match mapping.eval(&model.prior.mean) {
                    Ok(g) => {
                        for (i, block) in g.as_slice().chunks(*outcomes).enumerate() {
                            let s: f64 = block.iter().sum();
                            if (s - 1.0).abs() > SIMPLEX_TOLERANCE {
                                report.push(format!(
                                    "multinomial mapping block {i} sums to {s} at the prior mean, not 1"
                                ));
                                break;
                            }
                        }
                    }
                    Err(e) => report.push(format!("mapping failed at the prior mean: {e}")),
                }
            }
        }
    }

    if let Some(h) = &model.noise_hyperprior {
        check_hyperprior(&mut report, h, HyperpriorTarget::Noise);
        if !model.family.is_gaussian() {
            report.push("noise hyperprior is only admitted for the gaussian family");
        }
    }
    if let Some(h) = &model.param_precision_hyperprior {
        check_hyperprior(&mut report, h, HyperpriorTarget::Parameters);
    }
    if let Some(basis) = &model.param_precision_basis {
        if basis.nrows() != n_theta || basis.ncols() != n_theta {
            report.push(format!(
                "parameter precision basis is {}x{}, expected {n_theta}x{n_theta}",
                basis.nrows(),
                basis.ncols()
            ));
        } else if !linalg::is_symmetric(basis, 1e-10) || SpdFactor::strict(basis).is_none() {
            report.push("parameter precision basis not symmetric PD");
        }
        if model.param_precision_hyperprior.is_none() {
            report.push("parameter precision basis given without a parameter hyperprior");
        }
    }
    report
}

fn check_outputs(report: &mut ValidationReport, n_out: usize, expected: usize) {
    if n_out != expected {
        report.push(format!("mapping produces {n_out} outputs, data need {expected}"));
    }
}

fn check_hyperprior(report: &mut ValidationReport, h: &GammaHyperprior, slot: HyperpriorTarget) {
    if h.target != slot {
        report.push(format!("hyperprior targets {:?} but sits in the {:?} slot", h.target, slot));
    }
    if !(h.shape >= 0.0 && h.rate >= 0.0 && h.shape.is_finite() && h.rate.is_finite()) {
        report.push(format!(
            "{:?} hyperprior needs finite a0 >= 0 and b0 >= 0, got ({}, {})",
            slot, h.shape, h.rate
        ));
    } else if !h.is_proper() && !h.is_jeffreys() {
        report.push(format!(
            "{:?} hyperprior ({}, {}) is improper; only (0, 0) is admitted",
            slot, h.shape, h.rate
        ));
    }
}

fn is_count(v: f64) -> bool {
    v >= 0.0 && v.fract() == 0.0
}
