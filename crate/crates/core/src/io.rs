//! File formats: TOML model and GLM problem files, CSV observations and JSON
//! fit reports.
//!
//! A model file looks like
//!
//! ```toml
//! [prior]
//! mean = [0.0, 0.0]
//! variance = 4.0            # or cov = [[...], [...]]
//!
//! [family]
//! kind = "gaussian"         # gaussian | bernoulli | binomial | multinomial
//! noise_variance = 0.5      # or precision = [[...]]; identity by default
//!
//! [mapping]
//! kind = "linear"           # linear | sigmoid-linear | softmax-linear
//! design = [[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]]
//!
//! [hyperpriors.noise]
//! a0 = 1.0
//! b0 = 1.0
//! ```

use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::Figure1Config;
use crate::glm::GlmProblem;
use crate::hyperparams::GammaPosterior;
use crate::linalg::{matrix_from_rows, matrix_to_rows};
use crate::model::{
    GaussianPrior, GenerativeModel, LikelihoodFamily, LinearMapping, ObservationMapping, SigmoidLinear,
    SoftmaxLinear,
};
use crate::optimizer::FitReport;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub prior: PriorSpec,
    pub family: FamilySpec,
    pub mapping: MappingSpec,
    #[serde(default)]
    pub hyperpriors: HyperpriorSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub mean: Vec<f64>,
    pub cov: Option<Vec<Vec<f64>>>,
    /// Isotropic alternative to `cov`.
    pub variance: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum FamilySpec {
    Gaussian {
        precision: Option<Vec<Vec<f64>>>,
        noise_variance: Option<f64>,
    },
    Bernoulli,
    Binomial {
        trials: Vec<u64>,
    },
    Multinomial {
        trials: Vec<u64>,
        outcomes: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MappingSpec {
    Linear {
        design: Vec<Vec<f64>>,
        /// Declared Jacobian, for exercising the gradient checker.
        jacobian: Option<Vec<Vec<f64>>>,
    },
    SigmoidLinear {
        weights: Vec<Vec<f64>>,
        offsets: Option<Vec<f64>>,
    },
    SoftmaxLinear {
        design: Vec<Vec<f64>>,
        offsets: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperpriorSpec {
    pub noise: Option<GammaSpec>,
    pub parameters: Option<GammaSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaSpec {
    pub a0: f64,
    pub b0: f64,
    /// `"prior-precision"` (default) or an explicit matrix.
    pub basis: Option<BasisSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BasisSpec {
    Named(String),
    Matrix(Vec<Vec<f64>>),
    Components(Vec<Vec<Vec<f64>>>),
}

fn parse_err(what: &str, e: impl std::fmt::Display) -> Error {
    Error::Parse(format!("{what}: {e}"))
}

impl ModelFile {
    pub fn into_model(self) -> Result<GenerativeModel> {
        let n = self.prior.mean.len();
        let cov = match (self.prior.cov, self.prior.variance) {
            (Some(rows), None) => matrix_from_rows(&rows)?,
            (None, Some(v)) => DMatrix::identity(n, n) * v,
            (None, None) => return Err(Error::Parse("prior needs either `cov` or `variance`".into())),
            (Some(_), Some(_)) => return Err(Error::Parse("prior has both `cov` and `variance`".into())),
        };
        let prior = GaussianPrior::new(DVector::from_vec(self.prior.mean), cov);

        let outcomes = match &self.family {
            FamilySpec::Multinomial { outcomes, .. } => Some(*outcomes),
            _ => None,
        };
        let mapping: Arc<dyn ObservationMapping> = match self.mapping {
            MappingSpec::Linear { design, jacobian } => {
                let mut m = LinearMapping::new(matrix_from_rows(&design)?);
                m.declared_jacobian = jacobian.map(|j| matrix_from_rows(&j)).transpose()?;
                Arc::new(m)
            }
            MappingSpec::SigmoidLinear { weights, offsets } => {
                let w = matrix_from_rows(&weights)?;
                let b = offsets.map_or_else(|| DVector::zeros(w.nrows()), DVector::from_vec);
                Arc::new(SigmoidLinear::new(w, b)?)
            }
            MappingSpec::SoftmaxLinear { design, offsets } => {
                let m = outcomes.ok_or_else(|| Error::Parse("softmax-linear mapping needs the multinomial family".into()))?;
                let x = matrix_from_rows(&design)?;
                let b = offsets.map_or_else(|| DVector::zeros(x.nrows()), DVector::from_vec);
                Arc::new(SoftmaxLinear::new(x, b, m)?)
            }
        };
        let n_out = mapping.n_out();

        let family = match self.family {
            FamilySpec::Gaussian { precision, noise_variance } => {
                let precision = match (precision, noise_variance) {
                    (Some(rows), None) => matrix_from_rows(&rows)?,
                    (None, Some(v)) if v > 0.0 => DMatrix::identity(n_out, n_out) / v,
                    (None, Some(v)) => return Err(Error::Parse(format!("noise_variance must be positive, got {v}"))),
                    (None, None) => DMatrix::identity(n_out, n_out),
                    (Some(_), Some(_)) => {
                        return Err(Error::Parse("family has both `precision` and `noise_variance`".into()))
                    }
                };
                LikelihoodFamily::Gaussian { precision }
            }
            FamilySpec::Bernoulli => LikelihoodFamily::Bernoulli,
            FamilySpec::Binomial { trials } => LikelihoodFamily::Binomial { trials },
            FamilySpec::Multinomial { trials, outcomes } => LikelihoodFamily::Multinomial { trials, outcomes },
        };

        let mut model = GenerativeModel::new(mapping, prior, family);
        if let Some(noise) = self.hyperpriors.noise {
            if noise.basis.is_some() {
                return Err(Error::Parse("the noise hyperprior always scales the family precision; remove `basis`".into()));
            }
            model = model.with_noise_hyperprior(noise.a0, noise.b0);
        }
        if let Some(params) = self.hyperpriors.parameters {
            model = model.with_param_hyperprior(params.a0, params.b0);
            match params.basis {
                None => {}
                Some(BasisSpec::Named(name)) if name == "prior-precision" => {}
                Some(BasisSpec::Named(name)) => {
                    return Err(Error::Parse(format!("unknown basis `{name}`; expected \"prior-precision\" or a matrix")))
                }
                Some(BasisSpec::Matrix(rows)) => model = model.with_param_basis(matrix_from_rows(&rows)?),
                Some(BasisSpec::Components(c)) => {
                    return Err(Error::Parse(format!(
                        "{} covariance components given; only a single basis matrix per hyperparameter is supported",
                        c.len()
                    )))
                }
            }
        }
        Ok(model)
    }
}

pub fn parse_model(text: &str) -> Result<GenerativeModel> {
    let file: ModelFile = toml::from_str(text).map_err(|e| parse_err("model file", e))?;
    file.into_model()
}

pub fn load_model(path: &Path) -> Result<GenerativeModel> {
    parse_model(&fs::read_to_string(path)?)
}

/// Parse comma-separated observations, one per line, with `columns` fields
/// each. Blank lines and lines starting with `#` are skipped. Errors name the
/// 1-based line.
pub fn parse_data(text: &str, columns: usize) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut values = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| parse_err("data", e))?;
        let line = record.position().map_or(rows + 1, |p| p.line() as usize);
        if record.iter().all(str::is_empty) {
            continue;
        }
        if record.len() != columns {
            return Err(Error::Parse(format!(
                "data row {line}: expected {columns} field(s), found {}",
                record.len()
            )));
        }
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Parse(format!("data row {line}, column {}: cannot parse `{field}`", j + 1)))?;
            if !v.is_finite() {
                return Err(Error::Parse(format!("data row {line}, column {}: value is not finite", j + 1)));
            }
            values.push(v);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, columns, &values))
}

pub fn load_data(path: &Path, columns: usize) -> Result<DMatrix<f64>> {
    parse_data(&fs::read_to_string(path)?, columns)
}

pub fn write_data(path: &Path, data: &DMatrix<f64>) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(|e| parse_err("data", e))?;
    for row in data.row_iter() {
        writer
            .write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| parse_err("data", e))?;
    }
    writer.flush()?;
    Ok(())
}

/// `design`, `data` and an optional `noise_basis` (identity by default).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlmFile {
    pub design: Vec<Vec<f64>>,
    pub data: Vec<f64>,
    pub noise_basis: Option<Vec<Vec<f64>>>,
}

impl GlmFile {
    pub fn into_problem(self) -> Result<GlmProblem> {
        let design = matrix_from_rows(&self.design)?;
        let data = DVector::from_vec(self.data);
        match self.noise_basis {
            Some(rows) => GlmProblem::new(design, matrix_from_rows(&rows)?, data),
            None => GlmProblem::isotropic(design, data),
        }
    }

    pub fn from_problem(problem: &GlmProblem) -> Self {
        let identity = problem.noise_basis == DMatrix::identity(problem.n_y(), problem.n_y());
        Self {
            design: matrix_to_rows(&problem.design),
            data: problem.data.iter().copied().collect(),
            noise_basis: (!identity).then(|| matrix_to_rows(&problem.noise_basis)),
        }
    }
}

pub fn parse_glm(text: &str) -> Result<GlmProblem> {
    let file: GlmFile = toml::from_str(text).map_err(|e| parse_err("GLM problem file", e))?;
    file.into_problem()
}

pub fn load_glm(path: &Path) -> Result<GlmProblem> {
    parse_glm(&fs::read_to_string(path)?)
}

pub fn glm_to_toml(problem: &GlmProblem) -> Result<String> {
    toml::to_string(&GlmFile::from_problem(problem)).map_err(|e| parse_err("GLM problem file", e))
}

/// Missing keys take their defaults; unknown keys are rejected.
pub fn parse_figure1_config(text: &str) -> Result<Figure1Config> {
    let config: Figure1Config = toml::from_str(text).map_err(|e| parse_err("figure1 config", e))?;
    config.validate()?;
    Ok(config)
}

pub fn load_figure1_config(path: &Path) -> Result<Figure1Config> {
    parse_figure1_config(&fs::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSummary {
    pub shape: f64,
    pub rate: f64,
    pub mean: f64,
    pub mean_log: f64,
}

impl From<&GammaPosterior> for GammaSummary {
    fn from(g: &GammaPosterior) -> Self {
        Self {
            shape: g.shape,
            rate: g.rate,
            mean: g.mean(),
            mean_log: g.mean_log(),
        }
    }
}

/// Serialisable view of a [`FitReport`]; field order is the output order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub family: String,
    pub converged: bool,
    pub iterations: usize,
    pub free_energy: f64,
    pub corrected_free_energy: Option<f64>,
    pub pseudo_free_energy: bool,
    pub posterior_mean: Vec<f64>,
    pub posterior_covariance: Vec<Vec<f64>>,
    pub noise_precision: Option<GammaSummary>,
    pub param_precision: Option<GammaSummary>,
    pub free_energy_trajectory: Vec<f64>,
    pub clamped_probabilities: usize,
    pub step_rejections: usize,
    pub covariance_jitter: bool,
}

impl ReportFile {
    pub fn new(model: &GenerativeModel, report: &FitReport) -> Self {
        Self {
            family: model.family.name().to_string(),
            converged: report.converged,
            iterations: report.iterations,
            free_energy: report.free_energy,
            corrected_free_energy: report.corrected_free_energy,
            pseudo_free_energy: report.pseudo_free_energy,
            posterior_mean: report.posterior.mean.iter().copied().collect(),
            posterior_covariance: matrix_to_rows(&report.posterior.covariance),
            noise_precision: report.noise_precision.as_ref().map(GammaSummary::from),
            param_precision: report.param_precision.as_ref().map(GammaSummary::from),
            free_energy_trajectory: report.free_energy_trajectory.clone(),
            clamped_probabilities: report.diagnostics.clamped_probabilities,
            step_rejections: report.diagnostics.step_rejections,
            covariance_jitter: report.diagnostics.covariance_jitter,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| parse_err("report", e))
    }
}
