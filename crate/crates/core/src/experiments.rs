//! Seeded simulation of datasets and the evidence-versus-`F∞` experiment.
//!
//! Every random draw comes from a `ChaCha8Rng` whose seed is derived from the
//! user seed and the cell coordinates with a SplitMix64 mix, so results do not
//! depend on scheduling or thread count.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{self, GlmProblem};
use crate::model::{GenerativeModel, LikelihoodFamily};

/// SplitMix64 finaliser.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one stream: the user seed and each coordinate are folded in turn
/// through SplitMix64.
pub fn stream_seed(seed: u64, coordinates: &[u64]) -> u64 {
    coordinates
        .iter()
        .fold(splitmix64(seed), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn stream_rng(seed: u64, coordinates: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, coordinates))
}

fn standard_normal_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

#[derive(Debug, Clone)]
pub struct SimulatedGlm {
    pub problem: GlmProblem,
    pub theta_true: DVector<f64>,
}

/// `X`, `θ` and the noise are i.i.d. standard normal, `Φ_y = I`,
/// `y = Xθ + ε`. A rank-deficient `X` is redrawn.
pub fn simulate_glm(n_theta: usize, n_y: usize, seed: u64) -> Result<SimulatedGlm> {
    if n_y <= n_theta {
        return Err(Error::Dimension(format!("need n_y > n_theta, got {n_y} <= {n_theta}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let design = DMatrix::from_fn(n_y, n_theta, |_, _| rng.sample(StandardNormal));
        let theta_true = standard_normal_vector(&mut rng, n_theta);
        let noise = standard_normal_vector(&mut rng, n_y);
        let data = &design * &theta_true + noise;
        match GlmProblem::isotropic(design, data) {
            Ok(problem) => return Ok(SimulatedGlm { problem, theta_true }),
            Err(Error::RankDeficient) => continue,
            Err(e) => return Err(e),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    /// Observations in the layout the family expects.
    pub data: DMatrix<f64>,
    pub theta_true: DVector<f64>,
}

/// `θ ~ N(μ₀, Σ₀)`.
pub fn sample_prior(model: &GenerativeModel, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
    let n = model.n_theta();
    let z = standard_normal_vector(rng, n);
    let chol = nalgebra::Cholesky::new(model.prior.cov.clone())
        .ok_or_else(|| Error::Domain("prior covariance not PD".into()))?;
    Ok(&model.prior.mean + chol.l() * z)
}

/// Draw `θ` from the prior and Bernoulli, binomial or multinomial outcomes
/// from `g(θ)`.
pub fn simulate_categorical(model: &GenerativeModel, seed: u64) -> Result<Simulation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta_true = sample_prior(model, &mut rng)?;
    let g = model.mapping.eval(&theta_true)?;
    let data = sample_categorical(&model.family, &g, &mut rng)?;
    Ok(Simulation { data, theta_true })
}

/// Outcomes given success or outcome probabilities `g`.
pub fn sample_categorical(family: &LikelihoodFamily, g: &DVector<f64>, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    let mut draw = |p: f64| rng.random::<f64>() < p;
    match family {
        LikelihoodFamily::Bernoulli => Ok(DMatrix::from_fn(g.len(), 1, |i, _| f64::from(u8::from(draw(g[i]))))),
        LikelihoodFamily::Binomial { trials } => {
            if trials.len() != g.len() {
                return Err(Error::Dimension(format!("{} trial counts for {} outputs", trials.len(), g.len())));
            }
            Ok(DMatrix::from_fn(g.len(), 1, |i, _| {
                (0..trials[i]).filter(|_| draw(g[i])).count() as f64
            }))
        }
        LikelihoodFamily::Multinomial { trials, outcomes } => {
            let m = *outcomes;
            if g.len() != trials.len() * m {
                return Err(Error::Dimension(format!(
                    "{} outputs for {} rows of {m} outcomes",
                    g.len(),
                    trials.len()
                )));
            }
            let mut data = DMatrix::zeros(trials.len(), m);
            for (i, &k) in trials.iter().enumerate() {
                let probs = g.rows(i * m, m);
                for _ in 0..k {
                    let u: f64 = rng.random::<f64>() * probs.sum();
                    let mut acc = 0.0;
                    let mut outcome = m - 1;
                    for (j, p) in probs.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            outcome = j;
                            break;
                        }
                    }
                    data[(i, outcome)] += 1.0;
                }
            }
            Ok(data)
        }
        LikelihoodFamily::Gaussian { .. } => Err(Error::Domain("gaussian family is not categorical".into())),
    }
}

/// Draw `θ` from the prior and `y ~ N(g(θ), Φ_y⁻¹)`.
pub fn simulate_gaussian(model: &GenerativeModel, seed: u64) -> Result<Simulation> {
    let LikelihoodFamily::Gaussian { precision } = &model.family else {
        return Err(Error::Domain("model is not gaussian".into()));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta_true = sample_prior(model, &mut rng)?;
    let g = model.mapping.eval(&theta_true)?;
    let z = standard_normal_vector(&mut rng, g.len());
    // With Φ = LLᵀ, L⁻ᵀz has covariance Φ⁻¹.
    let chol = nalgebra::Cholesky::new(precision.clone())
        .ok_or_else(|| Error::Domain("noise precision not PD".into()))?;
    let noise = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::NumericalFailure("noise precision factor is singular".into()))?;
    let y = g + noise;
    Ok(Simulation {
        data: DMatrix::from_column_slice(y.len(), 1, y.as_slice()),
        theta_true,
    })
}

/// Dispatch on the family.
pub fn simulate(model: &GenerativeModel, seed: u64) -> Result<Simulation> {
    match model.family {
        LikelihoodFamily::Gaussian { .. } => simulate_gaussian(model, seed),
        _ => simulate_categorical(model, seed),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Figure1Config {
    pub n_theta_grid: Vec<usize>,
    pub n_y_grid: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    /// Largest `n_y` in the small-sample bucket.
    pub split: usize,
}

impl Default for Figure1Config {
    fn default() -> Self {
        Self {
            n_theta_grid: (1..=6).collect(),
            n_y_grid: (8..=130).step_by(2).collect(),
            replications: 8,
            seed: 1,
            split: 71,
        }
    }
}

impl Figure1Config {
    pub fn validate(&self) -> Result<()> {
        if self.n_theta_grid.is_empty() || self.n_y_grid.is_empty() || self.replications == 0 {
            return Err(Error::Domain("grids and replications must be non-empty".into()));
        }
        if self.n_theta_grid.contains(&0) {
            return Err(Error::Domain("n_theta must be positive".into()));
        }
        let max_theta = *self.n_theta_grid.iter().max().expect("non-empty");
        if let Some(&n_y) = self.n_y_grid.iter().find(|&&n_y| n_y <= max_theta) {
            return Err(Error::Domain(format!("n_y = {n_y} does not exceed the largest n_theta = {max_theta}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Figure1Row {
    pub n_theta: usize,
    pub n_y: usize,
    pub replication: usize,
    pub log_evidence: f64,
    pub f_infinity: f64,
    /// `log_evidence − f_infinity`.
    pub difference: f64,
    /// Set when the oracle failed on this draw; the values are then NaN.
    pub error: Option<String>,
}

/// Least-squares line through the per-`n_θ` mean differences of a bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketFit {
    pub n_y_min: usize,
    pub n_y_max: usize,
    pub slope: f64,
    pub intercept: f64,
    /// `(n_θ, mean difference)` pairs the line was fitted to.
    pub points: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Figure1Summary {
    pub rows: usize,
    pub failed_rows: usize,
    /// Largest sample standard deviation of the difference within a cell.
    pub max_cell_std: f64,
    pub small: Option<BucketFit>,
    pub big: Option<BucketFit>,
}

fn figure1_row(config: &Figure1Config, n_theta: usize, n_y: usize, replication: usize) -> Figure1Row {
    let seed = stream_seed(config.seed, &[n_theta as u64, n_y as u64, replication as u64]);
    let result = simulate_glm(n_theta, n_y, seed).and_then(|sim| {
        let log_evidence = glm::exact_log_evidence(&sim.problem)?;
        let f_infinity = glm::pseudo_free_energy_limit(&sim.problem)?;
        Ok((log_evidence, f_infinity))
    });
    let (log_evidence, f_infinity, error) = match result {
        Ok((l, f)) => (l, f, None),
        Err(e) => (f64::NAN, f64::NAN, Some(e.to_string())),
    };
    Figure1Row {
        n_theta,
        n_y,
        replication,
        log_evidence,
        f_infinity,
        difference: log_evidence - f_infinity,
        error,
    }
}

/// Ordinary least squares `y = intercept + slope · x`.
pub fn ols_line(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

fn bucket_fit(rows: &[Figure1Row], keep: impl Fn(usize) -> bool) -> Option<BucketFit> {
    let ok: Vec<&Figure1Row> = rows.iter().filter(|r| r.error.is_none() && keep(r.n_y)).collect();
    let mut thetas: Vec<usize> = ok.iter().map(|r| r.n_theta).collect();
    thetas.sort_unstable();
    thetas.dedup();
    let points: Vec<(usize, f64)> = thetas
        .iter()
        .map(|&t| {
            let vals: Vec<f64> = ok.iter().filter(|r| r.n_theta == t).map(|r| r.difference).collect();
            (t, vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect();
    let (slope, intercept) = ols_line(&points.iter().map(|&(t, d)| (t as f64, d)).collect::<Vec<_>>())?;
    Some(BucketFit {
        n_y_min: ok.iter().map(|r| r.n_y).min()?,
        n_y_max: ok.iter().map(|r| r.n_y).max()?,
        slope,
        intercept,
        points,
    })
}

fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

pub fn summarize_figure1(rows: &[Figure1Row], split: usize) -> Figure1Summary {
    let mut max_cell_std = 0.0_f64;
    for chunk in rows.chunk_by(|a, b| a.n_theta == b.n_theta && a.n_y == b.n_y) {
        let vals: Vec<f64> = chunk.iter().filter(|r| r.error.is_none()).map(|r| r.difference).collect();
        max_cell_std = max_cell_std.max(sample_std(&vals));
    }
    Figure1Summary {
        rows: rows.len(),
        failed_rows: rows.iter().filter(|r| r.error.is_some()).count(),
        max_cell_std,
        small: bucket_fit(rows, |n_y| n_y <= split),
        big: bucket_fit(rows, |n_y| n_y > split),
    }
}

/// Rows ordered by `(n_θ, n_y, replication)` and their summary.
pub fn run_figure1(config: &Figure1Config) -> Result<(Vec<Figure1Row>, Figure1Summary)> {
    config.validate()?;
    let cells: Vec<(usize, usize, usize)> = config
        .n_theta_grid
        .iter()
        .flat_map(|&t| {
            config
                .n_y_grid
                .iter()
                .flat_map(move |&n| (0..config.replications).map(move |r| (t, n, r)))
        })
        .collect();
    let mut rows: Vec<Figure1Row> = cells
        .par_iter()
        .map(|&(t, n, r)| figure1_row(config, t, n, r))
        .collect();
    rows.sort_by_key(|r| (r.n_theta, r.n_y, r.replication));
    let summary = summarize_figure1(&rows, config.split);
    Ok((rows, summary))
}

/// Write `rows.csv` and `summary.txt` (TOML) into `dir`.
pub fn write_figure1(dir: &Path, rows: &[Figure1Row], summary: &Figure1Summary) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut writer = csv::Writer::from_path(dir.join("rows.csv")).map_err(|e| Error::Parse(e.to_string()))?;
    writer
        .write_record(["n_theta", "n_y", "replication", "log_evidence", "f_infinity", "difference", "error"])
        .map_err(|e| Error::Parse(e.to_string()))?;
    for r in rows {
        writer
            .write_record([
                r.n_theta.to_string(),
                r.n_y.to_string(),
                r.replication.to_string(),
                r.log_evidence.to_string(),
                r.f_infinity.to_string(),
                r.difference.to_string(),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(|e| Error::Parse(e.to_string()))?;
    }
    writer.flush()?;
    let text = toml::to_string(summary).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(dir.join("summary.txt"), text)?;
    Ok(())
}
