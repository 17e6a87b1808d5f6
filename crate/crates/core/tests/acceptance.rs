//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Exits 0 unless `VLAPLACE_ACCEPTANCE_STRICT=1` is set and a criterion
//! fails, so known-red criteria are reported without breaking the build.

mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use statrs::function::gamma::ln_gamma;
use vlaplace::energy::{variational_energy, EffectivePrecisions, EnergyEvaluation};
use vlaplace::experiments::{run_figure1, Figure1Config};
use vlaplace::glm::{exact_log_evidence, log_evidence_by_quadrature, GlmProblem};
use vlaplace::hyperparams::{corrected_free_energy, gamma_kl, vb_fit, GammaPosterior};
use vlaplace::model::{
    FnMapping, GaussianPrior, GenerativeModel, LikelihoodFamily, LinearMapping, SigmoidLinear, SoftmaxLinear,
};
use vlaplace::optimizer::{fit, FitOptions};
use vlaplace::quadrature::{integrate, QuadratureOptions};

use common::*;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = f();
    let elapsed = start.elapsed();
    println!(
        "criterion {id} {name}: {} ({}; {:.2} s)",
        if o.passed { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64()
    );
    o.passed
}

fn within(start: Instant, limit: Duration) -> bool {
    start.elapsed() <= limit
}

fn ols_equivalence() -> Outcome {
    let start = Instant::now();
    let mut r = rng(101);
    let (mut err_mean, mut err_var) = (0.0_f64, 0.0_f64);
    let mut failures = Vec::new();
    for case in 0..50 {
        let n_theta = r.random_range(1..=5);
        let n_y = r.random_range(n_theta + 1..=50);
        let x = normal_mat(&mut r, n_y, n_theta);
        let phi = random_diagonal(&mut r, n_y, 0.5, 2.0);
        let sigma = r.random_range(0.3..3.0);
        let y = &x * normal_vec(&mut r, n_theta) + normal_vec(&mut r, n_y) * sigma;

        let gram = x.transpose() * &phi * &x;
        let ols = gram.clone().cholesky().unwrap().solve(&(x.transpose() * &phi * &y));
        let resid = &y - &x * &ols;
        let variance = resid.dot(&(&phi * &resid)) / (n_y - n_theta) as f64;

        let model = GenerativeModel::new(
            Arc::new(LinearMapping::new(x)),
            GaussianPrior::isotropic(DVector::zeros(n_theta), 1e8),
            LikelihoodFamily::Gaussian { precision: phi },
        )
        .with_noise_hyperprior(0.0, 0.0);
        match vb_fit(&model, &as_column(&y), &FitOptions::default()) {
            Ok(state) if state.converged => {
                let mu = &state.theta_posterior.mean;
                err_mean = err_mean.max((mu - &ols).norm() / ols.norm());
                let est = 1.0 / state.noise_precision.unwrap().mean();
                err_var = err_var.max((est - variance).abs() / variance);
            }
            Ok(_) => failures.push(format!("case {case} did not converge")),
            Err(e) => failures.push(format!("case {case}: {e}")),
        }
    }
    let fast = within(start, Duration::from_secs(5));
    outcome(
        failures.is_empty() && err_mean <= 1e-5 && err_var <= 1e-5 && fast,
        format!(
            "50 GLMs, max rel err mean {err_mean:.2e}, noise variance {err_var:.2e}, limit 1e-5{}",
            failure_note(&failures)
        ),
    )
}

fn failure_note(failures: &[String]) -> String {
    if failures.is_empty() {
        String::new()
    } else {
        format!("; {} failures, first: {}", failures.len(), failures[0])
    }
}

/// `log ∫∫ N(y; xθ, (λΦ)⁻¹) dθ d(log λ)` for a single-column design, by
/// nested adaptive quadrature.
fn evidence_2d(x: &DVector<f64>, phi: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let n_y = y.len() as f64;
    let s = x.dot(&(phi * x));
    let theta_hat = x.dot(&(phi * y)) / s;
    let rss = {
        let r = y - x * theta_hat;
        r.dot(&(phi * &r))
    };
    let log_det_phi: f64 = phi.clone().cholesky().unwrap().l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let log_joint = |theta: f64, u: f64| {
        let r = y - x * theta;
        0.5 * n_y * u + 0.5 * log_det_phi - 0.5 * n_y * (2.0 * std::f64::consts::PI).ln() - 0.5 * u.exp() * r.dot(&(phi * &r))
    };
    let u_star = ((n_y - 1.0) / rss).ln();
    let shift = log_joint(theta_hat, u_star);
    let nu = 0.5 * (n_y - 1.0);
    let opts = QuadratureOptions::default();
    let outer = integrate(
        |u| {
            let sd = 1.0 / (u.exp() * s).sqrt();
            integrate(
                |t| (log_joint(t, u) - shift).exp(),
                theta_hat - 40.0 * sd,
                theta_hat + 40.0 * sd,
                opts,
            )
            .map_or(f64::NAN, |i| i.value)
        },
        u_star - 50.0 / nu - 10.0,
        u_star + 6.0,
        opts,
    )
    .unwrap();
    shift + outer.value.ln()
}

fn evidence_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(202);
    let (mut err_1d, mut err_2d) = (0.0_f64, 0.0_f64);
    let mut count = 0;
    let mut failures = Vec::new();
    for n_theta in 1..=2 {
        for n_y in 3..=8 {
            for rep in 0..10 {
                let x = normal_mat(&mut r, n_y, n_theta);
                let phi = if rep % 2 == 0 {
                    random_diagonal(&mut r, n_y, 0.5, 2.0)
                } else {
                    random_spd(&mut r, n_y, 0.3)
                };
                let sigma = r.random_range(0.2..2.0);
                let y = &x * normal_vec(&mut r, n_theta) + normal_vec(&mut r, n_y) * sigma;
                let problem = match GlmProblem::new(x.clone(), phi.clone(), y.clone()) {
                    Ok(p) => p,
                    Err(e) => {
                        failures.push(format!("problem ({n_theta}, {n_y}, {rep}): {e}"));
                        continue;
                    }
                };
                count += 1;
                let exact = exact_log_evidence(&problem).unwrap();
                let quad = log_evidence_by_quadrature(&problem, QuadratureOptions::default()).unwrap();
                err_1d = err_1d.max((exact - quad).abs());
                if n_theta == 1 {
                    let full = evidence_2d(&x.column(0).into_owned(), &phi, &y);
                    err_2d = err_2d.max((exact - full).abs());
                }
            }
        }
    }
    let fast = within(start, Duration::from_secs(30));
    outcome(
        failures.is_empty() && count == 120 && err_1d <= 1e-6 && err_2d <= 1e-6 && fast,
        format!(
            "{count} problems, max |Δ log p| vs log-precision quadrature {err_1d:.2e}, vs 2-D quadrature {err_2d:.2e}, limit 1e-6{}",
            failure_note(&failures)
        ),
    )
}

fn figure1() -> Outcome {
    let start = Instant::now();
    let (_, summary) = match run_figure1(&Figure1Config::default()) {
        Ok(out) => out,
        Err(e) => return outcome(false, format!("run_figure1 failed: {e}")),
    };
    let fast = within(start, Duration::from_secs(120));
    let slope = summary.big.as_ref().map_or(f64::NAN, |b| b.slope);
    let small = summary.small.as_ref().map_or(f64::NAN, |b| b.slope);
    outcome(
        summary.failed_rows == 0 && (0.82..=1.02).contains(&slope) && summary.max_cell_std <= 1e-8 && fast,
        format!(
            "{} rows, large-n_y slope {slope:.4} in [0.82, 1.02], small-n_y slope {small:.4}, max cell std {:.2e}, failed rows {}",
            summary.rows, summary.max_cell_std, summary.failed_rows
        ),
    )
}

fn laplace_exactness() -> Outcome {
    let mut r = rng(404);
    let mut worst = 0.0_f64;
    let mut failures = Vec::new();
    for case in 0..50 {
        let n_theta = r.random_range(1..=4);
        let n_y = r.random_range(1..=12);
        let x = normal_mat(&mut r, n_y, n_theta);
        let mu0 = normal_vec(&mut r, n_theta);
        let sigma0 = random_spd(&mut r, n_theta, 0.2);
        let phi = random_spd(&mut r, n_y, 0.5);
        let y = normal_vec(&mut r, n_y) * 2.0;
        let model = GenerativeModel::new(
            Arc::new(LinearMapping::new(x.clone())),
            GaussianPrior::new(mu0.clone(), sigma0.clone()),
            LikelihoodFamily::Gaussian { precision: phi.clone() },
        );
        let cov = &x * &sigma0 * x.transpose() + phi.try_inverse().unwrap();
        let exact = gaussian_log_density(&y, &(&x * &mu0), &((&cov + cov.transpose()) * 0.5));
        match fit(&model, &as_column(&y), &FitOptions::default()) {
            Ok(report) => worst = worst.max((report.free_energy - exact).abs()),
            Err(e) => failures.push(format!("case {case}: {e}")),
        }
    }
    outcome(
        failures.is_empty() && worst <= 1e-8,
        format!("50 models, max |F − log p| {worst:.2e}, limit 1e-8{}", failure_note(&failures)),
    )
}

#[derive(Default)]
struct DerivativeErrors {
    gradient: f64,
    hessian: Option<f64>,
}

fn check_draw(model: &GenerativeModel, data: &DMatrix<f64>, theta: &DVector<f64>, hessian: bool, errs: &mut DerivativeErrors) {
    let prec = EffectivePrecisions::fixed(model).unwrap();
    let eval = variational_energy(model, data, theta, &prec).unwrap();
    let fd = fd_gradient(|t| variational_energy(model, data, t, &prec).unwrap().value, theta, 1e-3);
    errs.gradient = errs.gradient.max(scaled_error(&as_column(&eval.gradient), &as_column(&fd)));
    if hessian {
        let fd_h = fd_jacobian(|t| variational_energy(model, data, t, &prec).unwrap().gradient, theta, 1e-3);
        let err = scaled_error(&eval.hessian, &fd_h);
        errs.hessian = Some(errs.hessian.unwrap_or(0.0).max(err));
    }
}

fn random_counts(r: &mut rand_chacha::ChaCha8Rng, trials: &[u64]) -> DMatrix<f64> {
    DMatrix::from_fn(trials.len(), 1, |i, _| r.random_range(0..=trials[i]) as f64)
}

fn derivative_suites() -> Outcome {
    let mut r = rng(505);
    let mut gaussian = DerivativeErrors::default();
    let mut bernoulli = DerivativeErrors::default();
    let mut binomial = DerivativeErrors::default();
    let mut multinomial = DerivativeErrors::default();
    for _ in 0..50 {
        let n_theta = r.random_range(1..=4);
        let prior = GaussianPrior::new(normal_vec(&mut r, n_theta) * 0.5, random_spd(&mut r, n_theta, 0.3));
        let theta = &prior.mean + normal_vec(&mut r, n_theta);

        let n_y = r.random_range(2..=10);
        let a = normal_mat(&mut r, n_y, n_theta) * 0.7;
        let (a1, a2) = (a.clone(), a.clone());
        let mapping = FnMapping::new(n_theta, n_y, move |t| (&a1 * t).map(|z| z.tanh() + 0.3 * z)).with_jacobian(move |t| {
            let z = &a2 * t;
            let mut jac = a2.clone();
            for (i, mut row) in jac.row_iter_mut().enumerate() {
                row *= 1.0 - z[i].tanh().powi(2) + 0.3;
            }
            jac
        });
        let model = GenerativeModel::new(
            Arc::new(mapping),
            prior.clone(),
            LikelihoodFamily::Gaussian {
                precision: random_spd(&mut r, n_y, 0.5),
            },
        );
        let y = as_column(&normal_vec(&mut r, n_y));
        check_draw(&model, &y, &theta, false, &mut gaussian);

        let weights = normal_mat(&mut r, n_y, n_theta);
        let offsets = normal_vec(&mut r, n_y) * 0.5;
        let sig = Arc::new(SigmoidLinear::new(weights.clone(), offsets.clone()).unwrap());
        let model = GenerativeModel::new(sig.clone(), prior.clone(), LikelihoodFamily::Bernoulli);
        let y = DMatrix::from_fn(n_y, 1, |_, _| f64::from(r.random::<bool>()));
        check_draw(&model, &y, &theta, true, &mut bernoulli);

        let trials: Vec<u64> = (0..n_y).map(|_| r.random_range(1..=12)).collect();
        let y = random_counts(&mut r, &trials);
        let model = GenerativeModel::new(sig, prior.clone(), LikelihoodFamily::Binomial { trials });
        check_draw(&model, &y, &theta, true, &mut binomial);

        let m = r.random_range(2..=4);
        let design = normal_mat(&mut r, n_y * m, n_theta);
        let offsets = normal_vec(&mut r, n_y * m) * 0.5;
        let trials: Vec<u64> = (0..n_y).map(|_| r.random_range(1..=10)).collect();
        let mut counts = DMatrix::zeros(n_y, m);
        for (i, &k) in trials.iter().enumerate() {
            for _ in 0..k {
                counts[(i, r.random_range(0..m))] += 1.0;
            }
        }
        let model = GenerativeModel::new(
            Arc::new(SoftmaxLinear::new(design, offsets, m).unwrap()),
            prior,
            LikelihoodFamily::Multinomial { trials, outcomes: m },
        );
        check_draw(&model, &counts, &theta, false, &mut multinomial);
    }
    let grads = [gaussian.gradient, bernoulli.gradient, binomial.gradient, multinomial.gradient];
    let hess = [bernoulli.hessian.unwrap(), binomial.hessian.unwrap()];
    outcome(
        grads.iter().chain(&hess).all(|&e| e <= 1e-5),
        format!(
            "50 draws per family, gradient rel err gaussian {:.1e}, bernoulli {:.1e}, binomial {:.1e}, multinomial {:.1e}; sigmoid Hessian bernoulli {:.1e}, binomial {:.1e}; limit 1e-5",
            grads[0], grads[1], grads[2], grads[3], hess[0], hess[1]
        ),
    )
}

fn max_difference(a: &EnergyEvaluation, b: &EnergyEvaluation, hessian: bool) -> f64 {
    let mut d = (a.value - b.value).abs().max((&a.gradient - &b.gradient).amax());
    if hessian {
        d = d.max((&a.hessian - &b.hessian).amax());
    }
    d
}

fn energy(model: &GenerativeModel, data: &DMatrix<f64>, theta: &DVector<f64>) -> EnergyEvaluation {
    variational_energy(model, data, theta, &EffectivePrecisions::fixed(model).unwrap()).unwrap()
}

fn reduction_chain() -> Outcome {
    let mut r = rng(606);
    let mut multi_binomial = 0.0_f64;
    let mut binomial_bernoulli = 0.0_f64;
    let mut sigmoid_paths = 0.0_f64;
    let mut softmax_vs_sigmoid = 0.0_f64;
    for _ in 0..100 {
        let n_theta = r.random_range(1..=3);
        let n_y = r.random_range(1..=6);
        let weights = normal_mat(&mut r, n_y, n_theta) * 0.5;
        let offsets = normal_vec(&mut r, n_y) * 0.5;
        let prior = GaussianPrior::new(normal_vec(&mut r, n_theta) * 0.3, random_spd(&mut r, n_theta, 0.5));
        let theta = normal_vec(&mut r, n_theta);

        let trials: Vec<u64> = (0..n_y).map(|_| r.random_range(1..=8)).collect();
        let y = random_counts(&mut r, &trials);
        let counts = DMatrix::from_fn(n_y, 2, |i, j| if j == 0 { y[i] } else { trials[i] as f64 - y[i] });

        let binomial = GenerativeModel::new(
            Arc::new(opaque_sigmoid(&weights, &offsets)),
            prior.clone(),
            LikelihoodFamily::Binomial { trials: trials.clone() },
        );
        let multinomial = GenerativeModel::new(
            Arc::new(opaque_two_outcome(&weights, &offsets)),
            prior.clone(),
            LikelihoodFamily::Multinomial {
                trials: trials.clone(),
                outcomes: 2,
            },
        );
        let b = energy(&binomial, &y, &theta);
        multi_binomial = multi_binomial.max(max_difference(&energy(&multinomial, &counts, &theta), &b, true));

        let mut softmax_design = DMatrix::zeros(2 * n_y, n_theta);
        let mut softmax_offsets = DVector::zeros(2 * n_y);
        for i in 0..n_y {
            softmax_design.set_row(2 * i, &weights.row(i));
            softmax_offsets[2 * i] = -offsets[i];
        }
        let softmax = GenerativeModel::new(
            Arc::new(SoftmaxLinear::new(softmax_design, softmax_offsets, 2).unwrap()),
            prior.clone(),
            LikelihoodFamily::Multinomial {
                trials: trials.clone(),
                outcomes: 2,
            },
        );
        let sig = Arc::new(SigmoidLinear::new(weights.clone(), offsets.clone()).unwrap());
        let sig_binomial = GenerativeModel::new(sig.clone(), prior.clone(), LikelihoodFamily::Binomial { trials });
        softmax_vs_sigmoid = softmax_vs_sigmoid.max(max_difference(
            &energy(&softmax, &counts, &theta),
            &energy(&sig_binomial, &y, &theta),
            false,
        ));

        let binary = DMatrix::from_fn(n_y, 1, |_, _| f64::from(r.random::<bool>()));
        let ones = vec![1; n_y];
        let opaque = Arc::new(opaque_sigmoid(&weights, &offsets));
        let bin1 = GenerativeModel::new(opaque.clone(), prior.clone(), LikelihoodFamily::Binomial { trials: ones.clone() });
        let bern = GenerativeModel::new(opaque, prior.clone(), LikelihoodFamily::Bernoulli);
        binomial_bernoulli = binomial_bernoulli.max(max_difference(&energy(&bin1, &binary, &theta), &energy(&bern, &binary, &theta), true));

        let bin1 = GenerativeModel::new(sig.clone(), prior.clone(), LikelihoodFamily::Binomial { trials: ones });
        let bern = GenerativeModel::new(sig, prior, LikelihoodFamily::Bernoulli);
        sigmoid_paths = sigmoid_paths.max(max_difference(&energy(&bin1, &binary, &theta), &energy(&bern, &binary, &theta), true));
    }
    let worst = multi_binomial.max(binomial_bernoulli).max(sigmoid_paths).max(softmax_vs_sigmoid);
    outcome(
        worst <= 1e-12,
        format!(
            "100 instances, max abs diff multinomial(m=2)/binomial {multi_binomial:.1e}, binomial(k=1)/bernoulli {binomial_bernoulli:.1e}, sigmoid paths {sigmoid_paths:.1e}, softmax/sigmoid value+gradient {softmax_vs_sigmoid:.1e}; limit 1e-12"
        ),
    )
}

/// Largest single-sweep decrease of `F̃` over a batch of fits.
fn largest_drop(models: impl Iterator<Item = (GenerativeModel, DMatrix<f64>)>, failures: &mut Vec<String>) -> (f64, usize) {
    let mut worst = 0.0_f64;
    let mut decreasing = 0;
    for (case, (model, y)) in models.enumerate() {
        match vb_fit(&model, &y, &FitOptions::default()) {
            Ok(state) => {
                let drop = state.trajectory.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max);
                if drop > 1e-8 {
                    decreasing += 1;
                }
                worst = worst.max(drop);
            }
            Err(e) => failures.push(format!("case {case}: {e}")),
        }
    }
    (worst, decreasing)
}

fn monotonicity() -> Outcome {
    let mut r = rng(707);
    let mut failures = Vec::new();
    let gaussian: Vec<_> = (0..20)
        .map(|_| {
            let n_theta = r.random_range(2..=3);
            let n_y = r.random_range(8..=20);
            random_exp_gaussian(&mut r, n_theta, n_y)
        })
        .collect();
    let logistic: Vec<_> = (0..20)
        .map(|_| {
            let n_theta = r.random_range(2..=3);
            let n_y = r.random_range(20..=50);
            random_logistic(&mut r, n_theta, n_y)
        })
        .collect();
    let (g_drop, g_count) = largest_drop(gaussian.into_iter(), &mut failures);
    let (l_drop, l_count) = largest_drop(logistic.into_iter(), &mut failures);
    outcome(
        failures.is_empty() && g_drop <= 1e-8 && l_drop <= 1e-8,
        format!(
            "largest per-sweep F̃ decrease: nonlinear gaussian {g_drop:.2e} ({g_count}/20 fits decrease), logistic {l_drop:.2e} ({l_count}/20 fits decrease); limit 1e-8{}",
            failure_note(&failures)
        ),
    )
}

fn log_gamma_density(a: f64, b: f64, u: f64) -> f64 {
    a * b.ln() - ln_gamma(a) + a * u - b * u.exp()
}

fn kl_by_quadrature(q: &GammaPosterior, p: &GammaPosterior) -> f64 {
    let centre = (q.shape / q.rate).ln();
    let integrand = |u: f64| {
        let lq = log_gamma_density(q.shape, q.rate, u);
        lq.exp() * (lq - log_gamma_density(p.shape, p.rate, u))
    };
    integrate(integrand, centre - 60.0 / q.shape - 10.0, centre + 6.0, QuadratureOptions::default())
        .unwrap()
        .value
}

fn delta_free_energy_checks() -> Outcome {
    let mut r = rng(808);
    let mut kl_err = 0.0_f64;
    for _ in 0..20 {
        let draw = |r: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64| (r.random_range(lo.ln()..hi.ln())).exp();
        let q = GammaPosterior::new(draw(&mut r, 0.5, 20.0), draw(&mut r, 0.1, 10.0)).unwrap();
        let p = GammaPosterior::new(draw(&mut r, 0.5, 20.0), draw(&mut r, 0.1, 10.0)).unwrap();
        kl_err = kl_err.max((gamma_kl(&q, &p) - kl_by_quadrature(&q, &p)).abs());
    }

    let mut failures = Vec::new();
    let mut worst_gain = f64::NEG_INFINITY;
    for case in 0..20 {
        let (model, y) = if case % 2 == 0 {
            let n_theta = r.random_range(1..=3);
            let n_y = r.random_range(n_theta + 2..=20);
            let x = normal_mat(&mut r, n_y, n_theta);
            let y = &x * normal_vec(&mut r, n_theta) + normal_vec(&mut r, n_y) * 0.5;
            let model = GenerativeModel::new(
                Arc::new(LinearMapping::new(x)),
                GaussianPrior::isotropic(DVector::zeros(n_theta), 1.0),
                LikelihoodFamily::Gaussian {
                    precision: DMatrix::identity(n_y, n_y),
                },
            )
            .with_noise_hyperprior(r.random_range(0.5..3.0), r.random_range(0.5..3.0))
            .with_param_hyperprior(r.random_range(0.5..3.0), r.random_range(0.5..3.0));
            (model, as_column(&y))
        } else {
            let n_theta = r.random_range(1..=3);
            let n_y = r.random_range(20..=40);
            random_logistic(&mut r, n_theta, n_y)
        };
        let state = match vb_fit(&model, &y, &FitOptions::default()) {
            Ok(s) if s.converged => s,
            Ok(_) => {
                failures.push(format!("case {case} did not converge"));
                continue;
            }
            Err(e) => {
                failures.push(format!("case {case}: {e}"));
                continue;
            }
        };
        let (mu, sigma) = (&state.theta_posterior.mean, &state.theta_posterior.covariance);
        let noise = state.noise_precision;
        let param = state.param_precision;
        let base = corrected_free_energy(&model, &y, mu, sigma, noise.as_ref(), param.as_ref()).unwrap();
        let perturb = |g: &GammaPosterior, sa: f64, sb: f64| GammaPosterior::new(g.shape * (1.0 + sa), g.rate * (1.0 + sb)).unwrap();
        for sa in [-1e-3, 0.0, 1e-3] {
            for sb in [-1e-3, 0.0, 1e-3] {
                if sa == 0.0 && sb == 0.0 {
                    continue;
                }
                if let Some(n) = &noise {
                    let f = corrected_free_energy(&model, &y, mu, sigma, Some(&perturb(n, sa, sb)), param.as_ref()).unwrap();
                    worst_gain = worst_gain.max(f - base);
                }
                if let Some(p) = &param {
                    let f = corrected_free_energy(&model, &y, mu, sigma, noise.as_ref(), Some(&perturb(p, sa, sb))).unwrap();
                    worst_gain = worst_gain.max(f - base);
                }
            }
        }
    }
    outcome(
        failures.is_empty() && kl_err <= 1e-8 && worst_gain <= 1e-9,
        format!(
            "Gamma KL vs quadrature max err {kl_err:.2e} (limit 1e-8) on 20 sets; largest F̃ gain under ±0.1% (a, b) perturbation {worst_gain:.2e} (limit 1e-9) on 20 fits{}",
            failure_note(&failures)
        ),
    )
}

fn main() {
    let results = [
        run(1, "OLS equivalence", ols_equivalence),
        run(2, "exact evidence oracle", evidence_oracle),
        run(3, "evidence-gap slopes", figure1),
        run(4, "Laplace exactness", laplace_exactness),
        run(5, "gradient/Hessian correctness", derivative_suites),
        run(6, "family reduction chain", reduction_chain),
        run(7, "free-energy monotonicity", monotonicity),
        run(8, "ΔF correctness", delta_free_energy_checks),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    let strict = std::env::var("VLAPLACE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && passed < results.len() {
        std::process::exit(1);
    }
}
