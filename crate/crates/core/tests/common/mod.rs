//! Criterion checks shared by the oracle test files and the acceptance
//! target. Each check returns its verdict with a one-line detail instead of
//! panicking, so the acceptance report can list every outcome.
#![allow(dead_code)]

use nalgebra::DMatrix;
use uqsim::autodiff::{grad_at, hessian_diag_ggn, ParameterVector, Tensor};
use uqsim::decompose::{bias_terms, der_decomposition, total_variance_split, variance_decomposition, ReferenceGrid};
use uqsim::dgp::{generate_dataset, sample_beta, DgpSpec, RandomStream};
use uqsim::methods::SecondOrderSample;
use uqsim::methods::{hmc_sample, leapfrog, ExactGp, HmcSettings, LaplacePosterior, NigParams, RbfKernel};
use uqsim::nn::{gaussian_nll_mean, FirstOrderPrediction, MlpConfig};

#[derive(Clone, Debug)]
pub struct Check {
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Check {
            passed,
            detail: detail.into(),
        }
    }
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn random_members(stream: &mut RandomStream) -> Vec<FirstOrderPrediction> {
    let m = 2 + stream.below(60);
    let loc = 10.0 * stream.normal();
    let spread = (3.0 * stream.normal()).exp();
    (0..m)
        .map(|_| FirstOrderPrediction {
            mean: loc + spread * stream.normal(),
            variance: (2.0 * stream.normal()).exp(),
        })
        .collect()
}

fn random_grid(stream: &mut RandomStream) -> ReferenceGrid {
    let n_d = 2 + stream.below(20);
    let n_gamma = 2 + stream.below(10);
    let row_spread = (2.0 * stream.normal()).exp();
    let cell_spread = (2.0 * stream.normal()).exp();
    let mut preds = Vec::with_capacity(n_d * n_gamma);
    for _ in 0..n_d {
        let row = row_spread * stream.normal();
        for _ in 0..n_gamma {
            preds.push(FirstOrderPrediction {
                mean: row + cell_spread * stream.normal(),
                variance: stream.uniform() + 0.01,
            });
        }
    }
    ReferenceGrid::new(stream.uniform(), n_d, n_gamma, preds).unwrap()
}

/// Pairwise form of a population variance: `sum_{i<j} (a_i - a_j)^2 / n^2`.
fn pairwise_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mut acc = 0.0;
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            acc += (xs[i] - xs[j]).powi(2);
        }
    }
    acc / (n * n)
}

pub fn mixture_identity() -> Check {
    let mut stream = RandomStream::new(101);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let members = random_members(&mut stream);
        let means: Vec<f64> = members.iter().map(|m| m.mean).collect();
        let direct = members.iter().map(|m| m.variance).sum::<f64>() / members.len() as f64 + pairwise_variance(&means);
        let est = variance_decomposition(&SecondOrderSample::new(0.5, members).unwrap()).unwrap();
        worst = worst.max(rel(est.aleatoric + est.epistemic, direct));
    }
    Check::new(worst <= 1e-12, format!("max rel err {worst:.2e} (tol 1e-12)"))
}

pub fn procedural_data_identity() -> Check {
    let mut stream = RandomStream::new(202);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let g = random_grid(&mut stream);
        let split = total_variance_split(&g).unwrap();
        let means: Vec<f64> = g.predictions.iter().map(|p| p.mean).collect();
        worst = worst.max(rel(split.procedural + split.data, pairwise_variance(&means)));
    }
    Check::new(worst <= 1e-9, format!("max rel err {worst:.2e} (tol 1e-9)"))
}

pub fn bias_variance_identity() -> Check {
    let mut stream = RandomStream::new(303);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let g = random_grid(&mut stream);
        let truth = 5.0 * stream.normal();
        let means: Vec<f64> = g.predictions.iter().map(|p| p.mean).collect();
        let msd = means.iter().map(|m| (m - truth).powi(2)).sum::<f64>() / means.len() as f64;
        let grand = means.iter().sum::<f64>() / means.len() as f64;
        let b = bias_terms(&g, truth).unwrap();
        worst = worst
            .max(rel(msd, pairwise_variance(&means) + b.squared_bias))
            .max(rel(b.bias, grand - truth));
    }
    Check::new(worst <= 1e-9, format!("max rel err {worst:.2e} (tol 1e-9)"))
}

pub fn der_closed_forms() -> Check {
    let unit = der_decomposition(&NigParams::new(0.0, 1.0, 3.0, 2.0).unwrap()).unwrap();
    let exact = unit.aleatoric == 1.0 && unit.epistemic == 1.0;
    let mut stream = RandomStream::new(404);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let nu = (3.0 * stream.normal()).exp();
        let alpha = 1.0 + (2.0 * stream.normal()).exp();
        let beta = (2.0 * stream.normal()).exp();
        let e = der_decomposition(&NigParams::new(stream.normal(), nu, alpha, beta).unwrap()).unwrap();
        worst = worst.max(rel(e.aleatoric / e.epistemic, nu));
    }
    Check::new(
        exact && worst <= 1e-12,
        format!(
            "(1,3,2) -> ({}, {}); max rel err of ratio vs nu {worst:.2e}",
            unit.aleatoric, unit.epistemic
        ),
    )
}

pub fn mlp_gradient_check() -> Check {
    let mlp = MlpConfig::default();
    let data = generate_dataset(&DgpSpec::default(), 64, 11).unwrap();
    let params = mlp.init_params(&mut RandomStream::new(12));
    let loss = |p: &ParameterVector| {
        grad_at(p, |t, v| {
            let heads = mlp.forward(t, v, &data.xs, None)?;
            gaussian_nll_mean(t, heads, &data.ys)
        })
        .unwrap()
    };
    let (_, analytic) = loss(&params);
    let mut stream = RandomStream::new(13);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let i = stream.below(params.len());
        let mut plus = params.clone();
        plus.values_mut()[i] += h;
        let mut minus = params.clone();
        minus.values_mut()[i] -= h;
        let fd = (loss(&plus).0 - loss(&minus).0) / (2.0 * h);
        // floor keeps vanishing gradients from dividing rounding noise by zero
        let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
        worst = worst.max(err);
    }
    Check::new(
        worst < 1e-5,
        format!("{} params, 50 coords, max rel err {worst:.2e} (tol 1e-5)", params.len()),
    )
}

/// Bayesian linear regression with an orthogonal design, where the diagonal
/// curvature is exact and the conjugate posterior is known in closed form.
pub fn laplace_linear_oracle() -> Check {
    let base = [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];
    let scale = [0.5, 2.0, 1.0];
    let rows: Vec<[f64; 3]> = base
        .iter()
        .cycle()
        .take(8)
        .map(|r| [r[0] * scale[0], r[1] * scale[1], r[2] * scale[2]])
        .collect();
    let noise: f64 = 2.0;
    let prior = 1.0;
    let params = ParameterVector::from_tensors(vec![("w".into(), Tensor::matrix(3, 1, vec![0.3, -0.1, 0.7]).unwrap())]);
    let ggn = hessian_diag_ggn(&params, rows.len(), |t, v, i| {
        let x = t.constant(Tensor::matrix(1, 3, rows[i].to_vec()).unwrap());
        let out = t.matmul(x, v[0])?;
        let out = t.sum(out)?;
        Ok(vec![(out, 1.0 / (noise * noise))])
    })
    .unwrap();
    let post = LaplacePosterior::from_curvature(params.values().to_vec(), &ggn, prior).unwrap();

    let x = DMatrix::from_fn(rows.len(), 3, |i, j| rows[i][j]);
    let precision = x.transpose() * &x / (noise * noise) + DMatrix::identity(3, 3) * prior;
    let cov = precision.try_inverse().unwrap();
    let mut worst = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let laplace = if i == j { post.variances[i] } else { 0.0 };
            worst = worst.max((laplace - cov[(i, j)]).abs());
        }
    }
    Check::new(worst <= 1e-6, format!("max abs covariance err {worst:.2e} (tol 1e-6)"))
}

pub fn hmc_gaussian() -> Check {
    let settings = HmcSettings {
        step_size: 0.25,
        leapfrog_steps: 10,
        n_samples: 5500,
        burn: 500,
    };
    let u_grad = |q: &[f64]| Ok((0.5 * q.iter().map(|v| v * v).sum::<f64>(), q.to_vec()));
    let chain = hmc_sample(u_grad, vec![3.0, -3.0], &settings, &mut RandomStream::new(505)).unwrap();
    let n = chain.samples.len() as f64;
    let mut worst_mean = 0.0f64;
    let mut worst_var = 0.0f64;
    for d in 0..2 {
        let m = chain.samples.iter().map(|s| s[d]).sum::<f64>() / n;
        let v = chain.samples.iter().map(|s| (s[d] - m).powi(2)).sum::<f64>() / n;
        worst_mean = worst_mean.max(m.abs());
        worst_var = worst_var.max((v - 1.0).abs());
    }

    let (mut q, mut p) = (vec![1.0, -0.5], vec![0.3, 0.8]);
    let energy = |q: &[f64], p: &[f64]| 0.5 * q.iter().chain(p).map(|v| v * v).sum::<f64>();
    let h0 = energy(&q, &p);
    let mut ug = u_grad;
    let g = q.clone();
    leapfrog(&mut q, &mut p, &g, &mut ug, 0.01, 100).unwrap();
    let drift = (energy(&q, &p) - h0).abs();

    Check::new(
        chain.samples.len() == 5000 && worst_mean <= 0.05 && worst_var <= 0.1 && drift < 1e-4,
        format!(
            "{} samples, max |mean| {worst_mean:.3}, max |var-1| {worst_var:.3}, |dH| {drift:.1e}",
            chain.samples.len()
        ),
    )
}

pub fn exact_gp_interpolation() -> Check {
    let xs: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
    let ys: Vec<f64> = xs.iter().map(|x| (6.0 * x).sin() + x).collect();
    let kernel = RbfKernel {
        lengthscale: 0.2,
        variance: 1.0,
    };
    let gp = ExactGp::fit(&xs, &ys, kernel, 0.0).unwrap();
    let worst = xs
        .iter()
        .zip(&ys)
        .map(|(&x, &y)| (gp.predict(x).0 - y).abs())
        .fold(0.0, f64::max);
    Check::new(
        worst <= 1e-6,
        format!("max abs err at training inputs {worst:.2e} (tol 1e-6)"),
    )
}

pub fn beta_sample_mean() -> Check {
    let draws = sample_beta(&mut RandomStream::new(606), 1.2, 0.5, 100_000).unwrap();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let target = 0.70588;
    Check::new(
        (mean - target).abs() <= 0.01,
        format!("mean {mean:.5} vs {target} (tol 0.01)"),
    )
}
