use nalgebra::{Cholesky, DMatrix, DVector};

use super::{MethodKind, SecondOrderPredictor, SecondOrderSample};
use crate::autodiff::{ParameterVector, Tape, Tensor, Var};
use crate::dgp::{Dataset, RandomStream};
use crate::error::{Error, Result};
use crate::nn::{Adam, FirstOrderPrediction, VARIANCE_MAX, VARIANCE_MIN};

const JITTER_START: f64 = 1e-6;
const JITTER_MAX: f64 = 1e-4;
const MIN_LATENT_VARIANCE: f64 = 1e-12;

/// Squared-exponential kernel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RbfKernel {
    pub lengthscale: f64,
    pub variance: f64,
}

/// `variance * exp(-(a - b)^2 / (2 lengthscale^2))`.
pub fn rbf(a: f64, b: f64, k: &RbfKernel) -> f64 {
    let r = (a - b) / k.lengthscale;
    k.variance * (-0.5 * r * r).exp()
}

impl RbfKernel {
    pub fn validate(&self) -> Result<()> {
        if !(self.lengthscale > 0.0 && self.variance > 0.0) {
            return Err(Error::contract(format!(
                "kernel hyperparameters must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn matrix(&self, rows: &[f64], cols: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| rbf(rows[i], cols[j], self))
    }
}

/// Cholesky factor of `k + jitter I`, escalating the jitter tenfold from
/// `start` until factorization succeeds or `JITTER_MAX` is exceeded.
fn cholesky_with_jitter(k: &DMatrix<f64>, start: f64) -> Result<(DMatrix<f64>, f64)> {
    let n = k.nrows();
    let mut jitter = start;
    loop {
        let shifted = k + DMatrix::identity(n, n) * jitter;
        if let Some(c) = Cholesky::new(shifted) {
            return Ok((c.l(), jitter));
        }
        jitter *= 10.0;
        if jitter > JITTER_MAX * (1.0 + 1e-9) {
            return Err(Error::Numeric { op: "cholesky" });
        }
    }
}

/// Exact GP regression with a fixed homoscedastic noise variance.
#[derive(Clone, Debug)]
pub struct ExactGp {
    kernel: RbfKernel,
    xs: Vec<f64>,
    chol: DMatrix<f64>,
    weights: DVector<f64>,
}

impl ExactGp {
    pub fn fit(xs: &[f64], ys: &[f64], kernel: RbfKernel, noise_variance: f64) -> Result<Self> {
        kernel.validate()?;
        if xs.len() != ys.len() || xs.is_empty() {
            return Err(Error::contract("exact GP needs matching nonempty inputs"));
        }
        if noise_variance < 0.0 {
            return Err(Error::contract("noise variance must be nonnegative"));
        }
        let k = kernel.matrix(xs, xs) + DMatrix::identity(xs.len(), xs.len()) * noise_variance;
        let (chol, _) = match Cholesky::new(k.clone()) {
            Some(c) => (c.l(), 0.0),
            None => cholesky_with_jitter(&k, 1e-12)?,
        };
        let y = DVector::from_column_slice(ys);
        let tmp = chol
            .solve_lower_triangular(&y)
            .ok_or(Error::Numeric { op: "triangular solve" })?;
        let weights = chol
            .transpose()
            .solve_upper_triangular(&tmp)
            .ok_or(Error::Numeric { op: "triangular solve" })?;
        Ok(ExactGp {
            kernel,
            xs: xs.to_vec(),
            chol,
            weights,
        })
    }

    /// Posterior mean and variance of the latent function at `x`.
    pub fn predict(&self, x: f64) -> (f64, f64) {
        let kx = DVector::from_iterator(self.xs.len(), self.xs.iter().map(|&xi| rbf(x, xi, &self.kernel)));
        let mean = kx.dot(&self.weights);
        let v = self
            .chol
            .solve_lower_triangular(&kx)
            .map(|v| v.norm_squared())
            .unwrap_or(0.0);
        (mean, (self.kernel.variance - v).max(0.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GpConfig {
    /// Upper bound on the number of inducing points.
    pub inducing: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Optimizer steps between kernel-hyperparameter updates.
    pub hyper_every: usize,
    /// Central-difference step on log hyperparameters.
    pub fd_step: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            inducing: 256,
            learning_rate: 0.005,
            epochs: 2000,
            hyper_every: 5,
            fd_step: 1e-4,
        }
    }
}

/// One whitened sparse latent: `u = L_z v`, `q(v) = N(m, L L^T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPosterior {
    pub kernel: RbfKernel,
    pub mean: Vec<f64>,
    /// Row-major lower-triangular scale factor.
    pub scale: Vec<f64>,
}

/// Variational posterior of the two-latent heteroscedastic GP.
#[derive(Clone, Debug, PartialEq)]
pub struct GpPosterior {
    pub inducing: Vec<f64>,
    /// Latent mean function.
    pub f: LatentPosterior,
    /// Latent log-noise function, around `noise_offset`.
    pub g: LatentPosterior,
    pub noise_offset: f64,
}

/// `K_xz L_z^{-T}` and `diag(K_xx) - rowsum(A^2)` for one latent.
struct Projection {
    a: DMatrix<f64>,
    residual: Vec<f64>,
}

fn projection(kernel: &RbfKernel, z: &[f64], xs: &[f64]) -> Result<Projection> {
    let (lz, _) = cholesky_with_jitter(&kernel.matrix(z, z), JITTER_START)?;
    let kzx = kernel.matrix(z, xs);
    let at = lz
        .solve_lower_triangular(&kzx)
        .ok_or(Error::Numeric { op: "triangular solve" })?;
    let a = at.transpose();
    let residual = (0..xs.len())
        .map(|i| kernel.variance - a.row(i).norm_squared())
        .collect();
    Ok(Projection { a, residual })
}

/// Marginal mean and variance of one latent at every row of the projection.
fn latent_marginals(p: &Projection, post: &LatentPosterior, offset: f64) -> Vec<(f64, f64)> {
    let m = post.mean.len();
    let l = DMatrix::from_row_slice(m, m, &post.scale);
    let mu = &p.a * DVector::from_column_slice(&post.mean);
    let al = &p.a * l;
    (0..p.a.nrows())
        .map(|i| {
            let v = p.residual[i] + al.row(i).norm_squared();
            (mu[i] + offset, v.max(MIN_LATENT_VARIANCE))
        })
        .collect()
}

/// Latent marginals at one input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GpMarginal {
    pub f_mean: f64,
    pub f_var: f64,
    pub g_mean: f64,
    pub g_var: f64,
}

impl GpPosterior {
    pub fn marginals(&self, xs: &[f64]) -> Result<Vec<GpMarginal>> {
        let pf = projection(&self.f.kernel, &self.inducing, xs)?;
        let pg = projection(&self.g.kernel, &self.inducing, xs)?;
        let f = latent_marginals(&pf, &self.f, 0.0);
        let g = latent_marginals(&pg, &self.g, self.noise_offset);
        Ok(f.into_iter()
            .zip(g)
            .map(|((f_mean, f_var), (g_mean, g_var))| GpMarginal {
                f_mean,
                f_var,
                g_mean,
                g_var,
            })
            .collect())
    }
}

/// Inducing inputs at evenly spaced order statistics of the training inputs.
fn inducing_points(xs: &[f64], count: usize) -> Vec<f64> {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    if count >= sorted.len() {
        return sorted;
    }
    if count == 1 {
        return vec![sorted[sorted.len() / 2]];
    }
    let step = (sorted.len() - 1) as f64 / (count - 1) as f64;
    (0..count).map(|k| sorted[(k as f64 * step).round() as usize]).collect()
}

struct Constants {
    af: Var,
    ag: Var,
    res_f: Var,
    res_g: Var,
    y: Var,
    lower: Var,
    eye: Var,
    ones: Var,
}

fn constants(tape: &mut Tape, pf: &Projection, pg: &Projection, ys: &[f64], m: usize) -> Result<Constants> {
    let n = ys.len();
    let to_tensor = |a: &DMatrix<f64>| {
        let rows: Vec<f64> = (0..a.nrows())
            .flat_map(|i| a.row(i).iter().copied().collect::<Vec<_>>())
            .collect();
        Tensor::matrix(a.nrows(), a.ncols(), rows)
    };
    Ok(Constants {
        af: tape.constant(to_tensor(&pf.a)?),
        ag: tape.constant(to_tensor(&pg.a)?),
        res_f: tape.constant(Tensor::matrix(n, 1, pf.residual.clone())?),
        res_g: tape.constant(Tensor::matrix(n, 1, pg.residual.clone())?),
        y: tape.constant(Tensor::matrix(n, 1, ys.to_vec())?),
        lower: tape.constant(Tensor::matrix(
            m,
            m,
            (0..m * m).map(|k| if k % m <= k / m { 1.0 } else { 0.0 }).collect(),
        )?),
        eye: tape.constant(Tensor::eye(m)),
        ones: tape.constant(Tensor::matrix(m, 1, vec![1.0; m])?),
    })
}

/// Marginal mean and variance nodes (`n x 1`) plus the KL to the whitened prior.
fn latent_terms(
    tape: &mut Tape,
    c: &Constants,
    a: Var,
    res: Var,
    mean: Var,
    raw_scale: Var,
) -> Result<(Var, Var, Var)> {
    let l = tape.mul(raw_scale, c.lower)?;
    let mu = tape.matmul(a, mean)?;
    let al = tape.matmul(a, l)?;
    let al2 = tape.square(al)?;
    let spread = tape.matmul(al2, c.ones)?;
    let var = tape.add(res, spread)?;
    let var = tape.clamp(var, MIN_LATENT_VARIANCE, f64::INFINITY)?;

    let m = tape.value(mean).len() as f64;
    let l2 = tape.square(l)?;
    let trace = tape.sum(l2)?;
    let m2 = tape.square(mean)?;
    let m2 = tape.sum(m2)?;
    let diag = tape.mul(l, c.eye)?;
    let diag = tape.matmul(diag, c.ones)?;
    let diag = tape.abs(diag)?;
    let logdet = tape.log(diag)?;
    let logdet = tape.sum(logdet)?;
    let logdet = tape.scale(logdet, 2.0)?;
    let kl = tape.add(trace, m2)?;
    let kl = tape.sub(kl, logdet)?;
    let kl = tape.offset(kl, -m)?;
    let kl = tape.scale(kl, 0.5)?;
    Ok((mu, var, kl))
}

/// Negative ELBO per data point. Parameter blocks: f mean, f scale, g mean,
/// g scale, noise offset.
fn neg_elbo(tape: &mut Tape, vars: &[Var], c: &Constants, n: usize) -> Result<Var> {
    let (mu_f, v_f, kl_f) = latent_terms(tape, c, c.af, c.res_f, vars[0], vars[1])?;
    let (mu_g, v_g, kl_g) = latent_terms(tape, c, c.ag, c.res_g, vars[2], vars[3])?;
    let mu_g = tape.add(mu_g, vars[4])?;
    // E[exp(-g)] = exp(-mu_g + v_g / 2)
    let half_vg = tape.scale(v_g, 0.5)?;
    let expo = tape.sub(half_vg, mu_g)?;
    let inv_noise = tape.exp(expo)?;
    let r = tape.sub(c.y, mu_f)?;
    let r2 = tape.square(r)?;
    let sq = tape.add(r2, v_f)?;
    let quad = tape.mul(sq, inv_noise)?;
    let per_point = tape.add(quad, mu_g)?;
    let per_point = tape.scale(per_point, 0.5)?;
    let per_point = tape.offset(per_point, 0.5 * std::f64::consts::TAU.ln())?;
    let nll = tape.sum(per_point)?;
    let total = tape.add(nll, kl_f)?;
    let total = tape.add(total, kl_g)?;
    tape.scale(total, 1.0 / n as f64)
}

fn kernels_from_log(h: &[f64; 4]) -> (RbfKernel, RbfKernel) {
    (
        RbfKernel {
            lengthscale: h[0].exp(),
            variance: h[1].exp(),
        },
        RbfKernel {
            lengthscale: h[2].exp(),
            variance: h[3].exp(),
        },
    )
}

fn objective_value(params: &ParameterVector, pf: &Projection, pg: &Projection, ys: &[f64], m: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.unflatten().into_iter().map(|t| tape.constant(t)).collect();
    let c = constants(&mut tape, pf, pg, ys, m)?;
    let loss = neg_elbo(&mut tape, &vars, &c, ys.len())?;
    tape.scalar_value(loss)
}

/// Fitted heteroscedastic sparse variational GP.
#[derive(Clone, Debug)]
pub struct HeteroGp {
    pub posterior: GpPosterior,
    /// Negative ELBO per point after every epoch.
    pub losses: Vec<f64>,
    inference: RandomStream,
}

pub fn fit_hetero_gp(data: &Dataset, cfg: &GpConfig, seed: u64) -> Result<HeteroGp> {
    if data.is_empty() {
        return Err(Error::contract("cannot fit a GP on an empty dataset"));
    }
    if cfg.inducing == 0 || cfg.hyper_every == 0 || !(cfg.fd_step > 0.0) {
        return Err(Error::contract(format!("invalid GP configuration {cfg:?}")));
    }
    let wrap = |e| Error::method(MethodKind::HeteroGp.name(), e);
    let root = RandomStream::new(seed);
    let z = inducing_points(&data.xs, cfg.inducing.min(data.len()));
    let m = z.len();
    let n = data.len();
    let ys = &data.ys;
    let y_mean = ys.iter().sum::<f64>() / n as f64;
    let y_var = (ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n as f64).max(1e-3);

    // log lengthscale and log signal variance of f, then of g
    let mut hyper = [0.1f64.ln(), y_var.ln(), 0.3f64.ln(), 0.0];
    let mut hyper_adam = Adam::new(4, cfg.learning_rate * cfg.hyper_every as f64);
    let eye: Vec<f64> = (0..m * m).map(|k| if k % (m + 1) == 0 { 1.0 } else { 0.0 }).collect();
    let mut params = ParameterVector::from_tensors(vec![
        ("f.mean".into(), Tensor::zeros(&[m, 1])),
        ("f.scale".into(), Tensor::matrix(m, m, eye.clone()).map_err(wrap)?),
        ("g.mean".into(), Tensor::zeros(&[m, 1])),
        ("g.scale".into(), Tensor::matrix(m, m, eye).map_err(wrap)?),
        ("g.offset".into(), Tensor::scalar(y_var.ln())),
    ]);
    let mut adam = Adam::new(params.len(), cfg.learning_rate);
    let (kf, kg) = kernels_from_log(&hyper);
    let mut pf = projection(&kf, &z, &data.xs).map_err(wrap)?;
    let mut pg = projection(&kg, &z, &data.xs).map_err(wrap)?;
    let mut losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let c = constants(&mut tape, &pf, &pg, ys, m).map_err(wrap)?;
        let loss = neg_elbo(&mut tape, &vars, &c, n).map_err(|e| {
            wrap(Error::Training {
                epoch,
                reason: e.to_string(),
            })
        })?;
        let value = tape.scalar_value(loss).map_err(wrap)?;
        let grad = tape.backward(loss).map_err(wrap)?.flat(&tape, &vars);
        adam.step(params.values_mut(), &grad);
        losses.push(value);

        if (epoch + 1) % cfg.hyper_every == 0 {
            let mut g = [0.0; 4];
            for (k, gk) in g.iter_mut().enumerate() {
                let eval = |h: &[f64; 4]| -> Result<f64> {
                    let (kf, kg) = kernels_from_log(h);
                    if k < 2 {
                        objective_value(&params, &projection(&kf, &z, &data.xs)?, &pg, ys, m)
                    } else {
                        objective_value(&params, &pf, &projection(&kg, &z, &data.xs)?, ys, m)
                    }
                };
                let mut up = hyper;
                up[k] += cfg.fd_step;
                let mut down = hyper;
                down[k] -= cfg.fd_step;
                // a failed evaluation leaves this coordinate unchanged
                *gk = match (eval(&up), eval(&down)) {
                    (Ok(a), Ok(b)) => (a - b) / (2.0 * cfg.fd_step),
                    _ => 0.0,
                };
            }
            hyper_adam.step(&mut hyper, &g);
            let (kf, kg) = kernels_from_log(&hyper);
            pf = projection(&kf, &z, &data.xs).map_err(wrap)?;
            pg = projection(&kg, &z, &data.xs).map_err(wrap)?;
        }
    }

    let (kf, kg) = kernels_from_log(&hyper);
    let blocks = params.unflatten();
    let lower = |t: &Tensor| -> Vec<f64> {
        t.data()
            .iter()
            .enumerate()
            .map(|(k, &v)| if k % m <= k / m { v } else { 0.0 })
            .collect()
    };
    let posterior = GpPosterior {
        inducing: z,
        f: LatentPosterior {
            kernel: kf,
            mean: blocks[0].data().to_vec(),
            scale: lower(&blocks[1]),
        },
        g: LatentPosterior {
            kernel: kg,
            mean: blocks[2].data().to_vec(),
            scale: lower(&blocks[3]),
        },
        noise_offset: blocks[4].data()[0],
    };
    Ok(HeteroGp {
        posterior,
        losses,
        inference: root.child("inference", 0),
    })
}

impl SecondOrderPredictor for HeteroGp {
    fn kind(&self) -> MethodKind {
        MethodKind::HeteroGp
    }

    /// Independent draws of `(f(x), exp(g(x)))` from the latent marginals.
    fn sample_grid(&mut self, xs: &[f64], d: usize) -> Result<Vec<SecondOrderSample>> {
        let marginals = self.posterior.marginals(xs)?;
        xs.iter()
            .zip(marginals)
            .map(|(&x, mg)| {
                let members = (0..d.max(1))
                    .map(|_| {
                        let f = mg.f_mean + mg.f_var.sqrt() * self.inference.normal();
                        let g = mg.g_mean + mg.g_var.sqrt() * self.inference.normal();
                        FirstOrderPrediction {
                            mean: f,
                            variance: g.exp().clamp(VARIANCE_MIN, VARIANCE_MAX),
                        }
                    })
                    .collect();
                SecondOrderSample::new(x, members)
            })
            .collect()
    }

    fn default_members(&self) -> usize {
        500
    }
}
