use statrs::function::gamma::ln_gamma;

use super::{MethodKind, SecondOrderPredictor, SecondOrderSample};
use crate::autodiff::{softplus, ParameterVector, Tape, Tensor, Var};
use crate::dgp::{Dataset, RandomStream};
use crate::error::{Error, Result};
use crate::nn::{fit, FirstOrderPrediction, MlpConfig, TrainConfig, TrainHistory, VARIANCE_MAX, VARIANCE_MIN};

/// Floor added after the softplus links of `nu` and `beta`.
const LINK_FLOOR: f64 = 1e-6;

/// Normal-Inverse-Gamma parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NigParams {
    pub gamma: f64,
    pub nu: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl NigParams {
    pub fn new(gamma: f64, nu: f64, alpha: f64, beta: f64) -> Result<Self> {
        let p = NigParams { gamma, nu, alpha, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.alpha > 1.0 && self.beta > 0.0 && self.gamma.is_finite()) {
            return Err(Error::contract(format!(
                "invalid NIG parameters: need nu > 0, alpha > 1, beta > 0, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Applies the output links to four raw head values.
    pub fn from_raw(raw: &[f64]) -> Self {
        NigParams {
            gamma: raw[0],
            nu: softplus(raw[1]) + LINK_FLOOR,
            alpha: 1.0 + softplus(raw[2]) + LINK_FLOOR,
            beta: softplus(raw[3]) + LINK_FLOOR,
        }
    }

    /// One draw `sigma2 ~ InvGamma(alpha, beta)`, `mu ~ N(gamma, sigma2 / nu)`.
    pub fn sample(&self, stream: &mut RandomStream) -> FirstOrderPrediction {
        let g = stream.gamma(self.alpha).max(f64::MIN_POSITIVE);
        let variance = (self.beta / g).clamp(VARIANCE_MIN, VARIANCE_MAX);
        let mean = self.gamma + (variance / self.nu).sqrt() * stream.normal();
        FirstOrderPrediction { mean, variance }
    }
}

/// Negative log of the NIG marginal (a Student-t) at `y`.
pub fn nig_nll(p: &NigParams, y: f64) -> f64 {
    let omega = 2.0 * p.beta * (1.0 + p.nu);
    0.5 * (std::f64::consts::PI / p.nu).ln() - p.alpha * omega.ln()
        + (p.alpha + 0.5) * ((y - p.gamma).powi(2) * p.nu + omega).ln()
        + ln_gamma(p.alpha)
        - ln_gamma(p.alpha + 0.5)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DerConfig {
    /// Hidden architecture; the output count is forced to 4.
    pub mlp: MlpConfig,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the evidence regularizer.
    pub lambda: f64,
}

/// Deep evidential regression network.
#[derive(Clone, Debug)]
pub struct EvidentialRegressor {
    mlp: MlpConfig,
    pub params: ParameterVector,
    pub history: TrainHistory,
    inference: RandomStream,
}

/// Per-example NIG loss vector `nll + lambda |y - gamma| (2 nu + alpha)` from an
/// `n x 4` raw head node.
pub(crate) fn der_loss_terms(tape: &mut Tape, heads: Var, ys: &[f64], lambda: f64) -> Result<Var> {
    let gamma = tape.column(heads, 0)?;
    let nu = tape.column(heads, 1)?;
    let nu = tape.softplus(nu)?;
    let nu = tape.offset(nu, LINK_FLOOR)?;
    let alpha = tape.column(heads, 2)?;
    let alpha = tape.softplus(alpha)?;
    let alpha = tape.offset(alpha, 1.0 + LINK_FLOOR)?;
    let beta = tape.column(heads, 3)?;
    let beta = tape.softplus(beta)?;
    let beta = tape.offset(beta, LINK_FLOOR)?;

    let y = tape.constant(Tensor::vector(ys.to_vec()));
    let r = tape.sub(y, gamma)?;
    let one_nu = tape.offset(nu, 1.0)?;
    let omega = tape.mul(beta, one_nu)?;
    let omega = tape.scale(omega, 2.0)?;
    let log_nu = tape.log(nu)?;
    let log_omega = tape.log(omega)?;
    let r2 = tape.square(r)?;
    let r2nu = tape.mul(r2, nu)?;
    let inner = tape.add(r2nu, omega)?;
    let log_inner = tape.log(inner)?;
    let alpha_half = tape.offset(alpha, 0.5)?;

    let t1 = tape.scale(log_nu, -0.5)?;
    let t2 = tape.mul(alpha, log_omega)?;
    let t3 = tape.mul(alpha_half, log_inner)?;
    let lg_a = tape.lgamma(alpha)?;
    let lg_ah = tape.lgamma(alpha_half)?;
    let nll = tape.sub(t1, t2)?;
    let nll = tape.add(nll, t3)?;
    let nll = tape.add(nll, lg_a)?;
    let nll = tape.sub(nll, lg_ah)?;
    let nll = tape.offset(nll, 0.5 * std::f64::consts::PI.ln())?;
    if lambda == 0.0 {
        return Ok(nll);
    }
    let abs_r = tape.abs(r)?;
    let two_nu = tape.scale(nu, 2.0)?;
    let evidence = tape.add(two_nu, alpha)?;
    let reg = tape.mul(abs_r, evidence)?;
    let reg = tape.scale(reg, lambda)?;
    tape.add(nll, reg)
}

pub fn fit_der(data: &Dataset, cfg: &DerConfig, seed: u64) -> Result<EvidentialRegressor> {
    let mlp = MlpConfig {
        outputs: 4,
        dropout_rate: 0.0,
        ..cfg.mlp
    };
    mlp.validate()?;
    if data.is_empty() {
        return Err(Error::contract("cannot fit DER on an empty dataset"));
    }
    let root = RandomStream::new(seed);
    let mut params = mlp.init_params(&mut root.child("init", 0));
    let tcfg = TrainConfig {
        learning_rate: cfg.learning_rate,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed,
    };
    let lambda = cfg.lambda;
    let history = fit(
        &mut params,
        data,
        &tcfg,
        &mut root.child("train", 0),
        |tape, vars, batch, _| {
            let heads = mlp.forward(tape, vars, batch.xs, None)?;
            let terms = der_loss_terms(tape, heads, batch.ys, lambda)?;
            tape.mean(terms)
        },
    )
    .map_err(|e| Error::method(MethodKind::Der.name(), e))?;
    Ok(EvidentialRegressor {
        mlp,
        params,
        history,
        inference: root.child("inference", 0),
    })
}

impl EvidentialRegressor {
    pub fn nig_at(&self, xs: &[f64]) -> Vec<NigParams> {
        self.mlp
            .forward_values(self.params.values(), xs, None)
            .chunks_exact(4)
            .map(NigParams::from_raw)
            .collect()
    }
}

impl SecondOrderPredictor for EvidentialRegressor {
    fn kind(&self) -> MethodKind {
        MethodKind::Der
    }

    /// Monte Carlo draws from the predicted NIG.
    fn sample_grid(&mut self, xs: &[f64], d: usize) -> Result<Vec<SecondOrderSample>> {
        let nig = self.nig_at(xs);
        xs.iter()
            .zip(nig)
            .map(|(&x, p)| {
                let members = (0..d.max(1)).map(|_| p.sample(&mut self.inference)).collect();
                SecondOrderSample::new(x, members)
            })
            .collect()
    }

    fn nig_grid(&self, xs: &[f64]) -> Option<Vec<NigParams>> {
        Some(self.nig_at(xs))
    }

    fn default_members(&self) -> usize {
        500
    }
}
