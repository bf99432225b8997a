use super::{transpose_members, MethodKind, SecondOrderPredictor, SecondOrderSample};
use crate::autodiff::{softplus, ParameterVector, Tape, Tensor, Var};
use crate::dgp::{Dataset, RandomStream};
use crate::error::{Error, Result};
use crate::nn::{fit, gaussian_nll_terms, heads_to_predictions, MlpConfig, TrainConfig, TrainHistory};

/// Mean-field Gaussian variational inference over all network weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViConfig {
    pub mlp: MlpConfig,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs trained on the likelihood alone before the KL term switches on.
    pub burn_in: usize,
    /// Multiplier on the KL term.
    pub beta: f64,
    pub train_mc: usize,
    pub test_mc: usize,
    /// Standard deviation of the zero-mean Gaussian weight prior.
    pub prior_sd: f64,
    /// Initial pre-softplus posterior scale.
    pub init_rho: f64,
}

/// `KL(N(mu_q, sd_q^2) || N(mu_p, sd_p^2))`.
pub fn kl_diag_gaussian(mu_q: f64, sd_q: f64, mu_p: f64, sd_p: f64) -> f64 {
    (sd_p / sd_q).ln() + (sd_q * sd_q + (mu_q - mu_p).powi(2)) / (2.0 * sd_p * sd_p) - 0.5
}

#[derive(Clone, Debug)]
pub struct ViNet {
    cfg: ViConfig,
    /// Variational means followed by pre-softplus scales, both in network
    /// layout order.
    pub params: ParameterVector,
    pub history: TrainHistory,
    inference: RandomStream,
}

fn init_variational(cfg: &ViConfig, stream: &mut RandomStream) -> ParameterVector {
    let means = cfg.mlp.init_params(stream);
    let mut blocks = Vec::new();
    for (e, t) in means.layout().iter().zip(means.unflatten()) {
        blocks.push((format!("{}.mu", e.name), t));
    }
    for e in means.layout() {
        blocks.push((
            format!("{}.rho", e.name),
            Tensor::new(e.shape.clone(), vec![cfg.init_rho; e.len()]).expect("shape"),
        ));
    }
    ParameterVector::from_tensors(blocks)
}

/// Negative ELBO for one batch, divided by the batch size.
///
/// The data term is the summed Gaussian NLL averaged over `train_mc`
/// reparameterized weight draws; the KL term is weighted by
/// `beta / num_batches` and dropped when `kl_active` is false.
#[allow(clippy::too_many_arguments)]
pub(crate) fn vi_objective(
    tape: &mut Tape,
    vars: &[Var],
    cfg: &ViConfig,
    xs: &[f64],
    ys: &[f64],
    num_batches: usize,
    kl_active: bool,
    stream: &mut RandomStream,
) -> Result<Var> {
    let half = vars.len() / 2;
    let (mus, rhos) = vars.split_at(half);
    let sigmas = rhos.iter().map(|&r| tape.softplus(r)).collect::<Result<Vec<_>>>()?;
    let mut data_term: Option<Var> = None;
    for _ in 0..cfg.train_mc.max(1) {
        let mut weights = Vec::with_capacity(half);
        for (&mu, &sd) in mus.iter().zip(&sigmas) {
            let shape = tape.value(mu).shape().to_vec();
            let eps = Tensor::new(shape.clone(), stream.normals(shape.iter().product()))?;
            let eps = tape.constant(eps);
            let noise = tape.mul(sd, eps)?;
            weights.push(tape.add(mu, noise)?);
        }
        let heads = cfg.mlp.forward(tape, &weights, xs, None)?;
        let terms = gaussian_nll_terms(tape, heads, ys)?;
        let s = tape.sum(terms)?;
        data_term = Some(match data_term {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let data_term = tape.scale(data_term.expect("at least one draw"), 1.0 / cfg.train_mc.max(1) as f64)?;
    let mut total = data_term;
    if kl_active && cfg.beta != 0.0 {
        let sp = cfg.prior_sd;
        let mut kl: Option<Var> = None;
        for (&mu, &sd) in mus.iter().zip(&sigmas) {
            // ln(sp) - ln(sd) + (sd^2 + mu^2) / (2 sp^2) - 1/2, summed
            let log_sd = tape.log(sd)?;
            let sd2 = tape.square(sd)?;
            let mu2 = tape.square(mu)?;
            let quad = tape.add(sd2, mu2)?;
            let quad = tape.scale(quad, 0.5 / (sp * sp))?;
            let t = tape.sub(quad, log_sd)?;
            let t = tape.offset(t, sp.ln() - 0.5)?;
            let s = tape.sum(t)?;
            kl = Some(match kl {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
        if let Some(kl) = kl {
            let weighted = tape.scale(kl, cfg.beta / num_batches as f64)?;
            total = tape.add(total, weighted)?;
        }
    }
    tape.scale(total, 1.0 / xs.len() as f64)
}

pub fn fit_vi(data: &Dataset, cfg: &ViConfig, seed: u64) -> Result<ViNet> {
    cfg.mlp.validate()?;
    if data.is_empty() {
        return Err(Error::contract("cannot fit VI on an empty dataset"));
    }
    if !(cfg.prior_sd > 0.0) {
        return Err(Error::contract("prior standard deviation must be positive"));
    }
    let root = RandomStream::new(seed);
    let mut params = init_variational(cfg, &mut root.child("init", 0));
    let tcfg = TrainConfig {
        learning_rate: cfg.learning_rate,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed,
    };
    let c = *cfg;
    let history = fit(
        &mut params,
        data,
        &tcfg,
        &mut root.child("train", 0),
        |tape, vars, batch, stream| {
            let nb = if batch.full_batch { 1 } else { batch.batches_per_epoch };
            let kl_active = batch.epoch >= c.burn_in;
            vi_objective(tape, vars, &c, batch.xs, batch.ys, nb, kl_active, stream)
        },
    )
    .map_err(|e| Error::method(MethodKind::Vi.name(), e))?;
    Ok(ViNet {
        cfg: *cfg,
        params,
        history,
        inference: root.child("inference", 0),
    })
}

impl ViNet {
    /// One weight draw from the variational posterior.
    fn draw_weights(&mut self) -> Vec<f64> {
        let values = self.params.values();
        let half = values.len() / 2;
        (0..half)
            .map(|i| values[i] + softplus(values[half + i]) * self.inference.normal())
            .collect()
    }
}

impl SecondOrderPredictor for ViNet {
    fn kind(&self) -> MethodKind {
        MethodKind::Vi
    }

    fn sample_grid(&mut self, xs: &[f64], d: usize) -> Result<Vec<SecondOrderSample>> {
        let per_member = (0..d.max(1))
            .map(|_| {
                let w = self.draw_weights();
                heads_to_predictions(&self.cfg.mlp.forward_values(&w, xs, None), self.cfg.mlp.outputs)
            })
            .collect();
        transpose_members(xs, per_member)
    }

    fn default_members(&self) -> usize {
        self.cfg.test_mc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gaussian_nll, FirstOrderPrediction};

    fn small(beta: f64) -> ViConfig {
        ViConfig {
            mlp: MlpConfig {
                hidden_layers: 1,
                hidden_width: 8,
                ..MlpConfig::default()
            },
            learning_rate: 0.005,
            epochs: 4,
            batch_size: 8,
            burn_in: 2,
            beta,
            train_mc: 3,
            test_mc: 50,
            prior_sd: 1.0,
            init_rho: -5.0,
        }
    }

    #[test]
    fn kl_closed_form() {
        assert_eq!(kl_diag_gaussian(0.0, 1.0, 0.0, 1.0), 0.0);
        assert!((kl_diag_gaussian(0.0, 1.0, 1.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(kl_diag_gaussian(0.3, 0.2, 0.0, 1.0) > 0.0);
    }

    #[test]
    fn kl_term_vanishes_when_posterior_equals_prior() {
        let mut cfg = small(1.0);
        cfg.train_mc = 1;
        let mut s = RandomStream::new(1);
        let p = init_variational(&cfg, &mut s);
        // means zero, scale equal to the prior
        let rho_prior = (1.0f64.exp() - 1.0).ln();
        let half = p.len() / 2;
        let vals: Vec<f64> = (0..p.len()).map(|i| if i < half { 0.0 } else { rho_prior }).collect();
        let p = p.with_values(vals).unwrap();
        let mut t1 = Tape::new();
        let v1 = p.register(&mut t1);
        let with_kl = vi_objective(&mut t1, &v1, &cfg, &[0.5], &[0.1], 1, true, &mut RandomStream::new(2)).unwrap();
        let mut t2 = Tape::new();
        let v2 = p.register(&mut t2);
        let without = vi_objective(&mut t2, &v2, &cfg, &[0.5], &[0.1], 1, false, &mut RandomStream::new(2)).unwrap();
        let diff = t1.scalar_value(with_kl).unwrap() - t2.scalar_value(without).unwrap();
        assert!(diff.abs() < 1e-12, "{diff}");
    }

    #[test]
    fn zero_beta_single_point_is_plain_nll() {
        let mut cfg = small(0.0);
        cfg.train_mc = 1;
        let mut s = RandomStream::new(3);
        let p = init_variational(&cfg, &mut s);
        let half = p.len() / 2;
        // vanishing posterior scale: the draw is the mean network
        let vals: Vec<f64> = p
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| if i < half { v } else { -60.0 })
            .collect();
        let p = p.with_values(vals).unwrap();
        let mut t = Tape::new();
        let vars = p.register(&mut t);
        let obj = vi_objective(&mut t, &vars, &cfg, &[0.4], &[0.7], 1, true, &mut RandomStream::new(4)).unwrap();
        let raw = cfg.mlp.forward_values(&p.values()[..half], &[0.4], None);
        let nll = gaussian_nll(FirstOrderPrediction::from_heads(raw[0], raw[1]), 0.7).unwrap();
        assert!((t.scalar_value(obj).unwrap() - nll).abs() < 1e-9);
    }

    #[test]
    fn fits_and_samples() {
        let data = crate::dgp::generate_dataset(&Default::default(), 30, 5).unwrap();
        let mut net = fit_vi(&data, &small(5.0), 11).unwrap();
        let s = net.sample_grid(&[0.2, 0.8], 25).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].members.len(), 25);
    }
}
