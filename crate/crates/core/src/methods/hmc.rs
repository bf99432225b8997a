use super::{transpose_members, MethodKind, SecondOrderPredictor, SecondOrderSample};
use crate::autodiff::{grad_at, Tape, Var};
use crate::dgp::{Dataset, RandomStream};
use crate::error::{Error, Result};
use crate::nn::{fit, gaussian_nll_mean, gaussian_nll_terms, heads_to_predictions, MlpConfig, TrainConfig};

/// Chain settings for Hamiltonian Monte Carlo with a unit mass matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HmcSettings {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    /// Total chain iterations, burn-in included.
    pub n_samples: usize,
    pub burn: usize,
}

#[derive(Clone, Debug, Default)]
pub struct HmcChain {
    /// Post-burn states.
    pub samples: Vec<Vec<f64>>,
    pub accepted: usize,
    pub proposals: usize,
}

impl HmcChain {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }
}

/// Metropolis test for a move from energy `h_old` to `h_new` given a
/// uniform draw `u` in `[0, 1)`.
pub fn metropolis_accept(h_old: f64, h_new: f64, u: f64) -> bool {
    h_new.is_finite() && u.ln() < h_old - h_new
}

/// `n_steps` leapfrog steps of size `step` on potential `u_grad`, starting
/// from a state whose potential gradient is `grad`. Returns the potential and
/// gradient at the end point.
pub fn leapfrog<F>(
    q: &mut [f64],
    p: &mut [f64],
    grad: &[f64],
    u_grad: &mut F,
    step: f64,
    n_steps: usize,
) -> Result<(f64, Vec<f64>)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    for (pi, gi) in p.iter_mut().zip(grad) {
        *pi -= 0.5 * step * gi;
    }
    let mut current = None;
    for l in 0..n_steps {
        for (qi, pi) in q.iter_mut().zip(p.iter()) {
            *qi += step * pi;
        }
        let (u, g) = u_grad(q)?;
        let w = if l + 1 == n_steps { 0.5 * step } else { step };
        for (pi, gi) in p.iter_mut().zip(&g) {
            *pi -= w * gi;
        }
        current = Some((u, g));
    }
    match current {
        Some(c) => Ok(c),
        None => u_grad(q),
    }
}

fn kinetic(p: &[f64]) -> f64 {
    0.5 * p.iter().map(|v| v * v).sum::<f64>()
}

/// Runs a chain targeting `exp(-U)` from `init`.
pub fn hmc_sample<F>(
    mut u_grad: F,
    init: Vec<f64>,
    settings: &HmcSettings,
    stream: &mut RandomStream,
) -> Result<HmcChain>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(settings.step_size > 0.0) || settings.leapfrog_steps == 0 {
        return Err(Error::contract(format!("invalid HMC settings {settings:?}")));
    }
    let mut q = init;
    let (mut u, mut g) = u_grad(&q)?;
    let mut chain = HmcChain::default();
    for it in 0..settings.n_samples {
        let mut p = stream.normals(q.len());
        let h_old = u + kinetic(&p);
        let mut q_new = q.clone();
        let proposal = leapfrog(
            &mut q_new,
            &mut p,
            &g,
            &mut u_grad,
            settings.step_size,
            settings.leapfrog_steps,
        );
        chain.proposals += 1;
        let accept_draw = stream.uniform();
        // a proposal that wandered into non-finite territory is rejected
        if let Ok((u_new, g_new)) = proposal {
            let h_new = u_new + kinetic(&p);
            if metropolis_accept(h_old, h_new, accept_draw) {
                q = q_new;
                u = u_new;
                g = g_new;
                chain.accepted += 1;
            }
        }
        if it >= settings.burn {
            chain.samples.push(q.clone());
        }
    }
    Ok(chain)
}

/// Bayesian network sampled by HMC after gradient pretraining.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HmcConfig {
    pub mlp: MlpConfig,
    pub pretrain_lr: f64,
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub chain: HmcSettings,
    /// Precision of the isotropic Gaussian weight prior.
    pub tau: f64,
    pub inference_samples: usize,
    pub inference_burn: usize,
}

#[derive(Clone, Debug)]
pub struct HmcNet {
    cfg: HmcConfig,
    pub chain: HmcChain,
    warnings: Vec<String>,
    inference: RandomStream,
}

fn prior_term(tape: &mut Tape, vars: &[Var], weight: f64) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &v in vars {
        let sq = tape.square(v)?;
        let s = tape.sum(sq)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    tape.scale(acc.ok_or_else(|| Error::contract("no parameters"))?, weight)
}

pub fn fit_hmc(data: &Dataset, cfg: &HmcConfig, seed: u64) -> Result<HmcNet> {
    cfg.mlp.validate()?;
    if data.is_empty() {
        return Err(Error::contract("cannot fit HMC on an empty dataset"));
    }
    let wrap = |e| Error::method(MethodKind::Hmc.name(), e);
    let root = RandomStream::new(seed);
    let mut params = cfg.mlp.init_params(&mut root.child("init", 0));
    let n = data.len() as f64;
    let c = *cfg;
    if cfg.pretrain_epochs > 0 {
        let tcfg = TrainConfig {
            learning_rate: cfg.pretrain_lr,
            epochs: cfg.pretrain_epochs,
            batch_size: cfg.batch_size,
            seed,
        };
        fit(
            &mut params,
            data,
            &tcfg,
            &mut root.child("train", 0),
            |tape, vars, batch, _| {
                let heads = c.mlp.forward(tape, vars, batch.xs, None)?;
                let nll = gaussian_nll_mean(tape, heads, batch.ys)?;
                let prior = prior_term(tape, vars, 0.5 * c.tau / n)?;
                tape.add(nll, prior)
            },
        )
        .map_err(wrap)?;
    }

    let template = params.clone();
    let potential = |q: &[f64]| -> Result<(f64, Vec<f64>)> {
        let p = template.with_values(q.to_vec())?;
        grad_at(&p, |tape, vars| {
            let heads = c.mlp.forward(tape, vars, &data.xs, None)?;
            let terms = gaussian_nll_terms(tape, heads, &data.ys)?;
            let nll = tape.sum(terms)?;
            let prior = prior_term(tape, vars, 0.5 * c.tau)?;
            tape.add(nll, prior)
        })
    };
    let chain = hmc_sample(
        potential,
        params.values().to_vec(),
        &cfg.chain,
        &mut root.child("chain", 0),
    )
    .map_err(wrap)?;
    let mut warnings = Vec::new();
    if chain.acceptance_rate() < 0.01 {
        warnings.push(format!("HMC acceptance rate {:.4} below 1%", chain.acceptance_rate()));
    }
    if chain.samples.is_empty() {
        return Err(wrap(Error::contract("no post-burn samples retained")));
    }
    Ok(HmcNet {
        cfg: *cfg,
        chain,
        warnings,
        inference: root.child("inference", 0),
    })
}

impl SecondOrderPredictor for HmcNet {
    fn kind(&self) -> MethodKind {
        MethodKind::Hmc
    }

    /// Mixes retained chain states drawn uniformly with replacement.
    fn sample_grid(&mut self, xs: &[f64], d: usize) -> Result<Vec<SecondOrderSample>> {
        let retained = &self.chain.samples;
        let per_member = (0..d.max(1))
            .map(|_| {
                let w = &retained[self.inference.below(retained.len())];
                heads_to_predictions(&self.cfg.mlp.forward_values(w, xs, None), self.cfg.mlp.outputs)
            })
            .collect();
        transpose_members(xs, per_member)
    }

    fn default_members(&self) -> usize {
        self.cfg
            .inference_samples
            .saturating_sub(self.cfg.inference_burn)
            .max(1)
    }

    fn warnings(&self) -> Vec<String> {
        self.warnings.clone()
    }
}
