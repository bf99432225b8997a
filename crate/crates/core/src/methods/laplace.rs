use super::{transpose_members, MethodKind, SecondOrderPredictor, SecondOrderSample};
use crate::autodiff::{hessian_diag_ggn, ParameterVector, Tape, Var};
use crate::dgp::{Dataset, RandomStream};
use crate::error::{Error, Result};
use crate::nn::{fit, gaussian_nll_mean, heads_to_predictions, MlpConfig, TrainConfig, TrainHistory};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LaplaceConfig {
    pub mlp: MlpConfig,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub prior_precision: f64,
    /// Observation-noise scale used for the mean head's curvature.
    pub noise: f64,
    pub posterior_samples: usize,
    pub subset: LaplaceSubset,
}

/// Which weights receive a posterior spread; the rest stay at the MAP.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LaplaceSubset {
    All,
    LastLayer,
}

impl LaplaceSubset {
    pub fn name(self) -> &'static str {
        match self {
            LaplaceSubset::All => "all",
            LaplaceSubset::LastLayer => "last_layer",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [LaplaceSubset::All, LaplaceSubset::LastLayer]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

/// Diagonal Gaussian around a MAP estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct LaplacePosterior {
    pub map: Vec<f64>,
    /// Posterior variance of every parameter.
    pub variances: Vec<f64>,
}

impl LaplacePosterior {
    /// Posterior variances `1 / (curvature + prior_precision)`.
    pub fn from_curvature(map: Vec<f64>, curvature: &[f64], prior_precision: f64) -> Result<Self> {
        if !(prior_precision > 0.0) {
            return Err(Error::contract(format!(
                "prior precision must be positive, got {prior_precision}"
            )));
        }
        if map.len() != curvature.len() {
            return Err(Error::contract("curvature and MAP lengths differ"));
        }
        let variances = curvature.iter().map(|&h| 1.0 / (h + prior_precision)).collect();
        Ok(LaplacePosterior { map, variances })
    }

    pub fn sample(&self, stream: &mut RandomStream) -> Vec<f64> {
        self.map
            .iter()
            .zip(&self.variances)
            .map(|(m, v)| m + v.sqrt() * stream.normal())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct LaplaceNet {
    cfg: LaplaceConfig,
    pub posterior: LaplacePosterior,
    pub history: TrainHistory,
    inference: RandomStream,
}

fn squared_norm(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &v in vars {
        let sq = tape.square(v)?;
        let s = tape.sum(sq)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    acc.ok_or_else(|| Error::contract("no parameters"))
}

/// GGN diagonal of the summed Gaussian NLL: the mean head uses the fixed
/// noise scale, the log-variance head its Fisher curvature of one half.
pub fn gaussian_ggn_diagonal(
    mlp: &MlpConfig,
    params: &ParameterVector,
    data: &Dataset,
    noise: f64,
) -> Result<Vec<f64>> {
    let mean_curv = 1.0 / (noise * noise);
    hessian_diag_ggn(params, data.len(), |tape, vars, i| {
        let heads = mlp.forward(tape, vars, &data.xs[i..i + 1], None)?;
        let mu = tape.column(heads, 0)?;
        let mu = tape.sum(mu)?;
        let s = tape.column(heads, 1)?;
        let s = tape.sum(s)?;
        Ok(vec![(mu, mean_curv), (s, 0.5)])
    })
}

pub fn fit_laplace(data: &Dataset, cfg: &LaplaceConfig, seed: u64) -> Result<LaplaceNet> {
    cfg.mlp.validate()?;
    if data.is_empty() {
        return Err(Error::contract("cannot fit Laplace on an empty dataset"));
    }
    if !(cfg.noise > 0.0) {
        return Err(Error::contract("noise scale must be positive"));
    }
    let wrap = |e| Error::method(MethodKind::Laplace.name(), e);
    let root = RandomStream::new(seed);
    let mut params = cfg.mlp.init_params(&mut root.child("init", 0));
    let tcfg = TrainConfig {
        learning_rate: cfg.learning_rate,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed,
    };
    let n = data.len() as f64;
    let c = *cfg;
    let history = fit(
        &mut params,
        data,
        &tcfg,
        &mut root.child("train", 0),
        |tape, vars, batch, _| {
            let heads = c.mlp.forward(tape, vars, batch.xs, None)?;
            let nll = gaussian_nll_mean(tape, heads, batch.ys)?;
            let reg = squared_norm(tape, vars)?;
            let reg = tape.scale(reg, 0.5 * c.prior_precision / n)?;
            tape.add(nll, reg)
        },
    )
    .map_err(wrap)?;
    let ggn = gaussian_ggn_diagonal(&cfg.mlp, &params, data, cfg.noise).map_err(wrap)?;
    let mut posterior = LaplacePosterior::from_curvature(params.values().to_vec(), &ggn, cfg.prior_precision)?;
    if cfg.subset == LaplaceSubset::LastLayer {
        let last: usize = params.layout().iter().rev().take(2).map(|e| e.len()).sum();
        let frozen = posterior.variances.len() - last;
        posterior.variances[..frozen].fill(0.0);
    }
    Ok(LaplaceNet {
        cfg: *cfg,
        posterior,
        history,
        inference: root.child("inference", 0),
    })
}

impl LaplaceNet {
    /// Same MAP and curvature under a different prior precision.
    pub fn with_prior_precision(&self, prior_precision: f64) -> Result<LaplaceNet> {
        let curvature: Vec<f64> = self
            .posterior
            .variances
            .iter()
            .map(|v| 1.0 / v - self.cfg.prior_precision)
            .collect();
        Ok(LaplaceNet {
            cfg: LaplaceConfig {
                prior_precision,
                ..self.cfg
            },
            posterior: LaplacePosterior::from_curvature(self.posterior.map.clone(), &curvature, prior_precision)?,
            history: self.history.clone(),
            inference: self.inference.clone(),
        })
    }
}

impl SecondOrderPredictor for LaplaceNet {
    fn kind(&self) -> MethodKind {
        MethodKind::Laplace
    }

    fn sample_grid(&mut self, xs: &[f64], d: usize) -> Result<Vec<SecondOrderSample>> {
        let per_member = (0..d.max(1))
            .map(|_| {
                let w = self.posterior.sample(&mut self.inference);
                heads_to_predictions(&self.cfg.mlp.forward_values(&w, xs, None), self.cfg.mlp.outputs)
            })
            .collect();
        transpose_members(xs, per_member)
    }

    fn default_members(&self) -> usize {
        self.cfg.posterior_samples
    }
}
