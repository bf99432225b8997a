use super::mlp::{gaussian_nll_mean, FirstOrderPrediction, MlpConfig};
use crate::autodiff::{ParameterVector, Tape, Var};
use crate::dgp::{Dataset, RandomStream};
use crate::error::{Error, Result};

/// Optimization settings for one training run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Procedural seed: drives initialization, batch order and dropout.
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::contract(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

/// Adaptive moment estimation with the usual decay constants.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Global gradient-norm ceiling. Healthy steps sit around 1 to 20; a point
/// whose predicted variance hits the floor can produce norms near 1e10, and
/// one such step swamps Adam's second moment for thousands of iterations.
pub const MAX_GRAD_NORM: f64 = 100.0;

/// Rescales `grad` in place so its Euclidean norm is at most `max`.
pub fn clip_norm(grad: &mut [f64], max: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max {
        let s = max / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

/// Losses observed during a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    /// Size-weighted mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Full-batch loss after the first epoch.
    pub first_full_loss: f64,
    /// Full-batch loss after the last epoch.
    pub final_full_loss: f64,
}

impl TrainHistory {
    /// Whether the run ended above where its first epoch left it.
    pub fn loss_increased(&self) -> bool {
        self.final_full_loss > self.first_full_loss
    }
}

/// One minibatch handed to a loss closure.
pub struct Batch<'a> {
    pub xs: &'a [f64],
    pub ys: &'a [f64],
    /// Number of minibatches per epoch.
    pub batches_per_epoch: usize,
    pub epoch: usize,
    pub full_batch: bool,
}

/// Minibatch Adam over `params` minimizing `loss_fn`.
///
/// Batch order is reshuffled each epoch from `stream`; the last short batch
/// is kept. The loss closure also receives `stream` for any stochastic
/// forward (dropout masks, reparameterization noise).
pub fn fit<F>(
    params: &mut ParameterVector,
    data: &Dataset,
    tcfg: &TrainConfig,
    stream: &mut RandomStream,
    mut loss_fn: F,
) -> Result<TrainHistory>
where
    F: FnMut(&mut Tape, &[Var], &Batch<'_>, &mut RandomStream) -> Result<Var>,
{
    tcfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("cannot train on an empty dataset"));
    }
    let n = data.len();
    let bs = tcfg.batch_size.min(n);
    let batches_per_epoch = n.div_ceil(bs);
    let mut order: Vec<usize> = (0..n).collect();
    let mut adam = Adam::new(params.len(), tcfg.learning_rate);
    let mut history = TrainHistory::default();
    let mut eval_stream = stream.child("full-batch-eval", 0);
    let (mut bx, mut by) = (Vec::with_capacity(bs), Vec::with_capacity(bs));

    let diverged = |epoch: usize, e: Error| match e {
        Error::Numeric { op } => Error::Training {
            epoch,
            reason: format!("non-finite value in `{op}`"),
        },
        other => other,
    };

    for epoch in 0..tcfg.epochs {
        stream.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(bs) {
            bx.clear();
            by.clear();
            bx.extend(chunk.iter().map(|&i| data.xs[i]));
            by.extend(chunk.iter().map(|&i| data.ys[i]));
            let batch = Batch {
                xs: &bx,
                ys: &by,
                batches_per_epoch,
                epoch,
                full_batch: false,
            };
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let root = loss_fn(&mut tape, &vars, &batch, stream).map_err(|e| diverged(epoch, e))?;
            let loss = tape.scalar_value(root)?;
            let mut grad = tape.backward(root).map_err(|e| diverged(epoch, e))?.flat(&tape, &vars);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    reason: "non-finite loss or gradient".into(),
                });
            }
            clip_norm(&mut grad, MAX_GRAD_NORM);
            adam.step(params.values_mut(), &grad);
            total += loss * chunk.len() as f64;
        }
        history.epoch_losses.push(total / n as f64);

        if epoch == 0 || epoch + 1 == tcfg.epochs {
            let batch = Batch {
                xs: &data.xs,
                ys: &data.ys,
                batches_per_epoch,
                epoch,
                full_batch: true,
            };
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let root = loss_fn(&mut tape, &vars, &batch, &mut eval_stream).map_err(|e| diverged(epoch, e))?;
            let loss = tape.scalar_value(root)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: "non-finite full-batch loss".into(),
                });
            }
            if epoch == 0 {
                history.first_full_loss = loss;
            }
            if epoch + 1 == tcfg.epochs {
                history.final_full_loss = loss;
            }
        }
    }
    Ok(history)
}

/// A trained heteroscedastic network plus its private inference stream.
#[derive(Clone, Debug)]
pub struct TrainedMlp {
    pub config: MlpConfig,
    pub params: ParameterVector,
    pub history: TrainHistory,
    inference: RandomStream,
}

impl TrainedMlp {
    pub fn new(config: MlpConfig, params: ParameterVector, inference: RandomStream) -> Self {
        TrainedMlp {
            config,
            params,
            history: TrainHistory::default(),
            inference,
        }
    }

    /// Prediction at `x`; with `dropout_active`, a fresh mask is drawn.
    pub fn predict(&mut self, x: f64, dropout_active: bool) -> FirstOrderPrediction {
        self.predict_batch(&[x], dropout_active)[0]
    }

    pub fn predict_batch(&mut self, xs: &[f64], dropout_active: bool) -> Vec<FirstOrderPrediction> {
        let stream = dropout_active.then_some(&mut self.inference);
        heads_to_predictions(
            &self.config.forward_values(self.params.values(), xs, stream),
            self.config.outputs,
        )
    }

    /// Deterministic prediction; needs no mutable state.
    pub fn predict_deterministic(&self, xs: &[f64]) -> Vec<FirstOrderPrediction> {
        heads_to_predictions(
            &self.config.forward_values(self.params.values(), xs, None),
            self.config.outputs,
        )
    }

    pub fn inference_stream(&mut self) -> &mut RandomStream {
        &mut self.inference
    }
}

pub(crate) fn heads_to_predictions(raw: &[f64], outputs: usize) -> Vec<FirstOrderPrediction> {
    raw.chunks_exact(outputs)
        .map(|r| FirstOrderPrediction::from_heads(r[0], r[1]))
        .collect()
}

/// Maximum-likelihood training of a heteroscedastic network.
pub fn train_mlp(data: &Dataset, mcfg: &MlpConfig, tcfg: &TrainConfig) -> Result<TrainedMlp> {
    mcfg.validate()?;
    if mcfg.outputs != 2 {
        return Err(Error::contract("heteroscedastic network needs exactly 2 outputs"));
    }
    let root = RandomStream::new(tcfg.seed);
    let mut params = mcfg.init_params(&mut root.child("init", 0));
    let mut stream = root.child("train", 0);
    let cfg = *mcfg;
    let history = fit(&mut params, data, tcfg, &mut stream, |tape, vars, batch, s| {
        let dropout = (cfg.dropout_rate > 0.0).then_some(s);
        let heads = cfg.forward(tape, vars, batch.xs, dropout)?;
        gaussian_nll_mean(tape, heads, batch.ys)
    })?;
    let mut trained = TrainedMlp::new(*mcfg, params, root.child("inference", 0));
    trained.history = history;
    Ok(trained)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MlpConfig {
        MlpConfig {
            hidden_layers: 2,
            hidden_width: 16,
            ..MlpConfig::default()
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut adam = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
            adam.step(&mut p, &g);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2), "{p:?}");
    }

    #[test]
    fn clipping_rescales_only_large_gradients() {
        let mut g = vec![30.0, 40.0];
        clip_norm(&mut g, 100.0);
        assert_eq!(g, [30.0, 40.0]);
        clip_norm(&mut g, 5.0);
        assert_eq!(g, [3.0, 4.0]);
    }

    #[test]
    fn identical_seeds_give_identical_models() {
        let data = crate::dgp::generate_dataset(&Default::default(), 40, 1).unwrap();
        let tcfg = TrainConfig {
            learning_rate: 0.01,
            epochs: 5,
            batch_size: 16,
            seed: 99,
        };
        let a = train_mlp(&data, &small(), &tcfg).unwrap();
        let b = train_mlp(&data, &small(), &tcfg).unwrap();
        assert_eq!(a.params, b.params);
        let c = train_mlp(&data, &small(), &TrainConfig { seed: 100, ..tcfg }).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn deterministic_predictions_repeat() {
        let data = crate::dgp::generate_dataset(&Default::default(), 20, 2).unwrap();
        let tcfg = TrainConfig {
            learning_rate: 0.01,
            epochs: 2,
            batch_size: 8,
            seed: 5,
        };
        let mut m = train_mlp(&data, &small(), &tcfg).unwrap();
        assert_eq!(m.predict(0.4, false), m.predict(0.4, false));
        // zero dropout rate: stochastic path equals the deterministic one
        assert_eq!(m.predict(0.4, true), m.predict(0.4, false));
    }

    #[test]
    fn dropout_predictions_vary() {
        let data = crate::dgp::generate_dataset(&Default::default(), 20, 3).unwrap();
        let cfg = MlpConfig {
            dropout_rate: 0.2,
            ..small()
        };
        let tcfg = TrainConfig {
            learning_rate: 0.01,
            epochs: 3,
            batch_size: 8,
            seed: 6,
        };
        let mut m = train_mlp(&data, &cfg, &tcfg).unwrap();
        let means: Vec<f64> = (0..500).map(|_| m.predict(0.6, true).mean).collect();
        let mu = means.iter().sum::<f64>() / 500.0;
        let var = means.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 500.0;
        assert!(var > 0.0);
    }

    #[test]
    fn batch_larger_than_data_falls_back_to_full_batch() {
        let data = crate::dgp::generate_dataset(&Default::default(), 10, 4).unwrap();
        let tcfg = TrainConfig {
            learning_rate: 0.01,
            epochs: 3,
            batch_size: 64,
            seed: 1,
        };
        let m = train_mlp(&data, &small(), &tcfg).unwrap();
        assert_eq!(m.history.epoch_losses.len(), 3);
    }

    #[test]
    fn empty_dataset_rejected() {
        let data = Dataset::new(vec![], vec![], 0).unwrap();
        let tcfg = TrainConfig {
            learning_rate: 0.01,
            epochs: 1,
            batch_size: 4,
            seed: 1,
        };
        assert!(train_mlp(&data, &small(), &tcfg).is_err());
    }

    #[test]
    fn divergence_reports_epoch() {
        let data = Dataset::new(vec![0.5, 0.6], vec![1e300, -1e300], 0).unwrap();
        let tcfg = TrainConfig {
            learning_rate: 0.01,
            epochs: 2,
            batch_size: 2,
            seed: 1,
        };
        match train_mlp(&data, &small(), &tcfg) {
            Err(Error::Training { epoch, .. }) => assert_eq!(epoch, 0),
            other => panic!("expected training error, got {other:?}"),
        }
    }
}
