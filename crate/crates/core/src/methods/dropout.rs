use super::{transpose_members, MethodKind, SecondOrderPredictor, SecondOrderSample};
use crate::dgp::Dataset;
use crate::error::{Error, Result};
use crate::nn::{train_mlp, MlpConfig, TrainConfig, TrainedMlp};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McDropoutConfig {
    pub mlp: MlpConfig,
    pub rate: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stochastic forward passes at inference.
    pub passes: usize,
}

/// One network trained with dropout; members are stochastic forward passes.
#[derive(Clone, Debug)]
pub struct McDropout {
    pub model: TrainedMlp,
    passes: usize,
}

pub fn fit_mc_dropout(data: &Dataset, cfg: &McDropoutConfig, seed: u64) -> Result<McDropout> {
    if !(cfg.rate > 0.0 && cfg.rate < 1.0) {
        return Err(Error::contract(format!(
            "dropout rate must lie in (0, 1), got {}",
            cfg.rate
        )));
    }
    let mlp = MlpConfig {
        dropout_rate: cfg.rate,
        ..cfg.mlp
    };
    let tcfg = TrainConfig {
        learning_rate: cfg.learning_rate,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed,
    };
    let model = train_mlp(data, &mlp, &tcfg).map_err(|e| Error::method(MethodKind::McDropout.name(), e))?;
    Ok(McDropout {
        model,
        passes: cfg.passes,
    })
}

impl SecondOrderPredictor for McDropout {
    fn kind(&self) -> MethodKind {
        MethodKind::McDropout
    }

    fn sample_grid(&mut self, xs: &[f64], d: usize) -> Result<Vec<SecondOrderSample>> {
        let d = d.max(1);
        let per_member = (0..d).map(|_| self.model.predict_batch(xs, true)).collect();
        transpose_members(xs, per_member)
    }

    fn default_members(&self) -> usize {
        self.passes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decompose::variance_decomposition;
    use crate::dgp::{generate_dataset, DgpSpec};

    fn cfg(rate: f64) -> McDropoutConfig {
        McDropoutConfig {
            mlp: MlpConfig {
                hidden_layers: 2,
                hidden_width: 16,
                ..MlpConfig::default()
            },
            rate,
            learning_rate: 0.002,
            epochs: 10,
            batch_size: 16,
            passes: 500,
        }
    }

    #[test]
    fn positive_epistemic_everywhere() {
        let data = generate_dataset(&DgpSpec::default(), 40, 1).unwrap();
        let mut m = fit_mc_dropout(&data, &cfg(0.2), 5).unwrap();
        let samples = m.sample_grid(&[0.05, 0.3, 0.6, 0.95], 500).unwrap();
        for s in samples {
            assert_eq!(s.members.len(), 500);
            assert!(variance_decomposition(&s).unwrap().epistemic > 0.0);
        }
    }

    #[test]
    fn rate_bounds_enforced() {
        let data = generate_dataset(&DgpSpec::default(), 10, 1).unwrap();
        assert!(fit_mc_dropout(&data, &cfg(0.0), 1).is_err());
        assert!(fit_mc_dropout(&data, &cfg(1.0), 1).is_err());
    }

    #[test]
    fn vanishing_rate_gives_vanishing_spread() {
        let data = generate_dataset(&DgpSpec::default(), 40, 1).unwrap();
        let mut m = fit_mc_dropout(&data, &cfg(1e-12), 5).unwrap();
        let s = m.sample_thetas(0.5, 200).unwrap();
        assert_eq!(variance_decomposition(&s).unwrap().epistemic, 0.0);
    }
}
