use rayon::prelude::*;

use super::{transpose_members, MethodKind, SecondOrderPredictor, SecondOrderSample};
use crate::dgp::{derive_seed, Dataset, RandomStream};
use crate::error::{Error, Result};
use crate::nn::{train_mlp, MlpConfig, TrainConfig, TrainedMlp};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnsembleConfig {
    pub mlp: MlpConfig,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

/// Equally weighted Dirac mixture over independently trained networks.
#[derive(Clone, Debug)]
pub struct Ensemble {
    kind: MethodKind,
    pub members: Vec<TrainedMlp>,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

fn check_members(seeds: &[u64]) -> Result<()> {
    if seeds.len() < 2 {
        return Err(Error::contract(format!(
            "an ensemble needs at least 2 members, got {}",
            seeds.len()
        )));
    }
    Ok(())
}

fn train_members(
    kind: MethodKind,
    seeds: &[u64],
    cfg: &EnsembleConfig,
    data_for: impl Fn(u64) -> Dataset + Sync,
) -> Result<Ensemble> {
    let members = seeds
        .par_iter()
        .enumerate()
        .map(|(j, &seed)| {
            let tcfg = TrainConfig {
                learning_rate: cfg.learning_rate,
                epochs: cfg.epochs,
                batch_size: cfg.batch_size,
                seed,
            };
            train_mlp(&data_for(seed), &cfg.mlp, &tcfg)
                .map_err(|e| Error::method(kind.name(), format!("member {j}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Ensemble { kind, members })
}

/// One network per procedural seed, each on the full dataset.
pub fn fit_deep_ensemble(data: &Dataset, seeds: &[u64], cfg: &EnsembleConfig) -> Result<Ensemble> {
    check_members(seeds)?;
    train_members(MethodKind::DeepEnsemble, seeds, cfg, |_| data.clone())
}

/// Bootstrap resample of `ceil(fraction * N)` rows (with replacement) for a
/// member with procedural seed `seed`.
pub fn bootstrap_indices(data: &Dataset, seed: u64, fraction: f64) -> Vec<usize> {
    let size = (fraction * data.len() as f64).ceil() as usize;
    let mut stream = RandomStream::new(derive_seed(seed, "bootstrap", data.seed));
    (0..size).map(|_| stream.below(data.len())).collect()
}

/// Like the deep ensemble, but every member trains on its own bootstrap
/// resample.
pub fn fit_bootstrap_ensemble(data: &Dataset, seeds: &[u64], cfg: &EnsembleConfig, fraction: f64) -> Result<Ensemble> {
    check_members(seeds)?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::contract(format!(
            "bootstrap fraction must lie in (0, 1], got {fraction}"
        )));
    }
    if data.is_empty() {
        return Err(Error::contract("cannot resample an empty dataset"));
    }
    train_members(MethodKind::BootstrapEnsemble, seeds, cfg, |seed| {
        data.subset(&bootstrap_indices(data, seed, fraction))
    })
}

impl SecondOrderPredictor for Ensemble {
    fn kind(&self) -> MethodKind {
        self.kind
    }

    fn sample_grid(&mut self, xs: &[f64], _d: usize) -> Result<Vec<SecondOrderSample>> {
        let per_member = self.members.iter().map(|m| m.predict_deterministic(xs)).collect();
        transpose_members(xs, per_member)
    }

    fn default_members(&self) -> usize {
        self.members.len()
    }

    fn warnings(&self) -> Vec<String> {
        self.members
            .iter()
            .enumerate()
            .filter(|(_, m)| m.history.loss_increased())
            .map(|(j, _)| format!("member {j}: final training loss above first-epoch loss"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decompose::variance_decomposition;
    use crate::dgp::{generate_dataset, DgpSpec};

    fn cfg() -> EnsembleConfig {
        EnsembleConfig {
            mlp: MlpConfig {
                hidden_layers: 2,
                hidden_width: 16,
                ..MlpConfig::default()
            },
            learning_rate: 0.01,
            epochs: 20,
            batch_size: 16,
        }
    }

    #[test]
    fn identical_seeds_have_zero_epistemic() {
        let data = generate_dataset(&DgpSpec::default(), 40, 7).unwrap();
        let mut e = fit_deep_ensemble(&data, &[3, 3, 3], &cfg()).unwrap();
        for s in e.sample_grid(&[0.1, 0.5, 0.9], 100).unwrap() {
            assert_eq!(variance_decomposition(&s).unwrap().epistemic, 0.0);
        }
        let mut b = fit_bootstrap_ensemble(&data, &[4, 4], &cfg(), 1.0).unwrap();
        for s in b.sample_grid(&[0.2, 0.7], 100).unwrap() {
            assert_eq!(variance_decomposition(&s).unwrap().epistemic, 0.0);
        }
    }

    #[test]
    fn member_count_ignores_request() {
        let data = generate_dataset(&DgpSpec::default(), 30, 7).unwrap();
        let mut e = fit_deep_ensemble(&data, &[1, 2, 3, 4], &cfg()).unwrap();
        assert_eq!(e.sample_thetas(0.5, 500).unwrap().members.len(), 4);
        // mixture mean is the arithmetic mean of member means
        let s = e.sample_thetas(0.3, 1).unwrap();
        let direct: f64 = e
            .members
            .iter()
            .map(|m| m.predict_deterministic(&[0.3])[0].mean)
            .sum::<f64>()
            / 4.0;
        assert!((s.mixture_mean() - direct).abs() < 1e-15);
    }

    #[test]
    fn single_member_rejected() {
        let data = generate_dataset(&DgpSpec::default(), 10, 7).unwrap();
        assert!(fit_deep_ensemble(&data, &[1], &cfg()).is_err());
        assert!(fit_bootstrap_ensemble(&data, &[1, 2], &cfg(), 0.0).is_err());
    }

    #[test]
    fn bootstrap_indices_are_deterministic() {
        let data = generate_dataset(&DgpSpec::default(), 50, 42).unwrap();
        let a = bootstrap_indices(&data, 9, 0.6);
        assert_eq!(a.len(), 30);
        assert_eq!(a, bootstrap_indices(&data, 9, 0.6));
        assert_ne!(a, bootstrap_indices(&data, 10, 0.6));
        assert!(a.iter().all(|&i| i < 50));
    }
}
