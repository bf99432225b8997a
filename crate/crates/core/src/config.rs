//! Experiment configuration: a TOML document whose missing keys take the
//! published defaults and whose unknown keys are rejected.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decompose::ReferenceSpec;
use crate::dgp::DgpSpec;
use crate::error::{Error, Result};
use crate::methods::{
    DerConfig, EnsembleConfig, GpConfig, HmcConfig, HmcSettings, LaplaceConfig, LaplaceSubset, McDropoutConfig,
    MethodKind, ViConfig,
};
use crate::nn::{Activation, MlpConfig};
use crate::report::REFERENCE;

fn config_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

/// A value that is either fixed or keyed by training-set size.
///
/// Sizes missing from a keyed schedule use the entry of the largest listed
/// size below them, or the smallest listed size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Schedule {
    Fixed(usize),
    BySize(BTreeMap<String, usize>),
}

impl Schedule {
    fn by_size(pairs: &[(usize, usize)]) -> Self {
        Schedule::BySize(pairs.iter().map(|(n, v)| (n.to_string(), *v)).collect())
    }

    fn entries(&self, key: &str) -> Result<Vec<(usize, usize)>> {
        match self {
            Schedule::Fixed(v) => Ok(vec![(0, *v)]),
            Schedule::BySize(map) => {
                let mut out = map
                    .iter()
                    .map(|(k, &v)| {
                        k.parse::<usize>()
                            .map(|n| (n, v))
                            .map_err(|_| config_err(key, format!("schedule key `{k}` is not a sample size")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                out.sort();
                if out.is_empty() {
                    return Err(config_err(key, "schedule is empty"));
                }
                Ok(out)
            }
        }
    }

    pub fn at(&self, n: usize) -> usize {
        let entries = self.entries("").unwrap_or_default();
        entries
            .iter()
            .rev()
            .find(|(k, _)| *k <= n)
            .or(entries.first())
            .map_or(0, |(_, v)| *v)
    }

    fn validate(&self, key: &str) -> Result<()> {
        if self.entries(key)?.iter().any(|(_, v)| *v == 0) {
            return Err(config_err(key, "values must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpSection {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for DgpSection {
    fn default() -> Self {
        DgpSection { alpha: 1.2, beta: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestGrid {
    pub count: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for TestGrid {
    fn default() -> Self {
        TestGrid {
            count: 500,
            lo: 0.01,
            hi: 0.99,
        }
    }
}

impl TestGrid {
    /// `count` equally spaced points from `lo` to `hi` inclusive.
    pub fn points(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![0.5 * (self.lo + self.hi)];
        }
        let step = (self.hi - self.lo) / (self.count - 1) as f64;
        (0..self.count).map(|i| self.lo + step * i as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    /// `relu` or `tanh`.
    pub activation: String,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            hidden_layers: 4,
            hidden_width: 100,
            activation: "relu".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceSection {
    pub learning_rate: f64,
    pub epochs: Schedule,
}

impl Default for ReferenceSection {
    fn default() -> Self {
        ReferenceSection {
            learning_rate: 0.009,
            epochs: Schedule::Fixed(500),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub members: usize,
    pub learning_rate: f64,
    pub epochs: Schedule,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection {
            members: 10,
            learning_rate: 0.009,
            epochs: Schedule::by_size(&[(50, 50), (100, 250), (500, 500)]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapSection {
    pub members: usize,
    pub learning_rate: f64,
    pub epochs: Schedule,
    pub fraction: f64,
}

impl Default for BootstrapSection {
    fn default() -> Self {
        let e = EnsembleSection::default();
        BootstrapSection {
            members: e.members,
            learning_rate: e.learning_rate,
            epochs: e.epochs,
            fraction: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropoutSection {
    pub rate: f64,
    pub learning_rate: f64,
    pub epochs: Schedule,
    pub passes: usize,
}

impl Default for DropoutSection {
    fn default() -> Self {
        DropoutSection {
            rate: 0.2,
            learning_rate: 0.002,
            epochs: EnsembleSection::default().epochs,
            passes: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViSection {
    pub learning_rate: f64,
    pub epochs: Schedule,
    pub burn_in: usize,
    pub beta: f64,
    pub train_mc: usize,
    pub test_mc: usize,
    pub prior_sd: f64,
    pub init_rho: f64,
}

impl Default for ViSection {
    fn default() -> Self {
        ViSection {
            learning_rate: 0.005,
            epochs: Schedule::by_size(&[(50, 250), (100, 250), (500, 500)]),
            burn_in: 200,
            beta: 5.0,
            train_mc: 10,
            test_mc: 500,
            prior_sd: 1.0,
            init_rho: -5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LaplaceSection {
    pub learning_rate: f64,
    pub epochs: Schedule,
    pub prior_precision: f64,
    pub noise: f64,
    pub posterior_samples: usize,
    /// `last_layer` or `all`.
    pub subset: String,
    /// Batch sizes replacing the global ones at the listed sample sizes.
    pub batch_overrides: BTreeMap<String, usize>,
}

fn batch_128_at_500() -> BTreeMap<String, usize> {
    BTreeMap::from([("500".to_string(), 128)])
}

impl Default for LaplaceSection {
    fn default() -> Self {
        LaplaceSection {
            learning_rate: 0.005,
            epochs: Schedule::by_size(&[(50, 200), (100, 400), (500, 800)]),
            prior_precision: 1.0,
            noise: 2.0,
            posterior_samples: 1000,
            subset: "last_layer".into(),
            batch_overrides: batch_128_at_500(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmcSection {
    pub pretrain_learning_rate: f64,
    pub pretrain_epochs: Schedule,
    pub n_samples: usize,
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub burn: usize,
    pub tau: f64,
    pub inference_samples: usize,
    pub inference_burn: usize,
    pub batch_overrides: BTreeMap<String, usize>,
}

impl Default for HmcSection {
    fn default() -> Self {
        HmcSection {
            pretrain_learning_rate: 0.005,
            pretrain_epochs: Schedule::by_size(&[(50, 1000), (100, 2000), (500, 3000)]),
            n_samples: 200,
            step_size: 0.00015,
            leapfrog_steps: 10,
            burn: 50,
            tau: 1.0,
            inference_samples: 1000,
            inference_burn: 50,
            batch_overrides: batch_128_at_500(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DerSection {
    pub learning_rate: f64,
    pub epochs: Schedule,
    pub lambda: f64,
    pub samples: usize,
}

impl Default for DerSection {
    fn default() -> Self {
        DerSection {
            learning_rate: 0.0003,
            epochs: Schedule::Fixed(5000),
            lambda: 0.01,
            samples: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpSection {
    pub inducing: usize,
    pub learning_rate: f64,
    pub epochs: Schedule,
    pub hyper_every: usize,
    pub fd_step: f64,
    pub samples: usize,
}

impl Default for GpSection {
    fn default() -> Self {
        let g = GpConfig::default();
        GpSection {
            inducing: g.inducing,
            learning_rate: g.learning_rate,
            epochs: Schedule::Fixed(g.epochs),
            hyper_every: g.hyper_every,
            fd_step: g.fd_step,
            samples: 500,
        }
    }
}

pub const DEFAULT_DATASET_SEEDS: [u64; 20] = [
    7, 42, 2024, 123, 999, 50, 100, 150, 200, 250, 300, 350, 400, 450, 500, 550, 600, 650, 700, 750,
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Method names plus `reference`.
    pub methods: Vec<String>,
    pub sample_sizes: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub run_seeds: Vec<u64>,
    pub dataset_seeds: Vec<u64>,
    pub n_d: usize,
    pub n_gamma: usize,
    /// Left/right split of the region report.
    pub region_threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Maximum concurrent trainings; all cores when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parallelism: Option<usize>,
    pub dgp: DgpSection,
    pub test_grid: TestGrid,
    pub network: NetworkSection,
    pub reference: ReferenceSection,
    pub deep_ensemble: EnsembleSection,
    pub bootstrap_ensemble: BootstrapSection,
    pub mc_dropout: DropoutSection,
    pub vi: ViSection,
    pub laplace: LaplaceSection,
    pub hmc: HmcSection,
    pub der: DerSection,
    pub hetero_gp: GpSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut methods = vec![REFERENCE.to_string()];
        methods.extend(MethodKind::ALL.iter().map(|m| m.name().to_string()));
        ExperimentConfig {
            methods,
            sample_sizes: vec![50, 100, 500],
            batch_sizes: vec![32, 32, 64],
            run_seeds: vec![7, 42, 123, 999, 2024],
            dataset_seeds: DEFAULT_DATASET_SEEDS.to_vec(),
            n_d: 20,
            n_gamma: 10,
            region_threshold: 0.2,
            output_dir: None,
            parallelism: None,
            dgp: DgpSection::default(),
            test_grid: TestGrid::default(),
            network: NetworkSection::default(),
            reference: ReferenceSection::default(),
            deep_ensemble: EnsembleSection::default(),
            bootstrap_ensemble: BootstrapSection::default(),
            mc_dropout: DropoutSection::default(),
            vi: ViSection::default(),
            laplace: LaplaceSection::default(),
            hmc: HmcSection::default(),
            der: DerSection::default(),
            hetero_gp: GpSection::default(),
        }
    }
}

fn distinct<T: Ord>(key: &str, items: &[T]) -> Result<()> {
    if items.iter().collect::<BTreeSet<_>>().len() != items.len() {
        return Err(config_err(key, "entries must be distinct"));
    }
    Ok(())
}

fn positive(key: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(config_err(key, format!("must be positive, got {v}")));
    }
    Ok(())
}

fn at_least(key: &str, v: usize, min: usize) -> Result<()> {
    if v < min {
        return Err(config_err(key, format!("must be at least {min}, got {v}")));
    }
    Ok(())
}

fn check_overrides(key: &str, map: &BTreeMap<String, usize>) -> Result<()> {
    for (k, v) in map {
        if k.parse::<usize>().is_err() || *v == 0 {
            return Err(config_err(
                &format!("{key}.{k}"),
                "expected `<sample size> = <positive batch size>`",
            ));
        }
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(config_err("methods", "at least one method is required"));
        }
        for m in &self.methods {
            if m != REFERENCE && MethodKind::from_name(m).is_none() {
                return Err(config_err("methods", format!("unknown method `{m}`")));
            }
        }
        distinct("methods", &self.methods)?;
        if self.sample_sizes.is_empty() || self.sample_sizes.contains(&0) {
            return Err(config_err("sample_sizes", "need at least one positive size"));
        }
        distinct("sample_sizes", &self.sample_sizes)?;
        if self.batch_sizes.len() != self.sample_sizes.len() {
            return Err(config_err(
                "batch_sizes",
                format!(
                    "must have one entry per sample size ({} given, {} expected)",
                    self.batch_sizes.len(),
                    self.sample_sizes.len()
                ),
            ));
        }
        if self.batch_sizes.contains(&0) {
            return Err(config_err("batch_sizes", "batch sizes must be positive"));
        }
        if self.run_seeds.is_empty() {
            return Err(config_err("run_seeds", "at least one run seed is required"));
        }
        distinct("run_seeds", &self.run_seeds)?;
        distinct("dataset_seeds", &self.dataset_seeds)?;
        at_least("n_d", self.n_d, 2)?;
        at_least("n_gamma", self.n_gamma, 2)?;
        if !(self.region_threshold > 0.0 && self.region_threshold < 1.0) {
            return Err(config_err("region_threshold", "must lie in (0, 1)"));
        }
        if let Some(p) = self.parallelism {
            at_least("parallelism", p, 1)?;
        }
        positive("dgp.alpha", self.dgp.alpha)?;
        positive("dgp.beta", self.dgp.beta)?;
        let g = &self.test_grid;
        at_least("test_grid.count", g.count, 1)?;
        if !(0.0 < g.lo && g.lo < g.hi && g.hi < 1.0) {
            return Err(config_err("test_grid", "need 0 < lo < hi < 1"));
        }
        at_least("network.hidden_layers", self.network.hidden_layers, 1)?;
        at_least("network.hidden_width", self.network.hidden_width, 1)?;
        self.activation()?;
        self.laplace_subset()?;

        positive("reference.learning_rate", self.reference.learning_rate)?;
        self.reference.epochs.validate("reference.epochs")?;
        at_least("deep_ensemble.members", self.deep_ensemble.members, 2)?;
        positive("deep_ensemble.learning_rate", self.deep_ensemble.learning_rate)?;
        self.deep_ensemble.epochs.validate("deep_ensemble.epochs")?;
        let b = &self.bootstrap_ensemble;
        at_least("bootstrap_ensemble.members", b.members, 2)?;
        positive("bootstrap_ensemble.learning_rate", b.learning_rate)?;
        b.epochs.validate("bootstrap_ensemble.epochs")?;
        if !(b.fraction > 0.0 && b.fraction <= 1.0) {
            return Err(config_err("bootstrap_ensemble.fraction", "must lie in (0, 1]"));
        }
        let d = &self.mc_dropout;
        if !(d.rate > 0.0 && d.rate < 1.0) {
            return Err(config_err("mc_dropout.rate", "must lie in (0, 1)"));
        }
        positive("mc_dropout.learning_rate", d.learning_rate)?;
        d.epochs.validate("mc_dropout.epochs")?;
        at_least("mc_dropout.passes", d.passes, 1)?;
        let v = &self.vi;
        positive("vi.learning_rate", v.learning_rate)?;
        v.epochs.validate("vi.epochs")?;
        if !(v.beta >= 0.0) {
            return Err(config_err("vi.beta", "must be nonnegative"));
        }
        at_least("vi.train_mc", v.train_mc, 1)?;
        at_least("vi.test_mc", v.test_mc, 1)?;
        positive("vi.prior_sd", v.prior_sd)?;
        let l = &self.laplace;
        positive("laplace.learning_rate", l.learning_rate)?;
        l.epochs.validate("laplace.epochs")?;
        positive("laplace.prior_precision", l.prior_precision)?;
        positive("laplace.noise", l.noise)?;
        at_least("laplace.posterior_samples", l.posterior_samples, 1)?;
        check_overrides("laplace.batch_overrides", &l.batch_overrides)?;
        let h = &self.hmc;
        positive("hmc.pretrain_learning_rate", h.pretrain_learning_rate)?;
        h.pretrain_epochs.validate("hmc.pretrain_epochs")?;
        positive("hmc.step_size", h.step_size)?;
        at_least("hmc.leapfrog_steps", h.leapfrog_steps, 1)?;
        if h.burn >= h.n_samples {
            return Err(config_err("hmc.burn", "must be smaller than hmc.n_samples"));
        }
        positive("hmc.tau", h.tau)?;
        if h.inference_burn >= h.inference_samples {
            return Err(config_err(
                "hmc.inference_burn",
                "must be smaller than hmc.inference_samples",
            ));
        }
        check_overrides("hmc.batch_overrides", &h.batch_overrides)?;
        let r = &self.der;
        positive("der.learning_rate", r.learning_rate)?;
        r.epochs.validate("der.epochs")?;
        if !(r.lambda >= 0.0) {
            return Err(config_err("der.lambda", "must be nonnegative"));
        }
        at_least("der.samples", r.samples, 1)?;
        let p = &self.hetero_gp;
        at_least("hetero_gp.inducing", p.inducing, 1)?;
        positive("hetero_gp.learning_rate", p.learning_rate)?;
        p.epochs.validate("hetero_gp.epochs")?;
        at_least("hetero_gp.hyper_every", p.hyper_every, 1)?;
        positive("hetero_gp.fd_step", p.fd_step)?;
        at_least("hetero_gp.samples", p.samples, 1)?;
        Ok(())
    }

    pub fn activation(&self) -> Result<Activation> {
        match self.network.activation.as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(config_err(
                "network.activation",
                format!("expected `relu` or `tanh`, got `{other}`"),
            )),
        }
    }

    pub fn dgp_spec(&self) -> DgpSpec {
        DgpSpec {
            beta_alpha: self.dgp.alpha,
            beta_beta: self.dgp.beta,
            ..DgpSpec::default()
        }
    }

    pub fn mlp(&self) -> MlpConfig {
        MlpConfig {
            hidden_layers: self.network.hidden_layers,
            hidden_width: self.network.hidden_width,
            activation: self.activation().unwrap_or(Activation::Relu),
            ..MlpConfig::default()
        }
    }

    /// Global batch size for sample size `n`.
    pub fn batch_size(&self, n: usize) -> usize {
        self.sample_sizes
            .iter()
            .position(|&s| s == n)
            .map_or_else(|| *self.batch_sizes.last().unwrap_or(&32), |i| self.batch_sizes[i])
    }

    fn batch_with(&self, overrides: &BTreeMap<String, usize>, n: usize) -> usize {
        overrides
            .get(&n.to_string())
            .copied()
            .unwrap_or_else(|| self.batch_size(n))
    }

    pub fn reference_spec(&self, n: usize, run_seed: u64) -> ReferenceSpec {
        ReferenceSpec {
            dgp: self.dgp_spec(),
            n,
            n_d: self.n_d,
            n_gamma: self.n_gamma,
            training: EnsembleConfig {
                mlp: self.mlp(),
                learning_rate: self.reference.learning_rate,
                epochs: self.reference.epochs.at(n),
                batch_size: self.batch_size(n),
            },
            dataset_seeds: self.dataset_seeds.clone(),
            run_seed,
        }
    }

    pub fn deep_ensemble_config(&self, n: usize) -> EnsembleConfig {
        EnsembleConfig {
            mlp: self.mlp(),
            learning_rate: self.deep_ensemble.learning_rate,
            epochs: self.deep_ensemble.epochs.at(n),
            batch_size: self.batch_size(n),
        }
    }

    pub fn bootstrap_config(&self, n: usize) -> EnsembleConfig {
        EnsembleConfig {
            mlp: self.mlp(),
            learning_rate: self.bootstrap_ensemble.learning_rate,
            epochs: self.bootstrap_ensemble.epochs.at(n),
            batch_size: self.batch_size(n),
        }
    }

    pub fn dropout_config(&self, n: usize) -> McDropoutConfig {
        McDropoutConfig {
            mlp: self.mlp(),
            rate: self.mc_dropout.rate,
            learning_rate: self.mc_dropout.learning_rate,
            epochs: self.mc_dropout.epochs.at(n),
            batch_size: self.batch_size(n),
            passes: self.mc_dropout.passes,
        }
    }

    pub fn vi_config(&self, n: usize) -> ViConfig {
        let v = &self.vi;
        ViConfig {
            mlp: self.mlp(),
            learning_rate: v.learning_rate,
            epochs: v.epochs.at(n),
            batch_size: self.batch_size(n),
            burn_in: v.burn_in,
            beta: v.beta,
            train_mc: v.train_mc,
            test_mc: v.test_mc,
            prior_sd: v.prior_sd,
            init_rho: v.init_rho,
        }
    }

    pub fn laplace_subset(&self) -> Result<LaplaceSubset> {
        LaplaceSubset::from_name(&self.laplace.subset).ok_or_else(|| {
            config_err(
                "laplace.subset",
                format!("expected `last_layer` or `all`, got `{}`", self.laplace.subset),
            )
        })
    }

    pub fn laplace_config(&self, n: usize) -> LaplaceConfig {
        let l = &self.laplace;
        LaplaceConfig {
            mlp: self.mlp(),
            learning_rate: l.learning_rate,
            epochs: l.epochs.at(n),
            batch_size: self.batch_with(&l.batch_overrides, n),
            prior_precision: l.prior_precision,
            noise: l.noise,
            posterior_samples: l.posterior_samples,
            subset: self.laplace_subset().unwrap_or(LaplaceSubset::LastLayer),
        }
    }

    pub fn hmc_config(&self, n: usize) -> HmcConfig {
        let h = &self.hmc;
        HmcConfig {
            mlp: self.mlp(),
            pretrain_lr: h.pretrain_learning_rate,
            pretrain_epochs: h.pretrain_epochs.at(n),
            batch_size: self.batch_with(&h.batch_overrides, n),
            chain: HmcSettings {
                step_size: h.step_size,
                leapfrog_steps: h.leapfrog_steps,
                n_samples: h.n_samples,
                burn: h.burn,
            },
            tau: h.tau,
            inference_samples: h.inference_samples,
            inference_burn: h.inference_burn,
        }
    }

    pub fn der_config(&self, n: usize) -> DerConfig {
        DerConfig {
            mlp: self.mlp(),
            learning_rate: self.der.learning_rate,
            epochs: self.der.epochs.at(n),
            batch_size: self.batch_size(n),
            lambda: self.der.lambda,
        }
    }

    pub fn gp_config(&self, n: usize) -> GpConfig {
        let g = &self.hetero_gp;
        GpConfig {
            inducing: g.inducing,
            learning_rate: g.learning_rate,
            epochs: g.epochs.at(n),
            hyper_every: g.hyper_every,
            fd_step: g.fd_step,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

/// Dotted key path of the table enclosing byte `offset` of `text`, joined
/// with the key found at `span`.
fn key_path(text: &str, span: std::ops::Range<usize>) -> String {
    let before = &text[..span.start.min(text.len())];
    let table = before
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('[') && l.ends_with(']'))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_string());
    let key = text
        .get(span)
        .map(|s| s.split('=').next().unwrap_or(s).trim().trim_matches('"').to_string())
        .unwrap_or_default();
    match (table, key.is_empty()) {
        (Some(t), false) => format!("{t}.{key}"),
        (Some(t), true) => t,
        (None, false) => key,
        (None, true) => "<document>".into(),
    }
}

/// Parses and validates a configuration document.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let message = e.message().to_string();
        let key = match message.split('`').nth(1) {
            Some(field) if message.starts_with("unknown field") => match e.span() {
                Some(span) => {
                    let path = key_path(text, span);
                    if path.ends_with(field) {
                        path
                    } else {
                        field.to_string()
                    }
                }
                None => field.to_string(),
            },
            _ => e.span().map_or_else(|| "<document>".into(), |s| key_path(text, s)),
        };
        config_err(&key, message)
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        let cfg = parse_config_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.methods.len(), 9);
        assert_eq!(cfg.deep_ensemble_config(100).epochs, 250);
        assert_eq!(cfg.laplace_config(500).batch_size, 128);
        assert_eq!(cfg.laplace_config(100).batch_size, 32);
        assert_eq!(cfg.vi_config(50).epochs, 250);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config_str("[deep_ensemble]\nlerning_rate = 0.1\n").unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "deep_ensemble.lerning_rate"),
            e => panic!("{e}"),
        }
        let err = parse_config_str("lerning_rate = 0.1\n").unwrap_err();
        assert!(
            matches!(err, Error::Config { ref key, .. } if key == "lerning_rate"),
            "{err}"
        );
    }

    #[test]
    fn parallel_lists_enforced() {
        let err = parse_config_str("sample_sizes = [50]\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "batch_sizes"));
        assert!(parse_config_str("sample_sizes = [50]\nbatch_sizes = [16]\n").is_ok());
    }

    #[test]
    fn invariants_enforced() {
        for doc in [
            "run_seeds = [1, 1]",
            "[test_grid]\nlo = 0.5\nhi = 0.4",
            "methods = [\"nope\"]",
            "[mc_dropout]\nrate = 1.0",
            "n_d = 1",
        ] {
            assert!(matches!(parse_config_str(doc), Err(Error::Config { .. })), "{doc}");
        }
    }

    #[test]
    fn schedules() {
        let s = Schedule::by_size(&[(50, 1), (100, 2), (500, 3)]);
        assert_eq!((s.at(10), s.at(50), s.at(99), s.at(100), s.at(1000)), (1, 1, 1, 2, 3));
        let cfg = parse_config_str("[der]\nepochs = 7\n[vi]\nepochs = { 50 = 3, 500 = 9 }\n").unwrap();
        assert_eq!(cfg.der_config(500).epochs, 7);
        assert_eq!(cfg.vi_config(100).epochs, 3);
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = ExperimentConfig {
            parallelism: Some(3),
            ..Default::default()
        };
        assert_eq!(parse_config_str(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn test_grid_points() {
        let p = TestGrid::default().points();
        assert_eq!(p.len(), 500);
        assert_eq!(p[0], 0.01);
        assert!((p[499] - 0.99).abs() < 1e-15);
    }
}
