//! Second-order uncertainty quantification methods.
//!
//! Every fitted method represents its second-order distribution `q(theta | x)`
//! by a finite set of first-order predictions (mean, variance) at each query
//! point. Deep Evidential Regression additionally exposes its closed-form
//! Normal-Inverse-Gamma parameters.

mod der;
mod dropout;
mod ensemble;
mod gp;
mod hmc;
mod laplace;
mod vi;

pub use der::{fit_der, nig_nll, DerConfig, EvidentialRegressor, NigParams};
pub use dropout::{fit_mc_dropout, McDropout, McDropoutConfig};
pub use ensemble::{fit_bootstrap_ensemble, fit_deep_ensemble, Ensemble, EnsembleConfig};
pub use gp::{fit_hetero_gp, rbf, ExactGp, GpConfig, GpPosterior, HeteroGp, RbfKernel};
pub use hmc::{fit_hmc, hmc_sample, leapfrog, metropolis_accept, HmcChain, HmcConfig, HmcNet, HmcSettings};
pub use laplace::{fit_laplace, LaplaceConfig, LaplaceNet, LaplacePosterior, LaplaceSubset};
pub use vi::{fit_vi, kl_diag_gaussian, ViConfig, ViNet};

use crate::error::{Error, Result};
use crate::nn::FirstOrderPrediction;

/// Finite sample from `q(theta | x)` at one query point.
#[derive(Clone, Debug, PartialEq)]
pub struct SecondOrderSample {
    pub query_x: f64,
    pub members: Vec<FirstOrderPrediction>,
}

impl SecondOrderSample {
    pub fn new(query_x: f64, members: Vec<FirstOrderPrediction>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::contract("second-order sample needs at least one member"));
        }
        if let Some(m) = members.iter().find(|m| !(m.variance > 0.0 && m.variance.is_finite())) {
            return Err(Error::contract(format!(
                "member variance must be positive and finite, got {}",
                m.variance
            )));
        }
        Ok(SecondOrderSample { query_x, members })
    }

    /// Mean of the Bayesian model average: the average member mean.
    pub fn mixture_mean(&self) -> f64 {
        self.members.iter().map(|m| m.mean).sum::<f64>() / self.members.len() as f64
    }
}

/// Identifier of the eight methods.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MethodKind {
    DeepEnsemble,
    BootstrapEnsemble,
    McDropout,
    Vi,
    Laplace,
    Hmc,
    Der,
    HeteroGp,
}

impl MethodKind {
    pub const ALL: [MethodKind; 8] = [
        MethodKind::DeepEnsemble,
        MethodKind::BootstrapEnsemble,
        MethodKind::McDropout,
        MethodKind::Vi,
        MethodKind::Laplace,
        MethodKind::Hmc,
        MethodKind::Der,
        MethodKind::HeteroGp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::DeepEnsemble => "deep_ensemble",
            MethodKind::BootstrapEnsemble => "bootstrap_ensemble",
            MethodKind::McDropout => "mc_dropout",
            MethodKind::Vi => "vi",
            MethodKind::Laplace => "laplace",
            MethodKind::Hmc => "hmc",
            MethodKind::Der => "der",
            MethodKind::HeteroGp => "hetero_gp",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        MethodKind::ALL.into_iter().find(|m| m.name() == name)
    }
}

impl std::fmt::Display for MethodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Uniform adapter over all fitted methods.
pub trait SecondOrderPredictor: Send {
    fn kind(&self) -> MethodKind;

    /// Second-order samples at every point of `xs`.
    ///
    /// `d` is the requested number of members; ensembles ignore it and
    /// return their fixed members.
    fn sample_grid(&mut self, xs: &[f64], d: usize) -> Result<Vec<SecondOrderSample>>;

    fn sample_thetas(&mut self, x: f64, d: usize) -> Result<SecondOrderSample> {
        let mut v = self.sample_grid(&[x], d)?;
        Ok(v.remove(0))
    }

    /// Closed-form NIG parameters, for methods that have them.
    fn nig_grid(&self, _xs: &[f64]) -> Option<Vec<NigParams>> {
        None
    }

    /// Number of members used when the caller has no preference.
    fn default_members(&self) -> usize;

    /// Non-fatal diagnostics collected while fitting.
    fn warnings(&self) -> Vec<String> {
        Vec::new()
    }
}

/// Builds per-point samples from a row-major list of member predictions:
/// `per_member[j][i]` is member `j` at `xs[i]`.
pub(crate) fn transpose_members(
    xs: &[f64],
    per_member: Vec<Vec<FirstOrderPrediction>>,
) -> Result<Vec<SecondOrderSample>> {
    xs.iter()
        .enumerate()
        .map(|(i, &x)| SecondOrderSample::new(x, per_member.iter().map(|m| m[i]).collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for m in MethodKind::ALL {
            assert_eq!(MethodKind::from_name(m.name()), Some(m));
        }
        assert_eq!(MethodKind::from_name("reference"), None);
    }

    #[test]
    fn empty_sample_rejected() {
        assert!(SecondOrderSample::new(0.5, vec![]).is_err());
    }
}
