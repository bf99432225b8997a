//! Heteroscedastic MLP and its maximum-likelihood training.

mod mlp;
mod train;

pub use mlp::{
    gaussian_nll, gaussian_nll_mean, gaussian_nll_terms, Activation, FirstOrderPrediction, MlpConfig, VARIANCE_MAX,
    VARIANCE_MIN,
};
pub use train::{fit, train_mlp, Adam, Batch, TrainConfig, TrainHistory, TrainedMlp};

pub(crate) use train::heads_to_predictions;
