//! Stage 2 and transported inference: VAE latent, linear heads, the
//! closed-form proxy function and the fitted target proxy prior.

mod infer;
mod losses;
mod model;
mod train;

pub use infer::{combine, infer, infer_batch, proxy_weights, Inference};
pub use losses::{
    classification_loss, proxy_loss, record_adapter, record_classification, record_proxy_loss,
    record_vae, regression_target, vae_loss, ClassificationVars, VaeLoss, VaeVars,
};
pub use model::{
    heads_forward, solve_h_y, HyOperator, LinearHeads, ProxyConfig, ProxyModel, ProxyPrior,
    Weighting, ZMode, ADAPTER, B1, B2, DECODER, ENCODER, HEADS, PDISC_SOURCE, PDISC_TARGET, W1, W2,
    W3, W3_COLLAPSE, W4,
};
pub use train::{
    fit_isotropic, fit_proxy_prior, train_stage2, Stage2LogEntry, Stage2Run, PRIOR_VARIANCE_FLOOR,
};
