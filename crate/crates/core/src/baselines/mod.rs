mod msm;
mod propensity;
mod recurrent;
mod weights;

pub use msm::{fit_iptw_msm, fit_msm, IptwFit, MsmConfig, MsmModel, MsmReport};
pub use propensity::{fit_propensity, Conditioning, PropensityConfig, PropensityModel};
pub use recurrent::{forecaster_config, forecaster_train_config, train_forecaster, RecurrentArch};
pub use weights::{percentile, stabilized_weights, StabilizedWeights};
pub(crate) use propensity::{fit_logistic, sigmoid};
