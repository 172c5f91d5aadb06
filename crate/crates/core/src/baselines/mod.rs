//! Reference predictors evaluated on the same samples as the graph
//! networks: historical average, per-zone LASSO and a dense network.

mod ha;
mod lasso;
mod mlp;

pub use ha::{ha_predict, ha_predict_set, HA_WEEKS};
pub use lasso::{fit_lasso, lambda_grid, lasso_fit, null_lambda, soft_threshold, LassoFit, LassoModel};
pub use mlp::{fit_mlp, MlpConfig, MlpLearner};
