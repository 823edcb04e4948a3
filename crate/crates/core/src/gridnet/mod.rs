//! Convolutional distributional regression: a small U-Net mapping gridded
//! predictors to per-point distribution parameters, trained on the mean
//! closed-form CRPS with Adam.

pub mod checkpoint;
pub mod loss;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_model, save_model};
pub use loss::{crps_loss, crps_loss_raw, link_params, link_point, Link};
pub use model::{Mode, UNet, UNetConfig};
pub use tensor::Tensor4;
pub use train::{ensemble_quantiles, train, train_ensemble, TrainConfig, TrainData, TrainResult, TrainStatus};
