//! Pre-image recovery and counterfactual explanations for image classifiers.
//!
//! A predictor is trained jointly with a small loss-estimator head that ranks
//! samples by their expected loss. Intermediate encodings of the predictor are
//! then inverted with an untrained convolutional generator acting as the image
//! prior, optionally regularized by the loss estimator, and counterfactuals are
//! produced by adding a targeted classification term.
//!
//! ```
//! use deep_preimage::data::make_synthetic_lesions;
//!
//! let ds = make_synthetic_lesions(6, 0).unwrap();
//! assert_eq!(ds.len(), 6);
//! assert_eq!(ds.num_classes(), 3);
//! ```

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod dip;
pub mod error;
pub mod estimator;
pub mod inversion;
pub mod model;
pub mod nn;
pub mod raster;
pub mod training;

pub use checkpoint::CheckpointBundle;
pub use data::{LabeledDataset, Mask};
pub use dip::{generate, init_generator, DipGenerator, GeneratorConfig};
pub use error::{Error, Result};
pub use estimator::{
    estimate_loss, ranking_loss, ranking_loss_over, total_loss, LossEstimatorHead, Pairing,
};
pub use inversion::{
    encoding_distance, generate_counterfactual, loss_regularizer, recover_preimage,
    CounterfactualResult, InversionConfig, InversionMode, PreimageResult,
};
pub use model::{
    encode, predict_class, predictor_forward, primary_loss, BlockTaps, PredictorConfig,
    PredictorModel,
};
pub use raster::{FeatureMap, Image};
pub use training::{train_joint, TrainConfig};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/ranking-loss.md")]
    mod ranking_loss {}
    #[doc = include_str!("../../../book/src/image-prior.md")]
    mod image_prior {}
    #[doc = include_str!("../../../book/src/pre-image-recovery.md")]
    mod pre_image_recovery {}
    #[doc = include_str!("../../../book/src/counterfactuals.md")]
    mod counterfactuals {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/command-line.md")]
    mod command_line {}
}
