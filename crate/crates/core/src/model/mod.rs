//! Hyperparameter vectors, declarative U-net architectures and the
//! trainable network built from them.

mod architecture;
mod hyperparams;
mod unet;

pub use architecture::{
    build_architecture, feature_ladder, parameter_count, Activation, ArchitectureSpec, ConvSpec, DecoderLevel,
    EncoderLevel,
};
pub use hyperparams::{
    HyperParams, Violation, BASE_FEATURES, BATCH_NORM_FLAGS, BATCH_SIZES, DROPOUT_MILLIS, LEARNING_RATE_MILLIS,
    OPTIMIZER_CODES, POOL_LEVELS,
};
pub use unet::{instantiate, UNet, ARCHITECTURE_FILE, WEIGHTS_FILE};

/// Result of [`HyperParams::violations`] as a list; empty means valid.
pub fn validate_hyperparams(hp: &HyperParams) -> Vec<Violation> {
    hp.violations()
}
