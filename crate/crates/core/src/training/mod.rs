//! Segmentation losses and the decoder stage of the decoupled training
//! schedule (the encoder stage lives in [`crate::encoder`]).

mod driver;
mod loss;
#[cfg(test)]
mod tests;

pub use driver::{
    sample_target_part, train_decoder, validation_loss, DecoderStep, DecoderTrainConfig, DecoderTrainReport, TargetSampler,
    TrainSample,
};
pub use loss::{bce_dyn, bce_weight, dice_term, seg_loss, LossValue, SegLoss, SegLossConfig};
