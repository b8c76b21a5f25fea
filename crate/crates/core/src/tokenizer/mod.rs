//! Text-aligned neural tokenizer: vector-quantized temporal-frequency
//! prediction with adversarial EEG/text space alignment.

pub mod adversarial;
pub mod dft;
pub mod model;
pub mod train;

pub use adversarial::{adversarial_loss, lambda_schedule, sample_text_rows};
pub use dft::{dft_magnitude, freq_target, zscore, FreqTarget};
pub use model::{
    conv_feature_len, PreparedSample, Reconstruct, TokenGrid, Tokenizer, TokenizerConfig,
    TokenizerLoss,
};
pub use train::{
    probe_discrimination_accuracy, TokenizerStepReport, TokenizerTrainOptions, TokenizerTrainer,
};
