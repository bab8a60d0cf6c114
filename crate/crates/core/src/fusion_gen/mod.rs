//! Speech-text fusion and response generation: cross-modal attention,
//! the causal decoder with its text and speech paths, partial low-rank
//! adaptation, and the joint cross-entropy plus distillation objective.

pub mod checks;
pub mod cross;
pub mod lm;
pub mod loss;
pub mod train;

pub use cross::{cross_modal_attention, partial_low_rank_forward, CrossAttention};
pub use lm::{lm_forward, InputSegment, LmPath, LmRun, ToyLMConfig};
pub use loss::{ce_loss, kl_distill_loss, total_loss, DistillConfig, KlDirection, LossReport};
pub use train::{
    generate, prepare_corpus, prepare_dialogue, train, train_step, Example, Model, ModelConfig,
    PreparedDialogue, StepReport, TrainConfig,
};
