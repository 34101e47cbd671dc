//! Training stages: supervised fine-tuning, the DPO baseline and decoupled
//! positive/negative projection learning.

mod losses;
mod optim;
mod stages;
mod trace;

pub use losses::{
    dpo_gradient, dpo_loss, dpo_loss_from_ratios, neg_projection_loss, pos_projection_loss,
    projection_gradient, reference_log_probs, sft_gradient, sft_loss, BatchGradient, DpoScope,
    Side,
};
pub use optim::{Optimizer, OptimizerConfig};
pub use stages::{
    init_projection_from, pretrain_projection, probe_log_probs, sft_train, train_decoupled,
    train_dpo, Batches, DecoupledConfig, DecoupledMode, DpoConfig, InitSource, SftConfig,
};
pub use trace::{TraceRecord, TrainTrace};
