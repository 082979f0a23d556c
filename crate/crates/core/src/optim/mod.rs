//! Optimizers and the alternating bilevel search loop.

pub mod adam;
pub mod final_train;
pub mod joint;
pub mod sgd;

pub use adam::Adam;
pub use final_train::{evaluate_discrete, final_train, FinalMetrics, FinalTrainConfig};
pub use joint::{
    count_correct,
    alpha_snapshot, run_search, search_input, AlphaRow, EpochRecord, JointState, SearchConfig,
    SearchLog, SearchOutcome, StepStats,
};
pub use sgd::{clip_grad_norm, cosine_lr, MomentumSgd};
