//! Run artifacts: CSV logs and binary checkpoints.

pub mod checkpoint;
pub mod csvio;

pub use checkpoint::{
    load_checkpoint, load_final_weights, save_checkpoint, save_final_weights, FinalWeights,
};
pub use csvio::{
    export_dist_from_z_log, render_alpha_dist, render_policy_dist, render_policy_z_log,
    render_search_log, write_text,
};
