//! Pretraining, episodic adaptation, ablation matrices and reports.

pub mod config;
pub mod gradsuite;
pub mod metrics;
pub mod report;
pub mod run;
pub mod train;

pub use config::{InitMode, RunConfig};
pub use metrics::{compute_iou, marked_recall, Iou};
pub use report::{build_report, Report};
pub use run::{run_ablation, run_configs, EpisodeResult, Matrix, Pools, RunOutput, Skip};
pub use train::{
    adapt_episode, meta_train, pretrain_backbone, EncodedPool, PretrainOptions, Pretrained,
};
