//! Staged training orchestration: per-domain baselines, joint training,
//! guided-dropout resumption, per-domain fine-tuning, and the artifacts each
//! stage leaves behind.

mod engine;
mod report;
mod runner;
mod stages;

pub use engine::{
    init_model, stage_seed, train, validation_loss, DropoutRefresh, EpochStats, HeadLayout,
    Labeling, StageConfig, StageDropout, TrainSetup,
};
pub use report::{
    load_stage_report, save_stage_report, write_cumulative_keep_csv, write_gain_vs_dropped_csv,
    write_impact_scores_csv, write_loss_curves_csv, write_score_comparison_csv,
    write_summary_csv, GainRow, ScorePairRow, StageReport, TrainRunRecord,
};
pub use runner::{prepare_data, run_full_pipeline, PipelineOutcome, PreparedData, RunOptions};
pub use stages::{
    build_policy, evaluate_domain, finetune_on_domain, resume_with_dgd, train_individual,
    train_jstl, train_multitask, DgdResume, FinetuneResult,
};
