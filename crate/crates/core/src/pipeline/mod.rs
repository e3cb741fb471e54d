pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod train;

pub use ablation::{
    render_summary, run_ablation, summarize, write_runs, AblationGrid, AblationOutcome, Arm,
    RunRecord, SummaryRow,
};
pub use checkpoint::{Checkpoint, ClassifierFile};
pub use config::{DataSource, RunConfig};
pub use metrics::{read_rows, write_rows, CsvAppender, MetricsRow};
pub use train::{
    evaluate, linear_eval, pretrain, pretrain_epoch, run_experiment, EvalResult, PretrainState,
    RunReport, RunStats,
};
