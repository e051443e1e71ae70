pub mod ablation;
pub mod auroc;
pub mod replay;
pub mod report;
pub mod separation;
pub mod threshold;
pub mod utility;

pub use ablation::{
    ablation_run, render_ablation_table, standard_specs, AblationDelta, AblationRow, AblationSpec,
};
pub use auroc::auroc;
pub use replay::{
    fit_auditor, fixed_answer_replay, load_auditor, save_auditor, score_traces, telemetry_points,
    trace_examples, DetectorFit, ExampleTrace, FittedAuditor, ScoreRow,
};
pub use report::{
    build_report, gate_failures, read_report, render_table, write_report, DetectorReport,
    EvalReport, MetricShift, ReportContext, ReportMetadata, SeparationReport,
};
pub use separation::separation_delta;
pub use threshold::{
    accuracy_threshold, attack_calibrated_point, calibrate_threshold, operating_point,
    CalibrationSource, OperatingPoint,
};
pub use utility::{utility_check, UtilityReport, VariantUtility};
