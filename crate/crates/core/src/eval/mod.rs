//! Oracle-checked scoring of decoders and models, and multi-method reports.

mod metrics;
mod report;

pub use metrics::{
    existence_accuracy, general_accuracy, hallucination_rate, likelihood_displacement_trace,
    other_image, score_descriptions, score_existence, score_general, Confusion, Displacement,
    ExistenceReport, GeneralReport, HallucinationReport, Probe, ProbeSet, Regime,
};
pub use report::{
    build_probes, compare_methods, evaluate_method, heldout_log_likelihoods, table_columns,
    EvalInputs, EvalReport, MethodReport, MethodRun, REPORT_FOOTER,
};
