//! Metrics, analytic FLOP accounting, timing and run reports.

pub mod bench;
pub mod flops;
pub mod metrics;
pub mod report;

pub use bench::{benchmark, median, speedup, BenchResult, MIN_RUNS, MIN_WARMUP};
pub use flops::{count_flops, denoiser_flops, detector_flops, layer_flops, FlopModel};
pub use metrics::{accuracy, average_precision, roc_auc};
pub use report::{
    bench_csv, make_report, reference_rows, summarize_ablation, AblationRow, AblationSummary, BenchSection,
    GeneratorRow, ReferenceRow, Report, ReportParts, REFERENCE_TAG, REPORT_VERSION,
};
