//! Invariant checking over traces, the exhaustive oracle for tiny systems,
//! and pie-chart frame export.

mod report;

pub mod checks;
pub mod oracle;
pub mod pie;

pub use checks::{
    check_density_trend, check_topology_invariance, check_trace, full_report, DensitySeries,
};
pub use oracle::{
    exhaustive_oracle, trace_is_oracle_path, OracleError, OracleOptions, OracleReport,
};
pub use pie::{export_pie_frames, frame_to_svg, frames_to_csv, PieFrame, Slice};
pub use report::{Failure, InvariantReport, InvariantResult, Status};
