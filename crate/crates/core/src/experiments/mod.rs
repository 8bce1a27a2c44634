//! Scenario configuration and the drivers behind the command-line tool.
//!
//! Every driver takes a [`ScenarioConfig`] and returns a [`CsvTable`] (or a
//! report that renders to one). Tables start with `#` comment lines holding
//! the tool version and the full configuration, so a file is enough to
//! rerun the computation that produced it.

mod commands;
pub mod config;
pub mod output;

pub use commands::{
    cmd_evolve, cmd_noise_ensemble, cmd_scaling, cmd_verify_dd, evolve_trajectory, exit, exit_code,
    least_squares_slope, optimal_dr_time, resolve_control, scan_minimum, DdCheck, DdReport, ScalingReport,
    ScalingRow, ScanResult, DD_RESIDUAL_TOL, DD_VIOLATION_FRACTION,
};
pub use config::{
    ControlConfig, HamiltonianKind, NoiseConfig, ReductionConfig, Sampling, ScalingConfig, ScenarioConfig,
    TimeConfig, VerifyDdConfig,
};
pub use output::{fmt_num, CsvTable, TOOL_NAME, TOOL_VERSION};
