//! Synthetic experiment families, their configuration, CSV output and
//! power-law fitting.

mod config;
mod families;
mod fit;
mod record;

pub use config::{ConfigSection, ExperimentConfig, Family, Method, OverrideSection};
pub use families::{
    curriculum_levels, fit_theory_constant, run_family, run_method, Instance, RunOutput, ABLATION_ARMS,
};
pub use fit::{fit_power_law, PowerLawFit};
pub use record::{read_csv, read_records, write_csv, write_records, ExperimentRecord, CSV_HEADER};
