pub mod exec;
pub mod meta_correction;
pub mod pipeline;
pub mod prompts;
pub mod records;
pub mod reward_model;
pub mod selection;
pub mod step_parser;
pub mod synthetic;

/// Version stamped into every persisted artifact.
pub const SCHEMA_VERSION: u32 = 1;

pub(crate) fn schema_version() -> u32 {
    SCHEMA_VERSION
}
