//! Command implementations behind the `annoloop` binary.

pub mod commands;
pub mod config;

pub use commands::{cmd_ablate, cmd_generate, cmd_tune, cmd_validate, AblationAxis};
pub use config::{ConfigError, Overrides, RunConfig};

/// Process exit code for an error returned by a command: 2 for
/// configuration problems, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.is::<ConfigError>()) {
        2
    } else {
        1
    }
}
