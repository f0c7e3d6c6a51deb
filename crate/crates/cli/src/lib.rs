//! Scenario files and the `plan` / `sweep` commands.

pub mod commands;
pub mod scenario;
