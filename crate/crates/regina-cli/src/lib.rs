//! Command implementations and file formats behind the `regina` binary,
//! exposed as a library so integration tests can drive them directly.

pub mod commands;
pub mod formats;
