//! Stage implementations behind the `echotomo` command-line pipeline.

pub mod stages;
