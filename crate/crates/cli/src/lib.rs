//! Operator front end for the nriqa workbench: argument parsing, run
//! manifests, the subcommands and the HTTP study service.

pub mod args;
pub mod commands;
pub mod error;
pub mod manifest;
pub mod server;

pub use error::{CliError, CliResult, ExitKind};
pub use manifest::RunManifest;

// The tape allocates and frees large activation buffers on every step; the
// system allocator returns them to the kernel each time.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;
