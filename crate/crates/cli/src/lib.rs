//! Command-line front end for `smoothlab`: file formats and one function
//! per subcommand.

pub mod commands;
pub mod error;
pub mod formats;

pub use error::{CliError, Result};
