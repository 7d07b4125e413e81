mod balance;
mod experiment;
mod prepare;
mod sample;
mod train;

pub use balance::report_balance;
pub use experiment::experiment;
pub use prepare::prepare_data;
pub use sample::{sample, suggest_tokens};
pub use train::{checkpoint_name, train};

use synthrad_core::data::Finding;

use crate::error::{CliError, CliResult};

/// Parses comma-separated dataset labels or prompt tokens.
pub(crate) fn parse_findings(text: &str) -> CliResult<Vec<Finding>> {
    text.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            Finding::from_label(t).ok_or_else(|| CliError::usage(format!("unknown finding {t:?}")))
        })
        .collect()
}

pub(crate) fn parse_widths(text: &str) -> CliResult<Vec<usize>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| CliError::usage(format!("bad width {t:?} in {text:?}")))
        })
        .collect()
}
