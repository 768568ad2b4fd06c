use thiserror::Error;

use crate::config::Diagnostic;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {}", format_diagnostics(.0))]
    InvalidConfig(Vec<Diagnostic>),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("unstable resonator: |A+D|/2 = {half_trace:.6} (must be < 1)")]
    Unstable { half_trace: f64 },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("channel collision between targets {first} and {second} (channel {channel})")]
    Collision { first: usize, second: usize, channel: i64 },

    #[error("first-order sideband expansion invalid: beta * sum(A) = {0:.4} >= 0.5")]
    Validity(f64),

    #[error("fit did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    FitDiverged { iterations: usize, residual: f64 },

    #[error("fit window contains {0} distinct peaks")]
    Ambiguous(usize),

    #[error("fringe contrast {0:.4} below floor")]
    LowContrast(f64),

    #[error("degenerate geometry: {0}")]
    Rank(String),

    #[error("trace shape error: {0}")]
    Shape(String),

    #[error("resource guard: {0}")]
    Resource(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("calibration failed for beams {}", format_beams(.beams))]
    Calibration {
        beams: Vec<(usize, usize)>,
        #[source]
        first: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by bad inputs rather than numerical breakdown.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::Argument(_)
                | Error::Range(_)
                | Error::Collision { .. }
                | Error::Validity(_)
                | Error::Domain(_)
                | Error::Json(_)
                | Error::Csv(_)
        )
    }
}

fn format_diagnostics(diags: &[Diagnostic]) -> String {
    diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; ")
}

fn format_beams(beams: &[(usize, usize)]) -> String {
    beams
        .iter()
        .map(|(i, j)| format!("({i},{j})"))
        .collect::<Vec<_>>()
        .join(", ")
}
