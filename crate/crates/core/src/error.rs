use thiserror::Error;

/// Errors produced by the physics, simulation and estimation routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter `{name}` = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("cavity g-factor product is 1; the damping term of the horizontal spring is singular")]
    SingularGeometry,

    #[error("cavity is exactly concentric (center distance 0); horizontal spring diverges")]
    DegenerateConcentric,

    #[error(
        "external spring {k_ext:e} N/m exceeds the pendulum restoring stiffness \
         (effective frequency squared = {omega_eff_sq:e} rad^2/s^2)"
    )]
    AntiSpringExceedsRestoring { k_ext: f64, omega_eff_sq: f64 },

    #[error("closed loop is marginal at {omega} rad/s: |1 + G| = {distance:e}")]
    MarginalLoop { omega: f64, distance: f64 },

    #[error("integration step {dt} s exceeds the limit {max_dt} s set by the fastest corner")]
    StepTooLarge { dt: f64, max_dt: f64 },

    #[error("simulation diverged at t = {time} s")]
    Divergence { time: f64 },

    #[error("record holds {cycles:.2} injection cycles; at least {required} are needed")]
    InsufficientCycles { cycles: f64, required: usize },

    #[error("no phase flip within the measured band")]
    NoResonanceInBand,

    #[error("{got} points supplied; at least {required} are required")]
    TooFewPoints { got: usize, required: usize },

    #[error("{converged} converged repeat(s); at least 2 are required")]
    InsufficientRepeats { converged: usize },

    #[error("only {confident} of {total} sweep points are above the SNR threshold")]
    LowConfidence { confident: usize, total: usize },

    #[error("power sweep needs at least two powers including a zero-power reference")]
    InvalidSweep,

    #[error("config error{}: {message}", location(.section, .key))]
    Config {
        section: String,
        key: String,
        message: String,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wraps the error with the name of the pipeline stage it came from.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, with stage context stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self.root(), Error::Config { .. })
    }
}

fn location(section: &str, key: &str) -> String {
    match (section.is_empty(), key.is_empty()) {
        (true, true) => String::new(),
        (true, false) => format!(" at `{key}`"),
        (false, true) => format!(" in [{section}]"),
        (false, false) => format!(" in [{section}] at `{key}`"),
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn positive(name: &'static str, value: f64) -> Result<f64> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(Error::InvalidParameter {
            name,
            value,
            reason: "must be positive and finite",
        })
    }
}

pub(crate) fn non_negative(name: &'static str, value: f64) -> Result<f64> {
    if value >= 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(Error::InvalidParameter {
            name,
            value,
            reason: "must be non-negative and finite",
        })
    }
}
