//! Simulation and analysis of a mirror held by radiation pressure between
//! two vertical Fabry-Perot cavities, and of the torsion-pendulum
//! experiment that measures its transversal optical spring.
//!
//! The crate is organised bottom-up:
//!
//! - [`optics`]: cavity geometry, horizontal optical spring, stability matrix.
//! - [`mechanics`]: torsion pendulum compliance and frequency-shift relations.
//! - [`lti`]: corner-frequency transfer-function blocks.
//! - [`feedback`]: the control loop, its RK4 simulation and swept-sine readout.
//! - [`estimation`]: resonance fits, power estimation, power-sweep analysis.
//! - [`config`] and [`experiment`]: the configuration schema and the
//!   end-to-end virtual measurements driven by the command-line tool.
//!
//! ```
//! use optolev::optics::{horizontal_spring, Cavity, Mirror, Orientation};
//!
//! let cavity = Cavity::new(0.1411, 880.0, 29.7, Mirror::new(0.075, 5e-4)?, 0.075, Orientation::Upper)?;
//! let k = horizontal_spring(&cavity, 0.0)?.re;
//! assert!((k - 2.226e-5).abs() < 1e-8);
//! # Ok::<(), optolev::Error>(())
//! ```

pub mod config;
pub mod error;
pub mod estimation;
pub mod experiment;
pub mod feedback;
pub mod lti;
pub mod mechanics;
pub mod optics;
pub mod seed;

pub use error::{Error, Result};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Standard gravitational acceleration, m/s^2.
pub const STANDARD_GRAVITY: f64 = 9.806_65;

/// A value with its one-sigma uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Measured {
    pub value: f64,
    pub sigma: f64,
}

impl Measured {
    pub const fn new(value: f64, sigma: f64) -> Self {
        Self { value, sigma }
    }

    pub const fn exact(value: f64) -> Self {
        Self { value, sigma: 0.0 }
    }

    pub fn contains(&self, x: f64) -> bool {
        (x - self.value).abs() <= self.sigma
    }
}

impl std::fmt::Display for Measured {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:e} +/- {:e}", self.value, self.sigma)
    }
}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/optics.md")]
    mod optics {}
    #[doc = include_str!("../../../book/src/pendulum.md")]
    mod pendulum {}
    #[doc = include_str!("../../../book/src/feedback.md")]
    mod feedback {}
    #[doc = include_str!("../../../book/src/estimation.md")]
    mod estimation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
