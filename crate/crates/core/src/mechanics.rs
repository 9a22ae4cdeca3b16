//! The torsion pendulum used as a transversal force sensor.
//!
//! Displacement is measured at the beam spot, a lever arm `L` from the
//! suspension axis, so a force `F` there produces `x = (L^2/I) F / (...)`.
//! An external spring `k_ext` acting at the same point raises the angular
//! stiffness by `k_ext L^2`, which is what the frequency-shift relations
//! below invert.

use std::f64::consts::TAU;

use num_complex::Complex64;

use crate::error::{non_negative, positive, Error, Result};
use crate::Measured;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TorsionalPendulum {
    inertia: f64,
    lever_arm: f64,
    natural_frequency: f64,
    quality_factor: f64,
    mass: Option<f64>,
}

impl TorsionalPendulum {
    /// `inertia` in kg m^2, `lever_arm` in m, `natural_frequency` in Hz.
    pub fn new(inertia: f64, lever_arm: f64, natural_frequency: f64, quality_factor: f64) -> Result<Self> {
        Ok(Self {
            inertia: positive("inertia", inertia)?,
            lever_arm: positive("lever_arm", lever_arm)?,
            natural_frequency: positive("natural_frequency", natural_frequency)?,
            quality_factor: positive("quality_factor", quality_factor)?,
            mass: None,
        })
    }

    /// Attach the (informational) pendulum mass in kg.
    pub fn with_mass(self, mass: f64) -> Result<Self> {
        Ok(Self {
            mass: Some(positive("mass", mass)?),
            ..self
        })
    }

    pub fn inertia(&self) -> f64 {
        self.inertia
    }

    pub fn lever_arm(&self) -> f64 {
        self.lever_arm
    }

    pub fn natural_frequency(&self) -> f64 {
        self.natural_frequency
    }

    pub fn quality_factor(&self) -> f64 {
        self.quality_factor
    }

    pub fn mass(&self) -> Option<f64> {
        self.mass
    }

    pub fn omega0(&self) -> f64 {
        TAU * self.natural_frequency
    }

    /// `L^2 / I`, the compliance prefactor in m/(N s^2).
    pub fn arm_ratio(&self) -> f64 {
        self.lever_arm * self.lever_arm / self.inertia
    }

    /// Spring constant at the beam spot that would cancel the suspension stiffness.
    pub fn critical_spring(&self) -> f64 {
        self.omega0() * self.omega0() / self.arm_ratio()
    }

    /// `omega_eff^2 = omega_0^2 + k_ext L^2 / I`; errors unless strictly positive.
    pub fn effective_omega_sq(&self, k_ext: f64) -> Result<f64> {
        let omega_eff_sq = self.omega0() * self.omega0() + k_ext * self.arm_ratio();
        if omega_eff_sq > 0.0 {
            Ok(omega_eff_sq)
        } else {
            Err(Error::AntiSpringExceedsRestoring { k_ext, omega_eff_sq })
        }
    }
}

/// Estimated external spring constant and its one-sigma uncertainty (N/m).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpringEstimate {
    pub k_ext: f64,
    pub sigma_k: f64,
}

fn oscillator(arm_ratio: f64, omega_r: f64, q: f64, omega: f64) -> Complex64 {
    arm_ratio / Complex64::new(omega_r * omega_r - omega * omega, omega * omega_r / q)
}

/// Compliance `x/F` of the free pendulum (m/N).
pub fn pendulum_tf(p: &TorsionalPendulum, omega: f64) -> Complex64 {
    oscillator(p.arm_ratio(), p.omega0(), p.quality_factor, omega)
}

/// Compliance with an added spring; `omega_0` is replaced by `omega_eff` in
/// both the stiffness and the damping terms.
pub fn effective_tf(p: &TorsionalPendulum, k_ext: f64, omega: f64) -> Result<Complex64> {
    let omega_eff = p.effective_omega_sq(k_ext)?.sqrt();
    Ok(oscillator(p.arm_ratio(), omega_eff, p.quality_factor, omega))
}

/// Spring constant implied by a resonance shift `f0 -> f_eff`. Negative when
/// the resonance moves down.
pub fn spring_from_shift(inertia: f64, lever_arm: f64, f0: f64, f_eff: f64) -> Result<f64> {
    positive("inertia", inertia)?;
    positive("lever_arm", lever_arm)?;
    positive("f0", f0)?;
    positive("f_eff", f_eff)?;
    Ok(TAU * TAU * inertia / (lever_arm * lever_arm) * (f_eff * f_eff - f0 * f0))
}

/// Resonance frequency (Hz) of the pendulum with an extra spring `k_ext`.
pub fn effective_frequency(p: &TorsionalPendulum, k_ext: f64) -> Result<f64> {
    Ok(p.effective_omega_sq(k_ext)?.sqrt() / TAU)
}

/// First-order propagation of independent frequency uncertainties through
/// [`spring_from_shift`].
pub fn spring_uncertainty(
    inertia: f64,
    lever_arm: f64,
    f0: Measured,
    f_eff: Measured,
) -> Result<SpringEstimate> {
    non_negative("sigma_f0", f0.sigma)?;
    non_negative("sigma_f_eff", f_eff.sigma)?;
    let k_ext = spring_from_shift(inertia, lever_arm, f0.value, f_eff.value)?;
    let scale = TAU * TAU * inertia / (lever_arm * lever_arm);
    let sigma_k = scale * (2.0 * f_eff.value * f_eff.sigma).hypot(2.0 * f0.value * f0.sigma);
    Ok(SpringEstimate { k_ext, sigma_k })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn paper() -> TorsionalPendulum {
        TorsionalPendulum::new(7.2e-6, 0.085, 0.0322, 100.0).unwrap()
    }

    #[test]
    fn dc_compliance() {
        let h = pendulum_tf(&paper(), 0.0);
        assert_relative_eq!(h.re, 24515.1116150, max_relative = 1e-10);
        assert_eq!(h.im, 0.0);
    }

    #[test]
    fn phase_at_resonance_and_asymptote() {
        let p = paper();
        let h = pendulum_tf(&p, p.omega0());
        assert_relative_eq!(h.arg(), -std::f64::consts::FRAC_PI_2, epsilon = 1e-14);
        assert_relative_eq!(h.norm(), p.arm_ratio() * p.quality_factor() / p.omega0().powi(2), max_relative = 1e-12);
        let far = pendulum_tf(&p, 1e6);
        assert!(far.norm() < 1e-8);
        assert_relative_eq!(far.arg().abs(), std::f64::consts::PI, epsilon = 1e-6);
    }

    #[test]
    fn effective_tf_with_zero_spring_is_identity() {
        let p = paper();
        for omega in [0.0, 0.01, p.omega0(), 3.0] {
            assert_eq!(effective_tf(&p, 0.0, omega).unwrap(), pendulum_tf(&p, omega));
        }
    }

    #[test]
    fn effective_frequency_examples() {
        let p = paper();
        assert_eq!(effective_frequency(&p, 0.0).unwrap(), 0.0322);
        assert_relative_eq!(effective_frequency(&p, 2.84e-5).unwrap(), 0.0419370749, max_relative = 1e-8);
        assert_relative_eq!(effective_frequency(&p, 2.226259242e-5).unwrap(), 0.0400339369, max_relative = 1e-8);
        assert_relative_eq!(effective_frequency(&p, 3.37e-5).unwrap(), 0.0435136182, max_relative = 1e-8);
    }

    #[test]
    fn critical_anti_spring_is_rejected() {
        let p = paper();
        let k_crit = p.critical_spring();
        assert!(matches!(effective_tf(&p, -k_crit, 0.1), Err(Error::AntiSpringExceedsRestoring { .. })));
        assert!(effective_frequency(&p, -1.01 * k_crit).is_err());
        assert!(effective_frequency(&p, -0.99 * k_crit).is_ok());
    }

    #[test]
    fn spring_from_shift_examples() {
        assert_relative_eq!(spring_from_shift(7.2e-6, 0.085, 0.0322, 0.0435).unwrap(), 3.365338118e-5, max_relative = 1e-8);
        assert_eq!(spring_from_shift(7.2e-6, 0.085, 0.0322, 0.0322).unwrap(), 0.0);
        assert!(spring_from_shift(7.2e-6, 0.085, 0.0322, 0.03).unwrap() < 0.0);
        assert!(spring_from_shift(0.0, 0.085, 0.0322, 0.03).is_err());
    }

    #[test]
    fn uncertainty_examples() {
        let est = spring_uncertainty(7.2e-6, 0.085, Measured::new(0.0322, 0.0011), Measured::new(0.0435, 0.0004)).unwrap();
        assert_relative_eq!(est.sigma_k, 3.1051000e-6, max_relative = 1e-6);
        let exact = spring_uncertainty(7.2e-6, 0.085, Measured::exact(0.0322), Measured::exact(0.0435)).unwrap();
        assert_eq!(exact.sigma_k, 0.0);
        let doubled = spring_uncertainty(7.2e-6, 0.085, Measured::new(0.0322, 0.0022), Measured::new(0.0435, 0.0008)).unwrap();
        assert_relative_eq!(doubled.sigma_k, 2.0 * est.sigma_k, max_relative = 1e-14);
    }

    #[test]
    fn magnitude_peaks_near_effective_resonance() {
        let p = paper();
        let k = 2e-5;
        let f_eff = effective_frequency(&p, k).unwrap();
        let step = 1e-6;
        let grid: Vec<f64> = (0..100_000).map(|i| 0.001 + i as f64 * step).collect();
        let peak = grid
            .iter()
            .copied()
            .max_by(|a, b| {
                let ha = effective_tf(&p, k, TAU * a).unwrap().norm();
                let hb = effective_tf(&p, k, TAU * b).unwrap().norm();
                ha.total_cmp(&hb)
            })
            .unwrap();
        let q = p.quality_factor();
        let analytic = f_eff * (1.0 - 0.5 / (q * q)).sqrt();
        assert!((peak - analytic).abs() <= step, "{peak} vs {analytic}");
        assert!((peak - f_eff).abs() < 1e-4 * f_eff);
    }

    proptest! {
        #[test]
        fn round_trip(frac in -0.999f64..1e3) {
            let p = paper();
            let k = frac * p.critical_spring();
            let f = effective_frequency(&p, k).unwrap();
            let back = spring_from_shift(p.inertia(), p.lever_arm(), p.natural_frequency(), f).unwrap();
            prop_assert!((back - k).abs() <= 1e-12 * k.abs().max(1e-3 * p.critical_spring()));
        }

        #[test]
        fn phase_decreases_monotonically(w1 in 1e-4f64..10.0, dw in 1e-6f64..10.0) {
            let p = paper();
            let phi = |w: f64| pendulum_tf(&p, w).arg();
            prop_assert!(phi(w1 + dw) < phi(w1));
            prop_assert!(phi(w1) < 0.0 && phi(w1) > -std::f64::consts::PI);
        }

        #[test]
        fn shift_monotone_in_f_eff(f1 in 0.001f64..1.0, df in 1e-6f64..1.0) {
            let k1 = spring_from_shift(7.2e-6, 0.085, 0.0322, f1).unwrap();
            let k2 = spring_from_shift(7.2e-6, 0.085, 0.0322, f1 + df).unwrap();
            prop_assert!(k2 > k1);
        }
    }
}
