//! Rational transfer functions in corner-frequency form.
//!
//! A block is `gain * prod(1 + s/z) / (prod(1 + s/p) * prod(1 + s/(w_r Q) + s^2/w_r^2))`
//! with `s = i omega`, so its value at DC is exactly `gain`. Real first-order
//! corners cover the filter; the resonant factor covers the pendulum.

use std::f64::consts::TAU;

use num_complex::Complex64;

use crate::error::{positive, Result};
use crate::mechanics::TorsionalPendulum;

/// Zero corner of the loop filter, Hz.
pub const FILTER_ZERO_HZ: f64 = 0.0476;
/// Pole corners of the loop filter, Hz.
pub const FILTER_POLES_HZ: [f64; 2] = [3.39, 4.82];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockLabel {
    /// Free pendulum.
    Pendulum,
    /// Pendulum with the optical spring.
    PendulumEffective,
    Sensor,
    Filter,
    Actuator,
    Custom,
}

/// Second-order resonant pole pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resonance {
    pub frequency: f64,
    pub quality_factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LtiBlock {
    pub label: BlockLabel,
    pub gain: f64,
    zeros: Vec<f64>,
    poles: Vec<f64>,
    resonances: Vec<Resonance>,
}

impl LtiBlock {
    /// Block from real corner frequencies in Hz.
    pub fn new(label: BlockLabel, gain: f64, zeros: Vec<f64>, poles: Vec<f64>) -> Result<Self> {
        for &z in &zeros {
            positive("zero corner", z)?;
        }
        for &p in &poles {
            positive("pole corner", p)?;
        }
        Ok(Self {
            label,
            gain,
            zeros,
            poles,
            resonances: Vec::new(),
        })
    }

    pub fn constant(label: BlockLabel, gain: f64) -> Self {
        Self {
            label,
            gain,
            zeros: Vec::new(),
            poles: Vec::new(),
            resonances: Vec::new(),
        }
    }

    pub fn with_resonance(mut self, frequency: f64, quality_factor: f64) -> Result<Self> {
        positive("resonance frequency", frequency)?;
        positive("quality factor", quality_factor)?;
        self.resonances.push(Resonance {
            frequency,
            quality_factor,
        });
        Ok(self)
    }

    /// The loop filter: one zero at 47.6 mHz, poles at 3.39 Hz and 4.82 Hz.
    pub fn loop_filter(gain: f64) -> Self {
        Self {
            label: BlockLabel::Filter,
            gain,
            zeros: vec![FILTER_ZERO_HZ],
            poles: FILTER_POLES_HZ.to_vec(),
            resonances: Vec::new(),
        }
    }

    /// Pendulum compliance with an optional added spring, as a block.
    pub fn pendulum(p: &TorsionalPendulum, k_ext: f64) -> Result<Self> {
        let omega_sq = p.effective_omega_sq(k_ext)?;
        let label = if k_ext == 0.0 {
            BlockLabel::Pendulum
        } else {
            BlockLabel::PendulumEffective
        };
        Self::constant(label, p.arm_ratio() / omega_sq).with_resonance(omega_sq.sqrt() / TAU, p.quality_factor())
    }

    pub fn zeros(&self) -> &[f64] {
        &self.zeros
    }

    pub fn poles(&self) -> &[f64] {
        &self.poles
    }

    pub fn resonances(&self) -> &[Resonance] {
        &self.resonances
    }

    /// Complex response at angular frequency `omega` (rad/s).
    pub fn eval(&self, omega: f64) -> Complex64 {
        let mut value = Complex64::new(self.gain, 0.0);
        for &z in &self.zeros {
            value *= Complex64::new(1.0, omega / (TAU * z));
        }
        for &p in &self.poles {
            value /= Complex64::new(1.0, omega / (TAU * p));
        }
        for r in &self.resonances {
            let w_r = TAU * r.frequency;
            let u = omega / w_r;
            value /= Complex64::new(1.0 - u * u, u / r.quality_factor);
        }
        value
    }

    /// Response at a frequency in Hz.
    pub fn eval_hz(&self, f: f64) -> Complex64 {
        self.eval(TAU * f)
    }

    /// Cascade of two blocks.
    pub fn series(&self, other: &LtiBlock) -> LtiBlock {
        let mut out = self.clone();
        out.label = BlockLabel::Custom;
        out.gain *= other.gain;
        out.zeros.extend_from_slice(&other.zeros);
        out.poles.extend_from_slice(&other.poles);
        out.resonances.extend_from_slice(&other.resonances);
        out
    }

    /// Highest corner frequency (Hz) in the block, or `None` for a constant.
    pub fn max_corner(&self) -> Option<f64> {
        self.zeros
            .iter()
            .chain(&self.poles)
            .copied()
            .chain(self.resonances.iter().map(|r| r.frequency))
            .reduce(f64::max)
    }

    /// Numerator and denominator polynomials in `s`, ascending powers.
    pub fn polynomials(&self) -> (Vec<f64>, Vec<f64>) {
        let mut num = vec![self.gain];
        for &z in &self.zeros {
            num = poly_mul(&num, &[1.0, 1.0 / (TAU * z)]);
        }
        let mut den = vec![1.0];
        for &p in &self.poles {
            den = poly_mul(&den, &[1.0, 1.0 / (TAU * p)]);
        }
        for r in &self.resonances {
            let w_r = TAU * r.frequency;
            den = poly_mul(&den, &[1.0, 1.0 / (w_r * r.quality_factor), 1.0 / (w_r * w_r)]);
        }
        (num, den)
    }

    /// Realisation in controllable canonical form. `None` if improper.
    pub fn state_space(&self) -> Option<CompanionRealization> {
        let (num, den) = self.polynomials();
        let order = den.len() - 1;
        if num.len() > den.len() {
            return None;
        }
        let lead = den[order];
        let a: Vec<f64> = den[..order].iter().map(|c| c / lead).collect();
        let mut b: Vec<f64> = num.iter().map(|c| c / lead).collect();
        b.resize(order + 1, 0.0);
        let d = b[order];
        let c = (0..order).map(|i| b[i] - d * a[i]).collect();
        Some(CompanionRealization { a, c, d })
    }
}

fn poly_mul(p: &[f64], q: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p.len() + q.len() - 1];
    for (i, &pi) in p.iter().enumerate() {
        for (j, &qj) in q.iter().enumerate() {
            out[i + j] += pi * qj;
        }
    }
    out
}

/// `q^(n) = u - sum a_i q^(i)`, `y = sum c_i q^(i) + d u`, with the state
/// vector holding `q, q', ..., q^(n-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompanionRealization {
    pub a: Vec<f64>,
    pub c: Vec<f64>,
    pub d: f64,
}

impl CompanionRealization {
    pub fn order(&self) -> usize {
        self.a.len()
    }

    /// Writes `dq/dt` for input `u` into `dq`.
    pub fn derivative(&self, q: &[f64], u: f64, dq: &mut [f64]) {
        let n = self.order();
        if n == 0 {
            return;
        }
        dq[..n - 1].copy_from_slice(&q[1..n]);
        dq[n - 1] = u - self.a.iter().zip(q).map(|(a, x)| a * x).sum::<f64>();
    }

    pub fn output(&self, q: &[f64], u: f64) -> f64 {
        self.c.iter().zip(q).map(|(c, x)| c * x).sum::<f64>() + self.d * u
    }
}
