//! From sampled responses to physics numbers: resonance fits, intracavity
//! power, repeat aggregation and the power-sweep comparison.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;

use crate::error::{non_negative, Error, Result};
use crate::lti::LtiBlock;
use crate::mechanics::SpringEstimate;
use crate::optics::{predicted_spring_band, SpringBand};
use crate::{Measured, SPEED_OF_LIGHT};

/// Minimum number of usable points for a resonance fit.
pub const MIN_FIT_POINTS: usize = 5;
const MAX_ITERATIONS: usize = 100;
const STEP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResponsePoint {
    /// Hz.
    pub frequency: f64,
    pub value: Complex64,
    pub snr: f64,
    pub confident: bool,
}

/// A sampled complex response, kept sorted by frequency. Repeated
/// frequencies are allowed and treated as independent samples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrequencyResponse {
    points: Vec<ResponsePoint>,
    pub power: Option<Measured>,
    pub repeat: usize,
}

impl FrequencyResponse {
    pub fn new(mut points: Vec<ResponsePoint>) -> Self {
        points.sort_by(|a, b| a.frequency.total_cmp(&b.frequency));
        Self {
            points,
            power: None,
            repeat: 0,
        }
    }

    /// Noise-free response of a block at the given frequencies.
    pub fn from_block(block: &LtiBlock, frequencies: &[f64]) -> Self {
        Self::new(
            frequencies
                .iter()
                .map(|&f| ResponsePoint {
                    frequency: f,
                    value: block.eval_hz(f),
                    snr: f64::INFINITY,
                    confident: true,
                })
                .collect(),
        )
    }

    pub fn points(&self) -> &[ResponsePoint] {
        &self.points
    }

    pub fn into_points(self) -> Vec<ResponsePoint> {
        self.points
    }

    /// Union of two responses.
    pub fn merged(&self, other: &FrequencyResponse) -> Self {
        let mut out = Self::new(self.points.iter().chain(&other.points).copied().collect());
        out.power = self.power;
        out.repeat = self.repeat;
        out
    }

    /// Divides out a known block, e.g. the loop filter, leaving the plant.
    pub fn compensated(&self, block: &LtiBlock) -> Self {
        let mut out = self.clone();
        for p in &mut out.points {
            p.value /= block.eval_hz(p.frequency);
        }
        out
    }

    pub fn scaled(&self, factor: Complex64) -> Self {
        let mut out = self.clone();
        for p in &mut out.points {
            p.value *= factor;
        }
        out
    }

    fn usable(&self) -> impl Iterator<Item = &ResponsePoint> {
        self.points.iter().filter(|p| p.confident && p.value.is_finite() && p.value.norm() > 0.0)
    }

    /// CSV `f_Hz,re_G,im_G,mag_dB,phase_deg,confidence`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "f_Hz,re_G,im_G,mag_dB,phase_deg,confidence")?;
        for p in &self.points {
            writeln!(
                w,
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
                p.frequency,
                p.value.re,
                p.value.im,
                20.0 * p.value.norm().log10(),
                p.value.arg().to_degrees(),
                if p.confident { "high" } else { "low" }
            )?;
        }
        Ok(())
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(x: f64) -> f64 {
    let y = x.rem_euclid(TAU);
    if y > PI {
        y - TAU
    } else {
        y
    }
}

/// Continues a phase sequence by choosing, at each step, the multiple of
/// `2 pi` that keeps it nearest to the previous value.
pub fn unwrap_phase(phases: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(phases.len());
    for &p in phases {
        match out.last() {
            None => out.push(p),
            Some(&prev) => out.push(prev + wrap_angle(p - prev)),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitResult {
    pub f_fit: Measured,
    pub q_fit: Measured,
    pub gain_fit: Measured,
    /// Nuisance phase offset, radians.
    pub phase_offset: f64,
    /// RMS phase residual, radians.
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Phase of `1 / (w_r^2 - w^2 + i w w_r / Q)`, in `(-pi, 0)`.
fn model_phase(omega: f64, omega_r: f64, q: f64) -> f64 {
    -(omega * omega_r / q).atan2(omega_r * omega_r - omega * omega)
}

/// d(model phase)/d(f_r) and d(model phase)/d(ln Q).
fn model_phase_gradient(omega: f64, omega_r: f64, q: f64) -> [f64; 2] {
    let a = omega_r * omega_r - omega * omega;
    let b = omega * omega_r / q;
    let norm = a * a + b * b;
    let (da_df, db_df) = (2.0 * omega_r * TAU, omega * TAU / q);
    let (da_dlq, db_dlq) = (0.0, -b);
    [
        -(a * db_df - b * da_df) / norm,
        -(a * db_dlq - b * da_dlq) / norm,
    ]
}

struct PhaseProblem {
    omega: Vec<f64>,
    phase: Vec<f64>,
}

impl PhaseProblem {
    /// Residuals with the best phase offset profiled out; returns (cost, offset).
    fn residuals(&self, f_r: f64, q: f64, out: &mut [f64]) -> (f64, f64) {
        let omega_r = TAU * f_r;
        let (mut s, mut c) = (0.0, 0.0);
        for (i, (&w, &p)) in self.omega.iter().zip(&self.phase).enumerate() {
            let d = wrap_angle(p - model_phase(w, omega_r, q));
            out[i] = d;
            s += d.sin();
            c += d.cos();
        }
        let offset = s.atan2(c);
        let mut cost = 0.0;
        for r in out.iter_mut() {
            *r = wrap_angle(*r - offset);
            cost += *r * *r;
        }
        (cost, offset)
    }

    fn cost(&self, f_r: f64, q: f64, scratch: &mut [f64]) -> f64 {
        self.residuals(f_r, q, scratch).0
    }

    /// Normal equations `J^T J` and `J^T r` of the offset-projected problem.
    fn normal_equations(&self, f_r: f64, q: f64, r: &[f64]) -> ([[f64; 2]; 2], [f64; 2]) {
        let omega_r = TAU * f_r;
        let n = self.omega.len() as f64;
        let grads: Vec<[f64; 2]> = self.omega.iter().map(|&w| model_phase_gradient(w, omega_r, q)).collect();
        let mean = grads.iter().fold([0.0; 2], |m, g| [m[0] + g[0] / n, m[1] + g[1] / n]);
        let mut jtj = [[0.0; 2]; 2];
        let mut jtr = [0.0; 2];
        for (g, &ri) in grads.iter().zip(r) {
            // residual = measured - model - offset
            let j = [-(g[0] - mean[0]), -(g[1] - mean[1])];
            for a in 0..2 {
                jtr[a] += j[a] * ri;
                for b in 0..2 {
                    jtj[a][b] += j[a] * j[b];
                }
            }
        }
        (jtj, jtr)
    }
}

fn solve2(m: [[f64; 2]; 2], v: [f64; 2]) -> Option<[f64; 2]> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det.abs() <= f64::EPSILON * (m[0][0] * m[1][1]).abs() || !det.is_finite() || det == 0.0 {
        return None;
    }
    Some([
        (m[1][1] * v[0] - m[0][1] * v[1]) / det,
        (m[0][0] * v[1] - m[1][0] * v[0]) / det,
    ])
}

fn inverse2(m: [[f64; 2]; 2]) -> Option<[[f64; 2]; 2]> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    Some([[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]])
}

/// Fits resonance frequency and Q to the phase of a response, then the
/// overall gain to its log-magnitude with `(f, Q)` held fixed.
///
/// The response should be that of a damped oscillator up to a constant
/// complex factor (e.g. a loop response with the filter divided out); the
/// constant phase is fitted as a nuisance parameter. The optimiser is a
/// step-halving Gauss-Newton on `(f, ln Q)`, started from the best point
/// of a grid around the steepest phase step.
pub fn fit_resonance(fr: &FrequencyResponse) -> Result<FitResult> {
    let pts: Vec<&ResponsePoint> = fr.usable().collect();
    if pts.len() < MIN_FIT_POINTS {
        return Err(Error::TooFewPoints {
            got: pts.len(),
            required: MIN_FIT_POINTS,
        });
    }
    let freqs: Vec<f64> = pts.iter().map(|p| p.frequency).collect();
    let raw: Vec<f64> = pts.iter().map(|p| p.value.arg()).collect();
    let unwrapped = unwrap_phase(&raw);
    let (lo, hi) = unwrapped
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &p| (a.min(p), b.max(p)));
    if hi - lo < PI / 2.0 {
        return Err(Error::NoResonanceInBand);
    }

    // steepest step brackets the flip; search one neighbour either side
    let step = (0..freqs.len() - 1)
        .filter(|&i| freqs[i + 1] > freqs[i])
        .max_by(|&i, &j| {
            let di = wrap_angle(raw[i + 1] - raw[i]).abs();
            let dj = wrap_angle(raw[j + 1] - raw[j]).abs();
            di.total_cmp(&dj)
        })
        .ok_or(Error::NoResonanceInBand)?;
    let f_lo = freqs[step.saturating_sub(1)];
    let f_hi = freqs[(step + 2).min(freqs.len() - 1)];

    let problem = PhaseProblem {
        omega: freqs.iter().map(|f| TAU * f).collect(),
        phase: raw,
    };
    let n = freqs.len();
    let mut scratch = vec![0.0; n];

    let mut best = (f64::INFINITY, 0.5 * (f_lo + f_hi), 10.0);
    const F_GRID: usize = 64;
    const Q_GRID: usize = 41;
    for i in 0..=F_GRID {
        let f = f_lo + (f_hi - f_lo) * i as f64 / F_GRID as f64;
        for j in 0..Q_GRID {
            let q = 10f64.powf(-0.5 + 6.0 * j as f64 / (Q_GRID - 1) as f64);
            let c = problem.cost(f, q, &mut scratch);
            if c < best.0 {
                best = (c, f, q);
            }
        }
    }

    let (mut cost, mut f_r, mut q) = best;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        problem.residuals(f_r, q, &mut scratch);
        let (jtj, jtr) = problem.normal_equations(f_r, q, &scratch);
        let Some(delta) = solve2(jtj, [-jtr[0], -jtr[1]]) else {
            break;
        };
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let f_new = f_r + scale * delta[0];
            let q_new = q * (scale * delta[1]).exp();
            if f_new > 0.0 && q_new.is_finite() {
                let c = problem.cost(f_new, q_new, &mut scratch);
                if c <= cost {
                    f_r = f_new;
                    q = q_new;
                    cost = c;
                    accepted = true;
                    break;
                }
            }
            scale *= 0.5;
        }
        if !accepted {
            // no descent along the Gauss-Newton direction: at the minimum
            // unless the proposed step was still large
            converged = (delta[0] / f_r).abs().max(delta[1].abs()) < 1e-6;
            break;
        }
        if (scale * delta[0] / f_r).abs().max((scale * delta[1]).abs()) < STEP_TOLERANCE {
            converged = true;
            break;
        }
    }

    let (cost, offset) = problem.residuals(f_r, q, &mut scratch);
    let (jtj, _) = problem.normal_equations(f_r, q, &scratch);
    let dof = (n as f64 - 3.0).max(1.0);
    let s2 = cost / dof;
    let (sigma_f, sigma_lq) = inverse2(jtj)
        .map(|cov| ((s2 * cov[0][0]).max(0.0).sqrt(), (s2 * cov[1][1]).max(0.0).sqrt()))
        .unwrap_or((f64::INFINITY, f64::INFINITY));

    // gain: least squares of ln|value| - ln|model| with (f, Q) fixed
    let omega_r = TAU * f_r;
    let log_ratio: Vec<f64> = pts
        .iter()
        .map(|p| {
            let w = TAU * p.frequency;
            let model = 1.0 / Complex64::new(omega_r * omega_r - w * w, w * omega_r / q);
            p.value.norm().ln() - model.norm().ln()
        })
        .collect();
    let mean = log_ratio.iter().sum::<f64>() / n as f64;
    let var = log_ratio.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let gain = mean.exp();

    Ok(FitResult {
        f_fit: Measured::new(f_r, sigma_f),
        q_fit: Measured::new(q, q * sigma_lq),
        gain_fit: Measured::new(gain, gain * (var / n as f64).sqrt()),
        phase_offset: offset,
        residual: (cost / n as f64).sqrt(),
        converged,
        iterations,
    })
}

/// Circulating power from transmitted power and mirror transmissivity.
///
/// Both inputs carry one-sigma uncertainties; the transmitted-power sigma
/// is where the power fluctuation during actuation enters.
pub fn intracavity_power(transmitted: Measured, transmissivity: Measured) -> Result<Measured> {
    non_negative("transmitted power", transmitted.value)?;
    non_negative("sigma transmitted", transmitted.sigma)?;
    non_negative("sigma T", transmissivity.sigma)?;
    let t = transmissivity.value;
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidParameter {
            name: "transmissivity",
            value: t,
            reason: "must lie in (0, 1]",
        });
    }
    let value = transmitted.value / t;
    let sigma = (transmitted.sigma / t).hypot(transmitted.value * transmissivity.sigma / (t * t));
    Ok(Measured::new(value, sigma))
}

/// Mean and sample standard deviation of the fitted resonance over the
/// converged repeats.
pub fn aggregate_repeats(fits: &[FitResult]) -> Result<Measured> {
    let f: Vec<f64> = fits.iter().filter(|r| r.converged).map(|r| r.f_fit.value).collect();
    if f.len() < 2 {
        return Err(Error::InsufficientRepeats { converged: f.len() });
    }
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    let var = f.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(Measured::new(mean, var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerPoint {
    pub intracavity_power: Measured,
    pub spring: SpringEstimate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub point: PowerPoint,
    pub band: SpringBand,
    pub consistent: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// N/(m W).
    pub slope: Measured,
    pub analytic_slope: f64,
    /// RMS residual of the line fit, relative to the largest |k|.
    pub relative_residual: f64,
    pub all_consistent: bool,
}

impl SweepReport {
    pub fn slope_relative_error(&self) -> f64 {
        (self.slope.value / self.analytic_slope - 1.0).abs()
    }

    /// CSV `P_W,sigma_P_W,k_Npm,sigma_k_Npm,band_lo_Npm,band_hi_Npm,consistent`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "P_W,sigma_P_W,k_Npm,sigma_k_Npm,band_lo_Npm,band_hi_Npm,consistent")?;
        for r in &self.rows {
            writeln!(
                w,
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
                r.point.intracavity_power.value,
                r.point.intracavity_power.sigma,
                r.point.spring.k_ext,
                r.point.spring.sigma_k,
                r.band.lo,
                r.band.hi,
                r.consistent
            )?;
        }
        Ok(())
    }

    pub fn write_summary<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "fitted slope [N/(m W)]   = {:.6e} +/- {:.2e}", self.slope.value, self.slope.sigma)?;
        writeln!(w, "analytic slope [N/(m W)] = {:.6e}", self.analytic_slope)?;
        writeln!(w, "relative slope error     = {:.3e}", self.slope_relative_error())?;
        for r in &self.rows {
            writeln!(
                w,
                "P = {:.3} +/- {:.3} W: k = {:.4e} +/- {:.2e} N/m, band [{:.4e}, {:.4e}] -> {}",
                r.point.intracavity_power.value,
                r.point.intracavity_power.sigma,
                r.point.spring.k_ext,
                r.point.spring.sigma_k,
                r.band.lo,
                r.band.hi,
                if r.consistent { "consistent" } else { "INCONSISTENT" }
            )?;
        }
        writeln!(w, "verdict: {}", if self.all_consistent { "all points consistent" } else { "inconsistent" })
    }
}

/// Compares measured spring constants with the radiation-pressure
/// prediction over a set of powers.
///
/// Each point is checked against the band of [`predicted_spring_band`] at its
/// own power; the slope is an inverse-variance weighted line anchored at the
/// zero-power point (uniform weights when any sigma vanishes).
pub fn power_sweep_analysis(points: &[PowerPoint], center_distance: Measured) -> Result<SweepReport> {
    if points.len() < 2 {
        return Err(Error::InvalidSweep);
    }
    let anchor = points
        .iter()
        .find(|p| p.intracavity_power.value == 0.0)
        .ok_or(Error::InvalidSweep)?;
    let k0 = anchor.spring.k_ext;

    let rows = points
        .iter()
        .map(|p| {
            let band = predicted_spring_band(center_distance, p.intracavity_power)?;
            let consistent = band.overlaps(p.spring.k_ext, p.spring.sigma_k);
            Ok(SweepRow {
                point: *p,
                band,
                consistent,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let uniform = points.iter().any(|p| !(p.spring.sigma_k > 0.0));
    let weight = |p: &PowerPoint| if uniform { 1.0 } else { p.spring.sigma_k.powi(-2) };
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for p in points {
        let x = p.intracavity_power.value;
        sxx += weight(p) * x * x;
        sxy += weight(p) * x * (p.spring.k_ext - k0);
    }
    let slope = sxy / sxx;
    let residuals: Vec<f64> = points
        .iter()
        .map(|p| p.spring.k_ext - k0 - slope * p.intracavity_power.value)
        .collect();
    let ss: f64 = residuals.iter().map(|r| r * r).sum();
    let dof = (points.len() as f64 - 1.0).max(1.0);
    let sigma_slope = if uniform {
        (ss / dof / sxx).sqrt()
    } else {
        (1.0 / sxx).sqrt()
    };
    let k_scale = points.iter().map(|p| p.spring.k_ext.abs()).fold(0.0, f64::max);
    let relative_residual = if k_scale > 0.0 {
        (ss / points.len() as f64).sqrt() / k_scale
    } else {
        0.0
    };
    let all_consistent = !rows.is_empty() && rows.iter().all(|r| r.consistent);
    Ok(SweepReport {
        rows,
        slope: Measured::new(slope, sigma_slope),
        analytic_slope: 2.0 / (center_distance.value * SPEED_OF_LIGHT),
        relative_residual,
        all_consistent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::BlockLabel;
    use crate::mechanics::TorsionalPendulum;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn grid(f0: f64, q: f64, n: usize) -> Vec<f64> {
        let half = 5.0 * f0 / q;
        (0..n).map(|i| f0 - half + 2.0 * half * i as f64 / (n - 1) as f64).collect()
    }

    fn synthetic(f0: f64, q: f64) -> FrequencyResponse {
        let p = TorsionalPendulum::new(7.2e-6, 0.085, f0, q).unwrap();
        FrequencyResponse::from_block(&LtiBlock::pendulum(&p, 0.0).unwrap(), &grid(f0, q, 41))
    }

    #[test]
    fn unwrap_and_wrap() {
        assert_relative_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_relative_eq!(wrap_angle(-PI / 2.0), -PI / 2.0);
        let u = unwrap_phase(&[3.0, -3.0, -2.5]);
        assert_relative_eq!(u[1], -3.0 + TAU, epsilon = 1e-12);
    }

    #[test]
    fn noiseless_fit_recovers_parameters() {
        let fit = fit_resonance(&synthetic(0.0322, 100.0)).unwrap();
        assert!(fit.converged);
        assert_relative_eq!(fit.f_fit.value, 0.0322, max_relative = 1e-6);
        assert_relative_eq!(fit.q_fit.value, 100.0, max_relative = 1e-4);
        let dc = 0.085f64.powi(2) / 7.2e-6 / (TAU * 0.0322).powi(2);
        // gain is relative to the bare 1/(w_r^2 - w^2 + ...) oscillator
        assert_relative_eq!(fit.gain_fit.value, dc * (TAU * 0.0322).powi(2), max_relative = 1e-4);
    }

    #[test]
    fn coarse_sweep_fit() {
        let p = TorsionalPendulum::new(7.2e-6, 0.085, 0.0322, 100.0).unwrap();
        let freqs: Vec<f64> = (0..10).map(|i| 0.02 + 0.06 * i as f64 / 9.0).collect();
        let fr = FrequencyResponse::from_block(&LtiBlock::pendulum(&p, 0.0).unwrap(), &freqs);
        let fit = fit_resonance(&fr).unwrap();
        assert_relative_eq!(fit.f_fit.value, 0.0322, max_relative = 1e-3);
    }

    #[test]
    fn flat_response_has_no_resonance() {
        let flat = FrequencyResponse::from_block(&LtiBlock::constant(BlockLabel::Custom, 1.0), &grid(0.03, 100.0, 11));
        assert_eq!(fit_resonance(&flat), Err(Error::NoResonanceInBand));
        let short = FrequencyResponse::from_block(&LtiBlock::constant(BlockLabel::Custom, 1.0), &[0.1, 0.2]);
        assert!(matches!(fit_resonance(&short), Err(Error::TooFewPoints { .. })));
    }

    #[test]
    fn compensation_removes_filter() {
        let p = TorsionalPendulum::new(7.2e-6, 0.085, 0.0322, 100.0).unwrap();
        let f = LtiBlock::loop_filter(2.0);
        let g = LtiBlock::pendulum(&p, 0.0).unwrap().series(&f);
        let fr = FrequencyResponse::from_block(&g, &grid(0.0322, 100.0, 21)).compensated(&f);
        let fit = fit_resonance(&fr).unwrap();
        assert_relative_eq!(fit.f_fit.value, 0.0322, max_relative = 1e-6);
    }

    #[test]
    fn intracavity_power_examples() {
        let p = intracavity_power(Measured::exact(14.85e-3), Measured::exact(5e-4)).unwrap();
        assert_relative_eq!(p.value, 29.7, max_relative = 1e-12);
        assert_eq!(intracavity_power(Measured::exact(0.0), Measured::exact(5e-4)).unwrap().value, 0.0);
        let p = intracavity_power(Measured::exact(14.85e-3), Measured::new(5e-4, 1e-4)).unwrap();
        assert_relative_eq!(p.sigma, 5.94, max_relative = 1e-12);
        assert!(intracavity_power(Measured::exact(1.0), Measured::exact(0.0)).is_err());
    }

    fn fit_at(f: f64, converged: bool) -> FitResult {
        FitResult {
            f_fit: Measured::new(f, 0.0),
            q_fit: Measured::new(100.0, 0.0),
            gain_fit: Measured::new(1.0, 0.0),
            phase_offset: 0.0,
            residual: 0.0,
            converged,
            iterations: 1,
        }
    }

    #[test]
    fn aggregate_examples() {
        let agg = aggregate_repeats(&[fit_at(0.0431, true), fit_at(0.0435, true), fit_at(0.0439, true)]).unwrap();
        assert_relative_eq!(agg.value, 0.0435, max_relative = 1e-12);
        assert_relative_eq!(agg.sigma, 0.0004, max_relative = 1e-9);
        let same = aggregate_repeats(&[fit_at(0.04, true), fit_at(0.04, true)]).unwrap();
        assert_eq!(same.sigma, 0.0);
        assert_eq!(
            aggregate_repeats(&[fit_at(0.04, true), fit_at(0.05, false)]),
            Err(Error::InsufficientRepeats { converged: 1 })
        );
    }

    fn eq2_points(powers: &[f64], a: f64) -> Vec<PowerPoint> {
        powers
            .iter()
            .map(|&p| PowerPoint {
                intracavity_power: Measured::new(p, 0.2 * p),
                spring: SpringEstimate {
                    k_ext: 2.0 * p / (a * SPEED_OF_LIGHT),
                    sigma_k: 0.0,
                },
            })
            .collect()
    }

    #[test]
    fn sweep_of_exact_prediction() {
        let pts = eq2_points(&[0.0, 6.0, 12.0, 18.0, 23.2, 29.7], 0.0089);
        let report = power_sweep_analysis(&pts, Measured::new(0.0089, 0.0008)).unwrap();
        assert_relative_eq!(report.analytic_slope, 7.4958223640e-7, max_relative = 1e-9);
        assert!(report.slope_relative_error() < 1e-12);
        assert!(report.relative_residual < 1e-12);
        assert!(report.all_consistent);
    }

    #[test]
    fn sweep_requires_zero_power_reference() {
        let pts = eq2_points(&[6.0, 12.0], 0.0089);
        assert_eq!(power_sweep_analysis(&pts, Measured::exact(0.0089)), Err(Error::InvalidSweep));
        let pts = eq2_points(&[0.0], 0.0089);
        assert_eq!(power_sweep_analysis(&pts, Measured::exact(0.0089)), Err(Error::InvalidSweep));
    }

    #[test]
    fn inconsistent_point_is_flagged() {
        let mut pts = eq2_points(&[0.0, 10.0], 0.0089);
        pts[1].spring.k_ext *= 3.0;
        pts[1].spring.sigma_k = 1e-8;
        let report = power_sweep_analysis(&pts, Measured::new(0.0089, 0.0008)).unwrap();
        assert!(!report.all_consistent);
        assert!(report.rows[0].consistent);
        assert!(!report.rows[1].consistent);
    }

    proptest! {
        #[test]
        fn fit_invariant_under_complex_scaling(mag in 1e-3f64..1e3, phase in -3.1f64..3.1) {
            let fr = synthetic(0.0322, 100.0);
            let base = fit_resonance(&fr).unwrap();
            let scaled = fit_resonance(&fr.scaled(Complex64::from_polar(mag, phase))).unwrap();
            prop_assert!((scaled.f_fit.value / base.f_fit.value - 1.0).abs() < 1e-9);
            prop_assert!((scaled.q_fit.value / base.q_fit.value - 1.0).abs() < 1e-6);
        }

        #[test]
        fn aggregate_sigma_order_invariant(mut f in proptest::collection::vec(0.03f64..0.05, 2..8), seed in 0usize..100) {
            let fits: Vec<FitResult> = f.iter().map(|&x| fit_at(x, true)).collect();
            let a = aggregate_repeats(&fits).unwrap();
            let k = seed % f.len();
            f.rotate_left(k);
            f.reverse();
            let shuffled: Vec<FitResult> = f.iter().map(|&x| fit_at(x, true)).collect();
            let b = aggregate_repeats(&shuffled).unwrap();
            prop_assert!((a.sigma - b.sigma).abs() <= 1e-12 * a.sigma.max(1e-18));
        }

        #[test]
        fn power_round_trip(p in 0.0f64..1e3, t in 1e-6f64..1.0) {
            let back = intracavity_power(Measured::exact(p * t), Measured::exact(t)).unwrap();
            prop_assert!((back.value - p).abs() <= 2.0 * f64::EPSILON * p);
            prop_assert_eq!(back.sigma, 0.0);
        }
    }
}
