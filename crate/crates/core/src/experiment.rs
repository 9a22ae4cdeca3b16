//! End-to-end virtual experiments built from an [`ExperimentConfig`].
//!
//! A measurement condition (laser off, or laser on at some power) is a
//! swept-sine run on the closed loop: a coarse grid, then a few zoom stages
//! centred on the phase flip, then a phase fit of the response with the
//! known filter divided out. Two conditions give a frequency shift and hence
//! a spring constant.

use std::io::Write;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::estimation::{
    aggregate_repeats, fit_resonance, intracavity_power, power_sweep_analysis, unwrap_phase, FitResult,
    FrequencyResponse, PowerPoint, SweepReport, MIN_FIT_POINTS,
};
use crate::feedback::{closed_loop_suppression, measure_sweep, open_loop, LoopConfig, MeasurementPlan};
use crate::lti::LtiBlock;
use crate::mechanics::{spring_uncertainty, SpringEstimate};
use crate::optics::{horizontal_spring, is_stable, predicted_spring_band, stability_matrix, SpringBand, StabilityMatrix, StabilityVerdict};
use crate::seed::derive_seed;
use crate::Measured;

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub matrix: StabilityMatrix,
    pub verdict: StabilityVerdict,
}

impl StabilityReport {
    /// CSV with one row: the three stiffnesses and the verdict.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "k_x_Npm,k_z_Npm,k_beta_Nm_per_rad,stable,failing_axes")?;
        let failing: Vec<String> = self.verdict.failing.iter().map(|a| a.to_string()).collect();
        writeln!(
            w,
            "{:.16e},{:.16e},{:.16e},{},{}",
            self.matrix.k_x,
            self.matrix.k_z,
            self.matrix.k_beta,
            self.verdict.stable,
            failing.join(";")
        )
    }

    /// `stable` or `unstable: x, z`.
    pub fn summary(&self) -> String {
        if self.verdict.stable {
            "stable".to_string()
        } else {
            let failing: Vec<String> = self.verdict.failing.iter().map(|a| a.to_string()).collect();
            format!("unstable: {}", failing.join(", "))
        }
    }
}

pub fn stability(cfg: &ExperimentConfig) -> Result<StabilityReport> {
    let sandwich = cfg.sandwich()?;
    let matrix = stability_matrix(&sandwich)?;
    Ok(StabilityReport {
        verdict: is_stable(&matrix),
        matrix,
    })
}

/// What `bode` tabulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BodeTarget {
    /// Loop filter F.
    Filter,
    /// Free pendulum H.
    Pendulum,
    /// Pendulum with the optical spring at the configured power, H'.
    Effective,
    /// Open loop G = H' S F A.
    OpenLoop,
    /// Closed-loop suppression 1 / (1 + G).
    Suppression,
}

impl std::str::FromStr for BodeTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "filter" | "F" => Ok(Self::Filter),
            "pendulum" | "H" => Ok(Self::Pendulum),
            "effective" | "H'" => Ok(Self::Effective),
            "open-loop" | "G" => Ok(Self::OpenLoop),
            "suppression" => Ok(Self::Suppression),
            _ => Err(Error::Config {
                section: String::new(),
                key: "target".into(),
                message: format!("unknown target `{s}` (filter, pendulum, effective, open-loop, suppression)"),
            }),
        }
    }
}

/// Logarithmically spaced frequencies, endpoints included.
pub fn log_space(f_min: f64, f_max: f64, n: usize) -> Result<Vec<f64>> {
    if !(f_min > 0.0 && f_min < f_max && f_max.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "f_min",
            value: f_min,
            reason: "need 0 < f_min < f_max",
        });
    }
    if n < 2 {
        return Err(Error::InvalidParameter {
            name: "n_points",
            value: n as f64,
            reason: "need at least 2 points",
        });
    }
    let (a, b) = (f_min.ln(), f_max.ln());
    Ok((0..n)
        .map(|i| match i {
            0 => f_min,
            _ if i == n - 1 => f_max,
            _ => (a + (b - a) * i as f64 / (n - 1) as f64).exp(),
        })
        .collect())
}

/// Horizontal spring injected by the upper cavity at `power` (W).
pub fn injected_spring(cfg: &ExperimentConfig, power: f64) -> Result<f64> {
    Ok(horizontal_spring(&cfg.upper_cavity()?.with_power(power)?, 0.0)?.re)
}

/// Analytic response table for one block or the loop.
pub fn bode(cfg: &ExperimentConfig, target: BodeTarget, f_min: f64, f_max: f64, n: usize) -> Result<FrequencyResponse> {
    let freqs = log_space(f_min, f_max, n)?;
    let k_ext = || -> Result<f64> {
        match cfg.cavity.as_ref().and_then(|c| c.upper.as_ref()) {
            Some(u) => injected_spring(cfg, u.power_w),
            None => Ok(0.0),
        }
    };
    let block = match target {
        BodeTarget::Filter => LtiBlock::loop_filter(cfg.loop_section()?.filter_gain),
        BodeTarget::Pendulum => LtiBlock::pendulum(&cfg.pendulum()?, 0.0)?,
        BodeTarget::Effective => LtiBlock::pendulum(&cfg.pendulum()?, k_ext()?)?,
        BodeTarget::OpenLoop | BodeTarget::Suppression => {
            let lp = cfg.loop_config(k_ext()?)?;
            let suppression = target == BodeTarget::Suppression;
            let points = freqs
                .iter()
                .map(|&f| {
                    let w = std::f64::consts::TAU * f;
                    let value = if suppression {
                        closed_loop_suppression(&lp, w)?
                    } else {
                        open_loop(&lp, w)
                    };
                    Ok(crate::estimation::ResponsePoint {
                        frequency: f,
                        value,
                        snr: f64::INFINITY,
                        confident: true,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            return Ok(FrequencyResponse::new(points));
        }
    };
    Ok(FrequencyResponse::from_block(&block, &freqs))
}

/// Frequency where the unwrapped phase crosses the midpoint of its range,
/// interpolated linearly on the steepest crossing segment.
fn phase_midpoint(fr: &FrequencyResponse) -> Option<f64> {
    let pts: Vec<_> = fr
        .points()
        .iter()
        .filter(|p| p.confident && p.value.is_finite() && p.value.norm() > 0.0)
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let phase = unwrap_phase(&pts.iter().map(|p| p.value.arg()).collect::<Vec<_>>());
    let (lo, hi) = phase.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &p| (a.min(p), b.max(p)));
    let mid = 0.5 * (lo + hi);
    let mut best: Option<(f64, f64)> = None;
    for i in 0..pts.len() - 1 {
        let (a, b) = (phase[i] - mid, phase[i + 1] - mid);
        if a * b > 0.0 {
            continue;
        }
        let (fa, fb) = (pts[i].frequency, pts[i + 1].frequency);
        let step = (b - a).abs();
        let f = if step > 0.0 { fa + (fb - fa) * (-a) / (b - a) } else { fa };
        if best.is_none_or(|(s, _)| step > s) {
            best = Some((step, f));
        }
    }
    best.map(|(_, f)| f)
}

/// Zoom schedule for [`adaptive_sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Refinement {
    pub stages: usize,
    /// Points per stage, spread over twice the previous spacing either side
    /// of the current resonance estimate.
    pub points: usize,
}

/// Coarse sweep followed by zoom stages around the phase flip.
///
/// The flip is located on the response with `compensate` divided out.
/// Stage `s` uses the plan seed mixed with `s`, so stages are independent.
pub fn adaptive_sweep(
    lp: &LoopConfig,
    coarse: &[f64],
    refine: Refinement,
    compensate: &LtiBlock,
    plan: &MeasurementPlan,
) -> Result<FrequencyResponse> {
    let stage_plan = |s: usize| MeasurementPlan {
        seed: derive_seed(plan.seed, &[s as u64]),
        ..plan.clone()
    };
    let mut response = measure_sweep(lp, coarse, &stage_plan(0))?;
    let mut spacing = coarse.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
    for s in 1..=refine.stages {
        let Some(centre) = phase_midpoint(&response.compensated(compensate)) else {
            break;
        };
        let step = 2.0 * spacing / (refine.points - 1) as f64;
        let freqs: Vec<f64> = (0..refine.points)
            .map(|i| centre - spacing + step * i as f64)
            .filter(|&f| f > 0.0)
            .collect();
        response = response.merged(&measure_sweep(lp, &freqs, &stage_plan(s))?);
        spacing = step;
    }
    Ok(response)
}

/// One measurement condition: its sweeps, fits and resonance estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionResult {
    pub k_injected: f64,
    pub responses: Vec<FrequencyResponse>,
    pub fits: Vec<FitResult>,
    /// Single fit with its covariance sigma, or the mean and spread of the
    /// repeats when there are two or more.
    pub frequency: Measured,
}

impl ConditionResult {
    /// CSV of the per-repeat fits.
    pub fn write_fits_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "repeat,f_fit_Hz,sigma_f_Hz,q_fit,sigma_q,gain_fit,sigma_gain,phase_offset_rad,residual_rad,converged")?;
        for (i, f) in self.fits.iter().enumerate() {
            writeln!(
                w,
                "{i},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
                f.f_fit.value,
                f.f_fit.sigma,
                f.q_fit.value,
                f.q_fit.sigma,
                f.gain_fit.value,
                f.gain_fit.sigma,
                f.phase_offset,
                f.residual,
                f.converged
            )?;
        }
        Ok(())
    }
}

fn refinement(cfg: &ExperimentConfig) -> Result<Refinement> {
    let l = cfg.loop_section()?;
    Ok(Refinement {
        stages: l.refine_stages,
        points: l.refine_points,
    })
}

/// Runs all repeats of one condition. `index` keeps the seeds of different
/// conditions apart.
pub fn measure_condition(cfg: &ExperimentConfig, k_ext: f64, index: u64, seed: u64) -> Result<ConditionResult> {
    let lp = cfg.loop_config(k_ext)?;
    let coarse = cfg.coarse_frequencies()?;
    let refine = refinement(cfg)?;
    let repeats = cfg.repeats();
    let mut responses = Vec::with_capacity(repeats);
    let mut fits = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let plan = cfg.measurement_plan(derive_seed(seed, &[index, r as u64]))?;
        let mut response = adaptive_sweep(&lp, &coarse, refine, lp.filter(), &plan).map_err(|e| e.in_stage("measure_sweep"))?;
        response.repeat = r;
        let total = response.points().len();
        let confident = response.points().iter().filter(|p| p.confident).count();
        if confident < MIN_FIT_POINTS {
            return Err(Error::LowConfidence { confident, total }.in_stage("estimate_oltf"));
        }
        let fit = fit_resonance(&response.compensated(lp.filter())).map_err(|e| e.in_stage("fit_resonance"))?;
        responses.push(response);
        fits.push(fit);
    }
    let frequency = if repeats >= 2 {
        aggregate_repeats(&fits).map_err(|e| e.in_stage("aggregate_repeats"))?
    } else {
        fits[0].f_fit
    };
    Ok(ConditionResult {
        k_injected: k_ext,
        responses,
        fits,
        frequency,
    })
}

/// Intracavity power as a photodetector behind the upper mirror reports it.
pub fn measured_power(cfg: &ExperimentConfig, power: f64) -> Result<Measured> {
    let t = cfg.transmissivity()?;
    let transmitted = power * t.value;
    intracavity_power(Measured::new(transmitted, cfg.power_fluctuation()? * transmitted), t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasureOutcome {
    pub power: Measured,
    pub k_injected: f64,
    pub band: SpringBand,
    pub reference: ConditionResult,
    pub laser_on: ConditionResult,
    pub spring: SpringEstimate,
}

impl MeasureOutcome {
    pub fn consistent(&self) -> bool {
        self.band.overlaps(self.spring.k_ext, self.spring.sigma_k)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        write_spring_rows(w, std::slice::from_ref(self))
    }

    pub fn write_summary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let f0 = self.reference.frequency;
        let fe = self.laser_on.frequency;
        writeln!(w, "intracavity power [W] = {:.4} +/- {:.4}", self.power.value, self.power.sigma)?;
        writeln!(w, "f0 [Hz]               = {:.6e} +/- {:.2e}", f0.value, f0.sigma)?;
        writeln!(w, "f_eff [Hz]            = {:.6e} +/- {:.2e}", fe.value, fe.sigma)?;
        writeln!(w, "k_ext [N/m]           = {:.6e} +/- {:.2e}", self.spring.k_ext, self.spring.sigma_k)?;
        writeln!(w, "k_injected [N/m]      = {:.6e}", self.k_injected)?;
        writeln!(w, "predicted band [N/m]  = [{:.4e}, {:.4e}]", self.band.lo, self.band.hi)?;
        writeln!(w, "verdict: {}", if self.consistent() { "consistent" } else { "INCONSISTENT" })
    }
}

fn write_spring_rows<W: Write>(mut w: W, rows: &[MeasureOutcome]) -> std::io::Result<()> {
    writeln!(
        w,
        "P_W,sigma_P_W,f0_Hz,sigma_f0_Hz,f_eff_Hz,sigma_f_eff_Hz,k_Npm,sigma_k_Npm,k_injected_Npm,band_lo_Npm,band_hi_Npm,consistent"
    )?;
    for m in rows {
        writeln!(
            w,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
            m.power.value,
            m.power.sigma,
            m.reference.frequency.value,
            m.reference.frequency.sigma,
            m.laser_on.frequency.value,
            m.laser_on.frequency.sigma,
            m.spring.k_ext,
            m.spring.sigma_k,
            m.k_injected,
            m.band.lo,
            m.band.hi,
            m.consistent()
        )?;
    }
    Ok(())
}

fn outcome(cfg: &ExperimentConfig, power: f64, reference: ConditionResult, laser_on: ConditionResult) -> Result<MeasureOutcome> {
    let p = cfg.pendulum()?;
    let spring = spring_uncertainty(p.inertia(), p.lever_arm(), reference.frequency, laser_on.frequency)
        .map_err(|e| e.in_stage("spring_uncertainty"))?;
    let measured = measured_power(cfg, power)?;
    let band = predicted_spring_band(cfg.upper_center_distance()?, measured)?;
    Ok(MeasureOutcome {
        power: measured,
        k_injected: laser_on.k_injected,
        band,
        reference,
        laser_on,
        spring,
    })
}

/// Laser-off and laser-on measurement at `power` (W; the configured power
/// when `None`).
pub fn measure(cfg: &ExperimentConfig, power: Option<f64>, seed: u64) -> Result<MeasureOutcome> {
    let power = match power {
        Some(p) => p,
        None => cfg.upper_cavity()?.intracavity_power(),
    };
    let k = injected_spring(cfg, power)?;
    let reference = measure_condition(cfg, 0.0, 0, seed).map_err(|e| e.in_stage("laser off"))?;
    let laser_on = measure_condition(cfg, k, 1, seed).map_err(|e| e.in_stage("laser on"))?;
    outcome(cfg, power, reference, laser_on)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    /// One per configured power, sharing the laser-off reference.
    pub measurements: Vec<MeasureOutcome>,
    pub report: SweepReport,
}

impl SweepOutcome {
    pub fn write_points_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        write_spring_rows(w, &self.measurements)
    }
}

/// Power sweep against one shared laser-off reference. Zero-power entries
/// reuse the reference, so their spring is zero by construction and their
/// sigma is that of two independent reference fits.
pub fn sweep(cfg: &ExperimentConfig, seed: u64) -> Result<SweepOutcome> {
    let powers = &cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config {
            section: "sweep".into(),
            key: String::new(),
            message: "section is required by this command".into(),
        })?
        .powers_w;
    if powers.len() < 2 || !powers.contains(&0.0) {
        return Err(Error::Config {
            section: "sweep".into(),
            key: "powers_w".into(),
            message: Error::InvalidSweep.to_string(),
        });
    }
    let reference = measure_condition(cfg, 0.0, 0, seed).map_err(|e| e.in_stage("laser off"))?;
    let mut measurements = Vec::with_capacity(powers.len());
    for (i, &power) in powers.iter().enumerate() {
        let m = if power == 0.0 {
            outcome(cfg, 0.0, reference.clone(), reference.clone())?
        } else {
            let k = injected_spring(cfg, power)?;
            let on = measure_condition(cfg, k, 1 + i as u64, seed).map_err(|e| e.in_stage(format!("P = {power} W")))?;
            outcome(cfg, power, reference.clone(), on)?
        };
        measurements.push(m);
    }
    let points: Vec<PowerPoint> = measurements
        .iter()
        .map(|m| PowerPoint {
            intracavity_power: m.power,
            spring: m.spring,
        })
        .collect();
    let report = power_sweep_analysis(&points, cfg.upper_center_distance()?)?;
    Ok(SweepOutcome { measurements, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn log_space_endpoints() {
        let f = log_space(1e-3, 100.0, 6).unwrap();
        assert_eq!(f[0], 1e-3);
        assert_eq!(f[5], 100.0);
        assert_relative_eq!(f[1], 1e-2, max_relative = 1e-12);
        assert!(log_space(1.0, 1.0, 5).is_err());
        assert!(log_space(1.0, 2.0, 1).is_err());
    }

    #[test]
    fn toy_profile_is_stable() {
        let cfg = ExperimentConfig::profile("toy-stable").unwrap();
        let r = stability(&cfg).unwrap();
        assert_eq!(r.summary(), "stable");
        assert_relative_eq!(r.matrix.k_x, 5.184994728e-5, max_relative = 1e-8);
        let cfg = ExperimentConfig::profile_with_overlay("toy-stable", "[cavity.upper]\npower_w = 0.0\n").unwrap();
        assert_eq!(stability(&cfg).unwrap().summary(), "unstable: x");
    }

    #[test]
    fn bode_rows() {
        let cfg = ExperimentConfig::profile("paper").unwrap();
        let f = bode(&cfg, BodeTarget::Filter, 1e-3, 100.0, 50).unwrap();
        assert_relative_eq!(f.points()[0].value.re, 1.0, epsilon = 1e-3);
        let h = bode(&cfg, BodeTarget::Effective, 0.03, 0.05, 2001).unwrap();
        let peak = h
            .points()
            .iter()
            .max_by(|a, b| a.value.norm().total_cmp(&b.value.norm()))
            .unwrap();
        assert!((peak.frequency - 0.040034).abs() < 2e-5, "{}", peak.frequency);
        assert!(bode(&cfg, BodeTarget::Filter, 1.0, 0.1, 5).is_err());
        assert!("nonsense".parse::<BodeTarget>().is_err());
    }

    #[test]
    fn midpoint_locates_flip() {
        let p = crate::mechanics::TorsionalPendulum::new(7.2e-6, 0.085, 0.04, 100.0).unwrap();
        let fr = FrequencyResponse::from_block(&LtiBlock::pendulum(&p, 0.0).unwrap(), &[0.02, 0.03, 0.0398, 0.05, 0.06]);
        let f = phase_midpoint(&fr).unwrap();
        assert!(f > 0.0398 && f < 0.05);
    }

    #[test]
    fn sweep_needs_zero_power() {
        let cfg = ExperimentConfig::profile_with_overlay("paper", "[sweep]\npowers_w = [29.7]\n").unwrap();
        assert!(sweep(&cfg, 0).unwrap_err().is_config());
        let cfg = ExperimentConfig::profile_with_overlay("paper", "[sweep]\npowers_w = [10.0, 29.7]\n").unwrap();
        assert!(matches!(sweep(&cfg, 0), Err(Error::Config { ref key, .. }) if key == "powers_w"));
    }

    #[test]
    fn measured_power_uncertainty() {
        let cfg = ExperimentConfig::profile("paper").unwrap();
        let p = measured_power(&cfg, 29.7).unwrap();
        assert_relative_eq!(p.value, 29.7, max_relative = 1e-12);
        assert!((p.sigma - 8.0).abs() < 0.05, "{}", p.sigma);
    }
}
