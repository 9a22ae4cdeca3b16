//! The pendulum control loop: block algebra, time-domain simulation and
//! swept-sine measurement of the open-loop transfer function.
//!
//! Signal flow (negative feedback):
//!
//! ```text
//!            r (reference)
//!            |
//!   s_a ---> (+) ---> s_b ---> A ---> (+) ---> H' ---> x ---> S ---> F ---> s_a
//!        (-1)                          ^ external force
//! ```
//!
//! so `s_b = r - s_a` and `s_a / s_b = H' S F A = G` whatever the reference.

use std::f64::consts::TAU;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{non_negative, positive, Error, Result};
use crate::estimation::{FrequencyResponse, ResponsePoint};
use crate::lti::{BlockLabel, CompanionRealization, LtiBlock};
use crate::mechanics::TorsionalPendulum;
use crate::seed::derive_seed;

/// Largest filter order the integrator accepts.
pub const MAX_FILTER_ORDER: usize = 8;
/// Minimum SNR of the injection bin for a confident estimate.
pub const SNR_THRESHOLD: f64 = 3.0;
/// Minimum number of whole injection cycles for demodulation.
pub const MIN_CYCLES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeedbackSign {
    #[default]
    Negative,
    Positive,
}

impl FeedbackSign {
    fn factor(self) -> f64 {
        match self {
            FeedbackSign::Negative => 1.0,
            FeedbackSign::Positive => -1.0,
        }
    }
}

/// Sinusoidal reference added at the actuator input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Injection {
    /// Volts.
    pub amplitude: f64,
    /// Hz.
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    pendulum: TorsionalPendulum,
    k_ext: f64,
    plant: LtiBlock,
    sensor_gain: f64,
    filter: LtiBlock,
    filter_ss: CompanionRealization,
    actuator_gain: f64,
    pub sign: FeedbackSign,
    pub control_enabled: bool,
    pub injection: Option<Injection>,
}

impl LoopConfig {
    /// `sensor_gain` in V/m, `actuator_gain` in N/V.
    pub fn new(
        pendulum: TorsionalPendulum,
        k_ext: f64,
        sensor_gain: f64,
        filter: LtiBlock,
        actuator_gain: f64,
    ) -> Result<Self> {
        for (name, g) in [
            ("sensor_gain", sensor_gain),
            ("actuator_gain", actuator_gain),
            ("filter gain", filter.gain),
        ] {
            if !g.is_finite() || g == 0.0 {
                return Err(Error::InvalidParameter {
                    name,
                    value: g,
                    reason: "loop gains must be finite and nonzero",
                });
            }
        }
        let plant = LtiBlock::pendulum(&pendulum, k_ext)?;
        let filter_ss = filter.state_space().ok_or(Error::InvalidParameter {
            name: "filter",
            value: filter.zeros().len() as f64,
            reason: "filter has more zeros than poles",
        })?;
        if filter_ss.order() > MAX_FILTER_ORDER {
            return Err(Error::InvalidParameter {
                name: "filter order",
                value: filter_ss.order() as f64,
                reason: "filter order exceeds the integrator limit",
            });
        }
        Ok(Self {
            pendulum,
            k_ext,
            plant,
            sensor_gain,
            filter,
            filter_ss,
            actuator_gain,
            sign: FeedbackSign::Negative,
            control_enabled: true,
            injection: None,
        })
    }

    pub fn with_injection(mut self, injection: Option<Injection>) -> Self {
        self.injection = injection;
        self
    }

    pub fn with_control(mut self, enabled: bool) -> Self {
        self.control_enabled = enabled;
        self
    }

    pub fn with_sign(mut self, sign: FeedbackSign) -> Self {
        self.sign = sign;
        self
    }

    /// Same loop with a different optical spring.
    pub fn with_spring(&self, k_ext: f64) -> Result<Self> {
        Ok(Self {
            plant: LtiBlock::pendulum(&self.pendulum, k_ext)?,
            k_ext,
            ..self.clone()
        })
    }

    pub fn pendulum(&self) -> &TorsionalPendulum {
        &self.pendulum
    }

    pub fn k_ext(&self) -> f64 {
        self.k_ext
    }

    pub fn plant(&self) -> &LtiBlock {
        &self.plant
    }

    pub fn filter(&self) -> &LtiBlock {
        &self.filter
    }

    pub fn sensor_gain(&self) -> f64 {
        self.sensor_gain
    }

    pub fn actuator_gain(&self) -> f64 {
        self.actuator_gain
    }

    pub fn sensor(&self) -> LtiBlock {
        LtiBlock::constant(BlockLabel::Sensor, self.sensor_gain)
    }

    pub fn actuator(&self) -> LtiBlock {
        LtiBlock::constant(BlockLabel::Actuator, self.actuator_gain)
    }

    /// Highest characteristic frequency (Hz) the integrator must resolve.
    pub fn max_corner(&self) -> f64 {
        let mut max = self.plant.max_corner().unwrap_or(0.0);
        if let Some(c) = self.filter.max_corner() {
            max = max.max(c);
        }
        if let Some(inj) = self.injection {
            max = max.max(inj.frequency);
        }
        max
    }
}

/// `G = H' S F A`.
pub fn open_loop(lp: &LoopConfig, omega: f64) -> Complex64 {
    lp.plant.eval(omega) * lp.sensor_gain * lp.filter.eval(omega) * lp.actuator_gain
}

/// Disturbance suppression `1 / (1 + G)` of the closed loop.
pub fn closed_loop_suppression(lp: &LoopConfig, omega: f64) -> Result<Complex64> {
    if !lp.control_enabled {
        return Ok(Complex64::new(1.0, 0.0));
    }
    let denom = 1.0 + lp.sign.factor() * open_loop(lp, omega);
    if denom.norm() < 1e-12 {
        return Err(Error::MarginalLoop {
            omega,
            distance: denom.norm(),
        });
    }
    Ok(1.0 / denom)
}

/// Deterministic sinusoidal force at the beam spot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SineForce {
    /// Newtons.
    pub amplitude: f64,
    /// Hz.
    pub frequency: f64,
    /// Radians.
    pub phase: f64,
}

impl SineForce {
    fn at(&self, t: f64) -> f64 {
        self.amplitude * (TAU * self.frequency * t + self.phase).sin()
    }
}

/// White force noise plus an optional seismic line.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseSpec {
    /// One-sided amplitude spectral density, N/sqrt(Hz).
    pub force_asd: f64,
    /// Seismic line (amplitude N, frequency Hz); its phase is drawn from the seed.
    pub seismic: Option<(f64, f64)>,
}

impl NoiseSpec {
    pub fn is_silent(&self) -> bool {
        self.force_asd == 0.0 && self.seismic.is_none_or(|(a, _)| a == 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationSpec {
    /// Seconds.
    pub duration: f64,
    /// Step in seconds; defaults to `1 / (100 * max corner)`.
    pub dt: Option<f64>,
    /// Samples before this time are integrated but not recorded.
    pub record_from: f64,
    pub initial_displacement: f64,
    pub initial_velocity: f64,
    pub seed: u64,
}

impl SimulationSpec {
    pub fn new(duration: f64) -> Self {
        Self {
            duration,
            dt: None,
            record_from: 0.0,
            initial_displacement: 0.0,
            initial_velocity: 0.0,
            seed: 0,
        }
    }
}

/// Uniformly sampled loop signals. `v` is the beam-spot velocity, kept for
/// energy diagnostics and not exported.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub sample_rate: f64,
    pub t0: f64,
    pub s_a: Vec<f64>,
    pub s_b: Vec<f64>,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

impl TimeSeries {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 / self.sample_rate
    }

    /// CSV with header `t_s,s_a_V,s_b_V,x_m`, 17 significant digits.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t_s,s_a_V,s_b_V,x_m")?;
        for i in 0..self.len() {
            writeln!(
                w,
                "{:.16e},{:.16e},{:.16e},{:.16e}",
                self.time(i),
                self.s_a[i],
                self.s_b[i],
                self.x[i]
            )?;
        }
        Ok(())
    }
}

/// The closed loop as `dy/dt = M y + b_ref r + b_force f`, with state
/// `[x, v, q_0 .. q_m-1]` (filter companion states) and readouts
/// `s_a = c_a . y`, `s_b = r + g s_a`.
struct Linear<const N: usize> {
    m: [[f64; N]; N],
    b_ref: [f64; N],
    b_force: [f64; N],
    c_a: [f64; N],
    g: f64,
}

impl<const N: usize> Linear<N> {
    fn new(lp: &LoopConfig, omega_sq: f64) -> Self {
        let ss = &lp.filter_ss;
        let order = ss.order();
        debug_assert_eq!(N, 2 + order);
        let arm = lp.pendulum.arm_ratio();
        let s = lp.sensor_gain;
        let g = if lp.control_enabled { -lp.sign.factor() } else { 0.0 };

        let mut c_a = [0.0; N];
        c_a[0] = ss.d * s;
        c_a[2..].copy_from_slice(&ss.c);

        let mut m = [[0.0; N]; N];
        m[0][1] = 1.0;
        let feedback = arm * lp.actuator_gain * g;
        for j in 0..N {
            m[1][j] = feedback * c_a[j];
        }
        m[1][0] -= omega_sq;
        m[1][1] -= omega_sq.sqrt() / lp.pendulum.quality_factor();
        for k in 0..order {
            let row = 2 + k;
            if k + 1 < order {
                m[row][row + 1] = 1.0;
            } else {
                m[row][0] += s;
                for (j, a) in ss.a.iter().enumerate() {
                    m[row][2 + j] -= a;
                }
            }
        }
        let mut b_ref = [0.0; N];
        b_ref[1] = arm * lp.actuator_gain;
        let mut b_force = [0.0; N];
        b_force[1] = arm;
        Self { m, b_ref, b_force, c_a, g }
    }

    #[inline(always)]
    fn derivative(&self, y: &[f64; N], reference: f64, force: f64) -> [f64; N] {
        let mut dy = [0.0; N];
        for i in 0..N {
            let mut acc = self.b_ref[i] * reference + self.b_force[i] * force;
            for j in 0..N {
                acc += self.m[i][j] * y[j];
            }
            dy[i] = acc;
        }
        dy
    }

    fn signals(&self, y: &[f64; N], reference: f64) -> (f64, f64) {
        let s_a: f64 = self.c_a.iter().zip(y).map(|(c, v)| c * v).sum();
        (s_a, reference + self.g * s_a)
    }
}

struct Run<'a> {
    lp: &'a LoopConfig,
    omega_sq: f64,
    dt: f64,
    steps: usize,
    first: usize,
    drive: &'a [SineForce],
    seismic: Option<SineForce>,
    white: Option<Normal<f64>>,
    rng: ChaCha8Rng,
    initial: (f64, f64),
}

impl Run<'_> {
    fn external(&self, t: f64, noise: f64) -> f64 {
        let mut force = noise;
        for d in self.drive {
            force += d.at(t);
        }
        if let Some(s) = &self.seismic {
            force += s.at(t);
        }
        force
    }

    fn integrate<const N: usize>(mut self) -> Result<TimeSeries> {
        let plant = Linear::<N>::new(self.lp, self.omega_sq);
        let (dt, steps, first) = (self.dt, self.steps, self.first);
        let capacity = (steps + 1).saturating_sub(first);
        let mut ts = TimeSeries {
            sample_rate: 1.0 / dt,
            t0: first as f64 * dt,
            s_a: Vec::with_capacity(capacity),
            s_b: Vec::with_capacity(capacity),
            x: Vec::with_capacity(capacity),
            v: Vec::with_capacity(capacity),
        };
        let mut y = [0.0; N];
        y[0] = self.initial.0;
        y[1] = self.initial.1;
        let forced = !self.drive.is_empty() || self.seismic.is_some();
        let mut reference = HalfStepSine::new(self.lp.injection, dt);
        for step in 0..=steps {
            let t = step as f64 * dt;
            let (r0, r_half, r1) = reference.step(step);
            if step >= first {
                let (s_a, s_b) = plant.signals(&y, r0);
                ts.s_a.push(s_a);
                ts.s_b.push(s_b);
                ts.x.push(y[0]);
                ts.v.push(y[1]);
            }
            if step == steps {
                break;
            }
            let w = match &self.white {
                Some(d) => d.sample(&mut self.rng),
                None => 0.0,
            };
            let (f0, f_half, f1) = if forced {
                (self.external(t, w), self.external(t + 0.5 * dt, w), self.external(t + dt, w))
            } else {
                (w, w, w)
            };

            let k1 = plant.derivative(&y, r0, f0);
            let k2 = plant.derivative(&std::array::from_fn(|i| y[i] + 0.5 * dt * k1[i]), r_half, f_half);
            let k3 = plant.derivative(&std::array::from_fn(|i| y[i] + 0.5 * dt * k2[i]), r_half, f_half);
            let k4 = plant.derivative(&std::array::from_fn(|i| y[i] + dt * k3[i]), r1, f1);
            for i in 0..N {
                y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            if !(y[0].is_finite() && y[1].is_finite()) {
                return Err(Error::Divergence { time: t + dt });
            }
        }
        Ok(ts)
    }
}

/// Injection reference on the half-step grid `t = m dt / 2`, by phasor
/// rotation with a periodic exact resync.
struct HalfStepSine {
    amplitude: f64,
    omega_half: f64,
    rot: Complex64,
    z: Complex64,
}

impl HalfStepSine {
    const RESYNC: usize = 512;

    fn new(injection: Option<Injection>, dt: f64) -> Self {
        let (amplitude, frequency) = injection.map_or((0.0, 0.0), |i| (i.amplitude, i.frequency));
        let omega_half = TAU * frequency * 0.5 * dt;
        Self {
            amplitude,
            omega_half,
            rot: Complex64::from_polar(1.0, omega_half),
            z: Complex64::new(1.0, 0.0),
        }
    }

    /// Reference at `t`, `t + dt/2` and `t + dt` for step index `step`.
    fn step(&mut self, step: usize) -> (f64, f64, f64) {
        if self.amplitude == 0.0 {
            return (0.0, 0.0, 0.0);
        }
        if step.is_multiple_of(Self::RESYNC) {
            self.z = Complex64::from_polar(1.0, self.omega_half * (2 * step) as f64);
        }
        let z0 = self.z;
        let z_half = z0 * self.rot;
        self.z = z_half * self.rot;
        (self.amplitude * z0.im, self.amplitude * z_half.im, self.amplitude * self.z.im)
    }
}

/// Fixed-step RK4 integration of the loop.
///
/// The step must stay below `1 / (20 * max corner)`; white noise is held
/// constant over each step with variance `asd^2 / (2 dt)`.
pub fn integrate_dynamics(
    lp: &LoopConfig,
    drive: &[SineForce],
    noise: &NoiseSpec,
    spec: &SimulationSpec,
) -> Result<TimeSeries> {
    positive("duration", spec.duration)?;
    non_negative("force_asd", noise.force_asd)?;
    let mut max_corner = lp.max_corner();
    for d in drive {
        max_corner = max_corner.max(d.frequency);
    }
    if let Some((_, f)) = noise.seismic {
        max_corner = max_corner.max(f);
    }
    let max_dt = 1.0 / (20.0 * max_corner);
    let dt = spec.dt.unwrap_or(1.0 / (100.0 * max_corner));
    positive("dt", dt)?;
    if dt >= max_dt {
        return Err(Error::StepTooLarge { dt, max_dt });
    }
    let steps = (spec.duration / dt).round() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let seismic = noise.seismic.map(|(amplitude, frequency)| SineForce {
        amplitude,
        frequency,
        phase: rand::Rng::gen_range(&mut rng, 0.0..TAU),
    });
    let white = if noise.force_asd > 0.0 {
        Some(Normal::new(0.0, noise.force_asd / (2.0 * dt).sqrt()).expect("finite sigma"))
    } else {
        None
    };

    let omega_sq = lp.pendulum.effective_omega_sq(lp.k_ext)?;
    let run = Run {
        lp,
        omega_sq,
        dt,
        steps,
        first: (spec.record_from / dt).ceil().max(0.0) as usize,
        drive,
        seismic,
        white,
        rng,
        initial: (spec.initial_displacement, spec.initial_velocity),
    };
    match lp.filter_ss.order() {
        0 => run.integrate::<2>(),
        1 => run.integrate::<3>(),
        2 => run.integrate::<4>(),
        3 => run.integrate::<5>(),
        4 => run.integrate::<6>(),
        5 => run.integrate::<7>(),
        6 => run.integrate::<8>(),
        7 => run.integrate::<9>(),
        8 => run.integrate::<10>(),
        _ => unreachable!("filter order is bounded at construction"),
    }
}

/// Fourier component of one channel over `n` samples at `bin` cycles per
/// window.
fn demodulate(signal: &[f64], n: usize, bin: f64) -> Complex64 {
    const RESYNC: usize = 256;
    let omega = TAU * bin / n as f64;
    let step = Complex64::from_polar(1.0, -omega);
    let mut phasor = Complex64::new(1.0, 0.0);
    let mut acc = Complex64::new(0.0, 0.0);
    for (i, &s) in signal[..n].iter().enumerate() {
        if i % RESYNC == 0 {
            phasor = Complex64::from_polar(1.0, -omega * i as f64);
        }
        acc += phasor * s;
        phasor *= step;
    }
    acc
}

/// Injection-bin component and its SNR against the RMS of the two bins on
/// either side. With a whole number of cycles in the window the injected
/// tone has no leakage into those bins, so they see only noise.
fn tone_and_snr(signal: &[f64], n: usize, bin: f64) -> (Complex64, f64) {
    let x = demodulate(signal, n, bin);
    let side: Vec<f64> = [-2.0, -1.0, 1.0, 2.0]
        .iter()
        .map(|d| bin + d)
        .filter(|&b| b >= 1.0)
        .map(|b| demodulate(signal, n, b).norm_sqr())
        .collect();
    let floor = (side.iter().sum::<f64>() / side.len() as f64).sqrt();
    let snr = if floor > 0.0 {
        x.norm() / floor
    } else if x.norm() > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    (x, snr)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OltfEstimate {
    pub value: Complex64,
    /// Smaller of the two channel SNRs against the neighbouring bins.
    pub snr: f64,
    pub confident: bool,
}

/// `s_a / s_b` at `f_inj` from a rectangular window spanning the largest
/// whole number of injection cycles in the record.
pub fn estimate_oltf(ts: &TimeSeries, f_inj: f64) -> Result<OltfEstimate> {
    positive("f_inj", f_inj)?;
    if f_inj >= ts.sample_rate / 2.0 {
        return Err(Error::InvalidParameter {
            name: "f_inj",
            value: f_inj,
            reason: "injection frequency not resolvable at this sample rate",
        });
    }
    let cycles = ts.len() as f64 * f_inj / ts.sample_rate;
    let whole = (cycles + 1e-9).floor();
    if whole < MIN_CYCLES as f64 {
        return Err(Error::InsufficientCycles {
            cycles,
            required: MIN_CYCLES,
        });
    }
    let n = ((whole * ts.sample_rate / f_inj).round() as usize).min(ts.len());
    let (a, snr_a) = tone_and_snr(&ts.s_a, n, whole);
    let (b, snr_b) = tone_and_snr(&ts.s_b, n, whole);
    let snr = snr_a.min(snr_b);
    let value = if b.norm() > 0.0 {
        a / b
    } else {
        Complex64::new(f64::NAN, f64::NAN)
    };
    Ok(OltfEstimate {
        value,
        snr,
        confident: snr >= SNR_THRESHOLD && value.is_finite(),
    })
}

/// How each swept-sine point is simulated and read out.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementPlan {
    /// Volts.
    pub injection_amplitude: f64,
    /// Whole injection cycles inside the demodulation window.
    pub cycles: usize,
    /// Minimum settling time before the window opens, seconds.
    pub settle: f64,
    /// Upper bound on the step; each point rounds it down so that a cycle is
    /// an integer number of samples.
    pub max_dt: Option<f64>,
    pub drive: Vec<SineForce>,
    pub noise: NoiseSpec,
    /// Gaussian readout phase noise applied to each estimate, degrees.
    pub phase_noise_deg: f64,
    pub seed: u64,
}

impl Default for MeasurementPlan {
    fn default() -> Self {
        Self {
            injection_amplitude: 5e-3,
            cycles: MIN_CYCLES,
            settle: 60.0,
            max_dt: None,
            drive: Vec::new(),
            noise: NoiseSpec::default(),
            phase_noise_deg: 0.0,
            seed: 0,
        }
    }
}

/// Simulates one injection frequency and returns its record.
pub fn simulate_point(lp: &LoopConfig, f_inj: f64, plan: &MeasurementPlan, seed: u64) -> Result<TimeSeries> {
    positive("frequency", f_inj)?;
    let lp = lp.clone().with_injection(Some(Injection {
        amplitude: plan.injection_amplitude,
        frequency: f_inj,
    }));
    let mut corner = lp.max_corner();
    for d in &plan.drive {
        corner = corner.max(d.frequency);
    }
    if let Some((_, f)) = plan.noise.seismic {
        corner = corner.max(f);
    }
    let dt_bound = plan.max_dt.unwrap_or(1.0 / (100.0 * corner));
    let per_cycle = (1.0 / (f_inj * dt_bound)).ceil();
    let dt = 1.0 / (f_inj * per_cycle);
    let settle_cycles = (plan.settle * f_inj).ceil();
    let spec = SimulationSpec {
        duration: (settle_cycles + plan.cycles as f64) / f_inj,
        dt: Some(dt),
        record_from: settle_cycles / f_inj,
        seed,
        ..SimulationSpec::new(1.0)
    };
    integrate_dynamics(&lp, &plan.drive, &plan.noise, &spec)
}

/// Swept-sine measurement of the open-loop transfer function.
///
/// Points run independently (in parallel) with seeds derived from the plan
/// seed and the point index, so repeated frequencies give independent
/// measurements while the whole sweep stays reproducible. A point whose
/// simulation fails is kept with a NaN value and no confidence.
pub fn measure_sweep(lp: &LoopConfig, frequencies: &[f64], plan: &MeasurementPlan) -> Result<FrequencyResponse> {
    non_negative("phase_noise_deg", plan.phase_noise_deg)?;
    let points: Vec<ResponsePoint> = frequencies
        .par_iter()
        .enumerate()
        .map(|(i, &f)| {
            let seed = derive_seed(plan.seed, &[i as u64]);
            let estimate = simulate_point(lp, f, plan, seed).and_then(|ts| estimate_oltf(&ts, f));
            match estimate {
                Ok(mut est) => {
                    if plan.phase_noise_deg > 0.0 {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        rng.set_stream(1);
                        let phase = Normal::new(0.0, plan.phase_noise_deg.to_radians())
                            .expect("finite sigma")
                            .sample(&mut rng);
                        est.value *= Complex64::from_polar(1.0, phase);
                    }
                    ResponsePoint {
                        frequency: f,
                        value: est.value,
                        snr: est.snr,
                        confident: est.confident,
                    }
                }
                Err(_) => ResponsePoint {
                    frequency: f,
                    value: Complex64::new(f64::NAN, f64::NAN),
                    snr: 0.0,
                    confident: false,
                },
            }
        })
        .collect();
    Ok(FrequencyResponse::new(points))
}
