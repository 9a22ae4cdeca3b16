//! Experiment configuration: sectioned TOML, SI units, unknown keys rejected.
//!
//! Sections are optional at parse time; each command asks for the ones it
//! needs and gets a [`Error::Config`] naming the missing section or the
//! offending key otherwise. Every section that is present is validated when
//! the file is loaded.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::{FeedbackSign, LoopConfig, MeasurementPlan, NoiseSpec, MIN_CYCLES};
use crate::lti::LtiBlock;
use crate::mechanics::TorsionalPendulum;
use crate::optics::{Cavity, Mirror, Orientation, SandwichConfig};
use crate::{Measured, STANDARD_GRAVITY};

const PAPER: &str = include_str!("../profiles/paper.toml");
const TOY_STABLE: &str = include_str!("../profiles/toy-stable.toml");

/// Names accepted by [`ExperimentConfig::profile`].
pub const PROFILES: [&str; 2] = ["paper", "toy-stable"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrientationKey {
    Upper,
    Lower,
}

impl From<OrientationKey> for Orientation {
    fn from(o: OrientationKey) -> Self {
        match o {
            OrientationKey::Upper => Orientation::Upper,
            OrientationKey::Lower => Orientation::Lower,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CavitySection {
    pub length_m: f64,
    pub fixed_curvature_m: f64,
    pub levitated_curvature_m: f64,
    pub finesse: f64,
    pub power_w: f64,
    #[serde(default = "default_transmissivity")]
    pub transmissivity: f64,
    #[serde(default)]
    pub sigma_transmissivity: f64,
    /// Defaults to the slot the section sits in.
    #[serde(default)]
    pub orientation: Option<OrientationKey>,
    #[serde(default)]
    pub sigma_center_distance_m: f64,
    #[serde(default)]
    pub power_fluctuation_rel: f64,
}

fn default_transmissivity() -> f64 {
    5e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cavities {
    pub upper: Option<CavitySection>,
    pub lower: Option<CavitySection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SandwichSection {
    pub mass_kg: f64,
    pub mirror_curvature_m: f64,
    #[serde(default = "default_gravity")]
    pub gravity_mps2: f64,
    pub k_opt_upper_npm: f64,
    pub k_opt_lower_npm: f64,
}

fn default_gravity() -> f64 {
    STANDARD_GRAVITY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendulumSection {
    pub inertia_kgm2: f64,
    pub lever_arm_m: f64,
    pub f0_hz: f64,
    pub q: f64,
    #[serde(default)]
    pub mass_kg: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SignKey {
    #[default]
    Negative,
    Positive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopSection {
    pub sensor_gain_vpm: f64,
    pub actuator_gain_npv: f64,
    pub filter_gain: f64,
    #[serde(default)]
    pub feedback_sign: SignKey,
    #[serde(default = "default_injection")]
    pub injection_amplitude_v: f64,
    #[serde(default = "default_f_min")]
    pub f_min_hz: f64,
    #[serde(default = "default_f_max")]
    pub f_max_hz: f64,
    #[serde(default = "default_n_points")]
    pub n_points: usize,
    /// Explicit injection frequencies; replaces the `f_min..f_max` grid.
    #[serde(default)]
    pub frequencies_hz: Option<Vec<f64>>,
    #[serde(default = "default_refine_stages")]
    pub refine_stages: usize,
    #[serde(default = "default_refine_points")]
    pub refine_points: usize,
    #[serde(default = "default_cycles")]
    pub cycles: usize,
    #[serde(default = "default_settle")]
    pub settle_s: f64,
    /// One-sided force noise, N/sqrt(Hz).
    #[serde(default)]
    pub force_noise_asd: f64,
    #[serde(default)]
    pub seismic_amplitude_n: f64,
    #[serde(default)]
    pub seismic_freq_hz: f64,
    #[serde(default)]
    pub phase_noise_deg: f64,
}

fn default_injection() -> f64 {
    5e-3
}
fn default_f_min() -> f64 {
    0.02
}
fn default_f_max() -> f64 {
    0.08
}
fn default_n_points() -> usize {
    10
}
fn default_refine_stages() -> usize {
    3
}
fn default_refine_points() -> usize {
    7
}
fn default_cycles() -> usize {
    MIN_CYCLES
}
fn default_settle() -> f64 {
    60.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    /// Upper bound on the integration step; default is 1/(100 f_corner).
    #[serde(default)]
    pub dt_s: Option<f64>,
    /// Overrides the settling time of the loop section.
    #[serde(default)]
    pub duration_s: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub powers_w: Vec<f64>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
}

fn default_repeats() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub cavity: Option<Cavities>,
    pub sandwich: Option<SandwichSection>,
    pub pendulum: Option<PendulumSection>,
    #[serde(rename = "loop")]
    pub loop_: Option<LoopSection>,
    pub simulation: Option<SimulationSection>,
    pub sweep: Option<SweepSection>,
}

fn config_err(section: &str, key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        section: section.to_string(),
        key: key.to_string(),
        message: message.into(),
    }
}

fn missing(section: &str) -> Error {
    config_err(section, "", "section is required by this command")
}

/// Maps a domain validation error onto the config key that caused it.
fn locate(section: &str, keys: &[(&str, &str)], e: Error) -> Error {
    match e {
        Error::InvalidParameter { name, value, reason } => {
            let key = keys.iter().find(|(n, _)| *n == name).map_or(name, |(_, k)| k);
            config_err(section, key, format!("{value}: {reason}"))
        }
        Error::Config { .. } => e,
        other => config_err(section, "", other.to_string()),
    }
}

fn check(cond: bool, section: &str, key: &str, message: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(config_err(section, key, message))
    }
}

/// The innermost `[table]` header opened before byte `pos`.
fn enclosing_table(text: &str, pos: usize) -> String {
    text[..pos.min(text.len())]
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('[') && !l.starts_with("[["))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_string())
        .unwrap_or_default()
}

fn toml_error(text: &str) -> impl Fn(toml::de::Error) -> Error + '_ {
    move |e| match (toml_parse_error(&e), e.span()) {
        (Error::Config { section, key, message }, Some(span)) if section.is_empty() && !key.is_empty() => {
            Error::Config { section: enclosing_table(text, span.start), key, message }
        }
        (err, _) => err,
    }
}

fn toml_parse_error(e: &toml::de::Error) -> Error {
    let msg = e.message().trim().to_string();
    let key = msg
        .split('`')
        .nth(1)
        .filter(|_| msg.starts_with("unknown field"))
        .unwrap_or("")
        .to_string();
    // serde appends "in `section`" for nested tables
    let (message, section) = match msg.rsplit_once("\nin `") {
        Some((head, tail)) => (head.to_string(), tail.trim_end_matches('`').to_string()),
        None => (msg.clone(), String::new()),
    };
    let message = match e.span() {
        Some(span) if section.is_empty() && key.is_empty() => format!("{message} (byte {})", span.start),
        _ => message,
    };
    Error::Config { section, key, message }
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(toml_error(text))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A built-in parameter set by name, see [`PROFILES`].
    pub fn profile(name: &str) -> Result<Self> {
        Self::from_toml_str(profile_text(name)?)
    }

    /// A built-in profile with the keys of `overlay` replacing its own.
    pub fn profile_with_overlay(name: &str, overlay: &str) -> Result<Self> {
        let base_text = profile_text(name)?;
        let mut base: toml::Value = toml::from_str(base_text).map_err(toml_error(base_text))?;
        let over: toml::Value = toml::from_str(overlay).map_err(toml_error(overlay))?;
        merge(&mut base, over);
        let merged = toml::to_string(&base).map_err(|e| Error::Config {
            section: String::new(),
            key: String::new(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&merged)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Builds every present section into its domain object.
    pub fn validate(&self) -> Result<()> {
        if let Some(c) = &self.cavity {
            if let Some(u) = &c.upper {
                build_cavity(u, "cavity.upper", Orientation::Upper)?;
            }
            if let Some(l) = &c.lower {
                build_cavity(l, "cavity.lower", Orientation::Lower)?;
            }
        }
        if self.sandwich.is_some() {
            self.sandwich()?;
        }
        if self.pendulum.is_some() {
            self.pendulum()?;
        }
        if self.loop_.is_some() {
            self.loop_section()?;
            if self.pendulum.is_some() {
                self.loop_config(0.0)?;
            }
        }
        if let Some(sim) = &self.simulation {
            if let Some(dt) = sim.dt_s {
                check(dt.is_finite() && dt > 0.0, "simulation", "dt_s", "must be positive")?;
            }
            if let Some(d) = sim.duration_s {
                check(d.is_finite() && d >= 0.0, "simulation", "duration_s", "must be non-negative")?;
            }
        }
        if let Some(s) = &self.sweep {
            check(s.repeats >= 1, "sweep", "repeats", "must be at least 1")?;
            for &p in &s.powers_w {
                check(p.is_finite() && p >= 0.0, "sweep", "powers_w", "powers must be finite and non-negative")?;
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.simulation.as_ref().map_or(0, |s| s.seed)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.simulation.get_or_insert_with(SimulationSection::default).seed = seed;
    }

    pub fn repeats(&self) -> usize {
        self.sweep.as_ref().map_or(1, |s| s.repeats)
    }

    fn upper_section(&self) -> Result<&CavitySection> {
        self.cavity
            .as_ref()
            .and_then(|c| c.upper.as_ref())
            .ok_or_else(|| missing("cavity.upper"))
    }

    /// The upper cavity, which sets the horizontal spring on the pendulum.
    pub fn upper_cavity(&self) -> Result<Cavity> {
        build_cavity(self.upper_section()?, "cavity.upper", Orientation::Upper)
    }

    /// Center distance of the upper cavity with its stated uncertainty.
    pub fn upper_center_distance(&self) -> Result<Measured> {
        let cav = self.upper_cavity()?;
        let a = cav.center_distance().map_err(|e| locate("cavity.upper", &[], e))?;
        Ok(Measured::new(a.distance, self.upper_section()?.sigma_center_distance_m))
    }

    pub fn transmissivity(&self) -> Result<Measured> {
        let u = self.upper_section()?;
        Ok(Measured::new(u.transmissivity, u.sigma_transmissivity))
    }

    pub fn power_fluctuation(&self) -> Result<f64> {
        Ok(self.upper_section()?.power_fluctuation_rel)
    }

    pub fn sandwich(&self) -> Result<SandwichConfig> {
        let s = self.sandwich.as_ref().ok_or_else(|| missing("sandwich"))?;
        let cav = self.cavity.as_ref().ok_or_else(|| missing("cavity"))?;
        let upper = cav.upper.as_ref().ok_or_else(|| missing("cavity.upper"))?;
        let lower = cav.lower.as_ref().ok_or_else(|| missing("cavity.lower"))?;
        let upper = build_cavity(upper, "cavity.upper", Orientation::Upper)?;
        let lower = build_cavity(lower, "cavity.lower", Orientation::Lower)?;
        let keys = [
            ("mirror_mass", "mass_kg"),
            ("mirror_curvature", "mirror_curvature_m"),
            ("orientation", "orientation"),
            ("gravity", "gravity_mps2"),
        ];
        SandwichConfig::new(upper, lower, s.mass_kg, s.mirror_curvature_m, s.k_opt_upper_npm, s.k_opt_lower_npm)
            .and_then(|c| c.with_gravity(s.gravity_mps2))
            .map_err(|e| locate("sandwich", &keys, e))
    }

    pub fn pendulum(&self) -> Result<TorsionalPendulum> {
        let p = self.pendulum.as_ref().ok_or_else(|| missing("pendulum"))?;
        let keys = [
            ("inertia", "inertia_kgm2"),
            ("lever_arm", "lever_arm_m"),
            ("natural_frequency", "f0_hz"),
            ("quality_factor", "q"),
            ("mass", "mass_kg"),
        ];
        let pend = TorsionalPendulum::new(p.inertia_kgm2, p.lever_arm_m, p.f0_hz, p.q)
            .map_err(|e| locate("pendulum", &keys, e))?;
        match p.mass_kg {
            Some(m) => pend.with_mass(m).map_err(|e| locate("pendulum", &keys, e)),
            None => Ok(pend),
        }
    }

    pub fn loop_section(&self) -> Result<&LoopSection> {
        let l = self.loop_.as_ref().ok_or_else(|| missing("loop"))?;
        check(l.injection_amplitude_v.is_finite() && l.injection_amplitude_v >= 0.0, "loop", "injection_amplitude_v", "must be non-negative")?;
        check(l.f_min_hz > 0.0 && l.f_min_hz < l.f_max_hz && l.f_max_hz.is_finite(), "loop", "f_min_hz", "need 0 < f_min_hz < f_max_hz")?;
        check(l.n_points >= 2, "loop", "n_points", "need at least 2 points")?;
        if let Some(fs) = &l.frequencies_hz {
            check(fs.len() >= 2 && fs.iter().all(|f| f.is_finite() && *f > 0.0), "loop", "frequencies_hz", "need at least 2 positive frequencies")?;
        }
        check(l.refine_stages == 0 || l.refine_points >= 3, "loop", "refine_points", "need at least 3 points per refinement stage")?;
        check(l.cycles >= MIN_CYCLES, "loop", "cycles", "at least 5 cycles are needed for the readout")?;
        check(l.settle_s.is_finite() && l.settle_s >= 0.0, "loop", "settle_s", "must be non-negative")?;
        check(l.force_noise_asd.is_finite() && l.force_noise_asd >= 0.0, "loop", "force_noise_asd", "must be non-negative")?;
        check(l.seismic_amplitude_n.is_finite(), "loop", "seismic_amplitude_n", "must be finite")?;
        check(l.seismic_amplitude_n == 0.0 || l.seismic_freq_hz > 0.0, "loop", "seismic_freq_hz", "must be positive when a seismic amplitude is set")?;
        check(l.phase_noise_deg.is_finite() && l.phase_noise_deg >= 0.0, "loop", "phase_noise_deg", "must be non-negative")?;
        Ok(l)
    }

    /// The feedback loop around the pendulum with an added spring `k_ext`.
    pub fn loop_config(&self, k_ext: f64) -> Result<LoopConfig> {
        let l = self.loop_section()?;
        let keys = [
            ("sensor_gain", "sensor_gain_vpm"),
            ("actuator_gain", "actuator_gain_npv"),
            ("filter gain", "filter_gain"),
        ];
        let lp = LoopConfig::new(
            self.pendulum()?,
            k_ext,
            l.sensor_gain_vpm,
            LtiBlock::loop_filter(l.filter_gain),
            l.actuator_gain_npv,
        )
        .map_err(|e| locate("loop", &keys, e))?;
        Ok(lp.with_sign(match l.feedback_sign {
            SignKey::Negative => FeedbackSign::Negative,
            SignKey::Positive => FeedbackSign::Positive,
        }))
    }

    /// Coarse injection grid: explicit list, or `n_points` spaced linearly.
    pub fn coarse_frequencies(&self) -> Result<Vec<f64>> {
        let l = self.loop_section()?;
        if let Some(fs) = &l.frequencies_hz {
            return Ok(fs.clone());
        }
        let n = l.n_points;
        Ok((0..n)
            .map(|i| l.f_min_hz + (l.f_max_hz - l.f_min_hz) * i as f64 / (n - 1) as f64)
            .collect())
    }

    pub fn measurement_plan(&self, seed: u64) -> Result<MeasurementPlan> {
        let l = self.loop_section()?;
        let sim = self.simulation.clone().unwrap_or_default();
        let seismic = (l.seismic_amplitude_n != 0.0).then_some((l.seismic_amplitude_n, l.seismic_freq_hz));
        Ok(MeasurementPlan {
            injection_amplitude: l.injection_amplitude_v,
            cycles: l.cycles,
            settle: sim.duration_s.unwrap_or(l.settle_s),
            max_dt: sim.dt_s,
            drive: Vec::new(),
            noise: NoiseSpec {
                force_asd: l.force_noise_asd,
                seismic,
            },
            phase_noise_deg: l.phase_noise_deg,
            seed,
        })
    }
}

fn profile_text(name: &str) -> Result<&'static str> {
    match name {
        "paper" => Ok(PAPER),
        "toy-stable" => Ok(TOY_STABLE),
        _ => Err(config_err("", "profile", format!("unknown profile `{name}`; known: {}", PROFILES.join(", ")))),
    }
}

fn build_cavity(c: &CavitySection, section: &str, slot: Orientation) -> Result<Cavity> {
    let keys = [
        ("length", "length_m"),
        ("finesse", "finesse"),
        ("intracavity_power", "power_w"),
        ("radius_of_curvature", "fixed_curvature_m"),
        ("power_transmissivity", "transmissivity"),
        ("levitated_curvature", "levitated_curvature_m"),
    ];
    check(c.sigma_transmissivity.is_finite() && c.sigma_transmissivity >= 0.0, section, "sigma_transmissivity", "must be non-negative")?;
    check(c.sigma_center_distance_m.is_finite() && c.sigma_center_distance_m >= 0.0, section, "sigma_center_distance_m", "must be non-negative")?;
    check(c.power_fluctuation_rel.is_finite() && c.power_fluctuation_rel >= 0.0, section, "power_fluctuation_rel", "must be non-negative")?;
    let orientation = c.orientation.clone().map_or(slot, Orientation::from);
    let mirror = Mirror::new(c.fixed_curvature_m, c.transmissivity).map_err(|e| locate(section, &keys, e))?;
    Cavity::new(c.length_m, c.finesse, c.power_w, mirror, c.levitated_curvature_m, orientation)
        .map_err(|e| locate(section, &keys, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn profiles_load() {
        for name in PROFILES {
            ExperimentConfig::profile(name).unwrap();
        }
        let p = ExperimentConfig::profile("paper").unwrap();
        assert_relative_eq!(p.upper_center_distance().unwrap().value, 0.0089, max_relative = 1e-12);
        assert!(p.sandwich.is_none());
        assert_eq!(p.coarse_frequencies().unwrap().len(), 10);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = format!("{PAPER}\n[sandwich]\nmass_kg = 1e-6\nmirror_curvature_m = 0.075\nk_opt_upper_npm = 1\nk_opt_lower_npm = 1\nbogus = 1\n");
        match ExperimentConfig::from_toml_str(&text) {
            Err(Error::Config { key, section, message }) => {
                assert_eq!(key, "bogus");
                assert_eq!(section, "sandwich", "{message:?}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_overlay_key_names_its_table() {
        match ExperimentConfig::profile_with_overlay("paper", "[loop]\nsensor_gain = 2.0\n") {
            Err(Error::Config { key, section, .. }) => {
                assert_eq!(key, "sensor_gain");
                assert_eq!(section, "loop");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_value_names_section_and_key() {
        let err = ExperimentConfig::profile_with_overlay("paper", "[pendulum]\nq = -1.0\n").unwrap_err();
        match err {
            Error::Config { section, key, .. } => {
                assert_eq!(section, "pendulum");
                assert_eq!(key, "q");
            }
            other => panic!("{other:?}"),
        }
        let err = ExperimentConfig::profile_with_overlay("paper", "[cavity.upper]\nlength_m = 0.0\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref section, ref key, .. } if section == "cavity.upper" && key == "length_m"), "{err:?}");
    }

    #[test]
    fn missing_section_is_reported() {
        let p = ExperimentConfig::profile("paper").unwrap();
        assert!(matches!(p.sandwich(), Err(Error::Config { ref section, .. }) if section == "sandwich"));
        let empty = ExperimentConfig::from_toml_str("").unwrap();
        assert!(matches!(empty.loop_config(0.0), Err(Error::Config { ref section, .. }) if section == "loop"));
    }

    #[test]
    fn overlay_and_round_trip() {
        let cfg = ExperimentConfig::profile_with_overlay("paper", "[simulation]\nseed = 9\n").unwrap();
        assert_eq!(cfg.seed(), 9);
        assert_eq!(cfg.upper_cavity().unwrap().intracavity_power(), 29.7);
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn toy_profile_builds_sandwich() {
        let cfg = ExperimentConfig::profile("toy-stable").unwrap();
        let s = cfg.sandwich().unwrap();
        assert_eq!(s.lower().orientation(), Orientation::Lower);
        assert_relative_eq!(s.gravity(), STANDARD_GRAVITY);
    }
}
