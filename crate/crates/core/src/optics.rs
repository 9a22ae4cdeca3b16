//! Cavity geometry, radiation-pressure springs and the stability matrix of
//! the two-cavity levitation configuration.
//!
//! Coordinates are centred on the centre of curvature of the levitated
//! mirror, which makes the linear response diagonal in `(x, z, beta)`:
//! the horizontal stiffness comes from the tilt of the two cavity axes, the
//! vertical stiffness from the (user-supplied) longitudinal optical springs,
//! and the rotational stiffness from gravity acting on the curved mirror.
//!
//! Frequency-domain quantities use the `e^{+i omega t}` convention, so a
//! restoring spring with velocity damping reads `k + i omega gamma`.

use num_complex::Complex64;

use crate::error::{non_negative, positive, Error, Result};
use crate::{Measured, SPEED_OF_LIGHT, STANDARD_GRAVITY};

/// A spherical mirror: curvature radius and power transmissivity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mirror {
    radius_of_curvature: f64,
    power_transmissivity: f64,
}

impl Mirror {
    pub fn new(radius_of_curvature: f64, power_transmissivity: f64) -> Result<Self> {
        positive("radius_of_curvature", radius_of_curvature)?;
        if !(0.0..=1.0).contains(&power_transmissivity) {
            return Err(Error::InvalidParameter {
                name: "power_transmissivity",
                value: power_transmissivity,
                reason: "must lie in [0, 1]",
            });
        }
        Ok(Self {
            radius_of_curvature,
            power_transmissivity,
        })
    }

    pub fn radius_of_curvature(&self) -> f64 {
        self.radius_of_curvature
    }

    pub fn power_transmissivity(&self) -> f64 {
        self.power_transmissivity
    }
}

/// Which side of the levitated mirror a cavity sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Orientation {
    /// Above the mirror; its horizontal spring is restoring.
    Upper,
    /// Below the mirror, carrying its weight; its horizontal spring is anti-restoring.
    Lower,
}

impl Orientation {
    /// Sign of the horizontal spring contributed by a cavity on this side.
    pub fn spring_sign(self) -> f64 {
        match self {
            Orientation::Upper => 1.0,
            Orientation::Lower => -1.0,
        }
    }
}

/// Which of the two axial solutions a cavity length corresponds to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// `l < R_fixed + R_lev`: centres of curvature cross over inside the cavity.
    Short,
    /// `l > R_fixed + R_lev`.
    Long,
    /// `l == R_fixed + R_lev`.
    Concentric,
}

/// Axial distance between the centres of curvature, tagged with its branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterDistance {
    pub distance: f64,
    pub branch: Branch,
}

/// Distance between the two centres of curvature of a two-mirror cavity.
pub fn center_distance(length: f64, r_fixed: f64, r_lev: f64) -> Result<CenterDistance> {
    positive("length", length)?;
    positive("r_fixed", r_fixed)?;
    positive("r_lev", r_lev)?;
    let offset = length - r_fixed - r_lev;
    let branch = if offset.abs() <= 1e-12 * length {
        Branch::Concentric
    } else if offset < 0.0 {
        Branch::Short
    } else {
        Branch::Long
    };
    let distance = if branch == Branch::Concentric {
        0.0
    } else {
        offset.abs()
    };
    Ok(CenterDistance { distance, branch })
}

/// One Fabry-Perot cavity formed by a fixed mirror and the levitated mirror.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cavity {
    length: f64,
    finesse: f64,
    intracavity_power: f64,
    fixed_mirror: Mirror,
    levitated_curvature: f64,
    orientation: Orientation,
}

impl Cavity {
    pub fn new(
        length: f64,
        finesse: f64,
        intracavity_power: f64,
        fixed_mirror: Mirror,
        levitated_curvature: f64,
        orientation: Orientation,
    ) -> Result<Self> {
        positive("length", length)?;
        positive("finesse", finesse)?;
        non_negative("intracavity_power", intracavity_power)?;
        positive("levitated_curvature", levitated_curvature)?;
        Ok(Self {
            length,
            finesse,
            intracavity_power,
            fixed_mirror,
            levitated_curvature,
            orientation,
        })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn finesse(&self) -> f64 {
        self.finesse
    }

    pub fn intracavity_power(&self) -> f64 {
        self.intracavity_power
    }

    pub fn fixed_mirror(&self) -> Mirror {
        self.fixed_mirror
    }

    pub fn levitated_curvature(&self) -> f64 {
        self.levitated_curvature
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    /// Same cavity at a different circulating power.
    pub fn with_power(self, intracavity_power: f64) -> Result<Self> {
        non_negative("intracavity_power", intracavity_power)?;
        Ok(Self {
            intracavity_power,
            ..self
        })
    }

    pub fn center_distance(&self) -> Result<CenterDistance> {
        center_distance(
            self.length,
            self.fixed_mirror.radius_of_curvature,
            self.levitated_curvature,
        )
    }
}

/// Geometric stability product `G = (1 - l/R_fixed)(1 - l/R_lev)`.
pub fn g_factor(cavity: &Cavity) -> f64 {
    let l = cavity.length;
    (1.0 - l / cavity.fixed_mirror.radius_of_curvature) * (1.0 - l / cavity.levitated_curvature)
}

/// Complex horizontal spring `k + i omega gamma` (N/m) of one cavity.
///
/// The magnitude is the radiation-pressure force `2P/c` over the lever arm
/// `a`; the imaginary part is the delay of the intracavity field, of order
/// `pi l / (F c (1 - G))` seconds, which is ~1e-11 s for realistic cavities.
pub fn horizontal_spring(cavity: &Cavity, omega: f64) -> Result<Complex64> {
    let a = cavity.center_distance()?.distance;
    if a == 0.0 {
        return Err(Error::DegenerateConcentric);
    }
    let g = g_factor(cavity);
    if (1.0 - g).abs() <= f64::EPSILON {
        return Err(Error::SingularGeometry);
    }
    let stiffness = cavity.orientation.spring_sign() * 2.0 * cavity.intracavity_power
        / (SPEED_OF_LIGHT * a);
    let delay = std::f64::consts::PI * cavity.length / (cavity.finesse * SPEED_OF_LIGHT * (1.0 - g));
    Ok(Complex64::new(stiffness, -stiffness * omega * delay))
}

/// Gravitational restoring torque per radian, `m g R`.
pub fn rotational_spring(mass: f64, gravity: f64, curvature: f64) -> f64 {
    mass * gravity * curvature
}

/// Two cavities plus the levitated mirror they hold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SandwichConfig {
    upper: Cavity,
    lower: Cavity,
    mirror_mass: f64,
    mirror_curvature: f64,
    gravity: f64,
    vertical_spring_upper: f64,
    vertical_spring_lower: f64,
}

impl SandwichConfig {
    pub fn new(
        upper: Cavity,
        lower: Cavity,
        mirror_mass: f64,
        mirror_curvature: f64,
        vertical_spring_upper: f64,
        vertical_spring_lower: f64,
    ) -> Result<Self> {
        if upper.orientation != Orientation::Upper || lower.orientation != Orientation::Lower {
            return Err(Error::InvalidParameter {
                name: "orientation",
                value: f64::NAN,
                reason: "upper cavity must be Upper and lower cavity must be Lower",
            });
        }
        positive("mirror_mass", mirror_mass)?;
        positive("mirror_curvature", mirror_curvature)?;
        Ok(Self {
            upper,
            lower,
            mirror_mass,
            mirror_curvature,
            gravity: STANDARD_GRAVITY,
            vertical_spring_upper,
            vertical_spring_lower,
        })
    }

    pub fn with_gravity(self, gravity: f64) -> Result<Self> {
        positive("gravity", gravity)?;
        Ok(Self { gravity, ..self })
    }

    pub fn upper(&self) -> &Cavity {
        &self.upper
    }

    pub fn lower(&self) -> &Cavity {
        &self.lower
    }

    pub fn mirror_mass(&self) -> f64 {
        self.mirror_mass
    }

    pub fn mirror_curvature(&self) -> f64 {
        self.mirror_curvature
    }

    pub fn gravity(&self) -> f64 {
        self.gravity
    }

    pub fn vertical_springs(&self) -> (f64, f64) {
        (self.vertical_spring_upper, self.vertical_spring_lower)
    }
}

/// Diagonal linear response of the levitated mirror in `(x, z, beta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityMatrix {
    pub k_x: f64,
    pub k_z: f64,
    pub k_beta: f64,
}

impl StabilityMatrix {
    /// Full 3x3 form; off-diagonal entries are zero.
    pub fn as_matrix(&self) -> [[f64; 3]; 3] {
        [
            [self.k_x, 0.0, 0.0],
            [0.0, self.k_z, 0.0],
            [0.0, 0.0, self.k_beta],
        ]
    }
}

pub fn stability_matrix(config: &SandwichConfig) -> Result<StabilityMatrix> {
    let k_x = horizontal_spring(&config.lower, 0.0)?.re + horizontal_spring(&config.upper, 0.0)?.re;
    Ok(StabilityMatrix {
        k_x,
        k_z: config.vertical_spring_lower + config.vertical_spring_upper,
        k_beta: rotational_spring(config.mirror_mass, config.gravity, config.mirror_curvature),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Z,
    Beta,
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Z => "z",
            Axis::Beta => "beta",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityVerdict {
    pub stable: bool,
    /// Raw diagonal entries, in `(x, z, beta)` order.
    pub margins: [f64; 3],
    pub failing: Vec<Axis>,
}

/// Every diagonal entry must be strictly positive; zero counts as unstable.
pub fn is_stable(k: &StabilityMatrix) -> StabilityVerdict {
    let margins = [k.k_x, k.k_z, k.k_beta];
    let failing: Vec<Axis> = [Axis::X, Axis::Z, Axis::Beta]
        .into_iter()
        .zip(margins)
        // NaN fails too
        .filter(|(_, m)| !(*m > 0.0))
        .map(|(axis, _)| axis)
        .collect();
    StabilityVerdict {
        stable: failing.is_empty(),
        margins,
        failing,
    }
}

/// Closed interval of horizontal spring constants (N/m).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpringBand {
    pub lo: f64,
    pub hi: f64,
}

impl SpringBand {
    pub fn contains(&self, k: f64) -> bool {
        self.lo <= k && k <= self.hi
    }

    /// Whether `[k - sigma, k + sigma]` intersects the band.
    pub fn overlaps(&self, k: f64, sigma: f64) -> bool {
        k - sigma <= self.hi && k + sigma >= self.lo
    }
}

/// Range of `2P/(a c)` over `a ± sigma_a`, `P ± sigma_P`.
///
/// The spring is monotone in both inputs, so the endpoints are attained at
/// the corners of the box. A negative lower power is clipped to zero.
pub fn predicted_spring_band(a: Measured, power: Measured) -> Result<SpringBand> {
    non_negative("sigma_a", a.sigma)?;
    non_negative("sigma_P", power.sigma)?;
    let a_min = a.value - a.sigma;
    if !(a_min > 0.0) {
        return Err(Error::InvalidParameter {
            name: "a - sigma_a",
            value: a_min,
            reason: "center distance band must stay positive",
        });
    }
    let p_lo = (power.value - power.sigma).max(0.0);
    let p_hi = power.value + power.sigma;
    Ok(SpringBand {
        lo: 2.0 * p_lo / (SPEED_OF_LIGHT * (a.value + a.sigma)),
        hi: 2.0 * p_hi / (SPEED_OF_LIGHT * a_min),
    })
}
