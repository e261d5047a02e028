//! Physical constants, laboratory-unit conversions, laser tones and small
//! vector helpers shared by every model.
//!
//! All quantities are SI internally. Conversions from laboratory units happen
//! at the configuration boundary through the helpers in [`units`].

use nalgebra::{Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{domain, Result};
use crate::rng::RngHandle;

pub type Vec3 = Vector3<f64>;

/// Atomic mass unit in kg.
pub const AMU: f64 = 1.660_539_066_60e-27;
/// Bohr radius in m.
pub const BOHR_RADIUS: f64 = 5.291_772_109_03e-11;
/// Vacuum permittivity in F/m.
pub const EPSILON_0: f64 = 8.854_187_812_8e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConstants {
    /// Reduced Planck constant, J s.
    pub hbar: f64,
    /// Boltzmann constant, J/K.
    pub k_b: f64,
    /// Speed of light, m/s.
    pub c: f64,
    /// Mass of a 171Yb atom, kg.
    pub mass: f64,
    /// Gravitational acceleration, m/s^2.
    pub g: f64,
}

impl PhysicalConstants {
    pub const CODATA: PhysicalConstants = PhysicalConstants {
        hbar: 1.054_571_817e-34,
        k_b: 1.380_649e-23,
        c: 299_792_458.0,
        mass: 170.936_325_8 * AMU,
        g: 9.806_65,
    };

    pub fn new(hbar: f64, k_b: f64, c: f64, mass: f64, g: f64) -> Result<Self> {
        for (name, v) in [("hbar", hbar), ("k_B", k_b), ("c", c), ("mass", mass), ("g", g)] {
            if !(v.is_finite() && v > 0.0) {
                return domain(format!("physical constant {name} must be positive, got {v}"));
            }
        }
        Ok(Self { hbar, k_b, c, mass, g })
    }

    /// Planck constant h = 2 pi hbar.
    pub fn h(&self) -> f64 {
        2.0 * PI * self.hbar
    }

    /// Converts an energy in J to the equivalent temperature in K.
    pub fn energy_to_kelvin(&self, energy: f64) -> f64 {
        energy / self.k_b
    }

    /// Energy h*nu of a frequency given in Hz.
    pub fn hz_to_joule(&self, nu: f64) -> f64 {
        self.h() * nu
    }
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self::CODATA
    }
}

/// Laboratory unit conversions (to SI).
pub mod units {
    use std::f64::consts::PI;

    pub fn micro_kelvin(t: f64) -> f64 {
        t * 1e-6
    }
    pub fn micrometre(x: f64) -> f64 {
        x * 1e-6
    }
    pub fn nanometre(x: f64) -> f64 {
        x * 1e-9
    }
    pub fn millisecond(t: f64) -> f64 {
        t * 1e-3
    }
    /// mW/cm^2 to W/m^2.
    pub fn mw_per_cm2(i: f64) -> f64 {
        i * 10.0
    }
    /// Frequency in MHz to angular frequency in rad/s.
    pub fn mhz_to_angular(f: f64) -> f64 {
        2.0 * PI * f * 1e6
    }
    /// Frequency in kHz to angular frequency in rad/s.
    pub fn khz_to_angular(f: f64) -> f64 {
        2.0 * PI * f * 1e3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarization {
    SigmaPlus,
    SigmaMinus,
    Pi,
    LinearMixed,
}

/// One monochromatic laser tone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaserTone {
    /// Vacuum wavelength, m.
    pub wavelength: f64,
    /// Laser minus transition angular frequency, rad/s.
    pub detuning: f64,
    /// W/m^2.
    pub intensity: f64,
    /// W/m^2.
    pub saturation_intensity: f64,
    /// Natural linewidth of the addressed transition, rad/s.
    pub linewidth: f64,
    pub unit_k: Vec3,
    pub polarization: Polarization,
}

impl LaserTone {
    pub fn new(
        wavelength: f64,
        detuning: f64,
        intensity: f64,
        saturation_intensity: f64,
        linewidth: f64,
        unit_k: Vec3,
        polarization: Polarization,
    ) -> Result<Self> {
        if !(wavelength > 0.0 && wavelength.is_finite()) {
            return domain(format!("wavelength must be positive, got {wavelength}"));
        }
        if !(intensity >= 0.0 && intensity.is_finite()) {
            return domain(format!("intensity must be non-negative, got {intensity}"));
        }
        if !(saturation_intensity > 0.0 && saturation_intensity.is_finite()) {
            return domain("saturation intensity must be positive");
        }
        if !(linewidth > 0.0 && linewidth.is_finite()) {
            return domain("linewidth must be positive");
        }
        if !detuning.is_finite() {
            return domain("detuning must be finite");
        }
        if (unit_k.norm() - 1.0).abs() > 1e-12 {
            return domain(format!("unit_k must have unit length, |k| = {}", unit_k.norm()));
        }
        Ok(Self {
            wavelength,
            detuning,
            intensity,
            saturation_intensity,
            linewidth,
            unit_k,
            polarization,
        })
    }

    /// Saturation parameter s = I / I_sat.
    pub fn saturation(&self) -> f64 {
        self.intensity / self.saturation_intensity
    }

    /// Wavenumber 2 pi / lambda.
    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength
    }
}

/// Rotates `v` by `angle` about `axis`. Unit vectors stay unit.
pub fn rotate(v: &Vec3, axis: &Vec3, angle: f64) -> Vec3 {
    let axis = Unit::new_normalize(*axis);
    Rotation3::from_axis_angle(&axis, angle) * v
}

/// Uniformly distributed direction on the unit sphere.
pub fn isotropic_unit(rng: &mut RngHandle) -> Vec3 {
    let cos_t = 2.0 * rng.uniform() - 1.0;
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi = 2.0 * PI * rng.uniform();
    Vec3::new(sin_t * phi.cos(), sin_t * phi.sin(), cos_t)
}

/// Samples a thermal velocity. The axial direction is x (the transport trap
/// axis); y and z are radial.
pub fn maxwell_boltzmann_sample(
    t_radial: f64,
    t_axial: f64,
    mass: f64,
    k_b: f64,
    rng: &mut RngHandle,
) -> Result<Vec3> {
    if !(t_radial >= 0.0 && t_axial >= 0.0) {
        return domain(format!(
            "temperatures must be non-negative (radial {t_radial}, axial {t_axial})"
        ));
    }
    let s_ax = (k_b * t_axial / mass).sqrt();
    let s_r = (k_b * t_radial / mass).sqrt();
    Ok(Vec3::new(
        s_ax * rng.normal(),
        s_r * rng.normal(),
        s_r * rng.normal(),
    ))
}
