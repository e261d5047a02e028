//! Fabry-Perot transport cavity: enhancement, finesse, mode size, and the
//! residual standing-wave contrast produced by a phase-modulated drive.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::bessel::{bessel_j, bessel_j0, bessel_j_upto, J0_FIRST_ZERO};
use crate::error::{domain, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CavitySpec {
    /// In-coupling mirror reflectivity.
    pub r1: f64,
    pub r2: f64,
    pub length: f64,
    pub mirror_roc: f64,
    pub wavelength: f64,
    pub input_power: f64,
    /// Scatter/absorption loss of the in-coupler, subtracted from its
    /// transmission. Zero means lossless mirrors.
    #[serde(default)]
    pub mirror_loss: f64,
}

impl CavitySpec {
    pub fn new(
        r1: f64,
        r2: f64,
        length: f64,
        mirror_roc: f64,
        wavelength: f64,
        input_power: f64,
    ) -> Result<Self> {
        let spec = Self { r1, r2, length, mirror_roc, wavelength, input_power, mirror_loss: 0.0 };
        spec.validate()?;
        Ok(spec)
    }

    /// 1036 nm transport cavity with 61 cm spacing and 500 mm mirrors.
    pub fn transport_default() -> Self {
        Self {
            r1: 0.98,
            r2: 0.9999,
            length: 0.61,
            mirror_roc: 0.5,
            wavelength: 1036e-9,
            input_power: 18.0,
            mirror_loss: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("R1", self.r1), ("R2", self.r2)] {
            if !(r > 0.0 && r < 1.0) {
                return domain(format!("reflectivity {name} = {r} must lie in (0, 1)"));
            }
        }
        if !(self.length > 0.0 && self.length.is_finite()) {
            return domain(format!("cavity length must be positive, got {}", self.length));
        }
        if !(self.mirror_roc > 0.0) {
            return domain("mirror radius of curvature must be positive");
        }
        if self.length >= 2.0 * self.mirror_roc {
            return domain(format!(
                "unstable resonator: L = {} m >= 2 R_oc = {} m",
                self.length,
                2.0 * self.mirror_roc
            ));
        }
        if !(self.wavelength > 0.0) {
            return domain("wavelength must be positive");
        }
        if !(self.input_power >= 0.0) {
            return domain("input power must be non-negative");
        }
        if !(0.0..(1.0 - self.r1)).contains(&self.mirror_loss) {
            return domain("mirror loss must be in [0, 1 - R1)");
        }
        Ok(())
    }

    fn rr(&self) -> Result<f64> {
        let rr = self.r1 * self.r2;
        if !(rr < 1.0) {
            return domain(format!("R1*R2 = {rr} must be below 1"));
        }
        Ok(rr)
    }
}

/// Circulating-to-input power ratio T1 / (1 - sqrt(R1 R2))^2.
pub fn enhancement_factor(spec: &CavitySpec) -> Result<f64> {
    let rr = spec.rr()?;
    let t1 = 1.0 - spec.r1 - spec.mirror_loss;
    let d = 1.0 - rr.sqrt();
    Ok(t1 / (d * d))
}

pub fn finesse(spec: &CavitySpec) -> Result<f64> {
    let rr = spec.rr()?;
    Ok(PI * rr.powf(0.25) / (1.0 - rr.sqrt()))
}

/// Free spectral range c / 2L in Hz.
pub fn free_spectral_range(spec: &CavitySpec, c: f64) -> f64 {
    c / (2.0 * spec.length)
}

/// Resonance full width FSR / F in Hz.
pub fn linewidth_fwhm(spec: &CavitySpec, c: f64) -> Result<f64> {
    Ok(free_spectral_range(spec, c) / finesse(spec)?)
}

pub fn intracavity_power(spec: &CavitySpec) -> Result<f64> {
    Ok(enhancement_factor(spec)? * spec.input_power)
}

/// Fundamental-mode waist at the centre of a symmetric two-mirror cavity.
pub fn mode_waist(spec: &CavitySpec) -> Result<f64> {
    let l = spec.length;
    let r = spec.mirror_roc;
    if l >= 2.0 * r || l <= 0.0 {
        return domain(format!("no stable mode for L = {l} m, R_oc = {r} m"));
    }
    Ok((spec.wavelength / (2.0 * PI) * (l * (2.0 * r - l)).sqrt()).sqrt())
}

/// `(n, J_n(beta))` for n in -n_max..=n_max.
pub fn sideband_amplitudes(beta: f64, n_max: usize) -> Vec<(i64, f64)> {
    let pos = bessel_j_upto(n_max, beta);
    let mut out = Vec::with_capacity(2 * n_max + 1);
    for n in -(n_max as i64)..=(n_max as i64) {
        let m = n.unsigned_abs() as usize;
        let sign = if n < 0 && m % 2 == 1 { -1.0 } else { 1.0 };
        out.push((n, sign * pos[m]));
    }
    out
}

/// Residual lattice contrast at axial position `z` (measured from the
/// in-coupler) for a drive phase-modulated at one FSR with depth `beta`.
pub fn lattice_contrast(beta: f64, z: f64, spec: &CavitySpec) -> Result<f64> {
    if !(0.0..=spec.length).contains(&z) {
        return domain(format!("z = {z} m lies outside [0, {}] m", spec.length));
    }
    Ok(contrast_at_fraction(beta, z / spec.length))
}

fn contrast_at_fraction(beta: f64, frac: f64) -> f64 {
    bessel_j0(2.0 * beta * (PI * frac).sin()).abs()
}

/// Contrast obtained by summing every mode's standing wave with its power
/// weight. Equals [`lattice_contrast`] analytically; kept as a cross-check
/// and for truncated sideband sets.
pub fn lattice_contrast_incoherent_sum(beta: f64, z: f64, spec: &CavitySpec, n_max: usize) -> f64 {
    let theta = 2.0 * PI * z / spec.length;
    let (mut re, mut im) = (0.0, 0.0);
    for (n, a) in sideband_amplitudes(beta, n_max) {
        let w = a * a;
        re += w * (n as f64 * theta).cos();
        im += w * (n as f64 * theta).sin();
    }
    re.hypot(im)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeEnvelope {
    pub beta: f64,
    pub n_sidebands: usize,
    pub length: f64,
}

impl LatticeEnvelope {
    pub fn new(beta: f64, spec: &CavitySpec) -> Self {
        let n_sidebands = (beta.abs().ceil() as usize) + 20;
        Self { beta, n_sidebands, length: spec.length }
    }

    pub fn contrast(&self, z: f64) -> f64 {
        contrast_at_fraction(self.beta, (z / self.length).clamp(0.0, 1.0))
    }

    /// Zeros of the envelope as fractions of L, ascending.
    pub fn null_fractions(&self) -> Vec<f64> {
        null_fractions(self.beta)
    }
}

/// Zeros of J0, ascending, up to and including `x_max`.
pub fn j0_zeros_upto(x_max: f64) -> Vec<f64> {
    let mut zeros = Vec::new();
    let mut k = 1.0;
    loop {
        let mut x = if k == 1.0 { J0_FIRST_ZERO } else { (k - 0.25) * PI };
        for _ in 0..50 {
            // d/dx J0 = -J1
            let step = bessel_j0(x) / -bessel_j(1, x);
            x -= step;
            if step.abs() < 1e-15 * x {
                break;
            }
        }
        if x > x_max {
            break;
        }
        zeros.push(x);
        k += 1.0;
    }
    zeros
}

/// Positions z/L in (0, 1) where the contrast vanishes.
pub fn null_fractions(beta: f64) -> Vec<f64> {
    let amp = 2.0 * beta.abs();
    let mut out = Vec::new();
    for j in j0_zeros_upto(amp) {
        let a = (j / amp).asin() / PI;
        out.push(a);
        if (a - 0.5).abs() > 1e-15 {
            out.push(1.0 - a);
        }
    }
    out.sort_by(f64::total_cmp);
    out
}

/// Smallest modulation depth that nulls the lattice at `z_target`.
pub fn null_depth_for_position(z_target: f64, spec: &CavitySpec) -> Result<f64> {
    let frac = z_target / spec.length;
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::Domain(format!(
            "target position {z_target} m must lie strictly inside the cavity"
        )));
    }
    Ok(J0_FIRST_ZERO / (2.0 * (PI * frac).sin()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bessel::series_j;

    const C: f64 = 299_792_458.0;

    fn sym(r: f64) -> CavitySpec {
        CavitySpec { r1: r, r2: r, ..CavitySpec::transport_default() }
    }

    #[test]
    fn default_numbers() {
        let s = CavitySpec::transport_default();
        assert!((enhancement_factor(&s).unwrap() - 196.0).abs() < 1.0);
        assert!((finesse(&s).unwrap() - 309.0).abs() < 1.0);
        assert!((free_spectral_range(&s, C) / 244e6 - 1.0).abs() < 0.01);
        assert!((mode_waist(&s).unwrap() / 280e-6 - 1.0).abs() < 0.02);
    }

    #[test]
    fn half_reflectivity_substitution() {
        let s = sym(0.5);
        assert!((enhancement_factor(&s).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn impedance_matched_is_half_overcoupled_limit() {
        // Equal mirrors: E = T/(1-R)^2 = 1/T while 2F/pi -> 2/T.
        for t in [1e-2, 1e-3, 1e-4] {
            let s = sym(1.0 - t);
            let e = enhancement_factor(&s).unwrap();
            let f = finesse(&s).unwrap();
            assert!((e / (2.0 * f / PI) - 0.5).abs() < t, "t={t}");
        }
    }

    #[test]
    fn high_reflectivity_limit() {
        let r = 1.0 - 1e-6;
        let f = finesse(&sym(r)).unwrap();
        assert!((f * (1.0 - r) / PI - 1.0).abs() < 1e-5);
    }

    #[test]
    fn fsr_scaling() {
        let mut s = CavitySpec::transport_default();
        s.length = 1.0;
        let f1 = free_spectral_range(&s, C);
        assert!((f1 - 149.896_229e6).abs() < 1.0);
        s.length = 2.0 * 1.0;
        s.mirror_roc = 5.0;
        assert_eq!(free_spectral_range(&s, C), f1 / 2.0);
    }

    #[test]
    fn confocal_waist() {
        let mut s = CavitySpec::transport_default();
        s.length = s.mirror_roc;
        let w = mode_waist(&s).unwrap();
        assert!((w * w / (s.wavelength * s.length / (2.0 * PI)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn waist_shrinks_towards_concentric() {
        let mut s = CavitySpec::transport_default();
        let mut last = f64::INFINITY;
        for i in 0..50 {
            s.length = s.mirror_roc * (1.0 + i as f64 / 50.0);
            let w = mode_waist(&s).unwrap();
            assert!(w < last);
            last = w;
        }
        s.length = 2.0 * s.mirror_roc;
        assert!(mode_waist(&s).is_err());
    }

    #[test]
    fn invalid_specs() {
        assert!(CavitySpec::new(1.0, 0.5, 0.6, 0.5, 1e-6, 1.0).is_err());
        assert!(CavitySpec::new(0.5, 0.5, 1.2, 0.5, 1e-6, 1.0).is_err());
        assert!(CavitySpec::new(0.5, 0.5, 0.6, 0.5, 1e-6, 1.0).is_ok());
    }

    #[test]
    fn sidebands_at_working_depth() {
        let sb = sideband_amplitudes(1.75, 10);
        let get = |n: i64| sb.iter().find(|(m, _)| *m == n).unwrap().1;
        assert!((get(0).abs() - 0.369).abs() < 1e-3);
        assert!((get(1).abs() - 0.580).abs() < 1e-3);
        assert!((get(2).abs() - 0.294).abs() < 1e-3);
        for n in 0..=6 {
            assert!((get(n) - series_j(n as u32, 1.75)).abs() < 1e-12);
        }
    }

    #[test]
    fn sidebands_unmodulated() {
        for (n, a) in sideband_amplitudes(0.0, 5) {
            assert_eq!(a, if n == 0 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn sideband_power_sums_to_one() {
        for beta in [0.3, 1.75, 4.0, 9.0] {
            let n_max = (beta as usize) + 20;
            let p: f64 = sideband_amplitudes(beta, n_max).iter().map(|(_, a)| a * a).sum();
            assert!((p - 1.0).abs() < 1e-9, "beta={beta}");
        }
    }

    #[test]
    fn contrast_closed_form_matches_mode_sum() {
        let s = CavitySpec::transport_default();
        for i in 0..=40 {
            let z = s.length * i as f64 / 40.0;
            let a = lattice_contrast(1.75, z, &s).unwrap();
            let b = lattice_contrast_incoherent_sum(1.75, z, &s, 30);
            assert!((a - b).abs() < 1e-12, "z/L={}", i as f64 / 40.0);
        }
    }

    #[test]
    fn contrast_basic_properties() {
        let s = CavitySpec::transport_default();
        assert!((lattice_contrast(1.75, 0.0, &s).unwrap() - 1.0).abs() < 1e-15);
        assert!(lattice_contrast(1.75, -1e-3, &s).is_err());
        assert!(lattice_contrast(1.75, s.length * 1.01, &s).is_err());
        for i in 0..100 {
            let z = s.length * i as f64 / 99.0;
            let c = lattice_contrast(1.75, z, &s).unwrap();
            let c2 = lattice_contrast(1.75, s.length - z, &s).unwrap();
            assert!((0.0..=1.0).contains(&c));
            assert!((c - c2).abs() < 1e-9);
        }
    }

    #[test]
    fn nulls_at_working_depth() {
        let nulls = null_fractions(1.75);
        assert_eq!(nulls.len(), 2);
        assert!((nulls[0] - 0.241).abs() < 1e-3);
        assert!((nulls[1] - 0.759).abs() < 1e-3);
        assert!((nulls[0] + nulls[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shallow_modulation_has_no_null() {
        assert!(null_fractions(1.2).is_empty());
        assert!(bessel_j0(2.4) > 0.0);
    }

    #[test]
    fn null_depth_values() {
        let s = CavitySpec::transport_default();
        let b = null_depth_for_position(0.241 * s.length, &s).unwrap();
        assert!((b - 1.75).abs() < 0.01);
        let mid = null_depth_for_position(0.5 * s.length, &s).unwrap();
        assert!((mid - 1.2024).abs() < 1e-4);
        assert!(null_depth_for_position(0.0, &s).is_err());
    }

    #[test]
    fn enhancement_and_finesse_monotone() {
        let mut s = CavitySpec::transport_default();
        let mut last = (0.0, 0.0);
        for i in 0..30 {
            s.r2 = 0.99 + 0.0099 * i as f64 / 30.0;
            let cur = (enhancement_factor(&s).unwrap(), finesse(&s).unwrap());
            assert!(cur.0 > last.0 && cur.1 > last.1);
            last = cur;
        }
    }
}
