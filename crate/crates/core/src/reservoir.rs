//! Molasses reservoir rate equation
//! `dn/dt = -Gamma n - D beta n^2 + D phi0 / V` and its steady state.
//!
//! Densities are atoms/cm^3, volumes cm^3, beta cm^3/s and times s, the
//! units in which the coefficients are usually quoted.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::ode::{integrate, Tolerances};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReservoirModel {
    /// Single-atom loss rate, 1/s.
    pub gamma_atom: f64,
    /// Light-assisted two-body coefficient, cm^3/s.
    pub beta_2body: f64,
    /// Captured flux, atoms/s.
    pub phi0: f64,
    /// Effective volume, cm^3.
    pub v_eff: f64,
    pub duty_cycle: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReservoirState {
    pub t: f64,
    pub density: f64,
    pub atom_number: f64,
}

impl ReservoirModel {
    /// Coefficients fitted to the measured molasses loading curves.
    pub fn fitted(duty_cycle: f64) -> Self {
        Self {
            gamma_atom: 0.156,
            beta_2body: 6.1e-13,
            phi0: 1.60e6,
            v_eff: 6.6e-6,
            duty_cycle,
        }
    }

    pub fn with_duty(self, duty_cycle: f64) -> Self {
        Self { duty_cycle, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gamma_atom", self.gamma_atom),
            ("beta_2body", self.beta_2body),
            ("phi0", self.phi0),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return domain(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(self.v_eff > 0.0 && self.v_eff.is_finite()) {
            return domain(format!("v_eff must be positive, got {}", self.v_eff));
        }
        if !(0.0..=1.0).contains(&self.duty_cycle) {
            return domain(format!("duty cycle {} outside [0, 1]", self.duty_cycle));
        }
        Ok(())
    }

    /// Source term phi0 / V in atoms/(cm^3 s).
    pub fn source_density_rate(&self) -> f64 {
        self.phi0 / self.v_eff
    }

    /// Right-hand side with an additional extraction sink in atoms/s. The
    /// sink switches off smoothly below one atom per cm^3 so the density
    /// cannot be driven negative.
    pub fn rate(&self, n: f64, extraction: f64) -> f64 {
        let d = self.duty_cycle;
        let sink = if extraction > 0.0 {
            let np = n.max(0.0);
            extraction / self.v_eff * np / (np + 1.0)
        } else {
            0.0
        };
        -self.gamma_atom * n - d * self.beta_2body * n * n + d * self.source_density_rate() - sink
    }

    pub fn state(&self, t: f64, density: f64) -> ReservoirState {
        ReservoirState { t, density, atom_number: density * self.v_eff }
    }
}

pub fn default_tolerances() -> Tolerances {
    Tolerances { rtol: 1e-8, atol: 1.0, ..Default::default() }
}

/// Integrates from `n0` and returns the state every `dt_max` up to `t_end`
/// (inclusive). `dt_max` also caps the internal step.
pub fn integrate_density(
    model: &ReservoirModel,
    n0: f64,
    t_end: f64,
    dt_max: f64,
) -> Result<Vec<ReservoirState>> {
    if !(dt_max > 0.0) || !(t_end >= 0.0) {
        return domain("t_end must be non-negative and dt_max positive");
    }
    let steps = (t_end / dt_max).ceil() as usize;
    let mut times: Vec<f64> = (0..=steps).map(|i| (i as f64 * dt_max).min(t_end)).collect();
    times.dedup();
    integrate_density_at(model, n0, &times, 0.0, dt_max)
}

/// Density at the requested times with an optional extraction sink.
pub fn integrate_density_at(
    model: &ReservoirModel,
    n0: f64,
    times: &[f64],
    extraction: f64,
    h_max: f64,
) -> Result<Vec<ReservoirState>> {
    model.validate()?;
    if !(n0 >= 0.0) {
        return domain(format!("initial density must be non-negative, got {n0}"));
    }
    if !(extraction >= 0.0) {
        return domain("extraction rate must be non-negative");
    }
    let tol = Tolerances { h_max, ..default_tolerances() };
    let ys = integrate(
        |_, y, d| d[0] = model.rate(y[0], extraction),
        0.0,
        &[n0],
        times,
        tol,
        |t, y| {
            if y[0] < -tol.atol {
                Err(Error::Numerical(format!("density became negative ({}) at t = {t}", y[0])))
            } else {
                Ok(())
            }
        },
    )?;
    Ok(times
        .iter()
        .zip(ys)
        .map(|(&t, y)| model.state(t, y[0].max(0.0)))
        .collect())
}

/// Closed-form fixed point of the rate equation.
pub fn steady_state_density(model: &ReservoirModel) -> Result<f64> {
    model.validate()?;
    let ReservoirModel { gamma_atom: g, beta_2body: b, duty_cycle: d, .. } = *model;
    let s = model.source_density_rate();
    if s == 0.0 || d == 0.0 {
        if g == 0.0 && (b == 0.0 || d == 0.0) {
            return domain("steady state undefined without any loss channel");
        }
        return Ok(0.0);
    }
    let bd = b * d;
    if bd == 0.0 {
        if g == 0.0 {
            return domain("steady state undefined without any loss channel");
        }
        return Ok(d * s / g);
    }
    // Rationalised root avoids cancellation when the two-body term is weak.
    let disc = (g * g + 4.0 * bd * d * s).sqrt();
    Ok(2.0 * d * s / (g + disc))
}

pub fn steady_state_vs_duty(model: &ReservoirModel, duties: &[f64]) -> Result<Vec<(f64, f64)>> {
    duties
        .iter()
        .map(|&d| {
            if !(0.0..=1.0).contains(&d) {
                return domain(format!("duty cycle {d} outside [0, 1]"));
            }
            Ok((d, steady_state_density(&model.with_duty(d))?))
        })
        .collect()
}

/// Fractional density reduction at `t_end` caused by a continuous
/// extraction sink, both runs starting from an empty reservoir.
pub fn depletion_under_extraction(model: &ReservoirModel, extraction_rate: f64, t_end: f64) -> Result<f64> {
    if !(extraction_rate >= 0.0) {
        return domain("extraction rate must be non-negative");
    }
    let h = t_end / 20.0;
    let free = integrate_density_at(model, 0.0, &[t_end], 0.0, h)?[0].density;
    let ext = integrate_density_at(model, 0.0, &[t_end], extraction_rate, h)?[0].density;
    if free == 0.0 {
        return Ok(0.0);
    }
    Ok((free - ext) / free)
}

/// Density and its logarithmic parameter sensitivities `p dn/dp` for
/// p in (Gamma, beta, S = phi0/V), integrated alongside the rate equation.
pub fn density_with_sensitivities(
    gamma: f64,
    beta: f64,
    source: f64,
    duty: f64,
    n0: f64,
    times: &[f64],
) -> Result<Vec<[f64; 4]>> {
    let tol = Tolerances { rtol: 1e-10, atol: 1e-2, ..Default::default() };
    let ys = integrate(
        |_, y, d| {
            let n = y[0];
            let fnn = -gamma - 2.0 * duty * beta * n;
            d[0] = -gamma * n - duty * beta * n * n + duty * source;
            d[1] = fnn * y[1] - gamma * n;
            d[2] = fnn * y[2] - duty * beta * n * n;
            d[3] = fnn * y[3] + duty * source;
        },
        0.0,
        &[n0, 0.0, 0.0, 0.0],
        times,
        tol,
        |_, _| Ok(()),
    )?;
    Ok(ys.into_iter().map(|y| [y[0], y[1], y[2], y[3]]).collect())
}
