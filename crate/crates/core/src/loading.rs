//! Monte Carlo capture of reservoir atoms into optical tweezers.
//!
//! Coordinates: the transport trap runs along x, tweezers propagate along z
//! and gravity points along -z.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{domain, Error, Result};
use crate::fit::{nls_fit, FitData, FitResult, SaturatingExponential};
use crate::light::ScatterTable;
use crate::phys::{isotropic_unit, maxwell_boltzmann_sample, PhysicalConstants, Vec3, BOHR_RADIUS, EPSILON_0};
use crate::rng::RngHandle;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tweezer {
    pub center: Vec3,
    /// J.
    pub depth: f64,
    pub waist: f64,
    pub wavelength: f64,
}

impl Tweezer {
    pub fn rayleigh_range(&self) -> f64 {
        PI * self.waist * self.waist / self.wavelength
    }

    /// Potential and force of this beam alone.
    #[inline]
    pub fn potential_and_force(&self, pos: &Vec3) -> (f64, Vec3) {
        let d = pos - self.center;
        let w2 = self.waist * self.waist;
        let zr = self.rayleigh_range();
        let zeta = d.z / zr;
        let a = 1.0 / (1.0 + zeta * zeta);
        let rho2 = d.x * d.x + d.y * d.y;
        let arg = 2.0 * rho2 * a / w2;
        // Beyond e^-36 of the depth the beam is negligible at double precision.
        if arg > 36.0 {
            return (0.0, Vec3::zeros());
        }
        let e = (-arg).exp();
        let u = -self.depth * a * e;
        let radial = -4.0 * self.depth * a * a * e / w2;
        let fz = -self.depth * e * (2.0 * zeta * a * a / zr) * (1.0 - 2.0 * rho2 * a / w2);
        (u, Vec3::new(radial * d.x, radial * d.y, fz))
    }

    /// Radial and axial harmonic frequencies at the focus, rad/s.
    pub fn trap_frequencies(&self, mass: f64) -> (f64, f64) {
        let wr = (4.0 * self.depth / (mass * self.waist * self.waist)).sqrt();
        let zr = self.rayleigh_range();
        let wz = (2.0 * self.depth / (mass * zr * zr)).sqrt();
        (wr, wz)
    }
}

/// Cavity-enhanced transport trap: a Gaussian guide along `axis` with a
/// residual lambda/2 lattice of contrast `contrast`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransportTrap {
    /// A point on the trap axis.
    pub origin: Vec3,
    pub axis: Vec3,
    /// Lattice-averaged depth, J.
    pub depth: f64,
    pub waist: f64,
    pub contrast: f64,
    pub wavelength: f64,
}

impl TransportTrap {
    #[inline]
    pub fn potential_and_force(&self, pos: &Vec3) -> (f64, Vec3) {
        let d = pos - self.origin;
        let s = d.dot(&self.axis);
        let perp = d - self.axis * s;
        let w2 = self.waist * self.waist;
        let g = (-2.0 * perp.norm_squared() / w2).exp();
        let k2 = 4.0 * PI / self.wavelength;
        let (sn, cs) = if self.contrast != 0.0 { (k2 * s).sin_cos() } else { (0.0, 1.0) };
        let m = 1.0 + self.contrast * cs;
        let u = -self.depth * g * m;
        let f_perp = perp * (-4.0 * self.depth * g * m / w2);
        let f_axis = -self.depth * g * self.contrast * k2 * sn;
        (u, f_perp + self.axis * f_axis)
    }

    /// Radial trap frequency on the axis, rad/s.
    pub fn radial_frequency(&self, mass: f64) -> f64 {
        (4.0 * self.depth / (mass * self.waist * self.waist)).sqrt()
    }
}

/// Lattice-averaged light-shift depth of a standing-wave cavity mode with
/// circulating power `power` per direction, for a scalar polarisability in
/// atomic units.
pub fn standing_wave_depth(power: f64, waist: f64, polarizability_au: f64, c: f64) -> f64 {
    let alpha = polarizability_au * 4.0 * PI * EPSILON_0 * BOHR_RADIUS.powi(3);
    let intensity = 2.0 * 2.0 * power / (PI * waist * waist);
    alpha * intensity / (2.0 * EPSILON_0 * c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapField {
    pub tweezers: Vec<Tweezer>,
    pub transport: Option<TransportTrap>,
    pub gravity: bool,
    pub mass: f64,
    pub g: f64,
}

/// Tweezer parameters shared by every site of an array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TweezerSpec {
    pub depth: f64,
    pub waist: f64,
    pub wavelength: f64,
}

impl TweezerSpec {
    /// 1.94 MHz deep, 0.6 um waist at 488 nm.
    pub fn nominal(constants: &PhysicalConstants) -> Self {
        Self { depth: constants.hz_to_joule(1.94e6), waist: 0.6e-6, wavelength: 488e-9 }
    }
}

impl TrapField {
    pub fn new(tweezers: Vec<Tweezer>, transport: Option<TransportTrap>, gravity: bool, constants: &PhysicalConstants) -> Result<Self> {
        let f = Self { tweezers, transport, gravity, mass: constants.mass, g: constants.g };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.tweezers {
            if !(t.depth >= 0.0 && t.waist > 0.0 && t.wavelength > 0.0) {
                return domain("tweezer depth must be non-negative and waist/wavelength positive");
            }
        }
        if let Some(tr) = &self.transport {
            if !(tr.depth >= 0.0 && tr.waist > 0.0 && tr.wavelength > 0.0) {
                return domain("transport trap depth must be non-negative and waist positive");
            }
            if (tr.axis.norm() - 1.0).abs() > 1e-12 {
                return domain("transport axis must be a unit vector");
            }
            if !(0.0..=1.0).contains(&tr.contrast) {
                return domain("lattice contrast must lie in [0, 1]");
            }
        }
        if !(self.mass > 0.0) {
            return domain("mass must be positive");
        }
        Ok(())
    }

    /// Square `side x side` array centred on the origin with the transport
    /// trap axis placed so that the guide balances gravity at the array plane.
    pub fn square_array(
        side: usize,
        spacing: f64,
        tweezer: TweezerSpec,
        transport: Option<TransportTrap>,
        gravity: bool,
        constants: &PhysicalConstants,
    ) -> Result<Self> {
        if side == 0 {
            return domain("array needs at least one site");
        }
        let off = (side as f64 - 1.0) / 2.0;
        let mut tweezers = Vec::with_capacity(side * side);
        for i in 0..side {
            for j in 0..side {
                tweezers.push(Tweezer {
                    center: Vec3::new((i as f64 - off) * spacing, (j as f64 - off) * spacing, 0.0),
                    depth: tweezer.depth,
                    waist: tweezer.waist,
                    wavelength: tweezer.wavelength,
                });
            }
        }
        let transport = match transport {
            Some(mut tr) if gravity => {
                tr.origin = Vec3::new(0.0, 0.0, gravity_sag(&tr, constants.mass, constants.g)?);
                Some(tr)
            }
            other => other,
        };
        Self::new(tweezers, transport, gravity, constants)
    }

    pub fn single(tweezer: TweezerSpec, transport: Option<TransportTrap>, gravity: bool, constants: &PhysicalConstants) -> Result<Self> {
        Self::square_array(1, 1.0, tweezer, transport, gravity, constants)
    }

    #[inline]
    pub fn potential_and_force(&self, pos: &Vec3) -> (f64, Vec3) {
        let (u, f, _) = self.evaluate(pos);
        (u, f)
    }

    /// Potential, force and the deepest single-tweezer potential magnitude.
    #[inline]
    fn evaluate(&self, pos: &Vec3) -> (f64, Vec3, f64) {
        let mut u = 0.0;
        let mut f = Vec3::zeros();
        let mut deepest: f64 = 0.0;
        for t in &self.tweezers {
            let (ut, ft) = t.potential_and_force(pos);
            u += ut;
            f += ft;
            deepest = deepest.max(-ut);
        }
        if let Some(tr) = &self.transport {
            let (ut, ft) = tr.potential_and_force(pos);
            u += ut;
            f += ft;
        }
        if self.gravity {
            u += self.mass * self.g * pos.z;
            f.z -= self.mass * self.g;
        }
        (u, f, deepest)
    }

    pub fn potential(&self, pos: &Vec3) -> f64 {
        self.potential_and_force(pos).0
    }

    /// Index of the tweezer whose axis is laterally closest to `pos`.
    pub fn nearest_site(&self, pos: &Vec3) -> Option<usize> {
        self.tweezers
            .iter()
            .enumerate()
            .map(|(i, t)| (i, (pos.x - t.center.x).powi(2) + (pos.y - t.center.y).powi(2)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
    }

    /// Background potential at a site centre excluding that site's own
    /// tweezer, used to reference energies to the local trap bottom.
    pub fn site_offset(&self, site: usize) -> f64 {
        let c = self.tweezers[site].center;
        self.potential(&c) - self.tweezers[site].potential_and_force(&c).0
    }

    /// Copy keeping only tweezers that can reach the axis-aligned box
    /// `center +- half` (lateral tails below e^-18 of the depth are dropped).
    pub fn restricted_to(&self, center: &Vec3, half: &Vec3) -> TrapField {
        let tweezers = self
            .tweezers
            .iter()
            .filter(|t| {
                let zr = t.rayleigh_range();
                let zmax = (t.center.z - center.z).abs() + half.z;
                let w = t.waist * (1.0 + (zmax / zr).powi(2)).sqrt();
                let dx = ((t.center.x - center.x).abs() - half.x).max(0.0);
                let dy = ((t.center.y - center.y).abs() - half.y).max(0.0);
                dx * dx + dy * dy < 9.0 * w * w
            })
            .copied()
            .collect();
        TrapField { tweezers, ..self.clone() }
    }

    /// Shortest harmonic period among the tweezers, s.
    pub fn shortest_period(&self) -> f64 {
        self.tweezers
            .iter()
            .map(|t| 2.0 * PI / t.trap_frequencies(self.mass).0)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Vertical offset of the transport axis above the point where its
/// restoring force balances gravity.
pub fn gravity_sag(tr: &TransportTrap, mass: f64, g: f64) -> Result<f64> {
    let w2 = tr.waist * tr.waist;
    let weight = mass * g;
    // Restoring force magnitude 4 U d / w^2 exp(-2 d^2 / w^2) peaks at d = w/2.
    let fmax = 4.0 * tr.depth * (tr.waist / 2.0) / w2 * (-0.5f64).exp();
    if weight >= fmax {
        return domain("transport trap too shallow to hold atoms against gravity");
    }
    let mut d = weight * w2 / (4.0 * tr.depth);
    for _ in 0..60 {
        let e = (-2.0 * d * d / w2).exp();
        let f = 4.0 * tr.depth * d / w2 * e - weight;
        let df = 4.0 * tr.depth / w2 * e * (1.0 - 4.0 * d * d / w2);
        let step = f / df;
        d -= step;
        if step.abs() < 1e-15 * tr.waist {
            break;
        }
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimSettings {
    /// Step inside a tweezer, s.
    pub dt_fine: f64,
    /// Step elsewhere, s.
    pub dt_coarse: f64,
    /// Loaded when the energy above the local trap bottom is below
    /// `-threshold * U0`.
    pub threshold: f64,
    /// Delay of the confirmation check after the nominal evaluation, s.
    pub recheck: f64,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self { dt_fine: 50e-9, dt_coarse: 250e-9, threshold: 0.5, recheck: 0.2e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomState {
    pub position: Vec3,
    pub velocity: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub position: Vec3,
    pub velocity: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<TrajectorySample>,
    pub scatter_events: u64,
    /// Energy above the bottom of the nearest tweezer, J.
    pub final_energy_rel_tweezer: f64,
    pub loaded: bool,
}

/// Precomputed per-run data shared by every trajectory.
struct Stepper<'a> {
    field: &'a TrapField,
    table: Option<&'a ScatterTable>,
    inv_mass: f64,
    kick: f64,
    dt_fine: f64,
    dt_coarse: f64,
    fine_level: f64,
}

impl<'a> Stepper<'a> {
    fn new(field: &'a TrapField, table: Option<&'a ScatterTable>, s: &SimSettings) -> Result<Self> {
        if !(s.dt_fine > 0.0 && s.dt_coarse >= s.dt_fine) {
            return domain("time steps must be positive with dt_coarse >= dt_fine");
        }
        let period = field.shortest_period();
        if s.dt_fine > period / 20.0 {
            return Err(Error::Contract(format!(
                "dt_fine = {:.3e} s exceeds 1/20 of the trap period {:.3e} s",
                s.dt_fine, period
            )));
        }
        if let Some(t) = table {
            let p = t.max_rate() * s.dt_coarse;
            if p > 0.1 {
                return Err(Error::Contract(format!(
                    "scatter probability per step {p:.3} exceeds 0.1 at dt = {:.3e} s",
                    s.dt_coarse
                )));
            }
        }
        let depth = field.tweezers.iter().map(|t| t.depth).fold(0.0, f64::max);
        Ok(Self {
            field,
            table,
            inv_mass: 1.0 / field.mass,
            kick: table.map(|t| t.recoil() / field.mass).unwrap_or(0.0),
            dt_fine: s.dt_fine,
            dt_coarse: s.dt_coarse,
            fine_level: 0.02 * depth,
        })
    }

    fn walker(&self, s: &AtomState) -> Walker {
        let (_, f, deepest) = self.field.evaluate(&s.position);
        Walker { x: s.position, v: s.velocity, f, fine: deepest > self.fine_level }
    }

    /// Velocity-Verlet step of at most `max_dt` followed by stochastic
    /// scattering. Returns the step taken and the photons scattered.
    #[inline]
    fn advance(&self, w: &mut Walker, max_dt: f64, rng: &mut RngHandle) -> (f64, u64) {
        let dt = if w.fine { self.dt_fine } else { self.dt_coarse }.min(max_dt);
        w.v += w.f * (0.5 * dt * self.inv_mass);
        w.x += w.v * dt;
        let (_, f, deepest) = self.field.evaluate(&w.x);
        w.f = f;
        w.fine = deepest > self.fine_level;
        w.v += w.f * (0.5 * dt * self.inv_mass);
        let mut n = 0;
        if let Some(t) = self.table {
            for (b, k) in t.beams().iter().enumerate() {
                let rate = t.beam_rate(b, &w.v);
                if rng.uniform() < rate * dt {
                    w.v += (k + isotropic_unit(rng)) * self.kick;
                    n += 1;
                }
            }
        }
        (dt, n)
    }
}

struct Walker {
    x: Vec3,
    v: Vec3,
    f: Vec3,
    fine: bool,
}

impl Walker {
    fn state(&self) -> AtomState {
        AtomState { position: self.x, velocity: self.v }
    }
}

/// Energy of an atom above the bottom of its nearest tweezer, with the site.
pub fn energy_rel_tweezer(field: &TrapField, state: &AtomState) -> Option<(usize, f64)> {
    let site = field.nearest_site(&state.position)?;
    let ke = 0.5 * field.mass * state.velocity.norm_squared();
    Some((site, ke + field.potential(&state.position) - field.site_offset(site)))
}

/// Whether the atom counts as held by `site`.
pub fn is_loaded_at(field: &TrapField, state: &AtomState, site: usize, threshold: f64) -> bool {
    match energy_rel_tweezer(field, state) {
        Some((s, e)) => s == site && e < -threshold * field.tweezers[site].depth,
        None => false,
    }
}

fn check_finite(x: &Vec3, v: &Vec3, t: f64) -> Result<()> {
    if x.iter().chain(v.iter()).all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "non-finite state at t = {t:.6e} s: position {:?}, velocity {:?}",
            x.as_slice(),
            v.as_slice()
        )))
    }
}

/// Integrates one atom for `duration`, storing a sample every
/// `sample_interval` (and at the end). `table = None` disables scattering.
pub fn simulate_trajectory(
    field: &TrapField,
    initial: &AtomState,
    table: Option<&ScatterTable>,
    duration: f64,
    settings: &SimSettings,
    sample_interval: f64,
    rng: &mut RngHandle,
) -> Result<Trajectory> {
    field.validate()?;
    let stepper = Stepper::new(field, table, settings)?;
    check_finite(&initial.position, &initial.velocity, 0.0)?;
    let mut w = stepper.walker(initial);
    let mut t = 0.0;
    let mut samples = vec![TrajectorySample { t, position: w.x, velocity: w.v }];
    let mut next_sample = sample_interval;
    let mut events = 0;
    while t < duration {
        let (dt, n) = stepper.advance(&mut w, duration - t, rng);
        events += n;
        t += dt;
        if t >= next_sample || t >= duration {
            check_finite(&w.x, &w.v, t)?;
            samples.push(TrajectorySample { t, position: w.x, velocity: w.v });
            while next_sample <= t {
                next_sample += sample_interval;
            }
        }
    }
    let (site, e) = energy_rel_tweezer(field, &w.state()).unwrap_or((0, f64::INFINITY));
    let loaded = field
        .tweezers
        .get(site)
        .map(|tw| e < -settings.threshold * tw.depth)
        .unwrap_or(false);
    Ok(Trajectory { samples, scatter_events: events, final_energy_rel_tweezer: e, loaded })
}

/// Evolves an atom to each time in `times` (ascending) and reports whether
/// it is loaded at `site` there.
fn loaded_at_times(
    stepper: &Stepper,
    field: &TrapField,
    state: AtomState,
    times: &[f64],
    site: usize,
    threshold: f64,
    rng: &mut RngHandle,
) -> Result<Vec<bool>> {
    let mut w = stepper.walker(&state);
    let mut t = 0.0;
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        while t < target {
            t += stepper.advance(&mut w, target - t, rng).0;
        }
        check_finite(&w.x, &w.v, t)?;
        out.push(is_loaded_at(field, &w.state(), site, threshold));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermalCloud {
    pub t_radial: f64,
    pub t_axial: f64,
}

impl ThermalCloud {
    /// Temperatures predicted by the authors' molasses simulation.
    pub const SIMULATED: ThermalCloud = ThermalCloud { t_radial: 77e-6, t_axial: 33e-6 };
    /// Measured radial temperature, axial taken from the simulation.
    pub const MEASURED_RADIAL: ThermalCloud = ThermalCloud { t_radial: 87e-6, t_axial: 33e-6 };

    fn sigmas(&self, c: &PhysicalConstants) -> Vec3 {
        let s = |t: f64| (c.k_b * t / c.mass).sqrt();
        Vec3::new(s(self.t_axial), s(self.t_radial), s(self.t_radial))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapCell {
    /// Initial axial offset from the focus, m.
    pub z: f64,
    /// Initial radial offset from the focus, m.
    pub r: f64,
    pub p_load: f64,
    /// Same ensemble re-evaluated after the confirmation delay.
    pub p_recheck: f64,
    pub n_rep: usize,
}

/// Loading probability after `t_eval` for atoms starting at each `(z, r)`
/// offset from the focus of `site`, with thermal velocities.
#[allow(clippy::too_many_arguments)]
pub fn loading_probability_map(
    field: &TrapField,
    table: Option<&ScatterTable>,
    site: usize,
    grid: &[(f64, f64)],
    t_eval: f64,
    n_rep: usize,
    cloud: ThermalCloud,
    settings: &SimSettings,
    constants: &PhysicalConstants,
    rng: &RngHandle,
) -> Result<Vec<MapCell>> {
    if site >= field.tweezers.len() {
        return domain("site index out of range");
    }
    if n_rep == 0 {
        return domain("n_rep must be positive");
    }
    let center = field.tweezers[site].center;
    let stepper = Stepper::new(field, table, settings)?;
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|c| (0..n_rep).map(move |r| (c, r))).collect();
    let times = [t_eval, t_eval + settings.recheck];
    let outcomes = jobs
        .par_iter()
        .map(|&(c, r)| {
            let mut rng = rng.child((c * n_rep + r) as u64);
            let (z, rr) = grid[c];
            let v = maxwell_boltzmann_sample(cloud.t_radial, cloud.t_axial, constants.mass, constants.k_b, &mut rng)?;
            let state = AtomState { position: center + Vec3::new(rr, 0.0, z), velocity: v };
            loaded_at_times(&stepper, field, state, &times, site, settings.threshold, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(grid
        .iter()
        .enumerate()
        .map(|(c, &(z, r))| {
            let chunk = &outcomes[c * n_rep..(c + 1) * n_rep];
            let count = |i: usize| chunk.iter().filter(|o| o[i]).count() as f64 / n_rep as f64;
            MapCell { z, r, p_load: count(0), p_recheck: count(1), n_rep }
        })
        .collect())
}

/// Sampling box for the reservoir around one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadingSetup {
    pub site: usize,
    /// Half-extent of the reservoir box, m.
    pub box_half: Vec3,
    /// Half-extent of the oversampled inner box, m.
    pub inner_half: Vec3,
    /// Fraction of atoms started in the inner box.
    pub inner_fraction: f64,
    pub n_atoms: usize,
    pub t_grid: Vec<f64>,
    pub cloud: ThermalCloud,
    pub settings: SimSettings,
}

impl LoadingSetup {
    /// Box of +-6 waists laterally and +-6 Rayleigh ranges axially, with a
    /// quarter of the atoms started within +-1.5 waists / Rayleigh ranges.
    pub fn around(field: &TrapField, site: usize, n_atoms: usize, t_grid: Vec<f64>, cloud: ThermalCloud) -> Self {
        let t = field.tweezers[site];
        let (w, zr) = (t.waist, t.rayleigh_range());
        Self {
            site,
            box_half: Vec3::new(6.0 * w, 6.0 * w, 6.0 * zr),
            inner_half: Vec3::new(1.5 * w, 1.5 * w, 1.5 * zr),
            inner_fraction: 0.25,
            n_atoms,
            t_grid,
            cloud,
            settings: SimSettings::default(),
        }
    }

    fn validate(&self, field: &TrapField) -> Result<()> {
        if self.site >= field.tweezers.len() {
            return domain("site index out of range");
        }
        if self.n_atoms < 2 {
            return domain("need at least two sampled atoms");
        }
        if self.t_grid.is_empty() || self.t_grid.windows(2).any(|w| w[1] <= w[0]) || self.t_grid[0] < 0.0 {
            return domain("time grid must be non-empty, non-negative and increasing");
        }
        if (0..3).any(|i| !(self.inner_half[i] > 0.0 && self.inner_half[i] <= self.box_half[i])) {
            return domain("inner box must be non-empty and inside the reservoir box");
        }
        if !(0.0..1.0).contains(&self.inner_fraction) {
            return domain("inner fraction must lie in [0, 1)");
        }
        if self.cloud.t_radial < 0.0 || self.cloud.t_axial < 0.0 {
            return domain("temperatures must be non-negative");
        }
        Ok(())
    }
}

/// Density-independent part of the loading curve: `capture_volume[i]` is
/// the expected number of loaded atoms at `t[i]` per unit reservoir density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadingKernel {
    pub t: Vec<f64>,
    /// m^3.
    pub capture_volume: Vec<f64>,
    pub capture_volume_err: Vec<f64>,
    /// Capture volume re-evaluated one confirmation delay after the last grid time.
    pub recheck_volume: f64,
    pub n_atoms: usize,
    pub reinjections: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadingCurve {
    pub t: Vec<f64>,
    /// Reservoir density, atoms/m^3.
    pub density: f64,
    /// Expected number of loaded atoms.
    pub mean_loaded: Vec<f64>,
    pub p_geq1: Vec<f64>,
    pub p_geq1_err: Vec<f64>,
    pub fit: Option<FitResult>,
    pub fit_error: Option<String>,
}

impl LoadingCurve {
    pub fn tau(&self) -> Option<f64> {
        self.fit.as_ref().and_then(|f| f.param("tau"))
    }

    pub fn p_inf(&self) -> Option<f64> {
        self.fit.as_ref().and_then(|f| f.param("p_inf"))
    }

    /// Probability at a grid time (nearest grid point).
    pub fn p_at(&self, t: f64) -> f64 {
        let i = self
            .t
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        self.p_geq1[i]
    }
}

impl LoadingKernel {
    /// Loading curve at reservoir density `density` (atoms/m^3). Atoms load
    /// independently, so the number held is Poisson distributed.
    pub fn curve(&self, density: f64) -> Result<LoadingCurve> {
        if !(density >= 0.0) {
            return domain("density must be non-negative");
        }
        let mean_loaded: Vec<f64> = self.capture_volume.iter().map(|g| density * g.max(0.0)).collect();
        let p_geq1: Vec<f64> = mean_loaded.iter().map(|m| -(-m).exp_m1()).collect();
        let p_geq1_err: Vec<f64> = self
            .capture_volume_err
            .iter()
            .zip(&mean_loaded)
            .map(|(e, m)| density * e * (-m).exp())
            .collect();
        let mut curve = LoadingCurve {
            t: self.t.clone(),
            density,
            mean_loaded,
            p_geq1,
            p_geq1_err,
            fit: None,
            fit_error: None,
        };
        if density == 0.0 {
            curve.fit_error = Some("empty reservoir: nothing to fit".into());
            return Ok(curve);
        }
        let fit = (|| {
            // Every grid time reuses the same trajectories, so the point
            // errors are strongly correlated; weight the points equally at
            // their RMS error instead of trusting the early, tight ones.
            let n = curve.p_geq1_err.len().max(1) as f64;
            let rms = (curve.p_geq1_err.iter().map(|e| e * e).sum::<f64>() / n).sqrt().max(1e-6);
            let data = FitData::new(curve.t.clone(), curve.p_geq1.clone(), vec![rms; curve.t.len()])?;
            let last = *curve.t.last().unwrap_or(&1e-3);
            let p_last = curve.p_geq1.last().copied().unwrap_or(0.5).clamp(0.1, 0.99);
            let mut best: Option<FitResult> = None;
            let mut last_err = None;
            for tau0 in [last / 8.0, last / 3.0, last, 3.0 * last] {
                match nls_fit(&SaturatingExponential, &data, &[p_last, tau0]) {
                    Ok(r) if r.converged => {
                        if best.as_ref().map_or(true, |b| r.chi2 < b.chi2) {
                            best = Some(r);
                        }
                    }
                    Ok(r) => last_err = Some(Error::Convergence(format!("loading-curve fit: {}", r.message))),
                    Err(e) => last_err = Some(e),
                }
            }
            best.ok_or_else(|| last_err.unwrap_or_else(|| Error::Convergence("loading-curve fit failed".into())))
        })();
        match fit {
            Ok(r) => curve.fit = Some(r),
            Err(e) => curve.fit_error = Some(e.to_string()),
        }
        Ok(curve)
    }
}

/// Simulates independent reservoir atoms around `setup.site`. Atoms start
/// uniformly in the box (oversampling the inner box, compensated by
/// weights); an atom leaving the box is replaced by one entering through a
/// wall with a flux-weighted thermal velocity, keeping the density fixed.
pub fn loading_kernel(
    field: &TrapField,
    table: Option<&ScatterTable>,
    setup: &LoadingSetup,
    constants: &PhysicalConstants,
    rng: &RngHandle,
) -> Result<LoadingKernel> {
    setup.validate(field)?;
    let center = field.tweezers[setup.site].center;
    let local = field.restricted_to(&center, &setup.box_half);
    let site = local
        .nearest_site(&center)
        .ok_or_else(|| Error::Domain("no tweezer inside the sampling box".into()))?;
    let stepper = Stepper::new(&local, table, &setup.settings)?;

    let bh = setup.box_half;
    let ih = setup.inner_half;
    let v_box = 8.0 * bh.x * bh.y * bh.z;
    let v_in = 8.0 * ih.x * ih.y * ih.z;
    let alpha = setup.inner_fraction;
    let sig = setup.cloud.sigmas(constants);
    // Wall-crossing rate per face pair is proportional to area x sigma.
    let face_w = [bh.y * bh.z * sig.x, bh.x * bh.z * sig.y, bh.x * bh.y * sig.z];
    let face_total: f64 = face_w.iter().sum();

    let mut times = setup.t_grid.clone();
    times.push(setup.t_grid.last().copied().unwrap_or(0.0) + setup.settings.recheck);

    // Every box crossing of a slot draws from its own stream, so two
    // fields that perturb one crossing differently still share the next.
    let run = |i: usize| -> Result<(f64, Vec<bool>, u64)> {
        let slot = rng.child(i as u64);
        let mut rng = slot.child(0);
        let inner = (i as f64 + 0.5) / setup.n_atoms as f64 <= alpha;
        let half = if inner { ih } else { bh };
        let offset = Vec3::new(
            (2.0 * rng.uniform() - 1.0) * half.x,
            (2.0 * rng.uniform() - 1.0) * half.y,
            (2.0 * rng.uniform() - 1.0) * half.z,
        );
        let in_inner = offset.x.abs() <= ih.x && offset.y.abs() <= ih.y && offset.z.abs() <= ih.z;
        let q = if in_inner { alpha / v_in } else { 0.0 } + (1.0 - alpha) / v_box;
        let weight = 1.0 / q;
        let velocity = Vec3::new(sig.x * rng.normal(), sig.y * rng.normal(), sig.z * rng.normal());
        let mut w = stepper.walker(&AtomState { position: center + offset, velocity });
        let mut t = 0.0;
        let mut out = Vec::with_capacity(times.len());
        let mut reinjections = 0u64;
        for &target in &times {
            while t < target {
                t += stepper.advance(&mut w, target - t, &mut rng).0;
                let d = w.x - center;
                if d.x.abs() > bh.x || d.y.abs() > bh.y || d.z.abs() > bh.z {
                    reinjections += 1;
                    rng = slot.child(reinjections);
                    let mut fresh = wall_injection(&bh, &sig, &face_w, face_total, &mut rng);
                    fresh.position += center;
                    w = stepper.walker(&fresh);
                }
            }
            check_finite(&w.x, &w.v, t)?;
            out.push(is_loaded_at(&local, &w.state(), site, setup.settings.threshold));
        }
        Ok((weight, out, reinjections))
    };
    let results = (0..setup.n_atoms).into_par_iter().map(run).collect::<Result<Vec<_>>>()?;

    let n = setup.n_atoms as f64;
    let k = setup.t_grid.len();
    let mut capture_volume = vec![0.0; k];
    let mut capture_volume_err = vec![0.0; k];
    let mut recheck_volume = 0.0;
    for j in 0..k {
        let vals: Vec<f64> = results.iter().map(|(w, o, _)| if o[j] { *w } else { 0.0 }).collect();
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        capture_volume[j] = mean;
        capture_volume_err[j] = (var / n).sqrt();
    }
    for (w, o, _) in &results {
        if o[k] {
            recheck_volume += w / n;
        }
    }
    Ok(LoadingKernel {
        t: setup.t_grid.clone(),
        capture_volume,
        capture_volume_err,
        recheck_volume,
        n_atoms: setup.n_atoms,
        reinjections: results.iter().map(|r| r.2).sum(),
    })
}

/// A new atom crossing a random wall inward, with the flux-weighted
/// (Rayleigh) normal velocity.
fn wall_injection(bh: &Vec3, sig: &Vec3, face_w: &[f64; 3], total: f64, rng: &mut RngHandle) -> AtomState {
    let u = rng.uniform() * total;
    let axis = if u < face_w[0] {
        0
    } else if u < face_w[0] + face_w[1] {
        1
    } else {
        2
    };
    let side = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
    let mut pos = Vec3::zeros();
    let mut vel = Vec3::zeros();
    for i in 0..3 {
        if i == axis {
            // Just inside the wall so the atom is not immediately re-flagged.
            pos[i] = side * bh[i] * (1.0 - 1e-9);
            let speed = sig[i] * (-2.0 * (1.0 - rng.uniform()).ln()).sqrt();
            vel[i] = -side * speed;
        } else {
            pos[i] = (2.0 * rng.uniform() - 1.0) * bh[i];
            vel[i] = sig[i] * rng.normal();
        }
    }
    AtomState { position: pos, velocity: vel }
}

/// Convenience wrapper: kernel followed by the curve at one density.
pub fn loading_curve(
    field: &TrapField,
    table: Option<&ScatterTable>,
    density: f64,
    setup: &LoadingSetup,
    constants: &PhysicalConstants,
    rng: &RngHandle,
) -> Result<LoadingCurve> {
    loading_kernel(field, table, setup, constants, rng)?.curve(density)
}

/// Index of the central site of a `side` x `side` array built by
/// [`TrapField::square_array`]; for even sides, the one just below the centre.
pub fn central_site(side: usize) -> usize {
    let c = side / 2;
    if side % 2 == 1 {
        c * side + c
    } else {
        (c - 1) * side + (c - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArraySizeResult {
    pub side: usize,
    pub tau: Option<f64>,
    pub p_final: f64,
    pub kernel: LoadingKernel,
}

/// Loading time of the central site for square arrays of each `side`.
/// Every size is driven by the same random stream, so the sampled atoms
/// coincide and the comparison isolates the effect of the array.
#[allow(clippy::too_many_arguments)]
pub fn array_size_independence(
    sides: &[usize],
    spacing: f64,
    tweezer: TweezerSpec,
    transport: Option<TransportTrap>,
    table: Option<&ScatterTable>,
    density: f64,
    n_atoms: usize,
    t_grid: &[f64],
    cloud: ThermalCloud,
    settings: &SimSettings,
    constants: &PhysicalConstants,
    rng: &RngHandle,
) -> Result<Vec<ArraySizeResult>> {
    sides
        .iter()
        .map(|&side| {
            let field = TrapField::square_array(side, spacing, tweezer, transport, true, constants)?;
            let mut setup = LoadingSetup::around(&field, central_site(side), n_atoms, t_grid.to_vec(), cloud);
            setup.settings = *settings;
            let kernel = loading_kernel(&field, table, &setup, constants, rng)?;
            let curve = kernel.curve(density)?;
            Ok(ArraySizeResult {
                side,
                tau: curve.tau(),
                p_final: *curve.p_geq1.last().unwrap_or(&0.0),
                kernel,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::light::FourLevelDrive;

    fn c() -> PhysicalConstants {
        PhysicalConstants::CODATA
    }

    pub(crate) fn transport(constants: &PhysicalConstants) -> TransportTrap {
        TransportTrap {
            origin: Vec3::zeros(),
            axis: Vec3::x(),
            depth: standing_wave_depth(3.3e3, 280e-6, 160.0, constants.c),
            waist: 280e-6,
            contrast: 0.0,
            wavelength: 1036e-9,
        }
    }

    #[test]
    fn focus_is_minimum() {
        let k = c();
        let f = TrapField::single(TweezerSpec::nominal(&k), None, false, &k).unwrap();
        let (u, force) = f.potential_and_force(&Vec3::zeros());
        assert!((u + f.tweezers[0].depth).abs() < 1e-40);
        assert!(force.norm() == 0.0);
    }

    #[test]
    fn depth_in_temperature_units() {
        let k = c();
        let t = TweezerSpec::nominal(&k).depth / k.k_b;
        assert!((t * 1e6 - 93.1).abs() < 0.1, "{t}");
    }

    #[test]
    fn transport_depth_scale() {
        let k = c();
        let u = standing_wave_depth(3.3e3, 280e-6, 160.0, k.c) / k.k_b;
        assert!(u > 1.5e-3 && u < 2.5e-3, "{u}");
    }

    #[test]
    fn gravity_balanced_at_array_plane() {
        let k = c();
        let f = TrapField::single(TweezerSpec { depth: 0.0, ..TweezerSpec::nominal(&k) }, Some(transport(&k)), true, &k).unwrap();
        let force = f.potential_and_force(&Vec3::zeros()).1;
        assert!(force.norm() < 1e-9 * k.mass * k.g);
    }

    #[test]
    fn analytic_force_matches_differences() {
        let k = c();
        let mut tr = transport(&k);
        tr.contrast = 0.3;
        let f = TrapField::square_array(2, 1.5e-6, TweezerSpec::nominal(&k), Some(tr), true, &k).unwrap();
        let mut rng = RngHandle::new(8, 1);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let p = Vec3::new(
                (rng.uniform() - 0.5) * 4e-6,
                (rng.uniform() - 0.5) * 4e-6,
                (rng.uniform() - 0.5) * 8e-6,
            );
            let fa = f.potential_and_force(&p).1;
            let h = 1e-10;
            let mut fd = Vec3::zeros();
            for i in 0..3 {
                let mut a = p;
                let mut b = p;
                a[i] += h;
                b[i] -= h;
                fd[i] = -(f.potential(&a) - f.potential(&b)) / (2.0 * h);
            }
            // Relative to the typical force scale so near-zero components
            // do not dominate.
            let scale = fa.norm().max(f.tweezers[0].depth / f.tweezers[0].waist * 1e-3);
            worst = worst.max((fa - fd).norm() / scale);
        }
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn atom_at_rest_stays_at_focus() {
        let k = c();
        let f = TrapField::single(TweezerSpec::nominal(&k), None, false, &k).unwrap();
        let s = AtomState { position: Vec3::zeros(), velocity: Vec3::zeros() };
        let mut rng = RngHandle::new(1, 0);
        let tr = simulate_trajectory(&f, &s, None, 1e-3, &SimSettings::default(), 1e-5, &mut rng).unwrap();
        assert!(tr.samples.iter().all(|p| p.position.norm() < 1e-9));
        assert!(tr.loaded);
    }

    #[test]
    fn energy_conserved_without_scattering() {
        let k = c();
        let f = TrapField::single(TweezerSpec::nominal(&k), Some(transport(&k)), true, &k).unwrap();
        let u0 = f.tweezers[0].depth;
        let s = AtomState { position: Vec3::new(0.2e-6, -0.1e-6, 0.5e-6), velocity: Vec3::new(0.03, 0.02, -0.04) };
        let e0 = 0.5 * k.mass * s.velocity.norm_squared() + f.potential(&s.position);
        assert!(e0 - f.site_offset(0) < 0.0);
        let mut rng = RngHandle::new(1, 0);
        let tr = simulate_trajectory(&f, &s, None, 1e-3, &SimSettings::default(), 1e-6, &mut rng).unwrap();
        let drift = tr
            .samples
            .iter()
            .map(|p| (0.5 * k.mass * p.velocity.norm_squared() + f.potential(&p.position) - e0).abs())
            .fold(0.0, f64::max);
        assert!(drift / u0 < 1e-4, "drift {}", drift / u0);
    }

    #[test]
    fn step_contracts() {
        let k = c();
        let f = TrapField::single(TweezerSpec::nominal(&k), None, false, &k).unwrap();
        let s = AtomState { position: Vec3::zeros(), velocity: Vec3::zeros() };
        let mut rng = RngHandle::new(1, 0);
        let coarse = SimSettings { dt_fine: 5e-6, dt_coarse: 5e-6, ..Default::default() };
        assert!(matches!(
            simulate_trajectory(&f, &s, None, 1e-4, &coarse, 1e-5, &mut rng),
            Err(Error::Contract(_))
        ));
        let table = ScatterTable::build(&FourLevelDrive::nominal(&k), 0.0).unwrap();
        let slow = SimSettings { dt_fine: 50e-9, dt_coarse: 1e-6, ..Default::default() };
        assert!(matches!(
            simulate_trajectory(&f, &s, Some(&table), 1e-4, &slow, 1e-5, &mut rng),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn nan_state_reported() {
        let k = c();
        let f = TrapField::single(TweezerSpec::nominal(&k), None, false, &k).unwrap();
        let s = AtomState { position: Vec3::new(f64::NAN, 0.0, 0.0), velocity: Vec3::zeros() };
        let mut rng = RngHandle::new(1, 0);
        let r = simulate_trajectory(&f, &s, None, 1e-5, &SimSettings::default(), 1e-6, &mut rng);
        assert!(matches!(r, Err(Error::Numerical(_))));
    }

    #[test]
    fn restriction_keeps_neighbourhood() {
        let k = c();
        let f = TrapField::square_array(16, 4.5e-6, TweezerSpec::nominal(&k), None, false, &k).unwrap();
        let local = f.restricted_to(&f.tweezers[0].center, &Vec3::new(4.8e-6, 4.8e-6, 14e-6));
        assert!(local.tweezers.len() < 20 && local.tweezers.len() >= 4);
        let p = f.tweezers[0].center + Vec3::new(1e-6, 2e-6, 3e-6);
        assert!((local.potential(&p) - f.potential(&p)).abs() < 1e-12 * f.tweezers[0].depth);
    }

    #[test]
    fn wall_injection_enters_box() {
        let mut rng = RngHandle::new(3, 3);
        let bh = Vec3::new(1.0, 2.0, 3.0);
        let sig = Vec3::new(0.1, 0.2, 0.2);
        let fw = [bh.y * bh.z * sig.x, bh.x * bh.z * sig.y, bh.x * bh.y * sig.z];
        let total = fw.iter().sum();
        for _ in 0..1000 {
            let s = wall_injection(&bh, &sig, &fw, total, &mut rng);
            let next = s.position + s.velocity * 1e-6;
            assert!((0..3).all(|i| next[i].abs() < bh[i]));
        }
    }

    #[test]
    fn empty_reservoir_never_loads() {
        let kernel = LoadingKernel {
            t: vec![1e-3, 2e-3],
            capture_volume: vec![1e-18, 2e-18],
            capture_volume_err: vec![1e-19, 1e-19],
            recheck_volume: 2e-18,
            n_atoms: 10,
            reinjections: 0,
        };
        let c = kernel.curve(0.0).unwrap();
        assert!(c.p_geq1.iter().all(|&p| p == 0.0));
    }
}
