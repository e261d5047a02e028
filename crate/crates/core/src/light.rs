//! Two-tone intercombination-line molasses on the four-level system
//! {g-, g+, e-, e+} (ground and excited m = -1/2, +1/2).
//!
//! Each tone addresses one excited Zeeman level. Its polarisation decides
//! which ground level(s) it couples: `Pi` couples equal m, `SigmaPlus` and
//! `SigmaMinus` the opposite m, `LinearMixed` both. The off-resonant
//! coupling of a tone to the other excited level (one Zeeman splitting
//! away) is dropped, which makes the rotating-frame Hamiltonian static.

use nalgebra::{Complex, SMatrix, SVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::phys::{isotropic_unit, LaserTone, PhysicalConstants, Polarization, Vec3};
use crate::rng::RngHandle;

type C64 = Complex<f64>;
type Liouvillian = SMatrix<C64, 16, 16>;
pub type DensityMatrix = SMatrix<C64, 4, 4>;

const G_MINUS: usize = 0;
const G_PLUS: usize = 1;
const E_MINUS: usize = 2;
const E_PLUS: usize = 3;

/// Branching ratio of an excited level into the ground level of equal m.
const PI_BRANCH: f64 = 1.0 / 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourLevelDrive {
    /// `tones[0]` addresses e(m=-1/2), `tones[1]` e(m=+1/2). Intensities are
    /// per beam; the tone `unit_k` is ignored in favour of `beams`.
    pub tones: [LaserTone; 2],
    /// Excited-state Zeeman splitting, rad/s.
    pub zeeman_splitting: f64,
    /// Propagation directions; every beam carries both tones.
    pub beams: Vec<Vec3>,
    /// Angle between the beams and the quantisation axis, rad.
    pub angle_to_field: f64,
    /// Single-photon recoil momentum, kg m/s.
    pub recoil_momentum: f64,
}

/// Direction of the molasses beam pair: 25.6 degrees from the transport
/// axis (x) and 62 degrees from a horizontal bias field lying at 45 degrees
/// to that axis. Gravity points along -z.
pub fn molasses_axis() -> Vec3 {
    let alpha = 25.6f64.to_radians();
    let field = Vec3::new(1.0, 1.0, 0.0).normalize();
    // k = (cos a, sin a cos p, sin a sin p) with k.B = cos 62 deg.
    let cos_p = (62f64.to_radians().cos() * 2f64.sqrt() - alpha.cos()) / alpha.sin();
    let sin_p = (1.0 - cos_p * cos_p).sqrt();
    let k = Vec3::new(alpha.cos(), alpha.sin() * cos_p, alpha.sin() * sin_p);
    debug_assert!((k.dot(&field) - 62f64.to_radians().cos()).abs() < 1e-12);
    k
}

impl FourLevelDrive {
    pub fn new(
        tones: [LaserTone; 2],
        zeeman_splitting: f64,
        beams: Vec<Vec3>,
        angle_to_field: f64,
        recoil_momentum: f64,
    ) -> Result<Self> {
        let d = Self { tones, zeeman_splitting, beams, angle_to_field, recoil_momentum };
        d.validate()?;
        Ok(d)
    }

    /// Molasses operating point: two tones 4.4 linewidths red of their
    /// Zeeman-resolved transitions at 4 I_sat each, on a counter-propagating
    /// beam pair.
    pub fn nominal(constants: &PhysicalConstants) -> Self {
        Self::with_detuning_and_saturation(constants, -4.4, 4.0)
    }

    /// Nominal geometry with a detuning in linewidths and per-tone s.
    pub fn with_detuning_and_saturation(constants: &PhysicalConstants, detuning: f64, s: f64) -> Self {
        let gamma = 2.0 * std::f64::consts::PI * 182.4e3;
        let i_sat = 4.2; // 0.42 mW/cm^2
        let wavelength = 555.8e-9;
        let k = molasses_axis();
        let tone = LaserTone {
            wavelength,
            detuning: detuning * gamma,
            intensity: s * i_sat,
            saturation_intensity: i_sat,
            linewidth: gamma,
            unit_k: k,
            polarization: Polarization::LinearMixed,
        };
        Self {
            tones: [tone, tone],
            zeeman_splitting: 2.0 * std::f64::consts::PI * 12e6,
            beams: vec![k, -k],
            angle_to_field: 62f64.to_radians(),
            recoil_momentum: constants.hbar * 2.0 * std::f64::consts::PI / wavelength,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.tones {
            LaserTone::new(
                t.wavelength,
                t.detuning,
                t.intensity,
                t.saturation_intensity,
                t.linewidth,
                t.unit_k,
                t.polarization,
            )?;
        }
        if (self.tones[0].linewidth - self.tones[1].linewidth).abs() > 1e-9 * self.tones[0].linewidth {
            return domain("both tones must address the same transition linewidth");
        }
        let spacing_error = (self.tone_spacing() - self.zeeman_splitting).abs();
        if spacing_error > 2.0 * std::f64::consts::PI * 1e3 {
            return domain(format!(
                "tone spacing differs from the Zeeman splitting by {:.1} Hz",
                spacing_error / (2.0 * std::f64::consts::PI)
            ));
        }
        for b in &self.beams {
            if (b.norm() - 1.0).abs() > 1e-12 {
                return domain("beam directions must be unit vectors");
            }
        }
        if !(self.recoil_momentum > 0.0) {
            return domain("recoil momentum must be positive");
        }
        Ok(())
    }

    /// Frequency difference of the two tones, rad/s.
    pub fn tone_spacing(&self) -> f64 {
        self.zeeman_splitting + self.tones[1].detuning - self.tones[0].detuning
    }

    pub fn linewidth(&self) -> f64 {
        self.tones[0].linewidth
    }

    fn total_saturation(&self, tone: usize) -> f64 {
        self.tones[tone].saturation() * self.beams.len() as f64
    }

    /// Fraction of tone `tone`'s light carried by one beam.
    fn beam_share(&self) -> f64 {
        1.0 / self.beams.len().max(1) as f64
    }
}

/// Rabi couplings `omega[tone][ground]`, including the sign of the
/// corresponding Clebsch-Gordan coefficient.
fn couplings(drive: &FourLevelDrive, sat: [f64; 2]) -> [[f64; 2]; 2] {
    let gamma = drive.linewidth();
    let mut out = [[0.0; 2]; 2];
    for (k, row) in out.iter_mut().enumerate() {
        let omega = gamma * (sat[k] / 2.0).sqrt();
        // k = 0 is e-, k = 1 is e+; the same-m ground has index k.
        let pi_sign = if k == 0 { 1.0 } else { -1.0 };
        let (same, other) = match drive.tones[k].polarization {
            Polarization::Pi => (pi_sign, 0.0),
            Polarization::SigmaPlus => (0.0, if k == 1 { 1.0 } else { 0.0 }),
            Polarization::SigmaMinus => (0.0, if k == 0 { 1.0 } else { 0.0 }),
            Polarization::LinearMixed => (pi_sign, 1.0),
        };
        row[k] = same * omega;
        row[1 - k] = other * omega;
    }
    out
}

/// Steady-state density matrix for Rabi couplings `omega[tone][ground]` and
/// effective detunings `delta[tone]` (laser minus transition, rad/s).
pub fn steady_state_density_matrix(omega: [[f64; 2]; 2], delta: [f64; 2], gamma: f64) -> Result<DensityMatrix> {
    let zero = C64::new(0.0, 0.0);
    let mut h = DensityMatrix::from_element(zero);
    let excited = [E_MINUS, E_PLUS];
    for k in 0..2 {
        h[(excited[k], excited[k])] = C64::new(-delta[k], 0.0);
        for g in 0..2 {
            let w = C64::new(omega[k][g] / 2.0, 0.0);
            h[(excited[k], g)] = w;
            h[(g, excited[k])] = w;
        }
    }

    let mut jumps: Vec<DensityMatrix> = Vec::with_capacity(4);
    for (e, g_same, g_other) in [(E_MINUS, G_MINUS, G_PLUS), (E_PLUS, G_PLUS, G_MINUS)] {
        let mut l = DensityMatrix::from_element(zero);
        l[(g_same, e)] = C64::new((gamma * PI_BRANCH).sqrt(), 0.0);
        jumps.push(l);
        let mut l = DensityMatrix::from_element(zero);
        l[(g_other, e)] = C64::new((gamma * (1.0 - PI_BRANCH)).sqrt(), 0.0);
        jumps.push(l);
    }

    // Row-major vectorisation: d rho_ij / dt = sum_kl L[(4i+j),(4k+l)] rho_kl.
    let mut lv = Liouvillian::from_element(zero);
    let mi = C64::new(0.0, -1.0);
    let id = DensityMatrix::identity();
    let mut add_sandwich = |a: &DensityMatrix, b: &DensityMatrix, c: C64| {
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    let aik = a[(i, k)];
                    if aik == zero {
                        continue;
                    }
                    for l in 0..4 {
                        let blj = b[(l, j)];
                        if blj != zero {
                            lv[(4 * i + j, 4 * k + l)] += c * aik * blj;
                        }
                    }
                }
            }
        }
    };
    add_sandwich(&h, &id, mi);
    add_sandwich(&id, &h, -mi);
    let half = C64::new(-0.5, 0.0);
    for l in &jumps {
        let ld = l.adjoint();
        let ldl = ld * l;
        add_sandwich(l, &ld, C64::new(1.0, 0.0));
        add_sandwich(&ldl, &id, half);
        add_sandwich(&id, &ldl, half);
    }

    // Replace the g- population equation by the trace condition.
    let mut rhs = SVector::<C64, 16>::from_element(zero);
    for c in 0..16 {
        lv[(0, c)] = zero;
    }
    for i in 0..4 {
        lv[(0, 5 * i)] = C64::new(1.0, 0.0);
    }
    rhs[0] = C64::new(1.0, 0.0);

    let sol = lv
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("Liouvillian is singular: no unique steady state".into()))?;
    let rho = DensityMatrix::from_fn(|i, j| sol[4 * i + j]);
    let bad = rho.iter().any(|z| !z.re.is_finite() || !z.im.is_finite())
        || (0..4).any(|i| rho[(i, i)].re < -1e-9 || rho[(i, i)].re > 1.0 + 1e-9);
    if bad {
        return Err(Error::Numerical(
            "steady-state solve is ill-conditioned (unphysical populations)".into(),
        ));
    }
    Ok(rho)
}

/// Excited populations when every beam's light is Doppler shifted by the
/// same `shift` (rad/s, added to the transition frequency), with the full
/// multi-beam intensity of each tone.
pub fn excited_populations(drive: &FourLevelDrive, shift: f64) -> Result<[f64; 2]> {
    let sat = [drive.total_saturation(0), drive.total_saturation(1)];
    if sat[0] == 0.0 && sat[1] == 0.0 {
        return Ok([0.0, 0.0]);
    }
    let omega = couplings(drive, sat);
    let delta = [drive.tones[0].detuning - shift, drive.tones[1].detuning - shift];
    let rho = steady_state_density_matrix(omega, delta, drive.linewidth())?;
    Ok([rho[(E_MINUS, E_MINUS)].re, rho[(E_PLUS, E_PLUS)].re])
}

/// Photon scattering rate from each beam for an atom moving at `velocity`.
///
/// Each beam's rate is its share of the light times the excited population
/// obtained with the total intensity but that beam's Doppler shift.
pub fn beam_rates(drive: &FourLevelDrive, velocity: &Vec3, light_shift: f64) -> Result<Vec<f64>> {
    let gamma = drive.linewidth();
    drive
        .beams
        .iter()
        .map(|b| {
            let shift = drive.tones[0].wavenumber() * b.dot(velocity) + light_shift;
            let p = excited_populations(drive, shift)?;
            Ok(gamma * drive.beam_share() * (p[0] + p[1]))
        })
        .collect()
}

/// Total scattering rate, 1/s.
pub fn obe_steady_state_rate(drive: &FourLevelDrive, velocity: &Vec3, light_shift: f64) -> Result<f64> {
    drive.validate()?;
    Ok(beam_rates(drive, velocity, light_shift)?.iter().sum())
}

/// Mean radiation-pressure force, N.
pub fn mean_force(drive: &FourLevelDrive, velocity: &Vec3) -> Result<Vec3> {
    let rates = beam_rates(drive, velocity, 0.0)?;
    Ok(drive
        .beams
        .iter()
        .zip(rates)
        .fold(Vec3::zeros(), |acc, (b, r)| acc + b * (r * drive.recoil_momentum)))
}

/// Tabulated per-beam scattering rate against Doppler shift, so trajectory
/// integration avoids solving the master equation at every step.
#[derive(Debug, Clone)]
pub struct ScatterTable {
    beams: Vec<Vec3>,
    wavenumber: f64,
    recoil: f64,
    x0: f64,
    dx: f64,
    rates: Vec<f64>,
    light_shift: f64,
}

impl ScatterTable {
    /// Tabulates over +-50 linewidths with 0.01 linewidth spacing.
    pub fn build(drive: &FourLevelDrive, light_shift: f64) -> Result<Self> {
        drive.validate()?;
        let gamma = drive.linewidth();
        let span = 50.0 * gamma;
        let dx = 0.01 * gamma;
        let n = (2.0 * span / dx).round() as usize + 1;
        let rates = (0..n)
            .into_par_iter()
            .map(|i| {
                let x = -span + i as f64 * dx;
                excited_populations(drive, x).map(|p| gamma * drive.beam_share() * (p[0] + p[1]))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(Self {
            beams: drive.beams.clone(),
            wavenumber: drive.tones[0].wavenumber(),
            recoil: drive.recoil_momentum,
            x0: -span,
            dx,
            rates,
            light_shift,
        })
    }

    pub fn beams(&self) -> &[Vec3] {
        &self.beams
    }

    pub fn recoil(&self) -> f64 {
        self.recoil
    }

    /// Rate from one beam at a Doppler shift, linearly interpolated and
    /// clamped at the table edges.
    pub fn rate_at_shift(&self, shift: f64) -> f64 {
        let u = (shift + self.light_shift - self.x0) / self.dx;
        if u <= 0.0 {
            return self.rates[0];
        }
        let last = self.rates.len() - 1;
        if u >= last as f64 {
            return self.rates[last];
        }
        let i = u as usize;
        let f = u - i as f64;
        self.rates[i] * (1.0 - f) + self.rates[i + 1] * f
    }

    pub fn beam_rate(&self, beam: usize, velocity: &Vec3) -> f64 {
        self.rate_at_shift(self.wavenumber * self.beams[beam].dot(velocity))
    }

    /// Largest per-beam rate anywhere in the table.
    pub fn max_rate(&self) -> f64 {
        self.rates.iter().cloned().fold(0.0, f64::max)
    }
}

/// Scattering kick for one sub-step: with probability `rate * dt` an
/// absorption from the beam plus an isotropic emission, otherwise zero.
pub fn sample_kick(rate: f64, dt: f64, beam_k: &Vec3, hbar_k: f64, rng: &mut RngHandle) -> Result<Vec3> {
    let p = rate * dt;
    if p > 0.1 {
        return Err(Error::Contract(format!(
            "scatter probability per step {p:.3} exceeds 0.1; subdivide the step"
        )));
    }
    if p <= 0.0 || !rng.bernoulli(p) {
        return Ok(Vec3::zeros());
    }
    Ok((beam_k + isotropic_unit(rng)) * hbar_k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MolassesRun {
    pub n_atoms: usize,
    pub duration: f64,
    /// Harmonic radial confinement of the transport trap, rad/s.
    pub radial_omega: f64,
    /// Temperature of the initial thermal ensemble, K.
    pub initial_temperature: f64,
    /// Interval between variance snapshots, s.
    pub snapshot_interval: f64,
}

impl Default for MolassesRun {
    fn default() -> Self {
        Self {
            n_atoms: 2000,
            duration: 60e-3,
            radial_omega: 1.93e3,
            initial_temperature: 40e-6,
            snapshot_interval: 0.5e-3,
        }
    }
}

/// Velocity-variance history of a molasses ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MolassesHistory {
    pub times: Vec<f64>,
    /// Temperatures from the variance along the transport axis, K.
    pub axial: Vec<f64>,
    /// Temperatures along the radial direction onto which the beams project, K.
    pub radial: Vec<f64>,
}

/// Radial direction (perpendicular to x) that the beams project onto.
pub fn radial_reporting_axis(drive: &FourLevelDrive) -> Vec3 {
    let b = drive.beams.first().copied().unwrap_or_else(Vec3::y);
    let r = Vec3::new(0.0, b.y, b.z);
    if r.norm() < 1e-9 {
        Vec3::y()
    } else {
        r.normalize()
    }
}

/// Runs an ensemble of independent atoms in the molasses. The transport
/// trap is modelled as free along x and harmonic across it.
pub fn molasses_history(
    drive: &FourLevelDrive,
    run: &MolassesRun,
    constants: &PhysicalConstants,
    rng: &RngHandle,
) -> Result<MolassesHistory> {
    if run.n_atoms < 2 || !(run.duration > 0.0) || !(run.snapshot_interval > 0.0) {
        return domain("molasses run needs at least two atoms and positive durations");
    }
    let table = ScatterTable::build(drive, 0.0)?;
    let dt_scatter = 0.1 / table.max_rate().max(1.0);
    let dt_trap = 2.0 * std::f64::consts::PI / run.radial_omega.max(1e-30) / 200.0;
    let sub = ((run.snapshot_interval / dt_scatter.min(dt_trap)).ceil() as usize).max(1);
    let dt = run.snapshot_interval / sub as f64;
    let n_snap = (run.duration / run.snapshot_interval).round() as usize;
    let w2 = run.radial_omega * run.radial_omega;
    let m = constants.mass;
    let rhat = radial_reporting_axis(drive);

    // Each atom's axial and radial velocity at every snapshot.
    let per_atom: Vec<Vec<(f64, f64)>> = (0..run.n_atoms)
        .into_par_iter()
        .map(|i| {
            let mut r = rng.child(i as u64);
            let t0 = run.initial_temperature;
            let mut v =
                crate::phys::maxwell_boltzmann_sample(t0, t0, m, constants.k_b, &mut r).unwrap_or_else(|_| Vec3::zeros());
            let sig_x = if w2 > 0.0 { (constants.k_b * t0 / (m * w2)).sqrt() } else { 0.0 };
            let mut x = Vec3::new(0.0, sig_x * r.normal(), sig_x * r.normal());
            let acc = |x: &Vec3| Vec3::new(0.0, -w2 * x.y, -w2 * x.z);
            let mut a = acc(&x);
            let mut out = Vec::with_capacity(n_snap);
            for _ in 0..n_snap {
                for _ in 0..sub {
                    v += a * (0.5 * dt);
                    x += v * dt;
                    a = acc(&x);
                    v += a * (0.5 * dt);
                    for (b, k) in table.beams().iter().enumerate() {
                        let rate = table.beam_rate(b, &v);
                        if r.bernoulli(rate * dt) {
                            v += (k + isotropic_unit(&mut r)) * (table.recoil() / m);
                        }
                    }
                }
                out.push((v.x, v.dot(&rhat)));
            }
            out
        })
        .collect();

    let mut hist = MolassesHistory { times: vec![], axial: vec![], radial: vec![] };
    let n = run.n_atoms as f64;
    for s in 0..n_snap {
        let (mut sa, mut sa2, mut sr, mut sr2) = (0.0, 0.0, 0.0, 0.0);
        for atom in &per_atom {
            let (a, r) = atom[s];
            sa += a;
            sa2 += a * a;
            sr += r;
            sr2 += r * r;
        }
        let var_a = sa2 / n - (sa / n).powi(2);
        let var_r = sr2 / n - (sr / n).powi(2);
        hist.times.push((s + 1) as f64 * run.snapshot_interval);
        hist.axial.push(m * var_a / constants.k_b);
        hist.radial.push(m * var_r / constants.k_b);
    }
    Ok(hist)
}

/// Equilibrium (T_radial, T_axial) from the final 20 % of a molasses run.
pub fn doppler_equilibrium_temperature(
    drive: &FourLevelDrive,
    run: &MolassesRun,
    constants: &PhysicalConstants,
    rng: &RngHandle,
) -> Result<(f64, f64)> {
    if !drive.tones.iter().any(|t| t.detuning < 0.0) {
        return domain("at least one tone must be red detuned for Doppler cooling");
    }
    let hist = molasses_history(drive, run, constants, rng)?;
    let n = hist.times.len();
    let start = (n as f64 * 0.8).floor() as usize;
    let mid = (start + n) / 2;
    if mid <= start || n <= mid {
        return domain("molasses run too short to judge convergence");
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut result = [0.0; 2];
    for (slot, series) in [(0, &hist.radial), (1, &hist.axial)] {
        let a = mean(&series[start..mid]);
        let b = mean(&series[mid..n]);
        let avg = mean(&series[start..n]);
        let drift = (b - a).abs() / avg;
        if drift > 0.05 || !avg.is_finite() {
            return Err(Error::Convergence(format!(
                "{} velocity variance drifts by {:.1} % over the final 20 % of the run",
                if slot == 0 { "radial" } else { "axial" },
                100.0 * drift
            )));
        }
        result[slot] = avg;
    }
    Ok((result[0], result[1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn consts() -> PhysicalConstants {
        PhysicalConstants::CODATA
    }

    #[test]
    fn geometry_of_beam_axis() {
        let k = molasses_axis();
        assert!((k.norm() - 1.0).abs() < 1e-12);
        assert!((k.x - 25.6f64.to_radians().cos()).abs() < 1e-12);
        let b = Vec3::new(1.0, 1.0, 0.0).normalize();
        assert!((k.dot(&b).acos().to_degrees() - 62.0).abs() < 1e-9);
    }

    #[test]
    fn nominal_drive_is_valid() {
        let d = FourLevelDrive::nominal(&consts());
        d.validate().unwrap();
        assert!((d.tone_spacing() - d.zeeman_splitting).abs() < 1.0);
        let mut bad = d.clone();
        bad.tones[1].detuning += 2.0 * std::f64::consts::PI * 5e3;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_intensity_gives_zero_rate() {
        let mut d = FourLevelDrive::nominal(&consts());
        for t in d.tones.iter_mut() {
            t.intensity = 0.0;
        }
        assert_eq!(obe_steady_state_rate(&d, &Vec3::zeros(), 0.0).unwrap(), 0.0);
    }

    #[test]
    fn density_matrix_is_physical() {
        let d = FourLevelDrive::nominal(&consts());
        let sat = [d.total_saturation(0), d.total_saturation(1)];
        for shift in [-3e6, 0.0, 1e6] {
            let delta = [d.tones[0].detuning - shift, d.tones[1].detuning - shift];
            let rho = steady_state_density_matrix(couplings(&d, sat), delta, d.linewidth()).unwrap();
            let tr: C64 = (0..4).map(|i| rho[(i, i)]).sum();
            assert!((tr.re - 1.0).abs() < 1e-10 && tr.im.abs() < 1e-10);
            assert!((rho - rho.adjoint()).norm() < 1e-10);
            for i in 0..4 {
                assert!((0.0..=1.0).contains(&rho[(i, i)].re));
            }
        }
    }

    #[test]
    fn undamped_configuration_is_reported() {
        // A single pi tone on e+ strands population in g-, where nothing
        // couples; the trace row still pins a unique (dark) solution.
        let c = consts();
        let mut d = FourLevelDrive::nominal(&c);
        d.tones[0].intensity = 0.0;
        for t in d.tones.iter_mut() {
            t.polarization = Polarization::Pi;
        }
        let r = obe_steady_state_rate(&d, &Vec3::zeros(), 0.0).unwrap();
        assert!(r.abs() < 1e-6 * d.linewidth());
        // With no drive and no decay the Liouvillian has no unique fixed point.
        let err = steady_state_density_matrix([[0.0; 2]; 2], [0.0; 2], 0.0);
        assert!(matches!(err, Err(Error::Numerical(_))));
    }

    #[test]
    fn two_level_limit() {
        // Each resonant pi tone closes a two-level cycle on its own ground
        // level, so the total rate is (G/2) s/(1+s) however population splits.
        let c = consts();
        let mut d = FourLevelDrive::with_detuning_and_saturation(&c, 0.0, 4.0);
        d.beams = vec![Vec3::x()];
        for t in d.tones.iter_mut() {
            t.polarization = Polarization::Pi;
        }
        let r = obe_steady_state_rate(&d, &Vec3::zeros(), 0.0).unwrap();
        let expect = d.linewidth() / 2.0 * 0.8;
        assert!((r / expect - 1.0).abs() < 0.02, "{r} vs {expect}");
    }

    #[test]
    fn nominal_rate_vs_rate_equations() {
        let c = consts();
        let d = FourLevelDrive::nominal(&c);
        let g = d.linewidth();
        let r = obe_steady_state_rate(&d, &Vec3::zeros(), 0.0).unwrap();
        let s_tot: f64 = (0..2).map(|k| d.total_saturation(k)).sum();
        let oracle: f64 = (0..2)
            .map(|k| {
                let delta = d.tones[k].detuning / g;
                g / 2.0 * d.total_saturation(k) / (1.0 + s_tot + 4.0 * delta * delta)
            })
            .sum();
        assert!((r / oracle - 1.0).abs() < 0.05, "OBE {r} vs rate equations {oracle}");
    }

    #[test]
    fn rate_even_in_velocity() {
        let d = FourLevelDrive::nominal(&consts());
        for v in [0.01, 0.05, 0.3] {
            let vv = molasses_axis() * v + Vec3::new(0.0, 0.02, -0.01);
            let a = obe_steady_state_rate(&d, &vv, 0.0).unwrap();
            let b = obe_steady_state_rate(&d, &-vv, 0.0).unwrap();
            assert!((a - b).abs() < 1e-9 * a);
        }
    }

    #[test]
    fn force_is_restoring() {
        let d = FourLevelDrive::nominal(&consts());
        let k = molasses_axis();
        let h = 1e-3;
        let fp = mean_force(&d, &(k * h)).unwrap().dot(&k);
        let fm = mean_force(&d, &(k * -h)).unwrap().dot(&k);
        assert!((fp - fm) / (2.0 * h) < 0.0);
    }

    #[test]
    fn table_matches_direct_solve() {
        let d = FourLevelDrive::nominal(&consts());
        let t = ScatterTable::build(&d, 0.0).unwrap();
        for v in [-0.4, -0.05, 0.0, 0.013, 0.2] {
            let vel = molasses_axis() * v;
            let direct = beam_rates(&d, &vel, 0.0).unwrap();
            for (b, r) in direct.iter().enumerate() {
                assert!((t.beam_rate(b, &vel) - r).abs() < 1e-3 * t.max_rate());
            }
        }
    }

    #[test]
    fn kick_contract_and_zero_rate() {
        let mut rng = RngHandle::new(1, 1);
        let k = Vec3::x();
        assert!(sample_kick(1e6, 1e-6, &k, 1.0, &mut rng).is_err());
        for _ in 0..100 {
            assert_eq!(sample_kick(0.0, 1e-6, &k, 1.0, &mut rng).unwrap(), Vec3::zeros());
        }
    }

    #[test]
    fn kick_statistics() {
        let mut rng = RngHandle::new(2, 0);
        let k = Vec3::new(0.6, 0.0, 0.8);
        let n = 1_000_000;
        let mut mean = Vec3::zeros();
        let mut sq = 0.0;
        let mut events = 0usize;
        for _ in 0..n {
            let p = sample_kick(1.0, 0.1, &k, 1.0, &mut rng).unwrap();
            if p != Vec3::zeros() {
                events += 1;
                let emission = p - k;
                mean += emission;
                sq += p.norm_squared();
            }
        }
        let ne = events as f64;
        assert!((ne / n as f64 - 0.1).abs() < 3.0 * (0.09 / n as f64).sqrt());
        mean /= ne;
        // Each emission component has variance 1/3.
        let bound = 3.0 * (1.0 / 3.0 / ne).sqrt();
        assert!(mean.norm() < bound * 3f64.sqrt(), "{mean:?}");
        // |k + e|^2 averages to 2 (hbar k)^2: 1 from absorption, 1 from emission.
        assert!((sq / ne - 2.0).abs() < 0.01);
    }

    #[test]
    fn blue_detuning_rejected() {
        let c = consts();
        let d = FourLevelDrive::with_detuning_and_saturation(&c, 2.0, 4.0);
        let run = MolassesRun { n_atoms: 10, duration: 1e-3, ..Default::default() };
        assert!(doppler_equilibrium_temperature(&d, &run, &c, &RngHandle::new(0, 0)).is_err());
    }
}
