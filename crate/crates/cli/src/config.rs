//! Scenario configuration: a TOML document in laboratory units, converted
//! to SI core types at ingestion.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use tweezer_core::cavity::CavitySpec;
use tweezer_core::fit::FitOptions;
use tweezer_core::light::FourLevelDrive;
use tweezer_core::loading::{standing_wave_depth, SimSettings, ThermalCloud, TransportTrap, TweezerSpec};
use tweezer_core::phys::{PhysicalConstants, Vec3, AMU};
use tweezer_core::pipeline::{
    compose_error_budget, CoherenceModel, CycleSpec, ErrorBudget, GrabDropSpec, ImagingModel, ParityProjectionModel,
    PipelineModels, ReadoutChannel, ReusePolicy, Stage,
};
use tweezer_core::reservoir::ReservoirModel;

use crate::error::CliError;

/// Shipped defaults, also embedded so the binary runs without a file.
pub const DEFAULT_TOML: &str = include_str!("../../../configs/default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub constants: ConstantsSection,
    #[serde(default)]
    pub cavity: CavitySection,
    #[serde(default)]
    pub reservoir: ReservoirSection,
    #[serde(default)]
    pub drive: DriveSection,
    #[serde(default)]
    pub trap: TrapSection,
    #[serde(default)]
    pub loading: LoadingSection,
    #[serde(default)]
    pub cycle: CycleSection,
    #[serde(default)]
    pub fit: FitSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstantsSection {
    pub hbar_j_s: f64,
    pub k_b_j_per_k: f64,
    pub c_m_per_s: f64,
    pub mass_amu: f64,
    pub g_m_per_s2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CavitySection {
    pub r1: f64,
    pub r2: f64,
    pub length_m: f64,
    pub mirror_roc_m: f64,
    pub wavelength_nm: f64,
    pub input_power_w: f64,
    pub mirror_loss: f64,
    pub beta_eom: f64,
    /// Distance of the tweezer loading region from the in-coupler.
    pub loading_position_m: f64,
    pub n_sidebands: usize,
    pub z_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReservoirSection {
    pub gamma_atom_per_s: f64,
    pub beta_cm3_per_s: f64,
    pub phi0_atoms_per_s: f64,
    pub v_eff_cm3: f64,
    pub duty_cycle: f64,
    pub duty_sweep: Vec<f64>,
    pub t_end_s: f64,
    pub dt_s: f64,
    pub extraction_atoms_per_s: f64,
    pub settle_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriveSection {
    pub detuning_gamma: f64,
    pub saturation_per_tone: f64,
    pub molasses_atoms: usize,
    pub molasses_duration_ms: f64,
    pub radial_trap_hz: f64,
    pub initial_temperature_uk: f64,
    pub snapshot_interval_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrapSection {
    pub tweezer_depth_mhz: f64,
    pub tweezer_waist_um: f64,
    pub tweezer_wavelength_nm: f64,
    pub spacing_um: f64,
    pub array_side: usize,
    pub transport_power_w: f64,
    pub transport_waist_um: f64,
    pub transport_wavelength_nm: f64,
    pub polarizability_au: f64,
    pub lattice_contrast: f64,
    pub gravity: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoadingSection {
    pub density_per_cm3: f64,
    pub t_radial_uk: f64,
    pub t_axial_uk: f64,
    pub n_atoms: usize,
    pub t_grid_ms: Vec<f64>,
    pub threshold_u0: f64,
    pub recheck_ms: f64,
    pub dt_fine_ns: f64,
    pub dt_coarse_ns: f64,
    pub scattering: bool,
    pub array_sides: Vec<usize>,
    pub map_t_ms: f64,
    pub map_n_rep: usize,
    pub map_z_um: Vec<f64>,
    pub map_r_um: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CycleSection {
    pub n_sites: usize,
    pub n_cycles: u64,
    pub reuse_rounds: u32,
    pub runs: u64,
    pub target_fill: f64,
    pub lac_ms: f64,
    pub lac_efolds: f64,
    pub lac_single_loss: f64,
    pub load_ms: f64,
    pub transport_ms: f64,
    pub identify_image_ms: f64,
    pub cool_ms: f64,
    pub pump_ms: f64,
    pub readout_block_ms: f64,
    pub reuse_cool_ms: f64,
    pub mu_bright: f64,
    pub mu_dark: f64,
    pub threshold_counts: u64,
    pub exposure_ms: f64,
    pub loss_per_image: f64,
    /// "measured" or "composed".
    pub readout_channel: String,
    pub reuse_loss: f64,
    pub lifetime_s: f64,
    pub t2_star_s: f64,
    pub t2_hahn_s: f64,
    pub reload_lifetime_s: f64,
    pub reload_t2_star_s: f64,
    pub reload_t2_hahn_s: f64,
    pub rabi_hz: f64,
    pub rabi_step_ms: f64,
    pub flip_shots: usize,
    pub grab_sites: usize,
    pub grab_period_ms: f64,
    pub grab_p_load: f64,
    pub grab_m: Vec<u32>,
    pub grab_cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub max_iterations: usize,
    pub gradient_tol: f64,
    pub step_tol: f64,
    pub initial_lambda: f64,
    pub shots_per_point: u64,
    pub lifetime_holds_s: Vec<f64>,
    pub ramsey_holds_s: Vec<f64>,
    pub hahn_holds_s: Vec<f64>,
    pub rabi_times_s: Vec<f64>,
    pub fringe_points: usize,
}

impl Default for ConstantsSection {
    fn default() -> Self {
        let c = PhysicalConstants::CODATA;
        Self { hbar_j_s: c.hbar, k_b_j_per_k: c.k_b, c_m_per_s: c.c, mass_amu: 170.936_325_8, g_m_per_s2: c.g }
    }
}

impl Default for CavitySection {
    fn default() -> Self {
        let c = CavitySpec::transport_default();
        Self {
            r1: c.r1,
            r2: c.r2,
            length_m: c.length,
            mirror_roc_m: c.mirror_roc,
            wavelength_nm: 1036.0,
            input_power_w: c.input_power,
            mirror_loss: 0.0,
            beta_eom: 1.75,
            loading_position_m: 0.147,
            n_sidebands: 8,
            z_points: 201,
        }
    }
}

impl Default for ReservoirSection {
    fn default() -> Self {
        let r = ReservoirModel::fitted(0.5);
        Self {
            gamma_atom_per_s: r.gamma_atom,
            beta_cm3_per_s: r.beta_2body,
            phi0_atoms_per_s: r.phi0,
            v_eff_cm3: r.v_eff,
            duty_cycle: 0.5,
            duty_sweep: vec![0.05, 0.1, 0.2, 0.3, 0.4, 0.5],
            t_end_s: 40.0,
            dt_s: 0.25,
            extraction_atoms_per_s: 7.3e4,
            settle_s: 60.0,
        }
    }
}

impl Default for DriveSection {
    fn default() -> Self {
        Self {
            detuning_gamma: -4.4,
            saturation_per_tone: 4.0,
            molasses_atoms: 2000,
            molasses_duration_ms: 60.0,
            radial_trap_hz: 307.0,
            initial_temperature_uk: 40.0,
            snapshot_interval_ms: 0.5,
        }
    }
}

impl Default for TrapSection {
    fn default() -> Self {
        Self {
            tweezer_depth_mhz: 1.94,
            tweezer_waist_um: 0.6,
            tweezer_wavelength_nm: 488.0,
            spacing_um: 4.5,
            array_side: 1,
            transport_power_w: 3300.0,
            transport_waist_um: 280.0,
            transport_wavelength_nm: 1036.0,
            polarizability_au: 160.0,
            lattice_contrast: 0.0,
            gravity: true,
        }
    }
}

impl Default for LoadingSection {
    fn default() -> Self {
        Self {
            density_per_cm3: 4e11,
            t_radial_uk: 77.0,
            t_axial_uk: 33.0,
            n_atoms: 40000,
            t_grid_ms: vec![0.1, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0],
            threshold_u0: 0.5,
            recheck_ms: 0.2,
            dt_fine_ns: 50.0,
            dt_coarse_ns: 250.0,
            scattering: true,
            array_sides: vec![5, 16],
            map_t_ms: 1.0,
            map_n_rep: 200,
            map_z_um: vec![-4.0, -3.0, -2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0],
            map_r_um: vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0],
        }
    }
}

impl Default for CycleSection {
    fn default() -> Self {
        Self {
            n_sites: 25,
            n_cycles: 330,
            reuse_rounds: 10,
            runs: 20,
            target_fill: 0.60,
            lac_ms: 6.0,
            lac_efolds: 3.0,
            lac_single_loss: 0.05,
            load_ms: 1.0,
            transport_ms: 1.0,
            identify_image_ms: 4.0,
            cool_ms: 6.0,
            pump_ms: 0.7,
            readout_block_ms: 14.6,
            reuse_cool_ms: 4.7,
            mu_bright: 30.0,
            mu_dark: 1.5,
            threshold_counts: 8,
            exposure_ms: 4.0,
            loss_per_image: 0.008,
            readout_channel: "measured".into(),
            reuse_loss: 0.025,
            lifetime_s: 1.30,
            t2_star_s: 0.69,
            t2_hahn_s: 7.0,
            reload_lifetime_s: 1.35,
            reload_t2_star_s: 0.73,
            reload_t2_hahn_s: 5.4,
            rabi_hz: 10.0,
            rabi_step_ms: 5.0,
            flip_shots: 100_000,
            grab_sites: 256,
            grab_period_ms: 2.0,
            grab_p_load: 0.570,
            grab_m: vec![1, 2, 4, 8, 16],
            grab_cycles: 5000,
        }
    }
}

impl Default for FitSection {
    fn default() -> Self {
        let o = FitOptions::default();
        Self {
            max_iterations: o.max_iterations,
            gradient_tol: o.gradient_tol,
            step_tol: o.step_tol,
            initial_lambda: o.initial_lambda,
            shots_per_point: 50,
            lifetime_holds_s: vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0],
            ramsey_holds_s: vec![0.02, 0.1, 0.2, 0.35, 0.5, 0.7, 0.9, 1.2],
            hahn_holds_s: vec![0.05, 0.3, 0.6, 1.0, 1.5, 2.0, 2.5, 3.0],
            rabi_times_s: (0..=60).map(|i| i as f64 / 100.0).collect(),
            fringe_points: 12,
        }
    }
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            constants: Default::default(),
            cavity: Default::default(),
            reservoir: Default::default(),
            drive: Default::default(),
            trap: Default::default(),
            loading: Default::default(),
            cycle: Default::default(),
            fit: Default::default(),
        }
    }
}

/// One violated constraint, anchored at a dotted key.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    pub key: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

struct Checker(Vec<Diagnostic>);

impl Checker {
    fn push(&mut self, key: &str, message: String) {
        self.0.push(Diagnostic { key: key.into(), message });
    }

    fn finite(&mut self, key: &str, v: f64) -> bool {
        if v.is_finite() {
            return true;
        }
        self.push(key, format!("{v} is not a finite number"));
        false
    }

    fn positive(&mut self, key: &str, v: f64) {
        if self.finite(key, v) && v <= 0.0 {
            self.push(key, format!("{v} must be > 0"));
        }
    }

    fn non_negative(&mut self, key: &str, v: f64) {
        if self.finite(key, v) && v < 0.0 {
            self.push(key, format!("{v} must be >= 0"));
        }
    }

    fn closed(&mut self, key: &str, v: f64, lo: f64, hi: f64) {
        if self.finite(key, v) && !(lo..=hi).contains(&v) {
            self.push(key, format!("{v} is outside the closed interval [{lo}, {hi}]"));
        }
    }

    fn open(&mut self, key: &str, v: f64, lo: f64, hi: f64) {
        if self.finite(key, v) && !(v > lo && v < hi) {
            self.push(key, format!("{v} is outside the open interval ({lo}, {hi})"));
        }
    }

    fn at_least(&mut self, key: &str, v: usize, min: usize) {
        if v < min {
            self.push(key, format!("{v} must be >= {min}"));
        }
    }

    fn increasing(&mut self, key: &str, v: &[f64], min_len: usize) {
        if v.len() < min_len {
            self.push(key, format!("needs at least {min_len} entries, got {}", v.len()));
        } else if v.iter().any(|x| !x.is_finite()) || v.windows(2).any(|w| w[1] <= w[0]) {
            self.push(key, "entries must be finite and strictly increasing".into());
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::parse(text, &e))
    }

    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration always serialises")
    }

    /// SHA-256 of the canonical serialisation, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    /// Full range report; empty when the configuration is usable.
    pub fn diagnostics(&self) -> Vec<Diagnostic> {
        let mut ck = Checker(Vec::new());
        let k = &self.constants;
        for (key, v) in [
            ("constants.hbar_j_s", k.hbar_j_s),
            ("constants.k_b_j_per_k", k.k_b_j_per_k),
            ("constants.c_m_per_s", k.c_m_per_s),
            ("constants.mass_amu", k.mass_amu),
            ("constants.g_m_per_s2", k.g_m_per_s2),
        ] {
            ck.positive(key, v);
        }

        let c = &self.cavity;
        ck.open("cavity.r1", c.r1, 0.0, 1.0);
        ck.open("cavity.r2", c.r2, 0.0, 1.0);
        ck.positive("cavity.length_m", c.length_m);
        ck.positive("cavity.mirror_roc_m", c.mirror_roc_m);
        if c.mirror_roc_m.is_finite() && c.length_m.is_finite() && c.length_m >= 2.0 * c.mirror_roc_m {
            ck.push("cavity.length_m", format!("{} must be < 2 * mirror_roc_m for a stable cavity", c.length_m));
        }
        ck.positive("cavity.wavelength_nm", c.wavelength_nm);
        ck.non_negative("cavity.input_power_w", c.input_power_w);
        ck.closed("cavity.mirror_loss", c.mirror_loss, 0.0, 1.0 - c.r1);
        ck.non_negative("cavity.beta_eom", c.beta_eom);
        ck.open("cavity.loading_position_m", c.loading_position_m, 0.0, c.length_m);
        ck.at_least("cavity.n_sidebands", c.n_sidebands, 1);
        ck.at_least("cavity.z_points", c.z_points, 2);

        let r = &self.reservoir;
        ck.non_negative("reservoir.gamma_atom_per_s", r.gamma_atom_per_s);
        ck.non_negative("reservoir.beta_cm3_per_s", r.beta_cm3_per_s);
        ck.non_negative("reservoir.phi0_atoms_per_s", r.phi0_atoms_per_s);
        ck.positive("reservoir.v_eff_cm3", r.v_eff_cm3);
        ck.closed("reservoir.duty_cycle", r.duty_cycle, 0.0, 1.0);
        if r.duty_sweep.is_empty() {
            ck.push("reservoir.duty_sweep", "needs at least one entry".into());
        }
        for d in &r.duty_sweep {
            ck.closed("reservoir.duty_sweep", *d, 0.0, 1.0);
        }
        ck.positive("reservoir.t_end_s", r.t_end_s);
        ck.positive("reservoir.dt_s", r.dt_s);
        ck.non_negative("reservoir.extraction_atoms_per_s", r.extraction_atoms_per_s);
        ck.positive("reservoir.settle_s", r.settle_s);

        let d = &self.drive;
        if ck.finite("drive.detuning_gamma", d.detuning_gamma) && d.detuning_gamma >= 0.0 {
            ck.push("drive.detuning_gamma", format!("{} must be < 0 (red detuned)", d.detuning_gamma));
        }
        ck.positive("drive.saturation_per_tone", d.saturation_per_tone);
        ck.at_least("drive.molasses_atoms", d.molasses_atoms, 2);
        ck.positive("drive.molasses_duration_ms", d.molasses_duration_ms);
        ck.non_negative("drive.radial_trap_hz", d.radial_trap_hz);
        ck.non_negative("drive.initial_temperature_uk", d.initial_temperature_uk);
        ck.positive("drive.snapshot_interval_ms", d.snapshot_interval_ms);

        let t = &self.trap;
        ck.positive("trap.tweezer_depth_mhz", t.tweezer_depth_mhz);
        ck.positive("trap.tweezer_waist_um", t.tweezer_waist_um);
        ck.positive("trap.tweezer_wavelength_nm", t.tweezer_wavelength_nm);
        ck.positive("trap.spacing_um", t.spacing_um);
        ck.at_least("trap.array_side", t.array_side, 1);
        ck.non_negative("trap.transport_power_w", t.transport_power_w);
        ck.positive("trap.transport_waist_um", t.transport_waist_um);
        ck.positive("trap.transport_wavelength_nm", t.transport_wavelength_nm);
        ck.non_negative("trap.polarizability_au", t.polarizability_au);
        ck.closed("trap.lattice_contrast", t.lattice_contrast, 0.0, 1.0);

        let l = &self.loading;
        ck.non_negative("loading.density_per_cm3", l.density_per_cm3);
        ck.non_negative("loading.t_radial_uk", l.t_radial_uk);
        ck.non_negative("loading.t_axial_uk", l.t_axial_uk);
        ck.at_least("loading.n_atoms", l.n_atoms, 2);
        ck.increasing("loading.t_grid_ms", &l.t_grid_ms, 3);
        if l.t_grid_ms.first().is_some_and(|t| *t <= 0.0) {
            ck.push("loading.t_grid_ms", "times must be > 0".into());
        }
        ck.open("loading.threshold_u0", l.threshold_u0, 0.0, 1.0);
        ck.non_negative("loading.recheck_ms", l.recheck_ms);
        ck.positive("loading.dt_fine_ns", l.dt_fine_ns);
        ck.positive("loading.dt_coarse_ns", l.dt_coarse_ns);
        if l.dt_coarse_ns.is_finite() && l.dt_fine_ns.is_finite() && l.dt_coarse_ns < l.dt_fine_ns {
            ck.push("loading.dt_coarse_ns", format!("{} must be >= dt_fine_ns", l.dt_coarse_ns));
        }
        if l.array_sides.is_empty() || l.array_sides.contains(&0) {
            ck.push("loading.array_sides", "needs at least one entry, each >= 1".into());
        }
        ck.positive("loading.map_t_ms", l.map_t_ms);
        ck.at_least("loading.map_n_rep", l.map_n_rep, 1);
        ck.increasing("loading.map_z_um", &l.map_z_um, 1);
        ck.increasing("loading.map_r_um", &l.map_r_um, 1);
        if l.map_r_um.first().is_some_and(|r| *r < 0.0) {
            ck.push("loading.map_r_um", "radii must be >= 0".into());
        }

        let y = &self.cycle;
        ck.at_least("cycle.n_sites", y.n_sites, 1);
        if y.n_cycles == 0 {
            ck.push("cycle.n_cycles", "0 must be >= 1".into());
        }
        if y.runs == 0 {
            ck.push("cycle.runs", "0 must be >= 1".into());
        }
        ck.open("cycle.target_fill", y.target_fill, 0.0, 1.0);
        ck.positive("cycle.lac_ms", y.lac_ms);
        ck.positive("cycle.lac_efolds", y.lac_efolds);
        ck.closed("cycle.lac_single_loss", y.lac_single_loss, 0.0, 0.999);
        for (key, v) in [
            ("cycle.load_ms", y.load_ms),
            ("cycle.transport_ms", y.transport_ms),
            ("cycle.identify_image_ms", y.identify_image_ms),
            ("cycle.cool_ms", y.cool_ms),
            ("cycle.pump_ms", y.pump_ms),
            ("cycle.readout_block_ms", y.readout_block_ms),
            ("cycle.reuse_cool_ms", y.reuse_cool_ms),
            ("cycle.exposure_ms", y.exposure_ms),
        ] {
            ck.positive(key, v);
        }
        ck.non_negative("cycle.mu_dark", y.mu_dark);
        if y.mu_dark.is_finite() && y.mu_dark > y.threshold_counts as f64 {
            ck.push("cycle.mu_dark", format!("{} must be <= threshold_counts", y.mu_dark));
        }
        if ck.finite("cycle.mu_bright", y.mu_bright) && y.mu_bright <= y.threshold_counts as f64 {
            ck.push("cycle.mu_bright", format!("{} must be > threshold_counts", y.mu_bright));
        }
        ck.closed("cycle.loss_per_image", y.loss_per_image, 0.0, 1.0);
        if !["measured", "composed"].contains(&y.readout_channel.as_str()) {
            ck.push("cycle.readout_channel", format!("{:?} must be \"measured\" or \"composed\"", y.readout_channel));
        }
        ck.closed("cycle.reuse_loss", y.reuse_loss, 0.0, 1.0);
        for (key, v) in [
            ("cycle.lifetime_s", y.lifetime_s),
            ("cycle.t2_star_s", y.t2_star_s),
            ("cycle.t2_hahn_s", y.t2_hahn_s),
            ("cycle.reload_lifetime_s", y.reload_lifetime_s),
            ("cycle.reload_t2_star_s", y.reload_t2_star_s),
            ("cycle.reload_t2_hahn_s", y.reload_t2_hahn_s),
            ("cycle.rabi_hz", y.rabi_hz),
            ("cycle.grab_period_ms", y.grab_period_ms),
        ] {
            ck.positive(key, v);
        }
        ck.non_negative("cycle.rabi_step_ms", y.rabi_step_ms);
        ck.at_least("cycle.flip_shots", y.flip_shots, 1);
        ck.at_least("cycle.grab_sites", y.grab_sites, 1);
        ck.closed("cycle.grab_p_load", y.grab_p_load, 0.0, 1.0);
        if y.grab_m.is_empty() || y.grab_m.contains(&0) {
            ck.push("cycle.grab_m", "needs at least one entry, each >= 1".into());
        }
        if y.grab_cycles == 0 {
            ck.push("cycle.grab_cycles", "0 must be >= 1".into());
        }

        let f = &self.fit;
        ck.at_least("fit.max_iterations", f.max_iterations, 1);
        ck.positive("fit.gradient_tol", f.gradient_tol);
        ck.positive("fit.step_tol", f.step_tol);
        ck.positive("fit.initial_lambda", f.initial_lambda);
        if f.shots_per_point == 0 {
            ck.push("fit.shots_per_point", "0 must be >= 1".into());
        }
        ck.increasing("fit.lifetime_holds_s", &f.lifetime_holds_s, 3);
        ck.increasing("fit.ramsey_holds_s", &f.ramsey_holds_s, 3);
        ck.increasing("fit.hahn_holds_s", &f.hahn_holds_s, 3);
        ck.increasing("fit.rabi_times_s", &f.rabi_times_s, 4);
        ck.at_least("fit.fringe_points", f.fringe_points, 4);

        // Cross-section checks that need converted quantities; skipped when
        // the inputs already failed.
        if ck.0.is_empty() {
            if let Err(e) = self.parity_model() {
                ck.push("cycle.lac_ms", e.to_string());
            } else if let Err(e) = self.parity_model().and_then(|p| p.poisson_mean_for_fill(y.target_fill)) {
                ck.push("cycle.target_fill", e.to_string());
            }
            if let Err(e) = self.cavity_spec().validate() {
                ck.push("cavity", e.to_string());
            }
        }
        ck.0
    }

    /// Errors out with every diagnostic when the configuration is unusable.
    pub fn validated(self) -> Result<Self, CliError> {
        let diags = self.diagnostics();
        if diags.is_empty() {
            Ok(self)
        } else {
            Err(CliError::Invalid(diags))
        }
    }

    pub fn constants(&self) -> PhysicalConstants {
        let k = &self.constants;
        PhysicalConstants { hbar: k.hbar_j_s, k_b: k.k_b_j_per_k, c: k.c_m_per_s, mass: k.mass_amu * AMU, g: k.g_m_per_s2 }
    }

    pub fn cavity_spec(&self) -> CavitySpec {
        let c = &self.cavity;
        CavitySpec {
            r1: c.r1,
            r2: c.r2,
            length: c.length_m,
            mirror_roc: c.mirror_roc_m,
            wavelength: c.wavelength_nm / 1e9,
            input_power: c.input_power_w,
            mirror_loss: c.mirror_loss,
        }
    }

    pub fn reservoir_model(&self, duty: f64) -> ReservoirModel {
        let r = &self.reservoir;
        ReservoirModel {
            gamma_atom: r.gamma_atom_per_s,
            beta_2body: r.beta_cm3_per_s,
            phi0: r.phi0_atoms_per_s,
            v_eff: r.v_eff_cm3,
            duty_cycle: duty,
        }
    }

    pub fn drive(&self) -> FourLevelDrive {
        FourLevelDrive::with_detuning_and_saturation(&self.constants(), self.drive.detuning_gamma, self.drive.saturation_per_tone)
    }

    pub fn molasses_run(&self) -> tweezer_core::light::MolassesRun {
        let d = &self.drive;
        tweezer_core::light::MolassesRun {
            n_atoms: d.molasses_atoms,
            duration: d.molasses_duration_ms / 1e3,
            radial_omega: 2.0 * PI * d.radial_trap_hz,
            initial_temperature: d.initial_temperature_uk / 1e6,
            snapshot_interval: d.snapshot_interval_ms / 1e3,
        }
    }

    pub fn tweezer(&self) -> TweezerSpec {
        let t = &self.trap;
        TweezerSpec {
            depth: self.constants().h() * t.tweezer_depth_mhz * 1e6,
            waist: t.tweezer_waist_um / 1e6,
            wavelength: t.tweezer_wavelength_nm / 1e9,
        }
    }

    pub fn transport(&self) -> TransportTrap {
        let t = &self.trap;
        let waist = t.transport_waist_um / 1e6;
        TransportTrap {
            origin: Vec3::zeros(),
            axis: Vec3::x(),
            depth: standing_wave_depth(t.transport_power_w, waist, t.polarizability_au, self.constants.c_m_per_s),
            waist,
            contrast: t.lattice_contrast,
            wavelength: t.transport_wavelength_nm / 1e9,
        }
    }

    pub fn cloud(&self) -> ThermalCloud {
        ThermalCloud { t_radial: self.loading.t_radial_uk / 1e6, t_axial: self.loading.t_axial_uk / 1e6 }
    }

    pub fn sim_settings(&self) -> SimSettings {
        let l = &self.loading;
        SimSettings {
            dt_fine: l.dt_fine_ns / 1e9,
            dt_coarse: l.dt_coarse_ns / 1e9,
            threshold: l.threshold_u0,
            recheck: l.recheck_ms / 1e3,
        }
    }

    pub fn t_grid(&self) -> Vec<f64> {
        self.loading.t_grid_ms.iter().map(|t| t / 1e3).collect()
    }

    pub fn cycle_spec(&self, reuse_rounds: Option<u32>) -> CycleSpec {
        let y = &self.cycle;
        CycleSpec {
            stages: vec![
                (Stage::Load, y.load_ms / 1e3),
                (Stage::Transport, y.transport_ms / 1e3),
                (Stage::Lac, y.lac_ms / 1e3),
                (Stage::IdentifyImage, y.identify_image_ms / 1e3),
                (Stage::Cool, y.cool_ms / 1e3),
                (Stage::Pump, y.pump_ms / 1e3),
                (Stage::ReadoutBlock, y.readout_block_ms / 1e3),
            ],
            reuse_stages: vec![
                (Stage::Cool, y.reuse_cool_ms / 1e3),
                (Stage::Pump, y.pump_ms / 1e3),
                (Stage::ReadoutBlock, y.readout_block_ms / 1e3),
            ],
            n_sites: y.n_sites,
            reuse_policy: match reuse_rounds {
                Some(k) if k > 0 => ReusePolicy::ReuseNTimes(k),
                _ => ReusePolicy::FreshEachCycle,
            },
        }
    }

    pub fn parity_model(&self) -> tweezer_core::Result<ParityProjectionModel> {
        let y = &self.cycle;
        ParityProjectionModel::from_targets(y.lac_ms / 1e3, y.lac_efolds, y.lac_single_loss)
    }

    pub fn imaging(&self) -> ImagingModel {
        let y = &self.cycle;
        ImagingModel {
            mu_bright: y.mu_bright,
            mu_dark: y.mu_dark,
            threshold: y.threshold_counts,
            exposure: y.exposure_ms / 1e3,
            loss_per_image: y.loss_per_image,
        }
    }

    pub fn readout_channel(&self) -> tweezer_core::Result<ReadoutChannel> {
        match self.cycle.readout_channel.as_str() {
            "composed" => compose_error_budget(&ErrorBudget::nominal()),
            _ => Ok(ReadoutChannel::measured()),
        }
    }

    pub fn coherence(&self, reload: bool) -> CoherenceModel {
        let y = &self.cycle;
        let (lifetime, t2_star, t2_hahn) = if reload {
            (y.reload_lifetime_s, y.reload_t2_star_s, y.reload_t2_hahn_s)
        } else {
            (y.lifetime_s, y.t2_star_s, y.t2_hahn_s)
        };
        CoherenceModel { lifetime, t2_star, t2_hahn, rabi_freq: 2.0 * PI * y.rabi_hz, reuse_loss: y.reuse_loss }
    }

    pub fn pipeline_models(&self, rabi: bool) -> tweezer_core::Result<PipelineModels> {
        let parity = self.parity_model()?;
        let load_mean = parity.poisson_mean_for_fill(self.cycle.target_fill)?;
        Ok(PipelineModels {
            parity,
            imaging: self.imaging(),
            channel: self.readout_channel()?,
            coherence: self.coherence(false),
            load_mean,
            rabi_step: rabi.then_some(self.cycle.rabi_step_ms / 1e3),
        })
    }

    pub fn grab_spec(&self, m: u32) -> GrabDropSpec {
        let y = &self.cycle;
        GrabDropSpec { n_sites: y.grab_sites, m, period: y.grab_period_ms / 1e3, p_load: y.grab_p_load }
    }

    pub fn fit_options(&self) -> FitOptions {
        let f = &self.fit;
        FitOptions {
            max_iterations: f.max_iterations,
            gradient_tol: f.gradient_tol,
            step_tol: f.step_tol,
            initial_lambda: f.initial_lambda,
        }
    }

    /// Evenly spaced fringe phases over one period.
    pub fn fringe_phases(&self) -> Vec<f64> {
        let n = self.fit.fringe_points;
        (0..n).map(|i| 2.0 * PI * i as f64 / n as f64).collect()
    }
}
