//! Figure-reproduction recipes. Every scenario is a pure function of the
//! configuration and the seed; parallel work inside a scenario draws from
//! per-item random streams, so outputs do not depend on the thread count.

use serde_json::json;

use tweezer_core::cavity::{
    enhancement_factor, finesse, free_spectral_range, intracavity_power, lattice_contrast, linewidth_fwhm,
    mode_waist, null_depth_for_position, null_fractions, sideband_amplitudes,
};
use tweezer_core::fit::{linear_fit, nls_fit_with, FitData, FitModel, FitResult};
use tweezer_core::light::{doppler_equilibrium_temperature, ScatterTable};
use tweezer_core::loading::{
    array_size_independence, central_site, loading_kernel, loading_probability_map, LoadingKernel, LoadingSetup,
    TrapField,
};
use tweezer_core::pipeline::{
    flip_experiment, grab_and_drop, measure_coherence_time, parity_project, CoherenceChannel, Outcome,
    ParityProjectionModel,
};
use tweezer_core::reservoir::{
    depletion_under_extraction, integrate_density, steady_state_density, steady_state_vs_duty,
};
use tweezer_core::rng::RngHandle;

use crate::config::ScenarioConfig;
use crate::error::CliError;
use crate::output::{Bundle, Table};

pub const SCENARIOS: [&str; 10] =
    ["fig2b", "fig2c", "fig2d", "fig2e", "fig2gh", "fig3cde", "fig4bcde", "fig6", "fig7b", "fig8-point"];

// Random stream identifiers, one per independent use of the seed.
const STREAM_KERNEL: u64 = 1;
const STREAM_MAP: u64 = 2;
const STREAM_MOLASSES: u64 = 3;
const STREAM_ARRAYS: u64 = 4;
const STREAM_GRAB: u64 = 5;
const STREAM_PIPELINE: u64 = 6;
const STREAM_FLIP: u64 = 7;
const STREAM_PARITY: u64 = 8;
const STREAM_COHERENCE: u64 = 9;
const STREAM_NOISE: u64 = 10;

const CM3_TO_M3: f64 = 1e6;

type Result<T> = std::result::Result<T, CliError>;

pub fn run_scenario(name: &str, cfg: &ScenarioConfig, seed: u64) -> Result<Bundle> {
    match name {
        "fig2b" => reservoir_curves(cfg),
        "fig2c" => steady_state_scan(cfg, seed),
        "fig2d" => loading_curves(cfg, seed),
        "fig2e" => density_scaling(cfg, seed),
        "fig2gh" => extraction_and_arrays(cfg, seed),
        "fig3cde" => {
            let y = &cfg.cycle;
            let cycles = y.runs * (y.reuse_rounds as u64 + 1);
            pipeline(cfg, seed, y.reuse_rounds, cycles, true)
        }
        "fig4bcde" => coherence(cfg, seed),
        "fig6" => cavity(cfg),
        "fig7b" => probability_map(cfg, seed),
        "fig8-point" => projection_and_imaging(cfg, seed),
        _ => Err(CliError::UnknownScenario { name: name.into(), valid: SCENARIOS.to_vec() }),
    }
}

/// Cavity figures of merit, the residual contrast along the axis and the
/// phase-modulation sidebands.
pub fn cavity(cfg: &ScenarioConfig) -> Result<Bundle> {
    let spec = cfg.cavity_spec();
    spec.validate()?;
    let c = cfg.constants().c;
    let beta = cfg.cavity.beta_eom;
    let beta_star = null_depth_for_position(cfg.cavity.loading_position_m, &spec)?;

    let mut data = Table::new(&["z_over_l", "z_m", "contrast_at_beta_eom", "contrast_at_beta_star"]);
    let n = cfg.cavity.z_points;
    for i in 0..n {
        let f = i as f64 / (n - 1) as f64;
        let z = (f * spec.length).min(spec.length);
        data.push(&[&f, &z, &lattice_contrast(beta, z, &spec)?, &lattice_contrast(beta_star, z, &spec)?]);
    }
    let mut sidebands = Table::new(&["order", "amplitude", "relative_power"]);
    for (order, a) in sideband_amplitudes(beta, cfg.cavity.n_sidebands) {
        sidebands.push(&[&order, &a, &(a * a)]);
    }

    let nulls = null_fractions(beta);
    let mut b = Bundle::new(data).table("sidebands.csv", sidebands);
    b.set("enhancement", enhancement_factor(&spec)?);
    b.set("finesse", finesse(&spec)?);
    b.set("fsr_hz", free_spectral_range(&spec, c));
    b.set("linewidth_hz", linewidth_fwhm(&spec, c)?);
    b.set("waist_m", mode_waist(&spec)?);
    b.set("intracavity_power_w", intracavity_power(&spec)?);
    b.set("beta_eom", beta);
    b.set("null_positions", &nulls);
    b.set("null_positions_m", nulls.iter().map(|f| f * spec.length).collect::<Vec<_>>());
    b.set("loading_position_m", cfg.cavity.loading_position_m);
    b.set("beta_star", beta_star);
    Ok(b)
}

/// Reservoir density and atom number from an empty start, per duty cycle.
pub fn reservoir_curves(cfg: &ScenarioConfig) -> Result<Bundle> {
    let r = &cfg.reservoir;
    let mut data = Table::new(&["duty", "t_s", "density_per_cm3", "atom_number"]);
    let mut n_inf = Vec::new();
    for &d in &r.duty_sweep {
        let model = cfg.reservoir_model(d);
        let states = integrate_density(&model, 0.0, r.t_end_s, r.dt_s)?;
        let closed = steady_state_density(&model)?;
        let end = states.last().map(|s| s.density).unwrap_or(0.0);
        for s in &states {
            data.push(&[&d, &s.t, &s.density, &s.atom_number]);
        }
        n_inf.push(json!({ "duty": d, "n_inf_per_cm3": closed, "n_at_t_end_per_cm3": end, "atom_number_inf": closed * model.v_eff }));
    }
    let model = cfg.reservoir_model(r.duty_cycle);
    let mut b = Bundle::new(data);
    b.set("n_inf_by_duty", n_inf);
    b.set("depletion_duty", r.duty_cycle);
    b.set("extraction_atoms_per_s", r.extraction_atoms_per_s);
    b.set("depletion", depletion_under_extraction(&model, r.extraction_atoms_per_s, r.settle_s)?);
    Ok(b)
}

/// Steady-state density against duty cycle, plus a rate-equation fit of
/// noisy synthetic loading curves at the configured duty cycles.
pub fn steady_state_scan(cfg: &ScenarioConfig, seed: u64) -> Result<Bundle> {
    let duties: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
    let scan = steady_state_vs_duty(&cfg.reservoir_model(1.0), &duties)?;
    let mut data = Table::new(&["duty", "n_inf_per_cm3", "atom_number_inf"]);
    for (d, n) in &scan {
        data.push(&[d, n, &(n * cfg.reservoir.v_eff_cm3)]);
    }

    // 2 % multiplicative noise on every point of the configured sweep.
    let r = &cfg.reservoir;
    let mut rng = RngHandle::new(seed, STREAM_NOISE);
    let (mut t, mut n, mut sig, mut duty) = (vec![], vec![], vec![], vec![]);
    let mut curves = Table::new(&["duty", "t_s", "density_per_cm3", "sigma_per_cm3"]);
    for &d in &r.duty_sweep {
        for s in integrate_density(&cfg.reservoir_model(d), 0.0, r.t_end_s, r.dt_s)?.into_iter().skip(1) {
            let e = 0.02 * s.density;
            let y = s.density + e * rng.normal();
            curves.push(&[&d, &s.t, &y, &e]);
            t.push(s.t);
            n.push(y);
            sig.push(e);
            duty.push(d);
        }
    }
    let truth = cfg.reservoir_model(1.0);
    let fit = tweezer_core::fit::fit_reservoir_ode(
        &t,
        &n,
        &sig,
        &duty,
        [0.5 * truth.gamma_atom, 2.0 * truth.beta_2body, truth.source_density_rate()],
        false,
    )?;

    let at = |d: f64| steady_state_density(&cfg.reservoir_model(d));
    let mut b = Bundle::new(data).table("synthetic_curves.csv", curves);
    b.set("n_inf_d050_per_cm3", at(0.5)?);
    b.set("n_inf_d005_per_cm3", at(0.05)?);
    b.set("fit", fit_json(&fit));
    Ok(b)
}

struct McSetup {
    field: TrapField,
    table: Option<ScatterTable>,
    setup: LoadingSetup,
}

fn mc_setup(cfg: &ScenarioConfig, side: usize, n_atoms: usize) -> Result<McSetup> {
    let k = cfg.constants();
    let field = TrapField::square_array(side, cfg.trap.spacing_um / 1e6, cfg.tweezer(), Some(cfg.transport()), cfg.trap.gravity, &k)?;
    let table = if cfg.loading.scattering { Some(ScatterTable::build(&cfg.drive(), 0.0)?) } else { None };
    let mut setup = LoadingSetup::around(&field, central_site(side), n_atoms, cfg.t_grid(), cfg.cloud());
    setup.settings = cfg.sim_settings();
    Ok(McSetup { field, table, setup })
}

fn kernel(cfg: &ScenarioConfig, seed: u64, side: usize, n_atoms: usize) -> Result<LoadingKernel> {
    let mc = mc_setup(cfg, side, n_atoms)?;
    Ok(loading_kernel(&mc.field, mc.table.as_ref(), &mc.setup, &cfg.constants(), &RngHandle::new(seed, STREAM_KERNEL))?)
}

/// Reservoir density for each configured duty cycle, atoms/cm^3.
fn sweep_densities(cfg: &ScenarioConfig) -> Result<Vec<(f64, f64)>> {
    cfg.reservoir
        .duty_sweep
        .iter()
        .map(|&d| Ok((d, steady_state_density(&cfg.reservoir_model(d))?)))
        .collect()
}

fn kernel_json(k: &LoadingKernel) -> serde_json::Value {
    json!({
        "n_atoms": k.n_atoms,
        "reinjections": k.reinjections,
        "capture_volume_um3": k.capture_volume.iter().map(|g| g * 1e18).collect::<Vec<_>>(),
        "capture_volume_err_um3": k.capture_volume_err.iter().map(|g| g * 1e18).collect::<Vec<_>>(),
        "recheck_volume_um3": k.recheck_volume * 1e18,
    })
}

fn fit_json(f: &FitResult) -> serde_json::Value {
    let params: serde_json::Map<_, _> = f
        .param_names
        .iter()
        .zip(f.params.iter().zip(&f.std_errors))
        .map(|(n, (p, e))| (n.clone(), json!({ "value": p, "std_error": e })))
        .collect();
    json!({
        "model": f.model,
        "params": params,
        "chi2": f.chi2,
        "dof": f.dof,
        "converged": f.converged,
        "iterations": f.iterations,
    })
}

/// Loading curves of the central site at the given densities, all from
/// one simulated kernel.
fn curves_bundle(k: &LoadingKernel, side: usize, densities: &[(String, f64)]) -> Result<Bundle> {
    let mut data = Table::new(&["label", "density_per_cm3", "t_ms", "p_geq1", "p_geq1_err", "p_fit"]);
    let mut fits = Vec::new();
    for (label, n) in densities {
        let c = k.curve(n * CM3_TO_M3)?;
        for i in 0..c.t.len() {
            let t = c.t[i];
            let p_fit = match (c.p_inf(), c.tau()) {
                (Some(p), Some(tau)) => p * (1.0 - (-t / tau).exp()),
                _ => f64::NAN,
            };
            data.push(&[label, n, &(t * 1e3), &c.p_geq1[i], &c.p_geq1_err[i], &p_fit]);
        }
        fits.push(json!({
            "label": label,
            "density_per_cm3": n,
            "p_1ms": c.p_at(1e-3),
            "tau_ms": c.tau().map(|t| t * 1e3),
            "tau_err_ms": c.fit.as_ref().and_then(|f| f.std_error("tau")).map(|t| t * 1e3),
            "p_inf": c.p_inf(),
            "fit_error": c.fit_error,
        }));
    }
    let mut b = Bundle::new(data);
    b.set("array_side", side);
    b.set("curves", fits);
    b.set("kernel", kernel_json(k));
    Ok(b)
}

pub fn loading_curves(cfg: &ScenarioConfig, seed: u64) -> Result<Bundle> {
    let mut densities: Vec<(String, f64)> =
        sweep_densities(cfg)?.into_iter().map(|(d, n)| (format!("duty={d}"), n)).collect();
    densities.push(("reference".into(), cfg.loading.density_per_cm3));
    let k = kernel(cfg, seed, cfg.trap.array_side, cfg.loading.n_atoms)?;
    let mut b = curves_bundle(&k, cfg.trap.array_side, &densities)?;
    b.set("p_1ms_at_reference", k.curve(cfg.loading.density_per_cm3 * CM3_TO_M3)?.p_at(1e-3));
    b.set("reference_density_per_cm3", cfg.loading.density_per_cm3);
    Ok(b)
}

/// Inverse loading time against reservoir density with a linear fit.
pub fn density_scaling(cfg: &ScenarioConfig, seed: u64) -> Result<Bundle> {
    let k = kernel(cfg, seed, cfg.trap.array_side, cfg.loading.n_atoms)?;
    let mut data = Table::new(&["duty", "density_per_cm3", "tau_ms", "tau_err_ms", "inv_tau_per_ms"]);
    let (mut xs, mut ys) = (vec![], vec![]);
    for (d, n) in sweep_densities(cfg)? {
        let c = k.curve(n * CM3_TO_M3)?;
        let tau = c.tau().ok_or_else(|| {
            tweezer_core::Error::Convergence(format!("no loading time at duty {d}: {}", c.fit_error.clone().unwrap_or_default()))
        })? * 1e3;
        let err = c.fit.as_ref().and_then(|f| f.std_error("tau")).unwrap_or(f64::NAN) * 1e3;
        data.push(&[&d, &n, &tau, &err, &(1.0 / tau)]);
        xs.push(n);
        ys.push(1.0 / tau);
    }
    let lf = linear_fit(&xs, &ys)?;
    let mut b = Bundle::new(data);
    b.set("slope_1e-11_cm3_per_ms", lf.slope * 1e11);
    b.set("slope_err_1e-11_cm3_per_ms", lf.slope_std_error * 1e11);
    b.set("intercept_per_ms", lf.intercept);
    b.set("r_squared", lf.r_squared);
    b.set("kernel", kernel_json(&k));
    Ok(b)
}

/// Grab-and-drop extraction (g) and the array-size comparison (h).
pub fn extraction_and_arrays(cfg: &ScenarioConfig, seed: u64) -> Result<Bundle> {
    let r = &cfg.reservoir;
    let reservoir = cfg.reservoir_model(r.duty_cycle);
    let n_inf = steady_state_density(&reservoir)?;
    let mut data = Table::new(&["m", "extraction_atoms_per_s", "simulated_atoms_per_s", "p_geq1_final", "density_change", "n_inf_per_cm3"]);
    let mut grab = Vec::new();
    for (i, &m) in cfg.cycle.grab_m.iter().enumerate() {
        let mut rng = RngHandle::new(seed, STREAM_GRAB).child(i as u64);
        let g = grab_and_drop(&cfg.grab_spec(m), &reservoir, cfg.cycle.grab_cycles, r.settle_s, &mut rng)?;
        data.push(&[&m, &g.extraction_rate, &g.simulated_rate, &g.final_p_geq1, &g.density_change, &(n_inf * (1.0 - g.density_change))]);
        grab.push(g);
    }

    let k = cfg.constants();
    let table = if cfg.loading.scattering { Some(ScatterTable::build(&cfg.drive(), 0.0)?) } else { None };
    let sides = &cfg.loading.array_sides;
    let results = array_size_independence(
        sides,
        cfg.trap.spacing_um / 1e6,
        cfg.tweezer(),
        Some(cfg.transport()),
        table.as_ref(),
        cfg.loading.density_per_cm3 * CM3_TO_M3,
        cfg.loading.n_atoms,
        &cfg.t_grid(),
        cfg.cloud(),
        &cfg.sim_settings(),
        &k,
        &RngHandle::new(seed, STREAM_ARRAYS),
    )?;
    let mut arrays = Table::new(&["side", "t_ms", "p_geq1", "p_geq1_err"]);
    let mut taus = Vec::new();
    for a in &results {
        let c = a.kernel.curve(cfg.loading.density_per_cm3 * CM3_TO_M3)?;
        for i in 0..c.t.len() {
            arrays.push(&[&a.side, &(c.t[i] * 1e3), &c.p_geq1[i], &c.p_geq1_err[i]]);
        }
        taus.push(json!({ "side": a.side, "tau_ms": a.tau.map(|t| t * 1e3), "p_final": a.p_final }));
    }
    let ratio = match (results.first().and_then(|a| a.tau), results.last().and_then(|a| a.tau)) {
        (Some(a), Some(b)) if results.len() > 1 => Some(a / b),
        _ => None,
    };
    let mut b = Bundle::new(data).table("arrays.csv", arrays);
    b.set("grab_and_drop", &grab);
    b.set("array_taus", taus);
    b.set("tau_ratio_first_over_last", ratio);
    b.set("density_per_cm3", cfg.loading.density_per_cm3);
    Ok(b)
}

/// Loading probability after `map_t_ms` against the starting offset from
/// the focus.
pub fn probability_map(cfg: &ScenarioConfig, seed: u64) -> Result<Bundle> {
    let mc = mc_setup(cfg, 1, 2)?;
    map_bundle(cfg, seed, &mc, cfg.loading.map_n_rep)
}

fn map_table(cfg: &ScenarioConfig, seed: u64, mc: &McSetup, n_rep: usize) -> Result<Table> {
    let l = &cfg.loading;
    let grid: Vec<(f64, f64)> =
        l.map_z_um.iter().flat_map(|&z| l.map_r_um.iter().map(move |&r| (z / 1e6, r / 1e6))).collect();
    let cells = loading_probability_map(
        &mc.field,
        mc.table.as_ref(),
        mc.setup.site,
        &grid,
        l.map_t_ms / 1e3,
        n_rep,
        cfg.cloud(),
        &mc.setup.settings,
        &cfg.constants(),
        &RngHandle::new(seed, STREAM_MAP),
    )?;
    let mut t = Table::new(&["z_um", "r_um", "p_load", "p_recheck", "n_rep"]);
    for c in &cells {
        t.push(&[&(c.z * 1e6), &(c.r * 1e6), &c.p_load, &c.p_recheck, &c.n_rep]);
    }
    Ok(t)
}

fn map_bundle(cfg: &ScenarioConfig, seed: u64, mc: &McSetup, n_rep: usize) -> Result<Bundle> {
    let t = map_table(cfg, seed, mc, n_rep)?;
    let tw = mc.field.tweezers[mc.setup.site];
    let mut b = Bundle::new(t);
    b.set("waist_um", tw.waist * 1e6);
    b.set("rayleigh_range_um", tw.rayleigh_range() * 1e6);
    b.set("t_eval_ms", cfg.loading.map_t_ms);
    b.set("n_rep", n_rep);
    Ok(b)
}

/// Options of the `load-mc` subcommand.
#[derive(Debug, Clone, Default)]
pub struct LoadMcOptions {
    pub density_per_cm3: Option<f64>,
    pub duty: Option<f64>,
    pub side: Option<usize>,
    pub n_atoms: Option<usize>,
    pub map_reps: Option<usize>,
    pub molasses: bool,
}

pub fn load_mc(cfg: &ScenarioConfig, seed: u64, o: &LoadMcOptions) -> Result<Bundle> {
    let density = match (o.density_per_cm3, o.duty) {
        (Some(n), _) => n,
        (None, Some(d)) => {
            if !(0.0..=1.0).contains(&d) {
                return Err(CliError::Config(format!("--duty {d} is outside the closed interval [0, 1]")));
            }
            steady_state_density(&cfg.reservoir_model(d))?
        }
        (None, None) => cfg.loading.density_per_cm3,
    };
    if !(density >= 0.0 && density.is_finite()) {
        return Err(CliError::Config(format!("--density {density} must be >= 0")));
    }
    let side = o.side.unwrap_or(cfg.trap.array_side);
    let n_atoms = o.n_atoms.unwrap_or(cfg.loading.n_atoms);
    if side == 0 || n_atoms < 2 {
        return Err(CliError::Config("--side must be >= 1 and --atoms >= 2".into()));
    }
    let k = kernel(cfg, seed, side, n_atoms)?;
    let mut b = curves_bundle(&k, side, &[("density".into(), density)])?;
    let reps = o.map_reps.unwrap_or(cfg.loading.map_n_rep);
    if reps > 0 {
        let mc = mc_setup(cfg, 1, 2)?;
        b = b.table("map.csv", map_table(cfg, seed, &mc, reps)?);
    }
    if o.molasses {
        let (tr, ta) = doppler_equilibrium_temperature(
            &cfg.drive(),
            &cfg.molasses_run(),
            &cfg.constants(),
            &RngHandle::new(seed, STREAM_MOLASSES),
        )?;
        b.set("molasses_t_radial_uk", tr * 1e6);
        b.set("molasses_t_axial_uk", ta * 1e6);
    }
    Ok(b)
}

/// Cycle simulation shared by `fig3cde` and the `pipeline` subcommand.
pub fn pipeline(cfg: &ScenarioConfig, seed: u64, reuse_rounds: u32, n_cycles: u64, rabi: bool) -> Result<Bundle> {
    let spec = cfg.cycle_spec(Some(reuse_rounds));
    let models = cfg.pipeline_models(rabi && reuse_rounds > 0)?;
    let mut rng = RngHandle::new(seed, STREAM_PIPELINE);
    let run = tweezer_core::pipeline::run_cycles(&spec, &models, n_cycles, &mut rng)?;

    let mut data = Table::new(&["cycle_index", "round", "site", "outcome", "survived"]);
    for r in &run.records {
        data.push(&[&r.cycle, &r.round, &r.site, &r.outcome.label(), &r.survived]);
    }

    // Per-run outcome fractions over identified sites.
    let per_run = reuse_rounds as u64 + 1;
    let n_runs = n_cycles.div_ceil(per_run);
    let mut counts = vec![[0u64; 3]; n_cycles as usize];
    for r in &run.records {
        counts[r.cycle as usize][r.outcome.index()] += 1;
    }
    let step_ms = models.rabi_step.unwrap_or(0.0) * 1e3;
    let mut rabi_t = Table::new(&["run", "round", "pulse_ms", "p0", "p1", "p_not_lost", "n"]);
    let mut pooled = vec![[0u64; 3]; per_run as usize];
    for c in 0..n_cycles {
        let (run_i, round) = (c / per_run, c % per_run);
        let k = counts[c as usize];
        let n: u64 = k.iter().sum();
        let f = |i: usize| if n > 0 { k[i] as f64 / n as f64 } else { f64::NAN };
        rabi_t.push(&[&run_i, &round, &(round as f64 * step_ms), &f(0), &f(1), &(1.0 - f(2)), &n]);
        for i in 0..3 {
            pooled[round as usize][i] += k[i];
        }
    }
    let mut avg = Table::new(&["round", "pulse_ms", "p0", "p1", "p_not_lost", "remaining_fraction", "remaining_model"]);
    let s = &run.summary.survival_by_round;
    for (round, k) in pooled.iter().enumerate() {
        let n: u64 = k.iter().sum();
        let f = |i: usize| if n > 0 { k[i] as f64 / n as f64 } else { f64::NAN };
        let remaining = if s[0] > 0.0 { s[round] / s[0] } else { f64::NAN };
        let model = (1.0 - models.coherence.reuse_loss).powi(round as i32);
        avg.push(&[&round, &(round as f64 * step_ms), &f(0), &f(1), &(1.0 - f(2)), &remaining, &model]);
    }

    let mut b = Bundle::new(data);
    if reuse_rounds > 0 {
        b = b.table("rabi.csv", rabi_t).table("averaged.csv", avg);
    }
    let ch = &models.channel;
    b.set("n_cycles", n_cycles);
    b.set("n_runs", n_runs);
    b.set("reuse_rounds", reuse_rounds);
    b.set("fresh_cycles_per_s", spec.fresh_rate());
    b.set("reuse_cycles_per_s", spec.reuse_rate());
    b.set("simulated_cycles_per_s", run.summary.cycles_per_second);
    b.set("atoms_per_s", run.summary.atoms_per_second);
    b.set("fill_fraction", run.summary.fill_fraction);
    b.set("load_mean", models.load_mean);
    b.set("survival_by_round", s);
    b.set(
        "outcome_fractions",
        json!({
            Outcome::Zero.label(): run.summary.outcome_fractions[0],
            Outcome::One.label(): run.summary.outcome_fractions[1],
            Outcome::Loss.label(): run.summary.outcome_fractions[2],
        }),
    );
    b.set("confusion", ch.confusion());
    b.set("mean_correct", ch.mean_correct());
    b.set("mean_correct_excluding_loss", ch.mean_correct_excluding_loss());
    b.set("epsilon_flip_model", models.imaging.expected_flip(run.summary.fill_fraction));
    Ok(b)
}

/// Lifetime, Ramsey, Hahn and Rabi measurements with and without reloading.
pub fn coherence(cfg: &ScenarioConfig, seed: u64) -> Result<Bundle> {
    let f = &cfg.fit;
    let opts = cfg.fit_options();
    let phases = cfg.fringe_phases();
    let mut data = Table::new(&["experiment", "channel", "x_s", "y", "sigma", "y_fit"]);
    let mut summary = serde_json::Map::new();
    let mut stream = 0;
    for (label, reload) in [("control", false), ("reload", true)] {
        let model = cfg.coherence(reload);
        let mut entry = serde_json::Map::new();
        for (channel, holds, truth) in [
            (CoherenceChannel::Lifetime, &f.lifetime_holds_s, model.lifetime),
            (CoherenceChannel::Ramsey, &f.ramsey_holds_s, model.t2_star),
            (CoherenceChannel::Hahn, &f.hahn_holds_s, model.t2_hahn),
            (CoherenceChannel::Rabi, &f.rabi_times_s, model.lifetime),
        ] {
            let mut rng = RngHandle::new(seed, STREAM_COHERENCE).child(stream);
            stream += 1;
            let m = measure_coherence_time(channel, &model, holds, &phases, f.shots_per_point, &opts, &mut rng)?;
            let xs: Vec<f64> = m.points.iter().map(|p| p.x).collect();
            let fitted = fitted_values(channel, &m.fit, &xs)?;
            let name = serde_json::to_value(channel).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            for (p, yf) in m.points.iter().zip(fitted) {
                data.push(&[&label, &name.as_str(), &p.x, &p.y, &p.sigma, &yf]);
            }
            entry.insert(
                name,
                json!({ "time_s": m.time, "time_err_s": m.time_err, "generating_time_s": truth, "fit": fit_json(&m.fit) }),
            );
        }
        summary.insert(label.into(), entry.into());
    }
    let mut b = Bundle::new(data);
    b.set("shots_per_point", f.shots_per_point);
    b.set("experiments", summary);
    Ok(b)
}

fn fitted_values(channel: CoherenceChannel, fit: &FitResult, xs: &[f64]) -> Result<Vec<f64>> {
    use tweezer_core::fit::{DampedRabi, ExponentialDecay};
    let model: &dyn FitModel = match channel {
        CoherenceChannel::Rabi => &DampedRabi,
        _ => &ExponentialDecay,
    };
    Ok(model.eval(xs, &fit.params)?)
}

/// Parity projection against projection time and the imaging flip metric
/// at the operating point.
pub fn projection_and_imaging(cfg: &ScenarioConfig, seed: u64) -> Result<Bundle> {
    let base = cfg.parity_model()?;
    let mu = base.poisson_mean_for_fill(cfg.cycle.target_fill)?;
    let n_sites = cfg.cycle.flip_shots;
    let mut rng = RngHandle::new(seed, STREAM_PARITY);
    let loaded: Vec<u32> = (0..n_sites).map(|_| rng.poisson(mu) as u32).collect();
    let multi_before = loaded.iter().filter(|&&n| n > 1).count() as f64 / n_sites as f64;
    let p_multi_before = 1.0 - (-mu).exp() * (1.0 + mu);

    let mut data = Table::new(&["t_pp_ms", "p_geq1_sim", "p_geq1_model", "p_multi_sim", "p_multi_model"]);
    let mut at_op = (0.0, 0.0);
    for i in 0..=12 {
        let t = base.duration * i as f64 / 4.0;
        let m = ParityProjectionModel { duration: t.max(1e-12), ..base };
        let out = parity_project(&loaded, &m, &mut rng.child(i as u64));
        let geq1 = out.iter().filter(|&&n| n > 0).count() as f64 / n_sites as f64;
        let multi = out.iter().filter(|&&n| n > 1).count() as f64 / n_sites as f64;
        if i == 4 {
            at_op = (geq1, multi);
        }
        data.push(&[&(t * 1e3), &geq1, &m.filling(mu), &multi, &(p_multi_before * m.multi_survival())]);
    }

    let imaging = cfg.imaging();
    imaging.validate()?;
    let flips = flip_experiment(&imaging, cfg.cycle.target_fill, cfg.cycle.flip_shots, &mut RngHandle::new(seed, STREAM_FLIP));
    let mut b = Bundle::new(data);
    b.set("t_pp_ms", base.duration * 1e3);
    b.set("gamma_multi_per_s", base.gamma_multi);
    b.set("gamma_single_per_s", base.gamma_single);
    b.set("load_mean", mu);
    b.set("fill_at_t_pp_sim", at_op.0);
    b.set("fill_at_t_pp_model", base.filling(mu));
    b.set("multi_residual_ratio_sim", if multi_before > 0.0 { at_op.1 / multi_before } else { f64::NAN });
    b.set("multi_residual_ratio_model", base.multi_survival());
    b.set("epsilon_flip_sim", flips.epsilon_flip());
    b.set("epsilon_flip_model", imaging.expected_flip(cfg.cycle.target_fill));
    b.set("false_bright", imaging.false_bright());
    b.set("false_dark", imaging.false_dark());
    Ok(b)
}

/// Reads `x,y[,sigma]` rows; lines that do not parse as numbers (a header)
/// are skipped.
pub fn read_xy_csv(text: &str) -> Result<(Vec<f64>, Vec<f64>, Option<Vec<f64>>)> {
    let (mut x, mut y, mut s) = (vec![], vec![], vec![]);
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: std::result::Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        let Ok(vals) = vals else {
            if x.is_empty() {
                continue;
            }
            return Err(CliError::Config(format!("line {}: not a numeric row: {line:?}", i + 1)));
        };
        if !(2..=3).contains(&vals.len()) || width.is_some_and(|w| w != vals.len()) {
            return Err(CliError::Config(format!("line {}: expected a consistent 2 or 3 columns", i + 1)));
        }
        width = Some(vals.len());
        x.push(vals[0]);
        y.push(vals[1]);
        if vals.len() == 3 {
            s.push(vals[2]);
        }
    }
    if x.is_empty() {
        return Err(CliError::Config("no data rows".into()));
    }
    Ok((x, y, (width == Some(3)).then_some(s)))
}

pub fn model_by_name(name: &str) -> Result<Box<dyn FitModel>> {
    use tweezer_core::fit::{DampedRabi, ExponentialDecay, Fringe, SaturatingExponential};
    Ok(match name {
        "saturating_exponential" => Box::new(SaturatingExponential),
        "exponential_decay" => Box::new(ExponentialDecay),
        "fringe" => Box::new(Fringe),
        "damped_rabi" => Box::new(DampedRabi),
        other => {
            return Err(CliError::Config(format!(
                "unknown model {other:?}; valid models: saturating_exponential, exponential_decay, fringe, damped_rabi"
            )))
        }
    })
}

/// The `fit` subcommand: one model fitted to a user CSV.
pub fn fit_csv(cfg: &ScenarioConfig, text: &str, model: &str, guess: &[f64]) -> Result<Bundle> {
    let m = model_by_name(model)?;
    if guess.len() != m.n_params() {
        return Err(CliError::Config(format!(
            "model {model} takes {} initial values ({}), got {}",
            m.n_params(),
            m.param_names().join(", "),
            guess.len()
        )));
    }
    let (x, y, sigma) = read_xy_csv(text)?;
    let data = match sigma {
        Some(s) => FitData::new(x, y, s)?,
        None => FitData::unweighted(x, y)?,
    };
    let fit = nls_fit_with(m.as_ref(), &data, guess, &[], &cfg.fit_options())?;
    if !fit.converged {
        return Err(tweezer_core::Error::Convergence(fit.message.clone()).into());
    }
    let yf = m.eval(&data.x, &fit.params)?;
    let mut t = Table::new(&["x", "y", "sigma", "y_fit", "weighted_residual"]);
    for i in 0..data.x.len() {
        t.push(&[&data.x[i], &data.y[i], &data.sigma[i], &yf[i], &((data.y[i] - yf[i]) / data.sigma[i])]);
    }
    let mut b = Bundle::new(t);
    b.set("fit", &fit);
    Ok(b)
}
