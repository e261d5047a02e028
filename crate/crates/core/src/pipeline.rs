//! Statistical model of the load / parity-project / image / pump / readout
//! cycle, the three-outcome readout channel and the qubit coherence
//! envelopes.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{domain, Error, Result};
use crate::fit::{nls_fit_with, DampedRabi, ExponentialDecay, FitData, FitOptions, FitResult, Fringe};
use crate::reservoir::{depletion_under_extraction, ReservoirModel};
use crate::rng::RngHandle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Load,
    Transport,
    Lac,
    IdentifyImage,
    Cool,
    Pump,
    ReadoutBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "rounds")]
pub enum ReusePolicy {
    FreshEachCycle,
    /// Each loaded array is measured once fresh and then `k` more times.
    ReuseNTimes(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleSpec {
    /// Stages of a cycle on a freshly loaded array, in execution order, s.
    pub stages: Vec<(Stage, f64)>,
    /// Stages of a cycle that re-measures the previous array.
    pub reuse_stages: Vec<(Stage, f64)>,
    pub n_sites: usize,
    pub reuse_policy: ReusePolicy,
}

impl CycleSpec {
    /// 33.3 ms fresh cycle and 20 ms reuse cycle on a 5x5 array.
    pub fn nominal() -> Self {
        Self {
            stages: vec![
                (Stage::Load, 1e-3),
                (Stage::Transport, 1e-3),
                (Stage::Lac, 6e-3),
                (Stage::IdentifyImage, 4e-3),
                (Stage::Cool, 6e-3),
                (Stage::Pump, 0.7e-3),
                (Stage::ReadoutBlock, 14.6e-3),
            ],
            // Load, transport, LAC and identification are skipped and the
            // cooling pulse shortened; only the 20 ms total is constrained.
            reuse_stages: vec![(Stage::Cool, 4.7e-3), (Stage::Pump, 0.7e-3), (Stage::ReadoutBlock, 14.6e-3)],
            n_sites: 25,
            reuse_policy: ReusePolicy::FreshEachCycle,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, table) in [("stages", &self.stages), ("reuse_stages", &self.reuse_stages)] {
            if table.is_empty() {
                return domain(format!("{name} must not be empty"));
            }
            for (s, d) in table {
                if !(*d > 0.0 && d.is_finite()) {
                    return domain(format!("{name}: duration of {s:?} must be positive, got {d}"));
                }
            }
        }
        if self.n_sites == 0 {
            return domain("n_sites must be positive");
        }
        Ok(())
    }

    pub fn fresh_period(&self) -> f64 {
        self.stages.iter().map(|s| s.1).sum()
    }

    pub fn reuse_period(&self) -> f64 {
        self.reuse_stages.iter().map(|s| s.1).sum()
    }

    pub fn fresh_rate(&self) -> f64 {
        1.0 / self.fresh_period()
    }

    pub fn reuse_rate(&self) -> f64 {
        1.0 / self.reuse_period()
    }

    pub fn duration(&self, stage: Stage) -> f64 {
        self.stages.iter().filter(|s| s.0 == stage).map(|s| s.1).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParityProjectionModel {
    /// Loss rate of multiply occupied tweezers, 1/s.
    pub gamma_multi: f64,
    /// Single-atom loss rate, 1/s.
    pub gamma_single: f64,
    pub duration: f64,
}

impl ParityProjectionModel {
    /// 6 ms projection to e^-3 residual multi-occupancy with 5% single loss.
    pub fn nominal() -> Self {
        Self::from_targets(6e-3, 3.0, 0.05).expect("nominal parity projection is valid")
    }

    /// Rates from a duration, a target number of multi-atom e-foldings and a
    /// single-atom loss probability.
    pub fn from_targets(duration: f64, efolds: f64, single_loss: f64) -> Result<Self> {
        if !(duration > 0.0 && efolds > 0.0 && (0.0..1.0).contains(&single_loss)) {
            return domain("duration and e-folds must be positive, single loss in [0, 1)");
        }
        let m = Self { gamma_multi: efolds / duration, gamma_single: -(1.0 - single_loss).ln() / duration, duration };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_single >= 0.0 && self.gamma_multi > self.gamma_single && self.duration > 0.0) {
            return domain("parity projection needs gamma_multi > gamma_single >= 0 and a positive duration");
        }
        Ok(())
    }

    pub fn multi_survival(&self) -> f64 {
        (-self.gamma_multi * self.duration).exp()
    }

    pub fn single_survival(&self) -> f64 {
        (-self.gamma_single * self.duration).exp()
    }

    /// Post-projection probability of an occupied site for Poisson loading
    /// with mean `mu`.
    pub fn filling(&self, mu: f64) -> f64 {
        let p0 = (-mu).exp();
        let p_multi = 1.0 - p0 - mu * p0;
        let s = self.single_survival();
        let r = self.multi_survival();
        mu * p0 * s + p_multi * (r + (1.0 - r) * s)
    }

    /// Poisson mean reproducing a target post-projection filling.
    pub fn poisson_mean_for_fill(&self, target: f64) -> Result<f64> {
        let (mut lo, mut hi) = (0.0, 50.0);
        if !(target > 0.0 && target < self.filling(hi)) {
            return domain(format!("filling {target} unreachable (max {:.4})", self.filling(hi)));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.filling(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Multi-atom sites survive as a group with `e^{-Gamma_multi T}`, otherwise
/// collapse to one atom; every remaining single then survives with
/// `e^{-Gamma_single T}`.
pub fn parity_project(occupancy: &[u32], model: &ParityProjectionModel, rng: &mut RngHandle) -> Vec<u32> {
    let r = model.multi_survival();
    let s = model.single_survival();
    occupancy
        .iter()
        .map(|&n| match n {
            0 => 0,
            1 => u32::from(rng.bernoulli(s)),
            _ => {
                if rng.bernoulli(r) {
                    n
                } else {
                    u32::from(rng.bernoulli(s))
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImagingModel {
    pub mu_bright: f64,
    pub mu_dark: f64,
    /// Bright means strictly more counts than this.
    pub threshold: u64,
    pub exposure: f64,
    pub loss_per_image: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageResult {
    pub counts: u64,
    pub bright: bool,
    pub survived: bool,
}

impl ImagingModel {
    /// Synthetic count means with the loss set so that two consecutive
    /// images flip 0.8% of the time.
    pub fn calibrated() -> Self {
        Self { mu_bright: 30.0, mu_dark: 1.5, threshold: 8, exposure: 4e-3, loss_per_image: 0.008 }
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.threshold as f64;
        if !(self.mu_bright > t && t >= self.mu_dark && self.mu_dark >= 0.0) {
            return domain("imaging needs mu_bright > threshold >= mu_dark >= 0");
        }
        if !(0.0..=1.0).contains(&self.loss_per_image) || !(self.exposure > 0.0) {
            return domain("loss_per_image must lie in [0, 1] and exposure be positive");
        }
        Ok(())
    }

    /// Probability that a Poisson(mu) count exceeds the threshold.
    fn p_bright(&self, mu: f64) -> f64 {
        if mu == 0.0 {
            return 0.0;
        }
        let mut term = (-mu).exp();
        let mut cdf = term;
        for k in 1..=self.threshold {
            term *= mu / k as f64;
            cdf += term;
        }
        (1.0 - cdf).max(0.0)
    }

    pub fn false_bright(&self) -> f64 {
        self.p_bright(self.mu_dark)
    }

    pub fn false_dark(&self) -> f64 {
        1.0 - self.p_bright(self.mu_bright)
    }

    /// Expected `p_bd/p_b + p_db/p_d` for two back-to-back images of sites
    /// occupied with probability `filling`.
    pub fn expected_flip(&self, filling: f64) -> f64 {
        let (tb, fb) = (1.0 - self.false_dark(), self.false_bright());
        let l = self.loss_per_image;
        // Second image of an atom lost in the first is dark.
        let p_b = filling * tb + (1.0 - filling) * fb;
        let p_d = 1.0 - p_b;
        let p_bd = filling * tb * ((1.0 - l) * (1.0 - tb) + l * (1.0 - fb)) + (1.0 - filling) * fb * (1.0 - fb);
        let p_db = filling * (1.0 - tb) * ((1.0 - l) * tb + l * fb) + (1.0 - filling) * (1.0 - fb) * fb;
        p_bd / p_b + p_db / p_d
    }
}

pub fn image_site(present: bool, model: &ImagingModel, rng: &mut RngHandle) -> ImageResult {
    let mu = if present { model.mu_bright } else { model.mu_dark };
    let counts = rng.poisson(mu);
    let survived = present && !rng.bernoulli(model.loss_per_image);
    ImageResult { counts, bright: counts > model.threshold, survived }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipStatistics {
    pub n_b: u64,
    pub n_d: u64,
    pub n_bd: u64,
    pub n_db: u64,
}

impl FlipStatistics {
    pub fn epsilon_flip(&self) -> f64 {
        self.n_bd as f64 / self.n_b.max(1) as f64 + self.n_db as f64 / self.n_d.max(1) as f64
    }
}

/// Two consecutive images on `n_shots` sites filled with probability `filling`.
pub fn flip_experiment(model: &ImagingModel, filling: f64, n_shots: usize, rng: &mut RngHandle) -> FlipStatistics {
    let mut st = FlipStatistics { n_b: 0, n_d: 0, n_bd: 0, n_db: 0 };
    for _ in 0..n_shots {
        let present = rng.bernoulli(filling);
        let a = image_site(present, model, rng);
        let b = image_site(a.survived, model, rng);
        match (a.bright, b.bright) {
            (true, false) => {
                st.n_b += 1;
                st.n_bd += 1
            }
            (true, true) => st.n_b += 1,
            (false, true) => {
                st.n_d += 1;
                st.n_db += 1
            }
            (false, false) => st.n_d += 1,
        }
    }
    st
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Qubit {
    Zero,
    One,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Zero,
    One,
    Loss,
}

impl Outcome {
    pub fn index(self) -> usize {
        match self {
            Outcome::Zero => 0,
            Outcome::One => 1,
            Outcome::Loss => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Outcome::Zero => "0",
            Outcome::One => "1",
            Outcome::Loss => "loss",
        }
    }
}

/// `confusion[prepared][outcome]` with outcomes ordered (0, 1, loss).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutChannel {
    confusion: [[f64; 3]; 2],
    pub error_budget: BTreeMap<String, f64>,
}

impl ReadoutChannel {
    pub fn new(confusion: [[f64; 3]; 2], error_budget: BTreeMap<String, f64>) -> Result<Self> {
        for (i, row) in confusion.iter().enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return domain(format!("confusion row {i} has an entry outside [0, 1]"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return domain(format!("confusion row {i} sums to {sum}, not 1"));
            }
        }
        Ok(Self { confusion, error_budget })
    }

    /// Measured matrix; its rows are quoted to four digits and sum to
    /// 1 +- 1e-4, so they are rescaled onto the simplex.
    pub fn measured() -> Self {
        let raw = [[0.9759, 0.0057, 0.0185], [0.0084, 0.9529, 0.0386]];
        let norm = raw.map(|r| {
            let s: f64 = r.iter().sum();
            r.map(|p| p / s)
        });
        Self::new(norm, BTreeMap::new()).expect("normalised rows")
    }

    pub fn confusion(&self) -> &[[f64; 3]; 2] {
        &self.confusion
    }

    pub fn row(&self, prepared: Qubit) -> [f64; 3] {
        self.confusion[prepared as usize]
    }

    pub fn p(&self, prepared: Qubit, outcome: Outcome) -> f64 {
        self.confusion[prepared as usize][outcome.index()]
    }

    /// Mean probability of the correct outcome.
    pub fn mean_correct(&self) -> f64 {
        0.5 * (self.confusion[0][0] + self.confusion[1][1])
    }

    /// Mean correct-outcome probability conditioned on no loss.
    pub fn mean_correct_excluding_loss(&self) -> f64 {
        0.5 * (self.confusion[0][0] / (1.0 - self.confusion[0][2]) + self.confusion[1][1] / (1.0 - self.confusion[1][2]))
    }

    /// Row with the loss outcome removed and the rest renormalised.
    pub fn lossless_row(&self, prepared: Qubit) -> [f64; 3] {
        let r = self.row(prepared);
        let keep = 1.0 - r[2];
        if keep <= 0.0 {
            return [0.0, 0.0, 1.0];
        }
        [r[0] / keep, r[1] / keep, 0.0]
    }
}

fn categorical(row: &[f64; 3], rng: &mut RngHandle) -> Outcome {
    let u = rng.uniform();
    if u < row[0] {
        Outcome::Zero
    } else if u < row[0] + row[1] {
        Outcome::One
    } else {
        Outcome::Loss
    }
}

pub fn readout_three_outcome(prepared: Qubit, channel: &ReadoutChannel, rng: &mut RngHandle) -> Outcome {
    categorical(&channel.row(prepared), rng)
}

/// Individual loss and misassignment channels of the readout sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    /// Loss during or after the occupancy image.
    pub identification_loss: f64,
    /// Loss during initialisation and the depump cycle.
    pub init_depump_loss: f64,
    /// Raman scattering and photoionisation of 3P0 during the first image.
    pub first_image_loss: f64,
    /// 3P0 decay to the ground state during the first image.
    pub decay_during_first_image: f64,
    /// Off-resonant scattering from the Raman drive; flips either state.
    pub raman_scatter: f64,
    /// |1> driven to 3P2 by the |0> transfer pulses.
    pub leakage_to_3p2: f64,
    /// 3D2 -> 3P0 branching ratio.
    pub d2_branching: f64,
    /// Mean number of 3D2 decays while depumping one atom.
    pub depump_decays: f64,
}

impl ErrorBudget {
    pub fn nominal() -> Self {
        Self {
            identification_loss: 0.007,
            init_depump_loss: 0.010,
            first_image_loss: 0.02,
            decay_during_first_image: 0.0035,
            raman_scatter: 0.0007,
            leakage_to_3p2: 0.0029,
            d2_branching: 0.0014,
            // 0.14% branching turns into 0.19% repopulation per depump.
            depump_decays: 1.357,
        }
    }

    pub fn zero() -> Self {
        Self {
            identification_loss: 0.0,
            init_depump_loss: 0.0,
            first_image_loss: 0.0,
            decay_during_first_image: 0.0,
            raman_scatter: 0.0,
            leakage_to_3p2: 0.0,
            d2_branching: 0.0,
            depump_decays: 1.0,
        }
    }

    pub fn depump_repopulation(&self) -> f64 {
        1.0 - (1.0 - self.d2_branching).powf(self.depump_decays)
    }

    pub fn contributions(&self) -> BTreeMap<String, f64> {
        [
            ("identification_loss", self.identification_loss),
            ("init_depump_loss", self.init_depump_loss),
            ("first_image_loss", self.first_image_loss),
            ("decay_during_first_image", self.decay_during_first_image),
            ("raman_scatter", self.raman_scatter),
            ("leakage_to_3p2", self.leakage_to_3p2),
            ("d2_branching", self.d2_branching),
            ("depump_repopulation", self.depump_repopulation()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Composes the budget as a sequence of independent channels:
/// occupancy loss, initialisation loss, |0> transfer pulse, first image,
/// |1> transfer pulse, second image.
pub fn compose_error_budget(b: &ErrorBudget) -> Result<ReadoutChannel> {
    for (name, p) in b.contributions() {
        if !(0.0..=0.1).contains(&p) {
            return domain(format!("budget entry {name} = {p} outside [0, 0.1]"));
        }
    }
    if !(b.depump_decays >= 1.0 && b.depump_decays.is_finite()) {
        return domain("depump_decays must be at least 1");
    }
    let alive = (1.0 - b.identification_loss) * (1.0 - b.init_depump_loss);
    let rep = b.depump_repopulation();

    // |0>: transferred and imaged bright unless repopulated into 3P0 or
    // scattered by the Raman drive, both of which read as |1>.
    let flip0 = 1.0 - (1.0 - rep) * (1.0 - b.raman_scatter);
    let row0 = [alive * (1.0 - flip0), alive * flip0, 1.0 - alive];

    // |1>: the |0> pulses may move it to the ground state (reads 0); during
    // the first image it may decay (reads 0) or be lost; the |1> transfer
    // may repopulate 3P0 leaving the second image dark.
    let pulse = 1.0 - (1.0 - b.raman_scatter) * (1.0 - b.leakage_to_3p2);
    let p0 = pulse + (1.0 - pulse) * b.decay_during_first_image;
    let after_first = (1.0 - pulse) * (1.0 - b.decay_during_first_image);
    let lost = after_first * (b.first_image_loss + (1.0 - b.first_image_loss) * rep);
    let p1 = after_first - lost;
    let row1 = [alive * p0, alive * p1, 1.0 - alive + alive * lost];

    // Guard against rounding pushing a sum a hair off 1.
    let fix = |r: [f64; 3]| {
        let s: f64 = r.iter().sum();
        r.map(|p| p / s)
    };
    ReadoutChannel::new([fix(row0), fix(row1)], b.contributions())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherenceModel {
    /// 3P0 lifetime, s.
    pub lifetime: f64,
    pub t2_star: f64,
    pub t2_hahn: f64,
    /// Rabi angular frequency, rad/s.
    pub rabi_freq: f64,
    pub reuse_loss: f64,
}

impl CoherenceModel {
    /// Control experiment without reloading.
    pub fn control() -> Self {
        Self { lifetime: 1.30, t2_star: 0.69, t2_hahn: 7.0, rabi_freq: 2.0 * std::f64::consts::PI * 10.0, reuse_loss: 0.025 }
    }

    /// With continuous reloading.
    pub fn reload() -> Self {
        Self { lifetime: 1.35, t2_star: 0.73, t2_hahn: 5.4, ..Self::control() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lifetime > 0.0 && self.t2_star > 0.0 && self.t2_hahn > 0.0 && self.rabi_freq > 0.0) {
            return domain("coherence times and Rabi frequency must be positive");
        }
        if !(0.0..=1.0).contains(&self.reuse_loss) {
            return domain("reuse_loss must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn survival(&self, t: f64) -> f64 {
        (-t / self.lifetime).exp()
    }

    pub fn ramsey_visibility(&self, t: f64) -> f64 {
        (-t / self.t2_star).exp()
    }

    pub fn hahn_visibility(&self, t: f64) -> f64 {
        (-t / self.t2_hahn).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CoherenceKind {
    /// Survival versus hold time.
    Lifetime,
    /// Fringe versus final pulse phase at a fixed hold time; normalised by survival.
    Ramsey { hold: f64 },
    /// Echo fringe versus final pulse phase at a fixed hold time; normalised by survival.
    Hahn { hold: f64 },
    /// Population of |1> versus drive time, including loss.
    Rabi,
}

/// Noise-free signal on `grid` (times, or phases for the fringe kinds).
pub fn coherence_signal(kind: CoherenceKind, model: &CoherenceModel, grid: &[f64]) -> Result<Vec<f64>> {
    model.validate()?;
    Ok(grid
        .iter()
        .map(|&x| match kind {
            CoherenceKind::Lifetime => model.survival(x),
            CoherenceKind::Ramsey { hold } => 0.5 * (1.0 + model.ramsey_visibility(hold) * x.cos()),
            CoherenceKind::Hahn { hold } => 0.5 * (1.0 + model.hahn_visibility(hold) * x.cos()),
            CoherenceKind::Rabi => model.survival(x) * 0.5 * (1.0 + (model.rabi_freq * x).cos()),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampledPoint {
    pub x: f64,
    /// Fraction of counted shots in the target state.
    pub p: f64,
    /// Shots contributing to `p` (survivors for the normalised kinds).
    pub n: u64,
}

/// Shot-noise-limited version of `coherence_signal`: each point simulates
/// `shots` atoms, which are lost with the lifetime and otherwise projected.
pub fn sample_coherence(
    kind: CoherenceKind,
    model: &CoherenceModel,
    grid: &[f64],
    shots: u64,
    rng: &mut RngHandle,
) -> Result<Vec<SampledPoint>> {
    if shots == 0 {
        return domain("shots must be positive");
    }
    let ideal = coherence_signal(kind, model, grid)?;
    Ok(grid
        .iter()
        .zip(ideal)
        .map(|(&x, p)| {
            let (hold, normalised) = match kind {
                CoherenceKind::Lifetime | CoherenceKind::Rabi => (x, false),
                CoherenceKind::Ramsey { hold } | CoherenceKind::Hahn { hold } => (hold, true),
            };
            if normalised {
                let s = model.survival(hold);
                let mut n = 0;
                let mut k = 0;
                for _ in 0..shots {
                    if rng.bernoulli(s) {
                        n += 1;
                        if rng.bernoulli(p) {
                            k += 1;
                        }
                    }
                }
                SampledPoint { x, p: if n > 0 { k as f64 / n as f64 } else { 0.0 }, n }
            } else {
                let k = (0..shots).filter(|_| rng.bernoulli(p)).count();
                SampledPoint { x, p: k as f64 / shots as f64, n: shots }
            }
        })
        .collect())
}

/// Which decay constant a coherence measurement extracts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoherenceChannel {
    Lifetime,
    Ramsey,
    Hahn,
    Rabi,
}

/// One point of the decay curve that is finally fitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayPoint {
    pub x: f64,
    pub y: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceMeasurement {
    pub channel: CoherenceChannel,
    pub points: Vec<DecayPoint>,
    pub fit: FitResult,
    /// Fitted 1/e time, s.
    pub time: f64,
    pub time_err: f64,
}

/// Simulates a coherence measurement with `shots` atoms per point and fits
/// its 1/e time. Lifetime and Rabi data are fitted directly on `holds`;
/// Ramsey and Hahn scan `phases` at every hold, fit each fringe for its
/// visibility and then fit the visibilities with an exponential.
pub fn measure_coherence_time(
    channel: CoherenceChannel,
    model: &CoherenceModel,
    holds: &[f64],
    phases: &[f64],
    shots: u64,
    options: &FitOptions,
    rng: &mut RngHandle,
) -> Result<CoherenceMeasurement> {
    let tau0 = holds.iter().cloned().fold(0.0, f64::max).max(1e-9) / 2.0;
    let (points, fit) = match channel {
        CoherenceChannel::Lifetime | CoherenceChannel::Rabi => {
            let kind = if channel == CoherenceChannel::Lifetime { CoherenceKind::Lifetime } else { CoherenceKind::Rabi };
            let samples = sample_coherence(kind, model, holds, shots, rng)?;
            let fit = if channel == CoherenceChannel::Lifetime {
                binomial_fit(&ExponentialDecay, &samples, &[1.0, tau0], options)?
            } else {
                binomial_fit(&DampedRabi, &samples, &[1.0, tau0, model.rabi_freq], options)?
            };
            let pts = samples
                .iter()
                .zip(&fit.1)
                .map(|(s, sigma)| DecayPoint { x: s.x, y: s.p, sigma: *sigma })
                .collect();
            (pts, fit.0)
        }
        CoherenceChannel::Ramsey | CoherenceChannel::Hahn => {
            let mut pts = Vec::with_capacity(holds.len());
            for &hold in holds {
                let kind = if channel == CoherenceChannel::Ramsey { CoherenceKind::Ramsey { hold } } else { CoherenceKind::Hahn { hold } };
                let fringe = sample_coherence(kind, model, phases, shots, rng)?;
                let (f, _) = binomial_fit(&Fringe, &fringe, &[1.0, 0.5, 0.0], options)?;
                let v = f.param("visibility").unwrap_or(0.0);
                let e = f.std_error("visibility").unwrap_or(0.0);
                // A fringe pinned at a bound has no curvature estimate.
                let sigma = if e > 0.0 && e.is_finite() { e } else { 1.0 / (shots as f64).sqrt() };
                pts.push(DecayPoint { x: hold, y: v, sigma });
            }
            let data = FitData::new(pts.iter().map(|p| p.x).collect(), pts.iter().map(|p| p.y).collect(), pts.iter().map(|p| p.sigma).collect())?;
            let fit = nls_fit_with(&ExponentialDecay, &data, &[1.0, tau0], &[], options)?;
            (pts, fit)
        }
    };
    let time = fit.param("tau").ok_or_else(|| Error::Numerical("fit has no tau".into()))?;
    let time_err = fit.std_error("tau").unwrap_or(f64::NAN);
    Ok(CoherenceMeasurement { channel, points, fit, time, time_err })
}

/// Binomial fit with the error bars taken from the model rather than the
/// observed fractions (which would overweight downward fluctuations);
/// iterated a few times from observed-fraction weights. Returns the fit and
/// the final error bars.
fn binomial_fit(
    model: &dyn crate::fit::FitModel,
    samples: &[SampledPoint],
    initial: &[f64],
    options: &FitOptions,
) -> Result<(FitResult, Vec<f64>)> {
    let sigma_of = |p: f64, n: u64| {
        let n = n.max(1) as f64;
        let q = p.clamp(0.5 / n, 1.0 - 0.5 / n);
        (q * (1.0 - q) / n).sqrt()
    };
    let x: Vec<f64> = samples.iter().map(|s| s.x).collect();
    let y: Vec<f64> = samples.iter().map(|s| s.p).collect();
    let mut sigma: Vec<f64> = samples.iter().map(|s| sigma_of(s.p, s.n)).collect();
    let mut fit = nls_fit_with(model, &FitData::new(x.clone(), y.clone(), sigma.clone())?, initial, &[], options)?;
    for _ in 0..3 {
        let f = model.eval(&x, &fit.params)?;
        sigma = samples.iter().zip(&f).map(|(s, &p)| sigma_of(p, s.n)).collect();
        fit = nls_fit_with(model, &FitData::new(x.clone(), y.clone(), sigma.clone())?, &fit.params, &[], options)?;
    }
    Ok((fit, sigma))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineModels {
    pub parity: ParityProjectionModel,
    pub imaging: ImagingModel,
    pub channel: ReadoutChannel,
    pub coherence: CoherenceModel,
    /// Mean number of atoms per site after loading.
    pub load_mean: f64,
    /// Rabi pulse increment per reuse round, s; `None` leaves atoms in |1>.
    pub rabi_step: Option<f64>,
}

impl PipelineModels {
    pub fn nominal() -> Self {
        let parity = ParityProjectionModel::nominal();
        let load_mean = parity.poisson_mean_for_fill(0.60).expect("60% filling reachable");
        Self {
            parity,
            imaging: ImagingModel::calibrated(),
            channel: ReadoutChannel::measured(),
            coherence: CoherenceModel::control(),
            load_mean,
            rabi_step: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.parity.validate()?;
        self.imaging.validate()?;
        self.coherence.validate()?;
        if !(self.load_mean >= 0.0 && self.load_mean.is_finite()) {
            return domain("load_mean must be non-negative");
        }
        if let Some(dt) = self.rabi_step {
            if !(dt >= 0.0) {
                return domain("rabi_step must be non-negative");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub cycle: u64,
    /// 0 for a freshly loaded array, k for its k-th reuse.
    pub round: u32,
    pub site: u32,
    pub outcome: Outcome,
    /// Whether the atom is still physically present after this cycle.
    pub survived: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub n_cycles: u64,
    pub wall_time: f64,
    pub cycles_per_second: f64,
    /// Identified atoms per second of wall time.
    pub atoms_per_second: f64,
    /// Mean post-projection filling seen by the identification image.
    pub fill_fraction: f64,
    /// Fraction of identified atoms still present after each round.
    pub survival_by_round: Vec<f64>,
    pub outcome_fractions: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub records: Vec<OutcomeRecord>,
    pub summary: PipelineSummary,
}

/// Runs `n_cycles` cycles. Under a reuse policy a fresh cycle is followed by
/// `k` reuse cycles of the same array before reloading. Every reuse loses
/// each atom with `reuse_loss`; surviving atoms are read out with the loss
/// outcome excluded, so recorded loss in reuse rounds equals `reuse_loss`.
pub fn run_cycles(spec: &CycleSpec, models: &PipelineModels, n_cycles: u64, rng: &mut RngHandle) -> Result<PipelineRun> {
    spec.validate()?;
    models.validate()?;
    let rounds = match spec.reuse_policy {
        ReusePolicy::FreshEachCycle => 0,
        ReusePolicy::ReuseNTimes(k) => k,
    };
    let mut records = Vec::new();
    let mut wall = 0.0;
    let mut identified_total = 0u64;
    let mut survivors = vec![0u64; rounds as usize + 1];
    let mut outcome_counts = [0u64; 3];
    let mut cycle = 0u64;
    let mut sites: Vec<bool> = Vec::new();
    let mut identified: Vec<bool> = Vec::new();

    while cycle < n_cycles {
        for round in 0..=rounds {
            if cycle >= n_cycles {
                break;
            }
            if round == 0 {
                wall += spec.fresh_period();
                let loaded: Vec<u32> = (0..spec.n_sites).map(|_| rng.poisson(models.load_mean) as u32).collect();
                let projected = parity_project(&loaded, &models.parity, rng);
                sites.clear();
                identified.clear();
                for &n in &projected {
                    // Residual multiple occupancy images bright and is kept
                    // as a single effective atom.
                    let img = image_site(n > 0, &models.imaging, rng);
                    identified.push(img.bright);
                    sites.push(img.survived);
                }
                identified_total += identified.iter().filter(|&&b| b).count() as u64;
            } else {
                wall += spec.reuse_period();
            }
            let prepared = match models.rabi_step {
                Some(dt) => {
                    let p0 = (0.5 * models.coherence.rabi_freq * dt * round as f64).sin().powi(2);
                    Some(p0)
                }
                None => None,
            };
            for s in 0..spec.n_sites {
                if !identified[s] {
                    continue;
                }
                let outcome = if !sites[s] {
                    Outcome::Loss
                } else {
                    let q = match prepared {
                        Some(p0) if rng.bernoulli(p0) => Qubit::Zero,
                        _ => Qubit::One,
                    };
                    if rounds == 0 {
                        let o = readout_three_outcome(q, &models.channel, rng);
                        if o == Outcome::Loss {
                            sites[s] = false;
                        }
                        o
                    } else if rng.bernoulli(models.coherence.reuse_loss) {
                        sites[s] = false;
                        Outcome::Loss
                    } else {
                        categorical(&models.channel.lossless_row(q), rng)
                    }
                };
                outcome_counts[outcome.index()] += 1;
                if sites[s] {
                    survivors[round as usize] += 1;
                }
                records.push(OutcomeRecord { cycle, round, site: s as u32, outcome, survived: sites[s] });
            }
            cycle += 1;
        }
    }
    let total_outcomes: u64 = outcome_counts.iter().sum();
    let survival_by_round = survivors
        .iter()
        .map(|&n| if identified_total > 0 { n as f64 / identified_total as f64 } else { 0.0 })
        .collect();
    let fresh_cycles = (0..n_cycles).filter(|c| c % (rounds as u64 + 1) == 0).count() as f64;
    let summary = PipelineSummary {
        n_cycles,
        wall_time: wall,
        cycles_per_second: n_cycles as f64 / wall,
        atoms_per_second: identified_total as f64 / wall,
        fill_fraction: identified_total as f64 / (fresh_cycles * spec.n_sites as f64),
        survival_by_round,
        outcome_fractions: outcome_counts.map(|c| if total_outcomes > 0 { c as f64 / total_outcomes as f64 } else { 0.0 }),
    };
    Ok(PipelineRun { records, summary })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrabDropSpec {
    pub n_sites: usize,
    /// The tweezers are switched on for one cycle in `m`.
    pub m: u32,
    /// Load plus move time, s.
    pub period: f64,
    pub p_load: f64,
}

impl GrabDropSpec {
    pub fn nominal(m: u32) -> Self {
        Self { n_sites: 256, m, period: 2e-3, p_load: 0.570 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Domain("m must be at least 1".into()));
        }
        if !(self.period > 0.0) || !(0.0..=1.0).contains(&self.p_load) || self.n_sites == 0 {
            return domain("grab-and-drop needs positive period and sites and p_load in [0, 1]");
        }
        Ok(())
    }

    pub fn extraction_rate(&self) -> f64 {
        self.n_sites as f64 * self.p_load / (self.period * self.m as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrabDropSummary {
    pub m: u32,
    pub extraction_rate: f64,
    pub simulated_rate: f64,
    /// Occupied fraction on the final (imaged) cycle.
    pub final_p_geq1: f64,
    /// Relative reservoir density reduction caused by the extraction.
    pub density_change: f64,
}

/// Simulates `n_cycles` grab-and-drop cycles and evaluates the reservoir
/// depletion the resulting sink would cause after `settle` seconds.
pub fn grab_and_drop(
    spec: &GrabDropSpec,
    reservoir: &ReservoirModel,
    n_cycles: u64,
    settle: f64,
    rng: &mut RngHandle,
) -> Result<GrabDropSummary> {
    spec.validate()?;
    if n_cycles == 0 {
        return domain("n_cycles must be positive");
    }
    let mut extracted = 0u64;
    let mut last = 0u64;
    for c in 0..n_cycles {
        if c % spec.m as u64 == 0 {
            last = (0..spec.n_sites).filter(|_| rng.bernoulli(spec.p_load)).count() as u64;
            extracted += last;
        }
    }
    let rate = spec.extraction_rate();
    Ok(GrabDropSummary {
        m: spec.m,
        extraction_rate: rate,
        simulated_rate: extracted as f64 / (n_cycles as f64 * spec.period),
        final_p_geq1: last as f64 / spec.n_sites as f64,
        density_change: depletion_under_extraction(reservoir, rate, settle)?,
    })
}
