//! Weighted nonlinear least squares (Levenberg-Marquardt) and the model zoo
//! used to analyse loading curves, coherence scans and reservoir loading.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::reservoir::density_with_sensitivities;

/// A model `y = f(x; p)` evaluated over a whole data set at once, so models
/// with hidden state (ODE integration) can share work across points.
pub trait FitModel: Sync {
    fn name(&self) -> &str;
    fn param_names(&self) -> Vec<&'static str>;
    fn bounds(&self) -> Vec<(f64, f64)>;
    fn eval(&self, x: &[f64], p: &[f64]) -> Result<Vec<f64>>;

    /// Rows are data points, columns parameters. Defaults to central
    /// differences.
    fn jacobian(&self, x: &[f64], p: &[f64]) -> Result<DMatrix<f64>> {
        finite_difference_jacobian(self, x, p, 1e-6)
    }

    fn has_analytic_jacobian(&self) -> bool {
        false
    }

    fn n_params(&self) -> usize {
        self.param_names().len()
    }
}

pub fn finite_difference_jacobian<M: FitModel + ?Sized>(
    model: &M,
    x: &[f64],
    p: &[f64],
    rel_step: f64,
) -> Result<DMatrix<f64>> {
    let mut j = DMatrix::zeros(x.len(), p.len());
    for k in 0..p.len() {
        let h = rel_step * p[k].abs().max(1e-12);
        let mut up = p.to_vec();
        let mut dn = p.to_vec();
        up[k] += h;
        dn[k] -= h;
        let fu = model.eval(x, &up)?;
        let fd = model.eval(x, &dn)?;
        for i in 0..x.len() {
            j[(i, k)] = (fu[i] - fd[i]) / (2.0 * h);
        }
    }
    Ok(j)
}

/// `p_inf (1 - exp(-t / tau))`, parameters `[p_inf, tau]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SaturatingExponential;

/// `A exp(-t / tau)`, parameters `[A, tau]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExponentialDecay;

/// `A (1 + V cos(phi - phi0)) / 2`, parameters `[A, V, phi0]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Fringe;

/// `A exp(-t / tau) (1 + cos(Omega t)) / 2`, parameters `[A, tau, Omega]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct DampedRabi;

impl FitModel for SaturatingExponential {
    fn name(&self) -> &str {
        "saturating_exponential"
    }
    fn param_names(&self) -> Vec<&'static str> {
        vec!["p_inf", "tau"]
    }
    // p_inf is a probability; leaving it open lets a nearly linear curve
    // trade it against tau without limit.
    fn bounds(&self) -> Vec<(f64, f64)> {
        vec![(0.0, 1.0), (1e-300, f64::INFINITY)]
    }
    fn eval(&self, x: &[f64], p: &[f64]) -> Result<Vec<f64>> {
        Ok(x.iter().map(|t| p[0] * (1.0 - (-t / p[1]).exp())).collect())
    }
    fn jacobian(&self, x: &[f64], p: &[f64]) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_fn(x.len(), 2, |i, k| {
            let e = (-x[i] / p[1]).exp();
            match k {
                0 => 1.0 - e,
                _ => -p[0] * e * x[i] / (p[1] * p[1]),
            }
        }))
    }
    fn has_analytic_jacobian(&self) -> bool {
        true
    }
}

impl FitModel for ExponentialDecay {
    fn name(&self) -> &str {
        "exponential_decay"
    }
    fn param_names(&self) -> Vec<&'static str> {
        vec!["amplitude", "tau"]
    }
    fn bounds(&self) -> Vec<(f64, f64)> {
        vec![(f64::NEG_INFINITY, f64::INFINITY), (1e-300, f64::INFINITY)]
    }
    fn eval(&self, x: &[f64], p: &[f64]) -> Result<Vec<f64>> {
        Ok(x.iter().map(|t| p[0] * (-t / p[1]).exp()).collect())
    }
    fn jacobian(&self, x: &[f64], p: &[f64]) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_fn(x.len(), 2, |i, k| {
            let e = (-x[i] / p[1]).exp();
            match k {
                0 => e,
                _ => p[0] * e * x[i] / (p[1] * p[1]),
            }
        }))
    }
    fn has_analytic_jacobian(&self) -> bool {
        true
    }
}

impl FitModel for Fringe {
    fn name(&self) -> &str {
        "fringe"
    }
    fn param_names(&self) -> Vec<&'static str> {
        vec!["amplitude", "visibility", "phi0"]
    }
    fn bounds(&self) -> Vec<(f64, f64)> {
        vec![(0.0, f64::INFINITY), (0.0, 1.0), (f64::NEG_INFINITY, f64::INFINITY)]
    }
    fn eval(&self, x: &[f64], p: &[f64]) -> Result<Vec<f64>> {
        Ok(x.iter().map(|phi| p[0] * (1.0 + p[1] * (phi - p[2]).cos()) / 2.0).collect())
    }
    fn jacobian(&self, x: &[f64], p: &[f64]) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_fn(x.len(), 3, |i, k| {
            let (s, c) = (x[i] - p[2]).sin_cos();
            match k {
                0 => (1.0 + p[1] * c) / 2.0,
                1 => p[0] * c / 2.0,
                _ => p[0] * p[1] * s / 2.0,
            }
        }))
    }
    fn has_analytic_jacobian(&self) -> bool {
        true
    }
}

impl FitModel for DampedRabi {
    fn name(&self) -> &str {
        "damped_rabi"
    }
    fn param_names(&self) -> Vec<&'static str> {
        vec!["amplitude", "tau", "omega"]
    }
    fn bounds(&self) -> Vec<(f64, f64)> {
        vec![(0.0, f64::INFINITY), (1e-300, f64::INFINITY), (0.0, f64::INFINITY)]
    }
    fn eval(&self, x: &[f64], p: &[f64]) -> Result<Vec<f64>> {
        Ok(x.iter()
            .map(|t| p[0] * (-t / p[1]).exp() * (1.0 + (p[2] * t).cos()) / 2.0)
            .collect())
    }
    fn jacobian(&self, x: &[f64], p: &[f64]) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_fn(x.len(), 3, |i, k| {
            let t = x[i];
            let e = (-t / p[1]).exp();
            let (s, c) = (p[2] * t).sin_cos();
            match k {
                0 => e * (1.0 + c) / 2.0,
                1 => p[0] * e * t / (p[1] * p[1]) * (1.0 + c) / 2.0,
                _ => -p[0] * e * t * s / 2.0,
            }
        }))
    }
    fn has_analytic_jacobian(&self) -> bool {
        true
    }
}

/// Reservoir loading curves from an empty reservoir, parameters
/// `[gamma_atom, beta, source]` with `source = phi0 / V_eff`. Only the
/// ratio phi0/V_eff is identifiable from density data.
///
/// `duty[i]` is the duty cycle of data point `i`; points of the same curve
/// must be contiguous and time-ordered.
#[derive(Debug, Clone)]
pub struct ReservoirOde {
    pub duty: Vec<f64>,
}

impl ReservoirOde {
    fn segments(&self, x: &[f64]) -> Result<Vec<(usize, usize)>> {
        if self.duty.len() != x.len() {
            return domain("reservoir model needs one duty cycle per data point");
        }
        let mut segs = Vec::new();
        let mut start = 0;
        for i in 1..=x.len() {
            if i == x.len() || self.duty[i] != self.duty[start] || x[i] < x[i - 1] {
                segs.push((start, i));
                start = i;
            }
        }
        Ok(segs)
    }

    fn solve(&self, x: &[f64], p: &[f64]) -> Result<Vec<[f64; 4]>> {
        let mut out = Vec::with_capacity(x.len());
        for (a, b) in self.segments(x)? {
            out.extend(density_with_sensitivities(p[0], p[1], p[2], self.duty[a], 0.0, &x[a..b])?);
        }
        Ok(out)
    }
}

impl FitModel for ReservoirOde {
    fn name(&self) -> &str {
        "reservoir_ode"
    }
    fn param_names(&self) -> Vec<&'static str> {
        vec!["gamma_atom", "beta", "source"]
    }
    fn bounds(&self) -> Vec<(f64, f64)> {
        vec![(0.0, f64::INFINITY); 3]
    }
    fn eval(&self, x: &[f64], p: &[f64]) -> Result<Vec<f64>> {
        Ok(self.solve(x, p)?.into_iter().map(|s| s[0]).collect())
    }
    fn jacobian(&self, x: &[f64], p: &[f64]) -> Result<DMatrix<f64>> {
        let sol = self.solve(x, p)?;
        Ok(DMatrix::from_fn(x.len(), 3, |i, k| {
            // Sensitivities are integrated as p dn/dp.
            if p[k] == 0.0 {
                0.0
            } else {
                sol[i][k + 1] / p[k]
            }
        }))
    }
    fn has_analytic_jacobian(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitData {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl FitData {
    pub fn new(x: Vec<f64>, y: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() || x.len() != sigma.len() {
            return domain("x, y and sigma must have equal length");
        }
        if let Some(s) = sigma.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return domain(format!("sigma must be positive, got {s}"));
        }
        Ok(Self { x, y, sigma })
    }

    pub fn unweighted(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = x.len();
        Self::new(x, y, vec![1.0; n])
    }

    /// Binomial error bars for probabilities estimated from `shots` trials,
    /// floored at half a count so fully saturated points keep a finite weight.
    pub fn binomial(x: Vec<f64>, p: Vec<f64>, shots: f64) -> Result<Self> {
        let floor = 0.5 / shots;
        let sigma = p
            .iter()
            .map(|&q| {
                let q = q.clamp(floor, 1.0 - floor);
                (q * (1.0 - q) / shots).sqrt()
            })
            .collect();
        Self::new(x, p, sigma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iterations: usize,
    pub gradient_tol: f64,
    pub step_tol: f64,
    pub initial_lambda: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_iterations: 500, gradient_tol: 1e-8, step_tol: 1e-14, initial_lambda: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: String,
    pub param_names: Vec<String>,
    pub params: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// Row-major covariance of the free parameters (fixed ones have zero rows).
    pub covariance: Vec<Vec<f64>>,
    /// sqrt of the weighted sum of squared residuals.
    pub residual_norm: f64,
    pub chi2: f64,
    pub dof: usize,
    pub converged: bool,
    pub iterations: usize,
    pub message: String,
    /// Residual norm after every accepted iteration.
    pub history: Vec<f64>,
}

impl FitResult {
    pub fn param(&self, name: &str) -> Option<f64> {
        self.param_names.iter().position(|n| n == name).map(|i| self.params[i])
    }

    pub fn std_error(&self, name: &str) -> Option<f64> {
        self.param_names.iter().position(|n| n == name).map(|i| self.std_errors[i])
    }
}

fn weighted_residuals(model: &dyn FitModel, data: &FitData, p: &[f64]) -> Result<DVector<f64>> {
    let f = model.eval(&data.x, p)?;
    let r = DVector::from_fn(data.x.len(), |i, _| (data.y[i] - f[i]) / data.sigma[i]);
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("{} produced a non-finite residual", model.name())));
    }
    Ok(r)
}

/// Jacobian of the weighted model values over free parameters.
fn weighted_jacobian(model: &dyn FitModel, data: &FitData, p: &[f64], free: &[usize]) -> Result<DMatrix<f64>> {
    let j = model.jacobian(&data.x, p)?;
    Ok(DMatrix::from_fn(data.x.len(), free.len(), |i, k| j[(i, free[k])] / data.sigma[i]))
}

fn project(p: &mut [f64], bounds: &[(f64, f64)]) {
    for (v, (lo, hi)) in p.iter_mut().zip(bounds) {
        *v = v.clamp(*lo, *hi);
    }
}

/// Levenberg-Marquardt with Marquardt diagonal scaling. Parameters flagged
/// in `fixed` are held at their initial values.
pub fn nls_fit_with(
    model: &dyn FitModel,
    data: &FitData,
    initial: &[f64],
    fixed: &[bool],
    options: &FitOptions,
) -> Result<FitResult> {
    let np = model.n_params();
    if initial.len() != np {
        return domain(format!("{} expects {np} parameters, got {}", model.name(), initial.len()));
    }
    let free: Vec<usize> = (0..np).filter(|&k| !fixed.get(k).copied().unwrap_or(false)).collect();
    if data.x.len() < free.len() {
        return domain(format!(
            "{} data points cannot constrain {} free parameters",
            data.x.len(),
            free.len()
        ));
    }
    let bounds = model.bounds();
    let mut p = initial.to_vec();
    project(&mut p, &bounds);

    let mut r = weighted_residuals(model, data, &p)?;
    let mut cost = r.norm_squared();
    let mut lambda = options.initial_lambda;
    let mut history = vec![cost.sqrt()];
    let mut converged = false;
    let mut message = String::from("iteration limit reached");
    let mut iterations = 0;

    while iterations < options.max_iterations {
        iterations += 1;
        let j = weighted_jacobian(model, data, &p, &free)?;
        let jtj = j.transpose() * &j;
        let g = j.transpose() * &r;
        let diag: Vec<f64> = (0..free.len()).map(|k| jtj[(k, k)]).collect();

        let scaled_grad = (0..free.len())
            .map(|k| if diag[k] > 0.0 { g[k].abs() / diag[k].sqrt() } else { 0.0 })
            .fold(0.0, f64::max);
        if scaled_grad <= options.gradient_tol * (1.0 + cost.sqrt()) {
            converged = true;
            message = "gradient below tolerance".into();
            break;
        }

        // Solve in column-equilibrated variables; parameters spanning many
        // decades otherwise swamp the normal equations.
        let scale: Vec<f64> = diag.iter().map(|&d| if d > 0.0 { d.sqrt() } else { 1.0 }).collect();
        let jtj_s = DMatrix::from_fn(free.len(), free.len(), |a, b| jtj[(a, b)] / (scale[a] * scale[b]));
        let g_s = DVector::from_fn(free.len(), |k, _| g[k] / scale[k]);

        let mut accepted = false;
        while lambda < 1e20 {
            let mut a = jtj_s.clone();
            for k in 0..free.len() {
                a[(k, k)] += lambda;
            }
            let Some(step) = a.cholesky().map(|c| {
                let z = c.solve(&g_s);
                DVector::from_fn(free.len(), |k, _| z[k] / scale[k])
            }) else {
                lambda *= 10.0;
                continue;
            };
            // Shorten steps that would cross a bound so parameters approach
            // it geometrically instead of being pinned to it.
            let mut alpha: f64 = 1.0;
            for (k, &idx) in free.iter().enumerate() {
                let (lo, hi) = bounds[idx];
                let target = p[idx] + step[k];
                if target < lo && p[idx] > lo {
                    alpha = alpha.min(0.9 * (p[idx] - lo) / -step[k]);
                } else if target > hi && p[idx] < hi {
                    alpha = alpha.min(0.9 * (hi - p[idx]) / step[k]);
                }
            }
            let mut trial = p.clone();
            for (k, &idx) in free.iter().enumerate() {
                trial[idx] += alpha * step[k];
            }
            project(&mut trial, &bounds);
            let trial_r = match weighted_residuals(model, data, &trial) {
                Ok(v) => v,
                Err(_) => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let trial_cost = trial_r.norm_squared();
            if trial_cost <= cost {
                let rel_step = free
                    .iter()
                    .map(|&idx| (trial[idx] - p[idx]).abs() / p[idx].abs().max(1e-300))
                    .fold(0.0, f64::max);
                let small_gain = cost - trial_cost <= 1e-15 * cost.max(f64::MIN_POSITIVE);
                p = trial;
                r = trial_r;
                cost = trial_cost;
                history.push(cost.sqrt());
                lambda = (lambda * 0.3).max(1e-12);
                accepted = true;
                if rel_step < options.step_tol || (small_gain && rel_step < 1e-10) {
                    converged = true;
                    message = "parameter step below tolerance".into();
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            if cost == 0.0 || scaled_grad <= 1e-6 * (1.0 + cost.sqrt()) {
                converged = true;
                message = "no further descent possible at a stationary point".into();
                break;
            }
            return Err(Error::Numerical(format!(
                "{}: damping exhausted without reducing the residual",
                model.name()
            )));
        }
        if converged {
            break;
        }
    }

    let j = weighted_jacobian(model, data, &p, &free)?;
    let jtj = j.transpose() * &j;
    let cov_free = pseudo_inverse_symmetric(&jtj);
    let mut covariance = vec![vec![0.0; np]; np];
    for (a, &ia) in free.iter().enumerate() {
        for (b, &ib) in free.iter().enumerate() {
            covariance[ia][ib] = cov_free[(a, b)];
        }
    }
    let std_errors = (0..np).map(|k| covariance[k][k].max(0.0).sqrt()).collect();
    Ok(FitResult {
        model: model.name().to_string(),
        param_names: model.param_names().iter().map(|s| s.to_string()).collect(),
        params: p,
        std_errors,
        covariance,
        residual_norm: cost.sqrt(),
        chi2: cost,
        dof: data.x.len().saturating_sub(free.len()),
        converged,
        iterations,
        message,
        history,
    })
}

pub fn nls_fit(model: &dyn FitModel, data: &FitData, initial: &[f64]) -> Result<FitResult> {
    nls_fit_with(model, data, initial, &[], &FitOptions::default())
}

/// Inverse of a symmetric positive semidefinite matrix via its eigen
/// decomposition, dropping directions with no curvature.
fn pseudo_inverse_symmetric(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    // Symmetric equilibration keeps the eigen solve well conditioned when
    // parameters differ by many orders of magnitude.
    let d: Vec<f64> = (0..n).map(|k| if a[(k, k)] > 0.0 { 1.0 / a[(k, k)].sqrt() } else { 0.0 }).collect();
    let scaled = DMatrix::from_fn(n, n, |i, j| a[(i, j)] * d[i] * d[j]);
    let eig = scaled.symmetric_eigen();
    let emax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let mut inv = DMatrix::zeros(n, n);
    for k in 0..n {
        let ev = eig.eigenvalues[k];
        if ev > 1e-14 * emax {
            let v = eig.eigenvectors.column(k);
            inv += v * v.transpose() / ev;
        }
    }
    DMatrix::from_fn(n, n, |i, j| inv[(i, j)] * d[i] * d[j])
}

/// Largest column-normalised difference between a model's Jacobian and
/// central differences with step `1e-6 * |p|`.
pub fn jacobian_check(model: &dyn FitModel, x: &[f64], p: &[f64]) -> Result<f64> {
    let a = model.jacobian(x, p)?;
    let f = finite_difference_jacobian(model, x, p, 1e-6)?;
    let mut worst: f64 = 0.0;
    for k in 0..p.len() {
        let scale = (0..x.len()).map(|i| a[(i, k)].abs()).fold(0.0, f64::max);
        if scale == 0.0 {
            let fd_scale = (0..x.len()).map(|i| f[(i, k)].abs()).fold(0.0, f64::max);
            worst = worst.max(fd_scale);
            continue;
        }
        for i in 0..x.len() {
            worst = worst.max((a[(i, k)] - f[(i, k)]).abs() / scale);
        }
    }
    Ok(worst)
}

/// Fits reservoir loading curves; see [`ReservoirOde`].
pub fn fit_reservoir_ode(
    times: &[f64],
    density: &[f64],
    sigma: &[f64],
    duty: &[f64],
    initial: [f64; 3],
    fix_beta: bool,
) -> Result<FitResult> {
    let model = ReservoirOde { duty: duty.to_vec() };
    let data = FitData::new(times.to_vec(), density.to_vec(), sigma.to_vec())?;
    nls_fit_with(&model, &data, &initial, &[false, fix_beta, false], &FitOptions::default())
}

/// Ordinary least-squares line with its coefficient of determination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_std_error: f64,
    pub r_squared: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    let n = x.len();
    if n < 3 || y.len() != n {
        return domain("linear fit needs at least three paired points");
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if sxx == 0.0 {
        return domain("x values are all equal");
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r_squared = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let slope_std_error = (sse / (nf - 2.0) / sxx).sqrt();
    Ok(LinearFit { slope, intercept, slope_std_error, r_squared })
}
