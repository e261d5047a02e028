//! Adaptive Dormand-Prince 5(4) integrator for small dense systems.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
    /// Upper bound on any step.
    pub h_max: f64,
    pub max_steps: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { rtol: 1e-8, atol: 1.0, h_max: f64::INFINITY, max_steps: 1_000_000 }
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Integrates `dy/dt = f(t, y)` and records the state at every time in
/// `t_out` (which must be non-decreasing and start at or after `t0`).
///
/// `on_accept` sees every accepted state and may reject it by returning an
/// error, which aborts the integration.
pub fn integrate<F, G>(
    mut f: F,
    t0: f64,
    y0: &[f64],
    t_out: &[f64],
    tol: Tolerances,
    mut on_accept: G,
) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
    G: FnMut(f64, &[f64]) -> Result<()>,
{
    let n = y0.len();
    if t_out.windows(2).any(|w| w[1] < w[0]) || t_out.first().is_some_and(|&t| t < t0) {
        return Err(Error::Contract("output times must be sorted and >= t0".into()));
    }
    let mut y = y0.to_vec();
    let mut t = t0;
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut ytmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    let mut out = Vec::with_capacity(t_out.len());

    f(t, &y, &mut k[0]);
    let mut h = initial_step(&y, &k[0], tol).min(tol.h_max);
    let mut steps = 0usize;

    for &target in t_out {
        while t < target {
            steps += 1;
            if steps > tol.max_steps {
                return Err(Error::Convergence(format!(
                    "step budget of {} exhausted at t = {t}",
                    tol.max_steps
                )));
            }
            let remaining = target - t;
            let last = h >= remaining;
            let hs = if last { remaining } else { h };

            let stage = |ytmp: &mut [f64], k: &[Vec<f64>], coeffs: &[(usize, f64)]| {
                for i in 0..n {
                    let mut acc = y[i];
                    for &(j, a) in coeffs {
                        acc += hs * a * k[j][i];
                    }
                    ytmp[i] = acc;
                }
            };
            stage(&mut ytmp, &k, &[(0, A21)]);
            f(t + C2 * hs, &ytmp, &mut k[1]);
            stage(&mut ytmp, &k, &[(0, A31), (1, A32)]);
            f(t + C3 * hs, &ytmp, &mut k[2]);
            stage(&mut ytmp, &k, &[(0, A41), (1, A42), (2, A43)]);
            f(t + C4 * hs, &ytmp, &mut k[3]);
            stage(&mut ytmp, &k, &[(0, A51), (1, A52), (2, A53), (3, A54)]);
            f(t + C5 * hs, &ytmp, &mut k[4]);
            stage(&mut ytmp, &k, &[(0, A61), (1, A62), (2, A63), (3, A64), (4, A65)]);
            f(t + hs, &ytmp, &mut k[5]);
            stage(&mut ynew, &k, &[(0, B1), (2, B3), (3, B4), (4, B5), (5, B6)]);
            f(t + hs, &ynew, &mut k[6]);

            let mut err = 0.0;
            for i in 0..n {
                let e = hs
                    * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i]
                        + E6 * k[5][i]
                        + E7 * k[6][i]);
                let sc = tol.atol + tol.rtol * y[i].abs().max(ynew[i].abs());
                err += (e / sc) * (e / sc);
            }
            err = (err / n.max(1) as f64).sqrt();
            if !err.is_finite() {
                return Err(Error::Numerical(format!("non-finite state near t = {t}")));
            }

            if err <= 1.0 {
                t = if last { target } else { t + hs };
                std::mem::swap(&mut y, &mut ynew);
                k.swap(0, 6);
                on_accept(t, &y)?;
                let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                if !last {
                    h = (hs * fac).min(tol.h_max);
                } else {
                    h = h.max(hs * fac).min(tol.h_max);
                }
            } else {
                h = hs * (0.9 * err.powf(-0.2)).max(0.1);
                if h < 1e-14 * t.abs().max(1e-300) {
                    return Err(Error::Numerical(format!("step size underflow at t = {t}")));
                }
            }
        }
        out.push(y.clone());
    }
    Ok(out)
}

fn initial_step(y: &[f64], dy: &[f64], tol: Tolerances) -> f64 {
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    for i in 0..y.len() {
        let sc = tol.atol + tol.rtol * y[i].abs();
        d0 += (y[i] / sc).powi(2);
        d1 += (dy[i] / sc).powi(2);
    }
    let (d0, d1) = (d0.sqrt(), d1.sqrt());
    if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    }
}
