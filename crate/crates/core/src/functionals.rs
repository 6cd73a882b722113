//! Energy, covariance and potential functionals of the empirical measure, the
//! exponential-rate constants derived from them, and finite-difference checks
//! of their time-derivative identities.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ModelParams, ParticleState, Trajectory};
use crate::error::{Error, Result};
use crate::kernel::{KernelBounds, KernelSpec};

/// One time slice of every functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FunctionalSample {
    pub t: f64,
    /// Position variance.
    #[serde(rename = "X")]
    pub x_var: f64,
    /// Velocity variance.
    #[serde(rename = "V")]
    pub v_var: f64,
    /// Position-velocity covariance.
    #[serde(rename = "C")]
    pub cov: f64,
    /// Mean pair potential.
    #[serde(rename = "M")]
    pub potential: f64,
    #[serde(rename = "X_phi")]
    pub x_phi: f64,
    #[serde(rename = "V_phi")]
    pub v_phi: f64,
    #[serde(rename = "C_phi")]
    pub c_phi: f64,
    /// Herding energy `lw X + V + lx M`.
    #[serde(rename = "E")]
    pub energy: f64,
    /// Fast energy `lw X + alpha C + V`.
    #[serde(rename = "K")]
    pub fast_energy: f64,
}

pub const SAMPLE_COLUMNS: [&str; 10] =
    ["t", "X", "V", "C", "M", "X_phi", "V_phi", "C_phi", "E", "K"];

impl FunctionalSample {
    pub fn values(&self) -> [f64; 10] {
        [
            self.t,
            self.x_var,
            self.v_var,
            self.cov,
            self.potential,
            self.x_phi,
            self.v_phi,
            self.c_phi,
            self.energy,
            self.fast_energy,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayParams {
    pub params: ModelParams,
    pub bounds: KernelBounds,
    pub theta: f64,
    pub alpha: f64,
    pub delta: f64,
    /// `min{1 - theta, -1 + theta lw lv^2 phi_m / (phi_M lx^2)}`.
    pub min_term: f64,
    pub beta: f64,
    pub c12_lhs: f64,
    pub c12_rhs: f64,
    pub c12_margin: f64,
    pub condition_holds: bool,
    /// `lw - alpha^2/4`, the lower-bound coefficient `K >= (lw - alpha^2/4) X`.
    pub x_envelope_coef: f64,
}

/// `(X, V, C)` about the center of mass.
///
/// The center is accumulated as an offset from the first agent, so identical
/// agents give exactly zero.
pub fn deviation_energies(state: &ParticleState) -> (f64, f64, f64) {
    let d = state.d();
    let n = state.n();
    let (x0, v0) = (state.position(0), state.velocity(0));
    let mut xc = vec![0.0; d];
    let mut vc = vec![0.0; d];
    for i in 0..n {
        for k in 0..d {
            xc[k] += state.position(i)[k] - x0[k];
            vc[k] += state.velocity(i)[k] - v0[k];
        }
    }
    for k in 0..d {
        xc[k] /= n as f64;
        vc[k] /= n as f64;
    }
    let (mut x, mut v, mut c) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let xi = state.position(i);
        let vi = state.velocity(i);
        for k in 0..d {
            let dx = (xi[k] - x0[k]) - xc[k];
            let dv = (vi[k] - v0[k]) - vc[k];
            x += dx * dx;
            v += dv * dv;
            c += dx * dv;
        }
    }
    let inv = 1.0 / state.n() as f64;
    (x * inv, v * inv, c * inv)
}

/// `(M, X_phi, V_phi, C_phi)`: double sums over all ordered pairs with weight `1/N^2`.
pub fn weighted_functionals(state: &ParticleState, kernel: &KernelSpec) -> (f64, f64, f64, f64) {
    let n = state.n();
    let d = state.d();
    let pos = state.positions();
    let vel = state.velocities();
    // Rows in parallel, each summed in ascending j; rows combined in ascending i.
    let rows: Vec<[f64; 4]> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &pos[i * d..(i + 1) * d];
            let vi = &vel[i * d..(i + 1) * d];
            let mut acc = [0.0; 4];
            for (xj, vj) in pos.chunks_exact(d).zip(vel.chunks_exact(d)) {
                let mut r2 = 0.0;
                let mut w2 = 0.0;
                let mut dot = 0.0;
                for k in 0..d {
                    let dx = xi[k] - xj[k];
                    let dv = vi[k] - vj[k];
                    r2 += dx * dx;
                    w2 += dv * dv;
                    dot += dx * dv;
                }
                let phi = kernel.phi_sq(r2);
                acc[0] += kernel.potential_sq(r2);
                acc[1] += phi * r2;
                acc[2] += phi * w2;
                acc[3] += phi * dot;
            }
            acc
        })
        .collect();
    let mut tot = [0.0; 4];
    for row in &rows {
        for k in 0..4 {
            tot[k] += row[k];
        }
    }
    let inv = 1.0 / (n as f64 * n as f64);
    (tot[0] * inv, tot[1] * inv, tot[2] * inv, tot[3] * inv)
}

pub fn herding_energy(x_var: f64, v_var: f64, potential: f64, params: &ModelParams) -> f64 {
    params.lambda_w * x_var + v_var + params.lambda_x * potential
}

pub fn fast_energy(x_var: f64, v_var: f64, cov: f64, params: &ModelParams, alpha: f64) -> f64 {
    params.lambda_w * x_var + alpha * cov + v_var
}

/// All functionals of one state. `alpha` enters only `K`.
pub fn sample(
    state: &ParticleState,
    kernel: &KernelSpec,
    params: &ModelParams,
    alpha: f64,
) -> FunctionalSample {
    let (x_var, v_var, cov) = deviation_energies(state);
    let (potential, x_phi, v_phi, c_phi) = weighted_functionals(state, kernel);
    FunctionalSample {
        t: state.t,
        x_var,
        v_var,
        cov,
        potential,
        x_phi,
        v_phi,
        c_phi,
        energy: herding_energy(x_var, v_var, potential, params),
        fast_energy: fast_energy(x_var, v_var, cov, params, alpha),
    }
}

pub fn series(
    traj: &Trajectory,
    kernel: &KernelSpec,
    params: &ModelParams,
    alpha: f64,
) -> Vec<FunctionalSample> {
    traj.states
        .iter()
        .map(|s| sample(s, kernel, params, alpha))
        .collect()
}

/// `theta = min(1, phi_M) / 2`.
pub fn theta(phi_max: f64) -> f64 {
    0.5 * phi_max.min(1.0)
}

/// `alpha = 2 lx / (lv (1 + 2 theta lw / (phi_M lx)))`; needs `lx > 0`.
pub fn alpha(params: &ModelParams, phi_max: f64) -> Result<f64> {
    if !(params.lambda_x > 0.0) {
        return Err(Error::NotApplicable(
            "lambda_x = 0 leaves alpha undefined; exponential rate unavailable, \
             use the rate-free herding check instead"
                .into(),
        ));
    }
    let th = theta(phi_max);
    Ok(2.0 * params.lambda_x
        / (params.lambda_v * (1.0 + 2.0 * th * params.lambda_w / (phi_max * params.lambda_x))))
}

/// Strictly admissible `delta`: 0.99 times the supremum `2 sqrt(lw) / (alpha + 2 sqrt(lw))`.
pub fn choose_delta(lambda_w: f64, alpha: f64) -> f64 {
    let s = 2.0 * lambda_w.sqrt();
    0.99 * s / (alpha + s)
}

pub fn check_condition_c12(params: &ModelParams, bounds: &KernelBounds) -> Result<(bool, f64)> {
    if !(bounds.phi_min > 0.0) {
        return Err(Error::NotApplicable(format!(
            "phi_m = {} over r_max = {}: the rate condition needs a positive lower kernel bound",
            bounds.phi_min, bounds.r_max
        )));
    }
    let (lhs, rhs) = c12_sides(params, bounds);
    Ok((lhs < rhs, rhs - lhs))
}

fn c12_sides(params: &ModelParams, bounds: &KernelBounds) -> (f64, f64) {
    let lhs = bounds.phi_max * params.lambda_x * params.lambda_x
        / (bounds.phi_min * params.lambda_w * params.lambda_v * params.lambda_v);
    (lhs, theta(bounds.phi_max))
}

pub fn decay_params(params: &ModelParams, bounds: &KernelBounds) -> Result<DecayParams> {
    params.validate()?;
    if !(bounds.phi_max > 0.0) {
        return Err(Error::InvalidParams(format!(
            "phi_M must be positive, got {}",
            bounds.phi_max
        )));
    }
    let th = theta(bounds.phi_max);
    let a = alpha(params, bounds.phi_max)?;
    let delta = choose_delta(params.lambda_w, a);
    let (lw, lx, lv) = (params.lambda_w, params.lambda_x, params.lambda_v);
    let ratio = th * lw * lv * lv * bounds.phi_min / (bounds.phi_max * lx * lx);
    let min_term = (1.0 - th).min(-1.0 + ratio);
    let (c12_lhs, c12_rhs) = c12_sides(params, bounds);
    Ok(DecayParams {
        params: *params,
        bounds: *bounds,
        theta: th,
        alpha: a,
        delta,
        min_term,
        beta: min_term * a * delta,
        c12_lhs,
        c12_rhs,
        c12_margin: c12_rhs - c12_lhs,
        condition_holds: c12_lhs < c12_rhs,
        x_envelope_coef: lw - a * a / 4.0,
    })
}

/// Residuals of one derivative identity at each checkpoint.
#[derive(Debug, Clone, Serialize)]
pub struct IdentityResidual {
    pub name: &'static str,
    pub abs: Vec<f64>,
    /// `abs / scale`.
    pub rel: Vec<f64>,
    /// Largest `|right-hand side|` over the series; zero series get scale 1.
    pub scale: f64,
    /// Estimated stencil truncation error at each checkpoint.
    pub truncation: Vec<f64>,
}

impl IdentityResidual {
    fn new(name: &'static str, values: &[f64], h: f64, rhs: &[f64]) -> Self {
        let fd = finite_difference(values, h);
        let abs: Vec<f64> = fd.iter().zip(rhs).map(|(a, b)| (a - b).abs()).collect();
        let mut scale = rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            scale = 1.0;
        }
        let rel = abs.iter().map(|a| a / scale).collect();
        IdentityResidual {
            name,
            abs,
            rel,
            scale,
            truncation: truncation_estimate(values, h),
        }
    }

    /// Largest relative residual left after subtracting twice the estimated
    /// truncation error; near zero when the identity holds and the residual
    /// is stencil error.
    pub fn max_unexplained_rel(&self) -> f64 {
        self.abs
            .iter()
            .zip(&self.truncation)
            .map(|(a, t)| (a - 2.0 * t).max(0.0) / self.scale)
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.abs.iter().fold(0.0, |m: f64, v| m.max(*v))
    }

    pub fn max_rel(&self) -> f64 {
        self.rel.iter().fold(0.0, |m: f64, v| m.max(*v))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualTable {
    pub times: Vec<f64>,
    pub identities: Vec<IdentityResidual>,
}

impl ResidualTable {
    pub fn max_rel(&self) -> f64 {
        self.identities
            .iter()
            .map(IdentityResidual::max_rel)
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.identities
            .iter()
            .map(IdentityResidual::max_abs)
            .fold(0.0, f64::max)
    }

    pub fn max_unexplained_rel(&self) -> f64 {
        self.identities
            .iter()
            .map(IdentityResidual::max_unexplained_rel)
            .fold(0.0, f64::max)
    }
}

/// Second-order finite-difference derivative on a uniform grid: central inside,
/// one-sided three-point stencils at the ends. Needs at least 3 values.
pub fn finite_difference(values: &[f64], h: f64) -> Vec<f64> {
    let n = values.len();
    assert!(n >= 3, "finite_difference needs at least 3 values");
    let f = values;
    (0..n)
        .map(|k| {
            if k == 0 {
                (-3.0 * f[0] + 4.0 * f[1] - f[2]) / (2.0 * h)
            } else if k == n - 1 {
                (3.0 * f[n - 1] - 4.0 * f[n - 2] + f[n - 3]) / (2.0 * h)
            } else {
                (f[k + 1] - f[k - 1]) / (2.0 * h)
            }
        })
        .collect()
}

/// Leading truncation term of [`finite_difference`]: `h^2 |f'''| / 6` inside and
/// `h^2 |f'''| / 3` at the ends, with `f'''` from the nearest four-point third
/// difference. Zero when fewer than four values are available.
pub fn truncation_estimate(values: &[f64], h: f64) -> Vec<f64> {
    let n = values.len();
    if n < 4 {
        return vec![0.0; n];
    }
    let f = values;
    (0..n)
        .map(|k| {
            let j = k.saturating_sub(1).min(n - 4);
            let third = (f[j + 3] - 3.0 * f[j + 2] + 3.0 * f[j + 1] - f[j]).abs() / (h * h * h);
            let c = if k == 0 || k == n - 1 { 1.0 / 3.0 } else { 1.0 / 6.0 };
            c * h * h * third
        })
        .collect()
}

fn check_series(series: &[FunctionalSample], h: f64) -> Result<()> {
    if series.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "derivative residuals need at least 3 uniformly spaced checkpoints, got {}",
            series.len()
        )));
    }
    if !(h > 0.0) {
        return Err(Error::InvalidParams(format!("spacing must be positive, got {h}")));
    }
    Ok(())
}

/// Residuals of the four derivative identities for `X`, `V`, `M`, `C` on a
/// uniformly spaced series.
pub fn residuals_from_series(
    series: &[FunctionalSample],
    h: f64,
    params: &ModelParams,
) -> Result<ResidualTable> {
    check_series(series, h)?;
    let col = |f: fn(&FunctionalSample) -> f64| series.iter().map(f).collect::<Vec<_>>();
    let (lw, lx, lv) = (params.lambda_w, params.lambda_x, params.lambda_v);
    let rhs_x = col(|s| 2.0 * s.cov);
    let rhs_v: Vec<f64> = series
        .iter()
        .map(|s| -2.0 * lw * s.cov - lx * s.c_phi - lv * s.v_phi)
        .collect();
    let rhs_m = col(|s| s.c_phi);
    let rhs_c: Vec<f64> = series
        .iter()
        .map(|s| s.v_var - lw * s.x_var - 0.5 * lx * s.x_phi - 0.5 * lv * s.c_phi)
        .collect();
    Ok(ResidualTable {
        times: col(|s| s.t),
        identities: vec![
            IdentityResidual::new("dX/dt", &col(|s| s.x_var), h, &rhs_x),
            IdentityResidual::new("dV/dt", &col(|s| s.v_var), h, &rhs_v),
            IdentityResidual::new("dM/dt", &col(|s| s.potential), h, &rhs_m),
            IdentityResidual::new("dC/dt", &col(|s| s.cov), h, &rhs_c),
        ],
    })
}

/// Residual of `dE/dt = -lv V_phi` on a uniformly spaced series.
pub fn dissipation_from_series(
    series: &[FunctionalSample],
    h: f64,
    params: &ModelParams,
) -> Result<ResidualTable> {
    check_series(series, h)?;
    let energy: Vec<f64> = series.iter().map(|s| s.energy).collect();
    let rhs: Vec<f64> = series.iter().map(|s| -params.lambda_v * s.v_phi).collect();
    Ok(ResidualTable {
        times: series.iter().map(|s| s.t).collect(),
        identities: vec![IdentityResidual::new("dE/dt", &energy, h, &rhs)],
    })
}

fn uniform_series(
    traj: &Trajectory,
    kernel: &KernelSpec,
    params: &ModelParams,
) -> Vec<FunctionalSample> {
    traj.states[..traj.uniform_len()]
        .iter()
        .map(|s| sample(s, kernel, params, 0.0))
        .collect()
}

pub fn derivative_residuals(
    traj: &Trajectory,
    kernel: &KernelSpec,
    params: &ModelParams,
) -> Result<ResidualTable> {
    residuals_from_series(&uniform_series(traj, kernel, params), traj.spacing(), params)
}

pub fn energy_dissipation_residual(
    traj: &Trajectory,
    kernel: &KernelSpec,
    params: &ModelParams,
) -> Result<ResidualTable> {
    dissipation_from_series(&uniform_series(traj, kernel, params), traj.spacing(), params)
}

/// Trapezoidal integral of `values` over `times`.
pub fn trapezoid(times: &[f64], values: &[f64]) -> f64 {
    times
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::simulate;

    fn state(x: &[f64], v: &[f64]) -> ParticleState {
        ParticleState::new(0.0, 1, x.to_vec(), v.to_vec()).unwrap()
    }

    fn bounds(phi_min: f64, phi_max: f64) -> KernelBounds {
        KernelBounds {
            phi_min,
            phi_max,
            r_max: 1.0,
        }
    }

    #[test]
    fn truncation_allowance_does_not_hide_wrong_identities() {
        let s = state(&[0.0, 1.0, -0.5, 2.0], &[0.3, -0.2, 0.5, 0.0]);
        let p = ModelParams::new(1.0, 0.5, 1.0).unwrap();
        let k = KernelSpec::CuckerSmale { gamma: 1.0 };
        let traj = simulate(&s, &p, &k, 1e-2, 2.0, 1).unwrap();
        let good = derivative_residuals(&traj, &k, &p).unwrap();
        assert!(good.max_unexplained_rel() < 1e-5, "{}", good.max_unexplained_rel());
        let wrong = ModelParams::new(1.0, 0.5, 1.05).unwrap();
        let bad = residuals_from_series(&series(&traj, &k, &p, 0.0), 1e-2, &wrong).unwrap();
        assert!(bad.max_unexplained_rel() > 1e-3, "{}", bad.max_unexplained_rel());
    }

    #[test]
    fn truncation_estimate_is_exact_on_cubics() {
        let h = 0.1;
        let f: Vec<f64> = (0..8).map(|k| (k as f64 * h).powi(3)).collect();
        let fd = finite_difference(&f, h);
        let est = truncation_estimate(&f, h);
        for (k, (d, e)) in fd.iter().zip(&est).enumerate() {
            let exact = 3.0 * (k as f64 * h).powi(2);
            assert!(((d - exact).abs() - e).abs() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn deviation_examples() {
        let c = ParticleState::consensus(0.0, 4, &[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(deviation_energies(&c), (0.0, 0.0, 0.0));
        assert_eq!(deviation_energies(&state(&[1.0, -1.0], &[1.0, -1.0])), (1.0, 1.0, 1.0));
        assert_eq!(deviation_energies(&state(&[1.0, -1.0], &[-1.0, 1.0])).2, -1.0);
    }

    #[test]
    fn weighted_examples() {
        let c = ParticleState::consensus(0.0, 4, &[1.0], &[3.0]).unwrap();
        assert_eq!(
            weighted_functionals(&c, &KernelSpec::Constant { c: 1.0 }),
            (0.0, 0.0, 0.0, 0.0)
        );
        let s = state(&[1.0, -1.0], &[1.0, -1.0]);
        assert_eq!(
            weighted_functionals(&s, &KernelSpec::Constant { c: 1.0 }),
            (1.0, 2.0, 2.0, 2.0)
        );
        let (m, xp, _, _) = weighted_functionals(&s, &KernelSpec::CuckerSmale { gamma: 1.0 });
        assert!((xp - 0.4).abs() < 1e-15);
        assert!((m - 0.25 * 5f64.ln()).abs() < 1e-15);
        assert!((m - 0.402359).abs() < 1e-6);
    }

    #[test]
    fn energy_examples() {
        let p = ModelParams::new(1.0, 0.1, 1.0).unwrap();
        assert_eq!(herding_energy(0.0, 0.0, 0.0, &p), 0.0);
        assert!((herding_energy(1.0, 1.0, 1.0, &p) - 2.1).abs() < 1e-15);
        let p = ModelParams::new(1.0, 1.0, 1.0).unwrap();
        let s = sample(&state(&[1.0, -1.0], &[1.0, -1.0]), &KernelSpec::Constant { c: 1.0 }, &p, 0.5);
        assert_eq!(s.energy, 3.0);
        assert_eq!(s.fast_energy, 1.0 + 0.5 + 1.0);
    }

    #[test]
    fn reference_decay_params() {
        let p = ModelParams::new(1.0, 0.1, 10.0).unwrap();
        let d = decay_params(&p, &bounds(1.0, 1.0)).unwrap();
        // each factor by hand: theta = 1/2, alpha = 0.2 / (10 * 11) = 1/550
        assert_eq!(d.theta, 0.5);
        assert!((d.alpha - 1.0 / 550.0).abs() < 1e-18);
        assert!((d.c12_lhs - 1e-4).abs() < 1e-18);
        assert_eq!(d.c12_rhs, 0.5);
        assert!(d.condition_holds);
        assert!((d.min_term - 0.5).abs() < 1e-15);
        let delta = 0.99 * 2.0 / (2.0 + 1.0 / 550.0);
        assert!((d.delta - delta).abs() < 1e-15);
        assert!((d.delta - 0.9891).abs() < 1e-4);
        assert!((d.beta - 0.5 / 550.0 * delta).abs() < 1e-18);
        assert!((d.beta - 8.99e-4).abs() < 1e-6);
        // admissibility of delta
        assert!(d.delta < 1.0);
        assert!(d.delta.powi(2) / (1.0 - d.delta).powi(2) < 4.0 * p.lambda_w / d.alpha.powi(2));
    }

    #[test]
    fn theta_caps_at_half() {
        let p = ModelParams::new(1.0, 0.1, 10.0).unwrap();
        assert_eq!(decay_params(&p, &bounds(1.0, 4.0)).unwrap().theta, 0.5);
        assert_eq!(theta(0.5), 0.25);
    }

    #[test]
    fn condition_boundary() {
        let p = ModelParams::new(1.0, 5.0, 1.0).unwrap();
        let d = decay_params(&p, &bounds(1.0, 1.0)).unwrap();
        assert!(!d.condition_holds);
        assert!(d.beta <= 0.0);
    }

    #[test]
    fn c12_examples() {
        let p = ModelParams::new(1.0, 0.1, 10.0).unwrap();
        let (holds, margin) = check_condition_c12(&p, &bounds(1.0, 1.0)).unwrap();
        assert!(holds);
        assert!((margin - 0.4999).abs() < 1e-12);
        let (holds, _) = check_condition_c12(&ModelParams::unit(), &bounds(1.0, 1.0)).unwrap();
        assert!(!holds);
        assert!(matches!(
            check_condition_c12(&p, &bounds(0.0, 1.0)),
            Err(Error::NotApplicable(_))
        ));
    }

    #[test]
    fn zero_lambda_x_has_no_rate() {
        let p = ModelParams::new(1.0, 0.0, 1.0).unwrap();
        assert!(matches!(
            decay_params(&p, &bounds(1.0, 1.0)),
            Err(Error::NotApplicable(_))
        ));
    }

    #[test]
    fn finite_difference_is_exact_on_quadratics() {
        let h = 0.1;
        let f: Vec<f64> = (0..6).map(|k| (k as f64 * h).powi(2) + 1.0).collect();
        let df = finite_difference(&f, h);
        for (k, v) in df.iter().enumerate() {
            assert!((v - 2.0 * k as f64 * h).abs() < 1e-12);
        }
    }

    #[test]
    fn residuals_need_three_points() {
        let s = state(&[1.0, -1.0], &[0.0, 0.0]);
        let traj = simulate(&s, &ModelParams::unit(), &KernelSpec::Constant { c: 1.0 }, 0.1, 0.1, 1)
            .unwrap();
        assert!(matches!(
            derivative_residuals(&traj, &traj.kernel, &traj.params),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn consensus_residuals_vanish() {
        let c = ParticleState::consensus(0.0, 5, &[1.0], &[2.0]).unwrap();
        let k = KernelSpec::CuckerSmale { gamma: 1.0 };
        let traj = simulate(&c, &ModelParams::unit(), &k, 0.01, 1.0, 1).unwrap();
        let r = derivative_residuals(&traj, &k, &traj.params).unwrap();
        assert!(r.max_abs() <= 1e-14);
        let e = energy_dissipation_residual(&traj, &k, &traj.params).unwrap();
        assert!(e.max_abs() <= 1e-14);
    }

    #[test]
    fn two_body_covariance_identity() {
        let s = state(&[0.5, -0.5], &[0.0, 0.0]);
        let p = ModelParams::new(1.0, 0.0, 2.0).unwrap();
        let k = KernelSpec::Constant { c: 1.0 };
        let traj = simulate(&s, &p, &k, 1e-3, 1.0, 1).unwrap();
        let r = derivative_residuals(&traj, &k, &p).unwrap();
        assert!(r.identities[0].max_abs() <= 1e-6, "{}", r.identities[0].max_abs());
    }

    #[test]
    fn switched_off_kernel_conserves_energy() {
        let zero = KernelSpec::Tabulated {
            knots: vec![(0.0, 0.0)],
        };
        let s = state(&[1.0, -0.5, 0.2], &[0.3, 0.0, -0.7]);
        let p = ModelParams::new(1.5, 0.4, 1.0).unwrap();
        let traj = simulate(&s, &p, &zero, 1e-3, 2.0, 10).unwrap();
        let ser = series(&traj, &zero, &p, 0.0);
        let e0 = ser[0].energy;
        assert!(ser.iter().all(|s| (s.energy - e0).abs() < 1e-10 && s.v_phi == 0.0));
        let e = energy_dissipation_residual(&traj, &zero, &p).unwrap();
        assert!(e.max_abs() < 1e-6);
    }

    #[test]
    fn trapezoid_of_line() {
        assert!((trapezoid(&[0.0, 1.0, 3.0], &[0.0, 1.0, 3.0]) - 4.5).abs() < 1e-15);
    }
}
