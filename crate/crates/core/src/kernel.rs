//! Communication rates and their pair potential.
//!
//! A kernel is evaluated on the distance `r = |x - x*| >= 0`, so evenness is
//! built in. Admissible kernels are nonnegative and nonincreasing on `[0, inf)`.
//! Hot loops go through [`KernelSpec::phi_sq`] and [`KernelSpec::potential_sq`],
//! which take the squared distance and skip the square root where the family
//! allows it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance of the potential quadrature.
pub const QUADRATURE_TOL: f64 = 1e-12;

/// Slack allowed when checking that sampled values are nonincreasing.
pub const MONOTONE_TOL: f64 = 1e-12;

/// Grid size used by [`kernel_bounds`] for tabulated kernels.
pub const BOUNDS_GRID: usize = 1001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    /// `phi(r) = c`.
    Constant { c: f64 },
    /// `phi(r) = (1 + r^2)^(-gamma)`.
    CuckerSmale { gamma: f64 },
    /// Piecewise-linear through `(r, phi(r))` knots, constant outside them.
    Tabulated { knots: Vec<(f64, f64)> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelBounds {
    pub phi_min: f64,
    pub phi_max: f64,
    pub r_max: f64,
}

impl KernelSpec {
    /// `phi` as a function of the squared distance. No domain checks.
    #[inline]
    pub fn phi_sq(&self, r2: f64) -> f64 {
        match self {
            KernelSpec::Constant { c } => *c,
            KernelSpec::CuckerSmale { gamma } => {
                if *gamma == 1.0 {
                    1.0 / (1.0 + r2)
                } else {
                    (1.0 + r2).powf(-gamma)
                }
            }
            KernelSpec::Tabulated { knots } => interpolate(knots, r2.sqrt()),
        }
    }

    /// `Phi` as a function of the squared distance. No domain checks.
    pub fn potential_sq(&self, r2: f64) -> f64 {
        match self {
            KernelSpec::Constant { c } => 0.5 * c * r2,
            KernelSpec::CuckerSmale { gamma } => {
                let log1p = r2.ln_1p();
                if *gamma == 1.0 {
                    0.5 * log1p
                } else {
                    let e = 1.0 - gamma;
                    (e * log1p).exp_m1() / (2.0 * e)
                }
            }
            KernelSpec::Tabulated { .. } => potential_quadrature(self, r2.sqrt()),
        }
    }

    /// Structural problems with the parameters themselves, independent of any grid.
    fn structural_findings(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self {
            KernelSpec::Constant { c } => {
                if !(c.is_finite() && *c > 0.0) {
                    out.push(format!("constant kernel requires finite c > 0, got {c}"));
                }
            }
            KernelSpec::CuckerSmale { gamma } => {
                if !(gamma.is_finite() && *gamma > 0.0) {
                    out.push(format!("cucker_smale kernel requires finite gamma > 0, got {gamma}"));
                }
            }
            KernelSpec::Tabulated { knots } => {
                if knots.is_empty() {
                    out.push("tabulated kernel has no knots".into());
                }
                for (k, &(r, v)) in knots.iter().enumerate() {
                    if !r.is_finite() || !v.is_finite() {
                        out.push(format!("knot {k} is not finite: ({r}, {v})"));
                    } else {
                        if r < 0.0 {
                            out.push(format!("knot {k} has negative radius {r}"));
                        }
                        if v < 0.0 {
                            out.push(format!("knot {k} has negative value {v}"));
                        }
                    }
                }
                for (k, w) in knots.windows(2).enumerate() {
                    if w[1].0 <= w[0].0 {
                        out.push(format!("knot radii not strictly increasing at {}", k + 1));
                    }
                    if w[1].1 > w[0].1 {
                        out.push(format!(
                            "monotonicity violated: knot values increase from {} to {} between r={} and r={}",
                            w[0].1, w[1].1, w[0].0, w[1].0
                        ));
                    }
                }
            }
        }
        out
    }
}

fn interpolate(knots: &[(f64, f64)], r: f64) -> f64 {
    let first = knots[0];
    if r <= first.0 {
        return first.1;
    }
    let last = knots[knots.len() - 1];
    if r >= last.0 {
        return last.1;
    }
    // first knot with radius > r; exists because r < last.0
    let hi = knots.partition_point(|&(kr, _)| kr <= r);
    let (r0, v0) = knots[hi - 1];
    let (r1, v1) = knots[hi];
    v0 + (v1 - v0) * (r - r0) / (r1 - r0)
}

fn check_radius(r: f64) -> Result<()> {
    if r.is_nan() || r < 0.0 {
        return Err(Error::Domain(format!("radius must be nonnegative, got {r}")));
    }
    Ok(())
}

pub fn eval_phi(kernel: &KernelSpec, r: f64) -> Result<f64> {
    check_radius(r)?;
    Ok(match kernel {
        KernelSpec::Tabulated { knots } => interpolate(knots, r),
        _ => kernel.phi_sq(r * r),
    })
}

/// `Phi(r) = int_0^r u phi(u) du`.
pub fn eval_potential(kernel: &KernelSpec, r: f64) -> Result<f64> {
    check_radius(r)?;
    Ok(match kernel {
        KernelSpec::Tabulated { .. } => potential_quadrature(kernel, r),
        _ => kernel.potential_sq(r * r),
    })
}

/// Adaptive Simpson quadrature of `u phi(u)` over `[0, r]`, split at tabulated knots.
///
/// Works for every family; the closed forms in [`eval_potential`] are checked
/// against it.
pub fn potential_quadrature(kernel: &KernelSpec, r: f64) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    let mut breaks = vec![0.0];
    if let KernelSpec::Tabulated { knots } = kernel {
        breaks.extend(knots.iter().map(|k| k.0).filter(|&kr| kr > 0.0 && kr < r));
    }
    breaks.push(r);
    let tol = QUADRATURE_TOL / (breaks.len() - 1) as f64;
    let f = |u: f64| {
        u * match kernel {
            KernelSpec::Tabulated { knots } => interpolate(knots, u),
            _ => kernel.phi_sq(u * u),
        }
    };
    breaks
        .windows(2)
        .map(|w| adaptive_simpson(&f, w[0], w[1], tol))
        .sum()
}

fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, 50)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Lists every violated admissibility condition; empty means the kernel is admissible
/// on `[0, r_max]`.
pub fn validate_kernel(kernel: &KernelSpec, r_max: f64, n_samples: usize) -> Vec<String> {
    let mut findings = kernel.structural_findings();
    if !findings.is_empty() {
        // sampling a malformed table could index out of bounds
        return findings;
    }
    if !(r_max.is_finite() && r_max > 0.0) {
        findings.push(format!("r_max must be finite and positive, got {r_max}"));
        return findings;
    }
    let n = n_samples.max(2);
    let samples: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let r = r_max * k as f64 / (n - 1) as f64;
            (r, eval_phi(kernel, r).unwrap_or(f64::NAN))
        })
        .collect();
    for &(r, v) in &samples {
        if !v.is_finite() {
            findings.push(format!("non-finite value {v} at r={r}"));
        } else if v < 0.0 {
            findings.push(format!("negative value {v} at r={r}"));
        }
    }
    for w in samples.windows(2) {
        let ((r, a), (s, b)) = (w[0], w[1]);
        if (b - a) * (s - r) > MONOTONE_TOL {
            findings.push(format!(
                "monotonicity violated on grid: phi({r})={a} < phi({s})={b}"
            ));
        }
    }
    findings
}

/// Lower and upper bounds of `phi` over `[0, r_max]`.
pub fn kernel_bounds(kernel: &KernelSpec, r_max: f64) -> Result<KernelBounds> {
    if !(r_max.is_finite() && r_max > 0.0) {
        return Err(Error::Domain(format!("r_max must be finite and positive, got {r_max}")));
    }
    let findings = validate_kernel(kernel, r_max, BOUNDS_GRID);
    if !findings.is_empty() {
        return Err(Error::InvalidKernel(findings));
    }
    let (phi_min, phi_max) = match kernel {
        KernelSpec::Constant { c } => (*c, *c),
        KernelSpec::CuckerSmale { .. } => (eval_phi(kernel, r_max)?, 1.0),
        KernelSpec::Tabulated { knots } => {
            let n = BOUNDS_GRID;
            (0..n)
                .map(|k| interpolate(knots, r_max * k as f64 / (n - 1) as f64))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(v), hi.max(v))
                })
        }
    };
    Ok(KernelBounds {
        phi_min,
        phi_max,
        r_max,
    })
}
