//! The N-particle herding system with the ensemble-mean market signal.
//!
//! ```text
//! dx_i/dt = v_i
//! dv_i/dt = (lx/N) sum_j phi(|x_j - x_i|)(x_j - x_i)
//!         + (lv/N) sum_j phi(|x_j - x_i|)(v_j - v_i)
//!         + lw (x_c - x_i)
//! ```
//!
//! Every inner sum runs over `j = 0..N` in ascending order, `j = i` included
//! (it contributes an exact zero). Particles are independent given the state,
//! so the outer loop may run on any number of threads without changing a bit
//! of the result.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::KernelSpec;

/// Tolerance for deciding that a time lies on the integration grid.
const GRID_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub lambda_w: f64,
    pub lambda_x: f64,
    pub lambda_v: f64,
}

impl ModelParams {
    pub fn new(lambda_w: f64, lambda_x: f64, lambda_v: f64) -> Result<Self> {
        let p = ModelParams {
            lambda_w,
            lambda_x,
            lambda_v,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite();
        if !(ok(self.lambda_w) && self.lambda_w > 0.0) {
            return Err(Error::InvalidParams(format!(
                "lambda_w must be positive, got {}",
                self.lambda_w
            )));
        }
        if !(ok(self.lambda_v) && self.lambda_v > 0.0) {
            return Err(Error::InvalidParams(format!(
                "lambda_v must be positive, got {}",
                self.lambda_v
            )));
        }
        if !(ok(self.lambda_x) && self.lambda_x >= 0.0) {
            return Err(Error::InvalidParams(format!(
                "lambda_x must be nonnegative, got {}",
                self.lambda_x
            )));
        }
        Ok(())
    }

    /// Unit interaction strengths.
    pub fn unit() -> Self {
        ModelParams {
            lambda_w: 1.0,
            lambda_x: 1.0,
            lambda_v: 1.0,
        }
    }
}

/// Positions and velocities of `N` agents in `d` dimensions, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleState {
    pub t: f64,
    n: usize,
    d: usize,
    positions: Vec<f64>,
    velocities: Vec<f64>,
}

impl ParticleState {
    pub fn new(t: f64, d: usize, positions: Vec<f64>, velocities: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidState("dimension must be at least 1".into()));
        }
        if positions.len() != velocities.len() {
            return Err(Error::InvalidState(format!(
                "positions ({}) and velocities ({}) differ in length",
                positions.len(),
                velocities.len()
            )));
        }
        if positions.is_empty() || positions.len() % d != 0 {
            return Err(Error::InvalidState(format!(
                "{} entries do not form N>=1 rows of dimension {d}",
                positions.len()
            )));
        }
        let state = ParticleState {
            t,
            n: positions.len() / d,
            d,
            positions,
            velocities,
        };
        state.check_finite()?;
        Ok(state)
    }

    pub fn from_rows(t: f64, positions: &[Vec<f64>], velocities: &[Vec<f64>]) -> Result<Self> {
        let d = positions.first().map_or(0, Vec::len);
        if positions.iter().chain(velocities).any(|row| row.len() != d) {
            return Err(Error::InvalidState("rows have inconsistent dimension".into()));
        }
        Self::new(t, d, positions.concat(), velocities.concat())
    }

    /// All particles at the same phase point.
    pub fn consensus(t: f64, n: usize, x0: &[f64], v0: &[f64]) -> Result<Self> {
        Self::new(t, x0.len(), x0.repeat(n), v0.repeat(n))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.d..(i + 1) * self.d]
    }

    pub fn velocity(&self, i: usize) -> &[f64] {
        &self.velocities[i * self.d..(i + 1) * self.d]
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn velocities(&self) -> &[f64] {
        &self.velocities
    }

    /// First `n` particles, keeping the time stamp.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.n {
            return Err(Error::InvalidState(format!(
                "prefix of length {n} from N={}",
                self.n
            )));
        }
        Self::new(
            self.t,
            self.d,
            self.positions[..n * self.d].to_vec(),
            self.velocities[..n * self.d].to_vec(),
        )
    }

    /// Applies `x -> x + shift_x`, `v -> v + shift_v` to every particle.
    pub fn translated(&self, shift_x: &[f64], shift_v: &[f64]) -> Self {
        let mut out = self.clone();
        for (k, x) in out.positions.iter_mut().enumerate() {
            *x += shift_x[k % self.d];
        }
        for (k, v) in out.velocities.iter_mut().enumerate() {
            *v += shift_v[k % self.d];
        }
        out
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(k) = self
            .positions
            .iter()
            .chain(&self.velocities)
            .position(|v| !v.is_finite())
        {
            return Err(Error::InvalidState(format!(
                "non-finite entry at flat index {k} (t={})",
                self.t
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForceDecomposition {
    /// Mean position.
    pub a: Vec<f64>,
    /// `(1/N) sum_j phi(|x - x_j|)(x_j + v_j)`.
    pub b: Vec<f64>,
    /// `(1/N) sum_j phi(|x - x_j|)`.
    pub c: f64,
    /// `a + b - (1 + c) x - c v`, the force under unit strengths.
    pub q: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SupportRadii {
    pub r_x: f64,
    pub r_v: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub params: ModelParams,
    pub kernel: KernelSpec,
    /// Integration step.
    pub dt: f64,
    pub record_every: usize,
    /// Integration step index of each recorded state.
    pub steps: Vec<usize>,
    pub states: Vec<ParticleState>,
}

impl Trajectory {
    pub fn start_time(&self) -> f64 {
        self.states[0].t
    }

    pub fn end_time(&self) -> f64 {
        self.states[self.states.len() - 1].t
    }

    pub fn times(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.t).collect()
    }

    /// Number of leading states on the uniform `dt * record_every` grid.
    pub fn uniform_len(&self) -> usize {
        self.steps
            .iter()
            .enumerate()
            .take_while(|&(k, &s)| s == k * self.record_every)
            .count()
    }

    /// Recorded spacing `dt * record_every`.
    pub fn spacing(&self) -> f64 {
        self.dt * self.record_every as f64
    }
}

pub fn center_of_mass(state: &ParticleState) -> (Vec<f64>, Vec<f64>) {
    (
        column_mean(state.positions(), state.n, state.d),
        column_mean(state.velocities(), state.n, state.d),
    )
}

fn column_mean(data: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d];
    for row in data.chunks_exact(d) {
        for (acc, x) in m.iter_mut().zip(row) {
            *acc += x;
        }
    }
    let inv = 1.0 / n as f64;
    m.iter_mut().for_each(|v| *v *= inv);
    m
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Absolute support radii `max |x_i|`, `max |v_i|`.
pub fn support_radii(state: &ParticleState) -> SupportRadii {
    let max_norm = |data: &[f64]| {
        data.chunks_exact(state.d)
            .map(norm)
            .fold(0.0f64, f64::max)
    };
    SupportRadii {
        r_x: max_norm(state.positions()),
        r_v: max_norm(state.velocities()),
    }
}

/// Support radii about the center of mass.
pub fn centered_support_radii(state: &ParticleState) -> SupportRadii {
    let (xc, vc) = center_of_mass(state);
    let max_dev = |data: &[f64], c: &[f64]| {
        data.chunks_exact(state.d)
            .map(|row| {
                row.iter()
                    .zip(c)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0f64, f64::max)
    };
    SupportRadii {
        r_x: max_dev(state.positions(), &xc),
        r_v: max_dev(state.velocities(), &vc),
    }
}

/// Largest pairwise position distance.
pub fn position_diameter(state: &ParticleState) -> f64 {
    let d = state.d;
    let mut best = 0.0f64;
    for i in 0..state.n {
        let xi = state.position(i);
        for j in (i + 1)..state.n {
            let r2: f64 = xi
                .iter()
                .zip(&state.positions[j * d..(j + 1) * d])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            best = best.max(r2);
        }
    }
    best.sqrt()
}

/// `sum_j phi(|x_j - x|) (x_j - x)` and the same for velocities, with `j`
/// ascending. Every variant below performs the same operations in the same
/// order; they differ only in what the compiler can specialize.
#[inline(always)]
fn pair_sums<const D: usize>(
    x: &[f64],
    v: &[f64],
    positions: &[f64],
    velocities: &[f64],
    phi: impl Fn(f64) -> f64,
    acc_x: &mut [f64],
    acc_v: &mut [f64],
) {
    let x: [f64; D] = x.try_into().expect("dimension");
    let v: [f64; D] = v.try_into().expect("dimension");
    let mut ax = [0.0; D];
    let mut av = [0.0; D];
    for (xj, vj) in positions.chunks_exact(D).zip(velocities.chunks_exact(D)) {
        let mut dx = [0.0; D];
        let mut r2 = 0.0;
        for k in 0..D {
            dx[k] = xj[k] - x[k];
            r2 += dx[k] * dx[k];
        }
        let p = phi(r2);
        for k in 0..D {
            ax[k] += p * dx[k];
            av[k] += p * (vj[k] - v[k]);
        }
    }
    acc_x.copy_from_slice(&ax);
    acc_v.copy_from_slice(&av);
}

fn pair_sums_kernel<const D: usize>(
    x: &[f64],
    v: &[f64],
    positions: &[f64],
    velocities: &[f64],
    kernel: &KernelSpec,
    acc_x: &mut [f64],
    acc_v: &mut [f64],
) {
    match kernel {
        KernelSpec::Constant { c } => {
            pair_sums::<D>(x, v, positions, velocities, |_| *c, acc_x, acc_v)
        }
        KernelSpec::CuckerSmale { gamma } if *gamma == 1.0 => pair_sums::<D>(
            x,
            v,
            positions,
            velocities,
            |r2| 1.0 / (1.0 + r2),
            acc_x,
            acc_v,
        ),
        _ => pair_sums::<D>(
            x,
            v,
            positions,
            velocities,
            |r2| kernel.phi_sq(r2),
            acc_x,
            acc_v,
        ),
    }
}

fn pair_sums_dyn(
    x: &[f64],
    v: &[f64],
    positions: &[f64],
    velocities: &[f64],
    phi: impl Fn(f64) -> f64,
    acc_x: &mut [f64],
    acc_v: &mut [f64],
) {
    let d = x.len();
    acc_x.fill(0.0);
    acc_v.fill(0.0);
    for (xj, vj) in positions.chunks_exact(d).zip(velocities.chunks_exact(d)) {
        let mut r2 = 0.0;
        for k in 0..d {
            let dx = xj[k] - x[k];
            r2 += dx * dx;
        }
        let p = phi(r2);
        for k in 0..d {
            acc_x[k] += p * (xj[k] - x[k]);
            acc_v[k] += p * (vj[k] - v[k]);
        }
    }
}

/// Herding force at an arbitrary phase point `(x, v)` against the measure of `state`.
///
/// `acc` is scratch of length `2d`.
#[inline]
#[allow(clippy::too_many_arguments)]
fn force_at(
    x: &[f64],
    v: &[f64],
    xc: &[f64],
    positions: &[f64],
    velocities: &[f64],
    params: &ModelParams,
    kernel: &KernelSpec,
    acc: &mut [f64],
    out: &mut [f64],
) {
    let d = x.len();
    let n = positions.len() / d;
    let (acc_x, acc_v) = acc.split_at_mut(d);
    match d {
        1 => pair_sums_kernel::<1>(x, v, positions, velocities, kernel, acc_x, acc_v),
        2 => pair_sums_kernel::<2>(x, v, positions, velocities, kernel, acc_x, acc_v),
        3 => pair_sums_kernel::<3>(x, v, positions, velocities, kernel, acc_x, acc_v),
        _ => pair_sums_dyn(x, v, positions, velocities, |r2| kernel.phi_sq(r2), acc_x, acc_v),
    }
    let lx = params.lambda_x / n as f64;
    let lv = params.lambda_v / n as f64;
    for k in 0..d {
        out[k] = lx * acc_x[k] + lv * acc_v[k] + params.lambda_w * (xc[k] - x[k]);
    }
}

fn accelerations_into(
    positions: &[f64],
    velocities: &[f64],
    d: usize,
    params: &ModelParams,
    kernel: &KernelSpec,
    out: &mut [f64],
) {
    let n = positions.len() / d;
    let xc = column_mean(positions, n, d);
    out.par_chunks_mut(d)
        .enumerate()
        .for_each_init(
            || vec![0.0; 2 * d],
            |acc, (i, out_i)| {
                force_at(
                    &positions[i * d..(i + 1) * d],
                    &velocities[i * d..(i + 1) * d],
                    &xc,
                    positions,
                    velocities,
                    params,
                    kernel,
                    acc,
                    out_i,
                )
            },
        );
}

/// `dv_i/dt` for every particle, row-major `N x d`.
pub fn accelerations(
    state: &ParticleState,
    params: &ModelParams,
    kernel: &KernelSpec,
) -> Result<Vec<f64>> {
    state.check_finite()?;
    let mut out = vec![0.0; state.positions.len()];
    accelerations_into(
        &state.positions,
        &state.velocities,
        state.d,
        params,
        kernel,
        &mut out,
    );
    Ok(out)
}

/// A passive phase-space point moved by the force field of the particle system.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Tracer {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

/// Scratch buffers for one RK4 step; reused across steps by [`simulate`].
struct Rk4Work {
    kx: [Vec<f64>; 4],
    kv: [Vec<f64>; 4],
    sx: Vec<f64>,
    sv: Vec<f64>,
}

impl Rk4Work {
    fn new(len: usize) -> Self {
        Rk4Work {
            kx: std::array::from_fn(|_| vec![0.0; len]),
            kv: std::array::from_fn(|_| vec![0.0; len]),
            sx: vec![0.0; len],
            sv: vec![0.0; len],
        }
    }
}

/// Classical RK4 step of the particle system, carrying any tracers along with
/// the very same stage states. The new time is `t_new`.
fn rk4_step(
    state: &ParticleState,
    params: &ModelParams,
    kernel: &KernelSpec,
    dt: f64,
    t_new: f64,
    work: &mut Rk4Work,
    tracers: &mut [Tracer],
) -> Result<ParticleState> {
    let d = state.d;
    let n = state.n;
    let stage_scale = [0.0, 0.5 * dt, 0.5 * dt, dt];
    let mut tk: Vec<[Vec<f64>; 4]> = tracers
        .iter()
        .map(|_| std::array::from_fn(|_| vec![0.0; 2 * d]))
        .collect();
    let mut acc = vec![0.0; 2 * d];
    let mut tx = vec![0.0; d];
    let mut tv = vec![0.0; d];

    for stage in 0..4 {
        let h = stage_scale[stage];
        if stage == 0 {
            work.sx.copy_from_slice(&state.positions);
            work.sv.copy_from_slice(&state.velocities);
        } else {
            let (px, pv) = (&work.kx[stage - 1], &work.kv[stage - 1]);
            for k in 0..work.sx.len() {
                work.sx[k] = state.positions[k] + h * px[k];
                work.sv[k] = state.velocities[k] + h * pv[k];
            }
        }
        work.kx[stage].copy_from_slice(&work.sv);
        accelerations_into(&work.sx, &work.sv, d, params, kernel, &mut work.kv[stage]);
        if work.kv[stage].iter().any(|a| !a.is_finite()) {
            return Err(Error::Integration {
                t: state.t,
                stage: stage + 1,
            });
        }

        if !tracers.is_empty() {
            let xc = column_mean(&work.sx, n, d);
            for (tr, k) in tracers.iter().zip(tk.iter_mut()) {
                if stage == 0 {
                    tx.copy_from_slice(&tr.x);
                    tv.copy_from_slice(&tr.v);
                } else {
                    let prev = &k[stage - 1];
                    for c in 0..d {
                        tx[c] = tr.x[c] + h * prev[c];
                        tv[c] = tr.v[c] + h * prev[d + c];
                    }
                }
                let (kx_t, kv_t) = k[stage].split_at_mut(d);
                kx_t.copy_from_slice(&tv);
                force_at(
                    &tx, &tv, &xc, &work.sx, &work.sv, params, kernel, &mut acc, kv_t,
                );
                if kv_t.iter().any(|a| !a.is_finite()) {
                    return Err(Error::Integration {
                        t: state.t,
                        stage: stage + 1,
                    });
                }
            }
        }
    }

    let w = dt / 6.0;
    let combine = |y: &[f64], k: &[Vec<f64>; 4]| -> Vec<f64> {
        (0..y.len())
            .map(|c| y[c] + w * (k[0][c] + 2.0 * k[1][c] + 2.0 * k[2][c] + k[3][c]))
            .collect()
    };
    let positions = combine(&state.positions, &work.kx);
    let velocities = combine(&state.velocities, &work.kv);

    for (tr, k) in tracers.iter_mut().zip(&tk) {
        for c in 0..d {
            tr.x[c] += w * (k[0][c] + 2.0 * k[1][c] + 2.0 * k[2][c] + k[3][c]);
            let cv = d + c;
            tr.v[c] += w * (k[0][cv] + 2.0 * k[1][cv] + 2.0 * k[2][cv] + k[3][cv]);
        }
    }

    let next = ParticleState {
        t: t_new,
        n,
        d,
        positions,
        velocities,
    };
    if next.check_finite().is_err() {
        return Err(Error::Integration {
            t: state.t,
            stage: 4,
        });
    }
    Ok(next)
}

fn check_dt(dt: f64) -> Result<()> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidParams(format!("dt must be positive, got {dt}")));
    }
    Ok(())
}

pub fn step_rk4(
    state: &ParticleState,
    params: &ModelParams,
    kernel: &KernelSpec,
    dt: f64,
) -> Result<ParticleState> {
    check_dt(dt)?;
    state.check_finite()?;
    let mut work = Rk4Work::new(state.positions.len());
    rk4_step(state, params, kernel, dt, state.t + dt, &mut work, &mut [])
}

/// Number of `dt` steps covering `span`; a trailing partial step counts as one.
fn steps_for(span: f64, dt: f64) -> usize {
    let ratio = span / dt;
    let rounded = ratio.round();
    if (ratio - rounded).abs() <= GRID_TOL * rounded.max(1.0) {
        rounded as usize
    } else {
        ratio.ceil() as usize
    }
}

/// Fixed-step RK4 integrator holding the current state.
///
/// The time after `k` steps is `t0 + k dt`, computed directly rather than
/// accumulated.
pub struct Stepper<'a> {
    params: &'a ModelParams,
    kernel: &'a KernelSpec,
    dt: f64,
    t0: f64,
    step: usize,
    state: ParticleState,
    work: Rk4Work,
}

impl<'a> Stepper<'a> {
    pub fn new(
        init: &ParticleState,
        params: &'a ModelParams,
        kernel: &'a KernelSpec,
        dt: f64,
    ) -> Result<Self> {
        check_dt(dt)?;
        params.validate()?;
        init.check_finite()?;
        Ok(Self::resume(init.clone(), 0, init.t, params, kernel, dt))
    }

    fn resume(
        state: ParticleState,
        step: usize,
        t0: f64,
        params: &'a ModelParams,
        kernel: &'a KernelSpec,
        dt: f64,
    ) -> Self {
        let work = Rk4Work::new(state.positions.len());
        Stepper {
            params,
            kernel,
            dt,
            t0,
            step,
            state,
            work,
        }
    }

    pub fn advance(&mut self) -> Result<&ParticleState> {
        let t_new = self.t0 + (self.step + 1) as f64 * self.dt;
        self.state = rk4_step(
            &self.state,
            self.params,
            self.kernel,
            self.dt,
            t_new,
            &mut self.work,
            &mut [],
        )?;
        self.step += 1;
        Ok(&self.state)
    }

    pub fn state(&self) -> &ParticleState {
        &self.state
    }

    /// Steps taken since the initial state.
    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Number of steps needed to reach `t` from the initial time.
    pub fn steps_to(&self, t: f64) -> usize {
        steps_for(t - self.t0, self.dt)
    }
}

/// Integrates from `init` to `t_end`, recording every `record_every`-th state
/// plus the first and the last.
pub fn simulate(
    init: &ParticleState,
    params: &ModelParams,
    kernel: &KernelSpec,
    dt: f64,
    t_end: f64,
    record_every: usize,
) -> Result<Trajectory> {
    if record_every == 0 {
        return Err(Error::InvalidParams("record_every must be at least 1".into()));
    }
    if !(t_end > init.t) {
        return Err(Error::InvalidParams(format!(
            "t_end ({t_end}) must exceed the initial time ({})",
            init.t
        )));
    }
    let mut stepper = Stepper::new(init, params, kernel, dt)?;
    let total = stepper.steps_to(t_end);
    let mut steps = vec![0];
    let mut states = vec![init.clone()];
    for k in 1..=total {
        let current = stepper.advance()?;
        if k % record_every == 0 || k == total {
            steps.push(k);
            states.push(current.clone());
        }
    }
    Ok(Trajectory {
        params: *params,
        kernel: kernel.clone(),
        dt,
        record_every,
        steps,
        states,
    })
}

/// Grid step index of `t` relative to `t0`, or an error if `t` is off the grid.
fn grid_index(t: f64, t0: f64, dt: f64) -> Result<usize> {
    let ratio = (t - t0) / dt;
    let k = ratio.round();
    if k < 0.0 || (ratio - k).abs() > GRID_TOL * k.max(1.0) {
        return Err(Error::InvalidParams(format!(
            "time {t} is not on the integration grid t0={t0}, dt={dt}"
        )));
    }
    Ok(k as usize)
}

/// States at each requested time (ascending, on the `dt` grid from `init.t`).
///
/// Same arithmetic as [`simulate`], without storing intermediate states.
pub fn simulate_at(
    init: &ParticleState,
    params: &ModelParams,
    kernel: &KernelSpec,
    dt: f64,
    times: &[f64],
) -> Result<Vec<ParticleState>> {
    let mut stepper = Stepper::new(init, params, kernel, dt)?;
    let targets = times
        .iter()
        .map(|&t| grid_index(t, init.t, dt))
        .collect::<Result<Vec<_>>>()?;
    if targets.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidParams("checkpoint times must be ascending".into()));
    }
    let mut out = Vec::with_capacity(times.len());
    for &target in &targets {
        while stepper.steps_taken() < target {
            stepper.advance()?;
        }
        out.push(stepper.state().clone());
    }
    Ok(out)
}

/// Continues a trajectory's integration to `t_end`, with the same recording rule.
pub fn extend(traj: &mut Trajectory, t_end: f64) -> Result<()> {
    let last = traj.states.last().expect("trajectory is never empty").clone();
    let last_step = *traj.steps.last().expect("trajectory is never empty");
    if t_end <= last.t {
        return Ok(());
    }
    let t0 = traj.start_time();
    let (params, kernel) = (traj.params, traj.kernel.clone());
    let mut stepper = Stepper::resume(last, last_step, t0, &params, &kernel, traj.dt);
    let total = stepper.steps_to(t_end);
    while stepper.steps_taken() < total {
        stepper.advance()?;
        let k = stepper.steps_taken();
        if k % traj.record_every == 0 || k == total {
            traj.steps.push(k);
            traj.states.push(stepper.state().clone());
        }
    }
    Ok(())
}

/// Decomposes the unit-strength force on particle `index`.
pub fn force_decomposition(
    state: &ParticleState,
    index: usize,
    kernel: &KernelSpec,
) -> Result<ForceDecomposition> {
    if index >= state.n {
        return Err(Error::IndexOutOfRange {
            index,
            n: state.n,
        });
    }
    let d = state.d;
    let xi = state.position(index);
    let vi = state.velocity(index);
    let inv = 1.0 / state.n as f64;
    let a = column_mean(&state.positions, state.n, d);
    let mut b = vec![0.0; d];
    let mut c = 0.0;
    for j in 0..state.n {
        let xj = state.position(j);
        let vj = state.velocity(j);
        let r2: f64 = xi.iter().zip(xj).map(|(p, q)| (p - q) * (p - q)).sum();
        let phi = kernel.phi_sq(r2);
        c += phi;
        for k in 0..d {
            b[k] += phi * (xj[k] + vj[k]);
        }
    }
    c *= inv;
    b.iter_mut().for_each(|v| *v *= inv);
    let q = (0..d)
        .map(|k| a[k] + b[k] - (1.0 + c) * xi[k] - c * vi[k])
        .collect();
    Ok(ForceDecomposition { a, b, c, q })
}

/// Moves the phase point `(x, v)` from `t0` to `t1` through the force field of
/// the recorded particle system.
///
/// The background is re-integrated from the nearest recorded state at or
/// before `t0` with the trajectory's own step, so the tracer sees exactly the
/// RK4 stage states the particles saw.
pub fn trace_characteristic(
    traj: &Trajectory,
    t0: f64,
    x: &[f64],
    v: &[f64],
    t1: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (start, end) = (traj.start_time(), traj.end_time());
    for t in [t0, t1] {
        if t < start - GRID_TOL * traj.dt || t > end + GRID_TOL * traj.dt {
            return Err(Error::TimeOutOfRange { t, start, end });
        }
    }
    if t1 < t0 {
        return Err(Error::InvalidParams(format!(
            "backward tracing is unsupported: t1={t1} < t0={t0}"
        )));
    }
    let d = traj.states[0].d;
    if x.len() != d || v.len() != d {
        return Err(Error::DimensionMismatch(x.len().max(v.len()), d));
    }
    let k0 = grid_index(t0, start, traj.dt)?;
    let k1 = grid_index(t1, start, traj.dt)?;
    // last recorded state at or before k0
    let rec = traj.steps.partition_point(|&s| s <= k0) - 1;
    let mut step = traj.steps[rec];
    let mut background = traj.states[rec].clone();
    let mut work = Rk4Work::new(background.positions.len());
    let mut none: [Tracer; 0] = [];
    while step < k0 {
        step += 1;
        background = rk4_step(
            &background,
            &traj.params,
            &traj.kernel,
            traj.dt,
            start + step as f64 * traj.dt,
            &mut work,
            &mut none,
        )?;
    }
    let mut tracer = [Tracer {
        x: x.to_vec(),
        v: v.to_vec(),
    }];
    while step < k1 {
        step += 1;
        background = rk4_step(
            &background,
            &traj.params,
            &traj.kernel,
            traj.dt,
            start + step as f64 * traj.dt,
            &mut work,
            &mut tracer,
        )?;
    }
    let [Tracer { x, v }] = tracer;
    Ok((x, v))
}
