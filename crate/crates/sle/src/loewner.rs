//! Discrete chordal Loewner evolution.
//!
//! The driving function is Brownian motion scaled by sqrt(kappa), sampled
//! on a uniform grid. Within each step the driving is frozen at the left
//! endpoint, so the flow over a step is the exact vertical-slit map
//!
//!   g  ->  w + sqrt((g - w)^2 + 4 dt),
//!
//! applied to tracked boundary points and (by its analytic derivative) to
//! their distortions g'. Swallowing is declared when the image comes
//! within reach of the next slit. The trace is reconstructed by composing
//! inverse slit maps backwards in time.

use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::s_kappa;

/// Simulation parameters for one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimParams {
    pub kappa: f64,
    pub dt: f64,
    pub t_max: f64,
    pub seed: u64,
    pub run_index: u64,
}

impl SimParams {
    pub fn new(kappa: f64, dt: f64, t_max: f64, seed: u64, run_index: u64) -> Result<Self> {
        let p = SimParams { kappa, dt, t_max, seed, run_index };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa < 8.0) {
            return Err(Error::Parameter(format!(
                "kappa must lie in (0, 8), got {}",
                self.kappa
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Parameter(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_max >= 0.0 && self.t_max.is_finite()) {
            return Err(Error::Parameter(format!(
                "t_max must be nonnegative, got {}",
                self.t_max
            )));
        }
        Ok(())
    }

    /// Number of uniform steps, ceil(t_max / dt).
    pub fn n_steps(&self) -> usize {
        (self.t_max / self.dt).ceil() as usize
    }

    pub fn s_kappa(&self) -> f64 {
        s_kappa(self.kappa)
    }

    pub fn with_run_index(self, run_index: u64) -> Self {
        SimParams { run_index, ..self }
    }
}

/// Streaming source of driving increments for the stream (seed, run_index).
///
/// Both the stored [`DrivingPath`] and the hot trial loops draw from this,
/// so they see bit-identical increments.
pub struct IncrementStream {
    rng: ChaCha12Rng,
    sigma: f64,
}

impl IncrementStream {
    pub fn new(kappa: f64, dt: f64, seed: u64, run_index: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(run_index);
        IncrementStream { rng, sigma: (kappa * dt).sqrt() }
    }

    pub fn from_params(params: &SimParams) -> Self {
        Self::new(params.kappa, params.dt, params.seed, params.run_index)
    }

    /// Next increment, distributed Normal(0, kappa * dt).
    #[inline]
    pub fn next_increment(&mut self) -> f64 {
        let z: f64 = self.rng.sample(StandardNormal);
        self.sigma * z
    }
}

/// Sampled driving function on a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DrivingPath {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub kappa: f64,
    pub seed: u64,
    pub run_index: u64,
}

impl DrivingPath {
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn dt(&self, step: usize) -> f64 {
        self.times[step + 1] - self.times[step]
    }
}

/// Generate the driving path W with i.i.d. Normal(0, kappa*dt) increments
/// from the deterministic stream (seed, run_index).
pub fn generate_driving(params: &SimParams) -> Result<DrivingPath> {
    params.validate()?;
    let n = params.n_steps();
    let mut stream = IncrementStream::from_params(params);
    let mut times = Vec::with_capacity(n + 1);
    let mut values = Vec::with_capacity(n + 1);
    times.push(0.0);
    values.push(0.0);
    for k in 0..n {
        times.push((k + 1) as f64 * params.dt);
        let prev = values[k];
        values.push(prev + stream.next_increment());
    }
    Ok(DrivingPath {
        times,
        values,
        kappa: params.kappa,
        seed: params.seed,
        run_index: params.run_index,
    })
}

/// Status of a tracked boundary point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointStatus {
    Alive,
    Swallowed { step: usize },
    Stopped { step: usize },
}

/// A boundary point x > 0 flowed forward by the Loewner maps, carrying
/// its image g_t(x) and derivative g'_t(x).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackedPoint {
    pub x0: f64,
    pub g: f64,
    pub gprime: f64,
    pub status: PointStatus,
}

impl TrackedPoint {
    pub fn new(x0: f64) -> Result<Self> {
        if !(x0 > 0.0 && x0.is_finite()) {
            return Err(Error::Parameter(format!("x0 must be positive, got {x0}")));
        }
        Ok(TrackedPoint { x0, g: x0, gprime: 1.0, status: PointStatus::Alive })
    }

    pub fn is_alive(&self) -> bool {
        self.status == PointStatus::Alive
    }

    /// Mark a still-alive point as stopped (used by trial drivers once the
    /// point's outcome is decided).
    pub fn stop(&mut self, step: usize) {
        if self.is_alive() {
            self.status = PointStatus::Stopped { step };
        }
    }
}

/// Swallow threshold: the slit grown over one step reaches height
/// 2 sqrt(dt); a point whose image is within twice that of the driving
/// can be overrun by the next slit.
#[inline]
pub fn swallow_tol(dt: f64) -> f64 {
    (10.0 * dt.sqrt() * f64::EPSILON).max(4.0 * dt.sqrt())
}

/// Advance one tracked point by one step of the discretized flow.
///
/// The driving is frozen at `w_before` over the step; `w_after` is the
/// driving value at the end of the step and is used for the swallow
/// check. `step` is the index of the grid node reached.
pub fn step_point(
    point: &mut TrackedPoint,
    w_before: f64,
    w_after: f64,
    dt: f64,
    step: usize,
) -> Result<()> {
    if !point.is_alive() {
        return Err(Error::State(format!(
            "step_point called on non-alive point x0={}",
            point.x0
        )));
    }
    let q = point.g - w_before;
    if q <= 0.0 {
        return Err(Error::State(format!(
            "point image not to the right of the driving: g - w = {q}"
        )));
    }
    let r = (q * q + 4.0 * dt).sqrt();
    point.g = w_before + r;
    point.gprime *= q / r;
    if point.g - w_after <= swallow_tol(dt) {
        point.status = PointStatus::Swallowed { step };
    }
    Ok(())
}

/// Read-only view handed to observers once per step.
pub struct StepContext<'a> {
    /// Index of the grid node just reached (1..=n).
    pub step: usize,
    pub t: f64,
    /// Driving value at this node.
    pub w: f64,
    pub points: &'a [TrackedPoint],
}

/// Per-step hook over the evolution.
pub trait Observer {
    fn observe(&mut self, ctx: &StepContext<'_>) -> std::result::Result<(), String>;

    /// Whether the observer has gathered everything it needs; evolution
    /// may terminate early once all points are non-alive and all
    /// observers are complete.
    fn complete(&self) -> bool {
        true
    }
}

/// Final state of one evolution run.
pub struct LoewnerState {
    pub points: Vec<TrackedPoint>,
    pub steps_taken: usize,
    pub path: DrivingPath,
}

/// Run the full discretized evolution: generate the driving path, advance
/// every tracked point step by step, and invoke each observer once per
/// step.
pub fn evolve(
    params: &SimParams,
    points: Vec<TrackedPoint>,
    observers: &mut [&mut dyn Observer],
) -> Result<LoewnerState> {
    for p in &points {
        if !p.is_alive() {
            return Err(Error::State("all points must be alive at t = 0".to_string()));
        }
    }
    let path = generate_driving(params)?;
    let mut points = points;
    let n = path.n_steps();
    let mut steps_taken = 0;
    for k in 0..n {
        let w_before = path.values[k];
        let w_after = path.values[k + 1];
        let dt = path.dt(k);
        for p in points.iter_mut() {
            if p.is_alive() {
                step_point(p, w_before, w_after, dt, k + 1)?;
            }
        }
        steps_taken = k + 1;
        let ctx = StepContext {
            step: k + 1,
            t: path.times[k + 1],
            w: w_after,
            points: &points,
        };
        for obs in observers.iter_mut() {
            obs.observe(&ctx)
                .map_err(|reason| Error::Observer { step: k + 1, reason })?;
        }
        let all_done = points.iter().all(|p| !p.is_alive())
            && observers.iter().all(|o| o.complete());
        if all_done {
            break;
        }
    }
    Ok(LoewnerState { points, steps_taken, path })
}

/// One reconstructed trace point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceSample {
    pub step: usize,
    pub point: Complex64,
    /// Number of inverse slit maps composed to produce the sample.
    pub depth: usize,
}

/// Branch of the square root mapping into the closed upper half plane.
#[inline]
fn sqrt_upper(z: Complex64) -> Complex64 {
    let s = z.sqrt();
    if s.im < 0.0 {
        -s
    } else {
        s
    }
}

/// Reconstruct trace samples gamma(t_k) for the requested steps by
/// composing inverse slit maps in reverse order (backward zipper).
pub fn trace_points(path: &DrivingPath, steps: &[usize]) -> Result<Vec<TraceSample>> {
    let n = path.n_steps();
    let mut out = Vec::with_capacity(steps.len());
    for &k in steps {
        if k > n {
            return Err(Error::Parameter(format!("step {k} beyond path range {n}")));
        }
        let mut z = Complex64::new(path.values[k], 0.0);
        for j in (0..k).rev() {
            let w = path.values[j];
            let dt = path.dt(j);
            let shifted = z - w;
            z = w + sqrt_upper(shifted * shifted - 4.0 * dt);
        }
        if z.im < -1e-9 {
            return Err(Error::Reconstruction {
                step: k,
                reason: format!("negative imaginary part {}", z.im),
            });
        }
        let point = Complex64::new(z.re, z.im.max(0.0));
        out.push(TraceSample { step: k, point, depth: k });
    }
    Ok(out)
}
