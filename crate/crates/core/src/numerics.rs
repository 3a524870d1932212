//! Time integration and small numerical utilities.
//!
//! Fixed-step classical RK4 is the default integrator; an embedded
//! Dormand–Prince 5(4) pair is available for adaptive runs. Hybrid
//! (flow/jump) systems are integrated segment by segment: the next jump time
//! is known when the previous jump happens, so every segment ends exactly on
//! its event and no root finding is involved.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default cap on the number of jumps in one hybrid run.
pub const DEFAULT_MAX_JUMPS: usize = 1_000_000;

/// Default central-difference step, scaled per coordinate by `max(1, |x_i|)`.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("non-finite derivative at t = {t}")]
    NonFiniteDerivative { t: f64 },
    #[error("adaptive step {h:e} fell below the floor at t = {t}")]
    StepUnderflow { t: f64, h: f64 },
    #[error("more than {max_jumps} jumps in one run (last jump at t = {t})")]
    ZenoGuard { max_jumps: usize, t: f64 },
    #[error("schedule returned a non-positive interval {interval} at t = {t}")]
    InvalidSchedule { t: f64, interval: f64 },
    #[error("only {found} samples in the fit window, need at least 10")]
    InsufficientWindow { found: usize },
    #[error("invalid step control: {0}")]
    InvalidStepControl(String),
    #[error("invalid time span [{t0}, {t1}]")]
    InvalidSpan { t0: f64, t1: f64 },
    #[error("non-finite value while evaluating {0}")]
    NonFiniteValue(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    Fixed,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepControl {
    /// Fixed step, or the initial step in adaptive mode.
    pub dt: f64,
    pub mode: StepMode,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_step: f64,
}

impl StepControl {
    pub fn fixed(dt: f64) -> Self {
        Self {
            dt,
            mode: StepMode::Fixed,
            abs_tol: 1e-10,
            rel_tol: 1e-8,
            max_step: dt,
        }
    }

    pub fn adaptive(dt: f64, abs_tol: f64, rel_tol: f64, max_step: f64) -> Self {
        Self {
            dt,
            mode: StepMode::Adaptive,
            abs_tol,
            rel_tol,
            max_step,
        }
    }

    pub fn validate(&self) -> Result<(), NumericsError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(NumericsError::InvalidStepControl(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if !(self.abs_tol > 0.0 && self.rel_tol > 0.0) {
            return Err(NumericsError::InvalidStepControl(
                "tolerances must be positive".into(),
            ));
        }
        if !(self.max_step >= self.dt) {
            return Err(NumericsError::InvalidStepControl(format!(
                "max_step {} is smaller than dt {}",
                self.max_step, self.dt
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub tag: String,
}

/// Time-stamped solution curve. Times are strictly increasing and every event
/// timestamp is one of the recorded times.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub events: Vec<Event>,
}

impl Trajectory {
    pub fn new(t0: f64, x0: Vec<f64>) -> Self {
        Self {
            times: vec![t0],
            states: vec![x0],
            events: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory is never empty")
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory is never empty")
    }

    fn push(&mut self, t: f64, x: Vec<f64>) {
        debug_assert!(t > self.final_time());
        self.times.push(t);
        self.states.push(x);
    }

    fn replace_last(&mut self, x: Vec<f64>) {
        *self.states.last_mut().expect("trajectory is never empty") = x;
    }

    /// Indices of recorded samples that coincide with an event.
    pub fn event_indices(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.events.len());
        let mut k = 0;
        for ev in &self.events {
            while k < self.times.len() && self.times[k] < ev.t {
                k += 1;
            }
            if k < self.times.len() && self.times[k] == ev.t {
                out.push(k);
            }
        }
        out
    }

    /// Checks the structural invariants (monotone times, matching lengths,
    /// events on recorded times).
    pub fn is_consistent(&self) -> bool {
        self.times.len() == self.states.len()
            && self.times.windows(2).all(|w| w[1] > w[0])
            && self.event_indices().len() == self.events.len()
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn axpy(x: &[f64], a: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(xi, di)| xi + a * di).collect()
}

fn eval<F>(rhs: &F, t: f64, x: &[f64]) -> Result<Vec<f64>, NumericsError>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
{
    let d = rhs(t, x);
    if all_finite(&d) {
        Ok(d)
    } else {
        Err(NumericsError::NonFiniteDerivative { t })
    }
}

fn rk4_step<F>(rhs: &F, t: f64, x: &[f64], h: f64) -> Result<Vec<f64>, NumericsError>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
{
    let k1 = eval(rhs, t, x)?;
    let k2 = eval(rhs, t + 0.5 * h, &axpy(x, 0.5 * h, &k1))?;
    let k3 = eval(rhs, t + 0.5 * h, &axpy(x, 0.5 * h, &k2))?;
    let k4 = eval(rhs, t + h, &axpy(x, h, &k3))?;
    let out: Vec<f64> = (0..x.len())
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    if all_finite(&out) {
        Ok(out)
    } else {
        Err(NumericsError::NonFiniteDerivative { t: t + h })
    }
}

// Dormand–Prince 5(4) tableau.
const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DP_B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// One Dormand–Prince attempt; returns the 5th-order solution and the scaled
/// error norm.
fn dopri_step<F>(
    rhs: &F,
    t: f64,
    x: &[f64],
    h: f64,
    ctrl: &StepControl,
) -> Result<(Vec<f64>, f64), NumericsError>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
{
    let n = x.len();
    let mut k: Vec<Vec<f64>> = Vec::with_capacity(7);
    for s in 0..7 {
        let mut xs = x.to_vec();
        for (j, kj) in k.iter().enumerate() {
            let a = DP_A[s][j];
            if a != 0.0 {
                for i in 0..n {
                    xs[i] += h * a * kj[i];
                }
            }
        }
        k.push(eval(rhs, t + DP_C[s] * h, &xs)?);
    }
    let mut x5 = x.to_vec();
    let mut err = 0.0;
    for i in 0..n {
        let mut hi = 0.0;
        let mut lo = 0.0;
        for s in 0..7 {
            hi += DP_B5[s] * k[s][i];
            lo += DP_B4[s] * k[s][i];
        }
        x5[i] += h * hi;
        let scale = ctrl.abs_tol + ctrl.rel_tol * x[i].abs().max(x5[i].abs());
        let e = h * (hi - lo) / scale;
        err += e * e;
    }
    let err = (err / n.max(1) as f64).sqrt();
    Ok((x5, err))
}

/// Advances `traj` from its last sample to exactly `t_end`.
fn advance<F>(
    rhs: &F,
    traj: &mut Trajectory,
    t_end: f64,
    ctrl: &StepControl,
    h_adapt: &mut f64,
) -> Result<(), NumericsError>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
{
    let t_start = traj.final_time();
    if t_end <= t_start {
        return Ok(());
    }
    match ctrl.mode {
        StepMode::Fixed => {
            let span = t_end - t_start;
            let n = ((span / ctrl.dt) - 1e-9).ceil().max(1.0) as usize;
            let mut x = traj.final_state().to_vec();
            let mut t = t_start;
            for i in 1..=n {
                let t_next = if i == n {
                    t_end
                } else {
                    t_start + i as f64 * ctrl.dt
                };
                x = rk4_step(rhs, t, &x, t_next - t)?;
                t = t_next;
                traj.push(t, x.clone());
            }
        }
        StepMode::Adaptive => {
            let mut x = traj.final_state().to_vec();
            let mut t = t_start;
            let mut h = h_adapt.min(ctrl.max_step);
            while t < t_end {
                let remaining = t_end - t;
                let last = h >= remaining * (1.0 - 1e-12);
                let step = if last { remaining } else { h };
                let floor = 16.0 * f64::EPSILON * t.abs().max(1.0);
                if step < floor && !last {
                    return Err(NumericsError::StepUnderflow { t, h: step });
                }
                let (x5, err) = match dopri_step(rhs, t, &x, step, ctrl) {
                    Ok(v) => v,
                    Err(NumericsError::NonFiniteDerivative { .. }) if step > floor => {
                        h = 0.25 * step;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let factor = if err == 0.0 {
                    5.0
                } else {
                    (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
                };
                if err <= 1.0 && all_finite(&x5) {
                    t = if last { t_end } else { t + step };
                    x = x5;
                    traj.push(t, x.clone());
                    if !last {
                        h = (step * factor).min(ctrl.max_step);
                    }
                } else {
                    h = step * factor.min(0.9);
                    if h < floor {
                        return Err(NumericsError::StepUnderflow { t, h });
                    }
                }
            }
            *h_adapt = h;
        }
    }
    Ok(())
}

/// Integrates `x' = rhs(t, x)` over `t_span`, recording every accepted step.
pub fn integrate<F>(
    rhs: F,
    x0: &[f64],
    t_span: (f64, f64),
    ctrl: &StepControl,
) -> Result<Trajectory, NumericsError>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
{
    ctrl.validate()?;
    let (t0, t1) = t_span;
    if !(t1 > t0) || !t0.is_finite() || !t1.is_finite() {
        return Err(NumericsError::InvalidSpan { t0, t1 });
    }
    let mut traj = Trajectory::new(t0, x0.to_vec());
    let mut h = ctrl.dt;
    advance(&rhs, &mut traj, t1, ctrl, &mut h)?;
    Ok(traj)
}

/// Production/loss form `X_i' = gain_i - rate_i X_i - loss_i` of a field on
/// the open positive orthant, with every entry non-negative and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveSplit {
    pub gain: Vec<f64>,
    pub rate: Vec<f64>,
    pub loss: Vec<f64>,
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn check_split(split: &PositiveSplit, n: usize, t: f64) -> Result<(), NumericsError> {
    let ok = split.gain.len() == n
        && split.rate.len() == n
        && split.loss.len() == n
        && [&split.gain, &split.rate, &split.loss]
            .iter()
            .all(|v| v.iter().all(|x| *x >= 0.0 && x.is_finite()));
    if ok {
        Ok(())
    } else {
        Err(NumericsError::NonFiniteDerivative { t })
    }
}

/// `(e^{d h} - 1) / d`, equal to `h` at `d = 0`.
fn grow_factor(d: f64, h: f64) -> f64 {
    let dh = d * h;
    if dh < 1e-12 {
        h * (1.0 + 0.5 * dh)
    } else {
        dh.exp_m1() / d
    }
}

/// Exact solution over `h`, in log coordinates, of `X' = net - d X` with the
/// coefficients of component `i` frozen. `None` when a net sink would carry
/// the state past the boundary.
fn frozen_update(split: &PositiveSplit, i: usize, z: f64, h: f64) -> Option<f64> {
    let net = split.gain[i] - split.loss[i];
    let d = split.rate[i];
    let dh = d * h;
    if net >= 0.0 {
        let decay = z - dh;
        if net == 0.0 {
            return Some(decay);
        }
        // ln((1 - e^{-dh}) / (dh)), which tends to 0 as dh -> 0.
        let ln_phi = if dh < 1e-12 {
            -0.5 * dh
        } else {
            (-(-dh).exp_m1()).ln() - dh.ln()
        };
        Some(log_add_exp(decay, net.ln() + h.ln() + ln_phi))
    } else {
        let q = ((-net).ln() - z).exp();
        let fraction = q * grow_factor(d, h);
        if fraction < 1.0 - POSITIVE_SINK_LIMIT {
            Some(z - dh + (-fraction).ln_1p())
        } else {
            None
        }
    }
}

/// Fraction of the current state a net sink may remove within one step of
/// [`integrate_positive`].
pub const POSITIVE_SINK_LIMIT: f64 = 0.25;

/// Longest step over which every net sink removes at most
/// [`POSITIVE_SINK_LIMIT`] of its component.
fn sink_step_limit(split: &PositiveSplit, z: &[f64]) -> f64 {
    (0..z.len())
        .map(|i| {
            let net_loss = split.loss[i] - split.gain[i];
            if net_loss <= 0.0 {
                return f64::INFINITY;
            }
            let q = (net_loss.ln() - z[i]).exp();
            let d = split.rate[i];
            if d * POSITIVE_SINK_LIMIT < 1e-12 * q {
                POSITIVE_SINK_LIMIT / q
            } else {
                (d * POSITIVE_SINK_LIMIT / q).ln_1p() / d
            }
        })
        .fold(f64::INFINITY, f64::min)
}

fn positive_step<F>(
    split: &F,
    t: f64,
    z: &[f64],
    s0: &PositiveSplit,
    h: f64,
) -> Result<Option<Vec<f64>>, NumericsError>
where
    F: Fn(f64, &[f64]) -> PositiveSplit,
{
    let n = z.len();
    let mut mid = Vec::with_capacity(n);
    for i in 0..n {
        match frozen_update(s0, i, z[i], 0.5 * h) {
            Some(v) => mid.push(v),
            None => return Ok(None),
        }
    }
    if !all_finite(&mid) {
        return Err(NumericsError::NonFiniteDerivative { t });
    }
    let s1 = split(t + 0.5 * h, &mid);
    check_split(&s1, n, t + 0.5 * h)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        match frozen_update(&s1, i, z[i], h) {
            Some(v) => out.push(v),
            None => return Ok(None),
        }
    }
    if !all_finite(&out) {
        return Err(NumericsError::NonFiniteDerivative { t: t + h });
    }
    Ok(Some(out))
}

/// Integrates a positive system in log coordinates `z = ln X` with the
/// exponential midpoint rule: the split is frozen at a half-step predictor
/// and the resulting linear equation is solved exactly, so linear decay of
/// any speed is followed without overflow or loss of positivity. Steps are
/// subdivided so that a net sink removes at most [`POSITIVE_SINK_LIMIT`] of
/// a component per step; a state driven to the boundary in finite time
/// therefore ends in a step underflow rather than being kept positive
/// artificially. The trajectory holds log coordinates on the `dt` grid.
pub fn integrate_positive<F>(
    split: F,
    log_x0: &[f64],
    t_span: (f64, f64),
    dt: f64,
) -> Result<Trajectory, NumericsError>
where
    F: Fn(f64, &[f64]) -> PositiveSplit,
{
    StepControl::fixed(dt).validate()?;
    let (t0, t1) = t_span;
    if !(t1 > t0) || !t0.is_finite() || !t1.is_finite() {
        return Err(NumericsError::InvalidSpan { t0, t1 });
    }
    if !all_finite(log_x0) {
        return Err(NumericsError::NonFiniteValue("initial log state"));
    }
    let n = log_x0.len();
    let steps = (((t1 - t0) / dt) - 1e-9).ceil().max(1.0) as usize;
    let mut traj = Trajectory::new(t0, log_x0.to_vec());
    let mut z = log_x0.to_vec();
    let mut t = t0;
    for k in 1..=steps {
        let t_next = if k == steps { t1 } else { t0 + k as f64 * dt };
        while t < t_next {
            let s0 = split(t, &z);
            check_split(&s0, n, t)?;
            let remaining = t_next - t;
            let mut h = sink_step_limit(&s0, &z).min(remaining);
            loop {
                if h <= 16.0 * f64::EPSILON * t.abs().max(1.0) {
                    return Err(NumericsError::StepUnderflow { t, h });
                }
                if let Some(next) = positive_step(&split, t, &z, &s0, h)? {
                    z = next;
                    break;
                }
                h *= 0.5;
            }
            t = if h >= remaining { t_next } else { t + h };
        }
        traj.push(t, z.clone());
    }
    Ok(traj)
}

/// Integrates a hybrid system whose jump instants are produced by `schedule`.
///
/// `schedule(t, x)` returns the interval until the next jump, evaluated at the
/// start and after every jump. At each jump instant the flow lands exactly on
/// the instant, `jump(t, x)` replaces the recorded state, and the event is
/// logged with tag `"jump"`. Jumps scheduled at the end of the span are applied.
pub fn integrate_hybrid<F, J, S>(
    flow: F,
    jump: J,
    schedule: S,
    x0: &[f64],
    t_span: (f64, f64),
    ctrl: &StepControl,
    max_jumps: usize,
) -> Result<Trajectory, NumericsError>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
    J: Fn(f64, &[f64]) -> Vec<f64>,
    S: Fn(f64, &[f64]) -> f64,
{
    ctrl.validate()?;
    let (t0, t1) = t_span;
    if !(t1 > t0) || !t0.is_finite() || !t1.is_finite() {
        return Err(NumericsError::InvalidSpan { t0, t1 });
    }
    let snap = 1e-12 * t1.abs().max(1.0);
    let mut traj = Trajectory::new(t0, x0.to_vec());
    let mut h = ctrl.dt;
    let mut jumps = 0usize;
    let mut t = t0;
    loop {
        let interval = schedule(t, traj.final_state());
        if !(interval > 0.0 && interval.is_finite()) {
            return Err(NumericsError::InvalidSchedule { t, interval });
        }
        let mut next = t + interval;
        if (next - t1).abs() <= snap {
            next = t1;
        }
        if next > t1 {
            advance(&flow, &mut traj, t1, ctrl, &mut h)?;
            break;
        }
        advance(&flow, &mut traj, next, ctrl, &mut h)?;
        let post = jump(next, traj.final_state());
        if !all_finite(&post) {
            return Err(NumericsError::NonFiniteValue("jump map"));
        }
        traj.replace_last(post);
        traj.events.push(Event {
            t: next,
            tag: "jump".to_string(),
        });
        jumps += 1;
        if jumps > max_jumps {
            return Err(NumericsError::ZenoGuard { max_jumps, t: next });
        }
        t = next;
        if t >= t1 {
            break;
        }
    }
    Ok(traj)
}

/// Largest relative mismatch between an analytic gradient and central
/// differences of `value`, normalised by `max(1, |grad|)`.
pub fn check_gradient<V, G>(
    value: V,
    gradient: G,
    points: &[Vec<f64>],
    h_fd: f64,
) -> Result<f64, NumericsError>
where
    V: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    if !(h_fd > 0.0) {
        return Err(NumericsError::InvalidStepControl(
            "finite-difference step must be positive".into(),
        ));
    }
    let mut worst = 0.0f64;
    for x in points {
        let g = gradient(x);
        let mut diff2 = 0.0;
        let mut xp = x.clone();
        for i in 0..x.len() {
            let h = h_fd * x[i].abs().max(1.0);
            xp[i] = x[i] + h;
            let fp = value(&xp);
            xp[i] = x[i] - h;
            let fm = value(&xp);
            xp[i] = x[i];
            let fd = (fp - fm) / (2.0 * h);
            if !fd.is_finite() || !g[i].is_finite() {
                return Err(NumericsError::NonFiniteValue("gradient check"));
            }
            diff2 += (g[i] - fd).powi(2);
        }
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(diff2.sqrt() / gnorm.max(1.0));
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub sigma: f64,
    pub r_squared: f64,
    /// Log-intercept of the fit, i.e. the fitted `ln(error(0))`.
    pub intercept: f64,
    pub samples: usize,
}

/// Least-squares fit of `ln(error)` against time over `t >= t_start`.
/// Samples whose error is zero, negative or non-finite are left out.
pub fn fit_decay_rate<E>(
    traj: &Trajectory,
    error_norm: E,
    t_start: f64,
) -> Result<DecayFit, NumericsError>
where
    E: Fn(&[f64]) -> f64,
{
    let mut ts = Vec::new();
    let mut ls = Vec::new();
    for (t, x) in traj.times.iter().zip(&traj.states) {
        if *t < t_start {
            continue;
        }
        let e = error_norm(x);
        if e > 0.0 && e.is_finite() {
            ts.push(*t);
            ls.push(e.ln());
        }
    }
    fit_log_linear(&ts, &ls)
}

pub(crate) fn fit_log_linear(ts: &[f64], ls: &[f64]) -> Result<DecayFit, NumericsError> {
    let n = ts.len();
    if n < 10 {
        return Err(NumericsError::InsufficientWindow { found: n });
    }
    let nf = n as f64;
    // centre on the first sample so that a constant series has exactly zero spread
    let (t_ref, l_ref) = (ts[0], ls[0]);
    let tm = ts.iter().map(|t| t - t_ref).sum::<f64>() / nf + t_ref;
    let lm = ls.iter().map(|l| l - l_ref).sum::<f64>() / nf + l_ref;
    let mut stt = 0.0;
    let mut stl = 0.0;
    let mut sll = 0.0;
    for (t, l) in ts.iter().zip(ls) {
        stt += (t - tm) * (t - tm);
        stl += (t - tm) * (l - lm);
        sll += (l - lm) * (l - lm);
    }
    if stt == 0.0 {
        return Err(NumericsError::InsufficientWindow { found: 1 });
    }
    let slope = stl / stt;
    let intercept = lm - slope * tm;
    let r_squared = if sll == 0.0 {
        1.0
    } else {
        (stl * stl) / (stt * sll)
    };
    Ok(DecayFit {
        sigma: -slope + 0.0,
        r_squared,
        intercept,
        samples: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(_t: f64, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| -v).collect()
    }

    #[test]
    fn rk4_matches_exponential() {
        let traj = integrate(decay, &[1.0], (0.0, 1.0), &StepControl::fixed(1e-3)).unwrap();
        assert!((traj.final_state()[0] - (-1.0f64).exp()).abs() < 1e-9);
        assert_eq!(traj.final_time(), 1.0);
        assert!(traj.is_consistent());
    }

    #[test]
    fn zero_field_is_constant() {
        let x0 = [0.3, -2.0, 7.5];
        let traj = integrate(
            |_, x: &[f64]| vec![0.0; x.len()],
            &x0,
            (0.0, 3.0),
            &StepControl::fixed(0.1),
        )
        .unwrap();
        assert!(traj.states.iter().all(|s| s == &x0));
    }

    #[test]
    fn last_step_is_truncated_to_span_end() {
        let traj = integrate(decay, &[1.0], (0.0, 0.35), &StepControl::fixed(0.1)).unwrap();
        assert_eq!(traj.times.len(), 5);
        assert_eq!(traj.final_time(), 0.35);
    }

    #[test]
    fn nan_derivative_is_reported() {
        let err = integrate(
            |t, _x: &[f64]| vec![if t > 0.5 { f64::NAN } else { 1.0 }],
            &[0.0],
            (0.0, 1.0),
            &StepControl::fixed(0.1),
        )
        .unwrap_err();
        assert!(matches!(err, NumericsError::NonFiniteDerivative { .. }));
    }

    #[test]
    fn adaptive_meets_tolerance() {
        let ctrl = StepControl::adaptive(1e-2, 1e-12, 1e-10, 0.5);
        let traj = integrate(decay, &[1.0], (0.0, 5.0), &ctrl).unwrap();
        assert!((traj.final_state()[0] - (-5.0f64).exp()).abs() < 1e-9);
        assert_eq!(traj.final_time(), 5.0);
        assert!(traj.is_consistent());
    }

    #[test]
    fn adaptive_retries_non_finite_trial_stage() {
        let ctrl = StepControl::adaptive(4.0, 1e-10, 1e-10, 5.0);
        let rhs = |_t: f64, x: &[f64]| vec![if x[0] < 0.0 { f64::NAN } else { -x[0] }];
        let traj = integrate(rhs, &[1.0], (0.0, 5.0), &ctrl).unwrap();
        assert!((traj.final_state()[0] - (-5.0f64).exp()).abs() < 1e-8);
    }

    fn logistic_split(_t: f64, z: &[f64]) -> PositiveSplit {
        // X' = X (1 - X)
        let x = z[0].exp();
        PositiveSplit {
            gain: vec![x],
            rate: vec![x],
            loss: vec![0.0],
        }
    }

    #[test]
    fn positive_integrator_is_exact_for_linear_decay() {
        let split = |_t: f64, _z: &[f64]| PositiveSplit {
            gain: vec![0.0],
            rate: vec![3.0],
            loss: vec![0.0],
        };
        let traj = integrate_positive(split, &[0.0], (0.0, 500.0), 0.5).unwrap();
        assert!((traj.final_state()[0] + 1500.0).abs() < 1e-9);
    }

    #[test]
    fn positive_integrator_is_second_order() {
        let exact = |t: f64| {
            let x0: f64 = 0.1;
            x0 * t.exp() / (1.0 - x0 + x0 * t.exp())
        };
        let err = |dt: f64| {
            let traj = integrate_positive(logistic_split, &[0.1f64.ln()], (0.0, 4.0), dt).unwrap();
            (traj.final_state()[0].exp() - exact(4.0)).abs()
        };
        let ratio = err(0.02) / err(0.01);
        assert!(ratio > 3.5 && ratio < 4.5, "{ratio}");
    }

    #[test]
    fn positive_integrator_recovers_from_tiny_states() {
        // X' = 0.2 - 0.1 X - 0.05 from X = e^{-3000}: X(t) = 1.5 (1 - e^{-0.1 t}).
        let split = |_t: f64, _z: &[f64]| PositiveSplit {
            gain: vec![0.2],
            rate: vec![0.1],
            loss: vec![0.05],
        };
        let traj = integrate_positive(split, &[-3000.0], (0.0, 1.0), 0.01).unwrap();
        let expected = 1.5 * (1.0 - (-0.1f64).exp());
        assert!((traj.final_state()[0].exp() - expected).abs() < 1e-12);
    }

    #[test]
    fn positive_integrator_follows_constant_sink() {
        // X' = -1 from X = 1 reaches the boundary at t = 1.
        let split = |_t: f64, _z: &[f64]| PositiveSplit {
            gain: vec![0.0],
            rate: vec![0.0],
            loss: vec![1.0],
        };
        let traj = integrate_positive(split, &[0.0], (0.0, 0.9), 0.1).unwrap();
        let end = traj.final_state()[0].exp();
        assert!((end - 0.1).abs() < 1e-3, "{end}");
        assert_eq!(traj.len(), 10);
        assert!(matches!(
            integrate_positive(split, &[0.0], (0.0, 1.5), 0.1),
            Err(NumericsError::StepUnderflow { .. })
        ));
    }

    #[test]
    fn positive_integrator_rejects_negative_entries() {
        let split = |_t: f64, _z: &[f64]| PositiveSplit {
            gain: vec![-1.0],
            rate: vec![0.0],
            loss: vec![0.0],
        };
        assert!(integrate_positive(split, &[0.0], (0.0, 1.0), 0.1).is_err());
    }

    #[test]
    fn adaptive_underflow_on_blowup() {
        // x' = x^2 from x=1 blows up at t=1.
        let ctrl = StepControl::adaptive(1e-3, 1e-10, 1e-10, 0.1);
        let err =
            integrate(|_, x: &[f64]| vec![x[0] * x[0]], &[1.0], (0.0, 2.0), &ctrl).unwrap_err();
        assert!(matches!(
            err,
            NumericsError::StepUnderflow { .. } | NumericsError::NonFiniteDerivative { .. }
        ));
    }

    #[test]
    fn invalid_controls_rejected() {
        assert!(StepControl::fixed(0.0).validate().is_err());
        let mut c = StepControl::fixed(0.1);
        c.max_step = 0.01;
        assert!(c.validate().is_err());
        c = StepControl::adaptive(0.1, 0.0, 1e-6, 1.0);
        assert!(c.validate().is_err());
        assert!(integrate(decay, &[1.0], (1.0, 1.0), &StepControl::fixed(0.1)).is_err());
    }

    #[test]
    fn constant_schedule_events() {
        let traj = integrate_hybrid(
            decay,
            |_, x: &[f64]| x.to_vec(),
            |_, _: &[f64]| 0.5,
            &[1.0],
            (0.0, 2.0),
            &StepControl::fixed(0.01),
            DEFAULT_MAX_JUMPS,
        )
        .unwrap();
        let ts: Vec<f64> = traj.events.iter().map(|e| e.t).collect();
        assert_eq!(ts, vec![0.5, 1.0, 1.5, 2.0]);
        assert!(traj.is_consistent());
    }

    #[test]
    fn identity_jump_matches_plain_flow() {
        let ctrl = StepControl::fixed(0.01);
        let plain = integrate(decay, &[1.0, -0.5], (0.0, 2.0), &ctrl).unwrap();
        let hyb = integrate_hybrid(
            decay,
            |_, x: &[f64]| x.to_vec(),
            |_, _: &[f64]| 0.5,
            &[1.0, -0.5],
            (0.0, 2.0),
            &ctrl,
            DEFAULT_MAX_JUMPS,
        )
        .unwrap();
        assert_eq!(plain.len(), hyb.len());
        for (a, b) in plain.states.iter().zip(&hyb.states) {
            for (p, q) in a.iter().zip(b) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jump_is_applied_before_flow_resumes() {
        // x' = 0, jump adds 1 every 0.25.
        let traj = integrate_hybrid(
            |_, x: &[f64]| vec![0.0; x.len()],
            |_, x: &[f64]| vec![x[0] + 1.0],
            |_, _: &[f64]| 0.25,
            &[0.0],
            (0.0, 1.0),
            &StepControl::fixed(0.1),
            DEFAULT_MAX_JUMPS,
        )
        .unwrap();
        assert_eq!(traj.final_state()[0], 4.0);
        let idx = traj.event_indices();
        assert_eq!(idx.len(), 4);
        assert_eq!(traj.states[idx[0]][0], 1.0);
        assert_eq!(traj.states[idx[0] - 1][0], 0.0);
    }

    #[test]
    fn zeno_guard_trips() {
        let err = integrate_hybrid(
            decay,
            |_, x: &[f64]| x.to_vec(),
            |_, _: &[f64]| 1e-4,
            &[1.0],
            (0.0, 1.0),
            &StepControl::fixed(0.01),
            100,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            NumericsError::ZenoGuard { max_jumps: 100, .. }
        ));
    }

    #[test]
    fn non_positive_schedule_rejected() {
        let err = integrate_hybrid(
            decay,
            |_, x: &[f64]| x.to_vec(),
            |_, _: &[f64]| 0.0,
            &[1.0],
            (0.0, 1.0),
            &StepControl::fixed(0.01),
            10,
        )
        .unwrap_err();
        assert!(matches!(err, NumericsError::InvalidSchedule { .. }));
    }

    #[test]
    fn hybrid_is_deterministic() {
        let run = || {
            integrate_hybrid(
                |t, x: &[f64]| vec![x[1], -x[0] + t.sin()],
                |_, x: &[f64]| vec![x[0] * 0.9, x[1]],
                |_, x: &[f64]| 0.1 * (-x[0].max(0.0)).exp(),
                &[1.0, 0.0],
                (0.0, 5.0),
                &StepControl::fixed(0.01),
                DEFAULT_MAX_JUMPS,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.events, b.events);
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn gradient_check_quadratic() {
        let v = |x: &[f64]| 0.5 * x.iter().map(|a| a * a).sum::<f64>();
        let pts = vec![vec![0.1, -2.0], vec![3.0, 4.0], vec![-7.5, 0.25]];
        let err = check_gradient(v, |x: &[f64]| x.to_vec(), &pts, 1e-5).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn gradient_check_detects_wrong_gradient() {
        let v = |x: &[f64]| 0.5 * x.iter().map(|a| a * a).sum::<f64>();
        let pts = vec![vec![3.0, 4.0], vec![-10.0, 2.0]];
        let err = check_gradient(
            v,
            |x: &[f64]| x.iter().map(|a| 2.0 * a).collect(),
            &pts,
            1e-5,
        )
        .unwrap();
        // |2x - x| / max(1, |2x|) = 1/2 once |x| >= 1/2.
        assert!((err - 0.5).abs() < 1e-8, "{err}");
        assert!(check_gradient(v, |x: &[f64]| x.to_vec(), &pts, 0.0).is_err());
    }

    fn synthetic(f: impl Fn(f64) -> f64) -> Trajectory {
        let mut traj = Trajectory::new(0.0, vec![f(0.0)]);
        for k in 1..200 {
            let t = k as f64 * 0.05;
            traj.push(t, vec![f(t)]);
        }
        traj
    }

    #[test]
    fn fit_exact_exponential() {
        let traj = synthetic(|t| 3.0 * (-0.7 * t).exp());
        let fit = fit_decay_rate(&traj, |x| x[0], 0.0).unwrap();
        assert!((fit.sigma - 0.7).abs() < 1e-6);
        assert!(fit.r_squared > 0.9999);
        assert!((fit.intercept - 3.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn fit_constant_error() {
        let traj = synthetic(|_| 2.5);
        let fit = fit_decay_rate(&traj, |x| x[0], 0.0).unwrap();
        assert_eq!(fit.sigma, 0.0);
    }

    #[test]
    fn fit_window_too_short() {
        let traj = synthetic(|t| (-t).exp());
        let err = fit_decay_rate(&traj, |x| x[0], 9.6).unwrap_err();
        assert!(matches!(
            err,
            NumericsError::InsufficientWindow { found: 8 }
        ));
        // zero errors are dropped from the window
        let err = fit_decay_rate(&traj, |_| 0.0, 0.0).unwrap_err();
        assert!(matches!(
            err,
            NumericsError::InsufficientWindow { found: 0 }
        ));
    }
}
