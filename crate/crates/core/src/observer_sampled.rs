//! Sampled-data observer: output predictor between samples, state-dependent
//! sampling schedule, measurement errors, and the sampling-diameter and gain
//! selection.

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{integrate_hybrid, DecayFit, NumericsError, StepControl, Trajectory};
use crate::observer_compact::{fit_error_decay, CompactObserver, ObserverError};
use crate::systems::InputSignal;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SampledError {
    #[error("injection is not of the form L (h(xi) - y) with scalar output: {0}")]
    H4Violation(String),
    #[error("no feasible sampling diameter: the condition fails even at r = {r_min:e}")]
    NoFeasibleR { r_min: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Observer(#[from] ObserverError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub const G_SAFETY_FACTOR: f64 = 1.2;
pub const R_SAFETY_MARGIN: f64 = 0.9;
pub const R_MIN: f64 = 1e-9;

pub const SCHEDULE_CLAMP_NOTE: &str =
    "sampling interval r * exp(-max(0, w)) keeps every interval at most r";

/// Measurement error, uniform on `[-amplitude, amplitude]`, determined by the
/// seed and the sampling instant alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub amplitude: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn none() -> Self {
        Self {
            amplitude: 0.0,
            seed: 0,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        if self.amplitude == 0.0 {
            return 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ t.to_bits().rotate_left(17));
        rng.gen_range(-self.amplitude..=self.amplitude)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GEstimate {
    /// Safety-inflated maximum of both quotients.
    pub lipschitz: f64,
    /// Largest sampled `|khat(xi,w,u) - khat(xi,y,u)| / |w - y|`.
    pub injection_quotient: f64,
    /// Largest sampled `|grad h f(xi) - grad h f(x)| / |xi - x|`.
    pub predictor_quotient: f64,
    pub samples: usize,
}

fn sample_ball_box(rng: &mut ChaCha8Rng, radius: f64, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-radius..=radius)).collect()
}

/// Sampled Lipschitz surrogate `G` of the corrected injection in `y` and of
/// the output predictor, over `V(xi) <= b`, `V(x) <= R`, inflated by
/// [`G_SAFETY_FACTOR`].
pub fn estimate_g(
    obs: &CompactObserver,
    n_samples: usize,
    seed: u64,
) -> Result<GEstimate, SampledError> {
    let model = obs.model.as_ref();
    let n = model.state_dim();
    if model.output_dim() != 1 {
        return Err(SampledError::H4Violation(format!(
            "output dimension is {}",
            model.output_dim()
        )));
    }
    let gain = obs.spec.injection.output_gain().ok_or_else(|| {
        SampledError::H4Violation("injection does not expose an output gain".into())
    })?;
    if n_samples == 0 {
        return Err(SampledError::InvalidConfig(
            "n_samples must be positive".into(),
        ));
    }
    let f = &obs.cert.function;
    let rb = crate::lyapunov::sublevel_radius(|x| f.value(x), n, obs.cert.ramp_end)
        .map_err(ObserverError::from)?;
    let rr = crate::lyapunov::sublevel_radius(|x| f.value(x), n, obs.cert.inner_level)
        .map_err(ObserverError::from)?;
    let ubox = model.input_box();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut kq: f64 = 0.0;
    let mut hq: f64 = 0.0;
    let mut taken = 0;
    let mut draws = 0usize;
    while taken < n_samples {
        draws += 1;
        if draws > n_samples * 1000 {
            return Err(SampledError::InvalidConfig(
                "could not sample the sublevel sets".into(),
            ));
        }
        let xi = sample_ball_box(&mut rng, rb, n);
        let x = sample_ball_box(&mut rng, rr, n);
        if obs.cert.value(&xi) > obs.cert.ramp_end || obs.cert.value(&x) > obs.cert.inner_level {
            continue;
        }
        let u: Vec<f64> = ubox
            .iter()
            .map(|&(lo, hi)| {
                let (lo, hi) = (lo.max(-1e3), hi.min(1e3));
                rng.gen_range(lo..=hi)
            })
            .collect();
        taken += 1;

        let y = model.h(&x)[0];
        let hxi = model.h(&xi)[0];
        let k = obs.spec.injection.eval(&xi, &[y], &u);
        for (ki, li) in k.iter().zip(&gain) {
            let expected = li * (hxi - y);
            if (ki - expected).abs() > 1e-9 * expected.abs().max(1.0) {
                return Err(SampledError::H4Violation(format!(
                    "k differs from L (h(xi) - y) at xi = {xi:?}"
                )));
            }
        }

        let w = y + rng.gen_range(-1.0..=1.0);
        if (w - y).abs() > 1e-12 {
            let kw = obs.khat(&xi, &[w], &u)?;
            let ky = obs.khat(&xi, &[y], &u)?;
            let d = kw
                .iter()
                .zip(&ky)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            kq = kq.max(d / (w - y).abs());
        }

        let dist = xi
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        if dist > 1e-12 {
            let pred = |s: &[f64]| {
                let g = &model.grad_h(s)[0];
                let fs = model.f(s, &u);
                g.iter().zip(&fs).map(|(a, b)| a * b).sum::<f64>()
            };
            hq = hq.max((pred(&xi) - pred(&x)).abs() / dist);
        }
    }
    Ok(GEstimate {
        lipschitz: G_SAFETY_FACTOR * kq.max(hq),
        injection_quotient: kq,
        predictor_quotient: hq,
        samples: taken,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiameterSelection {
    pub diameter: f64,
    pub gamma_iss: f64,
    /// `c mu - sqrt(2) G^2 |P| r e^{sigma r}` at the returned `r`.
    pub slack: f64,
}

fn diameter_lhs(g: f64, p_norm: f64, sigma: f64, r: f64) -> f64 {
    2f64.sqrt() * g * g * p_norm * r * (sigma * r).exp()
}

/// Largest `r` with `sqrt(2) G^2 |P| r e^{sigma r} < 0.9 c mu`, and the
/// corresponding gain `sqrt(2) G |P| / (c mu - sqrt(2) G^2 |P| r e^{sigma r})`.
pub fn select_r(
    g: f64,
    p_norm: f64,
    c: f64,
    mu: f64,
    sigma: f64,
) -> Result<DiameterSelection, SampledError> {
    for (name, v) in [
        ("G", g),
        ("P_norm", p_norm),
        ("c", c),
        ("mu", mu),
        ("sigma", sigma),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(SampledError::InvalidConfig(format!(
                "{name} must be positive and finite, got {v}"
            )));
        }
    }
    let target = R_SAFETY_MARGIN * c * mu;
    let feasible = |r: f64| diameter_lhs(g, p_norm, sigma, r) < target;
    if !feasible(R_MIN) {
        return Err(SampledError::NoFeasibleR { r_min: R_MIN });
    }
    let mut lo = R_MIN;
    let mut hi = 1.0;
    while feasible(hi) && hi < 1e12 {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let r = lo;
    let slack = c * mu - diameter_lhs(g, p_norm, sigma, r);
    Ok(DiameterSelection {
        diameter: r,
        gamma_iss: 2f64.sqrt() * g * p_norm / slack,
        slack,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampledConfig {
    /// Maximum sampling diameter used by the schedule.
    pub diameter: f64,
    pub lipschitz: f64,
    pub gamma_iss: f64,
    /// Decay rate used in the diameter condition.
    pub sigma: f64,
    pub noise: NoiseModel,
    /// Whether `r` satisfies the diameter condition for the stored constants.
    pub certified: bool,
    pub max_jumps: usize,
}

impl SampledConfig {
    pub fn validate(&self) -> Result<(), SampledError> {
        if !(self.diameter > 0.0 && self.diameter.is_finite()) {
            return Err(SampledError::InvalidConfig(format!(
                "r must be positive, got {}",
                self.diameter
            )));
        }
        if !(self.noise.amplitude >= 0.0) {
            return Err(SampledError::InvalidConfig(
                "noise amplitude must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampledReport {
    pub diameter: f64,
    pub lipschitz: f64,
    pub gamma_iss: f64,
    pub certified_r: bool,
    pub noise_amplitude: f64,
    pub event_count: usize,
    pub max_interval: f64,
    pub initial_error: f64,
    pub final_error: f64,
    /// `sup |xi - x|` over the last quarter of the horizon.
    pub tail_sup_error: f64,
    pub fit: Option<DecayFit>,
    pub schedule_note: &'static str,
}

/// Hybrid run; states are `[x, xi, w]`.
#[derive(Debug, Clone)]
pub struct SampledRun {
    pub trajectory: Trajectory,
    pub dim: usize,
    pub report: SampledReport,
}

impl SampledRun {
    pub fn error_norm(&self, i: usize) -> f64 {
        let s = &self.trajectory.states[i];
        (0..self.dim)
            .map(|j| (s[self.dim + j] - s[j]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Instants at which the output was sampled, starting at 0.
    pub fn sampling_instants(&self) -> Vec<f64> {
        std::iter::once(self.trajectory.times[0])
            .chain(self.trajectory.events.iter().map(|e| e.t))
            .collect()
    }
}

/// Fraction of the error floor below which samples leave the decay fit.
pub const FIT_FLOOR_RATIO: f64 = 1e-10;

#[allow(clippy::too_many_arguments)]
pub fn run_sampled(
    obs: &CompactObserver,
    cfg: &SampledConfig,
    x0: &[f64],
    xi0: &[f64],
    w0: f64,
    horizon: f64,
    input: &InputSignal,
    ctrl: &StepControl,
) -> Result<SampledRun, SampledError> {
    cfg.validate()?;
    let model = obs.model.as_ref();
    let n = model.state_dim();
    if model.output_dim() != 1 {
        return Err(SampledError::H4Violation(
            "sampled observer needs scalar output".into(),
        ));
    }
    if x0.len() != n || xi0.len() != n {
        return Err(SampledError::InvalidConfig(format!(
            "initial states must have dimension {n}"
        )));
    }
    if !(horizon > 0.0) {
        return Err(SampledError::InvalidConfig(
            "horizon must be positive".into(),
        ));
    }
    let mut s0 = x0.to_vec();
    s0.extend_from_slice(xi0);
    s0.push(w0);

    let flow = |t: f64, s: &[f64]| {
        let u = input.eval(t);
        let (x, rest) = s.split_at(n);
        let (xi, w) = rest.split_at(n);
        let mut d = model.f(x, &u);
        match obs.rhs(xi, w, &u) {
            Ok(v) => d.extend(v),
            Err(_) => d.extend(std::iter::repeat_n(f64::NAN, n)),
        }
        let g = &model.grad_h(xi)[0];
        let fxi = model.f(xi, &u);
        d.push(g.iter().zip(&fxi).map(|(a, b)| a * b).sum());
        d
    };
    let jump = |t: f64, s: &[f64]| {
        let mut next = s.to_vec();
        next[2 * n] = model.h(&s[..n])[0] + cfg.noise.eval(t);
        next
    };
    let schedule = |_t: f64, s: &[f64]| cfg.diameter * (-s[2 * n].max(0.0)).exp();

    let trajectory = integrate_hybrid(
        flow,
        jump,
        schedule,
        &s0,
        (0.0, horizon),
        ctrl,
        cfg.max_jumps,
    )?;

    let err = |s: &[f64]| {
        (0..n)
            .map(|j| (s[n + j] - s[j]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut instants = vec![0.0];
    instants.extend(trajectory.events.iter().map(|e| e.t));
    let max_interval = instants.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    let tail_start = 0.75 * horizon;
    let tail_sup_error = trajectory
        .times
        .iter()
        .zip(&trajectory.states)
        .filter(|(t, _)| **t >= tail_start)
        .map(|(_, s)| err(s))
        .fold(0.0, f64::max);
    let fit = fit_error_decay(&trajectory, n, 0.0, FIT_FLOOR_RATIO).ok();
    let report = SampledReport {
        diameter: cfg.diameter,
        lipschitz: cfg.lipschitz,
        gamma_iss: cfg.gamma_iss,
        certified_r: cfg.certified,
        noise_amplitude: cfg.noise.amplitude,
        event_count: trajectory.events.len(),
        max_interval,
        initial_error: err(&trajectory.states[0]),
        final_error: err(trajectory.final_state()),
        tail_sup_error,
        fit,
        schedule_note: SCHEDULE_CLAMP_NOTE,
    };
    info!(
        "sampled run: {} events, max interval {:.6}, final error {:.3e}",
        report.event_count, report.max_interval, report.final_error
    );
    Ok(SampledRun {
        trajectory,
        dim: n,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::DEFAULT_MAX_JUMPS;
    use crate::observer_compact::{planar_gains, planar_observer, planar_reference_params};

    fn reference_observer() -> CompactObserver {
        let (p, q, a, b) = planar_reference_params();
        planar_observer(&planar_gains(p, q, a, b).unwrap()).unwrap()
    }

    fn config(r: f64, amplitude: f64) -> SampledConfig {
        SampledConfig {
            diameter: r,
            lipschitz: 1.0,
            gamma_iss: 1.0,
            sigma: 0.01,
            noise: NoiseModel { amplitude, seed: 3 },
            certified: false,
            max_jumps: DEFAULT_MAX_JUMPS,
        }
    }

    #[test]
    fn noise_is_bounded_and_replayable() {
        let nm = NoiseModel {
            amplitude: 0.01,
            seed: 5,
        };
        for i in 0..1000 {
            let t = i as f64 * 0.013;
            let e = nm.eval(t);
            assert!(e.abs() <= 0.01);
            assert_eq!(e, nm.eval(t));
        }
        assert_ne!(nm.eval(0.5), nm.eval(0.6));
        assert_eq!(NoiseModel::none().eval(1.0), 0.0);
    }

    #[test]
    fn tail_error_scales_with_noise() {
        let obs = reference_observer();
        let u = InputSignal::constant(vec![0.3], vec![(-1.0, 1.0)]).unwrap();
        let tail = |amplitude: f64| {
            run_sampled(
                &obs,
                &config(0.1, amplitude),
                &[2.0, -1.0],
                &[-2.0, 2.5],
                0.0,
                40.0,
                &u,
                &StepControl::fixed(0.01),
            )
            .unwrap()
            .report
            .tail_sup_error
        };
        let (single, double) = (tail(0.01), tail(0.02));
        assert!(single > 0.0);
        assert!(double <= 2.0 * 1.2 * single, "{single} {double}");
    }

    #[test]
    fn select_r_limits() {
        let sel = select_r(16.0, 16.0, 0.5, 3.4e-5, 0.01).unwrap();
        assert!(sel.diameter > 0.0 && sel.slack > 0.0);
        assert!(diameter_lhs(16.0, 16.0, 0.01, sel.diameter) < R_SAFETY_MARGIN * 0.5 * 3.4e-5);
        assert!(
            diameter_lhs(16.0, 16.0, 0.01, sel.diameter * 1.001) >= R_SAFETY_MARGIN * 0.5 * 3.4e-5
        );
        assert!(sel.gamma_iss > 2f64.sqrt() * 16.0 * 16.0 / (0.5 * 3.4e-5));
        assert!(matches!(
            select_r(1e9, 1e9, 0.5, 1e-9, 1.0),
            Err(SampledError::NoFeasibleR { .. })
        ));
        assert!(select_r(0.0, 1.0, 0.5, 1.0, 1.0).is_err());
    }

    #[test]
    fn predictor_quotient_at_unit_offset() {
        // |(-1 + 0) - (0 + 0)| / |(1,0) - (0,0)| = 1
        let obs = reference_observer();
        let pred = |s: &[f64]| {
            let g = &obs.model.grad_h(s)[0];
            let f = obs.model.f(s, &[0.3]);
            g[0] * f[0] + g[1] * f[1]
        };
        assert_eq!((pred(&[1.0, 0.0]) - pred(&[0.0, 0.0])).abs() / 1.0, 1.0);
    }

    #[test]
    fn injection_quotient_is_gain_norm_inside_sublevel() {
        let obs = reference_observer();
        let gain = obs.spec.injection.output_gain().unwrap();
        let l = (gain[0] * gain[0] + gain[1] * gain[1]).sqrt();
        let xi = [0.3, 0.2];
        let a = obs.khat(&xi, &[0.1], &[0.0]).unwrap();
        let b = obs.khat(&xi, &[0.6], &[0.0]).unwrap();
        let q = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() / 0.5;
        assert!((q - l).abs() < 1e-15);
    }

    #[test]
    fn g_estimate_is_finite_and_stable() {
        let obs = reference_observer();
        let g1 = estimate_g(&obs, 20_000, 1).unwrap();
        let g2 = estimate_g(&obs, 20_000, 2).unwrap();
        assert!(g1.lipschitz.is_finite() && g1.lipschitz > 0.0);
        assert!((g1.lipschitz - g2.lipschitz).abs() <= 0.1 * g1.lipschitz);
        assert!(g1.predictor_quotient >= g1.injection_quotient);
    }

    #[test]
    fn first_sample_at_r_when_w0_is_zero() {
        let obs = reference_observer();
        let u = InputSignal::constant(vec![0.0], vec![(-1.0, 1.0)]).unwrap();
        let run = run_sampled(
            &obs,
            &config(0.1, 0.0),
            &[1.0, 1.0],
            &[0.0, 0.0],
            0.0,
            1.0,
            &u,
            &StepControl::fixed(0.01),
        )
        .unwrap();
        assert!((run.trajectory.events[0].t - 0.1).abs() < 1e-15);
        assert!(run.report.max_interval <= 0.1 + 1e-12);
    }

    #[test]
    fn exact_start_tracks_exactly() {
        let obs = reference_observer();
        let u = InputSignal::constant(vec![0.4], vec![(-1.0, 1.0)]).unwrap();
        let x0 = [1.0, -0.5];
        let run = run_sampled(
            &obs,
            &config(0.1, 0.0),
            &x0,
            &x0,
            x0[0],
            20.0,
            &u,
            &StepControl::fixed(0.01),
        )
        .unwrap();
        for (i, s) in run.trajectory.states.iter().enumerate() {
            assert!(run.error_norm(i) < 1e-12);
            assert!((s[4] - s[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn clamp_caps_interval_for_negative_w() {
        let obs = reference_observer();
        let u = InputSignal::constant(vec![0.0], vec![(-1.0, 1.0)]).unwrap();
        let run = run_sampled(
            &obs,
            &config(0.2, 0.0),
            &[-1.5, 0.0],
            &[1.0, 1.0],
            -3.0,
            5.0,
            &u,
            &StepControl::fixed(0.01),
        )
        .unwrap();
        assert!((run.trajectory.events[0].t - 0.2).abs() < 1e-15);
        assert!(run.report.max_interval <= 0.2 + 1e-12);
    }
}
