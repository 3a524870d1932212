//! Plant models, injection maps and admissible input signals.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SystemError {
    #[error("input {value} outside the admissible range [{lo}, {hi}]")]
    InputOutOfRange { value: f64, lo: f64, hi: f64 },
    #[error("state {state:?} outside the model domain")]
    DomainViolation { state: Vec<f64> },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// A plant `x' = f(x, u)`, `y = h(x)`.
///
/// `f` is total: evaluations outside the model's domain return non-finite
/// values, which the integrators report as an escape from the domain.
pub trait SystemModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn f(&self, x: &[f64], u: &[f64]) -> Vec<f64>;
    fn h(&self, x: &[f64]) -> Vec<f64>;
    /// Output Jacobian, one row per output component.
    fn grad_h(&self, x: &[f64]) -> Vec<Vec<f64>>;
    /// Per-component bounds of the input set U (bounds may be infinite).
    fn input_box(&self) -> Vec<(f64, f64)>;
    fn in_domain(&self, _x: &[f64]) -> bool {
        true
    }
}

/// Output injection `k(state, y, u)` of an observer.
pub trait Injection: Send + Sync {
    fn eval(&self, state: &[f64], y: &[f64], u: &[f64]) -> Vec<f64>;

    /// `Some(L)` when the injection has the form `L (h(state) - y)` with scalar
    /// output.
    fn output_gain(&self) -> Option<Vec<f64>> {
        None
    }
}

// ---------------------------------------------------------------------------
// Planar monotone system

pub const PLANAR_INPUT_BOUND: f64 = 1.0;

/// `(-x1^3 + x2, -x2^3 + u)` for `|u| <= 1`.
pub fn planar_f(x: &[f64], u: f64) -> Result<[f64; 2], SystemError> {
    if !(u.abs() <= PLANAR_INPUT_BOUND) {
        return Err(SystemError::InputOutOfRange {
            value: u,
            lo: -PLANAR_INPUT_BOUND,
            hi: PLANAR_INPUT_BOUND,
        });
    }
    Ok([-x[0].powi(3) + x[1], -x[1].powi(3) + u])
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PlanarSystem;

impl SystemModel for PlanarSystem {
    fn state_dim(&self) -> usize {
        2
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn f(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        match planar_f(x, u[0]) {
            Ok(v) => v.to_vec(),
            Err(_) => vec![f64::NAN; 2],
        }
    }
    fn h(&self, x: &[f64]) -> Vec<f64> {
        vec![x[0]]
    }
    fn grad_h(&self, _x: &[f64]) -> Vec<Vec<f64>> {
        vec![vec![1.0, 0.0]]
    }
    fn input_box(&self) -> Vec<(f64, f64)> {
        vec![(-PLANAR_INPUT_BOUND, PLANAR_INPUT_BOUND)]
    }
}

/// `k(xi, y, u) = L (xi_1 - y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarInjection {
    pub gain: [f64; 2],
}

impl Injection for PlanarInjection {
    fn eval(&self, xi: &[f64], y: &[f64], _u: &[f64]) -> Vec<f64> {
        let e = xi[0] - y[0];
        vec![self.gain[0] * e, self.gain[1] * e]
    }
    fn output_gain(&self) -> Option<Vec<f64>> {
        Some(self.gain.to_vec())
    }
}

// ---------------------------------------------------------------------------
// Chemostat

/// Chemostat constants with Monod growth `mu(S) = mu_max S / (k_s + S)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChemostatParams {
    /// Yield constant K.
    pub yield_coef: f64,
    /// Common lower bound for the dilution rate and the feed concentration.
    pub theta: f64,
    /// Mortality rate b.
    pub mortality: f64,
    pub mu_max: f64,
    pub half_saturation: f64,
    /// Certified slope with `mu(S) <= gamma_slope * S`.
    pub gamma_slope: f64,
    /// Upper end of the interval on which `mu` is non-decreasing.
    pub s_star: f64,
}

impl Default for ChemostatParams {
    fn default() -> Self {
        let mu_max = 0.4;
        let half_saturation = 0.5;
        Self {
            yield_coef: 2.0,
            theta: 0.05,
            mortality: 0.02,
            mu_max,
            half_saturation,
            gamma_slope: mu_max / half_saturation,
            s_star: f64::INFINITY,
        }
    }
}

impl ChemostatParams {
    pub fn growth(&self, s: f64) -> f64 {
        self.mu_max * s / (self.half_saturation + s)
    }

    /// `mu(S) / S`, finite as `S -> 0`.
    pub fn growth_per_substrate(&self, s: f64) -> f64 {
        self.mu_max / (self.half_saturation + s)
    }

    pub fn growth_derivative(&self, s: f64) -> f64 {
        self.mu_max * self.half_saturation / (self.half_saturation + s).powi(2)
    }

    pub fn validate(&self) -> Result<(), SystemError> {
        let positive = [
            ("yield_coef", self.yield_coef),
            ("theta", self.theta),
            ("mu_max", self.mu_max),
            ("half_saturation", self.half_saturation),
            ("gamma_slope", self.gamma_slope),
            ("s_star", self.s_star),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(SystemError::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.mortality >= 0.0) {
            return Err(SystemError::InvalidParameter(format!(
                "mortality must be non-negative, got {}",
                self.mortality
            )));
        }
        if self.growth(0.0) != 0.0 {
            return Err(SystemError::InvalidParameter("mu(0) != 0".into()));
        }
        let s_hi = self.s_star.min(1e3);
        let mut prev = 0.0;
        for i in 1..=2000 {
            let s = s_hi * i as f64 / 2000.0;
            let m = self.growth(s);
            if !(m > 0.0 && m <= self.mu_max) {
                return Err(SystemError::InvalidParameter(format!(
                    "mu({s}) = {m} outside (0, mu_max]"
                )));
            }
            if m > self.gamma_slope * s * (1.0 + 1e-12) {
                return Err(SystemError::InvalidParameter(format!(
                    "gamma_slope {} does not bound mu at S = {s}",
                    self.gamma_slope
                )));
            }
            if m < prev {
                return Err(SystemError::InvalidParameter(format!(
                    "mu decreases before S* at S = {s}"
                )));
            }
            prev = m;
        }
        Ok(())
    }
}

fn check_chemostat_input(u: &[f64], params: &ChemostatParams) -> Result<(), SystemError> {
    for &v in &u[..2] {
        if !(v >= params.theta) {
            return Err(SystemError::InputOutOfRange {
                value: v,
                lo: params.theta,
                hi: f64::INFINITY,
            });
        }
    }
    Ok(())
}

/// Chemostat field in physical coordinates `X = (biomass, substrate)`,
/// `u = (D, S_in)`.
pub fn chemostat_field(
    big_x: &[f64],
    u: &[f64],
    params: &ChemostatParams,
) -> Result<[f64; 2], SystemError> {
    if !(big_x[0] > 0.0 && big_x[1] > 0.0) {
        return Err(SystemError::DomainViolation {
            state: big_x.to_vec(),
        });
    }
    check_chemostat_input(u, params)?;
    let (bio, sub) = (big_x[0], big_x[1]);
    let (d, s_in) = (u[0], u[1]);
    let mu = params.growth(sub);
    Ok([
        bio * (mu - d - params.mortality),
        d * (s_in - sub) - params.yield_coef * mu * bio,
    ])
}

/// Chemostat field in logarithmic coordinates `x = ln X`.
pub fn chemostat_pullback_field(x: &[f64], u: &[f64], params: &ChemostatParams) -> [f64; 2] {
    let s = x[1].exp();
    let (d, s_in) = (u[0], u[1]);
    [
        params.growth(s) - d - params.mortality,
        d * (s_in * (-x[1]).exp() - 1.0)
            - params.yield_coef * params.growth_per_substrate(s) * x[0].exp(),
    ]
}

/// The chemostat in physical coordinates; the domain is the open quadrant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Chemostat {
    pub params: ChemostatParams,
}

impl SystemModel for Chemostat {
    fn state_dim(&self) -> usize {
        2
    }
    fn input_dim(&self) -> usize {
        2
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn f(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        match chemostat_field(x, u, &self.params) {
            Ok(v) => v.to_vec(),
            Err(_) => vec![f64::NAN; 2],
        }
    }
    fn h(&self, x: &[f64]) -> Vec<f64> {
        vec![self.params.growth(x[1]) * x[0]]
    }
    fn grad_h(&self, x: &[f64]) -> Vec<Vec<f64>> {
        vec![vec![
            self.params.growth(x[1]),
            self.params.growth_derivative(x[1]) * x[0],
        ]]
    }
    fn input_box(&self) -> Vec<(f64, f64)> {
        vec![(self.params.theta, f64::INFINITY); 2]
    }
    fn in_domain(&self, x: &[f64]) -> bool {
        x[0] > 0.0 && x[1] > 0.0
    }
}

/// The chemostat pulled back through the componentwise exponential chart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChemostatPullback {
    pub params: ChemostatParams,
}

impl SystemModel for ChemostatPullback {
    fn state_dim(&self) -> usize {
        2
    }
    fn input_dim(&self) -> usize {
        2
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn f(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        if check_chemostat_input(u, &self.params).is_err() {
            return vec![f64::NAN; 2];
        }
        chemostat_pullback_field(x, u, &self.params).to_vec()
    }
    fn h(&self, x: &[f64]) -> Vec<f64> {
        vec![self.params.growth(x[1].exp()) * x[0].exp()]
    }
    fn grad_h(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let (bio, s) = (x[0].exp(), x[1].exp());
        vec![vec![
            self.params.growth(s) * bio,
            self.params.growth_derivative(s) * s * bio,
        ]]
    }
    fn input_box(&self) -> Vec<(f64, f64)> {
        vec![(self.params.theta, f64::INFINITY); 2]
    }
}

// ---------------------------------------------------------------------------
// Inputs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputKind {
    Constant {
        value: Vec<f64>,
    },
    /// `offset + amplitude * sin(frequency * t + phase)`, per component.
    Sinusoid {
        offset: Vec<f64>,
        amplitude: Vec<f64>,
        frequency: Vec<f64>,
        phase: Vec<f64>,
    },
    /// Piecewise constant: `values[i]` holds on `[times[i], times[i+1])`.
    Piecewise {
        times: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
}

/// An input signal clipped to the admissible box.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSignal {
    kind: InputKind,
    clip_box: Vec<(f64, f64)>,
}

impl InputSignal {
    pub fn new(kind: InputKind, clip_box: Vec<(f64, f64)>) -> Result<Self, SystemError> {
        let dim = clip_box.len();
        let ok = match &kind {
            InputKind::Constant { value } => value.len() == dim,
            InputKind::Sinusoid {
                offset,
                amplitude,
                frequency,
                phase,
            } => [offset, amplitude, frequency, phase]
                .iter()
                .all(|v| v.len() == dim),
            InputKind::Piecewise { times, values } => {
                !times.is_empty()
                    && times.len() == values.len()
                    && values.iter().all(|v| v.len() == dim)
                    && times.windows(2).all(|w| w[1] > w[0])
            }
        };
        if !ok {
            return Err(SystemError::InvalidParameter(format!(
                "input signal does not match the {dim}-dimensional input box"
            )));
        }
        let signal = Self { kind, clip_box };
        if signal.may_leave_box() {
            warn!("input signal leaves the admissible set; values will be clipped");
        }
        Ok(signal)
    }

    pub fn constant(value: Vec<f64>, clip_box: Vec<(f64, f64)>) -> Result<Self, SystemError> {
        Self::new(InputKind::Constant { value }, clip_box)
    }

    pub fn kind(&self) -> &InputKind {
        &self.kind
    }

    pub fn clip_box(&self) -> &[(f64, f64)] {
        &self.clip_box
    }

    fn may_leave_box(&self) -> bool {
        let outside =
            |i: usize, lo: f64, hi: f64| lo < self.clip_box[i].0 || hi > self.clip_box[i].1;
        match &self.kind {
            InputKind::Constant { value } => {
                value.iter().enumerate().any(|(i, v)| outside(i, *v, *v))
            }
            InputKind::Sinusoid {
                offset, amplitude, ..
            } => (0..offset.len()).any(|i| {
                let a = amplitude[i].abs();
                outside(i, offset[i] - a, offset[i] + a)
            }),
            InputKind::Piecewise { values, .. } => values
                .iter()
                .any(|v| v.iter().enumerate().any(|(i, x)| outside(i, *x, *x))),
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let raw: Vec<f64> = match &self.kind {
            InputKind::Constant { value } => value.clone(),
            InputKind::Sinusoid {
                offset,
                amplitude,
                frequency,
                phase,
            } => (0..offset.len())
                .map(|i| offset[i] + amplitude[i] * (frequency[i] * t + phase[i]).sin())
                .collect(),
            InputKind::Piecewise { times, values } => {
                let idx = times.partition_point(|&s| s <= t).saturating_sub(1);
                values[idx].clone()
            }
        };
        raw.iter()
            .zip(&self.clip_box)
            .map(|(v, (lo, hi))| v.clamp(*lo, *hi))
            .collect()
    }

    /// A random sinusoidal input that stays inside `sample_box` (which must be
    /// bounded and contained in `clip_box`).
    pub fn random_sinusoid<R: Rng + ?Sized>(
        rng: &mut R,
        sample_box: &[(f64, f64)],
        clip_box: Vec<(f64, f64)>,
    ) -> Result<Self, SystemError> {
        let dim = sample_box.len();
        let mut offset = Vec::with_capacity(dim);
        let mut amplitude = Vec::with_capacity(dim);
        let mut frequency = Vec::with_capacity(dim);
        let mut phase = Vec::with_capacity(dim);
        for &(lo, hi) in sample_box {
            let mid = rng.gen_range(lo..=hi);
            let room = (mid - lo).min(hi - mid);
            offset.push(mid);
            amplitude.push(rng.gen_range(0.0..=1.0) * room);
            frequency.push(rng.gen_range(0.1..2.0));
            phase.push(rng.gen_range(0.0..std::f64::consts::TAU));
        }
        Self::new(
            InputKind::Sinusoid {
                offset,
                amplitude,
                frequency,
                phase,
            },
            clip_box,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradient, integrate, StepControl};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn planar_field_values() {
        assert_eq!(planar_f(&[0.0, 0.0], 0.0).unwrap(), [0.0, 0.0]);
        assert_eq!(planar_f(&[1.0, 1.0], 0.0).unwrap(), [0.0, -1.0]);
        assert_eq!(planar_f(&[1.0, 2.0], 1.0).unwrap(), [1.0, -7.0]);
        assert!(matches!(
            planar_f(&[0.0, 0.0], 1.5),
            Err(SystemError::InputOutOfRange { .. })
        ));
        assert!(PlanarSystem.f(&[0.0, 0.0], &[2.0])[0].is_nan());
    }

    #[test]
    fn monod_half_saturation() {
        let p = ChemostatParams::default();
        assert_eq!(p.growth(p.half_saturation), p.mu_max / 2.0);
        assert_eq!(p.growth(0.0), 0.0);
        p.validate().unwrap();
    }

    #[test]
    fn growth_balance_zeroes_biomass_rate() {
        let p = ChemostatParams::default();
        let s = 2.0;
        let d = p.growth(s) - p.mortality;
        assert!(d > p.theta);
        let v = chemostat_field(&[1.3, s], &[d, 3.0], &p).unwrap();
        assert!(v[0].abs() < 1e-15);
    }

    #[test]
    fn chemostat_default_point() {
        // mu(0.5) = 0.4 * 0.5 / 1.0 = 0.2
        // F1 = 1.0 * (0.2 - 0.1 - 0.02) = 0.08
        // F2 = 0.1 * (2.0 - 0.5) - 2 * 0.2 * 1.0 = -0.25
        let p = ChemostatParams::default();
        let v = chemostat_field(&[1.0, 0.5], &[0.1, 2.0], &p).unwrap();
        assert!((v[0] - 0.08).abs() < 1e-15);
        assert!((v[1] + 0.25).abs() < 1e-15);
        let y = Chemostat { params: p }.h(&[1.0, 0.5]);
        assert!((y[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn chemostat_domain_checks() {
        let p = ChemostatParams::default();
        assert!(matches!(
            chemostat_field(&[0.0, 1.0], &[0.1, 1.0], &p),
            Err(SystemError::DomainViolation { .. })
        ));
        assert!(matches!(
            chemostat_field(&[1.0, 1.0], &[0.01, 1.0], &p),
            Err(SystemError::InputOutOfRange { .. })
        ));
    }

    #[test]
    fn invalid_params_rejected() {
        let p = ChemostatParams {
            gamma_slope: 0.1,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        let p = ChemostatParams {
            theta: 0.0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn pullback_chart_identity() {
        let p = ChemostatParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let x = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];
            let u = [rng.gen_range(p.theta..3.0), rng.gen_range(p.theta..3.0)];
            let f = chemostat_pullback_field(&x, &u, &p);
            let big_x = [x[0].exp(), x[1].exp()];
            let lhs = [big_x[0] * f[0], big_x[1] * f[1]];
            let rhs = chemostat_field(&big_x, &u, &p).unwrap();
            for i in 0..2 {
                assert!((lhs[i] - rhs[i]).abs() <= 1e-9 * rhs[i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn pullback_finite_at_small_substrate() {
        let p = ChemostatParams::default();
        let f = chemostat_pullback_field(&[0.0, -20.0], &[0.1, 2.0], &p);
        assert!(f.iter().all(|v| v.is_finite()));
        // mu(e^x2) e^{x1-x2} tends to mu_max / k_s = gamma_slope
        let growth_term = p.growth_per_substrate((-20.0f64).exp());
        assert!((growth_term - p.gamma_slope).abs() < 1e-6);
    }

    #[test]
    fn pullback_feed_term_cancels() {
        let p = ChemostatParams::default();
        let x = [0.3f64, 0.7];
        let u = [0.4, x[1].exp()];
        let f = chemostat_pullback_field(&x, &u, &p);
        let expected = -p.yield_coef * p.growth(x[1].exp()) * (x[0] - x[1]).exp();
        assert!((f[1] - expected).abs() < 1e-14);
    }

    #[test]
    fn output_gradients_match_finite_differences() {
        let p = ChemostatParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec<f64>> = (0..100)
            .map(|_| vec![rng.gen_range(0.05..3.0), rng.gen_range(0.05..3.0)])
            .collect();
        let m = Chemostat { params: p };
        let err = check_gradient(|x| m.h(x)[0], |x| m.grad_h(x)[0].clone(), &pts, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
        let pb = ChemostatPullback { params: p };
        let pts: Vec<Vec<f64>> = (0..100)
            .map(|_| vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)])
            .collect();
        let err = check_gradient(|x| pb.h(x)[0], |x| pb.grad_h(x)[0].clone(), &pts, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
        let err = check_gradient(
            |x| PlanarSystem.h(x)[0],
            |x| PlanarSystem.grad_h(x)[0].clone(),
            &pts,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn signals_stay_in_box() {
        let s = InputSignal::new(
            InputKind::Sinusoid {
                offset: vec![0.5],
                amplitude: vec![2.0],
                frequency: vec![1.0],
                phase: vec![0.0],
            },
            vec![(-1.0, 1.0)],
        )
        .unwrap();
        for k in 0..1000 {
            let v = s.eval(k as f64 * 0.01)[0];
            assert!((-1.0..=1.0).contains(&v));
        }
        let pw = InputSignal::new(
            InputKind::Piecewise {
                times: vec![0.0, 1.0, 2.0],
                values: vec![vec![0.2], vec![5.0], vec![-0.3]],
            },
            vec![(-1.0, 1.0)],
        )
        .unwrap();
        assert_eq!(pw.eval(0.5), vec![0.2]);
        assert_eq!(pw.eval(1.0), vec![1.0]);
        assert_eq!(pw.eval(7.0), vec![-0.3]);
        assert!(InputSignal::constant(vec![0.0, 1.0], vec![(-1.0, 1.0)]).is_err());
    }

    #[test]
    fn chemostat_quadrant_is_forward_invariant() {
        let p = ChemostatParams::default();
        let m = Chemostat { params: p };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let u = InputSignal::random_sinusoid(
                &mut rng,
                &[(p.theta, 2.0), (p.theta, 2.0)],
                m.input_box(),
            )
            .unwrap();
            let x0 = [rng.gen_range(0.01..4.0), rng.gen_range(0.01..4.0)];
            let traj = integrate(
                |t, x: &[f64]| m.f(x, &u.eval(t)),
                &x0,
                (0.0, 50.0),
                &StepControl::fixed(0.01),
            )
            .unwrap();
            assert!(traj.states.iter().all(|x| m.in_domain(x)));
        }
    }
}
