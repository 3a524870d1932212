//! Global observer for plants with a globally attracting compact set: the
//! correction scalar, the corrected injection, the observer field, and gain
//! synthesis for the planar monotone system.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;
use thiserror::Error;

use crate::lyapunov::{BumpFunction, LyapunovCertificate, LyapunovError, QuarticDissipation};
use crate::numerics::{
    fit_decay_rate, integrate, DecayFit, NumericsError, StepControl, Trajectory,
};
use crate::systems::{
    Injection, InputSignal, PlanarInjection, PlanarSystem, SystemError, SystemModel,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObserverError {
    #[error("gradient of V vanishes (|grad V| = {norm:e}) at {point:?} outside the sublevel set")]
    VanishingGradient { norm: f64, point: Vec<f64> },
    #[error("infeasible gains: {condition}")]
    Infeasible { condition: String },
    #[error("invalid weighting matrix: {0}")]
    InvalidMatrix(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Lyapunov(#[from] LyapunovError),
}

pub const GRADIENT_FLOOR: f64 = 1e-12;

/// Weighting matrix, contraction margin and injection of a local observer.
#[derive(Clone)]
pub struct ObserverSpec {
    pub p_matrix: DMatrix<f64>,
    pub mu: f64,
    pub injection: Arc<dyn Injection>,
    /// Smallest eigenvalue of `p_matrix`.
    pub k1: f64,
    /// Largest eigenvalue of `p_matrix` (its spectral norm).
    pub k2: f64,
    pub bump: BumpFunction,
}

impl fmt::Debug for ObserverSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ObserverSpec")
            .field("p_matrix", &self.p_matrix)
            .field("mu", &self.mu)
            .field("k1", &self.k1)
            .field("k2", &self.k2)
            .field("bump", &self.bump)
            .finish_non_exhaustive()
    }
}

/// Eigenvalue bounds of a symmetric positive-definite matrix.
pub fn spd_bounds(p: &DMatrix<f64>) -> Result<(f64, f64), ObserverError> {
    if !p.is_square() || p.nrows() == 0 {
        return Err(ObserverError::InvalidMatrix("matrix must be square".into()));
    }
    let scale = p.amax().max(1.0);
    if (p - p.transpose()).amax() > 1e-12 * scale {
        return Err(ObserverError::InvalidMatrix(
            "matrix is not symmetric".into(),
        ));
    }
    let eig = SymmetricEigen::new(p.clone()).eigenvalues;
    let k1 = eig.min();
    let k2 = eig.max();
    if !(k1 > 0.0) {
        return Err(ObserverError::InvalidMatrix(format!(
            "matrix is not positive definite (smallest eigenvalue {k1:e})"
        )));
    }
    Ok((k1, k2))
}

pub(crate) fn quadratic_form(p: &DMatrix<f64>, a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += a[i] * p[(i, j)] * b[j];
        }
    }
    acc
}

impl ObserverSpec {
    pub fn new(
        p_matrix: DMatrix<f64>,
        mu: f64,
        injection: Arc<dyn Injection>,
        bump: BumpFunction,
    ) -> Result<Self, ObserverError> {
        if !(mu > 0.0) {
            return Err(ObserverError::InvalidArgument(format!(
                "mu must be positive, got {mu}"
            )));
        }
        let (k1, k2) = spd_bounds(&p_matrix)?;
        Ok(Self {
            p_matrix,
            mu,
            injection,
            k1,
            k2,
            bump,
        })
    }

    pub fn p_norm(&self) -> f64 {
        self.k2
    }

    /// `a' P b`.
    pub fn bilinear(&self, a: &[f64], b: &[f64]) -> f64 {
        quadratic_form(&self.p_matrix, a, b)
    }

    /// `e' P e`.
    pub fn weighted(&self, e: &[f64]) -> f64 {
        self.bilinear(e, e)
    }
}

/// A plant with its Lyapunov certificate and local observer data.
#[derive(Clone)]
pub struct CompactObserver {
    pub model: Arc<dyn SystemModel>,
    pub cert: LyapunovCertificate,
    pub spec: ObserverSpec,
}

impl fmt::Debug for CompactObserver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CompactObserver")
            .field("cert", &self.cert)
            .field("spec", &self.spec)
            .finish_non_exhaustive()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `max(0, grad V f + W + p(V) grad V k)`.
pub fn phi(
    xi: &[f64],
    y: &[f64],
    u: &[f64],
    model: &dyn SystemModel,
    cert: &LyapunovCertificate,
    spec: &ObserverSpec,
) -> f64 {
    let grad = cert.gradient(xi);
    let k = spec.injection.eval(xi, y, u);
    let drift = dot(&grad, &model.f(xi, u));
    let weight = spec.bump.eval(cert.value(xi));
    (drift + cert.dissipation(xi) + weight * dot(&grad, &k)).max(0.0)
}

/// The injection `k` inside `{V <= R}`, corrected along `-grad V` outside.
pub fn khat(
    xi: &[f64],
    y: &[f64],
    u: &[f64],
    model: &dyn SystemModel,
    cert: &LyapunovCertificate,
    spec: &ObserverSpec,
) -> Result<Vec<f64>, ObserverError> {
    let mut k = spec.injection.eval(xi, y, u);
    if cert.value(xi) <= cert.inner_level {
        return Ok(k);
    }
    let grad = cert.gradient(xi);
    let g2 = dot(&grad, &grad);
    if g2.sqrt() <= GRADIENT_FLOOR {
        return Err(ObserverError::VanishingGradient {
            norm: g2.sqrt(),
            point: xi.to_vec(),
        });
    }
    let scale = phi(xi, y, u, model, cert, spec) / g2;
    for (ki, gi) in k.iter_mut().zip(&grad) {
        *ki -= scale * gi;
    }
    Ok(k)
}

/// `f(xi, u) + khat(xi, y, u)`.
pub fn observer_rhs(
    xi: &[f64],
    y: &[f64],
    u: &[f64],
    model: &dyn SystemModel,
    cert: &LyapunovCertificate,
    spec: &ObserverSpec,
) -> Result<Vec<f64>, ObserverError> {
    let mut rhs = model.f(xi, u);
    for (r, k) in rhs.iter_mut().zip(khat(xi, y, u, model, cert, spec)?) {
        *r += k;
    }
    Ok(rhs)
}

impl CompactObserver {
    pub fn phi(&self, xi: &[f64], y: &[f64], u: &[f64]) -> f64 {
        phi(xi, y, u, self.model.as_ref(), &self.cert, &self.spec)
    }

    pub fn khat(&self, xi: &[f64], y: &[f64], u: &[f64]) -> Result<Vec<f64>, ObserverError> {
        khat(xi, y, u, self.model.as_ref(), &self.cert, &self.spec)
    }

    pub fn rhs(&self, xi: &[f64], y: &[f64], u: &[f64]) -> Result<Vec<f64>, ObserverError> {
        observer_rhs(xi, y, u, self.model.as_ref(), &self.cert, &self.spec)
    }
}

// ---------------------------------------------------------------------------
// Planar monotone system

/// Sublevel threshold of `V = |x|^2/2` for the planar system.
pub fn planar_sublevel() -> f64 {
    10f64.sqrt() / 2.0
}

pub const PLANAR_CONTRACTION_FRACTION: f64 = 0.5;

/// Gains and margins of the planar design with
/// `P = [[1, -p], [-p, q]] / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlanarGainParams {
    pub cross_weight: f64,
    pub weight: f64,
    pub ramp_start: f64,
    pub ramp_end: f64,
    pub l1: f64,
    pub l2: f64,
    pub mu: f64,
    /// `q + 2 + 3b + 36 q b^2`.
    pub normaliser: f64,
    /// Right-hand side of the gain-magnitude bound.
    pub gain_bound: f64,
}

/// Reference design point `a = 2, b = 3, q = 32, p = sqrt(2)/10411`.
pub fn planar_reference_params() -> (f64, f64, f64, f64) {
    (2f64.sqrt() / 10411.0, 32.0, 2.0, 3.0)
}

// The p-bound holds with equality at the reference point, so the non-strict
// checks allow for rounding.
const BOUNDARY_RTOL: f64 = 1e-12;

fn le_rel(lhs: f64, rhs: f64) -> bool {
    lhs <= rhs + BOUNDARY_RTOL * rhs.abs().max(lhs.abs())
}

pub fn planar_gains(p: f64, q: f64, a: f64, b: f64) -> Result<PlanarGainParams, ObserverError> {
    let infeasible = |condition: String| Err(ObserverError::Infeasible { condition });
    if !(p > 0.0) {
        return infeasible(format!("p > 0 fails (p = {p})"));
    }
    if !(q > p * p) {
        return infeasible(format!("q > p^2 fails (q = {q}, p^2 = {})", p * p));
    }
    let r = planar_sublevel();
    if !(a > r && b > a) {
        return infeasible(format!("b > a > sqrt(10)/2 fails (a = {a}, b = {b})"));
    }
    let normaliser = q + 2.0 + 3.0 * b + 36.0 * q * b * b;
    let ratio = normaliser / (2.0 * (q - p * p));
    let l1 = -p * ratio;
    let l2 = -(p * p * ratio + 1.0) / q;
    let slack = 2.0 * a * a - 5.0;
    let gain_bound = slack / (16.0 * 2f64.sqrt() * b);
    let q_floor = 16.0 * 2f64.sqrt() * b / slack;
    if !(q > q_floor) {
        return infeasible(format!(
            "q > 16 sqrt(2) b / (2a^2 - 5) fails (q = {q}, bound = {q_floor})"
        ));
    }
    let p_cap = (q * slack / (16.0 * 2f64.sqrt() * b * normaliser))
        .min((q / 2.0).sqrt())
        .min(q - q_floor);
    if !le_rel(p, p_cap) {
        return infeasible(format!("p <= min(...) fails (p = {p}, cap = {p_cap})"));
    }
    let gain = l1.abs().max(l2.abs());
    if !le_rel(gain, gain_bound) {
        return infeasible(format!(
            "max(|L1|, |L2|) <= (2a^2 - 5)/(16 sqrt(2) b) fails ({gain} > {gain_bound})"
        ));
    }
    Ok(PlanarGainParams {
        cross_weight: p,
        weight: q,
        ramp_start: a,
        ramp_end: b,
        l1,
        l2,
        mu: p / 4.0,
        normaliser,
        gain_bound,
    })
}

pub fn planar_p_matrix(p: f64, q: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[0.5, -0.5 * p, -0.5 * p, 0.5 * q])
}

/// The planar system with `V = |x|^2/2`, `W = V^2/2`, `R = sqrt(10)/2`,
/// `c = 1/2` and the gains of `params`.
pub fn planar_observer(params: &PlanarGainParams) -> Result<CompactObserver, ObserverError> {
    let cert = LyapunovCertificate::new(
        Arc::new(QuarticDissipation),
        planar_sublevel(),
        params.ramp_start,
        params.ramp_end,
        PLANAR_CONTRACTION_FRACTION,
    )?;
    let spec = ObserverSpec::new(
        planar_p_matrix(params.cross_weight, params.weight),
        params.mu,
        Arc::new(PlanarInjection {
            gain: [params.l1, params.l2],
        }),
        cert.bump(),
    )?;
    Ok(CompactObserver {
        model: Arc::new(PlanarSystem),
        cert,
        spec,
    })
}

/// Corrected planar injection written out component-wise, with bump `g`.
pub fn planar_khat_closed(
    xi: &[f64],
    y: f64,
    u: f64,
    params: &PlanarGainParams,
    g: &BumpFunction,
) -> [f64; 2] {
    let (x1, x2) = (xi[0], xi[1]);
    let e = x1 - y;
    let sq = x1 * x1 + x2 * x2;
    let base = [params.l1 * e, params.l2 * e];
    if sq <= 10f64.sqrt() {
        return base;
    }
    let v = 0.5 * sq;
    let phi = (-x1.powi(4) + (x1 + u) * x2 - x2.powi(4)
        + 0.5 * v * v
        + e * g.eval(v) * (params.l1 * x1 + params.l2 * x2))
        .max(0.0);
    [base[0] - phi / sq * x1, base[1] - phi / sq * x2]
}

// ---------------------------------------------------------------------------
// Continuous runs

/// Joint run of plant and observer; states are `[x, xi]`.
#[derive(Debug, Clone)]
pub struct ContinuousRun {
    pub trajectory: Trajectory,
    pub dim: usize,
}

impl ContinuousRun {
    pub fn error(&self, i: usize) -> Vec<f64> {
        let s = &self.trajectory.states[i];
        (0..self.dim).map(|j| s[self.dim + j] - s[j]).collect()
    }

    pub fn error_norm(&self, i: usize) -> f64 {
        self.error(i).iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn run_continuous(
    obs: &CompactObserver,
    x0: &[f64],
    xi0: &[f64],
    horizon: f64,
    input: &InputSignal,
    ctrl: &StepControl,
) -> Result<ContinuousRun, ObserverError> {
    let n = obs.model.state_dim();
    if x0.len() != n || xi0.len() != n {
        return Err(ObserverError::InvalidArgument(format!(
            "initial states must have dimension {n}"
        )));
    }
    let mut s0 = x0.to_vec();
    s0.extend_from_slice(xi0);
    let rhs = |t: f64, s: &[f64]| {
        let u = input.eval(t);
        let (x, xi) = s.split_at(n);
        let mut d = obs.model.f(x, &u);
        let y = obs.model.h(x);
        match obs.rhs(xi, &y, &u) {
            Ok(v) => d.extend(v),
            Err(_) => d.extend(std::iter::repeat_n(f64::NAN, n)),
        }
        d
    };
    let trajectory = integrate(rhs, &s0, (0.0, horizon), ctrl)?;
    Ok(ContinuousRun { trajectory, dim: n })
}

/// Fitted decay of `|xi - x|` after `t_start`. Samples with error below
/// `floor_ratio` times the initial error are left out of the fit.
pub fn fit_error_decay(
    traj: &Trajectory,
    dim: usize,
    t_start: f64,
    floor_ratio: f64,
) -> Result<DecayFit, NumericsError> {
    let err = |s: &[f64]| {
        (0..dim)
            .map(|j| (s[dim + j] - s[j]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let e0 = err(&traj.states[0]);
    let floor = floor_ratio * e0;
    fit_decay_rate(
        traj,
        |s| {
            let e = err(s);
            if e > floor {
                e
            } else {
                0.0
            }
        },
        t_start,
    )
}

/// `max_t |xi(t) - x(t)| exp(sigma t)`.
pub fn empirical_prefactor(traj: &Trajectory, dim: usize, sigma: f64) -> f64 {
    traj.times
        .iter()
        .zip(&traj.states)
        .map(|(t, s)| {
            let e = (0..dim)
                .map(|j| (s[dim + j] - s[j]).powi(2))
                .sum::<f64>()
                .sqrt();
            e * (sigma * t).exp()
        })
        .fold(0.0, f64::max)
}
