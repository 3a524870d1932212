//! Observers for plants evolving on an open set: chart pullback of a
//! candidate observer, the growth-limiting gain `lambda`, the corrected
//! observer field, the forward-completeness bound, and the chemostat instance.

use std::fmt;
use std::sync::Arc;

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lyapunov::{BumpFunction, DEGENERATE_TOL};
use crate::numerics::{
    fit_log_linear, integrate, integrate_positive, DecayFit, NumericsError, PositiveSplit,
    StepControl,
};
use crate::observer_compact::{quadratic_form, spd_bounds, ObserverError};
use crate::systems::{
    Chemostat, ChemostatParams, ChemostatPullback, Injection, InputSignal, SystemError, SystemModel,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpenSetError {
    #[error("chart Jacobian is singular at {point:?}")]
    SingularJacobian { point: Vec<f64> },
    #[error(
        "lambda denominator {denominator:e} vanishes at {point:?} while the correction is active"
    )]
    DegenerateDenominator { point: Vec<f64>, denominator: f64 },
    #[error("state {state:?} left the open set at t = {t}")]
    DomainViolation { t: f64, state: Vec<f64> },
    #[error("no admissible shift p found up to {limit}")]
    NotFound { limit: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Observer(#[from] ObserverError),
}

/// Smooth injective map from `R^n` onto the open set `A`.
pub trait Chart: Send + Sync {
    fn dim(&self) -> usize;
    /// `Phi(z)`.
    fn to_open(&self, z: &[f64]) -> Vec<f64>;
    /// `Phi^{-1}(Z)`, defined on `A`.
    fn from_open(&self, big_z: &[f64]) -> Vec<f64>;
    fn jacobian(&self, z: &[f64]) -> DMatrix<f64>;
    fn contains(&self, big_z: &[f64]) -> bool;
    /// Diagonal of the Jacobian when it is diagonal.
    fn diagonal_jacobian(&self, _z: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// Componentwise exponential onto the open positive orthant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExponentialChart {
    pub dim: usize,
}

impl Chart for ExponentialChart {
    fn dim(&self) -> usize {
        self.dim
    }
    fn to_open(&self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|v| v.exp()).collect()
    }
    fn from_open(&self, big_z: &[f64]) -> Vec<f64> {
        big_z.iter().map(|v| v.ln()).collect()
    }
    fn jacobian(&self, z: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(z.len(), z.iter().map(|v| v.exp())))
    }
    fn contains(&self, big_z: &[f64]) -> bool {
        big_z.iter().all(|v| *v > 0.0 && v.is_finite())
    }
    fn diagonal_jacobian(&self, z: &[f64]) -> Option<Vec<f64>> {
        Some(z.iter().map(|v| v.exp()).collect())
    }
}

/// Growth certificate in chart coordinates: `W`, its gradient, the weighting
/// `Q(z)`, the rate bound `c(y, u) >= 1` and the input rate `K(u)`.
pub trait GrowthCertificate: Send + Sync {
    fn value(&self, z: &[f64]) -> f64;
    /// `ln W(z)`, finite where `W` itself overflows.
    fn log_value(&self, z: &[f64]) -> f64 {
        self.value(z).ln()
    }
    fn gradient(&self, z: &[f64]) -> Vec<f64>;
    fn weighting(&self, z: &[f64]) -> DMatrix<f64>;
    fn rate_bound(&self, y: &[f64], u: &[f64]) -> f64;
    fn input_rate(&self, u: &[f64]) -> f64;
}

/// Chart and growth data of the open-set design, with activation threshold
/// `a > r_growth`, fraction `eps` and the bump over `[a, a + 1]`.
#[derive(Clone)]
pub struct OpenSetChart {
    pub chart: Arc<dyn Chart>,
    pub growth: Arc<dyn GrowthCertificate>,
    pub r_growth: f64,
    pub activation: f64,
    pub eps: f64,
    pub bump: BumpFunction,
}

impl fmt::Debug for OpenSetChart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OpenSetChart")
            .field("r_growth", &self.r_growth)
            .field("activation", &self.activation)
            .field("eps", &self.eps)
            .field("bump", &self.bump)
            .finish_non_exhaustive()
    }
}

impl OpenSetChart {
    pub fn new(
        chart: Arc<dyn Chart>,
        growth: Arc<dyn GrowthCertificate>,
        r_growth: f64,
        a: f64,
        eps: f64,
    ) -> Result<Self, OpenSetError> {
        if !(a > r_growth && r_growth >= 0.0) {
            return Err(OpenSetError::InvalidArgument(format!(
                "need a > R >= 0, got a = {a}, R = {r_growth}"
            )));
        }
        if !(eps > 0.0 && eps < 1.0) {
            return Err(OpenSetError::InvalidArgument(format!(
                "eps must lie in (0, 1), got {eps}"
            )));
        }
        Ok(Self {
            chart,
            growth,
            r_growth,
            activation: a,
            eps,
            bump: BumpFunction { lo: a, hi: a + 1.0 },
        })
    }
}

/// Plant on `A` (original and chart coordinates), candidate observer and
/// the open-set design data.
#[derive(Clone)]
pub struct OpenSetObserver {
    /// `F`, `H` on `A`.
    pub plant: Arc<dyn SystemModel>,
    /// `f`, `h` in chart coordinates.
    pub pullback: Arc<dyn SystemModel>,
    pub design: OpenSetChart,
    /// Candidate injection `k(Z, y, u)` in original coordinates.
    pub candidate: Arc<dyn Injection>,
    pub p_matrix: DMatrix<f64>,
    pub mu: f64,
    /// Overflow-free production/loss form of the joint corrected system,
    /// required by [`OpenSetScheme::PositiveLog`].
    pub positive_split: Option<Arc<dyn PositiveObserverSplit>>,
}

/// Production/loss form of plant and corrected observer on the positive
/// orthant, evaluated at log coordinates `[x, z]`.
pub trait PositiveObserverSplit: Send + Sync {
    /// The split of `[X', Z']` and the value of `lambda`.
    fn split(&self, state: &[f64], u: &[f64]) -> Result<(PositiveSplit, f64), OpenSetError>;
}

impl fmt::Debug for OpenSetObserver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OpenSetObserver")
            .field("design", &self.design)
            .field("p_matrix", &self.p_matrix)
            .field("mu", &self.mu)
            .field("positive_split", &self.positive_split.is_some())
            .finish_non_exhaustive()
    }
}

impl OpenSetObserver {
    pub fn bilinear(&self, a: &[f64], b: &[f64]) -> f64 {
        quadratic_form(&self.p_matrix, a, b)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mat_vec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)] * v[j]).sum())
        .collect()
}

fn jacobian_apply(chart: &dyn Chart, z: &[f64], v: &[f64]) -> Vec<f64> {
    match chart.diagonal_jacobian(z) {
        Some(d) => d.iter().zip(v).map(|(a, b)| a * b).collect(),
        None => mat_vec(&chart.jacobian(z), v),
    }
}

/// Solves `DPhi(z) w = v`.
pub fn solve_jacobian(chart: &dyn Chart, z: &[f64], v: &[f64]) -> Result<Vec<f64>, OpenSetError> {
    let singular = || OpenSetError::SingularJacobian { point: z.to_vec() };
    if let Some(d) = chart.diagonal_jacobian(z) {
        if d.iter().any(|x| !(x.abs() > 0.0) || !x.is_finite()) {
            return Err(singular());
        }
        return Ok(v.iter().zip(&d).map(|(a, b)| a / b).collect());
    }
    let j = chart.jacobian(z);
    let sol = j
        .lu()
        .solve(&DVector::from_column_slice(v))
        .ok_or_else(singular)?;
    if sol.iter().any(|x| !x.is_finite()) {
        return Err(singular());
    }
    Ok(sol.iter().copied().collect())
}

/// `DPhi(z)^{-1} k(Phi(z), y, u)`.
pub fn pullback_k(
    chart: &dyn Chart,
    k: &dyn Injection,
    z: &[f64],
    y: &[f64],
    u: &[f64],
) -> Result<Vec<f64>, OpenSetError> {
    let kz = k.eval(&chart.to_open(z), y, u);
    solve_jacobian(chart, z, &kz)
}

/// `grad W Q grad W'`.
pub fn lambda_denominator(design: &OpenSetChart, z: &[f64]) -> f64 {
    let g = design.growth.gradient(z);
    quadratic_form(&design.growth.weighting(z), &g, &g)
}

/// Growth-limiting gain: positive only where `p(W) grad W ktilde > c W`.
pub fn lambda_gain(
    design: &OpenSetChart,
    z: &[f64],
    y: &[f64],
    u: &[f64],
    ktilde: &[f64],
) -> Result<f64, OpenSetError> {
    let w = design.growth.value(z);
    let grad = design.growth.gradient(z);
    let numerator = design.bump.eval(w) * dot(&grad, ktilde) - design.growth.rate_bound(y, u) * w;
    if numerator <= 0.0 {
        return Ok(0.0);
    }
    let denominator = quadratic_form(&design.growth.weighting(z), &grad, &grad);
    if denominator <= 1e-14 {
        return Err(OpenSetError::DegenerateDenominator {
            point: z.to_vec(),
            denominator,
        });
    }
    Ok(numerator / denominator)
}

/// `Q(z) grad W(z)'`.
fn correction_direction(design: &OpenSetChart, z: &[f64]) -> Vec<f64> {
    mat_vec(&design.growth.weighting(z), &design.growth.gradient(z))
}

/// Corrected observer field in chart coordinates,
/// `ktilde - lambda Q grad W'`, together with `lambda`.
pub fn chart_rhs(
    obs: &OpenSetObserver,
    z: &[f64],
    y: &[f64],
    u: &[f64],
) -> Result<(Vec<f64>, f64), OpenSetError> {
    let design = &obs.design;
    let kt = pullback_k(design.chart.as_ref(), obs.candidate.as_ref(), z, y, u)?;
    let lambda = lambda_gain(design, z, y, u, &kt)?;
    if lambda == 0.0 {
        return Ok((kt, 0.0));
    }
    let dir = correction_direction(design, z);
    Ok((
        kt.iter().zip(&dir).map(|(k, d)| k - lambda * d).collect(),
        lambda,
    ))
}

/// Corrected observer field in original coordinates,
/// `k(Z, y, u) - lambda DPhi Q grad W'` evaluated at `z = Phi^{-1}(Z)`.
pub fn observer_g_rhs(
    obs: &OpenSetObserver,
    big_z: &[f64],
    y: &[f64],
    u: &[f64],
) -> Result<Vec<f64>, OpenSetError> {
    let chart = obs.design.chart.as_ref();
    if !chart.contains(big_z) {
        return Err(OpenSetError::DomainViolation {
            t: f64::NAN,
            state: big_z.to_vec(),
        });
    }
    let z = chart.from_open(big_z);
    let k = obs.candidate.eval(big_z, y, u);
    let kt = solve_jacobian(chart, &z, &k)?;
    let lambda = lambda_gain(&obs.design, &z, y, u, &kt)?;
    if lambda == 0.0 {
        return Ok(k);
    }
    let corr = jacobian_apply(chart, &z, &correction_direction(&obs.design, &z));
    Ok(k.iter().zip(&corr).map(|(a, c)| a - lambda * c).collect())
}

/// Quantities defining the side condition of the growth inequality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SideCondition {
    /// `grad W Q DPhi(z)' P (Phi(z) - Phi(x))`.
    pub cross: f64,
    /// `grad W Q grad W'`.
    pub denominator: f64,
}

pub fn side_condition(obs: &OpenSetObserver, z: &[f64], x: &[f64]) -> SideCondition {
    let design = &obs.design;
    let chart = design.chart.as_ref();
    let qg = correction_direction(design, z);
    let dq = jacobian_apply(chart, z, &qg);
    let big_z = chart.to_open(z);
    let big_x = chart.to_open(x);
    let diff: Vec<f64> = big_z.iter().zip(&big_x).map(|(a, b)| a - b).collect();
    SideCondition {
        cross: obs.bilinear(&dq, &diff),
        denominator: dot(&design.growth.gradient(z), &qg),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpenSetSlack {
    pub slack: f64,
    pub degenerate: bool,
}

/// Slack of the growth inequality at `(z, x, u)` with `y = h(x)`; on the
/// degenerate set `grad W Q grad W' = 0` the strict bound
/// `grad W ktilde < c W` is tested instead.
pub fn open_set_slack(
    obs: &OpenSetObserver,
    z: &[f64],
    x: &[f64],
    u: &[f64],
) -> Result<OpenSetSlack, OpenSetError> {
    let design = &obs.design;
    let chart = design.chart.as_ref();
    let y = obs.pullback.h(x);
    let kt = pullback_k(chart, obs.candidate.as_ref(), z, &y, u)?;
    let w = design.growth.value(z);
    let grad = design.growth.gradient(z);
    let c = design.growth.rate_bound(&y, u);
    let drift = dot(&grad, &kt);
    let side = side_condition(obs, z, x);
    if side.denominator <= DEGENERATE_TOL {
        return Ok(OpenSetSlack {
            slack: c * w - drift,
            degenerate: true,
        });
    }
    let big_z = chart.to_open(z);
    let big_x = chart.to_open(x);
    let diff: Vec<f64> = big_z.iter().zip(&big_x).map(|(a, b)| a - b).collect();
    let dz = jacobian_apply(chart, z, &kt);
    let dx = jacobian_apply(chart, x, &obs.pullback.f(x, u));
    let rate: Vec<f64> = dz.iter().zip(&dx).map(|(a, b)| a - b).collect();
    let contraction = obs.bilinear(&diff, &rate);
    Ok(OpenSetSlack {
        slack: c * w + (1.0 - design.eps) * side.denominator * contraction / side.cross - drift,
        degenerate: false,
    })
}

/// `(Phi(z) - Phi(x))' P (DPhi(z) khat - DPhi(x) f(x, u)) + mu eps |Phi(z) - Phi(x)|^2`
/// for the corrected field `khat`; non-positive when the corrected observer
/// contracts at rate `mu eps`.
pub fn corrected_contraction(
    obs: &OpenSetObserver,
    z: &[f64],
    x: &[f64],
    u: &[f64],
) -> Result<f64, OpenSetError> {
    let chart = obs.design.chart.as_ref();
    let y = obs.pullback.h(x);
    let (kh, _) = chart_rhs(obs, z, &y, u)?;
    let big_z = chart.to_open(z);
    let big_x = chart.to_open(x);
    let diff: Vec<f64> = big_z.iter().zip(&big_x).map(|(a, b)| a - b).collect();
    let dz = jacobian_apply(chart, z, &kh);
    let dx = jacobian_apply(chart, x, &obs.pullback.f(x, u));
    let rate: Vec<f64> = dz.iter().zip(&dx).map(|(a, b)| a - b).collect();
    Ok(obs.bilinear(&diff, &rate) + obs.mu * obs.design.eps * dot(&diff, &diff))
}

// ---------------------------------------------------------------------------
// Chemostat

/// Candidate observer `(-(u1 + b) Z1 + y, u1 (u2 - Z2) - K y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChemostatCandidate {
    pub params: ChemostatParams,
}

impl Injection for ChemostatCandidate {
    fn eval(&self, big_z: &[f64], y: &[f64], u: &[f64]) -> Vec<f64> {
        let p = &self.params;
        vec![
            -(u[0] + p.mortality) * big_z[0] + y[0],
            u[0] * (u[1] - big_z[1]) - p.yield_coef * y[0],
        ]
    }
}

/// `W = e^{z1} + 3 e^{-z1} + e^{2 z1} + e^{z2} + e^{-z2}` with
/// `Q = diag(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChemostatGrowth {
    pub params: ChemostatParams,
    pub p_shift: f64,
}

pub fn chemostat_w(z: &[f64]) -> f64 {
    z[0].exp() + 3.0 * (-z[0]).exp() + (2.0 * z[0]).exp() + z[1].exp() + (-z[1]).exp()
}

pub fn chemostat_log_w(z: &[f64]) -> f64 {
    let terms = [z[0], 3f64.ln() - z[0], 2.0 * z[0], z[1], -z[1]];
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

pub fn chemostat_w_gradient(z: &[f64]) -> Vec<f64> {
    vec![
        z[0].exp() - 3.0 * (-z[0]).exp() + 2.0 * (2.0 * z[0]).exp(),
        z[1].exp() - (-z[1]).exp(),
    ]
}

impl ChemostatGrowth {
    fn slope_term(&self) -> f64 {
        let p = &self.params;
        (p.yield_coef * p.gamma_slope / (2.0 * p.theta)).powi(2)
    }
}

impl GrowthCertificate for ChemostatGrowth {
    fn value(&self, z: &[f64]) -> f64 {
        chemostat_w(z)
    }
    fn log_value(&self, z: &[f64]) -> f64 {
        chemostat_log_w(z)
    }
    fn gradient(&self, z: &[f64]) -> Vec<f64> {
        chemostat_w_gradient(z)
    }
    fn weighting(&self, _z: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0])
    }
    fn rate_bound(&self, y: &[f64], u: &[f64]) -> f64 {
        let p = &self.params;
        let y = y[0];
        let base = (1.5 * y)
            .max(u[0] + p.mortality)
            .max(u[0] + 0.5 * u[0] * u[1])
            .max(self.slope_term());
        base + p.yield_coef * (2.0 * self.p_shift).exp() / 4.0 * y + 1.0
    }
    fn input_rate(&self, u: &[f64]) -> f64 {
        let p = &self.params;
        let net = p.mu_max - p.theta - p.mortality;
        1f64.max(net)
            .max(2.0 * net + self.slope_term())
            .max(u[0] + p.mortality)
            .max(0.5 * u[0] * u[1] + u[0])
    }
}

/// Whether `K mu(e^{-p}) <= 4 theta (1 - eps)(1 - e^{-2p})` and
/// `-p <= ln S*`.
pub fn chemostat_shift_admissible(params: &ChemostatParams, eps: f64, p: f64) -> bool {
    let lhs = params.yield_coef * params.growth((-p).exp());
    let rhs = 4.0 * params.theta * (1.0 - eps) * (1.0 - (-2.0 * p).exp());
    lhs <= rhs && -p <= params.s_star.ln()
}

pub const SHIFT_GRID_LIMIT: f64 = 100.0;

/// Smallest `p` on the grid `0.1, 0.2, ..., 100` satisfying
/// [`chemostat_shift_admissible`].
pub fn chemostat_select_p(params: &ChemostatParams, eps: f64) -> Result<f64, OpenSetError> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(OpenSetError::InvalidArgument(format!(
            "eps must lie in (0, 1), got {eps}"
        )));
    }
    (1..=1000)
        .map(|k| k as f64 / 10.0)
        .find(|&p| chemostat_shift_admissible(params, eps, p))
        .ok_or(OpenSetError::NotFound {
            limit: SHIFT_GRID_LIMIT,
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChemostatObserverParams {
    pub p_shift: f64,
    pub eps: f64,
    pub activation: f64,
}

pub const CHEMOSTAT_DEFAULT_EPS: f64 = 0.5;
pub const CHEMOSTAT_DEFAULT_A: f64 = 8.0;

impl ChemostatObserverParams {
    pub fn select(params: &ChemostatParams, eps: f64, a: f64) -> Result<Self, OpenSetError> {
        Ok(Self {
            p_shift: chemostat_select_p(params, eps)?,
            eps,
            activation: a,
        })
    }
}

/// Chemostat observer with `P = I/2`, `mu = theta`, exponential chart and
/// growth certificate `W`.
pub fn chemostat_observer(
    params: &ChemostatParams,
    obs_params: &ChemostatObserverParams,
) -> Result<OpenSetObserver, OpenSetError> {
    params.validate()?;
    let p_matrix = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.5]);
    spd_bounds(&p_matrix)?;
    let design = OpenSetChart::new(
        Arc::new(ExponentialChart { dim: 2 }),
        Arc::new(ChemostatGrowth {
            params: *params,
            p_shift: obs_params.p_shift,
        }),
        0.0,
        obs_params.activation,
        obs_params.eps,
    )?;
    let split = ChemostatSplit {
        growth: ChemostatGrowth {
            params: *params,
            p_shift: obs_params.p_shift,
        },
        bump: design.bump,
    };
    Ok(OpenSetObserver {
        plant: Arc::new(Chemostat { params: *params }),
        pullback: Arc::new(ChemostatPullback { params: *params }),
        design,
        candidate: Arc::new(ChemostatCandidate { params: *params }),
        p_matrix,
        mu: params.theta,
        positive_split: Some(Arc::new(split)),
    })
}

/// Chemostat plant and corrected observer in production/loss form. The
/// correction is evaluated after scaling by powers of `Z2`, so it stays
/// finite however small `Z2` gets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChemostatSplit {
    pub growth: ChemostatGrowth,
    pub bump: BumpFunction,
}

/// Growth-limiting gain of the chemostat observer together with the log-rate
/// `(c W - p dW/dz1 ktilde1) / (dW/dz2)` it induces on `z2` and the bump
/// value `p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChemostatCorrection {
    pub lambda: f64,
    pub log_rate: f64,
    pub activation: f64,
}

impl ChemostatSplit {
    pub fn correction(
        &self,
        z: &[f64],
        y: f64,
        u: &[f64],
    ) -> Result<ChemostatCorrection, OpenSetError> {
        let params = &self.growth.params;
        let activation = self.bump.eval(chemostat_log_w(z).exp());
        let c = self.growth.rate_bound(&[y], u);
        let g1 = z[0].exp() - 3.0 * (-z[0]).exp() + 2.0 * (2.0 * z[0]).exp();
        let k1 = -(u[0] + params.mortality) + y * (-z[0]).exp();
        let w1 = z[0].exp() + 3.0 * (-z[0]).exp() + (2.0 * z[0]).exp();
        // Numerator and denominator of lambda, and the pieces of the log-rate,
        // multiplied by e^{2 z2} (for z2 < 0) so that nothing overflows.
        let (num, den, rate_num, rate_den) = if z[1] < 0.0 {
            let s = z[1].exp();
            let w_s = w1 * s + s * s + 1.0;
            let k2_s = u[0] * (u[1] - s) - params.yield_coef * y;
            let d2_s = s * s - 1.0;
            (
                activation * (g1 * k1 * s * s + d2_s * k2_s) - c * w_s * s,
                d2_s * d2_s,
                c * w_s - activation * g1 * k1 * s,
                d2_s,
            )
        } else {
            let w = w1 + z[1].exp() + (-z[1]).exp();
            let k2 = u[0] * (u[1] * (-z[1]).exp() - 1.0) - params.yield_coef * y * (-z[1]).exp();
            let d2 = z[1].exp() - (-z[1]).exp();
            (
                activation * (g1 * k1 + d2 * k2) - c * w,
                d2 * d2,
                c * w - activation * g1 * k1,
                d2,
            )
        };
        if !(num > 0.0) {
            return Ok(ChemostatCorrection {
                lambda: 0.0,
                log_rate: 0.0,
                activation,
            });
        }
        let scale = if z[1] < 0.0 { (-2.0 * z[1]).exp() } else { 1.0 };
        if den * scale <= 1e-14 {
            return Err(OpenSetError::DegenerateDenominator {
                point: z.to_vec(),
                denominator: den * scale,
            });
        }
        Ok(ChemostatCorrection {
            lambda: num / den,
            log_rate: rate_num / rate_den,
            activation,
        })
    }
}

impl PositiveObserverSplit for ChemostatSplit {
    fn split(&self, state: &[f64], u: &[f64]) -> Result<(PositiveSplit, f64), OpenSetError> {
        let params = &self.growth.params;
        let (x, z) = state.split_at(2);
        let y = params.growth(x[1].exp()) * x[0].exp();
        let dilution = u[0];
        let mut gain = vec![y, dilution * u[1], y, dilution * u[1]];
        let mut rate = vec![
            dilution + params.mortality,
            dilution,
            dilution + params.mortality,
            dilution,
        ];
        let mut loss = vec![0.0, params.yield_coef * y, 0.0, params.yield_coef * y];
        let corr = self.correction(z, y, u)?;
        if corr.lambda > 0.0 {
            let keep = 1.0 - corr.activation;
            gain[3] = keep * dilution * u[1] + corr.log_rate.max(0.0) * z[1].exp();
            rate[3] = keep * dilution + (-corr.log_rate).max(0.0);
            loss[3] = keep * params.yield_coef * y;
        }
        Ok((PositiveSplit { gain, rate, loss }, corr.lambda))
    }
}

/// Pulled-back candidate written out for the exponential chart.
pub fn chemostat_ktilde_closed(z: &[f64], y: f64, u: &[f64], params: &ChemostatParams) -> [f64; 2] {
    [
        -(u[0] + params.mortality) + y * (-z[0]).exp(),
        u[0] * (u[1] * (-z[1]).exp() - 1.0) - params.yield_coef * y * (-z[1]).exp(),
    ]
}

/// Corrected chemostat observer in original coordinates given `lambda`.
pub fn chemostat_observer_closed(
    big_z: &[f64],
    y: f64,
    u: &[f64],
    lambda: f64,
    params: &ChemostatParams,
) -> [f64; 2] {
    [
        -(u[0] + params.mortality) * big_z[0] + y,
        u[0] * (u[1] - big_z[1]) - params.yield_coef * y + lambda * (1.0 - big_z[1] * big_z[1]),
    ]
}

// ---------------------------------------------------------------------------
// Runs

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpenSetVariant {
    /// Corrected observer.
    Corrected,
    /// Uncorrected candidate, integrated in original coordinates.
    Candidate,
}

/// How the corrected observer is integrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OpenSetScheme {
    /// Exponential midpoint rule in log coordinates on the production/loss
    /// split; uses the step of the supplied control. Needs
    /// [`OpenSetObserver::positive_split`].
    #[default]
    PositiveLog,
    /// The supplied step control applied to the chart-coordinate field.
    Chart,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GrowthBoundCheck {
    pub holds: bool,
    /// Largest `ln W(z(t)) - ln W(z(0)) - int_0^t beta`.
    pub worst_log_excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpenSetReport {
    pub variant: OpenSetVariant,
    pub scheme: Option<OpenSetScheme>,
    pub initial_error: f64,
    pub final_error: f64,
    pub fit: Option<DecayFit>,
    /// `max_t |Z(t) - X(t)| e^{sigma t}` with the fitted rate.
    pub prefactor: Option<f64>,
    /// Smallest observer coordinate over the run. Values below the smallest
    /// positive double are reported as 0; see `min_log_coordinate`.
    pub positivity_margin: f64,
    /// Smallest chart coordinate of the observer (corrected runs only).
    pub min_log_coordinate: Option<f64>,
    pub plant_margin: f64,
    pub positivity_violated: bool,
    pub first_violation_time: Option<f64>,
    /// Largest increase of `(Z - X)' P (Z - X)` between consecutive samples,
    /// relative to its initial value.
    pub weighted_error_increase: f64,
    pub max_lambda: f64,
    pub growth_bound: Option<GrowthBoundCheck>,
}

/// Joint run in both coordinate systems. Chart coordinates are NaN where the
/// candidate state has left the open set; `lambda` is 0 for the candidate.
#[derive(Debug, Clone)]
pub struct OpenSetRun {
    pub times: Vec<f64>,
    pub big_x: Vec<Vec<f64>>,
    pub big_z: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub inputs: Vec<Vec<f64>>,
    pub report: OpenSetReport,
}

impl OpenSetRun {
    pub fn error_norm(&self, i: usize) -> f64 {
        self.big_z[i]
            .iter()
            .zip(&self.big_x[i])
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

pub const FORWARD_COMPLETENESS_RTOL: f64 = 1e-6;
const GROWTH_PROBE_POINTS: usize = 64;

/// Fixed points with `W <= a + 1` on which the sampled bound of `W'/W`
/// below the activation threshold is taken.
fn growth_probe_points(design: &OpenSetChart) -> Vec<Vec<f64>> {
    let dim = design.chart.dim();
    let ceiling = design.activation + 1.0;
    let per_axis = 41usize;
    let span = 6.0;
    let total = per_axis.pow(dim as u32);
    let mut pts = Vec::new();
    for idx in 0..total {
        let mut rem = idx;
        let z: Vec<f64> = (0..dim)
            .map(|_| {
                let k = rem % per_axis;
                rem /= per_axis;
                -span + 2.0 * span * k as f64 / (per_axis - 1) as f64
            })
            .collect();
        if design.growth.value(&z) <= ceiling {
            pts.push(z);
        }
    }
    if pts.len() > GROWTH_PROBE_POINTS {
        let stride = pts.len() as f64 / GROWTH_PROBE_POINTS as f64;
        pts = (0..GROWTH_PROBE_POINTS)
            .map(|i| pts[(i as f64 * stride) as usize].clone())
            .collect();
    }
    pts
}

fn growth_ratio(
    obs: &OpenSetObserver,
    z: &[f64],
    y: &[f64],
    u: &[f64],
) -> Result<f64, OpenSetError> {
    let (rhs, _) = chart_rhs(obs, z, y, u)?;
    Ok(dot(&obs.design.growth.gradient(z), &rhs) / obs.design.growth.value(z))
}

/// Checks `W(z(t)) <= exp(int_0^t beta) W(z(0)) (1 + rtol)` along a
/// corrected run, where `beta(t)` is the larger of `c(y(t), u(t))` and the
/// sampled supremum of `W'/W` over `W <= a + 1`.
pub fn check_growth_bound(
    obs: &OpenSetObserver,
    times: &[f64],
    x: &[Vec<f64>],
    z: &[Vec<f64>],
    inputs: &[Vec<f64>],
) -> Result<GrowthBoundCheck, OpenSetError> {
    let probes = growth_probe_points(&obs.design);
    let ln_ceiling = (obs.design.activation + 1.0).ln();
    let mut beta = Vec::with_capacity(times.len());
    for i in 0..times.len() {
        let y = obs.pullback.h(&x[i]);
        let u = &inputs[i];
        let mut b = obs.design.growth.rate_bound(&y, u).max(1.0);
        for p in &probes {
            b = b.max(growth_ratio(obs, p, &y, u)?);
        }
        if obs.design.growth.log_value(&z[i]) <= ln_ceiling {
            b = b.max(growth_ratio(obs, &z[i], &y, u)?);
        }
        beta.push(b);
    }
    let ln_w0 = obs.design.growth.log_value(&z[0]);
    let mut integral = 0.0;
    let mut worst = f64::NEG_INFINITY;
    for i in 0..times.len() {
        if i > 0 {
            integral += 0.5 * (beta[i] + beta[i - 1]) * (times[i] - times[i - 1]);
        }
        worst = worst.max(obs.design.growth.log_value(&z[i]) - ln_w0 - integral);
    }
    Ok(GrowthBoundCheck {
        holds: worst <= FORWARD_COMPLETENESS_RTOL.ln_1p(),
        worst_log_excess: worst,
    })
}

/// Fraction of the initial error below which samples leave the decay fit.
pub const FIT_FLOOR_RATIO: f64 = 1e-10;

struct RawRun {
    times: Vec<f64>,
    big_x: Vec<Vec<f64>>,
    big_z: Vec<Vec<f64>>,
    x: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    lambda: Vec<f64>,
}

fn run_corrected_chart(
    obs: &OpenSetObserver,
    s0: Vec<f64>,
    horizon: f64,
    input: &InputSignal,
    ctrl: &StepControl,
) -> Result<RawRun, OpenSetError> {
    let chart = obs.design.chart.as_ref();
    let n = chart.dim();
    let rhs = |t: f64, s: &[f64]| {
        let u = input.eval(t);
        let (xs, zs) = s.split_at(n);
        let mut d = obs.pullback.f(xs, &u);
        let y = obs.pullback.h(xs);
        match chart_rhs(obs, zs, &y, &u) {
            Ok((v, _)) => d.extend(v),
            Err(e) => {
                debug!("observer field failed at t = {t}: {e}");
                d.extend(std::iter::repeat_n(f64::NAN, n));
            }
        }
        d
    };
    let traj = integrate(rhs, &s0, (0.0, horizon), ctrl)?;
    let mut lambda = Vec::with_capacity(traj.len());
    for (t, s) in traj.times.iter().zip(&traj.states) {
        let (xv, zv) = s.split_at(n);
        let u = input.eval(*t);
        lambda.push(chart_rhs(obs, zv, &obs.pullback.h(xv), &u)?.1);
    }
    Ok(split_states(chart, traj.times, traj.states, lambda))
}

fn run_corrected_positive(
    obs: &OpenSetObserver,
    s0: Vec<f64>,
    horizon: f64,
    input: &InputSignal,
    dt: f64,
) -> Result<RawRun, OpenSetError> {
    let splitter = obs.positive_split.as_ref().ok_or_else(|| {
        OpenSetError::InvalidArgument("observer has no production/loss split".into())
    })?;
    let n = obs.design.chart.dim();
    let failure = std::cell::RefCell::new(None);
    let split = |t: f64, s: &[f64]| match splitter.split(s, &input.eval(t)) {
        Ok((sp, _)) => sp,
        Err(e) => {
            failure.borrow_mut().get_or_insert(e);
            PositiveSplit {
                gain: vec![f64::NAN; 2 * n],
                rate: vec![f64::NAN; 2 * n],
                loss: vec![f64::NAN; 2 * n],
            }
        }
    };
    let traj = match integrate_positive(split, &s0, (0.0, horizon), dt) {
        Ok(t) => t,
        Err(e) => return Err(failure.into_inner().unwrap_or(OpenSetError::Numerics(e))),
    };
    let mut lambda = Vec::with_capacity(traj.len());
    for (t, s) in traj.times.iter().zip(&traj.states) {
        lambda.push(splitter.split(s, &input.eval(*t))?.1);
    }
    Ok(split_states(
        obs.design.chart.as_ref(),
        traj.times,
        traj.states,
        lambda,
    ))
}

fn split_states(
    chart: &dyn Chart,
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
    lambda: Vec<f64>,
) -> RawRun {
    let n = chart.dim();
    let mut raw = RawRun {
        times,
        big_x: Vec::with_capacity(states.len()),
        big_z: Vec::with_capacity(states.len()),
        x: Vec::with_capacity(states.len()),
        z: Vec::with_capacity(states.len()),
        lambda,
    };
    for s in states {
        let (xv, zv) = s.split_at(n);
        raw.big_x.push(chart.to_open(xv));
        raw.big_z.push(chart.to_open(zv));
        raw.x.push(xv.to_vec());
        raw.z.push(zv.to_vec());
    }
    raw
}

fn run_candidate(
    obs: &OpenSetObserver,
    big_x0: &[f64],
    big_z0: &[f64],
    horizon: f64,
    input: &InputSignal,
    ctrl: &StepControl,
) -> Result<RawRun, OpenSetError> {
    let chart = obs.design.chart.as_ref();
    let n = chart.dim();
    let mut s0 = big_x0.to_vec();
    s0.extend_from_slice(big_z0);
    let rhs = |t: f64, s: &[f64]| {
        let u = input.eval(t);
        let (bx, bz) = s.split_at(n);
        let mut d = obs.plant.f(bx, &u);
        d.extend(obs.candidate.eval(bz, &obs.plant.h(bx), &u));
        d
    };
    let traj = integrate(rhs, &s0, (0.0, horizon), ctrl)?;
    let len = traj.len();
    let mut raw = RawRun {
        times: traj.times,
        big_x: Vec::with_capacity(len),
        big_z: Vec::with_capacity(len),
        x: Vec::with_capacity(len),
        z: Vec::with_capacity(len),
        lambda: vec![0.0; len],
    };
    for s in &traj.states {
        let (bx, bz) = s.split_at(n);
        raw.big_x.push(bx.to_vec());
        raw.big_z.push(bz.to_vec());
        raw.x.push(chart.from_open(bx));
        raw.z.push(if chart.contains(bz) {
            chart.from_open(bz)
        } else {
            vec![f64::NAN; n]
        });
    }
    Ok(raw)
}

/// Runs plant and observer from `(X0, Z0)` in `A`. The corrected observer is
/// integrated in chart coordinates with `scheme`; the candidate in original
/// coordinates with `ctrl`.
#[allow(clippy::too_many_arguments)]
pub fn run_openset(
    obs: &OpenSetObserver,
    big_x0: &[f64],
    big_z0: &[f64],
    horizon: f64,
    input: &InputSignal,
    ctrl: &StepControl,
    variant: OpenSetVariant,
    scheme: OpenSetScheme,
) -> Result<OpenSetRun, OpenSetError> {
    let chart = obs.design.chart.as_ref();
    let n = chart.dim();
    if big_x0.len() != n || big_z0.len() != n {
        return Err(OpenSetError::InvalidArgument(format!(
            "initial states must have dimension {n}"
        )));
    }
    for s in [big_x0, big_z0] {
        if !chart.contains(s) {
            return Err(OpenSetError::DomainViolation {
                t: 0.0,
                state: s.to_vec(),
            });
        }
    }
    if !(horizon > 0.0) {
        return Err(OpenSetError::InvalidArgument(
            "horizon must be positive".into(),
        ));
    }

    let raw = match variant {
        OpenSetVariant::Corrected => {
            let mut s0 = chart.from_open(big_x0);
            s0.extend(chart.from_open(big_z0));
            match scheme {
                OpenSetScheme::Chart => run_corrected_chart(obs, s0, horizon, input, ctrl)?,
                OpenSetScheme::PositiveLog => {
                    run_corrected_positive(obs, s0, horizon, input, ctrl.dt)?
                }
            }
        }
        OpenSetVariant::Candidate => run_candidate(obs, big_x0, big_z0, horizon, input, ctrl)?,
    };
    let RawRun {
        times,
        big_x,
        big_z,
        x,
        z,
        lambda,
    } = raw;
    let inputs: Vec<Vec<f64>> = times.iter().map(|t| input.eval(*t)).collect();

    let errors: Vec<f64> = big_z
        .iter()
        .zip(&big_x)
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let floor = FIT_FLOOR_RATIO * errors[0];
    let (ft, fl): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(&errors)
        .filter(|(_, e)| **e > floor && e.is_finite())
        .map(|(t, e)| (*t, e.ln()))
        .unzip();
    let fit = fit_log_linear(&ft, &fl).ok();
    let prefactor = fit.map(|f| {
        times
            .iter()
            .zip(&errors)
            .map(|(t, e)| e * (f.sigma * t).exp())
            .fold(0.0, f64::max)
    });

    let min_coord = |v: &[Vec<f64>]| {
        v.iter()
            .flat_map(|s| s.iter().copied())
            .fold(f64::INFINITY, f64::min)
    };
    let first_violation_time = match variant {
        OpenSetVariant::Corrected => times
            .iter()
            .zip(&z)
            .find(|(_, s)| !s.iter().all(|v| v.is_finite()))
            .map(|(t, _)| *t),
        OpenSetVariant::Candidate => times
            .iter()
            .zip(&big_z)
            .find(|(_, s)| !chart.contains(s))
            .map(|(t, _)| *t),
    };

    let weighted: Vec<f64> = big_z
        .iter()
        .zip(&big_x)
        .map(|(a, b)| {
            let e: Vec<f64> = a.iter().zip(b).map(|(p, q)| p - q).collect();
            obs.bilinear(&e, &e)
        })
        .collect();
    let scale = weighted[0].max(f64::MIN_POSITIVE);
    let weighted_error_increase = weighted
        .windows(2)
        .map(|w| (w[1] - w[0]) / scale)
        .fold(0.0, f64::max);

    let (growth_bound, min_log_coordinate, scheme) = match variant {
        OpenSetVariant::Corrected => (
            Some(check_growth_bound(obs, &times, &x, &z, &inputs)?),
            Some(min_coord(&z)),
            Some(scheme),
        ),
        OpenSetVariant::Candidate => (None, None, None),
    };

    let report = OpenSetReport {
        variant,
        scheme,
        initial_error: errors[0],
        final_error: *errors.last().unwrap(),
        fit,
        prefactor,
        positivity_margin: min_coord(&big_z),
        min_log_coordinate,
        plant_margin: min_coord(&big_x),
        positivity_violated: first_violation_time.is_some(),
        first_violation_time,
        weighted_error_increase,
        max_lambda: lambda.iter().copied().fold(0.0, f64::max),
        growth_bound,
    };
    Ok(OpenSetRun {
        times,
        big_x,
        big_z,
        x,
        z,
        lambda,
        inputs,
        report,
    })
}

/// Searches increasing initial biomass levels for a plant start from which
/// the uncorrected candidate leaves the orthant while the corrected observer
/// stays inside it. Starts where the corrected run cannot be integrated are
/// skipped.
pub fn find_contrast_scenario(
    obs: &OpenSetObserver,
    big_z0: &[f64],
    substrate0: f64,
    horizon: f64,
    input: &InputSignal,
    ctrl: &StepControl,
    scheme: OpenSetScheme,
) -> Result<Option<Vec<f64>>, OpenSetError> {
    for k in 0..40 {
        let biomass = 0.1 * 1.5f64.powi(k);
        let x0 = vec![biomass, substrate0];
        let candidate = run_openset(
            obs,
            &x0,
            big_z0,
            horizon,
            input,
            ctrl,
            OpenSetVariant::Candidate,
            scheme,
        )?;
        if !candidate.report.positivity_violated {
            continue;
        }
        match run_openset(
            obs,
            &x0,
            big_z0,
            horizon,
            input,
            ctrl,
            OpenSetVariant::Corrected,
            scheme,
        ) {
            Ok(run) if !run.report.positivity_violated => return Ok(Some(x0)),
            Ok(_) | Err(OpenSetError::Numerics(_)) | Err(OpenSetError::DomainViolation { .. }) => {
                debug!("corrected run from biomass {biomass} not usable");
            }
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}

/// Initial states and input of a randomised chemostat run.
#[derive(Debug, Clone)]
pub struct ChemostatScenario {
    pub x0: Vec<f64>,
    pub z0: Vec<f64>,
    pub input: InputSignal,
}

pub const SCENARIO_STATE_BOX: (f64, f64) = (0.2, 3.0);

/// Plant and observer starts uniform in [`SCENARIO_STATE_BOX`] squared, and a
/// sinusoidal input with dilution in `[theta, 0.5]` and feed in `[0.5, 3]`.
pub fn random_chemostat_scenario<R: rand::Rng + ?Sized>(
    rng: &mut R,
    params: &ChemostatParams,
) -> Result<ChemostatScenario, OpenSetError> {
    let (lo, hi) = SCENARIO_STATE_BOX;
    let mut draw = || vec![rng.gen_range(lo..hi), rng.gen_range(lo..hi)];
    let x0 = draw();
    let z0 = draw();
    let plant = Chemostat { params: *params };
    let input = InputSignal::random_sinusoid(
        rng,
        &[(params.theta, 0.5f64.max(params.theta)), (0.5, 3.0)],
        plant.input_box(),
    )?;
    Ok(ChemostatScenario { x0, z0, input })
}
