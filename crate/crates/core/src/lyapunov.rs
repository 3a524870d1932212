//! Lyapunov certificates, bump functions, entry-time bounds and the
//! sampling-based falsification engine.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::observer_compact::CompactObserver;
use crate::observer_openset::{self, OpenSetObserver};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LyapunovError {
    #[error("no sample fell in the shell {lo} <= V <= {hi}")]
    EmptyShell { lo: f64, hi: f64 },
    #[error("rejection sampling accepted {accepted} of {attempts} draws")]
    RegionUnsatisfiable { accepted: usize, attempts: usize },
    #[error("non-finite slack at {point:?}")]
    NonFiniteSlack { point: Vec<f64> },
    #[error("invalid certificate: {0}")]
    InvalidCertificate(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("inequality {id} cannot be evaluated on this problem")]
    ProblemMismatch { id: InequalityId },
}

/// A function `V` together with its gradient and the dissipation rate `W`.
pub trait LyapunovFunction: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    fn dissipation(&self, x: &[f64]) -> f64;
}

/// `V = |x|^2 / 2`, `W = V^2 / 2`.
#[derive(Debug, Clone, Copy, Default)]
pub struct QuarticDissipation;

impl LyapunovFunction for QuarticDissipation {
    fn value(&self, x: &[f64]) -> f64 {
        0.5 * x.iter().map(|v| v * v).sum::<f64>()
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }
    fn dissipation(&self, x: &[f64]) -> f64 {
        let v = self.value(x);
        0.5 * v * v
    }
}

/// Lyapunov data with sublevel threshold `r` and shell constants
/// `r <= a < b`, `0 < c < 1`.
#[derive(Clone)]
pub struct LyapunovCertificate {
    pub function: Arc<dyn LyapunovFunction>,
    pub inner_level: f64,
    pub ramp_start: f64,
    pub ramp_end: f64,
    pub contraction: f64,
}

impl fmt::Debug for LyapunovCertificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LyapunovCertificate")
            .field("inner_level", &self.inner_level)
            .field("ramp_start", &self.ramp_start)
            .field("ramp_end", &self.ramp_end)
            .field("contraction", &self.contraction)
            .finish_non_exhaustive()
    }
}

impl LyapunovCertificate {
    pub fn new(
        function: Arc<dyn LyapunovFunction>,
        r: f64,
        a: f64,
        b: f64,
        c: f64,
    ) -> Result<Self, LyapunovError> {
        if !(r > 0.0 && r <= a && a < b && b.is_finite()) {
            return Err(LyapunovError::InvalidCertificate(format!(
                "need 0 < R <= a < b, got R = {r}, a = {a}, b = {b}"
            )));
        }
        if !(c > 0.0 && c < 1.0) {
            return Err(LyapunovError::InvalidCertificate(format!(
                "c must lie in (0, 1), got {c}"
            )));
        }
        Ok(Self {
            function,
            inner_level: r,
            ramp_start: a,
            ramp_end: b,
            contraction: c,
        })
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.function.value(x)
    }
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.function.gradient(x)
    }
    pub fn dissipation(&self, x: &[f64]) -> f64 {
        self.function.dissipation(x)
    }
    pub fn bump(&self) -> BumpFunction {
        BumpFunction {
            lo: self.ramp_start,
            hi: self.ramp_end,
        }
    }
}

/// Non-decreasing switch from 0 (at `lo` and below) to 1 (at `hi` and above).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BumpFunction {
    pub lo: f64,
    pub hi: f64,
}

impl BumpFunction {
    pub fn new(lo: f64, hi: f64) -> Result<Self, LyapunovError> {
        if !(lo < hi) {
            return Err(LyapunovError::InvalidArgument(format!(
                "bump needs lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn eval(&self, s: f64) -> f64 {
        bump(s, self)
    }
}

/// Cubic smoothstep over `[bf.lo, bf.hi]`.
pub fn bump(s: f64, bf: &BumpFunction) -> f64 {
    let t = ((s - bf.lo) / (bf.hi - bf.lo)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn sphere_point(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            return g.into_iter().map(|v| radius * v / n).collect();
        }
    }
}

fn min_on_sphere<F: Fn(&[f64]) -> f64>(
    value: &F,
    dim: usize,
    radius: f64,
    points: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    (0..points)
        .map(|_| value(&sphere_point(rng, dim, radius)))
        .fold(f64::INFINITY, f64::min)
}

/// Outcome of the radial-unboundedness probe. Heuristic evidence only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RadialProbe {
    pub min_on_r10: f64,
    pub min_on_r100: f64,
    pub threshold: f64,
    pub passed: bool,
}

/// Checks `V >= threshold` on 10^3 points of the spheres of radius 10 and 100
/// and that the minimum grows from the inner to the outer sphere.
pub fn radial_probe<F: Fn(&[f64]) -> f64>(value: F, dim: usize, threshold: f64) -> RadialProbe {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
    let min_on_r10 = min_on_sphere(&value, dim, 10.0, 1000, &mut rng);
    let min_on_r100 = min_on_sphere(&value, dim, 100.0, 1000, &mut rng);
    RadialProbe {
        min_on_r10,
        min_on_r100,
        threshold,
        passed: min_on_r10 >= threshold && min_on_r100 >= min_on_r10,
    }
}

/// Smallest radius `rho` (doubling from 1) such that `V > level` on 10^3
/// sampled points of the sphere `|x| = rho`. Used as the half-width of the box
/// enclosing `{V <= level}`.
pub fn sublevel_radius<F: Fn(&[f64]) -> f64>(
    value: F,
    dim: usize,
    level: f64,
) -> Result<f64, LyapunovError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0002);
    let mut rho = 1.0;
    for _ in 0..60 {
        if min_on_sphere(&value, dim, rho, 1000, &mut rng) > level {
            return Ok(rho);
        }
        rho *= 2.0;
    }
    Err(LyapunovError::InvalidCertificate(format!(
        "V does not exceed {level} on any probed sphere"
    )))
}

/// Entry-time bound `T = (V(x0) - level) / delta` together with the sampled
/// shell minimum `delta` of `W`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntryTime {
    pub t: f64,
    pub delta: f64,
    pub shell_samples: usize,
    pub box_radius: f64,
}

pub const MIN_GRID_BUDGET: usize = 1000;

/// Bound on the time needed to enter `{V <= R}`.
pub fn entry_time_bound(
    cert: &LyapunovCertificate,
    x0: &[f64],
    grid_budget: usize,
    seed: u64,
) -> Result<EntryTime, LyapunovError> {
    entry_time_to_level(cert, x0, cert.inner_level, grid_budget, seed)
}

/// Bound on the time needed to enter `{V <= level}` for a flow with
/// `V' <= -W` wherever `V >= level`.
pub fn entry_time_to_level(
    cert: &LyapunovCertificate,
    x0: &[f64],
    level: f64,
    grid_budget: usize,
    seed: u64,
) -> Result<EntryTime, LyapunovError> {
    if grid_budget < MIN_GRID_BUDGET {
        return Err(LyapunovError::InvalidArgument(format!(
            "grid_budget must be at least {MIN_GRID_BUDGET}, got {grid_budget}"
        )));
    }
    let v0 = cert.value(x0);
    if v0 <= level {
        return Ok(EntryTime {
            t: 0.0,
            delta: f64::NAN,
            shell_samples: 0,
            box_radius: 0.0,
        });
    }
    let dim = x0.len();
    let f = &cert.function;
    let rho = sublevel_radius(|x| f.value(x), dim, v0)?;
    let in_shell = |x: &[f64]| {
        let v = f.value(x);
        v >= level && v <= v0 && x.iter().all(|c| c.abs() <= rho)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shell: Vec<(f64, Vec<f64>)> = Vec::new();
    for _ in 0..grid_budget {
        let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-rho..=rho)).collect();
        if in_shell(&x) {
            shell.push((f.dissipation(&x), x));
        }
    }
    if shell.is_empty() {
        return Err(LyapunovError::EmptyShell { lo: level, hi: v0 });
    }
    shell.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n_polish = (shell.len() / 100).max(1);
    let polished = shell[..n_polish]
        .par_iter()
        .map(|(w, x)| polish_minimum(|p| f.dissipation(p), &in_shell, x.clone(), *w, rho))
        .reduce(|| f64::INFINITY, f64::min);
    let delta = polished.min(shell[0].0);
    if !(delta > 0.0) {
        return Err(LyapunovError::InvalidCertificate(format!(
            "W has non-positive shell minimum {delta}"
        )));
    }
    Ok(EntryTime {
        t: (v0 - level) / delta,
        delta,
        shell_samples: shell.len(),
        box_radius: rho,
    })
}

fn polish_minimum<W, S>(w: W, feasible: &S, mut x: Vec<f64>, mut best: f64, scale: f64) -> f64
where
    W: Fn(&[f64]) -> f64,
    S: Fn(&[f64]) -> bool,
{
    let mut step = 0.05 * scale;
    let floor = 1e-10 * scale;
    while step > floor {
        let mut improved = false;
        for i in 0..x.len() {
            for dir in [-1.0, 1.0] {
                let mut cand = x.clone();
                cand[i] += dir * step;
                if feasible(&cand) {
                    let val = w(&cand);
                    if val < best {
                        best = val;
                        x = cand;
                        improved = true;
                    }
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Certification engine

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InequalityId {
    H1,
    H2,
    #[serde(rename = "H3_sufficient")]
    H3Sufficient,
    P1,
    #[serde(rename = "OPEN_SET_39")]
    OpenSet39,
}

impl fmt::Display for InequalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InequalityId::H1 => "H1",
            InequalityId::H2 => "H2",
            InequalityId::H3Sufficient => "H3_sufficient",
            InequalityId::P1 => "P1",
            InequalityId::OpenSet39 => "OPEN_SET_39",
        })
    }
}

impl std::str::FromStr for InequalityId {
    type Err = LyapunovError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "H1" => Ok(Self::H1),
            "H2" => Ok(Self::H2),
            "H3_sufficient" => Ok(Self::H3Sufficient),
            "P1" => Ok(Self::P1),
            "OPEN_SET_39" => Ok(Self::OpenSet39),
            other => Err(LyapunovError::InvalidArgument(format!(
                "unknown inequality id {other}"
            ))),
        }
    }
}

/// Problem data an inequality is evaluated against.
#[derive(Clone, Copy)]
pub enum Problem<'a> {
    Compact(&'a CompactObserver),
    OpenSet(&'a OpenSetObserver),
}

/// Sampling region: a box over the concatenated sample vector plus Euclidean
/// norm bounds on index ranges. The membership predicates implied by the
/// inequality (e.g. `V(x) >= R`) are added by [`certify`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub boxes: Vec<(f64, f64)>,
    #[serde(default)]
    pub norm_bounds: Vec<(Range<usize>, f64)>,
}

impl Region {
    pub fn new(boxes: Vec<(f64, f64)>) -> Self {
        Self {
            boxes,
            norm_bounds: Vec::new(),
        }
    }

    pub fn with_norm_bound(mut self, range: Range<usize>, radius: f64) -> Self {
        self.norm_bounds.push((range, radius));
        self
    }

    fn contains(&self, p: &[f64]) -> bool {
        self.norm_bounds
            .iter()
            .all(|(r, rad)| p[r.clone()].iter().map(|v| v * v).sum::<f64>() <= rad * rad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalitySpec {
    pub id: InequalityId,
    pub region: Region,
    pub seed: u64,
}

impl InequalitySpec {
    pub fn new(id: InequalityId, region: Region, seed: u64) -> Self {
        Self { id, region, seed }
    }

    /// Number of coordinates a sample of this inequality has.
    pub fn arity(id: InequalityId, n: usize, m: usize) -> usize {
        match id {
            InequalityId::H1 => n + m,
            _ => 2 * n + m,
        }
    }

    /// Region covering the sets named in the inequality for a compact
    /// problem: states from the sublevel boxes of `V`, inputs from the
    /// model's (finite) input box. `outer_radius` bounds `x` for H1.
    pub fn compact_default(
        id: InequalityId,
        problem: &CompactObserver,
        outer_radius: f64,
        seed: u64,
    ) -> Result<Self, LyapunovError> {
        let n = problem.model.state_dim();
        let ubox = finite_input_box(problem.model.input_box())?;
        let f = &problem.cert.function;
        let cert = &problem.cert;
        let region = match id {
            InequalityId::H1 => {
                let mut boxes = vec![(-outer_radius, outer_radius); n];
                boxes.extend(ubox);
                Region::new(boxes).with_norm_bound(0..n, outer_radius)
            }
            InequalityId::H2 | InequalityId::H3Sufficient => {
                let rb = sublevel_radius(|x| f.value(x), n, cert.ramp_end)?;
                let rr = sublevel_radius(|x| f.value(x), n, cert.inner_level)?;
                let mut boxes = vec![(-rb, rb); n];
                boxes.extend(vec![(-rr, rr); n]);
                boxes.extend(ubox);
                Region::new(boxes)
            }
            _ => return Err(LyapunovError::ProblemMismatch { id }),
        };
        Ok(Self::new(id, region, seed))
    }
}

fn finite_input_box(b: Vec<(f64, f64)>) -> Result<Vec<(f64, f64)>, LyapunovError> {
    if b.iter().all(|(lo, hi)| lo.is_finite() && hi.is_finite()) {
        Ok(b)
    } else {
        Err(LyapunovError::InvalidArgument(
            "input box is unbounded; supply an explicit sampling region".into(),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub point: Vec<f64>,
    /// Amount by which the inequality failed (positive).
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FalsificationReport {
    pub id: InequalityId,
    pub samples_tested: usize,
    pub draws: usize,
    /// Violations beyond the tolerance, largest margin first.
    pub violations: Vec<Violation>,
    /// Most negative slack observed.
    pub worst_margin: f64,
    pub passed: bool,
    /// Samples on the degenerate set `grad W Q grad W' = 0` (open-set check).
    pub degenerate_samples: usize,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FalsificationRecord {
    pub id: InequalityId,
    pub samples: usize,
    pub worst_margin: f64,
    pub passed: bool,
    pub violations: Vec<Violation>,
}

pub const RECORD_VIOLATION_CAP: usize = 100;

impl FalsificationReport {
    pub fn record(&self) -> FalsificationRecord {
        FalsificationRecord {
            id: self.id,
            samples: self.samples_tested,
            worst_margin: self.worst_margin,
            passed: self.passed,
            violations: self
                .violations
                .iter()
                .take(RECORD_VIOLATION_CAP)
                .cloned()
                .collect(),
        }
    }
}

pub const DEFAULT_SLACK_TOL: f64 = 1e-9;
pub const MIN_SAMPLES: usize = 1000;
const MIN_ACCEPT_RATE: f64 = 1e-3;
/// Absolute tolerance on `grad W Q grad W'` below which a sample is treated as
/// lying on the degenerate set.
pub const DEGENERATE_TOL: f64 = 1e-8;

/// Slack of one sample: the inequality holds iff `slack >= 0`.
#[derive(Debug, Clone, Copy)]
struct SampleEval {
    slack: f64,
    degenerate: bool,
    nonzero_injection: bool,
}

/// Falsification by sampling: draws `n_samples` points uniformly from the
/// region (rejection sampling against the membership predicates of
/// `spec.id`), evaluates the slack of the inequality, and reports every
/// sample whose slack is below `-slack_tol`.
pub fn certify(
    spec: &InequalitySpec,
    problem: Problem<'_>,
    n_samples: usize,
    slack_tol: f64,
) -> Result<FalsificationReport, LyapunovError> {
    if n_samples < MIN_SAMPLES {
        return Err(LyapunovError::InvalidArgument(format!(
            "n_samples must be at least {MIN_SAMPLES}, got {n_samples}"
        )));
    }
    let (n, m) = match problem {
        Problem::Compact(p) => (p.model.state_dim(), p.model.input_dim()),
        Problem::OpenSet(p) => (p.plant.state_dim(), p.plant.input_dim()),
    };
    match (spec.id, problem) {
        (InequalityId::H1 | InequalityId::H2 | InequalityId::H3Sufficient, Problem::Compact(_))
        | (InequalityId::P1 | InequalityId::OpenSet39, Problem::OpenSet(_)) => {}
        _ => return Err(LyapunovError::ProblemMismatch { id: spec.id }),
    }
    let arity = InequalitySpec::arity(spec.id, n, m);
    if spec.region.boxes.len() != arity {
        return Err(LyapunovError::InvalidArgument(format!(
            "{} samples have {arity} coordinates, region has {}",
            spec.id,
            spec.region.boxes.len()
        )));
    }
    if spec
        .region
        .boxes
        .iter()
        .any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo <= hi))
    {
        return Err(LyapunovError::InvalidArgument(
            "sampling boxes must be finite and ordered".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut points = Vec::with_capacity(n_samples);
    let mut draws = 0usize;
    let max_draws = n_samples.saturating_mul(1000).max(10_000);
    while points.len() < n_samples {
        if draws >= max_draws {
            return Err(LyapunovError::RegionUnsatisfiable {
                accepted: points.len(),
                attempts: draws,
            });
        }
        draws += 1;
        let p: Vec<f64> = spec
            .region
            .boxes
            .iter()
            .map(|&(lo, hi)| if lo == hi { lo } else { rng.gen_range(lo..hi) })
            .collect();
        if spec.region.contains(&p) && admits(spec.id, problem, &p, n) {
            points.push(p);
        }
        if draws >= 10_000 && (points.len() as f64) < MIN_ACCEPT_RATE * draws as f64 {
            return Err(LyapunovError::RegionUnsatisfiable {
                accepted: points.len(),
                attempts: draws,
            });
        }
    }

    let evals: Vec<SampleEval> = points
        .par_iter()
        .map(|p| evaluate(spec.id, problem, p, n))
        .collect();

    let mut violations = Vec::new();
    let mut worst = f64::INFINITY;
    let mut degenerate = 0;
    let mut nonzero_injection = 0;
    for (p, e) in points.iter().zip(&evals) {
        if !e.slack.is_finite() {
            return Err(LyapunovError::NonFiniteSlack { point: p.clone() });
        }
        worst = worst.min(e.slack);
        if e.slack < -slack_tol {
            violations.push(Violation {
                point: p.clone(),
                margin: -e.slack,
            });
        }
        degenerate += e.degenerate as usize;
        nonzero_injection += e.nonzero_injection as usize;
    }
    violations.sort_by(|a, b| b.margin.total_cmp(&a.margin));

    let mut notes = Vec::new();
    if nonzero_injection > 0 {
        let msg = format!("injection nonzero at matching output on {nonzero_injection} samples");
        warn!("{}: {msg}", spec.id);
        notes.push(msg);
    }
    if spec.id == InequalityId::OpenSet39 {
        notes.push(format!(
            "{degenerate} samples on the degenerate set grad W Q grad W' <= {DEGENERATE_TOL:e}"
        ));
    }
    if spec.id == InequalityId::H1 {
        if let Problem::Compact(p) = problem {
            let f = &p.cert.function;
            let probe = radial_probe(|x| f.value(x), n, p.cert.ramp_end);
            notes.push(format!(
                "radial probe (heuristic): min V on |x|=10 is {:.6e}, on |x|=100 is {:.6e}, {}",
                probe.min_on_r10,
                probe.min_on_r100,
                if probe.passed { "ok" } else { "FAILED" }
            ));
        }
    }

    Ok(FalsificationReport {
        id: spec.id,
        samples_tested: points.len(),
        draws,
        passed: violations.is_empty(),
        violations,
        worst_margin: worst,
        degenerate_samples: degenerate,
        notes,
    })
}

fn split3(p: &[f64], n: usize) -> (&[f64], &[f64], &[f64]) {
    (&p[..n], &p[n..2 * n], &p[2 * n..])
}

fn admits(id: InequalityId, problem: Problem<'_>, p: &[f64], n: usize) -> bool {
    match (id, problem) {
        (InequalityId::H1, Problem::Compact(c)) => c.cert.value(&p[..n]) >= c.cert.inner_level,
        (InequalityId::H2, Problem::Compact(c)) => {
            let (xi, x, _) = split3(p, n);
            c.cert.value(xi) <= c.cert.ramp_end && c.cert.value(x) <= c.cert.inner_level
        }
        (InequalityId::H3Sufficient, Problem::Compact(c)) => {
            let (xi, x, _) = split3(p, n);
            let v = c.cert.value(xi);
            v > c.cert.ramp_start && v <= c.cert.ramp_end && c.cert.value(x) <= c.cert.inner_level
        }
        (InequalityId::P1, Problem::OpenSet(o)) => {
            let (_, big_x, _) = split3(p, n);
            o.plant.in_domain(big_x)
        }
        (InequalityId::OpenSet39, Problem::OpenSet(o)) => {
            let (z, x, _) = split3(p, n);
            if o.design.growth.value(z) < o.design.activation {
                return false;
            }
            let s = observer_openset::side_condition(o, z, x);
            s.cross < 0.0 || s.denominator <= DEGENERATE_TOL
        }
        _ => false,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn evaluate(id: InequalityId, problem: Problem<'_>, p: &[f64], n: usize) -> SampleEval {
    let plain = |slack| SampleEval {
        slack,
        degenerate: false,
        nonzero_injection: false,
    };
    match (id, problem) {
        (InequalityId::H1, Problem::Compact(c)) => {
            let (x, u) = (&p[..n], &p[n..]);
            let grad = c.cert.gradient(x);
            plain(-c.cert.dissipation(x) - dot(&grad, &c.model.f(x, u)))
        }
        (InequalityId::H2, Problem::Compact(c)) => {
            let (xi, x, u) = split3(p, n);
            let y = c.model.h(x);
            let k = c.spec.injection.eval(xi, &y, u);
            let fxi = c.model.f(xi, u);
            let fx = c.model.f(x, u);
            let e: Vec<f64> = xi.iter().zip(x).map(|(a, b)| a - b).collect();
            let d: Vec<f64> = (0..n).map(|i| fxi[i] + k[i] - fx[i]).collect();
            let lhs = c.spec.bilinear(&e, &d);
            let k_match = c.spec.injection.eval(xi, &c.model.h(xi), u);
            SampleEval {
                slack: -c.spec.mu * dot(&e, &e) - lhs,
                degenerate: false,
                nonzero_injection: norm(&k_match) > 1e-9,
            }
        }
        (InequalityId::H3Sufficient, Problem::Compact(c)) => {
            let (xi, x, u) = split3(p, n);
            let y = c.model.h(x);
            let k = c.spec.injection.eval(xi, &y, u);
            let fxi = c.model.f(xi, u);
            let grad = c.cert.gradient(xi);
            let drift: f64 = (0..n).map(|i| grad[i] * (fxi[i] + k[i])).sum();
            let dist = xi
                .iter()
                .zip(x)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let allowance =
                c.spec.mu * (1.0 - c.cert.contraction) / c.spec.p_norm() * norm(&grad) * dist;
            plain(-c.cert.dissipation(xi) + allowance - drift)
        }
        (InequalityId::P1, Problem::OpenSet(o)) => {
            let (z, big_x, u) = split3(p, n);
            let y = o.plant.h(big_x);
            let k = o.candidate.eval(z, &y, u);
            let f = o.plant.f(big_x, u);
            let e: Vec<f64> = z.iter().zip(big_x).map(|(a, b)| a - b).collect();
            let d: Vec<f64> = (0..n).map(|i| k[i] - f[i]).collect();
            plain(-o.mu * dot(&e, &e) - o.bilinear(&e, &d))
        }
        (InequalityId::OpenSet39, Problem::OpenSet(o)) => {
            let (z, x, u) = split3(p, n);
            match observer_openset::open_set_slack(o, z, x, u) {
                Ok(s) => SampleEval {
                    slack: s.slack,
                    degenerate: s.degenerate,
                    nonzero_injection: false,
                },
                Err(_) => plain(f64::NAN),
            }
        }
        _ => plain(f64::NAN),
    }
}
