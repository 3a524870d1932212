//! Scenario files, run dispatch and on-disk artifacts for the `obsx` binary.
//!
//! A scenario is a TOML file. Every run writes `trajectory.csv`, `plot.csv`
//! (time against the natural log of the estimation error) and `report.json`
//! into its own directory.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::{error, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lyapunov::{
    certify, entry_time_bound, entry_time_to_level, FalsificationRecord, InequalityId,
    InequalitySpec, Problem, Region, DEFAULT_SLACK_TOL,
};
use crate::numerics::{StepControl, DEFAULT_MAX_JUMPS};
use crate::observer_compact::{
    empirical_prefactor, fit_error_decay, planar_gains, planar_observer, planar_reference_params,
    CompactObserver,
};
use crate::observer_openset::{
    chemostat_observer, random_chemostat_scenario, run_openset, ChemostatObserverParams,
    OpenSetError, OpenSetObserver, OpenSetRun, OpenSetScheme, OpenSetVariant, CHEMOSTAT_DEFAULT_A,
    CHEMOSTAT_DEFAULT_EPS,
};
use crate::observer_sampled::{
    estimate_g, run_sampled, select_r, NoiseModel, SampledConfig, FIT_FLOOR_RATIO,
};
use crate::systems::{ChemostatParams, InputKind, InputSignal, SystemModel};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_CERTIFICATION_FAILED: i32 = 2;
pub const EXIT_DOMAIN_VIOLATION: i32 = 3;

pub const DEFAULT_CERTIFY_SAMPLES: usize = 100_000;
pub const DEFAULT_G_SAMPLES: usize = 20_000;
pub const ENTRY_GRID_BUDGET: usize = 10_000;
/// Radius of the ball sampled for the planar dissipation inequality.
pub const DEFAULT_OUTER_RADIUS: f64 = 10.0;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("report schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error(transparent)]
    Run(#[from] crate::Error),
}

fn config_error(field: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

fn io_error(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Scenario files

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    ContinuousCompact,
    Sampled,
    Openset,
    Certify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemId {
    Planar,
    Chemostat,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConditions {
    pub plant: Option<Vec<f64>>,
    pub observer: Option<Vec<f64>>,
    /// Initial output sample of the sampled observer; defaults to the
    /// observer's predicted output.
    pub held_output: Option<f64>,
}

/// Overrides of the planar design point.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanarSection {
    pub cross_weight: Option<f64>,
    pub weight: Option<f64>,
    pub ramp_start: Option<f64>,
    pub ramp_end: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampledSection {
    /// Sampling diameter. Defaults to the certified value.
    pub diameter: Option<f64>,
    #[serde(default)]
    pub noise_amplitude: f64,
    pub g_samples: Option<usize>,
    pub max_jumps: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpensetSection {
    pub variant: Option<OpenSetVariant>,
    pub scheme: Option<OpenSetScheme>,
    pub eps: Option<f64>,
    pub activation: Option<f64>,
    /// Number of seeded random scenarios to run instead of the initial
    /// conditions and input of the file.
    pub random: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifySection {
    #[serde(default)]
    pub inequalities: Vec<InequalityId>,
    pub samples: Option<usize>,
    pub slack_tol: Option<f64>,
    pub outer_radius: Option<f64>,
    /// Explicit sampling box over the concatenated sample vector.
    pub region: Option<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: Option<String>,
    pub kind: Option<ScenarioKind>,
    pub system: Option<SystemId>,
    pub horizon: Option<f64>,
    pub seed: Option<u64>,
    pub dt: Option<f64>,
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub initial: InitialConditions,
    pub input: Option<InputKind>,
    #[serde(default)]
    pub planar: PlanarSection,
    pub chemostat: Option<ChemostatParams>,
    #[serde(default)]
    pub sampled: SampledSection,
    #[serde(default)]
    pub openset: OpensetSection,
    #[serde(default)]
    pub certify: CertifySection,
}

/// Command-line values that take precedence over the scenario file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub dt: Option<f64>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| {
            let field = match e.span() {
                Some(span) => format!("line {}", text[..span.start].lines().count().max(1)),
                None => "file".into(),
            };
            config_error(&field, e.message())
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_error(path))?;
        let mut scenario = Self::parse(&text)?;
        if scenario.name.is_none() {
            scenario.name = path.file_stem().map(|s| s.to_string_lossy().into_owned());
        }
        Ok(scenario)
    }

    fn apply(&mut self, overrides: &Overrides) {
        if overrides.seed.is_some() {
            self.seed = overrides.seed;
        }
        if overrides.dt.is_some() {
            self.dt = overrides.dt;
        }
    }

    fn kind(&self) -> Result<ScenarioKind, CliError> {
        self.kind.ok_or_else(|| config_error("kind", "missing"))
    }

    fn system(&self) -> Result<SystemId, CliError> {
        self.system.ok_or_else(|| config_error("system", "missing"))
    }

    fn horizon(&self) -> Result<f64, CliError> {
        match self.horizon {
            None => Err(config_error("horizon", "missing")),
            Some(h) if h > 0.0 && h.is_finite() => Ok(h),
            Some(h) => Err(config_error(
                "horizon",
                format!("must be positive, got {h}"),
            )),
        }
    }

    fn dt(&self) -> Result<f64, CliError> {
        match self.dt {
            None => Err(config_error("dt", "missing")),
            Some(dt) if dt > 0.0 && dt.is_finite() => Ok(dt),
            Some(dt) => Err(config_error("dt", format!("must be positive, got {dt}"))),
        }
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn initial_state(&self, which: &str, dim: usize) -> Result<Vec<f64>, CliError> {
        let field = format!("initial.{which}");
        let v = match which {
            "plant" => &self.initial.plant,
            _ => &self.initial.observer,
        };
        let v = v.as_ref().ok_or_else(|| config_error(&field, "missing"))?;
        if v.len() != dim {
            return Err(config_error(
                &field,
                format!("expected {dim} entries, got {}", v.len()),
            ));
        }
        Ok(v.clone())
    }

    fn input(&self, model: &dyn SystemModel) -> Result<InputSignal, CliError> {
        let kind = self
            .input
            .clone()
            .ok_or_else(|| config_error("input", "missing"))?;
        InputSignal::new(kind, model.input_box()).map_err(|e| config_error("input", e.to_string()))
    }

    fn require_system(&self, expected: SystemId) -> Result<(), CliError> {
        let system = self.system()?;
        if system == expected {
            Ok(())
        } else {
            Err(config_error(
                "system",
                format!(
                    "{:?} scenarios need system {expected:?}",
                    self.kind.unwrap()
                ),
            ))
        }
    }

    fn planar(&self) -> Result<CompactObserver, CliError> {
        let (p, q, a, b) = planar_reference_params();
        let s = &self.planar;
        let gains = planar_gains(
            s.cross_weight.unwrap_or(p),
            s.weight.unwrap_or(q),
            s.ramp_start.unwrap_or(a),
            s.ramp_end.unwrap_or(b),
        )
        .map_err(|e| config_error("planar", e.to_string()))?;
        Ok(planar_observer(&gains).map_err(crate::Error::from)?)
    }

    fn chemostat(&self) -> Result<OpenSetObserver, CliError> {
        let params = self.chemostat.unwrap_or_default();
        params
            .validate()
            .map_err(|e| config_error("chemostat", e.to_string()))?;
        let obs_params = ChemostatObserverParams::select(
            &params,
            self.openset.eps.unwrap_or(CHEMOSTAT_DEFAULT_EPS),
            self.openset.activation.unwrap_or(CHEMOSTAT_DEFAULT_A),
        )
        .map_err(|e| config_error("openset", e.to_string()))?;
        Ok(chemostat_observer(&params, &obs_params).map_err(crate::Error::from)?)
    }
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntryTimes {
    /// Bound on the time the plant needs to enter the inner sublevel set.
    pub plant: f64,
    /// Bound on the time the observer needs to enter the outer sublevel set.
    pub observer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub kind: ScenarioKind,
    pub system: SystemId,
    pub seed: u64,
    pub dt: Option<f64>,
    pub horizon: Option<f64>,
    pub fitted_rate: Option<f64>,
    pub r_squared: Option<f64>,
    /// `max_t error(t) exp(rate t)` with the fitted rate.
    pub prefactor: Option<f64>,
    pub initial_error: Option<f64>,
    pub final_error: Option<f64>,
    pub entry_times: Option<EntryTimes>,
    pub tail_sup_error: Option<f64>,
    pub event_count: Option<usize>,
    pub max_interval: Option<f64>,
    pub positivity_violated: Option<bool>,
    pub certification: Vec<FalsificationRecord>,
    /// Number of runs summarised by this report.
    pub runs: usize,
    /// Kind-specific report of the underlying run.
    pub details: serde_json::Value,
}

impl RunReport {
    fn new(sc: &Scenario, kind: ScenarioKind, system: SystemId) -> Self {
        Self {
            name: sc.name.clone().unwrap_or_else(|| "scenario".into()),
            kind,
            system,
            seed: sc.seed(),
            dt: sc.dt,
            horizon: sc.horizon,
            fitted_rate: None,
            r_squared: None,
            prefactor: None,
            initial_error: None,
            final_error: None,
            entry_times: None,
            tail_sup_error: None,
            event_count: None,
            max_interval: None,
            positivity_violated: None,
            certification: Vec::new(),
            runs: 1,
            details: serde_json::Value::Null,
        }
    }

    pub fn certification_passed(&self) -> Option<bool> {
        if self.certification.is_empty() {
            None
        } else {
            Some(self.certification.iter().all(|c| c.passed))
        }
    }

    pub fn exit_code(&self) -> i32 {
        if self.positivity_violated == Some(true) {
            EXIT_DOMAIN_VIOLATION
        } else if self.certification_passed() == Some(false) {
            EXIT_CERTIFICATION_FAILED
        } else {
            EXIT_OK
        }
    }
}

/// Columns of a CSV artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    fn new(header: Vec<String>) -> Self {
        Self {
            header,
            rows: Vec::new(),
        }
    }

    /// Header row, then `{:.16e}` floats, comma separated, LF endings.
    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write!(out, "{v:.16e}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

fn labels(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}{i}"))
}

/// Everything a run produces before it is written to disk.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub trajectory: Option<Table>,
    pub plot: Option<Table>,
    /// Per-run outputs of a batch, written to numbered subdirectories.
    pub children: Vec<RunOutput>,
}

impl RunOutput {
    fn single(report: RunReport, trajectory: Table, plot: Table) -> Self {
        Self {
            report,
            trajectory: Some(trajectory),
            plot: Some(plot),
            children: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(io_error(dir))?;
        let put = |name: &str, text: &str| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(io_error(&path))
        };
        if let Some(t) = &self.trajectory {
            put("trajectory.csv", &t.to_csv())?;
        }
        if let Some(p) = &self.plot {
            put("plot.csv", &p.to_csv())?;
        }
        let mut json = serde_json::to_string_pretty(&self.report).expect("report serialises");
        json.push('\n');
        put("report.json", &json)?;
        for (i, child) in self.children.iter().enumerate() {
            child.write(&dir.join(format!("run_{i:03}")))?;
        }
        Ok(())
    }
}

fn plot_table(times: &[f64], errors: impl Iterator<Item = f64>) -> Table {
    let mut t = Table::new(vec!["t".into(), "log_error".into()]);
    t.rows = times
        .iter()
        .zip(errors)
        .map(|(t, e)| vec![*t, e.ln()])
        .collect();
    t
}

// ---------------------------------------------------------------------------
// Dispatch

/// Runs one scenario without touching the disk.
pub fn execute(sc: &Scenario) -> Result<RunOutput, CliError> {
    match sc.kind()? {
        ScenarioKind::ContinuousCompact => run_continuous_scenario(sc),
        ScenarioKind::Sampled => run_sampled_scenario(sc),
        ScenarioKind::Openset => run_openset_scenario(sc),
        ScenarioKind::Certify => run_certify_scenario(sc),
    }
}

fn run_continuous_scenario(sc: &Scenario) -> Result<RunOutput, CliError> {
    sc.require_system(SystemId::Planar)?;
    let obs = sc.planar()?;
    let n = obs.model.state_dim();
    let horizon = sc.horizon()?;
    let dt = sc.dt()?;
    let x0 = sc.initial_state("plant", n)?;
    let xi0 = sc.initial_state("observer", n)?;
    let input = sc.input(obs.model.as_ref())?;
    let run = crate::observer_compact::run_continuous(
        &obs,
        &x0,
        &xi0,
        horizon,
        &input,
        &StepControl::fixed(dt),
    )
    .map_err(crate::Error::from)?;
    let traj = &run.trajectory;
    let plant_entry = entry_time_bound(&obs.cert, &x0, ENTRY_GRID_BUDGET, sc.seed())
        .map_err(crate::Error::from)?;
    let observer_entry = entry_time_to_level(
        &obs.cert,
        &xi0,
        obs.cert.ramp_end,
        ENTRY_GRID_BUDGET,
        sc.seed(),
    )
    .map_err(crate::Error::from)?;
    let fit = fit_error_decay(traj, n, 0.0, FIT_FLOOR_RATIO).ok();

    let mut report = RunReport::new(sc, ScenarioKind::ContinuousCompact, SystemId::Planar);
    report.fitted_rate = fit.map(|f| f.sigma);
    report.r_squared = fit.map(|f| f.r_squared);
    report.prefactor = fit.map(|f| empirical_prefactor(traj, n, f.sigma));
    report.initial_error = Some(run.error_norm(0));
    report.final_error = Some(run.error_norm(traj.len() - 1));
    report.entry_times = Some(EntryTimes {
        plant: plant_entry.t,
        observer: observer_entry.t,
    });

    let mut table = Table::new(labels("x", n).chain(labels("xi", n)).collect());
    table.header.insert(0, "t".into());
    table.rows = traj
        .times
        .iter()
        .zip(&traj.states)
        .map(|(t, s)| std::iter::once(*t).chain(s.iter().copied()).collect())
        .collect();
    let plot = plot_table(&traj.times, (0..traj.len()).map(|i| run.error_norm(i)));
    Ok(RunOutput::single(report, table, plot))
}

/// Fitted decay rate of the continuous observer from the same start, used as
/// the rate in the sampling-diameter condition. Falls back to `mu` when the
/// fit fails.
pub fn pilot_rate(
    obs: &CompactObserver,
    x0: &[f64],
    xi0: &[f64],
    horizon: f64,
    input: &InputSignal,
    dt: f64,
) -> Result<f64, CliError> {
    let run = crate::observer_compact::run_continuous(
        obs,
        x0,
        xi0,
        horizon,
        input,
        &StepControl::fixed(dt),
    )
    .map_err(crate::Error::from)?;
    Ok(
        fit_error_decay(&run.trajectory, x0.len(), 0.0, FIT_FLOOR_RATIO)
            .ok()
            .map(|f| f.sigma)
            .filter(|s| *s > 0.0 && s.is_finite())
            .unwrap_or(obs.spec.mu),
    )
}

fn run_sampled_scenario(sc: &Scenario) -> Result<RunOutput, CliError> {
    sc.require_system(SystemId::Planar)?;
    let obs = sc.planar()?;
    let n = obs.model.state_dim();
    let horizon = sc.horizon()?;
    let dt = sc.dt()?;
    let x0 = sc.initial_state("plant", n)?;
    let xi0 = sc.initial_state("observer", n)?;
    let input = sc.input(obs.model.as_ref())?;
    let section = &sc.sampled;
    if !(section.noise_amplitude >= 0.0) {
        return Err(config_error(
            "sampled.noise_amplitude",
            "must be non-negative",
        ));
    }
    let g = estimate_g(
        &obs,
        section.g_samples.unwrap_or(DEFAULT_G_SAMPLES),
        sc.seed(),
    )
    .map_err(crate::Error::from)?;
    let sigma = pilot_rate(&obs, &x0, &xi0, horizon, &input, dt)?;
    let selection = select_r(
        g.lipschitz,
        obs.spec.p_norm(),
        obs.cert.contraction,
        obs.spec.mu,
        sigma,
    )
    .map_err(crate::Error::from)?;
    let r = match section.diameter {
        None => selection.diameter,
        Some(r) if r > 0.0 && r.is_finite() => r,
        Some(r) => {
            return Err(config_error(
                "sampled.diameter",
                format!("must be positive, got {r}"),
            ))
        }
    };
    let cfg = SampledConfig {
        diameter: r,
        lipschitz: g.lipschitz,
        gamma_iss: selection.gamma_iss,
        sigma,
        noise: NoiseModel {
            amplitude: section.noise_amplitude,
            seed: sc.seed(),
        },
        certified: r <= selection.diameter,
        max_jumps: section.max_jumps.unwrap_or(DEFAULT_MAX_JUMPS),
    };
    let w0 = sc
        .initial
        .held_output
        .unwrap_or_else(|| obs.model.h(&xi0)[0]);
    let run = run_sampled(
        &obs,
        &cfg,
        &x0,
        &xi0,
        w0,
        horizon,
        &input,
        &StepControl::fixed(dt),
    )
    .map_err(crate::Error::from)?;
    let traj = &run.trajectory;
    let rep = &run.report;

    let mut report = RunReport::new(sc, ScenarioKind::Sampled, SystemId::Planar);
    report.fitted_rate = rep.fit.map(|f| f.sigma);
    report.r_squared = rep.fit.map(|f| f.r_squared);
    report.prefactor = rep.fit.map(|f| empirical_prefactor(traj, n, f.sigma));
    report.initial_error = Some(rep.initial_error);
    report.final_error = Some(rep.final_error);
    report.tail_sup_error = Some(rep.tail_sup_error);
    report.event_count = Some(rep.event_count);
    report.max_interval = Some(rep.max_interval);
    report.details = serde_json::json!({
        "sampled": rep,
        "certified_r": selection.diameter,
        "pilot_rate": sigma,
        "g_estimate": g,
    });

    let mut header = vec!["t".to_string()];
    header.extend(labels("x", n).chain(labels("xi", n)));
    header.extend(["w".into(), "is_event".into()]);
    let mut table = Table::new(header);
    let mut events = traj.events.iter().map(|e| e.t).peekable();
    table.rows = traj
        .times
        .iter()
        .zip(&traj.states)
        .map(|(t, s)| {
            let is_event = events.next_if(|e| e == t).is_some();
            let mut row = vec![*t];
            row.extend(s);
            row.push(if is_event { 1.0 } else { 0.0 });
            row
        })
        .collect();
    let plot = plot_table(&traj.times, (0..traj.len()).map(|i| run.error_norm(i)));
    Ok(RunOutput::single(report, table, plot))
}

fn openset_output(sc: &Scenario, run: &OpenSetRun) -> RunOutput {
    let rep = &run.report;
    let mut report = RunReport::new(sc, ScenarioKind::Openset, SystemId::Chemostat);
    report.fitted_rate = rep.fit.map(|f| f.sigma);
    report.r_squared = rep.fit.map(|f| f.r_squared);
    report.prefactor = rep.prefactor;
    report.initial_error = Some(rep.initial_error);
    report.final_error = Some(rep.final_error);
    report.positivity_violated = Some(rep.positivity_violated);
    report.details = serde_json::json!({ "openset": rep });

    let n = run.big_x[0].len();
    let mut header = vec!["t".to_string()];
    header.extend(
        labels("X", n)
            .chain(labels("Z", n))
            .chain(labels("x", n))
            .chain(labels("z", n)),
    );
    header.push("lambda".into());
    let mut table = Table::new(header);
    table.rows = (0..run.times.len())
        .map(|i| {
            let mut row = vec![run.times[i]];
            row.extend(&run.big_x[i]);
            row.extend(&run.big_z[i]);
            row.extend(&run.x[i]);
            row.extend(&run.z[i]);
            row.push(run.lambda[i]);
            row
        })
        .collect();
    let plot = plot_table(&run.times, (0..run.times.len()).map(|i| run.error_norm(i)));
    RunOutput::single(report, table, plot)
}

fn run_openset_scenario(sc: &Scenario) -> Result<RunOutput, CliError> {
    sc.require_system(SystemId::Chemostat)?;
    let obs = sc.chemostat()?;
    let horizon = sc.horizon()?;
    let ctrl = StepControl::fixed(sc.dt()?);
    let variant = sc.openset.variant.unwrap_or(OpenSetVariant::Corrected);
    let scheme = sc.openset.scheme.unwrap_or_default();
    let run = |x0: &[f64], z0: &[f64], input: &InputSignal| {
        run_openset(&obs, x0, z0, horizon, input, &ctrl, variant, scheme)
            .map_err(crate::Error::from)
    };

    let Some(count) = sc.openset.random else {
        let n = obs.plant.state_dim();
        let x0 = sc.initial_state("plant", n)?;
        let z0 = sc.initial_state("observer", n)?;
        let input = sc.input(obs.plant.as_ref())?;
        return Ok(openset_output(sc, &run(&x0, &z0, &input)?));
    };
    if count == 0 {
        return Err(config_error("openset.random", "must be at least 1"));
    }
    let params = sc.chemostat.unwrap_or_default();
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed());
    let scenarios = (0..count)
        .map(|_| random_chemostat_scenario(&mut rng, &params))
        .collect::<Result<Vec<_>, OpenSetError>>()
        .map_err(crate::Error::from)?;
    let children = scenarios
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut child_sc = sc.clone();
            child_sc.name = Some(format!(
                "{}/run_{i:03}",
                sc.name.as_deref().unwrap_or("scenario")
            ));
            child_sc.openset.random = None;
            let r = run(&s.x0, &s.z0, &s.input)?;
            Ok(openset_output(&child_sc, &r))
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let mut report = RunReport::new(sc, ScenarioKind::Openset, SystemId::Chemostat);
    let reports: Vec<&RunReport> = children.iter().map(|c| &c.report).collect();
    let fold_min = |f: fn(&RunReport) -> Option<f64>| {
        reports
            .iter()
            .map(|r| f(r))
            .try_fold(f64::INFINITY, |acc, v| v.map(|v| acc.min(v)))
    };
    report.runs = count;
    report.fitted_rate = fold_min(|r| r.fitted_rate);
    report.r_squared = fold_min(|r| r.r_squared);
    report.positivity_violated = Some(reports.iter().any(|r| r.positivity_violated == Some(true)));
    report.final_error = Some(
        reports
            .iter()
            .filter_map(|r| r.final_error)
            .fold(0.0, f64::max),
    );
    let growth_ok = children
        .iter()
        .filter(|c| c.report.details["openset"]["growth_bound"]["holds"] == true)
        .count();
    report.details = serde_json::json!({
        "batch": {
            "runs": count,
            "min_fitted_rate": report.fitted_rate,
            "growth_bound_holds": growth_ok,
        }
    });
    Ok(RunOutput {
        report,
        trajectory: None,
        plot: None,
        children,
    })
}

fn run_certify_scenario(sc: &Scenario) -> Result<RunOutput, CliError> {
    let system = sc.system()?;
    let section = &sc.certify;
    if section.inequalities.is_empty() {
        return Err(config_error("certify.inequalities", "missing or empty"));
    }
    let samples = section.samples.unwrap_or(DEFAULT_CERTIFY_SAMPLES);
    let tol = section.slack_tol.unwrap_or(DEFAULT_SLACK_TOL);
    let seed = sc.seed();
    let mut report = RunReport::new(sc, ScenarioKind::Certify, system);
    let mut notes = Vec::new();
    let explicit = section.region.clone().map(Region::new);
    for &id in &section.inequalities {
        let result = match system {
            SystemId::Planar => {
                let obs = sc.planar()?;
                let spec = match &explicit {
                    Some(region) => InequalitySpec::new(id, region.clone(), seed),
                    None => InequalitySpec::compact_default(
                        id,
                        &obs,
                        section.outer_radius.unwrap_or(DEFAULT_OUTER_RADIUS),
                        seed,
                    )
                    .map_err(|e| config_error("certify.inequalities", e.to_string()))?,
                };
                certify(&spec, Problem::Compact(&obs), samples, tol)
            }
            SystemId::Chemostat => {
                let obs = sc.chemostat()?;
                let region = explicit.clone().unwrap_or_else(|| {
                    chemostat_default_region(id, &sc.chemostat.unwrap_or_default())
                });
                let spec = InequalitySpec::new(id, region, seed);
                certify(&spec, Problem::OpenSet(&obs), samples, tol)
            }
        };
        let result = result.map_err(|e| match e {
            crate::lyapunov::LyapunovError::ProblemMismatch { .. }
            | crate::lyapunov::LyapunovError::InvalidArgument(_) => {
                config_error("certify", e.to_string())
            }
            other => crate::Error::from(other).into(),
        })?;
        info!(
            "{id}: {} samples, worst slack {:.6e}, {}",
            result.samples_tested,
            result.worst_margin,
            if result.passed { "passed" } else { "FAILED" }
        );
        notes.push(serde_json::json!({ "id": id, "notes": result.notes, "draws": result.draws }));
        report.certification.push(result.record());
    }
    report.details = serde_json::json!({ "notes": notes });
    Ok(RunOutput {
        report,
        trajectory: None,
        plot: None,
        children: Vec::new(),
    })
}

/// Default sampling box for a chemostat inequality. P1 samples `(Z, X, u)`
/// with `Z` in `[-5, 5]^2`, `X` in `(0, 5]^2`; the open-set inequality samples
/// chart coordinates `(z, x, u)` in `[-6, 6]^4`. Both inputs range over
/// `[theta, 2]`.
pub fn chemostat_default_region(id: InequalityId, params: &ChemostatParams) -> Region {
    let mut boxes = match id {
        InequalityId::P1 => vec![(-5.0, 5.0), (-5.0, 5.0), (0.0, 5.0), (0.0, 5.0)],
        _ => vec![(-6.0, 6.0); 4],
    };
    boxes.extend([(params.theta, 2.0); 2]);
    Region::new(boxes)
}

/// Loads, runs and writes one scenario file. Returns the report and the
/// process exit code it implies.
pub fn run_scenario(
    path: &Path,
    overrides: &Overrides,
    force_kind: Option<ScenarioKind>,
) -> Result<(RunReport, i32), CliError> {
    let mut sc = Scenario::load(path)?;
    sc.apply(overrides);
    if let Some(kind) = force_kind {
        if sc.kind()? != kind {
            return Err(config_error("kind", format!("expected {kind:?}")));
        }
    }
    let out = execute(&sc)?;
    let base = overrides
        .out_dir
        .clone()
        .or_else(|| sc.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    out.write(&base.join(&out.report.name))?;
    let code = out.report.exit_code();
    Ok((out.report, code))
}

// ---------------------------------------------------------------------------
// Comparison

pub fn load_report(path: &Path) -> Result<RunReport, CliError> {
    let text = fs::read_to_string(path).map_err(io_error(path))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::SchemaMismatch(format!("{}: {e}", path.display())))
}

fn cell<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "-".into(), |v| v.to_string())
}

fn sci(v: Option<f64>) -> String {
    cell(v.map(|v| format!("{v:.6e}")))
}

/// Markdown table of rates, tail errors, event counts and flags.
pub fn compare_runs(paths: &[PathBuf]) -> Result<String, CliError> {
    if paths.len() < 2 {
        return Err(CliError::SchemaMismatch(format!(
            "need at least 2 reports, got {}",
            paths.len()
        )));
    }
    let reports = paths
        .iter()
        .map(|p| load_report(p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = String::from(
        "| name | kind | system | seed | fitted rate | r^2 | final error | tail sup error | events | max interval | positivity violated | certified |\n\
         |---|---|---|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in &reports {
        writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            r.name,
            serde_json::to_value(r.kind).unwrap().as_str().unwrap(),
            serde_json::to_value(r.system).unwrap().as_str().unwrap(),
            r.seed,
            sci(r.fitted_rate),
            cell(r.r_squared.map(|v| format!("{v:.4}"))),
            sci(r.final_error),
            sci(r.tail_sup_error),
            cell(r.event_count),
            sci(r.max_interval),
            cell(r.positivity_violated),
            cell(r.certification_passed()),
        )
        .unwrap();
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Command line

#[derive(Debug, Parser)]
#[command(
    name = "obsx",
    version,
    about = "Run, certify and compare observer scenarios"
)]
pub struct Args {
    #[command(subcommand)]
    pub command: Command,
    /// Seed overriding the scenario files.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory receiving one subdirectory per scenario.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Integration step overriding the scenario files.
    #[arg(long, global = true)]
    pub dt: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run scenario files in parallel.
    Run { configs: Vec<PathBuf> },
    /// Run certification scenario files.
    Certify { configs: Vec<PathBuf> },
    /// Print a markdown table comparing report files.
    Compare { reports: Vec<PathBuf> },
}

/// Caps the global thread pool at `OBSX_THREADS` when set.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("OBSX_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| config_error("OBSX_THREADS", format!("not a positive integer: {value}")))?;
    // A second initialisation in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
    Ok(())
}

/// Executes parsed arguments and returns the process exit code.
pub fn main_with(args: Args) -> i32 {
    if let Err(e) = configure_threads() {
        error!("{e}");
        return EXIT_ERROR;
    }
    let overrides = Overrides {
        seed: args.seed,
        out_dir: args.out_dir,
        dt: args.dt,
    };
    let (configs, force) = match args.command {
        Command::Compare { reports } => {
            return match compare_runs(&reports) {
                Ok(table) => {
                    print!("{table}");
                    io::stdout().flush().ok();
                    EXIT_OK
                }
                Err(e) => {
                    error!("{e}");
                    EXIT_ERROR
                }
            };
        }
        Command::Run { configs } => (configs, None),
        Command::Certify { configs } => (configs, Some(ScenarioKind::Certify)),
    };
    if configs.is_empty() {
        error!("no scenario files given");
        return EXIT_ERROR;
    }
    let codes: Vec<i32> = configs
        .par_iter()
        .map(|path| match run_scenario(path, &overrides, force) {
            Ok((report, code)) => {
                println!("{}: {} (exit {code})", path.display(), report.name);
                code
            }
            Err(e) => {
                error!("{}: {e}", path.display());
                EXIT_ERROR
            }
        })
        .collect();
    let worst = |c: i32| match c {
        EXIT_ERROR => 3,
        EXIT_DOMAIN_VIOLATION => 2,
        EXIT_CERTIFICATION_FAILED => 1,
        _ => 0,
    };
    codes
        .into_iter()
        .max_by_key(|c| worst(*c))
        .unwrap_or(EXIT_OK)
}
