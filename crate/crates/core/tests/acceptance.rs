//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line with the
//! measured values next to the pinned thresholds, then asserts.

use obsx::cli::{execute, Scenario};
use obsx::lyapunov::{
    certify, entry_time_bound, entry_time_to_level, InequalityId, InequalitySpec, LyapunovFunction,
    Problem, QuarticDissipation, DEFAULT_SLACK_TOL,
};
use obsx::numerics::{check_gradient, integrate, StepControl, DEFAULT_MAX_JUMPS};
use obsx::observer_compact::{
    planar_gains, planar_khat_closed, planar_observer, planar_reference_params, run_continuous,
    CompactObserver, PlanarGainParams,
};
use obsx::observer_openset::{
    chemostat_ktilde_closed, chemostat_observer, chemostat_observer_closed, chemostat_w,
    chemostat_w_gradient, find_contrast_scenario, lambda_gain, observer_g_rhs, pullback_k,
    random_chemostat_scenario, run_openset, ChemostatObserverParams, OpenSetObserver,
    OpenSetReport, OpenSetScheme, OpenSetVariant, CHEMOSTAT_DEFAULT_A, CHEMOSTAT_DEFAULT_EPS,
};
use obsx::observer_sampled::{estimate_g, run_sampled, select_r, NoiseModel, SampledConfig};
use obsx::systems::{planar_f, Chemostat, ChemostatParams, InputSignal, SystemModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::time::Instant;

const CERTIFY_SAMPLES: usize = 100_000;
const CERTIFY_TIME_LIMIT_S: f64 = 30.0;
const GAIN_RTOL: f64 = 1e-12;
const PLANAR_RUNS: usize = 20;
const PLANAR_HORIZON: f64 = 40.0;
const PLANAR_DT: f64 = 0.01;
const TERMINAL_RATIO: f64 = 1e-6;
/// Allowed rise of the weighted error between samples, relative to its
/// initial value.
const MONOTONE_RTOL: f64 = 1e-10;
const SUBLEVEL_SLACK: f64 = 1e-8;
const SAMPLED_R: f64 = 0.1;
const SAMPLED_HORIZON: f64 = 60.0;
const NOISE_AMPLITUDE: f64 = 0.01;
const CHEMOSTAT_RUNS: usize = 50;
const CHEMOSTAT_SEED: u64 = 42;
const CHEMOSTAT_HORIZON: f64 = 300.0;
const CHEMOSTAT_DT: f64 = 0.02;
const RATE_FLOOR_FRACTION: f64 = 0.9;
const CONTRAST_HORIZON: f64 = 100.0;
const CONTRAST_DT: f64 = 0.01;
const STRUCTURE_POINTS: usize = 1000;
const PULLBACK_TOL: f64 = 1e-12;
const CORRECTION_TOL: f64 = 1e-10;
const KHAT_TOL: f64 = 1e-12;
const GRADIENT_TOL: f64 = 1e-6;
const HALF_STEP_TOL: f64 = 1e-6;
const GROWTH_SLACK: f64 = 1e-6;

fn verdict(criterion: &str, ok: bool, detail: &str) {
    println!(
        "{} criterion {criterion}: {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
}

fn reference_gains() -> PlanarGainParams {
    let (p, q, a, b) = planar_reference_params();
    planar_gains(p, q, a, b).unwrap()
}

fn planar() -> CompactObserver {
    planar_observer(&reference_gains()).unwrap()
}

fn chemostat() -> OpenSetObserver {
    let params = ChemostatParams::default();
    let op = ChemostatObserverParams::select(&params, CHEMOSTAT_DEFAULT_EPS, CHEMOSTAT_DEFAULT_A)
        .unwrap();
    chemostat_observer(&params, &op).unwrap()
}

#[test]
fn criterion_1_certification() {
    let obs = planar();
    let mut all = true;
    for id in [
        InequalityId::H1,
        InequalityId::H2,
        InequalityId::H3Sufficient,
    ] {
        let start = Instant::now();
        let spec = InequalitySpec::compact_default(id, &obs, 10.0, 1).unwrap();
        let report = certify(
            &spec,
            Problem::Compact(&obs),
            CERTIFY_SAMPLES,
            DEFAULT_SLACK_TOL,
        )
        .unwrap();
        let secs = start.elapsed().as_secs_f64();
        let ok = report.passed && secs < CERTIFY_TIME_LIMIT_S;
        all &= ok;
        verdict(
            &format!("1/{id}"),
            ok,
            &format!(
                "{} samples, worst slack {:.3e}, {} violations, {secs:.2} s (limit {CERTIFY_TIME_LIMIT_S} s)",
                report.samples_tested,
                report.worst_margin,
                report.violations.len()
            ),
        );
    }

    let open = chemostat();
    let params = ChemostatParams::default();
    let region = obsx::cli::chemostat_default_region(InequalityId::P1, &params);
    let start = Instant::now();
    let spec = InequalitySpec::new(InequalityId::P1, region, 1);
    let report = certify(
        &spec,
        Problem::OpenSet(&open),
        CERTIFY_SAMPLES,
        DEFAULT_SLACK_TOL,
    )
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let ok = report.passed && secs < CERTIFY_TIME_LIMIT_S;
    all &= ok;
    verdict(
        "1/P1",
        ok,
        &format!(
            "chemostat candidate, P = I/2, mu = theta = {}: {} samples, worst slack {:.3e}, {} violations, {secs:.2} s",
            open.mu,
            report.samples_tested,
            report.worst_margin,
            report.violations.len()
        ),
    );
    verdict(
        "1",
        all,
        "all four certifications pass within the time limit",
    );
    assert!(all);
}

#[test]
fn criterion_2_gain_oracle() {
    let (p, q, a, b) = planar_reference_params();
    let g = planar_gains(p, q, a, b).unwrap();
    let identity = q + 2.0 + 3.0 * b + 36.0 * q * b * b;
    let ratio = 10411.0 / (2.0 * (q - p * p));
    let l1 = -p * ratio;
    let l2 = -(p * p * ratio + 1.0) / q;
    let bound = (2.0 * a * a - 5.0) / (16.0 * 2f64.sqrt() * b);
    let gain = g.l1.abs().max(g.l2.abs());
    let rel = |x: f64, y: f64| (x - y).abs() / y.abs();
    let ok = rel(identity, 10411.0) <= GAIN_RTOL
        && rel(g.l1, l1) <= GAIN_RTOL
        && rel(g.l2, l2) <= GAIN_RTOL
        && gain <= bound * (1.0 + GAIN_RTOL);
    verdict(
        "2",
        ok,
        &format!(
            "L1 = {:.15e} (oracle {l1:.15e}), L2 = {:.15e} (oracle {l2:.15e}), max gain {gain:.6e} <= bound {bound:.6e}, normaliser {identity}",
            g.l1, g.l2
        ),
    );
    assert!(ok);
}

struct PlanarCase {
    x0: Vec<f64>,
    xi0: Vec<f64>,
    input: InputSignal,
}

fn planar_cases(obs: &CompactObserver) -> Vec<PlanarCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..PLANAR_RUNS)
        .map(|_| {
            let x0 = (0..2).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let xi0 = (0..2).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let input =
                InputSignal::random_sinusoid(&mut rng, &[(-1.0, 1.0)], obs.model.input_box())
                    .unwrap();
            PlanarCase { x0, xi0, input }
        })
        .collect()
}

#[test]
fn criterion_3_continuous_convergence() {
    let obs = planar();
    let mut all = true;
    let mut worst_rise = 0.0f64;
    let mut worst_ratio = 0.0f64;
    for (i, case) in planar_cases(&obs).iter().enumerate() {
        let run = run_continuous(
            &obs,
            &case.x0,
            &case.xi0,
            PLANAR_HORIZON,
            &case.input,
            &StepControl::fixed(PLANAR_DT),
        )
        .unwrap();
        let tx = entry_time_bound(&obs.cert, &case.x0, 10_000, i as u64)
            .unwrap()
            .t;
        let txi = entry_time_to_level(&obs.cert, &case.xi0, obs.cert.ramp_end, 10_000, i as u64)
            .unwrap()
            .t;
        let t_star = tx.max(txi);
        let traj = &run.trajectory;
        let q: Vec<f64> = (0..traj.len())
            .map(|k| obs.spec.weighted(&run.error(k)))
            .collect();
        let rise = (1..traj.len())
            .filter(|&k| traj.times[k - 1] >= t_star)
            .map(|k| (q[k] - q[k - 1]) / q[0])
            .fold(0.0f64, f64::max);
        let ratio = run.error_norm(traj.len() - 1) / run.error_norm(0);
        worst_rise = worst_rise.max(rise);
        worst_ratio = worst_ratio.max(ratio);
        all &= rise <= MONOTONE_RTOL && ratio < TERMINAL_RATIO;
    }
    verdict(
        "3",
        all,
        &format!(
            "{PLANAR_RUNS} runs, horizon {PLANAR_HORIZON}: worst relative rise of Q after T* {worst_rise:.3e} (tol {MONOTONE_RTOL:e}), worst terminal/initial {worst_ratio:.3e} (< {TERMINAL_RATIO:e})"
        ),
    );
    assert!(all);
}

#[test]
fn criterion_4_entry_time() {
    let obs = planar();
    let level = obs.cert.inner_level;
    let mut all = true;
    let mut tightest = f64::INFINITY;
    let mut worst_excess = f64::NEG_INFINITY;
    for (i, case) in planar_cases(&obs).iter().enumerate() {
        let run = run_continuous(
            &obs,
            &case.x0,
            &case.xi0,
            PLANAR_HORIZON,
            &case.input,
            &StepControl::fixed(PLANAR_DT),
        )
        .unwrap();
        let bound = entry_time_bound(&obs.cert, &case.x0, 10_000, i as u64)
            .unwrap()
            .t;
        let traj = &run.trajectory;
        let v = |k: usize| obs.cert.value(&traj.states[k][..2]);
        let entry = (0..traj.len())
            .find(|&k| v(k) <= level)
            .map(|k| traj.times[k]);
        let cap = obs.cert.value(&case.x0).max(level) + SUBLEVEL_SLACK;
        let excess = (0..traj.len())
            .map(|k| v(k) - cap)
            .fold(f64::NEG_INFINITY, f64::max);
        worst_excess = worst_excess.max(excess);
        match entry {
            Some(t) => {
                tightest = tightest.min(bound - t);
                all &= t <= bound;
            }
            None => all = false,
        }
        all &= excess <= 0.0;
    }
    verdict(
        "4",
        all,
        &format!(
            "{PLANAR_RUNS} runs: smallest margin bound - entry {tightest:.3e}, max of V - (max(V0, R) + {SUBLEVEL_SLACK:e}) = {worst_excess:.3e}"
        ),
    );
    assert!(all);
}

#[test]
fn criterion_5_sampled_iss() {
    let obs = planar();
    let g = estimate_g(&obs, 20_000, 3).unwrap();
    let input = InputSignal::constant(vec![0.3], obs.model.input_box()).unwrap();
    let sigma = obsx::cli::pilot_rate(
        &obs,
        &[2.0, -1.0],
        &[-2.0, 2.5],
        SAMPLED_HORIZON,
        &input,
        PLANAR_DT,
    )
    .unwrap();
    let sel = select_r(
        g.lipschitz,
        obs.spec.p_norm(),
        obs.cert.contraction,
        obs.spec.mu,
        sigma,
    )
    .unwrap();
    let run = |amplitude: f64| {
        let cfg = SampledConfig {
            diameter: SAMPLED_R,
            lipschitz: g.lipschitz,
            gamma_iss: sel.gamma_iss,
            sigma,
            noise: NoiseModel { amplitude, seed: 5 },
            certified: SAMPLED_R <= sel.diameter,
            max_jumps: DEFAULT_MAX_JUMPS,
        };
        run_sampled(
            &obs,
            &cfg,
            &[2.0, -1.0],
            &[-2.0, 2.5],
            0.0,
            SAMPLED_HORIZON,
            &input,
            &StepControl::fixed(PLANAR_DT),
        )
        .unwrap()
    };
    let clean = run(0.0);
    let noisy = run(NOISE_AMPLITUDE);
    let rate = clean.report.fit.map_or(f64::NAN, |f| f.sigma);
    let ratio = clean.report.final_error / clean.report.initial_error;
    let tail_cap = sel.gamma_iss * NOISE_AMPLITUDE;
    let max_interval = clean.report.max_interval.max(noisy.report.max_interval);
    let ok = rate > 0.0
        && ratio < TERMINAL_RATIO
        && noisy.report.tail_sup_error <= tail_cap
        && max_interval <= SAMPLED_R * (1.0 + 1e-12);
    verdict(
        "5",
        ok,
        &format!(
            "r = {SAMPLED_R} (certified r = {:.3e} with pilot rate {sigma:.3}): clean rate {rate:.3} with terminal/initial {ratio:.3e}; noisy tail sup {:.3e} <= gamma * {NOISE_AMPLITUDE} = {tail_cap:.3e}; max interval {max_interval:.6}",
            sel.diameter, noisy.report.tail_sup_error
        ),
    );
    assert!(ok);
}

fn chemostat_batch(obs: &OpenSetObserver) -> Vec<OpenSetReport> {
    let params = ChemostatParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(CHEMOSTAT_SEED);
    let scenarios: Vec<_> = (0..CHEMOSTAT_RUNS)
        .map(|_| random_chemostat_scenario(&mut rng, &params).unwrap())
        .collect();
    scenarios
        .par_iter()
        .map(|s| {
            run_openset(
                obs,
                &s.x0,
                &s.z0,
                CHEMOSTAT_HORIZON,
                &s.input,
                &StepControl::fixed(CHEMOSTAT_DT),
                OpenSetVariant::Corrected,
                OpenSetScheme::PositiveLog,
            )
            .unwrap()
            .report
        })
        .collect()
}

fn contrast(obs: &OpenSetObserver) -> Option<(OpenSetReport, OpenSetReport)> {
    let input = InputSignal::constant(vec![0.1, 2.0], obs.plant.input_box()).unwrap();
    let ctrl = StepControl::fixed(CONTRAST_DT);
    let z0 = [0.05, 0.01];
    let x0 = find_contrast_scenario(
        obs,
        &z0,
        0.5,
        CONTRAST_HORIZON,
        &input,
        &ctrl,
        OpenSetScheme::PositiveLog,
    )
    .unwrap()?;
    let run = |variant| {
        run_openset(
            obs,
            &x0,
            &z0,
            CONTRAST_HORIZON,
            &input,
            &ctrl,
            variant,
            OpenSetScheme::PositiveLog,
        )
        .unwrap()
        .report
    };
    Some((
        run(OpenSetVariant::Candidate),
        run(OpenSetVariant::Corrected),
    ))
}

#[test]
fn criterion_6_open_set_observer() {
    let obs = chemostat();
    let floor = RATE_FLOOR_FRACTION * CHEMOSTAT_DEFAULT_EPS * obs.mu / 2.0;
    let reports = chemostat_batch(&obs);
    let positive = reports.iter().filter(|r| !r.positivity_violated).count();
    let min_rate = reports
        .iter()
        .map(|r| r.fit.map_or(f64::NAN, |f| f.sigma))
        .fold(f64::INFINITY, f64::min);
    let batch_ok = positive == CHEMOSTAT_RUNS && min_rate >= floor;
    verdict(
        "6/batch",
        batch_ok,
        &format!(
            "{positive}/{CHEMOSTAT_RUNS} runs stay in the open quadrant; min fitted rate {min_rate:.4} >= {RATE_FLOOR_FRACTION} * eps * mu / 2 = {floor:.5}"
        ),
    );
    let contrast_ok = match contrast(&obs) {
        Some((candidate, corrected)) => {
            let ok = candidate.positivity_violated && !corrected.positivity_violated;
            verdict(
                "6/contrast",
                ok,
                &format!(
                    "candidate leaves the quadrant at t = {:?}, corrected stays positive (min log coordinate {:?})",
                    candidate.first_violation_time, corrected.min_log_coordinate
                ),
            );
            ok
        }
        None => {
            verdict("6/contrast", false, "no contrast scenario found");
            false
        }
    };
    verdict("6", batch_ok && contrast_ok, "batch and contrast");
    assert!(batch_ok && contrast_ok);
}

#[test]
fn criterion_7_structural_identities() {
    let obs = chemostat();
    let params = ChemostatParams::default();
    let chart = obs.design.chart.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let mut pullback = 0.0f64;
    let mut closed_k = 0.0f64;
    for _ in 0..STRUCTURE_POINTS {
        let z = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];
        let y = rng.gen_range(0.0..3.0);
        let u = [rng.gen_range(0.05..2.0), rng.gen_range(0.05..2.0)];
        let kt = pullback_k(chart, obs.candidate.as_ref(), &z, &[y], &u).unwrap();
        let pushed = chart.jacobian(&z) * nalgebra::DVector::from_column_slice(&kt);
        let direct = obs.candidate.eval(&chart.to_open(&z), &[y], &u);
        let scale = direct.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
        let res = (0..2)
            .map(|i| (pushed[i] - direct[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        pullback = pullback.max(res / scale);
        let closed = chemostat_ktilde_closed(&z, y, &u, &params);
        for i in 0..2 {
            closed_k = closed_k.max((kt[i] - closed[i]).abs() / closed[i].abs().max(1.0));
        }
    }

    let mut correction = 0.0f64;
    let mut active = 0;
    for _ in 0..STRUCTURE_POINTS {
        let big_z = [
            rng.gen_range(0.01..20.0),
            10f64.powf(rng.gen_range(-6.0..1.0)),
        ];
        let y = rng.gen_range(0.0..5.0);
        let u = [rng.gen_range(0.05..2.0), rng.gen_range(0.05..2.0)];
        let composed = observer_g_rhs(&obs, &big_z, &[y], &u).unwrap();
        let z = [big_z[0].ln(), big_z[1].ln()];
        let kt = chemostat_ktilde_closed(&z, y, &u, &params);
        let lambda = lambda_gain(&obs.design, &z, &[y], &u, &kt).unwrap();
        active += (lambda > 0.0) as usize;
        let closed = chemostat_observer_closed(&big_z, y, &u, lambda, &params);
        for i in 0..2 {
            correction = correction.max((composed[i] - closed[i]).abs() / closed[i].abs().max(1.0));
        }
    }

    let gains = reference_gains();
    let planar_obs = planar();
    let bump = planar_obs.cert.bump();
    let mut khat = 0.0f64;
    for _ in 0..STRUCTURE_POINTS {
        let xi = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];
        let y = rng.gen_range(-2.0..2.0);
        let u = rng.gen_range(-1.0..1.0);
        let a = planar_obs.khat(&xi, &[y], &[u]).unwrap();
        let b = planar_khat_closed(&xi, y, u, &gains, &bump);
        for i in 0..2 {
            khat = khat.max((a[i] - b[i]).abs() / b[i].abs().max(1.0));
        }
    }

    let ok = pullback < PULLBACK_TOL
        && closed_k < KHAT_TOL
        && correction < CORRECTION_TOL
        && active > 0
        && khat < KHAT_TOL;
    verdict(
        "7",
        ok,
        &format!(
            "{STRUCTURE_POINTS} points each: pullback residual {pullback:.2e} (< {PULLBACK_TOL:e}), pulled-back candidate vs closed form {closed_k:.2e} (< {KHAT_TOL:e}), composed correction vs closed form {correction:.2e} (< {CORRECTION_TOL:e}, {active} active), planar corrected injection vs closed form {khat:.2e} (< {KHAT_TOL:e})"
        ),
    );
    assert!(ok);
}

fn box_points(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<Vec<f64>> {
    (0..STRUCTURE_POINTS)
        .map(|_| (0..n).map(|_| rng.gen_range(lo..hi)).collect())
        .collect()
}

const SCENARIO: &str = r#"
kind = "sampled"
system = "planar"
horizon = 10.0
dt = 0.01
seed = 11

[initial]
plant = [1.0, -1.0]
observer = [-1.5, 2.0]

[input]
kind = "sinusoid"
offset = [0.0]
amplitude = [0.8]
frequency = [1.3]
phase = [0.2]

[sampled]
diameter = 0.1
noise_amplitude = 0.01
g_samples = 5000
"#;

#[test]
fn criterion_8_numerics_hygiene() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let h = 1e-5;
    let quartic = QuarticDissipation;
    let planar_model = obsx::systems::PlanarSystem;
    let chem = Chemostat {
        params: ChemostatParams::default(),
    };
    let planar_pts = box_points(&mut rng, 2, -4.0, 4.0);
    let positive_pts = box_points(&mut rng, 2, 0.05, 5.0);
    let log_pts = box_points(&mut rng, 2, -3.0, 3.0);
    let checks = [
        (
            "V",
            check_gradient(
                |x| quartic.value(x),
                |x| quartic.gradient(x),
                &planar_pts,
                h,
            ),
        ),
        (
            "planar h",
            check_gradient(
                |x| planar_model.h(x)[0],
                |x| planar_model.grad_h(x)[0].clone(),
                &planar_pts,
                h,
            ),
        ),
        (
            "chemostat h",
            check_gradient(
                |x| chem.h(x)[0],
                |x| chem.grad_h(x)[0].clone(),
                &positive_pts,
                h,
            ),
        ),
        (
            "W",
            check_gradient(chemostat_w, chemostat_w_gradient, &log_pts, h),
        ),
    ];
    let mut grad_ok = true;
    let mut grad_detail = Vec::new();
    for (name, r) in &checks {
        let err = r.clone().unwrap_or(f64::INFINITY);
        grad_ok &= err < GRADIENT_TOL;
        grad_detail.push(format!("{name} {err:.2e}"));
    }
    verdict(
        "8/gradients",
        grad_ok,
        &format!("{} (< {GRADIENT_TOL:e})", grad_detail.join(", ")),
    );

    let input = InputSignal::new(
        obsx::systems::InputKind::Sinusoid {
            offset: vec![0.0],
            amplitude: vec![1.0],
            frequency: vec![1.0],
            phase: vec![0.0],
        },
        vec![(-1.0, 1.0)],
    )
    .unwrap();
    let solve = |dt: f64| {
        let rhs = |t: f64, x: &[f64]| planar_f(x, input.eval(t)[0]).unwrap().to_vec();
        integrate(rhs, &[1.0, 1.0], (0.0, 5.0), &StepControl::fixed(dt))
            .unwrap()
            .final_state()
            .to_vec()
    };
    let reference = solve(0.000625);
    let err = |dt: f64| {
        let s = solve(dt);
        ((s[0] - reference[0]).powi(2) + (s[1] - reference[1]).powi(2)).sqrt()
    };
    let (e1, e2, e3) = (err(0.1), err(0.05), err(0.025));
    let (r1, r2) = (e1 / e2, e2 / e3);
    let halving = err(0.01);
    let order_ok =
        (12.0..20.0).contains(&r1) && (12.0..20.0).contains(&r2) && halving < HALF_STEP_TOL;
    verdict(
        "8/order",
        order_ok,
        &format!(
            "error ratios under step halving {r1:.2}, {r2:.2} (in [12, 20)); dt = 0.01 against dt = 0.005: {:.2e} (< {HALF_STEP_TOL:e})",
            {
                let a = solve(0.01);
                let b = solve(0.005);
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
            }
        ),
    );

    let sc = Scenario::parse(SCENARIO).unwrap();
    let first = execute(&sc).unwrap();
    let second = execute(&sc).unwrap();
    let dir = tempfile::tempdir().unwrap();
    first.write(&dir.path().join("a")).unwrap();
    second.write(&dir.path().join("b")).unwrap();
    let same = ["trajectory.csv", "plot.csv", "report.json"]
        .iter()
        .all(|f| {
            std::fs::read(dir.path().join("a").join(f)).unwrap()
                == std::fs::read(dir.path().join("b").join(f)).unwrap()
        });
    verdict(
        "8/determinism",
        same,
        "two runs of one seeded scenario write identical bytes",
    );

    let ok = grad_ok && order_ok && same;
    verdict("8", ok, "gradients, step-halving order, determinism");
    assert!(ok);
}

#[test]
fn criterion_9_forward_completeness() {
    let obs = chemostat();
    let mut reports = chemostat_batch(&obs);
    if let Some((_, corrected)) = contrast(&obs) {
        reports.push(corrected);
    }
    let input = InputSignal::constant(vec![0.1, 2.0], obs.plant.input_box()).unwrap();
    reports.push(
        run_openset(
            &obs,
            &[1.0, 0.5],
            &[3.0, 2.0],
            CHEMOSTAT_HORIZON,
            &input,
            &StepControl::fixed(CHEMOSTAT_DT),
            OpenSetVariant::Corrected,
            OpenSetScheme::PositiveLog,
        )
        .unwrap()
        .report,
    );
    let allowance = GROWTH_SLACK.ln_1p();
    let checked: Vec<f64> = reports
        .iter()
        .map(|r| r.growth_bound.map_or(f64::INFINITY, |g| g.worst_log_excess))
        .collect();
    let worst = checked.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ok = worst <= allowance;
    verdict(
        "9",
        ok,
        &format!(
            "{} corrected runs: worst ln W(z(t)) - ln W(z(0)) - int beta = {worst:.3e} (<= ln(1 + {GROWTH_SLACK:e}))",
            checked.len()
        ),
    );
    assert!(ok);
}
