//! Acceptance suite. Runs every criterion and prints one PASS/FAIL line
//! each; exits non-zero if any criterion fails.
//!
//! The optional real-data check runs when `BNN_EOL_REAL_DATA` names a
//! cellhist-v1 file.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng as _;
use rand_distr::StandardNormal;

use bnn_eol::baselines::fit_elastic_net;
use bnn_eol::bnn::{
    elbo_loss_weighted, gradients, kl_gaussian, Batch, BnnModel, Estimator, Init, ParamKind, TargetScaling,
};
use bnn_eol::cli::run_cli;
use bnn_eol::data::{filter_usable, load_cell_histories, CellHistory, DEFAULT_MIN_EOL};
use bnn_eol::eval::{run_experiment, ExperimentConfig, ExperimentReport, ModelKind};
use bnn_eol::features::{auxiliary_features, delta_q_features, fade_regression, FeatureConfig};
use bnn_eol::optim::{PlateauSchedule, ScheduleConfig};
use bnn_eol::predictor::{ci95, fit_gaussian};
use bnn_eol::seed::rng_from;
use bnn_eol::synthetic::{
    generate_cell, generate_fleet, FadeCurve, FleetRanges, SyntheticCellParams, TEMPERATURE_POINTS,
};

const FLEET_SEED: u64 = 2718;
const EXPERIMENT_SEED: u64 = 31;
const EVAL_CYCLES: [u32; 4] = [100, 200, 300, 400];

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within_budget(outcome: Outcome, elapsed: Duration, budget: Duration) -> Outcome {
    let secs = elapsed.as_secs_f64();
    match outcome {
        Ok(d) if elapsed <= budget => Ok(format!("{d}; {secs:.1}s")),
        Ok(d) => Err(format!("{d}; {secs:.1}s exceeds {}s", budget.as_secs())),
        Err(d) => Err(format!("{d}; {secs:.1}s")),
    }
}

fn gradient_gate() -> Outcome {
    let archs: [&[usize]; 2] = [&[4], &[16, 16]];
    let mut worst = 0.0f64;
    let mut max_loss = 0.0f64;
    let mut failures = Vec::new();
    for instance in 0..20u64 {
        let mut rng = rng_from(1000 + instance);
        let dims = archs[(instance % 2) as usize];
        let mut model = BnnModel::new(9, dims, &Init { mu_sd: 0.3, rho: -3.0 }, &mut rng);
        model.estimator = if instance % 4 < 2 {
            Estimator::Reparameterization
        } else {
            Estimator::Flipout
        };
        let mut params = model.flat_params();
        for block in model.param_layout() {
            if block.kind == ParamKind::Rho {
                for p in &mut params[block.offset..block.offset + block.len] {
                    *p = rng.gen_range(-5.0..-1.0);
                }
            }
        }
        model.set_flat_params(&params).unwrap();
        let n = rng.gen_range(2..=8);
        let inputs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..9).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let targets: Vec<f64> = (0..n).map(|_| rng.gen_range(500.0..2000.0)).collect();
        model.target = TargetScaling::fit(&targets).unwrap();
        let kl_weight = 1.0 / rng.gen_range(20..100) as f64;
        let batch = Batch::new(&inputs, &targets).unwrap();
        let noise = model.sample_noise(n, &mut rng);
        let analytic = gradients(&model, &batch, &noise, kl_weight).unwrap();
        max_loss = max_loss.max(analytic.loss.abs());
        let analytic = analytic.flat;

        let h = 1e-5;
        let mut probe = model.clone();
        for k in 0..params.len() {
            let mut q = params.clone();
            q[k] = params[k] + h;
            probe.set_flat_params(&q).unwrap();
            let up = elbo_loss_weighted(&probe, &batch, &noise, kl_weight).unwrap();
            q[k] = params[k] - h;
            probe.set_flat_params(&q).unwrap();
            let down = elbo_loss_weighted(&probe, &batch, &noise, kl_weight).unwrap();
            let fd = (up - down) / (2.0 * h);
            let g = analytic[k];
            let abs = (g - fd).abs();
            let ok = if g.abs() < 1e-3 {
                abs < 1e-7
            } else {
                let rel = abs / g.abs().max(fd.abs());
                worst = worst.max(rel);
                rel < 1e-4
            };
            if !ok {
                failures.push(format!("instance {instance} param {k}: {g:e} vs {fd:e}"));
            }
        }
    }
    check(
        failures.is_empty(),
        format!(
            "20 instances, worst relative error {worst:.2e}, largest |loss| {max_loss:.2}{}",
            failures.first().map(|f| format!(", first mismatch {f}")).unwrap_or_default()
        ),
    )
}

fn kl_oracle() -> Outcome {
    let mut rng = rng_from(77);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let mu: f64 = rng.gen_range(0.5..2.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let sigma: f64 = rng.gen_range(0.1..0.7);
        let m = 1_000_000;
        let mut total = 0.0;
        for _ in 0..m {
            let e: f64 = rng.sample(StandardNormal);
            let w = mu + sigma * e;
            // log q(w) - log p(w), the 2π terms cancel
            total += -sigma.ln() - 0.5 * e * e + 0.5 * w * w;
        }
        let mc = total / m as f64;
        let exact = kl_gaussian(mu, sigma).unwrap();
        worst = worst.max((exact - mc).abs() / mc.abs());
    }
    let zero = kl_gaussian(0.0, 1.0).unwrap();
    check(
        worst < 0.01 && zero == 0.0,
        format!("worst relative error {:.3}%, kl(0, 1) = {zero}", 100.0 * worst),
    )
}

fn predictor_formulas() -> Outcome {
    let (mu, sigma) = fit_gaussian(&[700.0, 800.0, 900.0]).unwrap();
    let (lo, hi) = ci95(848.5, 63.0).unwrap();
    check(
        mu == 800.0 && sigma == 100.0 && (lo - 725.0).abs() <= 0.5 && (hi - 972.0).abs() <= 0.5,
        format!("fit = ({mu}, {sigma}), interval = ({lo:.3}, {hi:.3})"),
    )
}

fn schedule_conformance() -> Outcome {
    let mut schedule = PlateauSchedule::new(ScheduleConfig::default()).unwrap();
    let mut trace = Vec::new();
    let mut epochs = 0;
    while !schedule.stopped() && epochs < 10_000 {
        let lr = schedule.lr();
        if trace.last() != Some(&lr) {
            trace.push(lr);
        }
        schedule.observe(1.0);
        epochs += 1;
    }
    let expected = [0.05, 0.025, 0.0125, 0.00625, 0.003125, 0.0015625, 0.001];
    check(
        trace == expected && schedule.stopped(),
        format!("lr trace {trace:?}, stopped after {epochs} epochs"),
    )
}

fn noise_free_params(target_eol: u32, rate: f64, knee: f64, sharpness: f64) -> SyntheticCellParams {
    SyntheticCellParams {
        target_eol,
        linear_fade_rate: rate,
        knee_position: knee,
        knee_sharpness: sharpness,
        ..Default::default()
    }
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

/// `Q(v)` by linear interpolation of a descending-voltage curve.
fn interpolate(voltage: &[f64], capacity: &[f64], v: f64) -> f64 {
    for j in 1..voltage.len() {
        if voltage[j] <= v {
            let t = (voltage[j - 1] - v) / (voltage[j - 1] - voltage[j]);
            return capacity[j - 1] + t * (capacity[j] - capacity[j - 1]);
        }
    }
    *capacity.last().unwrap()
}

fn brute_force_delta_q(history: &CellHistory, c: u32, points: usize) -> (f64, f64) {
    let reference = &history.cycles[9].discharge_curve;
    let current = &history.cycles[c as usize - 1].discharge_curve;
    let lo = reference.voltage.last().unwrap().max(*current.voltage.last().unwrap());
    let hi = reference.voltage[0].min(current.voltage[0]);
    let delta: Vec<f64> = (0..points)
        .map(|i| {
            let v = lo + (hi - lo) * i as f64 / (points - 1) as f64;
            interpolate(&current.voltage, &current.capacity, v) - interpolate(&reference.voltage, &reference.capacity, v)
        })
        .collect();
    let n = delta.len() as f64;
    let mean = delta.iter().sum::<f64>() / n;
    let var = delta.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    (delta.iter().copied().fold(f64::INFINITY, f64::min), var)
}

fn feature_oracle() -> Outcome {
    let cells = [
        (noise_free_params(800, 5e-5, 0.7, 6.0), 100),
        (noise_free_params(1500, 2e-5, 0.6, 8.0), 200),
        (noise_free_params(2000, 8e-5, 0.8, 4.0), 300),
        (noise_free_params(500, 3e-5, 0.5, 10.0), 50),
    ];
    let raw = FeatureConfig {
        log_transform: false,
        ..Default::default()
    };
    let mut slope_err = 0.0f64;
    let mut dq_err = 0.0f64;
    let mut aux_err = 0.0f64;
    for (i, (p, c)) in cells.iter().enumerate() {
        let history = generate_cell(i as u64, p, *c).unwrap();
        let view = history.view();

        let (slope, _) = fade_regression(&view, *c).unwrap();
        slope_err = slope_err.max((-slope - p.linear_fade_rate).abs());

        let (dq_min, dq_var) = delta_q_features(&view, *c, &raw).unwrap();
        let (bf_min, bf_var) = brute_force_delta_q(&history, *c, 100_000);
        dq_err = dq_err.max(relative(dq_min, bf_min)).max(relative(dq_var, bf_var));

        let fade = FadeCurve::solve(p).unwrap();
        let q = |k: u32| fade.capacity(k as f64);
        let r = |k: u32| p.base_resistance + p.resistance_growth * k as f64;
        let aux = auxiliary_features(&view, *c).unwrap();
        let charge = |k: u32| p.charge_time_base * q(k) / p.nominal_capacity;
        // trapezoid rule over the sampled half-sine heating profile
        let segments = (TEMPERATURE_POINTS - 1) as f64;
        let sine_sum = 1.0 / (std::f64::consts::PI / (2.0 * segments)).tan();
        let temp_integral: f64 = (2..=*c)
            .map(|k| {
                let duration = 60.0 * (charge(k) + 60.0 * q(k) / p.nominal_capacity);
                let heating = p.temperature_amplitude * r(k) / p.base_resistance;
                duration * (p.base_temperature + heating * sine_sum / segments)
            })
            .sum();
        let errors = [
            relative(aux.qd_cycle2, q(2)),
            relative(aux.avg_charge_time, (1..=5).map(charge).sum::<f64>() / 5.0),
            relative(aux.temp_integral, temp_integral),
            relative(aux.min_resistance, r(2)),
            relative(aux.resistance_diff, p.resistance_growth * (*c - 2) as f64),
        ];
        aux_err = errors.iter().fold(aux_err, |m, &e| m.max(e));
    }
    check(
        slope_err < 1e-6 && dq_err < 1e-3 && aux_err < 1e-9,
        format!(
            "slope error {slope_err:.2e} Ah/cycle, ΔQ relative error {dq_err:.2e}, auxiliary relative error {aux_err:.2e}"
        ),
    )
}

fn synthetic_experiment() -> (ExperimentReport, Duration) {
    let start = Instant::now();
    let fleet = generate_fleet(FLEET_SEED, 100, &FleetRanges::default()).unwrap();
    let fleet = filter_usable(fleet, DEFAULT_MIN_EOL).unwrap();
    let config = ExperimentConfig {
        base_seed: EXPERIMENT_SEED,
        ..Default::default()
    };
    let report = run_experiment(&fleet, &config).unwrap();
    (report, start.elapsed())
}

fn print_report(report: &ExperimentReport) {
    println!("  cycle  model  test MAE   test MAPE  test sigma  coverage");
    for row in &report.rows {
        println!(
            "  {:>5}  {:<5}  {:>8.1}  {:>9.2}%  {:>10}  {:>8}",
            row.cycle,
            row.model.name(),
            row.test_mae,
            row.test_mape,
            row.test_sigma.map(|s| format!("{s:.1}")).unwrap_or_else(|| "-".into()),
            row.test_coverage.map(|s| format!("{s:.1}%")).unwrap_or_else(|| "-".into()),
        );
    }
}

fn end_to_end(report: &ExperimentReport) -> Outcome {
    let bnn = |c| report.row(c, ModelKind::Bnn).expect("missing report row");
    let mape_400 = bnn(400).test_mape;
    let mape_100 = bnn(100).test_mape;
    let sigma_100 = bnn(100).test_sigma.unwrap();
    let sigma_400 = bnn(400).test_sigma.unwrap();
    let coverage: Vec<f64> = EVAL_CYCLES.iter().map(|&c| bnn(c).test_coverage.unwrap()).collect();
    let a = mape_400 <= 15.0;
    let b = mape_400 < mape_100;
    let c = sigma_100 > sigma_400;
    let d = coverage.iter().all(|v| (85.0..=99.0).contains(v));
    let flag = |ok: bool| if ok { "ok" } else { "FAILED" };
    check(
        a && b && c && d && report.excluded.is_empty(),
        format!(
            "{} runs; (a) MAPE@400 {mape_400:.2}% {}; (b) MAPE {mape_100:.2}% -> {mape_400:.2}% {}; \
             (c) sigma {sigma_100:.1} -> {sigma_400:.1} {}; (d) coverage {coverage:?} {}",
            report.n_runs,
            flag(a),
            flag(b),
            flag(c),
            flag(d)
        ),
    )
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

fn baseline_parity(report: &ExperimentReport) -> Outcome {
    let mean_mae = |m| {
        EVAL_CYCLES
            .iter()
            .map(|&c| report.row(c, m).expect("missing report row").test_mae)
            .sum::<f64>()
            / EVAL_CYCLES.len() as f64
    };
    let ratio = mean_mae(ModelKind::Bnn) / mean_mae(ModelKind::Nn);
    let per_cycle: Vec<String> = EVAL_CYCLES
        .iter()
        .map(|&c| {
            let b = report.row(c, ModelKind::Bnn).unwrap().test_mae;
            let n = report.row(c, ModelKind::Nn).unwrap().test_mae;
            format!("{:.2}", b / n)
        })
        .collect();

    let mut rng = rng_from(5);
    let x: Vec<Vec<f64>> = (0..20).map(|_| (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|r| 3.0 + r.iter().enumerate().map(|(j, v)| (j as f64 - 2.0) * v).sum::<f64>() + 0.3 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let design: Vec<Vec<f64>> = x.iter().map(|r| std::iter::once(1.0).chain(r.iter().copied()).collect()).collect();
    let xtx: Vec<Vec<f64>> = (0..6)
        .map(|i| (0..6).map(|j| design.iter().map(|r| r[i] * r[j]).sum()).collect())
        .collect();
    let xty: Vec<f64> = (0..6).map(|i| design.iter().zip(&y).map(|(r, t)| r[i] * t).sum()).collect();
    let ols = solve(xtx, xty);
    let en = fit_elastic_net(&x, &y, 0.0, 0.5, 1e-13, 1_000_000).unwrap();
    let en_err = en
        .coefficients
        .iter()
        .zip(&ols[1..])
        .map(|(a, b)| (a - b).abs())
        .fold((en.intercept - ols[0]).abs(), f64::max);

    check(
        (ratio - 1.0).abs() <= 0.25 && en_err <= 1e-6,
        format!("BNN/NN test MAE ratio {ratio:.3} (per cycle {per_cycle:?}); elastic net vs OLS {en_err:.2e}"),
    )
}

fn cli(args: &[&str]) -> Result<(), String> {
    let argv = std::iter::once("bnn-eol").chain(args.iter().copied());
    match run_cli(argv) {
        0 => Ok(()),
        code => Err(format!("`{}` exited with {code}", args.join(" "))),
    }
}

fn pipeline(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let (fleet, model) = (p("fleet.txt"), p("model.json"));
    cli(&["synth", "--seed", "11", "--cells", "40", "--out", &fleet, "--eol-range", "500:700"])?;
    cli(&["featurize", "--in", &fleet, "--cycle", "100", "--out", &p("features.csv")])?;
    cli(&["train", "--in", &fleet, "--cycle", "100", "--seed", "3", "--model-out", &model])?;
    cli(&[
        "predict", "--model", &model, "--in", &fleet, "--cell", "syn11-0000", "--samples", "200", "--seed", "9", "--out",
        &p("prediction.jsonl"), "--density-out", &p("density.csv"),
    ])?;
    cli(&[
        "evaluate", "--in", &fleet, "--runs", "2", "--seed", "4", "--cycles", "100,200", "--out-table", &p("table.csv"),
        "--out-json", &p("report.json"), "--out-predictions", &p("predictions.jsonl"),
    ])?;
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .map(|e| e.map(|e| e.path()).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    names.sort();
    names
        .into_iter()
        .map(|path| {
            let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
            Ok((path.file_name().unwrap().to_string_lossy().into_owned(), bytes))
        })
        .collect()
}

fn determinism() -> Outcome {
    let first = tempfile::tempdir().map_err(|e| e.to_string())?;
    let second = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = pipeline(first.path())?;
    let b = pipeline(second.path())?;
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    check(
        a.len() == 8 && a.len() == b.len() && differing.is_empty(),
        format!(
            "{} artefacts compared byte for byte{}",
            a.len(),
            if differing.is_empty() {
                String::new()
            } else {
                format!(", differing: {differing:?}")
            }
        ),
    )
}

fn real_data(path: &Path) -> Outcome {
    let all = load_cell_histories(path, None).map_err(|e| e.to_string())?;
    let n_all = all.len();
    let usable = filter_usable(all, DEFAULT_MIN_EOL).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let json = dir.path().join("report.json");
    let table = dir.path().join("table.csv");
    cli(&[
        "evaluate", "--in", &path.to_string_lossy(), "--seed", "0", "--out-table", &table.to_string_lossy(),
        "--out-json", &json.to_string_lossy(),
    ])?;
    let text = std::fs::read_to_string(&json).map_err(|e| e.to_string())?;
    let report: ExperimentReport = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    print_report(&report);
    let bnn = |c| report.row(c, ModelKind::Bnn).expect("missing report row");
    let mape: Vec<f64> = EVAL_CYCLES.iter().map(|&c| bnn(c).test_mape).collect();
    let sigma: Vec<f64> = EVAL_CYCLES.iter().map(|&c| bnn(c).test_sigma.unwrap()).collect();
    let decreasing = |v: &[f64]| v.windows(2).all(|w| w[1] < w[0]);
    let used = report.runs.first().map(|r| r.train_cells.len() + r.test_cells.len()).unwrap_or(0);
    check(
        decreasing(&mape) && decreasing(&sigma) && used == usable.len(),
        format!(
            "{used} of {n_all} cells used (expected {} with EoL >= {DEFAULT_MIN_EOL}); MAPE {mape:.2?}, sigma {sigma:.1?}",
            usable.len()
        ),
    )
}

fn main() {
    let mut failed = 0;
    let mut report_line = |id: &str, name: &str, outcome: Outcome| {
        match &outcome {
            Ok(d) => println!("PASS {id} {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {id} {name}: {d}")
            }
        }
    };
    let timed = |f: fn() -> Outcome, budget: u64| {
        let start = Instant::now();
        let outcome = f();
        within_budget(outcome, start.elapsed(), Duration::from_secs(budget))
    };

    report_line("C1", "gradient gate", timed(gradient_gate, 30));
    report_line("C2", "KL oracle", timed(kl_oracle, 10));
    report_line("C3", "predictor formulas", timed(predictor_formulas, 1));
    report_line("C4", "schedule conformance", timed(schedule_conformance, 1));
    report_line("C5", "feature oracle", timed(feature_oracle, 30));

    let (report, elapsed) = synthetic_experiment();
    print_report(&report);
    report_line(
        "C6",
        "end-to-end synthetic experiment",
        within_budget(end_to_end(&report), elapsed, Duration::from_secs(15 * 60)),
    );
    report_line("C7", "baseline parity", baseline_parity(&report));
    report_line("C8", "determinism", determinism());

    match std::env::var_os("BNN_EOL_REAL_DATA") {
        Some(path) => report_line("C9", "real-data directional check", real_data(Path::new(&path))),
        None => println!("SKIP C9 real-data directional check: BNN_EOL_REAL_DATA is not set"),
    }

    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
