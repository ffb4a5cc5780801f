//! The four commands: solve, simulate, calibrate, validate.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use serde::Serialize;

use lifecycle_core::calibration::{fit, CalibrationProblem, CalibrationTarget, ModelVariant};
use lifecycle_core::consumption::{self, ConsumptionSolution};
use lifecycle_core::policy::{policy_constant_b, MergedPolicy};
use lifecycle_core::quadrature::integrate;
use lifecycle_core::simulation::{
    budget_equality_mc, expected_curves, floor_margins_mc, replay_scenario, simulate_policy,
    verify_self_financing, ExpectedCurves, PathRecord,
};
use lifecycle_core::terminal;
use lifecycle_core::ModelContext;

use crate::config::RunConfig;
use crate::output::{asset_columns, percentile, CsvWriter};

pub struct Runtime {
    pub config: RunConfig,
    pub hash: u64,
    pub out_dir: PathBuf,
}

impl Runtime {
    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

#[derive(Serialize)]
struct SolveSummary {
    config_hash: String,
    seed: u64,
    v0: f64,
    v1_star: f64,
    v2_star: f64,
    lambda1_star: f64,
    floor_0: f64,
    floor1_0: f64,
    floor2_0: f64,
    value_total: f64,
    value_consumption: f64,
    value_terminal: f64,
}

fn curve_grid(config: &RunConfig) -> Vec<f64> {
    let horizon = config.cashflows.horizon;
    let m = config.calibration.grid_points;
    (0..=m).map(|k| k as f64 * horizon / m as f64).collect()
}

fn write_expected_curves(
    runtime: &Runtime,
    curves: &ExpectedCurves,
    path: &Path,
) -> anyhow::Result<()> {
    let mut columns = vec!["t".to_string(), "c_expected".to_string(), "v_expected".to_string()];
    columns.extend(asset_columns("exposure", curves.dim));
    columns.extend(asset_columns("allocation", curves.dim));
    let mut csv = CsvWriter::new(runtime.hash, runtime.config.seed, &columns);
    for (k, &t) in curves.times.iter().enumerate() {
        let mut row = vec![t, curves.consumption[k], curves.wealth[k]];
        row.extend_from_slice(&curves.exposure[k * curves.dim..(k + 1) * curves.dim]);
        row.extend_from_slice(&curves.allocation[k * curves.dim..(k + 1) * curves.dim]);
        csv.row(&row);
    }
    csv.save(path)
}

pub fn cmd_solve(runtime: &Runtime) -> anyhow::Result<()> {
    let ctx = runtime.config.context()?;
    let policy = MergedPolicy::solve(&ctx, runtime.config.v0)?;
    let value1 = consumption::value_function(&ctx, policy.v1_star())?;
    let value2 = terminal::value_function(&ctx, policy.v2_star())?;
    let summary = SolveSummary {
        config_hash: format!("{:016x}", runtime.hash),
        seed: runtime.config.seed,
        v0: runtime.config.v0,
        v1_star: policy.v1_star(),
        v2_star: policy.v2_star(),
        lambda1_star: policy.lambda1_star(),
        floor_0: ctx.floor_f(0.0)?,
        floor1_0: ctx.floor_f1(0.0)?,
        floor2_0: ctx.floor_f2(0.0),
        value_total: value1.value + value2.value,
        value_consumption: value1.value,
        value_terminal: value2.value,
    };
    std::fs::create_dir_all(&runtime.out_dir)?;
    let summary_path = runtime.out("solve_summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)? + "\n")?;
    let curves = expected_curves(&policy, &curve_grid(&runtime.config))?;
    write_expected_curves(runtime, &curves, &runtime.out("expected_curves.csv"))?;
    println!(
        "solved: v1*={:.4}, v2*={:.4}, lambda1*={:.6e}, F(0)={:.4}, F1(0)={:.4}, F2(0)={:.4}",
        policy.v1_star(),
        policy.v2_star(),
        policy.lambda1_star(),
        summary.floor_0,
        summary.floor1_0,
        summary.floor2_0
    );
    println!(
        "wrote {} and {}",
        summary_path.display(),
        runtime.out("expected_curves.csv").display()
    );
    Ok(())
}

fn path_columns(dim: usize, with_path: bool) -> Vec<String> {
    let mut columns = Vec::new();
    if with_path {
        columns.push("path".to_string());
    }
    columns.extend(["t".to_string(), "z".to_string()]);
    columns.extend(asset_columns("P", dim));
    columns.push("c_star".to_string());
    columns.extend(asset_columns("pi", dim));
    columns.extend(asset_columns("exposure", dim));
    columns.extend([
        "V_star".to_string(),
        "V1".to_string(),
        "V2".to_string(),
        "F_t".to_string(),
    ]);
    columns
}

fn record_row(rec: &PathRecord, i: usize) -> Vec<f64> {
    let dim = rec.dim;
    let mut row = vec![rec.times[i], rec.z[i]];
    row.extend_from_slice(&rec.prices[i * dim..(i + 1) * dim]);
    row.push(rec.c_star[i]);
    row.extend_from_slice(&rec.pi[i * dim..(i + 1) * dim]);
    row.extend_from_slice(&rec.exposure[i * dim..(i + 1) * dim]);
    row.extend([rec.v_star[i], rec.v1[i], rec.v2[i], rec.floor[i]]);
    row
}

pub fn cmd_simulate(
    runtime: &Runtime,
    paths: Option<usize>,
    steps: Option<usize>,
    scenario: Option<&Path>,
) -> anyhow::Result<()> {
    let ctx = runtime.config.context()?;
    let policy = MergedPolicy::solve(&ctx, runtime.config.v0)?;
    if let Some(file) = scenario {
        let series = read_scenario(file)?;
        let rec = replay_scenario(&policy, &series)?;
        let mut csv = CsvWriter::new(
            runtime.hash,
            runtime.config.seed,
            &path_columns(rec.dim, false),
        );
        for i in 0..rec.len() {
            csv.row(&record_row(&rec, i));
        }
        let out = runtime.out("scenario.csv");
        csv.save(&out)?;
        println!("replayed {} points; wrote {}", rec.len(), out.display());
        return Ok(());
    }
    let n_paths = paths.unwrap_or(100);
    let steps = steps.unwrap_or(runtime.config.mc.steps);
    let records = simulate_policy(&policy, steps, n_paths, runtime.config.seed)?;
    let mut csv = CsvWriter::new(
        runtime.hash,
        runtime.config.seed,
        &path_columns(records[0].dim, true),
    );
    for (p, rec) in records.iter().enumerate() {
        for i in 0..rec.len() {
            csv.row_with_index(p, &record_row(rec, i));
        }
    }
    let paths_out = runtime.out("paths.csv");
    csv.save(&paths_out)?;
    // Per-step quantiles of wealth, consumption and the first asset weight.
    let mut columns = vec!["t".to_string()];
    for name in ["V_star", "c_star", "pi_1"] {
        for q in ["q05", "q25", "q50", "q75", "q95"] {
            columns.push(format!("{name}_{q}"));
        }
    }
    let mut summary = CsvWriter::new(runtime.hash, runtime.config.seed, &columns);
    let dim = records[0].dim;
    for i in 0..records[0].len() {
        let mut row = vec![records[0].times[i]];
        for select in [
            (|r: &PathRecord, i: usize| r.v_star[i]) as fn(&PathRecord, usize) -> f64,
            |r, i| r.c_star[i],
            move |r: &PathRecord, i: usize| r.pi[i * dim],
        ] {
            let sample: Vec<f64> = records.iter().map(|r| select(r, i)).collect();
            for q in [5.0, 25.0, 50.0, 75.0, 95.0] {
                row.push(percentile(&sample, q));
            }
        }
        summary.row(&row);
    }
    let summary_out = runtime.out("summary.csv");
    summary.save(&summary_out)?;
    println!(
        "simulated {n_paths} paths x {steps} steps; wrote {} and {}",
        paths_out.display(),
        summary_out.display()
    );
    Ok(())
}

fn read_scenario(path: &Path) -> anyhow::Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read scenario {}", path.display()))?;
    let mut series = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(anyhow!(
                "scenario line {}: expected 't,price', got '{line}'",
                lineno + 1
            ));
        }
        if lineno == 0 && fields[0].parse::<f64>().is_err() {
            continue; // header row
        }
        let t: f64 = fields[0]
            .parse()
            .with_context(|| format!("scenario line {}: bad time '{}'", lineno + 1, fields[0]))?;
        let price: f64 = fields[1]
            .parse()
            .with_context(|| format!("scenario line {}: bad price '{}'", lineno + 1, fields[1]))?;
        series.push((t, price));
    }
    if series.is_empty() {
        return Err(anyhow!("scenario {} has no data rows", path.display()));
    }
    Ok(series)
}

fn read_target(path: &Path, _grid_points: usize) -> anyhow::Result<CalibrationTarget> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read target {}", path.display()))?;
    let mut times = Vec::new();
    let mut consumption = Vec::new();
    let mut allocation = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(anyhow!(
                "target line {}: expected 't,c_target,pi_target', got '{line}'",
                lineno + 1
            ));
        }
        if lineno == 0 && fields[0].parse::<f64>().is_err() {
            continue;
        }
        times.push(fields[0].parse::<f64>()?);
        consumption.push(fields[1].parse::<f64>()?);
        allocation.push(fields[2].parse::<f64>()?);
    }
    CalibrationTarget::from_samples(times, consumption, allocation).map_err(|e| anyhow!("{e}"))
}

#[derive(Serialize)]
struct CalibrationReport {
    config_hash: String,
    seed: u64,
    #[serde(flatten)]
    result: lifecycle_core::calibration::CalibrationResult,
}

pub fn cmd_calibrate(
    runtime: &Runtime,
    variant: ModelVariant,
    target_file: Option<&Path>,
) -> anyhow::Result<()> {
    let config = &runtime.config;
    let target = match target_file {
        Some(path) => read_target(path, config.calibration.grid_points)?,
        None => CalibrationTarget::default_curves(config.calibration.grid_points),
    };
    let problem = CalibrationProblem::new(
        config.market()?,
        config.cashflow_model()?,
        config.v0,
        config.preferences.beta,
        config.preferences.a_hat,
        target,
    )?;
    let spec = config.calibration.optimizer_spec(config.seed);
    let result = fit(&problem, variant, &spec)?;
    println!(
        "{variant}: ssrd={:.4} (consumption {:.4} + allocation {:.4}), converged={}, {} evaluations",
        result.ssrd, result.ssrd_consumption, result.ssrd_allocation, result.converged,
        result.iterations
    );
    println!(
        "  b_hat={:.4} a0={:.4e} lam_a={:.4} b0={:.4} lam_b={:.4}",
        result.b_hat, result.a0, result.lam_a, result.b0, result.lam_b
    );
    std::fs::create_dir_all(&runtime.out_dir)?;
    let fitted = lifecycle_core::calibration::CalibParams {
        b_hat: result.b_hat,
        a0: result.a0,
        lam_a: result.lam_a,
        b0: result.b0,
        lam_b: result.lam_b,
    };
    let curves = problem.model_curves(variant, &fitted)?;
    let mut csv = CsvWriter::new(
        runtime.hash,
        config.seed,
        &[
            "t".to_string(),
            "c_target".to_string(),
            "c_fit".to_string(),
            "pi_target".to_string(),
            "pi_fit".to_string(),
        ],
    );
    for (k, &t) in problem.target.times.iter().enumerate() {
        csv.row(&[
            t,
            problem.target.consumption[k],
            curves[k].0,
            problem.target.allocation[k],
            curves[k].1,
        ]);
    }
    let curves_out = runtime.out(&format!("calibration_curves_{variant}.csv"));
    csv.save(&curves_out)?;
    let report = CalibrationReport {
        config_hash: format!("{:016x}", runtime.hash),
        seed: config.seed,
        result,
    };
    let json_out = runtime.out(&format!("calibration_{variant}.json"));
    std::fs::write(&json_out, serde_json::to_string_pretty(&report)? + "\n")?;
    println!("wrote {} and {}", json_out.display(), curves_out.display());
    Ok(())
}

struct CheckLog {
    failures: usize,
}

impl CheckLog {
    fn record(&mut self, name: &str, pass: bool, detail: &str) {
        println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failures += 1;
        }
    }

    fn skip(&mut self, name: &str, reason: &str) {
        println!("[SKIP] {name}: {reason}");
    }
}

pub fn cmd_validate(runtime: &Runtime) -> anyhow::Result<usize> {
    let config = &runtime.config;
    let ctx = config.context()?;
    let policy = MergedPolicy::solve(&ctx, config.v0)?;
    let mut log = CheckLog { failures: 0 };
    let seed = config.seed;

    // Budget equality by Monte Carlo.
    let check = budget_equality_mc(&policy, config.mc.paths, config.mc.steps, seed)?;
    let gap_se = (check.estimate - check.target) / check.std_error;
    log.record(
        "budget equality",
        check.within_se(3.0),
        &format!(
            "estimate {:.0} vs {:.0}, {:+.2} se over {} paths",
            check.estimate, check.target, gap_se, check.n_paths
        ),
    );

    // Sensitivity: a corrupted multiplier must blow the budget residual.
    let cushion = policy.v1_star() - ctx.floor_f1(0.0)?;
    let horizon = ctx.horizon();
    let clean_budget = integrate(
        |t| policy.consumption().g_kernel(t, 0.0),
        0.0,
        horizon,
        &ctx.quad,
    )?;
    let skewed = ConsumptionSolution::with_lambda(&ctx, policy.v1_star(), policy.lambda1_star() * 1.01)?;
    let broken_budget = integrate(|t| skewed.g_kernel(t, 0.0), 0.0, horizon, &ctx.quad)?;
    let clean_residual = (clean_budget - cushion).abs();
    let broken_residual = (broken_budget - cushion).abs();
    log.record(
        "multiplier sensitivity",
        broken_residual > 1e4 * clean_residual.max(1e-9 * cushion.abs()),
        &format!(
            "clean budget residual {clean_residual:.3e}, after 1% corruption {broken_residual:.3e}"
        ),
    );

    // Gradient checks on both value functions.
    let f1_0 = ctx.floor_f1(0.0)?;
    let f2_0 = ctx.floor_f2(0.0);
    let mut max_rel = 0.0f64;
    for k in 0..10 {
        let v1 = f1_0 + (k + 1) as f64 * 0.2 * (config.v0 - f1_0).abs().max(1.0) / 2.0;
        let h = 2e-4 * (v1 - f1_0);
        let vf = consumption::value_function(&ctx, v1)?;
        let fd = (consumption::value_function(&ctx, v1 + h)?.value
            - consumption::value_function(&ctx, v1 - h)?.value)
            / (2.0 * h);
        max_rel = max_rel.max(((fd - vf.first_derivative) / vf.first_derivative).abs());
        let v2 = f2_0 + (k + 1) as f64 * 0.1 * (config.v0 - f2_0).abs().max(1.0) / 2.0;
        let h2 = 2e-4 * (v2 - f2_0);
        let vf2 = terminal::value_function(&ctx, v2)?;
        let fd2 = (terminal::value_function(&ctx, v2 + h2)?.value
            - terminal::value_function(&ctx, v2 - h2)?.value)
            / (2.0 * h2);
        max_rel = max_rel.max(((fd2 - vf2.first_derivative) / vf2.first_derivative).abs());
    }
    log.record(
        "value gradients",
        max_rel <= 1e-6,
        &format!("max relative gap {max_rel:.3e} over 10+10 budgets"),
    );

    // Self-financing replication at roughly daily steps.
    let steps = (252.0 * horizon).round() as usize;
    let rec = &simulate_policy(&policy, steps, 1, seed)?[0];
    let err = verify_self_financing(&policy, rec)?;
    log.record(
        "self-financing replication",
        err < 0.005,
        &format!("max tracking error {:.4}% at {} steps", 100.0 * err, steps),
    );

    // Floor preservation across Monte Carlo paths.
    let (wealth_margin, consumption_margin) =
        floor_margins_mc(&policy, config.mc.paths, config.mc.steps, seed)?;
    log.record(
        "floor preservation",
        wealth_margin > 0.0 && consumption_margin > 0.0,
        &format!("min V*-F {wealth_margin:.2}, min c*-cbar {consumption_margin:.4}"),
    );

    // Exposure additivity at deterministic probe points.
    let mut max_gap = 0.0f64;
    for k in 0..20 {
        let t = horizon * (k as f64 + 0.5) / 20.0;
        let z = (0.25 * ((k % 7) as f64 - 3.0)).exp();
        let state = policy.policy_at(t, z)?;
        let pos1 = policy.consumption().risky_position(t, z)?;
        let pos2 = policy.terminal().risky_position(t, z);
        let gap = (state.exposure.clone() - (&pos1.exposure + &pos2.exposure)).norm();
        max_gap = max_gap.max(gap / state.exposure.norm().max(1.0));
    }
    log.record(
        "exposure additivity",
        max_gap <= 1e-9,
        &format!("max relative gap {max_gap:.3e} over 20 probes"),
    );

    // Special-case equivalence when risk aversion is flat.
    let dev = ctx.prefs.max_b_deviation_from_terminal();
    if dev <= 1e-12 * ctx.prefs.b_hat().abs().max(1.0) {
        let mut max_rel = 0.0f64;
        for k in 0..50 {
            let t = horizon * (k as f64 + 0.3) / 50.0;
            let z = (0.2 * ((k % 9) as f64 - 4.0)).exp();
            let general = policy.policy_at(t, z)?;
            let special = policy_constant_b(&ctx, config.v0, t, z)?;
            max_rel = max_rel
                .max(((special.c_star - general.c_star) / general.c_star).abs())
                .max(((special.v_star - general.v_star) / general.v_star).abs());
        }
        log.record(
            "flat risk-aversion equivalence",
            max_rel <= 1e-8,
            &format!("max relative gap {max_rel:.3e} over 50 probes"),
        );
    } else {
        log.skip(
            "flat risk-aversion equivalence",
            &format!("b(t) varies (max deviation {dev:.3e})"),
        );
    }

    // Wealth stays above the floor pointwise.
    let mut min_margin = f64::INFINITY;
    for k in 0..200 {
        let t = horizon * (k as f64 + 0.5) / 200.0;
        let z = (0.4 * ((k % 11) as f64 - 5.0)).exp();
        let state = policy.policy_at(t, z)?;
        min_margin = min_margin.min(state.v_star - state.floor);
    }
    log.record(
        "wealth above floor",
        min_margin > 0.0,
        &format!("min pointwise margin {min_margin:.2}"),
    );

    println!(
        "{}",
        if log.failures == 0 {
            "all checks passed".to_string()
        } else {
            format!("{} check(s) failed", log.failures)
        }
    );
    Ok(log.failures)
}

/// Shared solve used by commands that need the merged policy.
pub fn solve_policy(ctx: &Arc<ModelContext>, v0: f64) -> anyhow::Result<MergedPolicy> {
    Ok(MergedPolicy::solve(ctx, v0)?)
}
