use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use covflow::bench::{create_csv, fit_scaling, render_svg, run_bench_into, BenchSpec, Phase};
use covflow::dynamics::{model_by_name, Dynamics, Trajectory};
use covflow::optimizer::{coverage_metric, plan, Discretization, PlanResult};
use covflow::points::Points;
use covflow::reference::{ReferenceDistribution, Seed};
use covflow::tsp::tsp_baseline;
use serde_json::{json, Value};

use crate::config::{malformed, RunConfig};
use crate::error::{io_error, CliError, CliResult};

pub struct Output {
    pub dir: PathBuf,
    pub force: bool,
}

impl Output {
    /// Creates the directory and refuses to clobber existing artifacts.
    pub fn prepare(&self, names: &[&str]) -> CliResult<Vec<PathBuf>> {
        let paths: Vec<PathBuf> = names.iter().map(|n| self.dir.join(n)).collect();
        let existing: Vec<String> = paths.iter().filter(|p| p.exists()).map(|p| p.display().to_string()).collect();
        if !existing.is_empty() && !self.force {
            return Err(CliError::usage(
                "output_exists",
                format!("refusing to overwrite {} (pass --force)", existing.join(", ")),
            )
            .with_details(json!({ "paths": existing })));
        }
        std::fs::create_dir_all(&self.dir).map_err(|e| io_error(&self.dir, e))?;
        Ok(paths)
    }
}

/// Targets every command scores against: the reference points themselves for
/// a point cloud, otherwise `metric.samples` seeded draws.
fn metric_targets(cfg: &RunConfig) -> CliResult<Points> {
    Ok(match &cfg.reference {
        ReferenceDistribution::SampleBased(p) => p.clone(),
        q => q.sample(cfg.metric_samples, Seed(cfg.seed).child(5))?,
    })
}

fn score(cfg: &RunConfig, model: &dyn Dynamics, states: &Points) -> CliResult<f64> {
    let targets = metric_targets(cfg)?;
    let metric_cfg = covflow::sinkhorn::SinkhornConfig { workers: cfg.workers, ..cfg.plan.sinkhorn };
    Ok(coverage_metric(states, model, &targets, &metric_cfg)?)
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn trajectory_header(model: &dyn Dynamics) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((0..model.state_dim()).map(|i| format!("s_{i}")));
    h.extend((0..model.control_dim()).map(|j| format!("u_{j}")));
    h
}

/// One row per state; the final row has empty control fields.
pub fn write_trajectory(path: &Path, model: &dyn Dynamics, traj: &Trajectory) -> CliResult<()> {
    let file = File::create(path).map_err(|e| io_error(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| CliError::usage("io", format!("{}: {e}", path.display()));
    w.write_record(trajectory_header(model)).map_err(csv_err)?;
    for k in 0..traj.states.len() {
        let mut row = vec![(k as f64 * traj.dt).to_string()];
        row.extend(traj.states.row(k).iter().map(f64::to_string));
        if k < traj.controls.len() {
            row.extend(traj.controls.row(k).iter().map(f64::to_string));
        } else {
            row.extend(std::iter::repeat_n(String::new(), model.control_dim()));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

/// States from a trajectory CSV written by [`write_trajectory`].
pub fn read_trajectory_states(path: &Path, model: &dyn Dynamics) -> CliResult<Points> {
    let file = File::open(path).map_err(|e| io_error(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(file);
    let mut records = reader.records();
    let header = match records.next() {
        None => return Err(CliError::usage("empty_input", format!("{} is empty", path.display()))),
        Some(r) => r.map_err(|e| malformed(path, 1, &e.to_string()))?,
    };
    let expected = trajectory_header(model);
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(malformed(path, 1, &format!("header must be {}", expected.join(","))));
    }
    let n = model.state_dim();
    let mut data = Vec::new();
    for (i, record) in records.enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| malformed(path, line, &e.to_string()))?;
        if record.len() != expected.len() {
            return Err(malformed(path, line, &format!("expected {} fields, found {}", expected.len(), record.len())));
        }
        for (col, field) in record.iter().enumerate() {
            let is_control = col > n;
            if is_control && field.is_empty() {
                continue;
            }
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| malformed(path, line, &format!("column {} is not a number: {field:?}", expected[col])))?;
            if (1..=n).contains(&col) {
                data.push(v);
            }
        }
    }
    if data.is_empty() {
        return Err(CliError::usage("empty_input", format!("{} has no trajectory rows", path.display())));
    }
    Ok(Points::new(n, data)?)
}

fn secs(d: std::time::Duration) -> f64 {
    d.as_secs_f64()
}

fn plan_json(cfg: &RunConfig, result: &PlanResult, coverage: f64) -> Value {
    let history: Vec<Value> = result
        .history
        .iter()
        .map(|r| {
            json!({
                "iteration": r.iteration,
                "flow_norm": r.flow_norm,
                "lqr_cost": r.lqr_cost,
                "divergence": r.divergence,
            })
        })
        .collect();
    json!({
        "command": "plan",
        "model": cfg.model,
        "method": cfg.plan.method.name(),
        "seed": cfg.seed,
        "steps": cfg.steps,
        "dt": cfg.dt,
        "converged": result.converged,
        "iterations": result.history.len(),
        "final_metric": result.final_metric,
        "coverage": coverage,
        "metric_samples": metric_sample_count(cfg),
        "times": {
            "total_s": secs(result.times.total),
            "flow_s": secs(result.times.flow),
            "lqr_s": secs(result.times.lqr),
            "rollout_s": secs(result.times.rollout),
        },
        "history": history,
    })
}

fn metric_sample_count(cfg: &RunConfig) -> usize {
    match &cfg.reference {
        ReferenceDistribution::SampleBased(p) => p.len(),
        _ => cfg.metric_samples,
    }
}

pub fn cmd_plan(cfg: &RunConfig, out: &Output) -> CliResult<Value> {
    let paths = out.prepare(&["trajectory.csv", "metrics.json"])?;
    let model = model_by_name(&cfg.model)?;
    let disc = Discretization { dt: cfg.dt, steps: cfg.steps, s0: cfg.s0.clone() };
    let result = plan(model.as_ref(), &cfg.reference, &disc, &cfg.plan)?;
    let coverage = score(cfg, model.as_ref(), &result.trajectory.states)?;
    write_trajectory(&paths[0], model.as_ref(), &result.trajectory)?;
    let metrics = plan_json(cfg, &result, coverage);
    write_file(&paths[1], &format!("{:#}\n", metrics))?;
    Ok(json!({
        "coverage": coverage,
        "final_metric": result.final_metric,
        "converged": result.converged,
        "out": out.dir.display().to_string(),
    }))
}

pub fn cmd_baseline(cfg: &RunConfig, out: &Output) -> CliResult<Value> {
    let paths = out.prepare(&["trajectory.csv", "metrics.json"])?;
    let model = model_by_name(&cfg.model)?;
    let result = tsp_baseline(
        model.as_ref(),
        &cfg.reference,
        cfg.steps,
        cfg.dt,
        Seed(cfg.seed),
        cfg.tsp_max_passes,
        cfg.workers,
    )?;
    let coverage = score(cfg, model.as_ref(), &result.trajectory.states)?;
    write_trajectory(&paths[0], model.as_ref(), &result.trajectory)?;
    let metrics = json!({
        "command": "baseline-tsp",
        "model": cfg.model,
        "method": "tsp",
        "seed": cfg.seed,
        "steps": cfg.steps,
        "dt": cfg.dt,
        "tour_length": result.tour.length,
        "coverage": coverage,
        "metric_samples": metric_sample_count(cfg),
        "times": {
            "total_s": secs(result.total_time),
            "tour_s": secs(result.tour_time),
            "lqr_s": secs(result.tracking.lqr),
            "rollout_s": secs(result.tracking.rollout),
        },
    });
    write_file(&paths[1], &format!("{:#}\n", metrics))?;
    Ok(json!({
        "coverage": coverage,
        "tour_length": result.tour.length,
        "out": out.dir.display().to_string(),
    }))
}

pub fn cmd_bench(cfg: &RunConfig, out: &Output, plot: bool) -> CliResult<Value> {
    let mut names = vec!["bench.csv"];
    if plot {
        names.push("time_vs_horizon.svg");
    }
    let paths = out.prepare(&names)?;
    let mut writer = create_csv(&paths[0])?;
    let mut records = Vec::new();
    for &method in &cfg.bench.methods {
        let mut spec = BenchSpec::new(method, &cfg.model, cfg.bench.horizons.clone(), cfg.reference.clone());
        spec.repetitions = cfg.bench.repetitions;
        spec.workers = cfg.bench.workers.clone();
        spec.dt = cfg.dt;
        spec.s0 = Some(cfg.s0.clone());
        spec.plan = cfg.plan.clone();
        spec.seed = Seed(cfg.seed);
        spec.metric_samples = cfg.metric_samples;
        spec.tsp_max_passes = cfg.tsp_max_passes;
        spec.allow_long_tsp = cfg.bench.allow_long_tsp;
        spec.warmup = cfg.bench.warmup;
        records.extend(run_bench_into(&spec, Some(&mut writer))?);
    }
    if plot {
        write_file(&paths[1], &render_svg(&records))?;
    }
    let mut fits = serde_json::Map::new();
    for method in &cfg.bench.methods {
        if let Ok(fit) = fit_scaling(&records, method.name(), Phase::Total) {
            fits.insert(
                method.name().to_string(),
                json!({ "alpha": fit.alpha, "ci_low": fit.ci_low, "ci_high": fit.ci_high }),
            );
        }
    }
    let failed = records.iter().filter(|r| !r.is_ok()).count();
    Ok(json!({
        "rows": records.len(),
        "failed": failed,
        "total_time_scaling": fits,
        "out": out.dir.display().to_string(),
    }))
}

pub fn cmd_metric(cfg: &RunConfig, trajectory: &Path) -> CliResult<Value> {
    let model = model_by_name(&cfg.model)?;
    let states = read_trajectory_states(trajectory, model.as_ref())?;
    if states.len() < 2 {
        return Err(CliError::usage("empty_input", format!("{} needs at least two states", trajectory.display())));
    }
    let metric = score(cfg, model.as_ref(), &states)?;
    Ok(json!({
        "metric": metric,
        "points": states.len() - 1,
        "targets": metric_sample_count(cfg),
    }))
}

pub fn print_json(v: &Value) {
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{v}");
}
