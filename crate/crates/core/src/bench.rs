//! Horizon sweeps with per-phase timing, incremental CSV output and
//! log-log scaling fits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::fs::File;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dynamics::model_by_name;
use crate::error::{Error, Result};
use crate::optimizer::{coverage_metric, plan, Discretization, Method, PlanConfig};
use crate::points::Points;
use crate::reference::{ReferenceDistribution, Seed};
use crate::sinkhorn::SinkhornConfig;
use crate::tsp::tsp_baseline;

/// Largest horizon the TSP baseline runs at unless explicitly allowed.
pub const TSP_HORIZON_GUARD: usize = 1000;

/// Exact CSV header.
pub const CSV_HEADER: &str =
    "method,model,horizon,rep,workers,seed,t_total_s,t_flow_s,t_lqr_s,t_rollout_s,coverage,status";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BenchMethod {
    SteinPlan,
    SinkhornPlan,
    TspBaseline,
}

impl BenchMethod {
    pub fn name(self) -> &'static str {
        match self {
            BenchMethod::SteinPlan => "stein",
            BenchMethod::SinkhornPlan => "sinkhorn",
            BenchMethod::TspBaseline => "tsp",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "stein" => Ok(BenchMethod::SteinPlan),
            "sinkhorn" => Ok(BenchMethod::SinkhornPlan),
            "tsp" => Ok(BenchMethod::TspBaseline),
            other => Err(Error::invalid(format!(
                "unknown method {other:?}; expected stein, sinkhorn or tsp"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchSpec {
    pub method: BenchMethod,
    pub model: String,
    /// Strictly increasing.
    pub horizons: Vec<usize>,
    pub repetitions: usize,
    pub workers: Vec<usize>,
    pub dt: f64,
    /// Start state; `None` uses the model default.
    pub s0: Option<Vec<f64>>,
    pub reference: ReferenceDistribution,
    /// Planner settings; method and workers are overridden per run.
    pub plan: PlanConfig,
    pub seed: Seed,
    /// Target draws for the coverage column.
    pub metric_samples: usize,
    pub tsp_max_passes: usize,
    /// Run the TSP baseline above [`TSP_HORIZON_GUARD`].
    pub allow_long_tsp: bool,
    pub warmup: bool,
}

impl BenchSpec {
    pub fn new(method: BenchMethod, model: &str, horizons: Vec<usize>, reference: ReferenceDistribution) -> Self {
        Self {
            method,
            model: model.to_string(),
            horizons,
            repetitions: 3,
            workers: vec![0],
            dt: 0.05,
            s0: None,
            reference,
            plan: PlanConfig::default(),
            seed: Seed(0),
            metric_samples: 2000,
            tsp_max_passes: usize::MAX,
            allow_long_tsp: false,
            warmup: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() || self.horizons.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("horizons must be nonempty and strictly increasing"));
        }
        if self.horizons[0] == 0 {
            return Err(Error::invalid("horizons must be positive"));
        }
        if self.repetitions == 0 || self.workers.is_empty() || self.metric_samples == 0 {
            return Err(Error::invalid("repetitions, worker list and metric_samples must be nonempty"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::invalid("dt must be positive"));
        }
        model_by_name(&self.model)?;
        self.plan.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub method: String,
    pub model: String,
    pub horizon: usize,
    pub rep: usize,
    pub workers: usize,
    pub seed: u64,
    pub t_total_s: f64,
    pub t_flow_s: f64,
    pub t_lqr_s: f64,
    pub t_rollout_s: f64,
    /// `NaN` for failed runs.
    pub coverage: f64,
    /// `ok` or an error tag.
    pub status: String,
}

impl BenchRecord {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

struct RunOutcome {
    total: f64,
    flow: f64,
    lqr: f64,
    rollout: f64,
    coverage: f64,
}

fn run_once(spec: &BenchSpec, horizon: usize, workers: usize, targets: &Points) -> Result<RunOutcome> {
    let model = model_by_name(&spec.model)?;
    let s0 = spec.s0.clone().unwrap_or_else(|| model.default_initial_state());
    let metric_cfg = SinkhornConfig { workers, ..spec.plan.sinkhorn };
    match spec.method {
        BenchMethod::SteinPlan | BenchMethod::SinkhornPlan => {
            let method = if spec.method == BenchMethod::SteinPlan { Method::Stein } else { Method::Sinkhorn };
            let cfg = PlanConfig { method, workers, seed: spec.seed, ..spec.plan.clone() };
            let disc = Discretization { dt: spec.dt, steps: horizon, s0 };
            let result = plan(model.as_ref(), &spec.reference, &disc, &cfg)?;
            let coverage = coverage_metric(&result.trajectory.states, model.as_ref(), targets, &metric_cfg)?;
            Ok(RunOutcome {
                total: result.times.total.as_secs_f64(),
                flow: result.times.flow.as_secs_f64(),
                lqr: result.times.lqr.as_secs_f64(),
                rollout: result.times.rollout.as_secs_f64(),
                coverage,
            })
        }
        BenchMethod::TspBaseline => {
            let result = tsp_baseline(model.as_ref(), &spec.reference, horizon, spec.dt, spec.seed, spec.tsp_max_passes, workers)?;
            let coverage = coverage_metric(&result.trajectory.states, model.as_ref(), targets, &metric_cfg)?;
            Ok(RunOutcome {
                total: result.total_time.as_secs_f64(),
                flow: result.tour_time.as_secs_f64(),
                lqr: result.tracking.lqr.as_secs_f64(),
                rollout: result.tracking.rollout.as_secs_f64(),
                coverage,
            })
        }
    }
}

/// Runs the sweep. Every record is appended to `csv_path` (if given) and
/// flushed before the next run starts. Failed runs become rows whose status
/// is the error tag; the sweep continues.
pub fn run_bench(spec: &BenchSpec, csv_path: Option<&Path>) -> Result<Vec<BenchRecord>> {
    spec.validate()?;
    let mut writer = match csv_path {
        Some(p) => Some(create_csv(p)?),
        None => None,
    };
    run_bench_into(spec, writer.as_mut())
}

/// Creates `path` and writes the header line.
pub fn create_csv(path: &Path) -> Result<csv::Writer<File>> {
    let mut w = csv_writer(path)?;
    w.write_record(CSV_HEADER.split(','))?;
    w.flush()?;
    Ok(w)
}

/// [`run_bench`] appending to an already opened writer, so several specs can
/// share one file.
pub fn run_bench_into<W: Write>(spec: &BenchSpec, mut writer: Option<&mut csv::Writer<W>>) -> Result<Vec<BenchRecord>> {
    spec.validate()?;
    let targets = spec.reference.sample(spec.metric_samples, spec.seed.child(5))?;
    let mut records = Vec::new();
    for &workers in &spec.workers {
        for &horizon in &spec.horizons {
            if spec.method == BenchMethod::TspBaseline && horizon > TSP_HORIZON_GUARD && !spec.allow_long_tsp {
                log::warn!("skipping TSP baseline at horizon {horizon} (guard {TSP_HORIZON_GUARD})");
                continue;
            }
            if spec.warmup {
                let _ = run_once(spec, horizon, workers, &targets);
            }
            for rep in 0..spec.repetitions {
                let start = Instant::now();
                let outcome = run_once(spec, horizon, workers, &targets);
                let (times, coverage, status) = match outcome {
                    Ok(o) => ([o.total, o.flow, o.lqr, o.rollout], o.coverage, "ok".to_string()),
                    Err(e) => {
                        log::warn!("{} at horizon {horizon} failed: {e}", spec.method.name());
                        ([start.elapsed().as_secs_f64(), 0.0, 0.0, 0.0], f64::NAN, e.tag().to_string())
                    }
                };
                let record = BenchRecord {
                    method: spec.method.name().to_string(),
                    model: spec.model.clone(),
                    horizon,
                    rep,
                    workers: crate::parallel::resolve_workers(workers),
                    seed: spec.seed.0,
                    t_total_s: times[0],
                    t_flow_s: times[1],
                    t_lqr_s: times[2],
                    t_rollout_s: times[3],
                    coverage,
                    status,
                };
                if let Some(w) = writer.as_deref_mut() {
                    w.serialize(&record)?;
                    w.flush()?;
                }
                records.push(record);
            }
        }
    }
    Ok(records)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(File::create(path)?))
}

pub fn write_records(path: &Path, records: &[BenchRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(CSV_HEADER.split(','))?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<BenchRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::invalid(format!("unexpected CSV header {:?}", header.join(","))));
    }
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Total,
    Flow,
    Lqr,
    Rollout,
}

impl Phase {
    fn of(self, r: &BenchRecord) -> f64 {
        match self {
            Phase::Total => r.t_total_s,
            Phase::Flow => r.t_flow_s,
            Phase::Lqr => r.t_lqr_s,
            Phase::Rollout => r.t_rollout_s,
        }
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median of a phase time per horizon over successful rows of one method and
/// worker count.
pub fn median_by_horizon(records: &[BenchRecord], method: &str, workers: Option<usize>, phase: Phase) -> Vec<(usize, f64)> {
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in records {
        if r.is_ok() && r.method == method && workers.is_none_or(|w| w == r.workers) {
            groups.entry(r.horizon).or_default().push(phase.of(r));
        }
    }
    groups.into_iter().map(|(h, mut v)| (h, median(&mut v))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalingFit {
    pub alpha: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// `ln c` in `t = c · T^α`.
    pub intercept: f64,
    pub points: usize,
}

/// Least-squares slope of `ln y` against `ln x` with a 95% t-interval.
pub fn fit_power_law(xs: &[f64], ys: &[f64]) -> Result<ScalingFit> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::invalid("a scaling fit needs at least three paired points"));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::invalid("scaling fit needs positive finite values"));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 1e-12 {
        return Err(Error::invalid("scaling fit needs at least two distinct x values"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let alpha = sxy / sxx;
    let intercept = my - alpha * mx;
    let sse: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - alpha * x).powi(2)).sum();
    let dof = n - 2.0;
    let se = (sse / dof / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, dof)
        .map_err(|e| Error::invalid(format!("t distribution: {e}")))?
        .inverse_cdf(0.975);
    Ok(ScalingFit {
        alpha,
        ci_low: alpha - t * se,
        ci_high: alpha + t * se,
        intercept,
        points: lx.len(),
    })
}

/// Scaling exponent of one phase over per-horizon medians.
pub fn fit_scaling(records: &[BenchRecord], method: &str, phase: Phase) -> Result<ScalingFit> {
    let medians = median_by_horizon(records, method, None, phase);
    if medians.len() < 4 {
        return Err(Error::invalid(format!(
            "scaling fit needs at least 4 distinct horizons, got {}",
            medians.len()
        )));
    }
    let xs: Vec<f64> = medians.iter().map(|&(h, _)| h as f64).collect();
    let ys: Vec<f64> = medians.iter().map(|&(_, t)| t).collect();
    fit_power_law(&xs, &ys)
}

/// Log-log plot of median total time against horizon, one line per
/// method and worker count.
pub fn render_svg(records: &[BenchRecord]) -> String {
    let mut series: BTreeMap<(String, usize), Vec<(f64, f64)>> = BTreeMap::new();
    let keys: Vec<(String, usize)> = records
        .iter()
        .filter(|r| r.is_ok())
        .map(|r| (r.method.clone(), r.workers))
        .collect();
    for (method, workers) in keys {
        if series.contains_key(&(method.clone(), workers)) {
            continue;
        }
        let pts = median_by_horizon(records, &method, Some(workers), Phase::Total)
            .into_iter()
            .filter(|&(_, t)| t > 0.0)
            .map(|(h, t)| ((h as f64).log10(), t.log10()))
            .collect();
        series.insert((method, workers), pts);
    }
    let all: Vec<(f64, f64)> = series.values().flatten().copied().collect();
    let (w, h, pad) = (640.0, 420.0, 60.0);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    if all.is_empty() {
        let _ = writeln!(svg, r#"<text x="{pad}" y="{pad}">no successful runs</text></svg>"#);
        return svg;
    }
    let bounds = |f: fn(&(f64, f64)) -> f64| {
        let lo = all.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = all.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-9 { (lo - 0.5, hi + 0.5) } else { (lo, hi) }
    };
    let (x0, x1) = bounds(|p| p.0);
    let (y0, y1) = bounds(|p| p.1);
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
    let _ = writeln!(
        svg,
        r#"<line x1="{pad}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{b}" stroke="black"/>"#,
        b = h - pad,
        r = w - pad
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">horizon (log10 {x0:.2} .. {x1:.2})</text>"#, w / 2.0, h - 20.0);
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">total time, s (log10 {y0:.2} .. {y1:.2})</text>"#,
        h / 2.0,
        h / 2.0
    );
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    for (i, ((method, workers), pts)) in series.iter().enumerate() {
        let color = colors[i % colors.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        for &(x, y) in pts {
            let _ = writeln!(svg, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, sx(x), sy(y));
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{color}">{method} ({workers} workers)</text>"#,
            pad + 10.0,
            pad + 16.0 * i as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn synthetic(power: f64) -> Vec<BenchRecord> {
        let mut out = Vec::new();
        for h in [100usize, 200, 400, 800, 1600] {
            for rep in 0..3 {
                out.push(BenchRecord {
                    method: "stein".into(),
                    model: "diff_drive".into(),
                    horizon: h,
                    rep,
                    workers: 1,
                    seed: 0,
                    t_total_s: 1e-6 * (h as f64).powf(power) * (1.0 + 0.01 * rep as f64),
                    t_flow_s: 1e-6 * (h as f64).powf(power),
                    t_lqr_s: 1e-4 * h as f64,
                    t_rollout_s: 1e-5 * h as f64,
                    coverage: 0.01,
                    status: "ok".into(),
                });
            }
        }
        out
    }

    #[test]
    fn exact_power_laws_are_recovered() {
        for power in [1.0, 2.0] {
            let fit = fit_scaling(&synthetic(power), "stein", Phase::Flow).unwrap();
            assert_abs_diff_eq!(fit.alpha, power, epsilon = 0.01);
            assert!(fit.ci_low <= fit.alpha && fit.alpha <= fit.ci_high);
            assert!(fit.ci_high - fit.ci_low < 1e-6);
        }
        let lqr = fit_scaling(&synthetic(2.0), "stein", Phase::Lqr).unwrap();
        assert_abs_diff_eq!(lqr.alpha, 1.0, epsilon = 0.01);
    }

    #[test]
    fn noisy_fit_has_a_covering_interval() {
        let xs = [100.0, 200.0, 400.0, 800.0, 1600.0, 3200.0];
        let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * x * if i % 2 == 0 { 1.1 } else { 0.9 }).collect();
        let fit = fit_power_law(&xs, &ys).unwrap();
        assert!(fit.ci_low < 2.0 && 2.0 < fit.ci_high);
        assert!(fit.ci_high - fit.ci_low > 0.0);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(fit_power_law(&[100.0, 100.0, 100.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(fit_power_law(&[1.0, 2.0, 3.0], &[1.0, 0.0, 3.0]).is_err());
        let few: Vec<BenchRecord> = synthetic(2.0).into_iter().filter(|r| r.horizon <= 400).collect();
        assert!(fit_scaling(&few, "stein", Phase::Total).is_err());
    }

    #[test]
    fn medians_skip_failed_rows() {
        let mut recs = synthetic(1.0);
        recs[0].status = "rollout_divergence".into();
        recs[0].t_total_s = 1e9;
        let m = median_by_horizon(&recs, "stein", None, Phase::Total);
        assert_eq!(m.len(), 5);
        assert!(m[0].1 < 1.0);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.csv");
        let mut recs = synthetic(2.0);
        recs[1].coverage = f64::NAN;
        recs[1].status = "unconverged_transport".into();
        recs[2].t_flow_s = 0.1 + 0.2;
        write_records(&path, &recs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        let back = read_records(&path).unwrap();
        assert_eq!(back.len(), recs.len());
        for (a, b) in back.iter().zip(&recs) {
            assert_eq!(a.t_flow_s.to_bits(), b.t_flow_s.to_bits());
            assert_eq!(a.t_total_s.to_bits(), b.t_total_s.to_bits());
            assert_eq!(a.coverage.is_nan(), b.coverage.is_nan());
            if !b.coverage.is_nan() {
                assert_eq!(a.coverage.to_bits(), b.coverage.to_bits());
            }
            assert_eq!((&a.method, a.horizon, a.rep, &a.status), (&b.method, b.horizon, b.rep, &b.status));
        }
    }

    #[test]
    fn svg_has_one_line_per_series() {
        let mut recs = synthetic(2.0);
        let mut more = synthetic(1.0);
        more.iter_mut().for_each(|r| r.method = "tsp".into());
        recs.extend(more);
        let svg = render_svg(&recs);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("tsp (1 workers)"));
    }
}
