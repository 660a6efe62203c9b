//! Flat TOML run configuration.
//!
//! Keys are dotted paths (`stein.bandwidth = 0.01` or a `[stein]` table, both
//! flatten to the same key). Every problem in a file is collected and reported
//! together: unknown keys (with a suggested correction), wrong types and out of
//! range values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use covflow::bench::BenchMethod;
use covflow::dynamics::model_by_name;
use covflow::optimizer::{InitialControls, Method, PlanConfig};
use covflow::points::Points;
use covflow::reference::{three_mode_fixture, GaussianMixture, ReferenceDistribution, Seed};
use covflow::sinkhorn::Omega;
use covflow::stein::Bandwidth;
use nalgebra::DMatrix;
use serde_json::json;
use toml::Value;

use crate::error::{io_error, CliError, CliResult};

pub const KNOWN_KEYS: &[&str] = &[
    "model",
    "method",
    "seed",
    "workers",
    "out",
    "dt",
    "steps",
    "s0",
    "reference.kind",
    "reference.path",
    "reference.weights",
    "reference.means",
    "reference.variances",
    "reference.covariances",
    "reference.samples",
    "optimizer.eta",
    "optimizer.max_iterations",
    "optimizer.tol",
    "optimizer.metric_every",
    "optimizer.init",
    "optimizer.init_scale",
    "optimizer.clamp",
    "stein.bandwidth",
    "stein.chunk",
    "sinkhorn.omega",
    "sinkhorn.max_iters",
    "sinkhorn.tol",
    "sinkhorn.chunk",
    "lqr.q",
    "lqr.r",
    "metric.samples",
    "tsp.max_passes",
    "bench.methods",
    "bench.horizons",
    "bench.repetitions",
    "bench.workers",
    "bench.allow_long_tsp",
    "bench.warmup",
];

#[derive(Clone, Debug)]
pub struct BenchKeys {
    pub methods: Vec<BenchMethod>,
    pub horizons: Vec<usize>,
    pub repetitions: usize,
    pub workers: Vec<usize>,
    pub allow_long_tsp: bool,
    pub warmup: bool,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: String,
    pub seed: u64,
    pub workers: usize,
    pub out: Option<PathBuf>,
    pub dt: f64,
    pub steps: usize,
    pub s0: Vec<f64>,
    pub reference: ReferenceDistribution,
    pub plan: PlanConfig,
    pub metric_samples: usize,
    pub tsp_max_passes: usize,
    pub bench: BenchKeys,
}

#[derive(Debug)]
struct Problem {
    key: String,
    message: String,
    suggestion: Option<String>,
}

/// Flattened key/value view that records every problem it meets.
struct Fields {
    values: BTreeMap<String, Value>,
    problems: Vec<Problem>,
}

fn flatten(prefix: &str, table: toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            v => {
                out.insert(key, v);
            }
        }
    }
}

pub fn suggest(key: &str) -> Option<&'static str> {
    KNOWN_KEYS
        .iter()
        .map(|k| (strsim::damerau_levenshtein(key, k), *k))
        .filter(|(d, k)| *d <= 3.max(k.len() / 4))
        .min_by_key(|(d, _)| *d)
        .map(|(_, k)| k)
}

fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Float(f) => Some(*f),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn as_f64_list(v: &Value) -> Option<Vec<f64>> {
    v.as_array()?.iter().map(as_f64).collect()
}

fn as_f64_table(v: &Value) -> Option<Vec<Vec<f64>>> {
    v.as_array()?.iter().map(as_f64_list).collect()
}

fn as_usize(v: &Value) -> Option<usize> {
    v.as_integer().and_then(|i| usize::try_from(i).ok())
}

impl Fields {
    fn problem(&mut self, key: &str, message: impl Into<String>) {
        self.problems.push(Problem { key: key.to_string(), message: message.into(), suggestion: None });
    }

    fn get<T>(&mut self, key: &str, expected: &str, convert: impl Fn(&Value) -> Option<T>) -> Option<T> {
        let v = self.values.get(key)?;
        match convert(v) {
            Some(t) => Some(t),
            None => {
                let msg = format!("expected {expected}, found {}", v.type_str());
                self.problem(key, msg);
                None
            }
        }
    }

    fn string(&mut self, key: &str) -> Option<String> {
        self.get(key, "a string", |v| v.as_str().map(str::to_string))
    }

    fn float(&mut self, key: &str) -> Option<f64> {
        self.get(key, "a number", as_f64)
    }

    fn positive(&mut self, key: &str, default: f64) -> f64 {
        match self.float(key) {
            Some(v) if v > 0.0 && v.is_finite() => v,
            Some(v) => {
                self.problem(key, format!("must be positive and finite, got {v}"));
                default
            }
            None => default,
        }
    }

    fn count(&mut self, key: &str, default: usize, min: usize) -> usize {
        match self.get(key, "a nonnegative integer", as_usize) {
            Some(v) if v >= min => v,
            Some(v) => {
                self.problem(key, format!("must be at least {min}, got {v}"));
                default
            }
            None => default,
        }
    }

    fn boolean(&mut self, key: &str, default: bool) -> bool {
        self.get(key, "a boolean", Value::as_bool).unwrap_or(default)
    }

    /// Either the string `auto_word` or a positive number.
    fn auto_or_positive(&mut self, key: &str, auto_word: &str) -> Option<Option<f64>> {
        let v = self.values.get(key)?.clone();
        match (&v, as_f64(&v)) {
            (Value::String(s), _) if s == auto_word => Some(None),
            (_, Some(x)) if x > 0.0 && x.is_finite() => Some(Some(x)),
            _ => {
                self.problem(key, format!("expected \"{auto_word}\" or a positive number, found {v}"));
                None
            }
        }
    }
}

impl RunConfig {
    /// Reads and validates `path`. Relative file references inside the config
    /// resolve against the config's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> CliResult<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::usage("config_syntax", e.to_string()))?;
        let mut values = BTreeMap::new();
        flatten("", table, &mut values);
        let mut f = Fields { values, problems: Vec::new() };

        let unknown: Vec<String> =
            f.values.keys().filter(|k| !KNOWN_KEYS.contains(&k.as_str())).cloned().collect();
        for key in unknown {
            let suggestion = suggest(&key).map(str::to_string);
            let message = match &suggestion {
                Some(s) => format!("unknown key (did you mean \"{s}\"?)"),
                None => "unknown key".to_string(),
            };
            f.problems.push(Problem { key, message, suggestion });
        }

        let model = f.string("model");
        let model_box = match model.as_deref() {
            Some(name) => match model_by_name(name) {
                Ok(m) => Some(m),
                Err(e) => {
                    f.problem("model", e.to_string());
                    None
                }
            },
            None => {
                f.problem("model", "required key is missing");
                None
            }
        };

        let method = match f.string("method").as_deref() {
            None | Some("stein") => Method::Stein,
            Some("sinkhorn") => Method::Sinkhorn,
            Some(other) => {
                f.problem("method", format!("expected \"stein\" or \"sinkhorn\", got \"{other}\""));
                Method::Stein
            }
        };
        let seed = f.get("seed", "a nonnegative integer", |v| v.as_integer().and_then(|i| u64::try_from(i).ok()));
        let workers = f.count("workers", 0, 0);
        let out = f.string("out").map(|s| base.join(s));
        let dt = f.positive("dt", 0.05);
        let steps = f.count("steps", 1000, 1);
        let s0 = f.get("s0", "an array of numbers", as_f64_list);
        let s0 = match (&model_box, s0) {
            (Some(m), Some(s)) if s.len() != m.state_dim() => {
                f.problem("s0", format!("{} has {} state components, got {}", m.name(), m.state_dim(), s.len()));
                Vec::new()
            }
            (_, Some(s)) => s,
            (Some(m), None) => m.default_initial_state(),
            (None, None) => Vec::new(),
        };

        let workspace_dim = model_box.as_ref().map(|m| m.workspace_dim());
        let reference = reference_from(&mut f, base, workspace_dim);

        let mut plan = PlanConfig { method, ..PlanConfig::default() };
        plan.step_size = f.positive("optimizer.eta", plan.step_size);
        plan.max_iterations = f.count("optimizer.max_iterations", plan.max_iterations, 1);
        if let Some(tol) = f.float("optimizer.tol") {
            if tol >= 0.0 {
                plan.convergence_tol = tol;
            } else {
                f.problem("optimizer.tol", "must be nonnegative");
            }
        }
        plan.metric_every = f.count("optimizer.metric_every", plan.metric_every, 1);
        let scale = f.float("optimizer.init_scale");
        plan.initial_controls = match f.string("optimizer.init").as_deref() {
            None | Some("random") => InitialControls::RandomSmall(scale.unwrap_or(1e-2).abs()),
            Some("zeros") => InitialControls::Zeros,
            Some(other) => {
                f.problem("optimizer.init", format!("expected \"random\" or \"zeros\", got \"{other}\""));
                plan.initial_controls
            }
        };
        if let Some(clamp) = f.get("optimizer.clamp", "an array of [low, high] pairs", as_f64_table) {
            if clamp.iter().any(|c| c.len() != 2 || !(c[0] <= c[1])) {
                f.problem("optimizer.clamp", "every entry must be [low, high] with low <= high");
            } else if let Some(m) = &model_box {
                if clamp.len() != m.control_dim() {
                    f.problem("optimizer.clamp", format!("{} has {} control channels", m.name(), m.control_dim()));
                }
            }
            plan.control_clamp = Some(clamp.into_iter().filter(|c| c.len() == 2).map(|c| (c[0], c[1])).collect());
        }
        if let Some(bw) = f.auto_or_positive("stein.bandwidth", "median") {
            plan.stein.bandwidth = bw.map_or(Bandwidth::Median, Bandwidth::Fixed);
        }
        plan.stein.parallel_chunk = f.count("stein.chunk", plan.stein.parallel_chunk, 1);
        if let Some(w) = f.auto_or_positive("sinkhorn.omega", "auto") {
            plan.sinkhorn.omega = w.map_or(Omega::Auto, Omega::Fixed);
        }
        plan.sinkhorn.max_iters = f.count("sinkhorn.max_iters", plan.sinkhorn.max_iters, 1);
        plan.sinkhorn.tol = f.positive("sinkhorn.tol", plan.sinkhorn.tol);
        plan.sinkhorn.parallel_chunk = f.count("sinkhorn.chunk", plan.sinkhorn.parallel_chunk, 1);
        plan.q_weight = f.positive("lqr.q", plan.q_weight);
        plan.r_weight = f.positive("lqr.r", plan.r_weight);
        plan.reference_samples = f.get("reference.samples", "a positive integer", as_usize);
        if plan.reference_samples == Some(0) {
            f.problem("reference.samples", "must be at least 1");
        }
        plan.seed = Seed(seed.unwrap_or(0));

        let metric_samples = f.count("metric.samples", 2000, 1);
        let tsp_max_passes = f.count("tsp.max_passes", usize::MAX, 0);

        let methods = match f.get("bench.methods", "an array of strings", |v| {
            v.as_array()?.iter().map(|s| s.as_str().map(str::to_string)).collect::<Option<Vec<_>>>()
        }) {
            Some(names) => names
                .iter()
                .filter_map(|n| match BenchMethod::from_name(n) {
                    Ok(m) => Some(m),
                    Err(e) => {
                        f.problem("bench.methods", e.to_string());
                        None
                    }
                })
                .collect(),
            None => vec![match method {
                Method::Stein => BenchMethod::SteinPlan,
                Method::Sinkhorn => BenchMethod::SinkhornPlan,
            }],
        };
        let horizons = f
            .get("bench.horizons", "an array of positive integers", |v| {
                v.as_array()?.iter().map(as_usize).collect::<Option<Vec<_>>>()
            })
            .unwrap_or_else(|| vec![steps]);
        if horizons.is_empty() || horizons.contains(&0) || horizons.windows(2).any(|w| w[0] >= w[1]) {
            f.problem("bench.horizons", "must be a nonempty strictly increasing list of positive integers");
        }
        let bench_workers = f
            .get("bench.workers", "an array of nonnegative integers", |v| {
                v.as_array()?.iter().map(as_usize).collect::<Option<Vec<_>>>()
            })
            .unwrap_or_else(|| vec![workers]);
        let bench = BenchKeys {
            methods,
            horizons,
            repetitions: f.count("bench.repetitions", 3, 1),
            workers: bench_workers,
            allow_long_tsp: f.boolean("bench.allow_long_tsp", false),
            warmup: f.boolean("bench.warmup", true),
        };

        if !f.problems.is_empty() {
            return Err(problems_error(f.problems));
        }
        let model = model.expect("checked above");
        Ok(Self {
            model,
            seed: seed.unwrap_or(0),
            workers,
            out,
            dt,
            steps,
            s0,
            reference: reference.expect("no problems implies a reference"),
            plan,
            metric_samples,
            tsp_max_passes,
            bench,
        })
    }

    /// Applies command-line overrides.
    pub fn override_with(&mut self, seed: Option<u64>, workers: Option<usize>) {
        if let Some(s) = seed {
            self.seed = s;
            self.plan.seed = Seed(s);
        }
        if let Some(w) = workers {
            self.workers = w;
            self.bench.workers = vec![w];
        }
        self.plan.workers = self.workers;
        self.plan.stein.workers = self.workers;
        self.plan.sinkhorn.workers = self.workers;
    }
}

fn problems_error(mut problems: Vec<Problem>) -> CliError {
    problems.sort_by(|a, b| a.key.cmp(&b.key));
    let summary: Vec<String> = problems.iter().map(|p| format!("{}: {}", p.key, p.message)).collect();
    let list: Vec<_> = problems
        .iter()
        .map(|p| json!({ "key": p.key, "problem": p.message, "suggestion": p.suggestion }))
        .collect();
    CliError::usage("config", format!("{} problem(s) in config: {}", problems.len(), summary.join("; ")))
        .with_details(json!({ "problems": list }))
}

fn reference_from(f: &mut Fields, base: &Path, dim: Option<usize>) -> Option<ReferenceDistribution> {
    let kind = f.string("reference.kind");
    let kind = kind.as_deref().unwrap_or(if f.values.contains_key("reference.path") {
        "csv"
    } else if f.values.contains_key("reference.means") {
        "mixture"
    } else {
        "fixture"
    });
    match kind {
        "fixture" => {
            let dim = dim?;
            match three_mode_fixture(dim) {
                Ok(g) => Some(g.into()),
                Err(e) => {
                    f.problem("reference.kind", e.to_string());
                    None
                }
            }
        }
        "mixture" => mixture_from(f, dim),
        "csv" => {
            let Some(path) = f.string("reference.path") else {
                f.problem("reference.path", "required when reference.kind = \"csv\"");
                return None;
            };
            let path = base.join(path);
            let points = match read_points(&path) {
                Ok(p) => p,
                Err(e) => {
                    f.problems.push(Problem { key: "reference.path".into(), message: e.message, suggestion: None });
                    return None;
                }
            };
            if dim.is_some_and(|d| d != points.dim()) {
                f.problem("reference.path", format!("points have {} columns, workspace has {}", points.dim(), dim?));
                return None;
            }
            match ReferenceDistribution::samples(points) {
                Ok(r) => Some(r),
                Err(e) => {
                    f.problem("reference.path", e.to_string());
                    None
                }
            }
        }
        other => {
            f.problem("reference.kind", format!("expected \"fixture\", \"mixture\" or \"csv\", got \"{other}\""));
            None
        }
    }
}

fn mixture_from(f: &mut Fields, dim: Option<usize>) -> Option<ReferenceDistribution> {
    let Some(means) = f.get("reference.means", "an array of points", as_f64_table) else {
        f.problem("reference.means", "required for a mixture reference");
        return None;
    };
    let k = means.len();
    let weights = f.get("reference.weights", "an array of numbers", as_f64_list).unwrap_or_else(|| vec![1.0; k]);
    let total: f64 = weights.iter().sum();
    if weights.len() != k || !(total > 0.0) {
        f.problem("reference.weights", format!("need {k} positive weights"));
        return None;
    }
    let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let d = means.first().map_or(0, Vec::len);
    if dim.is_some_and(|w| w != d) {
        f.problem("reference.means", format!("means have {d} components, workspace has {}", dim?));
        return None;
    }
    let covs: Vec<DMatrix<f64>> = match (
        f.get("reference.variances", "an array of numbers", as_f64_list),
        f.values.get("reference.covariances").cloned(),
    ) {
        (Some(_), Some(_)) => {
            f.problem("reference.covariances", "give reference.variances or reference.covariances, not both");
            return None;
        }
        (Some(vars), None) if vars.len() == k => vars.iter().map(|&v| DMatrix::identity(d, d) * v).collect(),
        (Some(_), None) => {
            f.problem("reference.variances", format!("need one variance per mean ({k})"));
            return None;
        }
        (None, Some(v)) => {
            let parsed: Option<Vec<Vec<Vec<f64>>>> = v.as_array().and_then(|a| a.iter().map(as_f64_table).collect());
            match parsed {
                Some(mats) if mats.len() == k && mats.iter().all(|m| m.len() == d && m.iter().all(|r| r.len() == d)) => {
                    mats.iter().map(|m| DMatrix::from_fn(d, d, |i, j| m[i][j])).collect()
                }
                _ => {
                    f.problem("reference.covariances", format!("need {k} matrices of size {d}x{d}"));
                    return None;
                }
            }
        }
        (None, None) => {
            f.problem("reference.variances", "a mixture needs reference.variances or reference.covariances");
            return None;
        }
    };
    match GaussianMixture::new(weights, means, covs) {
        Ok(g) => Some(g.into()),
        Err(e) => {
            f.problem("reference", e.to_string());
            None
        }
    }
}

/// Numeric CSV, one point per row. A first line with non-numeric fields is
/// taken as a header.
pub fn read_points(path: &Path) -> CliResult<Points> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => io_error(path, io),
            other => CliError::usage("csv", format!("{}: {other:?}", path.display())),
        })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| malformed(path, line, &e.to_string()))?;
        let parsed: Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(row) => {
                if rows.first().is_some_and(|r| r.len() != row.len()) {
                    return Err(malformed(path, line, "inconsistent column count"));
                }
                rows.push(row);
            }
            Err(_) if line == 1 => continue,
            Err(e) => return Err(malformed(path, line, &e.to_string())),
        }
    }
    if rows.is_empty() {
        return Err(CliError::usage("empty_input", format!("{} contains no points", path.display())));
    }
    Points::from_rows(&rows).map_err(CliError::from)
}

pub fn malformed(path: &Path, line: usize, why: &str) -> CliError {
    CliError::usage("malformed_csv", format!("{} line {line}: {why}", path.display()))
        .with_details(json!({ "path": path.display().to_string(), "line": line }))
}
