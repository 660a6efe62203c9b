//! The outer planning loop: rollout, reference flow, LQR flow matching,
//! control update.

use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::dynamics::{linearize_along, project_states, rollout, Dynamics, Trajectory};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::lqr::{solve_flow_lqr, LqrWeights};
use crate::points::Points;
use crate::reference::{ReferenceDistribution, Seed};
use crate::sinkhorn::{
    entropic_ot_from, mean_cross_sq_dist, self_transport, sinkhorn_divergence, sinkhorn_flow_warm, Omega,
    SinkhornConfig, WarmStart, AUTO_OMEGA_FRACTION,
};
use crate::stein::{stein_flow_on_trajectory, SteinConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Stein,
    Sinkhorn,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Stein => "stein",
            Method::Sinkhorn => "sinkhorn",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitialControls {
    Zeros,
    /// Seeded Gaussian controls with this standard deviation.
    RandomSmall(f64),
    Provided(Points),
}

/// Time grid and fixed initial state.
#[derive(Clone, Debug, PartialEq)]
pub struct Discretization {
    pub dt: f64,
    pub steps: usize,
    pub s0: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanConfig {
    pub method: Method,
    pub step_size: f64,
    pub max_iterations: usize,
    /// Stop once the mean flow magnitude drops below this.
    pub convergence_tol: f64,
    /// Optional `(low, high)` box per control channel.
    pub control_clamp: Option<Vec<(f64, f64)>>,
    pub seed: Seed,
    pub initial_controls: InitialControls,
    /// Coverage metric is recorded every this many iterations.
    pub metric_every: usize,
    /// Target draws for the Sinkhorn flow and the metric; `None` uses `T`.
    pub reference_samples: Option<usize>,
    pub workers: usize,
    pub stein: SteinConfig,
    pub sinkhorn: SinkhornConfig,
    pub q_weight: f64,
    pub r_weight: f64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            method: Method::Stein,
            step_size: 0.1,
            max_iterations: 300,
            convergence_tol: 1e-4,
            control_clamp: None,
            seed: Seed(0),
            initial_controls: InitialControls::RandomSmall(1e-2),
            metric_every: 10,
            reference_samples: None,
            workers: 0,
            stein: SteinConfig::default(),
            sinkhorn: SinkhornConfig::default(),
            q_weight: 1.0,
            r_weight: 0.1,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid(format!("step size must be positive, got {}", self.step_size)));
        }
        if self.max_iterations == 0 || self.metric_every == 0 {
            return Err(Error::invalid("max_iterations and metric_every must be at least 1"));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::invalid("convergence tolerance must be nonnegative"));
        }
        if self.reference_samples == Some(0) {
            return Err(Error::invalid("reference_samples must be at least 1"));
        }
        if let Some(clamp) = &self.control_clamp {
            if clamp.iter().any(|(lo, hi)| !(lo <= hi)) {
                return Err(Error::invalid("control clamp needs low <= high on every channel"));
            }
        }
        if let InitialControls::RandomSmall(s) = self.initial_controls {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::invalid("initial control scale must be nonnegative"));
            }
        }
        self.stein.validate()?;
        self.sinkhorn.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Mean flow magnitude on the trajectory before the update.
    pub flow_norm: f64,
    pub lqr_cost: f64,
    pub divergence: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseTimes {
    pub flow: Duration,
    pub lqr: Duration,
    pub rollout: Duration,
    pub total: Duration,
}

#[derive(Clone, Debug)]
pub struct PlanResult {
    pub trajectory: Trajectory,
    pub history: Vec<IterationRecord>,
    pub converged: bool,
    /// Coverage metric of the final trajectory against the target cloud.
    pub final_metric: f64,
    pub times: PhaseTimes,
}

/// Sinkhorn divergence between the workspace projection of `states[1..]` and
/// `q_samples`. With [`Omega::Auto`], ω is resolved from the target cloud
/// alone so values are comparable across trajectories.
pub fn coverage_metric(states: &Points, model: &dyn Dynamics, q_samples: &Points, cfg: &SinkhornConfig) -> Result<f64> {
    if states.len() < 2 {
        return Err(Error::invalid("trajectory needs at least two states"));
    }
    let cfg = cfg.with_omega(resolve_target_omega(cfg.omega, q_samples));
    sinkhorn_divergence(&project_states(model, states, 1), q_samples, &cfg)
}

fn resolve_target_omega(omega: Omega, y: &Points) -> f64 {
    match omega {
        Omega::Fixed(w) => w,
        Omega::Auto => AUTO_OMEGA_FRACTION * mean_cross_sq_dist(y, y),
    }
}

pub fn initial_controls(model: &dyn Dynamics, disc: &Discretization, cfg: &PlanConfig) -> Result<Points> {
    let m = model.control_dim();
    match &cfg.initial_controls {
        InitialControls::Zeros => Ok(Points::zeros(disc.steps, m)),
        InitialControls::RandomSmall(scale) => {
            let mut rng = cfg.seed.split(1);
            let data = (0..disc.steps * m).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
            Points::new(m, data)
        }
        InitialControls::Provided(u) => {
            if u.len() != disc.steps || u.dim() != m {
                return Err(Error::invalid(format!(
                    "provided controls are {}×{}, expected {}×{m}",
                    u.len(),
                    u.dim(),
                    disc.steps
                )));
            }
            Ok(u.clone())
        }
    }
}

/// Target cloud used by the Sinkhorn flow and the metric.
pub fn target_cloud(q: &ReferenceDistribution, steps: usize, cfg: &PlanConfig) -> Result<Points> {
    match (q, cfg.reference_samples) {
        (ReferenceDistribution::SampleBased(p), None) => Ok(p.clone()),
        (_, m) => q.sample(m.unwrap_or(steps), cfg.seed.child(2)),
    }
}

fn clamp(u: &mut Points, bounds: &[(f64, f64)]) {
    let m = u.dim();
    for row in u.as_mut_slice().chunks_exact_mut(m) {
        for (v, &(lo, hi)) in row.iter_mut().zip(bounds) {
            *v = v.clamp(lo, hi);
        }
    }
}

/// In-loop divergence against a fixed target cloud: the target self-term is
/// solved once and the other two terms are warm-started.
struct MetricTracker<'a> {
    targets: &'a Points,
    cfg: SinkhornConfig,
    target_self: Option<f64>,
    cross_f: Option<Vec<f64>>,
    self_f: Option<Vec<f64>>,
}

impl MetricTracker<'_> {
    fn divergence(&mut self, x: &Points) -> Result<f64> {
        let omega = self.cfg.omega.resolve(x, self.targets);
        let target_self = match self.target_self {
            Some(c) => c,
            None => *self.target_self.insert(self_transport(self.targets, omega, &self.cfg, None)?.cost),
        };
        let cross = entropic_ot_from(x, self.targets, &self.cfg, self.cross_f.as_deref())?;
        let own = self_transport(x, omega, &self.cfg, self.self_f.as_deref())?;
        let value = cross.cost - 0.5 * own.cost - 0.5 * target_self;
        self.cross_f = Some(cross.f);
        self.self_f = Some(own.f);
        Ok(value)
    }
}

struct FlowEvaluator<'a> {
    model: &'a dyn Dynamics,
    method: Method,
    q: &'a ReferenceDistribution,
    targets: &'a Points,
    stein: SteinConfig,
    sinkhorn: SinkhornConfig,
    warm: WarmStart,
}

impl FlowEvaluator<'_> {
    fn eval(&mut self, states: &Points) -> Result<FlowField> {
        match self.method {
            Method::Stein => {
                let mixture = self
                    .q
                    .mixture()
                    .ok_or_else(|| Error::invalid("Stein flow needs a score-based reference"))?;
                stein_flow_on_trajectory(states, self.model, mixture, &self.stein)
            }
            Method::Sinkhorn => {
                let x = project_states(self.model, states, 1);
                let mut flow = sinkhorn_flow_warm(&x, self.targets, &self.sinkhorn, &mut self.warm)?;
                // per-sample displacement scale, comparable to the Stein flow
                let n = x.len() as f64;
                flow.vectors.as_mut_slice().iter_mut().for_each(|v| *v *= n);
                Ok(flow)
            }
        }
    }
}

/// Runs the planning loop. Failures inside the loop come back as
/// [`Error::Plan`] carrying the last trajectory whose rollout succeeded.
pub fn plan(
    model: &dyn Dynamics,
    q: &ReferenceDistribution,
    disc: &Discretization,
    cfg: &PlanConfig,
) -> Result<PlanResult> {
    let start = Instant::now();
    cfg.validate()?;
    if disc.steps == 0 || !(disc.dt > 0.0) {
        return Err(Error::invalid("discretization needs dt > 0 and at least one step"));
    }
    if q.dim() != model.workspace_dim() {
        return Err(Error::invalid(format!(
            "reference lives in {} dimensions, {} workspace has {}",
            q.dim(),
            model.name(),
            model.workspace_dim()
        )));
    }
    if cfg.method == Method::Stein && q.mixture().is_none() {
        return Err(Error::invalid("Stein flow needs a score-based reference"));
    }
    if let Some(c) = &cfg.control_clamp {
        if c.len() != model.control_dim() {
            return Err(Error::invalid("control clamp needs one box per control channel"));
        }
    }

    let weights = LqrWeights::for_model(model, cfg.q_weight, cfg.r_weight)?;
    let targets = target_cloud(q, disc.steps, cfg)?;
    let sinkhorn = SinkhornConfig {
        workers: cfg.workers,
        ..cfg.sinkhorn.with_omega(resolve_target_omega(cfg.sinkhorn.omega, &targets))
    };
    let mut evaluator = FlowEvaluator {
        model,
        method: cfg.method,
        q,
        targets: &targets,
        stein: SteinConfig { workers: cfg.workers, ..cfg.stein },
        sinkhorn,
        warm: WarmStart::default(),
    };

    let mut tracker = MetricTracker {
        targets: &targets,
        cfg: sinkhorn,
        target_self: None,
        cross_f: None,
        self_f: None,
    };
    let mut times = PhaseTimes::default();
    let mut controls = initial_controls(model, disc, cfg)?;
    if let Some(c) = &cfg.control_clamp {
        clamp(&mut controls, c);
    }
    let t0 = Instant::now();
    let mut states = rollout(model, &disc.s0, &controls, disc.dt)?;
    times.rollout += t0.elapsed();

    let mut history = Vec::new();
    let mut converged = false;
    for iteration in 1..=cfg.max_iterations {
        let fail = |source: Error, states: &Points, controls: &Points| Error::Plan {
            iteration,
            last_good: Box::new(Trajectory {
                dt: disc.dt,
                states: states.clone(),
                controls: controls.clone(),
            }),
            source: Box::new(source),
        };

        let divergence = if iteration == 1 || iteration % cfg.metric_every == 0 {
            let x = project_states(model, &states, 1);
            Some(tracker.divergence(&x).map_err(|e| fail(e, &states, &controls))?)
        } else {
            None
        };

        let t = Instant::now();
        let flow = evaluator.eval(&states).map_err(|e| fail(e, &states, &controls))?;
        times.flow += t.elapsed();
        let flow_norm = flow.mean_magnitude();
        if flow_norm < cfg.convergence_tol {
            history.push(IterationRecord {
                iteration,
                flow_norm,
                lqr_cost: 0.0,
                divergence,
            });
            converged = true;
            break;
        }

        let t = Instant::now();
        let solution = linearize_along(model, &states, &controls, disc.dt).and_then(|sys| {
            // flow row i belongs to states[i + 1]; stage k tracks z[k]
            let mut stage = Points::zeros(disc.steps, flow.vectors.dim());
            stage.as_mut_slice()[flow.vectors.dim()..]
                .copy_from_slice(&flow.vectors.as_slice()[..(disc.steps - 1) * flow.vectors.dim()]);
            solve_flow_lqr(&sys, &stage, &weights, Some(flow.vectors.row(disc.steps - 1)))
        });
        let solution = solution.map_err(|e| fail(e, &states, &controls))?;
        times.lqr += t.elapsed();

        let mut next = controls.clone();
        for (u, v) in next.as_mut_slice().iter_mut().zip(solution.v_star.as_slice()) {
            *u += cfg.step_size * v;
        }
        if let Some(c) = &cfg.control_clamp {
            clamp(&mut next, c);
        }
        let t = Instant::now();
        let rolled = rollout(model, &disc.s0, &next, disc.dt).map_err(|e| fail(e, &states, &controls))?;
        times.rollout += t.elapsed();
        controls = next;
        states = rolled;

        history.push(IterationRecord {
            iteration,
            flow_norm,
            lqr_cost: solution.cost,
            divergence,
        });
        log::debug!("iteration {iteration}: flow norm {flow_norm:.4e}, LQR cost {:.4e}", solution.cost);
    }

    let verified = rollout(model, &disc.s0, &controls, disc.dt)?;
    if verified != states {
        return Err(Error::invalid("final states differ from the rollout of the final controls"));
    }
    let final_metric = sinkhorn_divergence(&project_states(model, &states, 1), &targets, &sinkhorn)?;
    times.total = start.elapsed();
    Ok(PlanResult {
        trajectory: Trajectory {
            dt: disc.dt,
            states,
            controls,
        },
        history,
        converged,
        final_metric,
        times,
    })
}
