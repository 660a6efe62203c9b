//! Waypoint baseline: order target samples with nearest neighbor + 2-opt,
//! then track the ordered path with iterated time-varying LQR.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::dynamics::{linearize_along, rollout, Dynamics, Trajectory};
use crate::error::{Error, Result};
use crate::lqr::solve_tracking_lqr;
use crate::parallel;
use crate::points::{sq_dist, Points};
use crate::reference::{ReferenceDistribution, Seed};

/// Improvements smaller than this are treated as ties.
const MIN_GAIN: f64 = 1e-12;

/// Tracking iterations (linearize, solve, update).
pub const TRACKING_ITERATIONS: usize = 10;

/// Open tour over a point set.
#[derive(Clone, Debug, PartialEq)]
pub struct Tour {
    pub order: Vec<usize>,
    pub length: f64,
}

fn dist(points: &Points, a: usize, b: usize) -> f64 {
    sq_dist(points.row(a), points.row(b)).sqrt()
}

/// Length of the open path visiting `order`.
pub fn path_length(points: &Points, order: &[usize]) -> f64 {
    order.windows(2).map(|w| dist(points, w[0], w[1])).sum()
}

fn nearest_neighbor(points: &Points, start: usize) -> Vec<usize> {
    let n = points.len();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut current = start;
    visited[start] = true;
    order.push(start);
    for _ in 1..n {
        let p = points.row(current);
        let mut best = (f64::INFINITY, usize::MAX);
        for (j, q) in points.rows().enumerate() {
            if !visited[j] {
                let d = sq_dist(p, q);
                if d < best.0 {
                    best = (d, j);
                }
            }
        }
        current = best.1;
        visited[current] = true;
        order.push(current);
    }
    order
}

/// Length change from reversing `order[i..=j]`. Prefix and suffix reversals
/// only swap one edge.
fn reversal_gain(points: &Points, order: &[usize], i: usize, j: usize) -> f64 {
    let n = order.len();
    let mut before = 0.0;
    let mut after = 0.0;
    if i > 0 {
        before += dist(points, order[i - 1], order[i]);
        after += dist(points, order[i - 1], order[j]);
    }
    if j + 1 < n {
        before += dist(points, order[j], order[j + 1]);
        after += dist(points, order[i], order[j + 1]);
    }
    before - after
}

/// Lexicographically first improving 2-opt move with `i >= from`.
fn first_improving(points: &Points, order: &[usize], from: usize) -> Option<(usize, usize)> {
    let n = order.len();
    (from..n - 1).into_par_iter().find_map_first(|i| {
        (i + 1..n)
            .find(|&j| reversal_gain(points, order, i, j) > MIN_GAIN)
            .map(|j| (i, j))
    })
}

/// Whether any single 2-opt move shortens the tour.
pub fn has_improving_move(points: &Points, order: &[usize]) -> bool {
    order.len() > 2 && first_improving(points, order, 0).is_some()
}

/// Nearest-neighbor tour from a seeded random start, refined by
/// first-improvement 2-opt for at most `max_passes` passes.
pub fn build_tour(points: &Points, seed: Seed, max_passes: usize, workers: usize) -> Result<Tour> {
    let n = points.len();
    if n < 2 {
        return Err(Error::invalid("a tour needs at least two points"));
    }
    if !points.is_finite() {
        return Err(Error::invalid("tour points must be finite"));
    }
    let start = seed.rng().random_range(0..n);
    let mut order = nearest_neighbor(points, start);
    parallel::install(workers, || {
        for _ in 0..max_passes {
            let mut improved = false;
            let mut from = 0;
            while let Some((i, j)) = first_improving(points, &order, from) {
                order[i..=j].reverse();
                improved = true;
                from = i;
            }
            if !improved {
                break;
            }
        }
    });
    let length = path_length(points, &order);
    Ok(Tour { order, length })
}

/// `count` points spaced evenly in arc length along the polyline.
pub fn resample_by_arc_length(path: &Points, count: usize) -> Result<Points> {
    if path.len() < 2 || count < 2 {
        return Err(Error::invalid("resampling needs at least two points in and out"));
    }
    let mut cumulative = Vec::with_capacity(path.len());
    cumulative.push(0.0);
    for k in 1..path.len() {
        let last = cumulative[k - 1];
        cumulative.push(last + sq_dist(path.row(k - 1), path.row(k)).sqrt());
    }
    let total = *cumulative.last().unwrap();
    let d = path.dim();
    let mut out = Points::zeros(count, d);
    let mut seg = 0;
    for k in 0..count {
        let s = total * k as f64 / (count - 1) as f64;
        while seg + 2 < path.len() && cumulative[seg + 1] < s {
            seg += 1;
        }
        let span = cumulative[seg + 1] - cumulative[seg];
        let w = if span > 0.0 { ((s - cumulative[seg]) / span).clamp(0.0, 1.0) } else { 0.0 };
        let (a, b) = (path.row(seg), path.row(seg + 1));
        for (o, (x, y)) in out.row_mut(k).iter_mut().zip(a.iter().zip(b)) {
            *o = x + w * (y - x);
        }
    }
    Ok(out)
}

/// Controls that reproduce the reference increments in least squares,
/// using `f(s, u) = f(s, 0) + B(s) u` (every built-in model is control-affine).
fn feedforward(model: &dyn Dynamics, reference: &Points, dt: f64) -> Result<Points> {
    let (n, m) = (model.state_dim(), model.control_dim());
    let steps = reference.len() - 1;
    let zero = vec![0.0; m];
    let mut drift = vec![0.0; n];
    let mut out = Points::zeros(steps, m);
    for k in 0..steps {
        let s = reference.row(k);
        model.f(s, &zero, &mut drift);
        let want = DVector::from_iterator(n, (0..n).map(|i| (reference.row(k + 1)[i] - s[i]) / dt - drift[i]));
        let b = model.jacobian_b(s, &zero);
        let normal = b.transpose() * &b;
        let u = normal
            .cholesky()
            .ok_or_else(|| Error::invalid("control matrix has deficient column rank"))?
            .solve(&(b.transpose() * want));
        out.row_mut(k).copy_from_slice(u.as_slice());
    }
    Ok(out)
}

/// Tracking weights: workspace coordinates 1, other states `0.1`.
fn tracking_q(model: &dyn Dynamics) -> DMatrix<f64> {
    let n = model.state_dim();
    let mut q = DMatrix::identity(n, n) * 0.1;
    for &i in model.workspace_indices() {
        q[(i, i)] = 1.0;
    }
    q
}

/// Time split of a tracking run.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrackingTimes {
    pub lqr: Duration,
    pub rollout: Duration,
}

/// Resample the ordered waypoints to `steps + 1` reference states and track
/// them from the first one.
pub fn track_waypoints(model: &dyn Dynamics, waypoints: &Points, steps: usize, dt: f64) -> Result<Trajectory> {
    track_waypoints_timed(model, waypoints, steps, dt).map(|(t, _)| t)
}

pub fn track_waypoints_timed(
    model: &dyn Dynamics,
    waypoints: &Points,
    steps: usize,
    dt: f64,
) -> Result<(Trajectory, TrackingTimes)> {
    if waypoints.dim() != model.workspace_dim() {
        return Err(Error::invalid(format!(
            "waypoints have dimension {}, {} workspace has {}",
            waypoints.dim(),
            model.name(),
            model.workspace_dim()
        )));
    }
    if steps == 0 || !(dt > 0.0) {
        return Err(Error::invalid("tracking needs dt > 0 and at least one step"));
    }
    let path = resample_by_arc_length(waypoints, steps + 1)?;
    let reference = model.states_along_path(&path, dt);
    let s0 = reference.row(0).to_vec();
    let q = tracking_q(model);
    let r = DMatrix::identity(model.control_dim(), model.control_dim()) * 1e-3;

    let mut times = TrackingTimes::default();
    let mut controls = feedforward(model, &reference, dt)?;
    let t = Instant::now();
    let mut states = rollout(model, &s0, &controls, dt)?;
    times.rollout += t.elapsed();
    for _ in 0..TRACKING_ITERATIONS {
        let t = Instant::now();
        let sys = linearize_along(model, &states, &controls, dt)?;
        let mut error = reference.clone();
        for (e, s) in error.as_mut_slice().iter_mut().zip(states.as_slice()) {
            *e -= s;
        }
        let stage = error.slice_rows(0..steps);
        let sol = solve_tracking_lqr(&sys, &stage, &q, &r, Some(error.row(steps)))?;
        times.lqr += t.elapsed();
        for (u, v) in controls.as_mut_slice().iter_mut().zip(sol.v_star.as_slice()) {
            *u += v;
        }
        let t = Instant::now();
        states = rollout(model, &s0, &controls, dt)?;
        times.rollout += t.elapsed();
    }
    Ok((Trajectory { dt, states, controls }, times))
}

#[derive(Clone, Debug)]
pub struct BaselineResult {
    pub trajectory: Trajectory,
    pub tour: Tour,
    pub waypoints: Points,
    pub tour_time: Duration,
    pub tracking: TrackingTimes,
    pub total_time: Duration,
}

/// Full baseline: `steps` target draws, tour, tracking.
pub fn tsp_baseline(
    model: &dyn Dynamics,
    q: &ReferenceDistribution,
    steps: usize,
    dt: f64,
    seed: Seed,
    max_passes: usize,
    workers: usize,
) -> Result<BaselineResult> {
    let start = Instant::now();
    let samples = q.sample(steps.max(2), seed.child(3))?;
    let t = Instant::now();
    let tour = build_tour(&samples, seed.child(4), max_passes, workers)?;
    let tour_time = t.elapsed();
    let waypoints = samples.permuted(&tour.order);
    let (trajectory, tracking) = track_waypoints_timed(model, &waypoints, steps, dt)?;
    Ok(BaselineResult {
        trajectory,
        tour,
        waypoints,
        tour_time,
        tracking,
        total_time: start.elapsed(),
    })
}
