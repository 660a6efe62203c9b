//! Robot models, RK4 rollout and linearization along a trajectory.
//!
//! Coverage is measured on the *workspace*, a linear coordinate selection of
//! the state (position only; headings and speeds carry no target density).

use std::f64::consts::PI;
use std::fmt::Debug;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::points::Points;

/// Continuous-time system `ṡ = f(s, u)` with analytic Jacobians.
pub trait Dynamics: Debug + Send + Sync {
    fn name(&self) -> &'static str;
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;

    /// State indices that make up the workspace, in workspace order.
    fn workspace_indices(&self) -> &'static [usize];

    /// Writes `f(s, u)` into `out`.
    fn f(&self, s: &[f64], u: &[f64], out: &mut [f64]);

    /// `∂f/∂s`, `state_dim × state_dim`.
    fn jacobian_a(&self, s: &[f64], u: &[f64]) -> DMatrix<f64>;

    /// `∂f/∂u`, `state_dim × control_dim`.
    fn jacobian_b(&self, s: &[f64], u: &[f64]) -> DMatrix<f64>;

    /// Full states following a workspace path sampled every `dt` seconds.
    /// Non-workspace coordinates (heading, speed, ...) are inferred from the
    /// path geometry.
    fn states_along_path(&self, path: &Points, dt: f64) -> Points;

    fn workspace_dim(&self) -> usize {
        self.workspace_indices().len()
    }

    fn project(&self, s: &[f64]) -> Vec<f64> {
        self.workspace_indices().iter().map(|&i| s[i]).collect()
    }

    /// `workspace_dim × state_dim` selection matrix `P` with `project(s) = P s`.
    fn project_matrix(&self) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(self.workspace_dim(), self.state_dim());
        for (row, &col) in self.workspace_indices().iter().enumerate() {
            p[(row, col)] = 1.0;
        }
        p
    }

    /// Start state used when a config gives none: the centre of the unit
    /// workspace with all other coordinates zero.
    fn default_initial_state(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.state_dim()];
        for &i in self.workspace_indices() {
            s[i] = 0.5;
        }
        s
    }

    fn eval(&self, s: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim()];
        self.f(s, u, &mut out);
        out
    }
}

/// `ṡ = u` in the plane.
#[derive(Clone, Copy, Debug, Default)]
pub struct SingleIntegrator2d;

/// Unicycle: state `(x, y, θ)`, control `(v, ω)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct DiffDrive;

/// Kinematic fixed-wing aircraft.
///
/// State `(x, y, z, ψ, γ, v)`: position, heading, flight-path angle, airspeed.
/// Control `(ψ̇, γ̇, v̇)` commands.
#[derive(Clone, Copy, Debug, Default)]
pub struct Aircraft3d;

pub fn single_integrator_2d() -> SingleIntegrator2d {
    SingleIntegrator2d
}

pub fn differential_drive() -> DiffDrive {
    DiffDrive
}

pub fn aircraft_3d() -> Aircraft3d {
    Aircraft3d
}

pub const MODEL_NAMES: [&str; 3] = ["single_integrator_2d", "diff_drive", "aircraft_3d"];

/// Looks a model up by its config-file name.
pub fn model_by_name(name: &str) -> Result<Box<dyn Dynamics>> {
    match name {
        "single_integrator_2d" => Ok(Box::new(SingleIntegrator2d)),
        "diff_drive" => Ok(Box::new(DiffDrive)),
        "aircraft_3d" => Ok(Box::new(Aircraft3d)),
        other => Err(Error::invalid(format!(
            "unknown model {other:?}; expected one of {MODEL_NAMES:?}"
        ))),
    }
}

impl Dynamics for SingleIntegrator2d {
    fn name(&self) -> &'static str {
        "single_integrator_2d"
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn control_dim(&self) -> usize {
        2
    }
    fn workspace_indices(&self) -> &'static [usize] {
        &[0, 1]
    }
    fn f(&self, _s: &[f64], u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&u[..2]);
    }
    fn jacobian_a(&self, _s: &[f64], _u: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(2, 2)
    }
    fn jacobian_b(&self, _s: &[f64], _u: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(2, 2)
    }
    fn states_along_path(&self, path: &Points, _dt: f64) -> Points {
        path.clone()
    }
}

impl Dynamics for DiffDrive {
    fn name(&self) -> &'static str {
        "diff_drive"
    }
    fn state_dim(&self) -> usize {
        3
    }
    fn control_dim(&self) -> usize {
        2
    }
    fn workspace_indices(&self) -> &'static [usize] {
        &[0, 1]
    }
    fn f(&self, s: &[f64], u: &[f64], out: &mut [f64]) {
        let (sin, cos) = s[2].sin_cos();
        out[0] = u[0] * cos;
        out[1] = u[0] * sin;
        out[2] = u[1];
    }
    fn jacobian_a(&self, s: &[f64], u: &[f64]) -> DMatrix<f64> {
        let (sin, cos) = s[2].sin_cos();
        let mut a = DMatrix::zeros(3, 3);
        a[(0, 2)] = -u[0] * sin;
        a[(1, 2)] = u[0] * cos;
        a
    }
    fn jacobian_b(&self, s: &[f64], _u: &[f64]) -> DMatrix<f64> {
        let (sin, cos) = s[2].sin_cos();
        let mut b = DMatrix::zeros(3, 2);
        b[(0, 0)] = cos;
        b[(1, 0)] = sin;
        b[(2, 1)] = 1.0;
        b
    }
    fn states_along_path(&self, path: &Points, _dt: f64) -> Points {
        let headings = unwrap_angles(&segment_angles(path, |d| d[1].atan2(d[0])));
        let mut out = Points::zeros(path.len(), 3);
        for (k, p) in path.rows().enumerate() {
            out.row_mut(k).copy_from_slice(&[p[0], p[1], headings[k]]);
        }
        out
    }
}

impl Dynamics for Aircraft3d {
    fn name(&self) -> &'static str {
        "aircraft_3d"
    }
    fn state_dim(&self) -> usize {
        6
    }
    fn control_dim(&self) -> usize {
        3
    }
    fn workspace_indices(&self) -> &'static [usize] {
        &[0, 1, 2]
    }
    fn f(&self, s: &[f64], u: &[f64], out: &mut [f64]) {
        let (spsi, cpsi) = s[3].sin_cos();
        let (sgam, cgam) = s[4].sin_cos();
        let v = s[5];
        out[0] = v * cgam * cpsi;
        out[1] = v * cgam * spsi;
        out[2] = v * sgam;
        out[3] = u[0];
        out[4] = u[1];
        out[5] = u[2];
    }
    fn jacobian_a(&self, s: &[f64], _u: &[f64]) -> DMatrix<f64> {
        let (spsi, cpsi) = s[3].sin_cos();
        let (sgam, cgam) = s[4].sin_cos();
        let v = s[5];
        let mut a = DMatrix::zeros(6, 6);
        a[(0, 3)] = -v * cgam * spsi;
        a[(0, 4)] = -v * sgam * cpsi;
        a[(0, 5)] = cgam * cpsi;
        a[(1, 3)] = v * cgam * cpsi;
        a[(1, 4)] = -v * sgam * spsi;
        a[(1, 5)] = cgam * spsi;
        a[(2, 4)] = v * cgam;
        a[(2, 5)] = sgam;
        a
    }
    fn jacobian_b(&self, _s: &[f64], _u: &[f64]) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(6, 3);
        b[(3, 0)] = 1.0;
        b[(4, 1)] = 1.0;
        b[(5, 2)] = 1.0;
        b
    }
    fn default_initial_state(&self) -> Vec<f64> {
        vec![0.5, 0.5, 0.5, 0.0, 0.0, 0.1]
    }
    fn states_along_path(&self, path: &Points, dt: f64) -> Points {
        let headings = unwrap_angles(&segment_angles(path, |d| d[1].atan2(d[0])));
        let climbs = segment_angles(path, |d| d[2].atan2(d[0].hypot(d[1])));
        let speeds = segment_angles(path, |d| crate::points::norm(d) / dt);
        let mut out = Points::zeros(path.len(), 6);
        for (k, p) in path.rows().enumerate() {
            out.row_mut(k)
                .copy_from_slice(&[p[0], p[1], p[2], headings[k], climbs[k], speeds[k]]);
        }
        out
    }
}

/// Per-point quantity derived from the outgoing path segment (the incoming one
/// for the last point). Degenerate zero-length segments inherit the previous
/// value.
fn segment_angles(path: &Points, angle: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let n = path.len();
    let mut out = vec![0.0; n];
    if n < 2 {
        return out;
    }
    let mut last = None;
    let mut diff = vec![0.0; path.dim()];
    for k in 0..n {
        let (a, b) = if k + 1 < n { (k, k + 1) } else { (k - 1, k) };
        for (d, (x, y)) in diff.iter_mut().zip(path.row(b).iter().zip(path.row(a))) {
            *d = x - y;
        }
        let value = if crate::points::norm(&diff) > 1e-12 {
            angle(&diff)
        } else {
            last.unwrap_or(0.0)
        };
        out[k] = value;
        last = Some(value);
    }
    // Leading degenerate segments take the first well-defined value.
    if let Some(first) = (0..n - 1).find(|&k| {
        let d: f64 = crate::points::sq_dist(path.row(k), path.row(k + 1));
        d > 1e-24
    }) {
        let v = out[first];
        out[..first].iter_mut().for_each(|x| *x = v);
    }
    out
}

fn unwrap_angles(angles: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(angles.len());
    let mut offset = 0.0;
    let mut prev: Option<f64> = None;
    for &a in angles {
        if let Some(p) = prev {
            let mut d = a + offset - p;
            while d > PI {
                offset -= 2.0 * PI;
                d -= 2.0 * PI;
            }
            while d < -PI {
                offset += 2.0 * PI;
                d += 2.0 * PI;
            }
        }
        let v = a + offset;
        out.push(v);
        prev = Some(v);
    }
    out
}

/// A discretized trajectory: `states` has one more row than `controls`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Points,
    pub controls: Points,
}

impl Trajectory {
    pub fn num_steps(&self) -> usize {
        self.controls.len()
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.num_steps() as f64
    }

    pub fn initial_state(&self) -> &[f64] {
        self.states.row(0)
    }

    /// Workspace projection of `states[1..=T]` (the initial state is fixed and
    /// excluded from coverage).
    pub fn workspace_points(&self, model: &dyn Dynamics) -> Points {
        project_states(model, &self.states, 1)
    }
}

/// Projects `states[skip..]` onto the workspace.
pub fn project_states(model: &dyn Dynamics, states: &Points, skip: usize) -> Points {
    let idx = model.workspace_indices();
    let n = states.len().saturating_sub(skip);
    let mut out = Points::zeros(n, idx.len());
    for k in 0..n {
        let s = states.row(k + skip);
        for (o, &i) in out.row_mut(k).iter_mut().zip(idx) {
            *o = s[i];
        }
    }
    out
}

/// Integrates `controls` from `s0` with one RK4 step per control sample
/// (zero-order hold). Returns `T + 1` states.
pub fn rollout(model: &dyn Dynamics, s0: &[f64], controls: &Points, dt: f64) -> Result<Points> {
    let n = model.state_dim();
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    if s0.len() != n {
        return Err(Error::invalid(format!(
            "initial state has {} entries, model {} expects {n}",
            s0.len(),
            model.name()
        )));
    }
    if controls.is_empty() {
        return Err(Error::invalid("control sequence is empty"));
    }
    if controls.dim() != model.control_dim() {
        return Err(Error::invalid(format!(
            "controls have dimension {}, model {} expects {}",
            controls.dim(),
            model.name(),
            model.control_dim()
        )));
    }
    if !s0.iter().all(|v| v.is_finite()) {
        return Err(Error::RolloutDivergence { step: 0 });
    }

    let t = controls.len();
    let mut states = Points::zeros(t + 1, n);
    states.row_mut(0).copy_from_slice(s0);
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut next = vec![0.0; n];
    for k in 0..t {
        let s = states.row(k);
        let u = controls.row(k);
        model.f(s, u, &mut k1);
        axpy_into(&mut tmp, s, 0.5 * dt, &k1);
        model.f(&tmp, u, &mut k2);
        axpy_into(&mut tmp, s, 0.5 * dt, &k2);
        model.f(&tmp, u, &mut k3);
        axpy_into(&mut tmp, s, dt, &k3);
        model.f(&tmp, u, &mut k4);
        for i in 0..n {
            next[i] = s[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::RolloutDivergence { step: k + 1 });
        }
        states.row_mut(k + 1).copy_from_slice(&next);
    }
    Ok(states)
}

#[inline]
fn axpy_into(out: &mut [f64], x: &[f64], a: f64, y: &[f64]) {
    for ((o, xi), yi) in out.iter_mut().zip(x).zip(y) {
        *o = xi + a * yi;
    }
}

/// Jacobian sequences of a trajectory, `A[k] = ∂f/∂s`, `B[k] = ∂f/∂u` at
/// `(S[k], U[k])`.
#[derive(Clone, Debug)]
pub struct LtvSystem {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub dt: f64,
}

impl LtvSystem {
    pub fn new(a: Vec<DMatrix<f64>>, b: Vec<DMatrix<f64>>, dt: f64) -> Result<Self> {
        if a.len() != b.len() || a.is_empty() {
            return Err(Error::invalid(format!(
                "LTV system needs equal nonempty A/B sequences, got {} and {}",
                a.len(),
                b.len()
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::invalid("dt must be positive"));
        }
        let n = a[0].nrows();
        let m = b[0].ncols();
        for (k, (ak, bk)) in a.iter().zip(&b).enumerate() {
            if ak.shape() != (n, n) || bk.shape() != (n, m) {
                return Err(Error::invalid(format!("inconsistent shapes at step {k}")));
            }
            if !ak.iter().chain(bk.iter()).all(|v| v.is_finite()) {
                return Err(Error::invalid(format!("non-finite Jacobian at step {k}")));
            }
        }
        Ok(Self { a, b, dt })
    }

    pub fn num_steps(&self) -> usize {
        self.a.len()
    }

    pub fn state_dim(&self) -> usize {
        self.a[0].nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b[0].ncols()
    }
}

pub fn linearize_along(
    model: &dyn Dynamics,
    states: &Points,
    controls: &Points,
    dt: f64,
) -> Result<LtvSystem> {
    if states.len() != controls.len() + 1 {
        return Err(Error::invalid(format!(
            "expected |S| = |U| + 1, got {} states and {} controls",
            states.len(),
            controls.len()
        )));
    }
    let (a, b) = (0..controls.len())
        .map(|k| {
            let (s, u) = (states.row(k), controls.row(k));
            (model.jacobian_a(s, u), model.jacobian_b(s, u))
        })
        .unzip();
    LtvSystem::new(a, b, dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f`, independent of the analytic Jacobians.
    fn fd_jacobians(model: &dyn Dynamics, s: &[f64], u: &[f64], h: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = model.state_dim();
        let m = model.control_dim();
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, m);
        for j in 0..n {
            let (mut sp, mut sm) = (s.to_vec(), s.to_vec());
            sp[j] += h;
            sm[j] -= h;
            let (fp, fm) = (model.eval(&sp, u), model.eval(&sm, u));
            for i in 0..n {
                a[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        for j in 0..m {
            let (mut up, mut um) = (u.to_vec(), u.to_vec());
            up[j] += h;
            um[j] -= h;
            let (fp, fm) = (model.eval(s, &up), model.eval(s, &um));
            for i in 0..n {
                b[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        (a, b)
    }

    fn rel_err(analytic: &DMatrix<f64>, fd: &DMatrix<f64>) -> f64 {
        (analytic - fd).amax() / (1.0 + fd.amax())
    }

    fn models() -> Vec<Box<dyn Dynamics>> {
        MODEL_NAMES.iter().map(|n| model_by_name(n).unwrap()).collect()
    }

    #[test]
    fn single_integrator_examples() {
        let m = single_integrator_2d();
        assert_eq!(m.eval(&[0.0, 0.0], &[1.0, 2.0]), vec![1.0, 2.0]);
        assert_eq!(m.jacobian_a(&[3.0, 1.0], &[0.5, 0.5]), DMatrix::zeros(2, 2));
        assert_eq!(m.jacobian_b(&[3.0, 1.0], &[0.5, 0.5]), DMatrix::identity(2, 2));
    }

    #[test]
    fn diff_drive_examples() {
        let m = differential_drive();
        assert_eq!(m.eval(&[0.0, 0.0, 0.0], &[1.0, 0.0]), vec![1.0, 0.0, 0.0]);
        let f = m.eval(&[0.0, 0.0, PI / 2.0], &[1.0, 0.5]);
        assert_abs_diff_eq!(f[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(f[1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(f[2], 0.5, epsilon = 1e-15);

        let a = m.jacobian_a(&[0.0, 0.0, 0.0], &[1.0, 0.0]);
        let mut expected = DMatrix::zeros(3, 3);
        expected[(1, 2)] = 1.0;
        assert_abs_diff_eq!(a, expected, epsilon = 1e-15);
        let (fd, _) = fd_jacobians(&m, &[0.0, 0.0, 0.0], &[1.0, 0.0], 1e-5);
        assert!(rel_err(&a, &fd) < 1e-9);
    }

    #[test]
    fn aircraft_examples() {
        let m = aircraft_3d();
        assert_eq!(
            m.eval(&[0.0, 0.0, 0.0, 0.0, 0.0, 1.0], &[0.0, 0.0, 0.0]),
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
        let f = m.eval(&[0.0, 0.0, 0.0, 0.0, PI / 2.0, 1.0], &[0.0, 0.0, 0.0]);
        let expected = [0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        for (x, e) in f.iter().zip(expected) {
            assert_abs_diff_eq!(*x, e, epsilon = 1e-15);
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for model in models() {
            let mut worst: f64 = 0.0;
            for _ in 0..100 {
                let s: Vec<f64> = (0..model.state_dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
                let u: Vec<f64> = (0..model.control_dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
                let (fa, fb) = fd_jacobians(model.as_ref(), &s, &u, 1e-5);
                worst = worst
                    .max(rel_err(&model.jacobian_a(&s, &u), &fa))
                    .max(rel_err(&model.jacobian_b(&s, &u), &fb));
            }
            assert!(worst <= 1e-4, "{}: jacobian error {worst}", model.name());
        }
    }

    #[test]
    fn projection_is_linear_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for model in models() {
            let p = model.project_matrix();
            for _ in 0..10 {
                let s: Vec<f64> = (0..model.state_dim()).map(|_| rng.random_range(-5.0..5.0)).collect();
                let via_matrix = &p * nalgebra::DVector::from_column_slice(&s);
                assert_eq!(model.project(&s), via_matrix.as_slice());
            }
        }
    }

    #[test]
    fn rollout_straight_lines() {
        let u = Points::from_rows(&vec![[1.0, 0.0]; 10]).unwrap();
        let s = rollout(&single_integrator_2d(), &[0.0, 0.0], &u, 0.1).unwrap();
        assert_eq!(s.len(), 11);
        assert_eq!(s.row(0), &[0.0, 0.0]);
        assert_abs_diff_eq!(s.row(10)[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.row(10)[1], 0.0, epsilon = 1e-12);

        let s = rollout(&differential_drive(), &[0.0, 0.0, 0.0], &u, 0.1).unwrap();
        assert_abs_diff_eq!(s.row(10)[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.row(10)[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.row(10)[2], 0.0, epsilon = 1e-12);
    }

    /// Analytic unicycle arc for constant (v, ω) from the origin with θ0 = 0.
    fn arc(v: f64, w: f64, t: f64) -> [f64; 2] {
        [v / w * (w * t).sin(), v / w * (1.0 - (w * t).cos())]
    }

    fn arc_error(steps: usize) -> f64 {
        let tf = PI;
        let dt = tf / steps as f64;
        let u = Points::from_rows(&vec![[1.0, 1.0]; steps]).unwrap();
        let s = rollout(&differential_drive(), &[0.0, 0.0, 0.0], &u, dt).unwrap();
        let exact = arc(1.0, 1.0, tf);
        crate::points::sq_dist(&s.row(steps)[..2], &exact).sqrt()
    }

    #[test]
    fn rollout_matches_unicycle_arc() {
        assert!(arc_error(1000) < 1e-6);
        let final_radius = {
            let u = Points::from_rows(&vec![[1.0, 1.0]; 1000]).unwrap();
            let s = rollout(&differential_drive(), &[0.0, 0.0, 0.0], &u, PI / 1000.0).unwrap();
            // circle centred at (0, 1)
            (s.row(1000)[0].powi(2) + (s.row(1000)[1] - 1.0).powi(2)).sqrt()
        };
        assert_abs_diff_eq!(final_radius, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn rk4_is_fourth_order() {
        for steps in [10, 20, 40] {
            let ratio = arc_error(steps) / arc_error(2 * steps);
            assert!(ratio >= 8.0, "halving dt from {steps} steps only gained {ratio}");
        }
    }

    #[test]
    fn rollout_is_bit_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<[f64; 3]> = (0..200).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let u = Points::from_rows(&rows).unwrap();
        let s0 = [0.1, 0.2, 0.3, 0.0, 0.1, 1.0];
        let a = rollout(&aircraft_3d(), &s0, &u, 0.05).unwrap();
        let b = crate::parallel::install(1, || rollout(&aircraft_3d(), &s0, &u, 0.05).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn rollout_reports_divergence_step() {
        let u = Points::from_rows(&[[1.0, 0.0], [f64::INFINITY, 0.0], [1.0, 0.0]]).unwrap();
        match rollout(&single_integrator_2d(), &[0.0, 0.0], &u, 0.1) {
            Err(Error::RolloutDivergence { step }) => assert_eq!(step, 2),
            other => panic!("expected divergence, got {other:?}"),
        }
        let empty = Points::zeros(0, 2);
        assert!(rollout(&single_integrator_2d(), &[0.0, 0.0], &empty, 0.1).is_err());
        assert!(rollout(&single_integrator_2d(), &[0.0, 0.0], &u, 0.0).is_err());
    }

    #[test]
    fn linearization_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = 30;

        let u = Points::new(2, (0..2 * t).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let s = rollout(&single_integrator_2d(), &[0.0, 0.0], &u, 0.1).unwrap();
        let sys = linearize_along(&single_integrator_2d(), &s, &u, 0.1).unwrap();
        assert!(sys.a.iter().all(|a| a == &DMatrix::zeros(2, 2)));
        assert!(sys.b.iter().all(|b| b == &DMatrix::identity(2, 2)));

        let s = rollout(&differential_drive(), &[0.0, 0.0, 0.3], &u, 0.1).unwrap();
        let sys = linearize_along(&differential_drive(), &s, &u, 0.1).unwrap();
        for k in 0..t {
            let (fa, _) = fd_jacobians(&differential_drive(), s.row(k), u.row(k), 1e-5);
            assert!(rel_err(&sys.a[k], &fa) <= 1e-5);
        }

        let u = Points::new(3, (0..3 * t).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let s = rollout(&aircraft_3d(), &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0], &u, 0.1).unwrap();
        let sys = linearize_along(&aircraft_3d(), &s, &u, 0.1).unwrap();
        let mut selection = DMatrix::zeros(6, 3);
        selection[(3, 0)] = 1.0;
        selection[(4, 1)] = 1.0;
        selection[(5, 2)] = 1.0;
        assert!(sys.b.iter().all(|b| b == &selection));

        assert!(linearize_along(&aircraft_3d(), &s.slice_rows(0..t), &u, 0.1).is_err());
    }

    #[test]
    fn path_lifting_recovers_heading() {
        let path = Points::from_rows(&[[0.0, 0.0], [0.0, 1.0], [-1.0, 1.0], [-1.0, 0.0]]).unwrap();
        let states = differential_drive().states_along_path(&path, 0.1);
        let theta: Vec<f64> = states.rows().map(|s| s[2]).collect();
        assert_abs_diff_eq!(theta[0], PI / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(theta[1], PI, epsilon = 1e-12);
        // unwrapped: continues past π instead of jumping to -π/2
        assert_abs_diff_eq!(theta[2], 1.5 * PI, epsilon = 1e-12);

        let path3 = Points::from_rows(&[[0.0, 0.0, 0.0], [0.1, 0.0, 0.1], [0.2, 0.0, 0.2]]).unwrap();
        let s = aircraft_3d().states_along_path(&path3, 0.1);
        assert_abs_diff_eq!(s.row(0)[4], PI / 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.row(0)[5], 2f64.sqrt(), epsilon = 1e-12);
    }
}
