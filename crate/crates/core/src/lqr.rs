//! Linear-quadratic flow matching on a time-varying linearization.
//!
//! The perturbation `z` of the state trajectory obeys the Euler-discretized
//! flow dynamics
//!
//! ```text
//! z[k+1] = (I + dt A[k]) z[k] + dt B[k] v[k],   z[0] = 0
//! ```
//!
//! and the control perturbation `v` minimizes
//!
//! ```text
//! Σ_{k<T} dt (|â[k] - z[k]|²_Q + |v[k]|²_R)  [+ dt |â_T - z[T]|²_Q]
//! ```
//!
//! where `â` is the target lifted to state space. One backward sweep carries
//! the quadratic value matrix `S` and the affine term `s` of
//! `V_k(z) = zᵀ S z + 2 sᵀ z + c`.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{Dynamics, LtvSystem};
use crate::error::{Error, Result};
use crate::points::Points;

#[derive(Clone, Debug, PartialEq)]
pub struct LqrWeights {
    projection: DMatrix<f64>,
    q_w: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl LqrWeights {
    /// `projection` maps states to workspace points; `q_w` weighs workspace
    /// mismatch and `r` the control perturbation.
    pub fn new(projection: DMatrix<f64>, q_w: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let p = projection.nrows();
        if q_w.shape() != (p, p) || !r.is_square() || r.nrows() == 0 {
            return Err(Error::invalid("weight matrices have inconsistent shapes"));
        }
        let all = projection.iter().chain(q_w.iter()).chain(r.iter());
        if !all.into_iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite LQR weights"));
        }
        if (&q_w - q_w.transpose()).amax() > 1e-12 || (&r - r.transpose()).amax() > 1e-12 {
            return Err(Error::invalid("LQR weights must be symmetric"));
        }
        if q_w.clone().symmetric_eigenvalues().iter().any(|&e| e < -1e-10) {
            return Err(Error::invalid("Q must be positive semidefinite"));
        }
        if r.clone().cholesky().is_none() {
            return Err(Error::invalid("R must be positive definite"));
        }
        Ok(Self { projection, q_w, r })
    }

    /// `Q_w = q_weight · I`, `R = r_weight · I` on the model's workspace.
    pub fn for_model(model: &dyn Dynamics, q_weight: f64, r_weight: f64) -> Result<Self> {
        let (p, m) = (model.workspace_dim(), model.control_dim());
        Self::new(
            model.project_matrix(),
            DMatrix::identity(p, p) * q_weight,
            DMatrix::identity(m, m) * r_weight,
        )
    }

    /// `Q_w = I`, `R = 0.1 I`.
    pub fn default_for(model: &dyn Dynamics) -> Self {
        Self::for_model(model, 1.0, 0.1).expect("default weights are valid")
    }

    /// State-space weight `Pᵀ Q_w P`.
    pub fn state_q(&self) -> DMatrix<f64> {
        self.projection.transpose() * &self.q_w * &self.projection
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn projection(&self) -> &DMatrix<f64> {
        &self.projection
    }

    /// Lift workspace points to state space as `Pᵀ a`.
    pub fn lift(&self, a: &Points) -> Points {
        let pt = self.projection.transpose();
        let mut out = Points::zeros(a.len(), pt.nrows());
        for (row, ai) in out.as_mut_slice().chunks_exact_mut(pt.nrows()).zip(a.rows()) {
            let lifted = &pt * DVector::from_column_slice(ai);
            row.copy_from_slice(lifted.as_slice());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LqrSolution {
    /// Optimal control perturbation, `T × control_dim`.
    pub v_star: Points,
    /// Feasible state flow, `(T+1) × state_dim`, `z[0] = 0`.
    pub z: Points,
    /// Feedback gains with `v[k] = -K[k] z[k] + d[k]`.
    pub gains: Vec<DMatrix<f64>>,
    pub feedforward: Points,
    pub cost: f64,
}

/// Flow matching: lift the workspace flow `a` (one row per step `k < T`) and
/// an optional terminal workspace target for `z[T]`, then solve.
pub fn solve_flow_lqr(
    sys: &LtvSystem,
    a: &Points,
    weights: &LqrWeights,
    terminal: Option<&[f64]>,
) -> Result<LqrSolution> {
    if a.dim() != weights.projection.nrows() {
        return Err(Error::invalid(format!(
            "flow has dimension {}, workspace has {}",
            a.dim(),
            weights.projection.nrows()
        )));
    }
    if weights.projection.ncols() != sys.state_dim() || weights.r.nrows() != sys.control_dim() {
        return Err(Error::invalid("weights do not match the system dimensions"));
    }
    let lifted_terminal = match terminal {
        Some(t) if t.len() != a.dim() => return Err(Error::invalid("terminal target has the wrong dimension")),
        Some(t) => Some(weights.lift(&Points::new(a.dim(), t.to_vec())?).into_vec()),
        None => None,
    };
    solve_tracking_lqr(sys, &weights.lift(a), &weights.state_q(), &weights.r, lifted_terminal.as_deref())
}

/// Same problem with state-space targets and an arbitrary PSD `q`.
pub fn solve_tracking_lqr(
    sys: &LtvSystem,
    targets: &Points,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    terminal: Option<&[f64]>,
) -> Result<LqrSolution> {
    let (t_len, n, m, dt) = (sys.num_steps(), sys.state_dim(), sys.control_dim(), sys.dt);
    check_problem(sys, targets, q, r, terminal)?;

    let q_dt = q * dt;
    let r_dt = r * dt;
    let (mut s_mat, mut s_vec) = match terminal {
        Some(t) => (q_dt.clone(), -(&q_dt * DVector::from_column_slice(t))),
        None => (DMatrix::zeros(n, n), DVector::zeros(n)),
    };
    let mut gains = vec![DMatrix::zeros(m, n); t_len];
    let mut feedforward = Points::zeros(t_len, m);
    let identity = DMatrix::<f64>::identity(n, n);

    for k in (0..t_len).rev() {
        let ad = &identity + &sys.a[k] * dt;
        let bd = &sys.b[k] * dt;
        let sa = &s_mat * &ad;
        let sb = &s_mat * &bd;
        let qxx = &q_dt + ad.transpose() * &sa;
        let quu = &r_dt + bd.transpose() * &sb;
        let qux = bd.transpose() * &sa;
        let target = DVector::from_column_slice(targets.row(k));
        let qx = -(&q_dt * target) + ad.transpose() * &s_vec;
        let qu = bd.transpose() * &s_vec;

        let chol = quu.cholesky().ok_or(Error::RiccatiInstability { step: k })?;
        let gain = chol.solve(&qux);
        let ff = -chol.solve(&qu);
        s_mat = &qxx - qux.transpose() * &gain;
        s_mat = (&s_mat + s_mat.transpose()) * 0.5;
        s_vec = qx + qux.transpose() * &ff;
        if !s_mat.iter().chain(s_vec.iter()).all(|v| v.is_finite()) {
            return Err(Error::RiccatiInstability { step: k });
        }
        feedforward.row_mut(k).copy_from_slice(ff.as_slice());
        gains[k] = gain;
    }

    let mut v_star = Points::zeros(t_len, m);
    let mut z = Points::zeros(t_len + 1, n);
    for k in 0..t_len {
        let zk = DVector::from_column_slice(z.row(k));
        let vk = -(&gains[k] * &zk) + DVector::from_column_slice(feedforward.row(k));
        let next = &zk + (&sys.a[k] * &zk + &sys.b[k] * &vk) * dt;
        v_star.row_mut(k).copy_from_slice(vk.as_slice());
        z.row_mut(k + 1).copy_from_slice(next.as_slice());
    }
    let cost = objective(sys, targets, q, r, terminal, &z, &v_star);
    Ok(LqrSolution {
        v_star,
        z,
        gains,
        feedforward,
        cost,
    })
}

/// Roll the flow dynamics forward from `z[0] = 0` under `v` and evaluate the
/// objective. Returns `(z, cost)`.
pub fn tracking_cost(
    sys: &LtvSystem,
    targets: &Points,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    terminal: Option<&[f64]>,
    v: &Points,
) -> Result<(Points, f64)> {
    check_problem(sys, targets, q, r, terminal)?;
    if v.len() != sys.num_steps() || v.dim() != sys.control_dim() {
        return Err(Error::invalid("control perturbation has the wrong shape"));
    }
    let n = sys.state_dim();
    let mut z = Points::zeros(sys.num_steps() + 1, n);
    for k in 0..sys.num_steps() {
        let zk = DVector::from_column_slice(z.row(k));
        let vk = DVector::from_column_slice(v.row(k));
        let next = &zk + (&sys.a[k] * &zk + &sys.b[k] * vk) * sys.dt;
        z.row_mut(k + 1).copy_from_slice(next.as_slice());
    }
    let cost = objective(sys, targets, q, r, terminal, &z, v);
    Ok((z, cost))
}

fn check_problem(
    sys: &LtvSystem,
    targets: &Points,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    terminal: Option<&[f64]>,
) -> Result<()> {
    let (n, m) = (sys.state_dim(), sys.control_dim());
    if targets.len() != sys.num_steps() || targets.dim() != n {
        return Err(Error::invalid(format!(
            "expected {} targets of dimension {n}, got {} of dimension {}",
            sys.num_steps(),
            targets.len(),
            targets.dim()
        )));
    }
    if q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::invalid("weight shapes do not match the system"));
    }
    if terminal.is_some_and(|t| t.len() != n) {
        return Err(Error::invalid("terminal target has the wrong dimension"));
    }
    if !targets.is_finite() || terminal.is_some_and(|t| t.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("non-finite flow targets"));
    }
    Ok(())
}

fn objective(
    sys: &LtvSystem,
    targets: &Points,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    terminal: Option<&[f64]>,
    z: &Points,
    v: &Points,
) -> f64 {
    let quad = |m: &DMatrix<f64>, x: &DVector<f64>| x.dot(&(m * x));
    let mut cost = 0.0;
    for k in 0..sys.num_steps() {
        let e = DVector::from_column_slice(targets.row(k)) - DVector::from_column_slice(z.row(k));
        cost += sys.dt * (quad(q, &e) + quad(r, &DVector::from_column_slice(v.row(k))));
    }
    if let Some(t) = terminal {
        let e = DVector::from_column_slice(t) - DVector::from_column_slice(z.row(sys.num_steps()));
        cost += sys.dt * quad(q, &e);
    }
    cost
}
