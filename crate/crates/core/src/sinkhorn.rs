//! Entropic optimal transport between point clouds, the debiased Sinkhorn
//! divergence, and its gradient flow.
//!
//! Both clouds carry uniform weights (`1/n`, `1/m`) and the ground cost is the
//! squared Euclidean distance. Potentials are updated in the log domain so
//! small regularization never underflows the Gibbs kernel:
//!
//! ```text
//! f_i = -ω LSE_j( ln b_j + (g_j - C_ij) / ω )
//! g_j = -ω LSE_i( ln a_i + (f_i - C_ij) / ω )
//! T_ij = a_i b_j exp((f_i + g_j - C_ij) / ω)
//! ```
//!
//! The reported cost is `Σ T_ij C_ij + ω Σ T_ij ln T_ij`, obtained from the
//! dual value `⟨a, f⟩ + ⟨b, g⟩ - ω ln(nm)`.
//!
//! Gradients use the envelope theorem on the converged plans instead of
//! differentiating through the iterations:
//! `∇_{x_i} OT(X, Y) = Σ_j T_ij 2 (x_i - y_j)`.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{FlowDiagnostics, FlowField};
use crate::parallel;
use crate::points::{sq_dist, Points};

/// Fraction of the mean squared cross distance used by [`Omega::Auto`].
pub const AUTO_OMEGA_FRACTION: f64 = 0.05;

/// Entropic regularization weight ω, in squared length units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Omega {
    /// `0.05 ·` mean squared distance between the two clouds.
    Auto,
    Fixed(f64),
}

impl Omega {
    pub fn resolve(self, x: &Points, y: &Points) -> f64 {
        match self {
            Omega::Fixed(w) => w,
            Omega::Auto => AUTO_OMEGA_FRACTION * mean_cross_sq_dist(x, y),
        }
    }
}

/// `1/(nm) Σ_ij |x_i - y_j|²` in O(n + m).
pub fn mean_cross_sq_dist(x: &Points, y: &Points) -> f64 {
    let second_moment = |p: &Points| p.rows().map(|r| r.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / p.len() as f64;
    let (mx, my) = (x.mean(), y.mean());
    let cross: f64 = mx.iter().zip(&my).map(|(a, b)| a * b).sum();
    (second_moment(x) + second_moment(y) - 2.0 * cross).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornConfig {
    pub omega: Omega,
    pub max_iters: usize,
    /// Tolerance on the largest marginal violation.
    pub tol: f64,
    pub parallel_chunk: usize,
    pub workers: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            omega: Omega::Auto,
            max_iters: 1000,
            tol: 1e-6,
            parallel_chunk: 64,
            workers: 0,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if let Omega::Fixed(w) = self.omega {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::invalid(format!("omega must be positive, got {w}")));
            }
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iters == 0 || self.parallel_chunk == 0 {
            return Err(Error::invalid("max_iters and parallel_chunk must be positive"));
        }
        Ok(())
    }

    pub fn with_omega(mut self, omega: f64) -> Self {
        self.omega = Omega::Fixed(omega);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornSolution {
    /// Potential on the first cloud (length n).
    pub f: Vec<f64>,
    /// Potential on the second cloud (length m).
    pub g: Vec<f64>,
    pub omega: f64,
    pub cost: f64,
    pub iters_used: usize,
    pub converged: bool,
    pub marginal_violation: f64,
}

impl SinkhornSolution {
    /// Dense `n × m` transport plan.
    pub fn plan(&self, x: &Points, y: &Points) -> DMatrix<f64> {
        let (n, m) = (x.len(), y.len());
        let log_ab = -((n * m) as f64).ln();
        DMatrix::from_fn(n, m, |i, j| {
            ((self.f[i] + self.g[j] - sq_dist(x.row(i), y.row(j))) / self.omega + log_ab).exp()
        })
    }
}

fn check_clouds(x: &Points, y: &Points) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::invalid("transport needs nonempty point clouds"));
    }
    if x.dim() != y.dim() {
        return Err(Error::invalid(format!(
            "point clouds have dimensions {} and {}",
            x.dim(),
            y.dim()
        )));
    }
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::invalid("non-finite entries in the cost matrix"));
    }
    Ok(())
}

/// Log-sum-exp half update: for every row point `p_i`,
/// `out_i = -ω LSE_j( log_w + (pot_j - |p_i - c_j|²) / ω )`.
fn soft_min(rows: &Points, cols: &Points, pot: &[f64], log_w: f64, omega: f64, chunk: usize, out: &mut [f64]) {
    let inv = 1.0 / omega;
    out.par_chunks_mut(chunk).enumerate().for_each(|(c, block)| {
        let mut scratch = vec![0.0; cols.len()];
        for (r, o) in block.iter_mut().enumerate() {
            let p = rows.row(c * chunk + r);
            let mut max = f64::NEG_INFINITY;
            for ((s, q), &pj) in scratch.iter_mut().zip(cols.rows()).zip(pot) {
                *s = pj - sq_dist(p, q);
                max = max.max(*s);
            }
            let sum: f64 = scratch.iter().map(|s| ((s - max) * inv).exp()).sum();
            *o = -(max + omega * sum.ln()) - omega * log_w;
        }
    });
}

/// Largest row-marginal violation of the plan built from `current` when the
/// next half update would produce `next`: row `i` sums to
/// `a_i exp((current_i - next_i) / ω)`.
fn violation(current: &[f64], next: &[f64], omega: f64) -> f64 {
    let a = 1.0 / current.len() as f64;
    current
        .iter()
        .zip(next)
        .map(|(c, n)| a * (((c - n) / omega).exp() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Entropic OT between uniform clouds, from zero potentials.
pub fn entropic_ot(x: &Points, y: &Points, cfg: &SinkhornConfig) -> Result<SinkhornSolution> {
    entropic_ot_from(x, y, cfg, None)
}

/// Entropic OT starting from the potential `f0` on `x` (warm start).
pub fn entropic_ot_from(x: &Points, y: &Points, cfg: &SinkhornConfig, f0: Option<&[f64]>) -> Result<SinkhornSolution> {
    cfg.validate()?;
    check_clouds(x, y)?;
    let omega = cfg.omega.resolve(x, y);
    if !(omega > 0.0 && omega.is_finite()) {
        return Err(Error::invalid(format!("resolved omega {omega} is not positive")));
    }
    let (n, m) = (x.len(), y.len());
    let mut f = match f0 {
        Some(f0) if f0.len() == n && f0.iter().all(|v| v.is_finite()) => f0.to_vec(),
        _ => vec![0.0; n],
    };
    let mut g = vec![0.0; m];
    let mut next_f = vec![0.0; n];
    let (log_a, log_b) = (-(n as f64).ln(), -(m as f64).ln());

    parallel::install(cfg.workers, || {
        let mut iters = 0;
        let mut viol = f64::INFINITY;
        while iters < cfg.max_iters {
            iters += 1;
            soft_min(y, x, &f, log_a, omega, cfg.parallel_chunk, &mut g);
            soft_min(x, y, &g, log_b, omega, cfg.parallel_chunk, &mut next_f);
            viol = violation(&f, &next_f, omega);
            if viol <= cfg.tol || iters == cfg.max_iters {
                break;
            }
            std::mem::swap(&mut f, &mut next_f);
        }
        if !viol.is_finite() || !f.iter().chain(&g).all(|v| v.is_finite()) {
            return Err(Error::invalid("Sinkhorn potentials became non-finite"));
        }
        let dual = f.iter().sum::<f64>() / n as f64 + g.iter().sum::<f64>() / m as f64;
        Ok(SinkhornSolution {
            cost: dual - omega * ((n * m) as f64).ln(),
            f,
            g,
            omega,
            iters_used: iters,
            converged: viol <= cfg.tol,
            marginal_violation: viol,
        })
    })
}

/// Self-transport `OT(X, X)` via the symmetric averaged fixed point
/// `f ← ½ (f + softmin(f))`. `g` mirrors `f`.
pub fn self_transport(x: &Points, omega: f64, cfg: &SinkhornConfig, f0: Option<&[f64]>) -> Result<SinkhornSolution> {
    cfg.validate()?;
    check_clouds(x, x)?;
    let n = x.len();
    let mut f = match f0 {
        Some(f0) if f0.len() == n && f0.iter().all(|v| v.is_finite()) => f0.to_vec(),
        _ => vec![0.0; n],
    };
    let mut t = vec![0.0; n];
    let log_a = -(n as f64).ln();
    parallel::install(cfg.workers, || {
        let mut iters = 0;
        let mut viol = f64::INFINITY;
        while iters < cfg.max_iters {
            iters += 1;
            soft_min(x, x, &f, log_a, omega, cfg.parallel_chunk, &mut t);
            viol = violation(&f, &t, omega);
            if viol <= cfg.tol || iters == cfg.max_iters {
                break;
            }
            for (fi, ti) in f.iter_mut().zip(&t) {
                *fi = 0.5 * (*fi + ti);
            }
        }
        if !viol.is_finite() || !f.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("Sinkhorn potentials became non-finite"));
        }
        let cost = 2.0 * f.iter().sum::<f64>() / n as f64 - omega * ((n * n) as f64).ln();
        Ok(SinkhornSolution {
            g: f.clone(),
            f,
            omega,
            cost,
            iters_used: iters,
            converged: viol <= cfg.tol,
            marginal_violation: viol,
        })
    })
}

/// Total order on clouds used to solve the cross term in one canonical
/// direction, so `S(X, Y)` and `S(Y, X)` run the same iterations.
fn canonical_first(x: &Points, y: &Points) -> bool {
    (x.len(), x.dim())
        .cmp(&(y.len(), y.dim()))
        .then_with(|| {
            x.as_slice()
                .iter()
                .zip(y.as_slice())
                .map(|(a, b)| a.total_cmp(b))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .is_le()
}

/// Debiased divergence `OT(X,Y) - ½ OT(X,X) - ½ OT(Y,Y)`, all three terms at
/// the same ω.
pub fn sinkhorn_divergence(x: &Points, y: &Points, cfg: &SinkhornConfig) -> Result<f64> {
    check_clouds(x, y)?;
    let omega = cfg.omega.resolve(x, y);
    let fixed = cfg.with_omega(omega);
    let cross = if canonical_first(x, y) {
        entropic_ot(x, y, &fixed)?
    } else {
        entropic_ot(y, x, &fixed)?
    };
    let xx = self_transport(x, omega, &fixed, None)?;
    let yy = self_transport(y, omega, &fixed, None)?;
    for (name, sol) in [("cross", &cross), ("self(X)", &xx), ("self(Y)", &yy)] {
        if !sol.converged {
            log::warn!(
                "Sinkhorn {name} term stopped after {} iterations with marginal violation {:.3e}",
                sol.iters_used,
                sol.marginal_violation
            );
        }
    }
    Ok(cross.cost - 0.5 * xx.cost - 0.5 * yy.cost)
}

/// Potentials carried between successive flow evaluations on slowly moving
/// clouds.
#[derive(Clone, Debug, Default)]
pub struct WarmStart {
    cross_f: Option<Vec<f64>>,
    self_f: Option<Vec<f64>>,
}

/// Descent direction `-∇_{x_i} S_ω(X, Y)` for every sample of `X`.
pub fn sinkhorn_flow(x: &Points, y: &Points, cfg: &SinkhornConfig) -> Result<FlowField> {
    sinkhorn_flow_warm(x, y, cfg, &mut WarmStart::default())
}

pub fn sinkhorn_flow_warm(x: &Points, y: &Points, cfg: &SinkhornConfig, warm: &mut WarmStart) -> Result<FlowField> {
    check_clouds(x, y)?;
    let omega = cfg.omega.resolve(x, y);
    let fixed = cfg.with_omega(omega);
    let cross = entropic_ot_from(x, y, &fixed, warm.cross_f.as_deref())?;
    let own = self_transport(x, omega, &fixed, warm.self_f.as_deref())?;

    let worst = cross.marginal_violation.max(own.marginal_violation);
    let limit = 100.0 * cfg.tol;
    if worst > limit {
        return Err(Error::UnconvergedTransport { violation: worst, limit });
    }

    let (n, d) = (x.len(), x.dim());
    let log_nm = -((n * y.len()) as f64).ln();
    let log_nn = -((n * n) as f64).ln();
    let chunk = cfg.parallel_chunk;
    let mut flow = Points::zeros(n, d);
    parallel::install(cfg.workers, || {
        flow.as_mut_slice().par_chunks_mut(d * chunk).enumerate().for_each(|(c, out)| {
            for (r, row) in out.chunks_exact_mut(d).enumerate() {
                let i = c * chunk + r;
                let xi = x.row(i);
                row.iter_mut().for_each(|v| *v = 0.0);
                for (j, yj) in y.rows().enumerate() {
                    let t = ((cross.f[i] + cross.g[j] - sq_dist(xi, yj)) / omega + log_nm).exp();
                    for k in 0..d {
                        row[k] -= 2.0 * t * (xi[k] - yj[k]);
                    }
                }
                for (j, xj) in x.rows().enumerate() {
                    let t = ((own.f[i] + own.f[j] - sq_dist(xi, xj)) / omega + log_nn).exp();
                    for k in 0..d {
                        row[k] += 2.0 * t * (xi[k] - xj[k]);
                    }
                }
            }
        });
    });

    let converged = cross.converged && own.converged;
    warm.cross_f = Some(cross.f);
    warm.self_f = Some(own.f);
    Ok(FlowField {
        vectors: flow,
        diagnostics: FlowDiagnostics {
            transport_converged: Some(converged),
            marginal_violation: Some(worst),
            ..Default::default()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::Seed;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn cloud(n: usize, d: usize, seed: u64) -> Points {
        let mut rng = Seed(seed).rng();
        Points::new(d, (0..n * d).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn tight(omega: f64) -> SinkhornConfig {
        SinkhornConfig {
            omega: Omega::Fixed(omega),
            max_iters: 100_000,
            tol: 1e-12,
            ..Default::default()
        }
    }

    #[test]
    fn single_pair_is_forced() {
        let x = Points::from_rows(&[[0.0, 0.0]]).unwrap();
        let y = Points::from_rows(&[[3.0, 4.0]]).unwrap();
        let sol = entropic_ot(&x, &y, &tight(0.7)).unwrap();
        assert!(sol.converged);
        assert_abs_diff_eq!(sol.cost, 25.0, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.plan(&x, &y)[(0, 0)], 1.0, epsilon = 1e-12);

        let flow = sinkhorn_flow(&x, &y, &tight(0.7)).unwrap();
        assert_abs_diff_eq!(flow.vectors.row(0)[0], 6.0, epsilon = 1e-9);
        assert_abs_diff_eq!(flow.vectors.row(0)[1], 8.0, epsilon = 1e-9);
    }

    #[test]
    fn identical_clouds_match_self_transport() {
        let x = cloud(12, 2, 3);
        for omega in [0.01, 0.1, 1.0] {
            let cfg = SinkhornConfig { tol: 1e-8, ..tight(omega) };
            let cross = entropic_ot(&x, &x, &cfg).unwrap();
            let own = self_transport(&x, omega, &cfg, None).unwrap();
            assert!(cross.converged && own.converged);
            assert_abs_diff_eq!(cross.cost, own.cost, epsilon = 1e-8);
            let plan = cross.plan(&x, &x);
            for i in 0..12 {
                assert_abs_diff_eq!(plan.row(i).sum(), 1.0 / 12.0, epsilon = 1e-8);
                assert_abs_diff_eq!(plan.column(i).sum(), 1.0 / 12.0, epsilon = 1e-8);
            }
            assert!(plan.iter().all(|&t| t >= 0.0));
        }
    }

    #[test]
    fn two_point_line_matches_identity_coupling() {
        let x = Points::new(1, vec![0.0, 1.0]).unwrap();
        let sol = entropic_ot(&x, &x, &tight(1e-3)).unwrap();
        let plan = sol.plan(&x, &x);
        // the identity matching costs 0, the swap costs 1
        assert_abs_diff_eq!(plan[(0, 0)], 0.5, epsilon = 1e-3);
        assert_abs_diff_eq!(plan[(1, 1)], 0.5, epsilon = 1e-3);
        assert_abs_diff_eq!(plan[(0, 1)], 0.0, epsilon = 1e-3);
        assert!(sol.cost.abs() < 1e-2);
    }

    #[test]
    fn unconverged_is_reported_not_raised() {
        let x = cloud(20, 2, 1);
        let y = cloud(20, 2, 2);
        let cfg = SinkhornConfig {
            omega: Omega::Fixed(1e-3),
            max_iters: 1,
            ..Default::default()
        };
        let sol = entropic_ot(&x, &y, &cfg).unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.iters_used, 1);
        assert!(matches!(
            sinkhorn_flow(&x, &y, &cfg),
            Err(Error::UnconvergedTransport { .. })
        ));
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        let x = Points::from_rows(&[[f64::NAN, 0.0]]).unwrap();
        let y = cloud(3, 2, 0);
        assert!(entropic_ot(&x, &y, &SinkhornConfig::default()).is_err());
        assert!(entropic_ot(&Points::zeros(0, 2), &y, &SinkhornConfig::default()).is_err());
        assert!(entropic_ot(&y, &y, &tight(0.0)).is_err());
    }

    #[test]
    fn divergence_vanishes_on_identical_clouds_and_is_symmetric() {
        let x = cloud(40, 2, 5);
        let y = cloud(30, 2, 6);
        let cfg = SinkhornConfig::default();
        assert!(sinkhorn_divergence(&x, &x, &cfg).unwrap().abs() <= 1e-6);
        let a = sinkhorn_divergence(&x, &y, &cfg).unwrap();
        let b = sinkhorn_divergence(&y, &x, &cfg).unwrap();
        assert!(a > 0.0);
        assert_abs_diff_eq!(a, b, epsilon = 1e-9);
    }

    #[test]
    fn flow_vanishes_at_target() {
        let x = cloud(25, 2, 9);
        let cfg = SinkhornConfig {
            tol: 1e-9,
            max_iters: 100_000,
            ..Default::default()
        };
        let flow = sinkhorn_flow(&x, &x, &cfg).unwrap();
        for row in flow.vectors.rows() {
            assert!(crate::points::norm(row) <= 1e-5);
        }
    }

    #[test]
    fn worker_count_does_not_change_bits() {
        let x = cloud(70, 3, 1);
        let y = cloud(50, 3, 2);
        let base = sinkhorn_flow(&x, &y, &SinkhornConfig { workers: 1, parallel_chunk: 1, ..Default::default() }).unwrap();
        for (workers, chunk) in [(2, 7), (4, 64), (3, 70)] {
            let cfg = SinkhornConfig { workers, parallel_chunk: chunk, ..Default::default() };
            assert_eq!(sinkhorn_flow(&x, &y, &cfg).unwrap(), base);
        }
    }

    #[test]
    fn warm_start_reaches_the_same_plan() {
        let x = cloud(30, 2, 11);
        let y = cloud(30, 2, 12);
        let cfg = SinkhornConfig { tol: 1e-10, max_iters: 100_000, ..Default::default() };
        let mut warm = WarmStart::default();
        let cold = sinkhorn_flow_warm(&x, &y, &cfg, &mut warm).unwrap();
        let nudged = x.translated(&[1e-3, 0.0]);
        let mut fresh = WarmStart::default();
        let a = sinkhorn_flow_warm(&nudged, &y, &cfg, &mut warm).unwrap();
        let b = sinkhorn_flow_warm(&nudged, &y, &cfg, &mut fresh).unwrap();
        for (u, v) in a.vectors.as_slice().iter().zip(b.vectors.as_slice()) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-7);
        }
        assert!(cold.vectors.is_finite());
    }

    #[test]
    fn mean_cross_distance_identity() {
        let x = cloud(9, 2, 1);
        let y = cloud(5, 2, 2);
        let mut brute = 0.0;
        for a in x.rows() {
            for b in y.rows() {
                brute += sq_dist(a, b);
            }
        }
        assert_abs_diff_eq!(mean_cross_sq_dist(&x, &y), brute / 45.0, epsilon = 1e-12);
    }
}
