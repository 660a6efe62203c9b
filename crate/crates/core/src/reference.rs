//! Reference (target) distributions over the workspace.
//!
//! Two forms: a Gaussian mixture with an analytic score for the Stein flow,
//! and a uniformly weighted point cloud for the Sinkhorn flow.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::points::Points;

/// Seed for every stochastic operation.
///
/// Streams come from ChaCha8 seeded with the 64-bit value; [`Seed::split`]
/// derives independent streams (distinct ChaCha stream ids) without shared
/// state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Seed(pub u64);

impl Seed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Generator for sub-stream `stream` of this seed.
    pub fn split(self, stream: u64) -> ChaCha8Rng {
        let mut rng = self.rng();
        rng.set_stream(stream);
        rng
    }

    /// A new seed drawn from sub-stream `stream`.
    pub fn child(self, stream: u64) -> Seed {
        Seed(self.split(stream).next_u64())
    }
}

#[derive(Clone, Debug)]
struct Component {
    weight: f64,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol_l: DMatrix<f64>,
    precision: DMatrix<f64>,
    /// `ln w - ½ ln det(2πΣ)`
    log_norm: f64,
}

/// Gaussian mixture `Σ_k w_k N(μ_k, Σ_k)`.
#[derive(Clone, Debug)]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<Component>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<DMatrix<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(Error::invalid(format!(
                "mixture needs matching nonempty weights/means/covariances, got {}/{}/{}",
                k,
                means.len(),
                covariances.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::invalid("mixture dimension must be positive"));
        }
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::invalid("mixture weights must be positive and finite"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("mixture weights sum to {total}, expected 1")));
        }
        let mut components = Vec::with_capacity(k);
        for (i, ((w, mu), cov)) in weights.into_iter().zip(means).zip(covariances).enumerate() {
            if mu.len() != dim || cov.shape() != (dim, dim) {
                return Err(Error::invalid(format!("component {i} has inconsistent dimensions")));
            }
            if !mu.iter().chain(cov.iter()).all(|v| v.is_finite()) {
                return Err(Error::invalid(format!("component {i} has non-finite parameters")));
            }
            let asym = (&cov - cov.transpose()).amax();
            if asym > 1e-12 * (1.0 + cov.amax()) {
                return Err(Error::NotPositiveDefinite { component: i });
            }
            let chol = cov
                .clone()
                .cholesky()
                .ok_or(Error::NotPositiveDefinite { component: i })?;
            let l = chol.l();
            let log_det: f64 = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let precision = chol.inverse();
            let log_norm =
                w.ln() - 0.5 * (dim as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
            components.push(Component {
                weight: w,
                mean: DVector::from_vec(mu),
                cov,
                chol_l: l,
                precision,
                log_norm,
            });
        }
        Ok(Self { dim, components })
    }

    /// Equal-weight mixture of isotropic components `N(μ_k, σ²_k I)`.
    pub fn isotropic(means: Vec<Vec<f64>>, variances: &[f64]) -> Result<Self> {
        let k = means.len();
        if variances.len() != k {
            return Err(Error::invalid("one variance per mean required"));
        }
        let dim = means.first().map_or(0, Vec::len);
        let covs = variances
            .iter()
            .map(|&v| DMatrix::identity(dim, dim) * v)
            .collect();
        Self::new(vec![1.0 / k as f64; k], means, covs)
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::isotropic(vec![vec![0.0; dim]], &[1.0]).expect("valid standard normal")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn means(&self) -> impl Iterator<Item = &[f64]> {
        self.components.iter().map(|c| c.mean.as_slice())
    }

    pub fn covariance(&self, k: usize) -> &DMatrix<f64> {
        &self.components[k].cov
    }

    /// Same mixture with every mean moved by `offset`.
    pub fn translated(&self, offset: &[f64]) -> Self {
        let mut out = self.clone();
        for c in &mut out.components {
            for (m, o) in c.mean.iter_mut().zip(offset) {
                *m += o;
            }
        }
        out
    }

    /// Per-component `ln(w_k N(x; μ_k, Σ_k))`, written into `out`, and the
    /// precision-weighted residuals `Σ_k⁻¹ (x − μ_k)` into `grads`.
    fn component_terms(&self, x: &[f64], out: &mut [f64], grads: &mut [f64]) {
        let d = self.dim;
        for (k, c) in self.components.iter().enumerate() {
            let g = &mut grads[k * d..(k + 1) * d];
            let mut quad = 0.0;
            for r in 0..d {
                let mut acc = 0.0;
                for s in 0..d {
                    acc += c.precision[(r, s)] * (x[s] - c.mean[s]);
                }
                g[r] = acc;
                quad += (x[r] - c.mean[r]) * acc;
            }
            out[k] = c.log_norm - 0.5 * quad;
        }
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let k = self.components.len();
        let mut logs = vec![0.0; k];
        let mut grads = vec![0.0; k * self.dim];
        self.component_terms(x, &mut logs, &mut grads);
        log_sum_exp(&logs)
    }

    /// `∇ₓ ln q(x)` written into `out`.
    pub fn score_into(&self, x: &[f64], out: &mut [f64]) {
        let k = self.components.len();
        let d = self.dim;
        // Mixtures used here have a handful of components; stack buffers keep
        // the O(n) score pass allocation-free.
        let mut logs_buf = [0.0; 8];
        let mut grads_buf = [0.0; 8 * 4];
        let mut logs_heap;
        let mut grads_heap;
        let (logs, grads): (&mut [f64], &mut [f64]) = if k <= 8 && k * d <= 32 {
            (&mut logs_buf[..k], &mut grads_buf[..k * d])
        } else {
            logs_heap = vec![0.0; k];
            grads_heap = vec![0.0; k * d];
            (&mut logs_heap, &mut grads_heap)
        };
        self.component_terms(x, logs, grads);
        let lse = log_sum_exp(logs);
        out.iter_mut().for_each(|v| *v = 0.0);
        for (j, &l) in logs.iter().enumerate() {
            let r = (l - lse).exp();
            for (o, g) in out.iter_mut().zip(&grads[j * d..(j + 1) * d]) {
                *o -= r * g;
            }
        }
    }

    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.score_into(x, &mut out);
        out
    }

    /// Scores of every row of `points`.
    pub fn scores(&self, points: &Points) -> Points {
        let mut out = Points::zeros(points.len(), self.dim);
        for (i, x) in points.rows().enumerate() {
            self.score_into(x, out.row_mut(i));
        }
        out
    }

    /// Ancestral sampling: categorical component, then Gaussian.
    pub fn sample(&self, n: usize, seed: Seed) -> Points {
        let mut rng = seed.rng();
        let d = self.dim;
        let mut out = Points::zeros(n, d);
        let mut z = vec![0.0; d];
        for i in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = self.components.len() - 1;
            for (k, c) in self.components.iter().enumerate() {
                acc += c.weight;
                if u < acc {
                    chosen = k;
                    break;
                }
            }
            let c = &self.components[chosen];
            z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            let row = out.row_mut(i);
            for r in 0..d {
                let mut acc = c.mean[r];
                for s in 0..=r {
                    acc += c.chol_l[(r, s)] * z[s];
                }
                row[r] = acc;
            }
        }
        out
    }
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Target distribution for a coverage task.
#[derive(Clone, Debug)]
pub enum ReferenceDistribution {
    ScoreBased(GaussianMixture),
    /// Point cloud with uniform weights `1/m`.
    SampleBased(Points),
}

impl ReferenceDistribution {
    pub fn samples(points: Points) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("sample-based reference needs at least one point"));
        }
        if !points.is_finite() {
            return Err(Error::invalid("sample-based reference contains non-finite points"));
        }
        Ok(Self::SampleBased(points))
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::ScoreBased(g) => g.dim(),
            Self::SampleBased(p) => p.dim(),
        }
    }

    pub fn mixture(&self) -> Option<&GaussianMixture> {
        match self {
            Self::ScoreBased(g) => Some(g),
            Self::SampleBased(_) => None,
        }
    }

    /// `n` seeded draws: ancestral sampling for mixtures, resampling with
    /// replacement for point clouds.
    pub fn sample(&self, n: usize, seed: Seed) -> Result<Points> {
        if n == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        Ok(match self {
            Self::ScoreBased(g) => g.sample(n, seed),
            Self::SampleBased(p) => {
                let mut rng = seed.rng();
                let m = p.len();
                let order: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
                p.permuted(&order)
            }
        })
    }

    pub fn to_sample_based(&self, m: usize, seed: Seed) -> Result<Self> {
        Ok(Self::SampleBased(self.sample(m, seed)?))
    }
}

impl From<GaussianMixture> for ReferenceDistribution {
    fn from(g: GaussianMixture) -> Self {
        Self::ScoreBased(g)
    }
}

/// Variance of each component of the default benchmark mixture.
pub const FIXTURE_VARIANCE: f64 = 0.02;

/// Default benchmark task: three equal-weight modes in the unit square.
pub fn three_mode_fixture_2d() -> GaussianMixture {
    GaussianMixture::isotropic(
        vec![vec![0.25, 0.25], vec![0.75, 0.35], vec![0.4, 0.8]],
        &[FIXTURE_VARIANCE; 3],
    )
    .expect("valid fixture")
}

/// The 2D fixture lifted into the unit cube at staggered altitudes.
pub fn three_mode_fixture_3d() -> GaussianMixture {
    GaussianMixture::isotropic(
        vec![vec![0.25, 0.25, 0.3], vec![0.75, 0.35, 0.5], vec![0.4, 0.8, 0.7]],
        &[FIXTURE_VARIANCE; 3],
    )
    .expect("valid fixture")
}

pub fn three_mode_fixture(dim: usize) -> Result<GaussianMixture> {
    match dim {
        2 => Ok(three_mode_fixture_2d()),
        3 => Ok(three_mode_fixture_3d()),
        d => Err(Error::invalid(format!("no default fixture for workspace dimension {d}"))),
    }
}
