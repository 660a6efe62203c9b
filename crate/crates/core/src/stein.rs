//! Stein variational gradient flow on trajectory samples.
//!
//! For samples `s_1..s_n` and an RBF kernel `k(x, y) = exp(-|x - y|² / h)`,
//!
//! ```text
//! g(s_i) = 1/n Σ_j [ k(s_j, s_i) ∇ln q(s_j) + ∇_{s_j} k(s_j, s_i) ]
//! ∇_{s_j} k(s_j, s_i) = (2/h) (s_i - s_j) k(s_j, s_i)
//! ```
//!
//! The first term pulls samples toward high target density, the second pushes
//! them apart. Work is split over output indices `i`; each output sums over
//! `j` in index order, so results are bit-identical for any worker count.

use rayon::prelude::*;

use crate::dynamics::{project_states, Dynamics};
use crate::error::{Error, Result};
use crate::flow::{FlowDiagnostics, FlowField};
use crate::parallel;
use crate::points::{sq_dist, Points};
use crate::reference::GaussianMixture;

/// Floor on the RBF bandwidth when all samples coincide.
pub const MIN_BANDWIDTH: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    /// `h = med² / ln(n + 1)` with `med` the median pairwise distance.
    Median,
    /// Fixed `h` in squared workspace length units.
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SteinConfig {
    pub bandwidth: Bandwidth,
    /// Output rows per parallel task.
    pub parallel_chunk: usize,
    /// Worker threads, `0` for all cores.
    pub workers: usize,
}

impl Default for SteinConfig {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::Median,
            parallel_chunk: 64,
            workers: 0,
        }
    }
}

impl SteinConfig {
    pub fn validate(&self) -> Result<()> {
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::invalid(format!("fixed bandwidth must be positive, got {h}")));
            }
        }
        if self.parallel_chunk == 0 {
            return Err(Error::invalid("parallel_chunk must be positive"));
        }
        Ok(())
    }
}

pub fn stein_flow(points: &Points, q: &GaussianMixture, cfg: &SteinConfig) -> Result<FlowField> {
    cfg.validate()?;
    let n = points.len();
    if n == 0 {
        return Err(Error::invalid("Stein flow needs at least one point"));
    }
    if points.dim() != q.dim() {
        return Err(Error::invalid(format!(
            "points live in {} dimensions but the target in {}",
            points.dim(),
            q.dim()
        )));
    }
    if !points.is_finite() {
        return Err(Error::invalid("Stein flow received non-finite points"));
    }

    parallel::install(cfg.workers, || {
        let (h, clamped) = match cfg.bandwidth {
            Bandwidth::Fixed(h) => (h, false),
            Bandwidth::Median if n == 1 => (1.0, false),
            Bandwidth::Median => {
                let med = median_pairwise_distance(points, cfg.parallel_chunk);
                let h = med * med / ((n + 1) as f64).ln();
                if h <= MIN_BANDWIDTH {
                    log::warn!("degenerate Stein bandwidth {h:e}; clamping to {MIN_BANDWIDTH:e}");
                    (MIN_BANDWIDTH, true)
                } else {
                    (h, false)
                }
            }
        };

        let d = points.dim();
        let mut scores = Points::zeros(n, d);
        scores
            .as_mut_slice()
            .par_chunks_mut(d * cfg.parallel_chunk)
            .enumerate()
            .for_each(|(c, out)| {
                for (r, row) in out.chunks_exact_mut(d).enumerate() {
                    q.score_into(points.row(c * cfg.parallel_chunk + r), row);
                }
            });

        let mut flow = Points::zeros(n, d);
        let inv_h = 1.0 / h;
        let inv_n = 1.0 / n as f64;
        flow.as_mut_slice()
            .par_chunks_mut(d * cfg.parallel_chunk)
            .enumerate()
            .for_each(|(c, out)| {
                let mut acc = vec![0.0; d];
                for (r, g) in out.chunks_exact_mut(d).enumerate() {
                    let si = points.row(c * cfg.parallel_chunk + r);
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    for (sj, score_j) in points.rows().zip(scores.rows()) {
                        let k = (-sq_dist(si, sj) * inv_h).exp();
                        for t in 0..d {
                            acc[t] += k * (score_j[t] + 2.0 * inv_h * (si[t] - sj[t]));
                        }
                    }
                    for (gt, a) in g.iter_mut().zip(&acc) {
                        *gt = a * inv_n;
                    }
                }
            });

        Ok(FlowField {
            vectors: flow,
            diagnostics: FlowDiagnostics {
                bandwidth: Some(h),
                bandwidth_clamped: clamped,
                ..Default::default()
            },
        })
    })
}

/// Flow on `states[1..]` projected to the workspace; the fixed initial state
/// gets no flow.
pub fn stein_flow_on_trajectory(
    states: &Points,
    model: &dyn Dynamics,
    q: &GaussianMixture,
    cfg: &SteinConfig,
) -> Result<FlowField> {
    if states.len() < 2 {
        return Err(Error::invalid("trajectory needs at least two states"));
    }
    stein_flow(&project_states(model, states, 1), q, cfg)
}

/// Pair counts above this go through the two-pass histogram selection instead
/// of materializing every distance.
const DIRECT_SELECT_PAIRS: usize = 1 << 22;
const HISTOGRAM_BINS: usize = 1 << 16;

/// Exact median of the `n(n-1)/2` pairwise distances (mean of the two middle
/// values for an even count).
pub fn median_pairwise_distance(points: &Points, chunk: usize) -> f64 {
    let n = points.len();
    assert!(n >= 2, "median of pairwise distances needs two points");
    let pairs = n * (n - 1) / 2;
    let lo = (pairs - 1) / 2;
    let hi = pairs / 2;
    let chunk = chunk.max(1);

    let sq = if pairs <= DIRECT_SELECT_PAIRS {
        let mut all: Vec<f64> = Vec::with_capacity(pairs);
        for i in 0..n {
            for j in i + 1..n {
                all.push(sq_dist(points.row(i), points.row(j)));
            }
        }
        let (_, &mut v_lo, _) = all.select_nth_unstable_by(lo, f64::total_cmp);
        let v_hi = if hi == lo {
            v_lo
        } else {
            // everything right of `lo` is ≥ v_lo; the next order statistic is
            // their minimum
            all[lo + 1..].iter().copied().fold(f64::INFINITY, f64::min)
        };
        (v_lo, v_hi)
    } else {
        histogram_select(points, chunk, lo, hi)
    };
    0.5 * (sq.0.sqrt() + sq.1.sqrt())
}

/// Order statistics `lo` and `hi` of pairwise squared distances.
fn histogram_select(points: &Points, chunk: usize, lo: usize, hi: usize) -> (f64, f64) {
    let n = points.len();
    let row_blocks: Vec<usize> = (0..n).step_by(chunk).collect();
    let max = row_blocks
        .par_iter()
        .map(|&start| {
            let mut m: f64 = 0.0;
            for i in start..(start + chunk).min(n) {
                for j in i + 1..n {
                    m = m.max(sq_dist(points.row(i), points.row(j)));
                }
            }
            m
        })
        .reduce(|| 0.0, f64::max);
    if max == 0.0 {
        return (0.0, 0.0);
    }
    let bin = |v: f64| (((v / max) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);

    let counts = row_blocks
        .par_iter()
        .map(|&start| {
            let mut c = vec![0usize; HISTOGRAM_BINS];
            for i in start..(start + chunk).min(n) {
                for j in i + 1..n {
                    c[bin(sq_dist(points.row(i), points.row(j)))] += 1;
                }
            }
            c
        })
        .reduce(
            || vec![0usize; HISTOGRAM_BINS],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );

    // bin holding order statistic `k`, and how many values precede that bin
    let locate = |k: usize| {
        let mut before = 0;
        for (b, &c) in counts.iter().enumerate() {
            if before + c > k {
                return (b, before);
            }
            before += c;
        }
        unreachable!("order statistic beyond pair count")
    };
    let (b_lo, before_lo) = locate(lo);
    let (b_hi, before_hi) = locate(hi);

    let mut in_bins: Vec<(usize, f64)> = row_blocks
        .par_iter()
        .map(|&start| {
            let mut v = Vec::new();
            for i in start..(start + chunk).min(n) {
                for j in i + 1..n {
                    let d = sq_dist(points.row(i), points.row(j));
                    let b = bin(d);
                    if b == b_lo || b == b_hi {
                        v.push((b, d));
                    }
                }
            }
            v
        })
        .flatten()
        .collect();
    in_bins.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let first_of = |b: usize| in_bins.iter().position(|e| e.0 == b).expect("bin is populated");
    let v_lo = in_bins[first_of(b_lo) + (lo - before_lo)].1;
    let v_hi = in_bins[first_of(b_hi) + (hi - before_hi)].1;
    (v_lo, v_hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{differential_drive, rollout, single_integrator_2d};
    use crate::reference::Seed;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn fixed(h: f64) -> SteinConfig {
        SteinConfig {
            bandwidth: Bandwidth::Fixed(h),
            ..Default::default()
        }
    }

    /// Direct two-term evaluation for a standard normal target, written out
    /// without the kernel loop.
    fn brute_force_pair(a: [f64; 2], b: [f64; 2], h: f64) -> ([f64; 2], [f64; 2]) {
        let k = (-((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)) / h).exp();
        let score = |x: [f64; 2]| [-x[0], -x[1]];
        let (sa, sb) = (score(a), score(b));
        let mut ga = [0.0; 2];
        let mut gb = [0.0; 2];
        for t in 0..2 {
            // j = self: kernel 1, no repulsion
            ga[t] = 0.5 * (sa[t] + k * sb[t] + 2.0 / h * (a[t] - b[t]) * k);
            gb[t] = 0.5 * (sb[t] + k * sa[t] + 2.0 / h * (b[t] - a[t]) * k);
        }
        (ga, gb)
    }

    #[test]
    fn single_point_examples() {
        let q = GaussianMixture::standard_normal(2);
        let g = stein_flow(&Points::from_rows(&[[0.0, 0.0]]).unwrap(), &q, &fixed(1.0)).unwrap();
        assert_eq!(g.vectors.row(0), &[0.0, 0.0]);
        let g = stein_flow(&Points::from_rows(&[[2.0, 0.0]]).unwrap(), &q, &fixed(1.0)).unwrap();
        assert_abs_diff_eq!(g.vectors.row(0)[0], -2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(g.vectors.row(0)[1], 0.0, epsilon = 1e-14);
        // median bandwidth is undefined for one point and falls back to 1
        let g = stein_flow(&Points::from_rows(&[[2.0, 0.0]]).unwrap(), &q, &SteinConfig::default()).unwrap();
        assert_eq!(g.diagnostics.bandwidth, Some(1.0));
    }

    #[test]
    fn symmetric_pair() {
        let q = GaussianMixture::standard_normal(2);
        let pts = Points::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let g = stein_flow(&pts, &q, &fixed(1.0)).unwrap();
        let (ga, gb) = brute_force_pair([1.0, 0.0], [-1.0, 0.0], 1.0);
        // frozen from the brute-force sum: -(1 - e^-4)/2 + 2 e^-4
        let expected = -0.5 * (1.0 - (-4.0f64).exp()) + 2.0 * (-4.0f64).exp();
        assert_abs_diff_eq!(ga[0], expected, epsilon = 1e-15);
        for t in 0..2 {
            assert_abs_diff_eq!(g.vectors.row(0)[t], ga[t], epsilon = 1e-14);
            assert_abs_diff_eq!(g.vectors.row(1)[t], gb[t], epsilon = 1e-14);
            assert_abs_diff_eq!(g.vectors.row(0)[t], -g.vectors.row(1)[t], epsilon = 1e-14);
        }
    }

    #[test]
    fn coincident_points_clamp_bandwidth() {
        let q = GaussianMixture::standard_normal(2);
        let pts = Points::from_rows(&[[0.5, 0.5]; 4]).unwrap();
        let g = stein_flow(&pts, &q, &SteinConfig::default()).unwrap();
        assert!(g.diagnostics.bandwidth_clamped);
        assert_eq!(g.diagnostics.bandwidth, Some(MIN_BANDWIDTH));
        assert!(g.vectors.is_finite());
        // coincident points see only the score term
        assert_abs_diff_eq!(g.vectors.row(0)[0], -0.5, epsilon = 1e-14);
    }

    #[test]
    fn rejects_bad_input() {
        let q = GaussianMixture::standard_normal(2);
        assert!(stein_flow(&Points::zeros(0, 2), &q, &fixed(1.0)).is_err());
        assert!(stein_flow(&Points::zeros(3, 3), &q, &fixed(1.0)).is_err());
        assert!(stein_flow(&Points::zeros(3, 2), &q, &fixed(-1.0)).is_err());
    }

    fn random_points(n: usize, d: usize, seed: u64) -> Points {
        let mut rng = Seed(seed).rng();
        Points::new(d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn median_matches_sorting() {
        for n in [2, 3, 7, 40] {
            let pts = random_points(n, 2, n as u64);
            let mut all = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    all.push(sq_dist(pts.row(i), pts.row(j)).sqrt());
                }
            }
            all.sort_by(f64::total_cmp);
            let m = all.len();
            let expected = 0.5 * (all[(m - 1) / 2] + all[m / 2]);
            assert_eq!(median_pairwise_distance(&pts, 8), expected);
        }
    }

    #[test]
    fn histogram_selection_is_exact() {
        let pts = random_points(300, 2, 42);
        let n = pts.len();
        let mut all = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                all.push(sq_dist(pts.row(i), pts.row(j)));
            }
        }
        all.sort_by(f64::total_cmp);
        let m = all.len();
        let (lo, hi) = ((m - 1) / 2, m / 2);
        let (a, b) = histogram_select(&pts, 16, lo, hi);
        assert_eq!((a, b), (all[lo], all[hi]));
        let (a, b) = histogram_select(&pts, 7, 10, 11);
        assert_eq!((a, b), (all[10], all[11]));
    }

    #[test]
    fn translation_equivariance() {
        let q = crate::reference::three_mode_fixture_2d();
        let pts = random_points(60, 2, 1);
        let c = [3.5, -2.0];
        let a = stein_flow(&pts, &q, &SteinConfig::default()).unwrap();
        let b = stein_flow(&pts.translated(&c), &q.translated(&c), &SteinConfig::default()).unwrap();
        for (x, y) in a.vectors.as_slice().iter().zip(b.vectors.as_slice()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-8 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn chunking_and_workers_are_bit_exact() {
        let q = crate::reference::three_mode_fixture_2d();
        let pts = random_points(257, 2, 2);
        let base = stein_flow(&pts, &q, &SteinConfig::default()).unwrap();
        for (chunk, workers) in [(1, 1), (64, 2), (257, 3), (13, 4)] {
            let cfg = SteinConfig {
                parallel_chunk: chunk,
                workers,
                ..Default::default()
            };
            assert_eq!(stein_flow(&pts, &q, &cfg).unwrap(), base);
        }
    }

    #[test]
    fn trajectory_flow_shapes_and_permutation() {
        let q = crate::reference::three_mode_fixture_2d();
        let mut rng = Seed(5).rng();
        let u = Points::new(2, (0..80).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();

        let s = rollout(&single_integrator_2d(), &[0.5, 0.5], &u, 0.05).unwrap();
        let on_traj = stein_flow_on_trajectory(&s, &single_integrator_2d(), &q, &SteinConfig::default()).unwrap();
        let direct = stein_flow(&s.slice_rows(1..41), &q, &SteinConfig::default()).unwrap();
        assert_eq!(on_traj, direct);

        let s3 = rollout(&differential_drive(), &[0.5, 0.5, 0.0], &u, 0.05).unwrap();
        let g = stein_flow_on_trajectory(&s3, &differential_drive(), &q, &SteinConfig::default()).unwrap();
        assert_eq!((g.len(), g.vectors.dim()), (40, 2));

        let order: Vec<usize> = (0..40).rev().collect();
        let pts = s.slice_rows(1..41);
        let permuted = stein_flow(&pts.permuted(&order), &q, &SteinConfig::default()).unwrap();
        for (k, &i) in order.iter().enumerate() {
            for t in 0..2 {
                assert_abs_diff_eq!(
                    permuted.vectors.row(k)[t],
                    direct.vectors.row(i)[t],
                    epsilon = 1e-12 * (1.0 + direct.vectors.row(i)[t].abs())
                );
            }
        }
    }
}
