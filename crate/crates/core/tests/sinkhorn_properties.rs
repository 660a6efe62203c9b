use approx::assert_abs_diff_eq;
use covflow::points::Points;
use covflow::reference::Seed;
use covflow::sinkhorn::{entropic_ot, sinkhorn_divergence, sinkhorn_flow, Omega, SinkhornConfig};
use itertools::Itertools;
use rand::Rng;

fn cloud(n: usize, d: usize, seed: u64) -> Points {
    let mut rng = Seed(seed).rng();
    Points::new(d, (0..n * d).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn fixed(omega: f64, tol: f64) -> SinkhornConfig {
    SinkhornConfig {
        omega: Omega::Fixed(omega),
        max_iters: 200_000,
        tol,
        ..Default::default()
    }
}

/// Exact assignment cost with uniform weights, by enumerating permutations.
fn assignment_lp(x: &Points, y: &Points) -> f64 {
    let n = x.len();
    (0..n)
        .permutations(n)
        .map(|p| {
            p.iter()
                .enumerate()
                .map(|(i, &j)| covflow::points::sq_dist(x.row(i), y.row(j)))
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
        / n as f64
}

#[test]
fn divergence_is_nonnegative() {
    for s in 0..50 {
        let x = cloud(20 + s as usize % 7, 2, 1000 + s);
        let y = cloud(15 + s as usize % 5, 2, 2000 + s);
        let v = sinkhorn_divergence(&x, &y, &fixed(0.02, 1e-9)).unwrap();
        assert!(v >= -1e-9, "pair {s}: {v}");
    }
}

#[test]
fn gradient_matches_finite_differences() {
    for (seed, d) in [(1, 2), (2, 3)] {
        let x = cloud(32, d, seed);
        let y = cloud(32, d, seed + 100);
        let cfg = fixed(0.02, 1e-10);
        let flow = sinkhorn_flow(&x, &y, &cfg).unwrap();
        let scale = flow.vectors.as_slice().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let h = 1e-5;
        for i in [0, 7, 31] {
            for k in 0..d {
                let mut plus = x.clone();
                plus.row_mut(i)[k] += h;
                let mut minus = x.clone();
                minus.row_mut(i)[k] -= h;
                let fd = (sinkhorn_divergence(&plus, &y, &cfg).unwrap()
                    - sinkhorn_divergence(&minus, &y, &cfg).unwrap())
                    / (2.0 * h);
                let analytic = -flow.vectors.row(i)[k];
                let err = (fd - analytic).abs() / analytic.abs().max(1e-3 * scale);
                assert!(err <= 1e-3, "d={d} i={i} k={k}: fd {fd} analytic {analytic}");
            }
        }
    }
}

#[test]
fn small_step_along_flow_descends() {
    for s in 0..20 {
        let x = cloud(24, 2, 300 + s);
        let y = cloud(24, 2, 400 + s);
        let cfg = fixed(0.02, 1e-9);
        let before = sinkhorn_divergence(&x, &y, &cfg).unwrap();
        let flow = sinkhorn_flow(&x, &y, &cfg).unwrap();
        let mut moved = x.clone();
        for (p, v) in moved.as_mut_slice().iter_mut().zip(flow.vectors.as_slice()) {
            *p += 1e-3 * v;
        }
        let after = sinkhorn_divergence(&moved, &y, &cfg).unwrap();
        assert!(after < before, "instance {s}: {after} >= {before}");
    }
}

#[test]
fn small_instances_match_assignment_lp() {
    for n in 1..=6 {
        for s in 0..3 {
            let x = cloud(n, 2, 50 * n as u64 + s);
            let y = cloud(n, 2, 70 * n as u64 + s);
            let sol = entropic_ot(&x, &y, &fixed(1e-4, 1e-9)).unwrap();
            let lp = assignment_lp(&x, &y);
            assert!((sol.cost - lp).abs() <= 0.01 * lp, "n={n}: {} vs {lp}", sol.cost);
        }
    }
}

#[test]
fn rigid_shift_recovers_squared_distance() {
    let side = 16;
    let grid: Vec<[f64; 2]> = (0..side * side)
        .map(|k| [(k % side) as f64 / (side - 1) as f64, (k / side) as f64 / (side - 1) as f64])
        .collect();
    let x = Points::from_rows(&grid).unwrap();
    let y = x.translated(&[0.5, 0.0]);
    let v = sinkhorn_divergence(&x, &y, &fixed(0.01, 1e-6)).unwrap();
    assert_abs_diff_eq!(v, 0.25, epsilon = 0.025);
}
