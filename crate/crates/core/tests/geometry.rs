use heatlab_core::geometry::*;
use heatlab_core::hitting::{SetKind, TargetSet};
use proptest::prelude::*;

/// Euclidean projection onto the probability simplex (sort-based).
fn project_simplex(y: &[f64]) -> Vec<f64> {
    let mut u = y.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        css += ui;
        let t = (css - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    y.iter().map(|&v| (v - theta).max(0.0)).collect()
}

/// Accelerated projected gradient for min wᵀKw on the simplex, brute force.
fn qp_oracle(pts: &[Vec<f64>], beta: f64, r_min: f64) -> f64 {
    let n = pts.len();
    let k: Vec<Vec<f64>> = pts
        .iter()
        .map(|p| {
            pts.iter()
                .map(|q| {
                    let r = p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt().max(r_min);
                    r.powf(-beta)
                })
                .collect()
        })
        .collect();
    let matvec = |w: &[f64]| -> Vec<f64> { k.iter().map(|row| row.iter().zip(w).map(|(a, b)| a * b).sum()).collect() };
    // Lipschitz constant of 2Kw: twice the largest row sum bounds the spectral radius.
    let lip = 2.0 * k.iter().map(|r| r.iter().sum::<f64>()).fold(0.0, f64::max);
    let mut w = vec![1.0 / n as f64; n];
    let mut y = w.clone();
    let mut t = 1.0f64;
    for _ in 0..20_000 {
        let g = matvec(&y);
        let step: Vec<f64> = y.iter().zip(&g).map(|(a, b)| a - 2.0 * b / lip).collect();
        let w_next = project_simplex(&step);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = w_next.iter().zip(&w).map(|(a, b)| a + (t - 1.0) / t_next * (a - b)).collect();
        w = w_next;
        t = t_next;
    }
    let kw = matvec(&w);
    w.iter().zip(&kw).map(|(a, b)| a * b).sum()
}

fn unit_segment() -> TargetSet {
    TargetSet::segment(vec![0.0], vec![1.0], 1.0).unwrap()
}

#[test]
fn segment_capacity_matches_dense_qp() {
    for n in [64, 128] {
        let g = capacity(&unit_segment(), 0.5, n, 500_000).unwrap();
        assert!(g.gap.unwrap() < 1e-6, "n={n} gap {:?}", g.gap);
        let oracle = 1.0 / qp_oracle(&unit_segment().sample(n), 0.5, g.r_min.unwrap());
        let rel = (g.value - oracle).abs() / oracle;
        assert!(rel < 0.05, "n={n}: {} vs oracle {oracle}", g.value);
    }
}

#[test]
fn negative_index_is_one_on_every_kind() {
    let kinds = vec![
        TargetSet::singleton(vec![0.1, 0.2], 1.0).unwrap(),
        TargetSet::new(SetKind::Points { points: vec![vec![0.0, 0.0], vec![1.0, 1.0]] }, 1.0).unwrap(),
        TargetSet::segment(vec![0.0, 0.0], vec![0.0, 1.0], 1.0).unwrap(),
        TargetSet::new(SetKind::Ball { center: vec![0.0, 0.0], radius: 0.3 }, 1.0).unwrap(),
        TargetSet::new(SetKind::CantorDust { corner: vec![0.0, 0.0], side: 1.0, levels: 3 }, 1.0).unwrap(),
    ];
    for a in &kinds {
        for beta in [-2.0, -0.5, -1e-9] {
            assert_eq!(capacity(a, beta, 32, 1000).unwrap().value, 1.0);
        }
    }
}

#[test]
fn frank_wolfe_energy_is_monotone() {
    let pts = unit_segment().sample(64);
    let k = kernel_matrix(&pts, 0.5, smoothing_radius(&pts));
    let qp = frank_wolfe(&k, 64, 1e-9, 10_000);
    for w in qp.trace.windows(2) {
        assert!(w[1] <= w[0] + 1e-12 * w[0].abs());
    }
}

#[test]
fn capacity_grows_with_the_set() {
    // Same spacing on both samples, so the smaller sample is a subset.
    let half = TargetSet::segment(vec![0.0], vec![0.5], 1.0).unwrap();
    let small = capacity(&half, 0.5, 33, 500_000).unwrap().value;
    let large = capacity(&unit_segment(), 0.5, 65, 500_000).unwrap().value;
    assert!(small <= large + 1e-6, "{small} > {large}");
}

#[test]
fn capacity_is_non_increasing_in_index() {
    // The log kernel at index 0 is a separate convention and is excluded.
    let betas = [-1.0, 0.25, 0.5, 0.75, 1.0];
    let caps: Vec<f64> = betas.iter().map(|&b| capacity(&unit_segment(), b, 64, 500_000).unwrap().value).collect();
    for w in caps.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "{caps:?}");
    }
}

#[test]
fn segment_covering_converges_to_length() {
    let seg = TargetSet::segment(vec![0.0, 0.0, 0.0], vec![0.3, 0.1, 0.0], 1.0).unwrap();
    let len = (0.1f64).hypot(0.3);
    let sums = covering_refinement(&seg, 1.0, 0.1, 3).unwrap();
    for w in sums.windows(2) {
        assert!((w[1].1 - len).abs() <= (w[0].1 - len).abs() + 1e-12);
    }
    assert!((sums[2].1 - len).abs() < 1e-12);
    assert_eq!(hausdorff_measure(&seg, 1.0).unwrap().value, len);
}

proptest! {
    #[test]
    fn metric_is_symmetric_and_triangular(
        a in (-2.0..2.0f64, -2.0..2.0f64),
        b in (-2.0..2.0f64, -2.0..2.0f64),
        c in (-2.0..2.0f64, -2.0..2.0f64),
    ) {
        let (ab, ba) = (parabolic_metric(a, b), parabolic_metric(b, a));
        prop_assert_eq!(ab, ba);
        prop_assert!(ab >= 0.0);
        prop_assert!(ab <= parabolic_metric(a, c) + parabolic_metric(c, b) + 1e-12);
    }

    #[test]
    fn energy_is_convex_in_weights(
        n in 3usize..24,
        raw_a in prop::collection::vec(0.01..1.0f64, 24),
        raw_b in prop::collection::vec(0.01..1.0f64, 24),
        lam in 0.0..1.0f64,
        beta in 0.05..3.0f64,
    ) {
        let norm = |r: &[f64]| { let s: f64 = r[..n].iter().sum(); r[..n].iter().map(|x| x / s).collect::<Vec<_>>() };
        let (wa, wb) = (norm(&raw_a), norm(&raw_b));
        // Equispaced sample: the smoothed kernel is a convex decreasing
        // Toeplitz sequence, hence positive definite.
        let pts = unit_segment().sample(n);
        let k = kernel_matrix(&pts, beta, smoothing_radius(&pts));
        let e = |w: &[f64]| -> f64 { (0..n).map(|i| (0..n).map(|j| w[i] * w[j] * k[i * n + j]).sum::<f64>()).sum() };
        let wm: Vec<f64> = wa.iter().zip(&wb).map(|(a, b)| lam * a + (1.0 - lam) * b).collect();
        let bound = lam * e(&wa) + (1.0 - lam) * e(&wb);
        prop_assert!(e(&wm) <= bound * (1.0 + 1e-12));
    }

    #[test]
    fn negative_index_energy_is_one(ws in prop::collection::vec(0.0..1.0f64, 1..10), beta in -3.0..-0.01f64) {
        let s: f64 = ws.iter().sum();
        prop_assume!(s > 0.0);
        let w: Vec<f64> = ws.iter().map(|x| x / s).collect();
        let pts: Vec<Vec<f64>> = (0..w.len()).map(|i| vec![i as f64]).collect();
        let mu = DiscreteMeasure::new(pts, w).unwrap();
        prop_assert_eq!(riesz_energy(&mu, beta), 1.0);
    }
}
