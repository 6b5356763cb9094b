use heatlab_core::noise::*;
use heatlab_core::solver::*;
use proptest::prelude::*;
use rayon::prelude::*;

fn small_grid() -> GridSpec {
    GridSpec::covering(Interval::new(0.0, 0.25), 1.0 / 16.0, 1.0 / 32.0, 2.0).unwrap()
}

/// Variance of `v(t, 0)` over `n` replications, and its standard error.
fn variance_at(dx: f64, t: f64, n: usize, master: u64) -> (f64, f64) {
    let g = GridSpec::covering(Interval::new(0.0, dx), t, dx, 6.0).unwrap();
    let j = g.space_index(0.0).unwrap();
    let xs: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|rep| {
            let mut run = CoupledRun::new(&g, derive_seed(master, 0, rep as u32), None, false).unwrap();
            run.advance(g.n_steps()).unwrap();
            run.u()[j]
        })
        .collect();
    let m = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n as f64;
    (var, ((m4 - var * var) / n as f64).sqrt())
}

#[test]
fn refinement_moves_variance_less_than_the_noise() {
    let t = 0.125;
    let (coarse, se_c) = variance_at(1.0 / 16.0, t, 10_000, 1);
    let (fine, se_f) = variance_at(1.0 / 32.0, t, 10_000, 2);
    let tol = 1.96 * se_c.hypot(se_f);
    assert!((coarse - fine).abs() < tol, "{coarse} vs {fine} (tol {tol})");
    let exact = linear_variance(t);
    assert!((fine - exact).abs() < 4.0 * se_f, "{fine} vs {exact}");
}

#[test]
fn no_blow_up_on_a_thousand_seeds() {
    let g = small_grid();
    let sigma = SigmaSpec::default_sine();
    let ok = (0..1000u32).into_par_iter().all(|rep| {
        let mut run = CoupledRun::new(&g, derive_seed(3, 0, rep), Some(sigma.clone()), true).unwrap();
        (0..g.n_steps()).all(|_| {
            run.step().unwrap();
            run.u().iter().chain(run.v().unwrap()).all(|x| x.is_finite())
        })
    });
    assert!(ok);
}

#[test]
fn heat_kernel_integrates_to_one() {
    let t = 0.3;
    let h = 1e-3;
    let total: f64 = (-5000..=5000).map(|i| heat_kernel(t, i as f64 * h).unwrap() * h).sum();
    assert!((total - 1.0).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn constant_sigma_scales_the_linear_solution(k in -3i32..4, rep in 0u32..1000) {
        // Dyadic constants scale exactly in floating point.
        let c0 = 2f64.powi(k);
        let g = small_grid();
        let noise = sample_noise(&g, derive_seed(9, 0, rep)).unwrap();
        let u = solve_nonlinear(&g, &noise, &SigmaSpec::constant(c0).unwrap()).unwrap();
        let v = solve_linear(&g, &noise).unwrap();
        prop_assert!(u.values.iter().zip(v.values.iter()).all(|(a, b)| *a == c0 * b));
    }

    #[test]
    fn general_constant_scales_to_rounding(c0 in 0.1..5.0f64, rep in 0u32..1000) {
        let g = small_grid();
        let noise = sample_noise(&g, derive_seed(9, 1, rep)).unwrap();
        let u = solve_nonlinear(&g, &noise, &SigmaSpec::constant(c0).unwrap()).unwrap();
        let v = solve_linear(&g, &noise).unwrap();
        let scale = v.values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        prop_assert!(u.values.iter().zip(v.values.iter()).all(|(a, b)| (a - c0 * b).abs() <= 1e-12 * c0 * scale.max(1.0)));
    }

    #[test]
    fn streaming_matches_the_materialized_solve(rep in 0u32..1000) {
        let g = small_grid();
        let sigma = SigmaSpec::default_sine();
        let seed = derive_seed(4, 0, rep);
        let noise = sample_noise(&g, seed).unwrap();
        let full = solve_nonlinear(&g, &noise, &sigma).unwrap();
        let mut run = CoupledRun::new(&g, seed, Some(sigma), false).unwrap();
        run.advance(g.n_steps()).unwrap();
        let last = full.values.row(g.n_steps());
        prop_assert!(last.iter().zip(run.u()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
