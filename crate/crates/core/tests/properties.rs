use kmarkov::estimator::{
    a_hat, aggregate, estimate, p_hat_ell, regularize_generator, AccumulatorBank, BandwidthSchedule, KernelKind,
    LagRange, RegMode,
};
use kmarkov::markov::{
    generator_defects, link_evaluate, matrix_power, reference_chain_3, CovariatePoint, StochasticMatrix,
};
use kmarkov::matfun::{mat_exp, mat_log_principal, max_norm, SquareMatrix};
use kmarkov::simulator::{simulate_paths, Observation, SamplePath, SimConfig, TruthSpec};
use nalgebra::DMatrix;
use proptest::prelude::*;

/// Generator with off-diagonal rates `rates` (row-major, diagonal slots
/// ignored) scaled so that every row's total rate is at most `max_rate`.
fn generator(s: usize, rates: &[f64], max_rate: f64) -> DMatrix<f64> {
    let mut g = DMatrix::<f64>::zeros(s, s);
    for i in 0..s {
        for j in 0..s {
            if i != j {
                g[(i, j)] = rates[i * s + j] * max_rate / (s - 1) as f64;
            }
        }
        g[(i, i)] = -(0..s).filter(|&j| j != i).map(|j| g[(i, j)]).sum::<f64>();
    }
    g
}

fn gen_strategy(max_rate: f64) -> impl Strategy<Value = DMatrix<f64>> {
    (2usize..=5)
        .prop_flat_map(move |s| prop::collection::vec(0.0f64..1.0, s * s).prop_map(move |r| generator(s, &r, max_rate)))
}

fn sq(m: DMatrix<f64>) -> SquareMatrix {
    SquareMatrix::new(m).unwrap()
}

fn stochastic(m: DMatrix<f64>) -> StochasticMatrix {
    StochasticMatrix::new(sq(m)).unwrap()
}

fn is_stochastic(m: &DMatrix<f64>, tol: f64) -> bool {
    m.row_iter().all(|r| (r.sum() - 1.0).abs() <= tol && r.iter().all(|&x| x >= -tol))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn exp_of_generator_is_stochastic(g in gen_strategy(3.0)) {
        let e = mat_exp(&sq(g)).unwrap();
        prop_assert!(is_stochastic(e.as_matrix(), 1e-12));
    }

    #[test]
    fn log_inverts_exp(g in gen_strategy(1.0)) {
        let back = mat_log_principal(&mat_exp(&sq(g.clone())).unwrap()).unwrap();
        prop_assert!(max_norm(&(back.as_matrix() - &g)) < 1e-10);
    }

    #[test]
    fn roots_of_exact_powers(g in gen_strategy(0.3), ell in 1usize..=10) {
        // Total rate 0.3 keeps every diagonal of P above 1/2.
        let p = stochastic(mat_exp(&sq(g)).unwrap().into_inner());
        let fit = p_hat_ell(&matrix_power(&p, ell), ell, RegMode::Weighted).unwrap();
        prop_assert!(!fit.regularized);
        prop_assert!(max_norm(&(fit.p_hat.as_matrix() - p.as_matrix())) < 1e-10);
    }

    #[test]
    fn matrix_powers_add(g in gen_strategy(2.0), a in 1usize..6, b in 1usize..6) {
        let p = stochastic(mat_exp(&sq(g)).unwrap().into_inner());
        let lhs = matrix_power(&p, a + b);
        let rhs = matrix_power(&p, a).as_matrix() * matrix_power(&p, b).as_matrix();
        prop_assert!(max_norm(&(lhs.as_matrix() - rhs)) < 1e-13);
    }

    #[test]
    fn link_rows_are_distributions(psi in -50.0f64..50.0) {
        let m = link_evaluate(&reference_chain_3(), psi);
        prop_assert!(is_stochastic(m.as_matrix(), 1e-12));
    }

    #[test]
    fn regularization_is_idempotent(
        g in gen_strategy(2.0),
        noise in prop::collection::vec(-0.2f64..0.2, 25),
        diagonal in any::<bool>(),
    ) {
        let s = g.nrows();
        let b = DMatrix::from_fn(s, s, |i, j| g[(i, j)] + noise[i * 5 + j]);
        let mode = if diagonal { RegMode::Diagonal } else { RegMode::Weighted };
        let once = regularize_generator(&sq(b), mode).unwrap();
        prop_assert!(generator_defects(once.as_matrix(), 1e-12, 1e-12).is_empty());
        let twice = regularize_generator(&once.to_square(), mode).unwrap();
        prop_assert_eq!(once.as_matrix(), twice.as_matrix());
    }

    #[test]
    fn aggregate_ignores_weight_scale(w in prop::collection::vec(0.01f64..1.0, 3), scale in 0.001f64..1000.0) {
        let p = reference_chain_3();
        let mats = [p.clone(), matrix_power(&p, 2), matrix_power(&p, 3)];
        let parts: Vec<(f64, &StochasticMatrix)> = w.iter().copied().zip(&mats).collect();
        let scaled: Vec<(f64, &StochasticMatrix)> = w.iter().map(|x| x * scale).zip(&mats).collect();
        let a = aggregate(&parts).unwrap();
        let b = aggregate(&scaled).unwrap();
        prop_assert!(max_norm(&(a.as_matrix() - b.as_matrix())) < 1e-14);
    }
}

fn covariate_bank(schedule: BandwidthSchedule) -> AccumulatorBank {
    let grid = vec![CovariatePoint::new(vec![1.5], vec![1]), CovariatePoint::new(vec![1.7], vec![0])];
    AccumulatorBank::new(grid, 3, 20, schedule, KernelKind::Gaussian).unwrap()
}

fn covariate_paths(n: usize, seed: u64) -> Vec<SamplePath> {
    let mut cfg = SimConfig::new(TruthSpec::Three, n, seed);
    cfg.with_covariates = true;
    simulate_paths(&cfg, 0).unwrap()
}

fn close(a: &[f64], b: &[f64], rel: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= rel * x.abs().max(y.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_split_merges_to_the_single_pass(split in 0usize..=120, beta in 0.0f64..0.2, seed in 0u64..1000) {
        let paths = covariate_paths(120, seed);
        let schedule = BandwidthSchedule { c: 1.0, alpha: 0.2, beta, sigma_scale: Some(0.22) };
        let mut whole = covariate_bank(schedule);
        whole.absorb_all(&paths).unwrap();

        let mut left = covariate_bank(schedule);
        left.absorb_all(&paths[..split]).unwrap();
        let mut right = left.empty_like(split as u64);
        right.absorb_all(&paths[split..]).unwrap();
        let ab = left.merge(&right).unwrap();
        let ba = right.merge(&left).unwrap();
        prop_assert!(close(ab.raw_u_t(), whole.raw_u_t(), 1e-12));
        prop_assert!(close(ab.raw_u_b(), whole.raw_u_b(), 1e-12));
        prop_assert_eq!(ab.raw_u_t(), ba.raw_u_t());
        prop_assert!((ab.omega_sum() - whole.omega_sum()).abs() <= 1e-12 * whole.omega_sum());
        prop_assert!(whole.row_sum_defect() <= 1e-10);

        let sharded = covariate_bank(schedule).absorb_sharded(&paths, 3).unwrap();
        prop_assert!(close(sharded.raw_u_t(), whole.raw_u_t(), 1e-12));
    }
}

#[test]
fn merge_with_empty_is_identity() {
    let schedule = BandwidthSchedule { sigma_scale: Some(0.2), ..Default::default() };
    let mut bank = covariate_bank(schedule);
    bank.absorb_all(&covariate_paths(30, 1)).unwrap();
    let empty = bank.empty_like(bank.next_index() - 1);
    let merged = bank.merge(&empty).unwrap();
    assert_eq!(merged, bank);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let schedule = BandwidthSchedule { beta: 0.1, sigma_scale: Some(0.21), ..Default::default() };
    let paths = covariate_paths(200, 8);
    let mut bank = covariate_bank(schedule);
    bank.absorb_all(&paths[..77]).unwrap();
    let mut buf = Vec::new();
    bank.save_checkpoint(&mut buf).unwrap();
    let mut resumed = AccumulatorBank::load_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(resumed, bank);
    resumed.absorb_all(&paths[77..]).unwrap();
    bank.absorb_all(&paths[77..]).unwrap();
    assert_eq!(resumed, bank);
}

#[test]
fn transition_frequencies_follow_matrix_powers() {
    // Without covariates every transition after a gap of ℓ is a draw from
    // row `from` of P^ℓ; pooled counts at small gaps must match.
    let cfg = SimConfig::new(TruthSpec::Three, 40_000, 17);
    let paths = simulate_paths(&cfg, 0).unwrap();
    let p = cfg.truth.matrix();
    for ell in [8usize, 10, 12] {
        let mut counts = DMatrix::<f64>::zeros(3, 3);
        for path in &paths {
            for t in path.transitions().filter(|t| t.gap == ell) {
                counts[(t.from, t.to)] += 1.0;
            }
        }
        let want = matrix_power(&p, ell);
        for i in 0..3 {
            let n: f64 = counts.row(i).sum();
            assert!(n > 200.0, "ℓ={ell} row {i}: only {n} transitions");
            for j in 0..3 {
                let q = want.as_matrix()[(i, j)];
                let se = (q * (1.0 - q) / n).sqrt();
                let got = counts[(i, j)] / n;
                assert!((got - q).abs() < 5.0 * se + 1e-9, "ℓ={ell} ({i},{j}): {got} vs {q}");
            }
        }
    }
}

#[test]
fn covariate_marginals() {
    let paths = covariate_paths(20_000, 3);
    let n = paths.len() as f64;
    let zc: Vec<f64> = paths.iter().map(|p| p.covariates.continuous[0]).collect();
    let mean = zc.iter().sum::<f64>() / n;
    let var = zc.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    // 1 + Beta(2,2): mean 1.5, variance 1/20, support [1, 2].
    assert!((mean - 1.5).abs() < 5.0 * (0.05f64 / n).sqrt());
    assert!((var - 0.05).abs() < 0.003);
    assert!(zc.iter().all(|&x| (1.0..=2.0).contains(&x)));
    let ones = paths.iter().filter(|p| p.covariates.discrete[0] == 1).count() as f64 / n;
    assert!((ones - 0.7).abs() < 5.0 * (0.21f64 / n).sqrt());
}

#[test]
fn unit_row_example() {
    // One transition 1 → 2 after 3 units, covariate at the grid point, h = 1.
    let schedule = BandwidthSchedule { c: 1.0, alpha: 0.2, beta: 0.0, sigma_scale: Some(1.0) };
    let z = CovariatePoint::new(vec![1.5], vec![]);
    let mut bank = AccumulatorBank::new(vec![z.clone()], 3, 20, schedule, KernelKind::Gaussian).unwrap();
    let path =
        SamplePath { path_id: 0, covariates: z, initial_state: 0, events: vec![Observation { gap: 3, state: 1 }] };
    bank.absorb_path(&path).unwrap();
    let k0 = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    assert!((bank.u_t(0, 3, 0, 1) - k0).abs() < 1e-15);
    assert_eq!(bank.u_b(0, 3, 0), bank.u_t(0, 3, 0, 1));
    let ah = a_hat(&bank, 0, 3);
    assert_eq!(ah.raw.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 0.0]);
    assert_eq!(ah.missing_rows, vec![1, 2]);
    // The completed matrix is singular, so the only lag has no logarithm.
    let err = estimate(&bank, 0, LagRange::new(3, 3), RegMode::Weighted).unwrap_err();
    assert_eq!(err, kmarkov::estimator::EstimatorError::NoUsableLag);
}
