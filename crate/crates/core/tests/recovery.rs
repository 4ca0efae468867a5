use wchamfer::theory::{
    generate_synthetic, recover_weights, sample_complexity_sweep, summarize_sweep, SyntheticSpec, RECOVERY_TOLERANCE,
};

fn spec(seed: u64, n: usize) -> SyntheticSpec {
    SyntheticSpec {
        vocab_size: 64,
        dim: 16,
        n_queries: n,
        seed,
        ..Default::default()
    }
}

#[test]
fn exact_scores_recover_planted_weights() {
    let data = generate_synthetic(&spec(0, 500)).unwrap();
    let mut report = recover_weights(&data.features, &data.scores, 64).unwrap();
    assert_eq!(report.support.len(), 64);
    assert!(!report.rank_deficient);
    assert!(report.min_eig > 1e-6);
    assert!(report.compare(data.planted.as_slice()) <= RECOVERY_TOLERANCE);

    // Residuals of the fitted scores, computed independently of the solver.
    for (f, s) in data.features.iter().zip(&data.scores) {
        let fitted: f64 = f.entries().iter().map(|&(t, x)| report.w_hat[t.index()] * x).sum();
        assert!((fitted - s).abs() < 1e-9);
    }
}

#[test]
fn gram_is_psd_at_every_size() {
    for n in [1, 3, 10, 40, 200] {
        let data = generate_synthetic(&spec(1, n)).unwrap();
        let report = recover_weights(&data.features, &data.scores, 64).unwrap();
        assert!(report.min_eig >= -1e-9, "n={n}: {}", report.min_eig);
        if n < report.support.len() {
            assert!(report.rank_deficient);
        }
    }
}

#[test]
fn unobserved_tokens_are_zero_in_estimate() {
    let data = generate_synthetic(&SyntheticSpec {
        query_len: (1, 2),
        ..spec(4, 5)
    })
    .unwrap();
    let report = recover_weights(&data.features, &data.scores, 64).unwrap();
    for t in 0..64u32 {
        if !report.support.contains(&wchamfer::TokenId(t)) {
            assert_eq!(report.w_hat[t as usize], 0.0);
        }
    }
}

#[test]
fn sweep_is_deterministic_and_eigenvalues_grow() {
    let base = spec(0, 0);
    let grid = [64, 128, 256, 512];
    let rows = sample_complexity_sweep(&base, &grid, 8).unwrap();
    assert_eq!(rows.len(), 32);
    assert_eq!(rows, sample_complexity_sweep(&base, &grid, 8).unwrap());
    let summary = summarize_sweep(&rows);
    for pair in summary.windows(2) {
        assert!(pair[1].median_min_eig >= pair[0].median_min_eig);
    }
    assert!(summary[3].success_rate >= summary[0].success_rate);
    assert!(summary[3].success_rate >= 0.9);
}
