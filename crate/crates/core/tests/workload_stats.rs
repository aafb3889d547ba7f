mod common;

use common::{generated, reference_zipf_counts, zipf_pair_counts};

#[test]
fn poisson_count_within_three_sigma() {
    for seed in [1, 2, 3] {
        let n = generated(&["clip-vit-l14"], 10.0, 1000.0, 1.0, seed).len() as f64;
        // mean λT = 10 000, σ = √10 000 = 100
        assert!((n - 10_000.0).abs() <= 300.0, "seed {seed}: {n} arrivals");
    }
}

#[test]
fn inter_arrival_mean_matches_rate() {
    let trace = generated(&["clip-vit-l14"], 4.0, 5000.0, 1.0, 9);
    let mean_gap = trace.last().unwrap().arrival_time_s / trace.len() as f64;
    assert!((mean_gap - 0.25).abs() < 0.01, "{mean_gap}");
}

#[test]
fn zipf_one_gives_two_to_one() {
    let (a, b) = zipf_pair_counts(1.0, 100_000, 11);
    let ratio = a as f64 / b as f64;
    assert!((ratio - 2.0).abs() <= 0.05, "ratio {ratio}");

    let oracle = reference_zipf_counts(2, 1.0, 100_000, 11);
    let oracle_ratio = oracle[0] as f64 / oracle[1] as f64;
    assert!(
        (oracle_ratio - 2.0).abs() <= 0.05,
        "oracle ratio {oracle_ratio}"
    );
    // both are estimates of 2/3; 5σ of the difference at n = 100 000 is ~0.01
    let (p, q) = (a as f64 / 1e5, oracle[0] as f64 / 1e5);
    assert!((p - q).abs() < 0.01);
}

#[test]
fn zipf_zero_is_uniform() {
    let (a, b) = zipf_pair_counts(0.0, 100_000, 12);
    let share = a as f64 / (a + b) as f64;
    assert!((share - 0.5).abs() <= 0.02, "share {share}");
}

#[test]
fn zipf_rank_frequencies_follow_the_law() {
    let models = [
        "gpt3-13b",
        "clip-vit-h14",
        "clip-vit-l14",
        "uniformer-b",
        "uniformer-s",
        "gpt3-175b",
    ];
    let trace = generated(&models, 100.0, 1000.0, 0.8, 13);
    let n = trace.len();
    let oracle = reference_zipf_counts(models.len(), 0.8, n, 13);
    for (rank, id) in models.iter().enumerate() {
        let got = trace.iter().filter(|r| r.model_id == *id).count() as f64 / n as f64;
        let want = oracle[rank] as f64 / n as f64;
        assert!((got - want).abs() < 0.01, "{id}: {got} vs {want}");
    }
}
