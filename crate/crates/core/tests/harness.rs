use hetnet_opt::harness::{
    metrics, parse_strategies, percentile, run_comparison, write_outputs, ComparisonConfig, Report,
    StrategySpec,
};
use hetnet_opt::patterns::Strategy;
use hetnet_opt::scenario::ScenarioConfig;
use hetnet_opt::SolverOptions;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_run(seed: u64) -> Report {
    let scenario = ScenarioConfig { num_users: 12, ..Default::default() };
    let specs = vec![
        StrategySpec::joint(Strategy::AllPattern),
        StrategySpec::joint(Strategy::FeaPattern),
        StrategySpec::joint(Strategy::Reuse1),
        StrategySpec::range_expansion(Strategy::FeaPattern, 10.0),
    ];
    let mut cfg = ComparisonConfig::new(scenario, specs, 2, seed);
    cfg.solver = SolverOptions::with_epsilon(1e-2);
    run_comparison(&cfg).unwrap()
}

#[test]
fn geometric_mean_matches_product_root() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rates: Vec<f64> = (0..50).map(|_| rng.random_range(0.5..2.0)).collect();
    // Product stays in range for 50 values in [0.5, 2), so the direct root is exact enough.
    let direct = rates.iter().product::<f64>().powf(1.0 / 50.0);
    let m = metrics(&rates).unwrap();
    assert!((m.geometric_mean - direct).abs() <= 1e-12 * direct, "{} vs {direct}", m.geometric_mean);
}

#[test]
fn percentiles_interpolate_linearly() {
    let v = [1.0, 2.0, 3.0, 4.0, 5.0];
    assert_eq!(percentile(&v, 0.0), 1.0);
    assert_eq!(percentile(&v, 0.5), 3.0);
    assert!((percentile(&v, 0.05) - 1.2).abs() < 1e-12);
    assert!((percentile(&v, 0.95) - 4.8).abs() < 1e-12);
}

#[test]
fn metrics_reject_zero_rates() {
    assert!(metrics(&[1.0, 0.0]).is_err());
    assert!(metrics(&[]).is_err());
}

#[test]
fn strategy_list_parses_bias_suffix() {
    let specs = parse_strategies("all, feature, reuse1@12.5").unwrap();
    assert_eq!(specs.len(), 3);
    assert_eq!(specs[2], StrategySpec::range_expansion(Strategy::Reuse1, 12.5));
    assert_eq!(specs[2].name(), "RE12.5dB-Reuse1");
    assert!(parse_strategies("all,nope").is_err());
}

#[test]
fn comparison_is_deterministic_and_dominated_by_all_patterns() {
    let a = small_run(3);
    let b = small_run(3);
    assert!(a.all_certified());
    assert_eq!(a.summary, b.summary);
    assert!(a.dominance_violations().is_empty());

    let all = a.summary_of("AllPattern").unwrap();
    for s in &a.summary {
        assert!(s.drops_ok == 2 && s.drops_failed == 0, "{}", s.strategy);
        // Certified at 1e-2 per drop; the all-pattern relaxation can only be beaten by slack.
        if !s.strategy.starts_with("RE") {
            assert!(s.utility <= all.utility + 1.0, "{} beats AllPattern", s.strategy);
        }
    }
    // Drop seeds are consecutive.
    let seeds: Vec<u64> = a.outcomes.iter().filter(|o| o.strategy == "AllPattern").map(|o| o.seed).collect();
    assert_eq!(seeds, vec![3, 4]);
}

#[test]
fn outputs_are_written() {
    let report = small_run(9);
    let dir = tempfile::tempdir().unwrap();
    write_outputs(&report, dir.path(), true).unwrap();
    for name in ["report.json", "metrics.csv", "cdf_AllPattern.csv", "cdf_RE10dB-FeaPattern.csv", "cdf.svg"] {
        assert!(dir.path().join(name).is_file(), "{name} missing");
    }
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["summary"].as_array().unwrap().len(), 4);

    // One row per (drop, strategy) plus one mean row per strategy.
    let mut csv = csv::Reader::from_path(dir.path().join("metrics.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = csv.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2 * 4 + 4);
    assert_eq!(rows.iter().filter(|r| &r[0] == "mean").count(), 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn geometric_mean_sits_between_min_and_arithmetic_mean(
        rates in proptest::collection::vec(1e3f64..1e8, 1..60)
    ) {
        let m = metrics(&rates).unwrap();
        let min = rates.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert!(m.geometric_mean >= min * (1.0 - 1e-12));
        prop_assert!(m.geometric_mean <= m.arithmetic_mean * (1.0 + 1e-12));
        prop_assert!(m.p5 <= m.p50 && m.p50 <= m.p95);
    }

    #[test]
    fn scaling_rates_scales_geometric_mean(
        rates in proptest::collection::vec(1e3f64..1e8, 1..40), c in 0.1f64..10.0
    ) {
        let a = metrics(&rates).unwrap().geometric_mean;
        let scaled: Vec<f64> = rates.iter().map(|r| r * c).collect();
        let b = metrics(&scaled).unwrap().geometric_mean;
        prop_assert!((b - c * a).abs() <= 1e-10 * b);
    }
}
