use notebert::experiments::{run_experiment, ExperimentConfig, SynonymsConfig};
use notebert::synth::SYNONYM_PAIRS;

/// Words planted in identical contexts end up in each other's top 3.
#[test]
fn planted_synonyms_are_mutual_neighbors() {
    let dir = tempfile::tempdir().unwrap();
    let config = SynonymsConfig::default();
    assert_eq!(config.k, 3);
    let report = run_experiment(&ExperimentConfig::Synonyms(config), 12345, dir.path()).unwrap();
    for (a, b) in SYNONYM_PAIRS {
        for word in [a, b] {
            let rank = report.metric(&format!("{word}_partner_rank")).unwrap();
            assert!((1.0..=3.0).contains(&rank), "{word}: partner rank {rank}");
        }
    }
    let table = std::fs::read_to_string(dir.path().join("neighbors.txt")).unwrap();
    assert_eq!(table.matches("(static)").count(), 2 * SYNONYM_PAIRS.len());
}
