use bict::verify::reduction_checks;

#[test]
fn degenerate_settings_reduce_exactly() {
    for seed in [1, 2, 3] {
        let checks = reduction_checks(seed).unwrap();
        assert_eq!(checks.len(), 5);
        for c in checks {
            assert!(c.passed, "seed {seed} {}: {}", c.name, c.detail);
        }
    }
}
