use bict::par::Exec;
use bict::verify::{gradient_suites, map_oracle_gap, GRAD_SUITES};

#[test]
fn every_loss_and_block_matches_finite_differences() {
    let suites = gradient_suites(17, 20, Exec::default()).unwrap();
    assert_eq!(suites.len(), GRAD_SUITES.len());
    for s in &suites {
        assert_eq!(s.instances, 20);
        assert!(
            s.max_rel_err < 1e-5,
            "{}: rel err {:e}",
            s.name,
            s.max_rel_err
        );
    }
}

#[test]
fn map_agrees_with_brute_force_including_ties() {
    let gap = map_oracle_gap(5, 100).unwrap();
    assert!(gap < 1e-12, "max abs diff {gap:e}");
}
