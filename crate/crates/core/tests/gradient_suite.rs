use std::time::{Duration, Instant};

use coae::gradsuite::{check_block, run_suite, BLOCKS, TOLERANCE};

#[test]
fn every_block_passes_over_a_hundred_seeds() {
    let start = Instant::now();
    let report = run_suite(0, 100).unwrap();
    let took = start.elapsed();
    assert_eq!(report.blocks.len(), BLOCKS.len());
    for b in &report.blocks {
        assert_eq!(b.seeds, 100);
        assert!(
            b.failures == 0 && b.max_rel_err < TOLERANCE,
            "{}",
            report.to_text()
        );
    }
    assert!(report.passed());
    assert!(took < Duration::from_secs(120), "suite took {took:?}");
}

#[test]
fn checks_are_reproducible_per_seed() {
    for &b in &BLOCKS {
        let a = check_block(b, 7).unwrap();
        let again = check_block(b, 7).unwrap();
        assert_eq!(a.max_rel_err(), again.max_rel_err());
    }
}
