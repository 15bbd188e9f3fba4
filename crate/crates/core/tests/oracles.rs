mod common;

use common::oracle;

#[test]
fn metrics_match_bruteforce_oracles() {
    oracle::check_metrics(300, 1).unwrap();
}

#[test]
fn fft_matches_direct_dft_and_identities() {
    oracle::check_fft([4, 5, 6, 7, 8, 12, 16, 31, 32], 2).unwrap();
}

#[test]
fn oracle_self_check() {
    use sfanet_core::Label::{Fake, Real};
    let pairs = vec![(0.1, Fake), (0.4, Real), (0.45, Fake), (0.8, Real)];
    assert_eq!(oracle::auc(&pairs), Some(0.75));
    assert_eq!(oracle::counts(&pairs, 0.3), (2, 1, 1, 0));
    assert_eq!(oracle::eer_bruteforce(&pairs), 0.5);
    let perfect = vec![(0.2, Fake), (0.9, Real)];
    assert_eq!(oracle::eer_bruteforce(&perfect), 0.0);
    assert_eq!(oracle::min_dcf_bruteforce(&perfect, 1.0, 1.0, 0.5), 0.0);
}
