use pneunet_core::gradcheck::cases::run_all;
use pneunet_core::gradcheck::Precision;

fn check(precision: Precision) {
    let summaries = run_all(100, 2024, precision).unwrap();
    for s in &summaries {
        println!(
            "{:<40} cases {:>3}  resampled {:>2}  worst {:.2e}",
            s.name, s.cases, s.resampled, s.worst
        );
    }
    let failed: Vec<_> = summaries.iter().filter(|s| !s.passed()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn every_layer_matches_finite_differences_in_f32() {
    check(Precision::F32);
}

#[test]
fn every_layer_matches_finite_differences_in_f64() {
    check(Precision::F64);
}
