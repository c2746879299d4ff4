use oct_stroke::gradcheck::run_suite;

#[test]
fn analytic_gradients_match_finite_differences() {
    for seed in [7, 8, 9] {
        let reports = run_suite(20, seed).unwrap();
        for r in &reports {
            println!(
                "{:<24} coords={:<5} kinks={:<3} max_rel_err={:.3e}",
                r.name, r.coordinates, r.kinks, r.max_rel_err
            );
            assert!(r.max_rel_err < 1e-4, "{} max relative error {}", r.name, r.max_rel_err);
            assert!(r.kinks * 50 <= r.coordinates, "{} skipped {} kinks", r.name, r.kinks);
        }
    }
}
