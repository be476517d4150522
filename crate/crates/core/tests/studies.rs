use normflow::analysis::attention_norm_study;
use normflow::experiments::{preset, run_experiment};

#[test]
fn median_attention_norm_is_non_increasing_in_d() {
    let medians: Vec<f64> = [128, 256, 512]
        .into_iter()
        .map(|d| attention_norm_study(128, d, 1.0, 200, 11).unwrap().median_max_norm())
        .collect();
    assert!(medians.windows(2).all(|w| w[1] <= w[0]), "{medians:?}");
}

// Quantile bands estimate fixed population quantiles, so more runs make the
// band width settle rather than shrink.
#[test]
fn band_width_is_stable_in_run_count() {
    let mut cfg = preset("appx_e4").unwrap();
    cfg.runs = 100;
    let few = run_experiment(&cfg).unwrap();
    cfg.runs = 400;
    let many = run_experiment(&cfg).unwrap();
    for (a, b) in few.results.iter().zip(&many.results) {
        let (wa, wb) = (
            a.get("gamma").unwrap().band_width(),
            b.get("gamma").unwrap().band_width(),
        );
        assert!(
            wa > 0.0 && (0.75..1.33).contains(&(wb / wa)),
            "{}: {wa} -> {wb}",
            a.label
        );
    }
}
