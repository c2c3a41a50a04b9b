use demo::{adjacency_heatmap, lr_curve, pooling_comparison, segmented_frames};

#[test]
fn heatmap_rows_are_distributions() {
    let a = adjacency_heatmap(12, 4, 3, 0.1, 5.0, 1).unwrap();
    assert_eq!(a.len(), 144);
    for row in a.chunks(12) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn zero_beta_heatmap_is_uniform() {
    let a = adjacency_heatmap(8, 3, 2, 0.5, 0.0, 4).unwrap();
    assert!(a.iter().all(|&v| (v - 0.125).abs() < 1e-15));
}

#[test]
fn large_beta_favours_own_segment() {
    // Low noise: frames in one segment are nearly parallel.
    let a = adjacency_heatmap(10, 8, 2, 0.01, 20.0, 2).unwrap();
    let within: f64 = a[..5].iter().sum();
    assert!(within > 0.9, "{within}");
}

#[test]
fn segments_are_contiguous() {
    let x = segmented_frames(6, 2, 3, 0.0, 9).unwrap();
    assert_eq!(x.row(0), x.row(1));
    assert_ne!(x.row(1), x.row(2));
    assert!(segmented_frames(2, 2, 3, 0.0, 0).is_err());
}

#[test]
fn lr_curve_shape() {
    let c = lr_curve(100, 1e-3, 25.0, 1e4, 0.3).unwrap();
    assert_eq!(c.len(), 100);
    assert_eq!(c[0], 1e-3 / 25.0);
    let peak = c.iter().copied().fold(0.0, f64::max);
    assert!((peak - 1e-3).abs() < 1e-15);
    assert!(c[99] < c[0]);
    assert!(lr_curve(10, 1e-3, 25.0, 1e4, 1.5).is_err());
}

#[test]
fn comparison_covers_every_kind() {
    let scores = pooling_comparison(4, 20, 6, 0.5, 3).unwrap();
    let kinds: Vec<&str> = scores.iter().map(|s| s.kind.as_str()).collect();
    assert_eq!(
        kinds,
        ["mean", "max", "mean_std", "quantile", "first", "middle", "last", "random", "gnn (untrained)"]
    );
    assert!(scores.iter().all(|s| (0.0..=1.0).contains(&s.eer)));
    // Mean pooling averages the noise away on well-separated speakers.
    assert!(scores[0].eer < 0.05, "{}", scores[0].eer);
}
