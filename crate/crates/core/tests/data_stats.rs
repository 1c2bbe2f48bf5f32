use recttt_core::data::{
    corrupt_dataset, gen_dataset, CorruptionKind, CorruptionSpec, RenderConfig,
};
use recttt_core::Rng;

#[test]
fn mean_pixel_within_colour_mixture_bounds() {
    // Foreground and background channels are drawn from the same symmetric
    // range, so the pixel mean concentrates at its midpoint.
    let cfg = RenderConfig {
        image_size: 16,
        ..Default::default()
    };
    let d = gen_dataset(&mut Rng::new(42), 10_000, &cfg).unwrap();
    let (sum, n) = d.iter().fold((0.0f64, 0usize), |(s, n), x| {
        (
            s + x.image.data().iter().map(|&v| v as f64).sum::<f64>(),
            n + x.image.len(),
        )
    });
    let mean = sum / n as f64;
    let mid = 0.5 * (cfg.color.0 + cfg.color.1);
    assert!((mean - mid).abs() < 0.01, "mean {mean}");
    assert!(d
        .iter()
        .all(|s| s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
}

#[test]
fn corruption_is_reproducible_from_seeds() {
    let cfg = RenderConfig::default();
    let d = gen_dataset(&mut Rng::new(1), 20, &cfg).unwrap();
    for kind in CorruptionKind::ALL {
        let spec = CorruptionSpec::new(kind, 5).unwrap();
        let a = corrupt_dataset(&d, spec, 9).unwrap();
        let b = corrupt_dataset(&d, spec, 9).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.image.bitwise_eq(&y.image)));
    }
}
