use noiseproxy::sensor::PixelDistribution;
use noiseproxy::stats::{mean, normal_cdf, variance};
use noiseproxy::{build_sensor, Components, SensorSpec};

fn spec(h: usize, w: usize) -> SensorSpec {
    SensorSpec {
        height: h,
        width: w,
        ..SensorSpec::default()
    }
}

fn frame_f64(f: &noiseproxy::RawFrame) -> Vec<f64> {
    f.data.iter().map(|&v| v as f64).collect()
}

#[test]
fn pixel_mean_converges_to_black_plus_shading() {
    let sensor = build_sensor(&spec(16, 16), 3).unwrap();
    let iso = 1600;
    let t = sensor.truth(iso).unwrap();
    let p = 5 * 16 + 7;
    let values: Vec<f64> = (0..10_000)
        .map(|k| sensor.capture_dark_frame(iso, k).unwrap().data[p] as f64)
        .collect();
    let expected = sensor.spec.black_level + sensor.fpn_k.data[p] * iso as f64 + sensor.fpn_b.data[p] + t.ble;
    let sigma_total = (t.pixel.variance() + t.sigma_row.powi(2) + t.sigma_col.powi(2)).sqrt();
    assert!(
        (mean(&values) - expected).abs() < 4.0 * sigma_total / 100.0,
        "{} vs {expected}",
        mean(&values)
    );
}

#[test]
fn row_mean_variance_matches_decomposition() {
    let sensor = build_sensor(&spec(128, 128), 4).unwrap();
    let iso = 3200;
    let t = sensor.truth(iso).unwrap();
    let comps = Components { frame: false, ..Components::ALL };
    let w = 128.0;
    let observed: Vec<f64> = (0..100)
        .map(|k| {
            let f = sensor.capture_with(iso, k, comps).unwrap();
            let rows: Vec<f64> = f.data.chunks(128).map(|r| r.iter().map(|&v| v as f64).sum::<f64>() / w).collect();
            variance(&rows)
        })
        .collect();
    let expected = t.sigma_row.powi(2) + (t.pixel.variance() + 1.0 / 12.0) / w;
    assert!((mean(&observed) / expected - 1.0).abs() < 0.1, "{} vs {expected}", mean(&observed));
}

#[test]
fn flat_frame_mean_and_shot_variance() {
    let sensor = build_sensor(&spec(256, 256), 5).unwrap();
    let iso = 1600;
    let k = sensor.truth(iso).unwrap().gain;
    let irr = 1000.0;
    let f1 = frame_f64(&sensor.capture_flat_frame(iso, irr, 1).unwrap());
    let f2 = frame_f64(&sensor.capture_flat_frame(iso, irr, 2).unwrap());
    let d1 = frame_f64(&sensor.capture_dark_frame(iso, 3).unwrap());
    let d2 = frame_f64(&sensor.capture_dark_frame(iso, 4).unwrap());
    let signal = (mean(&f1) + mean(&f2) - mean(&d1) - mean(&d2)) / 2.0;
    assert!((signal / (k * irr) - 1.0).abs() < 0.05, "{signal}");
    let diff = |a: &[f64], b: &[f64]| variance(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>()) / 2.0;
    let shot_var = diff(&f1, &f2) - diff(&d1, &d2);
    assert!((shot_var / (k * k * irr) - 1.0).abs() < 0.05, "{shot_var}");
}

#[test]
fn doubling_irradiance_doubles_signal() {
    let sensor = build_sensor(&spec(512, 512), 6).unwrap();
    let iso = 800;
    let dark = mean(&frame_f64(&sensor.capture_dark_frame(iso, 1).unwrap()));
    let s1 = mean(&frame_f64(&sensor.capture_flat_frame(iso, 500.0, 2).unwrap())) - dark;
    let s2 = mean(&frame_f64(&sensor.capture_flat_frame(iso, 1000.0, 3).unwrap())) - dark;
    assert!((s2 / s1 - 2.0).abs() < 0.04, "{s1} {s2}");
}

#[test]
fn zero_irradiance_flat_matches_dark_in_distribution() {
    let sensor = build_sensor(&spec(128, 128), 7).unwrap();
    let flat = frame_f64(&sensor.capture_flat_frame(1600, 0.0, 9).unwrap());
    let dark = frame_f64(&sensor.capture_dark_frame(1600, 9).unwrap());
    assert_eq!(flat, dark);
}

#[test]
fn true_cdf_limits_and_gaussian_value() {
    let sensor = build_sensor(&SensorSpec::default(), 1).unwrap();
    for iso in sensor.isos() {
        assert!(sensor.true_pixel_cdf(iso, -1e9).unwrap() < 1e-300);
        assert!((sensor.true_pixel_cdf(iso, 0.0).unwrap() - 0.5).abs() < 1e-15);
    }
    let sigma = 2.0;
    let mut s = SensorSpec::default();
    s.isos[1].pixel = Some(PixelDistribution::Gaussian { mean: 0.0, sigma });
    let sensor = build_sensor(&s, 1).unwrap();
    // Simpson integration of the density up to one sigma.
    let n = 20_000;
    let (a, b) = (-12.0 * sigma, sigma);
    let h = (b - a) / n as f64;
    let pdf = |x: f64| (-(x / sigma).powi(2) / 2.0).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let integral = (0..=n)
        .map(|i| {
            let wgt = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            wgt * pdf(a + i as f64 * h)
        })
        .sum::<f64>()
        * h
        / 3.0;
    let got = sensor.true_pixel_cdf(1600, sigma).unwrap();
    assert!((got - integral).abs() < 1e-10);
    assert!((got - normal_cdf(1.0)).abs() < 1e-12);
    assert!((got - 0.8413).abs() < 1e-4);
}
