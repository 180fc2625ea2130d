mod common;

use noiseproxy::eval::qq_r2;
use noiseproxy::pnd::{decouple, high_bit_reconstruct, remove_frame_noise, ReconstructOptions};
use noiseproxy::{build_sensor, SensorSpec};

#[test]
fn residual_temporal_means_are_small() {
    let sensor = build_sensor(&SensorSpec::default(), 21).unwrap();
    let sets = common::dark_sets(&sensor, 100, 1);
    let (frame, _) = common::calibrate(&sets);
    for set in &sets {
        let t = sensor.truth(set.iso()).unwrap();
        let sigma_total = (t.pixel.variance() + t.sigma_row.powi(2) + t.sigma_col.powi(2)).sqrt();
        let n = set.frames()[0].data.len();
        let mut sums = vec![0.0; n];
        for f in set.frames() {
            let r = remove_frame_noise(f, &frame).unwrap();
            sums.iter_mut().zip(&r.data).for_each(|(s, v)| *s += v);
        }
        let rms = (sums.iter().map(|s| (s / set.len() as f64).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!(rms < 3.0 * sigma_total / 10.0, "iso {}: {rms} vs {sigma_total}", set.iso());
    }
}

#[test]
fn reconstruction_leaves_few_duplicates() {
    let sensor = build_sensor(&SensorSpec::default(), 2).unwrap();
    let raw = sensor.sample_pixel_noise(800, 1_000_000, 3).unwrap();
    let lattice: Vec<f64> = raw.iter().map(|v| v.round_ties_even()).collect();
    let before = noiseproxy::pnd::PixelNoiseSamples { iso: 800, samples: lattice.clone(), quant_step: 1.0 };
    assert!(before.duplicate_fraction() > 0.9);
    let fractions: Vec<f64> = (0..3)
        .map(|s| {
            high_bit_reconstruct(800, &lattice, 1.0, s, ReconstructOptions::default())
                .unwrap()
                .duplicate_fraction()
        })
        .collect();
    assert!(noiseproxy::stats::mean(&fractions) < 1e-3, "{fractions:?}");
}

#[test]
fn decoupled_pools_match_truth_and_stages_shrink() {
    let sensor = build_sensor(&SensorSpec::default(), 8).unwrap();
    let sets = common::dark_sets(&sensor, 50, 2);
    let (frame, band) = common::calibrate(&sets);
    let out = decouple(&sets, &frame, &band, 4).unwrap();
    for (iso, pool) in &out.pools {
        let truth = sensor.sample_pixel_noise(*iso, 1_000_000, 6).unwrap();
        let r2 = qq_r2(&pool.samples, &truth, 1000).unwrap().unwrap();
        assert!(r2 > 0.99, "iso {iso}: {r2}");
        let st = out.stage_std[iso];
        assert!(st.raw > st.frame_removed && st.frame_removed > st.band_removed, "{st:?}");
    }
}

/// With the reference budget of five darks, the per-pixel shading fit adds
/// more variance at the lowest ISO than the FPN it removes.
#[test]
fn five_darks_shading_error_dominates_at_low_iso() {
    let sensor = build_sensor(&SensorSpec::default(), 8).unwrap();
    let sets = common::dark_sets(&sensor, 5, 2);
    let (frame, band) = common::calibrate(&sets);
    let out = decouple(&sets, &frame, &band, 4).unwrap();
    let st = out.stage_std[&800];
    assert!(st.frame_removed > st.raw, "{st:?}");
}
