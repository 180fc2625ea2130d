//! Calibrates a profile, fits a quick proxy and synthesizes a low-light /
//! clean training pair from a smooth clean image.

use std::collections::BTreeMap;

use noiseproxy::pnd::{calibrate_band_noise, calibrate_frame_noise, decouple, remove_frame_noise, BandNoiseModel};
use noiseproxy::stats::{mean, std_dev, variance};
use noiseproxy::synth::{synth_pair, CalibrationProfile, QuantSpec, SynthOptions};
use noiseproxy::trainer::{train, TrainConfig};
use noiseproxy::{build_sensor, FrameSet, Iso, ProxyModel, RawFrame, SensorSpec};

fn main() -> noiseproxy::Result<()> {
    let sensor = build_sensor(&SensorSpec::default(), 8)?;
    let sets: Vec<FrameSet> = sensor
        .isos()
        .into_iter()
        .map(|iso| {
            FrameSet::new(
                (0..20)
                    .map(|k| sensor.capture_dark_frame(iso, 100 * iso as u64 + k))
                    .collect::<noiseproxy::Result<Vec<_>>>()?,
            )
        })
        .collect::<noiseproxy::Result<_>>()?;
    let frame = calibrate_frame_noise(&sets)?;
    let mut bands = Vec::new();
    for set in &sets {
        let r = set.frames().iter().map(|f| remove_frame_noise(f, &frame)).collect::<noiseproxy::Result<Vec<_>>>()?;
        bands.push(calibrate_band_noise(&r, set.iso())?);
    }
    let band = BandNoiseModel::from_entries(bands);
    let pools = decouple(&sets, &frame, &band, 1)?.pools;
    let gain: BTreeMap<Iso, f64> = sensor.per_iso.iter().map(|(&i, t)| (i, t.gain)).collect();
    let quant = QuantSpec {
        bit_depth: sensor.spec.bit_depth,
        black_level: sensor.spec.black_level,
        white_level: sensor.white_level(),
    };
    let profile = CalibrationProfile::new(frame, band, gain.clone(), quant)?;

    let var: BTreeMap<Iso, f64> = pools.iter().map(|(&i, p)| (i, variance(&p.samples))).collect();
    let init = ProxyModel::init_calibrated(&sensor.isos(), &gain, &var, 2)?;
    let cfg = TrainConfig { steps_per_iso: 30, patch: 96, queries_per_step: 10_000, seed: 3, ..TrainConfig::default() };
    let (model, _) = train(&init, &pools, &cfg)?;

    // A horizontal ramp from 0 to 8000 DN above black.
    let (h, w) = sensor.shape();
    let clean = RawFrame {
        height: h,
        width: w,
        iso: 1600,
        black_level: 0.0,
        white_level: quant.white_level,
        bit_depth: quant.bit_depth,
        quantized: false,
        data: (0..h * w).map(|i| (8000.0 * (i % w) as f64 / (w - 1) as f64) as f32).collect(),
    };
    for ratio in [1.0, 10.0, 100.0] {
        let (noisy, _) = synth_pair(&clean, ratio, 3200, &model, &profile, 4, SynthOptions::default())?;
        let dark_col: Vec<f64> = noisy.data.chunks(w).map(|r| r[0] as f64 - quant.black_level).collect();
        let bright_col: Vec<f64> = noisy.data.chunks(w).map(|r| r[w - 1] as f64 - quant.black_level).collect();
        println!(
            "ratio {ratio:>5}: dark column mean {:7.2} std {:5.2}; bright column mean {:8.2} std {:6.2}",
            mean(&dark_col),
            std_dev(&dark_col),
            mean(&bright_col),
            std_dev(&bright_col)
        );
    }
    Ok(())
}
