#![allow(dead_code)]

use std::collections::BTreeMap;

use noiseproxy::frame::FrameSet;
use noiseproxy::pnd::{calibrate_band_noise, calibrate_frame_noise, remove_frame_noise, BandNoiseModel, FrameNoiseModel};
use noiseproxy::synth::{CalibrationProfile, QuantSpec};
use noiseproxy::{GroundTruthSensor, Iso};

pub fn dark_sets(sensor: &GroundTruthSensor, per_iso: usize, seed: u64) -> Vec<FrameSet> {
    sensor
        .isos()
        .into_iter()
        .map(|iso| {
            FrameSet::new(
                (0..per_iso as u64)
                    .map(|k| sensor.capture_dark_frame(iso, seed * 1_000_003 + 10_000 * iso as u64 + k).unwrap())
                    .collect(),
            )
            .unwrap()
        })
        .collect()
}

pub fn calibrate(sets: &[FrameSet]) -> (FrameNoiseModel, BandNoiseModel) {
    let frame = calibrate_frame_noise(sets).unwrap();
    let band = BandNoiseModel::from_entries(sets.iter().map(|s| {
        let r: Vec<_> = s.frames().iter().map(|f| remove_frame_noise(f, &frame).unwrap()).collect();
        calibrate_band_noise(&r, s.iso()).unwrap()
    }));
    (frame, band)
}

pub fn true_gains(sensor: &GroundTruthSensor) -> BTreeMap<Iso, f64> {
    sensor.per_iso.iter().map(|(&i, t)| (i, t.gain)).collect()
}

pub fn quant(sensor: &GroundTruthSensor) -> QuantSpec {
    QuantSpec {
        bit_depth: sensor.spec.bit_depth,
        black_level: sensor.spec.black_level,
        white_level: sensor.white_level(),
    }
}

pub fn profile(sensor: &GroundTruthSensor, sets: &[FrameSet]) -> CalibrationProfile {
    let (frame, band) = calibrate(sets);
    CalibrationProfile::new(frame, band, true_gains(sensor), quant(sensor)).unwrap()
}

/// Noise-floor-corrected spatial variance of per-pixel temporal means:
/// the variance of the means minus the average temporal variance / T.
pub fn pattern_energy(frames: &[Vec<f64>]) -> f64 {
    let t = frames.len() as f64;
    let n = frames[0].len();
    let mut means = vec![0.0; n];
    let mut tvar = 0.0;
    for p in 0..n {
        let m = frames.iter().map(|f| f[p]).sum::<f64>() / t;
        means[p] = m;
        tvar += frames.iter().map(|f| (f[p] - m).powi(2)).sum::<f64>() / (t - 1.0);
    }
    tvar /= n as f64;
    noiseproxy::stats::variance(&means) - tvar / t
}
