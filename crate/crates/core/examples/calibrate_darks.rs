//! Calibrates frame-wise and band-wise noise from dark frames, and the system
//! gain from pairs of flat frames.

use noiseproxy::pnd::{calibrate_band_noise, calibrate_frame_noise, photon_transfer_gain, remove_frame_noise};
use noiseproxy::{build_sensor, FrameSet, SensorSpec};

fn main() -> noiseproxy::Result<()> {
    let sensor = build_sensor(&SensorSpec::default(), 2)?;
    let darks_per_iso = 20;
    let sets: Vec<FrameSet> = sensor
        .isos()
        .into_iter()
        .map(|iso| {
            let frames = (0..darks_per_iso)
                .map(|k| sensor.capture_dark_frame(iso, 1000 * iso as u64 + k))
                .collect::<noiseproxy::Result<Vec<_>>>()?;
            FrameSet::new(frames)
        })
        .collect::<noiseproxy::Result<_>>()?;

    let frame = calibrate_frame_noise(&sets)?;
    let err = |a: &[f64], b: &[f64]| {
        (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
    };
    println!(
        "fpn_k rmse {:.2e}, fpn_b rmse {:.3}, fit residual rms {:.3}",
        err(&frame.fpn_k.data, &sensor.fpn_k.data),
        err(&frame.fpn_b.data, &sensor.fpn_b.data),
        frame.fit_residual_rms
    );

    for set in &sets {
        let iso = set.iso();
        let residuals = set
            .frames()
            .iter()
            .map(|f| remove_frame_noise(f, &frame))
            .collect::<noiseproxy::Result<Vec<_>>>()?;
        let band = calibrate_band_noise(&residuals, iso)?;
        let t = sensor.truth(iso)?;
        let flats = [200.0, 800.0, 3200.0]
            .iter()
            .enumerate()
            .map(|(l, &irr)| {
                let pair = (0..2)
                    .map(|k| sensor.capture_flat_frame(iso, irr, 50_000 + 10 * l as u64 + k))
                    .collect::<noiseproxy::Result<Vec<_>>>()?;
                FrameSet::new(pair)
            })
            .collect::<noiseproxy::Result<Vec<_>>>()?;
        let gain = photon_transfer_gain(&flats)?;
        println!(
            "iso {iso:>4}: ble {:+.3} (true {:+.3}), sigma_row {:.3} (true {:.3}), sigma_col {:.3} (true {:.3}), K {:.3} (true {:.3})",
            frame.ble[&iso], t.ble, band.sigma_row, t.sigma_row, band.sigma_col, t.sigma_col, gain.gain, t.gain
        );
    }
    Ok(())
}
