//! Splits dark frames into frame-wise, band-wise and pixel-wise parts and
//! compares the recovered pixel pools with the sensor's true distribution.

use noiseproxy::eval::qq_r2;
use noiseproxy::pnd::{calibrate_band_noise, calibrate_frame_noise, decouple, remove_frame_noise, BandNoiseModel};
use noiseproxy::{build_sensor, FrameSet, SensorSpec};

fn main() -> noiseproxy::Result<()> {
    let sensor = build_sensor(&SensorSpec::default(), 3)?;
    let sets: Vec<FrameSet> = sensor
        .isos()
        .into_iter()
        .map(|iso| {
            FrameSet::new(
                (0..50)
                    .map(|k| sensor.capture_dark_frame(iso, 7000 * iso as u64 + k))
                    .collect::<noiseproxy::Result<Vec<_>>>()?,
            )
        })
        .collect::<noiseproxy::Result<_>>()?;
    let frame = calibrate_frame_noise(&sets)?;
    let mut bands = Vec::new();
    for set in &sets {
        let r = set
            .frames()
            .iter()
            .map(|f| remove_frame_noise(f, &frame))
            .collect::<noiseproxy::Result<Vec<_>>>()?;
        bands.push(calibrate_band_noise(&r, set.iso())?);
    }
    let band = BandNoiseModel::from_entries(bands);
    let out = decouple(&sets, &frame, &band, 4)?;
    println!("iso    raw   frame-  band-   recon  dup%    qq_r2");
    for (iso, st) in &out.stage_std {
        let pool = &out.pools[iso];
        let truth = sensor.sample_pixel_noise(*iso, pool.samples.len(), 5)?;
        let r2 = qq_r2(&pool.samples, &truth, 1000)?.unwrap_or(f64::NAN);
        println!(
            "{iso:>4} {:7.3} {:7.3} {:7.3} {:7.3} {:5.3} {r2:8.5}",
            st.raw,
            st.frame_removed,
            st.band_removed,
            st.reconstructed,
            100.0 * pool.duplicate_fraction()
        );
    }
    Ok(())
}
