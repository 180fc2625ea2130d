//! Builds the default virtual sensor, captures dark and flat frames and
//! prints their statistics against the ground truth.

use noiseproxy::stats::{mean, std_dev};
use noiseproxy::{build_sensor, SensorSpec};

fn main() -> noiseproxy::Result<()> {
    let sensor = build_sensor(&SensorSpec::default(), 1)?;
    let (h, w) = sensor.shape();
    println!("sensor {h}x{w}, {}-bit, black level {}", sensor.spec.bit_depth, sensor.spec.black_level);
    for iso in sensor.isos() {
        let t = sensor.truth(iso)?;
        let dark: Vec<f64> = sensor.capture_dark_frame(iso, 10).unwrap().data.iter().map(|&v| v as f64).collect();
        let flat: Vec<f64> = sensor.capture_flat_frame(iso, 500.0, 11)?.data.iter().map(|&v| v as f64).collect();
        println!(
            "iso {iso:>4}: K {:.3} DN/e, dark mean {:.2} std {:.2}, flat(500 e) mean {:.1}, pixel std {:.3}, P(n <= 0) {:.4}",
            t.gain,
            mean(&dark),
            std_dev(&dark),
            mean(&flat),
            t.pixel.std_dev(),
            sensor.true_pixel_cdf(iso, 0.0)?,
        );
    }
    Ok(())
}
