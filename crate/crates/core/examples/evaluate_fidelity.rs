//! Compares two sample sets with the histogram KLD, Q-Q R² and normal
//! probability plot, and writes the CSV report. The output directory is the
//! first argument, or a fresh directory under the system temp dir.

use std::path::PathBuf;

use noiseproxy::eval::{build_report, emit_report, gaussian_probplot_r2, summary_row, SUMMARY_HEADER};
use noiseproxy::rng::stream;
use noiseproxy::stats::{mean, std_dev};
use noiseproxy::{build_sensor, SensorSpec};
use rand::Rng;
use rand_distr::StandardNormal;

fn main() -> noiseproxy::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("noiseproxy-eval-example"));
    let sensor = build_sensor(&SensorSpec::default(), 9)?;
    let iso = 3200;
    let truth = sensor.sample_pixel_noise(iso, 500_000, 1)?;
    let fresh = sensor.sample_pixel_noise(iso, 500_000, 2)?;
    let (m, s) = (mean(&truth), std_dev(&truth));
    let mut rng = stream(3, "gaussian");
    let gaussian: Vec<f64> = (0..500_000).map(|_| m + s * rng.sample::<f64, _>(StandardNormal)).collect();

    println!("{:>9} {SUMMARY_HEADER}", "source");
    for (name, samples) in [("fresh", &fresh), ("gaussian", &gaussian)] {
        let report = build_report(samples, &truth)?;
        println!("{name:>9} {}", summary_row(&report));
        emit_report(&report, &out.join(name))?;
    }
    println!("normal probplot R² of the true noise: {:.4}", gaussian_probplot_r2(&truth).unwrap_or(f64::NAN));
    println!("reports written under {}", out.display());
    Ok(())
}
