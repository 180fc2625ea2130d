//! Evaluates the CDF/quantile distribution loss between two sample sets and
//! shows how it reacts to a shift of the generated samples.

use noiseproxy::ddl::{ddl_loss, sample_queries, QueryConfig, SortedSamples};
use noiseproxy::stats::std_dev;
use noiseproxy::{build_sensor, SensorSpec};

fn main() -> noiseproxy::Result<()> {
    let sensor = build_sensor(&SensorSpec::default(), 4)?;
    let real = sensor.sample_pixel_noise(1600, 50_000, 1)?;
    let target = SortedSamples::new(&real)?;
    println!(
        "target: F(0) = {:.4}, median = {:.4}, q(0.99) = {:.3}",
        target.ecdf_query(0.0),
        target.quantile_query(0.5)?,
        target.quantile_query(0.99)?
    );
    let queries = sample_queries(&QueryConfig::new(10_000, std_dev(&real), real.len()), 2)?;
    let fresh = sensor.sample_pixel_noise(1600, 4096, 3)?;
    for shift in [0.0, 0.25, 0.5, 1.0, 2.0] {
        let out: Vec<f64> = fresh.iter().map(|v| v + shift).collect();
        let loss = ddl_loss(&out, &target, &queries)?;
        let sum_grad = loss.grad.iter().sum::<f64>();
        println!(
            "shift {shift:4.2}: L_cdf {:.5} L_quantile {:.5} total {:.5}, sum of dL/dout {sum_grad:+.4}",
            loss.cdf, loss.quantile, loss.total
        );
    }
    Ok(())
}
