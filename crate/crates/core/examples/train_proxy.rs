//! Trains the dual-branch proxy on true pixel-noise pools and reports the
//! fit before and after. Pass the step count as the first argument.

use std::collections::BTreeMap;

use noiseproxy::eval::{kld_default, qq_r2};
use noiseproxy::pnd::PixelNoiseSamples;
use noiseproxy::stats::variance;
use noiseproxy::trainer::{train, TrainConfig};
use noiseproxy::{build_sensor, Iso, ProxyModel, SensorSpec};

fn main() -> noiseproxy::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let sensor = build_sensor(&SensorSpec::default(), 5)?;
    let isos = sensor.isos();
    let mut pools = BTreeMap::new();
    for &iso in &isos {
        let samples = sensor.sample_pixel_noise(iso, 500_000, iso as u64)?;
        pools.insert(iso, PixelNoiseSamples { iso, samples, quant_step: 0.0 });
    }
    let gains: BTreeMap<Iso, f64> = sensor.per_iso.iter().map(|(&i, t)| (i, t.gain)).collect();
    let var: BTreeMap<Iso, f64> = pools.iter().map(|(&i, p)| (i, variance(&p.samples))).collect();
    let init = ProxyModel::init_calibrated(&isos, &gains, &var, 6)?;
    let cfg = TrainConfig {
        steps_per_iso: steps,
        patch: 128,
        queries_per_step: 20_000,
        seed: 7,
        ..TrainConfig::default()
    };
    let (model, log) = train(&init, &pools, &cfg)?;
    for &iso in &isos {
        let truth = sensor.sample_pixel_noise(iso, 200_000, 100 + iso as u64)?;
        let before = init.sample(200_000, iso, 8)?;
        let after = model.sample(200_000, iso, 8)?;
        let last = log.for_iso(iso).last().map(|e| e.l_cdf + e.l_quantile).unwrap_or(f64::NAN);
        println!(
            "iso {iso:>4}: kld {:.4} -> {:.4}, qq_r2 {:.4} -> {:.4}, gain {:.3}, final loss {last:.4}",
            kld_default(&before, &truth)?,
            kld_default(&after, &truth)?,
            qq_r2(&before, &truth, 1000)?.unwrap_or(f64::NAN),
            qq_r2(&after, &truth, 1000)?.unwrap_or(f64::NAN),
            model.gain(iso)?,
        );
    }
    Ok(())
}
