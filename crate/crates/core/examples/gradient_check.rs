//! Checks reverse-mode parameter gradients of the distribution loss against
//! central finite differences on a 32x32 field.

use noiseproxy::trainer::{grad_check, GradCheckProblem, GRAD_CHECK_EPS};
use noiseproxy::{build_sensor, ProxyModel, SensorSpec};

fn main() -> noiseproxy::Result<()> {
    let sensor = build_sensor(&SensorSpec::default(), 10)?;
    let gains = sensor.per_iso.iter().map(|(&i, t)| (i, t.gain)).collect();
    let model = ProxyModel::init(&sensor.isos(), &gains, 11)?;
    for iso in [800, 6400] {
        let target = sensor.sample_pixel_noise(iso, 100_000, 12)?;
        let problem = GradCheckProblem::new(&target, iso, 32, 256, 13)?;
        let start = std::time::Instant::now();
        let report = grad_check(&model, &problem, GRAD_CHECK_EPS * problem.target_scale())?;
        println!(
            "iso {iso}: {} of {} parameters checked, max relative error {:.2e} (param {}), {:.1} s",
            report.checked,
            model.param_count(),
            report.max_rel_error,
            report.worst,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
