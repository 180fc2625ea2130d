//! Virtual sensor with known noise parameters.
//!
//! The sensor produces dark and flat frames from a ground truth that the
//! calibration and training stages can be scored against. Dark frames follow
//!
//! ```text
//! D = clip(round(black + fpn_k * iso + fpn_b + ble(iso) + row + col + pixel))
//! ```
//!
//! and flat frames add `K(iso) * Poisson(I)` in front of the dark terms.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{read_toml, write_toml, Iso, Plane, RawFrame};
use crate::rng::{stream, StreamRng};
use crate::stats::normal_cdf;

/// Parametric family of the pixel-wise noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum PixelDistribution {
    Gaussian { mean: f64, sigma: f64 },
    /// Zero-or-more Gaussian components; weights sum to one.
    Mixture { components: Vec<MixtureComponent> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: f64,
    pub sigma: f64,
}

impl PixelDistribution {
    fn components(&self) -> Vec<MixtureComponent> {
        match self {
            PixelDistribution::Gaussian { mean, sigma } => vec![MixtureComponent {
                weight: 1.0,
                mean: *mean,
                sigma: *sigma,
            }],
            PixelDistribution::Mixture { components } => components.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let comps = self.components();
        if comps.is_empty() {
            return Err(Error::InvalidArgument("mixture without components".into()));
        }
        let total: f64 = comps.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 || comps.iter().any(|c| c.weight < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "mixture weights must be non-negative and sum to 1, got {total}"
            )));
        }
        if comps.iter().any(|c| !(c.sigma >= 0.0) || !c.mean.is_finite()) {
            return Err(Error::InvalidArgument("mixture sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn cdf(&self, q: f64) -> f64 {
        self.components()
            .iter()
            .map(|c| {
                let p = if c.sigma > 0.0 {
                    normal_cdf((q - c.mean) / c.sigma)
                } else if q >= c.mean {
                    1.0
                } else {
                    0.0
                };
                c.weight * p
            })
            .sum()
    }

    pub fn mean(&self) -> f64 {
        self.components().iter().map(|c| c.weight * c.mean).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.components()
            .iter()
            .map(|c| c.weight * (c.sigma * c.sigma + (c.mean - m).powi(2)))
            .sum()
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self {
            PixelDistribution::Gaussian { mean, sigma } => {
                mean + sigma * rng.sample::<f64, _>(StandardNormal)
            }
            PixelDistribution::Mixture { components } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = components.last().expect("validated non-empty");
                for c in components {
                    acc += c.weight;
                    if u < acc {
                        pick = c;
                        break;
                    }
                }
                pick.mean + pick.sigma * rng.sample::<f64, _>(StandardNormal)
            }
        }
    }

    pub fn sample_n(&self, n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

/// Pixel-wise noise of the default sensor: a pre-amplifier component in
/// electrons (core Gaussian plus a wide tail component) scaled by the gain,
/// plus a post-amplifier Gaussian in DN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelNoiseSpec {
    pub read_noise_e: f64,
    pub tail_weight: f64,
    pub tail_scale: f64,
    pub post_gain_sigma: f64,
}

impl PixelNoiseSpec {
    pub fn distribution(&self, gain: f64) -> PixelDistribution {
        let comp = |w: f64, s_e: f64| MixtureComponent {
            weight: w,
            mean: 0.0,
            sigma: ((gain * s_e).powi(2) + self.post_gain_sigma.powi(2)).sqrt(),
        };
        PixelDistribution::Mixture {
            components: vec![
                comp(1.0 - self.tail_weight, self.read_noise_e),
                comp(self.tail_weight, self.read_noise_e * self.tail_scale),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsoSpec {
    pub iso: Iso,
    pub ble: f64,
    pub sigma_row: f64,
    pub sigma_col: f64,
    /// Replaces the pixel distribution derived from [`PixelNoiseSpec`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel: Option<PixelDistribution>,
}

/// Parameter record the virtual sensor is built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub height: usize,
    pub width: usize,
    pub bit_depth: u8,
    pub black_level: f64,
    /// System gain per ISO unit: `K(iso) = gain_per_iso * iso`.
    pub gain_per_iso: f64,
    pub fpn_k_mean: f64,
    pub fpn_k_std: f64,
    pub fpn_b_mean: f64,
    pub fpn_b_std: f64,
    pub pixel: PixelNoiseSpec,
    pub isos: Vec<IsoSpec>,
}

impl Default for SensorSpec {
    fn default() -> Self {
        let iso = |iso, ble, sigma_row, sigma_col| IsoSpec {
            iso,
            ble,
            sigma_row,
            sigma_col,
            pixel: None,
        };
        Self {
            height: 128,
            width: 128,
            bit_depth: 14,
            black_level: 512.0,
            gain_per_iso: 1.0 / 1600.0,
            fpn_k_mean: 0.0,
            fpn_k_std: 2e-4,
            fpn_b_mean: 0.0,
            fpn_b_std: 1.0,
            pixel: PixelNoiseSpec {
                read_noise_e: 3.0,
                tail_weight: 0.05,
                tail_scale: 5.0,
                post_gain_sigma: 1.5,
            },
            isos: vec![
                iso(800, 0.4, 0.4, 0.25),
                iso(1600, -0.3, 0.7, 0.45),
                iso(3200, 0.6, 1.3, 0.8),
                iso(6400, -0.5, 2.5, 1.5),
            ],
        }
    }
}

/// Ground truth for one ISO.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsoTruth {
    pub iso: Iso,
    pub gain: f64,
    pub ble: f64,
    pub sigma_row: f64,
    pub sigma_col: f64,
    pub pixel: PixelDistribution,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthSensor {
    pub spec: SensorSpec,
    pub seed: u64,
    pub fpn_k: Plane,
    pub fpn_b: Plane,
    pub per_iso: BTreeMap<Iso, IsoTruth>,
}

/// Which noise components a capture includes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Components {
    pub frame: bool,
    pub row: bool,
    pub col: bool,
    pub pixel: bool,
}

impl Components {
    pub const ALL: Components = Components {
        frame: true,
        row: true,
        col: true,
        pixel: true,
    };
    pub const NONE: Components = Components {
        frame: false,
        row: false,
        col: false,
        pixel: false,
    };
}

pub fn build_sensor(spec: &SensorSpec, seed: u64) -> Result<GroundTruthSensor> {
    if spec.height < 16 || spec.width < 16 {
        return Err(Error::InvalidArgument(format!(
            "sensor must be at least 16x16, got {}x{}",
            spec.height, spec.width
        )));
    }
    if spec.isos.len() < 2 {
        return Err(Error::Rank(format!(
            "need at least 2 ISO values, got {}",
            spec.isos.len()
        )));
    }
    if !(spec.gain_per_iso > 0.0) {
        return Err(Error::InvalidArgument("gain_per_iso must be positive".into()));
    }
    if spec.black_level < 0.0 || spec.black_level >= ((1u64 << spec.bit_depth) - 1) as f64 {
        return Err(Error::InvalidArgument("black level outside code range".into()));
    }
    let mut per_iso = BTreeMap::new();
    for s in &spec.isos {
        if s.sigma_row < 0.0 || s.sigma_col < 0.0 {
            return Err(Error::InvalidArgument(format!("negative sigma at iso {}", s.iso)));
        }
        let gain = spec.gain_per_iso * s.iso as f64;
        let pixel = s
            .pixel
            .clone()
            .unwrap_or_else(|| spec.pixel.distribution(gain));
        pixel.validate()?;
        let prev = per_iso.insert(
            s.iso,
            IsoTruth {
                iso: s.iso,
                gain,
                ble: s.ble,
                sigma_row: s.sigma_row,
                sigma_col: s.sigma_col,
                pixel,
            },
        );
        if prev.is_some() {
            return Err(Error::InvalidArgument(format!("duplicate iso {}", s.iso)));
        }
    }
    let n = spec.height * spec.width;
    let draw_map = |label: &str, mean: f64, std: f64| -> Plane {
        let mut rng = stream(seed, label);
        let data = (0..n)
            .map(|_| mean + std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Plane {
            height: spec.height,
            width: spec.width,
            data,
        }
    };
    Ok(GroundTruthSensor {
        spec: spec.clone(),
        seed,
        fpn_k: draw_map("frame/fpn_k", spec.fpn_k_mean, spec.fpn_k_std),
        fpn_b: draw_map("frame/fpn_b", spec.fpn_b_mean, spec.fpn_b_std),
        per_iso,
    })
}

impl GroundTruthSensor {
    pub fn isos(&self) -> Vec<Iso> {
        self.per_iso.keys().copied().collect()
    }

    pub fn truth(&self, iso: Iso) -> Result<&IsoTruth> {
        self.per_iso.get(&iso).ok_or(Error::UnknownIso(iso))
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.spec.height, self.spec.width)
    }

    pub fn white_level(&self) -> f64 {
        ((1u64 << self.spec.bit_depth) - 1) as f64
    }

    /// True dark shading `fpn_k * iso + fpn_b + ble(iso)`.
    pub fn dark_shading(&self, iso: Iso) -> Result<Plane> {
        let t = self.truth(iso)?;
        let data = self
            .fpn_k
            .data
            .iter()
            .zip(&self.fpn_b.data)
            .map(|(k, b)| k * iso as f64 + b + t.ble)
            .collect();
        Ok(Plane {
            height: self.spec.height,
            width: self.spec.width,
            data,
        })
    }

    /// Pre-quantization dark signal above black level with the selected
    /// components. Each component draws from its own labelled stream.
    pub fn dark_signal(&self, iso: Iso, seed: u64, components: Components) -> Result<Plane> {
        let t = self.truth(iso)?;
        let (h, w) = self.shape();
        let mut out = if components.frame {
            self.dark_shading(iso)?
        } else {
            Plane::zeros(h, w)
        };
        if components.row {
            let mut rng = stream(seed, "row");
            for r in 0..h {
                let v = t.sigma_row * rng.sample::<f64, _>(StandardNormal);
                out.data[r * w..(r + 1) * w].iter_mut().for_each(|x| *x += v);
            }
        }
        if components.col {
            let mut rng = stream(seed, "col");
            let cols: Vec<f64> = (0..w)
                .map(|_| t.sigma_col * rng.sample::<f64, _>(StandardNormal))
                .collect();
            for row in out.data.chunks_exact_mut(w) {
                row.iter_mut().zip(&cols).for_each(|(x, c)| *x += c);
            }
        }
        if components.pixel {
            let mut rng = stream(seed, "pixel");
            out.data.iter_mut().for_each(|x| *x += t.pixel.sample(&mut rng));
        }
        Ok(out)
    }

    pub fn quantize(&self, iso: Iso, signal: &Plane) -> RawFrame {
        let max = self.white_level();
        let black = self.spec.black_level;
        RawFrame {
            height: signal.height,
            width: signal.width,
            iso,
            black_level: black,
            white_level: max,
            bit_depth: self.spec.bit_depth,
            quantized: true,
            data: signal
                .data
                .iter()
                .map(|&v| quantize_code(black + v, max) as f32)
                .collect(),
        }
    }

    pub fn capture_with(&self, iso: Iso, seed: u64, components: Components) -> Result<RawFrame> {
        let signal = self.dark_signal(iso, seed, components)?;
        Ok(self.quantize(iso, &signal))
    }

    pub fn capture_dark_frame(&self, iso: Iso, seed: u64) -> Result<RawFrame> {
        self.capture_with(iso, seed, Components::ALL)
    }

    /// Uniformly illuminated frame with `irradiance` electrons per pixel.
    pub fn capture_flat_frame(&self, iso: Iso, irradiance: f64, seed: u64) -> Result<RawFrame> {
        if !(irradiance >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "irradiance must be non-negative, got {irradiance}"
            )));
        }
        let gain = self.truth(iso)?.gain;
        let mut signal = self.dark_signal(iso, seed, Components::ALL)?;
        if irradiance > 0.0 {
            let mut rng = stream(seed, "shot");
            let poisson = Poisson::new(irradiance)
                .map_err(|e| Error::InvalidArgument(format!("poisson: {e}")))?;
            signal
                .data
                .iter_mut()
                .for_each(|x| *x += gain * poisson.sample(&mut rng));
        }
        Ok(self.quantize(iso, &signal))
    }

    pub fn true_pixel_cdf(&self, iso: Iso, q: f64) -> Result<f64> {
        Ok(self.truth(iso)?.pixel.cdf(q))
    }

    /// Draws `n` i.i.d. samples from the true pixel-wise distribution.
    pub fn sample_pixel_noise(&self, iso: Iso, n: usize, seed: u64) -> Result<Vec<f64>> {
        let t = self.truth(iso)?;
        let mut rng = stream(seed, "truth/pixel");
        Ok(t.pixel.sample_n(n, &mut rng))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.fpn_k.save(&dir.join("fpn_k_true.pnnf"))?;
        self.fpn_b.save(&dir.join("fpn_b_true.pnnf"))?;
        let record = SensorRecord {
            seed: self.seed,
            spec: self.spec.clone(),
            fpn_k: "fpn_k_true.pnnf".into(),
            fpn_b: "fpn_b_true.pnnf".into(),
            truth: self.per_iso.values().cloned().collect(),
        };
        write_toml(&dir.join("sensor.toml"), &record)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let record: SensorRecord = read_toml(&dir.join("sensor.toml"))?;
        let fpn_k = Plane::load(&dir.join(&record.fpn_k))?;
        let fpn_b = Plane::load(&dir.join(&record.fpn_b))?;
        Ok(Self {
            spec: record.spec,
            seed: record.seed,
            fpn_k,
            fpn_b,
            per_iso: record.truth.into_iter().map(|t| (t.iso, t)).collect(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SensorRecord {
    seed: u64,
    fpn_k: String,
    fpn_b: String,
    spec: SensorSpec,
    truth: Vec<IsoTruth>,
}

/// Round half to even, then clip into `[0, max]`.
pub fn quantize_code(v: f64, max: f64) -> f64 {
    v.round_ties_even().clamp(0.0, max)
}

/// Draws a standard-normal field.
pub(crate) fn normal_field(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Gaussian with a guard for zero sigma.
pub(crate) fn gaussian(rng: &mut StreamRng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).map(|d| d.sample(rng)).unwrap_or(0.0)
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SensorSpec {
        SensorSpec {
            height: 32,
            width: 32,
            ..SensorSpec::default()
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_sensor(&small_spec(), 11).unwrap();
        let b = build_sensor(&small_spec(), 11).unwrap();
        assert_eq!(a, b);
        let c = build_sensor(&small_spec(), 12).unwrap();
        assert_ne!(a.fpn_k, c.fpn_k);
    }

    #[test]
    fn build_rejects_single_iso_and_tiny_sensor() {
        let mut spec = small_spec();
        spec.isos.truncate(1);
        assert!(matches!(build_sensor(&spec, 0), Err(Error::Rank(_))));
        let spec = SensorSpec {
            height: 8,
            ..small_spec()
        };
        assert!(build_sensor(&spec, 0).is_err());
    }

    #[test]
    fn zero_row_sigma_adds_no_row_component() {
        let mut spec = small_spec();
        spec.isos.iter_mut().for_each(|s| s.sigma_row = 0.0);
        let sensor = build_sensor(&spec, 3).unwrap();
        let row = sensor
            .dark_signal(800, 5, Components { row: true, ..Components::NONE })
            .unwrap();
        assert!(row.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gaussian_truth_cdf_symmetry() {
        let mut spec = small_spec();
        spec.isos[0].pixel = Some(PixelDistribution::Gaussian {
            mean: 0.0,
            sigma: 2.0,
        });
        let sensor = build_sensor(&spec, 3).unwrap();
        assert!((sensor.true_pixel_cdf(800, 0.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((sensor.true_pixel_cdf(800, 2.0).unwrap() - 0.841_344_746_068_543).abs() < 1e-12);
        assert_eq!(sensor.true_pixel_cdf(800, f64::NEG_INFINITY).unwrap(), 0.0);
        assert_eq!(sensor.true_pixel_cdf(800, f64::INFINITY).unwrap(), 1.0);
        // default mixture is symmetric too
        assert!((sensor.true_pixel_cdf(1600, 0.0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn noiseless_capture_is_black_plus_shading() {
        let sensor = build_sensor(&small_spec(), 9).unwrap();
        let frame = sensor
            .capture_with(1600, 1, Components { frame: true, ..Components::NONE })
            .unwrap();
        let shading = sensor.dark_shading(1600).unwrap();
        for (v, s) in frame.data.iter().zip(&shading.data) {
            assert_eq!(*v as f64, quantize_code(512.0 + s, sensor.white_level()));
        }
        frame.validate().unwrap();
    }

    #[test]
    fn captures_are_deterministic_and_unknown_iso_fails() {
        let sensor = build_sensor(&small_spec(), 9).unwrap();
        assert_eq!(
            sensor.capture_dark_frame(800, 4).unwrap(),
            sensor.capture_dark_frame(800, 4).unwrap()
        );
        assert!(matches!(
            sensor.capture_dark_frame(100, 4),
            Err(Error::UnknownIso(100))
        ));
        assert!(sensor.capture_flat_frame(800, -1.0, 0).is_err());
    }

    #[test]
    fn flat_at_zero_irradiance_equals_dark() {
        let sensor = build_sensor(&small_spec(), 9).unwrap();
        assert_eq!(
            sensor.capture_flat_frame(800, 0.0, 21).unwrap(),
            sensor.capture_dark_frame(800, 21).unwrap()
        );
    }

    #[test]
    fn components_add_up() {
        let sensor = build_sensor(&small_spec(), 2).unwrap();
        let all = sensor.dark_signal(3200, 77, Components::ALL).unwrap();
        let parts = [
            Components { frame: true, ..Components::NONE },
            Components { row: true, ..Components::NONE },
            Components { col: true, ..Components::NONE },
            Components { pixel: true, ..Components::NONE },
        ];
        let mut sum = Plane::zeros(32, 32);
        for c in parts {
            let p = sensor.dark_signal(3200, 77, c).unwrap();
            sum.data.iter_mut().zip(&p.data).for_each(|(s, v)| *s += v);
        }
        for (a, b) in all.data.iter().zip(&sum.data) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rounding_is_half_to_even() {
        assert_eq!(quantize_code(2.5, 10.0), 2.0);
        assert_eq!(quantize_code(3.5, 10.0), 4.0);
        assert_eq!(quantize_code(-3.0, 10.0), 0.0);
        assert_eq!(quantize_code(12.2, 10.0), 10.0);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sensor = build_sensor(&small_spec(), 5).unwrap();
        sensor.save(dir.path()).unwrap();
        assert_eq!(GroundTruthSensor::load(dir.path()).unwrap(), sensor);
    }
}
