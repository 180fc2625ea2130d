//! Noise synthesis from a calibrated profile and a trained proxy.
//!
//! A noisy raw frame is `quantize(black + K * Poisson(I) + N_frame + N_row +
//! N_col + N_pixel)`, where the frame, row and column parts come from the
//! calibration profile and the pixel part from the proxy model.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{read_toml, write_toml, Iso, Plane, RawFrame};
use crate::pnd::{BandEstimate, BandNoiseModel, FrameNoiseModel, FrameParamError};
use crate::ppm::ProxyModel;
use crate::rng::{child_seed, stream};
use crate::sensor::{gaussian, quantize_code, Components};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bit_depth: u8,
    pub black_level: f64,
    pub white_level: f64,
}

impl QuantSpec {
    pub fn max_code(&self) -> f64 {
        ((1u64 << self.bit_depth) - 1) as f64
    }
}

/// Gaussian error magnitudes used by [`perturb_profile`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorStd {
    /// Common offset on every FPN slope, DN per ISO unit.
    pub fpn_k: f64,
    /// Common offset on every FPN intercept, DN.
    pub fpn_b: f64,
    pub ble: f64,
    pub sigma_row: BTreeMap<Iso, f64>,
    pub sigma_col: BTreeMap<Iso, f64>,
}

impl ErrorStd {
    /// Errors recorded during calibration.
    pub fn from_models(frame: &FrameNoiseModel, band: &BandNoiseModel) -> Self {
        let FrameParamError { fpn_k, fpn_b, ble, .. } = frame.param_error_std;
        Self {
            fpn_k,
            fpn_b,
            ble,
            sigma_row: band.entries.iter().map(|(&i, e)| (i, e.sigma_row_err)).collect(),
            sigma_col: band.entries.iter().map(|(&i, e)| (i, e.sigma_col_err)).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.fpn_k == 0.0
            && self.fpn_b == 0.0
            && self.ble == 0.0
            && self.sigma_row.values().chain(self.sigma_col.values()).all(|&v| v == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationProfile {
    pub frame: FrameNoiseModel,
    pub band: BandNoiseModel,
    pub gain: BTreeMap<Iso, f64>,
    pub quant: QuantSpec,
    pub error_std: ErrorStd,
}

impl CalibrationProfile {
    pub fn new(
        frame: FrameNoiseModel,
        band: BandNoiseModel,
        gain: BTreeMap<Iso, f64>,
        quant: QuantSpec,
    ) -> Result<Self> {
        let error_std = ErrorStd::from_models(&frame, &band);
        let p = Self {
            frame,
            band,
            gain,
            quant,
            error_std,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let isos = self.isos();
        let band: Vec<Iso> = self.band.entries.keys().copied().collect();
        let gain: Vec<Iso> = self.gain.keys().copied().collect();
        if band != isos || gain != isos {
            return Err(Error::Invariant(format!(
                "profile ISO sets differ: frame {isos:?}, band {band:?}, gain {gain:?}"
            )));
        }
        if let Some((iso, g)) = self.gain.iter().find(|(_, g)| !(**g > 0.0)) {
            return Err(Error::Invariant(format!("gain at iso {iso} must be positive, got {g}")));
        }
        if self.quant.black_level >= self.quant.white_level {
            return Err(Error::Invariant("black level must be below white level".into()));
        }
        Ok(())
    }

    pub fn isos(&self) -> Vec<Iso> {
        self.frame.isos()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.frame.shape()
    }

    /// System gain, log-log interpolated between calibrated ISOs.
    pub fn gain_at(&self, iso: Iso) -> Result<f64> {
        if let Some(g) = self.gain.get(&iso) {
            return Ok(*g);
        }
        if iso == 0 || self.gain.is_empty() {
            return Err(Error::UnknownIso(iso));
        }
        let keys: Vec<Iso> = self.gain.keys().copied().collect();
        if keys.len() == 1 {
            return Ok(self.gain[&keys[0]]);
        }
        let pos = keys.partition_point(|&k| k < iso);
        let (a, b) = if pos == 0 {
            (keys[0], keys[1])
        } else if pos == keys.len() {
            (keys[pos - 2], keys[pos - 1])
        } else {
            (keys[pos - 1], keys[pos])
        };
        let (ga, gb) = (self.gain[&a].ln(), self.gain[&b].ln());
        let t = ((iso as f64).ln() - (a as f64).ln()) / ((b as f64).ln() - (a as f64).ln());
        Ok((ga + t * (gb - ga)).exp())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.frame.fpn_k.save(&dir.join("fpn_k.pnnf"))?;
        self.frame.fpn_b.save(&dir.join("fpn_b.pnnf"))?;
        let record = ProfileRecord {
            quant: self.quant,
            gain: self.gain.iter().map(|(&iso, &gain)| GainRow { iso, gain }).collect(),
            ble: self.frame.ble.iter().map(|(&iso, &ble)| BleRow { iso, ble }).collect(),
            fit_residual_rms: self.frame.fit_residual_rms,
            frame_error: self.frame.param_error_std,
            band: self.band.entries.values().copied().collect(),
            error_std: ErrorRecord {
                fpn_k: self.error_std.fpn_k,
                fpn_b: self.error_std.fpn_b,
                ble: self.error_std.ble,
                sigma: self
                    .error_std
                    .sigma_row
                    .iter()
                    .map(|(&iso, &row)| SigmaErrRow {
                        iso,
                        row,
                        col: self.error_std.sigma_col.get(&iso).copied().unwrap_or(0.0),
                    })
                    .collect(),
            },
        };
        write_toml(&dir.join("profile.toml"), &record)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let r: ProfileRecord = read_toml(&dir.join("profile.toml"))?;
        let fpn_k = Plane::load(&dir.join("fpn_k.pnnf"))?;
        let fpn_b = Plane::load(&dir.join("fpn_b.pnnf"))?;
        if fpn_k.shape() != fpn_b.shape() {
            return Err(Error::Shape {
                expected: fpn_k.shape(),
                found: fpn_b.shape(),
            });
        }
        let profile = Self {
            frame: FrameNoiseModel {
                fpn_k,
                fpn_b,
                ble: r.ble.iter().map(|b| (b.iso, b.ble)).collect(),
                fit_residual_rms: r.fit_residual_rms,
                param_error_std: r.frame_error,
            },
            band: BandNoiseModel::from_entries(r.band),
            gain: r.gain.iter().map(|g| (g.iso, g.gain)).collect(),
            quant: r.quant,
            error_std: ErrorStd {
                fpn_k: r.error_std.fpn_k,
                fpn_b: r.error_std.fpn_b,
                ble: r.error_std.ble,
                sigma_row: r.error_std.sigma.iter().map(|s| (s.iso, s.row)).collect(),
                sigma_col: r.error_std.sigma.iter().map(|s| (s.iso, s.col)).collect(),
            },
        };
        profile.validate()?;
        Ok(profile)
    }
}

#[derive(Serialize, Deserialize)]
struct GainRow {
    iso: Iso,
    gain: f64,
}

#[derive(Serialize, Deserialize)]
struct BleRow {
    iso: Iso,
    ble: f64,
}

#[derive(Serialize, Deserialize)]
struct SigmaErrRow {
    iso: Iso,
    row: f64,
    col: f64,
}

#[derive(Serialize, Deserialize)]
struct ErrorRecord {
    fpn_k: f64,
    fpn_b: f64,
    ble: f64,
    sigma: Vec<SigmaErrRow>,
}

#[derive(Serialize, Deserialize)]
struct ProfileRecord {
    quant: QuantSpec,
    gain: Vec<GainRow>,
    ble: Vec<BleRow>,
    fit_residual_rms: f64,
    frame_error: FrameParamError,
    band: Vec<BandEstimate>,
    error_std: ErrorRecord,
}

/// A copy of the profile with every parameter moved by one Gaussian draw of
/// its recorded error. FPN maps shift by a single common offset; sigmas are
/// floored at zero.
pub fn perturb_profile(profile: &CalibrationProfile, seed: u64) -> CalibrationProfile {
    let err = &profile.error_std;
    let mut rng = stream(seed, "perturb/frame");
    let dk = gaussian(&mut rng, err.fpn_k);
    let db = gaussian(&mut rng, err.fpn_b);
    let mut out = profile.clone();
    out.frame.fpn_k.data.iter_mut().for_each(|v| *v += dk);
    out.frame.fpn_b.data.iter_mut().for_each(|v| *v += db);
    for v in out.frame.ble.values_mut() {
        *v += gaussian(&mut rng, err.ble);
    }
    let mut rng = stream(seed, "perturb/band");
    for (iso, e) in out.band.entries.iter_mut() {
        let sr = err.sigma_row.get(iso).copied().unwrap_or(0.0);
        let sc = err.sigma_col.get(iso).copied().unwrap_or(0.0);
        e.sigma_row = (e.sigma_row + gaussian(&mut rng, sr)).max(0.0);
        e.sigma_col = (e.sigma_col + gaussian(&mut rng, sc)).max(0.0);
    }
    out
}

/// `K(iso) * Poisson(clean)` per pixel; `clean` in electrons.
pub fn synth_shot(clean: &Plane, iso: Iso, profile: &CalibrationProfile, seed: u64) -> Result<Plane> {
    if let Some(v) = clean.data.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "irradiance must be non-negative, found {v}"
        )));
    }
    let gain = profile.gain_at(iso)?;
    let mut rng = stream(seed, "synth/shot");
    let data = clean
        .data
        .iter()
        .map(|&lam| {
            if lam == 0.0 {
                return Ok(0.0);
            }
            let p = Poisson::new(lam).map_err(|e| Error::InvalidArgument(format!("poisson: {e}")))?;
            Ok(gain * p.sample(&mut rng))
        })
        .collect::<Result<Vec<f64>>>()?;
    Plane::new(clean.height, clean.width, data)
}

/// Signal-independent noise field in DN above black level.
pub fn synth_signal_independent(
    model: &ProxyModel,
    profile: &CalibrationProfile,
    iso: Iso,
    shape: (usize, usize),
    seed: u64,
    perturb: bool,
    components: Components,
) -> Result<Plane> {
    if shape != profile.shape() {
        return Err(Error::Shape {
            expected: profile.shape(),
            found: shape,
        });
    }
    let (h, w) = shape;
    let perturbed;
    let p = if perturb {
        perturbed = perturb_profile(profile, child_seed(seed, "synth/perturb"));
        &perturbed
    } else {
        profile
    };
    let mut field = if components.frame {
        p.frame.dark_shading(iso)
    } else {
        Plane::zeros(h, w)
    };
    let (sigma_row, sigma_col) = p.band.sigmas_at(iso);
    if components.row {
        let mut rng = stream(seed, "synth/row");
        for r in 0..h {
            let v = gaussian(&mut rng, sigma_row);
            field.data[r * w..(r + 1) * w].iter_mut().for_each(|x| *x += v);
        }
    }
    if components.col {
        let mut rng = stream(seed, "synth/col");
        let cols: Vec<f64> = (0..w).map(|_| gaussian(&mut rng, sigma_col)).collect();
        for row in field.data.chunks_exact_mut(w) {
            row.iter_mut().zip(&cols).for_each(|(x, c)| *x += c);
        }
    }
    if components.pixel {
        let noise = model.sample_field(h, w, iso, child_seed(seed, "synth/pixel"))?;
        field.data.iter_mut().zip(&noise.data).for_each(|(x, n)| *x += n);
    }
    Ok(field)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    pub perturb: bool,
    pub shot: bool,
    pub components: Components,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            perturb: true,
            shot: true,
            components: Components::ALL,
        }
    }
}

impl SynthOptions {
    /// Every noise source off: the noisy frame is the quantized clean signal.
    pub const NOISELESS: SynthOptions = SynthOptions {
        perturb: false,
        shot: false,
        components: Components::NONE,
    };
}

/// Builds a (noisy, clean) training pair. `clean` holds linear signal; its own
/// `black_level` is subtracted before converting to electrons with the
/// profile gain at `iso`. The exposure is divided by `ratio`.
pub fn synth_pair(
    clean: &RawFrame,
    ratio: f64,
    iso: Iso,
    model: &ProxyModel,
    profile: &CalibrationProfile,
    seed: u64,
    opts: SynthOptions,
) -> Result<(RawFrame, RawFrame)> {
    if !(ratio > 0.0) {
        return Err(Error::InvalidArgument(format!("ratio must be positive, got {ratio}")));
    }
    let gain = profile.gain_at(iso)?;
    let electrons = Plane::new(
        clean.height,
        clean.width,
        clean
            .data
            .iter()
            .map(|&v| ((v as f64 - clean.black_level) / gain).max(0.0) / ratio)
            .collect(),
    )?;
    let signal = if opts.shot {
        synth_shot(&electrons, iso, profile, child_seed(seed, "pair/shot"))?
    } else {
        Plane::new(
            electrons.height,
            electrons.width,
            electrons.data.iter().map(|e| e * gain).collect(),
        )?
    };
    let indep = synth_signal_independent(
        model,
        profile,
        iso,
        clean.shape(),
        child_seed(seed, "pair/indep"),
        opts.perturb,
        opts.components,
    )?;
    let mut total = signal;
    total.data.iter_mut().zip(&indep.data).for_each(|(s, n)| *s += n);
    let noisy = quantize_field(&total, iso, profile.quant);
    noisy.validate()?;
    Ok((noisy, clean.clone()))
}

/// A quantized dark frame: black level plus signal-independent noise.
pub fn synth_dark_frame(
    model: &ProxyModel,
    profile: &CalibrationProfile,
    iso: Iso,
    seed: u64,
    opts: SynthOptions,
) -> Result<RawFrame> {
    let (h, w) = profile.shape();
    let indep = synth_signal_independent(model, profile, iso, (h, w), seed, opts.perturb, opts.components)?;
    Ok(quantize_field(&indep, iso, profile.quant))
}

fn quantize_field(field: &Plane, iso: Iso, q: QuantSpec) -> RawFrame {
    let max = q.max_code();
    RawFrame {
        height: field.height,
        width: field.width,
        iso,
        black_level: q.black_level,
        white_level: q.white_level,
        bit_depth: q.bit_depth,
        quantized: true,
        data: field
            .data
            .iter()
            .map(|v| quantize_code(q.black_level + v, max) as f32)
            .collect(),
    }
}

/// Subtracts the calibrated dark shading (frame-wise component) from a frame.
/// The black level is kept.
pub fn dark_shading_correction(noisy: &RawFrame, profile: &CalibrationProfile) -> Result<RawFrame> {
    if noisy.shape() != profile.shape() {
        return Err(Error::Shape {
            expected: profile.shape(),
            found: noisy.shape(),
        });
    }
    let shading = profile.frame.dark_shading(noisy.iso);
    Ok(RawFrame {
        quantized: false,
        data: noisy
            .data
            .iter()
            .zip(&shading.data)
            .map(|(&v, s)| (v as f64 - s) as f32)
            .collect(),
        ..noisy.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub noisy: PathBuf,
    pub clean: PathBuf,
    pub iso: Iso,
    pub ratio: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairManifest {
    pub pairs: Vec<PairEntry>,
}

impl PairManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_toml(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_toml(path)
    }
}
