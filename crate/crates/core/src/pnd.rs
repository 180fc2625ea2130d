//! Dark-frame noise decoupling.
//!
//! Dark frames are split into three parts:
//!
//! * frame-wise: temporally stable dark shading, `fpn_k * iso + fpn_b + ble(iso)`,
//!   fitted per pixel across ISO from temporal means;
//! * band-wise: zero-mean Gaussian row and column offsets;
//! * pixel-wise: the i.i.d. remainder, which is re-spread inside its
//!   quantization cell to undo ADC lattice artifacts before it is used as a
//!   training target.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::gaussian_probplot_r2;
use crate::frame::{read_container, read_toml, write_container, write_toml, FrameSet, Iso, Payload, Plane, RawFrame};
use crate::rng::stream;
use crate::stats::{fit_line, mean, std_dev, variance};

/// Gaussian error magnitudes of the frame-wise parameters.
///
/// `fpn_k`, `fpn_b` and `ble` are the standard errors of the spatially common
/// offset of each parameter, which is what a per-frame perturbation models.
/// The `*_pixel` fields are the per-pixel standard errors of the maps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameParamError {
    pub fpn_k: f64,
    pub fpn_b: f64,
    pub ble: f64,
    pub fpn_k_pixel: f64,
    pub fpn_b_pixel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameNoiseModel {
    pub fpn_k: Plane,
    pub fpn_b: Plane,
    pub ble: BTreeMap<Iso, f64>,
    pub fit_residual_rms: f64,
    pub param_error_std: FrameParamError,
}

impl FrameNoiseModel {
    pub fn shape(&self) -> (usize, usize) {
        self.fpn_k.shape()
    }

    pub fn isos(&self) -> Vec<Iso> {
        self.ble.keys().copied().collect()
    }

    /// Black level error at `iso`: exact for calibrated ISOs, piecewise
    /// linear in between, clamped outside.
    pub fn ble_at(&self, iso: Iso) -> f64 {
        if let Some(v) = self.ble.get(&iso) {
            return *v;
        }
        let below = self.ble.range(..iso).next_back();
        let above = self.ble.range(iso..).next();
        match (below, above) {
            (Some((&a, &va)), Some((&b, &vb))) => {
                let t = (iso - a) as f64 / (b - a) as f64;
                va + t * (vb - va)
            }
            (Some((_, &v)), None) | (None, Some((_, &v))) => v,
            (None, None) => 0.0,
        }
    }

    /// Predicted dark shading above black level.
    pub fn dark_shading(&self, iso: Iso) -> Plane {
        self.dark_shading_with(iso, 0.0, 0.0, 0.0)
    }

    /// Dark shading with additive offsets on the slope, intercept and BLE.
    pub fn dark_shading_with(&self, iso: Iso, dk: f64, db: f64, dble: f64) -> Plane {
        let ble = self.ble_at(iso) + dble;
        let x = iso as f64;
        let data = self
            .fpn_k
            .data
            .iter()
            .zip(&self.fpn_b.data)
            .map(|(k, b)| (k + dk) * x + (b + db) + ble)
            .collect();
        Plane {
            height: self.fpn_k.height,
            width: self.fpn_k.width,
            data,
        }
    }
}

/// Per-ISO temporal statistics of a dark frame set.
struct TemporalStats {
    iso: f64,
    count: usize,
    mean: Vec<f64>,
    /// Pixel temporal variance averaged over pixels.
    pixel_var: f64,
    /// Temporal variance of the per-frame spatial mean.
    frame_mean_var: f64,
}

fn temporal_stats(set: &FrameSet) -> TemporalStats {
    let frames = set.frames();
    let m = frames.len();
    let n = frames[0].data.len();
    let black = frames[0].black_level;
    let mut sum = vec![0.0; n];
    let mut sum_sq = vec![0.0; n];
    let mut frame_means = Vec::with_capacity(m);
    for f in frames {
        let mut acc = 0.0;
        for ((s, q), &v) in sum.iter_mut().zip(sum_sq.iter_mut()).zip(&f.data) {
            let v = v as f64 - black;
            *s += v;
            *q += v * v;
            acc += v;
        }
        frame_means.push(acc / n as f64);
    }
    let mf = m as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / mf).collect();
    let pixel_var = if m > 1 {
        sum_sq
            .iter()
            .zip(&mean)
            .map(|(q, mu)| (q - mf * mu * mu) / (mf - 1.0))
            .sum::<f64>()
            / n as f64
    } else {
        0.0
    };
    TemporalStats {
        iso: set.iso() as f64,
        count: m,
        mean,
        pixel_var: pixel_var.max(0.0),
        frame_mean_var: variance(&frame_means),
    }
}

/// Fits the linear dark shading model across ISO.
pub fn calibrate_frame_noise(dark_sets: &[FrameSet]) -> Result<FrameNoiseModel> {
    let mut isos: Vec<Iso> = dark_sets.iter().map(|s| s.iso()).collect();
    isos.sort_unstable();
    isos.dedup();
    if isos.len() < 2 || isos.len() != dark_sets.len() {
        return Err(Error::Rank(format!(
            "frame-wise regression needs at least 2 distinct ISO values, one set each; got {} sets over {} ISOs",
            dark_sets.len(),
            isos.len()
        )));
    }
    let shape = dark_sets[0].shape();
    for s in dark_sets {
        if s.shape() != shape {
            return Err(Error::Shape {
                expected: shape,
                found: s.shape(),
            });
        }
        if s.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "iso {} has {} frame(s); at least 2 are needed",
                s.iso(),
                s.len()
            )));
        }
    }
    let stats: Vec<TemporalStats> = dark_sets.iter().map(temporal_stats).collect();
    let j = stats.len() as f64;
    let x_mean = stats.iter().map(|s| s.iso).sum::<f64>() / j;
    let sxx: f64 = stats.iter().map(|s| (s.iso - x_mean).powi(2)).sum();
    let n = shape.0 * shape.1;

    let mut fpn_k = vec![0.0; n];
    let mut fpn_b = vec![0.0; n];
    for p in 0..n {
        let y_mean = stats.iter().map(|s| s.mean[p]).sum::<f64>() / j;
        let sxy: f64 = stats.iter().map(|s| (s.iso - x_mean) * s.mean[p]).sum();
        let k = sxy / sxx;
        fpn_k[p] = k;
        fpn_b[p] = y_mean - k * x_mean;
    }

    let mut ble = BTreeMap::new();
    let mut sq = 0.0;
    for s in &stats {
        let resid: Vec<f64> = (0..n)
            .map(|p| s.mean[p] - (fpn_k[p] * s.iso + fpn_b[p]))
            .collect();
        let b = mean(&resid);
        sq += resid.iter().map(|r| (r - b).powi(2)).sum::<f64>();
        ble.insert(s.iso as Iso, b);
    }
    let fit_residual_rms = (sq / (n as f64 * j)).sqrt();

    // Propagate the variance of each per-ISO mean through the OLS weights.
    let slope_w = |s: &TemporalStats| (s.iso - x_mean) / sxx;
    let icpt_w = |s: &TemporalStats| 1.0 / j - x_mean * (s.iso - x_mean) / sxx;
    let propagate = |w: &dyn Fn(&TemporalStats) -> f64, v: &dyn Fn(&TemporalStats) -> f64| {
        stats
            .iter()
            .map(|s| w(s).powi(2) * v(s) / s.count as f64)
            .sum::<f64>()
            .sqrt()
    };
    let common = |s: &TemporalStats| s.frame_mean_var;
    let pixel = |s: &TemporalStats| s.pixel_var;
    let param_error_std = FrameParamError {
        fpn_k: propagate(&slope_w, &common),
        fpn_b: propagate(&icpt_w, &common),
        ble: (stats
            .iter()
            .map(|s| s.frame_mean_var / s.count as f64)
            .sum::<f64>()
            / j)
            .sqrt(),
        fpn_k_pixel: propagate(&slope_w, &pixel),
        fpn_b_pixel: propagate(&icpt_w, &pixel),
    };

    Ok(FrameNoiseModel {
        fpn_k: Plane::new(shape.0, shape.1, fpn_k)?,
        fpn_b: Plane::new(shape.0, shape.1, fpn_b)?,
        ble,
        fit_residual_rms,
        param_error_std,
    })
}

/// `frame - black_level - dark_shading(iso)`.
pub fn remove_frame_noise(frame: &RawFrame, model: &FrameNoiseModel) -> Result<Plane> {
    if frame.shape() != model.shape() {
        return Err(Error::Shape {
            expected: model.shape(),
            found: frame.shape(),
        });
    }
    let shading = model.dark_shading(frame.iso);
    let data = frame
        .data
        .iter()
        .zip(&shading.data)
        .map(|(&v, s)| v as f64 - frame.black_level - s)
        .collect();
    Plane::new(frame.height, frame.width, data)
}

/// Band-wise calibration result for one ISO.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandEstimate {
    pub iso: Iso,
    pub sigma_row: f64,
    pub sigma_col: f64,
    /// Normal probability-plot R² of the row / column means; absent when the
    /// means are degenerate.
    pub r2_row: Option<f64>,
    pub r2_col: Option<f64>,
    pub sigma_row_err: f64,
    pub sigma_col_err: f64,
    /// Pixel-wise standard deviation used for the leakage correction.
    pub sigma_pixel: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BandNoiseModel {
    pub entries: BTreeMap<Iso, BandEstimate>,
}

impl BandNoiseModel {
    pub fn from_entries(entries: impl IntoIterator<Item = BandEstimate>) -> Self {
        Self {
            entries: entries.into_iter().map(|e| (e.iso, e)).collect(),
        }
    }

    pub fn get(&self, iso: Iso) -> Result<&BandEstimate> {
        self.entries.get(&iso).ok_or(Error::UnknownIso(iso))
    }

    /// Row and column sigma at any ISO, interpolated linearly between
    /// calibrated entries and clamped outside.
    pub fn sigmas_at(&self, iso: Iso) -> (f64, f64) {
        if let Some(e) = self.entries.get(&iso) {
            return (e.sigma_row, e.sigma_col);
        }
        let below = self.entries.range(..iso).next_back();
        let above = self.entries.range(iso..).next();
        match (below, above) {
            (Some((&a, ea)), Some((&b, eb))) => {
                let t = (iso - a) as f64 / (b - a) as f64;
                (
                    ea.sigma_row + t * (eb.sigma_row - ea.sigma_row),
                    ea.sigma_col + t * (eb.sigma_col - ea.sigma_col),
                )
            }
            (Some((_, e)), None) | (None, Some((_, e))) => (e.sigma_row, e.sigma_col),
            (None, None) => (0.0, 0.0),
        }
    }
}

pub(crate) fn row_means(p: &Plane) -> Vec<f64> {
    p.data
        .chunks_exact(p.width)
        .map(|r| r.iter().sum::<f64>() / p.width as f64)
        .collect()
}

pub(crate) fn col_means(p: &Plane) -> Vec<f64> {
    let mut acc = vec![0.0; p.width];
    for r in p.data.chunks_exact(p.width) {
        acc.iter_mut().zip(r).for_each(|(a, v)| *a += v);
    }
    acc.iter().map(|a| a / p.height as f64).collect()
}

/// Estimates row and column sigma from frame-noise-free residuals.
pub fn calibrate_band_noise(residuals: &[Plane], iso: Iso) -> Result<BandEstimate> {
    let first = residuals
        .first()
        .ok_or_else(|| Error::InvalidArgument("no residual frames".into()))?;
    let (h, w) = first.shape();
    if h < 2 {
        return Err(Error::InvalidArgument(
            "row noise needs frames with at least 2 rows".into(),
        ));
    }
    if w < 2 {
        return Err(Error::InvalidArgument(
            "column noise needs frames with at least 2 columns".into(),
        ));
    }
    let mut row_dev = Vec::with_capacity(h * residuals.len());
    let mut col_dev = Vec::with_capacity(w * residuals.len());
    let mut pix_ss = 0.0;
    for r in residuals {
        if r.shape() != (h, w) {
            return Err(Error::Shape {
                expected: (h, w),
                found: r.shape(),
            });
        }
        let rm = row_means(r);
        let cm = col_means(r);
        let g = mean(&rm);
        row_dev.extend(rm.iter().map(|v| v - g));
        col_dev.extend(cm.iter().map(|v| v - g));
        for (i, row) in r.data.chunks_exact(w).enumerate() {
            for (j, v) in row.iter().enumerate() {
                let e = v - rm[i] - cm[j] + g;
                pix_ss += e * e;
            }
        }
    }
    let frames = residuals.len() as f64;
    // Two-way residual has (h - 1)(w - 1) degrees of freedom per frame.
    let pix_var = pix_ss / (frames * ((h - 1) * (w - 1)) as f64);
    let row_var = row_dev.iter().map(|d| d * d).sum::<f64>() / (frames * (h - 1) as f64);
    let col_var = col_dev.iter().map(|d| d * d).sum::<f64>() / (frames * (w - 1) as f64);
    let sigma_row = (row_var - pix_var / w as f64).max(0.0).sqrt();
    let sigma_col = (col_var - pix_var / h as f64).max(0.0).sqrt();
    let r2 = |d: &[f64]| {
        if d.len() >= 30 {
            gaussian_probplot_r2(d)
        } else {
            None
        }
    };
    Ok(BandEstimate {
        iso,
        sigma_row,
        sigma_col,
        r2_row: r2(&row_dev),
        r2_col: r2(&col_dev),
        sigma_row_err: sigma_row / (2.0 * (frames * (h - 1) as f64)).sqrt(),
        sigma_col_err: sigma_col / (2.0 * (frames * (w - 1) as f64)).sqrt(),
        sigma_pixel: pix_var.sqrt(),
    })
}

/// Subtracts row and column means, adding the grand mean back once.
pub fn remove_band_noise(frame: &Plane) -> Plane {
    let rm = row_means(frame);
    let cm = col_means(frame);
    let g = mean(&rm);
    let mut out = frame.clone();
    for (i, row) in out.data.chunks_exact_mut(frame.width).enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v - rm[i] - cm[j] + g;
        }
    }
    out
}

/// Decoupled pixel-wise noise for one ISO.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelNoiseSamples {
    pub iso: Iso,
    pub samples: Vec<f64>,
    pub quant_step: f64,
}

impl PixelNoiseSamples {
    pub fn std_dev(&self) -> f64 {
        std_dev(&self.samples)
    }

    /// Fraction of samples that exactly equal another sample.
    pub fn duplicate_fraction(&self) -> f64 {
        let mut v = self.samples.clone();
        v.sort_by(f64::total_cmp);
        let dup = v.windows(2).filter(|w| w[0] == w[1]).count();
        dup as f64 / v.len().max(1) as f64
    }
}

#[derive(Serialize, Deserialize)]
struct PoolEntry {
    iso: Iso,
    file: String,
    count: usize,
    quant_step: f64,
}

#[derive(Serialize, Deserialize)]
struct PoolIndex {
    pools: Vec<PoolEntry>,
}

/// Writes each pool as a `1 x n` f64 container plus a `pools.toml` index.
pub fn save_pools(dir: &Path, pools: &BTreeMap<Iso, PixelNoiseSamples>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = PoolIndex { pools: Vec::new() };
    for (&iso, p) in pools {
        let file = format!("pool_{iso}.pnnf");
        write_container(&dir.join(&file), 1, p.samples.len(), &Payload::F64(p.samples.clone()))?;
        index.pools.push(PoolEntry {
            iso,
            file,
            count: p.samples.len(),
            quant_step: p.quant_step,
        });
    }
    write_toml(&dir.join(POOL_INDEX), &index)
}

pub const POOL_INDEX: &str = "pools.toml";

pub fn load_pools(dir: &Path) -> Result<BTreeMap<Iso, PixelNoiseSamples>> {
    let index: PoolIndex = read_toml(&dir.join(POOL_INDEX))?;
    let mut out = BTreeMap::new();
    for e in index.pools {
        let (_, _, payload) = read_container(&dir.join(&e.file))?;
        let samples = payload.to_f64();
        if samples.len() != e.count {
            return Err(Error::Length {
                expected: e.count,
                found: samples.len(),
            });
        }
        out.insert(
            e.iso,
            PixelNoiseSamples {
                iso: e.iso,
                samples,
                quant_step: e.quant_step,
            },
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructOptions {
    /// Uniform dither for sparsely populated cells. When off, those samples
    /// pass through unchanged.
    pub dither: bool,
    pub min_occupancy: usize,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        Self {
            dither: true,
            min_occupancy: 100,
        }
    }
}

const SUBDIVISIONS: usize = 16;
const MAX_GRID_BINS: usize = 1 << 22;

/// Re-spreads quantized samples inside their quantization cells.
///
/// A sample `x` with step `s` is known only to lie in `[x - s/2, x + s/2]`.
/// Its sub-LSB position is redrawn from a triangular-kernel density estimate
/// (half-width `s`) of the whole pool, restricted to that cell and resolved on
/// 16 sub-bins. Cells holding fewer than `min_occupancy` samples fall back to
/// a uniform draw over the cell.
pub fn high_bit_reconstruct(
    iso: Iso,
    samples: &[f64],
    quant_step: f64,
    seed: u64,
    opts: ReconstructOptions,
) -> Result<PixelNoiseSamples> {
    if !(quant_step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "quantization step must be positive, got {quant_step}"
        )));
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to reconstruct".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pixel samples".into()));
    }
    let s = quant_step;
    let h = s / SUBDIVISIONS as f64;
    let half = SUBDIVISIONS / 2;
    let (lo_s, hi_s) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let lo = lo_s - 2.0 * s;
    let bins_f = ((hi_s + 2.0 * s - lo) / h).ceil() + 1.0;
    let mut rng = stream(seed, "reconstruct");
    let mut out = Vec::with_capacity(samples.len());

    if bins_f > MAX_GRID_BINS as f64 {
        // The step is negligible next to the spread: count cell occupancy
        // directly. Such pools are effectively continuous already.
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        for &x in samples {
            let a = sorted.partition_point(|&v| v < x - s / 2.0);
            let b = sorted.partition_point(|&v| v < x + s / 2.0);
            if b - a >= opts.min_occupancy {
                // Dense cells on such a grid cannot be resolved; dither them.
                out.push(x + s * (rng.random::<f64>() - 0.5));
            } else if opts.dither {
                out.push(x + s * (rng.random::<f64>() - 0.5));
            } else {
                out.push(x);
            }
        }
        return Ok(PixelNoiseSamples {
            iso,
            samples: out,
            quant_step,
        });
    }

    let bins = bins_f as usize;
    let mut counts = vec![0.0f64; bins];
    for &x in samples {
        let b = (((x - lo) / h) as usize).min(bins - 1);
        counts[b] += 1.0;
    }
    // Box of width s centred on each bin: cell occupancy.
    let occupancy = box_filter(&counts, SUBDIVISIONS, SUBDIVISIONS / 2);
    // Second box, offset the other way, makes a symmetric triangular kernel.
    let density = box_filter(&occupancy, SUBDIVISIONS, SUBDIVISIONS / 2 - 1);
    let density_at = |y: f64| -> f64 {
        // Linear interpolation between bin centres.
        let t = (y - lo) / h - 0.5;
        if t <= 0.0 {
            return density[0];
        }
        let i = t.floor() as usize;
        if i + 1 >= bins {
            return density[bins - 1];
        }
        let f = t - i as f64;
        density[i] * (1.0 - f) + density[i + 1] * f
    };

    let mut cdf = [0.0f64; SUBDIVISIONS];
    for &x in samples {
        let b = (((x - lo) / h) as usize).min(bins - 1);
        if (occupancy[b] as usize) < opts.min_occupancy {
            if opts.dither {
                out.push(x + s * (rng.random::<f64>() - 0.5));
            } else {
                out.push(x);
            }
            continue;
        }
        let mut acc = 0.0;
        for (j, c) in cdf.iter_mut().enumerate() {
            let y = x + (j as f64 + 0.5 - half as f64) * h;
            acc += density_at(y).max(0.0);
            *c = acc;
        }
        let u: f64 = rng.random::<f64>() * acc;
        let v: f64 = rng.random();
        let j = cdf.partition_point(|&c| c <= u).min(SUBDIVISIONS - 1);
        let y = x + (j as f64 - half as f64 + v) * h;
        out.push(y);
    }
    Ok(PixelNoiseSamples {
        iso,
        samples: out,
        quant_step,
    })
}

/// Moving sum over bins `[i - back, i - back + width)`.
fn box_filter(x: &[f64], width: usize, back: usize) -> Vec<f64> {
    let mut prefix = Vec::with_capacity(x.len() + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for v in x {
        acc += v;
        prefix.push(acc);
    }
    (0..x.len())
        .map(|i| {
            let a = i.saturating_sub(back);
            let b = (i + width - back).min(x.len());
            prefix[b] - prefix[a]
        })
        .collect()
}

/// Standard deviation of the pooled samples after each decoupling stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageStd {
    pub raw: f64,
    pub frame_removed: f64,
    pub band_removed: f64,
    pub reconstructed: f64,
}

#[derive(Debug, Clone)]
pub struct Decoupled {
    pub pools: BTreeMap<Iso, PixelNoiseSamples>,
    pub stage_std: BTreeMap<Iso, StageStd>,
}

/// Runs frame removal, band removal and high-bit reconstruction over every
/// frame and pools the remaining pixel-wise noise per ISO.
pub fn decouple(
    dark_sets: &[FrameSet],
    frame_model: &FrameNoiseModel,
    band_model: &BandNoiseModel,
    seed: u64,
) -> Result<Decoupled> {
    let mut pools = BTreeMap::new();
    let mut stage_std = BTreeMap::new();
    for set in dark_sets {
        let iso = set.iso();
        band_model.get(iso)?;
        let mut raw = Vec::new();
        let mut frame_removed = Vec::new();
        let mut band_removed = Vec::new();
        for f in set.frames() {
            raw.extend(f.data.iter().map(|&v| v as f64));
            let r = remove_frame_noise(f, frame_model)?;
            frame_removed.extend_from_slice(&r.data);
            band_removed.extend(remove_band_noise(&r).data);
        }
        let quantized = set.frames().iter().all(|f| f.quantized);
        let pool = if quantized {
            high_bit_reconstruct(
                iso,
                &band_removed,
                1.0,
                crate::rng::child_seed(seed, &format!("decouple/{iso}")),
                ReconstructOptions::default(),
            )?
        } else {
            PixelNoiseSamples {
                iso,
                samples: band_removed.clone(),
                quant_step: 0.0,
            }
        };
        stage_std.insert(
            iso,
            StageStd {
                raw: std_dev(&raw),
                frame_removed: std_dev(&frame_removed),
                band_removed: std_dev(&band_removed),
                reconstructed: pool.std_dev(),
            },
        );
        pools.insert(iso, pool);
    }
    Ok(Decoupled { pools, stage_std })
}

/// Photon-transfer estimate of the system gain at one ISO.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainFit {
    pub gain: f64,
    /// Signal-independent temporal variance (intercept of the transfer line).
    pub read_var: f64,
    pub r2: Option<f64>,
}

/// Fits temporal variance against mean signal over several uniformly lit
/// exposure levels of one ISO. Each level needs at least two frames; the
/// variance is taken from frame differences so fixed patterns cancel.
pub fn photon_transfer_gain(levels: &[FrameSet]) -> Result<GainFit> {
    if levels.len() < 2 {
        return Err(Error::Rank(format!(
            "photon transfer needs at least 2 exposure levels, got {}",
            levels.len()
        )));
    }
    let iso = levels[0].iso();
    let mut means = Vec::new();
    let mut vars = Vec::new();
    for set in levels {
        if set.iso() != iso {
            return Err(Error::InvalidArgument("exposure levels span several ISOs".into()));
        }
        if set.len() < 2 {
            return Err(Error::InvalidArgument(
                "each exposure level needs at least 2 frames".into(),
            ));
        }
        let frames = set.frames();
        let black = frames[0].black_level;
        let m: f64 = frames
            .iter()
            .map(|f| f.data.iter().map(|&v| v as f64).sum::<f64>() / f.data.len() as f64)
            .sum::<f64>()
            / frames.len() as f64;
        let pair_vars: Vec<f64> = frames
            .windows(2)
            .map(|w| {
                let d: Vec<f64> = w[0]
                    .data
                    .iter()
                    .zip(&w[1].data)
                    .map(|(&a, &b)| a as f64 - b as f64)
                    .collect();
                variance(&d) / 2.0
            })
            .collect();
        means.push(m - black);
        vars.push(mean(&pair_vars));
    }
    let fit = fit_line(&means, &vars);
    if !(fit.slope > 0.0) {
        return Err(Error::Invariant(format!(
            "photon transfer slope {} is not positive",
            fit.slope
        )));
    }
    Ok(GainFit {
        gain: fit.slope,
        read_var: fit.intercept,
        r2: fit.r2,
    })
}
