//! Distribution-fidelity metrics and plot-data emission.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::stats::{fit_line, normal_ppf, std_dev};

pub const DEFAULT_QQ_POINTS: usize = 1000;
/// Default KLD bin width as a fraction of the reference sample std.
pub const DEFAULT_BIN_FRACTION: f64 = 0.1;
const MAX_BINS: usize = 10_000_000;

struct Binning {
    lo: f64,
    width: f64,
    bins: usize,
}

fn shared_binning(a: &[f64], b: &[f64], bin_width: f64) -> Result<Binning> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("kld needs non-empty sample sets".into()));
    }
    if !(bin_width > 0.0) || !bin_width.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "bin width must be positive, got {bin_width}"
        )));
    }
    let (lo, hi) = a
        .iter()
        .chain(b)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::NonFinite("kld samples".into()));
    }
    let bins_f = ((hi - lo) / bin_width).floor() + 1.0;
    if bins_f > MAX_BINS as f64 {
        return Err(Error::InvalidArgument(format!(
            "bin width {bin_width} yields {bins_f} bins"
        )));
    }
    Ok(Binning {
        lo,
        width: bin_width,
        bins: bins_f as usize,
    })
}

fn histogram(xs: &[f64], b: &Binning) -> Vec<f64> {
    let mut counts = vec![0.0; b.bins];
    for &x in xs {
        let i = (((x - b.lo) / b.width) as usize).min(b.bins - 1);
        counts[i] += 1.0;
    }
    let n = xs.len() as f64;
    counts.iter_mut().for_each(|c| *c /= n);
    counts
}

fn smoothed(p: &[f64], n: usize) -> Vec<f64> {
    let eps = 1.0 / (10.0 * n as f64);
    let total: f64 = p.iter().map(|v| v + eps).sum();
    p.iter().map(|v| (v + eps) / total).collect()
}

/// Discrete KL(hist_a ‖ hist_b) over shared bins of width `bin_width`.
///
/// Both histograms get an additive `1/(10 n)` per bin before normalization so
/// empty bins stay finite.
pub fn kld(samples_a: &[f64], samples_b: &[f64], bin_width: f64) -> Result<f64> {
    let binning = shared_binning(samples_a, samples_b, bin_width)?;
    let pa = smoothed(&histogram(samples_a, &binning), samples_a.len());
    let pb = smoothed(&histogram(samples_b, &binning), samples_b.len());
    let d: f64 = pa
        .iter()
        .zip(&pb)
        .map(|(&p, &q)| if p > 0.0 { p * (p / q).ln() } else { 0.0 })
        .sum();
    Ok(d.max(0.0))
}

/// KLD with the default bin width, `0.1 * std(samples_b)`.
pub fn kld_default(samples_a: &[f64], samples_b: &[f64]) -> Result<f64> {
    let s = std_dev(samples_b);
    if !(s > 0.0) {
        return Err(Error::InvalidArgument(
            "reference samples have zero spread".into(),
        ));
    }
    kld(samples_a, samples_b, DEFAULT_BIN_FRACTION * s)
}

/// Linearly interpolated empirical quantile of ascending `sorted` at `u`.
pub fn sorted_quantile(sorted: &[f64], u: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = u.clamp(0.0, 1.0) * (n - 1) as f64;
    let i = (pos.floor() as usize).min(n - 2);
    let f = pos - i as f64;
    sorted[i] + f * (sorted[i + 1] - sorted[i])
}

fn sorted_copy(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn qq_pairs(a: &[f64], b: &[f64], n_quantiles: usize) -> Vec<(f64, f64, f64)> {
    let sa = sorted_copy(a);
    let sb = sorted_copy(b);
    (1..=n_quantiles)
        .map(|k| {
            let u = k as f64 / (n_quantiles + 1) as f64;
            (u, sorted_quantile(&sa, u), sorted_quantile(&sb, u))
        })
        .collect()
}

/// R² of the least-squares line through paired quantiles at
/// `u = k / (n_quantiles + 1)`. `None` for degenerate samples.
pub fn qq_r2(samples_a: &[f64], samples_b: &[f64], n_quantiles: usize) -> Result<Option<f64>> {
    if n_quantiles < 10 {
        return Err(Error::InvalidArgument(format!(
            "need at least 10 quantiles, got {n_quantiles}"
        )));
    }
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(Error::InvalidArgument("qq_r2 needs non-empty samples".into()));
    }
    let pairs = qq_pairs(samples_a, samples_b, n_quantiles);
    let x: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let y: Vec<f64> = pairs.iter().map(|p| p.2).collect();
    Ok(fit_line(&x, &y).r2)
}

/// R² of ordered samples against standard-normal quantiles at Blom plotting
/// positions `(i - 3/8) / (n + 1/4)`. `None` below 30 samples or when the
/// samples are constant.
pub fn gaussian_probplot_r2(samples: &[f64]) -> Option<f64> {
    let n = samples.len();
    if n < 30 {
        return None;
    }
    let sorted = sorted_copy(samples);
    let theo: Vec<f64> = (1..=n)
        .map(|i| normal_ppf((i as f64 - 0.375) / (n as f64 + 0.25)))
        .collect();
    fit_line(&theo, &sorted).r2
}

/// Everything the CSV writer emits for one pair of sample sets.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionReport {
    pub kld: f64,
    pub qq_r2: Option<f64>,
    pub probplot_r2: Option<f64>,
    pub n_a: usize,
    pub n_b: usize,
    pub bin_width: f64,
    /// `(bin_center, p_a, p_b)`, each histogram summing to one.
    pub histogram: Vec<(f64, f64, f64)>,
    /// `(u, quantile_a, quantile_b)`, ascending in `u`.
    pub qq_points: Vec<(f64, f64, f64)>,
}

/// Builds a report with the default bin width and quantile count.
pub fn build_report(samples_a: &[f64], samples_b: &[f64]) -> Result<DistributionReport> {
    let s = std_dev(samples_b);
    if !(s > 0.0) {
        return Err(Error::InvalidArgument(
            "reference samples have zero spread".into(),
        ));
    }
    build_report_with(samples_a, samples_b, DEFAULT_BIN_FRACTION * s, DEFAULT_QQ_POINTS)
}

pub fn build_report_with(
    samples_a: &[f64],
    samples_b: &[f64],
    bin_width: f64,
    n_quantiles: usize,
) -> Result<DistributionReport> {
    let binning = shared_binning(samples_a, samples_b, bin_width)?;
    let ha = histogram(samples_a, &binning);
    let hb = histogram(samples_b, &binning);
    let histogram = ha
        .iter()
        .zip(&hb)
        .enumerate()
        .map(|(i, (&a, &b))| (binning.lo + (i as f64 + 0.5) * binning.width, a, b))
        .collect();
    Ok(DistributionReport {
        kld: kld(samples_a, samples_b, bin_width)?,
        qq_r2: qq_r2(samples_a, samples_b, n_quantiles)?,
        probplot_r2: gaussian_probplot_r2(samples_a),
        n_a: samples_a.len(),
        n_b: samples_b.len(),
        bin_width,
        histogram,
        qq_points: qq_pairs(samples_a, samples_b, n_quantiles),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const HIST_HEADER: &str = "bin_center,density_a,density_b";
pub const QQ_HEADER: &str = "u,quantile_a,quantile_b";
pub const SUMMARY_HEADER: &str = "kld,qq_r2,probplot_r2,n_a,n_b";

/// One summary row, in `SUMMARY_HEADER` order. Absent R² values are empty.
pub fn summary_row(report: &DistributionReport) -> String {
    format!(
        "{},{},{},{},{}",
        report.kld,
        opt(report.qq_r2),
        opt(report.probplot_r2),
        report.n_a,
        report.n_b
    )
}

/// Writes `hist.csv`, `qq.csv` and `summary.csv` into `dir`.
pub fn emit_report(report: &DistributionReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut hist = String::from(HIST_HEADER);
    hist.push('\n');
    for (c, a, b) in &report.histogram {
        let _ = writeln!(hist, "{c},{a},{b}");
    }
    let mut qq = String::from(QQ_HEADER);
    qq.push('\n');
    for (u, a, b) in &report.qq_points {
        let _ = writeln!(qq, "{u},{a},{b}");
    }
    let summary = format!("{SUMMARY_HEADER}\n{}\n", summary_row(report));
    for (name, body) in [("hist.csv", hist), ("qq.csv", qq), ("summary.csv", summary)] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Parses a CSV written by [`emit_report`] into its header and numeric rows.
/// Empty cells become NaN.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(path, "empty csv"))?
        .split(',')
        .map(str::to_owned)
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let row = line
            .split(',')
            .map(|c| {
                if c.is_empty() {
                    Ok(f64::NAN)
                } else {
                    c.parse::<f64>().map_err(|e| Error::parse(path, e))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != header.len() {
            return Err(Error::parse(path, "row width differs from header"));
        }
        rows.push(row);
    }
    Ok((header, rows))
}
