//! Differentiable distribution loss.
//!
//! Both distributions are represented by their sorted samples. The empirical
//! CDF is the piecewise-linear curve through `(q_i, i/n)`; the quantile
//! function is its inverse. Queries land between two adjacent sorted samples,
//! so each query's gradient touches at most two generated samples, and the
//! sort only contributes a fixed permutation.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::stats::{normal_cdf, normal_ppf};

/// Ascending samples with the permutation back to input order.
#[derive(Debug, Clone, PartialEq)]
pub struct SortedSamples {
    values: Vec<f64>,
    /// `permutation[j]` is the input index of `values[j]`.
    permutation: Vec<usize>,
}

/// A CDF evaluation with the partial derivatives of `p` with respect to the
/// two bracketing sorted samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdfEval {
    pub p: f64,
    /// Sorted index of the upper bracketing sample (0-based), when interior.
    pub upper: Option<usize>,
    pub dp_dlower: f64,
    pub dp_dupper: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileEval {
    pub q: f64,
    /// Sorted index of the lower interpolation node.
    pub lower: usize,
    /// Weight of `values[lower + 1]`; zero at the last node.
    pub frac: f64,
}

impl SortedSamples {
    pub fn new(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no samples".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("samples".into()));
        }
        let mut permutation: Vec<usize> = (0..samples.len()).collect();
        permutation.sort_by(|&a, &b| samples[a].total_cmp(&samples[b]).then(a.cmp(&b)));
        let values = permutation.iter().map(|&i| samples[i]).collect();
        Ok(Self {
            values,
            permutation,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Empirical CDF at `q`: 0 below the minimum, 1 at or above the maximum,
    /// `(i - (q_i - q) / (q_i - q_{i-1})) / n` in between, where `i` is the
    /// 1-based index of the smallest sample exceeding `q`.
    pub fn ecdf_query(&self, q: f64) -> f64 {
        self.ecdf_eval(q).p
    }

    pub fn ecdf_eval(&self, q: f64) -> CdfEval {
        let v = &self.values;
        let n = v.len();
        if q < v[0] {
            return CdfEval {
                p: 0.0,
                upper: None,
                dp_dlower: 0.0,
                dp_dupper: 0.0,
            };
        }
        if q >= v[n - 1] {
            return CdfEval {
                p: 1.0,
                upper: None,
                dp_dlower: 0.0,
                dp_dupper: 0.0,
            };
        }
        // First sample strictly above q; at least 1 since v[0] <= q.
        let i = v.partition_point(|&x| x <= q);
        let (lo, hi) = (v[i - 1], v[i]);
        let d = hi - lo;
        let nf = n as f64;
        let rank = (i + 1) as f64;
        CdfEval {
            p: (rank - (hi - q) / d) / nf,
            upper: Some(i),
            dp_dlower: -(hi - q) / (nf * d * d),
            dp_dupper: -(q - lo) / (nf * d * d),
        }
    }

    /// Piecewise-linear inverse of [`ecdf_query`](Self::ecdf_query):
    /// `q(i/n) = q_i`, and `p <= 1/n` maps to the minimum.
    pub fn quantile_query(&self, p: f64) -> Result<f64> {
        Ok(self.quantile_eval(p)?.q)
    }

    pub fn quantile_eval(&self, p: f64) -> Result<QuantileEval> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "quantile probability must lie in (0, 1], got {p}"
            )));
        }
        let v = &self.values;
        let n = v.len();
        let pn = p * n as f64;
        if pn <= 1.0 || n == 1 {
            return Ok(QuantileEval {
                q: v[0],
                lower: 0,
                frac: 0.0,
            });
        }
        // 1-based node index i with pn in [i, i + 1).
        let i = pn.floor() as usize;
        if i >= n {
            return Ok(QuantileEval {
                q: v[n - 1],
                lower: n - 1,
                frac: 0.0,
            });
        }
        let frac = pn - i as f64;
        Ok(QuantileEval {
            q: v[i - 1] + frac * (v[i] - v[i - 1]),
            lower: i - 1,
            frac,
        })
    }
}

/// Query points for the two loss terms.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub cdf_queries: Vec<f64>,
    pub quantile_queries: Vec<f64>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.cdf_queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cdf_queries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryConfig {
    pub count: usize,
    /// Std of the Gaussian jitter around the baseline grid, in units of
    /// `scale`.
    pub perturb_std: f64,
    /// CDF queries are clipped to `center ± clip * scale`.
    pub clip: f64,
    /// Target sample scale (std of the real samples).
    pub scale: f64,
    pub center: f64,
    /// Quantile queries are kept inside `[tail_eps, 1 - tail_eps]`.
    pub tail_eps: f64,
}

impl QueryConfig {
    pub const DEFAULT_PERTURB_STD: f64 = 0.05;
    pub const DEFAULT_CLIP: f64 = 6.0;

    /// Defaults for `count` queries against `n` target samples of spread
    /// `scale`.
    pub fn new(count: usize, scale: f64, n: usize) -> Self {
        Self {
            count,
            perturb_std: Self::DEFAULT_PERTURB_STD,
            clip: Self::DEFAULT_CLIP,
            scale,
            center: 0.0,
            tail_eps: 1.0 / (2.0 * n.max(1) as f64),
        }
    }
}

/// Jittered normal-grid queries. The baseline is `u_k = k / (N + 1)` pushed
/// through the standard-normal quantile function.
pub fn sample_queries(cfg: &QueryConfig, seed: u64) -> Result<QuerySet> {
    if cfg.count < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 queries, got {}",
            cfg.count
        )));
    }
    if !(cfg.clip > 0.0) || !(cfg.scale > 0.0) || !(cfg.perturb_std >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "clip, scale must be positive and perturb_std non-negative: {cfg:?}"
        )));
    }
    if !(cfg.tail_eps > 0.0 && cfg.tail_eps < 0.5) {
        return Err(Error::InvalidArgument(format!(
            "tail_eps must lie in (0, 0.5), got {}",
            cfg.tail_eps
        )));
    }
    let mut cdf_rng = stream(seed, "queries/cdf");
    let mut q_rng = stream(seed, "queries/quantile");
    let denom = (cfg.count + 1) as f64;
    let mut cdf_queries = Vec::with_capacity(cfg.count);
    let mut quantile_queries = Vec::with_capacity(cfg.count);
    for k in 1..=cfg.count {
        let u = k as f64 / denom;
        let z = normal_ppf(u);
        let (zc, p) = if cfg.perturb_std > 0.0 {
            let jc: f64 = cdf_rng.sample(StandardNormal);
            let jq: f64 = q_rng.sample(StandardNormal);
            (z + cfg.perturb_std * jc, normal_cdf(z + cfg.perturb_std * jq))
        } else {
            (z, u)
        };
        cdf_queries.push(cfg.center + cfg.scale * zc.clamp(-cfg.clip, cfg.clip));
        quantile_queries.push(p.clamp(cfg.tail_eps, 1.0 - cfg.tail_eps));
    }
    Ok(QuerySet {
        cdf_queries,
        quantile_queries,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdlLoss {
    pub total: f64,
    pub cdf: f64,
    pub quantile: f64,
    /// ∂total/∂out, in the input order of `out`.
    pub grad: Vec<f64>,
    /// Hash of the sort permutation, query brackets and absolute-value signs.
    /// Two evaluations with equal signatures lie on the same smooth piece of
    /// the loss.
    pub signature: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cdf: f64,
    pub quantile: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cdf: 1.0,
            quantile: 1.0,
        }
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn push(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `L_cdf + L_quantile` with the gradient with respect to `out`.
pub fn ddl_loss(out: &[f64], real: &SortedSamples, qs: &QuerySet) -> Result<DdlLoss> {
    ddl_loss_weighted(out, real, qs, LossWeights::default())
}

/// As [`ddl_loss`], with separate weights on the two terms. The reported
/// `cdf` and `quantile` parts are unweighted.
pub fn ddl_loss_weighted(
    out: &[f64],
    real: &SortedSamples,
    qs: &QuerySet,
    weights: LossWeights,
) -> Result<DdlLoss> {
    let sorted = SortedSamples::new(out)?;
    let n = sorted.len();
    let mut grad_sorted = vec![0.0; n];
    let mut sig = Fnv::new();
    for &i in sorted.permutation() {
        sig.push(i as u64);
    }

    let mut l_cdf = 0.0;
    if weights.cdf != 0.0 {
        for &q in &qs.cdf_queries {
            let o = sorted.ecdf_eval(q);
            let r = real.ecdf_query(q);
            let diff = o.p - r;
            let s = sign(diff);
            l_cdf += diff.abs();
            sig.push(o.upper.map_or(u64::MAX, |u| u as u64));
            sig.push((s + 1.0) as u64);
            if let Some(u) = o.upper {
                grad_sorted[u - 1] += weights.cdf * s * o.dp_dlower;
                grad_sorted[u] += weights.cdf * s * o.dp_dupper;
            }
        }
    }

    let mut l_q = 0.0;
    if weights.quantile != 0.0 {
        for &p in &qs.quantile_queries {
            let o = sorted.quantile_eval(p)?;
            let r = real.quantile_query(p)?;
            let diff = o.q - r;
            let s = sign(diff);
            l_q += diff.abs();
            sig.push(o.lower as u64);
            sig.push((s + 1.0) as u64);
            grad_sorted[o.lower] += weights.quantile * s * (1.0 - o.frac);
            if o.frac > 0.0 {
                grad_sorted[o.lower + 1] += weights.quantile * s * o.frac;
            }
        }
    }

    let mut grad = vec![0.0; n];
    for (j, &i) in sorted.permutation().iter().enumerate() {
        grad[i] = grad_sorted[j];
    }
    Ok(DdlLoss {
        total: weights.cdf * l_cdf + weights.quantile * l_q,
        cdf: l_cdf,
        quantile: l_q,
        grad,
        signature: sig.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s3() -> SortedSamples {
        SortedSamples::new(&[2.0, -1.0, 0.0]).unwrap()
    }

    #[test]
    fn worked_ecdf_values() {
        let s = s3();
        assert_eq!(s.values(), &[-1.0, 0.0, 2.0]);
        assert_eq!(s.permutation(), &[1, 2, 0]);
        assert!((s.ecdf_query(1.0) - 2.5 / 3.0).abs() < 1e-15);
        assert!((s.ecdf_query(0.0) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.ecdf_query(-1.5), 0.0);
        assert_eq!(s.ecdf_query(2.0), 1.0);
        assert_eq!(s.ecdf_query(7.0), 1.0);
    }

    #[test]
    fn worked_quantile_values() {
        let s = s3();
        assert_eq!(s.quantile_query(2.0 / 3.0).unwrap(), 0.0);
        assert!((s.quantile_query(5.0 / 6.0).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(s.quantile_query(1.0).unwrap(), 2.0);
        assert_eq!(s.quantile_query(0.1).unwrap(), -1.0);
        assert!(s.quantile_query(0.0).is_err());
        assert!(s.quantile_query(1.5).is_err());
    }

    #[test]
    fn deterministic_grid_without_perturbation() {
        let cfg = QueryConfig {
            perturb_std: 0.0,
            ..QueryConfig::new(9, 2.0, 100)
        };
        let a = sample_queries(&cfg, 1).unwrap();
        let b = sample_queries(&cfg, 2).unwrap();
        assert_eq!(a, b);
        for (k, (&q, &p)) in a.cdf_queries.iter().zip(&a.quantile_queries).enumerate() {
            let u = (k + 1) as f64 / 10.0;
            assert_eq!(p, u);
            assert!((q - 2.0 * normal_ppf(u)).abs() < 1e-15);
        }
        assert!(sample_queries(&QueryConfig::new(1, 1.0, 10), 0).is_err());
        assert!(sample_queries(&QueryConfig { clip: 0.0, ..cfg }, 0).is_err());
    }

    #[test]
    fn identical_samples_give_zero_loss_and_gradient() {
        let out = [0.3, -1.2, 2.2, 0.9, -0.1, 1.4];
        let real = SortedSamples::new(&out).unwrap();
        let qs = sample_queries(&QueryConfig::new(50, 1.0, out.len()), 3).unwrap();
        let l = ddl_loss(&out, &real, &qs).unwrap();
        assert_eq!(l.total, 0.0);
        assert!(l.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn shift_gives_n_times_abs_shift() {
        let real_v: Vec<f64> = (0..40).map(|i| ((i * 37) % 40) as f64 * 0.25 - 3.0).collect();
        let real = SortedSamples::new(&real_v).unwrap();
        let c = -0.75;
        let out: Vec<f64> = real_v.iter().map(|v| v + c).collect();
        let mut qs = sample_queries(&QueryConfig::new(64, 1.0, 40), 4).unwrap();
        qs.cdf_queries.clear();
        let l = ddl_loss(&out, &real, &qs).unwrap();
        assert!((l.quantile - 64.0 * c.abs()).abs() < 1e-12);
        assert_eq!(l.cdf, 0.0);
    }

    proptest! {
        #[test]
        fn ecdf_monotone_and_bounded(mut xs in prop::collection::vec(-100.0f64..100.0, 1..40),
                                     qs in prop::collection::vec(-120.0f64..120.0, 2..40)) {
            let s = SortedSamples::new(&xs).unwrap();
            let mut qs = qs;
            qs.sort_by(f64::total_cmp);
            let ps: Vec<f64> = qs.iter().map(|&q| s.ecdf_query(q)).collect();
            prop_assert!(ps.iter().all(|p| (0.0..=1.0).contains(p)));
            prop_assert!(ps.windows(2).all(|w| w[0] <= w[1] + 1e-15));
            xs.sort_by(f64::total_cmp);
            prop_assert_eq!(s.values(), &xs[..]);
        }

        #[test]
        fn quantile_inverts_ecdf(xs in prop::collection::btree_set(-1000i32..1000, 2..50), t in 0.0f64..1.0) {
            let v: Vec<f64> = xs.iter().map(|&x| x as f64 * 0.37).collect();
            let s = SortedSamples::new(&v).unwrap();
            let (lo, hi) = (v[0], v[v.len() - 1]);
            let q = lo + t * (hi - lo);
            prop_assume!(q > lo && q < hi);
            let back = s.quantile_query(s.ecdf_query(q)).unwrap();
            prop_assert!((back - q).abs() < 1e-9, "{} vs {}", back, q);
        }

        #[test]
        fn loss_invariant_under_permutation(xs in prop::collection::vec(-5.0f64..5.0, 4..30), seed in any::<u64>()) {
            let real = SortedSamples::new(&[-1.0, -0.5, 0.0, 0.4, 1.1, 2.0]).unwrap();
            let qs = sample_queries(&QueryConfig::new(16, 1.0, 6), seed).unwrap();
            let a = ddl_loss(&xs, &real, &qs).unwrap();
            let mut rev = xs.clone();
            rev.reverse();
            let b = ddl_loss(&rev, &real, &qs).unwrap();
            prop_assert!((a.total - b.total).abs() < 1e-12);
            // gradient follows the samples
            for (i, g) in a.grad.iter().enumerate() {
                prop_assert!((g - b.grad[xs.len() - 1 - i]).abs() < 1e-12);
            }
        }

        #[test]
        fn clipped_cdf_queries(seed in any::<u64>(), clip in 0.5f64..4.0) {
            let cfg = QueryConfig { clip, perturb_std: 0.5, ..QueryConfig::new(200, 3.0, 50) };
            let qs = sample_queries(&cfg, seed).unwrap();
            prop_assert!(qs.cdf_queries.iter().all(|q| q.abs() <= clip * 3.0 + 1e-12));
            prop_assert!(qs.quantile_queries.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn cdf_gradient_touches_two_samples_per_query() {
        let out: Vec<f64> = (0..30).map(|i| (i as f64 * 0.731).sin() * 3.0).collect();
        let real = SortedSamples::new(&[0.0, 1.0, 2.0]).unwrap();
        let qs = QuerySet {
            cdf_queries: vec![0.5],
            quantile_queries: vec![],
        };
        let l = ddl_loss(&out, &real, &qs).unwrap();
        assert!(l.grad.iter().filter(|g| **g != 0.0).count() <= 2);
    }
}
