//! Per-pixel dual-branch proxy of pixel-wise noise.
//!
//! ```text
//! out = g(iso) * f_dep(n1) + f_indep(n2)
//! ```
//!
//! Both branches are the same stack of 1x1 (per-pixel) layers: a 1→16 lift,
//! two residual blocks `h + W2 swish(W1 h + b1) + b2`, and a 16→1
//! projection. `g` is a learnable per-ISO gain table. Every operation is
//! pointwise, so output pixel `j` depends only on inputs at pixel `j`.
//!
//! Parameters live in one flat vector: the dependent branch, the independent
//! branch, then one gain per ISO in ascending order.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{read_container, read_toml, write_container, write_toml, Iso, Payload, Plane};
use crate::rng::stream;
use crate::sensor::normal_field;

pub const CHANNELS: usize = 16;
pub const BLOCKS: usize = 2;
const C: usize = CHANNELS;
const CC: usize = C * C;

const LIFT_W: usize = 0;
const LIFT_B: usize = C;
const BLOCKS_AT: usize = 2 * C;
const BLOCK_LEN: usize = 2 * (CC + C);
const PROJ_W: usize = BLOCKS_AT + BLOCKS * BLOCK_LEN;
const PROJ_B: usize = PROJ_W + C;
/// Parameters per branch: 1137.
pub const BRANCH_PARAMS: usize = PROJ_B + 1;

/// Std of the random weight initialization.
pub const INIT_STD: f64 = 1.0;
/// Samples per work unit in forward/backward. Reductions run in chunk order,
/// so results do not depend on the thread count.
const CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyModel {
    params: Vec<f64>,
    isos: Vec<Iso>,
    seed: u64,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn swish_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[inline]
fn arr<const N: usize>(s: &[f64]) -> &[f64; N] {
    s.try_into().expect("slice length matches layer shape")
}

#[inline]
fn affine(w: &[f64; CC], b: &[f64; C], x: &[f64; C]) -> [f64; C] {
    let mut out = *b;
    for (o, acc) in out.iter_mut().enumerate() {
        let row = arr::<C>(&w[o * C..(o + 1) * C]);
        let mut s = 0.0;
        for i in 0..C {
            s += row[i] * x[i];
        }
        *acc += s;
    }
    out
}

/// Borrowed view of one branch's parameters.
#[derive(Clone, Copy)]
struct Branch<'a>(&'a [f64]);

struct BlockCache {
    input: [f64; C],
    pre: [f64; C],
    act: [f64; C],
}

impl<'a> Branch<'a> {
    fn block(&self, k: usize) -> (&'a [f64; CC], &'a [f64; C], &'a [f64; CC], &'a [f64; C]) {
        let base = BLOCKS_AT + k * BLOCK_LEN;
        let p = self.0;
        (
            arr(&p[base..base + CC]),
            arr(&p[base + CC..base + CC + C]),
            arr(&p[base + CC + C..base + 2 * CC + C]),
            arr(&p[base + 2 * CC + C..base + BLOCK_LEN]),
        )
    }

    fn lift(&self, x: f64) -> [f64; C] {
        let w = arr::<C>(&self.0[LIFT_W..LIFT_W + C]);
        let b = arr::<C>(&self.0[LIFT_B..LIFT_B + C]);
        let mut h = [0.0; C];
        for i in 0..C {
            h[i] = w[i] * x + b[i];
        }
        h
    }

    fn project(&self, h: &[f64; C]) -> f64 {
        let w = arr::<C>(&self.0[PROJ_W..PROJ_W + C]);
        let mut y = self.0[PROJ_B];
        for i in 0..C {
            y += w[i] * h[i];
        }
        y
    }

    fn eval(&self, x: f64) -> f64 {
        let mut h = self.lift(x);
        for k in 0..BLOCKS {
            let (w1, b1, w2, b2) = self.block(k);
            let mut a = affine(w1, b1, &h);
            a.iter_mut().for_each(|v| *v = swish(*v));
            let r = affine(w2, b2, &a);
            for i in 0..C {
                h[i] += r[i];
            }
        }
        self.project(&h)
    }

    /// Accumulates `dy * ∂y/∂θ` into `grad` (same layout as the branch) and
    /// returns `y`.
    fn backprop(&self, x: f64, dy: f64, grad: &mut [f64]) -> f64 {
        let mut caches: [BlockCache; BLOCKS] = std::array::from_fn(|_| BlockCache {
            input: [0.0; C],
            pre: [0.0; C],
            act: [0.0; C],
        });
        let mut h = self.lift(x);
        for (k, cache) in caches.iter_mut().enumerate() {
            let (w1, b1, w2, b2) = self.block(k);
            cache.input = h;
            cache.pre = affine(w1, b1, &h);
            for i in 0..C {
                cache.act[i] = swish(cache.pre[i]);
            }
            let r = affine(w2, b2, &cache.act);
            for i in 0..C {
                h[i] += r[i];
            }
        }

        let y = self.project(&h);
        let proj_w = arr::<C>(&self.0[PROJ_W..PROJ_W + C]);
        let mut dh = [0.0; C];
        {
            let g = &mut grad[PROJ_W..PROJ_W + C];
            for i in 0..C {
                g[i] += dy * h[i];
                dh[i] = dy * proj_w[i];
            }
            grad[PROJ_B] += dy;
        }
        for k in (0..BLOCKS).rev() {
            let cache = &caches[k];
            let (w1, _, w2, _) = self.block(k);
            let base = BLOCKS_AT + k * BLOCK_LEN;
            let (g_w1, rest) = grad[base..base + BLOCK_LEN].split_at_mut(CC);
            let (g_b1, rest) = rest.split_at_mut(C);
            let (g_w2, g_b2) = rest.split_at_mut(CC);
            // r = W2 act + b2
            let mut dact = [0.0; C];
            for o in 0..C {
                let d = dh[o];
                g_b2[o] += d;
                let row = &mut g_w2[o * C..(o + 1) * C];
                let wrow = arr::<C>(&w2[o * C..(o + 1) * C]);
                for i in 0..C {
                    row[i] += d * cache.act[i];
                    dact[i] += d * wrow[i];
                }
            }
            // act = swish(W1 input + b1)
            let mut dinput = dh;
            for o in 0..C {
                let d = dact[o] * swish_grad(cache.pre[o]);
                g_b1[o] += d;
                let row = &mut g_w1[o * C..(o + 1) * C];
                let wrow = arr::<C>(&w1[o * C..(o + 1) * C]);
                for i in 0..C {
                    row[i] += d * cache.input[i];
                    dinput[i] += d * wrow[i];
                }
            }
            dh = dinput;
        }
        for i in 0..C {
            grad[LIFT_W + i] += dh[i] * x;
            grad[LIFT_B + i] += dh[i];
        }
        y
    }
}

fn init_branch(rng: &mut impl Rng, out: &mut [f64]) {
    let mut draw = |s: &mut [f64]| {
        s.iter_mut()
            .for_each(|v| *v = INIT_STD * rng.sample::<f64, _>(StandardNormal))
    };
    draw(&mut out[LIFT_W..LIFT_W + C]);
    draw(&mut out[LIFT_B..LIFT_B + C]);
    for k in 0..BLOCKS {
        let base = BLOCKS_AT + k * BLOCK_LEN;
        draw(&mut out[base..base + CC + C]);
        // Residual projection starts at zero so each block is the identity.
        out[base + CC + C..base + BLOCK_LEN].fill(0.0);
    }
    // Projection aligned with the lift so the branch starts as y = x.
    let lift_w: Vec<f64> = out[LIFT_W..LIFT_W + C].to_vec();
    let norm2: f64 = lift_w.iter().map(|v| v * v).sum();
    let mut bias = 0.0;
    for i in 0..C {
        out[PROJ_W + i] = lift_w[i] / norm2;
        bias += out[PROJ_W + i] * out[LIFT_B + i];
    }
    out[PROJ_B] = -bias;
}

impl ProxyModel {
    /// Builds a model whose gain table starts at the calibrated system gain
    /// and whose branches both start as the identity map (unit-variance output
    /// for standard-normal input).
    pub fn init(isos: &[Iso], calibrated_gain: &BTreeMap<Iso, f64>, seed: u64) -> Result<Self> {
        if isos.is_empty() {
            return Err(Error::InvalidArgument("proxy model needs at least one ISO".into()));
        }
        let mut sorted = isos.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut params = vec![0.0; 2 * BRANCH_PARAMS + sorted.len()];
        let mut rng = stream(seed, "ppm/init");
        init_branch(&mut rng, &mut params[..BRANCH_PARAMS]);
        init_branch(&mut rng, &mut params[BRANCH_PARAMS..2 * BRANCH_PARAMS]);
        for (i, iso) in sorted.iter().enumerate() {
            let g = *calibrated_gain.get(iso).ok_or(Error::UnknownIso(*iso))?;
            if !(g > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "calibrated gain at iso {iso} must be positive, got {g}"
                )));
            }
            params[2 * BRANCH_PARAMS + i] = g;
        }
        Ok(Self {
            params,
            isos: sorted,
            seed,
        })
    }

    /// As [`ProxyModel::init`], then rescales both branches from the
    /// per-ISO variance of the target pools. Fitting
    /// `var(iso) = s_dep² K(iso)² + s_indep²` over the calibrated ISOs splits
    /// the noise into its gain-amplified and gain-free parts; each branch's
    /// output projection is scaled to that std, so the model starts as the
    /// best Gaussian fit and the gain table still equals `K`.
    pub fn init_calibrated(
        isos: &[Iso],
        calibrated_gain: &BTreeMap<Iso, f64>,
        pool_variance: &BTreeMap<Iso, f64>,
        seed: u64,
    ) -> Result<Self> {
        let mut m = Self::init(isos, calibrated_gain, seed)?;
        let (dep_std, indep_std) = m.variance_split(pool_variance)?;
        m.scale_branch(0, dep_std);
        m.scale_branch(BRANCH_PARAMS, indep_std);
        Ok(m)
    }

    /// Branch stds `(s_dep, s_indep)` from the variance model above. With one
    /// ISO, or a fit that goes negative, the split falls back to putting all
    /// variance on the amplified branch.
    pub fn variance_split(&self, pool_variance: &BTreeMap<Iso, f64>) -> Result<(f64, f64)> {
        let mut k2 = Vec::new();
        let mut var = Vec::new();
        for &iso in &self.isos {
            let v = *pool_variance.get(&iso).ok_or(Error::UnknownIso(iso))?;
            if !(v > 0.0) {
                return Err(Error::InvalidArgument(format!("pool variance at iso {iso} must be positive")));
            }
            let g = self.gain(iso)?;
            k2.push(g * g);
            var.push(v);
        }
        let all_dep = || {
            let s: f64 = var.iter().zip(&k2).map(|(v, k)| v / k).sum::<f64>() / var.len() as f64;
            (s.sqrt(), 0.0)
        };
        if var.len() < 2 {
            let (d, _) = all_dep();
            return Ok((d, 0.0));
        }
        let fit = crate::stats::fit_line(&k2, &var);
        if !(fit.slope > 0.0) {
            return Ok(all_dep());
        }
        Ok((fit.slope.sqrt(), fit.intercept.max(0.0).sqrt()))
    }

    fn scale_branch(&mut self, offset: usize, factor: f64) {
        for p in &mut self.params[offset + PROJ_W..offset + PROJ_B + 1] {
            *p *= factor;
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn isos(&self) -> &[Iso] {
        &self.isos
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn gain_index(&self, iso: Iso) -> Result<usize> {
        self.isos
            .binary_search(&iso)
            .map(|i| 2 * BRANCH_PARAMS + i)
            .map_err(|_| Error::UnknownIso(iso))
    }

    pub fn gain(&self, iso: Iso) -> Result<f64> {
        Ok(self.params[self.gain_index(iso)?])
    }

    pub fn gain_lut(&self) -> BTreeMap<Iso, f64> {
        self.isos
            .iter()
            .enumerate()
            .map(|(i, &iso)| (iso, self.params[2 * BRANCH_PARAMS + i]))
            .collect()
    }

    /// Gain at any ISO: exact for table entries, log-log linear between
    /// neighbours and log-log extrapolated from the nearest pair outside.
    pub fn gain_interpolated(&self, iso: Iso) -> Result<f64> {
        if let Ok(g) = self.gain(iso) {
            return Ok(g);
        }
        if iso == 0 {
            return Err(Error::InvalidArgument("iso must be positive".into()));
        }
        let lut = self.gain_lut();
        if lut.len() == 1 {
            return Ok(*lut.values().next().unwrap());
        }
        let keys: Vec<Iso> = lut.keys().copied().collect();
        let pos = keys.partition_point(|&k| k < iso);
        let (a, b) = if pos == 0 {
            (keys[0], keys[1])
        } else if pos == keys.len() {
            (keys[pos - 2], keys[pos - 1])
        } else {
            (keys[pos - 1], keys[pos])
        };
        let (ga, gb) = (lut[&a], lut[&b]);
        if !(ga > 0.0 && gb > 0.0) {
            return Err(Error::Invariant("gain table holds a non-positive entry".into()));
        }
        let t = ((iso as f64).ln() - (a as f64).ln()) / ((b as f64).ln() - (a as f64).ln());
        Ok((ga.ln() + t * (gb.ln() - ga.ln())).exp())
    }

    fn dep(&self) -> Branch<'_> {
        Branch(&self.params[..BRANCH_PARAMS])
    }

    fn indep(&self) -> Branch<'_> {
        Branch(&self.params[BRANCH_PARAMS..2 * BRANCH_PARAMS])
    }

    /// Output of the ISO-dependent branch before the gain, per pixel.
    pub fn dep_branch(&self, n1: &[f64]) -> Vec<f64> {
        let b = self.dep();
        n1.iter().map(|&x| b.eval(x)).collect()
    }

    /// Output of the ISO-independent branch, per pixel.
    pub fn indep_branch(&self, n2: &[f64]) -> Vec<f64> {
        let b = self.indep();
        n2.iter().map(|&x| b.eval(x)).collect()
    }

    pub fn forward(&self, n1: &[f64], n2: &[f64], iso: Iso) -> Result<Vec<f64>> {
        self.forward_with_gain(n1, n2, self.gain(iso)?)
    }

    pub fn forward_with_gain(&self, n1: &[f64], n2: &[f64], gain: f64) -> Result<Vec<f64>> {
        if n1.len() != n2.len() {
            return Err(Error::InvalidArgument(format!(
                "input fields differ in size: {} vs {}",
                n1.len(),
                n2.len()
            )));
        }
        let (dep, indep) = (self.dep(), self.indep());
        let chunks: Vec<Vec<f64>> = n1
            .par_chunks(CHUNK)
            .zip(n2.par_chunks(CHUNK))
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(&x1, &x2)| gain * dep.eval(x1) + indep.eval(x2))
                    .collect()
            })
            .collect();
        Ok(chunks.concat())
    }

    /// Gradient of `Σ_j dout[j] * out[j]` with respect to every parameter.
    pub fn backward(&self, n1: &[f64], n2: &[f64], iso: Iso, dout: &[f64]) -> Result<Vec<f64>> {
        if n1.len() != n2.len() || n1.len() != dout.len() {
            return Err(Error::InvalidArgument("backward inputs differ in size".into()));
        }
        let gi = self.gain_index(iso)?;
        let gain = self.params[gi];
        let (dep, indep) = (self.dep(), self.indep());
        let partials: Vec<(Vec<f64>, f64)> = n1
            .par_chunks(CHUNK)
            .zip(n2.par_chunks(CHUNK))
            .zip(dout.par_chunks(CHUNK))
            .map(|((a, b), d)| {
                let mut g = vec![0.0; 2 * BRANCH_PARAMS];
                let (gd, gn) = g.split_at_mut(BRANCH_PARAMS);
                let mut g_gain = 0.0;
                for ((&x1, &x2), &dy) in a.iter().zip(b).zip(d) {
                    if dy == 0.0 {
                        continue;
                    }
                    g_gain += dy * dep.backprop(x1, dy * gain, gd);
                    indep.backprop(x2, dy, gn);
                }
                (g, g_gain)
            })
            .collect();
        let mut grad = vec![0.0; self.params.len()];
        for (g, g_gain) in partials {
            grad[..2 * BRANCH_PARAMS]
                .iter_mut()
                .zip(&g)
                .for_each(|(a, b)| *a += b);
            grad[gi] += g_gain;
        }
        Ok(grad)
    }

    /// Draws `n1`, `n2` ~ N(0, 1) from labelled streams and runs the model.
    pub fn sample(&self, count: usize, iso: Iso, seed: u64) -> Result<Vec<f64>> {
        self.sample_with_gain(count, self.gain(iso)?, seed)
    }

    pub fn sample_with_gain(&self, count: usize, gain: f64, seed: u64) -> Result<Vec<f64>> {
        let (n1, n2) = standard_inputs(count, seed);
        self.forward_with_gain(&n1, &n2, gain)
    }

    /// Noise field of the given shape; uncalibrated ISOs use the
    /// interpolated gain.
    pub fn sample_field(&self, height: usize, width: usize, iso: Iso, seed: u64) -> Result<Plane> {
        let gain = self.gain_interpolated(iso)?;
        Plane::new(height, width, self.sample_with_gain(height * width, gain, seed)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = Vec::new();
        for (bname, offset) in [("dep", 0), ("indep", BRANCH_PARAMS)] {
            for t in tensor_layout() {
                let file = format!("{bname}.{}.pnnf", t.name);
                let start = offset + t.offset;
                let data = self.params[start..start + t.rows * t.cols].to_vec();
                write_container(&dir.join(&file), t.rows, t.cols, &Payload::F64(data))?;
                tensors.push(TensorEntry {
                    name: format!("{bname}.{}", t.name),
                    rows: t.rows,
                    cols: t.cols,
                    file,
                });
            }
        }
        let manifest = CheckpointManifest {
            channels: CHANNELS,
            blocks: BLOCKS,
            seed: self.seed,
            param_count: self.params.len(),
            gain_lut: self
                .gain_lut()
                .into_iter()
                .map(|(iso, gain)| GainEntry { iso, gain })
                .collect(),
            tensors,
        };
        write_toml(&dir.join("model.toml"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.toml");
        let m: CheckpointManifest = read_toml(&path)?;
        if m.channels != CHANNELS || m.blocks != BLOCKS {
            return Err(Error::parse(
                &path,
                format!("unsupported layout {} channels / {} blocks", m.channels, m.blocks),
            ));
        }
        let isos: Vec<Iso> = m.gain_lut.iter().map(|g| g.iso).collect();
        if isos.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::parse(&path, "gain table must be strictly ascending"));
        }
        let mut params = vec![0.0; 2 * BRANCH_PARAMS + isos.len()];
        for (bname, offset) in [("dep", 0), ("indep", BRANCH_PARAMS)] {
            for t in tensor_layout() {
                let name = format!("{bname}.{}", t.name);
                let entry = m
                    .tensors
                    .iter()
                    .find(|e| e.name == name)
                    .ok_or_else(|| Error::parse(&path, format!("missing tensor {name}")))?;
                let (rows, cols, payload) = read_container(&dir.join(&entry.file))?;
                if (rows, cols) != (t.rows, t.cols) {
                    return Err(Error::Shape {
                        expected: (t.rows, t.cols),
                        found: (rows, cols),
                    });
                }
                let start = offset + t.offset;
                params[start..start + rows * cols].copy_from_slice(&payload.to_f64());
            }
        }
        for (i, g) in m.gain_lut.iter().enumerate() {
            params[2 * BRANCH_PARAMS + i] = g.gain;
        }
        Ok(Self {
            params,
            isos,
            seed: m.seed,
        })
    }
}

/// Two independent standard-normal input fields.
pub fn standard_inputs(count: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    (
        normal_field(&mut stream(seed, "ppm/n1"), count),
        normal_field(&mut stream(seed, "ppm/n2"), count),
    )
}

struct TensorSlot {
    name: String,
    offset: usize,
    rows: usize,
    cols: usize,
}

fn tensor_layout() -> Vec<TensorSlot> {
    let slot = |name: String, offset, rows, cols| TensorSlot {
        name,
        offset,
        rows,
        cols,
    };
    let mut v = vec![
        slot("lift.weight".into(), LIFT_W, C, 1),
        slot("lift.bias".into(), LIFT_B, C, 1),
    ];
    for k in 0..BLOCKS {
        let base = BLOCKS_AT + k * BLOCK_LEN;
        v.push(slot(format!("block{k}.w1"), base, C, C));
        v.push(slot(format!("block{k}.b1"), base + CC, C, 1));
        v.push(slot(format!("block{k}.w2"), base + CC + C, C, C));
        v.push(slot(format!("block{k}.b2"), base + 2 * CC + C, C, 1));
    }
    v.push(slot("proj.weight".into(), PROJ_W, 1, C));
    v.push(slot("proj.bias".into(), PROJ_B, 1, 1));
    v
}

#[derive(Serialize, Deserialize)]
struct GainEntry {
    iso: Iso,
    gain: f64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    channels: usize,
    blocks: usize,
    seed: u64,
    param_count: usize,
    gain_lut: Vec<GainEntry>,
    tensors: Vec<TensorEntry>,
}
