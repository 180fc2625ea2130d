//! Optimization loop for the proxy model: cosine-annealed Adam over per-ISO
//! step budgets, driven by the distribution loss.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ddl::{ddl_loss_weighted, sample_queries, DdlLoss, LossWeights, QueryConfig, QuerySet, SortedSamples};
use crate::error::{Error, Result};
use crate::frame::Iso;
use crate::pnd::PixelNoiseSamples;
use crate::ppm::{standard_inputs, ProxyModel};
use crate::rng::{child_seed, stream};
use crate::stats::std_dev;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps_per_iso: usize,
    /// Side of the square training patch; each step draws `patch²` targets.
    pub patch: usize,
    pub queries_per_step: usize,
    pub lr_base: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub perturb_std: f64,
    pub clip: f64,
    pub schedule: IsoSchedule,
    pub seed: u64,
}

/// How the per-ISO step budgets are laid out in time. Both visit ISOs in
/// ascending order and give each ISO its own cosine cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IsoSchedule {
    /// Step `s` of every ISO's cycle runs before step `s + 1` of any.
    #[default]
    Interleaved,
    /// Each ISO's full cycle runs before the next ISO starts. With a shared
    /// model, later passes drag the low-ISO fit away.
    Sequential,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps_per_iso: 1000,
            patch: 1024,
            queries_per_step: 1_000_000,
            lr_base: 1e-2,
            lr_min: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            perturb_std: QueryConfig::DEFAULT_PERTURB_STD,
            clip: QueryConfig::DEFAULT_CLIP,
            schedule: IsoSchedule::Interleaved,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min < self.lr_base && self.lr_min >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= lr_min < lr_base, got {} / {}",
                self.lr_min, self.lr_base
            )));
        }
        if self.steps_per_iso == 0 || self.patch == 0 {
            return Err(Error::InvalidArgument("steps and patch must be positive".into()));
        }
        if self.queries_per_step < 2 {
            return Err(Error::InvalidArgument("need at least 2 queries per step".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::InvalidArgument("invalid Adam hyper-parameters".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// Cosine anneal from `lr_base` at step 0 to `lr_min` at `total - 1`.
pub fn lr_schedule(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    if total <= 1 {
        return cfg.lr_base;
    }
    let t = step.min(total - 1) as f64 / (total - 1) as f64;
    cfg.lr_min + 0.5 * (cfg.lr_base - cfg.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Bias-corrected Adam. Leaves everything untouched if any gradient is not
/// finite.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Length {
            expected: params.len(),
            found: grads.len(),
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient of parameter {i} is {} at step {}",
            grads[i],
            state.step + 1
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + cfg.adam_eps);
    }
    Ok(())
}

/// Loss of the model output against a sorted target, with the gradient
/// with respect to every model parameter.
pub fn loss_and_grad(
    model: &ProxyModel,
    n1: &[f64],
    n2: &[f64],
    iso: Iso,
    target: &SortedSamples,
    queries: &QuerySet,
    weights: LossWeights,
) -> Result<(DdlLoss, Vec<f64>)> {
    let out = model.forward(n1, n2, iso)?;
    let loss = ddl_loss_weighted(&out, target, queries, weights)?;
    let grad = model.backward(n1, n2, iso, &loss.grad)?;
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    /// Global step counter across all ISO passes.
    pub step: usize,
    pub iso: Iso,
    pub l_cdf: f64,
    pub l_quantile: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "step,iso,L_cdf,L_quantile,lr";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        let mut body = String::from(LOG_HEADER);
        body.push('\n');
        for e in &self.entries {
            body.push_str(&format!(
                "{},{},{:e},{:e},{:e}\n",
                e.step, e.iso, e.l_cdf, e.l_quantile, e.lr
            ));
        }
        f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn for_iso(&self, iso: Iso) -> impl Iterator<Item = &LogEntry> {
        self.entries.iter().filter(move |e| e.iso == iso)
    }
}

/// Uniform draw with replacement.
pub fn draw_batch(pool: &[f64], count: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, "train/batch");
    (0..count).map(|_| pool[rng.random_range(0..pool.len())]).collect()
}

/// Everything one optimization step consumes, derived from the run seed.
pub struct StepData {
    pub n1: Vec<f64>,
    pub n2: Vec<f64>,
    pub target: SortedSamples,
    pub queries: QuerySet,
}

pub fn step_data(pool: &[f64], iso: Iso, step: usize, cfg: &TrainConfig) -> Result<StepData> {
    let count = cfg.patch * cfg.patch;
    let seed = child_seed(cfg.seed, &format!("train/{iso}/{step}"));
    let batch = draw_batch(pool, count, seed);
    let scale = std_dev(&batch);
    if !(scale > 0.0) {
        return Err(Error::Invariant(format!("target batch at iso {iso} has zero spread")));
    }
    let qc = QueryConfig {
        perturb_std: cfg.perturb_std,
        clip: cfg.clip,
        ..QueryConfig::new(cfg.queries_per_step, scale, count)
    };
    let (n1, n2) = standard_inputs(count, seed);
    Ok(StepData {
        n1,
        n2,
        target: SortedSamples::new(&batch)?,
        queries: sample_queries(&qc, seed)?,
    })
}

/// Trains a shared model over all its ISOs, ascending, one cosine cycle each,
/// laid out per `cfg.schedule`.
pub fn train(
    model: &ProxyModel,
    pools: &BTreeMap<Iso, PixelNoiseSamples>,
    cfg: &TrainConfig,
) -> Result<(ProxyModel, TrainLog)> {
    cfg.validate()?;
    for &iso in model.isos() {
        let pool = pools.get(&iso).ok_or(Error::UnknownIso(iso))?;
        if pool.samples.is_empty() {
            return Err(Error::InvalidArgument(format!("sample pool for iso {iso} is empty")));
        }
    }
    for iso in pools.keys() {
        if model.gain_index(*iso).is_err() {
            log::warn!("pool for iso {iso} has no gain entry and is ignored");
        }
    }
    let mut model = model.clone();
    let mut state = OptimizerState::new(model.param_count());
    let mut log = TrainLog::default();
    let isos = model.isos().to_vec();
    match cfg.schedule {
        IsoSchedule::Sequential => {
            for &iso in &isos {
                train_pass(&mut model, &mut state, &pools[&iso].samples, iso, cfg, &mut log)?;
            }
        }
        IsoSchedule::Interleaved => {
            for step in 0..cfg.steps_per_iso {
                for &iso in &isos {
                    train_step(&mut model, &mut state, &pools[&iso].samples, iso, step, cfg, &mut log)?;
                }
            }
        }
    }
    Ok((model, log))
}

/// Step `step` of the ISO's cosine cycle: one Adam update on a fresh batch.
/// The log entry continues the global step counter.
pub fn train_step(
    model: &mut ProxyModel,
    state: &mut OptimizerState,
    pool: &[f64],
    iso: Iso,
    step: usize,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::InvalidArgument(format!("sample pool for iso {iso} is empty")));
    }
    let lr = lr_schedule(step, cfg.steps_per_iso, cfg);
    let data = step_data(pool, iso, step, cfg)?;
    let (loss, grad) = loss_and_grad(
        model,
        &data.n1,
        &data.n2,
        iso,
        &data.target,
        &data.queries,
        LossWeights::default(),
    )?;
    adam_step(model.params_mut(), &grad, state, lr, cfg)?;
    log.entries.push(LogEntry {
        step: log.entries.last().map_or(0, |e| e.step + 1),
        iso,
        l_cdf: loss.cdf,
        l_quantile: loss.quantile,
        lr,
    });
    if step % 50 == 0 || step + 1 == cfg.steps_per_iso {
        log::info!(
            "iso {iso} step {step}/{}: L_cdf {:.4e} L_quantile {:.4e} lr {lr:.3e}",
            cfg.steps_per_iso,
            loss.cdf,
            loss.quantile
        );
    }
    Ok(())
}

/// A full cosine cycle at a single ISO.
pub fn train_pass(
    model: &mut ProxyModel,
    state: &mut OptimizerState,
    pool: &[f64],
    iso: Iso,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<()> {
    for step in 0..cfg.steps_per_iso {
        train_step(model, state, pool, iso, step, cfg, log)?;
    }
    Ok(())
}

/// Mean loss of a model on fixed evaluation draws (no update).
pub fn evaluate_loss(model: &ProxyModel, pool: &[f64], iso: Iso, cfg: &TrainConfig, seed: u64) -> Result<f64> {
    let eval_cfg = TrainConfig { seed, ..*cfg };
    let data = step_data(pool, iso, 0, &eval_cfg)?;
    let out = model.forward(&data.n1, &data.n2, iso)?;
    Ok(ddl_loss_weighted(&out, &data.target, &data.queries, LossWeights::default())?.total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Index of the worst parameter.
    pub worst: usize,
    pub checked: usize,
    /// Parameters whose perturbation crossed a kink at every tried step.
    pub skipped: usize,
}

/// A small fixed loss evaluation to check gradients on.
pub struct GradCheckProblem {
    pub iso: Iso,
    pub n1: Vec<f64>,
    pub n2: Vec<f64>,
    pub target: SortedSamples,
    pub queries: QuerySet,
}

impl GradCheckProblem {
    /// `side²` inputs drawn from the seed, `query_count` queries scaled to the
    /// target's spread.
    pub fn new(target: &[f64], iso: Iso, side: usize, query_count: usize, seed: u64) -> Result<Self> {
        let n = side * side;
        if n == 0 || n > 64 * 64 {
            return Err(Error::InvalidArgument(format!(
                "gradient check field must be between 1x1 and 64x64, got {side}x{side}"
            )));
        }
        let scale = std_dev(target);
        let (n1, n2) = standard_inputs(n, seed);
        let queries = sample_queries(&QueryConfig::new(query_count, scale, target.len()), seed)?;
        Ok(Self {
            iso,
            n1,
            n2,
            target: SortedSamples::new(target)?,
            queries,
        })
    }

    pub fn target_scale(&self) -> f64 {
        std_dev(self.target.values())
    }

    pub fn loss(&self, model: &ProxyModel) -> Result<DdlLoss> {
        let out = model.forward(&self.n1, &self.n2, self.iso)?;
        ddl_loss_weighted(&out, &self.target, &self.queries, LossWeights::default())
    }

    pub fn gradient(&self, model: &ProxyModel) -> Result<(DdlLoss, Vec<f64>)> {
        loss_and_grad(
            model,
            &self.n1,
            &self.n2,
            self.iso,
            &self.target,
            &self.queries,
            LossWeights::default(),
        )
    }
}

/// Default finite-difference step, relative to the target spread.
pub const GRAD_CHECK_EPS: f64 = 1e-5;

/// Compares reverse-mode parameter gradients with central differences.
///
/// A central difference is only trusted when both probes land on the same
/// smooth piece as the base point (same loss signature); otherwise the step
/// is halved, up to four times, before the parameter is skipped. The error
/// of each parameter is `|fd - g| / max(|fd|, |g|, floor)` with
/// `floor = 1e-6 * max_i |g_i|`, so parameters whose gradient is far below
/// the overall gradient scale are judged on absolute terms.
pub fn grad_check(model: &ProxyModel, problem: &GradCheckProblem, eps: f64) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let (base, grad) = problem.gradient(model)?;
    let gmax = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    let floor = (1e-6 * gmax).max(f64::MIN_POSITIVE);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: 0,
        checked: 0,
        skipped: 0,
    };
    let mut probe = model.clone();
    for i in 0..model.param_count() {
        let orig = model.params()[i];
        let mut h = eps;
        let mut fd = None;
        for _ in 0..5 {
            probe.params_mut()[i] = orig + h;
            let plus = problem.loss(&probe)?;
            probe.params_mut()[i] = orig - h;
            let minus = problem.loss(&probe)?;
            probe.params_mut()[i] = orig;
            if plus.signature == base.signature && minus.signature == base.signature {
                fd = Some((plus.total - minus.total) / (2.0 * h));
                break;
            }
            h *= 0.5;
        }
        match fd {
            Some(fd) => {
                let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(floor);
                report.checked += 1;
                if err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = i;
                }
            }
            None => report.skipped += 1,
        }
    }
    Ok(report)
}
