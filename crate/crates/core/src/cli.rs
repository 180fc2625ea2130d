//! Command-line front-end. Each subcommand loads its inputs, calls into the
//! library and writes outputs plus one `run.toml` manifest into `--out`.
//!
//! Exit status: 0 success, 1 usage error, 2 data or validation error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::eval::{build_report_with, emit_report, summary_row, DEFAULT_BIN_FRACTION, DEFAULT_QQ_POINTS, SUMMARY_HEADER};
use crate::frame::{group_by_iso, read_frame, sidecar_path, write_frame, FrameGroup, FrameManifest, FrameSet, Iso};
use crate::pnd::{
    calibrate_band_noise, calibrate_frame_noise, decouple, load_pools, photon_transfer_gain, remove_frame_noise,
    save_pools, BandNoiseModel, POOL_INDEX,
};
use crate::ppm::ProxyModel;
use crate::rng::child_seed;
use crate::sensor::{build_sensor, SensorSpec};
use crate::stats::{std_dev, variance};
use crate::synth::{synth_dark_frame, synth_pair, CalibrationProfile, PairEntry, PairManifest, QuantSpec, SynthOptions};
use crate::trainer::{grad_check, train, GradCheckProblem, TrainConfig, GRAD_CHECK_EPS};

pub const LOG_ENV: &str = "PNNP_LOG";
pub const RUN_MANIFEST: &str = "run.toml";

#[derive(Debug, Parser)]
#[command(name = "noiseproxy", version, about = "Dark-frame noise calibration and synthesis")]
pub struct Cli {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct SharedArgs {
    /// Root seed; every stage derives labelled child seeds from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// TOML configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Build a virtual sensor and capture dark, hold-out and flat frames.
    Simulate {
        /// Sensor parameters (TOML); the built-in default sensor otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Fit frame-wise and band-wise noise and the system gain.
    Calibrate {
        /// Dark-frame manifest, one group per ISO.
        #[arg(long)]
        darks: PathBuf,
        /// Flat-field manifest, one group per exposure level.
        #[arg(long)]
        flats: Option<PathBuf>,
    },
    /// Strip frame and band noise from darks and pool the pixel-wise residual.
    Decouple {
        #[arg(long)]
        darks: PathBuf,
        /// Calibration profile directory.
        #[arg(long)]
        profile: PathBuf,
    },
    /// Train the proxy model on decoupled pools.
    Train {
        #[arg(long)]
        pools: PathBuf,
        /// Calibration profile; its gains initialize the gain table.
        #[arg(long)]
        profile: PathBuf,
        /// Steps per ISO.
        #[arg(long)]
        steps: Option<usize>,
        /// Side of the square training patch.
        #[arg(long)]
        patch: Option<usize>,
    },
    /// Synthesize a noisy/clean pair, or dark frames when no clean frame is given.
    Synth {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        profile: PathBuf,
        /// Clean frame container; needs --iso and --ratio.
        #[arg(long)]
        clean: Option<PathBuf>,
        #[arg(long)]
        iso: Option<Iso>,
        /// Exposure ratio the clean signal is divided by.
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Compare two sample sources (pool directories or frame directories) per ISO.
    Eval {
        #[arg(long)]
        a: PathBuf,
        /// Reference source; bin widths follow its spread.
        #[arg(long)]
        b: PathBuf,
    },
    /// Check reverse-mode gradients against central differences.
    Gradcheck {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        pools: Option<PathBuf>,
        #[arg(long)]
        iso: Option<Iso>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Calibrate { .. } => "calibrate",
            Command::Decouple { .. } => "decouple",
            Command::Train { .. } => "train",
            Command::Synth { .. } => "synth",
            Command::Eval { .. } => "eval",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub threads: usize,
    pub out: PathBuf,
    pub simulate: SimulateConfig,
    pub calibrate: CalibrateConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradCheckConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            out: PathBuf::from("noiseproxy-out"),
            simulate: SimulateConfig::default(),
            calibrate: CalibrateConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            eval: EvalConfig::default(),
            gradcheck: GradCheckConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// The per-pixel shading fit is only as good as the temporal means it
    /// averages; with a handful of darks its error rivals the FPN itself.
    pub darks_per_iso: usize,
    /// Fresh darks written separately for evaluation.
    pub holdout_per_iso: usize,
    /// Flat-field exposure levels in electrons; empty skips flats.
    pub flat_levels: Vec<f64>,
    pub flats_per_level: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            darks_per_iso: 50,
            holdout_per_iso: 10,
            flat_levels: vec![100.0, 400.0, 1600.0],
            flats_per_level: 2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateConfig {
    /// `K(iso) = gain_per_iso * iso`, used when no flats are given.
    pub gain_per_iso: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub dark_frames: usize,
    pub perturb: bool,
    pub shot: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dark_frames: 1,
            perturb: true,
            shot: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Histogram bin width as a fraction of the `b` samples' std.
    pub bin_fraction: f64,
    pub qq_points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bin_fraction: DEFAULT_BIN_FRACTION,
            qq_points: DEFAULT_QQ_POINTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub side: usize,
    pub queries: usize,
    /// Finite-difference step relative to the target's std.
    pub eps: f64,
    pub tolerance: f64,
    pub target_samples: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            side: 32,
            queries: 256,
            eps: GRAD_CHECK_EPS,
            tolerance: 1e-4,
            target_samples: 100_000,
        }
    }
}

/// Record of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// sha256 of the effective configuration, as TOML, without `out` and `threads`.
    pub config_digest: String,
    pub seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    /// Files written, relative to the output directory.
    pub outputs: Vec<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Data(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `argv` (program name first), runs the subcommand and returns the
/// exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            1
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Loads the config file and applies flag overrides.
pub fn effective_config(cli: &Cli) -> CliResult<Config> {
    let mut cfg = match &cli.shared.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => Config::default(),
    };
    if let Some(s) = cli.shared.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.shared.out {
        cfg.out = o.clone();
    }
    if let Some(t) = cli.shared.threads {
        cfg.threads = t;
    }
    if let Command::Train { steps, patch, .. } = &cli.command {
        if let Some(s) = steps {
            cfg.train.steps_per_iso = *s;
        }
        if let Some(p) = patch {
            cfg.train.patch = *p;
        }
    }
    if cfg.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    Ok(cfg)
}

/// Digest of everything that affects results; the output location and the
/// thread count do not.
pub fn config_digest(cfg: &Config) -> String {
    let cfg = Config {
        out: PathBuf::new(),
        threads: 0,
        ..cfg.clone()
    };
    let text = toml::to_string(&cfg).expect("config serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn execute(cli: &Cli) -> CliResult<()> {
    let cfg = effective_config(cli)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    let out = cfg.out.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut run = RunManifest {
        command: cli.command.name().into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_digest: config_digest(&cfg),
        seed: cfg.seed,
        seeds: BTreeMap::new(),
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    pool.install(|| match &cli.command {
        Command::Simulate { spec } => simulate(&cfg, spec.as_deref(), &mut run),
        Command::Calibrate { darks, flats } => calibrate(&cfg, darks, flats.as_deref(), &mut run),
        Command::Decouple { darks, profile } => decouple_cmd(&cfg, darks, profile, &mut run),
        Command::Train { pools, profile, .. } => train_cmd(&cfg, pools, profile, &mut run),
        Command::Synth {
            model,
            profile,
            clean,
            iso,
            ratio,
        } => synth_cmd(&cfg, model, profile, clean.as_deref(), *iso, *ratio, &mut run),
        Command::Eval { a, b } => eval_cmd(&cfg, a, b, &mut run),
        Command::Gradcheck { model, pools, iso } => gradcheck_cmd(&cfg, model.as_deref(), pools.as_deref(), *iso, &mut run),
    })?;
    run.outputs.sort();
    run.outputs.push(PathBuf::from(RUN_MANIFEST));
    let text = toml::to_string_pretty(&run).map_err(|e| Error::parse(RUN_MANIFEST, e))?;
    let path = out.join(RUN_MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn track(run: &mut RunManifest, out: &Path, written: &Path) {
    if let Ok(rel) = written.strip_prefix(out) {
        run.outputs.push(rel.to_path_buf());
    }
}

fn track_frame(run: &mut RunManifest, out: &Path, path: &Path) {
    track(run, out, path);
    track(run, out, &sidecar_path(path));
}

fn seed_for(run: &mut RunManifest, label: &str) -> u64 {
    let s = child_seed(run.seed, label);
    run.seeds.insert(label.into(), s);
    s
}

fn simulate(cfg: &Config, spec_path: Option<&Path>, run: &mut RunManifest) -> CliResult<()> {
    let spec = match spec_path {
        Some(p) => {
            run.inputs.push(p.to_path_buf());
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<SensorSpec>(&text).map_err(|e| Error::parse(p, e))?
        }
        None => SensorSpec::default(),
    };
    let sc = &cfg.simulate;
    let out = &cfg.out;
    let sensor = build_sensor(&spec, seed_for(run, "simulate/sensor"))?;
    let sensor_dir = out.join("sensor");
    sensor.save(&sensor_dir)?;
    for entry in fs::read_dir(&sensor_dir).map_err(|e| Error::io(&sensor_dir, e))? {
        let entry = entry.map_err(|e| Error::io(&sensor_dir, e))?;
        track(run, out, &entry.path());
    }
    let capture_seed = seed_for(run, "simulate/capture");
    let capture_set = |name: &str, count: usize, run: &mut RunManifest| -> CliResult<()> {
        if count == 0 {
            return Ok(());
        }
        let dir = out.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut manifest = FrameManifest::default();
        for iso in sensor.isos() {
            let mut group = FrameGroup { iso, frames: Vec::new() };
            for k in 0..count {
                let file = format!("iso{iso}_{k:03}.pnnf");
                let frame = sensor.capture_dark_frame(iso, child_seed(capture_seed, &format!("{name}/{iso}/{k}")))?;
                write_frame(&frame, &dir.join(&file))?;
                track_frame(run, out, &dir.join(&file));
                group.frames.push(PathBuf::from(name).join(file));
            }
            manifest.groups.push(group);
        }
        let mpath = out.join(format!("{name}.toml"));
        manifest.save(&mpath)?;
        track(run, out, &mpath);
        Ok(())
    };
    capture_set("darks", sc.darks_per_iso, run)?;
    capture_set("holdout", sc.holdout_per_iso, run)?;
    if !sc.flat_levels.is_empty() && sc.flats_per_level >= 2 {
        let dir = out.join("flats");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut manifest = FrameManifest::default();
        for iso in sensor.isos() {
            for (l, &level) in sc.flat_levels.iter().enumerate() {
                let mut group = FrameGroup { iso, frames: Vec::new() };
                for k in 0..sc.flats_per_level {
                    let file = format!("iso{iso}_l{l}_{k:03}.pnnf");
                    let seed = child_seed(capture_seed, &format!("flats/{iso}/{l}/{k}"));
                    let frame = sensor.capture_flat_frame(iso, level, seed)?;
                    write_frame(&frame, &dir.join(&file))?;
                    track_frame(run, out, &dir.join(&file));
                    group.frames.push(PathBuf::from("flats").join(file));
                }
                manifest.groups.push(group);
            }
        }
        let mpath = out.join("flats.toml");
        manifest.save(&mpath)?;
        track(run, out, &mpath);
    }
    Ok(())
}

fn read_manifest_sets(path: &Path, run: &mut RunManifest) -> CliResult<Vec<FrameSet>> {
    run.inputs.push(path.to_path_buf());
    let m = FrameManifest::load(path)?;
    Ok(m.read_sets(path)?)
}

fn calibrate(cfg: &Config, darks: &Path, flats: Option<&Path>, run: &mut RunManifest) -> CliResult<()> {
    let sets = group_by_iso(read_manifest_sets(darks, run)?)?;
    let frame = calibrate_frame_noise(&sets)?;
    let mut bands = Vec::new();
    for set in &sets {
        let residuals = set
            .frames()
            .iter()
            .map(|f| remove_frame_noise(f, &frame))
            .collect::<crate::Result<Vec<_>>>()?;
        bands.push(calibrate_band_noise(&residuals, set.iso())?);
    }
    let isos: Vec<Iso> = sets.iter().map(FrameSet::iso).collect();
    let gain: BTreeMap<Iso, f64> = match (flats, cfg.calibrate.gain_per_iso) {
        (Some(fp), _) => {
            let levels = read_manifest_sets(fp, run)?;
            let mut gain = BTreeMap::new();
            for &iso in &isos {
                let at_iso: Vec<FrameSet> = levels.iter().filter(|s| s.iso() == iso).cloned().collect();
                let fit = photon_transfer_gain(&at_iso)?;
                log::info!("iso {iso}: gain {:.5} DN/e, read variance {:.3}", fit.gain, fit.read_var);
                gain.insert(iso, fit.gain);
            }
            gain
        }
        (None, Some(g)) => isos.iter().map(|&i| (i, g * i as f64)).collect(),
        (None, None) => {
            return Err(CliError::Usage(
                "system gain unknown: pass --flats or set calibrate.gain_per_iso".into(),
            ))
        }
    };
    let first = &sets[0].frames()[0];
    let quant = QuantSpec {
        bit_depth: first.bit_depth,
        black_level: first.black_level,
        white_level: first.white_level,
    };
    let profile = CalibrationProfile::new(frame, BandNoiseModel::from_entries(bands), gain, quant)?;
    let dir = cfg.out.join("profile");
    profile.save(&dir)?;
    for f in ["profile.toml", "fpn_k.pnnf", "fpn_b.pnnf"] {
        track(run, &cfg.out, &dir.join(f));
    }
    Ok(())
}

fn decouple_cmd(cfg: &Config, darks: &Path, profile_dir: &Path, run: &mut RunManifest) -> CliResult<()> {
    let sets = group_by_iso(read_manifest_sets(darks, run)?)?;
    run.inputs.push(profile_dir.to_path_buf());
    let profile = CalibrationProfile::load(profile_dir)?;
    let d = decouple(&sets, &profile.frame, &profile.band, seed_for(run, "decouple"))?;
    let dir = cfg.out.join("pools");
    save_pools(&dir, &d.pools)?;
    track(run, &cfg.out, &dir.join(POOL_INDEX));
    for iso in d.pools.keys() {
        track(run, &cfg.out, &dir.join(format!("pool_{iso}.pnnf")));
    }
    let mut csv = String::from("iso,raw,frame_removed,band_removed,reconstructed\n");
    for (iso, s) in &d.stage_std {
        csv.push_str(&format!(
            "{iso},{},{},{},{}\n",
            s.raw, s.frame_removed, s.band_removed, s.reconstructed
        ));
    }
    let path = cfg.out.join("stage_std.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    track(run, &cfg.out, &path);
    Ok(())
}

fn train_cmd(cfg: &Config, pools_dir: &Path, profile_dir: &Path, run: &mut RunManifest) -> CliResult<()> {
    run.inputs.push(pools_dir.to_path_buf());
    run.inputs.push(profile_dir.to_path_buf());
    let pools = load_pools(pools_dir)?;
    let profile = CalibrationProfile::load(profile_dir)?;
    let isos: Vec<Iso> = pools.keys().copied().filter(|i| profile.gain.contains_key(i)).collect();
    if isos.is_empty() {
        return Err(Error::Invariant("no pool ISO has a calibrated gain".into()).into());
    }
    let variances = isos.iter().map(|&i| (i, variance(&pools[&i].samples))).collect();
    let model = ProxyModel::init_calibrated(&isos, &profile.gain, &variances, seed_for(run, "train/init"))?;
    let tc = TrainConfig {
        seed: seed_for(run, "train/steps"),
        ..cfg.train
    };
    let (trained, log) = train(&model, &pools, &tc)?;
    let dir = cfg.out.join("model");
    trained.save(&dir)?;
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        track(run, &cfg.out, &entry.path());
    }
    let path = cfg.out.join("train_log.csv");
    log.write_csv(&path)?;
    track(run, &cfg.out, &path);
    Ok(())
}

fn synth_cmd(
    cfg: &Config,
    model_dir: &Path,
    profile_dir: &Path,
    clean: Option<&Path>,
    iso: Option<Iso>,
    ratio: Option<f64>,
    run: &mut RunManifest,
) -> CliResult<()> {
    run.inputs.push(model_dir.to_path_buf());
    run.inputs.push(profile_dir.to_path_buf());
    let model = ProxyModel::load(model_dir)?;
    let profile = CalibrationProfile::load(profile_dir)?;
    let opts = SynthOptions {
        perturb: cfg.synth.perturb,
        shot: cfg.synth.shot,
        ..SynthOptions::default()
    };
    let out = &cfg.out;
    match clean {
        Some(clean_path) => {
            let iso = iso.ok_or_else(|| CliError::Usage("--clean needs --iso".into()))?;
            let ratio = ratio.ok_or_else(|| CliError::Usage("--clean needs --ratio".into()))?;
            run.inputs.push(clean_path.to_path_buf());
            let clean = read_frame(clean_path)?;
            let seed = seed_for(run, "synth/pair");
            let (noisy, clean) = synth_pair(&clean, ratio, iso, &model, &profile, seed, opts)?;
            let dir = out.join("pairs");
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_frame(&noisy, &dir.join("noisy_000.pnnf"))?;
            write_frame(&clean, &dir.join("clean_000.pnnf"))?;
            track_frame(run, out, &dir.join("noisy_000.pnnf"));
            track_frame(run, out, &dir.join("clean_000.pnnf"));
            let manifest = PairManifest {
                pairs: vec![PairEntry {
                    noisy: "noisy_000.pnnf".into(),
                    clean: "clean_000.pnnf".into(),
                    iso,
                    ratio,
                    seed,
                }],
            };
            manifest.save(&dir.join("pairs.toml"))?;
            track(run, out, &dir.join("pairs.toml"));
        }
        None => {
            if ratio.is_some() {
                return Err(CliError::Usage("--ratio needs --clean".into()));
            }
            let isos = match iso {
                Some(i) => vec![i],
                None => profile.isos(),
            };
            let seed = seed_for(run, "synth/dark");
            let dir = out.join("darks");
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut manifest = FrameManifest::default();
            let dark_opts = SynthOptions { shot: false, ..opts };
            for iso in isos {
                let mut group = FrameGroup { iso, frames: Vec::new() };
                for k in 0..cfg.synth.dark_frames {
                    let file = format!("iso{iso}_{k:03}.pnnf");
                    let s = child_seed(seed, &format!("{iso}/{k}"));
                    let frame = synth_dark_frame(&model, &profile, iso, s, dark_opts)?;
                    write_frame(&frame, &dir.join(&file))?;
                    track_frame(run, out, &dir.join(&file));
                    group.frames.push(PathBuf::from("darks").join(file));
                }
                manifest.groups.push(group);
            }
            let mpath = out.join("darks.toml");
            manifest.save(&mpath)?;
            track(run, out, &mpath);
        }
    }
    Ok(())
}

/// Samples per ISO from a pool directory (`pools.toml`) or from every frame
/// container in a directory (values above black level).
pub fn load_samples(dir: &Path) -> crate::Result<BTreeMap<Iso, Vec<f64>>> {
    if dir.join(POOL_INDEX).is_file() {
        return Ok(load_pools(dir)?.into_iter().map(|(i, p)| (i, p.samples)).collect());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pnnf") && sidecar_path(p).is_file())
        .collect();
    paths.sort();
    let mut out: BTreeMap<Iso, Vec<f64>> = BTreeMap::new();
    for p in paths {
        let f = read_frame(&p)?;
        out.entry(f.iso)
            .or_default()
            .extend(f.data.iter().map(|&v| v as f64 - f.black_level));
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!("no samples found in {}", dir.display())));
    }
    Ok(out)
}

fn eval_cmd(cfg: &Config, a: &Path, b: &Path, run: &mut RunManifest) -> CliResult<()> {
    run.inputs.push(a.to_path_buf());
    run.inputs.push(b.to_path_buf());
    let sa = load_samples(a)?;
    let sb = load_samples(b)?;
    let common: Vec<Iso> = sa.keys().filter(|i| sb.contains_key(i)).copied().collect();
    if common.is_empty() {
        return Err(Error::Invariant("the two sources share no ISO".into()).into());
    }
    let mut summary = format!("{SUMMARY_HEADER}\n");
    for iso in common {
        let (xa, xb) = (&sa[&iso], &sb[&iso]);
        let s = std_dev(xb);
        if !(s > 0.0) {
            return Err(Error::InvalidArgument(format!("iso {iso}: reference samples have zero spread")).into());
        }
        let report = build_report_with(xa, xb, cfg.eval.bin_fraction * s, cfg.eval.qq_points)?;
        let dir = cfg.out.join(format!("iso{iso}"));
        emit_report(&report, &dir)?;
        for f in ["hist.csv", "qq.csv", "summary.csv"] {
            track(run, &cfg.out, &dir.join(f));
        }
        log::info!("iso {iso}: {}", summary_row(&report));
        summary.push_str(&summary_row(&report));
        summary.push('\n');
    }
    let path = cfg.out.join("summary.csv");
    fs::write(&path, summary).map_err(|e| Error::io(&path, e))?;
    track(run, &cfg.out, &path);
    Ok(())
}

#[derive(Serialize)]
struct GradCheckRecord {
    iso: Iso,
    eps: f64,
    tolerance: f64,
    max_rel_error: f64,
    worst: usize,
    checked: usize,
    skipped: usize,
    passed: bool,
}

fn gradcheck_cmd(
    cfg: &Config,
    model_dir: Option<&Path>,
    pools_dir: Option<&Path>,
    iso: Option<Iso>,
    run: &mut RunManifest,
) -> CliResult<()> {
    let gc = &cfg.gradcheck;
    let model = match model_dir {
        Some(d) => {
            run.inputs.push(d.to_path_buf());
            ProxyModel::load(d)?
        }
        None => {
            let spec = SensorSpec::default();
            let gains = spec
                .isos
                .iter()
                .map(|s| (s.iso, spec.gain_per_iso * s.iso as f64))
                .collect::<BTreeMap<_, _>>();
            let isos: Vec<Iso> = gains.keys().copied().collect();
            ProxyModel::init(&isos, &gains, seed_for(run, "gradcheck/init"))?
        }
    };
    let iso = iso.unwrap_or(model.isos()[0]);
    let target = match pools_dir {
        Some(d) => {
            run.inputs.push(d.to_path_buf());
            load_pools(d)?
                .remove(&iso)
                .ok_or(Error::UnknownIso(iso))?
                .samples
        }
        None => {
            let sensor = build_sensor(&SensorSpec::default(), seed_for(run, "gradcheck/sensor"))?;
            sensor.sample_pixel_noise(iso, gc.target_samples, seed_for(run, "gradcheck/target"))?
        }
    };
    let problem = GradCheckProblem::new(&target, iso, gc.side, gc.queries, seed_for(run, "gradcheck/problem"))?;
    let report = grad_check(&model, &problem, gc.eps * problem.target_scale())?;
    let record = GradCheckRecord {
        iso,
        eps: gc.eps,
        tolerance: gc.tolerance,
        max_rel_error: report.max_rel_error,
        worst: report.worst,
        checked: report.checked,
        skipped: report.skipped,
        passed: report.max_rel_error <= gc.tolerance,
    };
    let path = cfg.out.join("gradcheck.toml");
    let text = toml::to_string_pretty(&record).map_err(|e| Error::parse(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    track(run, &cfg.out, &path);
    if !record.passed {
        return Err(Error::Invariant(format!(
            "gradient check failed: max relative error {:.3e} exceeds {:.1e}",
            report.max_rel_error, gc.tolerance
        ))
        .into());
    }
    Ok(())
}
