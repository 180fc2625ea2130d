use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use noiseproxy::cli::{run, RunManifest};
use noiseproxy::eval::read_csv;
use noiseproxy::frame::FrameManifest;
use sha2::{Digest, Sha256};

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("noiseproxy").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn digests(root: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, hex::encode(Sha256::digest(fs::read(&path).unwrap())));
            }
        }
    }
    out
}

fn small_sim_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.toml");
    fs::write(
        &path,
        "[simulate]\ndarks_per_iso = 4\nholdout_per_iso = 1\nflat_levels = [200.0, 800.0]\n",
    )
    .unwrap();
    path
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(cli(&["simulate", "--bogus"]), 1);
    assert_eq!(cli(&["frobnicate"]), 1);
    assert_eq!(cli(&[]), 1);
    assert_eq!(cli(&["--help"]), 0);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "no_such_key = 1\n").unwrap();
    assert_eq!(cli(&["simulate", "--config", p(&bad), "--out", p(dir.path())]), 1);
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_sim_config(dir.path());
    let spec = dir.path().join("s.toml");
    fs::write(&spec, toml::to_string(&noiseproxy::SensorSpec { height: 32, width: 48, ..Default::default() }).unwrap())
        .unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(cli(&["simulate", "--spec", p(&spec), "--seed", "7", "--config", p(&cfg), "--out", p(out)]), 0);
    }
    let (da, db) = (digests(&a), digests(&b));
    assert_eq!(da, db);
    let run: RunManifest = toml::from_str(&fs::read_to_string(a.join("run.toml")).unwrap()).unwrap();
    assert_eq!(run.command, "simulate");
    assert_eq!(run.seed, 7);
    let listed: std::collections::BTreeSet<&PathBuf> = run.outputs.iter().collect();
    assert_eq!(listed, da.keys().collect());
    let frame = noiseproxy::frame::read_frame(&a.join("darks/iso800_000.pnnf")).unwrap();
    assert_eq!(frame.shape(), (32, 48));
    let c = dir.path().join("c");
    assert_eq!(cli(&["simulate", "--spec", p(&spec), "--seed", "8", "--config", p(&cfg), "--out", p(&c)]), 0);
    let first = Path::new("darks/iso800_000.pnnf");
    assert_ne!(digests(&c)[first], da[first]);
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "seed = 5\n[simulate]\ndarks_per_iso = 2\nholdout_per_iso = 0\nflat_levels = []\n").unwrap();
    let out = dir.path().join("o");
    assert_eq!(cli(&["simulate", "--config", p(&cfg), "--seed", "6", "--out", p(&out)]), 0);
    let run: RunManifest = toml::from_str(&fs::read_to_string(out.join("run.toml")).unwrap()).unwrap();
    assert_eq!(run.seed, 6);
    let m = FrameManifest::load(&out.join("darks.toml")).unwrap();
    assert!(m.groups.iter().all(|g| g.frames.len() == 2));
    assert!(!out.join("flats.toml").exists());
}

#[test]
fn calibrate_on_one_iso_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_sim_config(dir.path());
    let sim = dir.path().join("sim");
    assert_eq!(cli(&["simulate", "--config", p(&cfg), "--out", p(&sim)]), 0);
    let mut m = FrameManifest::load(&sim.join("darks.toml")).unwrap();
    m.groups.truncate(1);
    let one = sim.join("one.toml");
    m.save(&one).unwrap();
    let out = dir.path().join("cal");
    assert_eq!(cli(&["calibrate", "--darks", p(&one), "--flats", p(&sim.join("flats.toml")), "--out", p(&out)]), 2);
    assert_eq!(cli(&["calibrate", "--darks", p(&sim.join("darks.toml")), "--out", p(&out)]), 1);
    assert_eq!(
        cli(&["calibrate", "--darks", p(&sim.join("darks.toml")), "--flats", p(&sim.join("flats.toml")), "--out", p(&out)]),
        0
    );
    let profile = noiseproxy::synth::CalibrationProfile::load(&out.join("profile")).unwrap();
    for (iso, g) in &profile.gain {
        assert!((g / (*iso as f64 / 1600.0) - 1.0).abs() < 0.05, "iso {iso} gain {g}");
    }
}

#[test]
fn gradcheck_subcommand_passes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["gradcheck", "--out", p(dir.path())]), 0);
    let v: toml::Table = fs::read_to_string(dir.path().join("gradcheck.toml")).unwrap().parse().unwrap();
    assert_eq!(v["passed"].as_bool(), Some(true));
    assert!(v["max_rel_error"].as_float().unwrap() < 1e-4);
}

/// simulate → calibrate → decouple → train → synth → eval on the default
/// sensor, training at the desk scale.
#[test]
fn full_pipeline_reaches_high_qq_r2() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("cfg.toml");
    fs::write(&cfg, "seed = 7\n[train]\nqueries_per_step = 100000\n[synth]\ndark_frames = 10\n").unwrap();
    let c = p(&cfg);
    let (sim, cal, dec, tr, syn, ev) =
        (root.join("sim"), root.join("cal"), root.join("dec"), root.join("train"), root.join("syn"), root.join("eval"));
    assert_eq!(cli(&["simulate", "--config", c, "--out", p(&sim)]), 0);
    let darks = sim.join("darks.toml");
    assert_eq!(
        cli(&["calibrate", "--config", c, "--darks", p(&darks), "--flats", p(&sim.join("flats.toml")), "--out", p(&cal)]),
        0
    );
    let profile = cal.join("profile");
    assert_eq!(cli(&["decouple", "--config", c, "--darks", p(&darks), "--profile", p(&profile), "--out", p(&dec)]), 0);
    let (_, stages) = read_csv(&dec.join("stage_std.csv")).unwrap();
    for row in &stages {
        assert!(row[1] > row[2] && row[2] > row[3], "{row:?}");
    }
    assert_eq!(
        cli(&[
            "train", "--config", c, "--pools", p(&dec.join("pools")), "--profile", p(&profile), "--steps", "200",
            "--patch", "256", "--out", p(&tr),
        ]),
        0
    );
    let (header, log) = read_csv(&tr.join("train_log.csv")).unwrap();
    assert_eq!(header, ["step", "iso", "L_cdf", "L_quantile", "lr"]);
    assert_eq!(log.len(), 800);
    let model = tr.join("model");
    assert_eq!(cli(&["synth", "--config", c, "--model", p(&model), "--profile", p(&profile), "--out", p(&syn)]), 0);
    assert_eq!(cli(&["eval", "--config", c, "--a", p(&syn.join("darks")), "--b", p(&sim.join("holdout")), "--out", p(&ev)]), 0);
    let (header, rows) = read_csv(&ev.join("summary.csv")).unwrap();
    assert_eq!(header, ["kld", "qq_r2", "probplot_r2", "n_a", "n_b"]);
    assert_eq!(rows.len(), 4);
    for row in &rows {
        assert!(row[1] > 0.99, "{row:?}");
    }
    let (h, _) = read_csv(&ev.join("iso800/hist.csv")).unwrap();
    assert_eq!(h, ["bin_center", "density_a", "density_b"]);
    let (q, qq) = read_csv(&ev.join("iso800/qq.csv")).unwrap();
    assert_eq!(q, ["u", "quantile_a", "quantile_b"]);
    assert_eq!(qq.len(), 1000);

    let clean = sim.join("holdout/iso1600_000.pnnf");
    let pairs = root.join("pairs");
    assert_eq!(
        cli(&[
            "synth", "--config", c, "--model", p(&model), "--profile", p(&profile), "--clean", p(&clean), "--iso", "1600",
            "--ratio", "10", "--out", p(&pairs),
        ]),
        0
    );
    let m = noiseproxy::synth::PairManifest::load(&pairs.join("pairs/pairs.toml")).unwrap();
    assert_eq!(m.pairs.len(), 1);
    assert_eq!(m.pairs[0].ratio, 10.0);
    assert_eq!(cli(&["synth", "--model", p(&model), "--profile", p(&profile), "--clean", p(&clean), "--out", p(&pairs)]), 1);
}
