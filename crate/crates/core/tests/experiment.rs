use std::fs;

use xtrack_core::config::{ExperimentConfig, StrategyChoice};
use xtrack_core::experiment::{cmd_eval, cmd_gen, cmd_track, Manifest};

fn small() -> ExperimentConfig {
    let mut c = ExperimentConfig::from_toml(
        r#"
seed = 5
[phantom]
dims = [32, 32, 32]
n_lines = 3
n_ellipsoids = 4
[deformation]
line_magnitude = [1.0, 2.0]
amplitude = 1.0
[geometry]
detector = [32, 32]
[reg2d]
max_iterations = 40
[reg3d]
max_iterations = 30
"#,
        None,
    )
    .unwrap();
    c.acceptance.max_chamfer = None;
    c.acceptance.min_auc = None;
    c.acceptance.max_line_error_2d = None;
    c.acceptance.max_frame_seconds = None;
    c
}

#[test]
fn gen_lists_every_artifact_and_is_reproducible() {
    let cfg = small();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = cmd_gen(&cfg, a.path()).unwrap();
    let mb = cmd_gen(&cfg, b.path()).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(ma.frames, 2);
    ma.verify(a.path()).unwrap();
    for k in 0..2 {
        for f in ["volume.raw", "lines.csv", "proj_v0.json", "clean_v1.raw", "noisy_v0.json"] {
            let p = format!("frame_{k:03}/{f}");
            assert!(ma.artifacts.iter().any(|x| x.path == p && x.sha256.is_some()), "{p}");
        }
    }
    let mut on_disk = Vec::new();
    for e in fs::read_dir(a.path()).unwrap() {
        let e = e.unwrap();
        if e.file_type().unwrap().is_dir() {
            for f in fs::read_dir(e.path()).unwrap() {
                on_disk.push(format!("{}/{}", e.file_name().to_string_lossy(), f.unwrap().file_name().to_string_lossy()));
            }
        } else if e.file_name() != "manifest.json" {
            on_disk.push(e.file_name().to_string_lossy().into_owned());
        }
    }
    on_disk.sort();
    let listed: Vec<_> = ma.artifacts.iter().map(|x| x.path.clone()).collect();
    assert_eq!(on_disk, listed);

    let mut other = cfg.clone();
    other.seed = 6;
    let c = tempfile::tempdir().unwrap();
    assert_ne!(cmd_gen(&other, c.path()).unwrap().digest(), ma.digest());
}

#[test]
fn track_both_strategies_then_eval() {
    let mut cfg = small();
    cfg.tracking.strategy = StrategyChoice::Both;
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("dataset");
    cmd_gen(&cfg, &data).unwrap();
    let run = root.path().join("run");
    let m = cmd_track(&cfg, &data, &run).unwrap();
    m.verify(&run).unwrap();
    assert!(m.artifacts.iter().any(|a| a.path == "chained_prior/timings.csv" && a.sha256.is_none()));

    let s = fs::read_to_string(run.join("start_frame_prior/metrics.csv")).unwrap();
    let c = fs::read_to_string(run.join("chained_prior/metrics.csv")).unwrap();
    assert_eq!(s, c, "two-frame runs coincide");
    assert_eq!(s.lines().count(), 2);

    let again = root.path().join("run2");
    assert_eq!(cmd_track(&cfg, &data, &again).unwrap().digest(), m.digest());

    let report = cmd_eval(&run).unwrap();
    assert!(report.passed(), "{}", report.to_text());
    assert_eq!(report.rows.len(), 2);

    // Tighten a threshold in the stored config and evaluate again.
    let mut strict = cfg.clone();
    strict.acceptance.max_chamfer = Some(0.0);
    fs::write(run.join("config.toml"), strict.to_toml()).unwrap();
    let mut m2: Manifest = Manifest::read(&run).unwrap();
    for a in &mut m2.artifacts {
        if a.path == "config.toml" {
            a.sha256 = Some(xtrack_core::io::sha256_file(&run.join("config.toml")).unwrap());
        }
    }
    fs::write(run.join("manifest.json"), serde_json::to_string_pretty(&m2).unwrap()).unwrap();
    let report = cmd_eval(&run).unwrap();
    assert!(!report.passed());
    assert!(report.violations.iter().all(|v| v.contains("chamfer")), "{:?}", report.violations);
}

#[test]
fn track_refuses_a_foreign_dataset() {
    let cfg = small();
    let root = tempfile::tempdir().unwrap();
    cmd_gen(&cfg, root.path()).unwrap();
    let mut other = cfg.clone();
    other.seed += 1;
    assert!(cmd_track(&other, root.path(), &root.path().join("run")).is_err());
}

#[test]
fn eval_detects_tampering() {
    let cfg = small();
    let root = tempfile::tempdir().unwrap();
    let m = cmd_gen(&cfg, root.path()).unwrap();
    fs::write(root.path().join("frame_001/lines.csv"), "line_id,x,y,z\n").unwrap();
    assert!(m.verify(root.path()).is_err());
}
