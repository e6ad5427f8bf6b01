use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
[market]
d = 2

[solver]
method = DBSDE
n_steps = 3
batch = 8
val_size = 32
iters_forward = 20
iters_first = 20
iters_rest = 5
hidden = 4
val_every = 10

[experiment]
family = BatchSize
values = 4, 8
methods = DBSDE, DBDP1
runs = 3
mc_paths = 2000
mc_steps = 10
";

fn dbb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dbb"))
        .args(args)
        .env_remove("DBB_OUTPUT_DIR")
        .output()
        .unwrap()
}

fn setup() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap().to_string();
    (dir, cfg)
}

fn out(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn mc_price_prints_price_and_stderr() {
    let (dir, cfg) = setup();
    let o = dbb(&["mc-price", "--config", &cfg, "--seed", "1", "--out", &out(dir.path(), "mc")]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let line = stdout(&o);
    assert!(line.starts_with("price=") && line.contains(" stderr="), "{line}");
    assert!(dir.path().join("mc/mc_price.csv").exists());
    assert!(dir.path().join("mc/manifest.ini").exists());
}

#[test]
fn solve_is_byte_deterministic_and_rerunnable_from_manifest() {
    let (dir, cfg) = setup();
    let a = out(dir.path(), "a");
    let b = out(dir.path(), "b");
    for o in [&a, &b] {
        let r = dbb(&["solve", "--config", &cfg, "--set", "solver.method=DS", "--seed", "7", "--out", o]);
        assert_eq!(r.status.code(), Some(0), "{r:?}");
        assert!(stdout(&r).contains("method=DS"));
    }
    for f in ["solve.csv", "loss_curve.csv"] {
        assert_eq!(
            std::fs::read(Path::new(&a).join(f)).unwrap(),
            std::fs::read(Path::new(&b).join(f)).unwrap()
        );
    }
    let strip = |p: &str| -> String {
        std::fs::read_to_string(Path::new(p).join("manifest.ini"))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with("# wall_time"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let manifest = strip(&a);
    assert_eq!(manifest, strip(&b));
    assert!(manifest.contains("# config_hash: "));
    assert!(manifest.contains("# override: solver.method=DS"));
    assert!(manifest.contains("method = DS"));

    // The manifest alone reproduces the run.
    let c = out(dir.path(), "c");
    let m = Path::new(&a).join("manifest.ini");
    let r = dbb(&["solve", "--config", m.to_str().unwrap(), "--seed", "7", "--out", &c]);
    assert_eq!(r.status.code(), Some(0));
    assert_eq!(
        std::fs::read(Path::new(&a).join("solve.csv")).unwrap(),
        std::fs::read(Path::new(&c).join("solve.csv")).unwrap()
    );
}

#[test]
fn exit_codes() {
    let (dir, cfg) = setup();
    let o = out(dir.path(), "x");
    let zero = dbb(&["solve", "--config", &cfg, "--set", "solver.iters_forward=0", "--seed", "1", "--out", &o]);
    assert_eq!(zero.status.code(), Some(2));
    let diverge = dbb(&["solve", "--config", &cfg, "--set", "solver.lr=1e300", "--seed", "1", "--out", &o]);
    assert_eq!(diverge.status.code(), Some(1), "{diverge:?}");
    assert_eq!(dbb(&["solve", "--config", &cfg]).status.code(), Some(2));
    assert_eq!(dbb(&["solve", "--config", &cfg, "--set", "solver.nope=1", "--seed", "1"]).status.code(), Some(2));
    assert_eq!(dbb(&["price", "--seed", "1"]).status.code(), Some(2));
    assert_eq!(dbb(&["solve", "--config", "/nonexistent.cfg", "--seed", "1"]).status.code(), Some(2));
    assert_eq!(dbb(&["--help"]).status.code(), Some(0));
}

#[test]
fn experiment_writes_one_csv_per_family_and_reports() {
    let (dir, cfg) = setup();
    let a = out(dir.path(), "a");
    let b = out(dir.path(), "b");
    let r = dbb(&["experiment", "--config", &cfg, "--seed", "11", "--out", &a, "--workers", "2"]);
    assert_eq!(r.status.code(), Some(0), "{r:?}");
    assert!(stdout(&r).contains("iqr*"));
    let r = dbb(&["experiment", "--config", &cfg, "--seed", "11", "--out", &b, "--workers", "1"]);
    assert_eq!(r.status.code(), Some(0));

    let mut top: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    top.sort();
    assert_eq!(top, vec!["batch_size.csv", "manifest.ini"]);
    for f in ["batch_size.csv", "runs/batch_size.csv"] {
        assert_eq!(
            std::fs::read(Path::new(&a).join(f)).unwrap(),
            std::fs::read(Path::new(&b).join(f)).unwrap(),
            "{f}"
        );
    }
    let summary = std::fs::read_to_string(Path::new(&a).join("batch_size.csv")).unwrap();
    assert_eq!(summary.lines().filter(|l| !l.starts_with('#')).count(), 1 + 4);

    let rep = dbb(&["report", "--out", &a]);
    assert_eq!(rep.status.code(), Some(0));
    assert!(stdout(&rep).contains("[batch_size]"));
}

#[test]
fn simulate_uses_the_output_env_var() {
    let (dir, cfg) = setup();
    let o = Command::new(env!("CARGO_BIN_EXE_dbb"))
        .args(["simulate", "--config", &cfg, "--seed", "3"])
        .env("DBB_OUTPUT_DIR", dir.path().join("env"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let csv = std::fs::read_to_string(dir.path().join("env/paths.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "path,step,t,S1,S2,nu1,nu2");
    assert_eq!(lines.count(), 8 * 4);
    assert!(csv.lines().nth(1).unwrap().starts_with("0,0,0,100,100,0.1,0.1"));
}
