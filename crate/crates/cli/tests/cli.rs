use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sdg_core::catalog::CatalogEntry;

fn sdg() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sdg"));
    c.env_remove("SDG_THREADS");
    c
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> Output {
    sdg()
        .arg("run")
        .arg(config)
        .arg("--output-dir")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_dir(out: &Path) -> PathBuf {
    fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.is_dir())
        .expect("one run directory")
}

const DPP: &str = r#"
seed = 5
method = "dpp_check"

[instance]
name = "linear"

[numerics]
n_steps = 2
branching = 2
u_grid = [-1.0, 1.0]
v_grid = [-1.0, 1.0]
side = "both"
split_step = 1
"#;

#[test]
fn catalog_lists_builtin_instances() {
    let o = sdg().arg("catalog").output().unwrap();
    assert!(o.status.success());
    let text = stdout(&o);
    for name in ["lq", "delay", "separated_hamiltonian", "linear", "bilinear"] {
        assert!(text.contains(name), "{name} missing from\n{text}");
    }
}

#[test]
fn catalog_json_roundtrips() {
    let o = sdg().args(["catalog", "--json"]).output().unwrap();
    assert!(o.status.success());
    let entries: Vec<CatalogEntry> = serde_json::from_slice(&o.stdout).unwrap();
    let again = serde_json::to_string(&entries).unwrap();
    assert_eq!(serde_json::from_str::<Vec<CatalogEntry>>(&again).unwrap(), entries);
    assert!(entries.iter().any(|e| e.name == "lq" && e.params.iter().any(|p| p.name == "r1")));
}

#[test]
fn unknown_flag_exits_2() {
    let o = sdg().args(["catalog", "--frobnicate"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_seed_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", &DPP.replace("seed = 5", ""));
    let o = run(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("seed"), "{}", stderr(&o));
}

#[test]
fn unknown_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", &DPP.replace("split_step", "split_steps"));
    let o = run(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("split_steps"), "{}", stderr(&o));
}

#[test]
fn budget_exceeded_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "big.toml",
        "seed = 1\nmethod = \"tree\"\n[instance]\nname = \"lq\"\n[numerics]\nn_steps = 10\nbranching = 3\ngrid_points = 5\n",
    );
    let o = run(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn bad_thread_env_exits_2() {
    let o = sdg().env("SDG_THREADS", "many").arg("catalog").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn dpp_check_is_exact_and_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "dpp.toml", DPP);
    let out = dir.path().join("out");
    let first = run(&cfg, &out, &["--threads", "1"]);
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(stdout(&first).contains("(<= 1e-12)"), "{}", stdout(&first));

    let rd = run_dir(&out);
    let snapshot = |name: &str| fs::read(rd.join(name)).unwrap();
    let (csv1, report1, summary1) = (snapshot("dpp.csv"), snapshot("report.json"), snapshot("summary.txt"));
    let rows: Vec<f64> = String::from_utf8(csv1.clone())
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(5).unwrap().parse().unwrap())
        .collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|g| *g <= 1e-12));

    let second = sdg()
        .env("SDG_THREADS", "3")
        .arg("run")
        .arg(&cfg)
        .arg("--output-dir")
        .arg(&out)
        .output()
        .unwrap();
    assert!(second.status.success());
    assert_eq!(run_dir(&out), rd);
    assert_eq!(snapshot("dpp.csv"), csv1);
    assert_eq!(snapshot("report.json"), report1);
    assert_eq!(snapshot("summary.txt"), summary1);

    let meta: serde_json::Value = serde_json::from_slice(&snapshot("metadata.json")).unwrap();
    assert_eq!(meta["threads"], 3);
    assert!(meta["started"].is_string());

    let ledger = fs::read_to_string(out.join("ledger.csv")).unwrap();
    let lines: Vec<&str> = ledger.lines().collect();
    assert_eq!(lines[0], "instance_hash,method,value,stderr,gap,seed,timestamp");
    assert_eq!(lines.len(), 5);
    assert!(lines[1..].iter().all(|l| l.contains(",dpp_check,") && l.contains(",5,")));
}

#[test]
fn output_directory_depends_on_config_content() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let a = write_config(dir.path(), "a.toml", DPP);
    let b = write_config(dir.path(), "b.toml", &DPP.replace("seed = 5", "seed = 6"));
    assert!(run(&a, &out, &[]).status.success());
    assert!(run(&b, &out, &[]).status.success());
    let dirs = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(dirs, 2);
}

#[test]
fn ito_verify_errors_shrink_under_step_doubling() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "ito.toml",
        r#"
seed = 7
method = "ito_verify"

[instance]
name = "linear"
params = { sigma = 1.0 }

[numerics]
initial_state = 0.3
n_paths = 256
levels = [128, 256]
functional = "square"
"#,
    );
    let out = dir.path().join("out");
    let o = run(&cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(run_dir(&out).join("ito.csv")).unwrap();
    let errs: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(errs.len(), 2);
    assert!(errs[1] <= errs[0], "{errs:?}");
    assert!(stdout(&o).contains("nonincreasing under refinement: true"));
}

#[test]
fn residual_of_riccati_candidate_is_small() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "res.toml",
        r#"
seed = 2
method = "residual"

[instance]
name = "lq"

[numerics]
grid_points = 41
refine_points = 41
samples = 10
side = "both"
"#,
    );
    let out = dir.path().join("out");
    let o = run(&cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(run_dir(&out).join("residuals.csv")).unwrap();
    let res: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(res.len(), 20);
    assert!(res.iter().all(|r| r.abs() <= 1e-4), "{res:?}");
}

#[test]
fn isaacs_and_lsmc_runs_succeed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let isaacs = write_config(
        dir.path(),
        "isaacs.toml",
        "seed = 4\nmethod = \"isaacs\"\n[instance]\nname = \"separated_hamiltonian\"\n[numerics]\nsamples = 20\ngrid_points = 5\n",
    );
    let o = run(&isaacs, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("max Isaacs gap 0e0"), "{}", stdout(&o));

    let lsmc = write_config(
        dir.path(),
        "lsmc.toml",
        "seed = 4\nmethod = \"lsmc\"\n[instance]\nname = \"lq\"\n[numerics]\nn_paths = 2000\nn_steps = 10\ninitial_state = 1.0\n",
    );
    let o = run(&lsmc, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("lower value"));
}
