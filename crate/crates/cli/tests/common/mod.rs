//! Runs the command-line pipeline on a small synthetic world.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const SMALL_CONFIG: &str = "\
[estimation]
sample_size = 120
draws = 40

[simulation]
draws_mnl = 40
draws_mxl = 40
candidates = 14

[grid]
ps = [2, 4]

[synth]
private_users = 160
";

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_chargechoice"))
}

/// Runs the binary with `args` and returns its output, panicking with
/// stderr when the exit code differs from `code`.
pub fn run_expect(args: &[&str], code: i32) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert_eq!(
        out.status.code(),
        Some(code),
        "{args:?}\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn run_ok(args: &[&str]) -> Output {
    run_expect(args, 0)
}

fn s(p: &Path) -> String {
    p.to_str().expect("utf-8 path").to_string()
}

/// Every stage from `synth` to `compare` under `root`, single worker.
/// Returns the simulate output directory.
pub fn pipeline(root: &Path, seed: u64) -> PathBuf {
    let cfg = root.join("config.toml");
    std::fs::write(&cfg, SMALL_CONFIG).unwrap();
    let seed = seed.to_string();
    let global = ["--config".to_string(), s(&cfg), "--seed".into(), seed, "--jobs".into(), "1".into()];
    let stage = |args: Vec<String>| {
        let all: Vec<String> = global.iter().cloned().chain(args).collect();
        let refs: Vec<&str> = all.iter().map(String::as_str).collect();
        run_ok(&refs);
    };
    let w = root.join("world");
    let wf = |f: &str| s(&w.join(f));
    let d = |f: &str| s(&root.join(f));
    let net = || {
        vec![
            "--stations".to_string(),
            wf("stations.geojson"),
            "--nodes".into(),
            wf("nodes.csv"),
            "--network".into(),
            wf("network.csv"),
            "--amenities".into(),
            wf("amenities"),
        ]
    };
    let v = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();

    stage(v(&["synth", "--out", &s(&w)]));
    stage(v(&[
        "classify",
        "--accounts",
        &wf("accounts.csv"),
        "--sessions",
        &wf("sessions.csv"),
        "--stations",
        &wf("stations.geojson"),
        "--region",
        &wf("region.json"),
        "--out",
        &d("classify"),
    ]));
    let mut enc = v(&[
        "encode",
        "--accounts",
        &d("classify/private_accounts.csv"),
        "--sessions",
        &d("classify/private_sessions.csv"),
        "--level",
        "2",
        "--out",
        &d("encode"),
    ]);
    enc.extend(net());
    stage(enc);
    let obs = d("encode/observations.csv");
    for model in ["mnl", "mxl"] {
        stage(v(&["estimate", "--observations", &obs, "--model", model, "--level", "2", "--out", &d(&format!("estimate-{model}"))]));
        stage(v(&[
            "validate",
            "--observations",
            &obs,
            "--estimates",
            &d(&format!("estimate-{model}")),
            "--out",
            &d(&format!("validate-{model}")),
        ]));
    }
    let mut sim = v(&[
        "simulate",
        "--customers",
        &wf("customers.csv"),
        "--region",
        &wf("region.json"),
        "--level",
        "2",
        "--mnl",
        &d("estimate-mnl"),
        "--mxl",
        &d("estimate-mxl"),
        "--out",
        &d("simulate"),
    ]);
    sim.extend(net());
    stage(sim);
    stage(v(&["optimize", "--input", &d("simulate"), "--utilities", "mxl-mean", "--model", "pmedian", "--p", "3", "--out", &d("optimize")]));
    stage(v(&["compare", "--input", &d("simulate"), "--out", &d("compare")]));
    stage(v(&[
        "export-milp",
        "--input",
        &d("simulate"),
        "--utilities",
        "mnl",
        "--model",
        "maxmin",
        "--p",
        "2",
        "--consider-existing",
        "--out",
        &d("milp"),
    ]));
    root.join("simulate")
}

/// Relative path to file bytes for every file below `dir`.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}
