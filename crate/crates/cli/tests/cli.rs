use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn subprune(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_subprune"))
        .args(args)
        .current_dir(dir)
        .env("SUBPRUNE_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn small_bundle(dir: &Path) {
    let out = subprune(
        &[
            "synth",
            "--arch",
            "mlp:8,12,10,4",
            "--samples",
            "150",
            "--seed",
            "2",
            "--out",
            "m.zip",
        ],
        dir,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn csv_column(path: &Path, name: &str) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(i).unwrap().to_string()).collect()
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let dir = TempDir::new().unwrap();
    for name in ["a.zip", "b.zip"] {
        let out = subprune(
            &[
                "synth",
                "--arch",
                "mlp:8,6,4",
                "--samples",
                "64",
                "--seed",
                "7",
                "--out",
                name,
            ],
            dir.path(),
        );
        assert_eq!(code(&out), 0);
    }
    let a = fs::read(dir.path().join("a.zip")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.zip")).unwrap());
    let out = subprune(
        &[
            "synth",
            "--arch",
            "mlp:8,6,4",
            "--samples",
            "64",
            "--seed",
            "8",
            "--out",
            "c.zip",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    assert_ne!(a, fs::read(dir.path().join("c.zip")).unwrap());
}

#[test]
fn lenet_toy_rank_table() {
    let dir = TempDir::new().unwrap();
    let out = subprune(
        &["synth", "--arch", "lenet-toy", "--samples", "90", "--out", "l.zip"],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let out = subprune(&["rankdiag", "--bundle", "l.zip", "--out", "r.json"], dir.path());
    assert_eq!(code(&out), 0);
    let table = String::from_utf8(out.stdout).unwrap();
    for layer in ["conv1", "conv2", "fc1"] {
        assert!(table.contains(layer), "{table}");
    }
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 3);
    assert_eq!(json[0]["diagnostic"]["group_size"], 9);
}

#[test]
fn full_rank_mlp_layers_report_one() {
    let dir = TempDir::new().unwrap();
    small_bundle(dir.path());
    let out = subprune(&["rankdiag", "--bundle", "m.zip"], dir.path());
    assert_eq!(code(&out), 0);
    let table = String::from_utf8(out.stdout).unwrap();
    let fractions: Vec<&str> = table
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().last().unwrap())
        .collect();
    assert_eq!(fractions, ["1.000", "1.000"], "{table}");
}

#[test]
fn verify_passes_clean_and_fails_with_injected_fault() {
    let dir = TempDir::new().unwrap();
    let out = subprune(&["verify", "--instances", "12", "--out", "v.json"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("v.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["checks"].as_array().unwrap().len(), 12 * 5);

    let out = subprune(
        &["verify", "--instances", "12", "--inject-fault", "flip-gain-sign"],
        dir.path(),
    );
    assert_eq!(code(&out), 3);
}

#[test]
fn no_compression_keeps_accuracy_and_output() {
    let dir = TempDir::new().unwrap();
    small_bundle(dir.path());
    let out = subprune(
        &["prune", "--bundle", "m.zip", "--compression", "1", "--out", "o"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("o/report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"][0]["acc1"], report["original"]["acc1"]);
    assert_eq!(report["config"]["variant"], "asym");
    let err: f64 = csv_column(&dir.path().join("o/report.csv"), "out_err")[0]
        .parse()
        .unwrap();
    assert!(err < 1e-20);
    assert!(dir.path().join("o/pruned/asym_c1_seed0.zip").exists());
}

#[test]
fn report_columns_and_reproducible_random_runs() {
    let dir = TempDir::new().unwrap();
    small_bundle(dir.path());
    let args = [
        "prune",
        "--bundle",
        "m.zip",
        "--variant",
        "random",
        "--compression",
        "2,1.5",
        "--seed",
        "4,3",
        "--no-bundles",
    ];
    let mut acc = Vec::new();
    for o in ["o1", "o2"] {
        let mut a = args.to_vec();
        a.extend(["--out", o]);
        assert_eq!(code(&subprune(&a, dir.path())), 0);
        acc.push(csv_column(&dir.path().join(o).join("report.csv"), "acc1"));
    }
    assert_eq!(acc[0], acc[1]);
    let csv = fs::read_to_string(dir.path().join("o1/report.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "variant,c,seed,acc1,params,flops,speedup,out_err,time_ms"
    );
    let keys: Vec<(String, String)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].to_string(), f[2].to_string())
        })
        .collect();
    let expect = [("1.5", "3"), ("1.5", "4"), ("2", "3"), ("2", "4")];
    assert_eq!(keys, expect.map(|(a, b)| (a.to_string(), b.to_string())));
    assert!(!dir.path().join("o1/pruned").exists());

    let out = subprune(&["report", "o1/report.json", "--out", "plot.csv"], dir.path());
    assert_eq!(code(&out), 0);
    let plot = fs::read_to_string(dir.path().join("plot.csv")).unwrap();
    assert_eq!(plot.lines().count(), 3);
    assert!(plot.lines().nth(1).unwrap().starts_with("random,1.5,2,"));
}

#[test]
fn budget_modes_and_infeasible_exit_code() {
    let dir = TempDir::new().unwrap();
    small_bundle(dir.path());
    for mode in ["accuracy", "threshold", "equal-fraction"] {
        let out = subprune(
            &[
                "budget",
                "--bundle",
                "m.zip",
                "--budget-mode",
                mode,
                "--compression",
                "1,2",
            ],
            dir.path(),
        );
        assert_eq!(code(&out), 0, "{mode}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = subprune(&["budget", "--bundle", "m.zip", "--compression", "1000"], dir.path());
    assert_eq!(code(&out), 2);
    let out = subprune(
        &["prune", "--bundle", "m.zip", "--compression", "1000", "--out", "o"],
        dir.path(),
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn usage_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    small_bundle(dir.path());
    for args in [
        vec!["frobnicate"],
        vec!["prune"],
        vec!["prune", "--bundle", "m.zip", "--variant", "nope"],
        vec!["prune", "--bundle", "m.zip", "--compression", "0.5"],
        vec!["prune", "--bundle", "m.zip", "--budget-mode", "magic"],
        vec!["synth", "--arch", "resnet", "--out", "x.zip"],
        vec!["verify", "--inject-fault", "unknown"],
        vec!["prune", "--bundle", "missing.zip"],
    ] {
        let out = subprune(&args, dir.path());
        assert_eq!(code(&out), 1, "{args:?}");
    }
    assert_eq!(code(&subprune(&["--help"], dir.path())), 0);
}
