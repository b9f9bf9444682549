use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sparsekit::Checkpoint;
use sparsekit_core::bench::CSV_HEADER;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparsekit"))
        .args(args)
        .current_dir(dir)
        .env_remove("SPARSEKIT_OUT")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn machine_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).lines().find(|l| l.starts_with("sparsekit-error ")).expect("machine line").to_string()
}

const SMALL_BENCH: [&str; 12] = [
    "--set",
    "bench.model.d_model=32",
    "--set",
    "bench.model.d_ff=64",
    "--set",
    "bench.model.max_ctx=24",
    "--prefill",
    "12",
    "--decode",
    "4",
    "--repeats",
    "5",
];

#[test]
fn sweep_writes_one_row_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let args = [&["sweep", "--levels", "0,0.5,0.7", "--quant", "both", "--out", "s"][..], &SMALL_BENCH].concat();
    ok(dir.path(), &args);
    let mut reader = csv::Reader::from_path(dir.path().join("s/bench.csv")).unwrap();
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>().join(","), CSV_HEADER);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3 * 2 * 2);
    for r in &rows {
        let tps: f64 = r[5].parse().unwrap();
        assert!(tps > 0.0);
        let (useful, dense): (u64, u64) = (r[6].parse().unwrap(), r[7].parse().unwrap());
        let s: f64 = r[1].parse().unwrap();
        assert!((useful as f64 / dense as f64 - (1.0 - s)).abs() < 1e-3, "{r:?}");
    }
    let backends: Vec<&str> = rows.iter().map(|r| &r[3]).collect();
    assert!(backends.contains(&"sparse_int8") && backends.contains(&"int8") && backends.contains(&"dense"));
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("s/run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "sweep");
    assert!(run["recipe"].as_str().unwrap().contains("levels = [0.0, 0.5, 0.7]"));
    assert_eq!(run["recipe_hash"].as_str().unwrap().len(), 64);
    assert!(!dir.path().join("s/.sparsekit.lock").exists());
}

#[test]
fn prune_then_inspect_reports_the_target() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["train", "--set", "train.steps=5", "--out", "t"]);
    ok(dir.path(), &["prune", "--in", "t", "--set", "profile.target=0.6", "--set", "prune.method=\"magnitude\"", "--out", "p"]);
    let text = ok(dir.path(), &["inspect", "p"]);
    let line = text.lines().find(|l| l.starts_with("linear_sparsity ")).unwrap();
    let s: f64 = line["linear_sparsity ".len()..].parse().unwrap();
    assert!((s - 0.6).abs() < 1e-3, "{s}");
    let ck = Checkpoint::load(&dir.path().join("p")).unwrap();
    assert!((ck.mask.sparsity() - 0.6).abs() < 1e-3);
    assert_eq!(ck.metadata["command"], "prune");
    let one = ok(dir.path(), &["inspect", "p/tensors/blocks.0.mlp.up.spkt"]);
    assert!(one.contains("dtype f32") && one.contains("layout rowpair16"), "{one}");
    let layers = fs::read_to_string(dir.path().join("p/layers.csv")).unwrap();
    assert_eq!(layers.lines().count(), 1 + 12);
}

#[test]
fn sparse_training_keeps_the_mask_and_quantize_keeps_zeros() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["train", "--set", "train.steps=5", "--out", "t"]);
    ok(dir.path(), &["prune", "--in", "t", "--set", "profile.target=0.5", "--out", "p"]);
    ok(dir.path(), &["train", "--in", "p", "--set", "train.steps=10", "--out", "f"]);
    let pruned = Checkpoint::load(&dir.path().join("p")).unwrap();
    let tuned = Checkpoint::load(&dir.path().join("f")).unwrap();
    assert_eq!(pruned.mask, tuned.mask);
    assert_ne!(pruned.model, tuned.model);
    let metrics = fs::read_to_string(dir.path().join("f/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("step,loss"));
    assert_eq!(metrics.lines().count(), 11);
    ok(dir.path(), &["quantize", "--in", "f", "--set", "quant.skip_top_k_kurtosis=2", "--out", "q"]);
    let q = Checkpoint::load(&dir.path().join("q")).unwrap();
    let quant = q.quant.unwrap();
    assert_eq!(quant.skipped.len(), 2);
    for (name, m) in &quant.layers {
        assert!(tuned.mask.get(name).unwrap().holds_zeros(m.q.map(|v| v as f32).as_slice()));
    }
    let bench = ok(dir.path(), &[&["bench", "--in", "q", "--backends", "dense,sparse_int8", "--out", "b"][..], &SMALL_BENCH[6..]].concat());
    assert_eq!(bench.lines().filter(|l| l.contains(",sparse_int8,")).count(), 2);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["prune", "--bogus"], &["sweep", "--levels"]] {
        let out = run(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(machine_line(&out).contains("kind=usage"));
    }
    assert_eq!(run(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(run(dir.path(), &["--version"]).status.code(), Some(0));
}

#[test]
fn recipe_errors_name_the_key_and_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[quant]\nalpah = 0.5\n").unwrap();
    let cases: [(&[&str], &str); 4] = [
        (&["sweep", "--recipe", "bad.toml"], "key=quant.alpah"),
        (&["sweep", "--set", "profile.target=1.5"], "key=profile.target"),
        (&["sweep", "--levels", "0,1.2"], "key=bench.levels"),
        (&["sweep", "--layout", "tile3x3"], "key=bench.layout"),
    ];
    for (args, key) in cases {
        let out = run(dir.path(), args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        let line = machine_line(&out);
        assert!(line.contains("kind=recipe") && line.contains(key), "{line}");
    }
    let missing = run(dir.path(), &["prune", "--in", "nowhere"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(machine_line(&missing).contains("kind=io"));
}

#[test]
fn locked_output_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("o")).unwrap();
    fs::write(dir.path().join("o/.sparsekit.lock"), "").unwrap();
    let out = run(dir.path(), &["train", "--set", "train.steps=1", "--out", "o"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(machine_line(&out).contains("kind=locked"));
}

#[test]
fn default_output_lands_under_the_env_root() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_sparsekit"))
        .args(["train", "--set", "train.steps=2"])
        .current_dir(dir.path())
        .env("SPARSEKIT_OUT", "runs")
        .output()
        .unwrap();
    assert!(out.status.success());
    let entries: Vec<String> =
        fs::read_dir(dir.path().join("runs")).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert_eq!(entries.len(), 1);
    assert!(entries[0].starts_with("train-") && entries[0].len() == "train-".len() + 12, "{entries:?}");
}

#[test]
fn identical_runs_write_identical_checkpoints() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [a.path(), b.path()] {
        ok(d, &["train", "--seed", "4", "--set", "train.steps=8", "--out", "t"]);
        ok(d, &["prune", "--seed", "4", "--in", "t", "--out", "p"]);
    }
    for sub in ["t", "p"] {
        assert_eq!(
            sparsekit::checkpoint::snapshot(&a.path().join(sub)).unwrap(),
            sparsekit::checkpoint::snapshot(&b.path().join(sub)).unwrap()
        );
    }
    let c = tempfile::tempdir().unwrap();
    ok(c.path(), &["train", "--seed", "5", "--set", "train.steps=8", "--out", "t"]);
    assert_ne!(fs::read(a.path().join("t/metrics.csv")).unwrap(), fs::read(c.path().join("t/metrics.csv")).unwrap());
}
