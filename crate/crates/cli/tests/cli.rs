use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mrf_core::maps::load_qmaps;
use mrf_core::mrfnet::load_model;
use mrf_core::spline::parse_filter_csv;
use mrf_core::Engine;
use serde_json::Value;

const SEQ: &str = r#"{"length": 60}"#;
const GRID: &str = r#"{"t1": {"start": 200, "step": 200, "stop": 2000}, "t2": {"start": 20, "step": 20, "stop": 200}}"#;

fn forge(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrf-forge"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn manifest(dir: &Path, command: &str) -> Value {
    serde_json::from_slice(&fs::read(dir.join(format!("{command}.manifest.json"))).unwrap())
        .unwrap()
}

/// Simulated dictionary and a two-epoch checkpoint in `dir/out`.
fn trained(dir: &Path) {
    write(
        dir,
        "sim.json",
        &format!(r#"{{"sequence": {SEQ}, "grid": {GRID}}}"#),
    );
    let o = forge(&["sim-dict", "--config", "sim.json", "--out", "out"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    write(
        dir,
        "train.json",
        r#"{"dictionary": "out/dictionary.mrfd", "seed": 4, "rank": 5, "layout": [5, 16, 8, 2],
            "training": {"epochs": 2, "augmentation_factor": 3}}"#,
    );
    let o = forge(&["train", "--config", "train.json", "--out", "out"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn reconstruct_config(dir: &Path) {
    write(
        dir,
        "rec.json",
        &format!(
            r#"{{"seed": 2, "sequence": {SEQ}, "rank": 5, "dictionary": "out/dictionary.mrfd", "checkpoint": "out/model.mrfn",
                "phantom": {{"height": 16, "width": 16, "regions": [
                    {{"name": "a", "cx": -0.5, "cy": 0, "rx": 0.35, "ry": 0.6, "t1_ms": 800, "t2_ms": 60, "scale": 1}},
                    {{"name": "b", "cx": 0.5, "cy": 0, "rx": 0.35, "ry": 0.6, "t1_ms": 1400, "t2_ms": 120, "scale": 0.5}}]}}}}"#
        ),
    );
}

#[test]
fn sim_dict_writes_dictionary_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let out = dir.path().join("out");
    let m = manifest(&out, "sim-dict");
    assert_eq!(m["command"], "sim-dict");
    assert!(m["seed"].is_null());
    let digest = m["output_digests"]["dictionary.mrfd"].as_str().unwrap();
    let bytes = fs::read(out.join("dictionary.mrfd")).unwrap();
    let d = mrf_core::dictionary::decode_dictionary(&bytes).unwrap();
    assert_eq!((d.n_atoms(), d.frames()), (100, 60));
    assert_eq!(digest.len(), 64);
    let t = manifest(&out, "train");
    assert_eq!(
        t["input_digests"]["out/dictionary.mrfd"].as_str().unwrap(),
        digest
    );
}

#[test]
fn invalid_configs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write(
        p,
        "zero.json",
        r#"{"grid": {"t1": {"start": 100, "step": 0, "stop": 200}, "t2": {"start": 20, "step": 2, "stop": 30}}}"#,
    );
    let o = forge(&["sim-dict", "--config", "zero.json"], p);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("t1"), "{}", stderr(&o));

    write(p, "bad.json", r#"{"sequence": {"length": 10,}}"#);
    assert_eq!(code(&forge(&["sim-dict", "--config", "bad.json"], p)), 2);
    write(p, "unknown.json", r#"{"sequence": {"lenght": 10}}"#);
    assert_eq!(
        code(&forge(&["sim-dict", "--config", "unknown.json"], p)),
        2
    );

    write(
        p,
        "rec.json",
        r#"{"seed": 1, "engine": "net", "dictionary": "d.mrfd"}"#,
    );
    let o = forge(&["reconstruct", "--config", "rec.json"], p);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("checkpoint"), "{}", stderr(&o));

    assert_eq!(code(&forge(&["bench", "--config", "nope.json"], p)), 2);
    assert_eq!(code(&forge(&["frobnicate"], p)), 2);
}

#[test]
fn missing_inputs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write(
        p,
        "train.json",
        r#"{"dictionary": "absent.mrfd", "seed": 1}"#,
    );
    let o = forge(&["train", "--config", "train.json"], p);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("absent.mrfd"), "{}", stderr(&o));
}

#[test]
fn training_is_reproducible_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    trained(p);
    let digests = |m: &Value| m["output_digests"].clone();
    let first = digests(&manifest(&p.join("out"), "train"));
    for threads in ["1", "4"] {
        let o = forge(
            &[
                "train",
                "--config",
                "train.json",
                "--out",
                "again",
                "--threads",
                threads,
            ],
            p,
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let m = manifest(&p.join("again"), "train");
        assert_eq!(digests(&m), first);
        assert_eq!(m["threads"], threads.parse::<u64>().unwrap());
    }
    let (model, meta) = load_model(p.join("out/model.mrfn")).unwrap();
    assert_eq!(model.layout(), &[60, 5, 16, 8, 2]);
    assert_eq!(meta.train_config.unwrap().rng_seed, 4);
    let loss = fs::read_to_string(p.join("out/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);
}

#[test]
fn reconstruct_runs_both_engines() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    trained(p);
    reconstruct_config(p);
    let o = forge(&["reconstruct", "--config", "rec.json", "--out", "rec"], p);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(metrics["m"], 16);
    assert_eq!(metrics["agreement"].as_array().unwrap().len(), 2);
    for engine in ["DM", "NET"] {
        let regions = metrics["engines"][engine]["regions"].as_array().unwrap();
        assert_eq!(regions.len(), 2);
        assert_eq!(regions[1]["name"], "b");
    }
    let dm = load_qmaps(p.join("rec/dm.mrfq"), Engine::Dm).unwrap();
    assert_eq!((dm.height, dm.width), (16, 16));
    assert!(p.join("rec/net_maps.csv").exists());
    assert_eq!(
        manifest(&p.join("rec"), "reconstruct")["output_digests"]
            .as_object()
            .unwrap()
            .len(),
        5
    );

    // Fully sampled and noiseless: DM recovers the on-grid phantom exactly.
    let o = forge(
        &[
            "reconstruct",
            "--config",
            "rec.json",
            "--out",
            "full",
            "--engine",
            "dm",
            "--m",
            "256",
        ],
        p,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(metrics["engines"]["NET"].is_null());
    for r in metrics["engines"]["DM"]["regions"].as_array().unwrap() {
        assert_eq!(r["t1_median_rel_error"], 0.0);
        assert_eq!(r["t2_median_rel_error"], 0.0);
    }
}

#[test]
fn reconstruct_rejects_a_mismatched_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    trained(p);
    write(
        p,
        "rec.json",
        r#"{"seed": 1, "engine": "dm", "dictionary": "out/dictionary.mrfd", "sequence": {"length": 61}}"#,
    );
    let o = forge(&["reconstruct", "--config", "rec.json"], p);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("dictionary"), "{}", stderr(&o));
}

#[test]
fn analyze_writes_segments_and_filters() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    trained(p);
    write(
        p,
        "an.json",
        r#"{"checkpoint": "out/model.mrfn", "dictionary": "out/dictionary.mrfd", "seed": 1, "k": 1,
            "region": {"t1_ms": [600, 1000], "t2_ms": [40, 100]}}"#,
    );
    let o = forge(
        &["analyze", "segments", "--config", "an.json", "--out", "an"],
        p,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let segments = fs::read_to_string(p.join("an/segments.csv")).unwrap();
    assert_eq!(segments.lines().count(), 101);

    let o = forge(
        &["analyze", "filters", "--config", "an.json", "--out", "an"],
        p,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = parse_filter_csv(&fs::read_to_string(p.join("an/filters.csv")).unwrap()).unwrap();
    assert_eq!(table.filter_t1.len(), 60);
    assert!(p.join("an/fingerprints.csv").exists());

    write(
        p,
        "k0.json",
        r#"{"checkpoint": "out/model.mrfn", "dictionary": "out/dictionary.mrfd", "seed": 1, "k": 0}"#,
    );
    assert_eq!(
        code(&forge(&["analyze", "segments", "--config", "k0.json"], p)),
        2
    );
}

#[test]
fn bench_reports_cost_and_timing() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write(
        p,
        "bench.json",
        r#"{"seed": 1, "frames": 1000, "rank": 10, "atoms": 806, "layout": [10, 200, 30, 2], "voxels": 50}"#,
    );
    let o = forge(&["bench", "--config", "bench.json", "--out", "b"], p);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["cost"]["ratio_flops"], 1.0);
    assert_eq!(r["sizes"]["atoms"], 806);
    assert_eq!(r["timing"]["voxels"], 50);
    assert!(r["timing"]["dm_seconds"].as_f64().unwrap() > 0.0);
    let saved: Value = serde_json::from_slice(&fs::read(p.join("b/bench.json")).unwrap()).unwrap();
    assert_eq!(saved, r);
}

/// Default-size pipeline; takes minutes.
#[test]
#[ignore]
fn default_sizes_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write(p, "sim.json", "{}");
    assert_eq!(
        code(&forge(
            &["sim-dict", "--config", "sim.json", "--out", "out"],
            p
        )),
        0
    );
    write(
        p,
        "train.json",
        r#"{"dictionary": "out/dictionary.mrfd", "seed": 1, "training": {"augmentation_factor": 2, "epochs": 2}}"#,
    );
    assert_eq!(
        code(&forge(
            &["train", "--config", "train.json", "--out", "out"],
            p
        )),
        0
    );
    write(
        p,
        "rec.json",
        r#"{"seed": 9, "dictionary": "out/dictionary.mrfd", "checkpoint": "out/model.mrfn"}"#,
    );
    assert_eq!(
        code(&forge(
            &["reconstruct", "--config", "rec.json", "--out", "out"],
            p
        )),
        0
    );
}
