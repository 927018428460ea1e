use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mkdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mkdiff"))
        .args(args)
        .env("MKDIFF_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mkdiff(args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--epochs",
    "1",
    "--k",
    "8",
    "--sigmas",
    "0.05,0.2",
    "--n-layers",
    "2",
    "--hidden-width",
    "8",
    "--lr",
    "1e-3",
];

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&[
        "synth",
        "--out",
        s(&data),
        "--shapes",
        "22",
        "--points",
        "150",
        "--seed",
        "1",
    ]);
    let manifest = data.join("manifest.json");
    let m = json(&manifest);
    assert_eq!(m["n_classes"], 16);
    assert_eq!(m["shapes"].as_array().unwrap().len(), 22);
    assert!(data.join("shape_000.xyz").exists());
    assert!(data.join("shape_000.labels").exists());
    assert!(data.join("shape_000.corr").exists());

    let stats = tmp.path().join("stats");
    ok(&[
        "graph-stats",
        "--out",
        s(&stats),
        "--cloud",
        s(&data.join("shape_000.xyz")),
        "--k",
        "8",
    ]);
    let g = json(&stats.join("graph_stats.json"));
    assert_eq!(g["n"], 150);
    assert_eq!(g["components"], 1);
    assert_eq!(g["per_sigma"].as_array().unwrap().len(), 8);

    let seg = tmp.path().join("seg");
    let mut args = vec![
        "train-seg",
        "--out",
        s(&seg),
        "--manifest",
        s(&manifest),
        "--deterministic",
    ];
    args.extend_from_slice(TINY);
    ok(&args);
    assert!(seg.join("checkpoint.mkdc").exists());
    let log = fs::read_to_string(seg.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
    let rec: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(rec["wall_ms"], 0);

    let ckpt = seg.join("checkpoint.mkdc");
    let ev = tmp.path().join("evalseg");
    ok(&[
        "eval-seg",
        "--out",
        s(&ev),
        "--ckpt",
        s(&ckpt),
        "--manifest",
        s(&manifest),
    ]);
    let dice = json(&ev.join("dice.json"));
    assert_eq!(dice["per_class"].as_array().unwrap().len(), 15);
    let mean = dice["mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mean));

    let sw = tmp.path().join("sweep");
    ok(&[
        "sweep",
        "--out",
        s(&sw),
        "--ckpt",
        s(&ckpt),
        "--manifest",
        s(&manifest),
        "--kind",
        "missing",
        "--grid",
        "0,0.5",
    ]);
    let rows = json(&sw.join("sweep.json"));
    let rows = rows["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["dice"]["mean"].as_f64().unwrap(), mean);
    assert_eq!(
        fs::read_to_string(sw.join("sweep.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );

    let desc = tmp.path().join("desc");
    let mut args = vec![
        "train-desc",
        "--out",
        s(&desc),
        "--manifest",
        s(&manifest),
        "--deterministic",
        "--triplets-per-step",
        "64",
    ];
    args.extend_from_slice(TINY);
    ok(&args);
    let dckpt = desc.join("checkpoint.mkdc");

    let ex = tmp.path().join("extract");
    ok(&[
        "extract",
        "--out",
        s(&ex),
        "--ckpt",
        s(&dckpt),
        "--cloud",
        s(&data.join("shape_003.xyz")),
    ]);
    let csv = fs::read_to_string(ex.join("descriptors.csv")).unwrap();
    assert_eq!(csv.lines().count(), 150);
    let row: Vec<f64> = csv
        .lines()
        .next()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(row.len(), 16);
    assert!((row.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-9);

    let ed = tmp.path().join("evaldesc");
    ok(&[
        "eval-desc",
        "--out",
        s(&ed),
        "--ckpt",
        s(&dckpt),
        "--manifest",
        s(&manifest),
        "--max-pairs",
        "1",
    ]);
    let met = json(&ed.join("metrics.json"));
    assert_eq!(met["n_pairs"], 1);
    let c10 = met["cmc_at_10"].as_f64().unwrap();
    assert!(c10 >= met["cmc_at_1"].as_f64().unwrap());
    for f in ["cmc.csv", "roc.csv", "correspondence.csv"] {
        assert!(
            fs::read_to_string(ed.join(f))
                .unwrap()
                .starts_with("# meta"),
            "{f}"
        );
    }

    let pt = tmp.path().join("perturb");
    ok(&[
        "perturb",
        "--out",
        s(&pt),
        "--cloud",
        s(&data.join("shape_000.xyz")),
        "--kind",
        "outlier",
        "--magnitude",
        "0.5",
    ]);
    let pts = fs::read_to_string(pt.join("shape_000_outlier.xyz")).unwrap();
    assert_eq!(
        pts.lines()
            .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
            .count(),
        225
    );
    let labels = fs::read_to_string(pt.join("shape_000_outlier.labels")).unwrap();
    assert_eq!(labels.split_whitespace().filter(|l| *l == "0").count(), 75);
}

#[test]
fn resolved_config_replays_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&[
        "synth",
        "--out",
        s(&data),
        "--shapes",
        "22",
        "--points",
        "120",
        "--seed",
        "4",
    ]);
    let manifest = data.join("manifest.json");
    let a = tmp.path().join("a");
    let mut args = vec![
        "train-seg",
        "--out",
        s(&a),
        "--manifest",
        s(&manifest),
        "--deterministic",
    ];
    args.extend_from_slice(TINY);
    ok(&args);

    let mut cfg = json(&a.join("config.resolved.json"));
    let b = tmp.path().join("b");
    cfg["out"] = Value::from(s(&b));
    let cfg_path = tmp.path().join("replay.json");
    fs::write(&cfg_path, cfg.to_string()).unwrap();
    ok(&["train-seg", "--config", s(&cfg_path)]);
    for f in ["checkpoint.mkdc", "train_log.jsonl"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("c.json");
    fs::write(&cfg_path, r#"{"shapes": 11, "points": 90, "seed": 2}"#).unwrap();
    let out = tmp.path().join("o");
    ok(&[
        "synth",
        "--config",
        s(&cfg_path),
        "--out",
        s(&out),
        "--points",
        "100",
    ]);
    let r = json(&out.join("config.resolved.json"));
    assert_eq!(r["shapes"], 11);
    assert_eq!(r["points"], 100);
    assert_eq!(r["seed"], 2);
}

#[test]
fn usage_errors_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");

    let r = mkdiff(&["synth", "--out", s(&out), "--set", "bogus_key=3"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("bogus_key"));

    let r = mkdiff(&["synth", "--out", s(&out), "--set", "points=\"many\""]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("points"));

    let r = mkdiff(&["train-seg", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("manifest"));

    let r = mkdiff(&[
        "train-seg",
        "--out",
        s(&out),
        "--set",
        "lr=-1",
        "--manifest",
        "x.json",
    ]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("lr"));

    assert_eq!(mkdiff(&["no-such-command"]).status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let r = mkdiff(&[
        "extract",
        "--out",
        s(&out),
        "--ckpt",
        s(&tmp.path().join("none.mkdc")),
        "--cloud",
        "x.xyz",
    ]);
    assert_eq!(r.status.code(), Some(2));
}
