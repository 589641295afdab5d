use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn citylike(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_citylike")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, styles: usize, per: usize) -> PathBuf {
    let out = dir.join("bench");
    let o = citylike(&["synth", "--out", s(&out), "--styles", &styles.to_string(), "--images-per-style", &per.to_string(), "--tile", "72", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn unknown_subcommand_prints_usage() {
    let o = citylike(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage:"), "{}", stderr(&o));
    assert_eq!(citylike(&["--help"]).status.code(), Some(0));
    assert_eq!(citylike(&[]).status.code(), Some(1));
}

#[test]
fn report_before_infer_names_the_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("records.csv");
    let o = citylike(&["report", "--records", s(&records), "--target", "paris_fra"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(s(&records)), "{}", stderr(&o));
}

#[test]
fn invalid_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"seed": 1, "cities_file": "nope.csv"}"#).unwrap();
    assert_eq!(citylike(&["pipeline", "--config", s(&cfg)]).status.code(), Some(1));
    let demo = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/demo/demo.json");
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(demo).unwrap()).unwrap();
    v["cities_file"] = "missing.csv".into();
    std::fs::write(&cfg, v.to_string()).unwrap();
    let o = citylike(&["pipeline", "--config", s(&cfg), "--run-dir", s(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.csv"), "{}", stderr(&o));
}

#[test]
fn unreachable_provider_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let provider = dir.path().join("provider.json");
    std::fs::write(&provider, r#"{"provider": "remote", "base_url": "http://127.0.0.1:1/tiles", "max_in_flight": 1}"#)
        .unwrap();
    let locs = dir.path().join("locs.csv");
    std::fs::write(&locs, "city_id,kind,lat,lon\nx,grid,-37.8,144.9\n").unwrap();
    let o = citylike(&["fetch", "--provider", s(&provider), "--locations", s(&locs), "--out", s(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn stage_commands_chain_and_refuse_contamination() {
    let dir = tempfile::tempdir().unwrap();
    let bench = synth(dir.path(), 3, 12);
    let manifest = dir.path().join("data").join("manifest.csv");
    let o = citylike(&["dataset", "--images", s(&bench.join("images/map")), "--cities", s(&bench.join("cities.csv")), "--exclude", "style02", "--seed", "1", "--out", s(&manifest)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("data/class_index.json").is_file());
    assert!(dir.path().join("data/manifest.csv.provenance.json").is_file());

    let train_dir = dir.path().join("train");
    let o = citylike(&["train", "--manifest", s(&manifest), "--epochs", "2", "--batch-size", "8", "--seed", "2", "--out", s(&train_dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = train_dir.join("checkpoint.utnc");
    assert!(ckpt.is_file());
    let metrics = std::fs::read_to_string(train_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,train_loss,val_top1,val_top5,lr,seconds\n"), "{metrics}");

    let eval = dir.path().join("eval.json");
    let o = citylike(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out", s(&eval)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let e: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&eval).unwrap()).unwrap();
    assert!(e["top5"].as_f64().unwrap() >= e["top1"].as_f64().unwrap());

    let provider = dir.path().join("provider.json");
    std::fs::write(&provider, r#"{"provider": "synthetic", "styles_file": "bench/styles.json"}"#).unwrap();
    let grid = dir.path().join("grid.csv");
    let o = citylike(&["sample", "--grid", "style02", "--bbox=-24.02,-33.02,-23.99,-32.99", "--spacing", "1000", "--out", s(&grid)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let records = dir.path().join("records.csv");
    let infer = |city: &str| {
        citylike(&["infer", "--checkpoint", s(&ckpt), "--locations", s(&grid), "--source", "map", "--provider", s(&provider), "--tile", "72", "--eval-city", city, "--out", s(&records)])
    };
    let o = infer("style00");
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(!records.exists());
    let o = infer("style02");
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&records).unwrap();
    assert!(text.starts_with("lat,lon,predicted_city_id,probability,passes_filter\n"));
    assert_eq!(text.lines().count(), 1 + 16);

    let report = dir.path().join("report.json");
    let o = citylike(&["report", "--records", s(&records), "--target", "style00", "--cities", s(&bench.join("cities.csv")), "--checkpoint", s(&ckpt), "--out", s(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["likeness"]["evaluated"], 16);
    assert_eq!(r["skipped_locations"], 0);
    assert_eq!(r["checkpoint_sha256"].as_str().unwrap().len(), 64);

    let map = dir.path().join("map.png");
    let legend = dir.path().join("legend.csv");
    let o = citylike(&["render", "map", "--records", s(&records), "--cities", s(&bench.join("cities.csv")), "--target", "style00", "--legend", s(&legend), "--width", "120", "--height", "100", "--out", s(&map)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let png = citylike_core::RasterImage::load(&map).unwrap();
    assert_eq!((png.width(), png.height()), (120, 100));
    assert!(std::fs::read_to_string(&legend).unwrap().starts_with("city_id,name,r,g,b\n"));

    let gallery = dir.path().join("gallery.png");
    let o = citylike(&["render", "gallery", "--dir", s(&bench.join("images/map/style01")), "--cols", "3", "--max", "6", "--out", s(&gallery)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let g = citylike_core::RasterImage::load(&gallery).unwrap();
    assert_eq!((g.width(), g.height()), (3 * 72 + 16, 2 * 72 + 12));
}

#[test]
fn segment_mirrors_file_names() {
    let dir = tempfile::tempdir().unwrap();
    let bench = synth(dir.path(), 1, 4);
    let src = bench.join("images/map/style00");
    let out = dir.path().join("seg");
    let o = citylike(&["segment", "--in", s(&src), "--out", s(&out), "--spatial", "6", "--range", "4.5", "--min-density", "50"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for i in 0..4 {
        let name = format!("{i:05}.png");
        let a = citylike_core::RasterImage::load(&src.join(&name)).unwrap();
        let b = citylike_core::RasterImage::load(&out.join(&name)).unwrap();
        assert_eq!((a.width(), a.height()), (b.width(), b.height()));
    }
    assert!(out.join("index.csv").is_file());
}

#[test]
fn huge_learning_rate_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let bench = synth(dir.path(), 2, 8);
    let manifest = dir.path().join("manifest.csv");
    let o = citylike(&["dataset", "--images", s(&bench.join("images/map")), "--cities", s(&bench.join("cities.csv")), "--out", s(&manifest)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = citylike(&["train", "--manifest", s(&manifest), "--epochs", "3", "--batch-size", "4", "--lr", "1e30", "--out", s(&dir.path().join("t"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}
