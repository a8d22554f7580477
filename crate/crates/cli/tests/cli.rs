use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use facseg::arch::{load_checkpoint, ArchitectureSpec, Graph, HeadKind};
use facseg::dataset::cmp_vocabulary;
use image::{Rgb, RgbImage};
use tempfile::TempDir;

fn facseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn files(dir: &Path, suffix: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_str().unwrap().ends_with(suffix))
        .collect();
    v.sort();
    v
}

/// Synthetic corpus and its masks under `root`.
fn corpus(root: &Path, n: usize) -> (PathBuf, PathBuf) {
    let syn = root.join("syn");
    let masks = root.join("masks");
    ok(facseg(&["synth", "-n", &n.to_string(), "--out", p(&syn), "--seed", "3"]));
    ok(facseg(&["rasterize", "--annotations", p(&syn), "--out", p(&masks)]));
    (syn, masks)
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&facseg(&["--help"])), 0);
    assert_eq!(code(&facseg(&["--version"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&facseg(&["frobnicate"])), 1);
    assert_eq!(code(&facseg(&["synth", "-n", "2", "--bogus"])), 1);
    assert_eq!(code(&facseg(&["eval", "--pred", "/nonexistent", "--gt", "/nonexistent", "--out", "/tmp"])), 1);
}

#[test]
fn bad_config_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"schema_version": 1, "unknown_key": 3}"#).unwrap();
    let o = facseg(&["--config", p(&cfg), "synth", "-n", "1", "--out", p(dir.path())]);
    assert_eq!(code(&o), 1);
    fs::write(&cfg, r#"{"schema_version": 9}"#).unwrap();
    assert_eq!(code(&facseg(&["--config", p(&cfg), "synth", "-n", "1", "--out", p(dir.path())])), 1);
    fs::write(&cfg, r#"{"schema_version": 1, "geometry": {"mpp": -1}}"#).unwrap();
    assert_eq!(code(&facseg(&["--config", p(&cfg), "synth", "-n", "1", "--out", p(dir.path())])), 1);
}

#[test]
fn synth_is_deterministic_and_rejects_zero() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(facseg(&["synth", "-n", "3", "--out", p(&a), "--seed", "11"]));
    ok(facseg(&["synth", "-n", "3", "--out", p(&b), "--seed", "11"]));
    let fa = files(&a, "");
    assert_eq!(fa.len(), 3 * 2 + 1);
    for f in fa {
        let g = b.join(f.file_name().unwrap());
        assert_eq!(fs::read(&f).unwrap(), fs::read(&g).unwrap(), "{}", f.display());
    }
    assert_eq!(code(&facseg(&["synth", "-n", "0", "--out", p(&a)])), 1);
}

#[test]
fn run_record_hash_ignores_output_directory() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(facseg(&["synth", "-n", "1", "--out", p(&a), "--seed", "5"]));
    ok(facseg(&["synth", "-n", "1", "--out", p(&b), "--seed", "5"]));
    let ra: serde_json::Value = serde_json::from_slice(&fs::read(a.join("run.json")).unwrap()).unwrap();
    let rb: serde_json::Value = serde_json::from_slice(&fs::read(b.join("run.json")).unwrap()).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(ra["command"], "synth");
    assert_eq!(ra["seed"], 5);
    assert_eq!(ra["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let dir = TempDir::new().unwrap();
    let (_, masks) = corpus(dir.path(), 3);
    let out = dir.path().join("eval");
    ok(facseg(&["eval", "--pred", p(&masks), "--gt", p(&masks), "--out", p(&out), "--composite", "cmp"]));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
    let mut checked = 0;
    for c in report["classes"].as_array().unwrap() {
        for (section, keys) in [("pixel", ["acc", "p", "r", "f1"].as_slice()), ("object", ["p", "r", "f1"].as_slice())] {
            let m = &c[section];
            let undefined: Vec<&str> = m["undefined"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
            for key in keys {
                let flag = if section == "object" { format!("{key}_ob") } else { key.to_string() };
                if !undefined.contains(&flag.as_str()) {
                    assert_eq!(m[key].as_f64(), Some(1.0), "{} {section} {key}", c["class"]);
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 4);
    assert_eq!(report["composite_accuracy"].as_f64(), Some(1.0));
    assert!(fs::read_to_string(out.join("metrics.csv")).unwrap().starts_with("class,Acc,P,R,F1,P_ob,R_ob,F1_ob"));
}

#[test]
fn zero_iterations_saves_the_initialization() {
    let dir = TempDir::new().unwrap();
    let (syn, masks) = corpus(dir.path(), 2);
    let out = dir.path().join("train");
    ok(facseg(&[
        "train", "--images", p(&syn), "--masks", p(&masks), "--out", p(&out), "--iterations", "0", "--seed", "9",
    ]));
    let (graph, saved) = load_checkpoint::<f32>(&out.join("model.weights")).unwrap();
    let mut spec = ArchitectureSpec::toy(HeadKind::Multihead);
    spec.classes = cmp_vocabulary();
    spec.seed = 9;
    assert_eq!(graph.spec(), &spec);
    let (_, init) = Graph::build::<f32>(&spec).unwrap();
    assert_eq!(saved.len(), init.len());
    for ((_, a), (_, b)) in saved.iter().zip(init.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
    }
}

#[test]
fn train_infer_eval_round_trip() {
    let dir = TempDir::new().unwrap();
    let (syn, masks) = corpus(dir.path(), 2);
    let train = dir.path().join("train");
    ok(facseg(&[
        "train", "--images", p(&syn), "--masks", p(&masks), "--out", p(&train), "--iterations", "2",
        "--batch-size", "2",
    ]));
    let log = fs::read_to_string(train.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let pred = dir.path().join("pred");
    ok(facseg(&[
        "infer", "--weights", p(&train.join("model.weights")), "--image", p(&syn), "--out", p(&pred),
        "--composite", "cmp",
    ]));
    assert_eq!(files(&pred, ".probs.json").len(), 2);
    assert_eq!(files(&pred, ".composite.png").len(), 2);
    assert_eq!(files(&pred, ".pos_renorm.f32").len(), 2 * cmp_vocabulary().len());
    let out = dir.path().join("eval");
    ok(facseg(&["eval", "--pred", p(&pred), "--gt", p(&masks), "--out", p(&out), "--composite", "cmp"]));
    assert!(out.join("metrics.csv").exists());
}

#[test]
fn refinement_from_a_multihead_checkpoint() {
    let dir = TempDir::new().unwrap();
    let (syn, masks) = corpus(dir.path(), 2);
    let base = dir.path().join("base");
    ok(facseg(&["train", "--images", p(&syn), "--masks", p(&masks), "--out", p(&base), "--iterations", "0"]));
    let refined = dir.path().join("refined");
    ok(facseg(&[
        "train", "--images", p(&syn), "--masks", p(&masks), "--out", p(&refined), "--head", "compatibility",
        "--init", p(&base.join("model.weights")), "--iterations", "1",
    ]));
    let log = fs::read_to_string(refined.join("train_log.csv")).unwrap();
    let phases: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(phases, ["0", "1"]);
}

fn square_footprints(dir: &Path) -> PathBuf {
    let f = dir.join("fp.geojson");
    fs::write(
        &f,
        r#"{"type":"FeatureCollection","features":[{"type":"Feature","id":"b1","properties":{},
        "geometry":{"type":"Polygon","coordinates":[[[0,0],[10,0],[10,10],[0,10],[0,0]]]}}]}"#,
    )
    .unwrap();
    f
}

fn sphere_manifest(dir: &Path, entry: &str) -> PathBuf {
    let pano = RgbImage::from_fn(256, 128, |x, y| Rgb([x as u8, (y * 2) as u8, 90]));
    pano.save(dir.join("pano.png")).unwrap();
    let m = dir.join("spheres.json");
    fs::write(&m, entry).unwrap();
    m
}

#[test]
fn extract_square_footprint_gives_four_facades() {
    let dir = TempDir::new().unwrap();
    let fp = square_footprints(dir.path());
    let sp = sphere_manifest(
        dir.path(),
        r#"[{"id":"s0","image_path":"pano.png","x":5,"y":5,"heading_deg":0}]"#,
    );
    let out = dir.path().join("out");
    ok(facseg(&["extract", "--footprints", p(&fp), "--spheres", p(&sp), "--out", p(&out), "--mpp", "0.5"]));
    assert_eq!(files(&out, ".png").len(), 4);
    let log: serde_json::Value = serde_json::from_slice(&fs::read(out.join("extract_log.json")).unwrap()).unwrap();
    assert_eq!(log["walls"], 4);

    // Every wall is 5 m from the sphere.
    let far = dir.path().join("far");
    ok(facseg(&[
        "extract", "--footprints", p(&fp), "--spheres", p(&sp), "--out", p(&far), "--mpp", "0.5", "--radius", "1",
    ]));
    assert_eq!(files(&far, ".png").len(), 0);
}

#[test]
fn extract_with_no_footprints_is_not_an_error() {
    let dir = TempDir::new().unwrap();
    let fp = dir.path().join("fp.geojson");
    fs::write(&fp, r#"{"type":"FeatureCollection","features":[]}"#).unwrap();
    let sp = sphere_manifest(dir.path(), r#"[]"#);
    let out = dir.path().join("out");
    ok(facseg(&["extract", "--footprints", p(&fp), "--spheres", p(&sp), "--out", p(&out)]));
    assert!(out.join("extract_log.json").exists());
}

#[test]
fn extract_rejects_manifest_without_heading() {
    let dir = TempDir::new().unwrap();
    let fp = square_footprints(dir.path());
    let sp = sphere_manifest(dir.path(), r#"[{"id":"s0","image_path":"pano.png","x":5,"y":5}]"#);
    let o = facseg(&["extract", "--footprints", p(&fp), "--spheres", p(&sp), "--out", p(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("heading_deg"));
}

#[test]
fn extract_fails_at_runtime_when_every_sphere_is_unreadable() {
    let dir = TempDir::new().unwrap();
    let fp = square_footprints(dir.path());
    let sp = sphere_manifest(dir.path(), r#"[{"id":"s0","image_path":"missing.png","x":5,"y":5,"heading_deg":0}]"#);
    let o = facseg(&["extract", "--footprints", p(&fp), "--spheres", p(&sp), "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
}
