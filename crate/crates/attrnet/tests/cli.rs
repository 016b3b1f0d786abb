//! End-to-end tests of the `attrnet` binary: every subcommand, exit-code
//! contract, and output-format checks.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use attrnet::checkpoint::load_checkpoint;
use attrnet::data::{load_manifest, write_manifest, MANIFEST_FILE};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_attrnet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

/// Shared fixture: a small dataset and a 2-epoch checkpoint.
struct Fixture {
    dir: PathBuf,
    data: PathBuf,
    ckpt: PathBuf,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let data = dir.join("data");
        let out = run(&[
            "gen-data",
            "--out",
            data.to_str().unwrap(),
            "--seed",
            "11",
            "--train",
            "32",
            "--val",
            "16",
            "--test",
            "24",
            "--size",
            "64",
            "--clutter",
            "0.2",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let ckpt = dir.join("model.atrn");
        let out = run(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--epochs",
            "2",
            "--seed",
            "5",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        Fixture { dir, data, ckpt }
    })
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().to_string();
                files.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn gen_data_is_deterministic_and_counts_match() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let args = |out: &Path| {
        vec![
            "gen-data".to_string(),
            "--out".into(),
            out.to_str().unwrap().into(),
            "--seed".into(),
            "3".into(),
            "--train".into(),
            "10".into(),
            "--val".into(),
            "4".into(),
            "--test".into(),
            "6".into(),
            "--size".into(),
            "48".into(),
            "--clutter".into(),
            "0.5".into(),
        ]
    };
    let out_a = bin().args(args(&a)).output().unwrap();
    assert!(out_a.status.success());
    let out_b = bin().args(args(&b)).output().unwrap();
    assert!(out_b.status.success());
    assert_eq!(tree_bytes(&a), tree_bytes(&b), "byte-identical trees");

    // stdout counts match the manifest rows
    let text = stdout(&out_a);
    assert!(text.contains("train: 10 images"));
    assert!(text.contains("val: 4 images"));
    assert!(text.contains("test: 6 images"));
    let ds = load_manifest(&a.join(MANIFEST_FILE)).unwrap();
    assert_eq!(ds.records.len(), 20);
}

#[test]
fn gen_data_empty_train_split_is_valid() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("empty");
    let out = run(&[
        "gen-data",
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        "1",
        "--train",
        "0",
        "--val",
        "0",
        "--test",
        "5",
        "--size",
        "32",
    ]);
    assert!(out.status.success());
    let ds = load_manifest(&out_dir.join(MANIFEST_FILE)).unwrap();
    assert_eq!(ds.records.len(), 5);
    assert!(ds
        .records
        .iter()
        .all(|r| r.split == attrnet::data::Split::Test));
}

#[test]
fn gen_data_bad_clutter_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen-data",
        "--out",
        tmp.path().join("x").to_str().unwrap(),
        "--clutter",
        "2.0",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_loadable_checkpoint_and_history() {
    let f = fixture();
    let ckpt = load_checkpoint(&f.ckpt).unwrap();
    assert_eq!(ckpt.config.num_classes, 12);
    assert_eq!(ckpt.canonical_size, 72);
    let history = std::fs::read_to_string(f.dir.join("history.csv")).unwrap();
    let mut lines = history.lines();
    assert_eq!(lines.next().unwrap(), "epoch,phase,lr,train_loss,val_loss");
    assert_eq!(history.lines().count(), 3); // header + 2 epochs
}

#[test]
fn train_same_seed_gives_identical_outputs() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let run_once = |dir: &Path| -> (Vec<u8>, String) {
        let ckpt = dir.join("m.atrn");
        let out = run(&[
            "train",
            "--data",
            f.data.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
            "--epochs",
            "2",
            "--seed",
            "5",
        ]);
        assert!(out.status.success());
        (
            std::fs::read(&ckpt).unwrap(),
            std::fs::read_to_string(dir.join("history.csv")).unwrap(),
        )
    };
    let d1 = tmp.path().join("r1");
    let d2 = tmp.path().join("r2");
    std::fs::create_dir_all(&d1).unwrap();
    std::fs::create_dir_all(&d2).unwrap();
    let (c1, h1) = run_once(&d1);
    let (c2, h2) = run_once(&d2);
    assert_eq!(c1, c2, "checkpoints byte-identical");
    assert_eq!(h1, h2, "history CSVs identical");
    // and identical to the fixture's own run
    assert_eq!(c1, std::fs::read(&f.ckpt).unwrap());
}

#[test]
fn warm_start_with_mismatched_classes_exits_2() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    // a dataset with a different class count: shrink the palette
    let shrunk = tmp.path().join("data5");
    {
        use attrnet::data::{generate_synthetic, SyntheticConfig};
        let mut cfg = SyntheticConfig::new(8, 4, 0, 64, 0.1, 2);
        cfg.palette.truncate(3); // 3 + 4 + 2 = 9 classes now
        let ds = generate_synthetic(&cfg).unwrap();
        write_manifest(&shrunk, &ds).unwrap();
    }
    let out = run(&[
        "train",
        "--data",
        shrunk.to_str().unwrap(),
        "--out",
        tmp.path().join("m.atrn").to_str().unwrap(),
        "--epochs",
        "1",
        "--warm-start",
        f.ckpt.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("classes"), "stderr: {err}");
}

#[test]
fn warm_start_with_matching_config_runs() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--data",
        f.data.to_str().unwrap(),
        "--out",
        tmp.path().join("warm.atrn").to_str().unwrap(),
        "--epochs",
        "1",
        "--seed",
        "6",
        "--warm-start",
        f.ckpt.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let warm = load_checkpoint(&tmp.path().join("warm.atrn")).unwrap();
    assert_eq!(warm.config.num_classes, 12);
}

#[test]
fn eval_writes_report_and_curves() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let report_path = tmp.path().join("report.json");
    let curves_path = tmp.path().join("curves.csv");
    let out = run(&[
        "eval",
        "--ckpt",
        f.ckpt.to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--split",
        "test",
        "--crop",
        "whole",
        "--report",
        report_path.to_str().unwrap(),
        "--curves",
        curves_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("overall: micro mAP"));

    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&report_path).unwrap()).unwrap();
    for field in [
        "split",
        "crop_mode",
        "num_samples",
        "bbox_fallbacks",
        "classes",
        "overall",
        "groups",
    ] {
        assert!(report.get(field).is_some(), "missing field {field}");
    }
    assert_eq!(report["num_samples"], 24);

    // per-group class lists match the schema sidecar
    let ds = load_manifest(&f.data.join(MANIFEST_FILE)).unwrap();
    let groups = report["groups"].as_array().unwrap();
    for g in groups {
        let name = g["group"].as_str().unwrap();
        let classes: Vec<String> = g["classes"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_str().unwrap().to_string())
            .collect();
        let expected: Vec<String> = match name {
            "color" => ds.schema.color.clone(),
            "shape" => ds.schema.shape.clone(),
            "pattern" => ds.schema.pattern.clone(),
            "texture" => ds.schema.texture.clone(),
            other => panic!("unknown group {other}"),
        };
        assert_eq!(classes, expected);
    }

    // curve CSV has the documented header and parseable rows
    let curves = std::fs::read_to_string(&curves_path).unwrap();
    let mut lines = curves.lines();
    assert_eq!(lines.next().unwrap(), "class,kind,x,y");
    let mut saw_pr = false;
    let mut saw_roc = false;
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 4);
        match cells[1] {
            "pr" => saw_pr = true,
            "roc" => saw_roc = true,
            other => panic!("unknown curve kind {other}"),
        }
        cells[2].parse::<f64>().unwrap();
        cells[3].parse::<f64>().unwrap();
    }
    assert!(saw_pr && saw_roc);
}

#[test]
fn eval_bbox_mode_falls_back_on_missing_bboxes() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    // copy the dataset but strip bboxes from every test record
    let stripped = tmp.path().join("nobbox");
    {
        let mut ds = load_manifest(&f.data.join(MANIFEST_FILE)).unwrap();
        for rec in ds.records.iter_mut() {
            if rec.split == attrnet::data::Split::Test {
                rec.bbox = None;
            }
        }
        write_manifest(&stripped, &ds).unwrap();
    }
    let report_path = tmp.path().join("r.json");
    let out = run(&[
        "eval",
        "--ckpt",
        f.ckpt.to_str().unwrap(),
        "--data",
        stripped.to_str().unwrap(),
        "--crop",
        "bbox",
        "--report",
        report_path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("24 records had no bbox"), "stderr: {err}");
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&report_path).unwrap()).unwrap();
    assert_eq!(report["bbox_fallbacks"], 24);
}

#[test]
fn predict_prints_ranked_attributes() {
    let f = fixture();
    let image = f.data.join("images/test_00000.ppm");
    let out = run(&[
        "predict",
        "--ckpt",
        f.ckpt.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 3, "default top-3:\n{text}");

    // top = all classes: scores in (0,1), sorted descending
    let out = run(&[
        "predict",
        "--ckpt",
        f.ckpt.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--top",
        "12",
    ]);
    let text = stdout(&out);
    let scores: Vec<f64> = text
        .lines()
        .map(|l| l.rsplit(' ').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(scores.len(), 12);
    assert!(scores.iter().all(|&s| s > 0.0 && s < 1.0));
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));

    // deterministic across invocations
    let again = run(&[
        "predict",
        "--ckpt",
        f.ckpt.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--top",
        "12",
    ]);
    assert_eq!(text, stdout(&again));
}

#[test]
fn predict_unreadable_image_exits_3() {
    let f = fixture();
    let out = run(&[
        "predict",
        "--ckpt",
        f.ckpt.to_str().unwrap(),
        "--image",
        "/nonexistent/image.ppm",
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn attend_writes_heatmaps_and_metadata() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let image = f.data.join("images/test_00001.ppm");
    let render = |class: &str, out_name: &str| -> (Vec<u8>, serde_json::Value) {
        let out_path = tmp.path().join(out_name);
        let out = run(&[
            "attend",
            "--ckpt",
            f.ckpt.to_str().unwrap(),
            "--image",
            image.to_str().unwrap(),
            "--class",
            class,
            "--out",
            out_path.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let map_path = tmp.path().join(format!(
            "{}.map.ppm",
            out_path.file_stem().unwrap().to_str().unwrap()
        ));
        let meta: serde_json::Value =
            serde_json::from_slice(&std::fs::read(out_path.with_extension("json")).unwrap())
                .unwrap();
        (std::fs::read(&map_path).unwrap(), meta)
    };

    let (map_red, meta_red) = render("red", "red.ppm");
    let (map_round, _) = render("round", "round.ppm");
    assert_ne!(map_red, map_round, "different classes give different maps");

    let lost = meta_red["lost_mass_fraction"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&lost));
    assert_eq!(meta_red["class"], "red");
}

#[test]
fn attend_unknown_class_exits_2_listing_names() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let image = f.data.join("images/test_00000.ppm");
    let out = run(&[
        "attend",
        "--ckpt",
        f.ckpt.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--class",
        "chartreuse",
        "--out",
        tmp.path().join("x.ppm").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("red") && err.contains("round"), "stderr: {err}");
}

#[test]
fn help_and_bad_flags_follow_exit_contract() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));

    let out = run(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["gen-data"]); // missing required --out
    assert_eq!(out.status.code(), Some(2));
}
