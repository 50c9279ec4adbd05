use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use thpn::anchors::generate_anchors;
use thpn::dataset::{
    apply_split, load_annotations, load_features, load_split, save_annotations, save_features,
    save_split, synthesize, Category, Dataset, FeatureStore, GridSpec, LabeledBox, Scene,
    SplitConfig, SynthConfig,
};
use thpn::evaluation::Subset;
use thpn::geometry::{encode_deltas, iou, BBox};
use thpn_cli::manifest::{ComponentSeeds, RunManifest, MANIFEST_FILE};
use thpn_cli::selftrain::{label_file, CHECKPOINT_FILE};
use thpn_cli::sweep::read_rows;

fn thpn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thpn"))
        .args(args)
        .env_remove("THPN_OUT_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = thpn(args);
    assert!(
        out.status.success(),
        "thpn {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small synthetic dataset written by the `synth` command.
fn small_data(root: &Path, seed: u64) -> PathBuf {
    let cfg = root.join("synth.json");
    std::fs::write(&cfg, r#"{"train_scenes": 12, "val_scenes": 6}"#).unwrap();
    let dir = root.join(format!("data{seed}"));
    ok(&["synth", "--config", s(&cfg), "--seed", &seed.to_string(), "--out", s(&dir)]);
    dir
}

#[test]
fn synth_default_round_trips() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path().join("d");
    ok(&["synth", "--seed", "4", "--out", s(&dir)]);
    for f in ["train.json", "val.json", "features.bin", "split.json", MANIFEST_FILE] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    let expected = synthesize(&SynthConfig::default(), ComponentSeeds::derive(4).data).unwrap();
    assert_eq!(load_annotations(dir.join("train.json")).unwrap(), expected.train);
    assert_eq!(load_annotations(dir.join("val.json")).unwrap(), expected.val);
    assert_eq!(load_features(dir.join("features.bin")).unwrap(), expected.features);
    let m = RunManifest::load(&dir.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.command, "synth");
    assert_eq!(m.seed, Some(4));
}

#[test]
fn synth_is_deterministic_per_seed() {
    let t = tempfile::tempdir().unwrap();
    let a = small_data(t.path(), 1);
    let b = t.path().join("again");
    ok(&["synth", "--config", s(&t.path().join("synth.json")), "--seed", "1", "--out", s(&b)]);
    let c = small_data(t.path(), 2);
    for f in ["train.json", "features.bin"] {
        let read = |d: &Path| std::fs::read(d.join(f)).unwrap();
        assert_eq!(read(&a), read(&b), "{f} differs for the same seed");
        assert_ne!(read(&a), read(&c), "{f} equal for different seeds");
    }
}

#[test]
fn out_root_from_environment() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("synth.json");
    std::fs::write(&cfg, r#"{"train_scenes": 2, "val_scenes": 1}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_thpn"))
        .args(["synth", "--config", s(&cfg)])
        .env("THPN_OUT_ROOT", t.path().join("root"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(t.path().join("root/synth/train.json").is_file());
}

#[test]
fn selftrain_without_rounds_writes_no_pseudo_labels() {
    let t = tempfile::tempdir().unwrap();
    let data = small_data(t.path(), 0);
    let out = t.path().join("r0");
    ok(&["selftrain", "--data", s(&data), "--rounds", "0", "--epochs", "2", "--out", s(&out)]);
    assert!(out.join(CHECKPOINT_FILE).is_file());
    let json_files: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".json"))
        .collect();
    assert_eq!(json_files.len(), 2, "{json_files:?}");
    let m = RunManifest::load(&out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.total_epochs, Some(2));
    assert_eq!(m.rounds.len(), 1);
}

#[test]
fn label_files_respect_budget() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("synth.json");
    std::fs::write(&cfg, r#"{"train_scenes": 60, "val_scenes": 2}"#).unwrap();
    let data = t.path().join("data");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);

    // trim the training labels to exactly 100 ID instances
    let split = load_split(data.join("split.json")).unwrap();
    let mut train = load_annotations(data.join("train.json")).unwrap();
    let mut kept = 0;
    for sc in &mut train.scenes {
        sc.labels.retain(|l| {
            if !split.is_id(l.class_id) {
                return true;
            }
            kept += 1;
            kept <= 100
        });
    }
    assert!(kept >= 100, "only {kept} ID instances");
    save_annotations(&train, data.join("train.json")).unwrap();
    assert_eq!(apply_split(&train, &split).unwrap().train.num_labels(), 100);

    let out = t.path().join("st");
    ok(&[
        "selftrain", "--data", s(&data), "--rounds", "2", "--epochs", "4", "--p-percent", "30",
        "--out", s(&out),
    ]);
    for round in 1..=2 {
        let labels = load_annotations(out.join(label_file(round))).unwrap();
        let pseudo = labels.scenes.iter().flat_map(|s| &s.labels).filter(|l| l.is_pseudo).count();
        assert!(pseudo <= 30, "round {round}: {pseudo} pseudo-labels");
        assert!(labels.num_labels() <= 130);
        assert_eq!(labels.num_labels() - pseudo, 100);
    }
    let m = RunManifest::load(&out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.total_epochs, Some(4 + 1 + 1));
    assert!(m.rounds.iter().all(|r| r.num_original == 100));
}

#[test]
fn eval_defaults_to_training_blend_and_writes_schema() {
    let t = tempfile::tempdir().unwrap();
    let data = small_data(t.path(), 5);
    let train = t.path().join("train");
    ok(&[
        "selftrain", "--data", s(&data), "--lambda-cls", "0.25", "--rounds", "0", "--epochs",
        "1", "--out", s(&train),
    ]);
    let ev = t.path().join("eval");
    ok(&["eval", "--checkpoint", s(&train.join(CHECKPOINT_FILE)), "--data", s(&data), "--out", s(&ev)]);
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(v["config"]["lambda_infer"], 0.25);
    for subset in ["ID", "OOD", "ALL"] {
        let r = &v[subset];
        for k in ["10", "30", "50", "100", "300", "500", "1000"] {
            let ar = r["ar"][k].as_f64().unwrap_or_else(|| panic!("{subset} AR@{k} missing"));
            assert!((0.0..=1.0).contains(&ar));
        }
        assert!(r["auc"].is_f64());
    }
    assert!(ev.join("predictions.json").is_file());

    let ev1 = t.path().join("eval1");
    ok(&[
        "eval", "--checkpoint", s(&train.join(CHECKPOINT_FILE)), "--data", s(&data),
        "--lambda-infer", "1", "--out", s(&ev1),
    ]);
    let v1: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev1.join("report.json")).unwrap()).unwrap();
    assert_eq!(v1["config"]["lambda_infer"], 1.0);

    let out = ok(&["report", "--in", s(&ev.join("report.json"))]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("AR@100") && text.contains("OOD"));
}

/// One scene whose objects sit on anchors; features carry the clipped offset
/// to the best-overlapping object and the overlap itself.
fn write_overfit_data(dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    let spec = GridSpec {
        width: 32.0,
        height: 32.0,
        stride: 4.0,
        anchor_size: 8.0,
    };
    let grid = generate_anchors((32.0, 32.0), 4.0, 8.0).unwrap();
    let boxes = [BBox::from_xywh(2.0, 2.0, 8.0, 8.0), BBox::from_xywh(18.0, 10.0, 8.0, 8.0)];
    let mut store = FeatureStore::new(spec, 5);
    let mut values = Vec::new();
    for a in &grid.anchors {
        let best = boxes.iter().max_by(|x, y| iou(a, x).total_cmp(&iou(a, y))).unwrap();
        let d = encode_deltas(a, best).unwrap().to_array();
        values.extend(d.iter().map(|v| v.clamp(-1.5, 1.5) as f32));
        values.push(iou(a, best) as f32);
    }
    store.insert(1, values).unwrap();
    let d = Dataset {
        scenes: vec![Scene {
            id: 1,
            width: 32.0,
            height: 32.0,
            labels: boxes.iter().map(|b| LabeledBox::ground_truth(*b, 1)).collect(),
        }],
        categories: vec![Category {
            id: 1,
            name: "thing".into(),
        }],
    };
    save_annotations(&d, dir.join("train.json")).unwrap();
    save_features(&store, dir.join("features.bin")).unwrap();
    save_split(&SplitConfig::new("one", [1]), dir.join("split.json")).unwrap();
}

#[test]
fn overfit_model_recalls_its_training_scene() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    write_overfit_data(&data);
    let run = t.path().join("run");
    ok(&[
        "selftrain", "--data", s(&data), "--rounds", "0", "--epochs", "3000", "--lambda-cls",
        "0.5", "--lambda-box", "1", "--learning-rate", "0.05", "--quality", "iou", "--out",
        s(&run),
    ]);
    let ev = t.path().join("eval");
    ok(&[
        "eval", "--checkpoint", s(&run.join(CHECKPOINT_FILE)), "--data", s(&data), "--on",
        "train", "--out", s(&ev),
    ]);
    let r = thpn_cli::report::load_report(&ev.join("report.json")).unwrap();
    let ar = r.ar(Subset::Id, 100).unwrap();
    assert!(ar >= 0.9, "ID AR@100 {ar}");
}

#[test]
fn exit_codes_separate_config_and_runtime_errors() {
    let t = tempfile::tempdir().unwrap();
    let data = small_data(t.path(), 6);
    let out = s(t.path());
    // bad blend weight is a configuration error
    let r = thpn(&["selftrain", "--data", s(&data), "--lambda-cls", "1.5", "--out", out]);
    assert_eq!(r.status.code(), Some(2));
    // so is an unknown flag value
    let r = thpn(&["selftrain", "--data", s(&data), "--quality", "area", "--out", out]);
    assert_eq!(r.status.code(), Some(2));
    // a split naming a class the data lacks
    let split = t.path().join("bad_split.json");
    save_split(&SplitConfig::new("bad", [99]), &split).unwrap();
    let r = thpn(&["selftrain", "--data", s(&data), "--split", s(&split), "--out", out]);
    assert_eq!(r.status.code(), Some(2));
    // missing input files fail at run time
    let r = thpn(&["selftrain", "--data", s(&t.path().join("nowhere")), "--out", out]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("nowhere"));
    // a corrupt checkpoint too
    let bad = t.path().join("bad.json");
    std::fs::write(&bad, "{}").unwrap();
    let r = thpn(&["eval", "--checkpoint", s(&bad), "--data", s(&data), "--out", out]);
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn sweep_writes_one_row_per_point_subset_and_budget() {
    let t = tempfile::tempdir().unwrap();
    let data = small_data(t.path(), 7);
    let out = t.path().join("sweep");
    ok(&[
        "sweep", "--data", s(&data), "--lambda-cls", "0,1", "--p-percent", "0,30", "--rounds",
        "1", "--epochs", "2", "--out", s(&out),
    ]);
    let rows = read_rows(&out.join("sweep.csv")).unwrap();
    assert_eq!(rows.len(), 4 * 3 * 7);
    for subset in ["ID", "OOD", "ALL"] {
        for k in [10, 100] {
            let n = rows.iter().filter(|r| r.subset == subset && r.k == k).count();
            assert_eq!(n, 4);
        }
    }
    let m = RunManifest::load(&out.join(MANIFEST_FILE)).unwrap();
    assert!(m.failures.is_empty());
    assert!(out.join("lambda1_p30_seed0").join("report.json").is_file());
}

#[test]
fn single_point_sweep_matches_selftrain_then_eval() {
    let t = tempfile::tempdir().unwrap();
    let data = small_data(t.path(), 8);
    let common = ["--rounds", "1", "--epochs", "2", "--seed", "3"];
    let sweep = t.path().join("sweep");
    let mut a = vec!["sweep", "--data", s(&data), "--lambda-cls", "0.5", "--p-percent", "30"];
    a.extend(common);
    a.extend(["--out", s(&sweep)]);
    ok(&a);

    let st = t.path().join("st");
    let mut b = vec!["selftrain", "--data", s(&data), "--lambda-cls", "0.5", "--p-percent", "30"];
    b.extend(common);
    b.extend(["--out", s(&st)]);
    ok(&b);
    let ev = t.path().join("ev");
    ok(&["eval", "--checkpoint", s(&st.join(CHECKPOINT_FILE)), "--data", s(&data), "--out", s(&ev)]);

    let point = sweep.join("lambda0.5_p30_seed3");
    let read = |p: PathBuf| std::fs::read_to_string(p).unwrap();
    assert_eq!(read(point.join(CHECKPOINT_FILE)), read(st.join(CHECKPOINT_FILE)));
    let ra = thpn_cli::report::load_report(&point.join("report.json")).unwrap();
    let rb = thpn_cli::report::load_report(&ev.join("report.json")).unwrap();
    assert_eq!(ra.subsets, rb.subsets);
}
