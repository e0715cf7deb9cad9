//! End-to-end runs of the `admri` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use admri::data::LabeledImageSet;
use admri::models::{CheckpointMeta, Model, ModelSpec};
use admri::rng::derive_seed;
use admri::tensor::Padding;
use admri::Tensor;

fn admri(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_admri"))
        .args(args)
        .current_dir(dir)
        .env_remove("ADMRI_OUT_DIR")
        .env_remove("ADMRI_THREADS")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[track_caller]
fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = admri(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn small_synth(dir: &Path, name: &str, seed: &str) {
    ok(
        dir,
        &[
            "synth",
            "--per-class",
            "10",
            "--size",
            "32",
            "--seed",
            seed,
            "--out",
            name,
        ],
    );
}

fn tiny_train(dir: &Path, extra: &[&str]) {
    let mut args = vec![
        "train",
        "--data",
        "d.imds",
        "--arch",
        "bayescnn",
        "--filters",
        "4,8",
        "--epochs",
        "2",
        "--seed",
        "5",
    ];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    assert_eq!(code(&admri(d, &["--help"])), 0);
    assert_eq!(code(&admri(d, &["--version"])), 0);
    assert_eq!(code(&admri(d, &["frobnicate"])), 1);
    assert_eq!(code(&admri(d, &["train"])), 1, "missing --data");
    assert_eq!(code(&admri(d, &["train", "--data", "absent.imds"])), 2);
    small_synth(d, "d.imds", "1");
    assert_eq!(code(&admri(d, &["train", "--data", "d.imds", "--arch", "resnet"])), 1);
    assert_eq!(code(&admri(d, &["train", "--data", "d.imds", "--split", "0.9,0.3"])), 1);
    assert_eq!(
        code(&admri(d, &["synth", "--out", "d.imds", "--pattern", "spirals"])),
        1
    );
    fs::write(d.join("bad.toml"), "[train]\nlearning_rate = 3\n").unwrap();
    assert_eq!(code(&admri(d, &["--config", "bad.toml", "synth"])), 1);
    let out = admri(
        d,
        &[
            "train",
            "--data",
            "d.imds",
            "--arch",
            "cnn",
            "--filters",
            "4,8",
            "--lr",
            "1e300",
            "--epochs",
            "3",
            "--out",
            "blown",
        ],
    );
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("blown/model.bnnm").exists() && d.join("blown/manifest.json").exists());
}

#[test]
fn synth_contract_and_determinism() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(
        d,
        &[
            "synth",
            "--classes",
            "4",
            "--per-class",
            "200",
            "--size",
            "64",
            "--seed",
            "7",
            "--out",
            "a.imds",
        ],
    );
    ok(
        d,
        &[
            "synth",
            "--classes",
            "4",
            "--per-class",
            "200",
            "--size",
            "64",
            "--seed",
            "7",
            "--out",
            "b.imds",
        ],
    );
    let ds = LabeledImageSet::load(d.join("a.imds")).unwrap();
    assert_eq!(ds.len(), 800);
    assert_eq!(ds.image_shape(), [64, 64, 1]);
    assert_eq!(fs::read(d.join("a.imds")).unwrap(), fs::read(d.join("b.imds")).unwrap());
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(d.join("a.imds.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "synth");
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 1);

    ok(
        d,
        &[
            "synth",
            "--per-class",
            "5",
            "--size",
            "16",
            "--noise",
            "0",
            "--out",
            "clean.imds",
        ],
    );
    let ds = LabeledImageSet::load(d.join("clean.imds")).unwrap();
    for c in 0..4 {
        let members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
        for &i in &members[1..] {
            assert_eq!(ds.image(i).unwrap(), ds.image(members[0]).unwrap());
        }
    }
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    fs::write(d.join("run.toml"), "[synth]\nper_class = 3\nsize = 16\nclasses = 2\n").unwrap();
    ok(
        d,
        &["--config", "run.toml", "synth", "--classes", "3", "--out", "c.imds"],
    );
    let ds = LabeledImageSet::load(d.join("c.imds")).unwrap();
    assert_eq!(ds.class_counts(), vec![3, 3, 3]);
    assert_eq!(ds.image_shape(), [16, 16, 1]);
}

#[test]
fn out_dir_from_environment() {
    let t = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_admri"))
        .args(["synth", "--per-class", "2", "--size", "16"])
        .current_dir(t.path())
        .env("ADMRI_OUT_DIR", "outputs")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(t.path().join("outputs/synth.imds").exists());
}

#[test]
fn resample_reports_and_feeds_training() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    small_synth(d, "d.imds", "2");
    ok(
        d,
        &["resample", "--input", "d.imds", "--out", "r.imds", "--report", "r.csv"],
    );
    let report = fs::read_to_string(d.join("r.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some("class,before,after_smote,after_tomek"));
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[1], cells[2], "balanced input must not be oversampled: {line}");
    }
    let before = fs::read(d.join("d.imds")).unwrap();
    ok(
        d,
        &[
            "train",
            "--data",
            "r.imds",
            "--arch",
            "cnn",
            "--filters",
            "4,8",
            "--epochs",
            "1",
            "--out",
            "run",
        ],
    );
    assert_eq!(fs::read(d.join("d.imds")).unwrap(), before);
    assert!(d.join("run/model.bnnm").exists());
}

#[test]
fn zero_learning_rate_keeps_initial_weights() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    small_synth(d, "d.imds", "3");
    tiny_train(d, &["--lr", "0", "--out", "run"]);
    let (trained, meta) = Model::load(d.join("run/model.bnnm")).unwrap();
    let initial = Model::new(meta.spec.clone(), derive_seed(5, "init")).unwrap();
    assert_eq!(trained.params, initial.params);
}

#[test]
fn training_is_repeatable_and_resampling_is_recorded() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    small_synth(d, "d.imds", "4");
    tiny_train(d, &["--out", "a"]);
    tiny_train(d, &["--out", "b"]);
    for f in ["history.csv", "model.bnnm", "test.imds"] {
        assert_eq!(
            fs::read(d.join("a").join(f)).unwrap(),
            fs::read(d.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    let history = fs::read_to_string(d.join("a/history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_loss,train_acc,val_acc,lr\n"));
    assert_eq!(history.lines().count(), 3);

    tiny_train(d, &["--resample", "--out", "c"]);
    assert!(d.join("c/resample_report.csv").exists());
    let (_, meta) = Model::load(d.join("c/model.bnnm")).unwrap();
    assert!(meta.resampled);
}

#[test]
fn eval_columns_determinism_and_class_mismatch() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    small_synth(d, "d.imds", "5");
    tiny_train(d, &["--out", "run"]);
    let args = [
        "eval",
        "--checkpoint",
        "run/model.bnnm",
        "--data",
        "run/test.imds",
        "--seed",
        "2",
    ];
    ok(
        d,
        &[&args[..], &["--out", "e1.csv", "--confusion", "conf.csv"]].concat(),
    );
    ok(d, &[&args[..], &["--out", "e2.csv"]].concat());
    let a = fs::read_to_string(d.join("e1.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(d.join("e2.csv")).unwrap());
    assert!(a.starts_with(
        "model,resampled,accuracy,recall,precision,f1,auc_macro,auc_NOD,auc_VMD,auc_MD,auc_MOD\nbayescnn,false,"
    ));
    assert!(fs::read_to_string(d.join("conf.csv"))
        .unwrap()
        .starts_with("true\\pred,NOD,VMD,MD,MOD"));

    ok(
        d,
        &[
            "synth",
            "--classes",
            "3",
            "--per-class",
            "4",
            "--size",
            "32",
            "--out",
            "three.imds",
        ],
    );
    let out = admri(d, &["eval", "--checkpoint", "run/model.bnnm", "--data", "three.imds"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("do not match"));
}

/// ADD-Net on 16x16 inputs whose output layer is all zeros.
fn zero_head_checkpoint(path: &Path) {
    let mut spec = ModelSpec::addnet([16, 16, 1], 4);
    spec.padding = Padding::Same;
    spec.filters = vec![4, 4, 8, 8];
    spec.dense_units = 8;
    let mut model = Model::new(spec, 1).unwrap();
    for name in ["dense2.w", "dense2.b"] {
        let shape = model.params[name].value.shape().to_vec();
        model.params[name].value = Tensor::zeros(shape);
    }
    let names = admri::data::CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    model.save(path, &CheckpointMeta::new(&model, names, 1)).unwrap();
}

#[test]
fn gradcam_zero_head_is_blue_and_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(d, &["synth", "--per-class", "2", "--size", "16", "--out", "d.imds"]);
    zero_head_checkpoint(&d.join("zero.bnnm"));
    let args = [
        "gradcam",
        "--checkpoint",
        "zero.bnnm",
        "--data",
        "d.imds",
        "--indices",
        "0,5",
        "--class",
        "true",
        "--alpha",
        "1",
    ];
    ok(d, &[&args[..], &["--out", "a"]].concat());
    ok(d, &[&args[..], &["--out", "b"]].concat());
    let mut names: Vec<String> = fs::read_dir(d.join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    assert_eq!(names, vec!["s00000_NOD_conv4.png", "s00005_MD_conv4.png"]);
    for n in &names {
        let bytes = fs::read(d.join("a").join(n)).unwrap();
        assert_eq!(bytes, fs::read(d.join("b").join(n)).unwrap());
        let img = image::load_from_memory(&bytes).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (16, 16));
        assert!(img.pixels().all(|p| p.0 == [0, 0, 255]), "{n} is not all blue");
    }
    let out = admri(
        d,
        &[
            "gradcam",
            "--checkpoint",
            "zero.bnnm",
            "--data",
            "d.imds",
            "--layer",
            "dense1",
            "--out",
            "c",
        ],
    );
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("conv4"));
}

#[test]
fn compare_merges_and_validates_schema() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    let header = "model,resampled,accuracy,recall,precision,f1,auc_macro,auc_A,auc_B";
    fs::write(
        d.join("a.csv"),
        format!("{header}\naddnet,false,0.9,0.8,0.85,0.82,0.95,0.9,1\n"),
    )
    .unwrap();
    fs::write(
        d.join("b.csv"),
        format!("{header}\naddnet,true,0.95,0.9,0.9,0.9,0.97,0.96,0.98\n"),
    )
    .unwrap();
    ok(d, &["compare", "a.csv", "b.csv", "--out", "all.csv"]);
    let merged = fs::read_to_string(d.join("all.csv")).unwrap();
    assert_eq!(merged.lines().count(), 3);
    assert!(merged.lines().nth(2).unwrap().starts_with("addnet,true,0.95"));

    fs::write(
        d.join("c.csv"),
        "model,resampled,accuracy,recall,precision,f1\nunet,false,0.8,0.8,0.8,0.8\n",
    )
    .unwrap();
    let out = admri(d, &["compare", "a.csv", "c.csv", "--out", "bad.csv"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("auc_macro"));
    assert!(!d.join("bad.csv").exists());
    assert_eq!(code(&admri(d, &["compare", "a.csv", "a.csv", "--out", "dup.csv"])), 2);
    assert_eq!(code(&admri(d, &["compare", "a.csv"])), 1);
}

#[test]
fn replay_reproduces_outputs_and_notices_changed_inputs() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    small_synth(d, "d.imds", "6");
    ok(d, &["replay", "d.imds.manifest.json", "--into", "again"]);
    assert_eq!(
        fs::read(d.join("d.imds")).unwrap(),
        fs::read(d.join("again/d.imds")).unwrap()
    );
    ok(d, &["resample", "--input", "d.imds", "--out", "r.imds"]);
    ok(d, &["replay", "r.imds.manifest.json", "--into", "again"]);
    small_synth(d, "d.imds", "7");
    let out = admri(d, &["replay", "r.imds.manifest.json", "--into", "again2"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("inputs changed"));
}
