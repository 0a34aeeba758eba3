use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hcae_cli::{RunConfig, StageRecord, Workspace};

const TINY: &str = r#"
[dataset]
source = "synthetic"
n = 40
seed = 3
val_fraction = 0.25
geometry = [16, 16, 3]

[ae]
block_widths = [4, 4]
epochs = 2
lr = 1e-3
batch_size = 8
seed = 5

[clf]
widths = [4, 8]
batch_size = 8
seed = 6

[[clf.stages]]
epochs = 1
scope = "head-only"
lr = 1e-2

[[clf.stages]]
epochs = 1
scope = "all"
lr = 1e-3
augmentation = true

[ensemble]
reconstruction_weight = 0.5
epochs = 2
lr = 1e-3
batch_size = 8
seed = 7

[output]
workspace = "ws"
"#;

fn hcae(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hcae"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .unwrap()
}

fn ok(config: &Path, args: &[&str]) -> String {
    let out = hcae(config, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup(text: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, text).unwrap();
    (dir, path)
}

const STAGES: [&str; 7] = ["synth-data", "train-ae", "train-clf", "train-ensemble", "export-codec", "evaluate", "report"];

fn hashes(ws: &Path) -> Vec<(String, Vec<(String, String)>, Vec<(String, String)>)> {
    Workspace::new(ws)
        .records()
        .unwrap()
        .into_iter()
        .map(|r: StageRecord| (r.stage, r.inputs.into_iter().collect(), r.outputs.into_iter().collect()))
        .collect()
}

#[test]
fn full_pipeline_populates_the_workspace() {
    let (dir, config) = setup(TINY);
    for stage in STAGES {
        ok(&config, &[stage]);
    }
    let ws = dir.path().join("ws");
    for sub in ["ae", "clf", "ensemble", "codec", "reports"] {
        let entries = fs::read_dir(ws.join(sub)).unwrap().count();
        assert!(entries > 0, "{sub} is empty");
    }
    for sub in ["ae", "clf", "ensemble", "codec"] {
        let record: StageRecord = serde_json::from_str(&fs::read_to_string(ws.join(sub).join("stage.json")).unwrap()).unwrap();
        assert!(!record.outputs.is_empty(), "{sub}");
    }
    let records = Workspace::new(&ws).records().unwrap();
    let names: Vec<&str> = records.iter().map(|r| r.stage.as_str()).collect();
    assert_eq!(names, ["synth-data", "train-ae", "train-clf", "train-ensemble", "export-codec", "evaluate"]);
    let ens = &records[3];
    assert_eq!(ens.inputs["autoencoder"], records[1].outputs["autoencoder"]);
    assert_eq!(ens.inputs["classifier"], records[2].outputs["classifier"]);
    assert_eq!(ens.outputs["classifier"], ens.inputs["classifier"]);
    assert_eq!(ens.seeds["ensemble"], 7);

    let summary = fs::read_to_string(ws.join("reports/summary.md")).unwrap();
    assert!(summary.contains("sup_recon") && summary.contains("Lineage"));
    assert!(ws.join("reports/auc.png").exists());
    let eval: hcae::EvalReport = serde_json::from_str(&fs::read_to_string(ws.join("reports/eval.json")).unwrap()).unwrap();
    assert_eq!(eval.rows.len(), 3);

    let patch = ws.join("data/patch_000000.png");
    for quant in ["f32", "u8"] {
        let hcl = dir.path().join(format!("p-{quant}.hcl"));
        let png = dir.path().join(format!("p-{quant}.png"));
        ok(&config, &["compress", patch.to_str().unwrap(), "-o", hcl.to_str().unwrap(), "--quant", quant]);
        ok(&config, &["decompress", hcl.to_str().unwrap(), "-o", png.to_str().unwrap()]);
        assert_eq!(hcae::datasets::read_image(&png).unwrap().shape(), (16, 16, 3));
    }
    // the codec directory alone is enough, without any config file
    let standalone = Command::new(env!("CARGO_BIN_EXE_hcae"))
        .args(["--config", "absent.toml", "decompress"])
        .arg(dir.path().join("p-u8.hcl"))
        .arg("-o")
        .arg(dir.path().join("again.png"))
        .arg("--codec")
        .arg(ws.join("codec"))
        .output()
        .unwrap();
    assert!(standalone.status.success(), "{}", String::from_utf8_lossy(&standalone.stderr));
}

#[test]
fn train_ensemble_without_classifier_names_train_clf() {
    let (_dir, config) = setup(TINY);
    ok(&config, &["synth-data"]);
    ok(&config, &["train-ae"]);
    let out = hcae(&config, &["train-ensemble"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train-clf"), "{err}");

    let (_dir, config) = setup(TINY);
    let out = hcae(&config, &["train-ae"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("synth-data"));
    let out = hcae(&config, &["report"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("evaluate"));
}

#[test]
fn rerun_with_same_config_gives_identical_hashes() {
    let run = || {
        let (dir, config) = setup(TINY);
        for stage in &STAGES[..6] {
            ok(&config, &[stage]);
        }
        let h = hashes(&dir.path().join("ws"));
        (dir, config, h)
    };
    let (dir, config, first) = run();
    let (_other, _, second) = run();
    assert_eq!(first, second);

    // forced rerun in place appends a record with the same hashes
    ok(&config, &["train-ae", "--force"]);
    let all = hashes(&dir.path().join("ws"));
    assert_eq!(all.len(), 7);
    assert_eq!(all[6], first[1]);
}

#[test]
fn existing_outputs_need_force() {
    let (dir, config) = setup(TINY);
    ok(&config, &["synth-data"]);
    let marker = dir.path().join("ws/data/manifest.tsv");
    let before = fs::read(&marker).unwrap();
    let out = hcae(&config, &["synth-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    assert_eq!(fs::read(&marker).unwrap(), before);
    assert_eq!(Workspace::new(dir.path().join("ws")).records().unwrap().len(), 1);
    ok(&config, &["synth-data", "--force"]);
    assert_eq!(Workspace::new(dir.path().join("ws")).records().unwrap().len(), 2);
}

#[test]
fn config_errors_name_the_key() {
    let cases = [
        (TINY.replace("seed = 5\n", ""), "ae"),
        (TINY.replace("lr = 1e-3\nbatch_size = 8\nseed = 5", "lr = -1.0\nbatch_size = 8\nseed = 5"), "ae.lr"),
        (TINY.replace("epochs = 2\nlr = 1e-3\nbatch_size = 8\nseed = 5", "epochs = \"two\"\nlr = 1e-3\nbatch_size = 8\nseed = 5"), "ae.epochs"),
        (TINY.replace("val_fraction = 0.25", "val_fraction = 1.5"), "dataset.val_fraction"),
        (TINY.replace("block_widths = [4, 4]", "preset = \"66\""), "ae.preset"),
        (TINY.replace("scope = \"all\"", "scope = \"everything\""), "clf.stages[1].scope"),
        (TINY.replace("[output]", "[output]\ncolour = 1"), "output"),
    ];
    for (text, key) in cases {
        let (_dir, config) = setup(&text);
        let out = hcae(&config, &["train-ae"]);
        assert_eq!(out.status.code(), Some(2), "{key}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(key), "expected `{key}` in: {err}");
    }
    let err = RunConfig::parse(&TINY.replace("seed = 6\n", "")).unwrap_err().to_string();
    assert!(err.contains("clf") && err.contains("seed"), "{err}");
}

#[test]
fn non_finite_training_exits_with_numerical_code() {
    let (_dir, config) = setup(&TINY.replace("lr = 1e-3\nbatch_size = 8\nseed = 5", "lr = 1e300\nbatch_size = 8\nseed = 5"));
    ok(&config, &["synth-data"]);
    let out = hcae(&config, &["train-ae"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
