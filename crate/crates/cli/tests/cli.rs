use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn netrand(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_netrand"))
        .args(args)
        .output()
        .expect("spawn netrand")
}

fn tiny_manifest(dir: &Path, steps: u64) -> String {
    format!(
        r#"schema_version = 1
out_dir = "{out}"

[train]
method = "rand_fm"
total_timesteps = {steps}
n_envs = 2
seed = 3

[train.hyper]
rollout_len = 16
minibatches = 4
epochs = 1

[train.env]
kind = "coin_grid"
seen_themes = [0, 1]
unseen_themes = [2, 3]

[train.env.grid]
obs_size = 16
max_steps = 24

[train.net]
obs_size = 16
channels = [4, 8, 8]
features = 16

[eval]
episodes = 4
mc_samples = [1, 2]
interval = 0
checkpoint_interval = 0
"#,
        out = dir.join("run").display()
    )
}

#[test]
fn train_eval_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.toml");
    fs::write(&manifest, tiny_manifest(dir.path(), 32)).unwrap();
    let m = manifest.to_str().unwrap();

    let out = netrand(&["train", "--manifest", m, "--quiet"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let ckpt = dir.path().join("run/checkpoint.nrnd");
    assert!(ckpt.exists());
    let stats = fs::read_to_string(dir.path().join("run/stats.jsonl")).unwrap();
    assert_eq!(stats.lines().count(), 1);

    let c = ckpt.to_str().unwrap();
    let eval_dir = dir.path().join("eval");
    let out = netrand(&[
        "eval",
        "--checkpoint",
        c,
        "--manifest",
        m,
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(eval_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["schema"], "netrand.report/1");
    assert_eq!(report["success"].as_array().unwrap().len(), 4);

    let feat_dir = dir.path().join("feat");
    let out = netrand(&[
        "export-features",
        "--checkpoint",
        c,
        "--manifest",
        m,
        "--out",
        feat_dir.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(feat_dir.join("features.csv").exists());
    assert!(feat_dir.join("features.csv.meta.json").exists());
}

#[test]
fn resume_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.toml");
    fs::write(&manifest, tiny_manifest(dir.path(), 32)).unwrap();
    let m = manifest.to_str().unwrap();
    let first = dir.path().join("first");
    let out = netrand(&[
        "train",
        "--manifest",
        m,
        "--quiet",
        "--out",
        first.to_str().unwrap(),
        "--seed",
        "9",
        "--envs",
        "1",
        "--method",
        "vanilla",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let saved = fs::read_to_string(first.join("manifest.toml")).unwrap();
    assert!(
        saved.contains("seed = 9") && saved.contains("n_envs = 1") && saved.contains("\"vanilla\"")
    );

    // same settings but a doubled budget continues the run
    fs::write(&manifest, tiny_manifest(dir.path(), 64)).unwrap();
    let ck = first.join("checkpoint.nrnd");
    let out = netrand(&[
        "train",
        "--manifest",
        m,
        "--quiet",
        "--out",
        first.to_str().unwrap(),
        "--seed",
        "9",
        "--envs",
        "1",
        "--method",
        "vanilla",
        "--checkpoint",
        ck.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        fs::read_to_string(first.join("stats.jsonl"))
            .unwrap()
            .lines()
            .count(),
        4
    );
}

#[test]
fn invalid_manifest_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("bad.toml");
    fs::write(
        &manifest,
        tiny_manifest(dir.path(), 32).replace("[eval]", "[eval]\nbogus_key = 1"),
    )
    .unwrap();
    let out = netrand(&["train", "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_key"));

    fs::write(
        &manifest,
        tiny_manifest(dir.path(), 32).replace("n_envs = 2", "n_envs = 0"),
    )
    .unwrap();
    assert_eq!(
        netrand(&["train", "--manifest", manifest.to_str().unwrap()])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(netrand(&["train"]).status.code(), Some(1));
    assert_eq!(netrand(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        netrand(&["train", "--manifest", "m.toml", "--method", "nope"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn bad_checkpoint_exits_with_one_and_lock_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("x.nrnd");
    fs::write(&bogus, b"not a checkpoint").unwrap();
    let out = netrand(&[
        "eval",
        "--checkpoint",
        bogus.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));

    let manifest = dir.path().join("m.toml");
    fs::write(&manifest, tiny_manifest(dir.path(), 32)).unwrap();
    fs::create_dir_all(dir.path().join("run")).unwrap();
    fs::write(dir.path().join("run/.netrand.lock"), "1\n").unwrap();
    let out = netrand(&["train", "--manifest", manifest.to_str().unwrap(), "--quiet"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}

#[test]
fn help_exits_zero() {
    let out = netrand(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for verb in ["train", "eval", "ablate", "export-features"] {
        assert!(text.contains(verb), "{verb}");
    }
}

#[test]
fn shipped_desk_manifest_is_valid() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../manifests/desk.toml");
    let m = netrand::experiment::ExperimentManifest::load(&path).unwrap();
    m.validate().unwrap();
    let (seen, unseen) = netrand::envs::theme_split(0, 2, 24).unwrap();
    match &m.train.env {
        netrand::trainer::EnvSpec::CoinGrid {
            seen_themes,
            unseen_themes,
            ..
        } => {
            assert_eq!(seen_themes, &seen);
            assert_eq!(unseen_themes, &unseen);
        }
        other => panic!("expected a grid manifest, got {other:?}"),
    }
}
