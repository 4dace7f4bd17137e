use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use audiocolor::data::{load_manifest, Split};
use tempfile::TempDir;

const SMALL: [&str; 6] = [
    "--set",
    "data.n_train=20",
    "--set",
    "data.n_val=4",
    "--set",
    "data.n_test=6",
];

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_audiocolor"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A small dataset plus a one-epoch stage-1 run, shared by the tests below.
struct Fixture {
    _dir: TempDir,
    data: PathBuf,
    run: PathBuf,
    train_time: Duration,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data");
        let run = dir.path().join("run");
        let mut args = vec!["prepare-data", "--root", p(&data)];
        args.extend(SMALL);
        let o = self::run(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        let t = Instant::now();
        let o = self::run(&[
            "train",
            "--stage",
            "1",
            "--data",
            p(&data),
            "--out",
            p(&run),
            "--epochs",
            "1",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        Fixture {
            train_time: t.elapsed(),
            _dir: dir,
            data,
            run,
        }
    })
}

fn log_epochs(run: &Path) -> Vec<(String, u64)> {
    std::fs::read_to_string(run.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            (v["stage"].as_str().unwrap().to_string(), v["epoch"].as_u64().unwrap())
        })
        .collect()
}

#[test]
fn prepare_data_writes_requested_counts_and_reruns_as_noop() {
    let dir = TempDir::new().unwrap();
    let root = dir.path().join("d");
    let mut args = vec!["prepare-data", "--root", p(&root)];
    args.extend(SMALL);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    for (split, n) in [(Split::Train, 20), (Split::Val, 4), (Split::Test, 6)] {
        let (m, report) = load_manifest(&root, split).unwrap();
        assert_eq!(m.len(), n, "{split}");
        assert!(report.rejected.is_empty());
    }
    let before = std::fs::metadata(root.join("train").join("manifest.json"))
        .unwrap()
        .modified()
        .unwrap();
    let again = run(&args);
    assert!(again.status.success());
    assert!(stdout(&again).contains("up to date"), "{}", stdout(&again));
    let after = std::fs::metadata(root.join("train").join("manifest.json"))
        .unwrap()
        .modified()
        .unwrap();
    assert_eq!(before, after);
}

#[test]
fn prepare_data_rejects_hues_of_different_luminance() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(
        &cfg,
        r#"
[[data.synthetic.families]]
name = "clash"
layout = "disk"
hue_a = [255, 0, 0]
hue_b = [0, 0, 255]
tone_a_hz = 500.0
tone_b_hz = 900.0
"#,
    )
    .unwrap();
    let o = run(&["prepare-data", "--root", p(&dir.path().join("d")), "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(
        err.contains("clash") && err.contains("[255, 0, 0]") && err.contains("[0, 0, 255]"),
        "{err}"
    );
}

#[test]
fn unknown_config_key_is_an_error() {
    let dir = TempDir::new().unwrap();
    let o = run(&[
        "prepare-data",
        "--root",
        p(dir.path()),
        "--set",
        "training.stage1.epoch=3",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("epoch"), "{}", stderr(&o));
}

#[test]
fn stage3_without_stage2_names_the_missing_stage() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let o = run(&["train", "--stage", "3", "--data", p(&f.data), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("stage2"), "{}", stderr(&o));
}

#[test]
fn one_stage1_epoch_on_twenty_pairs_is_quick() {
    let f = fixture();
    assert!(f.train_time < Duration::from_secs(120), "{:?}", f.train_time);
    assert!(f.run.join("stage1.ckpt.json").is_file());
    assert!(f.run.join("stage1.config.toml").is_file());
    assert_eq!(log_epochs(&f.run), vec![("stage1".to_string(), 1)]);
}

#[test]
fn resume_continues_epoch_numbering() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::copy(f.run.join("stage1.ckpt.json"), out.join("stage1.ckpt.json")).unwrap();
    let o = run(&[
        "train",
        "--stage",
        "1",
        "--data",
        p(&f.data),
        "--out",
        p(&out),
        "--resume",
        "--epochs",
        "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let epochs: Vec<u64> = log_epochs(&out).into_iter().map(|(_, e)| e).collect();
    assert_eq!(epochs, vec![2, 3]);

    let missing = run(&[
        "train",
        "--stage",
        "2",
        "--data",
        p(&f.data),
        "--out",
        p(dir.path()),
        "--resume",
    ]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn colorize_is_deterministic_and_gates_off_without_audio() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let (m, _) = load_manifest(&f.data, Split::Test).unwrap();
    let image = f.data.join(Split::Test.as_str()).join(&m.pairs[0].image);
    let ckpt = f.run.join("stage1.ckpt.json");
    let mut bytes = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("out{i}.png"));
        let o = run(&[
            "colorize",
            "--checkpoint",
            p(&ckpt),
            "--image",
            p(&image),
            "--mode",
            "missing_audio",
            "--output",
            p(&out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("mode=missing_audio r=0.000000"), "{}", stdout(&o));
        bytes.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);

    // a stage-1 checkpoint has no audio branch to run the full model with
    let o = run(&[
        "colorize",
        "--checkpoint",
        p(&ckpt),
        "--image",
        p(&image),
        "--output",
        p(&dir.path().join("x.png")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("audio"), "{}", stderr(&o));
}

#[test]
fn evaluate_writes_one_section_per_mode() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let report = dir.path().join("r").join("report.jsonl");
    let o = run(&[
        "evaluate",
        "--checkpoint",
        p(&f.run.join("stage1.ckpt.json")),
        "--data",
        p(&f.data),
        "--mode",
        "missing_audio",
        "--mode",
        "no_r_missing_audio",
        "--report",
        p(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(
        out.contains("[missing_audio]") && out.contains("[no_r_missing_audio]"),
        "{out}"
    );
    let rows: Vec<serde_json::Value> = std::fs::read_to_string(&report)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    for mode in ["missing_audio", "no_r_missing_audio"] {
        let per_image = rows
            .iter()
            .filter(|r| r["mode"] == mode && r["kind"] == "image")
            .count();
        assert_eq!(per_image, 6, "{mode}");
    }
}

#[test]
fn evaluate_on_empty_split_fails() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("d");
    let mut args = vec!["prepare-data", "--root", p(&data)];
    args.extend([
        "--set",
        "data.n_train=2",
        "--set",
        "data.n_val=1",
        "--set",
        "data.n_test=0",
    ]);
    assert!(run(&args).status.success());
    let o = run(&[
        "evaluate",
        "--checkpoint",
        p(&f.run.join("stage1.ckpt.json")),
        "--data",
        p(&data),
        "--mode",
        "missing_audio",
        "--report",
        p(&dir.path().join("r.jsonl")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("empty"), "{}", stderr(&o));
}
