use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rstrack::checkpoint::Checkpoint;
use rstrack::config::Config;
use rstrack::model::Model;
use rstrack::synthgen::{self, ANNOTATION_FILE};
use rstrack::trackpipe::{format_results, TrackResult};

fn micro_cfg() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/micro.cfg")
}

fn rstrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rstrack")).args(args).output().expect("spawn rstrack")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn train(dir: &Path, steps: &str) -> Vec<u8> {
    ok(&rstrack(&["train", "--config", p(&micro_cfg()), "--steps", steps, "--seed", "7", "--out", p(dir)]));
    fs::read(dir.join("checkpoint.rstk")).unwrap()
}

fn gen_sequence(dir: &Path, frames: &str) -> PathBuf {
    ok(&rstrack(&["gen", "--config", p(&micro_cfg()), "--count", "1", "--frames", frames, "--out", p(dir)]));
    dir.join("seq000")
}

#[test]
fn training_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = train(&tmp.path().join("a"), "200");
    let b = train(&tmp.path().join("b"), "200");
    assert_eq!(a, b);
    let log = fs::read_to_string(tmp.path().join("a/train_log.txt")).unwrap();
    assert_eq!(log.lines().count(), 200);
    assert!(log.lines().last().unwrap().starts_with("step=200 "));
}

#[test]
fn zero_steps_saves_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let bytes = train(tmp.path(), "0");
    let mut cfg = Config::load(&micro_cfg()).unwrap();
    cfg.train.steps = 0;
    let model = Model::new(&cfg.model, cfg.ablation, 7);
    assert_eq!(bytes, Checkpoint::from_model(&model, &cfg, 0).to_bytes());
}

#[test]
fn missing_config_leaves_no_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let res = rstrack(&["train", "--config", p(&tmp.path().join("nope.cfg")), "--out", p(&out)]);
    assert!(!res.status.success());
    assert!(!out.exists());
}

#[test]
fn unknown_config_keys_are_listed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "model.dim = 16\nmodel.flavour = 3\ntrain.speed = 1\n").unwrap();
    let res = rstrack(&["train", "--config", p(&cfg), "--out", p(&tmp.path().join("run"))]);
    assert!(!res.status.success());
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("model.flavour") && err.contains("train.speed"), "{err}");
}

#[test]
fn unwritable_output_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("file");
    fs::write(&file, "x").unwrap();
    let res = rstrack(&["train", "--config", p(&micro_cfg()), "--steps", "0", "--out", p(&file.join("sub"))]);
    assert!(!res.status.success());
}

#[test]
fn default_tracking_reasons_backwards_every_sixty_frames() {
    let tmp = tempfile::tempdir().unwrap();
    train(tmp.path(), "0");
    let seq = gen_sequence(&tmp.path().join("data"), "130");
    let trace = tmp.path().join("trace.txt");
    let results = tmp.path().join("results.txt");
    ok(&rstrack(&[
        "track",
        "--checkpoint",
        p(&tmp.path().join("checkpoint.rstk")),
        "--sequence",
        p(&seq),
        "--out",
        p(&results),
        "--trace",
        p(&trace),
    ]));
    let text = fs::read_to_string(&trace).unwrap();
    let bidir: Vec<usize> = text
        .lines()
        .filter(|l| l.contains("mode=bidirectional"))
        .map(|l| l.split_whitespace().next().unwrap()["frame=".len()..].parse().unwrap())
        .collect();
    assert_eq!(bidir, vec![60, 120]);
    assert_eq!(fs::read_to_string(&results).unwrap().lines().count(), 130);
}

#[test]
fn full_threshold_flags_every_entry_init() {
    let tmp = tempfile::tempdir().unwrap();
    train(tmp.path(), "0");
    let seq = gen_sequence(&tmp.path().join("data"), "12");
    let out = ok(&rstrack(&[
        "track",
        "--checkpoint",
        p(&tmp.path().join("checkpoint.rstk")),
        "--sequence",
        p(&seq),
        "--threshold",
        "1.0",
        "--out",
        p(&tmp.path().join("r.txt")),
    ]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 12);
    assert!(lines[1..].iter().all(|l| l.contains("source=init") && l.contains("gated=true")));
}

#[test]
fn ablated_variant_tracks_and_renders() {
    let tmp = tempfile::tempdir().unwrap();
    train(tmp.path(), "0");
    let seq = gen_sequence(&tmp.path().join("data"), "6");
    let render = tmp.path().join("render");
    ok(&rstrack(&[
        "track",
        "--checkpoint",
        p(&tmp.path().join("checkpoint.rstk")),
        "--sequence",
        p(&seq),
        "--ablate",
        "no-decoder",
        "--out",
        p(&tmp.path().join("r.txt")),
        "--render",
        p(&render),
    ]));
    assert!(render.join(synthgen::frame_file(5)).exists());
}

#[test]
fn corrupt_checkpoint_reports_magic() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tmp.path().join("bad.rstk");
    fs::write(&ck, b"NOPE\x01\0\0\0").unwrap();
    let seq = gen_sequence(&tmp.path().join("data"), "4");
    let res = rstrack(&["track", "--checkpoint", p(&ck), "--sequence", p(&seq), "--out", p(&tmp.path().join("r"))]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("magic"));
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let seq = gen_sequence(&tmp.path().join("data"), "10");
    let ann = seq.join(ANNOTATION_FILE);
    let gt = synthgen::parse_annotations(&fs::read_to_string(&ann).unwrap(), 64).unwrap();
    let results: Vec<TrackResult> =
        gt.iter().map(|&(frame_index, bbox)| TrackResult { frame_index, bbox, confidence: 1.0 }).collect();
    let res_file = tmp.path().join("results.txt");
    fs::write(&res_file, format_results(&results)).unwrap();
    let out = ok(&rstrack(&["eval", "--results", p(&res_file), "--annotations", p(&ann), "--canvas", "64"]));
    assert!(out.contains("auc=1.000000"), "{out}");
}

#[test]
fn gradcheck_passes_and_names_a_corrupted_op() {
    let out = ok(&rstrack(&["gradcheck", "--per-tensor", "2"]));
    assert!(out.contains("total_loss"));
    let res = rstrack(&["gradcheck", "--per-tensor", "2", "--corrupt-op", "softmax"]);
    assert!(!res.status.success());
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("op.softmax"), "{err}");
}

#[test]
fn session_history_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    train(tmp.path(), "0");
    let seq = gen_sequence(&tmp.path().join("data"), "5");
    let session = tmp.path().join("session.rstk");
    ok(&rstrack(&[
        "track",
        "--checkpoint",
        p(&tmp.path().join("checkpoint.rstk")),
        "--sequence",
        p(&seq),
        "--out",
        p(&tmp.path().join("r.txt")),
        "--save-session",
        p(&session),
    ]));
    let bytes = fs::read(&session).unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ck.history.as_ref().unwrap().len(), 5);
    assert_eq!(ck.to_bytes(), bytes);
}
