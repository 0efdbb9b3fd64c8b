use rapnet::extractor::FeatureSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn rapnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rapnet"))
        .args(args)
        .current_dir(cwd)
        .env_remove("RAPNET_WEIGHTS")
        .output()
        .expect("spawn rapnet")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = rapnet(args, cwd);
    assert!(
        out.status.success(),
        "rapnet {args:?} exited {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Toy backbone plus a tiny synthetic location dataset.
fn fixture() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    ok(&["init-weights", "--seed", "1", "--out", "w.rapw"], &root);
    ok(
        &["synth-dataset", "--locations", "6", "--per-location", "3", "--size", "24", "--out", "data"],
        &root,
    );
    (dir, root)
}

#[test]
fn extract_writes_a_valid_rapf() {
    let (_d, root) = fixture();
    ok(
        &[
            "extract", "--weights", "w.rapw", "--image", "data/loc0/img0.png",
            "--top-k", "500", "--max-edge", "640", "--out", "a.rapf",
        ],
        &root,
    );
    let fs_ = FeatureSet::load(&root.join("a.rapf")).unwrap();
    assert!(!fs_.keypoints.is_empty());
    assert!(fs_.keypoints.len() <= 500);
    assert!(root.join("a.rapf.config.json").exists());
}

#[test]
fn text_output_has_one_line_per_keypoint() {
    let (_d, root) = fixture();
    ok(&["extract", "--weights", "w.rapw", "--image", "data/loc0/img0.png", "--out", "a.rapf"], &root);
    ok(
        &["extract", "--weights", "w.rapw", "--image", "data/loc0/img0.png", "--out", "a.txt", "--text"],
        &root,
    );
    let set = FeatureSet::load(&root.join("a.rapf")).unwrap();
    let text = fs::read_to_string(root.join("a.txt")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), set.keypoints.len());
    for line in lines {
        assert_eq!(line.split_whitespace().count(), 3 + set.dim);
    }
}

#[test]
fn training_twice_with_one_seed_is_bitwise_identical() {
    let (_d, root) = fixture();
    let run = |out: &str| {
        ok(
            &[
                "train", "--manifest", "data/manifest.txt", "--weights", "w.rapw",
                "--seed", "42", "--steps", "6", "--out", out,
            ],
            &root,
        );
        fs::read(root.join(out)).unwrap()
    };
    let a = run("attn_a.rapw");
    let b = run("attn_b.rapw");
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn replay_reproduces_the_output() {
    let (_d, root) = fixture();
    ok(
        &[
            "train", "--manifest", "data/manifest.txt", "--weights", "w.rapw",
            "--seed", "7", "--steps", "4", "--out", "attn.rapw",
        ],
        &root,
    );
    let first = fs::read(root.join("attn.rapw")).unwrap();
    fs::remove_file(root.join("attn.rapw")).unwrap();
    ok(&["--replay", "attn.rapw.config.json"], &root);
    assert_eq!(fs::read(root.join("attn.rapw")).unwrap(), first);
}

#[test]
fn locations_on_the_line_example() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(
        root.join("tum.txt"),
        "# timestamp tx ty tz qx qy qz qw\n1 0 0 0 0 0 0 1\n2 0.4 0 0 0 0 0 1\n3 2.5 0 0 0 0 0 1\n",
    )
    .unwrap();
    ok(
        &["locations", "--poses", "tum.txt", "--dist-thresh", "1.0", "--angle-thresh", "30", "--out", "manifest.txt"],
        root,
    );
    let text = fs::read_to_string(root.join("manifest.txt")).unwrap();
    let ids: Vec<&str> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split_whitespace().nth(2).unwrap())
        .collect();
    assert_eq!(ids, ["0", "0", "1"]);
}

#[test]
fn match_and_benchmark_smoke() {
    let (_d, root) = fixture();
    ok(&["extract", "--weights", "w.rapw", "--image", "data/loc0/img0.png", "--out", "a.rapf"], &root);
    ok(&["extract", "--weights", "w.rapw", "--image", "data/loc0/img1.png", "--out", "b.rapf"], &root);
    fs::write(root.join("H"), "1 0 0\n0 1 0\n0 0 1\n").unwrap();
    ok(
        &["match", "--a", "a.rapf", "--b", "b.rapf", "--out", "m.csv", "--homography", "H", "--curve", "c.csv"],
        &root,
    );
    let matches = fs::read_to_string(root.join("m.csv")).unwrap();
    assert!(matches.starts_with("index_a,index_b,distance\n"));
    let curve = fs::read_to_string(root.join("c.csv")).unwrap();
    assert_eq!(curve.lines().count(), 11);

    let seq = root.join("bench/i_pair");
    fs::create_dir_all(&seq).unwrap();
    fs::copy(root.join("data/loc0/img0.png"), seq.join("1.png")).unwrap();
    fs::copy(root.join("data/loc0/img0.png"), seq.join("2.png")).unwrap();
    fs::copy(root.join("H"), seq.join("H_1_2")).unwrap();
    ok(&["eval-mma", "--weights", "w.rapw", "--dataset", "bench", "--out", "report"], &root);
    let csv = fs::read_to_string(root.join("report/mma.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("i_pair,illumination,1,1")));
    assert!(root.join("report/mma.svg").exists());
}

#[test]
fn inspect_lists_layers() {
    let (_d, root) = fixture();
    let out = ok(&["inspect-weights", "--weights", "w.rapw"], &root);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("conv1_1"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_eq!(rapnet(&["--help"], root).status.code(), Some(0));
    assert_eq!(rapnet(&["--no-such-flag"], root).status.code(), Some(1));
    assert_eq!(
        rapnet(&["train", "--manifest", "m.txt", "--weights", "w.rapw", "--out", "o.rapw"], root).status.code(),
        Some(1)
    );
    let missing = rapnet(&["extract", "--weights", "nope.rapw", "--image", "x.png", "--out", "x.rapf"], root);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.rapw"));
    assert_eq!(rapnet(&["--replay", "absent.json"], root).status.code(), Some(1));
}

#[test]
fn failed_runs_leave_no_config_echo() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let out = rapnet(&["extract", "--weights", "nope.rapw", "--image", "x.png", "--out", "x.rapf"], root);
    assert_eq!(out.status.code(), Some(2));
    assert!(!root.join("x.rapf.config.json").exists());
}
