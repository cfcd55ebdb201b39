use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tdfn::checkpoint::{load_checkpoint, Phase};
use tdfn::data::{encode_idx_images, encode_idx_labels, parse_idx_images, Split};
use tdfn::viz::parse_pgm;

fn tdfn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdfn"))
        .current_dir(dir)
        .env_remove("TDFN_DATA_DIR")
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes small synthetic train and validation splits under `dir/data/mnist`.
fn synthetic_mnist(dir: &Path) {
    let data = dir.join("data/mnist");
    fs::create_dir_all(&data).unwrap();
    for (split, count) in [(Split::Train, 24usize), (Split::Validation, 10)] {
        let labels: Vec<u8> = (0..count).map(|i| (i % 10) as u8).collect();
        let images: Vec<Vec<u8>> = labels
            .iter()
            .map(|&l| (0..784).map(|p| if (p / 28) % 10 == l as usize { 220 } else { (p % 7) as u8 }).collect())
            .collect();
        let (img, lbl) = split.file_names();
        fs::write(data.join(img), encode_idx_images(28, 28, &images)).unwrap();
        fs::write(data.join(lbl), encode_idx_labels(&labels)).unwrap();
    }
}

fn trained(dir: &Path) {
    synthetic_mnist(dir);
    let o = tdfn(dir, &["train", "task", "--epochs", "1", "--seed", "3", "--batch-size", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn train_task_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    synthetic_mnist(dir.path());
    let run = |out: &str| {
        let o = tdfn(dir.path(), &["train", "task", "--epochs", "1", "--seed", "7", "--out", out]);
        assert!(o.status.success(), "{}", stderr(&o));
        (
            fs::read_to_string(dir.path().join(format!("{out}.metrics.csv"))).unwrap(),
            fs::read(dir.path().join(out)).unwrap(),
        )
    };
    let (log_a, ckpt_a) = run("a.tdfn");
    let (log_b, ckpt_b) = run("b.tdfn");
    assert_eq!(log_a, log_b);
    assert!(ckpt_a == ckpt_b, "checkpoints differ");
    assert!(log_a.contains("# seed = 7"));
    assert!(log_a.lines().any(|l| l == "epoch,task_loss,class_loss,recon_loss"));
    assert!(log_a.lines().last().unwrap().starts_with("1,"));

    let ckpt = load_checkpoint(&dir.path().join("a.tdfn")).unwrap();
    assert_eq!(ckpt.phase, Phase::Task);
    assert_eq!(ckpt.seed, 7);
    assert_eq!(ckpt.epochs, 1);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    synthetic_mnist(dir.path());
    let p = dir.path();
    assert!(tdfn(p, &["train", "task", "--epochs", "2", "--seed", "1", "--out", "full.tdfn"]).status.success());
    assert!(tdfn(p, &["train", "task", "--epochs", "1", "--seed", "1", "--out", "half.tdfn"]).status.success());
    let o = tdfn(p, &["train", "task", "--epochs", "1", "--seed", "1", "--from", "half.tdfn", "--out", "rest.tdfn"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let full = load_checkpoint(&p.join("full.tdfn")).unwrap();
    let rest = load_checkpoint(&p.join("rest.tdfn")).unwrap();
    assert_eq!(rest.epochs, 2);
    assert!(full.model.store.iter().zip(rest.model.store.iter()).all(|(a, b)| a == b));
    assert_eq!(full.optimizer, rest.optimizer);
    let log = |name: &str| fs::read_to_string(p.join(name)).unwrap().lines().last().unwrap().to_string();
    assert_eq!(log("full.tdfn.metrics.csv"), log("rest.tdfn.metrics.csv"));
}

#[test]
fn config_file_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    synthetic_mnist(dir.path());
    fs::write(dir.path().join("run.cfg"), "# small run\nalpha = 0.25\nbatch_size = 5\nseed = 2\n").unwrap();
    let o = tdfn(dir.path(), &["train", "task", "--config", "run.cfg", "--epochs", "1", "--seed", "4", "--out", "c.tdfn"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(dir.path().join("c.tdfn.metrics.csv")).unwrap();
    assert!(log.contains("# alpha = 0.25"));
    assert!(log.contains("# batch_size = 5"));
    assert!(log.contains("# seed = 4"));

    fs::write(dir.path().join("bad.cfg"), "alpha = 0.5\nlearning_rat = 1\n").unwrap();
    let o = tdfn(dir.path(), &["train", "task", "--config", "bad.cfg"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let ckpt = "checkpoints/task.tdfn";
    for args in [
        vec!["train", "fpg"],
        vec!["eval", "budget"],
        vec!["eval", "budget", "--from", ckpt, "--n", "17"],
        vec!["eval", "mcp", "--from", ckpt, "--threshold", "1.5"],
        vec!["eval", "mcp", "--from", ckpt],
        vec!["eval", "budget", "--from", ckpt, "--policy", "greedy"],
        vec!["visualize", "--from", ckpt, "--samples", "0", "--n", "20"],
    ] {
        let o = tdfn(dir.path(), &args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
    let o = tdfn(dir.path(), &["train", "fpg"]);
    assert!(stderr(&o).contains("--from"));
}

#[test]
fn missing_data_points_at_the_fetch_script() {
    let dir = tempfile::tempdir().unwrap();
    let o = tdfn(dir.path(), &["train", "task", "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("fetch_mnist"), "{}", stderr(&o));
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let path = dir.path().join("checkpoints/task.tdfn");
    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    fs::write(&path, bytes).unwrap();
    let o = tdfn(dir.path(), &["eval", "budget", "--from", "checkpoints/task.tdfn"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));
}

#[test]
fn policy_training_and_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let p = dir.path();
    let o = tdfn(p, &["train", "fpg", "--from", "checkpoints/task.tdfn", "--epochs", "1", "--batch-size", "12"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let fpg = load_checkpoint(&p.join("checkpoints/fpg.tdfn")).unwrap();
    assert_eq!(fpg.phase, Phase::Fpg);
    let log = fs::read_to_string(p.join("checkpoints/fpg.tdfn.metrics.csv")).unwrap();
    assert!(log.contains("epoch,initial_loss,final_loss,mean_reward,rl_loss"));

    let o = tdfn(p, &["eval", "budget", "--from", "checkpoints/fpg.tdfn", "--n", "0,2,16", "--out", "t1.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = stdout(&o);
    assert_eq!(csv, fs::read_to_string(p.join("t1.csv")).unwrap());
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "policy,budget_or_threshold,accuracy,coverage,avg_steps");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("fpg,0,") && lines[1].ends_with(",0.0000,0.0000"));
    assert!(lines[3].starts_with("fpg,16,") && lines[3].ends_with(",1.0000,16.0000"));

    let o = tdfn(p, &["eval", "budget", "--from", "checkpoints/fpg.tdfn", "--policy", "random", "--n", "4"]);
    assert!(stdout(&o).lines().nth(1).unwrap().starts_with("random,4,"));

    let run = || tdfn(p, &["eval", "mcp", "--from", "checkpoints/fpg.tdfn", "--threshold", "0.5,0.9", "--limit", "6"]);
    let a = run();
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&run()));
    assert!(stdout(&a).lines().nth(2).unwrap().starts_with("fpg,0.9000,"));
}

#[test]
fn visualize_writes_pgm_panels() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let p = dir.path();
    let o = tdfn(p, &["visualize", "--from", "checkpoints/task.tdfn", "--samples", "0,3", "--n", "3", "--out", "panels"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let panel = p.join("panels/sample_00003");
    for name in ["original.pgm", "lowres.pgm", "recon_00.pgm", "fixation_01.pgm", "recon_03.pgm", "fixation_03.pgm"] {
        let img = parse_pgm(&fs::read(panel.join(name)).unwrap()).unwrap();
        assert_eq!((img.width, img.height), (32, 32), "{name}");
    }
    assert!(!panel.join("fixation_04.pgm").exists());
    let index = fs::read_to_string(panel.join("index.txt")).unwrap();
    assert!(index.starts_with("label 3"));

    // The padded original matches the source pixels.
    let (img, _) = Split::Validation.file_names();
    let raw = parse_idx_images(&fs::read(p.join("data/mnist").join(img)).unwrap()).unwrap();
    let original = parse_pgm(&fs::read(panel.join("original.pgm")).unwrap()).unwrap();
    let src = &raw.pixels[3 * 784..4 * 784];
    for r in 0..28 {
        for c in 0..28 {
            let want = (src[r * 28 + c] * 255.0).round() as u8;
            assert_eq!(original.pixels[(r + 2) * 32 + c + 2], want);
        }
    }

    let o = tdfn(p, &["visualize", "--from", "checkpoints/task.tdfn", "--samples", "10"]);
    assert_eq!(o.status.code(), Some(1));
}
