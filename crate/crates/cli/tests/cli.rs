//! End-to-end checks of the `uqseg` binary: subcommand wiring, config-file
//! fallback with flag precedence, and error reporting with nonzero exit.

use std::path::Path;
use std::process::Command;

fn uqseg() -> Command {
    Command::new(env!("CARGO_BIN_EXE_uqseg"))
}

fn run_ok(args: &[&str]) -> String {
    let out = uqseg().args(args).output().expect("spawn uqseg");
    assert!(
        out.status.success(),
        "uqseg {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn pipeline_runs_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).display().to_string();

    run_ok(&[
        "datagen", "--out", &p("corpus"), "--n", "24", "--side", "32", "--seed", "7",
        "--contrast", "0.9", "--noise", "0.05",
    ]);
    assert!(dir.path().join("corpus/manifest.csv").exists());

    run_ok(&[
        "train-seg", "--corpus", &p("corpus"), "--out", &p("seg"), "--epochs", "2",
        "--batch", "8", "--seed", "7",
    ]);
    run_ok(&[
        "sample", "--corpus", &p("corpus"), "--net", &p("seg/segnet_0.uqn"), "--split", "test",
        "--um", "mcd", "--t-mcd", "3", "--seed", "7", "--out", &p("stacks"),
    ]);
    run_ok(&["ue", "--stacks", &p("stacks"), "--out", &p("ue"), "--pgm"]);
    run_ok(&[
        "scores", "--raw", &p("ue/ue_raw.csv"), "--out", &p("scores"), "--k", "2",
        "--weights", "0.4,0.2,0.2,0.2", "--order", "asc",
    ]);
    run_ok(&[
        "train-qp", "--corpus", &p("corpus"), "--net", &p("seg/segnet_0.uqn"), "--um", "mcd",
        "--t-mcd", "3", "--ue", "entropy", "--arch", "two_way_seg", "--epochs", "1",
        "--batch", "8", "--seed", "7", "--out", &p("qp/qnet.uqn"),
    ]);
    let eval_out = run_ok(&[
        "eval-qp", "--corpus", &p("corpus"), "--net", &p("seg/segnet_0.uqn"),
        "--qnet", &p("qp/qnet.uqn"), "--out", &p("eval"), "--scores", &p("scores/scores.csv"),
    ]);
    assert!(eval_out.contains("r2="), "{eval_out}");
    assert!(eval_out.contains("pcc="), "{eval_out}");

    let rank_out = run_ok(&[
        "rank", "--scores", &p("scores/scores.csv"), "--k", "2", "--out", &p("rank"),
    ]);
    assert!(rank_out.contains("flagged 2 images"), "{rank_out}");

    // grad-cam on a known test image
    let manifest = std::fs::read_to_string(dir.path().join("corpus/manifest.csv")).unwrap();
    let id = manifest
        .lines()
        .skip(1)
        .find(|l| l.ends_with(",test"))
        .map(|l| l.split(',').next().unwrap().to_string())
        .unwrap();
    run_ok(&[
        "gradcam", "--corpus", &p("corpus"), "--net", &p("seg/segnet_0.uqn"),
        "--qnet", &p("qp/qnet.uqn"), "--id", &id, "--branch", "0", "--out", &p("cam"),
    ]);
    assert!(dir
        .path()
        .join(format!("cam/gradcam_{id}_branch0.pgm"))
        .exists());
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(&cfg_path, "n 12\nside 32\nseed 99\n").unwrap();
    let out_a = dir.path().join("a");

    run_ok(&[
        "datagen", "--out", &out_a.display().to_string(),
        "--config", &cfg_path.display().to_string(),
    ]);
    assert_eq!(count_rows(&out_a.join("manifest.csv")), 12);

    // explicit flag overrides config value
    let out_b = dir.path().join("b");
    run_ok(&[
        "datagen", "--out", &out_b.display().to_string(),
        "--config", &cfg_path.display().to_string(), "--n", "8",
    ]);
    assert_eq!(count_rows(&out_b.join("manifest.csv")), 8);

    // same config, same seed -> identical corpus bytes
    let out_c = dir.path().join("c");
    run_ok(&[
        "datagen", "--out", &out_c.display().to_string(),
        "--config", &cfg_path.display().to_string(),
    ]);
    assert_eq!(
        std::fs::read(out_a.join("s0000_img.uqt")).unwrap(),
        std::fs::read(out_c.join("s0000_img.uqt")).unwrap()
    );
}

fn count_rows(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let out = uqseg()
        .args(["ue", "--stacks", "/nonexistent/dir", "--out", "/tmp/x-ue-err"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error:"), "{stderr}");
    assert!(stderr.contains("stacks_meta.csv"), "{stderr}");

    let out = uqseg()
        .args(["sample", "--corpus", "/nope", "--net", "/nope.uqn", "--um", "bogus", "--out", "/tmp/x"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}
