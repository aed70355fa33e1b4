use std::path::Path;
use std::process::{Command, Output};

use crossmlp_train::{ProbsFile, SEED_ENV};

const TINY: &str = "\
model.image_size=32
model.base_channels=4
model.blocks=1
model.mixer_layers=1
model.disc_filters=4
model.selection_width=4
train.batch_size=2
train.out_dir=run
data.train_manifest=data/manifest.txt
data.test_manifest=data/manifest.txt
";

fn crossmlp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossmlp")).current_dir(dir).env_remove(SEED_ENV).args(args).output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn err(out: Output) -> String {
    assert!(!out.status.success(), "stdout: {}", String::from_utf8_lossy(&out.stdout));
    String::from_utf8(out.stderr).unwrap()
}

fn setup(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(crossmlp(dir.path(), &["make-toy-data", "--n", "3", "--size", "32", "--seed", "2", "--out", "data"]));
    std::fs::write(dir.path().join("run.cfg"), format!("{TINY}{extra}")).unwrap();
    dir
}

#[test]
fn f64_train_resume_eval_generate() {
    let dir = setup("train.precision=f64\ntrain.epochs=1\n");
    let first = ok(crossmlp(dir.path(), &["train", "--config", "run.cfg"]));
    assert_eq!(first.lines().filter(|l| l.starts_with("step=")).count(), 2);

    let cfg = std::fs::read_to_string(dir.path().join("run.cfg")).unwrap().replace("train.epochs=1", "train.epochs=2");
    std::fs::write(dir.path().join("more.cfg"), cfg).unwrap();
    let resumed = ok(crossmlp(dir.path(), &["train", "--config", "more.cfg", "--resume", "run/final.ckpt"]));
    let steps: Vec<_> = resumed.lines().filter_map(|l| l.strip_prefix("step=")?.split(' ').next()).collect();
    assert_eq!(steps, ["3", "4"]);
    let log = std::fs::read_to_string(dir.path().join("run/train.log")).unwrap();
    assert_eq!(log.lines().count(), 4);

    let ids = ["toy0000", "toy0001", "toy0002"];
    let rows = ids.iter().flat_map(|id| {
        [(format!("{id}/real"), vec![0.7, 0.1, 0.1, 0.1]), (format!("{id}/fake"), vec![0.25, 0.25, 0.25, 0.25])]
    });
    std::fs::write(dir.path().join("probs.txt"), ProbsFile { classes: 4, rows: rows.collect() }.to_text()).unwrap();
    let report = ok(crossmlp(
        dir.path(),
        &["eval", "--ckpt", "run/final.ckpt", "--manifest", "data/manifest.txt", "--probs", "probs.txt"],
    ));
    assert!(report.contains("pairs=3"), "{report}");
    assert!(report.contains("inception_all=1.000000"), "{report}");
    assert!(report.contains("acc_top1_confident=100.000000"), "{report}");

    ok(crossmlp(
        dir.path(),
        &[
            "generate",
            "--ckpt",
            "run/final.ckpt",
            "--source",
            "data/toy0001_aerial.png",
            "--semantic",
            "data/toy0001_semantic.png",
            "--out",
            "gen",
        ],
    ));
    for name in ["final_image.png", "coarse_image.png", "u_image.png", "grid.png"] {
        assert!(dir.path().join("gen").join(name).is_file(), "{name}");
    }
}

#[test]
fn seed_env_overrides_the_config() {
    let dir = setup("train.epochs=1\ntrain.seed=5\n");
    let run = |seed: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_crossmlp"));
        cmd.current_dir(dir.path()).env_remove(SEED_ENV).args(["train", "--config", "run.cfg"]);
        if let Some(s) = seed {
            cmd.env(SEED_ENV, s);
        }
        ok(cmd.output().unwrap())
    };
    let (a, b, c) = (run(None), run(Some("5")), run(Some("6")));
    assert_eq!(a, b);
    assert_ne!(a, c);
    let e = Command::new(env!("CARGO_BIN_EXE_crossmlp"))
        .current_dir(dir.path())
        .env(SEED_ENV, "x")
        .args(["train", "--config", "run.cfg"])
        .output()
        .unwrap();
    assert!(err(e).contains(SEED_ENV));
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let dir = setup("train.epochs=1\n");
    let write = |name: &str, text: &str| std::fs::write(dir.path().join(name), text).unwrap();

    write("typo.cfg", &format!("{TINY}model.colour=3\n"));
    assert!(err(crossmlp(dir.path(), &["train", "--config", "typo.cfg"])).contains("model.colour"));

    write("nodata.cfg", &TINY.replace("data/manifest.txt", "missing/manifest.txt"));
    assert!(err(crossmlp(dir.path(), &["train", "--config", "nodata.cfg"])).contains("missing"));

    ok(crossmlp(dir.path(), &["train", "--config", "run.cfg"]));
    ok(crossmlp(dir.path(), &["make-toy-data", "--n", "1", "--size", "64", "--seed", "0", "--out", "big"]));
    let e = err(crossmlp(
        dir.path(),
        &[
            "generate",
            "--ckpt",
            "run/final.ckpt",
            "--source",
            "big/toy0000_aerial.png",
            "--semantic",
            "big/toy0000_semantic.png",
            "--out",
            "gen",
        ],
    ));
    assert!(e.contains("64"), "{e}");

    write("short.txt", "#classes 4\ntoy0000/real\t1\t0\t0\t0\n");
    let e = err(crossmlp(
        dir.path(),
        &["eval", "--ckpt", "run/final.ckpt", "--manifest", "data/manifest.txt", "--probs", "short.txt"],
    ));
    assert!(e.contains("toy0000/fake"), "{e}");

    assert!(!crossmlp(dir.path(), &["eval", "--ckpt", "nope.ckpt", "--manifest", "data/manifest.txt"])
        .status
        .success());
}
