use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
bench.samples_per_class_domain = 4
train.epochs = 1
train.batch_size = 64
model.hidden_width = 8
model.latent_dim = 8
model.noise_dim = 4
";

fn zsldg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zsldg")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let data = dir.path().join("bench.zfv");
    let run = dir.path().join("run");
    let report = dir.path().join("report");

    let o = zsldg(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(data.exists());

    let o = zsldg(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["metrics.csv", "final.ckpt", "config.txt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let ckpt = run.join("final.ckpt");
    let o = zsldg(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--protocol", "rotation", "--out", s(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(report.join("rotation_table.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    // Header plus one mode row; the default split holds out one domain.
    assert_eq!(lines.len(), 2, "{table}");
    assert_eq!(lines[0].split(',').count(), 3, "{table}");
    assert!(lines[1].starts_with("M3,"));
}

#[test]
fn config_copy_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = zsldg(&["--seed", "3", "train", "--config", s(&cfg), "--out", s(&a)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let copy = a.join("config.txt");
    assert!(std::fs::read_to_string(&copy).unwrap().contains("train.seed = 3"));
    let o = zsldg(&["train", "--config", s(&copy), "--out", s(&b)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(a.join("metrics.csv")).unwrap(), std::fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn malformed_key_fails_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "train.epochs = 1\nhyper.lamda = 10\n").unwrap();
    let o = zsldg(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("run"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("hyper.lamda"), "{}", stderr(&o));
}

#[test]
fn missing_data_file_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = zsldg(&["train", "--data", s(&dir.path().join("nope.zfv")), "--out", s(&dir.path().join("run"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nope.zfv"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes() {
    let o = zsldg(&["gradcheck", "--points", "3"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("all checks ≤ 1e-4: PASS"), "{}", stdout(&o));
}

#[test]
fn help_lists_every_flag() {
    for (cmd, flags) in [
        ("gen-data", &["--config", "--out", "--seed"][..]),
        ("train", &["--config", "--data", "--out", "--resume", "--seed"]),
        ("eval", &["--config", "--checkpoint", "--data", "--protocol", "--out", "--jobs", "--seed"]),
        ("ablate", &["--config", "--data", "--seeds", "--jobs", "--out", "--seed"]),
        ("gradcheck", &["--points", "--seed"]),
    ] {
        let help = stdout(&zsldg(&[cmd, "--help"]));
        for f in flags {
            assert!(help.contains(f), "{cmd} --help lacks {f}:\n{help}");
        }
    }
}
