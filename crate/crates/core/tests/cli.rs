use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn mslt(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mslt"))
        .arg("--config")
        .arg(config("tiny.conf"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("MSLT_LOG_EVERY", "1")
        .output()
        .unwrap()
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn plan_prints_and_mirrors_the_schedule() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(&mslt(&["plan"], tmp.path()));
    assert!(text.contains("stage1") && text.contains("retrain"));
    assert_eq!(read(&tmp.path().join("plan.txt")), text);
    assert_eq!(read(&tmp.path().join("plan.jsonl")).lines().count(), 3);
}

#[test]
fn train_is_deterministic_and_resumable() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&mslt(&["train"], &a));
    ok(&mslt(&["train"], &b));
    let losses = read(&a.join("losses.jsonl"));
    assert_eq!(losses.lines().count(), 20);
    assert_eq!(losses, read(&b.join("losses.jsonl")));
    assert!(a.join("config.echo").exists() && a.join("report.txt").exists());
    let ckpts: Vec<String> = std::fs::read_dir(a.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(ckpts.len(), 6, "{ckpts:?}");

    // drop everything after the first stage and continue
    for stage in ["01", "02"] {
        for end in ["start", "end"] {
            std::fs::remove_dir_all(b.join("checkpoints").join(format!("{stage}-{end}"))).unwrap();
        }
    }
    let text = mslt(&["train", "--resume"], &b);
    ok(&text);
    assert!(String::from_utf8_lossy(&text.stderr).contains("resuming"));
    assert_eq!(losses, read(&b.join("losses.jsonl")));
    assert_eq!(read(&a.join("stages.jsonl")), read(&b.join("stages.jsonl")));
}

#[test]
fn analyze_and_compare_a_finished_run() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    ok(&mslt(&["train"], &run));
    let ck = |n: &str| run.join("checkpoints").join(n).display().to_string();

    let same = ok(&mslt(&["analyze-attention", &ck("02-end"), &ck("02-end")], &run));
    assert!(same.contains("overall mean 0.000000"), "{same}");
    // stage-1 model has 2 layers, the final one 4
    let o = mslt(&["analyze-attention", &ck("00-end"), &ck("02-end")], &run);
    assert_eq!(o.status.code(), Some(4));
    ok(&mslt(&["analyze-attention", &ck("00-end"), &ck("02-end"), "--layers", "0..2"], &run));
    let drift = read(&run.join("attention/drift.jsonl"));
    assert_eq!(drift.lines().count(), 4);
    assert!(run.join("attention/special_mass.jsonl").exists());

    let table = ok(&mslt(&["compare", run.to_str().unwrap()], &run));
    assert!(table.contains("1.000x"), "{table}");
    let csv = read(&run.join("compare/loss_at_step.csv"));
    assert_eq!(csv.lines().count(), 1 + 20);
    assert!(run.join("compare/loss_at_wallclock.csv").exists());
}

#[test]
fn gradcheck_passes_and_catches_mutation() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(&mslt(&["gradcheck"], tmp.path()));
    assert!(text.contains("PASS") && text.contains("worst"));
    let bad = mslt(&["gradcheck", "--mutate"], tmp.path());
    assert_eq!(bad.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("bad.conf");
    let run = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_mslt"))
            .args(args)
            .output()
            .unwrap()
            .status
            .code()
    };
    std::fs::write(&conf, "hiden=16\n").unwrap();
    assert_eq!(run(&["--config", conf.to_str().unwrap(), "plan"]), Some(3));
    std::fs::write(&conf, "num_layers=10 num_stages=4\n").unwrap();
    assert_eq!(run(&["--config", conf.to_str().unwrap(), "plan"]), Some(3));
    std::fs::write(&conf, "num_layers=4 hidden=64 heads=2 vocab_size=512\n").unwrap();
    assert_eq!(run(&["--config", conf.to_str().unwrap(), "gradcheck"]), Some(3));
    assert_eq!(run(&["plan"]), Some(2));
    let missing = tmp.path().join("none");
    let o = mslt(&["compare", missing.to_str().unwrap()], tmp.path());
    assert_ne!(o.status.code(), Some(0));
}
