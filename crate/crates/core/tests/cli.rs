use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rmgcr"));
    c.env_remove("RMGCR_OUTPUT_DIR");
    c
}

fn task(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../tasks").join(format!("{name}.rm"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(["--output-dir", "o"]).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ground(dir: &Path) {
    let o = run(dir, &["gen-dataset", "--n", "200", "--seed", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(dir, &["ground"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn empty_dataset_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["gen-dataset", "--n", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_rm_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.rm"), "vocab: red\nstates: 2\nterminals: 0\n(1, 0, red &, 1)\n").unwrap();
    let o = run(dir.path(), &["oracle", "--rm", "bad.rm"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));
}

#[test]
fn dead_end_state_reports_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    ground(dir.path());
    std::fs::write(
        dir.path().join("dead.rm"),
        "vocab: red green blue triangle circle\nstates: 2\nterminals: 0\ninitial: 1\n(1, 1, red, 0)\n",
    )
    .unwrap();
    let o = run(dir.path(), &["compose-eval", "--rm", "dead.rm"]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("dead.rm") && err.contains("no outgoing edge") && err.contains("line 2"), "{err}");
}

#[test]
fn oversized_product_space_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let rm = task("sequence");
    let o = run(dir.path(), &["oracle", "--rm", rm.to_str().unwrap(), "--env", "desk-randomized"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("above the cap"), "{}", stderr(&o));
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let rm = task("sequence");
    let rm = rm.to_str().unwrap();
    let outputs: Vec<_> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            ground(dir.path());
            let o = run(dir.path(), &["train", "--rm", rm, "--seeds", "0,1", "--steps", "3000", "--shaping", "composed,none"]);
            assert!(o.status.success(), "{}", stderr(&o));
            let o = run(dir.path(), &["compose-eval", "--rm", rm]);
            assert!(o.status.success(), "{}", stderr(&o));
            let mut files = vec![o.stdout];
            for f in ["dataset.jsonl", "models/grounding.json", "train/sequence/summary.json", "train/sequence/composed_run1.csv"] {
                files.push(std::fs::read(dir.path().join("o").join(f)).unwrap());
            }
            files
        })
        .collect();
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn eval_reads_a_trained_policy() {
    let dir = tempfile::tempdir().unwrap();
    ground(dir.path());
    let rm = task("sequence");
    let rm = rm.to_str().unwrap();
    let o = run(dir.path(), &["train", "--rm", rm, "--seeds", "0", "--steps", "20000", "--shaping", "composed"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(dir.path(), &["eval", "--rm", rm, "--policy", "o/train/sequence/composed_run0.policy.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!o.stdout.is_empty());
}
