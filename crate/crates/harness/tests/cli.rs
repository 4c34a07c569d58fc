use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_softprune"));
    c.env("RUST_LOG", "warn");
    c
}

fn desk(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-desk").join(name)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A one-epoch config on a small slice of the desk data.
fn tiny_config(dir: &Path) -> PathBuf {
    let text = format!(
        "dataset.train_images = {}\ndataset.train_labels = {}\ndataset.test_images = {}\ndataset.test_labels = {}\n\
         dataset.train_size = 300\ndataset.test_size = 200\nsparsity.lambda = 1e-2\ntrain.epochs = 1\noutput.dir = run\n",
        desk("train-images-idx3-ubyte.gz").display(),
        desk("train-labels-idx1-ubyte.gz").display(),
        desk("t10k-images-idx3-ubyte.gz").display(),
        desk("t10k-labels-idx1-ubyte.gz").display(),
    );
    let p = dir.join("tiny.conf");
    std::fs::write(&p, text).unwrap();
    p
}

fn value(out: &str, key: &str) -> String {
    out.lines().find_map(|l| l.strip_prefix(&format!("{key}="))).unwrap_or_else(|| panic!("{key} missing in {out}")).to_string()
}

#[test]
fn train_prune_eval_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = bin().args(["train", cfg.to_str().unwrap(), "--set", "train.seed=3"]).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = dir.path().join("run/checkpoint");
    assert!(ckpt.join("manifest.txt").exists());

    let same = bin().args(["report", ckpt.to_str().unwrap(), ckpt.to_str().unwrap()]).output().unwrap();
    assert!(same.status.success());
    let s = stdout(&same);
    for k in ["channels_reduction", "params_reduction", "flops_reduction"] {
        assert_eq!(value(&s, k), "0.00%");
    }

    let pruned = dir.path().join("pruned");
    let p = bin().args(["prune", ckpt.to_str().unwrap(), "--out", pruned.to_str().unwrap()]).output().unwrap();
    assert!(p.status.success(), "{}", String::from_utf8_lossy(&p.stderr));
    let rep = bin().args(["report", ckpt.to_str().unwrap(), pruned.to_str().unwrap()]).output().unwrap();
    assert_eq!(value(&stdout(&p), "flops_after"), value(&stdout(&rep), "flops_after"));

    let images = desk("t10k-images-idx3-ubyte.gz");
    let labels = desk("t10k-labels-idx1-ubyte.gz");
    let eval = |c: &Path| {
        let o = bin().args(["eval", c.to_str().unwrap(), "--data", images.to_str().unwrap(), "--labels", labels.to_str().unwrap()]).output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        value(&stdout(&o), "accuracy")
    };
    assert_eq!(eval(&ckpt), eval(&pruned));
}

#[test]
fn sweep_over_s_prints_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = bin().args(["sweep", cfg.to_str().unwrap(), "--s", "0,1,2,3"]).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 5, "{out}");
    assert!(lines[0].contains("FLOPs"));
    for (line, s) in lines[1..].iter().zip(["0", "1", "2", "3"]) {
        assert_eq!(line.split('|').next().unwrap().trim(), s);
    }
    let csv = std::fs::read_to_string(dir.path().join("run/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(dir.path().join("run/s-2/metrics.csv").exists());
}

#[test]
fn usage_errors_exit_two() {
    let unknown = bin().args(["train", "x.conf", "--bogus"]).output().unwrap();
    assert_eq!(unknown.status.code(), Some(2));
    let missing = bin().args(["train", "/nonexistent/x.conf"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
    let err = String::from_utf8_lossy(&missing.stderr);
    assert!(err.lines().next().unwrap().contains("/nonexistent/x.conf"), "{err}");
    let no_axis = bin().args(["sweep", "x.conf"]).output().unwrap();
    assert_eq!(no_axis.status.code(), Some(2));
}

#[test]
fn bad_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = bin().args(["train", cfg.to_str().unwrap(), "--set", "train.batch_size=1"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(String::from_utf8_lossy(&o.stderr).lines().count(), 1);
}
