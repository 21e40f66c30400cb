use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sscdl() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sscdl"));
    cmd.env_remove("SSCDL_DATA_ROOT");
    cmd
}

fn data_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn ingest_mutag() {
    let o = sscdl().arg("ingest").arg(data_root().join("MUTAG")).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("MUTAG: 188 graphs, 2 classes\n"), "{out}");
    assert!(out.contains("class counts {-1: 63, 1: 125}"), "{out}");
}

#[test]
fn ingest_names_missing_file() {
    let tmp = tempfile::tempdir().unwrap();
    let o = sscdl().arg("ingest").arg(tmp.path()).args(["--name", "GONE"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("GONE_A.txt"), "{}", stderr(&o));
}

#[test]
fn bound_check_exit_codes() {
    let o = sscdl().args(["bound-check", "--trials", "500"]).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("bound holds"));

    let o = sscdl().args(["bound-check", "--tau", "0.5", "--k", "3"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));

    let o = sscdl().arg("no-such-command").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

fn small_run(out: &Path) -> (Output, PathBuf) {
    let config = out.join("small.toml");
    fs::write(
        &config,
        "[model]\ngcn_layers = 2\nhidden_dim = 8\nmlp_layers = 1\nprojection_dim = 8\n\n[train]\nbatch_size = 32\n",
    )
    .unwrap();
    let o = sscdl()
        .arg("run")
        .arg("--config")
        .arg(&config)
        .arg("--data-root")
        .arg(data_root())
        .args(["--dataset", "MUTAG", "--variants", "SSCDL,GCN_supervised", "--label-ratios", "0.3"])
        .args(["--folds", "0,3", "--epochs-pretrain", "2", "--epochs-finetune", "3", "--seed", "11"])
        .arg("--out")
        .arg(out)
        .output()
        .unwrap();
    let dir = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("run directory "))
        .map(PathBuf::from)
        .unwrap_or_default();
    (o, dir)
}

#[test]
fn run_report_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let (o, dir) = small_run(tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.join("manifest.json").is_file());
    assert!(dir.join("reports/folds.csv").is_file());
    assert!(dir.join("checkpoints/SSCDL-0.3-3.finetune.ckpt").is_file());
    assert!(dir.join("checkpoints/SSCDL-0.3-3.pretrain.ckpt").is_file());

    let csv = sscdl().arg("report").arg(&dir).args(["--format", "csv"]).output().unwrap();
    assert_eq!(csv.status.code(), Some(0));
    let text = stdout(&csv);
    assert_eq!(text.lines().count(), 5, "{text}");
    assert!(text.starts_with("dataset,variant,label_ratio,fold,accuracy,seed,config_fingerprint\n"));

    let ev = sscdl().arg("evaluate").arg(&dir).output().unwrap();
    assert_eq!(ev.status.code(), Some(0), "{}", stderr(&ev));
    let lines: Vec<String> = stdout(&ev).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|l| l.ends_with(" ok")), "{lines:?}");

    // Same configuration into a fresh directory gives identical reports.
    let other = tempfile::tempdir().unwrap();
    let (o2, dir2) = small_run(other.path());
    assert_eq!(o2.status.code(), Some(0));
    for f in ["reports/folds.csv", "reports/table.txt"] {
        assert_eq!(fs::read_to_string(dir.join(f)).unwrap(), fs::read_to_string(dir2.join(f)).unwrap(), "{f}");
    }
    let fingerprint = |d: &Path| {
        let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("manifest.json")).unwrap()).unwrap();
        m["fingerprint"].clone()
    };
    assert_eq!(fingerprint(&dir), fingerprint(&dir2));
}
