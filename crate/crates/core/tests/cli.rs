use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
preset = "toy"
seed = 3
log_every = 0

[data]
subjects = 4
test_subjects = 1
images_per_subject = 2
variants = 2

[data.scene]
size = 32

[train]
total_steps = 4
batch_size = 2

[ssl]
total_steps = 4
batch_size = 2

[probe]
k = 3
"#;

fn carl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_carl")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = carl(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Setup {
    dir: tempfile::TempDir,
    config: PathBuf,
    data: PathBuf,
}

fn setup() -> Setup {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, CONFIG).unwrap();
    let corpus = dir.path().join("corpus");
    let listed = ok(&["gen-data", "--config", s(&config), "--out", s(&corpus)]);
    assert_eq!(listed.lines().count(), 3);
    Setup {
        data: corpus.join("variant2.tsv"),
        config,
        dir,
    }
}

#[test]
fn gen_data_snapshots_config_and_writes_variants() {
    let st = setup();
    let corpus = st.dir.path().join("corpus");
    for f in ["config.toml", "inputs.sha256", "variant0.tsv", "variant2.tsv", "cameras/cam1.txt"] {
        assert!(corpus.join(f).exists(), "{f}");
    }
    let snap = std::fs::read_to_string(corpus.join("config.toml")).unwrap();
    assert!(snap.contains("dim_spectral = 16"), "model table is expanded:\n{snap}");
}

#[test]
fn train_eval_and_resume() {
    let st = setup();
    let full = st.dir.path().join("full");
    ok(&["train", "--config", s(&st.config), "--data", s(&st.data), "--out", s(&full)]);
    let loss = std::fs::read_to_string(full.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 5, "{loss}");
    assert!(loss.starts_with("step,loss,cross_entropy,dice,lr"));
    let metrics = std::fs::read_to_string(full.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("class,iou,support") && metrics.contains("overall_accuracy"));
    let hashes = std::fs::read_to_string(full.join("inputs.sha256")).unwrap();
    assert!(hashes.contains("variant2.tsv") && hashes.trim_end().ends_with("total"));

    let half = st.dir.path().join("half");
    ok(&["train", "--config", s(&st.config), "--data", s(&st.data), "--out", s(&half), "--stop-after", "2"]);
    let resumed = st.dir.path().join("resumed");
    std::fs::create_dir_all(&resumed).unwrap();
    std::fs::copy(half.join("loss.csv"), resumed.join("loss.csv")).unwrap();
    let ck = half.join("checkpoint.ckpt");
    ok(&["train", "--data", s(&st.data), "--out", s(&resumed), "--resume", s(&ck)]);
    assert_eq!(std::fs::read_to_string(resumed.join("loss.csv")).unwrap(), loss);
    assert_eq!(
        std::fs::read(resumed.join("checkpoint.ckpt")).unwrap(),
        std::fs::read(full.join("checkpoint.ckpt")).unwrap()
    );

    let ev = st.dir.path().join("eval");
    let out = ok(&["eval", "--checkpoint", s(&full.join("checkpoint.ckpt")), "--data", s(&st.data), "--out", s(&ev)]);
    assert!(out.starts_with("OA "));
    assert_eq!(
        std::fs::read_to_string(ev.join("metrics.csv")).unwrap(),
        std::fs::read_to_string(full.join("metrics.csv")).unwrap()
    );
}

#[test]
fn resume_with_a_different_config_is_rejected() {
    let st = setup();
    let run = st.dir.path().join("run");
    ok(&["train", "--config", s(&st.config), "--data", s(&st.data), "--out", s(&run), "--stop-after", "1"]);
    let other = st.dir.path().join("other.toml");
    std::fs::write(&other, CONFIG.replace("total_steps = 4\nbatch_size = 2\n\n[ssl]", "total_steps = 5\nbatch_size = 2\n\n[ssl]")).unwrap();
    let out = carl(&[
        "train",
        "--config",
        s(&other),
        "--data",
        s(&st.data),
        "--out",
        s(&run),
        "--resume",
        s(&run.join("checkpoint.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not match"));
}

#[test]
fn pretrain_then_probe() {
    let st = setup();
    let pre = st.dir.path().join("pre");
    let out = ok(&["pretrain", "--config", s(&st.config), "--data", s(&st.data), "--out", s(&pre)]);
    assert!(out.contains("spectral rep std"));
    let loss = std::fs::read_to_string(pre.join("loss.csv")).unwrap();
    assert!(loss.starts_with("step,loss,spectral_inv,spectral_var,spectral_cov,spatial_inv,spatial_var,spatial_cov,lr,momentum"));
    assert_eq!(loss.lines().count(), 5);
    assert!(pre.join("diagnostics.toml").exists());

    let ck = pre.join("checkpoint.ckpt");
    for mode in ["knn", "linear"] {
        let probe = st.dir.path().join(format!("probe-{mode}"));
        let out = ok(&[
            "probe",
            "--checkpoint",
            s(&ck),
            "--data",
            s(&st.data),
            "--out",
            s(&probe),
            "--mode",
            mode,
        ]);
        assert!(out.starts_with("probe OA"));
        let report = std::fs::read_to_string(probe.join("probe.csv")).unwrap();
        assert!(report.starts_with("mode,layer,k,epochs,seed,checkpoint,"));
        assert!(report.contains(mode));
    }
}

#[test]
fn flops_reports_scaling_fits() {
    let out = ok(&["flops", "--channels", "8,16,32,64,116", "--fit"]);
    assert_eq!(out.lines().filter(|l| !l.starts_with('#')).count(), 6);
    assert!(out.contains("spectral_self_attn quadratic R2 1.0"));
}

#[test]
fn error_classes_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nbatch_size = 0\n").unwrap();
    let out = dir.path().join("o");
    assert_eq!(carl(&["gen-data", "--config", s(&bad), "--out", s(&out)]).status.code(), Some(2));
    let missing = dir.path().join("missing.toml");
    assert_eq!(carl(&["gen-data", "--config", s(&missing), "--out", s(&out)]).status.code(), Some(3));
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"junk").unwrap();
    let manifest = dir.path().join("m.tsv");
    std::fs::write(&manifest, "").unwrap();
    assert_eq!(
        carl(&["eval", "--checkpoint", s(&junk), "--data", s(&manifest), "--out", s(&out)]).status.code(),
        Some(3)
    );
}
