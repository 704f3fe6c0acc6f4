use std::path::Path;
use std::process::Command;

const TINY: &str = r#"
seed = 4
probe_epochs = [0]

[data]
n_train = 48
n_test = 40

[model]
encoder_widths = [4, 8]
embed_dim = 8

[model.projector]
hidden_dims = [16]
bottleneck_dim = 4
out_dim = 32

[distill]
epochs = 1
batch_size = 16

[probe]
epochs = 3
batch_size = 16
knn_k = 3

[supervised]
epochs = 2
batch_size = 16
rewind_epochs = []

[supervised.schedule]
base = 0.05
milestones = [1]
factor = 10.0

[imp]
rounds = 1

[lmc]
orderings = 2
gamma_points = 3

[landscape]
axis1 = { lo = 0.0, hi = 1.0, n = 2 }
axis2 = { lo = 0.0, hi = 1.0, n = 2 }
"#;

fn rtlab(dir: &Path, args: &[&str]) -> std::process::Output {
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    Command::new(env!("CARGO_BIN_EXE_rtlab"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .env_remove("RTLAB_OUT")
        .output()
        .expect("spawn rtlab")
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn distill_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = rtlab(tmp.path(), &["distill", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let run = "alpha-0.0000000001_seed-4";
    for f in ["summary.csv", "config.toml", "manifest.toml"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
    for f in ["runlog.csv", "probe.csv", "epoch_kl.csv", "teacher.rtlb", "student.rtlb", "manifest.toml"] {
        assert_eq!(read(a.join(run).join(f)), read(b.join(run).join(f)), "{f}");
    }
    let probe = String::from_utf8(read(a.join(run).join("probe.csv"))).unwrap();
    assert!(probe.starts_with("epoch,model,accuracy\n"));
    assert!(probe.contains("raw_input"));
}

#[test]
fn alpha_sweep_writes_one_directory_per_alpha() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let o = rtlab(
        tmp.path(),
        &["distill", "--out", out.to_str().unwrap(), "--override", "sweep.alphas=[0.0, 0.5, 1.0]", "--override", "distill.epochs=0"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for a in ["0", "0.5", "1"] {
        let dir = out.join(format!("alpha-{a}_seed-4"));
        let cfg = std::fs::read_to_string(dir.join("config.toml")).unwrap();
        assert!(cfg.contains(&format!("alpha = {}", if a == "0" { "0.0" } else if a == "1" { "1.0" } else { a })), "{cfg}");
    }
    let teacher = rtlab_core::checkpoint::load_checkpoint(&out.join("alpha-0_seed-4/teacher.rtlb")).unwrap().0;
    let student = rtlab_core::checkpoint::load_checkpoint(&out.join("alpha-0_seed-4/student.rtlb")).unwrap().0;
    assert_eq!(teacher.params(), student.params());
}

#[test]
fn seed_flag_and_env_root() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_rtlab"))
        .args(["distill", "--seed", "9", "--override", "distill.epochs=0", "--config"])
        .arg(&cfg)
        .env("RTLAB_OUT", tmp.path().join("root"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("root/distill/alpha-0.0000000001_seed-9/student.rtlb").exists());
}

#[test]
fn error_classes_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = rtlab(tmp.path(), &["distill", "--out", out.to_str().unwrap(), "--override", "distill.alpah=1"]);
    assert_eq!(o.status.code(), Some(3));
    let o = rtlab(tmp.path(), &["probe", "--out", out.to_str().unwrap(), "/nonexistent/x.rtlb"]);
    assert_eq!(o.status.code(), Some(4));
    let o = rtlab(
        tmp.path(),
        &["landscape", "--out", out.to_str().unwrap(), "--anchor", "teacher=/nonexistent/t.rtlb"],
    );
    assert_eq!(o.status.code(), Some(5));
    let o = rtlab(tmp.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn landscape_trains_missing_anchors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("l");
    let o = rtlab(tmp.path(), &["landscape", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let grid = std::fs::read_to_string(out.join("grid_distill_kl.csv")).unwrap();
    assert_eq!(grid.lines().count(), 1 + 4);
    assert!(grid.lines().nth(1).unwrap().starts_with("0.0,0.0,0.0,ok"), "{grid}");
    assert!(out.join("plane.toml").exists());
    for name in ["teacher", "trained_local", "trained_far"] {
        assert!(out.join(format!("{name}.rtlb")).exists());
    }
    let o = rtlab(
        tmp.path(),
        &[
            "landscape",
            "--out",
            tmp.path().join("l2").to_str().unwrap(),
            "--anchor",
            &format!("teacher={}", out.join("teacher.rtlb").display()),
            "--anchor",
            &format!("trained_local={}", out.join("trained_local.rtlb").display()),
            "--anchor",
            &format!("trained_far={}", out.join("trained_far.rtlb").display()),
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn imp_lmc_restart_and_controls_run() {
    let tmp = tempfile::tempdir().unwrap();
    for cmd in ["imp", "lmc", "restart", "noise-control", "size-sweep"] {
        let out = tmp.path().join(cmd);
        let mut args = vec![cmd, "--out", out.to_str().unwrap()];
        if cmd == "size-sweep" {
            args.extend(["--override", "sweep.sizes=[24, 48]"]);
        }
        let o = rtlab(tmp.path(), &args);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(out.join("manifest.toml").exists(), "{cmd}");
    }
    let imp = std::fs::read_to_string(tmp.path().join("imp/imp.csv")).unwrap();
    assert!(imp.lines().nth(1).unwrap().starts_with("student,4,0,0.0,0.0,"), "{imp}");
    assert!(tmp.path().join("imp/comparison.csv").exists());
    let barriers = std::fs::read_to_string(tmp.path().join("lmc/lmc_barriers.csv")).unwrap();
    assert_eq!(barriers.lines().count(), 1 + 2);
    assert!(tmp.path().join("lmc/lmc_mean.csv").exists());
}
