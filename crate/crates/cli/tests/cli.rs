use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nalgebra::DMatrix;
use nlunmix::io::{load_matrix, save_matrix};

fn nlunmix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nlunmix")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = nlunmix(args);
    assert!(
        out.status.success(),
        "nlunmix {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn staged_run_produces_every_file() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |name: &str| tmp.path().join(name);
    ok(&[
        "gen", "--model", "gbm", "--n", "120", "--r", "3", "--l", "30", "--sigma2", "1e-4", "--amax", "0.9",
        "--seed", "4", "--out", s(&d("gen")),
    ]);
    ok(&["reduce", "--in", s(&d("gen")), "--out", s(&d("reduce"))]);
    ok(&["fit", "--in", s(&d("reduce")), "--out", s(&d("fit")), "--max-iter", "30"]);
    ok(&["scale", "--in", s(&d("fit")), "--out", s(&d("scale"))]);
    ok(&["endmembers", "--in", s(&d("scale")), "--out", s(&d("em")), "--gp-mean", "posterior"]);
    ok(&["baseline", "--in", s(&d("gen")), "--out", s(&d("base")), "--seed", "1"]);

    let y = load_matrix(&d("gen").join("Y.bin")).unwrap();
    assert_eq!(y.shape(), (120, 30));
    for f in ["Y.bin", "A_true.bin", "x.bin", "u.bin", "abundances.bin", "v_r.bin", "endmembers.csv"] {
        assert!(d("em").join(f).exists(), "{f} not carried forward");
    }
    let a = load_matrix(&d("scale").join("abundances.bin")).unwrap();
    assert_eq!(a.shape(), (120, 3));
    assert!(a.row_iter().all(|r| (r.sum() - 1.0).abs() < 1e-9));
    let m = load_matrix(&d("em").join("endmembers.bin")).unwrap();
    assert_eq!(m.shape(), (30, 3));
    let csv = fs::read_to_string(d("em").join("endmembers.csv")).unwrap();
    assert!(csv.starts_with("band,mean_1,var_1,lo95_1,hi95_1,"));
    assert_eq!(csv.lines().count(), 31);
    assert_eq!(load_matrix(&d("base").join("vca_endmembers.bin")).unwrap().shape(), (30, 3));
    let fit = fs::read_to_string(d("fit").join("fit.cfg")).unwrap();
    assert!(fit.contains("iterations="));
}

#[test]
fn pipeline_writes_a_deterministic_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.cfg");
    fs::write(&cfg, "model=fm\nn=100\nl=30\namax=0.9\nseed=2\nmax_iter=25\n").unwrap();
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let dir = tmp.path().join(run);
        let out = ok(&["pipeline", "--config", s(&cfg), "--out", s(&dir)]);
        let report = fs::read_to_string(dir.join("report.csv")).unwrap();
        assert_eq!(String::from_utf8(out.stdout).unwrap(), report);
        for f in ["timing.csv", "plot.csv", "endmembers.csv"] {
            assert!(dir.join(f).exists(), "missing {f}");
        }
        reports.push(report);
    }
    assert_eq!(reports[0], reports[1]);
    assert!(reports[0].contains("fcll_gplvm,rnmse,"));
    assert!(reports[0].contains("vca_fcls,rnmse,"));
}

#[test]
fn failing_stage_is_named_and_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    fs::create_dir_all(&input).unwrap();
    // collinear latents have no enclosing 2-simplex
    let x = DMatrix::from_fn(20, 3, |i, j| match j {
        0 => i as f64 / 19.0,
        1 => 1.0 - i as f64 / 19.0,
        _ => 0.0,
    });
    save_matrix(&x, &input.join("x.bin")).unwrap();
    let out = nlunmix(&["scale", "--in", s(&input), "--out", s(&tmp.path().join("out"))]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: scale"), "{err}");
}

#[test]
fn bad_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "model=lmm\nbogus=1\n").unwrap();
    let out = nlunmix(&["pipeline", "--config", s(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn missing_input_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = nlunmix(&["reduce", "--in", s(&tmp.path().join("nope")), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
