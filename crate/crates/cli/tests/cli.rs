use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn exe() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hyrec"))
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str], config: &Path, out: Option<&Path>) -> Output {
    let mut c = exe();
    c.args(args).arg("--config").arg(config);
    if let Some(o) = out {
        c.arg("--out").arg(o);
    }
    c.output().expect("spawn hyrec")
}

fn write_config(dir: &Path, name: &str, value: &serde_json::Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(value).unwrap()).unwrap();
    p
}

fn bump_single(shape: usize) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(configs().join("elastography_bump.json")).unwrap()).unwrap();
    v["study"] = "single".into();
    v["grid"]["shape"] = serde_json::json!([shape, shape]);
    v.as_object_mut().unwrap().remove("levels");
    v
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = bump_single(65);
    v["noise"] = serde_json::json!({"epsilon": 1e-4, "correlation_length": 0.2});
    v["seed"] = 3.into();
    let cfg = write_config(dir.path(), "bump.json", &v);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(&["run"], &cfg, Some(&a)).status.success());
    assert!(run(&["run"], &cfg, Some(&b)).status.success());
    for f in ["metrics.csv", "report.json", "fields/a.bin", "fields/c.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let csv = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("quantity,c0,c1,c2,rel_c0,rel_c1,rel_c2,masked_fraction\n"));
    let c = dir.path().join("c");
    let out = exe().args(["run", "--seed", "4", "--config"]).arg(&cfg).arg("--out").arg(&c).output().unwrap();
    assert!(out.status.success());
    assert_ne!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(c.join("metrics.csv")).unwrap());
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = bump_single(17);
    v["colour"] = "blue".into();
    let out = run(&["run"], &write_config(dir.path(), "unknown.json", &v), None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));

    let mut v = bump_single(17);
    v["study"] = "convergence".into();
    v["levels"] = serde_json::json!([17, 33]);
    let out = run(&["run"], &write_config(dir.path(), "levels.json", &v), None);
    assert_eq!(out.status.code(), Some(2));

    let mut v = bump_single(17);
    v["functionals"] = 4.into();
    v["traces"] = serde_json::json!(["1", "x", "y", "x*y"]);
    let out = run(&["run"], &write_config(dir.path(), "short.json", &v), None);
    assert_eq!(out.status.code(), Some(2));

    let out = exe().arg("run").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn staged_subcommands_share_measurements() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bump.json", &bump_single(33));
    let out = dir.path().join("out");
    assert!(run(&["forward"], &cfg, Some(&out)).status.success());
    assert!(out.join("u_5.bin").exists());
    assert!(run(&["synth"], &cfg, Some(&out)).status.success());
    let ms = out.join("measurements");
    assert!(ms.join("measurements.json").exists());
    let ms_arg = ms.to_str().unwrap();
    let rec = dir.path().join("rec");
    let o = run(&["reconstruct", "--measurements", ms_arg, "--dump-intermediates"], &cfg, Some(&rec));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(rec.join("alpha.bin").exists() && rec.join("M_2.bin").exists());
    let (from_disk, direct) = (dir.path().join("r1"), dir.path().join("r2"));
    assert!(run(&["resolve", "--measurements", ms_arg], &cfg, Some(&from_disk)).status.success());
    assert!(run(&["resolve"], &cfg, Some(&direct)).status.success());
    assert_eq!(
        fs::read(from_disk.join("metrics.csv")).unwrap(),
        fs::read(direct.join("metrics.csv")).unwrap()
    );
    let o = run(&["check", "--measurements", ms_arg], &cfg, Some(&out));
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("global"));
}

#[test]
fn harmonic_convergence_reports_rounding_note() {
    let dir = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(configs().join("harmonic.json")).unwrap()).unwrap();
    v["levels"] = serde_json::json!([9, 17, 33]);
    let cfg = write_config(dir.path(), "h.json", &v);
    let out = dir.path().join("out");
    let o = run(&["convergence"], &cfg, Some(&out));
    assert!(o.status.success());
    let orders = fs::read_to_string(out.join("orders.csv")).unwrap();
    assert!(orders.starts_with("quantity,order,note\n"));
    for line in orders.lines().skip(1) {
        assert!(line.contains("NaN") && line.contains("rounding"), "{line}");
    }
    assert!(fs::read_to_string(out.join("convergence.csv")).unwrap().starts_with("quantity,points,h,"));
}

#[test]
fn noise_sweep_zero_row_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(configs().join("noise_sweep.json")).unwrap()).unwrap();
    v["grid"]["shape"] = serde_json::json!([33, 33]);
    let cfg = write_config(dir.path(), "n.json", &v);
    let out = dir.path().join("out");
    assert!(run(&["noise-sweep"], &cfg, Some(&out)).status.success());
    let csv = fs::read_to_string(out.join("noise_sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epsilon,delta_h_c2,quantity,c0,c1,ratio"));
    for line in lines.filter(|l| l.starts_with("0e0,")) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[3].parse::<f64>().unwrap(), 0.0, "{line}");
    }
}
