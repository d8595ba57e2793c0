use std::collections::BTreeSet;
use std::path::PathBuf;

use hyrec_core::harness::{run_noise_sweep, run_single, ConstraintConfig, ExperimentConfig, ModalityConfig, Study};

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs().join(name)).unwrap()
}

fn keys(v: &serde_json::Value) -> BTreeSet<String> {
    v.as_object().unwrap().keys().cloned().collect()
}

#[test]
fn shipped_configs_validate() {
    for entry in std::fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        if path.file_name().unwrap() == "schema.json" {
            continue;
        }
        ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}

#[test]
fn schema_lists_every_config_key() {
    let schema: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(configs().join("schema.json")).unwrap()).unwrap();
    let cfg = serde_json::to_value(load("qpat.json")).unwrap();
    assert_eq!(keys(&schema["properties"]), keys(&cfg));
    for section in ["solver", "recon", "gauge", "thresholds", "grid"] {
        assert_eq!(keys(&schema["properties"][section]["properties"]), keys(&cfg[section]), "{section}");
    }
}

#[test]
fn shorter_correlation_length_amplifies_perturbation() {
    let mut cfg = load("noise_sweep.json");
    cfg.grid.shape = vec![33, 33];
    let mut worst = Vec::new();
    for ell in [0.4, 0.2, 0.1] {
        cfg.noise.as_mut().unwrap().correlation_length = ell;
        let r = run_noise_sweep(&cfg).unwrap();
        let row = r.rows.iter().find(|row| row.epsilon == 2e-4 && row.quantity == "c").unwrap().clone();
        worst.push((row.delta_h_c2, row.c0));
    }
    for w in worst.windows(2) {
        assert!(w[1].0 > w[0].0 && w[1].1 > w[0].1, "{worst:?}");
    }
}

#[test]
fn generic_component_constraint_recovers_transport() {
    let mut cfg = load("elastography_bump.json");
    cfg.study = Study::Single;
    cfg.grid.shape = vec![65, 65];
    cfg.coefficients.b = Some(vec!["0.2*y".into(), "0.1".into()]);
    for constraint in [
        ConstraintConfig::Divergence(None),
        ConstraintConfig::Component { axis: 1, value: None },
    ] {
        cfg.modality = ModalityConfig::Generic { d: "1 + 0.3*x*y".into(), constraint: constraint.clone() };
        let (report, _) = run_single(&cfg, false).unwrap();
        let row = report.metrics.iter().find(|q| q.quantity == "ainvb").unwrap();
        assert!(row.metrics.c0 < 2e-2, "{constraint:?}: {:?}", row.metrics);
        let ratio = report.metrics.iter().find(|q| q.quantity == "ratio").unwrap();
        assert!(ratio.metrics.rel_c0 < 1e-2, "{constraint:?}: {:?}", ratio.metrics);
    }
}

#[test]
fn qtat_without_real_a_is_refused() {
    let mut cfg = load("qtat.json");
    cfg.grid.shape = vec![17, 17];
    cfg.modality = ModalityConfig::Qtat { gamma: "1".into(), a_real: false };
    assert!(run_single(&cfg, false).is_err());
}
