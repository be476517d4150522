use std::fs;

use normflow::experiments::{preset, run_experiment_with_threads, write_outputs, Engine, ExperimentConfig};

fn bundle(cfg: &ExperimentConfig, threads: usize) -> Vec<(String, Vec<u8>)> {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment_with_threads(cfg, threads).unwrap();
    let mut files: Vec<_> = write_outputs(&out, dir.path())
        .unwrap()
        .into_iter()
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn small(name: &str) -> ExperimentConfig {
    let mut cfg = preset(name).unwrap();
    cfg.n = 24;
    cfg.d = if cfg.n_heads == 12 { 48 } else { 32 };
    cfg.runs = 16;
    cfg.with_horizon(5.0)
}

#[test]
fn thread_count_does_not_change_bytes() {
    for name in ["fig3", "appx_e3", "appx_e7"] {
        let cfg = small(name);
        let one = bundle(&cfg, 1);
        assert_eq!(one, bundle(&cfg, 8), "{name}");
        assert_eq!(one, bundle(&cfg, 3), "{name}");
    }
}

#[test]
fn continuous_engine_is_deterministic() {
    let mut cfg = small("appx_e4");
    cfg.engine = Engine::Continuous;
    cfg.integrator.dt = 0.05;
    let cfg = cfg.with_horizon(2.0);
    assert_eq!(bundle(&cfg, 1), bundle(&cfg, 8));
}

#[test]
fn seed_changes_output() {
    let cfg = small("fig3");
    let mut other = cfg.clone();
    other.seed += 1;
    assert_ne!(bundle(&cfg, 2), bundle(&other, 2));
}
