use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xdwaf_core::io::write_jsonl;
use xdwaf_core::pipeline::{Pipeline, Preset, RunConfig};
use xdwaf_core::synth::{grammars, sample_splits, Record, SplitSize, SyntheticSpec};
use xdwaf_core::Error;

struct Files {
    _dir: tempfile::TempDir,
    aux: Vec<PathBuf>,
    train: PathBuf,
    test: PathBuf,
}

fn files(seed: u64) -> Files {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        sizes: vec![SplitSize { train: 600, test: 200 }; 4],
        overlap: 0.5,
        identical_grammars: false,
        attack_rate: 0.05,
        poison_ratio: 0.0,
        seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut paths = Vec::new();
    let mut test = PathBuf::new();
    for (i, g) in grammars(&spec).iter().enumerate() {
        let c = sample_splits(g, spec.sizes[i], 0.05, 0.0, &mut rng).unwrap();
        let p = dir.path().join(format!("{}.jsonl", c.domain_id));
        write_jsonl(&p, &c.train).unwrap();
        paths.push(p);
        test = dir.path().join("test.jsonl");
        write_jsonl(&test, &c.test).unwrap();
    }
    let train = paths.pop().unwrap();
    Files {
        _dir: dir,
        aux: paths,
        train,
        test,
    }
}

fn config(f: &Files, artifacts: &Path) -> RunConfig {
    let mut cfg = RunConfig::new(Preset::Desk, artifacts.to_path_buf());
    cfg.auxiliary = f.aux.clone();
    cfg.target_train = f.train.clone();
    cfg.target_test = f.test.clone();
    cfg.seed = 1;
    cfg.hyper.meta.max_meta_iters = 20;
    cfg.hyper.adapt.steps = 20;
    cfg
}

fn stage_of(e: &Error) -> Option<&'static str> {
    match e {
        Error::Stage { stage, .. } => Some(stage),
        _ => None,
    }
}

#[test]
fn missing_target_strategy_aborts_in_preprocess() {
    let f = files(3);
    let art = tempfile::tempdir().unwrap();
    let p = Pipeline::new(config(&f, art.path()), true);
    for path in &f.aux {
        p.preprocess_file(path).unwrap();
    }
    let err = p.align().unwrap_err();
    assert_eq!(stage_of(&err), Some("preprocess"), "{err}");
    assert!(err.to_string().contains("preprocess"));
}

#[test]
fn run_writes_metrics_and_resume_reuses_artifacts() {
    let f = files(4);
    let art = tempfile::tempdir().unwrap();
    let first = Pipeline::new(config(&f, art.path()), false).run().unwrap();
    assert_eq!(first.meta_iterations, 20);
    let m = &first.metrics;
    assert_eq!(m.tp + m.fp + m.fn_ + m.tn, 200);
    let universal = std::fs::read(art.path().join("universal.json")).unwrap();

    let second = Pipeline::new(config(&f, art.path()), true).run().unwrap();
    assert_eq!(serde_json::to_string(&first).unwrap(), serde_json::to_string(&second).unwrap());
    assert_eq!(std::fs::read(art.path().join("universal.json")).unwrap(), universal);
}

#[test]
fn leaked_test_records_abort_the_run() {
    let f = files(5);
    let mut train: Vec<Record> = xdwaf_core::io::read_jsonl(&f.train).unwrap();
    let test: Vec<Record> = xdwaf_core::io::read_jsonl(&f.test).unwrap();
    train.push(test[0].clone());
    write_jsonl(&f.train, &train).unwrap();
    let art = tempfile::tempdir().unwrap();
    let err = Pipeline::new(config(&f, art.path()), false).run().unwrap_err();
    assert_eq!(stage_of(&err), Some("audit"));
    assert!(matches!(err, Error::Stage { ref source, .. } if matches!(**source, Error::LabelLeakage(n) if n >= 1)));
}

#[test]
fn invalid_hyperparameters_abort_in_config() {
    let f = files(6);
    let art = tempfile::tempdir().unwrap();
    let mut cfg = config(&f, art.path());
    cfg.hyper.quantile = 1.0;
    let err = Pipeline::new(cfg, false).run().unwrap_err();
    assert_eq!(stage_of(&err), Some("config"));
}
