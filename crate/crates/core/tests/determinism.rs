use gfcsim::harness::dataset::{generate_dataset, write_dataset, SweepConfig};
use gfcsim::harness::scenario::ScenarioSpec;
use gfcsim::network::{run_scenario, ControllerKind};
use gfcsim::pinn::train::{train, TrainConfig};
use std::path::Path;
use std::sync::Arc;

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn fixed_seeds_reproduce_data_training_and_runs() {
    let sweep = SweepConfig {
        horizon: 1.2,
        ..SweepConfig::default()
    };
    let a = generate_dataset(&sweep, 3, 5).unwrap();
    let b = generate_dataset(&sweep, 3, 5).unwrap();
    assert_eq!(a.set, b.set);
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(da.path(), &a).unwrap();
    write_dataset(db.path(), &b).unwrap();
    assert_eq!(read_dir_bytes(da.path()), read_dir_bytes(db.path()));

    let cfg = TrainConfig {
        iterations: 60,
        hidden: vec![16, 16],
        batches_per_epoch: 4,
        heldout_fraction: 0.34,
        log_every: 10,
        ..TrainConfig::default()
    };
    let ta = train(&a.set, &cfg, None).unwrap();
    let tb = train(&b.set, &cfg, None).unwrap();
    assert_eq!(ta.log, tb.log);
    assert_eq!(ta.model, tb.model);
    assert_eq!(serde_json::to_string(&ta.model).unwrap(), serde_json::to_string(&tb.model).unwrap());

    let spec = ScenarioSpec::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")).unwrap();
    let net = spec.network().unwrap();
    let kind = ControllerKind::Pinn(Arc::new(ta.model));
    let ra = run_scenario(&spec, &net, &kind).unwrap();
    let rb = run_scenario(&spec, &net, &kind).unwrap();
    assert_eq!(ra, rb);
    let rd = run_scenario(&spec, &net, &ControllerKind::Droop).unwrap();
    assert_eq!(rd, run_scenario(&spec, &net, &ControllerKind::Droop).unwrap());
}
