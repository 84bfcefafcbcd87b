mod common;

use std::fs;

use flap::files::{Checkpoint, TaskSetFile, TrainerSnapshot, CHECKPOINT_VERSION};
use flap::flap_core::meta::MetaTrainer;
use flap::FlapError;

use common::tiny;

#[test]
fn checkpoint_round_trip_preserves_everything() {
    let mut t = MetaTrainer::new(tiny()).unwrap();
    t.train().unwrap();
    let ck = Checkpoint::from_trainer(&t);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.memory(), ck.memory());
    assert_eq!(
        back.memory().total,
        back.memory().policy_params + back.memory().model_params
    );
}

#[test]
fn checkpoint_from_a_newer_build_is_rejected() {
    let t = MetaTrainer::new(tiny()).unwrap();
    let mut ck = Checkpoint::from_trainer(&t);
    ck.format_version = CHECKPOINT_VERSION + 1;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    ck.save(&path).unwrap();
    let err = Checkpoint::load(&path).unwrap_err();
    assert!(matches!(err, FlapError::Version { found, .. } if found == CHECKPOINT_VERSION + 1));
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn inconsistent_checkpoint_is_rejected() {
    let t = MetaTrainer::new(tiny()).unwrap();
    let mut ck = Checkpoint::from_trainer(&t);
    ck.learner.policy.heads.pop();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    ck.save(&path).unwrap();
    assert!(matches!(
        Checkpoint::load(&path),
        Err(FlapError::CorruptCheckpoint { .. })
    ));

    let mut ck = Checkpoint::from_trainer(&t);
    ck.adapter.as_mut().unwrap().net.params_mut()[0] = f64::NAN;
    // NaN is not representable in JSON; serde_json writes null, which fails to parse.
    ck.save(&path).unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

#[test]
fn truncated_json_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    fs::write(&path, "{\"format_version\": 1, \"config\": {").unwrap();
    let err = Checkpoint::load(&path).unwrap_err();
    assert!(matches!(err, FlapError::Json { .. }));
    assert_eq!(err.exit_code(), 4);
    let missing = Checkpoint::load(&dir.path().join("nope.json")).unwrap_err();
    assert_eq!(missing.exit_code(), 3);
}

#[test]
fn task_set_round_trip() {
    let c = tiny();
    let f = TaskSetFile::new(c.family, c.seed, c.sample_tasks().unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tasks.json");
    f.save(&path).unwrap();
    assert_eq!(TaskSetFile::load(&path).unwrap(), f);
}

#[test]
fn resumed_snapshot_continues_bit_for_bit() {
    let mut straight = MetaTrainer::new(tiny()).unwrap();
    let all = straight.train().unwrap();

    let mut first = MetaTrainer::new(tiny()).unwrap();
    let mut records = vec![first.run_iteration().unwrap()];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("snap.json");
    TrainerSnapshot::save(&first, &path).unwrap();
    let mut resumed = TrainerSnapshot::load(&path).unwrap();
    records.extend(resumed.train().unwrap());

    assert_eq!(records, all);
    assert_eq!(resumed.learner, straight.learner);
    assert_eq!(resumed.adapter, straight.adapter);
}
