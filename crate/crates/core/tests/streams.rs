//! Trajectory stream files: round trips, mirrors and malformed input.

use reworld::microworld::{
    random_condition, read_trajectories, simulate, trajectories_from_bytes, trajectories_to_bytes, write_trajectories, TaskKind,
    Trajectory, WorldConfig,
};
use reworld::{seed, Error};

fn rollouts(n: u64) -> Vec<Trajectory> {
    let world = WorldConfig::default();
    (0..n)
        .map(|i| {
            let mut rng = seed::rng(11, &[seed::stream::CONDITIONS, i]);
            let c = random_condition(&mut rng, i, Some(TaskKind::ALL[i as usize % 5]), &world);
            simulate(&c, 32, seed::derive(11, &[seed::stream::SIMULATE, i]), &world).unwrap()
        })
        .collect()
}

#[test]
fn streams_round_trip_at_storage_precision() {
    let trajs = rollouts(7);
    let bytes = trajectories_to_bytes(&trajs).unwrap();
    let back = trajectories_from_bytes(&bytes).unwrap();
    assert_eq!(back.len(), trajs.len());
    for (a, b) in trajs.iter().zip(&back) {
        assert_eq!(a.condition, b.condition);
        assert_eq!(a.n_frames(), b.n_frames());
        let (fa, fb) = (a.data(), b.data());
        assert_eq!(fa.len(), fb.len());
        for (x, y) in fa.iter().zip(fb) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0), "{x} vs {y}");
        }
    }
    // A second pass is lossless.
    assert_eq!(trajectories_to_bytes(&back).unwrap(), bytes);
}

#[test]
fn empty_streams_are_valid() {
    let bytes = trajectories_to_bytes(&[]).unwrap();
    assert!(trajectories_from_bytes(&bytes).unwrap().is_empty());
}

#[test]
fn files_carry_an_optional_json_mirror() {
    let dir = tempfile::tempdir().unwrap();
    let trajs = rollouts(3);
    let with = dir.path().join("a.rwts");
    let without = dir.path().join("b.rwts");
    write_trajectories(&with, &trajs, true).unwrap();
    write_trajectories(&without, &trajs, false).unwrap();
    assert!(dir.path().join("a.json").exists());
    assert!(!dir.path().join("b.json").exists());
    assert_eq!(read_trajectories(&with).unwrap(), read_trajectories(&without).unwrap());
    assert!(matches!(read_trajectories(&dir.path().join("missing.rwts")), Err(Error::Io { .. })));
}

#[test]
fn malformed_streams_are_rejected() {
    let bytes = trajectories_to_bytes(&rollouts(2)).unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(trajectories_from_bytes(&bad_magic), Err(Error::Format(_))));
    let mut bad_version = bytes.clone();
    bad_version[4] = 0xff;
    assert!(matches!(trajectories_from_bytes(&bad_version), Err(Error::Format(_))));
    assert!(matches!(trajectories_from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(trajectories_from_bytes(&trailing), Err(Error::Format(_))));
    let mut overcount = bytes;
    overcount[6] = 3;
    assert!(matches!(trajectories_from_bytes(&overcount), Err(Error::Format(_))));
}
