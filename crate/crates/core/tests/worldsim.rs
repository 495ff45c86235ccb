use std::collections::BTreeSet;

use cupid::domain::{FeatureSchema, Split};
use cupid::eval::skewness;
use cupid::worldsim::{generate_dataset, run_online, OnlineConfig, RandomPolicy, WorldConfig, WorldState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> WorldConfig {
    WorldConfig {
        num_users: 150,
        horizon_ms: 8 * 3_600_000,
        mean_offline_ms: 1_800_000.0,
        ..WorldConfig::default()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn null_world_without_noise_has_one_duration() {
    let cfg = WorldConfig {
        sigma: 0.0,
        alpha: 0.0,
        ..small()
    };
    let world = WorldState::new(cfg, &FeatureSchema::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d: BTreeSet<u64> = (1..40).map(|j| world.true_duration(0, j, &mut rng).unwrap()).collect();
    assert_eq!(d.len(), 1);
    let expected = (1000.0 * 3f64.exp()).round() as u64;
    assert_eq!(d.into_iter().next(), Some(expected));
}

#[test]
fn noisy_durations_are_right_skewed() {
    let world = WorldState::new(small(), &FeatureSchema::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xs: Vec<f64> = (0..100_000)
        .map(|k| world.true_duration(k % 50, 50 + k % 97, &mut rng).unwrap() as f64)
        .collect();
    assert!(skewness(&xs).unwrap() > 0.0);
}

#[test]
fn drift_rules() {
    let schema = FeatureSchema::default();
    let still = WorldConfig {
        drift_rate: 0.0,
        ..small()
    };
    let mut w = WorldState::new(still, &schema).unwrap();
    let before = w.users[3].effective.clone();
    w.drift(3, 4, 10_000_000);
    assert_eq!(w.users[3].effective, before);

    let mut w = WorldState::new(small(), &schema).unwrap();
    let same = w.users[0].effective.clone();
    w.users[1].effective = same.clone();
    w.drift(0, 1, 10_000_000);
    assert_eq!(w.users[0].effective, same);

    let eta = small().drift_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in 0..200 {
        let (i, j) = (k % 30, 30 + k % 40);
        let y = w.true_duration(i, j, &mut rng).unwrap();
        let (vi, vj) = (w.users[i].effective.clone(), w.users[j].effective.clone());
        w.drift(i, j, y);
        for (old, new) in [(vi, &w.users[i].effective), (vj, &w.users[j].effective)] {
            let angle = dot(&old, new).clamp(-1.0, 1.0).acos();
            assert!(angle <= eta + 1e-9, "moved {angle}");
        }
    }
}

#[test]
fn same_seed_writes_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    for run in ["a", "b"] {
        generate_dataset(&small(), FeatureSchema::default())
            .unwrap()
            .write_dir(&dir.path().join(run))
            .unwrap();
    }
    for f in ["events.jsonl", "users.csv", "meta.json"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn cold_fraction_is_respected() {
    let ds = generate_dataset(&WorldConfig::default(), FeatureSchema::default()).unwrap();
    let train = ds.training_users();
    let test: BTreeSet<_> = ds.records_in(Split::Test).map(|r| r.self_id).collect();
    let cold = test.iter().filter(|u| !train.contains(u)).count() as f64 / test.len() as f64;
    assert!((cold - 0.1).abs() <= 0.03, "cold share {cold}");
}

#[test]
fn sessions_are_time_ordered() {
    let ds = generate_dataset(&small(), FeatureSchema::default()).unwrap();
    for s in ds.sessions().unwrap() {
        assert!(s.records().windows(2).all(|w| w[0].end_time_ms <= w[1].end_time_ms));
    }
}

#[test]
fn switchback_windows_tile_the_horizon() {
    let world = small();
    let online = OnlineConfig {
        window_ms: 25 * 60_000,
        ..OnlineConfig::default()
    };
    let (mut a, mut b) = (RandomPolicy, RandomPolicy);
    let report = run_online(&world, FeatureSchema::default(), &online, vec![&mut a, &mut b]).unwrap();
    let expected = world.horizon_ms.div_ceil(online.window_ms) as usize;
    assert_eq!(report.windows.len(), expected);
    for (k, w) in report.windows.iter().enumerate() {
        assert_eq!(w.window, k);
    }
    assert_eq!(
        report.arms.iter().map(|a| a.windows).sum::<usize>(),
        report.windows.iter().filter(|w| w.matches > 0).count()
    );
}
