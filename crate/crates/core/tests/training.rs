use cupid::domain::{FeatureSchema, Split};
use cupid::eval::{self, Delay};
use cupid::model::{CupidModel, ModelConfig, FEATURE_PREFIX, SESSION_PREFIX};
use cupid::training::{self, mse_loss, reduction_factor, Corpus, TrainingConfig};
use cupid::worldsim::{generate_dataset, uniform_dataset, WorldConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        dim: 8,
        proj_dim: 4,
        hidden: vec![8],
        cat_dim: 2,
        ..ModelConfig::default()
    }
}

fn epochs(n1: usize, n2: usize, n: usize) -> TrainingConfig {
    TrainingConfig {
        phase1_epochs: n1,
        phase2_epochs: n2,
        joint_epochs: n,
        early_stopping: false,
        ..TrainingConfig::default()
    }
}

fn uniform(users: usize, len: usize) -> (cupid::domain::Dataset, Corpus) {
    let world = WorldConfig {
        num_users: users,
        seed: 5,
        ..WorldConfig::default()
    };
    let ds = uniform_dataset(&world, FeatureSchema::default(), len).unwrap();
    let corpus = Corpus::new(&ds).unwrap();
    (ds, corpus)
}

#[test]
fn phase_counts_follow_closed_forms() {
    let (ds, corpus) = uniform(24, 8);
    let sessions = corpus.sessions.len() as u64;
    assert_eq!(sessions, 24);
    assert_eq!(ds.events().len(), 24 * 8);
    for n2 in [1, 5] {
        let mut m = CupidModel::new(tiny_model(), ds.schema, 1).unwrap();
        let p1 = training::train_phase1(&mut m, &corpus, &epochs(3, n2, 1), 1e4, &mut Vec::new()).unwrap();
        assert_eq!(p1.forwards, 3 * sessions);
        let p2 = training::train_phase2(&mut m, &corpus, &epochs(3, n2, 1), 1e4, &mut Vec::new()).unwrap();
        assert_eq!(p2.forwards, 2 * sessions, "N2 = {n2}");
    }
}

#[test]
fn joint_count_is_two_per_record_per_epoch() {
    // 20 users with 5-match sessions: 50 physical matches, 100 records.
    let (ds, corpus) = uniform(20, 5);
    assert_eq!(ds.events().len(), 100);
    let mut a = CupidModel::new(tiny_model(), ds.schema, 1).unwrap();
    let s = training::train_joint_baseline(&mut a, &corpus, &epochs(1, 1, 10), 1e4, &mut Vec::new()).unwrap();
    assert_eq!(s.forwards, 2000);
    let mut b = CupidModel::new(tiny_model(), ds.schema, 1).unwrap();
    let t = training::train_joint_baseline(&mut b, &corpus, &epochs(1, 1, 10), 1e4, &mut Vec::new()).unwrap();
    assert_eq!(t.forwards, s.forwards);
}

#[test]
fn measured_ratio_matches_reduction_factor() {
    let (ds, corpus) = uniform(16, 4);
    let cfg = epochs(2, 2, 2);
    let mut joint = CupidModel::new(tiny_model(), ds.schema, 0).unwrap();
    let j = training::train_joint_baseline(&mut joint, &corpus, &cfg, 1e4, &mut Vec::new()).unwrap();
    let mut two = CupidModel::new(tiny_model(), ds.schema, 0).unwrap();
    let (p1, p2) = training::train_two_phase(&mut two, &corpus, &cfg, 1e4, &mut Vec::new()).unwrap();
    let ratio = j.forwards as f64 / (p1.forwards + p2.forwards) as f64;
    assert_eq!(ratio, reduction_factor(2, 2, 4.0));
    assert_eq!(reduction_factor(2, 2, 1.0), 1.0);
    assert!((reduction_factor(10, 10, 128.0) - 213.333_333).abs() < 1e-5);
    assert!((reduction_factor(10, 10, 32.0) - 53.333_333).abs() < 1e-5);
}

#[test]
fn phase2_leaves_embedders_untouched() {
    let (ds, corpus) = uniform(16, 6);
    let mut m = CupidModel::new(tiny_model(), ds.schema, 3).unwrap();
    training::train_phase1(&mut m, &corpus, &epochs(2, 3, 1), 1e4, &mut Vec::new()).unwrap();
    let before = (
        m.store.checksum_prefix(FEATURE_PREFIX),
        m.store.checksum_prefix(SESSION_PREFIX),
    );
    let head_before = m.store.checksum_prefix("head/");
    training::train_phase2(&mut m, &corpus, &epochs(2, 3, 1), 1e4, &mut Vec::new()).unwrap();
    assert_eq!(
        before,
        (
            m.store.checksum_prefix(FEATURE_PREFIX),
            m.store.checksum_prefix(SESSION_PREFIX)
        )
    );
    assert_ne!(head_before, m.store.checksum_prefix("head/"));
}

#[test]
fn tiny_problem_loss_decreases() {
    let (ds, corpus) = uniform(4, 1);
    let mut m = CupidModel::new(tiny_model(), ds.schema, 0).unwrap();
    let cfg = TrainingConfig {
        lr: 1e-2,
        ..epochs(60, 1, 1)
    };
    let mut log = Vec::new();
    training::train_phase1(&mut m, &corpus, &cfg, 1e4, &mut log).unwrap();
    assert!(log.last().unwrap().train_loss < log[0].train_loss);
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let (ds, corpus) = uniform(12, 4);
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for run in 0..2 {
        let mut m = CupidModel::new(tiny_model(), ds.schema, 8).unwrap();
        training::train_two_phase(&mut m, &corpus, &epochs(2, 2, 1), 1e4, &mut Vec::new()).unwrap();
        let p = dir.path().join(format!("run{run}.ckpt"));
        m.save(&p, serde_json::Value::Null).unwrap();
        bytes.push(std::fs::read(p).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn targets_only_see_strictly_earlier_matches() {
    let world = WorldConfig {
        num_users: 120,
        horizon_ms: 8 * 3_600_000,
        mean_offline_ms: 1_800_000.0,
        ..WorldConfig::default()
    };
    let ds = generate_dataset(&world, FeatureSchema::default()).unwrap();
    let corpus = Corpus::new(&ds).unwrap();
    corpus.check_causality().unwrap();
    for t in &corpus.targets {
        let rec = corpus.record(t);
        let own = &corpus.sessions[t.session].records()[..t.state];
        let other = &corpus.sessions[t.cp_session].records()[..t.cp_state];
        assert!(own.iter().chain(other).all(|r| r.end_time_ms <= rec.start_time_ms()));
    }
}

#[test]
fn second_phase_improves_validation_mse() {
    let world = WorldConfig {
        num_users: 200,
        horizon_ms: 12 * 3_600_000,
        ..WorldConfig::default()
    };
    let ds = generate_dataset(&world, FeatureSchema::default()).unwrap();
    let corpus = Corpus::new(&ds).unwrap();
    let thr = eval::quality_threshold(&ds).unwrap();
    let mut m = CupidModel::new(ModelConfig::default(), ds.schema, 0).unwrap();
    let cfg = epochs(4, 10, 1);
    training::train_phase1(&mut m, &corpus, &cfg, thr, &mut Vec::new()).unwrap();
    let after1 = eval::evaluate(&m, &corpus, Split::Validation, thr, Delay::Live)
        .unwrap()
        .entire_mse();
    training::train_phase2(&mut m, &corpus, &cfg, thr, &mut Vec::new()).unwrap();
    let after2 = eval::evaluate(&m, &corpus, Split::Validation, thr, Delay::Live)
        .unwrap()
        .entire_mse();
    assert!(after2 <= after1, "phase 2 {after2} vs phase 1 {after1}");
}

#[test]
fn mse_matches_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let p: Vec<f64> = (0..5000).map(|_| rng.random_range(-50.0..50.0)).collect();
    let t: Vec<f64> = (0..5000).map(|_| rng.random_range(-50.0..50.0)).collect();
    let sq: Vec<f64> = p.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).collect();
    let mut sorted = sq.clone();
    sorted.sort_by(f64::total_cmp);
    let oracle = sorted.iter().sum::<f64>() / sq.len() as f64;
    assert!((mse_loss(&p, &t).unwrap() - oracle).abs() <= 1e-12 * oracle);
}
