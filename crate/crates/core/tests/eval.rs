use cupid::domain::{FeatureSchema, MatchType, Split};
use cupid::eval::{self, auroc, ks_distance, nearest_rank, skewness, Delay, EvalReport, Predictions};
use cupid::model::{CupidModel, ModelConfig};
use cupid::training::{self, Corpus, TrainingConfig};
use cupid::worldsim::{generate_dataset, WorldConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fraction of positive/negative pairs ranked correctly, ties counting half.
fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut hits, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    hits += 1.0;
                } else if scores[i] == scores[j] {
                    hits += 0.5;
                }
            }
        }
    }
    hits / pairs
}

#[test]
fn random_scores_give_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let s: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
    let l: Vec<bool> = (0..10_000).map(|_| rng.random_bool(0.3)).collect();
    let a = auroc(&s, &l).unwrap();
    assert!((a - 0.5).abs() <= 0.02, "{a}");
    assert_eq!(auroc(&vec![1.0; 100], &l[..100]).unwrap(), 0.5);
    assert!(auroc(&[1.0, 2.0], &[true, true]).is_err());
}

fn fake(log_true: Vec<f64>, log_pred: Vec<f64>) -> Predictions {
    let n = log_true.len();
    let types = [MatchType::WarmWarm, MatchType::WarmCold, MatchType::ColdCold];
    Predictions {
        true_ms: log_true.iter().map(|l| l.exp_m1()).collect(),
        pred_ms: log_pred.iter().map(|l| l.exp_m1()).collect(),
        raw_pred: log_pred.iter().map(|l| l.exp_m1()).collect(),
        log_true,
        log_pred,
        match_type: (0..n).map(|i| types[i % 3]).collect(),
    }
}

#[test]
fn oracle_predictions_are_perfect() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t: Vec<f64> = (0..600).map(|_| rng.random_range(5.0..13.0)).collect();
    let r = EvalReport::from_predictions(&fake(t.clone(), t), 20_000.0, Delay::Live).unwrap();
    for seg in &r.segments {
        assert_eq!(seg.mse, Some(0.0), "{}", seg.segment);
        assert_eq!(seg.auroc, Some(1.0), "{}", seg.segment);
    }
    let n: usize = r.segments[1..].iter().map(|s| s.count).sum();
    assert_eq!(n, r.segment("Entire").count);
}

#[test]
fn percentile_and_distribution_helpers() {
    let xs: Vec<f64> = (1..=10).map(f64::from).collect();
    assert_eq!(nearest_rank(&xs, 50.0).unwrap(), 5.0);
    assert_eq!(nearest_rank(&xs, 99.0).unwrap(), 10.0);
    assert_eq!(nearest_rank(&xs, 10.0).unwrap(), 1.0);
    assert!(nearest_rank(&xs, 0.0).is_err());
    assert_eq!(ks_distance(&xs, &xs).unwrap(), 0.0);
    assert_eq!(ks_distance(&xs, &[100.0, 200.0]).unwrap(), 1.0);
    assert!(skewness(&[-2.0, -1.0, 0.0, 1.0, 2.0]).unwrap().abs() < 1e-12);
    assert!(skewness(&[0.0, 0.0, 0.0, 10.0]).unwrap() > 0.0);
}

fn trained() -> (CupidModel, Corpus, f64) {
    let world = WorldConfig {
        num_users: 160,
        horizon_ms: 10 * 3_600_000,
        ..WorldConfig::default()
    };
    let ds = generate_dataset(&world, FeatureSchema::default()).unwrap();
    let corpus = Corpus::new(&ds).unwrap();
    let thr = eval::quality_threshold(&ds).unwrap();
    let cfg = ModelConfig {
        dim: 8,
        proj_dim: 4,
        hidden: vec![8],
        ..ModelConfig::default()
    };
    let mut m = CupidModel::new(cfg, ds.schema, 0).unwrap();
    let t = TrainingConfig {
        phase1_epochs: 2,
        phase2_epochs: 2,
        early_stopping: false,
        ..TrainingConfig::default()
    };
    training::train_two_phase(&mut m, &corpus, &t, thr, &mut Vec::new()).unwrap();
    (m, corpus, thr)
}

#[test]
fn sweep_reports_are_deterministic_and_consistent() {
    let (m, corpus, thr) = trained();
    let before = m.counter().get();
    let live = eval::evaluate(&m, &corpus, Split::Test, thr, Delay::Live).unwrap();
    assert_eq!(
        live,
        eval::evaluate(&m, &corpus, Split::Test, thr, Delay::Live).unwrap()
    );
    let sweep = eval::run_delay_sweep(&m, &corpus, Split::Test, thr, &eval::DEFAULT_DELAYS_MS).unwrap();
    assert_eq!(m.counter().get(), before);
    assert_eq!(sweep.len(), eval::DEFAULT_DELAYS_MS.len() + 1);
    assert_eq!(sweep[0], live);
    assert_eq!(sweep.last().unwrap().delay, "inf");
    for r in &sweep {
        let parts: usize = r.segments[1..].iter().map(|s| s.count).sum();
        assert_eq!(parts, r.segment("Entire").count);
        assert!(r.entire_mse().is_finite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    /// The rank formula equals the pairwise definition and is unchanged by
    /// a strictly increasing transform of the scores.
    #[test]
    fn auroc_matches_pairwise_and_is_rank_invariant(
        raw in prop::collection::vec((0u8..12, any::<bool>()), 4..60),
    ) {
        let scores: Vec<f64> = raw.iter().map(|(s, _)| f64::from(*s) / 4.0).collect();
        let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let a = auroc(&scores, &labels).unwrap();
        prop_assert!((a - pairwise_auroc(&scores, &labels)).abs() < 1e-12);
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        prop_assert_eq!(a, auroc(&exp, &labels).unwrap());
    }
}
