//! Two-phase training versus the joint baseline on a world where every
//! session has the same length, with exact transformer-forward accounting.
//!
//! ```bash
//! cargo run --release --example two_phase_training
//! ```

use cupid::domain::FeatureSchema;
use cupid::eval;
use cupid::model::{CupidModel, ModelConfig};
use cupid::training::{self, reduction_factor, Corpus, TrainingConfig};
use cupid::worldsim::{uniform_dataset, WorldConfig};

fn main() -> cupid::Result<()> {
    let session_len = 16;
    let world = WorldConfig {
        num_users: 64,
        seed: 3,
        ..WorldConfig::default()
    };
    let ds = uniform_dataset(&world, FeatureSchema::default(), session_len)?;
    let corpus = Corpus::new(&ds)?;
    let thr = eval::quality_threshold(&ds)?;
    let model_cfg = ModelConfig {
        dim: 16,
        hidden: vec![32, 16],
        ..ModelConfig::default()
    };
    let cfg = TrainingConfig {
        joint_epochs: 2,
        phase1_epochs: 2,
        phase2_epochs: 2,
        early_stopping: false,
        ..TrainingConfig::default()
    };

    let mut joint = CupidModel::new(model_cfg.clone(), ds.schema, 0)?;
    let j = training::train_joint_baseline(&mut joint, &corpus, &cfg, thr, &mut Vec::new())?;

    let mut log = Vec::new();
    let mut two = CupidModel::new(model_cfg, ds.schema, 0)?;
    let (p1, p2) = training::train_two_phase(&mut two, &corpus, &cfg, thr, &mut log)?;
    for row in &log {
        println!(
            "{:<6} epoch {} loss {:.4} forwards so far {}",
            row.phase, row.epoch, row.train_loss, row.transformer_forward_count
        );
    }

    let records = ds.events().len() as u64;
    let sessions = corpus.sessions.len() as u64;
    println!("records |D| = {records}, sessions = {sessions}");
    println!("joint:     {} forwards (2 N |D| = {})", j.forwards, 2 * 2 * records);
    println!(
        "two-phase: {} + {} forwards ((N1 + 2) sessions = {})",
        p1.forwards,
        p2.forwards,
        4 * sessions
    );
    println!(
        "measured ratio {:.3}, closed form {:.3}",
        j.forwards as f64 / (p1.forwards + p2.forwards) as f64,
        reduction_factor(2, 2, session_len as f64)
    );
    Ok(())
}
