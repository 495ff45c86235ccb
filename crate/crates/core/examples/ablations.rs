//! The four ablation variants under one seed: full, no session states, no
//! second phase and a linear head.
//!
//! ```bash
//! cargo run --release --example ablations -- 3
//! ```

use cupid::domain::FeatureSchema;
use cupid::eval;
use cupid::model::ModelConfig;
use cupid::training::{Corpus, TrainingConfig};
use cupid::worldsim::{generate_dataset, WorldConfig};

fn main() -> cupid::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let world = WorldConfig {
        num_users: 400,
        seed,
        ..WorldConfig::default()
    };
    let ds = generate_dataset(&world, FeatureSchema::default())?;
    let corpus = Corpus::new(&ds)?;
    let thr = eval::quality_threshold(&ds)?;
    let cfg = TrainingConfig {
        phase1_epochs: 6,
        phase2_epochs: 5,
        seed,
        ..TrainingConfig::default()
    };
    let rows = eval::run_ablations(&ds, &corpus, &ModelConfig::default(), &cfg, thr)?;
    let labeled: Vec<(String, eval::EvalReport)> =
        rows.iter().map(|(v, r)| (v.label().to_string(), r.clone())).collect();
    print!("{}", eval::format_reports(&labeled));
    let best = rows
        .iter()
        .min_by(|a, b| a.1.entire_mse().total_cmp(&b.1.entire_mse()))
        .expect("four rows");
    println!("lowest entire MSE: {}", best.0.label());
    Ok(())
}
