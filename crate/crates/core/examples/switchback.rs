//! Online switchback comparison of a trained model policy against random
//! pairing, in the default world and in the null world where pairing cannot
//! matter.
//!
//! ```bash
//! cargo run --release --example switchback
//! ```

use std::sync::Arc;

use cupid::domain::FeatureSchema;
use cupid::eval::{self, Variant};
use cupid::model::ModelConfig;
use cupid::training::{Corpus, TrainingConfig};
use cupid::worldsim::{generate_dataset, run_online, ModelPolicy, OnlineConfig, RandomPolicy, WorldConfig};

fn main() -> cupid::Result<()> {
    let world = WorldConfig {
        num_users: 400,
        ..WorldConfig::default()
    };
    let schema = FeatureSchema::default();
    let ds = generate_dataset(&world, schema)?;
    let corpus = Corpus::new(&ds)?;
    let thr = eval::quality_threshold(&ds)?;
    let cfg = TrainingConfig {
        phase1_epochs: 6,
        phase2_epochs: 5,
        ..TrainingConfig::default()
    };
    let model = eval::train_variant(
        Variant::Full,
        &ModelConfig::default(),
        schema,
        &corpus,
        &cfg,
        thr,
        &mut Vec::new(),
    )?;
    let model = Arc::new(model);

    let online = OnlineConfig {
        long_threshold_ms: thr,
        ..OnlineConfig::default()
    };
    for alpha in [world.alpha, 0.0] {
        let w = WorldConfig { alpha, ..world.clone() };
        let mut cupid = ModelPolicy::new("cupid", Arc::clone(&model), online.compute_delay_ms)?;
        let mut random = RandomPolicy;
        let report = run_online(&w, schema, &online, vec![&mut cupid, &mut random])?;
        println!("alpha = {alpha}\n{}", report.summary());
    }
    Ok(())
}
