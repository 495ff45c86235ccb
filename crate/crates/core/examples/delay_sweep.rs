//! Trains the full model and two baselines on a mid-sized world, then
//! evaluates the full model with increasingly stale session states.
//!
//! ```bash
//! cargo run --release --example delay_sweep
//! ```

use cupid::domain::{FeatureSchema, Split};
use cupid::eval::{self, Delay, Variant, DEFAULT_DELAYS_MS};
use cupid::model::ModelConfig;
use cupid::training::{Corpus, TrainingConfig};
use cupid::worldsim::{generate_dataset, WorldConfig};

fn main() -> cupid::Result<()> {
    let world = WorldConfig {
        num_users: 400,
        ..WorldConfig::default()
    };
    let ds = generate_dataset(&world, FeatureSchema::default())?;
    let corpus = Corpus::new(&ds)?;
    let thr = eval::quality_threshold(&ds)?;
    let base = ModelConfig::default();
    let cfg = TrainingConfig {
        phase1_epochs: 6,
        phase2_epochs: 5,
        ..TrainingConfig::default()
    };

    let mut rows = Vec::new();
    for v in [Variant::NoSession, Variant::SessionStats] {
        let m = eval::train_variant(v, &base, ds.schema, &corpus, &cfg, thr, &mut Vec::new())?;
        rows.push((
            v.label().to_string(),
            eval::evaluate(&m, &corpus, Split::Test, thr, Delay::Live)?,
        ));
    }
    let full = eval::train_variant(Variant::Full, &base, ds.schema, &corpus, &cfg, thr, &mut Vec::new())?;
    for r in eval::run_delay_sweep(&full, &corpus, Split::Test, thr, &DEFAULT_DELAYS_MS)? {
        rows.push(("full".to_string(), r));
    }
    print!("{}", eval::format_reports(&rows));
    Ok(())
}
