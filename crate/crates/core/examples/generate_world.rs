//! Simulates a small social-discovery world under random pairing and writes
//! the logged matches to disk.
//!
//! ```bash
//! cargo run --release --example generate_world -- /tmp/cupid-world
//! ```

use std::path::PathBuf;

use cupid::domain::{FeatureSchema, MatchType, Split};
use cupid::worldsim::{generate_dataset, WorldConfig};

fn main() -> cupid::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("cupid-world"), PathBuf::from);
    let world = WorldConfig {
        num_users: 400,
        seed: 11,
        ..WorldConfig::default()
    };
    let ds = generate_dataset(&world, FeatureSchema::default())?;
    println!(
        "{} physical matches, {} mirrored records",
        ds.matches().len(),
        ds.events().len()
    );

    let sessions = ds.sessions()?;
    let mean_len = sessions.iter().map(|s| s.len()).sum::<usize>() as f64 / sessions.len() as f64;
    println!("{} sessions, mean length {mean_len:.2}", sessions.len());

    for split in [Split::Train, Split::Validation, Split::Test] {
        let mut counts = [0usize; 3];
        for r in ds.records_in(split) {
            let t = MatchType::of(ds.classify_user(r.self_id), ds.classify_user(r.counterpart));
            counts[t as usize] += 1;
        }
        println!(
            "{split:?}: warm-warm {} warm-cold {} cold-cold {}",
            counts[0], counts[1], counts[2]
        );
    }

    ds.write_dir(&dir)?;
    println!("written to {}", dir.display());
    Ok(())
}
