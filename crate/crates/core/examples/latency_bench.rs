//! Scoring latency when every request re-encodes the pool's sessions versus
//! reading states committed by the update worker.
//!
//! ```bash
//! cargo run --release --example latency_bench
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cupid::engine::{bench_latency, ServeMode};
use cupid::model::{CupidModel, ModelConfig};

fn main() -> cupid::Result<()> {
    let mut model = CupidModel::new(ModelConfig::default(), Default::default(), 0)?;
    model.state.phase2_done = true;
    let sizes = [16, 64, 256];
    let mut sync_p99 = Vec::new();
    for mode in [ServeMode::Sync, ServeMode::Async] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for row in bench_latency(&model, mode, &sizes, 50, 32, &mut rng)? {
            let vs = match mode {
                ServeMode::Sync => {
                    sync_p99.push(row.p99_us);
                    String::new()
                }
                ServeMode::Async => {
                    let s = sync_p99[sizes.iter().position(|&n| n == row.pool_size).expect("same sizes")];
                    format!("  ({:+.1}% vs sync)", 100.0 * (row.p99_us / s - 1.0))
                }
            };
            println!(
                "{:<5} pool {:>3}: p50 {:>9.1} us  p90 {:>9.1} us  p99 {:>9.1} us{vs}",
                row.mode, row.pool_size, row.p50_us, row.p90_us, row.p99_us
            );
        }
    }
    Ok(())
}
