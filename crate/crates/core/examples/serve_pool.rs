//! Serving path: session updates land in the embedding memory through a
//! background worker while the pool is scored from committed states only.
//!
//! ```bash
//! cargo run --release --example serve_pool
//! ```

use std::sync::Arc;

use cupid::domain::{Demographics, FeatureVector, MatchRecord, RollingStats, Session, UserId};
use cupid::engine::{pair_pool, score_pool, AsyncUpdater, DelayConfig, EmbeddingMemory, PoolMember, UpdateJob};
use cupid::model::{CupidModel, ModelConfig};

fn features(user: u32, matches: u32) -> FeatureVector {
    FeatureVector {
        demographics: Demographics {
            gender: user % 2,
            country: user % 5,
        },
        stats: RollingStats {
            match_count: matches,
            ..RollingStats::default()
        },
    }
}

fn main() -> cupid::Result<()> {
    // Untrained weights are enough to show the mechanics; see
    // `two_phase_training` for fitting a model.
    let mut model = CupidModel::new(ModelConfig::default(), Default::default(), 5)?;
    model.state.phase2_done = true;
    let model = Arc::new(model);
    let memory = Arc::new(EmbeddingMemory::new(4));
    let updater = AsyncUpdater::start(2, 1024, Arc::clone(&model), Arc::clone(&memory));

    let pool: Vec<PoolMember> = (0..6)
        .map(|u| PoolMember {
            user: UserId(u),
            features: features(u, 0),
        })
        .collect();

    // Users 0..3 each finished two chats; their sessions are re-encoded off
    // the request path.
    for u in 0..3u32 {
        let records = (0..2u64)
            .map(|k| MatchRecord {
                self_id: UserId(u),
                counterpart: UserId(100 + u * 2 + k as u32),
                duration_ms: 20_000 + 40_000 * k,
                end_time_ms: 60_000 * (k + 1),
                self_features: features(u, k as u32),
                counterpart_features: features(7, 0),
            })
            .collect();
        updater.submit(UpdateJob {
            user: UserId(u),
            session: Session::new(UserId(u), records)?,
            enqueue_ms: 120_000,
            compute_delay_ms: Some(250),
        });
    }
    updater.flush();

    let empty = model.empty_state()?;
    let scores = score_pool(&model, &memory, &empty, &pool, 130_000, DelayConfig::default())?;
    for i in 0..pool.len() {
        let row: Vec<String> = scores.row(i).iter().map(|v| format!("{v:>8.2}")).collect();
        println!("user {i}: {}", row.join(" "));
    }
    let pairing = pair_pool(&scores)?;
    println!("pairs {:?}, unmatched {:?}", pairing.pairs, pairing.unmatched);

    // With t' = 2 s a state is visible once its newest record is 2 s old.
    let delay = DelayConfig { t_prime_ms: 2_000 };
    for now in [120_300, 122_500] {
        let seen = memory.lookup(UserId(0), now, delay).map(|c| c.computed_upto_ms);
        println!("user 0 delayed lookup at {now} ms: {seen:?}");
    }

    let stats = updater.shutdown()?;
    println!("{stats:?}");
    Ok(())
}
