//! Real-time serving core: embedding memory, asynchronous session updates,
//! pool scoring and pairing, and latency benchmarks.
//!
//! The scoring path only reads the memory; session encoding happens in
//! update workers, either on background threads or, for reproducible runs,
//! in a deterministic event-queue updater driven by a simulated clock.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{FeatureVector, MatchRecord, Session, UserId};
use crate::error::{Error, Result};
use crate::eval::nearest_rank;
use crate::model::CupidModel;
use crate::numerics::Tensor;

/// One committed session representation.
#[derive(Clone, Debug, PartialEq)]
pub struct Committed {
    pub rep: Vec<f64>,
    /// End time of the newest record the representation has seen.
    pub computed_upto_ms: u64,
    pub commit_ms: u64,
}

/// Representation delay applied by lookups.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayConfig {
    pub t_prime_ms: u64,
}

/// Per-user committed session representations.
///
/// Readers clone an `Arc` to a finished commit, so they see either the old
/// or the new vector in full.
#[derive(Debug)]
pub struct EmbeddingMemory {
    slots: RwLock<HashMap<UserId, VecDeque<Arc<Committed>>>>,
    history: usize,
}

impl EmbeddingMemory {
    /// `history` commits are kept per user for delayed lookups.
    pub fn new(history: usize) -> Self {
        Self {
            slots: RwLock::new(HashMap::new()),
            history: history.max(1),
        }
    }

    /// Stores a representation. Returns false when a commit for the same
    /// snapshot end time already exists. Commit times must not go back.
    pub fn commit(&self, user: UserId, rep: Vec<f64>, computed_upto_ms: u64, commit_ms: u64) -> Result<bool> {
        let mut slots = self.slots.write().expect("memory lock poisoned");
        let slot = slots.entry(user).or_default();
        if let Some(last) = slot.back() {
            if commit_ms < last.commit_ms {
                return Err(Error::InvalidValue(format!(
                    "commit time for {user} went back from {} to {commit_ms}",
                    last.commit_ms
                )));
            }
            if slot.iter().any(|c| c.computed_upto_ms == computed_upto_ms) {
                return Ok(false);
            }
        }
        slot.push_back(Arc::new(Committed {
            rep,
            computed_upto_ms,
            commit_ms,
        }));
        if slot.len() > self.history {
            slot.pop_front();
        }
        Ok(true)
    }

    pub fn latest(&self, user: UserId) -> Option<Arc<Committed>> {
        self.slots
            .read()
            .expect("memory lock poisoned")
            .get(&user)?
            .back()
            .cloned()
    }

    /// Newest commit visible at `now_ms`: with a delay, only commits whose
    /// records all ended by `now_ms - t′`.
    pub fn lookup(&self, user: UserId, now_ms: u64, delay: DelayConfig) -> Option<Arc<Committed>> {
        let slots = self.slots.read().expect("memory lock poisoned");
        let slot = slots.get(&user)?;
        if delay.t_prime_ms == 0 {
            return slot.back().cloned();
        }
        let cutoff = now_ms.checked_sub(delay.t_prime_ms)?;
        slot.iter().rev().find(|c| c.computed_upto_ms <= cutoff).cloned()
    }

    /// Clears a user's commits, e.g. when a new visit starts.
    pub fn reset(&self, user: UserId) {
        self.slots.write().expect("memory lock poisoned").remove(&user);
    }

    pub fn len(&self) -> usize {
        self.slots.read().expect("memory lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A request to re-encode one user's session.
#[derive(Clone, Debug)]
pub struct UpdateJob {
    pub user: UserId,
    pub session: Session,
    pub enqueue_ms: u64,
    pub compute_delay_ms: Option<u64>,
}

impl UpdateJob {
    fn computed_upto(&self) -> u64 {
        self.session.records().last().map_or(0, |r| r.end_time_ms)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub submitted: u64,
    pub committed: u64,
    pub superseded: u64,
    /// Queued jobs evicted because the queue was at capacity.
    pub dropped: u64,
    pub max_queue_depth: u64,
}

/// Final session states for a batch of jobs in one packed pass.
fn encode_jobs(model: &CupidModel, jobs: &[&UpdateJob]) -> Result<Vec<Vec<f64>>> {
    if !model.config.use_session {
        return Ok(vec![model.zero_state(); jobs.len()]);
    }
    let seqs: Vec<&[MatchRecord]> = jobs.iter().map(|j| j.session.records()).collect();
    model.session.encode_final_many(&model.store, &seqs)
}

/// Single-threaded updater: jobs become visible `compute_delay_ms` after
/// submission, in simulated time.
#[derive(Debug)]
pub struct DeterministicUpdater {
    default_delay_ms: u64,
    queue: BTreeMap<(u64, u64), UpdateJob>,
    queued: HashMap<UserId, (u64, u64)>,
    seq: u64,
    pub stats: UpdateStats,
}

impl DeterministicUpdater {
    pub fn new(default_delay_ms: u64) -> Self {
        Self {
            default_delay_ms,
            queue: BTreeMap::new(),
            queued: HashMap::new(),
            seq: 0,
            stats: UpdateStats::default(),
        }
    }

    pub fn submit(&mut self, job: UpdateJob) {
        self.stats.submitted += 1;
        if let Some(old) = self.queued.remove(&job.user) {
            self.queue.remove(&old);
            self.stats.superseded += 1;
        }
        let ready = job.enqueue_ms + job.compute_delay_ms.unwrap_or(self.default_delay_ms);
        let key = (ready, self.seq);
        self.seq += 1;
        self.queued.insert(job.user, key);
        self.queue.insert(key, job);
        self.stats.max_queue_depth = self.stats.max_queue_depth.max(self.queue.len() as u64);
    }

    /// Time at which the next queued job completes.
    pub fn next_ready(&self) -> Option<u64> {
        self.queue.keys().next().map(|k| k.0)
    }

    /// Runs and commits every job ready by `now_ms`.
    pub fn advance(&mut self, now_ms: u64, model: &CupidModel, memory: &EmbeddingMemory) -> Result<usize> {
        let ready: Vec<(u64, u64)> = self.queue.range(..(now_ms + 1, 0)).map(|(k, _)| *k).collect();
        if ready.is_empty() {
            return Ok(0);
        }
        let jobs: Vec<UpdateJob> = ready
            .iter()
            .map(|k| self.queue.remove(k).expect("key listed"))
            .collect();
        for j in &jobs {
            self.queued.remove(&j.user);
        }
        let refs: Vec<&UpdateJob> = jobs.iter().collect();
        let reps = encode_jobs(model, &refs)?;
        let n = jobs.len();
        for ((job, rep), key) in jobs.into_iter().zip(reps).zip(ready) {
            if memory.commit(job.user, rep, job.computed_upto(), key.0)? {
                self.stats.committed += 1;
            }
        }
        Ok(n)
    }

    pub fn queue_depth(&self) -> usize {
        self.queue.len()
    }
}

#[derive(Debug, Default)]
struct Pending {
    capacity: usize,
    jobs: HashMap<UserId, UpdateJob>,
    order: VecDeque<UserId>,
    in_flight: std::collections::HashSet<UserId>,
    stats: UpdateStats,
    busy: usize,
    shutdown: bool,
}

/// Background update workers sharing one queue.
pub struct AsyncUpdater {
    state: Arc<(Mutex<Pending>, Condvar)>,
    handles: Vec<JoinHandle<Result<()>>>,
}

impl AsyncUpdater {
    /// `capacity` bounds the number of users with a queued job; beyond it
    /// the oldest queued job is evicted.
    pub fn start(workers: usize, capacity: usize, model: Arc<CupidModel>, memory: Arc<EmbeddingMemory>) -> Self {
        let pending = Pending {
            capacity: capacity.max(1),
            ..Pending::default()
        };
        let state: Arc<(Mutex<Pending>, Condvar)> = Arc::new((Mutex::new(pending), Condvar::new()));
        let handles = (0..workers.max(1))
            .map(|_| {
                let state = Arc::clone(&state);
                let model = Arc::clone(&model);
                let memory = Arc::clone(&memory);
                std::thread::spawn(move || worker_loop(&state, &model, &memory))
            })
            .collect();
        Self { state, handles }
    }

    /// Queues a job; an older queued job for the same user is dropped.
    pub fn submit(&self, job: UpdateJob) {
        let (lock, cv) = &*self.state;
        let mut p = lock.lock().expect("queue lock poisoned");
        p.stats.submitted += 1;
        let user = job.user;
        if p.jobs.insert(user, job).is_some() {
            p.stats.superseded += 1;
        } else {
            p.order.push_back(user);
            if p.jobs.len() > p.capacity {
                if let Some(oldest) = p.order.pop_front() {
                    p.jobs.remove(&oldest);
                    p.stats.dropped += 1;
                }
            }
        }
        p.stats.max_queue_depth = p.stats.max_queue_depth.max(p.jobs.len() as u64);
        cv.notify_all();
    }

    pub fn queue_depth(&self) -> usize {
        self.state.0.lock().expect("queue lock poisoned").jobs.len()
    }

    /// Blocks until every submitted job has been committed.
    pub fn flush(&self) {
        let (lock, cv) = &*self.state;
        let mut p = lock.lock().expect("queue lock poisoned");
        while !(p.jobs.is_empty() && p.busy == 0) {
            p = cv.wait(p).expect("queue lock poisoned");
        }
    }

    /// Drains the queue, stops the workers and returns the counters.
    pub fn shutdown(self) -> Result<UpdateStats> {
        self.flush();
        {
            let (lock, cv) = &*self.state;
            lock.lock().expect("queue lock poisoned").shutdown = true;
            cv.notify_all();
        }
        for h in self.handles {
            h.join()
                .map_err(|_| Error::InvalidValue("update worker panicked".into()))??;
        }
        let stats = self.state.0.lock().expect("queue lock poisoned").stats;
        Ok(stats)
    }
}

fn worker_loop(state: &(Mutex<Pending>, Condvar), model: &CupidModel, memory: &EmbeddingMemory) -> Result<()> {
    let (lock, cv) = state;
    loop {
        let job = {
            let mut p = lock.lock().expect("queue lock poisoned");
            loop {
                let next = p.order.iter().position(|u| !p.in_flight.contains(u));
                if let Some(pos) = next {
                    let user = p.order.remove(pos).expect("position in range");
                    let job = p.jobs.remove(&user).expect("ordered users have jobs");
                    p.in_flight.insert(user);
                    p.busy += 1;
                    break job;
                }
                if p.shutdown {
                    return Ok(());
                }
                p = cv.wait(p).expect("queue lock poisoned");
            }
        };
        let rep = encode_jobs(model, &[&job]);
        let commit_ms = job.enqueue_ms + job.compute_delay_ms.unwrap_or(0);
        let result = rep.and_then(|mut r| memory.commit(job.user, r.remove(0), job.computed_upto(), commit_ms));
        let mut p = lock.lock().expect("queue lock poisoned");
        p.in_flight.remove(&job.user);
        p.busy -= 1;
        if matches!(result, Ok(true)) {
            p.stats.committed += 1;
        }
        cv.notify_all();
        result?;
    }
}

/// One pool member as seen by the scoring path.
#[derive(Clone, Debug)]
pub struct PoolMember {
    pub user: UserId,
    pub features: FeatureVector,
}

/// Predicted durations for every ordered pair of the pool. Reads session
/// states from memory (empty-session state for unknown users) and never
/// runs the session encoder.
pub fn score_pool(
    model: &CupidModel,
    memory: &EmbeddingMemory,
    empty_state: &[f64],
    pool: &[PoolMember],
    now_ms: u64,
    delay: DelayConfig,
) -> Result<Tensor> {
    if pool.len() < 2 {
        return Err(Error::InvalidValue(format!("pool of {} cannot be scored", pool.len())));
    }
    if !model.state.phase2_done {
        return Err(Error::InvalidValue(
            "serving needs a model trained through phase 2".into(),
        ));
    }
    let feats: Vec<&FeatureVector> = pool.iter().map(|m| &m.features).collect();
    let mut reps = model.embed_features(&model.feature, &feats)?;
    let d = model.config.dim;
    let data = reps.data_mut();
    for (i, m) in pool.iter().enumerate() {
        let committed = if model.config.use_session {
            memory.lookup(m.user, now_ms, delay)
        } else {
            None
        };
        let state = committed.as_ref().map_or(empty_state, |c| &c.rep[..]);
        for (x, s) in data[i * d..(i + 1) * d].iter_mut().zip(state) {
            *x += s;
        }
    }
    model.head.score_matrix(&model.store, &reps)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Pairing {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

fn symmetric(scores: &Tensor, i: usize, j: usize) -> f64 {
    let n = scores.cols();
    let d = scores.data();
    (d[i * n + j] + d[j * n + i]) / 2.0
}

/// Greedy matching on symmetrized scores, highest first, ties broken by
/// lower `i` then lower `j`.
pub fn pair_pool(scores: &Tensor) -> Result<Pairing> {
    let n = scores.rows();
    if scores.cols() != n {
        return Err(Error::shape("pair_pool", format!("{:?} is not square", scores.shape())));
    }
    let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            candidates.push((symmetric(scores, i, j), i, j));
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut taken = vec![false; n];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !taken[i] && !taken[j] {
            taken[i] = true;
            taken[j] = true;
            pairs.push((i, j));
        }
    }
    let unmatched = (0..n).filter(|&i| !taken[i]).collect();
    Ok(Pairing { pairs, unmatched })
}

/// Sum of symmetrized scores over a pairing.
pub fn pairing_total(scores: &Tensor, pairing: &Pairing) -> f64 {
    pairing.pairs.iter().map(|&(i, j)| symmetric(scores, i, j)).sum()
}

/// Maximum-total pairing by exhaustive search; pools of at most 12.
pub fn optimal_pairing(scores: &Tensor) -> Result<Pairing> {
    let n = scores.rows();
    if n > 12 {
        return Err(Error::InvalidValue(format!("exhaustive pairing of {n} users")));
    }
    fn search(
        scores: &Tensor,
        free: &mut Vec<usize>,
        current: &mut Vec<(usize, usize)>,
        best: &mut (f64, Vec<(usize, usize)>),
        acc: f64,
    ) {
        let Some(&first) = free.first() else {
            if acc > best.0 {
                *best = (acc, current.clone());
            }
            return;
        };
        // Leave `first` unmatched.
        free.remove(0);
        search(scores, free, current, best, acc);
        for k in 0..free.len() {
            let other = free.remove(k);
            current.push((first, other));
            search(scores, free, current, best, acc + symmetric(scores, first, other));
            current.pop();
            free.insert(k, other);
        }
        free.insert(0, first);
    }
    let mut free: Vec<usize> = (0..n).collect();
    let mut best = (f64::NEG_INFINITY, Vec::new());
    search(scores, &mut free, &mut Vec::new(), &mut best, 0.0);
    let mut taken = vec![false; n];
    for &(i, j) in &best.1 {
        taken[i] = true;
        taken[j] = true;
    }
    Ok(Pairing {
        pairs: best.1,
        unmatched: (0..n).filter(|&i| !taken[i]).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ServeMode {
    /// Session encoding inline for every pool member.
    Sync,
    /// Session states read from the embedding memory.
    Async,
}

impl ServeMode {
    pub fn label(self) -> &'static str {
        match self {
            ServeMode::Sync => "sync",
            ServeMode::Async => "async",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub mode: String,
    pub pool_size: usize,
    pub p50_us: f64,
    pub p90_us: f64,
    pub p99_us: f64,
}

/// Synthetic pool with sessions of `session_len` records each.
fn bench_pool<R: Rng>(
    model: &CupidModel,
    n: usize,
    session_len: usize,
    rng: &mut R,
) -> Result<Vec<(PoolMember, Session)>> {
    let schema = model.schema;
    let feature = |rng: &mut R, count: u32| FeatureVector {
        demographics: crate::domain::Demographics {
            gender: rng.random_range(0..schema.gender_cardinality),
            country: rng.random_range(0..schema.country_cardinality),
        },
        stats: crate::domain::RollingStats {
            match_count: count,
            mean_log_duration: rng.random_range(8.0..11.0),
            last_log_duration: rng.random_range(8.0..11.0),
        },
    };
    (0..n)
        .map(|i| {
            let user = UserId(i as u32);
            let mut records = Vec::with_capacity(session_len);
            let mut t = 0u64;
            for k in 0..session_len {
                let duration = rng.random_range(1_000..120_000u64);
                t += duration + 1_000;
                records.push(MatchRecord {
                    self_id: user,
                    counterpart: UserId((n + i * session_len + k) as u32),
                    duration_ms: duration,
                    end_time_ms: t,
                    self_features: feature(rng, k as u32),
                    counterpart_features: feature(rng, 0),
                });
            }
            let member = PoolMember {
                user,
                features: feature(rng, session_len as u32),
            };
            Ok((member, Session::new(user, records)?))
        })
        .collect()
}

/// Times `reps` scoring requests per pool size and reports nearest-rank
/// percentiles in microseconds.
pub fn bench_latency<R: Rng>(
    model: &CupidModel,
    mode: ServeMode,
    pool_sizes: &[usize],
    reps: usize,
    session_len: usize,
    rng: &mut R,
) -> Result<Vec<LatencyRow>> {
    if reps == 0 {
        return Err(Error::Empty("benchmark repetitions"));
    }
    let empty = model.empty_state()?;
    let mut rows = Vec::new();
    for &n in pool_sizes {
        let members = bench_pool(model, n, session_len, rng)?;
        let pool: Vec<PoolMember> = members.iter().map(|(m, _)| m.clone()).collect();
        let memory = EmbeddingMemory::new(1);
        for (m, s) in &members {
            let rep = encode_jobs(
                model,
                &[&UpdateJob {
                    user: m.user,
                    session: s.clone(),
                    enqueue_ms: 0,
                    compute_delay_ms: None,
                }],
            )?
            .remove(0);
            memory.commit(m.user, rep, s.records().last().map_or(0, |r| r.end_time_ms), 0)?;
        }
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let start = Instant::now();
            match mode {
                ServeMode::Async => {
                    score_pool(model, &memory, &empty, &pool, u64::MAX, DelayConfig::default())?;
                }
                ServeMode::Sync => {
                    let inline = EmbeddingMemory::new(1);
                    for (m, s) in &members {
                        let rep = model.session.encode_final_many(&model.store, &[s.records()])?.remove(0);
                        inline.commit(m.user, rep, 0, 0)?;
                    }
                    score_pool(model, &inline, &empty, &pool, u64::MAX, DelayConfig::default())?;
                }
            }
            times.push(start.elapsed().as_secs_f64() * 1e6);
        }
        times.sort_by(f64::total_cmp);
        rows.push(LatencyRow {
            mode: mode.label().to_string(),
            pool_size: n,
            p50_us: nearest_rank(&times, 50.0)?,
            p90_us: nearest_rank(&times, 90.0)?,
            p99_us: nearest_rank(&times, 99.0)?,
        });
    }
    Ok(rows)
}

/// CSV with columns `mode,pool_size,p50_us,p90_us,p99_us`.
pub fn write_latency_csv<W: std::io::Write>(w: W, rows: &[LatencyRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delayed_lookup_cutoff() {
        let mem = EmbeddingMemory::new(8);
        let u = UserId(1);
        mem.commit(u, vec![1.0], 100, 100).unwrap();
        mem.commit(u, vec![2.0], 200, 200).unwrap();
        assert_eq!(
            mem.lookup(u, 250, DelayConfig { t_prime_ms: 100 }).unwrap().rep,
            vec![1.0]
        );
        assert_eq!(mem.lookup(u, 250, DelayConfig::default()).unwrap().rep, vec![2.0]);
        assert!(mem.lookup(u, 150, DelayConfig { t_prime_ms: 100 }).is_none());
        assert!(mem.lookup(UserId(2), 250, DelayConfig::default()).is_none());
    }

    #[test]
    fn commit_rules() {
        let mem = EmbeddingMemory::new(2);
        let u = UserId(1);
        assert!(mem.commit(u, vec![1.0], 10, 10).unwrap());
        assert!(!mem.commit(u, vec![9.0], 10, 11).unwrap());
        assert!(mem.commit(u, vec![2.0], 20, 5).is_err());
        assert!(mem.commit(u, vec![2.0], 20, 20).unwrap());
        assert!(mem.commit(u, vec![3.0], 30, 30).unwrap());
        // History of two: the first commit is gone.
        assert!(mem.lookup(u, 30, DelayConfig { t_prime_ms: 15 }).is_none());
    }

    fn matrix(n: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                v[i * n + j] = if i == j { f64::NEG_INFINITY } else { f(i, j) };
            }
        }
        Tensor::matrix(n, n, v).unwrap()
    }

    #[test]
    fn greedy_three_users() {
        let s = matrix(3, |i, j| match (i.min(j), i.max(j)) {
            (0, 1) => 5.0,
            (0, 2) => 4.0,
            _ => 1.0,
        });
        let p = pair_pool(&s).unwrap();
        assert_eq!(p.pairs, vec![(0, 1)]);
        assert_eq!(p.unmatched, vec![2]);
        assert_eq!(pairing_total(&s, &optimal_pairing(&s).unwrap()), 5.0);
    }

    #[test]
    fn greedy_four_users_half_bound() {
        let s = matrix(4, |i, j| match (i.min(j), i.max(j)) {
            (0, 2) => 6.0,
            (0, 1) | (2, 3) => 5.0,
            _ => 1.0,
        });
        let p = pair_pool(&s).unwrap();
        assert_eq!(p.pairs, vec![(0, 2), (1, 3)]);
        assert_eq!(pairing_total(&s, &p), 7.0);
        assert_eq!(pairing_total(&s, &optimal_pairing(&s).unwrap()), 10.0);
    }

    #[test]
    fn ties_pair_in_index_order() {
        let s = matrix(5, |_, _| 1.0);
        let p = pair_pool(&s).unwrap();
        assert_eq!(p.pairs, vec![(0, 1), (2, 3)]);
        assert_eq!(p.unmatched, vec![4]);
    }
}
