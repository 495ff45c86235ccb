//! Synthetic social-discovery world.
//!
//! Each user has a unit latent vector built from a country direction, a
//! gender direction and an idiosyncratic part. A visit adds a random intent
//! offset, and every finished match rotates the user's effective vector
//! toward the partner after a long chat and away after a short one. Chat
//! durations are log-normal around `μ0 + α·c`, where `c` is the dot product
//! of the two effective vectors plus a same-country bonus.
//!
//! The same discrete-event loop generates logged datasets under a random
//! policy and runs online switchback comparisons between policies.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{
    Dataset, Demographics, FeatureSchema, FeatureVector, PhysicalMatch, RollingStats, Session, SplitMarkers, UserId,
};
use crate::engine::{pair_pool, score_pool, DelayConfig, DeterministicUpdater, EmbeddingMemory, PoolMember, UpdateJob};
use crate::error::{Error, Result};
use crate::model::CupidModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub num_users: usize,
    /// Dimension `k` of user latents.
    pub latent_dim: usize,
    /// Share of users whose first visit falls after the training window.
    pub cold_fraction: f64,
    pub genders: u32,
    pub countries: u32,
    /// Zipf exponent of the country popularity distribution.
    pub country_skew: f64,
    /// Weight of the country direction in a user's latent.
    pub country_weight: f64,
    pub gender_weight: f64,
    pub idiosyncratic_weight: f64,
    /// Base log-duration, in log-seconds.
    pub mu0: f64,
    /// Compatibility gain.
    pub alpha: f64,
    /// Log-noise scale.
    pub sigma: f64,
    pub country_bonus: f64,
    /// Largest rotation, in radians, of a user's vector after one match.
    pub drift_rate: f64,
    /// Norm scale of the per-visit intent offset.
    pub intent_scale: f64,
    pub mean_session_matches: f64,
    pub max_session_matches: u32,
    pub mean_offline_ms: f64,
    pub mean_think_ms: f64,
    /// Interval between pairing rounds.
    pub tick_ms: u64,
    pub horizon_ms: u64,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_users: 1000,
            latent_dim: 8,
            cold_fraction: 0.1,
            genders: 2,
            countries: 8,
            country_skew: 0.8,
            country_weight: 1.0,
            gender_weight: 0.5,
            idiosyncratic_weight: 1.0,
            mu0: 3.0,
            alpha: 1.5,
            sigma: 0.5,
            country_bonus: 0.3,
            drift_rate: 0.3,
            intent_scale: 0.5,
            mean_session_matches: 12.0,
            max_session_matches: 32,
            mean_offline_ms: 3.0 * 3_600_000.0,
            mean_think_ms: 3_000.0,
            tick_ms: 1_000,
            horizon_ms: 30 * 3_600_000,
            train_fraction: 0.8,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_users < 2 {
            return bad("the world needs at least two users");
        }
        if self.latent_dim == 0 || self.tick_ms == 0 || self.horizon_ms == 0 {
            return bad("latent_dim, tick_ms and horizon_ms must be positive");
        }
        if !(0.0..=1.0).contains(&self.cold_fraction) {
            return bad("cold_fraction must lie in [0, 1]");
        }
        if self.sigma < 0.0 || self.drift_rate < 0.0 || self.intent_scale < 0.0 {
            return bad("sigma, drift_rate and intent_scale must be non-negative");
        }
        if self.genders == 0 || self.genders > schema.gender_cardinality {
            return bad("genders must be in 1..=schema gender cardinality");
        }
        if self.countries == 0 || self.countries > schema.country_cardinality {
            return bad("countries must be in 1..=schema country cardinality");
        }
        if self.mean_session_matches < 1.0 || self.max_session_matches == 0 {
            return bad("sessions need at least one match");
        }
        if self.mean_offline_ms <= 0.0 || self.mean_think_ms < 0.0 {
            return bad("offline and think times must be positive");
        }
        let (tr, va) = (self.train_fraction, self.validation_fraction);
        if !(tr > 0.0 && va >= 0.0 && tr + va < 1.0) {
            return bad("split fractions must leave a non-empty test window");
        }
        Ok(())
    }

    /// Median duration of a pair with zero compatibility.
    pub fn median_ms(&self) -> f64 {
        1000.0 * self.mu0.exp()
    }

    pub fn split_markers(&self) -> Result<SplitMarkers> {
        let h = self.horizon_ms as f64;
        SplitMarkers::new(
            (h * self.train_fraction) as u64,
            (h * (self.train_fraction + self.validation_fraction)) as u64,
        )
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gaussian<R: Rng>(rng: &mut R, k: usize, scale: f64) -> Vec<f64> {
    (0..k).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Rotates unit `v` toward unit `u` (or away when `toward` is false) by at
/// most `angle` radians along the great circle through both.
pub fn rotate(v: &[f64], u: &[f64], angle: f64, toward: bool) -> Vec<f64> {
    let cos = dot(v, u).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let mut w: Vec<f64> = u.iter().zip(v).map(|(a, b)| a - cos * b).collect();
    let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    if wn < 1e-12 || angle <= 0.0 {
        return v.to_vec();
    }
    w.iter_mut().for_each(|x| *x /= wn);
    let a = if toward {
        angle.min(theta)
    } else {
        -angle.min(std::f64::consts::PI - theta)
    };
    let mut out: Vec<f64> = v.iter().zip(&w).map(|(x, y)| a.cos() * x + a.sin() * y).collect();
    normalize(&mut out);
    out
}

#[derive(Clone, Debug)]
pub struct WorldUser {
    pub demographics: Demographics,
    /// Unit latent.
    pub latent: Vec<f64>,
    /// Unit effective vector: latent plus the current visit's intent.
    pub effective: Vec<f64>,
    /// First visit falls after the training window.
    pub late: bool,
}

impl WorldUser {
    /// `effective - latent`.
    pub fn intent(&self) -> Vec<f64> {
        self.effective.iter().zip(&self.latent).map(|(e, z)| e - z).collect()
    }
}

/// Users and their evolving intents.
#[derive(Clone, Debug)]
pub struct WorldState {
    pub config: WorldConfig,
    pub users: Vec<WorldUser>,
}

impl WorldState {
    pub fn new(config: WorldConfig, schema: &FeatureSchema) -> Result<Self> {
        config.validate(schema)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let k = config.latent_dim;
        let unit = |rng: &mut ChaCha8Rng| {
            let mut v = gaussian(rng, k, 1.0);
            normalize(&mut v);
            v
        };
        let country_dirs: Vec<Vec<f64>> = (0..config.countries).map(|_| unit(&mut rng)).collect();
        let gender_dirs: Vec<Vec<f64>> = (0..config.genders).map(|_| unit(&mut rng)).collect();
        let weights: Vec<f64> = (0..config.countries)
            .map(|c| 1.0 / ((c + 1) as f64).powf(config.country_skew))
            .collect();
        let total: f64 = weights.iter().sum();
        let cold = (config.num_users as f64 * config.cold_fraction).round() as usize;
        let mut users = Vec::with_capacity(config.num_users);
        for i in 0..config.num_users {
            let mut r = rng.random::<f64>() * total;
            let mut country = 0;
            for (c, w) in weights.iter().enumerate() {
                if r < *w {
                    country = c;
                    break;
                }
                r -= w;
                country = c;
            }
            let gender = rng.random_range(0..config.genders) as usize;
            let idio = gaussian(&mut rng, k, 1.0 / (k as f64).sqrt());
            let mut latent: Vec<f64> = (0..k)
                .map(|d| {
                    config.country_weight * country_dirs[country][d]
                        + config.gender_weight * gender_dirs[gender][d]
                        + config.idiosyncratic_weight * idio[d]
                })
                .collect();
            normalize(&mut latent);
            users.push(WorldUser {
                demographics: Demographics {
                    gender: gender as u32,
                    country: country as u32,
                },
                effective: latent.clone(),
                latent,
                late: i >= config.num_users - cold,
            });
        }
        Ok(Self { config, users })
    }

    /// Compatibility `c` of the current effective vectors.
    pub fn compatibility(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (&self.users[i], &self.users[j]);
        let bonus = if a.demographics.country == b.demographics.country {
            self.config.country_bonus
        } else {
            0.0
        };
        dot(&a.effective, &b.effective) + bonus
    }

    /// Samples a chat duration in ms for the pair; symmetric in `(i, j)`.
    pub fn true_duration<R: Rng>(&self, i: usize, j: usize, rng: &mut R) -> Result<u64> {
        if i == j {
            return Err(Error::InvalidValue(format!("user {i} cannot chat with itself")));
        }
        let eps: f64 = if self.config.sigma > 0.0 {
            rng.sample(StandardNormal)
        } else {
            0.0
        };
        let c = &self.config;
        let log_s = c.mu0 + c.alpha * self.compatibility(i, j) + c.sigma * eps;
        Ok(((1000.0 * log_s.exp()).round() as u64).max(1))
    }

    /// Starts a visit with a fresh random intent.
    pub fn start_visit<R: Rng>(&mut self, i: usize, rng: &mut R) {
        let k = self.config.latent_dim;
        let offset = gaussian(rng, k, self.config.intent_scale / (k as f64).sqrt());
        let u = &mut self.users[i];
        u.effective = u.latent.iter().zip(&offset).map(|(z, o)| z + o).collect();
        normalize(&mut u.effective);
    }

    /// Clears the intent at the end of a visit.
    pub fn end_visit(&mut self, i: usize) {
        let u = &mut self.users[i];
        u.effective = u.latent.clone();
    }

    /// Moves both users' effective vectors after a match of `duration_ms`:
    /// toward each other after a chat longer than the median, away after a
    /// shorter one.
    pub fn drift(&mut self, i: usize, j: usize, duration_ms: u64) {
        let median = self.config.median_ms();
        let y = duration_ms as f64;
        if self.config.drift_rate == 0.0 || y == median {
            return;
        }
        let toward = y > median;
        let (vi, vj) = (self.users[i].effective.clone(), self.users[j].effective.clone());
        self.users[i].effective = rotate(&vi, &vj, self.config.drift_rate, toward);
        self.users[j].effective = rotate(&vj, &vi, self.config.drift_rate, toward);
    }
}

/// A pool member offered to a policy.
pub type PoolEntry = PoolMember;

/// Pairs up the matching pool each round and observes finished matches.
pub trait Policy {
    fn name(&self) -> &str;

    /// Pairs of pool indices to connect now.
    fn pair(&mut self, now_ms: u64, pool: &[PoolEntry], rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize)>>;

    fn on_visit_start(&mut self, _user: UserId, _now_ms: u64) {}

    fn on_match_end(&mut self, _user: UserId, _session: &Session, _now_ms: u64) {}
}

/// Uniform random pairing.
#[derive(Clone, Debug, Default)]
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }

    fn pair(&mut self, _now_ms: u64, pool: &[PoolEntry], rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize)>> {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(rng);
        Ok(order.chunks_exact(2).map(|p| (p[0], p[1])).collect())
    }
}

/// Greedy pairing on a trained model's predicted durations, with session
/// states maintained by a deterministic asynchronous updater.
pub struct ModelPolicy {
    name: String,
    model: Arc<CupidModel>,
    memory: EmbeddingMemory,
    updater: DeterministicUpdater,
    empty: Vec<f64>,
    pub delay: DelayConfig,
}

impl ModelPolicy {
    pub fn new(name: &str, model: Arc<CupidModel>, compute_delay_ms: u64) -> Result<Self> {
        let empty = model.empty_state()?;
        Ok(Self {
            name: name.to_string(),
            model,
            memory: EmbeddingMemory::new(4),
            updater: DeterministicUpdater::new(compute_delay_ms),
            empty,
            delay: DelayConfig::default(),
        })
    }
}

impl Policy for ModelPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn pair(&mut self, now_ms: u64, pool: &[PoolEntry], _rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize)>> {
        self.updater.advance(now_ms, &self.model, &self.memory)?;
        let scores = score_pool(&self.model, &self.memory, &self.empty, pool, now_ms, self.delay)?;
        Ok(pair_pool(&scores)?.pairs)
    }

    fn on_visit_start(&mut self, user: UserId, _now_ms: u64) {
        self.memory.reset(user);
    }

    fn on_match_end(&mut self, user: UserId, session: &Session, now_ms: u64) {
        if self.model.config.use_session {
            self.updater.submit(UpdateJob {
                user,
                session: session.clone(),
                enqueue_ms: now_ms,
                compute_delay_ms: None,
            });
        }
    }
}

#[derive(Clone, Debug)]
enum Event {
    Arrive(usize),
    Rejoin(usize),
    Tick,
    MatchEnd(PhysicalMatch, usize, usize, usize),
}

#[derive(Clone, Debug, Default)]
struct Visit {
    stats: RollingStats,
    remaining: u32,
    session: Option<Session>,
}

/// One finished match in an online run.
#[derive(Clone, Debug)]
struct OnlineMatch {
    window: usize,
    users: [usize; 2],
    duration_ms: u64,
}

/// Drives the event loop. `arm_of(now)` picks which policy pairs a round.
struct Simulation<'a> {
    world: WorldState,
    rng: ChaCha8Rng,
    // Pairing draws come from their own stream so a policy's choices never
    // shift the outcome noise seen by later matches.
    policy_rng: ChaCha8Rng,
    events: BTreeMap<(u64, u64), Event>,
    seq: u64,
    pool: Vec<usize>,
    visits: Vec<Visit>,
    policies: Vec<&'a mut dyn Policy>,
    window_ms: u64,
    matches: Vec<PhysicalMatch>,
    online: Vec<OnlineMatch>,
}

impl<'a> Simulation<'a> {
    fn schedule(&mut self, at: u64, e: Event) {
        self.events.insert((at, self.seq), e);
        self.seq += 1;
    }

    fn exp_sample(&mut self, mean: f64) -> u64 {
        if mean <= 0.0 {
            return 0;
        }
        Exp::new(1.0 / mean)
            .expect("positive rate")
            .sample(&mut self.rng)
            .round() as u64
    }

    fn session_length(&mut self) -> u32 {
        let c = &self.world.config;
        let extra = c.mean_session_matches - 1.0;
        let n = if extra > 0.0 {
            1 + Poisson::new(extra).expect("positive mean").sample(&mut self.rng) as u32
        } else {
            1
        };
        n.min(c.max_session_matches)
    }

    fn features(&self, u: usize) -> FeatureVector {
        FeatureVector {
            demographics: self.world.users[u].demographics,
            stats: self.visits[u].stats,
        }
    }

    fn run(&mut self, first_arrival: impl Fn(usize, &mut ChaCha8Rng) -> u64) -> Result<()> {
        let horizon = self.world.config.horizon_ms;
        for u in 0..self.world.users.len() {
            let at = first_arrival(u, &mut self.rng);
            if at < horizon {
                self.schedule(at, Event::Arrive(u));
            }
        }
        self.schedule(0, Event::Tick);
        while let Some(((now, _), event)) = self.events.pop_first() {
            if now > horizon {
                break;
            }
            match event {
                Event::Arrive(u) => {
                    self.world.start_visit(u, &mut self.rng);
                    let remaining = self.session_length();
                    self.visits[u] = Visit {
                        stats: RollingStats::default(),
                        remaining,
                        session: Some(Session::empty(UserId(u as u32))),
                    };
                    for p in self.policies.iter_mut() {
                        p.on_visit_start(UserId(u as u32), now);
                    }
                    self.pool.push(u);
                }
                Event::Rejoin(u) => self.pool.push(u),
                Event::Tick => {
                    self.pair_round(now)?;
                    self.schedule(now + self.world.config.tick_ms, Event::Tick);
                }
                Event::MatchEnd(m, a, b, window) => self.finish_match(now, m, a, b, window)?,
            }
        }
        Ok(())
    }

    fn pair_round(&mut self, now: u64) -> Result<()> {
        if self.pool.len() < 2 {
            return Ok(());
        }
        let window = (now / self.window_ms) as usize;
        let arm = window % self.policies.len();
        let entries: Vec<PoolEntry> = self
            .pool
            .iter()
            .map(|&u| PoolEntry {
                user: UserId(u as u32),
                features: self.features(u),
            })
            .collect();
        let pairs = self.policies[arm].pair(now, &entries, &mut self.policy_rng)?;
        let mut taken = vec![false; self.pool.len()];
        for &(x, y) in &pairs {
            if x == y || taken[x] || taken[y] {
                return Err(Error::InvalidValue("policy returned an invalid pairing".into()));
            }
            taken[x] = true;
            taken[y] = true;
            let (a, b) = (self.pool[x], self.pool[y]);
            let duration = self.world.true_duration(a, b, &mut self.rng)?;
            let m = PhysicalMatch {
                end_time_ms: now + duration,
                user_a: UserId(a as u32),
                user_b: UserId(b as u32),
                duration_ms: duration,
                features_a: self.features(a),
                features_b: self.features(b),
            };
            self.schedule(now + duration, Event::MatchEnd(m, a, b, window));
        }
        let pool = std::mem::take(&mut self.pool);
        self.pool = pool
            .into_iter()
            .zip(taken)
            .filter(|(_, t)| !t)
            .map(|(u, _)| u)
            .collect();
        Ok(())
    }

    fn finish_match(&mut self, now: u64, m: PhysicalMatch, a: usize, b: usize, window: usize) -> Result<()> {
        self.world.drift(a, b, m.duration_ms);
        let records = m.records();
        for (u, rec) in [(a, &records[0]), (b, &records[1])] {
            let visit = &mut self.visits[u];
            visit.stats.push(m.duration_ms);
            visit.remaining = visit.remaining.saturating_sub(1);
            let session = visit.session.as_mut().expect("matched users are visiting");
            session.push(rec.clone())?;
            let snapshot = session.clone();
            for p in self.policies.iter_mut() {
                p.on_match_end(UserId(u as u32), &snapshot, now);
            }
            if self.visits[u].remaining > 0 {
                let think = self.exp_sample(self.world.config.mean_think_ms);
                self.schedule(now + think, Event::Rejoin(u));
            } else {
                self.world.end_visit(u);
                let gap = self.exp_sample(self.world.config.mean_offline_ms);
                self.schedule(now + gap.max(1), Event::Arrive(u));
            }
        }
        self.online.push(OnlineMatch {
            window,
            users: [a, b],
            duration_ms: m.duration_ms,
        });
        self.matches.push(m);
        Ok(())
    }
}

fn new_simulation<'a>(
    world: WorldState,
    seed: u64,
    policies: Vec<&'a mut dyn Policy>,
    window_ms: u64,
) -> Simulation<'a> {
    let n = world.users.len();
    Simulation {
        world,
        rng: ChaCha8Rng::seed_from_u64(seed),
        policy_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x7061_6972),
        events: BTreeMap::new(),
        seq: 0,
        pool: Vec::new(),
        visits: vec![Visit::default(); n],
        policies,
        window_ms,
        matches: Vec::new(),
        online: Vec::new(),
    }
}

/// Logs a dataset under uniform random pairing. Late users first arrive
/// after the training window.
pub fn generate_dataset(config: &WorldConfig, schema: FeatureSchema) -> Result<Dataset> {
    let world = WorldState::new(config.clone(), &schema)?;
    let split = config.split_markers()?;
    let statics: BTreeMap<UserId, Demographics> = world
        .users
        .iter()
        .enumerate()
        .map(|(i, u)| (UserId(i as u32), u.demographics))
        .collect();
    let late: Vec<bool> = world.users.iter().map(|u| u.late).collect();
    let mut random = RandomPolicy;
    let mut sim = new_simulation(world, config.seed ^ 0x6576_656e_7473, vec![&mut random], u64::MAX);
    let mean_offline = config.mean_offline_ms;
    let horizon = config.horizon_ms;
    sim.run(|u, rng| {
        if late[u] {
            rng.random_range(split.train_end_ms..horizon)
        } else {
            Exp::new(1.0 / mean_offline).expect("positive rate").sample(rng).round() as u64
        }
    })?;
    let provenance = serde_json::json!({ "generator": "worldsim", "world": config });
    Ok(Dataset::new(schema, statics, sim.matches, split)?.with_provenance(provenance))
}

/// A dataset in which every user has exactly one visit of `session_len`
/// matches, paired by a round-robin schedule. `num_users` must be even and
/// larger than `session_len`.
pub fn uniform_dataset(config: &WorldConfig, schema: FeatureSchema, session_len: usize) -> Result<Dataset> {
    let n = config.num_users;
    if !n.is_multiple_of(2) || session_len >= n {
        return Err(Error::Config(format!(
            "uniform sessions need an even user count above the session length, got {n} users"
        )));
    }
    let mut world = WorldState::new(config.clone(), &schema)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x756e_6966);
    for u in 0..n {
        world.start_visit(u, &mut rng);
    }
    let mut stats = vec![RollingStats::default(); n];
    let mut matches = Vec::new();
    // Circle method: user 0 stays fixed, the rest rotate each round.
    let mut ring: Vec<usize> = (1..n).collect();
    let mut clock = 0u64;
    for _ in 0..session_len {
        let mut lineup = vec![0];
        lineup.extend(&ring);
        let mut round_end = clock;
        for k in 0..n / 2 {
            let (a, b) = (lineup[k], lineup[n - 1 - k]);
            let duration = world.true_duration(a, b, &mut rng)?;
            let fa = FeatureVector {
                demographics: world.users[a].demographics,
                stats: stats[a],
            };
            let fb = FeatureVector {
                demographics: world.users[b].demographics,
                stats: stats[b],
            };
            matches.push(PhysicalMatch {
                end_time_ms: clock + duration,
                user_a: UserId(a as u32),
                user_b: UserId(b as u32),
                duration_ms: duration,
                features_a: fa,
                features_b: fb,
            });
            stats[a].push(duration);
            stats[b].push(duration);
            world.drift(a, b, duration);
            round_end = round_end.max(clock + duration);
        }
        clock = round_end + 1;
        ring.rotate_right(1);
    }
    let statics = world
        .users
        .iter()
        .enumerate()
        .map(|(i, u)| (UserId(i as u32), u.demographics))
        .collect();
    Dataset::new(schema, statics, matches, SplitMarkers::all_train())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OnlineConfig {
    /// Length of one switchback window.
    pub window_ms: u64,
    /// Chats at or above this count as long.
    pub long_threshold_ms: f64,
    /// Chats below this count as short.
    pub short_threshold_ms: f64,
    /// Simulated session-encoding latency of the update worker.
    pub compute_delay_ms: u64,
    pub seed: u64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            window_ms: 20 * 60_000,
            long_threshold_ms: 60_000.0,
            short_threshold_ms: 5_000.0,
            compute_delay_ms: 200,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub window: usize,
    pub policy: String,
    pub matches: usize,
    pub mean_duration_ms: f64,
    pub long_ratio: f64,
    pub short_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentStats {
    pub segment: String,
    pub chats: usize,
    pub mean_duration_ms: f64,
    pub long_ratio: f64,
    pub short_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub policy: String,
    pub windows: usize,
    pub matches: usize,
    /// Mean over windows of the per-window mean duration.
    pub window_mean_ms: f64,
    /// Standard error of that mean.
    pub window_se_ms: f64,
    /// Per-user chat segments: all, warm and cold users.
    pub segments: Vec<SegmentStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub treatment: String,
    pub control: String,
    pub difference_ms: f64,
    pub standard_error_ms: f64,
    /// `|difference| > 2 SE`.
    pub significant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineReport {
    pub arms: Vec<ArmSummary>,
    pub windows: Vec<WindowStats>,
    /// First arm against the second, when there are two.
    pub comparison: Option<Comparison>,
}

impl OnlineReport {
    /// Text summary of the arms and the comparison.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for a in &self.arms {
            let _ = writeln!(
                s,
                "{:<14} windows {:>4}  matches {:>7}  mean {:>9.1} ms  se {:>7.1}",
                a.policy, a.windows, a.matches, a.window_mean_ms, a.window_se_ms
            );
            for seg in &a.segments {
                let _ = writeln!(
                    s,
                    "  {:<5} chats {:>7}  mean {:>9.1} ms  long {:.4}  short {:.4}",
                    seg.segment, seg.chats, seg.mean_duration_ms, seg.long_ratio, seg.short_ratio
                );
            }
        }
        if let Some(c) = &self.comparison {
            let _ = writeln!(
                s,
                "{} - {}: {:+.1} ms (se {:.1}), significant at 2 se: {}",
                c.treatment, c.control, c.difference_ms, c.standard_error_ms, c.significant
            );
        }
        s
    }

    /// CSV with columns `window,policy,matches,mean_duration_ms,long_ratio,short_ratio`.
    pub fn write_windows_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.windows {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn segment_stats(name: &str, durations: &[f64], online: &OnlineConfig) -> SegmentStats {
    let n = durations.len();
    let ratio = |f: &dyn Fn(f64) -> bool| {
        if n == 0 {
            0.0
        } else {
            durations.iter().filter(|&&d| f(d)).count() as f64 / n as f64
        }
    };
    SegmentStats {
        segment: name.to_string(),
        chats: n,
        mean_duration_ms: if n == 0 {
            f64::NAN
        } else {
            durations.iter().sum::<f64>() / n as f64
        },
        long_ratio: ratio(&|d| d >= online.long_threshold_ms),
        short_ratio: ratio(&|d| d < online.short_threshold_ms),
    }
}

/// Runs the live loop over `world.horizon_ms`, alternating `policies`
/// window by window. All users start at random offsets; late users form
/// the cold segment.
pub fn run_online(
    world_cfg: &WorldConfig,
    schema: FeatureSchema,
    online: &OnlineConfig,
    policies: Vec<&mut dyn Policy>,
) -> Result<OnlineReport> {
    if policies.is_empty() {
        return Err(Error::Config("online run needs at least one policy".into()));
    }
    if online.window_ms == 0 {
        return Err(Error::Config("window_ms must be positive".into()));
    }
    let names: Vec<String> = policies.iter().map(|p| p.name().to_string()).collect();
    let world = WorldState::new(world_cfg.clone(), &schema)?;
    let late: Vec<bool> = world.users.iter().map(|u| u.late).collect();
    let arms = policies.len();
    let mut sim = new_simulation(world, online.seed, policies, online.window_ms);
    let mean_offline = world_cfg.mean_offline_ms;
    sim.run(|_, rng| Exp::new(1.0 / mean_offline).expect("positive rate").sample(rng).round() as u64)?;

    let num_windows = world_cfg.horizon_ms.div_ceil(online.window_ms) as usize;
    let mut per_window: Vec<Vec<f64>> = vec![Vec::new(); num_windows];
    for m in &sim.online {
        per_window[m.window].push(m.duration_ms as f64);
    }
    let windows: Vec<WindowStats> = per_window
        .iter()
        .enumerate()
        .map(|(w, d)| {
            let seg = segment_stats("all", d, online);
            WindowStats {
                window: w,
                policy: names[w % arms].clone(),
                matches: d.len(),
                mean_duration_ms: seg.mean_duration_ms,
                long_ratio: seg.long_ratio,
                short_ratio: seg.short_ratio,
            }
        })
        .collect();
    let mut summaries = Vec::new();
    for (arm, name) in names.iter().enumerate() {
        let means: Vec<f64> = windows
            .iter()
            .filter(|w| w.window % arms == arm && w.matches > 0)
            .map(|w| w.mean_duration_ms)
            .collect();
        let (mean, se) = mean_se(&means);
        let mut all = Vec::new();
        let mut warm = Vec::new();
        let mut cold = Vec::new();
        let mut count = 0;
        for m in sim.online.iter().filter(|m| m.window % arms == arm) {
            count += 1;
            for u in m.users {
                let d = m.duration_ms as f64;
                all.push(d);
                if late[u] {
                    cold.push(d)
                } else {
                    warm.push(d)
                }
            }
        }
        summaries.push(ArmSummary {
            policy: name.clone(),
            windows: means.len(),
            matches: count,
            window_mean_ms: mean,
            window_se_ms: se,
            segments: vec![
                segment_stats("all", &all, online),
                segment_stats("warm", &warm, online),
                segment_stats("cold", &cold, online),
            ],
        });
    }
    let comparison = (summaries.len() == 2).then(|| {
        let (t, c) = (&summaries[0], &summaries[1]);
        let diff = t.window_mean_ms - c.window_mean_ms;
        let se = (t.window_se_ms.powi(2) + c.window_se_ms.powi(2)).sqrt();
        Comparison {
            treatment: t.policy.clone(),
            control: c.policy.clone(),
            difference_ms: diff,
            standard_error_ms: se,
            significant: diff.abs() > 2.0 * se,
        }
    });
    Ok(OnlineReport {
        arms: summaries,
        windows,
        comparison,
    })
}
