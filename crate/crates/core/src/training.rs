//! Two-phase training, the joint baseline and transformer-inference
//! accounting.
//!
//! Phase 1 encodes every training session once per epoch and trains all
//! layers, using the auxiliary embedder `f̃_u` for the counterpart. Phase 2
//! freezes the embedders, encodes every session once more per role and
//! trains only the head on full counterpart representations. The joint
//! baseline re-encodes both users' prefixes for every record.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, FeatureVector, MatchRecord, MatchType, Session, Split};
use crate::error::{Error, Result};
use crate::eval::{self, Delay};
use crate::model::{CupidModel, AUX_FEATURE_PREFIX, FEATURE_PREFIX, HEAD_PREFIX, SESSION_PREFIX};
use crate::numerics::{AdamW, ConvergenceMonitor, Graph, ParamId, ReduceOnPlateau, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Joint-baseline epochs `N`.
    pub joint_epochs: usize,
    /// Phase-1 epochs `N1`.
    pub phase1_epochs: usize,
    /// Phase-2 epochs `N2`.
    pub phase2_epochs: usize,
    /// Sessions per phase-1 step.
    pub session_batch: usize,
    /// Records per phase-2 step.
    pub match_batch: usize,
    /// Records per joint-baseline step.
    pub joint_batch: usize,
    pub lr: f64,
    pub phase2_lr: f64,
    pub weight_decay: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_threshold: f64,
    pub convergence_threshold: f64,
    pub convergence_patience: usize,
    /// Stop a phase early once validation MSE has converged.
    pub early_stopping: bool,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            joint_epochs: 10,
            phase1_epochs: 10,
            phase2_epochs: 10,
            session_batch: 8,
            match_batch: 256,
            joint_batch: 32,
            lr: 1e-3,
            phase2_lr: 1e-3,
            weight_decay: 1e-4,
            plateau_factor: 0.5,
            plateau_patience: 2,
            plateau_threshold: 1e-4,
            convergence_threshold: 1e-4,
            convergence_patience: 3,
            early_stopping: true,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.phase1_epochs,
            self.phase2_epochs,
            self.session_batch,
            self.match_batch,
            self.joint_batch,
        ];
        if sizes.contains(&0) {
            return Err(Error::Config("epochs and batch sizes must be positive".into()));
        }
        if !(self.lr > 0.0 && self.phase2_lr > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// One record to predict, with the session-state indices it may use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Target {
    pub session: usize,
    /// Position of the record in its session.
    pub index: usize,
    /// Requester state: number of the session's records ended by the start.
    pub state: usize,
    pub cp_session: usize,
    /// Counterpart state: number of the counterpart session's records that
    /// ended strictly before the match started.
    pub cp_state: usize,
    pub split: Split,
    pub match_type: MatchType,
}

/// Sessions of a dataset plus every mirrored record aligned to both users'
/// session states.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub sessions: Vec<Session>,
    pub targets: Vec<Target>,
}

impl Corpus {
    pub fn new(dataset: &Dataset) -> Result<Self> {
        let sessions = dataset.sessions()?;
        let mut locate: HashMap<(crate::domain::UserId, u64), usize> = HashMap::new();
        for (s, sess) in sessions.iter().enumerate() {
            for rec in sess.records() {
                if locate.insert((rec.self_id, rec.end_time_ms), s).is_some() {
                    return Err(Error::Data(format!(
                        "{} has two matches ending at {}",
                        rec.self_id, rec.end_time_ms
                    )));
                }
            }
        }
        let warm = dataset.training_users();
        let warmth = |u| {
            if warm.contains(&u) {
                crate::domain::Warmth::Warm
            } else {
                crate::domain::Warmth::Cold
            }
        };
        let mut targets = Vec::with_capacity(dataset.events().len());
        for (s, sess) in sessions.iter().enumerate() {
            for (r, rec) in sess.records().iter().enumerate() {
                let cp_session = *locate.get(&(rec.counterpart, rec.end_time_ms)).ok_or_else(|| {
                    Error::Data(format!(
                        "no mirrored record for {} at {}",
                        rec.counterpart, rec.end_time_ms
                    ))
                })?;
                let start = rec.start_time_ms();
                targets.push(Target {
                    session: s,
                    index: r,
                    state: r.min(sess.count_ended_by(start)),
                    cp_session,
                    cp_state: sessions[cp_session].count_ended_before(start),
                    split: dataset.split_of(rec),
                    match_type: MatchType::of(warmth(rec.self_id), warmth(rec.counterpart)),
                });
            }
        }
        Ok(Self { sessions, targets })
    }

    pub fn record(&self, t: &Target) -> &MatchRecord {
        &self.sessions[t.session].records()[t.index]
    }

    pub fn in_split(&self, split: Split) -> Vec<usize> {
        (0..self.targets.len())
            .filter(|&i| self.targets[i].split == split)
            .collect()
    }

    /// Verifies that no target can see its own match or anything later.
    pub fn check_causality(&self) -> Result<()> {
        for t in &self.targets {
            let start = self.record(t).start_time_ms();
            let own = &self.sessions[t.session].records()[..t.state];
            let cp = &self.sessions[t.cp_session].records()[..t.cp_state];
            if t.state > t.index || own.iter().any(|r| r.end_time_ms > start) {
                return Err(Error::Data(format!(
                    "requester state {} leaks past match start",
                    t.state
                )));
            }
            if cp.iter().any(|r| r.end_time_ms >= start) {
                return Err(Error::Data(format!(
                    "counterpart state {} leaks past match start",
                    t.cp_state
                )));
            }
        }
        Ok(())
    }
}

/// One line of the structured training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: Option<f64>,
    pub val_auroc: Option<f64>,
    pub lr: f64,
    pub transformer_forward_count: u64,
    pub clamp_count: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub epochs_run: usize,
    /// Transformer forwards spent by this phase.
    pub forwards: u64,
    pub final_loss: f64,
}

/// `2 N |S̄| / (N1 + 2)`: joint-baseline forwards over two-phase forwards.
pub fn reduction_factor(joint_epochs: usize, phase1_epochs: usize, mean_session_len: f64) -> f64 {
    2.0 * joint_epochs as f64 * mean_session_len / (phase1_epochs as f64 + 2.0)
}

/// Mean squared difference with compensated summation.
pub fn mse_loss(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::shape(
            "mse_loss",
            format!("{} predictions vs {} targets", predictions.len(), targets.len()),
        ));
    }
    if predictions.is_empty() {
        return Err(Error::Empty("mse_loss"));
    }
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for (p, t) in predictions.iter().zip(targets) {
        let x = (p - t) * (p - t);
        let s = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - s) + x;
        } else {
            comp += (x - s) + sum;
        }
        sum = s;
    }
    Ok((sum + comp) / predictions.len() as f64)
}

fn ids(model: &CupidModel, prefixes: &[&str]) -> Vec<ParamId> {
    let mut out: Vec<ParamId> = prefixes.iter().flat_map(|p| model.store.ids_with_prefix(p)).collect();
    out.sort_by_key(|id| id.index());
    out
}

fn frozen_checksum(model: &CupidModel) -> [u64; 3] {
    [
        model.store.checksum_prefix(FEATURE_PREFIX),
        model.store.checksum_prefix(AUX_FEATURE_PREFIX),
        model.store.checksum_prefix(SESSION_PREFIX),
    ]
}

/// Starts the head bias at the mean training target so early logits sit
/// inside the target range.
fn init_head_bias(model: &mut CupidModel, corpus: &Corpus, train: &[usize]) {
    if train.is_empty() {
        return;
    }
    let mean = train
        .iter()
        .map(|&i| model.head.target(corpus.record(&corpus.targets[i]).duration_ms))
        .sum::<f64>()
        / train.len() as f64;
    model.store.get_mut(model.head.b).data_mut()[0] = mean;
}

/// Tracks the schedule and convergence of one phase.
struct Schedule {
    plateau: ReduceOnPlateau,
    convergence: ConvergenceMonitor,
    early_stopping: bool,
    threshold_ms: f64,
    validation: Vec<usize>,
}

impl Schedule {
    fn new(cfg: &TrainingConfig, corpus: &Corpus, threshold_ms: f64) -> Self {
        Self {
            plateau: ReduceOnPlateau::new(cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold),
            convergence: ConvergenceMonitor::new(cfg.convergence_threshold, cfg.convergence_patience),
            early_stopping: cfg.early_stopping,
            threshold_ms,
            validation: corpus.in_split(Split::Validation),
        }
    }

    /// Logs the epoch, adjusts the learning rate and reports whether to stop.
    #[allow(clippy::too_many_arguments)]
    fn end_epoch(
        &mut self,
        phase: &str,
        epoch: usize,
        train_loss: f64,
        model: &CupidModel,
        corpus: &Corpus,
        opt: &mut AdamW,
        log: &mut Vec<EpochLog>,
    ) -> Result<bool> {
        if !train_loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let (val_mse, val_auroc) = if self.validation.is_empty() {
            (None, None)
        } else {
            let preds = eval::predict_targets(model, corpus, &self.validation, Delay::Live)?;
            let mse = mse_loss(&preds.log_pred, &preds.log_true)?;
            let labels: Vec<bool> = preds.true_ms.iter().map(|&y| y > self.threshold_ms).collect();
            (Some(mse), eval::auroc(&preds.log_pred, &labels).ok())
        };
        let mut stop = false;
        if let Some(mse) = val_mse {
            opt.lr = self.plateau.observe(mse, opt.lr);
            stop = self.convergence.converged(mse) && self.early_stopping;
        }
        log.push(EpochLog {
            phase: phase.to_string(),
            epoch,
            train_loss,
            val_mse,
            val_auroc,
            lr: opt.lr,
            transformer_forward_count: model.counter().get(),
            clamp_count: model.head.clamps.get(),
        });
        Ok(stop)
    }
}

fn targets_tensor(model: &CupidModel, records: &[&MatchRecord]) -> Vec<f64> {
    records.iter().map(|r| model.head.target(r.duration_ms)).collect()
}

/// Phase 1: all layers, one encoder pass per training session per epoch,
/// counterpart represented by the auxiliary feature embedder.
pub fn train_phase1(
    model: &mut CupidModel,
    corpus: &Corpus,
    cfg: &TrainingConfig,
    threshold_ms: f64,
    log: &mut Vec<EpochLog>,
) -> Result<PhaseSummary> {
    cfg.validate()?;
    let train = corpus.in_split(Split::Train);
    // Targets grouped by session; states past the encoder window cannot be
    // produced by a single pass and are left to phase 2.
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &train {
        let t = &corpus.targets[i];
        if t.state <= model.config.max_session_len {
            groups.entry(t.session).or_default().push(i);
        }
    }
    if groups.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if model.state.phase1_epochs == 0 {
        init_head_bias(model, corpus, &train);
    }
    // Representations are about to change; the head must be refit on them.
    model.state.phase2_done = false;
    let trainable = ids(
        model,
        &[FEATURE_PREFIX, AUX_FEATURE_PREFIX, SESSION_PREFIX, HEAD_PREFIX],
    );
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut schedule = Schedule::new(cfg, corpus, threshold_ms);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5048_4153_4531 ^ model.state.phase1_epochs as u64);
    let mut order: Vec<(usize, Vec<usize>)> = groups.into_iter().collect();
    let before = model.counter().get();
    let mut summary = PhaseSummary::default();
    for _ in 0..cfg.phase1_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n = 0usize;
        for chunk in order.chunks(cfg.session_batch) {
            let (grads, loss, count) = {
                let m = &*model;
                let mut g = Graph::new(&m.store);
                let mut members: Vec<(usize, usize)> = Vec::new();
                for (s, (_, idx)) in chunk.iter().enumerate() {
                    members.extend(idx.iter().map(|&i| (s, i)));
                }
                let records: Vec<&MatchRecord> = members
                    .iter()
                    .map(|&(_, i)| corpus.record(&corpus.targets[i]))
                    .collect();
                let own: Vec<&FeatureVector> = records.iter().map(|r| &r.self_features).collect();
                let other: Vec<&FeatureVector> = records.iter().map(|r| &r.counterpart_features).collect();
                let e_u = m.feature.embed(&mut g, &own)?;
                let e_i = if m.config.use_session {
                    let seqs: Vec<&[MatchRecord]> = chunk
                        .iter()
                        .map(|(s, idx)| {
                            let upto = idx.iter().map(|&i| corpus.targets[i].state).max().unwrap_or(0);
                            &corpus.sessions[*s].records()[..upto]
                        })
                        .collect();
                    let batch = m.session.encode_batch(&mut g, &seqs)?;
                    let rows = members
                        .iter()
                        .map(|&(s, i)| batch.row(s, corpus.targets[i].state))
                        .collect();
                    let e_s = g.select_rows(batch.states, rows)?;
                    g.add(e_s, e_u)?
                } else {
                    e_u
                };
                let e_j = m.aux_feature.embed(&mut g, &other)?;
                let z = m.head.forward_logit(&mut g, e_i, e_j)?;
                let y = targets_tensor(m, &records);
                let loss = g.squared_error(z, y, 1.0 / records.len() as f64)?;
                (g.backward(loss)?, g.scalar(loss), records.len())
            };
            if !grads.is_finite() {
                return Err(Error::NonFinite("phase-1 gradients"));
            }
            opt.step(&mut model.store, &grads, &trainable);
            loss_sum += loss * count as f64;
            n += count;
        }
        model.state.phase1_epochs += 1;
        summary.epochs_run += 1;
        summary.final_loss = loss_sum / n as f64;
        let epoch = model.state.phase1_epochs;
        if schedule.end_epoch("phase1", epoch, summary.final_loss, model, corpus, &mut opt, log)? {
            break;
        }
    }
    summary.forwards = model.counter().get() - before;
    Ok(summary)
}

/// Representation tables for phase 2 and serving-style evaluation.
struct Precomputed {
    e_i: Tensor,
    e_j: Tensor,
    y: Vec<f64>,
}

fn precompute(model: &CupidModel, corpus: &Corpus, targets: &[usize]) -> Result<Precomputed> {
    let d = model.config.dim;
    let encoder = &model.session;
    // Each role encodes its own sessions in a separate pass, so a session
    // that appears on both sides is encoded twice.
    let mut requester: Vec<usize> = targets.iter().map(|&i| corpus.targets[i].session).collect();
    requester.sort_unstable();
    requester.dedup();
    let mut counterpart: Vec<usize> = targets.iter().map(|&i| corpus.targets[i].cp_session).collect();
    counterpart.sort_unstable();
    counterpart.dedup();
    let tables = |list: &[usize]| -> Result<HashMap<usize, Tensor>> {
        let sessions: Vec<&Session> = list.iter().map(|&s| &corpus.sessions[s]).collect();
        Ok(list
            .iter()
            .copied()
            .zip(model.state_tables(encoder, &sessions)?)
            .collect())
    };
    let req = tables(&requester)?;
    let cp = tables(&counterpart)?;
    let records: Vec<&MatchRecord> = targets.iter().map(|&i| corpus.record(&corpus.targets[i])).collect();
    let own: Vec<&FeatureVector> = records.iter().map(|r| &r.self_features).collect();
    let other: Vec<&FeatureVector> = records.iter().map(|r| &r.counterpart_features).collect();
    let mut e_i = model.embed_features(&model.feature, &own)?.into_data();
    let mut e_j = model.embed_features(&model.feature, &other)?.into_data();
    for (row, &i) in targets.iter().enumerate() {
        let t = &corpus.targets[i];
        let missing = || Error::Data(format!("no precomputed state for session {} of target {i}", t.session));
        let s_i = req.get(&t.session).ok_or_else(missing)?;
        let s_j = cp.get(&t.cp_session).ok_or_else(missing)?;
        if t.state >= s_i.rows() || t.cp_state >= s_j.rows() {
            return Err(missing());
        }
        for (x, s) in e_i[row * d..(row + 1) * d].iter_mut().zip(s_i.row(t.state)) {
            *x += s;
        }
        for (x, s) in e_j[row * d..(row + 1) * d].iter_mut().zip(s_j.row(t.cp_state)) {
            *x += s;
        }
    }
    Ok(Precomputed {
        e_i: Tensor::matrix(targets.len(), d, e_i)?,
        e_j: Tensor::matrix(targets.len(), d, e_j)?,
        y: targets_tensor(model, &records),
    })
}

/// Phase 2: embedders frozen, head trained on precomputed representations
/// of both users.
pub fn train_phase2(
    model: &mut CupidModel,
    corpus: &Corpus,
    cfg: &TrainingConfig,
    threshold_ms: f64,
    log: &mut Vec<EpochLog>,
) -> Result<PhaseSummary> {
    cfg.validate()?;
    let train = corpus.in_split(Split::Train);
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let frozen = frozen_checksum(model);
    let before = model.counter().get();
    let data = precompute(model, corpus, &train)?;
    let forwards = model.counter().get() - before;
    model.state.phase2_done = true;
    let trainable = ids(model, &[HEAD_PREFIX]);
    let mut opt = AdamW::new(cfg.phase2_lr, cfg.weight_decay);
    let mut schedule = Schedule::new(cfg, corpus, threshold_ms);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5048_4153_4532 ^ model.state.phase2_epochs as u64);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let d = model.config.dim;
    let mut summary = PhaseSummary::default();
    for _ in 0..cfg.phase2_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.match_batch) {
            let pick = |t: &Tensor| -> Vec<f64> { chunk.iter().flat_map(|&r| t.row(r).iter().copied()).collect() };
            let (grads, loss) = {
                let mut g = Graph::new(&model.store);
                let a = g.input(chunk.len(), d, pick(&data.e_i))?;
                let b = g.input(chunk.len(), d, pick(&data.e_j))?;
                let z = model.head.forward_logit(&mut g, a, b)?;
                let y = chunk.iter().map(|&r| data.y[r]).collect();
                let loss = g.squared_error(z, y, 1.0 / chunk.len() as f64)?;
                (g.backward(loss)?, g.scalar(loss))
            };
            if !grads.is_finite() {
                return Err(Error::NonFinite("phase-2 gradients"));
            }
            opt.step(&mut model.store, &grads, &trainable);
            loss_sum += loss * chunk.len() as f64;
        }
        model.state.phase2_epochs += 1;
        summary.epochs_run += 1;
        summary.final_loss = loss_sum / train.len() as f64;
        let epoch = model.state.phase2_epochs;
        if schedule.end_epoch("phase2", epoch, summary.final_loss, model, corpus, &mut opt, log)? {
            break;
        }
    }
    if frozen_checksum(model) != frozen {
        return Err(Error::InvalidValue("frozen parameters changed during phase 2".into()));
    }
    summary.forwards = forwards;
    Ok(summary)
}

/// Runs phase 1 then phase 2.
pub fn train_two_phase(
    model: &mut CupidModel,
    corpus: &Corpus,
    cfg: &TrainingConfig,
    threshold_ms: f64,
    log: &mut Vec<EpochLog>,
) -> Result<(PhaseSummary, PhaseSummary)> {
    let p1 = train_phase1(model, corpus, cfg, threshold_ms, log)?;
    let p2 = train_phase2(model, corpus, cfg, threshold_ms, log)?;
    Ok((p1, p2))
}

/// Joint baseline: every record re-encodes both users' session prefixes.
pub fn train_joint_baseline(
    model: &mut CupidModel,
    corpus: &Corpus,
    cfg: &TrainingConfig,
    threshold_ms: f64,
    log: &mut Vec<EpochLog>,
) -> Result<PhaseSummary> {
    cfg.validate()?;
    if cfg.joint_epochs == 0 {
        return Err(Error::Config("joint epochs must be positive".into()));
    }
    let train = corpus.in_split(Split::Train);
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if model.state.joint_epochs == 0 {
        init_head_bias(model, corpus, &train);
    }
    model.state.phase2_done = true;
    let trainable = ids(model, &[FEATURE_PREFIX, SESSION_PREFIX, HEAD_PREFIX]);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut schedule = Schedule::new(cfg, corpus, threshold_ms);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x004a_4f49_4e54 ^ model.state.joint_epochs as u64);
    let mut order = train.clone();
    let before = model.counter().get();
    let mut summary = PhaseSummary::default();
    for _ in 0..cfg.joint_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.joint_batch) {
            let (grads, loss) = {
                let m = &*model;
                let mut g = Graph::new(&m.store);
                let records: Vec<&MatchRecord> = chunk.iter().map(|&i| corpus.record(&corpus.targets[i])).collect();
                let own: Vec<&FeatureVector> = records.iter().map(|r| &r.self_features).collect();
                let other: Vec<&FeatureVector> = records.iter().map(|r| &r.counterpart_features).collect();
                let mut e_i = m.feature.embed(&mut g, &own)?;
                let mut e_j = m.feature.embed(&mut g, &other)?;
                if m.config.use_session {
                    let mut seqs: Vec<&[MatchRecord]> = Vec::with_capacity(2 * chunk.len());
                    for &i in chunk {
                        let t = &corpus.targets[i];
                        seqs.push(&corpus.sessions[t.session].records()[..t.state]);
                    }
                    for &i in chunk {
                        let t = &corpus.targets[i];
                        seqs.push(&corpus.sessions[t.cp_session].records()[..t.cp_state]);
                    }
                    let batch = m.session.encode_batch(&mut g, &seqs)?;
                    let n = chunk.len();
                    let last = |s: usize| batch.row(s, batch.kept[s]);
                    let s_i = g.select_rows(batch.states, (0..n).map(last).collect())?;
                    let s_j = g.select_rows(batch.states, (n..2 * n).map(last).collect())?;
                    e_i = g.add(s_i, e_i)?;
                    e_j = g.add(s_j, e_j)?;
                }
                let z = m.head.forward_logit(&mut g, e_i, e_j)?;
                let y = targets_tensor(m, &records);
                let loss = g.squared_error(z, y, 1.0 / records.len() as f64)?;
                (g.backward(loss)?, g.scalar(loss))
            };
            if !grads.is_finite() {
                return Err(Error::NonFinite("joint gradients"));
            }
            opt.step(&mut model.store, &grads, &trainable);
            loss_sum += loss * chunk.len() as f64;
        }
        model.state.joint_epochs += 1;
        summary.epochs_run += 1;
        summary.final_loss = loss_sum / train.len() as f64;
        let epoch = model.state.joint_epochs;
        if schedule.end_epoch("joint", epoch, summary.final_loss, model, corpus, &mut opt, log)? {
            break;
        }
    }
    summary.forwards = model.counter().get() - before;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduction_factor_examples() {
        assert!((reduction_factor(10, 10, 128.0) - 213.333_333_333).abs() < 1e-6);
        assert_eq!(reduction_factor(2, 2, 1.0), 1.0);
        assert!((reduction_factor(10, 10, 32.0) - 53.333_333_333).abs() < 1e-6);
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(matches!(mse_loss(&[], &[]), Err(Error::Empty(_))));
        assert!(mse_loss(&[1.0], &[1.0, 2.0]).is_err());
    }
}
