//! Metrics, match-type breakdowns, ablations and delay sweeps.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::domain::{log_scale, Dataset, FeatureVector, MatchType, Session, Split};
use crate::error::{Error, Result};
use crate::model::{CupidModel, ModelConfig};
use crate::numerics::Tensor;
use crate::prediction::HeadMode;
use crate::training::{self, mse_loss, Corpus, EpochLog, TrainingConfig};

/// Delays swept by default, in milliseconds.
pub const DEFAULT_DELAYS_MS: [u64; 5] = [0, 2000, 4000, 8000, 16000];

/// Which session state a lookup may see.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Delay {
    /// Every match that ended before the evaluated one started.
    Live,
    /// Only matches that ended at least this many ms before the start.
    Millis(u64),
    /// Sessions never updated: the empty-session state for everyone.
    Never,
}

impl Delay {
    pub fn label(self) -> String {
        match self {
            Delay::Live => "0".into(),
            Delay::Millis(ms) => ms.to_string(),
            Delay::Never => "inf".into(),
        }
    }
}

/// Rank-statistic AUROC with midranks for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "auroc",
            format!("{} scores vs {} labels", scores.len(), labels.len()),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auroc scores"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; the tie group i..=j shares their mean.
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (pos, neg) = (pos as f64, neg as f64);
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

/// Nearest-rank percentile of an ascending slice, `p` in `(0, 100]`.
pub fn nearest_rank(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::Empty("percentile input"));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::InvalidValue(format!("percentile {p} outside (0, 100]")));
    }
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Default quality threshold: the 75th percentile of training durations.
/// Generated datasets are logged under a random policy.
pub fn quality_threshold(dataset: &Dataset) -> Result<f64> {
    let mut d: Vec<f64> = dataset
        .matches()
        .iter()
        .filter(|m| dataset.split.split_of(m.end_time_ms) == Split::Train)
        .map(|m| m.duration_ms as f64)
        .collect();
    d.sort_by(f64::total_cmp);
    nearest_rank(&d, 75.0)
}

/// Sample skewness `m3 / m2^1.5`.
pub fn skewness(xs: &[f64]) -> Result<f64> {
    if xs.len() < 2 {
        return Err(Error::Empty("skewness input"));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m3 = xs.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
    if m2 == 0.0 {
        return Ok(0.0);
    }
    Ok(m3 / m2.powf(1.5))
}

/// Kolmogorov-Smirnov statistic between two empirical distributions.
pub fn ks_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("ks input"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut best) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        best = best.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    Ok(best)
}

/// Model outputs for a list of targets.
#[derive(Clone, Debug, Default)]
pub struct Predictions {
    pub log_pred: Vec<f64>,
    pub log_true: Vec<f64>,
    /// Raw-domain predictions in the head's unit.
    pub raw_pred: Vec<f64>,
    pub pred_ms: Vec<f64>,
    pub true_ms: Vec<f64>,
    pub match_type: Vec<MatchType>,
}

fn delayed_state(session: &Session, live: usize, start: u64, delay: Delay) -> usize {
    match delay {
        Delay::Live => live,
        Delay::Millis(ms) => match start.checked_sub(ms) {
            Some(cutoff) => live.min(session.count_ended_by(cutoff)),
            None => 0,
        },
        Delay::Never => 0,
    }
}

const PREDICT_CHUNK: usize = 4096;

/// Predicts every listed target with both users' session states as of just
/// before the match (minus `delay`). Does not touch the model's counter.
pub fn predict_targets(model: &CupidModel, corpus: &Corpus, targets: &[usize], delay: Delay) -> Result<Predictions> {
    let encoder = model.uncounted_encoder();
    let mut out = Predictions::default();
    let d = model.config.dim;
    for chunk in targets.chunks(PREDICT_CHUNK) {
        let mut needed: Vec<usize> = chunk
            .iter()
            .flat_map(|&i| [corpus.targets[i].session, corpus.targets[i].cp_session])
            .collect();
        needed.sort_unstable();
        needed.dedup();
        let sessions: Vec<&Session> = needed.iter().map(|&s| &corpus.sessions[s]).collect();
        let tables = model.state_tables(&encoder, &sessions)?;
        let table = |s: usize| &tables[needed.binary_search(&s).expect("session collected above")];
        let records: Vec<_> = chunk.iter().map(|&i| corpus.record(&corpus.targets[i])).collect();
        let own: Vec<&FeatureVector> = records.iter().map(|r| &r.self_features).collect();
        let other: Vec<&FeatureVector> = records.iter().map(|r| &r.counterpart_features).collect();
        let mut e_i = model.embed_features(&model.feature, &own)?.into_data();
        let mut e_j = model.embed_features(model.counterpart_embedder(), &other)?.into_data();
        for (row, &i) in chunk.iter().enumerate() {
            let t = &corpus.targets[i];
            let start = records[row].start_time_ms();
            let si = delayed_state(&corpus.sessions[t.session], t.state, start, delay);
            let sj = delayed_state(&corpus.sessions[t.cp_session], t.cp_state, start, delay);
            for (x, s) in e_i[row * d..(row + 1) * d].iter_mut().zip(table(t.session).row(si)) {
                *x += s;
            }
            // Before phase 2 the counterpart side is the auxiliary embedding
            // alone.
            if model.state.phase2_done {
                for (x, s) in e_j[row * d..(row + 1) * d].iter_mut().zip(table(t.cp_session).row(sj)) {
                    *x += s;
                }
            }
        }
        let z = model.logits(
            &Tensor::matrix(chunk.len(), d, e_i)?,
            &Tensor::matrix(chunk.len(), d, e_j)?,
        )?;
        for (row, &i) in chunk.iter().enumerate() {
            let raw = model.head.duration_from_logit(z[row]);
            let ms = model.head.to_ms(raw);
            out.log_pred.push(log_scale(ms)?);
            out.log_true.push(records[row].log_duration());
            out.raw_pred.push(raw);
            out.pred_ms.push(ms);
            out.true_ms.push(records[row].duration_ms as f64);
            out.match_type.push(corpus.targets[i].match_type);
        }
    }
    Ok(out)
}

/// Row of an [`EvalReport`]: `Entire` or one match type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentMetrics {
    pub segment: String,
    pub count: usize,
    pub mse: Option<f64>,
    pub auroc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold_ms: f64,
    pub delay: String,
    pub segments: Vec<SegmentMetrics>,
}

pub const SEGMENTS: [&str; 4] = ["Entire", "Warm-Warm", "Warm-Cold", "Cold-Cold"];

impl EvalReport {
    pub fn from_predictions(p: &Predictions, threshold_ms: f64, delay: Delay) -> Result<Self> {
        if p.log_pred.is_empty() {
            return Err(Error::Empty("evaluation split"));
        }
        let mut segments = Vec::new();
        for name in SEGMENTS {
            let idx: Vec<usize> = (0..p.log_pred.len())
                .filter(|&i| name == "Entire" || p.match_type[i].label() == name)
                .collect();
            let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
            let (mse, auroc) = if idx.is_empty() {
                (None, None)
            } else {
                let labels: Vec<bool> = idx.iter().map(|&i| p.true_ms[i] > threshold_ms).collect();
                (
                    Some(mse_loss(&pick(&p.log_pred), &pick(&p.log_true))?),
                    auroc(&pick(&p.log_pred), &labels).ok(),
                )
            };
            segments.push(SegmentMetrics {
                segment: name.to_string(),
                count: idx.len(),
                mse,
                auroc,
            });
        }
        Ok(Self {
            threshold_ms,
            delay: delay.label(),
            segments,
        })
    }

    pub fn segment(&self, name: &str) -> &SegmentMetrics {
        self.segments
            .iter()
            .find(|s| s.segment == name)
            .expect("every report has all segments")
    }

    pub fn entire_mse(&self) -> f64 {
        self.segment("Entire").mse.unwrap_or(f64::NAN)
    }

    pub fn entire_auroc(&self) -> f64 {
        self.segment("Entire").auroc.unwrap_or(f64::NAN)
    }
}

pub fn evaluate(
    model: &CupidModel,
    corpus: &Corpus,
    split: Split,
    threshold_ms: f64,
    delay: Delay,
) -> Result<EvalReport> {
    let targets = corpus.in_split(split);
    let preds = predict_targets(model, corpus, &targets, delay)?;
    EvalReport::from_predictions(&preds, threshold_ms, delay)
}

/// Model variants compared by the ablation runner and the baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// Session states zeroed at train and eval time. This is also the
    /// feature-only baseline.
    NoSession,
    /// Stops after phase 1.
    NoSecondPhase,
    /// Linear head instead of the exponential transform.
    NoExp,
    /// No session states, rolling in-visit statistics added to the features.
    SessionStats,
}

impl Variant {
    pub const ABLATIONS: [Variant; 4] = [
        Variant::Full,
        Variant::NoSession,
        Variant::NoSecondPhase,
        Variant::NoExp,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSession => "no-session",
            Variant::NoSecondPhase => "no-sp",
            Variant::NoExp => "no-et",
            Variant::SessionStats => "session-stats",
        }
    }

    pub fn model_config(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        match self {
            Variant::Full | Variant::NoSecondPhase => {}
            Variant::NoSession => c.use_session = false,
            Variant::NoExp => c.head_mode = HeadMode::Linear,
            Variant::SessionStats => {
                c.use_session = false;
                c.use_stats = true;
            }
        }
        c
    }
}

/// Trains one variant with the two-phase procedure.
pub fn train_variant(
    variant: Variant,
    base: &ModelConfig,
    schema: crate::domain::FeatureSchema,
    corpus: &Corpus,
    cfg: &TrainingConfig,
    threshold_ms: f64,
    log: &mut Vec<EpochLog>,
) -> Result<CupidModel> {
    let mut model = CupidModel::new(variant.model_config(base), schema, cfg.seed)?;
    training::train_phase1(&mut model, corpus, cfg, threshold_ms, log)?;
    if variant != Variant::NoSecondPhase {
        training::train_phase2(&mut model, corpus, cfg, threshold_ms, log)?;
    }
    Ok(model)
}

/// Trains and evaluates the four ablation variants on one split. The
/// no-second-phase variant is the full model's phase-1 snapshot.
pub fn run_ablations(
    dataset: &Dataset,
    corpus: &Corpus,
    base: &ModelConfig,
    cfg: &TrainingConfig,
    threshold_ms: f64,
) -> Result<Vec<(Variant, EvalReport)>> {
    let mut rows = Vec::new();
    for v in Variant::ABLATIONS {
        let report = match v {
            Variant::Full => {
                let mut model = CupidModel::new(v.model_config(base), dataset.schema, cfg.seed)?;
                let mut log = Vec::new();
                training::train_phase1(&mut model, corpus, cfg, threshold_ms, &mut log)?;
                let snapshot = evaluate(&model, corpus, Split::Test, threshold_ms, Delay::Live)?;
                training::train_phase2(&mut model, corpus, cfg, threshold_ms, &mut log)?;
                rows.push((
                    Variant::Full,
                    evaluate(&model, corpus, Split::Test, threshold_ms, Delay::Live)?,
                ));
                rows.push((Variant::NoSecondPhase, snapshot));
                continue;
            }
            Variant::NoSecondPhase => continue,
            _ => {
                let model = train_variant(v, base, dataset.schema, corpus, cfg, threshold_ms, &mut Vec::new())?;
                evaluate(&model, corpus, Split::Test, threshold_ms, Delay::Live)?
            }
        };
        rows.push((v, report));
    }
    rows.sort_by_key(|(v, _)| Variant::ABLATIONS.iter().position(|a| a == v));
    Ok(rows)
}

/// Evaluates under each delay plus the never-updated diagnostic point.
pub fn run_delay_sweep(
    model: &CupidModel,
    corpus: &Corpus,
    split: Split,
    threshold_ms: f64,
    delays_ms: &[u64],
) -> Result<Vec<EvalReport>> {
    let mut rows = Vec::new();
    for &ms in delays_ms {
        let delay = if ms == 0 { Delay::Live } else { Delay::Millis(ms) };
        rows.push(evaluate(model, corpus, split, threshold_ms, delay)?);
    }
    rows.push(evaluate(model, corpus, split, threshold_ms, Delay::Never)?);
    Ok(rows)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:.6}"))
}

/// CSV with columns `label,delay_ms,segment,count,mse,auroc`.
pub fn write_reports_csv<W: Write>(w: W, rows: &[(String, EvalReport)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["label", "delay_ms", "segment", "count", "mse", "auroc"])?;
    for (label, report) in rows {
        for s in &report.segments {
            out.write_record([
                label.clone(),
                report.delay.clone(),
                s.segment.clone(),
                s.count.to_string(),
                fmt_opt(s.mse),
                fmt_opt(s.auroc),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Fixed-width text table of the same rows.
pub fn format_reports(rows: &[(String, EvalReport)]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<14} {:>8} {:<10} {:>8} {:>10} {:>8}",
        "label", "delay_ms", "segment", "count", "mse", "auroc"
    );
    for (label, report) in rows {
        for seg in &report.segments {
            let _ = writeln!(
                s,
                "{:<14} {:>8} {:<10} {:>8} {:>10} {:>8}",
                label,
                report.delay,
                seg.segment,
                seg.count,
                seg.mse.map_or("-".into(), |v| format!("{v:.4}")),
                seg.auroc.map_or("-".into(), |v| format!("{v:.4}")),
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.2, 0.9], &[true, false]).unwrap(), 0.0);
        assert_eq!(auroc(&[1.0, 1.0, 1.0], &[true, false, true]).unwrap(), 0.5);
        assert!(matches!(auroc(&[1.0, 2.0], &[true, true]), Err(Error::SingleClass)));
    }

    #[test]
    fn nearest_rank_examples() {
        let xs: Vec<f64> = (1..=10).map(|i| i as f64 * 10.0).collect();
        assert_eq!(nearest_rank(&xs, 90.0).unwrap(), 90.0);
        assert_eq!(nearest_rank(&xs, 50.0).unwrap(), 50.0);
        assert_eq!(nearest_rank(&xs, 99.0).unwrap(), 100.0);
        assert_eq!(nearest_rank(&xs, 1.0).unwrap(), 10.0);
    }

    #[test]
    fn ks_and_skew() {
        assert_eq!(ks_distance(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(ks_distance(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 1.0);
        assert_eq!(skewness(&[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!(skewness(&[1.0, 1.0, 1.0, 10.0]).unwrap() > 0.0);
    }

    #[test]
    fn delay_cutoff() {
        assert_eq!(Delay::Never.label(), "inf");
        assert_eq!(Delay::Millis(2000).label(), "2000");
    }
}
