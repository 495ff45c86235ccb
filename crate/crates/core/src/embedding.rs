//! Feature embedders and the causal session encoder.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use crate::domain::{FeatureSchema, FeatureVector, MatchRecord, Session, UserId};
use crate::error::{Error, Result};
use crate::numerics::{CausalStack, Graph, Linear, Mlp, NodeId, ParamId, ParamStore, Tensor};

/// Numeric inputs are rescaled to order one before entering a network:
/// `ln(1 + count) / COUNT_SCALE` and `log_duration / LOG_DURATION_SCALE`.
pub const COUNT_SCALE: f64 = 3.5;
pub const LOG_DURATION_SCALE: f64 = 10.0;

fn scaled_numeric(f: &FeatureVector, use_stats: bool) -> [f64; 3] {
    if !use_stats {
        return [0.0; 3];
    }
    let s = f.stats;
    [
        (s.match_count as f64).ln_1p() / COUNT_SCALE,
        s.mean_log_duration / LOG_DURATION_SCALE,
        s.last_log_duration / LOG_DURATION_SCALE,
    ]
}

/// Wide & Deep network over categorical slots plus a numeric block.
///
/// The wide part sums one row per slot from a `[cardinality, out]` table
/// (a linear map over one-hot codes) and a linear map of the numeric block.
/// The deep part concatenates small per-slot embeddings with the numeric
/// block and runs an MLP. The output is the sum of both parts.
#[derive(Clone, Debug)]
pub struct WideDeep {
    pub cardinalities: Vec<usize>,
    pub numeric_len: usize,
    pub out_dim: usize,
    wide_tables: Vec<ParamId>,
    wide_numeric: Linear,
    deep_tables: Vec<ParamId>,
    deep: Mlp,
}

impl WideDeep {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cardinalities: &[usize],
        numeric_len: usize,
        cat_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut wide_tables = Vec::new();
        let mut deep_tables = Vec::new();
        for (i, &card) in cardinalities.iter().enumerate() {
            wide_tables.push(store.add_embedding(format!("{name}.wide.cat{i}"), card, out_dim, rng)?);
            deep_tables.push(store.add_embedding(format!("{name}.deep.cat{i}"), card, cat_dim, rng)?);
        }
        let wide_numeric = Linear::new(store, &format!("{name}.wide.numeric"), numeric_len, out_dim, true, rng)?;
        let mut dims = vec![cardinalities.len() * cat_dim + numeric_len];
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        let deep = Mlp::new(store, &format!("{name}.deep.mlp"), &dims, rng)?;
        Ok(Self {
            cardinalities: cardinalities.to_vec(),
            numeric_len,
            out_dim,
            wide_tables,
            wide_numeric,
            deep_tables,
            deep,
        })
    }

    /// `cats[slot][row]` category codes, `numeric` row-major `[rows, numeric_len]`.
    pub fn forward(&self, g: &mut Graph<'_>, cats: &[Vec<usize>], numeric: Vec<f64>) -> Result<NodeId> {
        if cats.len() != self.cardinalities.len() {
            return Err(Error::shape("wide_deep", "slot count mismatch"));
        }
        let rows = numeric.len() / self.numeric_len.max(1);
        let num = g.input(rows, self.numeric_len, numeric)?;
        let mut out = self.wide_numeric.forward(g, num)?;
        let mut deep_parts = Vec::with_capacity(cats.len() + 1);
        for (slot, codes) in cats.iter().enumerate() {
            let wt = g.param(self.wide_tables[slot]);
            let w = g.select_rows(wt, codes.clone())?;
            out = g.add(out, w)?;
            let dt = g.param(self.deep_tables[slot]);
            deep_parts.push(g.select_rows(dt, codes.clone())?);
        }
        deep_parts.push(num);
        let deep_in = g.concat_cols(&deep_parts)?;
        let deep = self.deep.forward(g, deep_in)?;
        g.add(out, deep)
    }
}

/// Synchronous user feature embedder (`f_u`, and the auxiliary `f̃_u`).
#[derive(Clone, Debug)]
pub struct FeatureEmbedder {
    pub net: WideDeep,
    pub schema: FeatureSchema,
    /// When false the rolling numeric statistics are masked to zero.
    pub use_stats: bool,
}

impl FeatureEmbedder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        schema: FeatureSchema,
        cat_dim: usize,
        hidden: &[usize],
        dim: usize,
        use_stats: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let cards = [schema.gender_cardinality as usize, schema.country_cardinality as usize];
        Ok(Self {
            net: WideDeep::new(
                store,
                name,
                &cards,
                FeatureVector::NUMERIC_LEN,
                cat_dim,
                hidden,
                dim,
                rng,
            )?,
            schema,
            use_stats,
        })
    }

    /// Embeds a batch of feature vectors into `[n, d]`.
    pub fn embed(&self, g: &mut Graph<'_>, feats: &[&FeatureVector]) -> Result<NodeId> {
        let mut gender = Vec::with_capacity(feats.len());
        let mut country = Vec::with_capacity(feats.len());
        let mut numeric = Vec::with_capacity(feats.len() * 3);
        for f in feats {
            f.validate(&self.schema)?;
            gender.push(f.demographics.gender as usize);
            country.push(f.demographics.country as usize);
            numeric.extend(scaled_numeric(f, self.use_stats));
        }
        self.net.forward(g, &[gender, country], numeric)
    }

    pub fn embed_one(&self, store: &ParamStore, f: &FeatureVector) -> Result<Vec<f64>> {
        let mut g = Graph::new(store);
        let n = self.embed(&mut g, &[f])?;
        Ok(g.value(n).to_vec())
    }
}

/// Per-match-history embedder producing `e^m` from both snapshots and the
/// log-scaled duration. The match end time is not an input.
#[derive(Clone, Debug)]
pub struct MatchEmbedder {
    pub net: WideDeep,
    pub schema: FeatureSchema,
}

impl MatchEmbedder {
    pub const NUMERIC_LEN: usize = 2 * FeatureVector::NUMERIC_LEN + 1;

    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        schema: FeatureSchema,
        cat_dim: usize,
        hidden: &[usize],
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let g = schema.gender_cardinality as usize;
        let c = schema.country_cardinality as usize;
        Ok(Self {
            net: WideDeep::new(store, name, &[g, c, g, c], Self::NUMERIC_LEN, cat_dim, hidden, dim, rng)?,
            schema,
        })
    }

    pub fn embed(&self, g: &mut Graph<'_>, records: &[&MatchRecord]) -> Result<NodeId> {
        let mut cats: Vec<Vec<usize>> = (0..4).map(|_| Vec::with_capacity(records.len())).collect();
        let mut numeric = Vec::with_capacity(records.len() * Self::NUMERIC_LEN);
        for r in records {
            r.self_features.validate(&self.schema)?;
            r.counterpart_features.validate(&self.schema)?;
            cats[0].push(r.self_features.demographics.gender as usize);
            cats[1].push(r.self_features.demographics.country as usize);
            cats[2].push(r.counterpart_features.demographics.gender as usize);
            cats[3].push(r.counterpart_features.demographics.country as usize);
            numeric.extend(scaled_numeric(&r.self_features, true));
            numeric.extend(scaled_numeric(&r.counterpart_features, true));
            numeric.push(r.log_duration() / LOG_DURATION_SCALE);
        }
        self.net.forward(g, &cats, numeric)
    }
}

/// Counts causal-transformer stack forward passes, one per encoded session.
#[derive(Clone, Debug, Default)]
pub struct InferenceCounter(Arc<AtomicU64>);

impl InferenceCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

/// Session representations after each prefix: row `k` is the state after
/// the first `k` kept matches, row 0 the empty-session representation.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionStates {
    pub owner: UserId,
    pub states: Tensor,
}

impl SessionStates {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state(&self, k: usize) -> &[f64] {
        self.states.row(k)
    }

    pub fn last(&self) -> &[f64] {
        self.states.row(self.len() - 1)
    }
}

/// Packed rows produced by [`SessionEncoder::encode_batch`].
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    pub states: NodeId,
    /// Row offset of each session's start token.
    pub offsets: Vec<usize>,
    /// Number of records kept per session after truncation.
    pub kept: Vec<usize>,
}

impl EncodedBatch {
    /// Row holding the state after `k` kept records of session `s`.
    pub fn row(&self, s: usize, k: usize) -> usize {
        self.offsets[s] + k
    }
}

/// Asynchronous session layer `f_s`: match embedder, learned start token,
/// learned absolute positions and a causal transformer stack.
#[derive(Clone, Debug)]
pub struct SessionEncoder {
    pub matches: MatchEmbedder,
    pub start: ParamId,
    pub positions: ParamId,
    pub stack: CausalStack,
    pub max_session_len: usize,
    pub dim: usize,
    pub counter: InferenceCounter,
}

impl SessionEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        schema: FeatureSchema,
        cat_dim: usize,
        hidden: &[usize],
        dim: usize,
        layers: usize,
        heads: usize,
        max_session_len: usize,
        counter: InferenceCounter,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            matches: MatchEmbedder::new(store, &format!("{name}.match"), schema, cat_dim, hidden, dim, rng)?,
            start: store.add_embedding(format!("{name}.start"), 1, dim, rng)?,
            positions: store.add_embedding(format!("{name}.positions"), max_session_len + 1, dim, rng)?,
            stack: CausalStack::new(store, &format!("{name}.stack"), dim, layers, heads, rng)?,
            max_session_len,
            dim,
            counter,
        })
    }

    /// Records actually fed to the transformer: the most recent
    /// `max_session_len` of them.
    pub fn kept<'a>(&self, records: &'a [MatchRecord]) -> &'a [MatchRecord] {
        let skip = records.len().saturating_sub(self.max_session_len);
        &records[skip..]
    }

    /// Encodes several sessions in one packed pass. Each session counts as
    /// one stack forward.
    pub fn encode_batch(&self, g: &mut Graph<'_>, sessions: &[&[MatchRecord]]) -> Result<EncodedBatch> {
        if sessions.is_empty() {
            return Err(Error::Empty("encode_batch"));
        }
        let kept: Vec<&[MatchRecord]> = sessions.iter().map(|s| self.kept(s)).collect();
        let all: Vec<&MatchRecord> = kept.iter().flat_map(|s| s.iter()).collect();
        let start = g.param(self.start);
        let source = if all.is_empty() {
            start
        } else {
            let emb = self.matches.embed(g, &all)?;
            g.concat_rows(&[start, emb])?
        };
        // Row 0 of `source` is the start token, record i sits at row i + 1.
        let mut pick = Vec::new();
        let mut pos = Vec::new();
        let mut segments = Vec::new();
        let mut offsets = Vec::new();
        let mut next_record = 1;
        for s in &kept {
            offsets.push(pick.len());
            segments.push((pick.len(), s.len() + 1));
            pick.push(0);
            pos.push(0);
            for k in 0..s.len() {
                pick.push(next_record);
                pos.push(k + 1);
                next_record += 1;
            }
        }
        let tokens = g.select_rows(source, pick)?;
        let pos_table = g.param(self.positions);
        let pos_rows = g.select_rows(pos_table, pos)?;
        let x = g.add(tokens, pos_rows)?;
        let states = self.stack.forward(g, x, &segments)?;
        self.counter.add(sessions.len() as u64);
        Ok(EncodedBatch {
            states,
            offsets,
            kept: kept.iter().map(|s| s.len()).collect(),
        })
    }

    /// All prefix states of one session (after truncation).
    pub fn encode_session(&self, store: &ParamStore, session: &Session) -> Result<SessionStates> {
        let mut g = Graph::new(store);
        let batch = self.encode_batch(&mut g, &[session.records()])?;
        let rows = batch.kept[0] + 1;
        let v = g.value(batch.states);
        Ok(SessionStates {
            owner: session.owner(),
            states: Tensor::matrix(rows, self.dim, v[..rows * self.dim].to_vec())?,
        })
    }

    /// Final state of many sessions in one packed pass; used by serving.
    pub fn encode_final_many(&self, store: &ParamStore, sessions: &[&[MatchRecord]]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new(store);
        let batch = self.encode_batch(&mut g, sessions)?;
        let v = g.value(batch.states);
        Ok((0..sessions.len())
            .map(|s| {
                let r = batch.row(s, batch.kept[s]);
                v[r * self.dim..(r + 1) * self.dim].to_vec()
            })
            .collect())
    }

    /// State after each prefix `records[..r]` for `r` in `0..=len`,
    /// honoring truncation of every prefix. One pass when the session fits.
    pub fn prefix_states(&self, store: &ParamStore, records: &[MatchRecord]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new(store);
        let head_len = records.len().min(self.max_session_len);
        let batch = self.encode_batch(&mut g, &[&records[..head_len]])?;
        let v = g.value(batch.states);
        let mut out: Vec<Vec<f64>> = (0..=head_len)
            .map(|k| v[k * self.dim..(k + 1) * self.dim].to_vec())
            .collect();
        if records.len() > head_len {
            let tails: Vec<&[MatchRecord]> = (head_len + 1..=records.len()).map(|r| &records[..r]).collect();
            out.extend(self.encode_final_many(store, &tails)?);
        }
        Ok(out)
    }

    /// The empty-session representation (start token through the stack).
    pub fn empty_state(&self, store: &ParamStore) -> Result<Vec<f64>> {
        Ok(self.encode_final_many(store, &[&[]])?.remove(0))
    }
}
