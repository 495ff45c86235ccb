//! The assembled recommender: feature embedders, session encoder and
//! prediction head sharing one parameter store.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{FeatureSchema, FeatureVector, MatchRecord, Session};
use crate::embedding::{FeatureEmbedder, InferenceCounter, SessionEncoder};
use crate::error::{Error, Result};
use crate::numerics::{Checkpoint, Graph, ParamStore, Tensor};
use crate::prediction::{HeadMode, PredictionHead};

pub const FEATURE_PREFIX: &str = "feature/";
pub const AUX_FEATURE_PREFIX: &str = "aux_feature/";
pub const SESSION_PREFIX: &str = "session/";
pub const HEAD_PREFIX: &str = "head/";

/// Sessions packed into one encoder pass when building state tables.
const STATE_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Width `d` of every user, session and match representation.
    pub dim: usize,
    /// Width `p` of the projected spaces in the head.
    pub proj_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Hidden widths of the deep part of each Wide & Deep embedder.
    pub hidden: Vec<usize>,
    /// Per-field embedding width in the deep part.
    pub cat_dim: usize,
    pub max_session_len: usize,
    /// False replaces every session representation with zeros.
    pub use_session: bool,
    /// Feed the rolling in-visit statistics to the feature embedders. Off
    /// for the full model, whose session encoder sees the history itself;
    /// on for the session-statistics baseline.
    pub use_stats: bool,
    pub head_mode: HeadMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            proj_dim: 16,
            layers: 2,
            heads: 2,
            hidden: vec![64, 32],
            cat_dim: 8,
            max_session_len: 32,
            use_session: true,
            use_stats: false,
            head_mode: HeadMode::Exponential,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.proj_dim == 0 || self.max_session_len == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Progress recorded alongside the parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub joint_epochs: usize,
    /// Once the head has been trained on full counterpart representations
    /// the auxiliary embedder is no longer used at inference.
    pub phase2_done: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    schema: FeatureSchema,
    state: TrainState,
    #[serde(default)]
    extra: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct CupidModel {
    pub config: ModelConfig,
    pub schema: FeatureSchema,
    pub store: ParamStore,
    pub feature: FeatureEmbedder,
    pub aux_feature: FeatureEmbedder,
    pub session: SessionEncoder,
    pub head: PredictionHead,
    pub state: TrainState,
}

impl CupidModel {
    pub fn new(config: ModelConfig, schema: FeatureSchema, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let feature = FeatureEmbedder::new(
            &mut store,
            "feature/embed",
            schema,
            c.cat_dim,
            &c.hidden,
            c.dim,
            c.use_stats,
            &mut rng,
        )?;
        let aux_feature = FeatureEmbedder::new(
            &mut store,
            "aux_feature/embed",
            schema,
            c.cat_dim,
            &c.hidden,
            c.dim,
            c.use_stats,
            &mut rng,
        )?;
        let session = SessionEncoder::new(
            &mut store,
            "session/encoder",
            schema,
            c.cat_dim,
            &c.hidden,
            c.dim,
            c.layers,
            c.heads,
            c.max_session_len,
            InferenceCounter::new(),
            &mut rng,
        )?;
        let head = PredictionHead::new(&mut store, "head/predict", c.dim, c.proj_dim, c.head_mode, &mut rng)?;
        Ok(Self {
            config,
            schema,
            store,
            feature,
            aux_feature,
            session,
            head,
            state: TrainState::default(),
        })
    }

    pub fn counter(&self) -> &InferenceCounter {
        &self.session.counter
    }

    /// Session encoder sharing parameters but counting into a private
    /// counter; used by evaluation so it never perturbs training accounting.
    pub fn uncounted_encoder(&self) -> SessionEncoder {
        let mut enc = self.session.clone();
        enc.counter = InferenceCounter::new();
        enc
    }

    pub fn zero_state(&self) -> Vec<f64> {
        vec![0.0; self.config.dim]
    }

    /// Prefix states of `records`, or zeros when sessions are disabled.
    pub fn prefix_states(&self, encoder: &SessionEncoder, records: &[MatchRecord]) -> Result<Vec<Vec<f64>>> {
        if self.config.use_session {
            encoder.prefix_states(&self.store, records)
        } else {
            Ok(vec![self.zero_state(); records.len() + 1])
        }
    }

    /// Every prefix state of each session as a `[len + 1, d]` table, packing
    /// sessions that fit the encoder window into shared passes. Each session
    /// costs one stack forward; none when sessions are disabled.
    pub fn state_tables(&self, encoder: &SessionEncoder, sessions: &[&Session]) -> Result<Vec<Tensor>> {
        let d = self.config.dim;
        if !self.config.use_session {
            return sessions
                .iter()
                .map(|s| Tensor::matrix(s.len() + 1, d, vec![0.0; (s.len() + 1) * d]))
                .collect();
        }
        let mut out: Vec<Option<Tensor>> = vec![None; sessions.len()];
        let fits: Vec<usize> = (0..sessions.len())
            .filter(|&i| sessions[i].len() <= self.config.max_session_len)
            .collect();
        for chunk in fits.chunks(STATE_BATCH) {
            let mut g = Graph::new(&self.store);
            let seqs: Vec<&[MatchRecord]> = chunk.iter().map(|&i| sessions[i].records()).collect();
            let batch = encoder.encode_batch(&mut g, &seqs)?;
            let v = g.value(batch.states);
            for (s, &i) in chunk.iter().enumerate() {
                let rows = batch.kept[s] + 1;
                let from = batch.row(s, 0) * d;
                out[i] = Some(Tensor::matrix(rows, d, v[from..from + rows * d].to_vec())?);
            }
        }
        for (i, slot) in out.iter_mut().enumerate() {
            if slot.is_none() {
                let states = encoder.prefix_states(&self.store, sessions[i].records())?;
                let rows = states.len();
                *slot = Some(Tensor::matrix(rows, d, states.concat())?);
            }
        }
        Ok(out.into_iter().map(|t| t.expect("filled above")).collect())
    }

    /// Feature embeddings `[n, d]` for a batch of snapshots.
    pub fn embed_features(&self, embedder: &FeatureEmbedder, feats: &[&FeatureVector]) -> Result<Tensor> {
        if feats.is_empty() {
            return Tensor::matrix(0, self.config.dim, Vec::new());
        }
        let mut g = Graph::new(&self.store);
        let e = embedder.embed(&mut g, feats)?;
        Ok(g.tensor(e))
    }

    /// The embedder used for the counterpart side at inference.
    pub fn counterpart_embedder(&self) -> &FeatureEmbedder {
        if self.state.phase2_done {
            &self.feature
        } else {
            &self.aux_feature
        }
    }

    /// Head logits for row-aligned representation tables.
    pub fn logits(&self, e_i: &Tensor, e_j: &Tensor) -> Result<Vec<f64>> {
        if e_i.rows() == 0 {
            return Ok(Vec::new());
        }
        let mut g = Graph::new(&self.store);
        let a = g.input_tensor(e_i);
        let b = g.input_tensor(e_j);
        let z = self.head.forward_logit(&mut g, a, b)?;
        Ok(g.value(z).to_vec())
    }

    pub fn empty_state(&self) -> Result<Vec<f64>> {
        if self.config.use_session {
            self.session.empty_state(&self.store)
        } else {
            Ok(self.zero_state())
        }
    }

    pub fn feature_embedding(&self, f: &FeatureVector) -> Result<Vec<f64>> {
        self.feature.embed_one(&self.store, f)
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = CheckpointMeta {
            model: self.config.clone(),
            schema: self.schema,
            state: self.state.clone(),
            extra,
        };
        Checkpoint::from_store(&self.store, serde_json::to_string(&meta)?).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let meta: CheckpointMeta =
            serde_json::from_str(&ck.meta).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let mut model = Self::new(meta.model, meta.schema, 0)?;
        ck.restore_into(&mut model.store)?;
        model.state = meta.state;
        Ok(model)
    }

    /// Loads parameters from `path` into this model; the architecture must match.
    pub fn restore(&mut self, path: &Path) -> Result<()> {
        let ck = Checkpoint::load(path)?;
        let meta: CheckpointMeta =
            serde_json::from_str(&ck.meta).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        if meta.model != self.config || meta.schema != self.schema {
            return Err(Error::Checkpoint(
                "checkpoint model config differs from the requested one".into(),
            ));
        }
        ck.restore_into(&mut self.store)?;
        self.state = meta.state;
        Ok(())
    }
}
