//! Parameter bundles for the layer types the models are built from.

use rand::Rng;

use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add_dense(format!("{name}.weight"), out_dim, in_dim, rng)?;
        let b = if bias {
            Some(store.add_filled(format!("{name}.bias"), &[out_dim], 0.0)?)
        } else {
            None
        };
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

/// Stack of dense layers with ReLU between layers and none after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists every width including input and output, e.g. `[in, h1, h2, out]`.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("mlp needs at least input and output widths".into()));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add_filled(format!("{name}.gain"), &[dim], 1.0)?,
            bias: store.add_filled(format!("{name}.bias"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Pre-norm transformer block: causal attention then a GELU MLP, each
/// wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl TransformerBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, true, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, true, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, 4 * dim, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), 4 * dim, dim, true, rng)?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId, segments: &[(usize, usize)]) -> Result<NodeId> {
        let h = self.ln1.forward(g, x)?;
        let qkv = self.qkv.forward(g, h)?;
        let att = g.causal_attention(qkv, self.heads, segments.to_vec())?;
        let att = self.proj.forward(g, att)?;
        let x = g.add(x, att)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h)?;
        g.add(x, h)
    }
}

/// Stack of causal blocks followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct CausalStack {
    pub blocks: Vec<TransformerBlock>,
    pub ln_f: LayerNorm,
}

impl CausalStack {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        layers: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| TransformerBlock::new(store, &format!("{name}.block{i}"), dim, heads, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            ln_f: LayerNorm::new(store, &format!("{name}.ln_f"), dim)?,
        })
    }

    /// Runs packed sequences through the stack; `segments` as in
    /// [`Graph::causal_attention`].
    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId, segments: &[(usize, usize)]) -> Result<NodeId> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, h, segments)?;
        }
        self.ln_f.forward(g, h)
    }
}
