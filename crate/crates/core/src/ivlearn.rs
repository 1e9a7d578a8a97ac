//! Query decoder that splits a feature map into instrument and confounder parts.

use diffcore::{Graph, NodeId, ParamId, ParamStore, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{bce_mean, kl_uniform, ClassScorer, Init, Linear};

/// Output of one decoder layer, all nodes in the same graph.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    /// `A F`, shape `[k, d]`.
    pub instrument: NodeId,
    /// `(1 - A) F`, shape `[k, d]`.
    pub confounder: NodeId,
    /// Row-stochastic attention, shape `[k, h*w]`.
    pub attention: NodeId,
}

pub fn decode_layer(g: &mut Graph, queries: NodeId, features: NodeId) -> Result<LayerOutput> {
    let (qs, fs) = (g.shape(queries).to_vec(), g.shape(features).to_vec());
    if qs.len() != 2 || fs.len() != 2 || qs[1] != fs[1] {
        return Err(Error::contract(format!("queries {qs:?} do not match features {fs:?}")));
    }
    let scores = g.matmul_nt(queries, features)?;
    let scores = g.scale(scores, 1.0 / (qs[1] as f64).sqrt())?;
    let attention = g.row_softmax(scores)?;
    let instrument = g.matmul(attention, features)?;
    let complement = g.rsub_scalar(1.0, attention)?;
    let confounder = g.matmul(complement, features)?;
    Ok(LayerOutput {
        instrument,
        confounder,
        attention,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    /// Preliminary instrument after the final projection.
    pub instrument: NodeId,
    pub confounder: NodeId,
    pub attention: NodeId,
}

/// Stack of decode layers with a learned projection after each one.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub queries: ParamId,
    pub projections: Vec<Linear>,
    /// Adds the layer input back onto the projection; always on in the model.
    pub residual: bool,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, name: &str, k: usize, d: usize, layers: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if layers == 0 {
            return Err(Error::contract("decoder needs at least one layer"));
        }
        let queries = store.add(format!("{name}.queries"), Tensor::zeros(&[k, d]));
        let projections = (0..layers)
            .map(|l| Linear::new(store, &format!("{name}.proj{l}"), d, d, Init::Zero, rng))
            .collect();
        Ok(Self {
            queries,
            projections,
            residual: true,
        })
    }

    pub fn layers(&self) -> usize {
        self.projections.len()
    }

    pub fn run(&self, g: &mut Graph, store: &ParamStore, features: NodeId) -> Result<DecoderOutput> {
        let mut q = g.param(store, self.queries);
        let mut last = None;
        for proj in &self.projections {
            let out = decode_layer(g, q, features)?;
            let mapped = proj.forward(g, store, out.instrument)?;
            q = if self.residual { g.add(out.instrument, mapped)? } else { mapped };
            last = Some(out);
        }
        let out = last.ok_or_else(|| Error::contract("decoder has no layers"))?;
        Ok(DecoderOutput {
            instrument: q,
            confounder: out.confounder,
            attention: out.attention,
        })
    }
}

/// Per-class affine score on instrument rows followed by mean binary cross-entropy.
pub fn iv_loss(g: &mut Graph, store: &ParamStore, head: &ClassScorer, instrument: NodeId, labels: &[f64]) -> Result<NodeId> {
    let logits = head.logits(g, store, instrument)?;
    let probs = g.sigmoid(logits)?;
    bce_mean(g, probs, labels)
}

/// KL from the uniform distribution to the softmax over confounder class scores.
pub fn confounder_loss(g: &mut Graph, store: &ParamStore, head: &ClassScorer, confounder: NodeId) -> Result<NodeId> {
    if g.shape(confounder)[0] < 2 {
        return Err(Error::contract("confounder loss needs k >= 2"));
    }
    let logits = head.logits(g, store, confounder)?;
    let probs = g.row_softmax(logits)?;
    kl_uniform(g, probs)
}
