//! Full network assembled from the configuration toggles.

use diffcore::{Graph, NodeId, ParamStore, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, SpatialFeatureMap};
use crate::causalhead::{causal_rep, predict, CausalMlp};
use crate::config::{ModelConfig, Toggles};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::image::{bilinear, RasterImage};
use crate::ivlearn::{confounder_loss, iv_loss, Decoder};
use crate::layers::{ClassScorer, Init, Linear};
use crate::semfuse::{embed_tokens, tokenize_pad, ConcatFusion, Fusion, TokenTable};

#[derive(Clone, Debug)]
enum Encoder {
    /// Shared backbone and query decoder with the two auxiliary heads.
    Decoupled {
        backbone: Backbone,
        decoder: Decoder,
        head_i: ClassScorer,
        head_c: ClassScorer,
    },
    /// Two independent backbones, each pooled and mapped to `k` rows.
    TwoStream {
        inst: Backbone,
        conf: Backbone,
        pool_i: Linear,
        pool_c: Linear,
    },
}

#[derive(Clone, Debug)]
enum FusionStage {
    Attend(Fusion),
    Concat(ConcatFusion),
}

/// Nodes produced for one sample.
#[derive(Clone, Copy, Debug)]
pub struct SampleOut {
    pub preliminary: NodeId,
    pub instrument: NodeId,
    pub confounder: NodeId,
    pub rep: NodeId,
    pub scores: NodeId,
    /// Final decoder attention `[k, h*w]` with its grid size.
    pub attention: Option<(NodeId, usize, usize)>,
    pub iv_loss: Option<NodeId>,
    pub confounder_loss: Option<NodeId>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub toggles: Toggles,
    pub k: usize,
    pub store: ParamStore,
    encoder: Encoder,
    tokens: TokenTable,
    fusion: FusionStage,
    rep: CausalMlp,
    cls: ClassScorer,
}

impl Model {
    pub fn new(cfg: &ModelConfig, toggles: Toggles, k: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if k < 2 {
            return Err(Error::contract("model needs at least two classes"));
        }
        let d = cfg.d;
        let mut store = ParamStore::new();
        let encoder = if toggles.iv_learning {
            Encoder::Decoupled {
                backbone: Backbone::new(&mut store, "bb", &cfg.backbone, d, rng)?,
                decoder: Decoder::new(&mut store, "dec", k, d, cfg.decoder_layers, rng)?,
                head_i: ClassScorer::new(&mut store, "head_i", k, d, rng),
                head_c: ClassScorer::new(&mut store, "head_c", k, d, rng),
            }
        } else {
            Encoder::TwoStream {
                inst: Backbone::new(&mut store, "bb_i", &cfg.backbone, d, rng)?,
                conf: Backbone::new(&mut store, "bb_c", &cfg.backbone, d, rng)?,
                pool_i: Linear::new(&mut store, "pool_i", d, k * d, Init::FanIn, rng),
                pool_c: Linear::new(&mut store, "pool_c", d, k * d, Init::FanIn, rng),
            }
        };
        let tokens = TokenTable::new(&mut store, "tok", cfg.vocab_size, cfg.fusion.d_t, rng);
        let fusion = if toggles.semantic_fusion {
            FusionStage::Attend(Fusion::new(&mut store, "fuse", &cfg.fusion, d, rng))
        } else {
            FusionStage::Concat(ConcatFusion::new(&mut store, "cat", d, cfg.fusion.d_t, rng))
        };
        let rep = CausalMlp::new(&mut store, "rep", d, cfg.causal_hidden, cfg.d_r, rng);
        let cls = ClassScorer::new(&mut store, "cls", k, cfg.d_r + d, rng);
        Ok(Self {
            cfg: cfg.clone(),
            toggles,
            k,
            store,
            encoder,
            tokens,
            fusion,
            rep,
            cls,
        })
    }

    /// Swaps in stored parameters after checking names and shapes.
    pub fn load_store(&mut self, store: ParamStore) -> Result<()> {
        if store.len() != self.store.len() {
            return Err(Error::contract(format!(
                "checkpoint has {} parameters, model has {}",
                store.len(),
                self.store.len()
            )));
        }
        for (a, b) in self.store.iter().zip(store.iter()) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                return Err(Error::contract(format!("checkpoint parameter {} does not match {}", b.name, a.name)));
            }
        }
        self.store = store;
        Ok(())
    }

    fn pooled_rows(&self, g: &mut Graph, store: &ParamStore, f: &SpatialFeatureMap, pool: &Linear) -> Result<NodeId> {
        let m = g.mean_axis(f.flat, 0)?;
        let m = g.reshape(m, &[1, f.d])?;
        let rows = pool.forward(g, store, m)?;
        Ok(g.reshape(rows, &[self.k, f.d])?)
    }

    /// Builds the forward pass for one sample. `with_aux_losses` also builds the
    /// instrument and confounder head losses against the sample labels.
    pub fn forward(&self, g: &mut Graph, sample: &Sample, with_aux_losses: bool, inference: bool) -> Result<SampleOut> {
        self.forward_with(g, &self.store, sample, with_aux_losses, inference)
    }

    /// [`Model::forward`] reading parameter values from `store`, which must have
    /// this model's layout.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sample: &Sample,
        with_aux_losses: bool,
        inference: bool,
    ) -> Result<SampleOut> {
        let (preliminary, confounder, attention, iv, conf_l) = match &self.encoder {
            Encoder::Decoupled {
                backbone,
                decoder,
                head_i,
                head_c,
            } => {
                let f = backbone.extract(g, store, &sample.image)?;
                let out = decoder.run(g, store, f.flat)?;
                let (iv, cl) = if with_aux_losses {
                    (
                        Some(iv_loss(g, store, head_i, out.instrument, &sample.labels)?),
                        Some(confounder_loss(g, store, head_c, out.confounder)?),
                    )
                } else {
                    (None, None)
                };
                (out.instrument, out.confounder, Some((out.attention, f.h, f.w)), iv, cl)
            }
            Encoder::TwoStream {
                inst,
                conf,
                pool_i,
                pool_c,
            } => {
                let fi = inst.extract(g, store, &sample.image)?;
                let fc = conf.extract(g, store, &sample.image)?;
                let i = self.pooled_rows(g, store, &fi, pool_i)?;
                let c = self.pooled_rows(g, store, &fc, pool_c)?;
                (i, c, None, None, None)
            }
        };
        let tokens = tokenize_pad(&sample.tokens, self.cfg.fusion.max_len);
        let emb = embed_tokens(g, store, &self.tokens, &tokens)?;
        let instrument = match &self.fusion {
            FusionStage::Attend(f) => f.fuse(g, store, preliminary, &emb, &tokens.ids)?,
            FusionStage::Concat(c) => c.fuse(g, store, preliminary, &emb)?,
        };
        let c_used = if inference && self.cfg.zero_confounder_at_test {
            let shape = g.shape(confounder).to_vec();
            g.constant(Tensor::zeros(&shape))
        } else {
            confounder
        };
        let rep = causal_rep(g, store, &self.rep, instrument, c_used)?;
        let scores = predict(g, store, &self.cls, rep, c_used, self.cfg.stop_grad_confounder)?;
        Ok(SampleOut {
            preliminary,
            instrument,
            confounder,
            rep,
            scores,
            attention,
            iv_loss: iv,
            confounder_loss: conf_l,
        })
    }

    pub fn scores(&self, sample: &Sample) -> Result<Vec<f64>> {
        let mut g = Graph::no_grad();
        let out = self.forward(&mut g, sample, false, true)?;
        Ok(g.value(out.scores).data().to_vec())
    }

    /// Final-layer attention row of `class` as an `h x w` grid summing to one.
    pub fn attention_grid(&self, sample: &Sample, class: usize) -> Result<(Vec<f64>, usize, usize)> {
        if class >= self.k {
            return Err(Error::contract(format!("class {class} out of range for k = {}", self.k)));
        }
        let mut g = Graph::no_grad();
        let out = self.forward(&mut g, sample, false, true)?;
        let (a, h, w) = out
            .attention
            .ok_or_else(|| Error::contract("attention maps need the query decoder (iv_learning on)"))?;
        Ok((g.value(a).row(class).to_vec(), h, w))
    }

    /// Attention grid bilinearly upsampled to the image size.
    pub fn attention_heatmap(&self, sample: &Sample, class: usize) -> Result<RasterImage> {
        let (grid, h, w) = self.attention_grid(sample, class)?;
        let (oh, ow) = (sample.image.height, sample.image.width);
        let up = bilinear(&grid, h, w, 1, oh, ow);
        RasterImage::new(oh, ow, 1, up.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }
}
