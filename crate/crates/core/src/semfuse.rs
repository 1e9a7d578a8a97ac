//! Auxiliary token records: padding, embedding, and fusion into the query set.

use std::fs;
use std::path::Path;

use diffcore::{fan_in_uniform, Graph, NodeId, ParamId, ParamStore, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Init, Linear};

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const CLS_TOKEN: &str = "<cls>";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EhrTokens {
    pub ids: Vec<u32>,
    pub max_len: usize,
}

impl EhrTokens {
    pub fn mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&t| t != PAD_ID).collect()
    }
}

/// `[CLS, w1 .. wn, 0 ..]`, right-truncated to `max_len`.
pub fn tokenize_pad(words: &[u32], max_len: usize) -> EhrTokens {
    let mut ids = Vec::with_capacity(max_len);
    if max_len > 0 {
        ids.push(CLS_ID);
        ids.extend(words.iter().take(max_len - 1));
        ids.resize(max_len, PAD_ID);
    }
    EhrTokens { ids, max_len }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pub tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != CLS_TOKEN {
            return Err(Error::contract("vocabulary must start with <pad> and <cls>"));
        }
        Ok(Self { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.tokens.iter().position(|t| t == token).map(|i| i as u32)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        for (line, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Parse {
                    path: path.into(),
                    line: line + 1,
                    msg: "token must be a non-empty word".into(),
                });
            }
        }
        Self::new(tokens).map_err(|e| Error::Parse {
            path: path.into(),
            line: 1,
            msg: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Trainable `vocab x d_t` table.
#[derive(Clone, Debug)]
pub struct TokenTable {
    pub table: ParamId,
    pub vocab: usize,
    pub d_t: usize,
}

impl TokenTable {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, d_t: usize, rng: &mut ChaCha8Rng) -> Self {
        let table = store.add(format!("{name}.table"), fan_in_uniform(rng, &[vocab, d_t], 1));
        Self { table, vocab, d_t }
    }
}

/// Embedded record: `[max_len, d_t]` with zero rows at pad positions.
#[derive(Clone, Debug)]
pub struct TokenEmbeddings {
    pub node: NodeId,
    pub mask: Vec<bool>,
}

impl TokenEmbeddings {
    pub fn real_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn one_hot_rows(ids: &[u32], vocab: usize) -> Result<Tensor> {
    let mut data = vec![0.0; ids.len() * vocab];
    for (i, &t) in ids.iter().enumerate() {
        if t as usize >= vocab {
            return Err(Error::contract(format!("token id {t} outside vocabulary of {vocab}")));
        }
        if t != PAD_ID {
            data[i * vocab + t as usize] = 1.0;
        }
    }
    Ok(Tensor::new(&[ids.len(), vocab], data)?)
}

pub fn embed_tokens(g: &mut Graph, store: &ParamStore, table: &TokenTable, tokens: &EhrTokens) -> Result<TokenEmbeddings> {
    if tokens.ids.is_empty() {
        return Err(Error::contract("empty token buffer"));
    }
    let hot = g.constant(one_hot_rows(&tokens.ids, table.vocab)?);
    let t = g.param(store, table.table);
    Ok(TokenEmbeddings {
        node: g.matmul(hot, t)?,
        mask: tokens.mask(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub layers: usize,
    pub d_t: usize,
    pub ffn_hidden: usize,
    pub max_len: usize,
    /// Feed the classification position into attention along with the word tokens.
    pub include_cls: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_t: 64,
            ffn_hidden: 128,
            max_len: 256,
            include_cls: true,
        }
    }
}

#[derive(Clone, Debug)]
struct FusionLayer {
    out: Linear,
    ffn_in: Linear,
    ffn_out: Linear,
}

/// Cross-attention stack: queries attend over projected token embeddings.
#[derive(Clone, Debug)]
pub struct Fusion {
    proj: Linear,
    layers: Vec<FusionLayer>,
    include_cls: bool,
    d: usize,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &FusionConfig, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let proj = Linear::new(store, &format!("{name}.proj"), cfg.d_t, d, Init::FanIn, rng);
        let layers = (0..cfg.layers)
            .map(|l| FusionLayer {
                out: Linear::new(store, &format!("{name}.l{l}.out"), d, d, Init::Zero, rng),
                ffn_in: Linear::new(store, &format!("{name}.l{l}.ffn_in"), d, cfg.ffn_hidden, Init::FanIn, rng),
                ffn_out: Linear::new(store, &format!("{name}.l{l}.ffn_out"), cfg.ffn_hidden, d, Init::Zero, rng),
            })
            .collect();
        Self {
            proj,
            layers,
            include_cls: cfg.include_cls,
            d,
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Positions that take part in attention.
    pub fn support(&self, emb: &TokenEmbeddings, ids: &[u32]) -> Vec<usize> {
        emb.mask
            .iter()
            .zip(ids)
            .enumerate()
            .filter(|(_, (&m, &t))| m && (self.include_cls || t != CLS_ID))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn fuse(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: NodeId,
        emb: &TokenEmbeddings,
        ids: &[u32],
    ) -> Result<NodeId> {
        if g.shape(queries)[1] != self.d {
            return Err(Error::contract(format!(
                "queries have width {}, fusion expects {}",
                g.shape(queries)[1],
                self.d
            )));
        }
        let support = self.support(emb, ids);
        if self.layers.is_empty() || support.is_empty() {
            return Ok(queries);
        }
        let len = emb.mask.len();
        let mut sel = vec![0.0; support.len() * len];
        for (r, &p) in support.iter().enumerate() {
            sel[r * len + p] = 1.0;
        }
        let sel = g.constant(Tensor::new(&[support.len(), len], sel)?);
        let picked = g.matmul(sel, emb.node)?;
        let keys = self.proj.forward(g, store, picked)?;
        let inv_sqrt_d = 1.0 / (self.d as f64).sqrt();
        let mut q = queries;
        for layer in &self.layers {
            let s = g.matmul_nt(q, keys)?;
            let s = g.scale(s, inv_sqrt_d)?;
            let a = g.row_softmax(s)?;
            let att = g.matmul(a, keys)?;
            let o = layer.out.forward(g, store, att)?;
            q = g.add(q, o)?;
            let h = layer.ffn_in.forward(g, store, q)?;
            let h = g.relu(h)?;
            let f = layer.ffn_out.forward(g, store, h)?;
            q = g.add(q, f)?;
        }
        Ok(q)
    }
}

/// Replacement used when fusion is switched off: the mean token embedding is
/// appended to every query row and mapped back to width `d`.
#[derive(Clone, Debug)]
pub struct ConcatFusion {
    map: Linear,
    d_t: usize,
}

impl ConcatFusion {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_t: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            map: Linear::new(store, &format!("{name}.map"), d + d_t, d, Init::FanIn, rng),
            d_t,
        }
    }

    pub fn fuse(&self, g: &mut Graph, store: &ParamStore, queries: NodeId, emb: &TokenEmbeddings) -> Result<NodeId> {
        let k = g.shape(queries)[0];
        let n = emb.real_count();
        let bag = if n == 0 {
            g.constant(Tensor::zeros(&[1, self.d_t]))
        } else {
            let w: Vec<f64> = emb.mask.iter().map(|&m| if m { 1.0 / n as f64 } else { 0.0 }).collect();
            let w = g.constant(Tensor::new(&[1, emb.mask.len()], w)?);
            g.matmul(w, emb.node)?
        };
        let ones = g.constant(Tensor::full(&[k, 1], 1.0));
        let tiled = g.matmul(ones, bag)?;
        let joined = g.concat_last(&[queries, tiled])?;
        self.map.forward(g, store, joined)
    }
}
