//! Decoder-only transformer whose feed-forward sublayers are MoE layers.
//!
//! Each block is pre-norm: `x += attn(norm(x))`, then `x += moe(norm(x))`.
//! Normalization is RMS-style with a learned gain. Attention is plain causal
//! multi-head attention with learned absolute position embeddings.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::moe::{select_topk, select_topp, Expert, ExpertSelection, FfnKind, MoeLayer, RouterWeights, ScoreFn};
use crate::param::{ParamId, ParamStore};
use crate::schedule::Routing;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_experts: usize,
    pub max_seq_len: usize,
    pub score_fn: ScoreFn,
    pub ffn: FfnKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 32,
            d_model: 64,
            d_ff: 64,
            num_layers: 4,
            num_heads: 4,
            num_experts: 16,
            max_seq_len: 64,
            score_fn: ScoreFn::Softmax,
            ffn: FfnKind::Gelu,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(config_err(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.num_heads != 0 {
            return Err(config_err(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.num_experts < 2 {
            return Err(config_err("an MoE layer needs at least 2 experts"));
        }
        Ok(())
    }

    /// Closed-form parameter count for this architecture.
    pub fn param_count(&self) -> usize {
        let (v, d, f, n) = (self.vocab_size, self.d_model, self.d_ff, self.num_experts);
        let expert_mats = match self.ffn {
            FfnKind::Gelu => 2,
            FfnKind::GatedSilu => 3,
        };
        let per_layer = 4 * d * d + 2 * d + d * n + n * expert_mats * d * f;
        v * d + self.max_seq_len * d + self.num_layers * per_layer + d + d * v
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub attn_norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub moe_norm: ParamId,
    pub moe: MoeLayer,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: ParamId,
    pub lm_head: ParamId,
}

/// Routing details of one MoE layer in a forward pass.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub logits: Var,
    pub scores: Var,
    pub selection: ExpertSelection,
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// `[tokens × vocab]`
    pub logits: Var,
    pub layers: Vec<LayerTrace>,
}

const INIT_STD: f64 = 0.02;

fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break (z * std) as f32;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

impl Model<f32> {
    /// Builds a freshly initialized model.
    pub fn build<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let resid_std = INIT_STD / (2.0 * config.num_layers as f64).sqrt();
        Self::assemble(config, |kind, shape| match kind {
            Init::Ones => Tensor::full(shape, 1.0),
            Init::Normal => trunc_normal(rng, shape, INIT_STD),
            Init::Residual => trunc_normal(rng, shape, resid_std),
        })
    }

    /// Builds a model with every weight set to zero (norm gains included).
    pub fn zeroed(config: &ModelConfig) -> Result<Self> {
        Self::assemble(config, |_, shape| Tensor::zeros(shape))
    }
}

enum Init {
    Ones,
    Normal,
    Residual,
}

impl<T: Scalar> Model<T> {
    fn assemble(config: &ModelConfig, mut init: impl FnMut(Init, &[usize]) -> Tensor<T>) -> Result<Self> {
        config.validate()?;
        let (v, d, f, n) = (config.vocab_size, config.d_model, config.d_ff, config.num_experts);
        let mut p = ParamStore::new();
        let tok_emb = p.add("embed.tok", init(Init::Normal, &[v, d]))?;
        let pos_emb = p.add("embed.pos", init(Init::Normal, &[config.max_seq_len, d]))?;
        let mut blocks = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let attn_norm = p.add(format!("layer.{l}.attn_norm"), init(Init::Ones, &[d]))?;
            let wq = p.add(format!("layer.{l}.attn.wq"), init(Init::Normal, &[d, d]))?;
            let wk = p.add(format!("layer.{l}.attn.wk"), init(Init::Normal, &[d, d]))?;
            let wv = p.add(format!("layer.{l}.attn.wv"), init(Init::Normal, &[d, d]))?;
            let wo = p.add(format!("layer.{l}.attn.wo"), init(Init::Residual, &[d, d]))?;
            let moe_norm = p.add(format!("layer.{l}.moe_norm"), init(Init::Ones, &[d]))?;
            let wg = p.add(format!("layer.{l}.router.Wg"), init(Init::Normal, &[d, n]))?;
            let mut experts = Vec::with_capacity(n);
            for e in 0..n {
                let w_in = p.add(format!("layer.{l}.expert.{e}.w_in"), init(Init::Normal, &[d, f]))?;
                let w_gate = match config.ffn {
                    FfnKind::Gelu => None,
                    FfnKind::GatedSilu => Some(p.add(format!("layer.{l}.expert.{e}.w_gate"), init(Init::Normal, &[d, f]))?),
                };
                let w_out = p.add(format!("layer.{l}.expert.{e}.w_out"), init(Init::Residual, &[f, d]))?;
                experts.push(Expert { w_in, w_gate, w_out });
            }
            blocks.push(Block {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                moe_norm,
                moe: MoeLayer {
                    layer_index: l,
                    router: RouterWeights {
                        wg,
                        score_fn: config.score_fn,
                    },
                    experts,
                },
            });
        }
        let final_norm = p.add("final_norm", init(Init::Ones, &[d]))?;
        let lm_head = p.add("lm_head", init(Init::Normal, &[d, v]))?;
        Ok(Model {
            config: config.clone(),
            params: p,
            tok_emb,
            pos_emb,
            blocks,
            final_norm,
            lm_head,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn moe_layers(&self) -> impl Iterator<Item = &MoeLayer> {
        self.blocks.iter().map(|b| &b.moe)
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            tok_emb: self.tok_emb,
            pos_emb: self.pos_emb,
            blocks: self.blocks.clone(),
            final_norm: self.final_norm,
            lm_head: self.lm_head,
        }
    }

    /// Router weights of layer `l` as an `N × d` matrix (one row per expert).
    pub fn gate_vectors(&self, l: usize) -> Tensor<T> {
        self.params.value(self.blocks[l].moe.router.wg).transpose()
    }

    fn check_routing(&self, routing: &Routing) -> Result<()> {
        if let Some(ks) = routing.ks() {
            if ks.len() != self.num_layers() {
                return Err(Error::Shape {
                    op: "schedule",
                    lhs: vec![ks.len()],
                    rhs: vec![self.num_layers()],
                });
            }
            if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > self.config.num_experts) {
                return Err(config_err(format!(
                    "schedule asks for k={k} but layers have {} experts",
                    self.config.num_experts
                )));
            }
        }
        Ok(())
    }

    /// Runs the model over packed sequences of `seq_len` tokens.
    pub fn forward(&self, g: &mut Graph<T>, inputs: &[usize], seq_len: usize, routing: &Routing) -> Result<ForwardPass> {
        self.check_routing(routing)?;
        if seq_len == 0 || seq_len > self.config.max_seq_len || inputs.len() % seq_len != 0 {
            return Err(config_err(format!(
                "{} tokens cannot be packed into sequences of {seq_len} (max {})",
                inputs.len(),
                self.config.max_seq_len
            )));
        }
        let store = &self.params;
        let tok = g.param(store, self.tok_emb);
        let pos = g.param(store, self.pos_emb);
        let positions: Vec<usize> = (0..inputs.len()).map(|i| i % seq_len).collect();
        let te = g.gather_rows(tok, inputs)?;
        let pe = g.gather_rows(pos, &positions)?;
        let mut x = g.add(te, pe)?;
        let mut layers = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let gain = g.param(store, block.attn_norm);
            let h = g.rms_norm(x, gain)?;
            let (wq, wk, wv, wo) = (
                g.param(store, block.wq),
                g.param(store, block.wk),
                g.param(store, block.wv),
                g.param(store, block.wo),
            );
            let q = g.matmul(h, wq)?;
            let k = g.matmul(h, wk)?;
            let v = g.matmul(h, wv)?;
            let a = g.attention(q, k, v, self.config.num_heads, seq_len)?;
            let o = g.matmul(a, wo)?;
            x = g.add(x, o)?;

            let gain = g.param(store, block.moe_norm);
            let h = g.rms_norm(x, gain)?;
            let router = block.moe.router_scores(g, store, h)?;
            let selection = match routing {
                Routing::TopK(s) => select_topk(g.value(router.scores), s.per_layer_k[l])?,
                Routing::TopP(p) => select_topp(g.value(router.scores), *p as f64)?,
            };
            let y = block.moe.forward(g, store, h, router.scores, &selection)?;
            x = g.add(x, y)?;
            layers.push(LayerTrace {
                logits: router.logits,
                scores: router.scores,
                selection,
            });
        }
        let gain = g.param(store, self.final_norm);
        let h = g.rms_norm(x, gain)?;
        let head = g.param(store, self.lm_head);
        let logits = g.matmul(h, head)?;
        Ok(ForwardPass { logits, layers })
    }
}

/// Per-token next-token cross-entropy computed directly from logits.
pub fn token_losses<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Vec<f64> {
    targets
        .iter()
        .enumerate()
        .map(|(t, &y)| {
            let row = logits.row(t);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
            let lse = max + row.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln();
            lse - row[y].f64()
        })
        .collect()
}

/// Index of the largest logit in each row (lowest index on ties).
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    (0..logits.rows())
        .map(|t| {
            let row = logits.row(t);
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
