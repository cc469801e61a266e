//! The frozen base model: shared embedding, pre-norm causal decoder layers,
//! final norm, LM head and classifier head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::{normal_tensor, StreamRng};
use crate::numerics::{Tape, Tensor, Var, LN_EPS};
use crate::params::{Bound, ParamId, ParamStore};
use crate::pipeline::ForwardTrace;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_width: usize,
    pub max_seq: usize,
    pub num_classes: usize,
}

impl Default for BaseConfig {
    fn default() -> Self {
        BaseConfig {
            vocab_size: 16,
            hidden: 32,
            layers: 4,
            heads: 4,
            mlp_width: 64,
            max_seq: 32,
            num_classes: 2,
        }
    }
}

impl BaseConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if self.vocab_size < 2 {
            errors.push(format!("base.vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.layers < 2 {
            errors.push(format!(
                "base.layers must be >= 2 (layer 0 stays adapter-free), got {}",
                self.layers
            ));
        }
        if self.heads == 0 || self.hidden == 0 || !self.hidden.is_multiple_of(self.heads) {
            errors.push(format!(
                "base.hidden ({}) must be a positive multiple of base.heads ({})",
                self.hidden, self.heads
            ));
        }
        if self.mlp_width == 0 {
            errors.push("base.mlp_width must be >= 1".into());
        }
        if self.max_seq == 0 {
            errors.push("base.max_seq must be >= 1".into());
        }
        if self.num_classes < 2 {
            errors.push(format!("base.num_classes must be >= 2, got {}", self.num_classes));
        }
    }
}

/// Token ids for a `[batch, seq]` input, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != batch * seq {
            return Err(Error::shape("TokenBatch", &[batch, seq], &[ids.len()]));
        }
        Ok(TokenBatch { batch, seq, ids })
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }
}

/// Which frozen projection of a block a [`LinearHook`] is wrapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

/// Lets an adapter add a parallel branch to a block's attention projections.
pub trait LinearHook {
    /// `frozen` is `x · W`; the return value replaces it.
    fn apply(&self, tape: &mut Tape, bound: &Bound, layer: usize, proj: Projection, x: Var, frozen: Var)
        -> Result<Var>;
}

/// Pre-norm decoder block: `h + Attn(LN(h))`, then `+ MLP(LN(·))`. All
/// linear maps are bias-free; the MLP uses SiLU.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub ln1: (ParamId, ParamId),
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub o: ParamId,
    pub ln2: (ParamId, ParamId),
    pub up: ParamId,
    pub down: ParamId,
    pub heads: usize,
}

impl DecoderBlock {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        heads: usize,
        mlp_width: usize,
        trainable: bool,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let mut w = |name: &str, shape: &[usize]| {
            store.insert(
                format!("{prefix}.{name}"),
                normal_tensor(shape, INIT_STD, rng),
                trainable,
            )
        };
        let q = w("attn.q", &[width, width])?;
        let k = w("attn.k", &[width, width])?;
        let v = w("attn.v", &[width, width])?;
        let o = w("attn.o", &[width, width])?;
        let up = w("mlp.up", &[width, mlp_width])?;
        let down = w("mlp.down", &[mlp_width, width])?;
        let ln1 = register_norm(store, &format!("{prefix}.ln1"), width, trainable)?;
        let ln2 = register_norm(store, &format!("{prefix}.ln2"), width, trainable)?;
        Ok(DecoderBlock {
            ln1,
            q,
            k,
            v,
            o,
            ln2,
            up,
            down,
            heads,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        h: Var,
        layer: usize,
        hook: Option<&dyn LinearHook>,
    ) -> Result<Var> {
        let x = tape.layer_norm(h, bound.get(self.ln1.0), bound.get(self.ln1.1), LN_EPS)?;
        let project = |tape: &mut Tape, w: ParamId, which: Projection, x: Var| -> Result<Var> {
            let frozen = tape.linear(x, bound.get(w))?;
            match hook {
                Some(hook) => hook.apply(tape, bound, layer, which, x, frozen),
                None => Ok(frozen),
            }
        };
        let q = project(tape, self.q, Projection::Query, x)?;
        let k = project(tape, self.k, Projection::Key, x)?;
        let v = project(tape, self.v, Projection::Value, x)?;
        let a = tape.causal_attention(q, k, v, self.heads)?;
        let a = project(tape, self.o, Projection::Output, a)?;
        let h = tape.add(h, a)?;

        let x = tape.layer_norm(h, bound.get(self.ln2.0), bound.get(self.ln2.1), LN_EPS)?;
        let m = tape.linear(x, bound.get(self.up))?;
        let m = tape.silu(m)?;
        let m = tape.linear(m, bound.get(self.down))?;
        tape.add(h, m)
    }

    pub fn param_ids(&self) -> [ParamId; 10] {
        [
            self.ln1.0, self.ln1.1, self.q, self.k, self.v, self.o, self.ln2.0, self.ln2.1, self.up, self.down,
        ]
    }

    /// Closed-form parameter count of one block.
    pub fn param_count(width: usize, mlp_width: usize) -> usize {
        4 * width * width + 2 * width * mlp_width + 4 * width
    }
}

pub(crate) fn register_norm(
    store: &mut ParamStore,
    prefix: &str,
    width: usize,
    trainable: bool,
) -> Result<(ParamId, ParamId)> {
    let g = store.insert(format!("{prefix}.gamma"), Tensor::filled(&[width], 1.0), trainable)?;
    let b = store.insert(format!("{prefix}.beta"), Tensor::zeros(&[width]), trainable)?;
    Ok((g, b))
}

#[derive(Debug, Clone)]
pub struct BaseModel {
    pub config: BaseConfig,
    pub embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub ln_f: (ParamId, ParamId),
    pub lm_head: ParamId,
    pub cls_head: ParamId,
}

impl BaseModel {
    /// Registers `base.*` parameters, initialized N(0, 0.02²) with unit norms.
    pub fn register(store: &mut ParamStore, config: &BaseConfig, trainable: bool, rng: &mut StreamRng) -> Result<Self> {
        Self::register_with_prefix(store, "base", config, trainable, rng)
    }

    pub fn register_with_prefix(
        store: &mut ParamStore,
        prefix: &str,
        config: &BaseConfig,
        trainable: bool,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let mut errors = Vec::new();
        config.validate(&mut errors);
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let d = config.hidden;
        let embed = store.insert(
            format!("{prefix}.embed"),
            normal_tensor(&[config.vocab_size, d], INIT_STD, rng),
            trainable,
        )?;
        let pos = store.insert(
            format!("{prefix}.pos"),
            normal_tensor(&[config.max_seq, d], INIT_STD, rng),
            trainable,
        )?;
        let blocks = (0..config.layers)
            .map(|l| {
                DecoderBlock::register(
                    store,
                    &format!("{prefix}.L{l}"),
                    d,
                    config.heads,
                    config.mlp_width,
                    trainable,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let ln_f = register_norm(store, &format!("{prefix}.ln_f"), d, trainable)?;
        let lm_head = store.insert(
            format!("{prefix}.lm_head"),
            normal_tensor(&[d, config.vocab_size], INIT_STD, rng),
            trainable,
        )?;
        let cls_head = store.insert(
            format!("{prefix}.cls_head"),
            normal_tensor(&[d, config.num_classes], INIT_STD, rng),
            trainable,
        )?;
        Ok(BaseModel {
            config: config.clone(),
            embed,
            pos,
            blocks,
            ln_f,
            lm_head,
            cls_head,
        })
    }

    /// Re-attaches to parameters already present in `store` under `prefix`.
    pub fn from_store(store: &ParamStore, prefix: &str, config: &BaseConfig) -> Result<Self> {
        let id = |n: String| store.id(&n);
        let blocks = (0..config.layers)
            .map(|l| block_from_store(store, &format!("{prefix}.L{l}"), config.heads))
            .collect::<Result<_>>()?;
        Ok(BaseModel {
            config: config.clone(),
            embed: id(format!("{prefix}.embed"))?,
            pos: id(format!("{prefix}.pos"))?,
            blocks,
            ln_f: (id(format!("{prefix}.ln_f.gamma"))?, id(format!("{prefix}.ln_f.beta"))?),
            lm_head: id(format!("{prefix}.lm_head"))?,
            cls_head: id(format!("{prefix}.cls_head"))?,
        })
    }

    /// Token plus learned absolute position embeddings, `[B,T,d]`. This is
    /// the single embedding computation per forward; the shadow consumes
    /// the same tensor.
    pub fn embed(&self, tape: &mut Tape, bound: &Bound, tokens: &TokenBatch, trace: &mut ForwardTrace) -> Result<Var> {
        let c = &self.config;
        if tokens.seq > c.max_seq {
            return Err(Error::Index {
                what: "sequence length",
                index: tokens.seq as i64,
                bound: c.max_seq,
            });
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::Index {
                what: "token",
                index: bad as i64,
                bound: c.vocab_size,
            });
        }
        trace.embedding_calls += 1;
        let tok = tape.gather_rows(bound.get(self.embed), &tokens.ids, c.hidden)?;
        let positions: Vec<usize> = (0..tokens.batch).flat_map(|_| 0..tokens.seq).collect();
        let pos = tape.gather_rows(bound.get(self.pos), &positions, c.hidden)?;
        let e = tape.add(tok, pos)?;
        tape.reshape(e, &[tokens.batch, tokens.seq, c.hidden])
    }

    pub fn layer_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        h: Var,
        layer: usize,
        hook: Option<&dyn LinearHook>,
        trace: &mut ForwardTrace,
    ) -> Result<Var> {
        let block = self.blocks.get(layer).ok_or(Error::Index {
            what: "base layer",
            index: layer as i64,
            bound: self.blocks.len(),
        })?;
        trace.base_layer_calls += 1;
        block.forward(tape, bound, h, layer, hook)
    }

    /// `h_base`: final norm applied to the last layer output.
    pub fn final_hidden(&self, tape: &mut Tape, bound: &Bound, h: Var) -> Result<Var> {
        tape.layer_norm(h, bound.get(self.ln_f.0), bound.get(self.ln_f.1), LN_EPS)
    }

    pub fn lm_logits(&self, tape: &mut Tape, bound: &Bound, h: Var) -> Result<Var> {
        tape.linear(h, bound.get(self.lm_head))
    }

    pub fn cls_logits(&self, tape: &mut Tape, bound: &Bound, pooled: Var) -> Result<Var> {
        tape.linear(pooled, bound.get(self.cls_head))
    }

    /// Adapter-free forward to `h_base`, optionally with a projection hook.
    pub fn forward_hidden(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: &TokenBatch,
        hook: Option<&dyn LinearHook>,
        trace: &mut ForwardTrace,
    ) -> Result<Var> {
        let mut h = self.embed(tape, bound, tokens, trace)?;
        for l in 0..self.config.layers {
            h = self.layer_forward(tape, bound, h, l, hook, trace)?;
        }
        self.final_hidden(tape, bound, h)
    }
}

pub(crate) fn block_from_store(store: &ParamStore, prefix: &str, heads: usize) -> Result<DecoderBlock> {
    let id = |n: &str| store.id(&format!("{prefix}.{n}"));
    Ok(DecoderBlock {
        ln1: (id("ln1.gamma")?, id("ln1.beta")?),
        q: id("attn.q")?,
        k: id("attn.k")?,
        v: id("attn.v")?,
        o: id("attn.o")?,
        ln2: (id("ln2.gamma")?, id("ln2.beta")?),
        up: id("mlp.up")?,
        down: id("mlp.down")?,
        heads,
    })
}
