//! Attached and detached forwards.
//!
//! Attached: embed once, build `s^(0)` from the shared embeddings, run base
//! layer 0 untouched, then for every base layer `ℓ = 1..L−1` inject, encode
//! and update. Layers are zero-based here, so the last update yields the
//! state after `L−1` refinements; that state is what classification pools.

use serde::{Deserialize, Serialize};

use crate::backbone::{BaseModel, TokenBatch};
use crate::error::{Error, Result};
use crate::injection::{Injection, InjectionConfig};
use crate::numerics::rng::{stream, Stream};
use crate::numerics::{DType, Tape, Var};
use crate::params::{Bound, ParamStore};
use crate::shadow::{ShadowBackbone, ShadowConfig, ShadowState};
use crate::update::{Update, UpdateConfig};

/// Dropout mode plus the keys of its random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardCtx {
    pub train: bool,
    pub seed: u64,
    pub step: u64,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            train: false,
            seed: 0,
            step: 0,
        }
    }

    pub fn train(seed: u64, step: u64) -> Self {
        ForwardCtx {
            train: true,
            seed,
            step,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerSnapshot {
    pub layer: usize,
    pub h_out: Var,
    pub s: Var,
}

/// Instrumentation for one forward.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub embedding_calls: usize,
    pub base_layer_calls: usize,
    pub shadow_layer_calls: usize,
    pub injections: usize,
    pub updates: usize,
    pub layers: Vec<LayerSnapshot>,
}

/// Which shadow state feeds the auxiliary LM loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossState {
    #[default]
    Initial,
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Hidden state at the last non-pad position.
    #[default]
    Last,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    #[default]
    Attached,
    Detached,
}

#[derive(Debug, Clone)]
pub struct AttachedOutput {
    pub h_base: Var,
    pub s_initial: Var,
    pub s_final: Var,
    pub trace: ForwardTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowPeftSettings {
    pub shadow: ShadowConfig,
    pub injection: InjectionConfig,
    pub update: UpdateConfig,
    pub lm_loss_state: LossState,
    pub pooling: Pooling,
}

#[derive(Debug, Clone)]
pub struct ShadowPeftModel {
    pub store: ParamStore,
    pub base: BaseModel,
    pub shadow: ShadowBackbone,
    pub injection: Injection,
    pub update: Update,
    pub settings: ShadowPeftSettings,
}

/// Init-stream component tags.
pub(crate) mod init_tag {
    pub const BASE: u64 = 0;
    pub const SHADOW: u64 = 1;
    pub const INJECT: u64 = 2;
    pub const UPDATE: u64 = 3;
    pub const LORA: u64 = 4;
}

impl ShadowPeftModel {
    /// Freezes every `base.*` tensor in `store` and registers the shadow,
    /// injection and update parameters next to them.
    pub fn attach(mut store: ParamStore, base: BaseModel, settings: ShadowPeftSettings, seed: u64) -> Result<Self> {
        store.set_trainable_prefix("base.", false);
        let d = base.config.hidden;
        let l = base.config.layers;
        let dtype = store.iter().next().map(|p| p.tensor.dtype()).unwrap_or_default();
        let shadow = ShadowBackbone::register(
            &mut store,
            &base,
            &settings.shadow,
            &mut stream(seed, Stream::Init, init_tag::SHADOW, 0),
        )?;
        let injection = Injection::register(
            &mut store,
            l,
            d,
            &settings.injection,
            &mut stream(seed, Stream::Init, init_tag::INJECT, 0),
        )?;
        let update = Update::register(
            &mut store,
            l,
            d,
            &settings.update,
            &mut stream(seed, Stream::Init, init_tag::UPDATE, 0),
        )?;
        store.set_dtype(dtype);
        Ok(ShadowPeftModel {
            store,
            base,
            shadow,
            injection,
            update,
            settings,
        })
    }

    /// Rebuilds the module views over a loaded store.
    pub fn from_store(
        store: ParamStore,
        base_config: &crate::backbone::BaseConfig,
        settings: ShadowPeftSettings,
    ) -> Result<Self> {
        let base = BaseModel::from_store(&store, "base", base_config)?;
        let shadow = ShadowBackbone::from_store(&store, &settings.shadow)?;
        let injection = Injection::from_store(&store, base_config.layers, &settings.injection)?;
        let update = Update::from_store(&store, base_config.layers, &settings.update)?;
        Ok(ShadowPeftModel {
            store,
            base,
            shadow,
            injection,
            update,
            settings,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.iter().next().map(|p| p.tensor.dtype()).unwrap_or_default()
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        self.store.bind(tape)
    }

    /// The interleaved pipeline up to `h_base` and the shadow states.
    pub fn attached_hidden(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: &TokenBatch,
        ctx: &ForwardCtx,
    ) -> Result<AttachedOutput> {
        let mut trace = ForwardTrace::default();
        let e = self.base.embed(tape, bound, tokens, &mut trace)?;
        let s0 = self.shadow.init_state(tape, bound, e, &mut trace)?;
        let mut h = self.base.layer_forward(tape, bound, e, 0, None, &mut trace)?;
        trace.layers.push(LayerSnapshot {
            layer: 0,
            h_out: h,
            s: s0.s,
        });
        let mut state: ShadowState = s0;
        for l in 1..self.base.config.layers {
            if state.cursor != l - 1 {
                return Err(Error::Sequencing {
                    expected: l - 1,
                    got: state.cursor,
                });
            }
            let injected = self.injection.apply(tape, bound, h, state.s, l, ctx)?;
            trace.injections += 1;
            h = self.base.layer_forward(tape, bound, injected, l, None, &mut trace)?;
            state = self.update.step(tape, bound, state, h, l, ctx)?;
            trace.updates += 1;
            trace.layers.push(LayerSnapshot {
                layer: l,
                h_out: h,
                s: state.s,
            });
        }
        let h_base = self.base.final_hidden(tape, bound, h)?;
        Ok(AttachedOutput {
            h_base,
            s_initial: s0.s,
            s_final: state.s,
            trace,
        })
    }

    /// `(base LM logits, shadow LM logits for the auxiliary loss, trace)`.
    pub fn attached_lm(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: &TokenBatch,
        ctx: &ForwardCtx,
    ) -> Result<(Var, Var, ForwardTrace)> {
        let out = self.attached_hidden(tape, bound, tokens, ctx)?;
        let base_logits = self.base.lm_logits(tape, bound, out.h_base)?;
        let s = match self.settings.lm_loss_state {
            LossState::Initial => out.s_initial,
            LossState::Final => out.s_final,
        };
        let shadow_logits = self.shadow.lm_logits(tape, bound, s)?;
        Ok((base_logits, shadow_logits, out.trace))
    }

    /// `(base class logits, shadow class logits on the pooled final state, trace)`.
    pub fn attached_cls(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: &TokenBatch,
        pad_mask: &[bool],
        ctx: &ForwardCtx,
    ) -> Result<(Var, Var, ForwardTrace)> {
        let out = self.attached_hidden(tape, bound, tokens, ctx)?;
        let hb = pool(tape, out.h_base, pad_mask, self.settings.pooling)?;
        let sb = pool(tape, out.s_final, pad_mask, self.settings.pooling)?;
        let base_logits = self.base.cls_logits(tape, bound, hb)?;
        let shadow_logits = self.shadow.cls_logits(tape, bound, sb)?;
        Ok((base_logits, shadow_logits, out.trace))
    }

    /// Shadow-only path: shared embedding, shadow backbone, projection.
    /// No base decoder layer runs.
    pub fn detached_state(&self, tape: &mut Tape, bound: &Bound, tokens: &TokenBatch) -> Result<(Var, ForwardTrace)> {
        let mut trace = ForwardTrace::default();
        let e = self.base.embed(tape, bound, tokens, &mut trace)?;
        let s0 = self.shadow.init_state(tape, bound, e, &mut trace)?;
        Ok((s0.s, trace))
    }

    pub fn detached_lm(&self, tape: &mut Tape, bound: &Bound, tokens: &TokenBatch) -> Result<(Var, ForwardTrace)> {
        let (s, trace) = self.detached_state(tape, bound, tokens)?;
        Ok((self.shadow.lm_logits(tape, bound, s)?, trace))
    }

    pub fn detached_cls(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: &TokenBatch,
        pad_mask: &[bool],
    ) -> Result<(Var, ForwardTrace)> {
        let (s, trace) = self.detached_state(tape, bound, tokens)?;
        let pooled = pool(tape, s, pad_mask, self.settings.pooling)?;
        Ok((self.shadow.cls_logits(tape, bound, pooled)?, trace))
    }
}

/// Reduces `h: [B,T,d]` to `[B,d]`. `pad_mask[b·T + t]` is true at padding.
pub fn pool(tape: &mut Tape, h: Var, pad_mask: &[bool], pooling: Pooling) -> Result<Var> {
    let shape = tape.shape(h).to_vec();
    let [b, t, d] = shape[..] else {
        return Err(Error::shape("pool", &shape, &[3]));
    };
    if pad_mask.len() != b * t {
        return Err(Error::shape("pool mask", &[b, t], &[pad_mask.len()]));
    }
    match pooling {
        Pooling::Last => {
            let rows = (0..b)
                .map(|r| {
                    (0..t)
                        .rev()
                        .find(|&p| !pad_mask[r * t + p])
                        .map(|p| r * t + p)
                        .ok_or(Error::Pooling { row: r })
                })
                .collect::<Result<Vec<_>>>()?;
            tape.gather_rows(h, &rows, d)
        }
        Pooling::Mean => {
            let mut weights = vec![0.0; b * b * t];
            for r in 0..b {
                let n = (0..t).filter(|&p| !pad_mask[r * t + p]).count();
                if n == 0 {
                    return Err(Error::Pooling { row: r });
                }
                for p in (0..t).filter(|&p| !pad_mask[r * t + p]) {
                    weights[r * b * t + r * t + p] = 1.0 / n as f64;
                }
            }
            let w = tape.constant(&[b, b * t], weights)?;
            let flat = tape.reshape(h, &[b * t, d])?;
            tape.matmul(w, flat)
        }
    }
}
