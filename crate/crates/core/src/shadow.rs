//! The centralized shadow backbone. It consumes the base model's shared
//! embedding output, runs its own decoder layers, and emits the initial
//! shadow state at base width.

use serde::{Deserialize, Serialize};

use crate::backbone::{block_from_store, register_norm, BaseConfig, DecoderBlock, INIT_STD};
use crate::error::{Error, Result};
use crate::numerics::rng::{normal_tensor, StreamRng};
use crate::numerics::{Tape, Var, LN_EPS};
use crate::params::{Bound, ParamId, ParamStore};
use crate::pipeline::ForwardTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ShadowMode {
    /// Derived from the base configuration by shrinking depth (and
    /// optionally width).
    #[default]
    Implicit,
    /// Dimensions supplied directly.
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShadowConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_width: usize,
    pub mode: ShadowMode,
    /// Explicit cross-scale attachment: the projections always exist, the
    /// shadow keeps its own final norm, and the LM path reuses the frozen
    /// base head through the projection.
    #[serde(default)]
    pub cross_scale: bool,
}

impl ShadowConfig {
    pub fn validate(&self, base: &BaseConfig, errors: &mut Vec<String>) {
        if self.layers == 0 {
            errors.push("shadow layers must be >= 1".into());
        }
        if self.mode == ShadowMode::Implicit && self.layers >= base.layers {
            errors.push(format!(
                "implicit shadow must be shallower than the base: {} >= {}",
                self.layers, base.layers
            ));
        }
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            errors.push(format!(
                "shadow hidden ({}) must be a positive multiple of shadow heads ({})",
                self.hidden, self.heads
            ));
        }
        if self.mlp_width == 0 {
            errors.push("shadow mlp_width must be >= 1".into());
        }
        if self.cross_scale && self.mode != ShadowMode::Explicit {
            errors.push("cross-scale attachment requires an explicit shadow".into());
        }
    }
}

/// Implicit shadow dimensions from fractions of the base. Depth is
/// `max(1, round(f·L))`; width is rounded to a multiple of the scaled head
/// count.
pub fn derive_implicit_config(base: &BaseConfig, layer_fraction: f64, width_fraction: f64) -> Result<ShadowConfig> {
    let mut errors = Vec::new();
    for (name, f) in [("layer_fraction", layer_fraction), ("width_fraction", width_fraction)] {
        if !(f > 0.0 && f <= 1.0) {
            errors.push(format!("shadow.{name} must be in (0, 1], got {f}"));
        }
    }
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    let layers = ((layer_fraction * base.layers as f64).round() as usize).max(1);
    let heads = ((width_fraction * base.heads as f64).round() as usize).max(1);
    let target = width_fraction * base.hidden as f64;
    let hidden = (((target / heads as f64).round() as usize).max(1)) * heads;
    let mlp_width = ((width_fraction * base.mlp_width as f64).round() as usize).max(1);
    let cfg = ShadowConfig {
        layers,
        hidden,
        heads,
        mlp_width,
        mode: ShadowMode::Implicit,
        cross_scale: false,
    };
    cfg.validate(base, &mut errors);
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    Ok(cfg)
}

/// Shadow state `s^(ℓ)`: always base width; `cursor` is the last base layer
/// whose update produced it.
#[derive(Debug, Clone, Copy)]
pub struct ShadowState {
    pub s: Var,
    pub cursor: usize,
}

/// Which LM head the shadow path uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShadowHead {
    /// Trainable `shadow.lm_head`.
    Own(ParamId),
    /// The frozen base LM head, reached through the projection.
    SharedBase(ParamId),
}

impl ShadowHead {
    pub fn id(self) -> ParamId {
        match self {
            ShadowHead::Own(id) | ShadowHead::SharedBase(id) => id,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ShadowBackbone {
    pub config: ShadowConfig,
    pub w_in: Option<ParamId>,
    pub blocks: Vec<DecoderBlock>,
    pub final_norm: Option<(ParamId, ParamId)>,
    pub w_proj: Option<ParamId>,
    pub lm_head: ShadowHead,
    pub cls_head: ParamId,
}

impl ShadowBackbone {
    /// Registers trainable `shadow.*` parameters. The classifier head is a
    /// bitwise copy of the base classifier; no embedding table is created.
    pub fn register(
        store: &mut ParamStore,
        base: &crate::backbone::BaseModel,
        config: &ShadowConfig,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let mut errors = Vec::new();
        config.validate(&base.config, &mut errors);
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let d = base.config.hidden;
        let ds = config.hidden;
        let bridged = ds != d || config.cross_scale;
        let w_in = if bridged {
            Some(store.insert("shadow.in", normal_tensor(&[d, ds], INIT_STD, rng), true)?)
        } else {
            None
        };
        let blocks = (0..config.layers)
            .map(|l| {
                DecoderBlock::register(
                    store,
                    &format!("shadow.L{l}"),
                    ds,
                    config.heads,
                    config.mlp_width,
                    true,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let final_norm = if config.cross_scale {
            Some(register_norm(store, "shadow.ln_f", ds, true)?)
        } else {
            None
        };
        let w_proj = if bridged {
            Some(store.insert("shadow.proj", normal_tensor(&[ds, d], INIT_STD, rng), true)?)
        } else {
            None
        };
        let lm_head = if config.cross_scale {
            ShadowHead::SharedBase(base.lm_head)
        } else {
            ShadowHead::Own(store.insert(
                "shadow.lm_head",
                normal_tensor(&[d, base.config.vocab_size], INIT_STD, rng),
                true,
            )?)
        };
        let cls_copy = store.get(base.cls_head).clone();
        let cls_head = store.insert("shadow.cls_head", cls_copy, true)?;
        Ok(ShadowBackbone {
            config: config.clone(),
            w_in,
            blocks,
            final_norm,
            w_proj,
            lm_head,
            cls_head,
        })
    }

    pub fn from_store(store: &ParamStore, config: &ShadowConfig) -> Result<Self> {
        let blocks = (0..config.layers)
            .map(|l| block_from_store(store, &format!("shadow.L{l}"), config.heads))
            .collect::<Result<_>>()?;
        let lm_head = match store.id("shadow.lm_head") {
            Ok(id) => ShadowHead::Own(id),
            Err(_) => ShadowHead::SharedBase(store.id("base.lm_head")?),
        };
        Ok(ShadowBackbone {
            config: config.clone(),
            w_in: store.id("shadow.in").ok(),
            blocks,
            final_norm: match (store.id("shadow.ln_f.gamma"), store.id("shadow.ln_f.beta")) {
                (Ok(g), Ok(b)) => Some((g, b)),
                _ => None,
            },
            w_proj: store.id("shadow.proj").ok(),
            lm_head,
            cls_head: store.id("shadow.cls_head")?,
        })
    }

    /// `s^(0)`: optional input projection, shadow layers, optional output
    /// projection. The result is base width with cursor 0.
    pub fn init_state(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x_embeds: Var,
        trace: &mut ForwardTrace,
    ) -> Result<ShadowState> {
        let mut h = match self.w_in {
            Some(w) => tape.linear(x_embeds, bound.get(w))?,
            None => x_embeds,
        };
        let width = *tape.shape(h).last().unwrap_or(&0);
        if width != self.config.hidden {
            return Err(Error::shape("shadow input width", &[width], &[self.config.hidden]));
        }
        for (l, block) in self.blocks.iter().enumerate() {
            trace.shadow_layer_calls += 1;
            h = block.forward(tape, bound, h, l, None)?;
        }
        if let Some((g, b)) = self.final_norm {
            h = tape.layer_norm(h, bound.get(g), bound.get(b), LN_EPS)?;
        }
        let s = match self.w_proj {
            Some(w) => tape.linear(h, bound.get(w))?,
            None => h,
        };
        Ok(ShadowState { s, cursor: 0 })
    }

    pub fn lm_logits(&self, tape: &mut Tape, bound: &Bound, s: Var) -> Result<Var> {
        tape.linear(s, bound.get(self.lm_head.id()))
    }

    pub fn cls_logits(&self, tape: &mut Tape, bound: &Bound, pooled: Var) -> Result<Var> {
        tape.linear(pooled, bound.get(self.cls_head))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn implicit_depth_rounds_and_clamps() {
        let mut base = BaseConfig {
            layers: 8,
            ..BaseConfig::default()
        };
        assert_eq!(derive_implicit_config(&base, 0.25, 1.0).unwrap().layers, 2);
        base.layers = 4;
        assert_eq!(derive_implicit_config(&base, 0.1, 1.0).unwrap().layers, 1);
    }

    #[test]
    fn full_width_keeps_base_dims() {
        let base = BaseConfig::default();
        let c = derive_implicit_config(&base, 0.25, 1.0).unwrap();
        assert_eq!((c.hidden, c.heads, c.mlp_width), (32, 4, 64));
    }

    #[test]
    fn half_width_scales_heads() {
        let base = BaseConfig::default();
        let c = derive_implicit_config(&base, 0.25, 0.5).unwrap();
        assert_eq!((c.hidden, c.heads, c.mlp_width), (16, 2, 32));
        assert_eq!(c.hidden % c.heads, 0);
    }

    #[test]
    fn implicit_shadow_cannot_match_base_depth() {
        let base = BaseConfig::default();
        assert!(matches!(derive_implicit_config(&base, 1.0, 1.0), Err(Error::Config(_))));
        assert!(derive_implicit_config(&base, 0.0, 1.0).is_err());
    }
}
