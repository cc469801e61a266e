//! One interface over the shadow-adapted model and the LoRA baseline.

use serde::{Deserialize, Serialize};

use crate::backbone::{BaseModel, TokenBatch};
use crate::error::{Error, Result};
use crate::lora::LoraModel;
use crate::numerics::{DType, Tape, Var};
use crate::params::{Bound, ParamStore};
use crate::pipeline::{pool, ForwardCtx, ForwardTrace, InferenceMode, ShadowPeftModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Shadow,
    Lora,
}

/// Logits of one forward. `primary` is what predictions use; `shadow` is
/// the auxiliary shadow output, present only for attached shadow forwards.
#[derive(Debug, Clone)]
pub struct Forward {
    pub primary: Var,
    pub shadow: Option<Var>,
    pub trace: ForwardTrace,
}

#[derive(Debug, Clone)]
pub enum AdaptedModel {
    Shadow(Box<ShadowPeftModel>),
    Lora(Box<LoraModel>),
}

impl AdaptedModel {
    pub fn method(&self) -> Method {
        match self {
            AdaptedModel::Shadow(_) => Method::Shadow,
            AdaptedModel::Lora(_) => Method::Lora,
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            AdaptedModel::Shadow(m) => &m.store,
            AdaptedModel::Lora(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            AdaptedModel::Shadow(m) => &mut m.store,
            AdaptedModel::Lora(m) => &mut m.store,
        }
    }

    pub fn base(&self) -> &BaseModel {
        match self {
            AdaptedModel::Shadow(m) => &m.base,
            AdaptedModel::Lora(m) => &m.base,
        }
    }

    pub fn dtype(&self) -> DType {
        self.store().iter().next().map(|p| p.tensor.dtype()).unwrap_or_default()
    }

    pub fn tape(&self) -> Tape {
        Tape::new(self.dtype())
    }

    pub fn lm_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: &TokenBatch,
        ctx: &ForwardCtx,
        mode: InferenceMode,
    ) -> Result<Forward> {
        match (self, mode) {
            (AdaptedModel::Shadow(m), InferenceMode::Attached) => {
                let (primary, shadow, trace) = m.attached_lm(tape, bound, tokens, ctx)?;
                Ok(Forward {
                    primary,
                    shadow: Some(shadow),
                    trace,
                })
            }
            (AdaptedModel::Shadow(m), InferenceMode::Detached) => {
                let (primary, trace) = m.detached_lm(tape, bound, tokens)?;
                Ok(Forward {
                    primary,
                    shadow: None,
                    trace,
                })
            }
            (AdaptedModel::Lora(m), InferenceMode::Attached) => {
                let (h, trace) = m.hidden(tape, bound, tokens, ctx)?;
                Ok(Forward {
                    primary: m.base.lm_logits(tape, bound, h)?,
                    shadow: None,
                    trace,
                })
            }
            (AdaptedModel::Lora(_), InferenceMode::Detached) => Err(lora_detached()),
        }
    }

    pub fn cls_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: &TokenBatch,
        pad_mask: &[bool],
        ctx: &ForwardCtx,
        mode: InferenceMode,
    ) -> Result<Forward> {
        match (self, mode) {
            (AdaptedModel::Shadow(m), InferenceMode::Attached) => {
                let (primary, shadow, trace) = m.attached_cls(tape, bound, tokens, pad_mask, ctx)?;
                Ok(Forward {
                    primary,
                    shadow: Some(shadow),
                    trace,
                })
            }
            (AdaptedModel::Shadow(m), InferenceMode::Detached) => {
                let (primary, trace) = m.detached_cls(tape, bound, tokens, pad_mask)?;
                Ok(Forward {
                    primary,
                    shadow: None,
                    trace,
                })
            }
            (AdaptedModel::Lora(m), InferenceMode::Attached) => {
                let (h, trace) = m.hidden(tape, bound, tokens, ctx)?;
                let pooled = pool(tape, h, pad_mask, m.pooling)?;
                Ok(Forward {
                    primary: m.base.cls_logits(tape, bound, pooled)?,
                    shadow: None,
                    trace,
                })
            }
            (AdaptedModel::Lora(_), InferenceMode::Detached) => Err(lora_detached()),
        }
    }
    /// Greedy continuation of `prompt` by `max_new` tokens. The longest
    /// sequence fed to the model is `prompt.len() + max_new - 1`, which must
    /// fit `max_seq`.
    pub fn generate(&self, prompt: &[usize], max_new: usize, mode: InferenceMode) -> Result<Vec<usize>> {
        let max_seq = self.base().config.max_seq;
        let fed = prompt.len() + max_new.saturating_sub(1);
        if prompt.is_empty() || fed > max_seq {
            return Err(Error::Index {
                what: "generation length",
                index: fed as i64,
                bound: max_seq,
            });
        }
        let mut seq = prompt.to_vec();
        let ctx = ForwardCtx::eval();
        for _ in 0..max_new {
            let tokens = TokenBatch::new(1, seq.len(), seq.clone())?;
            let mut tape = self.tape();
            let bound = self.store().bind(&mut tape)?;
            let f = self.lm_forward(&mut tape, &bound, &tokens, &ctx, mode)?;
            let v = *tape.shape(f.primary).last().unwrap_or(&1);
            let logits = tape.value(f.primary);
            let last = &logits[logits.len() - v..];
            let mut best = 0;
            for (i, &x) in last.iter().enumerate() {
                if x > last[best] {
                    best = i;
                }
            }
            seq.push(best);
        }
        Ok(seq)
    }
}

fn lora_detached() -> Error {
    Error::Mode("the LoRA baseline has no detached path".into())
}

impl From<ShadowPeftModel> for AdaptedModel {
    fn from(m: ShadowPeftModel) -> Self {
        AdaptedModel::Shadow(Box::new(m))
    }
}

impl From<LoraModel> for AdaptedModel {
    fn from(m: LoraModel) -> Self {
        AdaptedModel::Lora(Box::new(m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn model() -> AdaptedModel {
        let c = RunConfig::default();
        let (store, base) = c.init_base().unwrap();
        c.attach(store, base).unwrap().0
    }

    #[test]
    fn generate_echoes_prompt_and_is_deterministic() {
        let m = model();
        assert_eq!(
            m.generate(&[1, 2, 3], 0, InferenceMode::Attached).unwrap(),
            vec![1, 2, 3]
        );
        let a = m.generate(&[1, 2, 3], 5, InferenceMode::Detached).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(a, m.generate(&[1, 2, 3], 5, InferenceMode::Detached).unwrap());
    }

    #[test]
    fn generate_rejects_overflow() {
        let m = model();
        let prompt = vec![0; 30];
        assert!(m.generate(&prompt, 3, InferenceMode::Attached).is_ok());
        assert!(matches!(
            m.generate(&prompt, 4, InferenceMode::Attached),
            Err(Error::Index { .. })
        ));
        assert!(m.generate(&[], 1, InferenceMode::Attached).is_err());
    }
}
