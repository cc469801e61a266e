//! Low-rank adapters on the query and value projections of every base
//! layer, used as the budget-matched baseline.

use serde::{Deserialize, Serialize};

use crate::backbone::{BaseConfig, BaseModel, LinearHook, Projection, TokenBatch};
use crate::error::{Error, Result};
use crate::numerics::rng::{normal_tensor, stream, Stream};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::pipeline::{init_tag, ForwardCtx, ForwardTrace, Pooling};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Replace `rank` with the largest rank that fits the shadow budget.
    pub match_budget: bool,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 32,
            alpha: 32.0,
            dropout: 0.05,
            match_budget: true,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if self.rank == 0 {
            errors.push("lora.rank must be >= 1".into());
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            errors.push(format!("lora.alpha must be >= 0, got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errors.push(format!("lora.dropout must be in [0, 1), got {}", self.dropout));
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoraPair {
    pub a: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct LoraAdapters {
    pub config: LoraConfig,
    /// `(query, value)` per base layer.
    layers: Vec<(LoraPair, LoraPair)>,
}

impl LoraAdapters {
    /// `A ~ N(0, 1/d_in)`, `B = 0`.
    pub fn register(store: &mut ParamStore, base: &BaseConfig, config: &LoraConfig, seed: u64) -> Result<Self> {
        let mut errors = Vec::new();
        config.validate(&mut errors);
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let d = base.hidden;
        let r = config.rank;
        let mut rng = stream(seed, Stream::Init, init_tag::LORA, 0);
        let std = 1.0 / (d as f64).sqrt();
        let mut pair = |store: &mut ParamStore, name: String| -> Result<LoraPair> {
            Ok(LoraPair {
                a: store.insert(format!("{name}.a"), normal_tensor(&[d, r], std, &mut rng), true)?,
                b: store.insert(format!("{name}.b"), Tensor::zeros(&[r, d]), true)?,
            })
        };
        let layers = (0..base.layers)
            .map(|l| {
                Ok((
                    pair(store, format!("lora.L{l}.q"))?,
                    pair(store, format!("lora.L{l}.v"))?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(LoraAdapters {
            config: config.clone(),
            layers,
        })
    }

    pub fn from_store(store: &ParamStore, base: &BaseConfig, config: &LoraConfig) -> Result<Self> {
        let pair = |name: String| -> Result<LoraPair> {
            Ok(LoraPair {
                a: store.id(&format!("{name}.a"))?,
                b: store.id(&format!("{name}.b"))?,
            })
        };
        let layers = (0..base.layers)
            .map(|l| Ok((pair(format!("lora.L{l}.q"))?, pair(format!("lora.L{l}.v"))?)))
            .collect::<Result<_>>()?;
        Ok(LoraAdapters {
            config: config.clone(),
            layers,
        })
    }

    pub fn param_count(base: &BaseConfig, rank: usize) -> usize {
        base.layers * 2 * 2 * base.hidden * rank
    }
}

/// `x·W + scale · Dropout(x·A) · B`.
#[allow(clippy::too_many_arguments)]
pub fn lora_linear(
    tape: &mut Tape,
    x: Var,
    w_frozen: Var,
    a: Var,
    b: Var,
    scale: f64,
    dropout: f64,
    train: bool,
    rng: &mut impl rand::Rng,
) -> Result<Var> {
    let frozen = tape.linear(x, w_frozen)?;
    lora_branch(tape, x, frozen, a, b, scale, dropout, train, rng)
}

#[allow(clippy::too_many_arguments)]
fn lora_branch(
    tape: &mut Tape,
    x: Var,
    frozen: Var,
    a: Var,
    b: Var,
    scale: f64,
    dropout: f64,
    train: bool,
    rng: &mut impl rand::Rng,
) -> Result<Var> {
    let z = tape.linear(x, a)?;
    let z = tape.dropout(z, dropout, train, rng)?;
    let z = tape.linear(z, b)?;
    let z = tape.scale(z, scale)?;
    tape.add(frozen, z)
}

struct LoraHook<'a> {
    adapters: &'a LoraAdapters,
    ctx: ForwardCtx,
}

impl LinearHook for LoraHook<'_> {
    fn apply(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        layer: usize,
        proj: Projection,
        x: Var,
        frozen: Var,
    ) -> Result<Var> {
        let (q, v) = self.adapters.layers[layer];
        let (pair, site) = match proj {
            Projection::Query => (q, 0),
            Projection::Value => (v, 1),
            Projection::Key | Projection::Output => return Ok(frozen),
        };
        let cfg = &self.adapters.config;
        let mut rng = stream(
            self.ctx.seed,
            Stream::LoraDropout,
            (layer * 2 + site) as u64,
            self.ctx.step,
        );
        lora_branch(
            tape,
            x,
            frozen,
            bound.get(pair.a),
            bound.get(pair.b),
            cfg.scale(),
            cfg.dropout,
            self.ctx.train,
            &mut rng,
        )
    }
}

#[derive(Debug, Clone)]
pub struct LoraModel {
    pub store: ParamStore,
    pub base: BaseModel,
    pub adapters: LoraAdapters,
    pub pooling: Pooling,
}

impl LoraModel {
    pub fn attach(
        mut store: ParamStore,
        base: BaseModel,
        config: &LoraConfig,
        pooling: Pooling,
        seed: u64,
    ) -> Result<Self> {
        store.set_trainable_prefix("base.", false);
        let dtype = store.iter().next().map(|p| p.tensor.dtype()).unwrap_or_default();
        let adapters = LoraAdapters::register(&mut store, &base.config, config, seed)?;
        store.set_dtype(dtype);
        Ok(LoraModel {
            store,
            base,
            adapters,
            pooling,
        })
    }

    pub fn from_store(
        store: ParamStore,
        base_config: &BaseConfig,
        config: &LoraConfig,
        pooling: Pooling,
    ) -> Result<Self> {
        let base = BaseModel::from_store(&store, "base", base_config)?;
        let adapters = LoraAdapters::from_store(&store, base_config, config)?;
        Ok(LoraModel {
            store,
            base,
            adapters,
            pooling,
        })
    }

    /// `h_base` after the final norm.
    pub fn hidden(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: &TokenBatch,
        ctx: &ForwardCtx,
    ) -> Result<(Var, ForwardTrace)> {
        let mut trace = ForwardTrace::default();
        let hook = LoraHook {
            adapters: &self.adapters,
            ctx: *ctx,
        };
        let h = self.base.forward_hidden(tape, bound, tokens, Some(&hook), &mut trace)?;
        Ok((h, trace))
    }
}

/// Result of fitting the baseline rank to a trainable-parameter budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BudgetMatch {
    pub rank: usize,
    pub lora_count: usize,
    pub shadow_count: usize,
    /// `(shadow_count − lora_count) / shadow_count`.
    pub gap: f64,
}

/// Largest LoRA rank whose trainable count does not exceed `shadow_count`.
pub fn match_budget(shadow_count: usize, base: &BaseConfig) -> Result<BudgetMatch> {
    let per_rank = LoraAdapters::param_count(base, 1);
    if shadow_count == 0 || per_rank == 0 || shadow_count < per_rank {
        return Err(Error::Budget(format!(
            "budget {shadow_count} is below the rank-1 LoRA count {per_rank}"
        )));
    }
    let rank = shadow_count / per_rank;
    let lora_count = rank * per_rank;
    Ok(BudgetMatch {
        rank,
        lora_count,
        shadow_count,
        gap: (shadow_count - lora_count) as f64 / shadow_count as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_hit_has_zero_gap() {
        let base = BaseConfig::default();
        let per = LoraAdapters::param_count(&base, 1);
        let m = match_budget(per * 7, &base).unwrap();
        assert_eq!((m.rank, m.gap), (7, 0.0));
    }

    #[test]
    fn infeasible_budget() {
        let base = BaseConfig::default();
        let per = LoraAdapters::param_count(&base, 1);
        assert!(matches!(match_budget(per - 1, &base), Err(Error::Budget(_))));
        assert!(matches!(match_budget(0, &base), Err(Error::Budget(_))));
    }

    #[test]
    fn count_formula() {
        let base = BaseConfig::default();
        // 4 layers · {q, v} · (d·r + r·d)
        assert_eq!(LoraAdapters::param_count(&base, 2), 4 * 2 * 2 * 32 * 2);
    }
}
