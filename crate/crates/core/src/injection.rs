//! Shadow injection: the base–shadow discrepancy goes through a
//! zero-initialized low-rank bottleneck and is added back to the base hidden
//! state before base layers `1..L`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::{normal_tensor, stream, Stream, StreamRng};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::pipeline::ForwardCtx;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InjectionConfig {
    pub rank: usize,
    pub alpha: f64,
    pub init_std: f64,
    pub dropout: f64,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        InjectionConfig {
            rank: 4,
            alpha: 1.0,
            init_std: 0.02,
            dropout: 0.05,
        }
    }
}

impl InjectionConfig {
    pub fn validate(&self, hidden: usize, errors: &mut Vec<String>) {
        if self.rank == 0 || self.rank >= hidden {
            errors.push(format!(
                "injection.rank must satisfy 1 <= r < d = {hidden}, got {}",
                self.rank
            ));
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            errors.push(format!(
                "injection.alpha must be > 0 (injection strength), got {}",
                self.alpha
            ));
        }
        if !self.init_std.is_finite() || self.init_std < 0.0 {
            errors.push(format!("injection.init_std must be >= 0, got {}", self.init_std));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errors.push(format!("injection.dropout must be in [0, 1), got {}", self.dropout));
        }
    }
}

/// Per-layer `(W_down, W_up)` for layers `1..L`. Layer 0 has no slot.
#[derive(Debug, Clone)]
pub struct Injection {
    pub config: InjectionConfig,
    layers: Vec<(ParamId, ParamId)>,
}

impl Injection {
    /// `W_down ~ N(0, σ²)`, `W_up = 0`.
    pub fn register(
        store: &mut ParamStore,
        base_layers: usize,
        hidden: usize,
        config: &InjectionConfig,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let mut errors = Vec::new();
        config.validate(hidden, &mut errors);
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let layers = (1..base_layers)
            .map(|l| {
                let down = store.insert(
                    format!("inject.L{l}.down"),
                    normal_tensor(&[hidden, config.rank], config.init_std, rng),
                    true,
                )?;
                let up = store.insert(format!("inject.L{l}.up"), Tensor::zeros(&[config.rank, hidden]), true)?;
                Ok((down, up))
            })
            .collect::<Result<_>>()?;
        Ok(Injection {
            config: config.clone(),
            layers,
        })
    }

    pub fn from_store(store: &ParamStore, base_layers: usize, config: &InjectionConfig) -> Result<Self> {
        let layers = (1..base_layers)
            .map(|l| {
                Ok((
                    store.id(&format!("inject.L{l}.down"))?,
                    store.id(&format!("inject.L{l}.up"))?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Injection {
            config: config.clone(),
            layers,
        })
    }

    /// `(W_down, W_up)` for base layer `layer` (1-based).
    pub fn params(&self, layer: usize) -> Result<(ParamId, ParamId)> {
        if layer == 0 || layer > self.layers.len() {
            return Err(Error::Index {
                what: "injection layer",
                index: layer as i64,
                bound: self.layers.len() + 1,
            });
        }
        Ok(self.layers[layer - 1])
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// `δ̃ = Dropout(δ · W_down) · W_up`.
    pub fn bottleneck(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        delta: Var,
        layer: usize,
        ctx: &ForwardCtx,
    ) -> Result<Var> {
        let (down, up) = self.params(layer)?;
        let z = tape.linear(delta, bound.get(down))?;
        let mut rng = stream(ctx.seed, Stream::InjectDropout, layer as u64, ctx.step);
        let z = tape.dropout(z, self.config.dropout, ctx.train, &mut rng)?;
        tape.linear(z, bound.get(up))
    }

    /// Full injection at `layer`: delta, bottleneck, residual add.
    pub fn apply(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        h_prev: Var,
        s_prev: Var,
        layer: usize,
        ctx: &ForwardCtx,
    ) -> Result<Var> {
        let delta = compute_delta(tape, h_prev, s_prev)?;
        let delta_tilde = self.bottleneck(tape, bound, delta, layer, ctx)?;
        inject(tape, h_prev, delta_tilde, self.config.alpha)
    }

    pub fn param_count(layers: usize, hidden: usize, rank: usize) -> usize {
        layers.saturating_sub(1) * 2 * hidden * rank
    }
}

/// `δ = h − s`.
pub fn compute_delta(tape: &mut Tape, h_prev: Var, s_prev: Var) -> Result<Var> {
    tape.sub(h_prev, s_prev)
}

/// `h + α·δ̃`.
pub fn inject(tape: &mut Tape, h_prev: Var, delta_tilde: Var, alpha: f64) -> Result<Var> {
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(Error::Config(vec![format!(
            "injection strength must be > 0, got {alpha}"
        )]));
    }
    let scaled = tape.scale(delta_tilde, alpha)?;
    tape.add(h_prev, scaled)
}
