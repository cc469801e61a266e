//! Shadow update: the base layer output is normalized once, fed to a
//! transform MLP and a sigmoid gate MLP, and the shadow state moves toward
//! the transform by the gate.

use serde::{Deserialize, Serialize};

use crate::backbone::{register_norm, INIT_STD};
use crate::error::{Error, Result};
use crate::numerics::rng::{normal_tensor, stream, Stream, StreamRng};
use crate::numerics::{Tape, Var, LN_EPS};
use crate::params::{Bound, ParamId, ParamStore};
use crate::pipeline::ForwardCtx;
use crate::shadow::ShadowState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpdateConfig {
    pub enabled: bool,
    pub layernorm: bool,
    /// Hidden width of the transform and gate MLPs; `0` means `d / 2`.
    pub gate_hidden: usize,
    pub dropout: f64,
    pub init_std: f64,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        UpdateConfig {
            enabled: true,
            layernorm: true,
            gate_hidden: 0,
            dropout: 0.05,
            init_std: INIT_STD,
        }
    }
}

impl UpdateConfig {
    pub fn gate_hidden_for(&self, hidden: usize) -> usize {
        if self.gate_hidden == 0 {
            (hidden / 2).max(1)
        } else {
            self.gate_hidden
        }
    }

    pub fn validate(&self, errors: &mut Vec<String>) {
        if !(0.0..1.0).contains(&self.dropout) {
            errors.push(format!("update.dropout must be in [0, 1), got {}", self.dropout));
        }
        if !self.init_std.is_finite() || self.init_std < 0.0 {
            errors.push(format!("update.init_std must be >= 0, got {}", self.init_std));
        }
    }
}

#[derive(Debug, Clone)]
pub struct UpdateLayer {
    pub norm: Option<(ParamId, ParamId)>,
    pub t1: ParamId,
    pub t2: ParamId,
    pub g1: ParamId,
    pub g2: ParamId,
}

/// Per-layer update networks for layers `1..L`; empty when disabled.
#[derive(Debug, Clone)]
pub struct Update {
    pub config: UpdateConfig,
    layers: Vec<UpdateLayer>,
}

impl Update {
    pub fn register(
        store: &mut ParamStore,
        base_layers: usize,
        hidden: usize,
        config: &UpdateConfig,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let mut errors = Vec::new();
        config.validate(&mut errors);
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        if !config.enabled {
            return Ok(Update {
                config: config.clone(),
                layers: Vec::new(),
            });
        }
        let hg = config.gate_hidden_for(hidden);
        let layers = (1..base_layers)
            .map(|l| {
                let p = format!("update.L{l}");
                let norm = if config.layernorm {
                    Some(register_norm(store, &format!("{p}.ln"), hidden, true)?)
                } else {
                    None
                };
                let mut w = |name: &str, shape: &[usize]| {
                    store.insert(format!("{p}.{name}"), normal_tensor(shape, config.init_std, rng), true)
                };
                Ok(UpdateLayer {
                    norm,
                    t1: w("t1", &[hidden, hg])?,
                    t2: w("t2", &[hg, hidden])?,
                    g1: w("g1", &[hidden, hg])?,
                    g2: w("g2", &[hg, hidden])?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Update {
            config: config.clone(),
            layers,
        })
    }

    pub fn from_store(store: &ParamStore, base_layers: usize, config: &UpdateConfig) -> Result<Self> {
        if !config.enabled {
            return Ok(Update {
                config: config.clone(),
                layers: Vec::new(),
            });
        }
        let layers = (1..base_layers)
            .map(|l| {
                let id = |n: &str| store.id(&format!("update.L{l}.{n}"));
                let norm = if config.layernorm {
                    Some((id("ln.gamma")?, id("ln.beta")?))
                } else {
                    None
                };
                Ok(UpdateLayer {
                    norm,
                    t1: id("t1")?,
                    t2: id("t2")?,
                    g1: id("g1")?,
                    g2: id("g2")?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Update {
            config: config.clone(),
            layers,
        })
    }

    pub fn layer(&self, layer: usize) -> Result<&UpdateLayer> {
        if layer == 0 || layer > self.layers.len() {
            return Err(Error::Index {
                what: "update layer",
                index: layer as i64,
                bound: self.layers.len() + 1,
            });
        }
        Ok(&self.layers[layer - 1])
    }

    /// Per-layer LayerNorm of the base output, shared by transform and gate.
    /// Identity when the norm is configured off.
    pub fn normalize_base_output(&self, tape: &mut Tape, bound: &Bound, h_out: Var, layer: usize) -> Result<Var> {
        match self.layer(layer)?.norm {
            Some((g, b)) => tape.layer_norm(h_out, bound.get(g), bound.get(b), LN_EPS),
            None => Ok(h_out),
        }
    }

    /// `t = Dropout(SiLU(z·W_T1))·W_T2`.
    pub fn transform(&self, tape: &mut Tape, bound: &Bound, z: Var, layer: usize, ctx: &ForwardCtx) -> Result<Var> {
        let p = self.layer(layer)?;
        let a = tape.linear(z, bound.get(p.t1))?;
        let a = tape.silu(a)?;
        let mut rng = stream(ctx.seed, Stream::UpdateDropout, layer as u64, ctx.step);
        let a = tape.dropout(a, self.config.dropout, ctx.train, &mut rng)?;
        tape.linear(a, bound.get(p.t2))
    }

    /// `g = σ(SiLU(z·W_G1)·W_G2)`; no dropout on the gate path.
    pub fn gate(&self, tape: &mut Tape, bound: &Bound, z: Var, layer: usize) -> Result<Var> {
        let p = self.layer(layer)?;
        let a = tape.linear(z, bound.get(p.g1))?;
        let a = tape.silu(a)?;
        let a = tape.linear(a, bound.get(p.g2))?;
        tape.sigmoid(a)
    }

    /// Advances `s^(ℓ−1) → s^(ℓ)`. When disabled the state passes through
    /// unchanged and only the cursor moves.
    pub fn step(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        state: ShadowState,
        h_out: Var,
        layer: usize,
        ctx: &ForwardCtx,
    ) -> Result<ShadowState> {
        if layer != state.cursor + 1 {
            return Err(Error::Sequencing {
                expected: state.cursor + 1,
                got: layer,
            });
        }
        if !self.config.enabled {
            return Ok(ShadowState {
                s: state.s,
                cursor: layer,
            });
        }
        let z = self.normalize_base_output(tape, bound, h_out, layer)?;
        let t = self.transform(tape, bound, z, layer, ctx)?;
        let g = self.gate(tape, bound, z, layer)?;
        let s = gated_update(tape, state.s, t, g)?;
        Ok(ShadowState { s, cursor: layer })
    }

    pub fn param_count(layers: usize, hidden: usize, gate_hidden: usize, layernorm: bool) -> usize {
        let norm = if layernorm { 2 * hidden } else { 0 };
        layers.saturating_sub(1) * (4 * hidden * gate_hidden + norm)
    }
}

/// `(1 − g) ⊙ s + g ⊙ t`.
pub fn gated_update(tape: &mut Tape, s_prev: Var, t: Var, g: Var) -> Result<Var> {
    tape.gated_update(s_prev, t, g)
}
