//! Explicit shadows of a different width: the pseudo-inverse bridge between
//! a small LM and the frozen base LM head, continued pretraining of the
//! composed model, and attachment of the result as a shadow backbone.
//!
//! Heads are stored `[d, V]` (row-vector convention). The bridge is
//! described in column form, `ŷ = W_lm P h` with `W_lm: V×d_t` and
//! `P: d_t×d_s`, so the stored projection is `Pᵀ: [d_s, d_t]`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::backbone::{BaseConfig, BaseModel, INIT_STD};
use crate::error::{Error, Result};
use crate::numerics::rng::{normal_tensor, stream, Stream};
use crate::numerics::{from_matrix, pinv_matrix, to_matrix, Tape, Tensor, Var, DEFAULT_RCOND};
use crate::params::{Bound, ParamId, ParamStore};
use crate::pipeline::{init_tag, ForwardTrace, ShadowPeftModel, ShadowPeftSettings};
use crate::shadow::{ShadowConfig, ShadowMode};
use crate::tasks::{Batch, SyntheticTask, Target, IGNORE_INDEX};
use crate::training::{AdamW, AdamWConfig, LossReport};

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionInit {
    /// `P*: d_t × d_s`.
    pub p: Tensor,
    pub lm_norm: f64,
    pub ref_norm: f64,
    /// `‖W_lm P* − W_lm^ref‖_F`.
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProjInit {
    Random,
    #[default]
    Pinv,
}

fn vocab_check(w_lm: &Tensor, w_ref: &Tensor) -> Result<()> {
    let (a, b) = (w_lm.shape(), w_ref.shape());
    if a.len() != 2 || b.len() != 2 || a[0] != b[0] {
        return Err(Error::shape("vocabulary", a, b));
    }
    Ok(())
}

/// `P* = W_lm⁺ W_lm^ref` for `W_lm: V×d_t`, `W_lm^ref: V×d_s`.
pub fn pinv_init_projection(w_lm: &Tensor, w_ref: &Tensor) -> Result<ProjectionInit> {
    vocab_check(w_lm, w_ref)?;
    if w_lm.shape()[0] < w_lm.shape()[1] {
        return Err(Error::shape(
            "pinv_init (vocab below target width)",
            w_lm.shape(),
            w_ref.shape(),
        ));
    }
    let a = to_matrix(w_lm)?;
    let r = to_matrix(w_ref)?;
    let p = pinv_matrix(&a, DEFAULT_RCOND)? * &r;
    let residual = (&a * &p - &r).norm();
    Ok(ProjectionInit {
        p: from_matrix(&p),
        lm_norm: a.norm(),
        ref_norm: r.norm(),
        residual,
    })
}

/// `‖W_lm P − W_lm^ref‖_F` for an arbitrary `P`.
pub fn projection_residual(w_lm: &Tensor, p: &Tensor, w_ref: &Tensor) -> Result<f64> {
    vocab_check(w_lm, w_ref)?;
    Ok((to_matrix(w_lm)? * to_matrix(p)? - to_matrix(w_ref)?).norm())
}

/// Stored `[d, V]` head as the `V×d` matrix of the column convention.
pub fn head_matrix(store: &ParamStore, id: ParamId) -> Result<Tensor> {
    Ok(from_matrix(&to_matrix(store.get(id))?.transpose()))
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

/// Mean over the rows `s` of `states` of
/// `KL(softmax(W_ref s) ‖ softmax(W_lm P s))`.
pub fn mean_head_kl(w_lm: &Tensor, p: &Tensor, w_ref: &Tensor, states: &Tensor) -> Result<f64> {
    vocab_check(w_lm, w_ref)?;
    let composed = to_matrix(w_lm)? * to_matrix(p)?;
    let reference = to_matrix(w_ref)?;
    let s = to_matrix(states)?;
    if s.ncols() != reference.ncols() || composed.ncols() != reference.ncols() {
        return Err(Error::shape("mean_head_kl", states.shape(), w_ref.shape()));
    }
    let logits_c: DMatrix<f64> = &s * composed.transpose();
    let logits_r: DMatrix<f64> = &s * reference.transpose();
    let mut total = 0.0;
    for i in 0..s.nrows() {
        let lc = log_softmax(&logits_c.row(i).iter().copied().collect::<Vec<_>>());
        let lr = log_softmax(&logits_r.row(i).iter().copied().collect::<Vec<_>>());
        total += lr.iter().zip(&lc).map(|(r, c)| r.exp() * (r - c)).sum::<f64>();
    }
    Ok(total / s.nrows().max(1) as f64)
}

/// A standalone LM with prefix `base`, used as the explicit shadow source.
pub fn independent_lm(config: &BaseConfig, seed: u64) -> Result<(ParamStore, BaseModel)> {
    let mut store = ParamStore::new();
    let model = BaseModel::register(
        &mut store,
        config,
        true,
        &mut stream(seed, Stream::Init, init_tag::BASE, 0),
    )?;
    Ok((store, model))
}

const SHADOW_LM: &str = "shadow_lm";

/// Small LM whose own head is replaced by the frozen base head behind a
/// projection: `logits = ln_f(f_θ(x)) · Pᵀ · W_lm`. Its reference head is
/// kept frozen for evaluation only.
#[derive(Debug, Clone)]
pub struct CrossScaleModel {
    pub store: ParamStore,
    pub shadow: BaseModel,
    pub target_head: ParamId,
    pub proj: ParamId,
    pub init: ProjInit,
    pub projection: Option<ProjectionInit>,
}

impl CrossScaleModel {
    /// `shadow_store` holds a `base.`-prefixed LM (its own checkpoint).
    pub fn compose(
        base_store: &ParamStore,
        base: &BaseModel,
        shadow_store: &ParamStore,
        shadow_config: &BaseConfig,
        init: ProjInit,
        seed: u64,
    ) -> Result<Self> {
        if shadow_config.vocab_size != base.config.vocab_size {
            return Err(Error::shape(
                "vocabulary",
                &[base.config.vocab_size],
                &[shadow_config.vocab_size],
            ));
        }
        let mut store = ParamStore::new();
        for p in shadow_store.iter().filter(|p| p.name.starts_with("base.")) {
            let name = format!("{SHADOW_LM}.{}", &p.name["base.".len()..]);
            store.insert(name, p.tensor.clone(), true)?;
        }
        let shadow = BaseModel::from_store(&store, SHADOW_LM, shadow_config)?;
        store.set_trainable_prefix(&format!("{SHADOW_LM}.lm_head"), false);
        let target_head = store.insert("target.lm_head", base_store.get(base.lm_head).clone(), false)?;
        let (dt, ds) = (base.config.hidden, shadow_config.hidden);
        let (p_t, projection) = match init {
            ProjInit::Pinv => {
                let w_lm = head_matrix(base_store, base.lm_head)?;
                let w_ref = head_matrix(&store, shadow.lm_head)?;
                let pi = pinv_init_projection(&w_lm, &w_ref)?;
                (from_matrix(&to_matrix(&pi.p)?.transpose()), Some(pi))
            }
            ProjInit::Random => (
                normal_tensor(&[ds, dt], INIT_STD, &mut stream(seed, Stream::Init, 5, 0)),
                None,
            ),
        };
        let dtype = base_store.get(base.lm_head).dtype();
        let proj = store.insert("cross.proj", p_t, true)?;
        store.set_dtype(dtype);
        Ok(CrossScaleModel {
            store,
            shadow,
            target_head,
            proj,
            init,
            projection,
        })
    }

    pub fn lm_logits(&self, tape: &mut Tape, bound: &Bound, batch: &Batch) -> Result<Var> {
        let mut trace = ForwardTrace::default();
        let h = self
            .shadow
            .forward_hidden(tape, bound, &batch.tokens, None, &mut trace)?;
        let h = tape.linear(h, bound.get(self.proj))?;
        tape.linear(h, bound.get(self.target_head))
    }

    /// Logits through the shadow's own (reference) head.
    pub fn reference_logits(&self, tape: &mut Tape, bound: &Bound, batch: &Batch) -> Result<Var> {
        let mut trace = ForwardTrace::default();
        let h = self
            .shadow
            .forward_hidden(tape, bound, &batch.tokens, None, &mut trace)?;
        self.shadow.lm_logits(tape, bound, h)
    }

    fn loss(&self, tape: &mut Tape, bound: &Bound, batch: &Batch) -> Result<Var> {
        let Target::Lm(targets) = &batch.target else {
            return Err(Error::Mode("cross-scale pretraining needs an LM task".into()));
        };
        let logits = self.lm_logits(tape, bound, batch)?;
        tape.cross_entropy(logits, targets, IGNORE_INDEX)
    }

    fn tape(&self) -> Tape {
        Tape::new(self.store.get(self.proj).dtype())
    }

    /// Mean CE of the composed model over `batches`.
    pub fn cross_entropy(&self, batches: &[Batch]) -> Result<f64> {
        let mut total = 0.0;
        for b in batches {
            let mut tape = self.tape();
            let bound = self.store.bind(&mut tape)?;
            let loss = self.loss(&mut tape, &bound, b)?;
            total += tape.value(loss)[0];
        }
        Ok(total / batches.len().max(1) as f64)
    }

    /// Continued causal-LM pretraining of the shadow LM and the projection.
    /// The base head copy and the reference head stay frozen.
    pub fn shadow_pretrain(
        &mut self,
        corpus: &SyntheticTask,
        steps: usize,
        batch_size: usize,
        optimizer: AdamWConfig,
    ) -> Result<Vec<LossReport>> {
        let mut opt = AdamW::new(optimizer);
        let mut history = Vec::with_capacity(steps);
        for step in 0..steps {
            let batch = corpus.train_batch(step as u64, 2, batch_size);
            let mut tape = self.tape();
            let bound = self.store.bind(&mut tape)?;
            let loss = self.loss(&mut tape, &bound, &batch)?;
            let ce = tape.value(loss)[0];
            if !ce.is_finite() || ce > 1e4 {
                return Err(Error::Diverged { step, loss: ce });
            }
            history.push(LossReport {
                step,
                total: ce,
                base_ce: 0.0,
                shadow_ce: ce,
                trainable_param_count: self.store.trainable_count(),
            });
            let mut grads = tape.backward(loss)?;
            self.store.store_grads(&bound, &mut grads);
            opt.step(&mut self.store)?;
        }
        self.store.zero_grads();
        Ok(history)
    }

    pub fn shadow_config(&self) -> ShadowConfig {
        let c = &self.shadow.config;
        ShadowConfig {
            layers: c.layers,
            hidden: c.hidden,
            heads: c.heads,
            mlp_width: c.mlp_width,
            mode: ShadowMode::Explicit,
            cross_scale: true,
        }
    }
}

/// Attaches the composed shadow to the frozen base as an explicit shadow
/// backbone. The shadow layers, final norm and projection are copied; the
/// input map from the base embedding space is the least-squares fit
/// `[E; Pos]_base⁺ [E; Pos]_shadow` over token and position tables.
pub fn attach_explicit_shadow(
    base_store: ParamStore,
    base: BaseModel,
    cross: &CrossScaleModel,
    mut settings: ShadowPeftSettings,
    seed: u64,
) -> Result<ShadowPeftModel> {
    settings.shadow = cross.shadow_config();
    let mut model = ShadowPeftModel::attach(base_store, base, settings, seed)?;
    let dtype = model.dtype();
    let prefix = format!("{SHADOW_LM}.");
    for p in cross.store.iter() {
        let Some(rest) = p.name.strip_prefix(&prefix) else {
            continue;
        };
        if rest.starts_with('L') || rest.starts_with("ln_f.") {
            let id = model.store.id(&format!("shadow.{rest}"))?;
            copy_into(&mut model.store, id, &p.tensor)?;
        }
    }
    let proj = model.store.id("shadow.proj")?;
    copy_into(&mut model.store, proj, cross.store.get(cross.proj))?;
    let w_in = input_map(&model.store, &model.base, &cross.store, &cross.shadow)?;
    let id = model.store.id("shadow.in")?;
    copy_into(&mut model.store, id, &w_in)?;
    model.store.set_dtype(dtype);
    Ok(model)
}

fn copy_into(store: &mut ParamStore, id: ParamId, src: &Tensor) -> Result<()> {
    let dst = store.get_mut(id);
    if dst.shape() != src.shape() {
        return Err(Error::shape("copy_into", dst.shape(), src.shape()));
    }
    dst.data_mut().copy_from_slice(src.data());
    Ok(())
}

fn stacked_tables(store: &ParamStore, model: &BaseModel, rows: usize) -> Result<DMatrix<f64>> {
    let e = to_matrix(store.get(model.embed))?;
    let pos = to_matrix(store.get(model.pos))?;
    let d = e.ncols();
    let mut m = DMatrix::zeros(e.nrows() + rows, d);
    m.rows_mut(0, e.nrows()).copy_from(&e);
    m.rows_mut(e.nrows(), rows).copy_from(&pos.rows(0, rows));
    Ok(m)
}

fn input_map(
    base_store: &ParamStore,
    base: &BaseModel,
    shadow_store: &ParamStore,
    shadow: &BaseModel,
) -> Result<Tensor> {
    let rows = base.config.max_seq.min(shadow.config.max_seq);
    let src = stacked_tables(base_store, base, rows)?;
    let dst = stacked_tables(shadow_store, shadow, rows)?;
    Ok(from_matrix(&(pinv_matrix(&src, DEFAULT_RCOND)? * dst)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::normal_tensor;

    #[test]
    fn self_alignment_is_identity() {
        let w = normal_tensor(&[20, 6], 1.0, &mut stream(1, Stream::Fixture, 0, 0));
        let pi = pinv_init_projection(&w, &w).unwrap();
        let eye = from_matrix(&DMatrix::identity(6, 6));
        assert!(pi.p.max_abs_diff(&eye) < 1e-8);
        assert!(pi.residual < 1e-8);
    }

    #[test]
    fn vocab_mismatch_rejected() {
        let a = Tensor::zeros(&[10, 4]);
        let b = Tensor::zeros(&[11, 2]);
        assert!(matches!(pinv_init_projection(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn kl_vanishes_for_exact_bridge() {
        let mut rng = stream(2, Stream::Fixture, 0, 0);
        let w = normal_tensor(&[12, 4], 1.0, &mut rng);
        let s = normal_tensor(&[5, 4], 1.0, &mut rng);
        let eye = from_matrix(&DMatrix::identity(4, 4));
        assert!(mean_head_kl(&w, &eye, &w, &s).unwrap().abs() < 1e-12);
    }
}
