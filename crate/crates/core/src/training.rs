//! Joint losses, trainable-parameter accounting, AdamW and the train loop.

use serde::{Deserialize, Serialize};

use crate::backbone::{BaseConfig, BaseModel, DecoderBlock};
use crate::error::{Error, Result};
use crate::injection::Injection;
use crate::lora::LoraAdapters;
use crate::metrics::MetricRecord;
use crate::model::AdaptedModel;
use crate::numerics::{self, GradCheckReport, Tape, Var};
use crate::params::{Bound, ParamStore};
use crate::pipeline::{pool, ForwardCtx, ForwardTrace, InferenceMode, Pooling, ShadowPeftSettings};
use crate::tasks::{Batch, SyntheticTask, Target, IGNORE_INDEX};
use crate::update::Update;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the shadow loss term.
    pub lambda: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_interval: usize,
    /// Base-only steps before the base is frozen; `0` skips the phase.
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    /// Abort when the total loss exceeds this.
    pub divergence: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.05,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            steps: 2000,
            batch_size: 16,
            eval_interval: 100,
            pretrain_steps: 500,
            pretrain_lr: 3e-3,
            divergence: 1e4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            errors.push(format!("train.lambda must be >= 0, got {}", self.lambda));
        }
        for (name, v) in [("lr", self.lr), ("pretrain_lr", self.pretrain_lr), ("eps", self.eps)] {
            if !v.is_finite() || v <= 0.0 {
                errors.push(format!("train.{name} must be > 0, got {v}"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                errors.push(format!("train.{name} must be in [0, 1), got {v}"));
            }
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            errors.push(format!("train.weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            errors.push("train.batch_size must be >= 1".into());
        }
        if self.eval_interval == 0 {
            errors.push("train.eval_interval must be >= 1".into());
        }
        if self.divergence.is_nan() || self.divergence <= 0.0 {
            errors.push(format!("train.divergence must be > 0, got {}", self.divergence));
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport {
    pub step: usize,
    pub total: f64,
    pub base_ce: f64,
    pub shadow_ce: f64,
    pub trainable_param_count: usize,
}

/// Loss nodes of one joint objective. `shadow_ce` is absent for the LoRA
/// baseline.
#[derive(Debug, Clone, Copy)]
pub struct JointLoss {
    pub total: Var,
    pub base_ce: Var,
    pub shadow_ce: Option<Var>,
}

impl JointLoss {
    pub fn report(&self, tape: &Tape, step: usize, trainable_param_count: usize) -> LossReport {
        LossReport {
            step,
            total: tape.value(self.total)[0],
            base_ce: tape.value(self.base_ce)[0],
            shadow_ce: self.shadow_ce.map_or(0.0, |v| tape.value(v)[0]),
            trainable_param_count,
        }
    }
}

fn compose(tape: &mut Tape, base_ce: Var, shadow_ce: Option<Var>, lambda: f64) -> Result<JointLoss> {
    let total = match shadow_ce {
        Some(s) => {
            let weighted = tape.scale(s, lambda)?;
            tape.add(base_ce, weighted)?
        }
        None => base_ce,
    };
    Ok(JointLoss {
        total,
        base_ce,
        shadow_ce,
    })
}

/// `CE(base) + λ·CE(shadow)` over the same target positions.
pub fn joint_lm_loss(
    tape: &mut Tape,
    base_logits: Var,
    shadow_logits: Option<Var>,
    targets: &[i64],
    lambda: f64,
) -> Result<JointLoss> {
    let base_ce = tape.cross_entropy(base_logits, targets, IGNORE_INDEX)?;
    let shadow_ce = shadow_logits
        .map(|s| tape.cross_entropy(s, targets, IGNORE_INDEX))
        .transpose()?;
    compose(tape, base_ce, shadow_ce, lambda)
}

/// Classification form of [`joint_lm_loss`] on pooled logits `[B,C]`.
pub fn joint_cls_loss(
    tape: &mut Tape,
    base_logits: Var,
    shadow_logits: Option<Var>,
    labels: &[usize],
    lambda: f64,
) -> Result<JointLoss> {
    let classes = *tape.shape(base_logits).last().unwrap_or(&0);
    let targets = labels
        .iter()
        .map(|&y| {
            if y < classes {
                Ok(y as i64)
            } else {
                Err(Error::Index {
                    what: "class label",
                    index: y as i64,
                    bound: classes,
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let base_ce = tape.cross_entropy(base_logits, &targets, IGNORE_INDEX)?;
    let shadow_ce = shadow_logits
        .map(|s| tape.cross_entropy(s, &targets, IGNORE_INDEX))
        .transpose()?;
    compose(tape, base_ce, shadow_ce, lambda)
}

/// Attached forward plus joint loss for one batch.
pub fn batch_loss(
    model: &AdaptedModel,
    tape: &mut Tape,
    bound: &Bound,
    batch: &Batch,
    lambda: f64,
    ctx: &ForwardCtx,
) -> Result<(JointLoss, ForwardTrace)> {
    match &batch.target {
        Target::Lm(targets) => {
            let f = model.lm_forward(tape, bound, &batch.tokens, ctx, InferenceMode::Attached)?;
            Ok((joint_lm_loss(tape, f.primary, f.shadow, targets, lambda)?, f.trace))
        }
        Target::Cls { labels, pad_mask } => {
            let f = model.cls_forward(tape, bound, &batch.tokens, pad_mask, ctx, InferenceMode::Attached)?;
            Ok((joint_cls_loss(tape, f.primary, f.shadow, labels, lambda)?, f.trace))
        }
    }
}

/// Names and sizes of every trainable tensor, in store order.
pub fn trainable_params(store: &ParamStore) -> (Vec<(String, usize)>, usize) {
    let list: Vec<_> = store
        .iter()
        .filter(|p| p.trainable())
        .map(|p| (p.name.clone(), p.tensor.numel()))
        .collect();
    let total = list.iter().map(|(_, n)| n).sum();
    (list, total)
}

/// Trainable counts per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ParamBudget {
    pub injection: usize,
    pub update: usize,
    pub shadow_backbone: usize,
    pub projection: usize,
    pub heads: usize,
    pub lora: usize,
    /// Trainable tensors outside every known group.
    pub other: usize,
}

impl ParamBudget {
    pub fn total(&self) -> usize {
        self.injection + self.update + self.shadow_backbone + self.projection + self.heads + self.lora + self.other
    }

    /// Closed-form counts of the shadow method.
    pub fn shadow_closed_form(base: &BaseConfig, settings: &ShadowPeftSettings) -> Self {
        let d = base.hidden;
        let s = &settings.shadow;
        let update = if settings.update.enabled {
            Update::param_count(
                base.layers,
                d,
                settings.update.gate_hidden_for(d),
                settings.update.layernorm,
            )
        } else {
            0
        };
        let projection = if s.hidden != d || s.cross_scale {
            2 * d * s.hidden
        } else {
            0
        };
        let final_norm = if s.cross_scale { 2 * s.hidden } else { 0 };
        let lm_head = if s.cross_scale { 0 } else { d * base.vocab_size };
        ParamBudget {
            injection: Injection::param_count(base.layers, d, settings.injection.rank),
            update,
            shadow_backbone: s.layers * DecoderBlock::param_count(s.hidden, s.mlp_width) + final_norm,
            projection,
            heads: lm_head + d * base.num_classes,
            ..Default::default()
        }
    }

    pub fn lora_closed_form(base: &BaseConfig, rank: usize) -> Self {
        ParamBudget {
            lora: LoraAdapters::param_count(base, rank),
            ..Default::default()
        }
    }

    /// Groups the trainable tensors of `store` by name.
    pub fn enumerate(store: &ParamStore) -> Self {
        let mut b = ParamBudget::default();
        for p in store.iter().filter(|p| p.trainable()) {
            let n = p.tensor.numel();
            let name = p.name.as_str();
            let slot = if name.starts_with("inject.") {
                &mut b.injection
            } else if name.starts_with("update.") {
                &mut b.update
            } else if name == "shadow.in" || name == "shadow.proj" {
                &mut b.projection
            } else if name == "shadow.lm_head" || name == "shadow.cls_head" {
                &mut b.heads
            } else if name.starts_with("shadow.L") || name.starts_with("shadow.ln_f.") {
                &mut b.shadow_backbone
            } else if name.starts_with("lora.") {
                &mut b.lora
            } else {
                &mut b.other
            };
            *slot += n;
        }
        b
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Adaptive moments with decoupled weight decay. Moments are keyed by the
/// store position and persist across steps.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable tensor with a gradient. Frozen
    /// tensors are never written. Any non-finite gradient aborts before
    /// anything changes.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for p in store.iter().filter(|p| p.trainable()) {
            if let Some(g) = &p.tensor.grad {
                if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NanGradient {
                        name: p.name.clone(),
                        index: i,
                    });
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable() {
                continue;
            }
            let Some(g) = p.tensor.grad.take() else { continue };
            let n = g.len();
            let (m, v) = self.moments[i].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let dtype = p.tensor.dtype();
            for (j, x) in p.tensor.data_mut().iter_mut().enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let decayed = *x - c.lr * c.weight_decay * *x;
                *x = dtype.round(decayed - c.lr * mhat / (vhat.sqrt() + c.eps));
            }
            p.tensor.grad = Some(g);
        }
        Ok(())
    }
}

/// Result of a whole run.
#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    pub history: Vec<LossReport>,
    pub metrics: Vec<MetricRecord>,
    pub final_accuracy: f64,
}

fn check_divergence(step: usize, total: f64, limit: f64) -> Result<()> {
    if !total.is_finite() || total > limit {
        return Err(Error::Diverged { step, loss: total });
    }
    Ok(())
}

/// One optimizer step on the joint loss.
pub fn train_step(
    model: &mut AdaptedModel,
    opt: &mut AdamW,
    batch: &Batch,
    config: &TrainConfig,
    ctx: &ForwardCtx,
) -> Result<LossReport> {
    let mut tape = model.tape();
    let bound = model.store().bind(&mut tape)?;
    let (loss, _) = batch_loss(model, &mut tape, &bound, batch, config.lambda, ctx)?;
    let report = loss.report(&tape, ctx.step as usize, model.store().trainable_count());
    check_divergence(report.step, report.total, config.divergence)?;
    let mut grads = tape.backward(loss.total)?;
    let store = model.store_mut();
    store.store_grads(&bound, &mut grads);
    opt.step(store)?;
    Ok(report)
}

/// PEFT training on `task`. Evaluates every `eval_interval` steps and after
/// the last step; each evaluation is passed to `on_eval`.
pub fn train(
    model: &mut AdaptedModel,
    task: &SyntheticTask,
    config: &TrainConfig,
    seed: u64,
    eval_mode: InferenceMode,
    mut on_eval: impl FnMut(&MetricRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut opt = AdamW::new(config.optimizer());
    let mut out = TrainOutcome::default();
    let eval = task.eval_split();
    for step in 0..config.steps {
        let batch = task.train_batch(step as u64, 0, config.batch_size);
        let ctx = ForwardCtx::train(seed, step as u64);
        let report = train_step(model, &mut opt, &batch, config, &ctx)?;
        out.history.push(report);
        let done = step + 1;
        if done % config.eval_interval == 0 || done == config.steps {
            let acc = accuracy(model, &eval, eval_mode)?;
            let rec = MetricRecord {
                step: done,
                total: report.total,
                base_ce: report.base_ce,
                shadow_ce: report.shadow_ce,
                eval_acc: acc,
            };
            on_eval(&rec)?;
            out.metrics.push(rec);
            out.final_accuracy = acc;
        }
    }
    if config.steps == 0 {
        out.final_accuracy = accuracy(model, &eval, eval_mode)?;
    }
    model.store_mut().zero_grads();
    Ok(out)
}

/// Base-only supervision of every `base.*` tensor, after which the base is
/// frozen. Batches come from a stream separate from PEFT training.
pub fn pretrain_base(
    store: &mut ParamStore,
    base: &BaseModel,
    task: &SyntheticTask,
    config: &TrainConfig,
    pooling: Pooling,
) -> Result<Vec<LossReport>> {
    store.set_trainable_prefix("base.", true);
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.pretrain_lr,
        ..config.optimizer()
    });
    let mut history = Vec::with_capacity(config.pretrain_steps);
    for step in 0..config.pretrain_steps {
        let batch = task.train_batch(step as u64, 1, config.batch_size);
        let mut tape = Tape::new(store.iter().next().map(|p| p.tensor.dtype()).unwrap_or_default());
        let bound = store.bind(&mut tape)?;
        let loss = base_only_loss(base, &mut tape, &bound, &batch, pooling)?;
        let ce = tape.value(loss)[0];
        check_divergence(step, ce, config.divergence)?;
        history.push(LossReport {
            step,
            total: ce,
            base_ce: ce,
            shadow_ce: 0.0,
            trainable_param_count: store.trainable_count(),
        });
        let mut grads = tape.backward(loss)?;
        store.store_grads(&bound, &mut grads);
        opt.step(store)?;
    }
    store.zero_grads();
    store.set_trainable_prefix("base.", false);
    Ok(history)
}

/// CE of the adapter-free base on `batch`.
pub fn base_only_loss(
    base: &BaseModel,
    tape: &mut Tape,
    bound: &Bound,
    batch: &Batch,
    pooling: Pooling,
) -> Result<Var> {
    let mut trace = ForwardTrace::default();
    let h = base.forward_hidden(tape, bound, &batch.tokens, None, &mut trace)?;
    match &batch.target {
        Target::Lm(targets) => {
            let logits = base.lm_logits(tape, bound, h)?;
            tape.cross_entropy(logits, targets, IGNORE_INDEX)
        }
        Target::Cls { labels, pad_mask } => {
            let pooled = pool(tape, h, pad_mask, pooling)?;
            let logits = base.cls_logits(tape, bound, pooled)?;
            let targets: Vec<i64> = labels.iter().map(|&y| y as i64).collect();
            tape.cross_entropy(logits, &targets, IGNORE_INDEX)
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// `(correct, counted)` for the primary prediction of one batch.
pub fn batch_correct(model: &AdaptedModel, batch: &Batch, mode: InferenceMode) -> Result<(usize, usize)> {
    let mut tape = model.tape();
    let bound = model.store().bind(&mut tape)?;
    let ctx = ForwardCtx::eval();
    match &batch.target {
        Target::Lm(targets) => {
            let f = model.lm_forward(&mut tape, &bound, &batch.tokens, &ctx, mode)?;
            let v = *tape.shape(f.primary).last().unwrap_or(&1);
            let logits = tape.value(f.primary);
            let mut hit = 0;
            let mut n = 0;
            for (r, &t) in targets.iter().enumerate() {
                if t == IGNORE_INDEX {
                    continue;
                }
                n += 1;
                if argmax(&logits[r * v..(r + 1) * v]) as i64 == t {
                    hit += 1;
                }
            }
            Ok((hit, n))
        }
        Target::Cls { labels, pad_mask } => {
            let f = model.cls_forward(&mut tape, &bound, &batch.tokens, pad_mask, &ctx, mode)?;
            let c = *tape.shape(f.primary).last().unwrap_or(&1);
            let logits = tape.value(f.primary);
            let hit = labels
                .iter()
                .enumerate()
                .filter(|&(r, &y)| argmax(&logits[r * c..(r + 1) * c]) == y)
                .count();
            Ok((hit, labels.len()))
        }
    }
}

/// Next-token accuracy on supervised positions, or classification accuracy.
pub fn accuracy(model: &AdaptedModel, batches: &[Batch], mode: InferenceMode) -> Result<f64> {
    let mut hit = 0;
    let mut n = 0;
    for b in batches {
        let (h, c) = batch_correct(model, b, mode)?;
        hit += h;
        n += c;
    }
    if n == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok(hit as f64 / n as f64)
}

/// Gradient check of the joint loss over every trainable tensor.
#[derive(Debug, Clone)]
pub struct ModelGradCheck {
    pub report: GradCheckReport,
    /// Trainable tensor names in report order.
    pub names: Vec<String>,
}

impl ModelGradCheck {
    pub fn worst_name(&self) -> Option<&str> {
        self.report.worst.map(|(p, _)| self.names[p].as_str())
    }
}

/// Central-difference step for whole-model checks. At 1e-5 the roundoff of a
/// loss near 3 (about 2e-11 per difference) swamps elements below 1e-7.
pub const MODEL_GRADCHECK_STEP: f64 = 1e-4;

/// Dropout is off. `corrupt` names a tensor whose analytic gradient is
/// perturbed before comparison.
pub fn model_gradcheck(
    model: &AdaptedModel,
    batch: &Batch,
    lambda: f64,
    step: f64,
    corrupt: Option<&str>,
) -> Result<ModelGradCheck> {
    if model.dtype() != numerics::DType::F64 {
        return Err(Error::Mode("gradient checking requires 64-bit parameters".into()));
    }
    let store = model.store();
    let ids = store.trainable_ids();
    let names: Vec<String> = ids.iter().map(|&id| store.name(id).to_string()).collect();
    let mut params: Vec<_> = ids.iter().map(|&id| store.get(id).clone()).collect();
    let ctx = ForwardCtx::eval();
    let mut f = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let bound = store.bind_with(tape, vars)?;
        Ok(batch_loss(model, tape, &bound, batch, lambda, &ctx)?.0.total)
    };
    let mut analytic = numerics::analytic_gradient(&params, &mut f)?;
    let numeric = numerics::numeric_gradient(&mut params, step, &mut f)?;
    if let Some(target) = corrupt {
        let p = names
            .iter()
            .position(|n| n == target)
            .ok_or_else(|| Error::MissingParam(target.to_string()))?;
        for g in &mut analytic[p] {
            *g = *g * 1.5 + 1e-3;
        }
    }
    Ok(ModelGradCheck {
        report: numerics::compare(&analytic, &numeric),
        names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use crate::params::ParamStore;

    #[test]
    fn composition_arithmetic() {
        let mut tape = Tape::default();
        let b = tape.constant(&[], vec![2.0]).unwrap();
        let s = tape.constant(&[], vec![4.0]).unwrap();
        let j = compose(&mut tape, b, Some(s), 0.05).unwrap();
        assert!((tape.value(j.total)[0] - 2.2).abs() < 1e-12);
        let j0 = compose(&mut tape, b, Some(s), 0.0).unwrap();
        assert_eq!(tape.value(j0.total)[0], 2.0);
    }

    #[test]
    fn label_out_of_range() {
        let mut tape = Tape::default();
        let logits = tape.constant(&[1, 2], vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            joint_cls_loss(&mut tape, logits, None, &[2], 0.05),
            Err(Error::Index { .. })
        ));
    }

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(&[1], vec![x]).unwrap(), true).unwrap();
        s.insert("base.frozen", Tensor::new(&[1], vec![7.0]).unwrap(), false)
            .unwrap();
        s
    }

    fn set_grad(s: &mut ParamStore, g: f64) {
        let id = s.id("w").unwrap();
        s.get_mut(id).grad = Some(vec![g]);
    }

    #[test]
    fn adamw_matches_hand_recursion() {
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        };
        let mut store = scalar_store(1.0);
        let mut opt = AdamW::new(cfg);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (t, g) in [(1, 0.5f64), (2, -0.25f64)] {
            set_grad(&mut store, g);
            opt.step(&mut store).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x = x - 0.1 * 0.01 * x - 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        let got = store.by_name("w").unwrap().data()[0];
        assert!((got - x).abs() < 1e-12, "{got} vs {x}");
        assert_eq!(store.by_name("base.frozen").unwrap().data()[0], 7.0);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut store = scalar_store(0.3);
        let mut opt = AdamW::new(TrainConfig::default().optimizer());
        for _ in 0..3 {
            set_grad(&mut store, 0.0);
            opt.step(&mut store).unwrap();
        }
        assert_eq!(store.by_name("w").unwrap().data()[0], 0.3);
    }

    #[test]
    fn nan_gradient_names_tensor() {
        let mut store = scalar_store(0.3);
        set_grad(&mut store, f64::NAN);
        let mut opt = AdamW::new(TrainConfig::default().optimizer());
        match opt.step(&mut store) {
            Err(Error::NanGradient { name, index }) => assert_eq!((name.as_str(), index), ("w", 0)),
            other => panic!("{other:?}"),
        }
        assert_eq!(store.by_name("w").unwrap().data()[0], 0.3);
    }
}
