//! Run configuration: one TOML document covering every module, validated as
//! a whole before anything is allocated.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BaseConfig, BaseModel};
use crate::error::{Error, Result};
use crate::injection::InjectionConfig;
use crate::lora::{match_budget, LoraConfig, LoraModel};
use crate::model::{AdaptedModel, Method};
use crate::numerics::rng::{stream, Stream};
use crate::numerics::DType;
use crate::params::ParamStore;
use crate::pipeline::{init_tag, InferenceMode, LossState, Pooling, ShadowPeftModel, ShadowPeftSettings};
use crate::shadow::{derive_implicit_config, ShadowConfig, ShadowMode};
use crate::tasks::{SyntheticTask, TaskConfig};
use crate::training::{pretrain_base, LossReport, ParamBudget, TrainConfig};
use crate::update::UpdateConfig;

pub const SEED_ENV: &str = "SHADOWPEFT_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl From<Precision> for DType {
    fn from(p: Precision) -> Self {
        match p {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShadowSection {
    pub mode: ShadowMode,
    /// Implicit mode: shadow depth as a fraction of base depth.
    pub layer_fraction: f64,
    /// Implicit mode: width, heads and MLP width as a fraction of the base.
    pub width_fraction: f64,
    /// Explicit mode dimensions.
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_width: usize,
    pub lm_loss_state: LossState,
}

impl Default for ShadowSection {
    fn default() -> Self {
        ShadowSection {
            mode: ShadowMode::Implicit,
            layer_fraction: 0.25,
            width_fraction: 1.0,
            layers: 1,
            hidden: 32,
            heads: 4,
            mlp_width: 64,
            lm_loss_state: LossState::Initial,
        }
    }
}

impl ShadowSection {
    pub fn resolve(&self, base: &BaseConfig) -> Result<ShadowConfig> {
        match self.mode {
            ShadowMode::Implicit => derive_implicit_config(base, self.layer_fraction, self.width_fraction),
            ShadowMode::Explicit => {
                let cfg = ShadowConfig {
                    layers: self.layers,
                    hidden: self.hidden,
                    heads: self.heads,
                    mlp_width: self.mlp_width,
                    mode: ShadowMode::Explicit,
                    cross_scale: false,
                };
                let mut errors = Vec::new();
                cfg.validate(base, &mut errors);
                if errors.is_empty() {
                    Ok(cfg)
                } else {
                    Err(Error::Config(errors))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub method: Method,
    pub inference_mode: InferenceMode,
    pub precision: Precision,
    pub pooling: Pooling,
    pub base: BaseConfig,
    pub shadow: ShadowSection,
    pub injection: InjectionConfig,
    pub update: UpdateConfig,
    pub lora: LoraConfig,
    pub train: TrainConfig,
    pub task: TaskConfig,
}

/// A built model together with its task and the base pretraining history.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub model: AdaptedModel,
    pub task: SyntheticTask,
    pub pretrain: Vec<LossReport>,
    /// Budget match used for the LoRA rank, if any.
    pub budget: Option<crate::lora::BudgetMatch>,
}

impl RunConfig {
    /// Parses TOML, applies `key=value` overrides, then the seed from
    /// `env_seed` and finally `flag_seed`. Unknown keys are errors.
    pub fn from_sources(
        text: Option<&str>,
        overrides: &[String],
        env_seed: Option<&str>,
        flag_seed: Option<u64>,
    ) -> Result<Self> {
        let mut table: toml::Table = match text {
            Some(t) => toml::from_str(t).map_err(|e| Error::Config(vec![format!("config: {e}")]))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        if let Some(s) = env_seed {
            let seed = s
                .trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(vec![format!("{SEED_ENV} must be an unsigned integer, got `{s}`")]))?;
            table.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
        if let Some(seed) = flag_seed {
            table.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(
        path: Option<&Path>,
        overrides: &[String],
        env_seed: Option<&str>,
        flag_seed: Option<u64>,
    ) -> Result<Self> {
        let text = path.map(std::fs::read_to_string).transpose()?;
        Self::from_sources(text.as_deref(), overrides, env_seed, flag_seed)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reports every invalid field at once.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        self.base.validate(&mut errors);
        let base_ok = errors.is_empty();
        if base_ok {
            if let Err(Error::Config(e)) = self.shadow.resolve(&self.base) {
                errors.extend(e);
            }
            self.injection.validate(self.base.hidden, &mut errors);
            if let Err(Error::Config(e)) = SyntheticTask::new(&self.task, &self.base, self.seed) {
                errors.extend(e);
            }
        }
        self.update.validate(&mut errors);
        self.lora.validate(&mut errors);
        self.train.validate(&mut errors);
        if self.method == Method::Lora && self.inference_mode == InferenceMode::Detached {
            errors.push("inference_mode = detached requires method = shadow".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn dtype(&self) -> DType {
        self.precision.into()
    }

    pub fn settings(&self) -> Result<ShadowPeftSettings> {
        Ok(ShadowPeftSettings {
            shadow: self.shadow.resolve(&self.base)?,
            injection: self.injection.clone(),
            update: self.update.clone(),
            lm_loss_state: self.shadow.lm_loss_state,
            pooling: self.pooling,
        })
    }

    pub fn task(&self) -> Result<SyntheticTask> {
        SyntheticTask::new(&self.task, &self.base, self.seed)
    }

    /// Freshly initialized base parameters, trainable.
    pub fn init_base(&self) -> Result<(ParamStore, BaseModel)> {
        let mut store = ParamStore::new();
        let mut rng = stream(self.seed, Stream::Init, init_tag::BASE, 0);
        let base = BaseModel::register(&mut store, &self.base, true, &mut rng)?;
        store.set_dtype(self.dtype());
        Ok((store, base))
    }

    /// Closed-form shadow budget and the LoRA rank to use.
    pub fn lora_rank(&self) -> Result<(usize, Option<crate::lora::BudgetMatch>)> {
        if !self.lora.match_budget {
            return Ok((self.lora.rank, None));
        }
        let shadow = ParamBudget::shadow_closed_form(&self.base, &self.settings()?).total();
        let m = match_budget(shadow, &self.base)?;
        Ok((m.rank, Some(m)))
    }

    /// Attaches the configured method to an existing (frozen) base.
    pub fn attach(
        &self,
        store: ParamStore,
        base: BaseModel,
    ) -> Result<(AdaptedModel, Option<crate::lora::BudgetMatch>)> {
        match self.method {
            Method::Shadow => Ok((
                ShadowPeftModel::attach(store, base, self.settings()?, self.seed)?.into(),
                None,
            )),
            Method::Lora => {
                let (rank, budget) = self.lora_rank()?;
                let cfg = LoraConfig {
                    rank,
                    ..self.lora.clone()
                };
                Ok((
                    LoraModel::attach(store, base, &cfg, self.pooling, self.seed)?.into(),
                    budget,
                ))
            }
        }
    }

    /// Base init, optional base pretraining on the task, freeze, attach.
    pub fn prepare(&self) -> Result<Prepared> {
        let task = self.task()?;
        let (mut store, base) = self.init_base()?;
        let pretrain = pretrain_base(&mut store, &base, &task, &self.train, self.pooling)?;
        let (model, budget) = self.attach(store, base)?;
        Ok(Prepared {
            model,
            task,
            pretrain,
            budget,
        })
    }

    /// Rebuilds the module views over a loaded checkpoint.
    pub fn restore(&self, store: ParamStore) -> Result<AdaptedModel> {
        match self.method {
            Method::Shadow => Ok(ShadowPeftModel::from_store(store, &self.base, self.settings()?)?.into()),
            Method::Lora => {
                let (rank, _) = self.lora_rank()?;
                let cfg = LoraConfig {
                    rank,
                    ..self.lora.clone()
                };
                Ok(LoraModel::from_store(store, &self.base, &cfg, self.pooling)?.into())
            }
        }
    }
}

/// `a.b.c=value`: the value is parsed as a TOML value, falling back to a
/// bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(vec![format!("override `{assignment}` is not key=value")]))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(vec![format!("override key `{key}` is malformed")]));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(vec![format!("override `{key}`: `{part}` is not a section")]))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str, overrides: &[&str]) -> Result<RunConfig> {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        RunConfig::from_sources(Some(text), &o, None, None)
    }

    #[test]
    fn empty_document_gives_defaults() {
        let c = cfg("", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        let s = c.settings().unwrap().shadow;
        assert_eq!((s.layers, s.hidden), (1, 32));
        assert_eq!(c.update.gate_hidden_for(32), 16);
    }

    #[test]
    fn unknown_key_is_an_error() {
        assert!(cfg("[injection]\nrnak = 4\n", &[]).is_err());
        assert!(cfg("sed = 1\n", &[]).is_err());
    }

    #[test]
    fn overrides_and_seed_precedence() {
        let c = cfg("seed = 1\n", &["injection.rank=8", "method=lora", "train.lambda = 0.5"]).unwrap();
        assert_eq!((c.injection.rank, c.method, c.train.lambda), (8, Method::Lora, 0.5));
        let env = RunConfig::from_sources(Some("seed = 1"), &[], Some("5"), None).unwrap();
        assert_eq!(env.seed, 5);
        let flag = RunConfig::from_sources(Some("seed = 1"), &[], Some("5"), Some(9)).unwrap();
        assert_eq!(flag.seed, 9);
    }

    #[test]
    fn every_invalid_field_reported() {
        let err = cfg("[injection]\nalpha = 0.0\nrank = 64\n[train]\nlambda = -1.0\n", &[]).unwrap_err();
        let Error::Config(msgs) = err else { panic!() };
        assert!(msgs.iter().any(|m| m.contains("injection strength")));
        assert!(msgs.iter().any(|m| m.contains("injection.rank")));
        assert!(msgs.iter().any(|m| m.contains("train.lambda")));
    }

    #[test]
    fn toml_round_trip() {
        let c = cfg("", &["task.name=parity_cls", "precision=f32"]).unwrap();
        let back = cfg(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
    }
}
