#![allow(dead_code)]

use rand::Rng;
use shadowpeft::backbone::TokenBatch;
use shadowpeft::numerics::rng::{normal_tensor, stream, Stream};
use shadowpeft::{AdaptedModel, ParamStore, RunConfig, ShadowPeftModel};

/// Three-layer base, width 16, copy task of length 8, no pretraining.
pub const TINY: &[&str] = &[
    "base.vocab_size=16",
    "base.hidden=16",
    "base.layers=3",
    "base.heads=2",
    "base.mlp_width=32",
    "base.max_seq=12",
    "task.seq_len=8",
    "task.eval_size=32",
    "task.eval_batch=16",
    "train.pretrain_steps=0",
    "train.batch_size=4",
];

pub fn config(extra: &[&str]) -> RunConfig {
    let o: Vec<String> = TINY.iter().chain(extra).map(|s| s.to_string()).collect();
    RunConfig::from_sources(None, &o, None, None).unwrap()
}

pub fn shadow_model(cfg: &RunConfig) -> ShadowPeftModel {
    let (store, base) = cfg.init_base().unwrap();
    ShadowPeftModel::attach(store, base, cfg.settings().unwrap(), cfg.seed).unwrap()
}

pub fn adapted(cfg: &RunConfig) -> AdaptedModel {
    let (store, base) = cfg.init_base().unwrap();
    cfg.attach(store, base).unwrap().0
}

/// Overwrites every trainable tensor with N(0, std²) so zero-initialized
/// adapters become active.
pub fn randomize_trainable(store: &mut ParamStore, std: f64, seed: u64) {
    for (i, p) in store.iter_mut().enumerate().filter(|(_, p)| p.trainable()) {
        let dtype = p.tensor.dtype();
        let fresh = normal_tensor(p.tensor.shape(), std, &mut stream(seed, Stream::Fixture, i as u64, 1));
        p.tensor = fresh.with_requires_grad(true).with_dtype(dtype);
    }
}

pub fn random_tokens(vocab: usize, batch: usize, seq: usize, seed: u64) -> TokenBatch {
    let mut rng = stream(seed, Stream::Fixture, 2, 0);
    let ids = (0..batch * seq).map(|_| rng.random_range(0..vocab)).collect();
    TokenBatch::new(batch, seq, ids).unwrap()
}
