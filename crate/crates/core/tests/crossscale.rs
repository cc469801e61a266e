mod common;

use common::random_tokens;
use nalgebra::DMatrix;
use shadowpeft::backbone::{BaseConfig, BaseModel};
use shadowpeft::crossscale::{
    attach_explicit_shadow, head_matrix, independent_lm, mean_head_kl, pinv_init_projection, projection_residual,
    CrossScaleModel, ProjInit,
};
use shadowpeft::numerics::rng::{normal_tensor, stream, Stream};
use shadowpeft::numerics::{from_matrix, to_matrix};
use shadowpeft::pipeline::{ForwardCtx, ForwardTrace};
use shadowpeft::tasks::{SyntheticTask, TaskConfig};
use shadowpeft::training::AdamWConfig;
use shadowpeft::{ParamStore, RunConfig, Tape, Tensor};

fn gaussian(rows: usize, cols: usize, seed: u64, tag: u64) -> Tensor {
    normal_tensor(&[rows, cols], 1.0, &mut stream(seed, Stream::Fixture, tag, 7))
}

/// `‖(I − Q Qᵀ) R‖_F` with `Q` from a QR factorization of the full-column-rank `A`.
fn complement_norm(a: &Tensor, r: &Tensor) -> f64 {
    let a = to_matrix(a).unwrap();
    let r = to_matrix(r).unwrap();
    let n = a.nrows();
    let q = a.qr().q();
    ((DMatrix::identity(n, n) - &q * q.transpose()) * r).norm()
}

#[test]
fn residual_equals_orthogonal_complement_norm() {
    for seed in 0..10 {
        let (v, dt, ds) = (40, 8 + seed as usize % 5, 3 + seed as usize % 7);
        let w_lm = gaussian(v, dt, seed, 0);
        let w_ref = gaussian(v, ds, seed, 1);
        let pi = pinv_init_projection(&w_lm, &w_ref).unwrap();
        let oracle = complement_norm(&w_lm, &w_ref);
        assert!((pi.residual - oracle).abs() < 1e-8, "{} vs {oracle}", pi.residual);
        let recomputed = projection_residual(&w_lm, &pi.p, &w_ref).unwrap();
        assert!((recomputed - pi.residual).abs() < 1e-10);
    }
}

#[test]
fn pinv_beats_random_competitors() {
    let (v, dt, ds) = (48, 12, 6);
    let w_lm = gaussian(v, dt, 3, 0);
    let w_ref = gaussian(v, ds, 3, 1);
    let pi = pinv_init_projection(&w_lm, &w_ref).unwrap();
    let p = to_matrix(&pi.p).unwrap();
    for k in 0..1000u64 {
        let noise = to_matrix(&normal_tensor(&[dt, ds], 1.0, &mut stream(k, Stream::Fixture, 9, 9))).unwrap();
        let scale = 10f64.powi((k % 7) as i32 - 5);
        let candidate = if k % 2 == 0 { &p + noise * scale } else { noise };
        let r = projection_residual(&w_lm, &from_matrix(&candidate), &w_ref).unwrap();
        assert!(pi.residual <= r, "competitor {k}: {r} < {}", pi.residual);
    }
}

#[test]
fn pinv_bridge_has_lower_head_kl_than_random() {
    let (v, dt, ds) = (40, 10, 5);
    for seed in 0..5 {
        let w_lm = gaussian(v, dt, seed, 0);
        let w_ref = gaussian(v, ds, seed, 1);
        let states = gaussian(32, ds, seed, 2);
        let pi = pinv_init_projection(&w_lm, &w_ref).unwrap();
        let random = normal_tensor(&[dt, ds], 0.3, &mut stream(seed, Stream::Fixture, 3, 0));
        let kl_pinv = mean_head_kl(&w_lm, &pi.p, &w_ref, &states).unwrap();
        let kl_rand = mean_head_kl(&w_lm, &random, &w_ref, &states).unwrap();
        assert!(kl_pinv >= -1e-12 && kl_pinv < kl_rand, "{kl_pinv} vs {kl_rand}");
    }
}

fn lm_config(hidden: usize) -> BaseConfig {
    BaseConfig {
        vocab_size: 64,
        hidden,
        layers: 2,
        heads: 2,
        mlp_width: 2 * hidden,
        max_seq: 16,
        num_classes: 2,
    }
}

fn run_config(hidden: usize) -> RunConfig {
    let o = [
        "base.vocab_size=64".to_string(),
        format!("base.hidden={hidden}"),
        "base.layers=2".into(),
        "base.heads=2".into(),
        format!("base.mlp_width={}", 2 * hidden),
        "base.max_seq=16".into(),
        "task.seq_len=16".into(),
        "injection.rank=2".into(),
        "train.pretrain_steps=0".into(),
    ];
    RunConfig::from_sources(None, &o, None, None).unwrap()
}

fn compose(dt: usize, ds: usize, init: ProjInit) -> (RunConfig, ParamStore, BaseModel, CrossScaleModel) {
    let cfg = run_config(dt);
    let (base_store, base) = cfg.init_base().unwrap();
    let (shadow_store, _) = independent_lm(&lm_config(ds), 17).unwrap();
    let cross = CrossScaleModel::compose(&base_store, &base, &shadow_store, &lm_config(ds), init, 3).unwrap();
    (cfg, base_store, base, cross)
}

#[test]
fn shape_safety_across_width_pairs() {
    for dt in [4, 8, 16, 32] {
        for ds in [4, 8, 16, 32] {
            let (cfg, base_store, base, cross) = compose(dt, ds, ProjInit::Pinv);
            assert_eq!(cross.store.get(cross.proj).shape(), &[ds, dt]);
            assert_eq!(cross.projection.as_ref().unwrap().p.shape(), &[dt, ds]);
            let model = attach_explicit_shadow(base_store, base, &cross, cfg.settings().unwrap(), 1).unwrap();
            assert_eq!(model.store.by_name("shadow.in").unwrap().shape(), &[dt, ds]);
            let tokens = random_tokens(64, 2, 5, dt as u64 * 100 + ds as u64);
            let mut tape = Tape::default();
            let bound = model.bind(&mut tape).unwrap();
            let (l, s, _) = model
                .attached_lm(&mut tape, &bound, &tokens, &ForwardCtx::eval())
                .unwrap();
            assert_eq!(tape.shape(l), &[2, 5, 64]);
            assert_eq!(tape.shape(s), &[2, 5, 64]);
        }
    }
}

#[test]
fn mismatched_vocabulary_rejected() {
    let cfg = run_config(8);
    let (base_store, base) = cfg.init_base().unwrap();
    let other = BaseConfig {
        vocab_size: 32,
        ..lm_config(4)
    };
    let (shadow_store, _) = independent_lm(&other, 1).unwrap();
    assert!(CrossScaleModel::compose(&base_store, &base, &shadow_store, &other, ProjInit::Pinv, 0).is_err());
}

#[test]
fn equal_width_self_bridge_reproduces_native_logits() {
    let cfg = run_config(8);
    let (base_store, base) = cfg.init_base().unwrap();
    let cross = CrossScaleModel::compose(&base_store, &base, &base_store, &cfg.base, ProjInit::Pinv, 0).unwrap();
    let p = to_matrix(&cross.projection.as_ref().unwrap().p).unwrap();
    assert!((p - DMatrix::identity(8, 8)).amax() < 1e-8);
    let batch = cfg.task().unwrap().train_batch(0, 0, 2);
    let mut tape = Tape::default();
    let bound = cross.store.bind(&mut tape).unwrap();
    let composed = cross.lm_logits(&mut tape, &bound, &batch).unwrap();
    let native = cross.reference_logits(&mut tape, &bound, &batch).unwrap();
    let diff = tape
        .value(composed)
        .iter()
        .zip(tape.value(native))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-8, "{diff}");
}

#[test]
fn attached_cross_scale_shadow_keeps_zero_init_identity() {
    for init in [ProjInit::Pinv, ProjInit::Random] {
        let (cfg, base_store, base, cross) = compose(16, 8, init);
        let model = attach_explicit_shadow(base_store, base, &cross, cfg.settings().unwrap(), 2).unwrap();
        let tokens = random_tokens(64, 2, 9, 4);
        let mut tape = Tape::default();
        let bound = model.bind(&mut tape).unwrap();
        let (adapted, _, _) = model
            .attached_lm(&mut tape, &bound, &tokens, &ForwardCtx::eval())
            .unwrap();
        let mut trace = ForwardTrace::default();
        let h = model
            .base
            .forward_hidden(&mut tape, &bound, &tokens, None, &mut trace)
            .unwrap();
        let frozen = model.base.lm_logits(&mut tape, &bound, h).unwrap();
        assert_eq!(tape.value(adapted), tape.value(frozen));
    }
}

#[test]
fn attached_shadow_carries_the_composed_head_path() {
    let (cfg, base_store, base, cross) = compose(16, 8, ProjInit::Pinv);
    let model = attach_explicit_shadow(base_store, base, &cross, cfg.settings().unwrap(), 2).unwrap();
    assert_eq!(model.store.by_name("shadow.proj").unwrap(), cross.store.get(cross.proj));
    assert_eq!(
        model.store.by_name("shadow.ln_f.gamma").unwrap(),
        cross.store.by_name("shadow_lm.ln_f.gamma").unwrap()
    );
    assert!(model.store.by_name("shadow.lm_head").is_err());
    let w_lm = head_matrix(&model.store, model.base.lm_head).unwrap();
    assert_eq!(w_lm.shape(), &[64, 16]);
}

#[test]
fn continued_pretraining_lowers_composed_ce() {
    let (cfg, _, _, mut cross) = compose(16, 8, ProjInit::Pinv);
    let corpus = SyntheticTask::new(
        &TaskConfig {
            seq_len: 16,
            ..TaskConfig::default()
        },
        &cfg.base,
        5,
    )
    .unwrap();
    let eval = corpus.eval_split();
    let before = cross.cross_entropy(&eval).unwrap();
    let frozen_head = cross.store.get(cross.target_head).clone();
    let opt = AdamWConfig {
        lr: 1e-2,
        ..cfg.train.optimizer()
    };
    let hist = cross.shadow_pretrain(&corpus, 300, 16, opt).unwrap();
    assert_eq!(hist.len(), 300);
    let after = cross.cross_entropy(&eval).unwrap();
    assert!(after <= 0.8 * before, "{before} -> {after}");
    assert_eq!(cross.store.get(cross.target_head), &frozen_head);
}
