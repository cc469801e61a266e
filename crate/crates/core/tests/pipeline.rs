mod common;

use common::{config, random_tokens, randomize_trainable, shadow_model};
use shadowpeft::pipeline::{ForwardCtx, ForwardTrace};
use shadowpeft::shadow::ShadowState;
use shadowpeft::{Error, Tape};

fn base_logits(m: &shadowpeft::ShadowPeftModel, tokens: &shadowpeft::backbone::TokenBatch) -> Vec<f64> {
    let mut tape = Tape::new(m.dtype());
    let bound = m.bind(&mut tape).unwrap();
    let mut trace = ForwardTrace::default();
    let h = m
        .base
        .forward_hidden(&mut tape, &bound, tokens, None, &mut trace)
        .unwrap();
    let l = m.base.lm_logits(&mut tape, &bound, h).unwrap();
    tape.value(l).to_vec()
}

fn attached_logits(
    m: &shadowpeft::ShadowPeftModel,
    tokens: &shadowpeft::backbone::TokenBatch,
) -> (Vec<f64>, ForwardTrace) {
    let mut tape = Tape::new(m.dtype());
    let bound = m.bind(&mut tape).unwrap();
    let (l, _, trace) = m.attached_lm(&mut tape, &bound, tokens, &ForwardCtx::eval()).unwrap();
    (tape.value(l).to_vec(), trace)
}

fn detached_logits(
    m: &shadowpeft::ShadowPeftModel,
    tokens: &shadowpeft::backbone::TokenBatch,
) -> (Vec<f64>, ForwardTrace) {
    let mut tape = Tape::new(m.dtype());
    let bound = m.bind(&mut tape).unwrap();
    let (l, trace) = m.detached_lm(&mut tape, &bound, tokens).unwrap();
    (tape.value(l).to_vec(), trace)
}

#[test]
fn fresh_attach_matches_frozen_base_bitwise() {
    let m = shadow_model(&config(&[]));
    for seed in 0..10 {
        let tokens = random_tokens(16, 2, 7, seed);
        let (a, trace) = attached_logits(&m, &tokens);
        assert_eq!(a, base_logits(&m, &tokens));
        assert_eq!((trace.injections, trace.updates, trace.base_layer_calls), (2, 2, 3));
    }
}

#[test]
fn active_adapters_change_the_output() {
    let mut m = shadow_model(&config(&[]));
    randomize_trainable(&mut m.store, 0.2, 1);
    let tokens = random_tokens(16, 2, 7, 3);
    assert_ne!(attached_logits(&m, &tokens).0, base_logits(&m, &tokens));
}

#[test]
fn dropout_only_in_training() {
    let mut m = shadow_model(&config(&["injection.dropout=0.5", "update.dropout=0.5"]));
    randomize_trainable(&mut m.store, 0.2, 2);
    let tokens = random_tokens(16, 2, 7, 4);
    let run = |ctx: &ForwardCtx| {
        let mut tape = Tape::new(m.dtype());
        let bound = m.bind(&mut tape).unwrap();
        let (l, _, _) = m.attached_lm(&mut tape, &bound, &tokens, ctx).unwrap();
        tape.value(l).to_vec()
    };
    assert_eq!(run(&ForwardCtx::eval()), run(&ForwardCtx::eval()));
    assert_eq!(run(&ForwardCtx::train(1, 5)), run(&ForwardCtx::train(1, 5)));
    assert_ne!(run(&ForwardCtx::train(1, 5)), run(&ForwardCtx::train(1, 6)));
    assert_ne!(run(&ForwardCtx::train(1, 5)), run(&ForwardCtx::eval()));
}

#[test]
fn detached_ignores_base_layers() {
    let mut m = shadow_model(&config(&[]));
    randomize_trainable(&mut m.store, 0.2, 5);
    let tokens = random_tokens(16, 3, 6, 6);
    let (before, trace) = detached_logits(&m, &tokens);
    assert_eq!(trace.base_layer_calls, 0);
    assert_eq!(trace.embedding_calls, 1);
    for p in m.store.iter_mut().filter(|p| p.name.starts_with("base.L")) {
        p.tensor.data_mut().iter_mut().for_each(|x| *x = -3.0 * *x + 0.7);
    }
    assert_eq!(detached_logits(&m, &tokens).0, before);
}

#[test]
fn update_rejects_out_of_order_layers() {
    let m = shadow_model(&config(&[]));
    let tokens = random_tokens(16, 1, 4, 7);
    let mut tape = Tape::new(m.dtype());
    let bound = m.bind(&mut tape).unwrap();
    let mut trace = ForwardTrace::default();
    let e = m.base.embed(&mut tape, &bound, &tokens, &mut trace).unwrap();
    let s0 = m.shadow.init_state(&mut tape, &bound, e, &mut trace).unwrap();
    let err = m
        .update
        .step(&mut tape, &bound, s0, e, 2, &ForwardCtx::eval())
        .unwrap_err();
    assert!(matches!(err, Error::Sequencing { expected: 1, got: 2 }));
    let replay = ShadowState { s: s0.s, cursor: 1 };
    assert!(matches!(
        m.update.step(&mut tape, &bound, replay, e, 1, &ForwardCtx::eval()),
        Err(Error::Sequencing { .. })
    ));
}

#[test]
fn disabled_update_keeps_initial_state() {
    let mut m = shadow_model(&config(&["update.enabled=false"]));
    randomize_trainable(&mut m.store, 0.2, 8);
    let tokens = random_tokens(16, 2, 7, 9);
    let mut tape = Tape::new(m.dtype());
    let bound = m.bind(&mut tape).unwrap();
    let out = m
        .attached_hidden(&mut tape, &bound, &tokens, &ForwardCtx::eval())
        .unwrap();
    let s0 = tape.value(out.s_initial).to_vec();
    for snap in &out.trace.layers {
        assert_eq!(tape.value(snap.s), &s0[..]);
    }
    assert_eq!(out.trace.updates, 2);
    assert!(!m.store.iter().any(|p| p.name.starts_with("update.")));
}

#[test]
fn enabled_update_moves_state() {
    let mut m = shadow_model(&config(&[]));
    randomize_trainable(&mut m.store, 0.2, 10);
    let tokens = random_tokens(16, 2, 7, 11);
    let mut tape = Tape::new(m.dtype());
    let bound = m.bind(&mut tape).unwrap();
    let out = m
        .attached_hidden(&mut tape, &bound, &tokens, &ForwardCtx::eval())
        .unwrap();
    assert_ne!(tape.value(out.s_initial), tape.value(out.s_final));
}

#[test]
fn f32_mode_rounds_and_tracks_f64() {
    let mut m64 = shadow_model(&config(&[]));
    randomize_trainable(&mut m64.store, 0.1, 12);
    let mut m32 = m64.clone();
    m32.store.set_dtype(shadowpeft::DType::F32);
    let tokens = random_tokens(16, 2, 7, 13);
    let (a64, _) = attached_logits(&m64, &tokens);
    let (a32, _) = attached_logits(&m32, &tokens);
    assert!(a32.iter().all(|&x| x == x as f32 as f64));
    let diff = a64.iter().zip(&a32).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-4, "f32 drift {diff}");
}

#[test]
fn invalid_tokens_and_lengths_rejected() {
    let m = shadow_model(&config(&[]));
    let mut tape = Tape::new(m.dtype());
    let bound = m.bind(&mut tape).unwrap();
    let bad = shadowpeft::backbone::TokenBatch::new(1, 2, vec![3, 16]).unwrap();
    assert!(matches!(
        m.detached_lm(&mut tape, &bound, &bad),
        Err(Error::Index { .. })
    ));
    let long = random_tokens(16, 1, 13, 0);
    assert!(matches!(
        m.attached_lm(&mut tape, &bound, &long, &ForwardCtx::eval()),
        Err(Error::Index { .. })
    ));
}

#[test]
fn explicit_narrow_shadow_projects_to_base_width() {
    let cfg = config(&[
        "shadow.mode=explicit",
        "shadow.hidden=8",
        "shadow.heads=2",
        "shadow.mlp_width=16",
    ]);
    let mut m = shadow_model(&cfg);
    assert_eq!(m.store.by_name("shadow.in").unwrap().shape(), &[16, 8]);
    assert_eq!(m.store.by_name("shadow.proj").unwrap().shape(), &[8, 16]);
    let tokens = random_tokens(16, 2, 5, 14);
    assert_eq!(attached_logits(&m, &tokens).0, base_logits(&m, &tokens));
    randomize_trainable(&mut m.store, 0.2, 15);
    let (d, _) = detached_logits(&m, &tokens);
    assert_eq!(d.len(), 2 * 5 * 16);
}
