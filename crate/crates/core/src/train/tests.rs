use indexmap::IndexMap;
use proptest::prelude::*;

use super::*;
use crate::autograd::SeqLayout;
use crate::model::{build_teacher, convert_to_student, wrap_for_alignment, ModelConfig, WrapOptions};
use crate::tensor::{with_precision, Precision, Tensor};
use crate::timemix::Recurrence;

fn tiny_config(seed: u64) -> ModelConfig {
    let mut c = ModelConfig::toy(seed);
    c.vocab_size = 16;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.n_kv_heads = 1;
    c.head_dim = 8;
    c.d_ffn = 32;
    c.max_seq_len = 32;
    c
}

fn stream(seed: u64) -> StreamBatches {
    let tokens: Vec<usize> = (0..600u64)
        .map(|i| ((i * 7 + seed + i / 5) % 16) as usize)
        .collect();
    StreamBatches::new(tokens, 2, 8, seed)
}

fn cfg(stage: Stage, steps: u64) -> TrainConfig {
    let mut c = TrainConfig::new(stage);
    c.max_steps = steps;
    c.lr = 1e-2;
    c.batch_size = 2;
    c.seq_len = 8;
    c
}

fn one_param_model(value: f64) -> DecoderModel {
    let mut m = build_teacher(&tiny_config(0)).unwrap();
    m.set_all_trainable(false);
    let p = m.params.get_mut("final_norm.gamma").unwrap();
    let mut d = p.data().to_vec();
    d[0] = value;
    *p = Tensor::new(p.shape().to_vec(), d).unwrap().with_grad(true);
    m
}

fn grads_for(m: &DecoderModel, first: f64) -> IndexMap<String, Vec<f64>> {
    let n = m.params["final_norm.gamma"].len();
    let mut g = vec![0.0; n];
    g[0] = first;
    IndexMap::from([("final_norm.gamma".to_string(), g)])
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut m = one_param_model(1.0);
    let mut st = AdamState::default();
    let mut c = TrainConfig::new(Stage::Align);
    c.lr = 0.1;
    let gr = grads_for(&m, 0.5);
    adam_step(&mut m, &gr, &mut st, &c).unwrap();
    // Bias-corrected first step is lr * g / |g|.
    assert!((m.params["final_norm.gamma"].data()[0] - 0.9).abs() < 1e-6);
    assert_eq!(m.params["final_norm.gamma"].data()[1], 1.0);
    assert_eq!(st.t, 1);
}

#[test]
fn adam_zero_grad_changes_nothing() {
    let mut m = one_param_model(1.0);
    let before = m.params.clone();
    let mut st = AdamState::default();
    let gr = grads_for(&m, 0.0);
    adam_step(&mut m, &gr, &mut st, &TrainConfig::new(Stage::Align)).unwrap();
    assert_eq!(m.params, before);
}

#[test]
fn adam_weight_decay_is_decoupled() {
    let mut m = one_param_model(2.0);
    let mut st = AdamState::default();
    let mut c = TrainConfig::new(Stage::Align);
    c.lr = 0.1;
    c.weight_decay = 0.5;
    let gr = grads_for(&m, 0.0);
    adam_step(&mut m, &gr, &mut st, &c).unwrap();
    assert!((m.params["final_norm.gamma"].data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-6);
}

#[test]
fn adam_rejects_nan_with_name() {
    let mut m = one_param_model(1.0);
    let mut st = AdamState::default();
    let before = m.params.clone();
    let gr = grads_for(&m, f64::NAN);
    let err = adam_step(&mut m, &gr, &mut st, &TrainConfig::new(Stage::Align))
        .unwrap_err();
    assert!(err.to_string().contains("final_norm.gamma[0]"), "{err}");
    assert_eq!(m.params, before);
    assert_eq!(st.t, 0);
}

#[test]
fn alignment_loss_examples() {
    with_precision(Precision::F64, alignment_examples);
}

fn alignment_examples() {
    let a = Tensor::new(vec![1, 4], vec![1.0; 4]).unwrap();
    let z = Tensor::zeros(&[1, 4]);
    // ‖(1,1,1,1)‖ / √4 = 1.
    assert!((alignment_loss_value(&a, &z, 4).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(alignment_loss_value(&a, &a, 4).unwrap(), 0.0);
    let b = Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
    let z2 = Tensor::zeros(&[2, 2]);
    assert!((alignment_loss_value(&b, &z2, 2).unwrap() - 2.5 / 2f64.sqrt()).abs() < 1e-12);
    assert!(alignment_loss_value(&a, &z2, 4).is_err());
}

#[test]
fn kl_example() {
    with_precision(Precision::F64, kl_examples);
}

fn kl_examples() {
    let t = Tensor::new(vec![1, 2], vec![2f64.ln(), 0.0]).unwrap();
    let s = Tensor::zeros(&[1, 2]);
    let expected = (2.0 / 3.0) * (4.0f64 / 3.0).ln() + (1.0 / 3.0) * (2.0f64 / 3.0).ln();
    let got = kd_loss_value(&t, &s).unwrap();
    assert!((got - expected).abs() < 1e-12);
    assert!((got - 0.0566).abs() < 1e-4);
    assert_eq!(kd_loss_value(&t, &t).unwrap(), 0.0);
}

#[test]
fn config_defaults_and_validation() {
    let c = TrainConfig::new(Stage::Distill);
    assert_eq!(c.lr, 3e-4);
    assert_eq!(c.variant_tag(), "custom");
    let mut g = c.clone();
    g.gate_mode = crate::timemix::GateMode::GateFree;
    assert_eq!(g.variant_tag(), "ARWKV");
    let mut bad = c.clone();
    bad.beta2 = 1.0;
    assert!(bad.validate().unwrap_err().to_string().contains("beta2"));
    assert!(c.require_path("teacher_path").unwrap_err().to_string().contains("teacher_path"));
}

#[test]
fn variant_grid_round_trips() {
    for v in Variant::ALL {
        assert_eq!(Variant::from_tag(v.tag()), Some(v));
        assert_eq!(Variant::classify(v.gate_mode(), v.freeze_mlp(), v.larger_teacher()), Some(v));
    }
}

#[test]
fn stage1_trains_only_mixers_and_logs() {
    let teacher = build_teacher(&tiny_config(1)).unwrap();
    let mut w = wrap_for_alignment(&teacher, WrapOptions::default()).unwrap();
    let data = stream(1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    let mut mw = crate::io::MetricsWriter::create(&path).unwrap();
    let mut run = TrainRun::new(Stage::Align, "a");
    let mut c = cfg(Stage::Align, 20);
    c.log_every = 5;
    let before = w.param_hash(|n| param_group(n) != ParamGroup::TimeMix);
    stage1_align(&mut w, &data, &c, &mut run, Some(&mut mw)).unwrap();
    drop(mw);
    assert_eq!(w.param_hash(|n| param_group(n) != ParamGroup::TimeMix), before);
    let l = run.loss_values();
    assert_eq!(l.len(), 20);
    assert!(l[19] < l[0]);
    assert_eq!(crate::io::read_metrics(&path).unwrap().len(), 4);
    assert!(run.adam.m.keys().all(|n| param_group(n) == ParamGroup::TimeMix));
}

#[test]
fn stage1_zero_steps_is_identity() {
    let teacher = build_teacher(&tiny_config(2)).unwrap();
    let mut w = wrap_for_alignment(&teacher, WrapOptions::default()).unwrap();
    let before = w.param_hash(|_| true);
    let mut run = TrainRun::new(Stage::Align, "a");
    stage1_align(&mut w, &stream(2), &cfg(Stage::Align, 0), &mut run, None).unwrap();
    assert_eq!(w.param_hash(|_| true), before);
}

#[test]
fn layerwise_stage1_visits_each_layer() {
    let teacher = build_teacher(&tiny_config(3)).unwrap();
    let mut w = wrap_for_alignment(&teacher, WrapOptions::default()).unwrap();
    let mut c = cfg(Stage::Align, 4);
    c.layerwise = true;
    let l0 = w.param_hash(|n| n.starts_with("layers.0.tm."));
    let l1 = w.param_hash(|n| n.starts_with("layers.1.tm."));
    let mut run = TrainRun::new(Stage::Align, "a");
    stage1_align(&mut w, &stream(3), &c, &mut run, None).unwrap();
    assert_eq!(run.step, 4);
    assert_ne!(w.param_hash(|n| n.starts_with("layers.0.tm.")), l0);
    assert_ne!(w.param_hash(|n| n.starts_with("layers.1.tm.")), l1);
}

#[test]
fn stage1_rejects_unwrapped_model() {
    let mut m = build_teacher(&tiny_config(4)).unwrap();
    let mut run = TrainRun::new(Stage::Align, "a");
    assert!(stage1_align(&mut m, &stream(4), &cfg(Stage::Align, 1), &mut run, None).is_err());
}

#[test]
fn distilling_a_copy_starts_at_zero() {
    let teacher = build_teacher(&tiny_config(5)).unwrap();
    let mut student = teacher.clone();
    let mut run = TrainRun::new(Stage::Distill, "copy");
    stage2_distill(&teacher, &mut student, &stream(5), &cfg(Stage::Distill, 1), &mut run, None).unwrap();
    assert!(run.losses[0].1.abs() < 1e-6);
}

#[test]
fn gate_free_distillation_has_no_gate_slots() {
    let teacher = build_teacher(&tiny_config(6)).unwrap();
    let conv = convert_to_student(&teacher, Recurrence::Rwkv7, crate::model::InitMode::Fresh).unwrap();
    let mut c = cfg(Stage::Distill, 3);
    c.gate_mode = GateMode::GateFree;
    c.freeze_mlp = false;
    let mut s = prepare_student(&conv, &c).unwrap();
    let mut run = TrainRun::new(Stage::Distill, c.variant_tag());
    let teacher_hash = teacher.param_hash(|_| true);
    stage2_distill(&teacher, &mut s, &stream(6), &c, &mut run, None).unwrap();
    assert_eq!(run.variant, "ARWKV-M");
    assert!(!run.adam.m.keys().any(|n| is_gate_param(n)));
    assert!(run.adam.m.keys().any(|n| param_group(n) == ParamGroup::Mlp));
    assert_eq!(teacher.param_hash(|_| true), teacher_hash);
    assert!(s.params.keys().all(|n| !is_gate_param(n)));
}

#[test]
fn frozen_mlp_stays_bit_exact() {
    let teacher = build_teacher(&tiny_config(7)).unwrap();
    let mut s = convert_to_student(&teacher, Recurrence::Rwkv7, crate::model::InitMode::Fresh).unwrap();
    let mlp = s.param_hash(|n| param_group(n) == ParamGroup::Mlp);
    let mut run = TrainRun::new(Stage::Distill, "x");
    stage2_distill(&teacher, &mut s, &stream(7), &cfg(Stage::Distill, 3), &mut run, None).unwrap();
    assert_eq!(s.param_hash(|n| param_group(n) == ParamGroup::Mlp), mlp);
    assert!(!run.adam.m.keys().any(|n| param_group(n) == ParamGroup::Mlp));
}

#[test]
fn distillation_checks_vocab_and_wrapping() {
    let teacher = build_teacher(&tiny_config(8)).unwrap();
    let mut other = tiny_config(8);
    other.vocab_size = 17;
    let mut s = build_teacher(&other).unwrap();
    let mut run = TrainRun::new(Stage::Distill, "x");
    let err = stage2_distill(&teacher, &mut s, &stream(8), &cfg(Stage::Distill, 1), &mut run, None)
        .unwrap_err();
    assert!(err.to_string().contains("vocab"));
    let mut w = wrap_for_alignment(&teacher, WrapOptions::default()).unwrap();
    assert!(stage2_distill(&teacher, &mut w, &stream(8), &cfg(Stage::Distill, 1), &mut run, None).is_err());
}

#[test]
fn freeze_all_changes_nothing() {
    let mut m = build_teacher(&tiny_config(9)).unwrap();
    let before = m.param_hash(|_| true);
    let mask = FreezeMask::all(&m, false);
    let mut run = TrainRun::new(Stage::Pretrain, "t");
    train_lm(&mut m, &stream(9), &cfg(Stage::Pretrain, 3), &mut run, None, &mask).unwrap();
    assert_eq!(m.param_hash(|_| true), before);
    assert!(run.adam.m.is_empty());
}

#[test]
fn sft_needs_a_longer_context() {
    let teacher = build_teacher(&tiny_config(10)).unwrap();
    let mut s = convert_to_student(&teacher, Recurrence::Rwkv7, crate::model::InitMode::Fresh).unwrap();
    let mut run = TrainRun::new(Stage::Sft, "s");
    let data = StreamBatches::new(stream(10).tokens().to_vec(), 2, 64, 10);
    let mut c = cfg(Stage::Sft, 2);
    c.seq_len = 64;
    assert!(stage3_sft(&mut s, &data, &c, &mut run, None, Some(64)).is_err());
    stage3_sft(&mut s, &data, &c, &mut run, None, Some(16)).unwrap();
    assert_eq!(run.step, 2);
    let mut t = teacher.clone();
    assert!(stage3_sft(&mut t, &data, &c, &mut run, None, Some(16)).is_err());
}

#[test]
fn sft_on_single_token_corpus_goes_to_zero() {
    let teacher = build_teacher(&tiny_config(11)).unwrap();
    let mut s = convert_to_student(&teacher, Recurrence::Rwkv7, crate::model::InitMode::Fresh).unwrap();
    let data = StreamBatches::new(vec![3; 200], 2, 16, 0);
    let mut c = cfg(Stage::Sft, 60);
    c.seq_len = 16;
    c.lr = 5e-2;
    let mut run = TrainRun::new(Stage::Sft, "s");
    stage3_sft(&mut s, &data, &c, &mut run, None, None).unwrap();
    let l = run.loss_values();
    assert!(l[l.len() - 1] < 0.05 * l[0], "{} -> {}", l[0], l[l.len() - 1]);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let teacher = build_teacher(&tiny_config(12)).unwrap();
    let w0 = wrap_for_alignment(&teacher, WrapOptions::default()).unwrap();
    let data = stream(12);
    let c = cfg(Stage::Align, 10);

    let mut full = w0.clone();
    let mut run_full = TrainRun::new(Stage::Align, "a");
    stage1_align(&mut full, &data, &c, &mut run_full, None).unwrap();

    let mut half = w0.clone();
    let mut run_half = TrainRun::new(Stage::Align, "a");
    let mut c5 = c.clone();
    c5.max_steps = 5;
    stage1_align(&mut half, &data, &c5, &mut run_half, None).unwrap();
    let bytes = run_half.encode_state(&half).unwrap();
    let (mut resumed, mut run_res) = TrainRun::decode_state(&bytes).unwrap();
    assert_eq!(run_res.adam, run_half.adam);
    assert_eq!(resumed.params, half.params);
    stage1_align(&mut resumed, &data, &c, &mut run_res, None).unwrap();

    assert_eq!(resumed.params, full.params);
    assert_eq!(run_res.adam, run_full.adam);
    let tail: Vec<f64> = run_full.loss_values()[5..].to_vec();
    assert_eq!(run_res.loss_values(), tail);
    assert_eq!(run_res.tokens_seen, run_full.tokens_seen);
}

#[test]
fn state_checkpoint_rejects_model_file() {
    let m = build_teacher(&tiny_config(13)).unwrap();
    let bytes = crate::io::encode_checkpoint(&CheckpointMeta::for_model(&m), &m.params).unwrap();
    assert!(TrainRun::decode_state(&bytes).is_err());
}

#[test]
fn batches_depend_only_on_seed_and_step() {
    let a = stream(1);
    let b = stream(1);
    assert_eq!(a.batch(17), b.batch(17));
    assert_ne!(a.batch(17), a.batch(18));
    let s = a.sequential(0).unwrap();
    assert_eq!(s.layout, SeqLayout::new(2, 8));
    assert_eq!(s.tokens[..8], a.tokens()[..8]);
    assert_eq!(s.targets[0], Some(a.tokens()[1]));
    assert!(a.sequential(1000).is_none());
}

proptest! {
    #[test]
    fn kl_is_non_negative(t in proptest::collection::vec(-5.0f64..5.0, 12), s in proptest::collection::vec(-5.0f64..5.0, 12)) {
        let t = Tensor::new(vec![3, 4], t).unwrap();
        let s = Tensor::new(vec![3, 4], s).unwrap();
        prop_assert!(kd_loss_value(&t, &s).unwrap() >= -1e-12);
    }

    #[test]
    fn alignment_loss_is_width_invariant(v in proptest::collection::vec(-3.0f64..3.0, 8), k in 1usize..5) {
        let h = Tensor::new(vec![2, 4], v.clone()).unwrap();
        let z = Tensor::zeros(&[2, 4]);
        let base = with_precision(Precision::F64, || alignment_loss_value(&h, &z, 4).unwrap());
        let wide: Vec<f64> = v.chunks(4).flat_map(|r| r.iter().cycle().take(4 * k).copied().collect::<Vec<_>>()).collect();
        let hw = Tensor::new(vec![2, 4 * k], wide).unwrap();
        let zw = Tensor::zeros(&[2, 4 * k]);
        let rep = with_precision(Precision::F64, || alignment_loss_value(&hw, &zw, 4 * k).unwrap());
        prop_assert!((base - rep).abs() < 1e-9);
    }
}
