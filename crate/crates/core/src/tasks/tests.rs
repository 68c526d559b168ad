use indexmap::IndexMap;

use super::*;
use crate::autograd::SeqLayout;
use crate::error::Result;
use crate::init::derived_rng;
use crate::io::{save_checkpoint, CheckpointMeta};
use crate::model::{build_teacher, ModelConfig};
use crate::tensor::Tensor;
use crate::train::BatchSource;

#[test]
fn markov_source_is_deterministic() {
    let a = gen_char_corpus(3, 500, 100);
    let b = gen_char_corpus(3, 500, 100);
    assert_eq!(a, b);
    assert_ne!(a.train, gen_char_corpus(4, 500, 100).train);
    assert_ne!(a.train[..100], a.heldout[..]);
}

#[test]
fn markov_text_uses_ranked_successors() {
    let c = gen_char_corpus(11, 20_000, 10);
    let syms: Vec<usize> = c.train.iter().map(|t| symbol_of(*t).unwrap()).collect();
    let mut top = 0;
    let mut total = 0;
    for w in syms.windows(ORDER + 1) {
        let r = c.source.ranking(&w[..ORDER]);
        let pos = r.iter().position(|s| *s == w[ORDER]);
        assert!(pos.is_some(), "symbol outside the successor set");
        top += (pos == Some(0)) as usize;
        total += 1;
    }
    let frac = top as f64 / total as f64;
    assert!((frac - 0.6).abs() < 0.02, "top successor frequency {frac}");
}

#[test]
fn passkey_layout() {
    let src = MarkovSource::new(1);
    let mut rng = derived_rng(1, 5);
    for len in [8, 32, 256] {
        let s = gen_passkey(&src, &mut rng, len, 4, None);
        assert_eq!(s.context.len(), len);
        assert_eq!(s.context[s.key_pos - 1], PASSKEY_MARK as usize);
        assert_eq!(&s.context[s.key_pos..s.key_pos + 4], &s.answer[..]);
        assert_eq!(*s.context.last().unwrap(), PASSKEY_QUERY as usize);
        let mut d = s.answer.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 4);
        assert!(s.answer.iter().all(|c| (b'0' as usize..=b'9' as usize).contains(c)));
    }
    let at0 = gen_passkey(&src, &mut rng, 20, 4, Some(0));
    assert_eq!(at0.key_pos, 1);
    let late = gen_passkey(&src, &mut rng, 20, 4, Some(1000));
    assert_eq!(late.key_pos, 20 - 4 - 2 + 1);
}

#[test]
fn passkey_sample_targets_only_the_answer() {
    let src = MarkovSource::new(2);
    let s = gen_passkey(&src, &mut derived_rng(2, 0), 16, 3, None);
    let ts = s.to_task_sample();
    assert_eq!(ts.tokens.len(), 18);
    let scored: Vec<(usize, usize)> = ts
        .targets
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|t| (i, t)))
        .collect();
    assert_eq!(scored.len(), 3);
    assert_eq!(scored[0].0, 15);
    assert_eq!(scored.iter().map(|p| p.1).collect::<Vec<_>>(), s.answer);
    assert_eq!(&ts.tokens[16..], &s.answer[..2]);
}

#[test]
fn parity_labels() {
    let s = parity_sample(&[1, 0, 1, 1, 0]);
    assert_eq!(s.tokens, vec![PARITY_BOS, 1, 0, 1, 1, 0]);
    assert_eq!(
        s.targets,
        vec![None, Some(1), Some(1), Some(0), Some(1), Some(1)]
    );
}

#[test]
fn s3_composition() {
    // swap then swap is the identity; three cycles are the identity.
    let s = group_comp_sample(&[S3_SWAP, S3_SWAP, S3_CYCLE, S3_CYCLE, S3_CYCLE]);
    let id = s3_class([0, 1, 2]);
    assert_eq!(s.targets[2], Some(id));
    assert_eq!(s.targets[5], Some(id));
    assert_eq!(s.targets[1], Some(s3_class([1, 0, 2])));
    assert_eq!(s.targets[3], Some(s3_class([1, 2, 0])));
    // swap then cycle: p = swap ∘ cycle.
    let t = group_comp_sample(&[S3_SWAP, S3_CYCLE]);
    assert_eq!(t.targets[2], Some(s3_class([0, 2, 1])));
    assert!(t.tokens.iter().all(|x| *x < S3_VOCAB));
}

#[test]
fn s3_is_non_abelian() {
    let a = group_comp_sample(&[S3_SWAP, S3_CYCLE]);
    let b = group_comp_sample(&[S3_CYCLE, S3_SWAP]);
    assert_ne!(a.targets[2], b.targets[2]);
}

#[test]
fn eval_sets_are_fixed() {
    let mut spec = TaskSpec::new(TaskKind::Parity, 16, 64, 9);
    spec.n_eval = 5;
    assert_eq!(eval_set(&spec, 64), eval_set(&spec, 64));
    assert_eq!(eval_set(&spec, 64)[0].tokens.len(), 65);
    assert_ne!(eval_set(&spec, 64)[0].tokens[1..33], eval_set(&spec, 32)[0].tokens[1..]);
}

#[test]
fn task_batches_vary_length_within_bounds() {
    let spec = TaskSpec::new(TaskKind::GroupComp, 12, 12, 4);
    let src = TaskBatches::new(spec, 3, 4);
    let mut lens = std::collections::BTreeSet::new();
    for step in 0..40 {
        let b = src.batch(step);
        assert_eq!(b, src.batch(step));
        assert_eq!(b.layout.batch, 3);
        assert!((5..=13).contains(&b.layout.seq));
        lens.insert(b.layout.seq);
    }
    assert!(lens.len() > 3);
}

/// Predicts a fixed token everywhere, or echoes the current input.
struct Fixed {
    vocab: usize,
    echo: bool,
    constant: usize,
}

impl Scorer for Fixed {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn logits(&self, tokens: &[usize], _layout: SeqLayout) -> Result<Tensor> {
        let mut data = vec![0.0; tokens.len() * self.vocab];
        for (r, t) in tokens.iter().enumerate() {
            let k = if self.echo { *t } else { self.constant };
            data[r * self.vocab + k] = 5.0;
        }
        Ok(Tensor::new(vec![tokens.len(), self.vocab], data)?)
    }
}

#[test]
fn uniform_model_has_vocab_perplexity() {
    struct Uniform;
    impl Scorer for Uniform {
        fn vocab_size(&self) -> usize {
            7
        }
        fn logits(&self, tokens: &[usize], _l: SeqLayout) -> Result<Tensor> {
            Ok(Tensor::zeros(&[tokens.len(), 7]))
        }
    }
    let corpus: Vec<usize> = (0..101).map(|i| i % 7).collect();
    let ppl = eval_perplexity(&Uniform, &corpus, 10, 3).unwrap();
    assert!((ppl - 7.0).abs() < 1e-9);
    assert!(eval_perplexity(&Uniform, &corpus[..5], 10, 3).is_err());
}

#[test]
fn exact_match_needs_every_digit() {
    let samples = vec![
        TaskSample {
            tokens: vec![0, 1, 1],
            targets: vec![None, Some(1), Some(1)],
        },
        TaskSample {
            tokens: vec![0, 1, 2],
            targets: vec![None, Some(1), Some(1)],
        },
    ];
    let m = Fixed {
        vocab: 3,
        echo: true,
        constant: 0,
    };
    assert_eq!(score_samples(&m, &samples, true, 8).unwrap(), (1, 2));
    assert_eq!(score_samples(&m, &samples, false, 1).unwrap(), (3, 4));
}

#[test]
fn parity_accuracy_of_constant_guess_is_about_half() {
    let mut spec = TaskSpec::new(TaskKind::Parity, 8, 32, 1);
    spec.eval_lengths = vec![16, 32];
    spec.n_eval = 50;
    let m = Fixed {
        vocab: PARITY_VOCAB,
        echo: false,
        constant: 0,
    };
    let acc = eval_task_accuracy(&m, &spec, 16).unwrap();
    assert_eq!(acc.per_length.len(), 2);
    assert_eq!(acc.per_length[1].n, 50 * 32);
    assert!((acc.at(32).unwrap() - 0.5).abs() < 0.05);
    let small = Fixed {
        vocab: 2,
        echo: false,
        constant: 0,
    };
    assert!(eval_task_accuracy(&small, &spec, 16).is_err());
}

#[test]
fn passkey_accuracy_of_copier_is_zero() {
    let mut spec = TaskSpec::new(TaskKind::Passkey, 32, 32, 3);
    spec.n_eval = 10;
    let m = Fixed {
        vocab: 256,
        echo: true,
        constant: 0,
    };
    let acc = eval_task_accuracy(&m, &spec, 4).unwrap();
    assert_eq!(acc.overall, 0.0);
    assert_eq!(acc.per_length[0].n, 10);
}

fn metrics(pairs: &[(&str, f64)]) -> IndexMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

#[test]
fn report_aligns_missing_metrics() {
    let col = |v: &str| ReportColumn {
        variant: v.into(),
        model_tag: "toy".into(),
        checkpoint_hash: "ab".repeat(32),
        tokens_seen: 10,
        dataset_seed: 1,
    };
    let mut r = EvalReport::default();
    r.push(col("arwkv"), &metrics(&[("ppl", 3.5)]));
    r.push(col("arwkv-m"), &metrics(&[("kl", 0.1), ("ppl", 3.0)]));
    assert_eq!(r.value("ppl", "arwkv"), Some(3.5));
    assert_eq!(r.value("kl", "arwkv"), None);
    assert_eq!(r.value("kl", "arwkv-m"), Some(0.1));
    let text = r.render_text();
    assert!(text.contains("3.5000"));
    assert!(text.lines().any(|l| l.starts_with("kl") && l.contains('-')));
    let lens: Vec<usize> = text.lines().filter(|l| !l.starts_with('-')).map(|l| l.len()).collect();
    assert!(lens.iter().all(|l| *l <= lens[0].max(*l)));
    assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
}

#[test]
fn build_report_reads_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ModelConfig::toy(0);
    cfg.n_layers = 1;
    let m = build_teacher(&cfg).unwrap();
    let path = dir.path().join("a.ckpt");
    let mut meta = CheckpointMeta::for_model(&m);
    meta.variant = Some("arwkv".into());
    meta.tokens_seen = 1234;
    save_checkpoint(&m, &meta, &path).unwrap();
    let entry = ReportEntry {
        checkpoint: &path,
        variant: None,
        model_tag: "toy".into(),
        dataset_seed: 5,
        metrics: metrics(&[("ppl", 2.0)]),
    };
    let r = build_report(std::slice::from_ref(&entry)).unwrap();
    assert_eq!(r.columns[0].variant, "arwkv");
    assert_eq!(r.columns[0].tokens_seen, 1234);
    assert_eq!(r.columns[0].checkpoint_hash.len(), 64);
    assert_eq!(build_report(std::slice::from_ref(&entry)).unwrap().render_text(), r.render_text());
    let missing = dir.path().join("nope.ckpt");
    let bad = ReportEntry {
        checkpoint: &missing,
        ..entry
    };
    let err = build_report(&[bad]).unwrap_err();
    assert!(err.to_string().contains("nope.ckpt"));
}
