use std::path::{Path, PathBuf};

use arwkv::io::{
    decode_checkpoint, decode_corpus, load_checkpoint, load_config, load_corpus, read_bytes,
    save_checkpoint, save_corpus, sha256_bytes, write_bytes, CheckpointMeta, Corpus, FileHash,
    MetricsWriter, RunConfig, RunManifest,
};
use arwkv::model::{
    build_teacher, convert_to_student, param_group, unwrap_student, wrap_for_alignment,
    AttentionKind, DecoderModel, FreezeMask, ModelConfig, WrapOptions,
};
use arwkv::tasks::{build_report, evaluate, gen_char_corpus, EvalPlan, ReportEntry, TaskBatches, TaskKind};
use arwkv::tensor::precision;
use arwkv::train::{
    prepare_student, stage1_align, stage2_distill, stage3_sft, train_lm, BatchSource, Stage,
    StreamBatches, TrainConfig, TrainRun,
};
use arwkv::{Error, Result};

use crate::{EvalArgs, ReportArgs, RunArgs};

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn read_config(path: &Path) -> Result<RunConfig> {
    load_config(path)
}

fn corpus_path(flag: Option<&Path>, configured: Option<&String>) -> Option<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| configured.map(PathBuf::from))
}

fn load_tokens(path: &Path, vocab: usize) -> Result<Vec<usize>> {
    let c = load_corpus(path)?;
    if c.vocab_size as usize > vocab {
        return Err(Error::Invalid(format!(
            "corpus {} has vocab {} but the model has {vocab}",
            path.display(),
            c.vocab_size
        )));
    }
    Ok(c.ids())
}

/// Training batches for `cfg`: corpus windows for text, generated samples
/// for the probe tasks.
fn batch_source(
    cfg: &RunConfig,
    corpus: Option<&Path>,
    vocab: usize,
) -> Result<(Box<dyn BatchSource>, Vec<PathBuf>)> {
    let t = &cfg.train;
    if cfg.data.task == TaskKind::CharLm {
        let path = corpus_path(corpus, cfg.data.train_path.as_ref()).ok_or_else(|| {
            Error::config("data.train_path", "text training needs a corpus (or --corpus)")
        })?;
        let tokens = load_tokens(&path, vocab)?;
        if tokens.len() <= t.seq_len {
            return Err(Error::config("seq_len", "longer than the training corpus"));
        }
        let src = StreamBatches::new(tokens, t.batch_size, t.seq_len, t.seed);
        return Ok((Box::new(src), vec![path]));
    }
    if cfg.data.task.vocab_size() > vocab {
        return Err(Error::Invalid(format!(
            "task {} needs vocab {} but the model has {vocab}",
            cfg.data.task.tag(),
            cfg.data.task.vocab_size()
        )));
    }
    let mut src = TaskBatches::new(cfg.data.task_spec(t.seq_len), t.batch_size, cfg.data.min_len);
    src.dense = cfg.data.dense;
    Ok((Box::new(src), Vec::new()))
}

/// A fresh model and run, or both restored from `--resume`.
fn start_run(
    args: &RunArgs,
    stage: Stage,
    variant: &str,
    fresh: impl FnOnce() -> Result<DecoderModel>,
) -> Result<(DecoderModel, TrainRun)> {
    match &args.resume {
        Some(path) => {
            let (model, run) = TrainRun::load_state(path)?;
            if run.stage != stage {
                return Err(Error::Invalid(format!(
                    "{} holds a {} run, not {}",
                    path.display(),
                    run.stage.as_str(),
                    stage.as_str()
                )));
            }
            Ok((model, run))
        }
        None => Ok((fresh()?, TrainRun::new(stage, variant))),
    }
}

fn metrics_writer(args: &RunArgs) -> Result<(MetricsWriter, PathBuf)> {
    let path = args
        .metrics
        .clone()
        .unwrap_or_else(|| with_suffix(&args.out, ".metrics.jsonl"));
    let w = if args.resume.is_some() {
        MetricsWriter::append(&path)?
    } else {
        MetricsWriter::create(&path)?
    };
    Ok((w, path))
}

fn step_limit(args: &RunArgs, cfg: &TrainConfig) -> TrainConfig {
    let mut c = cfg.clone();
    if let Some(stop) = args.stop_at {
        c.max_steps = stop.min(cfg.max_steps);
    }
    c
}

struct Finish<'a> {
    args: &'a RunArgs,
    cfg: &'a RunConfig,
    model: &'a DecoderModel,
    run: &'a TrainRun,
    inputs: Vec<PathBuf>,
    corpora: Vec<PathBuf>,
    metrics: PathBuf,
    seq_len: usize,
}

/// Writes the checkpoint, optional training state and the manifest.
fn finish(f: Finish<'_>) -> Result<()> {
    let mut meta = CheckpointMeta::for_model(f.model);
    meta.stage = Some(f.run.stage.as_str().into());
    meta.variant = Some(f.run.variant.clone());
    meta.tokens_seen = f.run.tokens_seen;
    meta.seq_len = Some(f.seq_len);
    meta.step = f.run.step;
    save_checkpoint(f.model, &meta, &f.args.out)?;
    if let Some(state) = &f.args.save_state {
        f.run.save_state(f.model, state)?;
    }
    let mut inputs = f
        .inputs
        .iter()
        .map(|p| FileHash::checkpoint(p))
        .collect::<Result<Vec<_>>>()?;
    if let Some(r) = &f.args.resume {
        inputs.push(FileHash::checkpoint(r)?);
    }
    let manifest = RunManifest {
        stage: f.run.stage.as_str().into(),
        variant: Some(f.run.variant.clone()),
        config: f.cfg.to_json(),
        seed: f.cfg.train.seed,
        precision: precision().to_string(),
        inputs,
        corpora: f
            .corpora
            .iter()
            .map(|p| FileHash::corpus(p))
            .collect::<Result<Vec<_>>>()?,
        output: Some(FileHash::checkpoint(&f.args.out)?),
        metrics_path: Some(f.metrics.display().to_string()),
    };
    manifest.save(&with_suffix(&f.args.out, ".manifest.json"))
}

pub fn gen_data(config: &Path, out_dir: &Path) -> Result<()> {
    let cfg = read_config(config)?;
    let d = &cfg.data;
    let c = gen_char_corpus(d.seed, d.n_train, d.n_heldout);
    let to_file = |tokens: &[usize]| Corpus {
        vocab_size: 256,
        tokens: tokens.iter().map(|t| *t as u32).collect(),
    };
    let train = out_dir.join("train.bin");
    let heldout = out_dir.join("heldout.bin");
    save_corpus(&to_file(&c.train), &train)?;
    save_corpus(&to_file(&c.heldout), &heldout)?;
    let manifest = RunManifest {
        stage: "gen-data".into(),
        variant: None,
        config: cfg.to_json(),
        seed: d.seed,
        precision: precision().to_string(),
        inputs: Vec::new(),
        corpora: vec![FileHash::corpus(&train)?, FileHash::corpus(&heldout)?],
        output: None,
        metrics_path: None,
    };
    manifest.save(&out_dir.join("manifest.json"))
}

/// A model built from `cfg`: attention models directly, recurrent ones by
/// converting a freshly initialised attention model.
fn fresh_model(cfg: &ModelConfig) -> Result<DecoderModel> {
    let kind = cfg.attention_kind;
    let mut base = cfg.clone();
    base.attention_kind = AttentionKind::Gqa;
    let teacher = build_teacher(&base)?;
    match kind {
        AttentionKind::Gqa => Ok(teacher),
        AttentionKind::Rwkv7 | AttentionKind::Rwkv6 => {
            let rec = if kind == AttentionKind::Rwkv7 {
                arwkv::timemix::Recurrence::Rwkv7
            } else {
                arwkv::timemix::Recurrence::Rwkv6
            };
            convert_to_student(&teacher, rec, arwkv::model::InitMode::Fresh)
        }
        AttentionKind::Wrapper => Err(Error::config(
            "model.attention_kind",
            "wrappers are made by `align`, not built from scratch",
        )),
    }
}

pub fn train_teacher(args: &RunArgs, init: Option<&Path>) -> Result<()> {
    let cfg = read_config(&args.config)?;
    let (mut model, mut run) = start_run(args, Stage::Pretrain, "teacher", || match init {
        Some(p) => Ok(load_checkpoint(p)?.0),
        None => fresh_model(cfg.require_model()?),
    })?;
    let (data, corpora) = batch_source(&cfg, args.corpus.as_deref(), model.config.vocab_size)?;
    let (mut w, metrics) = metrics_writer(args)?;
    let tc = step_limit(args, &cfg.train);
    let mask = FreezeMask::all(&model, true);
    train_lm(&mut model, data.as_ref(), &tc, &mut run, Some(&mut w), &mask)?;
    finish(Finish {
        args,
        cfg: &cfg,
        model: &model,
        run: &run,
        inputs: init.map(Path::to_path_buf).into_iter().collect(),
        corpora,
        metrics,
        seq_len: cfg.train.seq_len,
    })
}

pub fn align(args: &RunArgs, teacher_path: &Path) -> Result<()> {
    let cfg = read_config(&args.config)?;
    let (teacher, _) = load_checkpoint(teacher_path)?;
    let t = &cfg.train;
    let (mut model, mut run) = start_run(args, Stage::Align, "align", || {
        let mut base = teacher.clone();
        if let Some(m) = &cfg.model {
            base.config.a_range = m.a_range;
            base.config.norm_mode = m.norm_mode;
            base.config.gate_mode = m.gate_mode;
        }
        let opts = WrapOptions {
            combine_mode: t.combine_mode,
            student: cfg.model.as_ref().map(|m| m.wrapper_student).unwrap_or_default(),
            init_mode: t.init_mode,
            align_target: t.align_target,
        };
        wrap_for_alignment(&base, opts)
    })?;
    let (data, corpora) = batch_source(&cfg, args.corpus.as_deref(), model.config.vocab_size)?;
    let (mut w, metrics) = metrics_writer(args)?;
    stage1_align(&mut model, data.as_ref(), &step_limit(args, t), &mut run, Some(&mut w))?;
    finish(Finish {
        args,
        cfg: &cfg,
        model: &model,
        run: &run,
        inputs: vec![teacher_path.to_path_buf()],
        corpora,
        metrics,
        seq_len: t.seq_len,
    })
}

/// The recurrent student inside `m`, converting an attention model fresh.
fn as_student(m: &DecoderModel, cfg: &TrainConfig) -> Result<DecoderModel> {
    match m.config.attention_kind {
        AttentionKind::Wrapper => unwrap_student(m),
        AttentionKind::Gqa => convert_to_student(m, arwkv::timemix::Recurrence::Rwkv7, cfg.init_mode),
        AttentionKind::Rwkv7 | AttentionKind::Rwkv6 => Ok(m.clone()),
    }
}

pub fn distill(args: &RunArgs, teacher_path: &Path, student_path: &Path) -> Result<()> {
    let cfg = read_config(&args.config)?;
    let t = &cfg.train;
    let (teacher, _) = load_checkpoint(teacher_path)?;
    let (mut model, mut run) = start_run(args, Stage::Distill, &t.variant_tag(), || {
        let (student, _) = load_checkpoint(student_path)?;
        prepare_student(&as_student(&student, t)?, t)
    })?;
    let (data, corpora) = batch_source(&cfg, args.corpus.as_deref(), model.config.vocab_size)?;
    let (mut w, metrics) = metrics_writer(args)?;
    stage2_distill(&teacher, &mut model, data.as_ref(), &step_limit(args, t), &mut run, Some(&mut w))?;
    finish(Finish {
        args,
        cfg: &cfg,
        model: &model,
        run: &run,
        inputs: vec![teacher_path.to_path_buf(), student_path.to_path_buf()],
        corpora,
        metrics,
        seq_len: t.seq_len,
    })
}

pub fn sft(args: &RunArgs, student_path: &Path) -> Result<()> {
    let cfg = read_config(&args.config)?;
    let t = &cfg.train;
    let (student, meta) = load_checkpoint(student_path)?;
    let variant = meta.variant.clone().unwrap_or_else(|| "sft".into());
    let (mut model, mut run) = start_run(args, Stage::Sft, &variant, || as_student(&student, t))?;
    let (data, corpora) = batch_source(&cfg, args.corpus.as_deref(), model.config.vocab_size)?;
    let (mut w, metrics) = metrics_writer(args)?;
    stage3_sft(&mut model, data.as_ref(), &step_limit(args, t), &mut run, Some(&mut w), meta.seq_len)?;
    finish(Finish {
        args,
        cfg: &cfg,
        model: &model,
        run: &run,
        inputs: vec![student_path.to_path_buf()],
        corpora,
        metrics,
        seq_len: t.seq_len,
    })
}

struct Scored {
    metrics: indexmap::IndexMap<String, f64>,
}

fn score(
    cfg: &RunConfig,
    model: &DecoderModel,
    teacher: Option<&DecoderModel>,
    heldout: Option<&Path>,
) -> Result<Scored> {
    let heldout_path = corpus_path(heldout, cfg.data.heldout_path.as_ref());
    let text = heldout_path
        .as_deref()
        .map(|p| load_tokens(p, model.config.vocab_size))
        .transpose()?;
    let task = (cfg.data.task != TaskKind::CharLm).then(|| cfg.data.task_spec(cfg.train.seq_len));
    let plan = EvalPlan {
        heldout: text.as_deref(),
        seq_len: cfg.train.seq_len,
        kl_windows: 16,
        task,
        teacher,
        batch: cfg.train.batch_size,
    };
    Ok(Scored {
        metrics: evaluate(model, &plan)?,
    })
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let cfg = read_config(&a.config)?;
    let (model, meta) = load_checkpoint(&a.model)?;
    let teacher = a.teacher.as_deref().map(load_checkpoint).transpose()?;
    let s = score(&cfg, &model, teacher.as_ref().map(|t| &t.0), a.heldout.as_deref())?;
    let out = serde_json::json!({
        "checkpoint": a.model.display().to_string(),
        "hash": sha256_bytes(&read_bytes(&a.model)?),
        "stage": meta.stage,
        "variant": meta.variant,
        "tokens_seen": meta.tokens_seen,
        "metrics": s.metrics,
    });
    let text = serde_json::to_string_pretty(&out)?;
    match &a.out {
        Some(p) => write_bytes(p, format!("{text}\n").as_bytes()),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn model_tag(c: &ModelConfig) -> String {
    let kind = match c.attention_kind {
        AttentionKind::Gqa => "gqa",
        AttentionKind::Rwkv7 => "rwkv7",
        AttentionKind::Rwkv6 => "rwkv6",
        AttentionKind::Wrapper => "wrapper",
    };
    format!("{kind}-d{}-l{}", c.d_model, c.n_layers)
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let cfg = read_config(&a.config)?;
    let teacher = a.teacher.as_deref().map(load_checkpoint).transpose()?;
    let mut scored = Vec::new();
    for path in &a.runs {
        let (model, _) = load_checkpoint(path)?;
        let s = score(&cfg, &model, teacher.as_ref().map(|t| &t.0), a.heldout.as_deref())?;
        scored.push((path.as_path(), model_tag(&model.config), s.metrics));
    }
    let entries: Vec<ReportEntry<'_>> = scored
        .into_iter()
        .map(|(checkpoint, model_tag, metrics)| ReportEntry {
            checkpoint,
            variant: None,
            model_tag,
            dataset_seed: cfg.data.seed,
            metrics,
        })
        .collect();
    let report = build_report(&entries)?;
    if let Some(p) = &a.out {
        write_bytes(p, format!("{}\n", report.to_json()).as_bytes())?;
    }
    let text = report.render_text();
    match &a.text {
        Some(p) => write_bytes(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn inspect(path: &Path) -> Result<()> {
    let bytes = read_bytes(path)?;
    let hash = sha256_bytes(&bytes);
    let summary = match bytes.get(..4) {
        Some(b"ARWC") => {
            let c = decode_corpus(&bytes)?;
            serde_json::json!({
                "file": "corpus",
                "vocab_size": c.vocab_size,
                "tokens": c.tokens.len(),
                "sha256": hash,
            })
        }
        _ => {
            let (meta, tensors) = decode_checkpoint(&bytes)?;
            let mut groups = indexmap::IndexMap::<String, usize>::new();
            let mut total = 0;
            for (name, t) in &tensors {
                let key = match name.split_once(':') {
                    Some((prefix, _)) => format!("optimizer_{prefix}"),
                    None => format!("{:?}", param_group(name)).to_lowercase(),
                };
                *groups.entry(key).or_default() += t.len();
                total += t.len();
            }
            serde_json::json!({
                "file": "checkpoint",
                "meta": meta,
                "tensors": tensors.len(),
                "values": total,
                "groups": groups,
                "sha256": hash,
            })
        }
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}
