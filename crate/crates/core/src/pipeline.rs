//! End-to-end workflow on a [`RunConfig`]: corpora, tokenizer, pretraining,
//! downstream tasks, and the ablation harness.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, TokenizerConfig};
use crate::data::{
    all_combos, build_corpora, lexicon_lines, paired_examples, render_scene, vqa_answers, vqa_examples, Combo, Corpora,
    PairRecord, VqaRecord,
};
use crate::error::{Error, Result};
use crate::inference::{
    accuracy, evaluate_captions, evaluate_generative, finetune_classify, finetune_generative, predict_classes,
    CaptionItem, ClassifyExample, GenerativeExample, Prediction, SplitScore,
};
use crate::model::{HeadSpec, Model, StemConfig, Variant};
use crate::objectives::Objective;
use crate::parallel::{try_map, Exec};
use crate::tokenizer::{train_bpe, Vocab};
use crate::training::{StepMetrics, TrainData, Trainer};

/// Corpora plus everything derived from them for pretraining.
pub struct Prepared {
    pub corpora: Corpora,
    pub vocab: Vocab,
    pub data: TrainData,
}

/// Lines the tokenizer is trained on: captions, documents and the task
/// lexicon.
pub fn tokenizer_lines(c: &Corpora) -> Vec<String> {
    let mut v: Vec<String> = c.pairs.iter().map(|p| p.caption.clone()).collect();
    v.extend(c.docs.iter().map(|d| d.text.clone()));
    v.extend(lexicon_lines());
    v
}

pub fn train_tokenizer(cfg: &TokenizerConfig, c: &Corpora) -> Result<Vocab> {
    let lines = tokenizer_lines(c);
    Ok(train_bpe(lines.iter().map(String::as_str), cfg.vocab_size, 0)?.with_sentinels(cfg.sentinels))
}

/// Render images and encode texts (with EOS) for the trainer.
pub fn tokenize_corpora(c: &Corpora, vocab: &Vocab, image_size: usize, exec: Exec) -> Result<TrainData> {
    let pairs = try_map(exec, &c.pairs, |_, p| -> Result<_> {
        Ok((render_scene(&p.spec, image_size)?, vocab.encode(&p.caption, false, true)?))
    })?;
    let docs = c.docs.iter().map(|d| vocab.encode(&d.text, false, true)).collect::<Result<_>>()?;
    Ok(TrainData { pairs, docs })
}

pub fn prepare(cfg: &RunConfig, exec: Exec) -> Result<Prepared> {
    cfg.validate()?;
    let corpora = build_corpora(&cfg.corpus)?;
    let vocab = train_tokenizer(&cfg.tokenizer, &corpora)?;
    let data = tokenize_corpora(&corpora, &vocab, cfg.corpus.image_size, exec)?;
    Ok(Prepared { corpora, vocab, data })
}

/// Fresh model for `cfg` sized to `vocab`.
pub fn init_model(cfg: &RunConfig, vocab: &Vocab) -> Result<Model<f32>> {
    let mut mc = cfg.model.clone();
    mc.vocab = vocab.len();
    Model::new(mc, cfg.seed)
}

/// First line of every metrics file: the resolved configuration.
pub fn metrics_header(cfg: &RunConfig) -> String {
    serde_json::json!({ "config": cfg }).to_string()
}

/// Pretrain from scratch, writing the header and one JSON line per step.
pub fn pretrain(
    cfg: &RunConfig,
    prep: &Prepared,
    exec: Exec,
    metrics: &mut dyn Write,
    ckpt_dir: Option<&Path>,
) -> Result<Model<f32>> {
    let model = init_model(cfg, &prep.vocab)?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), &prep.data, &prep.vocab)?;
    trainer.exec = exec;
    writeln!(metrics, "{}", metrics_header(cfg)).map_err(|e| Error::io("<metrics>", e))?;
    trainer.run(metrics, ckpt_dir)?;
    Ok(trainer.model)
}

/// Caption a split and score it against its clean captions.
pub fn caption_eval(
    model: &Model<f32>,
    vocab: &Vocab,
    records: &[PairRecord],
    cfg: &RunConfig,
    exec: Exec,
) -> Result<(SplitScore, Vec<Prediction>)> {
    let records = &records[..cfg.eval.limit.unwrap_or(records.len()).min(records.len())];
    let images = try_map(exec, records, |_, r| render_scene(&r.spec, cfg.corpus.image_size))?;
    let items: Vec<CaptionItem<'_>> = records
        .iter()
        .zip(&images)
        .map(|(r, im)| CaptionItem { id: &r.id, image: im, reference: &r.caption })
        .collect();
    evaluate_captions(model, vocab, &items, &cfg.eval.prompt, cfg.eval.max_len, cfg.eval.beam, exec)
}

fn training_combos(cfg: &RunConfig) -> Result<Vec<Combo>> {
    let holdout = cfg.corpus.holdout_combos()?;
    Ok(all_combos().into_iter().filter(|c| !holdout.contains(c)).collect())
}

/// Classification view of VQA records: labels index [`vqa_answers`].
pub fn classify_examples(
    records: &[VqaRecord],
    vocab: &Vocab,
    image_size: usize,
    exec: Exec,
) -> Result<Vec<ClassifyExample>> {
    let answers = vqa_answers();
    try_map(exec, records, |_, r| -> Result<ClassifyExample> {
        let label = answers
            .iter()
            .position(|a| *a == r.answer)
            .ok_or_else(|| Error::Data(format!("answer {:?} outside the answer set", r.answer)))?;
        Ok(ClassifyExample {
            image: render_scene(&r.spec, image_size)?,
            image2: None,
            question: vocab.encode(&r.question, false, false)?,
            label,
        })
    })
}

/// Train and held-in evaluation sets for the VQA classification task.
pub fn vqa_task(cfg: &RunConfig, vocab: &Vocab, exec: Exec) -> Result<(Vec<ClassifyExample>, Vec<ClassifyExample>)> {
    let combos = training_combos(cfg)?;
    let seed = cfg.vqa.finetune.seed;
    let train = vqa_examples(cfg.vqa.n_train, &combos, cfg.corpus.grid, None, seed, "vqa_train");
    let eval = vqa_examples(cfg.vqa.n_eval, &combos, cfg.corpus.grid, None, seed.wrapping_add(1), "vqa_eval");
    Ok((
        classify_examples(&train, vocab, cfg.corpus.image_size, exec)?,
        classify_examples(&eval, vocab, cfg.corpus.image_size, exec)?,
    ))
}

pub const VQA_HEAD: &str = "vqa";
pub const PAIRED_HEAD: &str = "paired";

/// Finetune a VQA classification head; returns held-in accuracy and the
/// loss trace.
pub fn vqa_finetune_eval(
    model: &mut Model<f32>,
    cfg: &RunConfig,
    vocab: &Vocab,
    exec: Exec,
) -> Result<(f64, Vec<f64>)> {
    let (train, eval) = vqa_task(cfg, vocab, exec)?;
    let spec = HeadSpec { name: VQA_HEAD.into(), classes: vqa_answers().len(), readouts: 1 };
    let trace = finetune_classify(model, spec, &train, &cfg.vqa.finetune, exec)?;
    let pred = predict_classes(model, VQA_HEAD, &eval, exec)?;
    Ok((accuracy(&pred, &eval), trace))
}

/// Two-image "same color?" task: label 1 for yes.
pub fn paired_task(cfg: &RunConfig, vocab: &Vocab, exec: Exec) -> Result<(Vec<ClassifyExample>, Vec<ClassifyExample>)> {
    let combos = training_combos(cfg)?;
    let seed = cfg.vqa.finetune.seed;
    let build = |n: usize, seed: u64, split: &str| -> Result<Vec<ClassifyExample>> {
        let recs = paired_examples(n, &combos, cfg.corpus.grid, seed, split);
        try_map(exec, &recs, |_, r| -> Result<ClassifyExample> {
            Ok(ClassifyExample {
                image: render_scene(&r.spec, cfg.corpus.image_size)?,
                image2: Some(render_scene(&r.spec2, cfg.corpus.image_size)?),
                question: vocab.encode(&r.question, false, false)?,
                label: usize::from(r.label == "yes"),
            })
        })
    };
    Ok((build(cfg.vqa.n_train, seed, "paired_train")?, build(cfg.vqa.n_eval, seed.wrapping_add(1), "paired_eval")?))
}

pub fn paired_finetune_eval(
    model: &mut Model<f32>,
    cfg: &RunConfig,
    vocab: &Vocab,
    exec: Exec,
) -> Result<(f64, Vec<f64>)> {
    let (train, eval) = paired_task(cfg, vocab, exec)?;
    let spec = HeadSpec { name: PAIRED_HEAD.into(), classes: 2, readouts: 2 };
    let trace = finetune_classify(model, spec, &train, &cfg.vqa.finetune, exec)?;
    let pred = predict_classes(model, PAIRED_HEAD, &eval, exec)?;
    Ok((accuracy(&pred, &eval), trace))
}

pub fn generative_examples(
    records: &[VqaRecord],
    vocab: &Vocab,
    image_size: usize,
    exec: Exec,
) -> Result<Vec<GenerativeExample>> {
    try_map(exec, records, |_, r| -> Result<GenerativeExample> {
        Ok(GenerativeExample {
            id: r.id.clone(),
            image: render_scene(&r.spec, image_size)?,
            question: vocab.encode(&r.question, false, false)?,
            answer: vocab.encode(&r.answer, false, false)?,
            answer_text: r.answer.clone(),
        })
    })
}

/// Generative VQA report: overall held-in accuracy plus accuracy on
/// answers never seen during finetuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerativeReport {
    pub accuracy: f64,
    pub unseen_answer_accuracy: Option<f64>,
    pub predictions: Vec<Prediction>,
}

/// Finetune with image and question as the prefix. With `partial`, only
/// two thirds of the answer set appear in training; evaluation covers all.
pub fn generative_finetune_eval(
    model: &mut Model<f32>,
    cfg: &RunConfig,
    vocab: &Vocab,
    partial: bool,
    exec: Exec,
) -> Result<GenerativeReport> {
    let combos = training_combos(cfg)?;
    let answers = vqa_answers();
    let seen: Vec<String> = if partial {
        answers.iter().enumerate().filter(|(i, _)| i % 3 != 2).map(|(_, a)| a.clone()).collect()
    } else {
        answers.clone()
    };
    let seed = cfg.vqa.finetune.seed;
    let train = vqa_examples(cfg.vqa.n_train, &combos, cfg.corpus.grid, Some(&seen), seed, "gen_train");
    let eval = vqa_examples(cfg.vqa.n_eval, &combos, cfg.corpus.grid, None, seed.wrapping_add(1), "gen_eval");
    let train = generative_examples(&train, vocab, cfg.corpus.image_size, exec)?;
    let eval = generative_examples(&eval, vocab, cfg.corpus.image_size, exec)?;
    finetune_generative(model, &train, &cfg.vqa.finetune, exec)?;
    let (accuracy, predictions) = evaluate_generative(model, vocab, &eval, cfg.vqa.max_answer_len, exec)?;
    let unseen: Vec<f64> =
        eval.iter().zip(&predictions).filter(|(e, _)| !seen.contains(&e.answer_text)).map(|(_, p)| p.score).collect();
    let unseen_answer_accuracy = (!unseen.is_empty()).then(|| unseen.iter().sum::<f64>() / unseen.len() as f64);
    Ok(GenerativeReport { accuracy, unseen_answer_accuracy, predictions })
}

// ---------------------------------------------------------------------------
// Ablations

/// One arm of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arm {
    Full,
    DecoderOnly,
    WithLm,
    WithSpan,
    NoImage2Text,
    NoText2Text,
    NoConvStage,
    ConvBlocks(usize),
    NoPretraining,
}

impl Arm {
    /// Every arm, reference first.
    pub fn all() -> Vec<Arm> {
        vec![
            Arm::Full,
            Arm::DecoderOnly,
            Arm::WithLm,
            Arm::WithSpan,
            Arm::NoImage2Text,
            Arm::NoText2Text,
            Arm::NoConvStage,
            Arm::ConvBlocks(2),
            Arm::ConvBlocks(3),
            Arm::ConvBlocks(4),
            Arm::NoPretraining,
        ]
    }

    pub fn name(self) -> String {
        match self {
            Arm::Full => "full".into(),
            Arm::DecoderOnly => "decoder_only".into(),
            Arm::WithLm => "with_lm".into(),
            Arm::WithSpan => "with_span".into(),
            Arm::NoImage2Text => "no_image2text".into(),
            Arm::NoText2Text => "no_text2text".into(),
            Arm::NoConvStage => "no_conv_stage".into(),
            Arm::ConvBlocks(n) => format!("conv_blocks_{n}"),
            Arm::NoPretraining => "no_pretraining".into(),
        }
    }

    pub fn pretrains(self) -> bool {
        self != Arm::NoPretraining
    }

    /// The arm's configuration derived from `base`. Dropping one data
    /// stream gives its batch slots to the other.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        let batch = c.train.pairs_per_batch + c.train.docs_per_batch;
        match self {
            Arm::Full | Arm::NoPretraining => {}
            Arm::DecoderOnly => c.model.variant = Variant::DecoderOnly,
            Arm::WithLm => c.train.objective = Objective::Lm,
            Arm::WithSpan => c.train.objective = Objective::Span,
            Arm::NoImage2Text => {
                c.corpus.n_pairs = 0;
                c.train.pairs_per_batch = 0;
                c.train.docs_per_batch = batch;
            }
            Arm::NoText2Text => {
                c.corpus.n_docs = 0;
                c.train.docs_per_batch = 0;
                c.train.pairs_per_batch = batch;
            }
            Arm::NoConvStage => c.model.stem = StemConfig::Linear,
            Arm::ConvBlocks(n) => {
                let width = match c.model.stem {
                    StemConfig::Conv { width, .. } => width,
                    StemConfig::Linear => 8,
                };
                c.model.stem = StemConfig::Conv { blocks: n, width };
            }
        }
        c
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(n) = s.strip_prefix("conv_blocks_") {
            return n.parse().map(Arm::ConvBlocks).map_err(|_| Error::Config(format!("bad conv block count in {s:?}")));
        }
        Arm::all()
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation arm {s:?}")))
    }
}

/// Outcome of one arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub pretrain_steps: u64,
    pub final_pair_loss: Option<f64>,
    pub final_text_loss: Option<f64>,
    pub heldin: SplitScore,
    pub compositional: SplitScore,
    pub vqa_accuracy: f64,
}

fn tail_mean(xs: impl Iterator<Item = f64>, n: usize) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    let tail = &v[v.len().saturating_sub(n)..];
    (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Pretrain (unless the arm skips it), caption both evaluation splits,
/// then finetune and score the VQA head.
pub fn run_arm(base: &RunConfig, arm: Arm, exec: Exec, metrics: &mut dyn Write) -> Result<ArmResult> {
    let cfg = arm.apply(base);
    let prep = prepare(&cfg, exec)?;
    let mut model = if arm.pretrains() {
        let mut buf = Vec::new();
        let m = pretrain(&cfg, &prep, exec, &mut buf, None)?;
        metrics.write_all(&buf).map_err(|e| Error::io("<metrics>", e))?;
        let steps: Vec<StepMetrics> = buf
            .split(|&b| b == b'\n')
            .skip(1)
            .filter(|l| !l.is_empty())
            .map(serde_json::from_slice)
            .collect::<std::result::Result<_, _>>()?;
        let pair = tail_mean(steps.iter().filter_map(|s| s.loss_pair), 50);
        let text = tail_mean(steps.iter().filter_map(|s| s.loss_text), 50);
        (m, pair, text)
    } else {
        (init_model(&cfg, &prep.vocab)?, None, None)
    };
    let (heldin, _) = caption_eval(&model.0, &prep.vocab, &prep.corpora.heldin, &cfg, exec)?;
    let (compositional, _) = caption_eval(&model.0, &prep.vocab, &prep.corpora.compositional, &cfg, exec)?;
    let (vqa_accuracy, _) = vqa_finetune_eval(&mut model.0, &cfg, &prep.vocab, exec)?;
    Ok(ArmResult {
        arm: arm.name(),
        pretrain_steps: if arm.pretrains() { cfg.train.steps } else { 0 },
        final_pair_loss: model.1,
        final_text_loss: model.2,
        heldin,
        compositional,
        vqa_accuracy,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: RunConfig,
    pub rows: Vec<ArmResult>,
}

impl AblationReport {
    pub fn to_markdown(&self) -> String {
        let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.3}"));
        let mut s = String::from(
            "| arm | steps | pair loss | text loss | caption EM (held-in) | token acc | caption EM (compositional) | VQA acc |\n\
             |---|---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {:.3} | {:.3} | {:.3} | {:.3} |",
                r.arm,
                r.pretrain_steps,
                f(r.final_pair_loss),
                f(r.final_text_loss),
                r.heldin.exact_match,
                r.heldin.token_accuracy,
                r.compositional.exact_match,
                r.vqa_accuracy
            );
        }
        s
    }
}

/// Run `arms` on `base` and collect the comparison report.
pub fn run_ablation(base: &RunConfig, arms: &[Arm], exec: Exec, metrics: &mut dyn Write) -> Result<AblationReport> {
    let rows = arms.iter().map(|&a| run_arm(base, a, exec, metrics)).collect::<Result<_>>()?;
    Ok(AblationReport { config: base.clone(), rows })
}
