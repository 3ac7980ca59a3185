//! Decoding, task heads and their finetuning loops, evaluation, and
//! resolution adaptation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::BatchPlan;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{Context, HeadSpec, Model};
use crate::objectives::seq2seq_loss;
use crate::parallel::{try_map, Exec};
use crate::tensor::{Real, Tensor};
use crate::tokenizer::{Vocab, BOS, EOS};
use crate::training::{accumulate_gradients, adamw_step, lr_at, AdamW, OptimState};
use crate::vision::{interpolate_grid, Image};

/// Log-softmax of one logits row, in f64.
fn log_softmax_row<T: Real>(row: &[T]) -> Vec<f64> {
    let mx = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + row.iter().map(|v| (v.to_f64() - mx).exp()).sum::<f64>().ln();
    row.iter().map(|v| v.to_f64() - lse).collect()
}

/// Next-token log-probabilities after `[BOS] + prefix` given `ctx`.
fn next_logprobs<T: Real>(model: &Model<T>, g: &mut Graph<'_, T>, ctx: &Context, prefix: &[u32]) -> Result<Vec<f64>> {
    let mut input = Vec::with_capacity(prefix.len() + 1);
    input.push(BOS);
    input.extend_from_slice(prefix);
    let h = model.continuation_hidden(g, ctx, &input)?;
    let n = g.shape(h)[0];
    let last = g.slice_rows(h, n - 1, n)?;
    let logits = model.lm_logits(g, last)?;
    Ok(log_softmax_row(g.value(logits).data()))
}

fn text_budget<T: Real>(model: &Model<T>, source: &[u32], prompt: &[u32]) -> Result<usize> {
    let used = source.len() + 1 + prompt.len();
    if used > model.config.max_text_len {
        return Err(Error::PositionOverflow { kind: "prompt", len: used, max: model.config.max_text_len });
    }
    Ok(model.config.max_text_len - used)
}

/// Argmax decoding after a forced `prompt`, until EOS or `max_len` new
/// tokens. Ties go to the lowest id. Returns the new tokens without EOS.
pub fn greedy_decode<T: Real>(
    model: &Model<T>,
    image: Option<&Tensor<T>>,
    source: &[u32],
    prompt: &[u32],
    max_len: usize,
) -> Result<Vec<u32>> {
    let max_len = max_len.min(text_budget(model, source, prompt)? + 1);
    if max_len == 0 {
        return Ok(Vec::new());
    }
    let mut g = Graph::with_params(&model.params);
    let img = image.map(|t| g.constant(t.clone()));
    let ctx = model.context(&mut g, img, source)?;
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_len {
        let lp = next_logprobs(model, &mut g, &ctx, &seq)?;
        let mut best = 0;
        for (i, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = i;
            }
        }
        let tok = best as u32;
        if tok == EOS {
            break;
        }
        out.push(tok);
        seq.push(tok);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamConfig {
    pub width: usize,
    pub max_len: usize,
    pub alpha: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig { width: 4, max_len: 24, alpha: 0.6 }
    }
}

/// A scored hypothesis. `tokens` ends with EOS when finished.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub score: f64,
}

fn normalized(logprob: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        logprob
    } else {
        logprob / (len.max(1) as f64).powf(alpha)
    }
}

/// Higher score first; equal scores by lexicographic token order.
fn rank(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Length-normalized beam search (`score = logP / len^alpha`). Returns the
/// best hypothesis; its tokens exclude the prompt and keep a final EOS.
pub fn beam_search<T: Real>(
    model: &Model<T>,
    image: Option<&Tensor<T>>,
    source: &[u32],
    prompt: &[u32],
    cfg: BeamConfig,
) -> Result<Hypothesis> {
    if cfg.width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let max_len = cfg.max_len.min(text_budget(model, source, prompt)? + 1);
    let mut g = Graph::with_params(&model.params);
    let img = image.map(|t| g.constant(t.clone()));
    let ctx = model.context(&mut g, img, source)?;
    let mut alive = vec![Hypothesis { tokens: Vec::new(), logprob: 0.0, score: 0.0 }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut cands = Vec::new();
        for h in &alive {
            let mut seq = prompt.to_vec();
            seq.extend_from_slice(&h.tokens);
            let lp = next_logprobs(model, &mut g, &ctx, &seq)?;
            for (tok, &l) in lp.iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(tok as u32);
                let logprob = h.logprob + l;
                let score = normalized(logprob, tokens.len(), cfg.alpha);
                cands.push(Hypothesis { tokens, logprob, score });
            }
        }
        cands.sort_by(rank);
        cands.truncate(cfg.width);
        alive.clear();
        for c in cands {
            if c.tokens.last() == Some(&EOS) {
                finished.push(c);
            } else {
                alive.push(c);
            }
        }
        if alive.is_empty() {
            break;
        }
    }
    finished.extend(alive.into_iter().filter(|h| !h.tokens.is_empty()));
    finished.sort_by(rank);
    finished.into_iter().next().ok_or_else(|| Error::Sample("beam search produced no hypothesis".into()))
}

/// Teacher-forced log-probability of `tokens` (after the prompt), summed up
/// to and including the first EOS.
pub fn sequence_logprob<T: Real>(
    model: &Model<T>,
    image: Option<&Tensor<T>>,
    source: &[u32],
    prompt: &[u32],
    tokens: &[u32],
) -> Result<f64> {
    let cut = tokens.iter().position(|&t| t == EOS).map_or(tokens.len(), |p| p + 1);
    let tokens = &tokens[..cut];
    if tokens.is_empty() {
        return Ok(0.0);
    }
    let mut g = Graph::with_params(&model.params);
    let img = image.map(|t| g.constant(t.clone()));
    let ctx = model.context(&mut g, img, source)?;
    let mut input = vec![BOS];
    input.extend_from_slice(prompt);
    input.extend_from_slice(&tokens[..tokens.len() - 1]);
    let h = model.continuation_hidden(&mut g, &ctx, &input)?;
    let logits = model.lm_logits(&mut g, h)?;
    let v = g.value(logits);
    let mut total = 0.0;
    for (i, &tok) in tokens.iter().enumerate() {
        let row = v.row(prompt.len() + i);
        total += log_softmax_row(row)[tok as usize];
    }
    Ok(total)
}

/// Lowercase, drop punctuation, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let kept: String =
        s.chars().map(|c| c.to_ascii_lowercase()).filter(|c| c.is_alphanumeric() || c.is_whitespace()).collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn exact_match(prediction: &str, reference: &str) -> bool {
    normalize_answer(prediction) == normalize_answer(reference)
}

/// One line of prediction output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub prediction: String,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitScore {
    pub n: usize,
    pub exact_match: f64,
    pub token_accuracy: f64,
}

/// A captioning request: image, reference caption, id.
pub struct CaptionItem<'a> {
    pub id: &'a str,
    pub image: &'a Image,
    pub reference: &'a str,
}

/// Decode every item after `prompt` (greedy, or beam when `beam` is set)
/// and score against the references. Token accuracy compares reference
/// tokens position by position.
pub fn evaluate_captions(
    model: &Model<f32>,
    vocab: &Vocab,
    items: &[CaptionItem<'_>],
    prompt: &str,
    max_len: usize,
    beam: Option<BeamConfig>,
    exec: Exec,
) -> Result<(SplitScore, Vec<Prediction>)> {
    let prompt_ids = if prompt.is_empty() { Vec::new() } else { vocab.encode(prompt, false, false)? };
    let outs = try_map(exec, items, |_, it| -> Result<(Prediction, bool, usize, usize)> {
        let t = it.image.to_tensor::<f32>();
        let mut gen = match beam {
            Some(b) => beam_search(model, Some(&t), &[], &prompt_ids, BeamConfig { max_len, ..b })?.tokens,
            None => greedy_decode(model, Some(&t), &[], &prompt_ids, max_len)?,
        };
        if gen.last() == Some(&EOS) {
            gen.pop();
        }
        let text = vocab.decode(&gen)?;
        let reference = vocab.encode(it.reference, false, false)?;
        let hits = reference.iter().zip(&gen).filter(|(a, b)| a == b).count();
        let ok = exact_match(&text, it.reference);
        let score = if ok { 1.0 } else { 0.0 };
        Ok((Prediction { id: it.id.to_string(), prediction: text, score }, ok, hits, reference.len()))
    })?;
    let n = outs.len();
    let exact = outs.iter().filter(|o| o.1).count();
    let (hits, total) = outs.iter().fold((0, 0), |(h, t), o| (h + o.2, t + o.3));
    let score = SplitScore {
        n,
        exact_match: if n == 0 { 0.0 } else { exact as f64 / n as f64 },
        token_accuracy: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
    };
    Ok((score, outs.into_iter().map(|o| o.0).collect()))
}

// ---------------------------------------------------------------------------
// Finetuning

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: u64,
    pub batch: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub optimizer: AdamW,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { steps: 300, batch: 16, peak_lr: 1e-3, warmup_frac: 0.05, optimizer: AdamW::default(), seed: 0 }
    }
}

/// Generic minibatch loop: `loss_fn` builds one sample's loss. Returns
/// the mean loss of every step.
pub fn fit<S, F>(
    model: &mut Model<f32>,
    samples: &[S],
    cfg: &FinetuneConfig,
    exec: Exec,
    loss_fn: F,
) -> Result<Vec<f64>>
where
    S: Sync,
    F: Fn(&Model<f32>, &mut Graph<'_, f32>, &S, &mut ChaCha8Rng) -> Result<Var> + Sync + Send,
{
    let plan = BatchPlan::new(samples.len(), 0, cfg.batch, 0, cfg.seed)?;
    let mut opt = OptimState::new(&model.params, cfg.optimizer);
    let mut trace = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let lr = lr_at(step, cfg.steps, cfg.warmup_frac, cfg.peak_lr);
        let batch: Vec<&S> = plan.batch(step).pairs.into_iter().map(|i| &samples[i]).collect();
        let m: &Model<f32> = model;
        let (losses, grads) = accumulate_gradients(m, &batch, exec, |g, i, s| {
            let mut rng = crate::data::sample_rng(cfg.seed, step, i);
            loss_fn(m, g, s, &mut rng)
        })?;
        if let Some(bad) = losses.iter().position(|l| !l.is_finite()) {
            return Err(Error::NanLoss { step, batch: bad as u64 });
        }
        adamw_step(&mut model.params, &grads, &mut opt, lr)?;
        trace.push(losses.iter().sum::<f64>() / losses.len() as f64);
    }
    Ok(trace)
}

/// A classification example: image(s), question ids, label index.
#[derive(Clone, Debug)]
pub struct ClassifyExample {
    pub image: Image,
    pub image2: Option<Image>,
    pub question: Vec<u32>,
    pub label: usize,
}

fn decoder_text(question: &[u32]) -> Vec<u32> {
    let mut t = vec![BOS];
    t.extend_from_slice(question);
    t
}

/// Head logits `[1, C]` for one example: the image goes to the encoder,
/// the question to the decoder, and the head reads the last question
/// token. Paired heads read both images with the same question.
pub fn classify_logits<T: Real>(
    model: &Model<T>,
    g: &mut Graph<'_, T>,
    head: &str,
    image: &Image,
    image2: Option<&Image>,
    question: &[u32],
) -> Result<Var> {
    let spec = model.head(head).ok_or_else(|| Error::Config(format!("no head named {head}")))?;
    let text = decoder_text(question);
    let mut readouts = Vec::with_capacity(2);
    let x = g.constant(image.to_tensor());
    readouts.push(model.readout(g, x, &text)?);
    if spec.readouts == 2 {
        let second = image2.ok_or_else(|| Error::Sample("paired head needs a second image".into()))?;
        let x2 = g.constant(second.to_tensor());
        readouts.push(model.readout(g, x2, &text)?);
    }
    model.head_logits(g, head, &readouts)
}

fn check_labels(spec: &HeadSpec, data: &[ClassifyExample]) -> Result<()> {
    if let Some(e) = data.iter().find(|e| e.label >= spec.classes) {
        return Err(Error::Sample(format!(
            "label {} outside the {} classes of head {}",
            e.label, spec.classes, spec.name
        )));
    }
    if spec.readouts == 2 && data.iter().any(|e| e.image2.is_none()) {
        return Err(Error::Sample("paired head needs a second image in every example".into()));
    }
    Ok(())
}

/// Attach (if needed) and train a classification head end to end.
pub fn finetune_classify(
    model: &mut Model<f32>,
    spec: HeadSpec,
    data: &[ClassifyExample],
    cfg: &FinetuneConfig,
    exec: Exec,
) -> Result<Vec<f64>> {
    if model.head(&spec.name).is_none() {
        model.add_head(spec.clone(), cfg.seed)?;
    }
    check_labels(&spec, data)?;
    let head = spec.name.clone();
    fit(model, data, cfg, exec, |m, g, e, _| {
        let logits = classify_logits(m, g, &head, &e.image, e.image2.as_ref(), &e.question)?;
        g.cross_entropy(logits, &[e.label as u32], &[true])
    })
}

/// Paired variant: two readouts through one shared backbone.
pub fn finetune_paired(
    model: &mut Model<f32>,
    name: &str,
    classes: usize,
    data: &[ClassifyExample],
    cfg: &FinetuneConfig,
    exec: Exec,
) -> Result<Vec<f64>> {
    finetune_classify(model, HeadSpec { name: name.into(), classes, readouts: 2 }, data, cfg, exec)
}

/// Argmax class per example.
pub fn predict_classes(model: &Model<f32>, head: &str, data: &[ClassifyExample], exec: Exec) -> Result<Vec<usize>> {
    try_map(exec, data, |_, e| {
        let mut g = Graph::with_params(&model.params);
        let logits = classify_logits(model, &mut g, head, &e.image, e.image2.as_ref(), &e.question)?;
        Ok(argmax(g.value(logits).data()))
    })
}

pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(pred: &[usize], data: &[ClassifyExample]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    pred.iter().zip(data).filter(|(p, e)| **p == e.label).count() as f64 / data.len() as f64
}

/// A generative question-answer example.
#[derive(Clone, Debug)]
pub struct GenerativeExample {
    pub id: String,
    pub image: Image,
    pub question: Vec<u32>,
    pub answer: Vec<u32>,
    pub answer_text: String,
}

/// Image and question form the prefix; the decoder learns to emit the
/// answer followed by EOS.
pub fn finetune_generative(
    model: &mut Model<f32>,
    data: &[GenerativeExample],
    cfg: &FinetuneConfig,
    exec: Exec,
) -> Result<Vec<f64>> {
    fit(model, data, cfg, exec, |m, g, e, _| {
        let x = g.constant(e.image.to_tensor());
        let mut target = e.answer.clone();
        target.push(EOS);
        seq2seq_loss(m, g, Some(x), &e.question, &target)
    })
}

/// Decode an answer for `question` about `image`.
pub fn generative_vqa(
    model: &Model<f32>,
    vocab: &Vocab,
    image: &Image,
    question: &[u32],
    max_len: usize,
) -> Result<String> {
    let t = image.to_tensor::<f32>();
    let ids = greedy_decode(model, Some(&t), question, &[], max_len)?;
    vocab.decode(&ids)
}

pub fn evaluate_generative(
    model: &Model<f32>,
    vocab: &Vocab,
    data: &[GenerativeExample],
    max_len: usize,
    exec: Exec,
) -> Result<(f64, Vec<Prediction>)> {
    let preds = try_map(exec, data, |_, e| -> Result<Prediction> {
        let text = generative_vqa(model, vocab, &e.image, &e.question, max_len)?;
        let score = if exact_match(&text, &e.answer_text) { 1.0 } else { 0.0 };
        Ok(Prediction { id: e.id.clone(), prediction: text, score })
    })?;
    let acc = if preds.is_empty() { 0.0 } else { preds.iter().map(|p| p.score).sum::<f64>() / preds.len() as f64 };
    Ok((acc, preds))
}

// ---------------------------------------------------------------------------
// Resolution

/// Re-grid the image positional table for `new_hw` by separable linear
/// interpolation. Relative bias offsets beyond the table clamp to its edge
/// buckets at lookup time, so the table itself is unchanged.
pub fn adapt_resolution<T: Real>(model: &Model<T>, new_hw: [usize; 2]) -> Result<Model<T>> {
    let cfg = &model.config;
    let p = cfg.patch;
    crate::vision::num_patches(new_hw[0], new_hw[1], p)?;
    let old_grid = cfg.grid();
    let new_grid = (new_hw[0] / p, new_hw[1] / p);
    let mut new_cfg = cfg.clone();
    new_cfg.image_hw = new_hw;
    let pos =
        model.params.by_name("embed.pos_image").ok_or_else(|| Error::MissingParameter("embed.pos_image".into()))?;
    let table = interpolate_grid(&pos.tensor, old_grid, new_grid)?;
    let mut fresh = Model::<T>::new(new_cfg, 0)?;
    for h in model.heads() {
        fresh.add_head(h.clone(), 0)?;
    }
    for (src, dst) in model.params.iter().zip(fresh.params.iter_mut()) {
        debug_assert_eq!(src.name, dst.name);
        dst.tensor = if src.name == "embed.pos_image" { table.clone() } else { src.tensor.clone() };
        dst.trainable = src.trainable;
    }
    Ok(fresh)
}

/// Deterministic RNG for evaluation helpers.
pub fn eval_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random model inputs for smoke checks: uniform image in `[0, 1]`.
pub fn random_image<R: Rng + ?Sized>(hw: [usize; 2], rng: &mut R) -> Image {
    let data = (0..3 * hw[0] * hw[1]).map(|_| rng.gen::<f32>()).collect();
    Image::new(hw[0], hw[1], 3, data).expect("values in [0, 1)")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_table() {
        assert_eq!(normalize_answer("  Red! "), "red");
        assert_eq!(normalize_answer("a Blue   circle."), "a blue circle");
        assert!(exact_match("yes", "YES."));
        assert!(!exact_match("yes", "no"));
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0]), 1);
    }
}
