//! PrefixLM and the LM / MLM / span-corruption alternatives.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{causal_mask, Model, Variant};
use crate::tensor::Real;
use crate::tokenizer::{mask_tokens, Vocab, BOS, EOS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    PrefixLm,
    Lm,
    Mlm,
    Span,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefix_lm" => Ok(Objective::PrefixLm),
            "lm" => Ok(Objective::Lm),
            "mlm" => Ok(Objective::Mlm),
            "span" => Ok(Objective::Span),
            _ => Err(Error::Config(format!("unknown objective {s:?} (prefix_lm | lm | mlm | span)"))),
        }
    }
}

/// How the prefix length is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefixSampling {
    Uniform,
    /// A fixed number of text tokens in the prefix, clamped to the valid
    /// range.
    Fixed(usize),
}

pub const MLM_RATE: f64 = 0.15;
pub const SPAN_RATE: f64 = 0.15;
pub const SPAN_MEAN: f64 = 3.0;

/// Valid `T_p` range over a stream of `t_i` patches and `t_t` text tokens:
/// `[T_i, T_i + T_t - 1]` with an image, `[1, T_t - 1]` without.
pub fn prefix_range(t_i: usize, t_t: usize) -> Result<(usize, usize)> {
    if t_i > 0 {
        if t_t == 0 {
            return Err(Error::Sample("image-text pair with empty text".into()));
        }
        Ok((t_i, t_i + t_t - 1))
    } else {
        if t_t < 2 {
            return Err(Error::Sample(format!("text-only sample needs 2+ tokens, got {t_t}")));
        }
        Ok((1, t_t - 1))
    }
}

/// Draw `T_p` uniformly over the valid range.
pub fn sample_prefix<R: Rng + ?Sized>(t_i: usize, t_t: usize, rng: &mut R) -> Result<usize> {
    let (lo, hi) = prefix_range(t_i, t_t)?;
    Ok(rng.gen_range(lo..=hi))
}

impl PrefixSampling {
    pub fn draw<R: Rng + ?Sized>(self, t_i: usize, t_t: usize, rng: &mut R) -> Result<usize> {
        match self {
            PrefixSampling::Uniform => sample_prefix(t_i, t_t, rng),
            PrefixSampling::Fixed(k) => {
                let (lo, hi) = prefix_range(t_i, t_t)?;
                Ok((t_i + k).clamp(lo, hi))
            }
        }
    }
}

/// Mean NLL of `target` given an optional image and `source` text, with the
/// decoder teacher-forced on `[BOS] + target[..-1]`.
pub fn seq2seq_loss<T: Real>(
    model: &Model<T>,
    g: &mut Graph<'_, T>,
    image: Option<Var>,
    source: &[u32],
    target: &[u32],
) -> Result<Var> {
    let logits = seq2seq_logits(model, g, image, source, target)?;
    g.cross_entropy(logits, target, &vec![true; target.len()])
}

/// Logits `[|target|, V]` under teacher forcing.
pub fn seq2seq_logits<T: Real>(
    model: &Model<T>,
    g: &mut Graph<'_, T>,
    image: Option<Var>,
    source: &[u32],
    target: &[u32],
) -> Result<Var> {
    if target.is_empty() {
        return Err(Error::EmptyLoss);
    }
    let ctx = model.context(g, image, source)?;
    let input = shift_right(target);
    let h = model.continuation_hidden(g, &ctx, &input)?;
    model.lm_logits(g, h)
}

/// `[BOS] + ids[..-1]`.
pub fn shift_right(ids: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(ids.len());
    v.push(BOS);
    v.extend_from_slice(&ids[..ids.len().saturating_sub(1)]);
    v
}

/// PrefixLM loss for prefix length `prefix_len` over the stream of
/// `n_patches` image tokens followed by `text`: text tokens before the
/// prefix boundary are conditioning, the rest are predicted.
pub fn prefix_lm_loss<T: Real>(
    model: &Model<T>,
    g: &mut Graph<'_, T>,
    image: Option<Var>,
    text: &[u32],
    prefix_len: usize,
) -> Result<Var> {
    let n_patches = if image.is_some() { model.config.num_patches() } else { 0 };
    if prefix_len < n_patches || prefix_len >= n_patches + text.len() {
        return Err(Error::Sample(format!(
            "prefix length {prefix_len} leaves nothing to predict or cuts into {n_patches} patches"
        )));
    }
    let k = prefix_len - n_patches;
    seq2seq_loss(model, g, image, &text[..k], &text[k..])
}

/// Left-to-right LM loss with a plain causal mask over `[BOS] + text[..-1]`.
pub fn lm_loss<T: Real>(model: &Model<T>, g: &mut Graph<'_, T>, text: &[u32]) -> Result<Var> {
    if text.len() < 2 {
        return Err(Error::Sample(format!("LM needs 2+ tokens, got {}", text.len())));
    }
    let input = shift_right(text);
    let x = model.embed_text(g, &input, 0)?;
    let h = match model.config.variant {
        Variant::DecoderOnly => {
            let mask = crate::model::build_prefix_mask(input.len(), 0);
            debug_assert_eq!(mask.mask(), causal_mask(input.len()));
            model.decoder_only_forward(g, x, &mask, 0)?
        }
        Variant::EncoderDecoder => model.decoder_forward(g, x, None)?,
    };
    let logits = model.lm_logits(g, h)?;
    g.cross_entropy(logits, text, &vec![true; text.len()])
}

/// `(position, original token)` for each masked position.
pub type MlmTargets = Vec<(usize, u32)>;

/// Replace random non-special tokens by MASK, redrawing until at least one
/// position is masked.
pub fn mlm_corrupt<R: Rng + ?Sized>(
    text: &[u32],
    vocab: &Vocab,
    rate: f64,
    rng: &mut R,
) -> Result<(Vec<u32>, MlmTargets)> {
    if rate <= 0.0 || !text.iter().any(|&t| !vocab.is_special(t)) {
        return Err(Error::Sample("MLM needs a positive rate and one maskable token".into()));
    }
    loop {
        let (corrupted, targets) = mask_tokens(text, vocab, rate, rng);
        if !targets.is_empty() {
            return Ok((corrupted, targets));
        }
    }
}

/// NLL of the original tokens at masked positions of `corrupted` under
/// bidirectional encoding.
pub fn mlm_loss_masked<T: Real>(
    model: &Model<T>,
    g: &mut Graph<'_, T>,
    corrupted: &[u32],
    targets: &[(usize, u32)],
) -> Result<Var> {
    let h = model.bidirectional_hidden(g, None, corrupted)?;
    let logits = model.lm_logits(g, h)?;
    let mut ids = corrupted.to_vec();
    let mut mask = vec![false; corrupted.len()];
    for &(p, orig) in targets {
        ids[p] = orig;
        mask[p] = true;
    }
    g.cross_entropy(logits, &ids, &mask)
}

pub fn mlm_loss<T: Real, R: Rng + ?Sized>(
    model: &Model<T>,
    g: &mut Graph<'_, T>,
    text: &[u32],
    vocab: &Vocab,
    rate: f64,
    rng: &mut R,
) -> Result<Var> {
    let (corrupted, targets) = mlm_corrupt(text, vocab, rate, rng)?;
    mlm_loss_masked(model, g, &corrupted, &targets)
}

/// A span-corrupted sample: sentinel-bearing input and the sentinel-delimited
/// target ending in EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpanSample {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
    pub spans: usize,
}

/// Geometric length with the given mean, support `1..`.
fn geometric<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> usize {
    let p = 1.0 / mean.max(1.0);
    let mut n = 1;
    while rng.gen::<f64>() >= p {
        n += 1;
    }
    n
}

/// Replace contiguous spans covering about `rate` of the tokens (excluding
/// a trailing EOS) with sentinels. Span lengths are geometric with mean
/// `mean_span`; spans are separated by at least one kept token.
pub fn span_corruption<R: Rng + ?Sized>(
    text: &[u32],
    vocab: &Vocab,
    mean_span: f64,
    rate: f64,
    rng: &mut R,
) -> Result<SpanSample> {
    let has_eos = text.last() == Some(&EOS);
    let body = if has_eos { &text[..text.len() - 1] } else { text };
    let n = body.len();
    let n_noise = ((n as f64) * rate).round() as usize;
    if rate <= 0.0 || n == 0 {
        return Err(Error::EmptyLoss);
    }
    let n_noise = n_noise.clamp(1, n);
    let mut lengths = Vec::new();
    let mut total = 0;
    while total < n_noise {
        let l = geometric(mean_span, rng).min(n_noise - total);
        lengths.push(l);
        total += l;
    }
    let n_keep = n - n_noise;
    // every gap between spans needs one kept token
    while lengths.len() > n_keep + 1 {
        let last = lengths.pop().expect("non-empty");
        *lengths.last_mut().expect("non-empty") += last;
    }
    let k = lengths.len();
    if k > vocab.num_sentinels() {
        return Err(Error::Sample(format!("{k} spans exceed the sentinel budget of {}", vocab.num_sentinels())));
    }
    // distribute kept tokens into k+1 gaps; inner gaps get at least one
    let mut gaps = vec![0usize; k + 1];
    for g in gaps.iter_mut().take(k).skip(1) {
        *g = 1;
    }
    for _ in 0..n_keep - (k - 1) {
        gaps[rng.gen_range(0..=k)] += 1;
    }
    let mut input = Vec::with_capacity(n - n_noise + k + 1);
    let mut target = Vec::with_capacity(n_noise + k + 1);
    let mut pos = 0;
    for (i, &len) in lengths.iter().enumerate() {
        input.extend_from_slice(&body[pos..pos + gaps[i]]);
        pos += gaps[i];
        let s = vocab.sentinel(i).expect("budget checked");
        input.push(s);
        target.push(s);
        target.extend_from_slice(&body[pos..pos + len]);
        pos += len;
    }
    input.extend_from_slice(&body[pos..]);
    if has_eos {
        input.push(EOS);
    }
    target.push(EOS);
    Ok(SpanSample { input, target, spans: k })
}

pub fn span_loss<T: Real>(model: &Model<T>, g: &mut Graph<'_, T>, sample: &SpanSample) -> Result<Var> {
    seq2seq_loss(model, g, None, &sample.input, &sample.target)
}

/// Loss of one text-only document under `objective`.
pub fn text_loss<T: Real, R: Rng + ?Sized>(
    model: &Model<T>,
    g: &mut Graph<'_, T>,
    objective: Objective,
    sampling: PrefixSampling,
    text: &[u32],
    vocab: &Vocab,
    rng: &mut R,
) -> Result<Var> {
    match objective {
        Objective::PrefixLm => {
            let tp = sampling.draw(0, text.len(), rng)?;
            prefix_lm_loss(model, g, None, text, tp)
        }
        Objective::Lm => lm_loss(model, g, text),
        Objective::Mlm => mlm_loss(model, g, text, vocab, MLM_RATE, rng),
        Objective::Span => {
            let s = span_corruption(text, vocab, SPAN_MEAN, SPAN_RATE, rng)?;
            span_loss(model, g, &s)
        }
    }
}

/// PrefixLM loss of one image-text pair; the image is always in the prefix.
pub fn pair_loss<T: Real, R: Rng + ?Sized>(
    model: &Model<T>,
    g: &mut Graph<'_, T>,
    sampling: PrefixSampling,
    image: Var,
    text: &[u32],
    rng: &mut R,
) -> Result<Var> {
    let n = model.config.num_patches();
    let tp = sampling.draw(n, text.len(), rng)?;
    prefix_lm_loss(model, g, Some(image), text, tp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forced_prefix_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(sample_prefix(4, 1, &mut rng).unwrap(), 4);
            assert_eq!(sample_prefix(0, 2, &mut rng).unwrap(), 1);
        }
        assert!(sample_prefix(0, 1, &mut rng).is_err());
        assert!(sample_prefix(3, 0, &mut rng).is_err());
    }

    #[test]
    fn fixed_sampling_clamps() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(PrefixSampling::Fixed(0).draw(16, 5, &mut rng).unwrap(), 16);
        assert_eq!(PrefixSampling::Fixed(0).draw(0, 5, &mut rng).unwrap(), 1);
        assert_eq!(PrefixSampling::Fixed(9).draw(0, 5, &mut rng).unwrap(), 4);
    }

    #[test]
    fn shift_right_prepends_bos() {
        assert_eq!(shift_right(&[7, 8, 2]), vec![BOS, 7, 8]);
        assert_eq!(shift_right(&[9]), vec![BOS]);
    }

    #[test]
    fn objective_parses() {
        assert_eq!("span".parse::<Objective>().unwrap(), Objective::Span);
        assert!("clm".parse::<Objective>().is_err());
    }
}
