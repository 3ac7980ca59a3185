//! Central finite-difference verification of tape gradients (f64 only).

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::model::{Model, ModelConfig, StemConfig, Variant};
use crate::objectives::prefix_lm_loss;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Denominator floor for relative error, so entries whose true gradient is
/// ~0 are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Fourth-order central difference of `f` at 0:
/// `(-f(2h) + 8 f(h) - 8 f(-h) + f(-2h)) / 12h`. Truncation error is
/// O(h^4), so a moderate step keeps both truncation and round-off far
/// below the tolerances used here.
pub fn central_difference<F>(mut f: F, h: f64) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let (p2, p1, m1, m2) = (f(2.0 * h)?, f(h)?, f(-h)?, f(-2.0 * h)?);
    Ok((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h))
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Compare the gradient of `f` with respect to leaf `p` against
/// [`central_difference`], elementwise. Returns the max relative error.
pub fn grad_check<F>(f: F, p: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
{
    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.input(t.clone(), true);
        let out = f(&mut g, v)?;
        Ok(g.value(out).data()[0])
    };
    let mut g = Graph::new();
    let v = g.input(p.clone(), true);
    let out = f(&mut g, v)?;
    let analytic = g.backward(out)?.get_or_zeros(&g, v);
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let numeric = central_difference(
            |d| {
                let mut q = p.clone();
                q.data_mut()[i] += d;
                eval(&q)
            },
            step,
        )?;
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Check every parameter of `store` under the scalar function `f`.
/// At most `per_param` randomly chosen entries are probed per tensor
/// (all of them when `None`).
pub fn grad_check_store<F, R>(
    store: &ParamStore<f64>,
    f: F,
    step: f64,
    per_param: Option<usize>,
    rng: &mut R,
) -> Result<Vec<CheckResult>>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
    R: Rng + ?Sized,
{
    let analytic = {
        let mut g = Graph::with_params(store);
        let out = f(&mut g)?;
        g.backward(out)?.param_grads(&g)
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let out = f(&mut g)?;
        Ok(g.value(out).data()[0])
    };
    let mut work = store.clone();
    let mut results = Vec::with_capacity(store.len());
    for (id, grad) in analytic.iter().enumerate() {
        let n = store.tensor(id).len();
        let picks: Vec<usize> = match per_param {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for &i in &picks {
            let orig = work.tensor(id).data()[i];
            let numeric = central_difference(
                |d| {
                    work.get_mut(id).tensor.data_mut()[i] = orig + d;
                    eval(&work)
                },
                step,
            )?;
            work.get_mut(id).tensor.data_mut()[i] = orig;
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
        results.push(CheckResult { name: store.get(id).name.clone(), checked: picks.len(), max_rel_error: worst });
    }
    Ok(results)
}

/// Configuration of the full-model check: two layers per stack, width 32,
/// 64 tokens, 8x8 images in a 2x2 patch grid. Weights are drawn wider than
/// the training init and the logit scale starts at one so that every
/// gradient is well away from zero.
pub fn suite_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        layers_enc: 2,
        layers_dec: 2,
        heads: 2,
        hidden: 32,
        ffn_dim: 64,
        vocab: 64,
        max_text_len: 8,
        image_hw: [8, 8],
        patch: 4,
        channels: 3,
        pixel_mean: 1.0,
        pixel_std: 1.0,
        stem: StemConfig::Conv { blocks: 3, width: 4 },
        relbias_grid: [2, 2],
        dropout: 0.0,
        ln_eps: 1e-5,
        init_std: 0.2,
        logit_scale_init: 1.0,
    }
}

/// Worst relative error of one full-model check.
#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub variant: Variant,
    pub seed: u64,
    pub worst: CheckResult,
}

/// Prefix-LM loss on a random image and caption, checked through every
/// parameter of a freshly initialised model.
pub fn full_model_check(variant: Variant, seed: u64, per_param: Option<usize>) -> Result<SuiteResult> {
    let model = Model::<f64>::new(suite_config(variant), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let image = Tensor::<f64>::uniform(&[3, 8, 8], 0.0, 1.0, &mut rng);
    let text: Vec<u32> = (0..6).map(|_| rng.gen_range(5..64)).collect();
    let prefix = model.config.num_patches() + 2;
    let results = grad_check_store(
        &model.params,
        |g| {
            let x = g.constant(image.clone());
            prefix_lm_loss(&model, g, Some(x), &text, prefix)
        },
        1e-3,
        per_param,
        &mut rng,
    )?;
    let worst =
        results.into_iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).expect("model has parameters");
    Ok(SuiteResult { variant, seed, worst })
}

/// Both variants over `seeds`.
pub fn full_model_suite(seeds: &[u64], per_param: Option<usize>) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    for variant in [Variant::EncoderDecoder, Variant::DecoderOnly] {
        for &seed in seeds {
            out.push(full_model_check(variant, seed, per_param)?);
        }
    }
    Ok(out)
}
