//! Every differentiable graph op against central finite differences in f64.

use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use svlm::gradcheck::grad_check;
use svlm::{Graph, Mask, Result, Tensor, Var};

const STEP: f64 = 1e-3;
const TOL: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, r)
}

/// Reduce `out` to a scalar with fixed random weights so that every output
/// element contributes a distinct amount.
fn project(g: &mut Graph<'_, f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = Tensor::uniform(&shape, -1.0, 1.0, &mut rng(seed ^ 0x5eed));
    g.weighted_sum(out, w)
}

fn check<F>(seed: u64, input: Tensor<f64>, op: F) -> f64
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
{
    grad_check(
        |g, v| {
            let o = op(g, v)?;
            project(g, o, seed)
        },
        &input,
        STEP,
    )
    .expect("op evaluates")
}

fn within(err: f64) -> std::result::Result<(), TestCaseError> {
    prop_assert!(err < TOL, "relative error {err:e}");
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn elementwise_ops(seed in 0u64..1_000_000) {
        let mut r = rng(seed);
        let other = randn(&[3, 4], &mut r);
        let bias = randn(&[4], &mut r);
        let x = randn(&[3, 4], &mut r);
        within(check(seed, x.clone(), |g, v| { let c = g.constant(other.clone()); g.add(v, c) }))?;
        within(check(seed, x.clone(), |g, v| { let c = g.constant(other.clone()); g.mul(v, c) }))?;
        within(check(seed, x.clone(), |g, v| g.mul(v, v)))?;
        within(check(seed, x.clone(), |g, v| g.scale(v, -1.7)))?;
        within(check(seed, x.clone(), |g, v| g.gelu(v)))?;
        within(check(seed, bias.clone(), |g, b| { let c = g.constant(other.clone()); g.add_bias(c, b) }))?;
        within(check(seed, x.clone(), |g, v| { let b = g.constant(bias.clone()); g.add_bias(v, b) }))?;
        let s = Tensor::scalar(0.7);
        within(check(seed, x.clone(), |g, v| { let c = g.constant(s.clone()); g.mul_scalar(v, c) }))?;
        within(check(seed, s, |g, v| { let c = g.constant(x.clone()); g.mul_scalar(c, v) }))?;
    }

    #[test]
    fn matmul_both_operands(seed in 0u64..1_000_000) {
        let mut r = rng(seed);
        let a = randn(&[3, 5], &mut r);
        let b = randn(&[5, 2], &mut r);
        let bt = randn(&[2, 5], &mut r);
        within(check(seed, a.clone(), |g, v| { let c = g.constant(b.clone()); g.matmul(v, c) }))?;
        within(check(seed, b.clone(), |g, v| { let c = g.constant(a.clone()); g.matmul(c, v) }))?;
        within(check(seed, a.clone(), |g, v| { let c = g.constant(bt.clone()); g.matmul_nt(v, c) }))?;
        within(check(seed, bt.clone(), |g, v| { let c = g.constant(a.clone()); g.matmul_nt(c, v) }))?;
        let batched = randn(&[2, 3, 5], &mut r);
        let rhs = randn(&[2, 5, 4], &mut r);
        within(check(seed, batched.clone(), |g, v| { let c = g.constant(rhs.clone()); g.matmul(v, c) }))?;
        within(check(seed, rhs.clone(), |g, v| { let c = g.constant(batched.clone()); g.matmul(c, v) }))?;
        within(check(seed, b, |g, v| { let c = g.constant(batched.clone()); g.matmul(c, v) }))?;
    }

    #[test]
    fn softmax_and_norms(seed in 0u64..1_000_000) {
        let mut r = rng(seed);
        let x = randn(&[4, 5], &mut r);
        let mask = Arc::new(Mask::from_fn(4, 5, |i, j| j <= i + 1));
        within(check(seed, x.clone(), |g, v| g.softmax(v)))?;
        within(check(seed, x.clone(), |g, v| g.masked_softmax(v, Some(mask.clone()))))?;
        let gain = randn(&[5], &mut r);
        let bias = randn(&[5], &mut r);
        let ln = |g: &mut Graph<'_, f64>, x: Var, gn: Var, b: Var| g.layer_norm(x, gn, b, 1e-5);
        within(check(seed, x.clone(), |g, v| {
            let (a, b) = (g.constant(gain.clone()), g.constant(bias.clone()));
            ln(g, v, a, b)
        }))?;
        within(check(seed, gain.clone(), |g, v| {
            let (a, b) = (g.constant(x.clone()), g.constant(bias.clone()));
            ln(g, a, v, b)
        }))?;
        within(check(seed, bias.clone(), |g, v| {
            let (a, b) = (g.constant(x.clone()), g.constant(gain.clone()));
            ln(g, a, b, v)
        }))?;
        let img = randn(&[3, 4, 4], &mut r);
        let cg = randn(&[3], &mut r);
        let cb = randn(&[3], &mut r);
        within(check(seed, img.clone(), |g, v| {
            let (a, b) = (g.constant(cg.clone()), g.constant(cb.clone()));
            g.group_norm(v, a, b, 1e-5)
        }))?;
        within(check(seed, cg.clone(), |g, v| {
            let (a, b) = (g.constant(img.clone()), g.constant(cb.clone()));
            g.group_norm(a, v, b, 1e-5)
        }))?;
    }

    #[test]
    fn convolution(seed in 0u64..1_000_000, stride in 1usize..3) {
        let mut r = rng(seed);
        let x = randn(&[3, 4, 4], &mut r);
        let w = randn(&[2, 3, 3, 3], &mut r);
        let b = randn(&[2], &mut r);
        within(check(seed, x.clone(), |g, v| {
            let (wc, bc) = (g.constant(w.clone()), g.constant(b.clone()));
            g.conv2d(v, wc, Some(bc), stride, 1)
        }))?;
        within(check(seed, w.clone(), |g, v| {
            let (xc, bc) = (g.constant(x.clone()), g.constant(b.clone()));
            g.conv2d(xc, v, Some(bc), stride, 1)
        }))?;
        within(check(seed, b, |g, v| {
            let (xc, wc) = (g.constant(x.clone()), g.constant(w.clone()));
            g.conv2d(xc, wc, Some(v), stride, 1)
        }))?;
    }

    #[test]
    fn indexing_and_layout(seed in 0u64..1_000_000) {
        let mut r = rng(seed);
        let table = randn(&[6, 4], &mut r);
        within(check(seed, table.clone(), |g, v| g.embedding(v, &[1, 4, 1, 0])))?;
        let x = randn(&[4, 6], &mut r);
        let y = randn(&[2, 6], &mut r);
        within(check(seed, x.clone(), |g, v| { let c = g.constant(y.clone()); g.concat(&[c, v, c]) }))?;
        within(check(seed, x.clone(), |g, v| g.slice_rows(v, 1, 3)))?;
        within(check(seed, x.clone(), |g, v| g.transpose(v)))?;
        within(check(seed, x.clone(), |g, v| g.reshape(v, &[3, 8])))?;
        within(check(seed, x.clone(), |g, v| g.split_heads(v, 2)))?;
        within(check(seed, x.clone(), |g, v| { let h = g.split_heads(v, 3)?; g.merge_heads(h) }))?;
        within(check(seed, x.clone(), |g, v| g.mean_rows(v)))?;
        within(check(seed, x.clone(), |g, v| g.sum(v)))?;
        let img = randn(&[2, 4, 4], &mut r);
        within(check(seed, img, |g, v| g.patchify(v, 2)))?;
        let bias = randn(&[2, 3], &mut r);
        let index = Arc::new(vec![Some(0), None, Some(2), Some(2), Some(1), None]);
        within(check(seed, bias, |g, v| g.gather_bias(v, index.clone(), 2, 3)))?;
    }

    #[test]
    fn cross_entropy_logits(seed in 0u64..1_000_000) {
        let mut r = rng(seed);
        let logits = randn(&[4, 6], &mut r);
        let err = grad_check(|g, v| g.cross_entropy(v, &[1, 5, 0, 3], &[true, false, true, true]), &logits, STEP)
            .expect("loss evaluates");
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn tied_parameter_accumulates_both_uses(seed in 0u64..1_000_000) {
        let mut r = rng(seed);
        let e = randn(&[5, 3], &mut r);
        let h = randn(&[2, 3], &mut r);
        // embedding lookup and output projection share one table
        let err = check(seed, e, |g, v| {
            let emb = g.embedding(v, &[2, 4])?;
            let hc = g.constant(h.clone());
            let x = g.add(emb, hc)?;
            g.matmul_nt(x, v)
        });
        prop_assert!(err < TOL, "relative error {err}");
    }
}
