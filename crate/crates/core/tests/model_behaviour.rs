use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use svlm::inference::{beam_search, greedy_decode, BeamConfig};
use svlm::model::{Model, ModelConfig, StemConfig, Variant};
use svlm::objectives::{lm_loss, mlm_loss, pair_loss, prefix_lm_loss, span_corruption, span_loss, PrefixSampling};
use svlm::tokenizer::{train_bpe, Vocab, BOS, EOS};
use svlm::training::Checkpoint;
use svlm::{Graph, Tensor};

fn config(variant: Variant, vocab: usize) -> ModelConfig {
    ModelConfig {
        variant,
        layers_enc: 1,
        layers_dec: 1,
        heads: 2,
        hidden: 8,
        ffn_dim: 16,
        vocab,
        max_text_len: 40,
        image_hw: [8, 8],
        patch: 4,
        channels: 3,
        pixel_mean: 1.0,
        pixel_std: 1.0,
        stem: StemConfig::Conv { blocks: 2, width: 4 },
        relbias_grid: [2, 2],
        dropout: 0.0,
        ln_eps: 1e-5,
        init_std: 0.3,
        logit_scale_init: 1.0,
    }
}

fn vocab() -> Vocab {
    let lines = svlm::data::lexicon_lines();
    train_bpe(lines.iter().map(String::as_str), 96, 0).unwrap().with_sentinels(4)
}

fn image(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(&[3, 8, 8], 0.0, 1.0, rng)
}

type Loss<'a> = Box<dyn Fn(&Model<f64>, &mut Graph<'_, f64>) -> svlm::Result<svlm::Var> + 'a>;

fn grad_norm(t: &Tensor<f64>) -> f64 {
    t.data().iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn text_only_input_leaves_image_positions_untouched() {
    for variant in [Variant::EncoderDecoder, Variant::DecoderOnly] {
        let m = Model::<f64>::new(config(variant, 32), 1).unwrap();
        let mut g = Graph::with_params(&m.params);
        let l = lm_loss(&m, &mut g, &[7, 9, 11, EOS]).unwrap();
        let grads = g.backward(l).unwrap().param_grads(&g);
        let pos_image = m.params.id("embed.pos_image").unwrap();
        let pos_text = m.params.id("embed.pos_text").unwrap();
        assert_eq!(grad_norm(&grads[pos_image]), 0.0, "{variant:?}");
        assert!(grad_norm(&grads[pos_text]) > 0.0, "{variant:?}");
    }
}

#[test]
fn mixed_input_reaches_both_position_tables() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for variant in [Variant::EncoderDecoder, Variant::DecoderOnly] {
        let m = Model::<f64>::new(config(variant, 32), 2).unwrap();
        let mut g = Graph::with_params(&m.params);
        let x = g.constant(image(&mut rng));
        let l = prefix_lm_loss(&m, &mut g, Some(x), &[7, 9, 11, EOS], m.config.num_patches() + 1).unwrap();
        let grads = g.backward(l).unwrap().param_grads(&g);
        for name in ["embed.pos_image", "embed.pos_text"] {
            assert!(grad_norm(&grads[m.params.id(name).unwrap()]) > 0.0, "{variant:?} {name}");
        }
    }
}

#[test]
fn text_position_enters_additively() {
    let m = Model::<f64>::new(config(Variant::EncoderDecoder, 32), 3).unwrap();
    let mut g = Graph::with_params(&m.params);
    let a = m.embed_text(&mut g, &[9], 0).unwrap();
    let b = m.embed_text(&mut g, &[9], 1).unwrap();
    let pos = m.params.by_name("embed.pos_text").unwrap().tensor.clone();
    let d = pos.shape()[1];
    for k in 0..d {
        let got = g.value(b).data()[k] - g.value(a).data()[k];
        let want = pos.data()[d + k] - pos.data()[k];
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn first_decoder_step_sees_every_encoder_position() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = Model::<f64>::new(config(Variant::EncoderDecoder, 32), 4).unwrap();
    let mut g = Graph::with_params(&m.params);
    let x = g.input(Tensor::randn(&[6, 8], 1.0, &mut rng), true);
    let memory = m.encoder_forward(&mut g, x, 4).unwrap();
    let y = m.embed_text(&mut g, &[BOS], 0).unwrap();
    let h = m.decoder_forward(&mut g, y, Some(memory)).unwrap();
    let logits = m.lm_logits(&mut g, h).unwrap();
    let w = Tensor::uniform(g.value(logits).shape(), -1.0, 1.0, &mut rng);
    let s = g.weighted_sum(logits, w).unwrap();
    let grad = g.backward(s).unwrap().get_or_zeros(&g, x);
    for row in grad.data().chunks(8) {
        assert!(row.iter().any(|&v| v != 0.0));
    }
}

#[test]
fn masked_targets_do_not_affect_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::<f64>::new();
    let logits = g.constant(Tensor::randn(&[5, 7], 1.0, &mut rng));
    let mask = [true, false, true, false, true];
    let a = g.cross_entropy(logits, &[1, 2, 3, 4, 5], &mask).unwrap();
    let b = g.cross_entropy(logits, &[1, 6, 3, 0, 5], &mask).unwrap();
    assert_eq!(g.value(a).data(), g.value(b).data());
    assert!(g.cross_entropy(logits, &[1, 2, 3, 4, 5], &[false; 5]).is_err());
}

/// One small gradient step lowers the sample's loss for every objective.
#[test]
fn gradient_step_descends() {
    let v = vocab();
    let text = v.encode("a red square above a blue circle", false, true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let img = image(&mut rng);
    for variant in [Variant::EncoderDecoder, Variant::DecoderOnly] {
        let m = Model::<f64>::new(config(variant, v.len()), 6).unwrap();
        let span = span_corruption(&text, &v, 3.0, 0.3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let objectives: Vec<(&str, Loss)> = vec![
            (
                "pair",
                Box::new(|m: &Model<f64>, g: &mut Graph<'_, f64>| {
                    let x = g.constant(img.clone());
                    pair_loss(m, g, PrefixSampling::Fixed(2), x, &text, &mut ChaCha8Rng::seed_from_u64(0))
                }),
            ),
            ("lm", Box::new(|m: &Model<f64>, g: &mut Graph<'_, f64>| lm_loss(m, g, &text))),
            (
                "mlm",
                Box::new(|m: &Model<f64>, g: &mut Graph<'_, f64>| {
                    mlm_loss(m, g, &text, &v, 0.3, &mut ChaCha8Rng::seed_from_u64(0))
                }),
            ),
            ("span", Box::new(|m: &Model<f64>, g: &mut Graph<'_, f64>| span_loss(m, g, &span))),
        ];
        for (name, f) in &objectives {
            let mut g = Graph::with_params(&m.params);
            let l = f(&m, &mut g).unwrap();
            let before = g.value(l).data()[0];
            let grads = g.backward(l).unwrap().param_grads(&g);
            let mut stepped = m.clone();
            for (p, gr) in stepped.params.iter_mut().zip(&grads) {
                for (w, d) in p.tensor.data_mut().iter_mut().zip(gr.data()) {
                    *w -= 1e-3 * d;
                }
            }
            let mut g = Graph::with_params(&stepped.params);
            let l = f(&stepped, &mut g).unwrap();
            let after = g.value(l).data()[0];
            assert!(after < before, "{variant:?} {name}: {before} -> {after}");
        }
    }
}

#[test]
fn width_one_beam_is_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for seed in 0..20 {
        let variant = if seed % 2 == 0 { Variant::EncoderDecoder } else { Variant::DecoderOnly };
        let mut cfg = config(variant, 12);
        cfg.init_std = 1.0;
        let m = Model::<f64>::new(cfg, seed).unwrap();
        let img = image(&mut rng);
        let prompt: Vec<u32> = (0..rng.gen_range(0..3)).map(|_| rng.gen_range(5..12)).collect();
        let greedy = greedy_decode(&m, Some(&img), &[], &prompt, 6).unwrap();
        let beam = beam_search(&m, Some(&img), &[], &prompt, BeamConfig { width: 1, max_len: 6, alpha: 0.6 }).unwrap();
        let mut tokens = beam.tokens.clone();
        if tokens.last() == Some(&EOS) {
            tokens.pop();
        }
        assert_eq!(tokens, greedy, "seed {seed}");
    }
}

#[test]
fn checkpoint_bytes_round_trip_with_heads() {
    let mut m = Model::<f32>::new(config(Variant::EncoderDecoder, 20), 8).unwrap();
    m.add_head(svlm::model::HeadSpec { name: "vqa".into(), classes: 5, readouts: 1 }, 1).unwrap();
    let ck = Checkpoint::from_model(&m);
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap().to_model::<f32>(false).unwrap();
    assert!(back.params.bit_eq(&m.params));
    assert_eq!(back.config, m.config);
    let mut corrupt = bytes.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x40;
    assert!(Checkpoint::from_bytes(&corrupt).is_err());
}
