//! Acceptance criteria 1-11, one PASS/FAIL line each.
//!
//! `ACCEPTANCE_ONLY=1,3,6` runs a subset. The pretraining criterion runs the
//! full toy configuration and dominates the runtime. Failures are reported
//! on stdout; set `ACCEPTANCE_STRICT=1` to also exit non-zero.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use svlm::config::RunConfig;
use svlm::data::{all_combos, caption_scene, lexicon_lines, random_scene, render_scene, PairRecord};
use svlm::gradcheck::full_model_suite;
use svlm::inference::sequence_logprob;
use svlm::inference::{adapt_resolution, beam_search, BeamConfig};
use svlm::model::{build_prefix_mask, Model, ModelConfig, StemConfig, Variant};
use svlm::objectives::{
    lm_loss, mlm_corrupt, mlm_loss_masked, pair_loss, prefix_lm_loss, shift_right, text_loss, Objective, PrefixSampling,
};
use svlm::parallel::Exec;
use svlm::pipeline::{
    caption_eval, init_model, prepare, pretrain, run_ablation, train_tokenizer, vqa_finetune_eval, Arm, Prepared,
};
use svlm::tokenizer::{train_bpe, Vocab, EOS};
use svlm::training::{lr_at, Checkpoint, Trainer};
use svlm::{Graph, Tensor};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn small_config(variant: Variant, vocab: usize) -> ModelConfig {
    ModelConfig {
        variant,
        layers_enc: 1,
        layers_dec: 1,
        heads: 2,
        hidden: 8,
        ffn_dim: 16,
        vocab,
        max_text_len: 8,
        image_hw: [8, 8],
        patch: 4,
        channels: 3,
        pixel_mean: 1.0,
        pixel_std: 1.0,
        stem: StemConfig::Linear,
        relbias_grid: [2, 2],
        dropout: 0.0,
        ln_eps: 1e-5,
        init_std: 0.5,
        logit_scale_init: 1.0,
    }
}

fn lexicon_vocab() -> Vocab {
    let lines = lexicon_lines();
    train_bpe(lines.iter().map(String::as_str), 128, 0).expect("tokenizer").with_sentinels(8)
}

/// Gradient of a random projection of `logits[t]` with respect to every
/// input row; returns which rows are nonzero and which are exactly zero.
fn row_dependence(
    g: &mut Graph<'_, f64>,
    x: svlm::Var,
    logits: svlm::Var,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<bool>, String> {
    let v = g.shape(logits)[1];
    let row = g.slice_rows(logits, t, t + 1).map_err(s)?;
    let w = g.constant(Tensor::uniform(&[1, v], -1.0, 1.0, rng));
    let prod = g.mul(row, w).map_err(s)?;
    let scalar = g.sum(prod).map_err(s)?;
    let grad = g.backward(scalar).map_err(s)?.get_or_zeros(g, x);
    let d = grad.shape()[1];
    Ok(grad.data().chunks(d).map(|r| r.iter().any(|&z| z != 0.0)).collect())
}

fn c1_masks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut probes = 0;
    let dec = Model::<f64>::new(small_config(Variant::DecoderOnly, 16), 3).map_err(s)?;
    for t_len in 1..=8 {
        for tp in 0..=t_len {
            for t in 0..t_len {
                let mut g = Graph::with_params(&dec.params);
                let x = g.input(Tensor::randn(&[t_len, 8], 1.0, &mut rng), true);
                let mask = build_prefix_mask(t_len, tp);
                let h = dec.decoder_only_forward(&mut g, x, &mask, 0).map_err(s)?;
                let logits = dec.lm_logits(&mut g, h).map_err(s)?;
                let dep = row_dependence(&mut g, x, logits, t, &mut rng)?;
                for (j, &nz) in dep.iter().enumerate() {
                    let allowed = (t < tp && j < tp) || (t >= tp && j <= t);
                    ensure(nz == allowed, || {
                        format!("decoder-only T={t_len} T_p={tp}: d logits[{t}] / d embed[{j}] nonzero={nz}, expected {allowed}")
                    })?;
                }
                probes += 1;
            }
        }
    }
    let ed = Model::<f64>::new(small_config(Variant::EncoderDecoder, 16), 4).map_err(s)?;
    for t_len in 1..=8 {
        for t in 0..t_len {
            let mut g = Graph::with_params(&ed.params);
            let memory = g.constant(Tensor::randn(&[5, 8], 1.0, &mut rng));
            let y = g.input(Tensor::randn(&[t_len, 8], 1.0, &mut rng), true);
            let h = ed.decoder_forward(&mut g, y, Some(memory)).map_err(s)?;
            let logits = ed.lm_logits(&mut g, h).map_err(s)?;
            let dep = row_dependence(&mut g, y, logits, t, &mut rng)?;
            for (j, &nz) in dep.iter().enumerate() {
                ensure(nz == (j <= t), || format!("encoder-decoder T={t_len}: d logits[{t}] / d y[{j}] nonzero={nz}"))?;
            }
            probes += 1;
        }
    }
    Ok(format!("{probes} gradient probes; zero exactly where masked, nonzero elsewhere"))
}

fn c2_gradcheck() -> Outcome {
    let start = Instant::now();
    let seeds: Vec<u64> = (0..5).collect();
    let results = full_model_suite(&seeds, Some(12)).map_err(s)?;
    let worst = results.iter().max_by(|a, b| a.worst.max_rel_error.total_cmp(&b.worst.max_rel_error)).expect("results");
    let secs = start.elapsed().as_secs_f64();
    ensure(worst.worst.max_rel_error < 1e-5, || {
        format!(
            "max rel error {:.3e} at {} ({:?}, seed {})",
            worst.worst.max_rel_error, worst.worst.name, worst.variant, worst.seed
        )
    })?;
    ensure(secs < 120.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "max rel error {:.2e} over 5 seeds x 2 variants ({} in {:?}), {secs:.1}s",
        worst.worst.max_rel_error, worst.worst.name, worst.variant
    ))
}

fn c3_identities() -> Outcome {
    let vocab = lexicon_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for variant in [Variant::EncoderDecoder, Variant::DecoderOnly] {
        let mut cfg = small_config(variant, vocab.len());
        cfg.hidden = 16;
        cfg.max_text_len = 12;
        let model = Model::<f64>::new(cfg, 5).map_err(s)?;
        for _ in 0..20 {
            let text: Vec<u32> = (0..7).map(|_| rng.gen_range(5..vocab.len() as u32)).collect();
            let mut g = Graph::with_params(&model.params);
            let a = lm_loss(&model, &mut g, &text).map_err(s)?;
            let b = prefix_lm_loss(&model, &mut g, None, &text, 0).map_err(s)?;
            let (a, b) = (g.value(a).data()[0], g.value(b).data()[0]);
            worst = worst.max((a - b).abs());
            ensure((a - b).abs() < 1e-6, || format!("{variant:?}: lm {a} vs prefix_lm(T_p=0) {b}"))?;

            let (corrupted, targets) = mlm_corrupt(&text, &vocab, 0.3, &mut rng).map_err(s)?;
            let mlm = mlm_loss_masked(&model, &mut g, &corrupted, &targets).map_err(s)?;
            let n = corrupted.len();
            let full = build_prefix_mask(n, n);
            ensure((0..n).all(|i| (0..n).all(|j| full.allows(i, j))), || "PrefixMask(T, T) is not dense".into())?;
            let x = model.embed_text(&mut g, &corrupted, 0).map_err(s)?;
            let h = match variant {
                Variant::DecoderOnly => model.decoder_only_forward(&mut g, x, &full, 0).map_err(s)?,
                Variant::EncoderDecoder => model.encoder_forward(&mut g, x, 0).map_err(s)?,
            };
            let logits = model.lm_logits(&mut g, h).map_err(s)?;
            let mut ids = corrupted.clone();
            let mut mask = vec![false; n];
            for &(p, orig) in &targets {
                ids[p] = orig;
                mask[p] = true;
            }
            let manual = g.cross_entropy(logits, &ids, &mask).map_err(s)?;
            let (m1, m2) = (g.value(mlm).data()[0], g.value(manual).data()[0]);
            worst = worst.max((m1 - m2).abs());
            ensure((m1 - m2).abs() < 1e-6, || format!("{variant:?}: mlm {m1} vs PrefixMask(T_p=T) {m2}"))?;
        }
    }
    // shift_right is the only difference between LM inputs and targets
    ensure(shift_right(&[7, 8, 9]) == vec![1, 7, 8], || "shift_right".into())?;
    Ok(format!("max |difference| {worst:.2e} over 80 comparisons"))
}

fn c4_init_loss() -> Outcome {
    let vocab = lexicon_vocab();
    let v = 512usize;
    let target = (v as f64).ln();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let text = vocab.encode("a red square above a blue circle", false, true).map_err(s)?;
    let image = render_scene(&random_scene(&all_combos(), 4, &mut rng), 32).map_err(s)?;
    let mut lines = Vec::new();
    for variant in [Variant::EncoderDecoder, Variant::DecoderOnly] {
        let mut cfg = ModelConfig::toy(v);
        cfg.variant = variant;
        let model = Model::<f32>::new(cfg, 9).map_err(s)?;
        let mut g = Graph::with_params(&model.params);
        let x = g.constant(image.to_tensor());
        let mut losses = vec![(
            "prefix_lm(pair)",
            pair_loss(&model, &mut g, PrefixSampling::Uniform, x, &text, &mut rng).map_err(s)?,
        )];
        for (name, obj) in [
            ("prefix_lm", Objective::PrefixLm),
            ("lm", Objective::Lm),
            ("mlm", Objective::Mlm),
            ("span", Objective::Span),
        ] {
            losses.push((
                name,
                text_loss(&model, &mut g, obj, PrefixSampling::Uniform, &text, &vocab, &mut rng).map_err(s)?,
            ));
        }
        for (name, l) in losses {
            let l = g.value(l).data()[0] as f64;
            ensure((l - target).abs() <= 0.05 * target, || format!("{variant:?} {name}: {l:.4} vs ln V {target:.4}"))?;
            lines.push(format!("{variant:?}/{name}={l:.3}"));
        }
    }
    Ok(format!("ln 512 = {target:.3}; {}", lines.join(" ")))
}

fn c5_schedule() -> Outcome {
    let s_total = 5000;
    let (a, b, c) =
        (lr_at(0, s_total, 0.02, 5e-4), lr_at(100, s_total, 0.02, 5e-4), lr_at(s_total, s_total, 0.02, 5e-4));
    ensure(a == 0.0 && b == 5e-4 && c == 0.0, || format!("lr(0)={a}, lr(0.02 S)={b}, lr(S)={c}"))?;
    Ok(format!("lr(0)={a}, lr(100)={b}, lr(5000)={c} with S=5000"))
}

fn c6_beam_oracle() -> Outcome {
    let mut hits = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for seed in 0..100 {
        let mut cfg = small_config(Variant::EncoderDecoder, 5);
        cfg.max_text_len = 4;
        cfg.init_std = 1.0;
        let model = Model::<f64>::new(cfg, seed).map_err(s)?;
        let image = Tensor::<f64>::uniform(&[3, 8, 8], 0.0, 1.0, &mut rng);
        let mut best = f64::NEG_INFINITY;
        for code in 0..125u32 {
            let seq = [code / 25, (code / 5) % 5, code % 5];
            best = best.max(sequence_logprob(&model, Some(&image), &[], &[], &seq).map_err(s)?);
        }
        let beam = BeamConfig { width: 125, max_len: 3, alpha: 0.0 };
        let h = beam_search(&model, Some(&image), &[], &[], beam).map_err(s)?;
        let lp = sequence_logprob(&model, Some(&image), &[], &[], &h.tokens).map_err(s)?;
        if (h.score - best).abs() < 1e-9 && (lp - best).abs() < 1e-9 {
            hits += 1;
        } else {
            return Err(format!("seed {seed}: beam {:.12} ({:?}) vs exhaustive {best:.12}", h.score, h.tokens));
        }
        ensure(h.tokens.len() <= 3 && h.tokens.iter().filter(|&&t| t == EOS).count() <= 1, || "bad hypothesis".into())?;
    }
    Ok(format!("{hits}/100 random models match the exhaustive maximum"))
}

fn c9_cfg() -> RunConfig {
    let mut cfg = RunConfig::toy().with_seed(9);
    cfg.corpus.n_pairs = 300;
    cfg.corpus.n_docs = 60;
    cfg.corpus.n_eval = 10;
    cfg.train.steps = 100;
    cfg
}

fn c9_determinism() -> Outcome {
    let mut cfg = c9_cfg();
    cfg.train.steps = 30;
    let run = |exec: Exec| -> Result<Vec<u8>, String> {
        let prep = prepare(&cfg, exec).map_err(s)?;
        let mut buf = Vec::new();
        pretrain(&cfg, &prep, exec, &mut buf, None).map_err(s)?;
        Ok(buf)
    };
    let a = run(Exec::available())?;
    let b = run(Exec::available())?;
    let c = run(Exec::Sequential)?;
    ensure(a == b, || "(a) metrics differ between identical runs".into())?;
    ensure(a == c, || "(a) metrics differ between parallel and sequential runs".into())?;

    let cfg = c9_cfg();
    let prep = prepare(&cfg, Exec::available()).map_err(s)?;
    let straight = {
        let mut t = Trainer::new(init_model(&cfg, &prep.vocab).map_err(s)?, cfg.train.clone(), &prep.data, &prep.vocab)
            .map_err(s)?;
        let mut m = Vec::new();
        t.run(&mut m, None).map_err(s)?;
        (t.checkpoint(), m)
    };
    let mut first = Trainer::new(init_model(&cfg, &prep.vocab).map_err(s)?, cfg.train.clone(), &prep.data, &prep.vocab)
        .map_err(s)?;
    let mut m1 = Vec::new();
    for _ in 0..50 {
        let m = first.step().map_err(s)?;
        serde_json::to_writer(&mut m1, &m).map_err(s)?;
        m1.push(b'\n');
    }
    let bytes = first.checkpoint().to_bytes().map_err(s)?;
    let loaded = Checkpoint::from_bytes(&bytes).map_err(s)?;
    ensure(loaded.to_bytes().map_err(s)? == bytes, || "(b) checkpoint bytes change across a round trip".into())?;
    let restored = loaded.to_model::<f32>(false).map_err(s)?;
    let bit_exact = restored
        .params
        .iter()
        .zip(first.model.params.iter())
        .all(|(a, b)| a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    ensure(bit_exact, || "(b) restored parameters differ".into())?;
    drop(first);
    let mut second = Trainer::resume(&loaded, cfg.train.clone(), &prep.data, &prep.vocab).map_err(s)?;
    second.run(&mut m1, None).map_err(s)?;
    ensure(second.checkpoint().to_bytes().map_err(s)? == straight.0.to_bytes().map_err(s)?, || {
        "(c) 50+resume+50 differs from 100 straight steps".into()
    })?;
    ensure(m1 == straight.1, || "(c) metrics differ after resume".into())?;
    Ok(format!(
        "identical metrics ({} bytes) across runs and thread counts; checkpoint round trip and resume bit-exact",
        a.len()
    ))
}

fn c10_tokenizer() -> Outcome {
    let cfg = RunConfig::toy();
    let corpora = svlm::data::build_corpora(&cfg.corpus).map_err(s)?;
    let v1 = train_tokenizer(&cfg.tokenizer, &corpora).map_err(s)?;
    let v2 = train_tokenizer(&cfg.tokenizer, &corpora).map_err(s)?;
    ensure(v1.to_file_string() == v2.to_file_string(), || "BPE training is not deterministic".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let combos = all_combos();
    let mut ok = 0;
    for i in 0..10_000 {
        let spec = random_scene(&combos, 4, &mut rng);
        let caption = caption_scene(&spec, &mut rng, if i % 2 == 0 { 0.0 } else { 0.5 });
        let ids = v1.encode(&caption, false, false).map_err(s)?;
        let back = v1.decode(&ids).map_err(s)?;
        ensure(back == caption, || format!("round trip failed: {caption:?} -> {back:?}"))?;
        ok += 1;
    }
    Ok(format!("{ok}/10000 captions round-trip; vocabulary of {} identical across runs", v1.len()))
}

/// Shared by criteria 7 and 11.
struct Pretrained {
    cfg: RunConfig,
    prep: Prepared,
    model: Model<f32>,
}

fn c7_pretraining(slot: &mut Option<Pretrained>) -> Outcome {
    let cfg = RunConfig::toy();
    let exec = Exec::available();
    let start = Instant::now();
    let prep = prepare(&cfg, exec).map_err(s)?;
    let mut metrics = Vec::new();
    let model = pretrain(&cfg, &prep, exec, &mut metrics, None).map_err(s)?;
    let (heldin, _) = caption_eval(&model, &prep.vocab, &prep.corpora.heldin, &cfg, exec).map_err(s)?;
    let secs = start.elapsed().as_secs_f64();
    let mut pretrained = model.clone();
    let (acc_pre, _) = vqa_finetune_eval(&mut pretrained, &cfg, &prep.vocab, exec).map_err(s)?;
    let mut scratch = init_model(&cfg, &prep.vocab).map_err(s)?;
    let (acc_scratch, _) = vqa_finetune_eval(&mut scratch, &cfg, &prep.vocab, exec).map_err(s)?;
    let detail = format!(
        "held-in caption exact match {:.3} (token acc {:.3}) after {} steps in {secs:.0}s; VQA pretrained {acc_pre:.3} vs no pretraining {acc_scratch:.3}",
        heldin.exact_match, heldin.token_accuracy, cfg.train.steps
    );
    *slot = Some(Pretrained { cfg: cfg.clone(), prep, model });
    ensure(cfg.train.steps <= 5000, || format!("{detail}; budget exceeds 5k steps"))?;
    ensure(heldin.exact_match >= 0.9, || format!("{detail}; exact match below 0.90"))?;
    ensure(secs < 900.0, || format!("{detail}; slower than 15 min"))?;
    ensure(acc_pre - acc_scratch >= 0.10, || format!("{detail}; VQA gap below 10 points"))?;
    Ok(detail)
}

fn c8_ablations() -> Outcome {
    let mut cfg = RunConfig::toy().with_seed(8);
    cfg.corpus.n_pairs = 200;
    cfg.corpus.n_docs = 40;
    cfg.corpus.n_eval = 8;
    cfg.train.steps = 6;
    cfg.vqa.n_train = 32;
    cfg.vqa.n_eval = 16;
    cfg.vqa.finetune.steps = 4;
    cfg.vqa.finetune.batch = 8;
    // every arm must be reachable from serialized configuration alone
    let cfg = RunConfig::from_json(&cfg.to_json()).map_err(s)?;
    let arms = Arm::all();
    let mut metrics = Vec::new();
    let report = run_ablation(&cfg, &arms, Exec::available(), &mut metrics).map_err(s)?;
    let md = report.to_markdown();
    for a in &arms {
        let derived = RunConfig::from_json(&a.apply(&cfg).to_json()).map_err(s)?;
        ensure(derived == a.apply(&cfg), || format!("{} config does not round-trip", a.name()))?;
        ensure(md.contains(&format!("| {} |", a.name())), || format!("{} missing from report", a.name()))?;
    }
    ensure(report.rows.len() == arms.len(), || "report rows".into())?;
    Ok(format!("{} arms ran end to end; report has {} rows", arms.len(), report.rows.len()))
}

fn caption_loss(model: &Model<f32>, vocab: &Vocab, records: &[PairRecord], size: usize) -> Result<f64, String> {
    let mut total = 0.0;
    for r in records {
        let img = render_scene(&r.spec, size).map_err(s)?;
        let ids = vocab.encode(&r.caption, false, true).map_err(s)?;
        let mut g = Graph::with_params(&model.params);
        let x = g.constant(img.to_tensor());
        let l = prefix_lm_loss(model, &mut g, Some(x), &ids, model.config.num_patches()).map_err(s)?;
        total += g.value(l).data()[0] as f64;
    }
    Ok(total / records.len() as f64)
}

fn c11_resolution(slot: &Option<Pretrained>) -> Outcome {
    let owned;
    let (cfg, prep, model) = match slot {
        Some(p) => (&p.cfg, &p.prep, &p.model),
        None => {
            // same model criterion 7 trains, when that criterion was skipped
            let cfg = RunConfig::toy();
            let prep = prepare(&cfg, Exec::available()).map_err(s)?;
            let model = pretrain(&cfg, &prep, Exec::available(), &mut Vec::new(), None).map_err(s)?;
            owned = Pretrained { cfg, prep, model };
            (&owned.cfg, &owned.prep, &owned.model)
        }
    };
    let same = adapt_resolution(model, [32, 32]).map_err(s)?;
    let identical = same.config == model.config
        && same.params.iter().zip(model.params.iter()).all(|(a, b)| {
            a.name == b.name
                && a.tensor.shape() == b.tensor.shape()
                && a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    ensure(identical, || "adaptation at unchanged resolution is not bit-exact".into())?;
    let big = adapt_resolution(model, [64, 64]).map_err(s)?;
    let rows = big.params.by_name("embed.pos_image").expect("pos table").tensor.shape()[0];
    ensure(rows == 256, || format!("adapted table has {rows} rows"))?;
    let val = &prep.corpora.heldin[..200.min(prep.corpora.heldin.len())];
    let base = caption_loss(model, &prep.vocab, val, cfg.corpus.image_size)?;
    let adapted = caption_loss(&big, &prep.vocab, val, 64)?;
    let detail =
        format!("identity bit-exact; 64->256 positions; validation loss {base:.3} at 32px, {adapted:.3} at 64px");
    ensure(adapted.is_finite() && adapted <= 2.0 * base, || format!("{detail}; exceeds 2x"))?;
    Ok(detail)
}

fn main() {
    let only: Option<Vec<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut pretrained: Option<Pretrained> = None;
    let mut failures = 0;
    let mut report = |n: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(n) {
            return;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|m| m.to_string()))
                .unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n:>2} PASS {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failures += 1;
                println!("criterion {n:>2} FAIL {name}: {d} [{secs:.1}s]");
            }
        }
    };
    report(1, "mask/causality", &mut c1_masks);
    report(2, "gradient verification", &mut c2_gradcheck);
    report(3, "objective identities", &mut c3_identities);
    report(4, "init loss", &mut c4_init_loss);
    report(5, "schedule", &mut c5_schedule);
    report(6, "beam oracle", &mut c6_beam_oracle);
    report(7, "synthetic pretraining", &mut || c7_pretraining(&mut pretrained));
    report(8, "ablation harness", &mut c8_ablations);
    report(9, "determinism and persistence", &mut c9_determinism);
    report(10, "tokenizer", &mut c10_tokenizer);
    report(11, "resolution adaptation", &mut || c11_resolution(&pretrained));
    match failures {
        0 => println!("all selected criteria passed"),
        1 => println!("1 criterion failed"),
        n => println!("{n} criteria failed"),
    }
    if failures > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
