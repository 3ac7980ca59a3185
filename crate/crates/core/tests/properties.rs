use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use svlm::data::{
    all_combos, clean_caption, collate, parse_caption, random_scene, render_scene, BatchPlan, Color, Shape,
};
use svlm::inference::{argmax, exact_match, normalize_answer};
use svlm::model::build_prefix_mask;
use svlm::objectives::{mlm_corrupt, prefix_range, sample_prefix, span_corruption};
use svlm::tokenizer::{train_bpe, Vocab, EOS, MASK, PAD};
use svlm::training::lr_at;
use svlm::vision::interpolate_positions;
use svlm::Tensor;

fn vocab() -> Vocab {
    let lines = svlm::data::lexicon_lines();
    train_bpe(lines.iter().map(String::as_str), 200, 0).unwrap().with_sentinels(8)
}

fn words() -> Vec<&'static str> {
    let mut w = vec!["a", "above", "left", "of", "and", "picture", "the", "is", "there"];
    w.extend(Color::ALL.iter().map(|c| c.word()));
    w.extend(Shape::ALL.iter().map(|s| s.word()));
    w
}

proptest! {
    #[test]
    fn prefix_mask_matches_definition(t in 0usize..12, tp_frac in 0.0f64..=1.0) {
        let tp = (t as f64 * tp_frac).round() as usize;
        let m = build_prefix_mask(t, tp);
        for i in 0..t {
            prop_assert!((0..t).any(|j| m.allows(i, j)), "row {i} has no visible key");
            for j in 0..t {
                let expected = if i < tp { j < tp } else { j <= i };
                prop_assert_eq!(m.allows(i, j), expected);
            }
        }
    }

    #[test]
    fn sampled_prefix_stays_in_range(t_i in 0usize..70, t_t in 1usize..20, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match prefix_range(t_i, t_t) {
            Ok((lo, hi)) => {
                let tp = sample_prefix(t_i, t_t, &mut rng).unwrap();
                prop_assert!(lo <= tp && tp <= hi);
                prop_assert!(tp >= t_i && tp < t_i + t_t);
                if t_i == 0 {
                    prop_assert!(tp >= 1);
                }
            }
            Err(_) => prop_assert!(t_i == 0 && t_t < 2),
        }
    }

    #[test]
    fn tokenizer_round_trips_lexicon_text(picks in prop::collection::vec(0usize..64, 0..12)) {
        let v = vocab();
        let w = words();
        let text = picks.iter().map(|&i| w[i % w.len()]).collect::<Vec<_>>().join(" ");
        let ids = v.encode(&text, true, true).unwrap();
        prop_assert_eq!(v.decode(&ids).unwrap(), text);
    }

    #[test]
    fn span_corruption_reassembles(len in 2usize..24, seed: u64, rate in 0.05f64..0.6) {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut text: Vec<u32> = (0..len).map(|i| 5 + (i as u32 * 7 + seed as u32) % 40).collect();
        text.push(EOS);
        let s = match span_corruption(&text, &v, 3.0, rate, &mut rng) {
            Ok(s) => s,
            Err(_) => return Ok(()),
        };
        // substitute each sentinel in the input with the tokens that follow it in the target
        let mut pieces = std::collections::HashMap::new();
        let mut cur = None;
        for &t in &s.target {
            if (0..s.spans).any(|k| v.sentinel(k) == Some(t)) {
                cur = Some(t);
                pieces.insert(t, Vec::new());
            } else if t != EOS {
                pieces.get_mut(&cur.unwrap()).unwrap().push(t);
            }
        }
        let rebuilt: Vec<u32> = s.input.iter().flat_map(|t| pieces.get(t).cloned().unwrap_or_else(|| vec![*t])).collect();
        prop_assert_eq!(rebuilt, text);
        prop_assert_eq!(*s.target.last().unwrap(), EOS);
    }

    #[test]
    fn mlm_targets_record_originals(len in 1usize..30, seed: u64) {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text: Vec<u32> = (0..len).map(|i| 5 + (i as u32 * 3) % 30).collect();
        let (corrupted, targets) = mlm_corrupt(&text, &v, 0.15, &mut rng).unwrap();
        prop_assert!(!targets.is_empty());
        prop_assert_eq!(corrupted.len(), text.len());
        for (i, (&c, &o)) in corrupted.iter().zip(&text).enumerate() {
            match targets.iter().find(|t| t.0 == i) {
                Some(&(_, orig)) => { prop_assert_eq!(c, MASK); prop_assert_eq!(orig, o); }
                None => prop_assert_eq!(c, o),
            }
        }
    }

    #[test]
    fn collate_pads_without_losing_tokens(lens in prop::collection::vec(1usize..10, 1..6)) {
        let seqs: Vec<Vec<u32>> = lens.iter().map(|&l| (0..l as u32).map(|x| x + 5).collect()).collect();
        let c = collate(&seqs, 64);
        let width = *lens.iter().max().unwrap();
        for (i, s) in seqs.iter().enumerate() {
            prop_assert_eq!(c.ids[i].len(), width);
            prop_assert_eq!(c.row(i), s.as_slice());
            prop_assert!(c.ids[i][s.len()..].iter().all(|&t| t == PAD));
            prop_assert_eq!(c.loss_mask[i].iter().filter(|&&m| m).count(), s.len());
        }
        if lens.iter().all(|&l| l == width) {
            prop_assert!(c.loss_mask.iter().flatten().all(|&m| m));
        }
    }

    #[test]
    fn batch_plan_counts_and_epochs(n_pairs in 1usize..40, n_docs in 1usize..10, ppb in 0usize..9, dpb in 0usize..3, seed: u64) {
        prop_assume!(ppb + dpb > 0);
        let plan = BatchPlan::new(n_pairs, n_docs, ppb, dpb, seed).unwrap();
        let mut seen = vec![0usize; n_pairs];
        let steps = if ppb > 0 { n_pairs.div_ceil(ppb) * 2 } else { 3 };
        for s in 0..steps as u64 {
            let b = plan.batch(s);
            prop_assert_eq!(b.pairs.len(), ppb);
            prop_assert_eq!(b.docs.len(), dpb);
            prop_assert_eq!(&b, &plan.batch(s));
            for &p in &b.pairs {
                seen[p] += 1;
            }
        }
        if ppb > 0 {
            // two full passes visit every pair at least once
            prop_assert!(seen.iter().all(|&c| c >= 1));
        }
    }

    #[test]
    fn schedule_is_bounded_and_unimodal(total in 10u64..10_000, warm in 0.01f64..0.5, peak in 1e-5f64..1e-2) {
        let w = (total as f64 * warm).ceil() as u64;
        let mut prev = -1.0;
        for s in 0..=total {
            let lr = lr_at(s, total, warm, peak);
            prop_assert!((0.0..=peak * (1.0 + 1e-12)).contains(&lr));
            if s < w { prop_assert!(lr >= prev); }
            if s > w { prop_assert!(lr <= prev + 1e-18); }
            prev = lr;
        }
        prop_assert_eq!(lr_at(total, total, warm, peak), 0.0);
    }

    #[test]
    fn interpolation_at_same_length_is_identity(rows in 2usize..20, cols in 1usize..6, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::<f64>::randn(&[rows, cols], 1.0, &mut rng);
        let same = interpolate_positions(&t, rows).unwrap();
        prop_assert_eq!(same.data(), t.data());
        let up = interpolate_positions(&t, rows * 2 - 1).unwrap();
        // endpoints are preserved exactly
        prop_assert_eq!(&up.data()[..cols], &t.data()[..cols]);
        prop_assert_eq!(&up.data()[up.len() - cols..], &t.data()[t.len() - cols..]);
    }

    #[test]
    fn answer_normalization_is_idempotent(s in "[ A-Za-z0-9.,!?']{0,20}") {
        let n = normalize_answer(&s);
        prop_assert_eq!(normalize_answer(&n), n.clone());
        prop_assert!(exact_match(&s, &n));
    }

    #[test]
    fn argmax_invariant_under_logit_shift(xs in prop::collection::vec(-10.0f64..10.0, 1..12), c in -50.0f64..50.0) {
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        let (a, b) = (argmax(&xs), argmax(&shifted));
        prop_assert!(a == b || (xs[a] - xs[b]).abs() < 1e-9);
    }

    #[test]
    fn clean_captions_parse_back(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_scene(&all_combos(), 4, &mut rng);
        let sem = parse_caption(&clean_caption(&spec)).unwrap();
        prop_assert_eq!(sem, spec.semantics());
        prop_assert!(render_scene(&spec, 32).is_ok());
    }
}

/// Chi-square test of the prefix sampler against the uniform distribution
/// at the 0.1% level.
#[test]
fn prefix_sampler_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (t_i, t_t) = (64, 9);
    let (lo, hi) = prefix_range(t_i, t_t).unwrap();
    let k = hi - lo + 1;
    let n = 45_000;
    let mut counts = vec![0usize; k];
    for _ in 0..n {
        counts[sample_prefix(t_i, t_t, &mut rng).unwrap() - lo] += 1;
    }
    let expected = n as f64 / k as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // critical value for 8 degrees of freedom at p = 0.001
    assert!(chi2 < 26.12, "chi2 {chi2} over {counts:?}");
}
