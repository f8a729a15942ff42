use std::collections::HashSet;

use proptest::prelude::*;

use causal_prompt::classifier::ClassProbabilities;
use causal_prompt::classifier::{
    average_logit_pairs, classify, restricted_softmax, softmax_pair, DemoSource, PromptSetup,
};
use causal_prompt::corpus::{make_fewshot_split, make_kfold, sample_eval_subset};
use causal_prompt::ensemble::{average_probs, topn_fusion, PredictionMatrix};
use causal_prompt::evaluation::{confusion, metrics};
use causal_prompt::gateway::{bind_verbalizer, MaskLogits, MaskedLm, StubMlm, VerbalizerBinding};
use causal_prompt::prompting::{
    build_prompt_bundle, demo_candidates, fill_mask, instantiate, sample_demonstrations, EmbeddingIndex,
};
use causal_prompt::{Label, LabeledCorpus, LabeledInstance, Template, Verbalizer};

fn label_strategy() -> impl Strategy<Value = Label> {
    prop_oneof![Just(Label::Positive), Just(Label::Negative)]
}

/// Corpus with `pos` positives and `neg` negatives and short word texts.
fn corpus(pos: usize, neg: usize) -> LabeledCorpus {
    let mut v = Vec::new();
    for i in 0..pos {
        v.push(LabeledInstance::new(
            format!("p{i:03}"),
            format!("cause {i} effect"),
            Label::Positive,
        ));
    }
    for i in 0..neg {
        v.push(LabeledInstance::new(
            format!("n{i:03}"),
            format!("plain {i} fact"),
            Label::Negative,
        ));
    }
    LabeledCorpus::new("prop", v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_corpus(pos in 1usize..40, neg in 1usize..40, k in 1usize..40, seed in any::<u64>()) {
        let c = corpus(pos, neg);
        match make_fewshot_split(&c, k, seed) {
            Ok(split) => {
                prop_assert!(k <= pos && k <= neg);
                prop_assert_eq!(split.train.len(), 2 * k);
                prop_assert_eq!(split.eval.len(), c.len() - 2 * k);
                prop_assert_eq!(split.train.counts().positive, k);
                let train: HashSet<String> = split.train.ids().into_iter().collect();
                let eval: HashSet<String> = split.eval.ids().into_iter().collect();
                prop_assert!(train.is_disjoint(&eval));
                let all: HashSet<String> = c.ids().into_iter().collect();
                prop_assert_eq!(&train | &eval, all);
                let again = make_fewshot_split(&c, k, seed).unwrap();
                prop_assert_eq!(again.train.ids(), split.train.ids());
            }
            Err(_) => prop_assert!(k > pos || k > neg),
        }
    }

    #[test]
    fn subset_is_stratified_and_pure(pos in 1usize..30, neg in 1usize..30, m in 1usize..30, seed in any::<u64>()) {
        let c = corpus(pos, neg);
        if let Ok(s) = sample_eval_subset(&c, m, seed) {
            prop_assert_eq!(s.counts().positive, m);
            prop_assert_eq!(s.counts().negative, m);
            prop_assert_eq!(s.ids(), sample_eval_subset(&c, m, seed).unwrap().ids());
        } else {
            prop_assert!(m > pos || m > neg);
        }
    }

    #[test]
    fn kfold_dev_sets_partition(pos in 3usize..40, neg in 3usize..40, folds in 2usize..4, seed in any::<u64>()) {
        let c = corpus(pos, neg);
        let parts = make_kfold(&c, folds, seed).unwrap();
        prop_assert_eq!(parts.len(), folds);
        let mut seen = HashSet::new();
        for (train, dev) in &parts {
            prop_assert_eq!(train.len() + dev.len(), c.len());
            for id in dev.ids() {
                prop_assert!(seen.insert(id));
            }
        }
        prop_assert_eq!(seen.len(), c.len());
    }

    #[test]
    fn substitution_lengths(prefix in "[a-z ]{0,12}", middle in "[a-z ]{0,12}", suffix in "[a-z]{0,8}",
                            text in "[a-zA-Z ,.]{1,40}", word in "[a-z]{1,10}") {
        let pattern = format!("[x]{prefix}[MASK]{middle}{suffix}");
        let t = Template::new(pattern.as_str()).unwrap();
        let x = LabeledInstance::new("x", text.trim().to_string() + "q", Label::Positive);
        let out = instantiate(&t, &x);
        prop_assert_eq!(out.len(), pattern.len() - "[x]".len() + x.text.len());
        let filled = fill_mask(&t, &word);
        prop_assert_eq!(filled.len(), pattern.len() - "[MASK]".len() + word.len());
    }

    #[test]
    fn bundle_mask_comes_from_input(text in "[a-z]{1,8}( [a-z]{1,8}){0,6}", ptext in "[a-z]{1,8}( [a-z]{1,8}){0,6}",
                                    ntext in "[a-z]{1,8}( [a-z]{1,8}){0,6}") {
        let t = Template::new("[x] so it is [MASK] now").unwrap();
        let x = LabeledInstance::new("x", text, Label::Negative);
        let p = LabeledInstance::new("p", ptext, Label::Positive);
        let n = LabeledInstance::new("n", ntext, Label::Negative);
        let b = build_prompt_bundle(&t, &Verbalizer::default(), &x, (&p, &n), None).unwrap();
        prop_assert_eq!(b.full_text.matches("[MASK]").count(), 1);
        prop_assert!(b.mask_position_hint < b.input_prompt.len());
        prop_assert!(b.full_text.starts_with(&b.input_prompt));
        prop_assert!(b.full_text[b.mask_position_hint..].starts_with("[MASK]"));
    }

    #[test]
    fn demonstration_pools_match_rank_oracle(
        vectors in prop::collection::vec((prop::collection::vec(-1.0f64..1.0, 3), label_strategy()), 4..24),
        tenths in 1usize..=10,
        seed in any::<u64>(),
    ) {
        let instances: Vec<LabeledInstance> = vectors
            .iter()
            .enumerate()
            .map(|(i, (_, l))| LabeledInstance::new(format!("i{i:02}"), format!("t{i}"), *l))
            .collect();
        let pool = LabeledCorpus::new("pool", instances.clone()).unwrap();
        let mut emb = EmbeddingIndex::new();
        for (inst, (v, _)) in instances.iter().zip(&vectors) {
            emb.insert(inst.id.clone(), v.clone());
        }
        let x = &instances[0];
        let fraction = tenths as f64 / 10.0;
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
            let na: f64 = a.iter().map(|p| p * p).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|p| p * p).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 { 0.0 } else { d / (na * nb) }
        };
        let oracle = |label: Label| -> Vec<String> {
            let mut scored: Vec<(f64, String)> = instances
                .iter()
                .zip(&vectors)
                .skip(1)
                .filter(|(i, _)| i.label == label)
                .map(|(i, (v, _))| (cos(&vectors[0].0, v), i.id.clone()))
                .collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
            let keep = (tenths * scored.len()).div_ceil(10).max(1);
            scored.into_iter().take(keep).map(|(_, id)| id).collect()
        };
        let has_both = instances[1..].iter().any(|i| i.label.is_positive())
            && instances[1..].iter().any(|i| !i.label.is_positive());
        match demo_candidates(x, &pool, &emb, fraction) {
            Ok(c) => {
                prop_assert!(has_both);
                let pos: Vec<String> = c.positive.iter().map(|i| i.id.clone()).collect();
                let neg: Vec<String> = c.negative.iter().map(|i| i.id.clone()).collect();
                prop_assert_eq!(&pos, &oracle(Label::Positive));
                prop_assert_eq!(&neg, &oracle(Label::Negative));
                let (p, n) = sample_demonstrations(x, &pool, &emb, fraction, seed).unwrap();
                prop_assert_eq!(p.label, Label::Positive);
                prop_assert_eq!(n.label, Label::Negative);
                prop_assert!(p.id != x.id && n.id != x.id);
                prop_assert!(pos.contains(&p.id) && neg.contains(&n.id));
                if tenths == 10 {
                    prop_assert_eq!(pos.len(), instances[1..].iter().filter(|i| i.label.is_positive()).count());
                }
            }
            Err(_) => prop_assert!(!has_both),
        }
    }

    #[test]
    fn softmax_normalized_and_shift_invariant(a in -500.0f64..500.0, b in -500.0f64..500.0, c in -1e3f64..1e3) {
        let p = softmax_pair(a, b).unwrap();
        prop_assert!((p.p_positive + p.p_negative - 1.0).abs() <= 1e-9);
        let q = softmax_pair(a + c, b + c).unwrap();
        prop_assert!((p.p_positive - q.p_positive).abs() <= 1e-9);
        if a >= b {
            prop_assert_eq!(p.label(), Label::Positive);
        } else if b - a > 1e-12 {
            prop_assert_eq!(p.label(), Label::Negative);
        }
    }

    #[test]
    fn restricted_softmax_ignores_other_words(a in -50.0f64..50.0, b in -50.0f64..50.0,
                                              rest in prop::collection::vec(-100.0f64..100.0, 0..6)) {
        let mut scores = vec![a, b];
        scores.extend(rest);
        let logits = MaskLogits { scores, mask_index: 0 };
        let p = restricted_softmax(&logits, VerbalizerBinding { positive_id: 0, negative_id: 1 }).unwrap();
        let direct = softmax_pair(a, b).unwrap();
        prop_assert_eq!(p, direct);
    }

    #[test]
    fn identical_pairs_average_to_themselves(a in -50.0f64..50.0, b in -50.0f64..50.0, d in 1usize..10) {
        prop_assert_eq!(average_logit_pairs(&vec![(a, b); d]).unwrap(), (a, b));
    }

    #[test]
    fn metric_invariants(labels in prop::collection::vec((label_strategy(), label_strategy()), 1..60), rot in 0usize..60) {
        let (pred, gold): (Vec<Label>, Vec<Label>) = labels.iter().copied().unzip();
        let m = metrics(confusion(&pred, &gold).unwrap()).unwrap();
        for v in [m.precision, m.recall, m.accuracy, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(m.accuracy == 1.0, m.counts.fp == 0 && m.counts.fn_ == 0);
        let r = rot % labels.len();
        let mut p2 = pred.clone();
        let mut g2 = gold.clone();
        p2.rotate_left(r);
        g2.rotate_left(r);
        prop_assert_eq!(metrics(confusion(&p2, &g2).unwrap()).unwrap(), m.clone());
        let flip = |v: &[Label]| v.iter().map(|l| l.flipped()).collect::<Vec<_>>();
        let swapped = confusion(&flip(&pred), &flip(&gold)).unwrap();
        prop_assert_eq!(swapped, m.counts.swapped_polarity());
    }

    #[test]
    fn stub_reads_are_deterministic(seed in any::<u64>(), text in "[a-z]{1,6}( [a-z]{1,6}){0,5}") {
        let prompt = format!("{text} is [MASK]");
        let a = StubMlm::new(seed);
        let b = StubMlm::new(seed);
        prop_assert_eq!(a.mask_logits(&prompt).unwrap(), b.mask_logits(&prompt).unwrap());
        prop_assert_eq!(a.mask_logits(&prompt).unwrap(), a.mask_logits(&prompt).unwrap());
    }
}

/// Dyadic probabilities keep sums exact, so the oracle and the fusion agree
/// on every argmax.
fn dyadic_matrix() -> impl Strategy<Value = (Vec<Vec<u32>>, Vec<Label>)> {
    (1usize..=6, 4usize..=20).prop_flat_map(|(m, i)| {
        (
            prop::collection::vec(prop::collection::vec(0u32..=64, i), m),
            prop::collection::vec(label_strategy(), i),
        )
    })
}

fn to_matrix(rows: &[Vec<u32>], gold: &[Label]) -> PredictionMatrix {
    PredictionMatrix::new(
        (0..rows.len()).map(|m| format!("m{m}")).collect(),
        (0..gold.len()).map(|i| format!("i{i}")).collect(),
        rows.iter()
            .map(|r| {
                r.iter()
                    .map(|&q| ClassProbabilities {
                        p_positive: q as f64 / 64.0,
                        p_negative: (64 - q) as f64 / 64.0,
                    })
                    .collect()
            })
            .collect(),
        gold.to_vec(),
    )
    .unwrap()
}

/// Integer-arithmetic F1 of the averaged subset.
fn oracle_f1(rows: &[Vec<u32>], gold: &[Label], subset: &[usize]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0u32, 0u32, 0u32);
    for (i, g) in gold.iter().enumerate() {
        let sum: u32 = subset.iter().map(|&m| rows[m][i]).sum();
        let positive = 2 * sum >= 64 * subset.len() as u32;
        match (positive, g.is_positive()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 {
        0.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fusion_bounded_by_exhaustive_oracle((rows, gold) in dyadic_matrix(), seed in any::<u64>()) {
        let matrix = to_matrix(&rows, &gold);
        let m = rows.len();
        let best = (1u32..(1 << m))
            .map(|mask| {
                let subset: Vec<usize> = (0..m).filter(|b| mask & (1 << b) != 0).collect();
                oracle_f1(&rows, &gold, &subset)
            })
            .fold(0.0f64, f64::max);
        let out = topn_fusion(&matrix, 40, seed).unwrap();
        prop_assert!(out.result.fused_f1 <= best);
        let members: Vec<usize> = out.result.member_ids.iter().map(|id| id[1..].parse().unwrap()).collect();
        prop_assert_eq!(out.result.fused_f1, oracle_f1(&rows, &gold, &members));
        prop_assert!(out.restarts.iter().all(|r| r.f1 >= r.seed_f1));
        prop_assert!(out.result.member_ids.contains(&out.result.seed_model));
        let unique: HashSet<&String> = out.result.member_ids.iter().collect();
        prop_assert_eq!(unique.len(), out.result.member_ids.len());
        prop_assert_eq!(topn_fusion(&matrix, 40, seed).unwrap(), out);
    }

    #[test]
    fn fusion_ignores_instance_order((rows, gold) in dyadic_matrix(), seed in any::<u64>(), rot in 0usize..20) {
        let r = rot % gold.len();
        let rotate = |v: &mut Vec<u32>| v.rotate_left(r);
        let mut rows2 = rows.clone();
        rows2.iter_mut().for_each(rotate);
        let mut gold2 = gold.clone();
        gold2.rotate_left(r);
        let a = topn_fusion(&to_matrix(&rows, &gold), 30, seed).unwrap();
        let b = topn_fusion(&to_matrix(&rows2, &gold2), 30, seed).unwrap();
        prop_assert_eq!(a.result, b.result);
    }

    #[test]
    fn averaged_probabilities_agree_with_oracle((rows, gold) in dyadic_matrix()) {
        let matrix = to_matrix(&rows, &gold);
        let subset: Vec<usize> = (0..rows.len()).collect();
        let preds = average_probs(&matrix, &subset).unwrap();
        let labels: Vec<Label> = preds.iter().map(|p| p.predicted_label).collect();
        let m = metrics(confusion(&labels, &gold).unwrap()).unwrap();
        prop_assert!((m.f1 - oracle_f1(&rows, &gold, &subset)).abs() < 1e-12);
        for p in &preds {
            prop_assert!((p.probabilities.p_positive + p.probabilities.p_negative - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn classify_is_reproducible_and_d1_matches_direct_scoring() {
    let pool = corpus(6, 6);
    let mut emb = EmbeddingIndex::new();
    for (i, inst) in pool.iter().enumerate() {
        emb.insert(inst.id.clone(), vec![1.0, i as f64 / 10.0, (i % 3) as f64]);
    }
    let x = pool.instances()[0].clone();
    let t = Template::new("[x] so [MASK]").unwrap();
    let v = Verbalizer::default();
    let gw = StubMlm::new(9);
    let setup = PromptSetup {
        template: &t,
        verbalizer: &v,
        binding: bind_verbalizer(&gw, &v).unwrap(),
        demos: Some(DemoSource {
            pool: &pool,
            embeddings: &emb,
            fraction: 0.5,
        }),
    };
    let a = classify(&x, &setup, &gw, 3, 17).unwrap();
    let b = classify(&x, &setup, &gw, 3, 17).unwrap();
    assert_eq!(a, b);
    let one = classify(&x, &setup, &gw, 1, 17).unwrap();
    let direct = restricted_softmax(&gw.mask_logits(&one.prompts[0]).unwrap(), setup.binding).unwrap();
    assert_eq!(one.prediction.probabilities, direct);
}
