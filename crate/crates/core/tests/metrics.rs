//! Metric values against frozen numbers from an independent reference
//! (tests/oracles/metrics_oracle.py), plus property checks.

use pic_core::metrics::{
    bleu, build_idf, cider, cider_with, evaluate_corpus, rouge_l, rouge_l_beta, CiderVariant, ROUGE_BETA,
};
use proptest::prelude::*;
use serde::Deserialize;

const TOL: f64 = 1e-6;

#[derive(Deserialize)]
struct Golden {
    corpus: Vec<Vec<u32>>,
    idf: Vec<IdfCase>,
    cider: Vec<CiderCase>,
    bleu: Vec<BleuCase>,
    rouge: Vec<RougeCase>,
    report: ReportCase,
}

#[derive(Deserialize)]
struct IdfCase {
    ngram: Vec<u32>,
    idf: f64,
}

#[derive(Deserialize)]
struct CiderCase {
    name: String,
    candidate: Vec<u32>,
    references: Vec<Vec<u32>>,
    cider_d: f64,
    plain: f64,
}

#[derive(Deserialize)]
struct BleuCase {
    name: String,
    candidates: Vec<Vec<u32>>,
    references: Vec<Vec<u32>>,
    max_n: usize,
    value: f64,
}

#[derive(Deserialize)]
struct RougeCase {
    name: String,
    candidate: Vec<u32>,
    reference: Vec<u32>,
    beta: f64,
    value: f64,
}

#[derive(Deserialize)]
struct ReportCase {
    candidates: Vec<Vec<u32>>,
    bleu1: f64,
    bleu4: f64,
    #[serde(rename = "rougeL")]
    rouge_l: f64,
    cider: f64,
}

fn golden() -> Golden {
    serde_json::from_str(include_str!("golden/metrics.json")).unwrap()
}

fn close(name: &str, got: f64, want: f64) {
    assert!((got - want).abs() <= TOL, "{name}: got {got}, want {want}");
}

#[test]
fn idf_matches_reference() {
    let g = golden();
    let idf = build_idf(&g.corpus).unwrap();
    assert_eq!(idf.corpus_size(), 8);
    for case in &g.idf {
        close(&format!("idf {:?}", case.ngram), idf.idf(&case.ngram), case.idf);
    }
    // An n-gram in every document carries no weight; an unseen one gets ln N.
    let everywhere: Vec<Vec<u32>> = (0..8).map(|i| vec![7, 100 + i]).collect();
    let idf = build_idf(&everywhere).unwrap();
    assert_eq!(idf.idf(&[7]), 0.0);
    close("unseen", idf.idf(&[42]), 8f64.ln());
    close("singleton", idf.idf(&[103]), 8f64.ln());
}

#[test]
fn cider_matches_reference() {
    let g = golden();
    let idf = build_idf(&g.corpus).unwrap();
    for case in &g.cider {
        let d = cider(&case.candidate, &case.references, &idf).unwrap();
        close(&format!("CIDEr-D {}", case.name), d, case.cider_d);
        let p = cider_with(&case.candidate, &case.references, &idf, CiderVariant::Plain).unwrap();
        close(&format!("CIDEr {}", case.name), p, case.plain);
    }
}

#[test]
fn cider_clipping_and_length_penalty_cut_repetition() {
    let g = golden();
    let idf = build_idf(&g.corpus).unwrap();
    let case = g.cider.iter().find(|c| c.name == "repeated_long").unwrap();
    let d = cider(&case.candidate, &case.references, &idf).unwrap();
    let p = cider_with(&case.candidate, &case.references, &idf, CiderVariant::Plain).unwrap();
    assert!(d < 0.1 * p, "repetition should be heavily penalised: {d} vs plain {p}");
}

#[test]
fn bleu_matches_reference() {
    for case in golden().bleu {
        let v = bleu(&case.candidates, &case.references, case.max_n).unwrap();
        close(&format!("BLEU {}", case.name), v, case.value);
    }
    // "the the the" against "the cat": clipped unigram precision 1/3, no brevity penalty.
    close(
        "the the the",
        bleu(&[vec![5, 5, 5]], &[vec![5, 6]], 1).unwrap(),
        1.0 / 3.0,
    );
}

#[test]
fn rouge_matches_reference() {
    for case in golden().rouge {
        let v = rouge_l_beta(&case.candidate, &case.reference, case.beta);
        close(&format!("ROUGE-L {}", case.name), v, case.value);
    }
    // "a b c d" vs "a c e": LCS 2, P = 1/2, R = 2/3.
    let (p, r, b2) = (0.5, 2.0 / 3.0, ROUGE_BETA * ROUGE_BETA);
    close(
        "abcd/ace",
        rouge_l(&[1, 2, 3, 4], &[1, 3, 5]),
        (1.0 + b2) * p * r / (r + b2 * p),
    );
}

#[test]
fn corpus_report_matches_reference() {
    let g = golden();
    let idf = build_idf(&g.corpus).unwrap();
    let report = evaluate_corpus(&g.report.candidates, &g.corpus, &idf).unwrap();
    assert_eq!(report.n, g.corpus.len());
    close("bleu1", report.bleu1, g.report.bleu1);
    close("bleu4", report.bleu4, g.report.bleu4);
    close("rougeL", report.rouge_l, g.report.rouge_l);
    close("cider", report.cider, g.report.cider);
}

#[test]
fn degenerate_inputs() {
    let idf = build_idf(&[vec![1u32, 2]]).unwrap();
    assert!(build_idf::<Vec<u32>>(&[]).is_err());
    assert!(cider::<Vec<u32>>(&[1], &[], &idf).is_err());
    assert_eq!(cider(&[], &[vec![1u32]], &idf).unwrap(), 0.0);
    assert!(bleu(&[vec![1u32]], &[vec![1u32], vec![2]], 1).is_err());
    assert!(bleu(&[vec![1u32]], &[vec![1u32]], 5).is_err());
    assert_eq!(bleu(&[Vec::<u32>::new()], &[vec![1u32]], 1).unwrap(), 0.0);
    assert_eq!(rouge_l(&[], &[1]), 0.0);
}

fn caption() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(4u32..12, 1..9)
}

proptest! {
    #[test]
    fn scores_are_bounded(
        cand in caption(),
        refs in prop::collection::vec(caption(), 1..4),
        corpus in prop::collection::vec(caption(), 1..6),
    ) {
        let mut all = corpus.clone();
        all.extend(refs.iter().cloned());
        let idf = build_idf(&all).unwrap();
        let c = cider(&cand, &refs, &idf).unwrap();
        prop_assert!((0.0..=10.0 + 1e-9).contains(&c), "cider {}", c);
        let r = rouge_l(&cand, &refs[0]);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&r));
        for n in 1..=4 {
            let b = bleu(std::slice::from_ref(&cand), std::slice::from_ref(&refs[0]), n).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
        }
    }

    #[test]
    fn identical_caption_scores_maximally(cand in caption(), others in prop::collection::vec(caption(), 1..6)) {
        prop_assert!((rouge_l(&cand, &cand) - 1.0).abs() < 1e-12);
        prop_assert!((bleu(std::slice::from_ref(&cand), std::slice::from_ref(&cand), 1).unwrap() - 1.0).abs() < 1e-12);
        // Shift the other documents onto disjoint ids so every n-gram of the
        // candidate has positive IDF; each order the caption is long enough
        // for then contributes its full 10/4.
        let mut all: Vec<Vec<u32>> = others.iter().map(|d| d.iter().map(|t| t + 100).collect()).collect();
        all.push(cand.clone());
        let idf = build_idf(&all).unwrap();
        let c = cider(&cand, std::slice::from_ref(&cand), &idf).unwrap();
        let orders = cand.len().min(4) as f64;
        prop_assert!((c - 2.5 * orders).abs() < 1e-9, "cider {}", c);
    }

    #[test]
    fn cider_ignores_reference_order(
        cand in caption(),
        refs in prop::collection::vec(caption(), 2..5),
        rot in 0usize..4,
    ) {
        let idf = build_idf(&refs).unwrap();
        let mut shuffled = refs.clone();
        shuffled.rotate_left(rot % refs.len());
        let a = cider(&cand, &refs, &idf).unwrap();
        let b = cider(&cand, &shuffled, &idf).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn corpus_bleu_ignores_pair_order(pairs in prop::collection::vec((caption(), caption()), 1..6), rot in 0usize..6) {
        let (c, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let mut rotated = pairs.clone();
        rotated.rotate_left(rot % pairs.len());
        let (c2, r2): (Vec<_>, Vec<_>) = rotated.into_iter().unzip();
        for n in [1, 4] {
            let a = bleu(&c, &r, n).unwrap();
            let b = bleu(&c2, &r2, n).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rouge_swaps_precision_and_recall(a in caption(), b in caption()) {
        // Swapping the arguments is the same as inverting beta.
        let fwd = rouge_l_beta(&a, &b, ROUGE_BETA);
        let back = rouge_l_beta(&b, &a, 1.0 / ROUGE_BETA);
        prop_assert!((fwd - back).abs() < 1e-12);
        // With beta = 1 the measure is symmetric.
        prop_assert!((rouge_l_beta(&a, &b, 1.0) - rouge_l_beta(&b, &a, 1.0)).abs() < 1e-12);
    }
}
