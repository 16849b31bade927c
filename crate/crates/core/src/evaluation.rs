//! Text and rating metrics: RMSE/MAE, corpus BLEU, sentence-averaged ROUGE,
//! and the optional embedding-cosine similarity score.

use std::collections::HashMap;

use thiserror::Error;

use crate::encoder::{cosine, EncoderError, SentenceEncoder};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    Empty,
    #[error("prediction/reference lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

const BLEU_EPS: f64 = 1e-9;

pub fn rmse(preds: &[f64], truths: &[f64]) -> Result<f64, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    if preds.len() != truths.len() {
        return Err(EvalError::LengthMismatch(preds.len(), truths.len()));
    }
    let mse: f64 = preds
        .iter()
        .zip(truths)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / preds.len() as f64;
    Ok(mse.sqrt())
}

pub fn mae(preds: &[f64], truths: &[f64]) -> Result<f64, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    if preds.len() != truths.len() {
        return Err(EvalError::LengthMismatch(preds.len(), truths.len()));
    }
    Ok(preds
        .iter()
        .zip(truths)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / preds.len() as f64)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts: HashMap<&[String], u64> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_default() += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-n: clipped n-gram precision with uniform weights over
/// orders 1..=n, brevity penalty, and epsilon smoothing for zero counts.
pub fn bleu_n(candidates: &[Vec<String>], references: &[Vec<String>], n: usize) -> f64 {
    assert!(n >= 1);
    if candidates.is_empty() || candidates.len() != references.len() {
        return 0.0;
    }
    let cand_len: usize = candidates.iter().map(|c| c.len()).sum();
    let ref_len: usize = references.iter().map(|r| r.len()).sum();
    if cand_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let mut matches = 0u64;
        let mut total = 0u64;
        for (cand, reference) in candidates.iter().zip(references) {
            let c_counts = ngram_counts(cand, order);
            let r_counts = ngram_counts(reference, order);
            for (gram, &c) in &c_counts {
                total += c;
                if let Some(&r) = r_counts.get(gram) {
                    matches += c.min(r);
                }
            }
        }
        let p = if total == 0 || matches == 0 {
            BLEU_EPS
        } else {
            matches as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let precision = (log_sum / n as f64).exp();
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * precision
}

/// Sentence-level BLEU variant (mean of per-pair corpus BLEU).
pub fn bleu_n_sentence(candidates: &[Vec<String>], references: &[Vec<String>], n: usize) -> f64 {
    if candidates.is_empty() || candidates.len() != references.len() {
        return 0.0;
    }
    let sum: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| bleu_n(std::slice::from_ref(c), std::slice::from_ref(r), n))
        .sum();
    sum / candidates.len() as f64
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// ROUGE-2 for one candidate/reference pair: bigram overlap (clipped),
/// returned as (precision, recall, f1).
pub fn rouge_2(candidate: &[String], reference: &[String]) -> (f64, f64, f64) {
    if candidate.len() < 2 || reference.len() < 2 {
        return (0.0, 0.0, 0.0);
    }
    let c_counts = ngram_counts(candidate, 2);
    let r_counts = ngram_counts(reference, 2);
    let mut overlap = 0u64;
    for (gram, &c) in &c_counts {
        if let Some(&r) = r_counts.get(gram) {
            overlap += c.min(r);
        }
    }
    let p = overlap as f64 / (candidate.len() - 1) as f64;
    let r = overlap as f64 / (reference.len() - 1) as f64;
    (p, r, f1(p, r))
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L for one pair: longest common subsequence precision and recall.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> (f64, f64, f64) {
    if candidate.is_empty() || reference.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let lcs = lcs_len(candidate, reference) as f64;
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    (p, r, f1(p, r))
}

/// Sentence-averaged P and R, with F recomputed from the averages so the
/// reported F stays the harmonic mean of the reported P and R.
fn rouge_corpus(
    pairs: &[(Vec<String>, Vec<String>)],
    f: fn(&[String], &[String]) -> (f64, f64, f64),
) -> (f64, f64, f64) {
    if pairs.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let mut sp = 0.0;
    let mut sr = 0.0;
    for (c, r) in pairs {
        let (p, rr, _) = f(c, r);
        sp += p;
        sr += rr;
    }
    let p = sp / pairs.len() as f64;
    let r = sr / pairs.len() as f64;
    (p, r, f1(p, r))
}

/// Cosine of the encoded candidate/reference sentences, averaged over pairs.
/// A simplified sentence-level surrogate for token-level contextual scores.
pub fn semantic_similarity(
    candidates: &[String],
    references: &[String],
    encoder: &dyn SentenceEncoder,
) -> Result<f64, EvalError> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(EvalError::Empty);
    }
    let mut sum = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        let vc = encoder.encode(c)?;
        let vr = encoder.encode(r)?;
        sum += f64::from(cosine(&vc, &vr));
    }
    Ok(sum / candidates.len() as f64)
}

/// All §-level metrics for one prediction run. Text metrics are stored in
/// [0, 1]; the rendered table shows them ×100.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rmse: f64,
    pub mae: f64,
    pub bleu1: f64,
    pub bleu4: f64,
    pub r2_p: f64,
    pub r2_r: f64,
    pub r2_f: f64,
    pub rl_p: f64,
    pub rl_r: f64,
    pub rl_f: f64,
    pub semantic: Option<f64>,
}

impl EvalReport {
    pub fn has_nan(&self) -> bool {
        [
            self.rmse, self.mae, self.bleu1, self.bleu4, self.r2_p, self.r2_r, self.r2_f,
            self.rl_p, self.rl_r, self.rl_f,
        ]
        .iter()
        .any(|x| x.is_nan())
            || self.semantic.is_some_and(|s| s.is_nan())
    }

    /// Machine-readable key=value lines, fixed key set and order.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in [
            ("rmse", self.rmse),
            ("mae", self.mae),
            ("bleu1", self.bleu1),
            ("bleu4", self.bleu4),
            ("r2_p", self.r2_p),
            ("r2_r", self.r2_r),
            ("r2_f", self.r2_f),
            ("rl_p", self.rl_p),
            ("rl_r", self.rl_r),
            ("rl_f", self.rl_f),
        ] {
            out.push_str(&format!("{k}={v}\n"));
        }
        if let Some(s) = self.semantic {
            out.push_str(&format!("semantic={s}\n"));
        }
        out
    }

    /// Human-readable table; text metrics ×100 as conventionally reported.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str("metric      value\n");
        out.push_str(&format!("RMSE        {:.4}\n", self.rmse));
        out.push_str(&format!("MAE         {:.4}\n", self.mae));
        out.push_str(&format!("BLEU-1      {:.2}\n", self.bleu1 * 100.0));
        out.push_str(&format!("BLEU-4      {:.2}\n", self.bleu4 * 100.0));
        out.push_str(&format!("R2-P        {:.2}\n", self.r2_p * 100.0));
        out.push_str(&format!("R2-R        {:.2}\n", self.r2_r * 100.0));
        out.push_str(&format!("R2-F        {:.2}\n", self.r2_f * 100.0));
        out.push_str(&format!("RL-P        {:.2}\n", self.rl_p * 100.0));
        out.push_str(&format!("RL-R        {:.2}\n", self.rl_r * 100.0));
        out.push_str(&format!("RL-F        {:.2}\n", self.rl_f * 100.0));
        if let Some(s) = self.semantic {
            out.push_str(&format!("BERT-S*     {:.2}  (*sentence-cosine surrogate)\n", s * 100.0));
        }
        out
    }
}

/// Aligned evaluation inputs: per pair, predicted/true rating and the
/// candidate/reference texts (already tokenized).
pub struct EvalInputs {
    pub pred_ratings: Vec<f64>,
    pub true_ratings: Vec<f64>,
    pub candidates: Vec<Vec<String>>,
    pub references: Vec<Vec<String>>,
    pub candidate_texts: Vec<String>,
    pub reference_texts: Vec<String>,
}

pub fn evaluate_run(
    inputs: &EvalInputs,
    sentence_bleu: bool,
    encoder: Option<&dyn SentenceEncoder>,
) -> Result<EvalReport, EvalError> {
    let n = inputs.pred_ratings.len();
    if n == 0 {
        return Err(EvalError::Empty);
    }
    for (other, len) in [
        ("true_ratings", inputs.true_ratings.len()),
        ("candidates", inputs.candidates.len()),
        ("references", inputs.references.len()),
    ] {
        let _ = other;
        if len != n {
            return Err(EvalError::LengthMismatch(n, len));
        }
    }
    let bleu = if sentence_bleu { bleu_n_sentence } else { bleu_n };
    let pairs: Vec<(Vec<String>, Vec<String>)> = inputs
        .candidates
        .iter()
        .cloned()
        .zip(inputs.references.iter().cloned())
        .collect();
    let (r2_p, r2_r, r2_f) = rouge_corpus(&pairs, rouge_2);
    let (rl_p, rl_r, rl_f) = rouge_corpus(&pairs, rouge_l);
    let semantic = match encoder {
        Some(enc) => Some(semantic_similarity(
            &inputs.candidate_texts,
            &inputs.reference_texts,
            enc,
        )?),
        None => None,
    };
    Ok(EvalReport {
        rmse: rmse(&inputs.pred_ratings, &inputs.true_ratings)?,
        mae: mae(&inputs.pred_ratings, &inputs.true_ratings)?,
        bleu1: bleu(&inputs.candidates, &inputs.references, 1),
        bleu4: bleu(&inputs.candidates, &inputs.references, 4),
        r2_p,
        r2_r,
        r2_f,
        rl_p,
        rl_r,
        rl_f,
        semantic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tokenize;
    use crate::encoder::StubEncoder;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn rmse_mae_perfect_predictions() {
        assert_eq!(rmse(&[1.0, 3.0], &[1.0, 3.0]).unwrap(), 0.0);
        assert_eq!(mae(&[1.0, 3.0], &[1.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn rmse_mae_hand_case() {
        let r = rmse(&[1.0, 2.0], &[1.0, 4.0]).unwrap();
        assert!((r - 2.0f64.sqrt()).abs() < 1e-12);
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 4.0]).unwrap(), 1.0);
    }

    #[test]
    fn constant_predictor_at_mean_minimizes_rmse() {
        let truths = [1.0, 2.0, 4.0, 5.0, 3.5];
        let mean = truths.iter().sum::<f64>() / truths.len() as f64;
        let best = rmse(&vec![mean; truths.len()], &truths).unwrap();
        // Grid scan over candidate constants.
        let mut c = 0.0;
        while c <= 6.0 {
            let r = rmse(&vec![c; truths.len()], &truths).unwrap();
            assert!(best <= r + 1e-12, "constant {c} beat the mean");
            c += 0.05;
        }
    }

    #[test]
    fn bleu_identical_is_one() {
        let cand = vec![toks("the room was very clean")];
        assert!((bleu_n(&cand, &cand, 1) - 1.0).abs() < 1e-12);
        assert!((bleu_n(&cand, &cand, 4) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_disjoint_is_zero_up_to_epsilon() {
        let cand = vec![toks("aa bb cc dd")];
        let reference = vec![toks("ee ff gg hh")];
        assert!(bleu_n(&cand, &reference, 1) < 1e-6);
        assert!(bleu_n(&cand, &reference, 4) < 1e-6);
    }

    #[test]
    fn bleu1_brevity_penalty_hand_case() {
        // "the cat sat" vs "the cat sat down": p1 = 1, BP = exp(1 - 4/3).
        let cand = vec![toks("the cat sat")];
        let reference = vec![toks("the cat sat down")];
        let got = bleu_n(&cand, &reference, 1);
        let expect = (1.0f64 - 4.0 / 3.0).exp();
        assert!((expect - 0.7165313105737893).abs() < 1e-12);
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn bleu_clips_repeated_ngrams() {
        // Seven "the" against two in the reference: clipped precision 2/7.
        let cand = vec![toks("the the the the the the the")];
        let reference = vec![toks("the cat the mat")];
        let got = bleu_n(&cand, &reference, 1);
        assert!((got - 2.0 / 7.0).abs() < 1e-9);
    }

    #[test]
    fn rouge2_identical_and_disjoint() {
        let a = toks("good clean room here");
        assert_eq!(rouge_2(&a, &a), (1.0, 1.0, 1.0));
        let b = toks("terrible loud place");
        let (p, r, f) = rouge_2(&a, &b);
        assert_eq!((p, r, f), (0.0, 0.0, 0.0));
    }

    #[test]
    fn rouge_l_hand_case() {
        // "a b c d" vs "a c d": LCS = 3, P = 3/4, R = 1, F = 6/7.
        let (p, r, f) = rouge_l(&toks("a b c d"), &toks("a c d"));
        assert!((p - 0.75).abs() < 1e-12);
        assert!((r - 1.0).abs() < 1e-12);
        assert!((f - 6.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_degenerate_lengths_are_zero() {
        assert_eq!(rouge_2(&toks("one"), &toks("one two")), (0.0, 0.0, 0.0));
        assert_eq!(rouge_l(&[], &toks("one")), (0.0, 0.0, 0.0));
    }

    #[test]
    fn semantic_similarity_identical_is_one() {
        let enc = StubEncoder::new(16, 3);
        let s = semantic_similarity(
            &["great stay".into()],
            &["great stay".into()],
            &enc,
        )
        .unwrap();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn semantic_similarity_matches_independent_recomputation() {
        let enc = StubEncoder::new(16, 3);
        let got = semantic_similarity(
            &["good room".into(), "bad food".into()],
            &["nice room".into(), "awful food".into()],
            &enc,
        )
        .unwrap();
        let c1 = cosine(
            &enc.encode("good room").unwrap(),
            &enc.encode("nice room").unwrap(),
        );
        let c2 = cosine(
            &enc.encode("bad food").unwrap(),
            &enc.encode("awful food").unwrap(),
        );
        let expect = (f64::from(c1) + f64::from(c2)) / 2.0;
        assert!((got - expect).abs() < 1e-9);
    }

    fn self_inputs() -> EvalInputs {
        let texts = ["the room was very clean today", "the battery drains fast"];
        EvalInputs {
            pred_ratings: vec![4.0, 2.0],
            true_ratings: vec![4.0, 2.0],
            candidates: texts.iter().map(|t| toks(t)).collect(),
            references: texts.iter().map(|t| toks(t)).collect(),
            candidate_texts: texts.iter().map(|t| t.to_string()).collect(),
            reference_texts: texts.iter().map(|t| t.to_string()).collect(),
        }
    }

    #[test]
    fn self_evaluation_is_perfect() {
        let report = evaluate_run(&self_inputs(), false, None).unwrap();
        assert_eq!(report.rmse, 0.0);
        assert!((report.bleu1 - 1.0).abs() < 1e-9);
        assert!((report.bleu4 - 1.0).abs() < 1e-9);
        assert!((report.r2_f - 1.0).abs() < 1e-12);
        assert!((report.rl_f - 1.0).abs() < 1e-12);
        assert!(report.semantic.is_none());
        assert!(!report.has_nan());
    }

    #[test]
    fn report_kv_has_exactly_the_documented_keys() {
        let report = evaluate_run(&self_inputs(), false, None).unwrap();
        let kv = report.to_kv();
        let keys: Vec<&str> = kv.lines().map(|l| l.split('=').next().unwrap()).collect();
        assert_eq!(
            keys,
            vec!["rmse", "mae", "bleu1", "bleu4", "r2_p", "r2_r", "r2_f", "rl_p", "rl_r", "rl_f"]
        );
        let enc = StubEncoder::new(8, 1);
        let with_sem = evaluate_run(&self_inputs(), false, Some(&enc)).unwrap();
        assert!(with_sem.to_kv().contains("semantic="));
    }

    proptest! {
        #[test]
        fn text_metrics_stay_in_unit_interval(
            c in proptest::collection::vec("[a-d]{1,3}", 1..10),
            r in proptest::collection::vec("[a-d]{1,3}", 1..10),
        ) {
            let cand = vec![c.clone()];
            let refs = vec![r.clone()];
            for n in [1usize, 4] {
                let b = bleu_n(&cand, &refs, n);
                prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
            }
            for (p, rr, f) in [rouge_2(&c, &r), rouge_l(&c, &r)] {
                prop_assert!((0.0..=1.0).contains(&p));
                prop_assert!((0.0..=1.0).contains(&rr));
                prop_assert!((0.0..=1.0).contains(&f));
                // F is the harmonic mean of its own P and R.
                let expect = if p + rr == 0.0 { 0.0 } else { 2.0 * p * rr / (p + rr) };
                prop_assert!((f - expect).abs() < 1e-9);
            }
        }

        #[test]
        fn metrics_invariant_under_token_relabeling(
            c in proptest::collection::vec(0u8..6, 1..12),
            r in proptest::collection::vec(0u8..6, 1..12),
        ) {
            let name = |x: u8| format!("tok{x}");
            let relabel = |x: u8| format!("word{}", 5 - x);
            let c1: Vec<String> = c.iter().map(|&x| name(x)).collect();
            let r1: Vec<String> = r.iter().map(|&x| name(x)).collect();
            let c2: Vec<String> = c.iter().map(|&x| relabel(x)).collect();
            let r2: Vec<String> = r.iter().map(|&x| relabel(x)).collect();
            for n in [1usize, 4] {
                let a = bleu_n(&[c1.clone()], &[r1.clone()], n);
                let b = bleu_n(&[c2.clone()], &[r2.clone()], n);
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert_eq!(rouge_2(&c1, &r1), rouge_2(&c2, &r2));
            prop_assert_eq!(rouge_l(&c1, &r1), rouge_l(&c2, &r2));
        }

        #[test]
        fn rmse_dominates_mae(
            pairs in proptest::collection::vec((1.0f64..5.0, 1.0f64..5.0), 1..20)
        ) {
            let preds: Vec<f64> = pairs.iter().map(|(p, _)| *p).collect();
            let truths: Vec<f64> = pairs.iter().map(|(_, t)| *t).collect();
            let r = rmse(&preds, &truths).unwrap();
            let m = mae(&preds, &truths).unwrap();
            prop_assert!(r >= m - 1e-12);
        }
    }
}
