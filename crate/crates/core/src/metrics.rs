//! Evaluation: corpus BLEU, the rule-based style classifier, and the
//! combined transfer report.
//!
//! BLEU is 4-gram, case-insensitive, with multi-reference clipping,
//! closest-reference-length brevity penalty, and add-one smoothing
//! applied only to n-gram orders whose match count is zero; orders with
//! no candidate n-grams at all are dropped from the geometric mean.

use std::collections::{HashMap, HashSet};

use serde::Serialize;

use crate::corpus::{Corpus, StyleLexicon};
use crate::decoder::{transfer, DecodeFlags, ScoringModel};
use crate::error::{Result, RlmError};
use crate::vocab::StyleId;

fn lower(tokens: &[String]) -> Vec<String> {
    tokens.iter().map(|t| t.to_lowercase()).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

struct BleuAccum {
    matches: [usize; 4],
    totals: [usize; 4],
    hyp_len: usize,
    ref_len: usize,
}

impl BleuAccum {
    fn new() -> Self {
        BleuAccum {
            matches: [0; 4],
            totals: [0; 4],
            hyp_len: 0,
            ref_len: 0,
        }
    }

    fn add(&mut self, hyp: &[String], refs: &[Vec<String>]) {
        assert!(!refs.is_empty(), "BLEU needs at least one reference");
        let hyp = lower(hyp);
        let refs: Vec<Vec<String>> = refs.iter().map(|r| lower(r)).collect();
        for n in 1..=4 {
            let hc = ngram_counts(&hyp, n);
            let rcs: Vec<HashMap<&[String], usize>> =
                refs.iter().map(|r| ngram_counts(r, n)).collect();
            for (gram, &count) in &hc {
                let clip = rcs
                    .iter()
                    .map(|rc| rc.get(gram).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                self.matches[n - 1] += count.min(clip);
            }
            self.totals[n - 1] += hyp.len().saturating_sub(n - 1);
        }
        self.hyp_len += hyp.len();
        // closest reference length; ties toward the shorter reference
        let closest = refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .unwrap();
        self.ref_len += closest;
    }

    fn score(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut orders = 0usize;
        for n in 0..4 {
            if self.totals[n] == 0 {
                continue; // no candidate n-grams of this order anywhere
            }
            let (m, t) = if self.matches[n] == 0 {
                (self.matches[n] + 1, self.totals[n] + 1)
            } else {
                (self.matches[n], self.totals[n])
            };
            log_sum += (m as f64 / t as f64).ln();
            orders += 1;
        }
        if orders == 0 {
            return 0.0;
        }
        let precision = (log_sum / orders as f64).exp();
        let bp = if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        100.0 * bp * precision
    }
}

/// Corpus-level BLEU, in percent. `refs[i]` holds the reference set of
/// `hyps[i]`.
pub fn corpus_bleu(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(RlmError::ShapeMismatch(format!(
            "{} hypotheses vs {} reference sets",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(RlmError::EmptySequence("BLEU corpus".into()));
    }
    let mut acc = BleuAccum::new();
    for (h, r) in hyps.iter().zip(refs) {
        acc.add(h, r);
    }
    Ok(acc.score())
}

pub fn sentence_bleu(hyp: &[String], refs: &[Vec<String>]) -> f64 {
    let mut acc = BleuAccum::new();
    acc.add(hyp, refs);
    acc.score()
}

// ---------------------------------------------------------------------------
// Style classification.
// ---------------------------------------------------------------------------

/// Marker-count classifier over the construction-known style lexicons.
/// A sentence is assigned the style whose markers it contains most often;
/// no markers or a tie yields no decision.
pub struct RuleClassifier {
    styles: Vec<String>,
    markers: Vec<HashSet<String>>,
}

impl RuleClassifier {
    pub fn new(lexicons: &[StyleLexicon]) -> Self {
        RuleClassifier {
            styles: lexicons.iter().map(|l| l.style.clone()).collect(),
            markers: lexicons
                .iter()
                .map(|l| l.markers.iter().map(|m| m.to_lowercase()).collect())
                .collect(),
        }
    }

    pub fn classify(&self, tokens: &[String]) -> Option<StyleId> {
        let tokens = lower(tokens);
        let counts: Vec<usize> = self
            .markers
            .iter()
            .map(|set| tokens.iter().filter(|t| set.contains(*t)).count())
            .collect();
        let best = *counts.iter().max()?;
        if best == 0 {
            return None;
        }
        let winners: Vec<StyleId> = (0..counts.len()).filter(|&i| counts[i] == best).collect();
        if winners.len() == 1 {
            Some(winners[0])
        } else {
            None
        }
    }

    pub fn style_name(&self, id: StyleId) -> &str {
        &self.styles[id]
    }
}

/// Geometric mean of the (percent-scale) metrics; zero if any input is
/// non-positive.
pub fn geometric_mean(values: &[f64]) -> f64 {
    if values.is_empty() || values.iter().any(|&v| v <= 0.0) {
        return 0.0;
    }
    let log_sum: f64 = values.iter().map(|v| v.ln()).sum();
    (log_sum / values.len() as f64).exp()
}

// ---------------------------------------------------------------------------
// Full evaluation over the parallel split.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub source: Vec<String>,
    pub output: Vec<String>,
    pub source_style: String,
    pub target_style: String,
    pub classified_ok: bool,
    pub r_bleu: f64,
    pub s_bleu: f64,
    pub log_score: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    /// Fraction (percent) of outputs the rule classifier assigns to the
    /// target style.
    pub acc: f64,
    /// Corpus BLEU against the gold rewrites.
    pub r_bleu: f64,
    /// Corpus BLEU against the source sentence.
    pub s_bleu: f64,
    /// Geometric mean of the three.
    pub gm: f64,
    pub n: usize,
    pub rows: Vec<EvalRow>,
}

/// Transfer every eval pair into every other style and score the result.
pub fn evaluate_run(
    model: &impl ScoringModel,
    corpus: &Corpus,
    flags: &DecodeFlags,
) -> Result<EvalReport> {
    if corpus.eval.is_empty() {
        return Err(RlmError::EmptySequence("eval split".into()));
    }
    let classifier = RuleClassifier::new(&corpus.lexicons);
    let mut rows = Vec::new();
    let mut hits = 0usize;
    let mut hyps = Vec::new();
    let mut gold_refs = Vec::new();
    let mut self_refs = Vec::new();
    for pair in &corpus.eval {
        for (&target, refs) in &pair.refs {
            let out = transfer(model, &pair.ids, target, flags)?;
            let out_tokens = corpus.vocab.decode(&out.y);
            let src_tokens = corpus.vocab.decode(&pair.ids);
            let refs_tokens: Vec<Vec<String>> =
                refs.iter().map(|r| corpus.vocab.decode(r)).collect();
            let ok = classifier.classify(&out_tokens) == Some(target);
            if ok {
                hits += 1;
            }
            rows.push(EvalRow {
                source: src_tokens.clone(),
                output: out_tokens.clone(),
                source_style: corpus.style_names[pair.style].clone(),
                target_style: corpus.style_names[target].clone(),
                classified_ok: ok,
                r_bleu: sentence_bleu(&out_tokens, &refs_tokens),
                s_bleu: sentence_bleu(&out_tokens, std::slice::from_ref(&src_tokens)),
                log_score: out.log_score,
            });
            hyps.push(out_tokens);
            gold_refs.push(refs_tokens);
            self_refs.push(vec![src_tokens]);
        }
    }
    let n = rows.len();
    let acc = 100.0 * hits as f64 / n as f64;
    let r_bleu = corpus_bleu(&hyps, &gold_refs)?;
    let s_bleu = corpus_bleu(&hyps, &self_refs)?;
    let gm = geometric_mean(&[acc, r_bleu, s_bleu]);
    Ok(EvalReport {
        acc,
        r_bleu,
        s_bleu,
        gm,
        n,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn identical_sentences_score_100() {
        let h = toks("the food was great .");
        let b = corpus_bleu(&[h.clone()], &[vec![h]]).unwrap();
        assert!((b - 100.0).abs() < 1e-9);
    }

    #[test]
    fn hand_computed_three_gram_case() {
        // "the cat sat" vs "the cat ran": p1 = 2/3, p2 = 1/2,
        // p3 smoothed to 1/2, no 4-grams, BP = 1
        // -> 100 * (2/3 * 1/2 * 1/2)^(1/3) = 55.032...
        let b = corpus_bleu(&[toks("the cat sat")], &[vec![toks("the cat ran")]]).unwrap();
        let expect = 100.0 * (2.0 / 3.0 * 0.5 * 0.5f64).powf(1.0 / 3.0);
        assert!((b - expect).abs() < 1e-9, "{b} vs {expect}");
        assert!((b - 55.0321208149).abs() < 1e-6);
    }

    #[test]
    fn multi_reference_clipping_takes_the_best_match() {
        let hyp = toks("the food was bad .");
        let far = toks("the movie is great .");
        let near = toks("the food was bad .");
        let one = corpus_bleu(&[hyp.clone()], &[vec![far.clone()]]).unwrap();
        let multi = corpus_bleu(&[hyp], &[vec![far, near]]).unwrap();
        assert!(multi > one);
        assert!((multi - 100.0).abs() < 1e-9);
    }

    #[test]
    fn bleu_is_case_insensitive() {
        let a = corpus_bleu(&[toks("The Food WAS great .")], &[vec![toks("the food was great .")]])
            .unwrap();
        assert!((a - 100.0).abs() < 1e-9);
    }

    #[test]
    fn brevity_penalty_uses_closest_reference_length() {
        // hypothesis of 4 tokens; refs of lengths 4 and 8 -> closest is
        // 4, so no penalty applies even though the mean ref is longer
        let hyp = toks("a b c d");
        let r4 = toks("a b c d");
        let r8 = toks("a b c d e f g h");
        let b = corpus_bleu(&[hyp.clone()], &[vec![r8.clone(), r4]]).unwrap();
        assert!((b - 100.0).abs() < 1e-9);
        // only the long reference: BP = exp(1 - 8/4)
        let b = corpus_bleu(&[hyp], &[vec![r8]]).unwrap();
        let expect = 100.0
            * (1.0f64 - 2.0).exp()
            * ((4.0f64 / 4.0) * (3.0 / 3.0) * (2.0 / 2.0) * (1.0 / 1.0)).powf(0.25);
        assert!((b - expect).abs() < 1e-9);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(corpus_bleu(&[], &[]).is_err());
        assert!(corpus_bleu(&[toks("a")], &[]).is_err());
    }

    fn lexicons() -> Vec<StyleLexicon> {
        vec![
            StyleLexicon {
                style: "pos".into(),
                markers: vec!["great".into(), "tasty".into()],
                intensifiers: vec!["really".into()],
            },
            StyleLexicon {
                style: "neg".into(),
                markers: vec!["bad".into(), "bland".into()],
                intensifiers: vec!["really".into()],
            },
        ]
    }

    #[test]
    fn classifier_counts_markers() {
        let c = RuleClassifier::new(&lexicons());
        assert_eq!(c.classify(&toks("the food was great .")), Some(0));
        assert_eq!(c.classify(&toks("the Food was BLAND .")), Some(1));
        // majority wins
        assert_eq!(c.classify(&toks("great but bad and bland")), Some(1));
        // no markers / tie -> no decision
        assert_eq!(c.classify(&toks("the food was ok .")), None);
        assert_eq!(c.classify(&toks("great and bad")), None);
    }

    #[test]
    fn geometric_mean_matches_hand_values() {
        assert!((geometric_mean(&[91.0, 30.6, 51.7]) - 52.4).abs() < 0.1);
        assert_eq!(geometric_mean(&[50.0, 0.0, 70.0]), 0.0);
        assert_eq!(geometric_mean(&[]), 0.0);
        assert!((geometric_mean(&[8.0]) - 8.0).abs() < 1e-12);
        assert!((geometric_mean(&[2.0, 32.0]) - 8.0).abs() < 1e-12);
    }
}
