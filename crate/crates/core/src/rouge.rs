//! ROUGE-1/2/L precision, recall and F1 over tokens, lowercased before scoring.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linker::tokenize;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub fn from_counts(overlap: usize, candidate_total: usize, reference_total: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(overlap, candidate_total);
        let recall = ratio(overlap, reference_total);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        RougeScore {
            precision,
            recall,
            f1,
        }
    }
}

fn lower<T: AsRef<str>>(tokens: &[T]) -> Vec<String> {
    tokens.iter().map(|t| t.as_ref().to_lowercase()).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap.
pub fn rouge_n<T: AsRef<str>>(candidate: &[T], reference: &[T], n: usize) -> RougeScore {
    assert!(n >= 1, "ROUGE-n needs n >= 1");
    let (cand, refr) = (lower(candidate), lower(reference));
    let cand_counts = ngram_counts(&cand, n);
    let ref_counts = ngram_counts(&refr, n);
    let overlap = cand_counts
        .iter()
        .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
        .sum();
    let total = |len: usize| (len + 1).saturating_sub(n);
    RougeScore::from_counts(overlap, total(cand.len()), total(refr.len()))
}

/// Longest common subsequence length, O(|a|·|b|) time and O(|b|) space.
pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
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

/// Sentence-level ROUGE-L with the balanced F-measure.
pub fn rouge_l<T: AsRef<str>>(candidate: &[T], reference: &[T]) -> RougeScore {
    let (cand, refr) = (lower(candidate), lower(reference));
    RougeScore::from_counts(lcs_length(&cand, &refr), cand.len(), refr.len())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RougeTriple {
    pub r1: RougeScore,
    pub r2: RougeScore,
    pub rl: RougeScore,
}

pub fn score_all<T: AsRef<str>>(candidate: &[T], reference: &[T]) -> RougeTriple {
    RougeTriple {
        r1: rouge_n(candidate, reference, 1),
        r2: rouge_n(candidate, reference, 2),
        rl: rouge_l(candidate, reference),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringPair {
    pub candidate: String,
    pub reference: String,
}

/// JSON lines with string fields `candidate` and `reference`.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<ScoringPair>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::parse(origin, n + 1, e.to_string()))?);
    }
    Ok(out)
}

pub fn load_pairs(path: &Path) -> Result<Vec<ScoringPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(&text, &path.display().to_string())
}

pub fn score_pair(p: &ScoringPair) -> RougeTriple {
    score_all(&tokenize(&p.candidate), &tokenize(&p.reference))
}

/// `id,r1_f,r2_f,rl_f` per pair (ids from 0) and a closing `mean` row.
pub fn scores_csv(scores: &[RougeTriple]) -> String {
    let mut s = String::from("id,r1_f,r2_f,rl_f\n");
    let mut sums = [0.0; 3];
    for (i, t) in scores.iter().enumerate() {
        let f = [t.r1.f1, t.r2.f1, t.rl.f1];
        let _ = writeln!(s, "{i},{:.6},{:.6},{:.6}", f[0], f[1], f[2]);
        for (a, b) in sums.iter_mut().zip(f) {
            *a += b;
        }
    }
    let n = scores.len().max(1) as f64;
    let _ = writeln!(s, "mean,{:.6},{:.6},{:.6}", sums[0] / n, sums[1] / n, sums[2] / n);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn batch_csv() {
        let pairs = parse_pairs(
            "{\"candidate\":\"the cat\",\"reference\":\"the dog\"}\n{\"candidate\":\"a b\",\"reference\":\"a b\"}\n",
            "p",
        )
        .unwrap();
        let scores: Vec<_> = pairs.iter().map(score_pair).collect();
        assert_eq!(
            scores_csv(&scores),
            "id,r1_f,r2_f,rl_f\n0,0.500000,0.000000,0.500000\n1,1.000000,1.000000,1.000000\nmean,0.750000,0.500000,0.750000\n"
        );
        assert!(matches!(parse_pairs("{\"candidate\":\"x\"}", "p"), Err(Error::Parse { line: 1, .. })));
    }

    fn t(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn rouge_n_examples() {
        let x = t("the cat sat on the mat");
        for n in [1, 2] {
            let s = rouge_n(&x, &x, n);
            assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        }
        let s = rouge_n(&t("the cat"), &t("the dog"), 1);
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
        let s = rouge_n(&t("cat"), &t("the cat"), 2);
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn case_is_ignored() {
        assert_eq!(rouge_n(&t("The Cat"), &t("the cat"), 2).f1, 1.0);
    }

    #[test]
    fn lcs_examples() {
        let x = t("a b c d");
        assert_eq!(lcs_length(&x, &x), 4);
        assert_eq!(lcs_length(&x, &[]), 0);
        assert_eq!(lcs_length(&t("a b c d"), &t("a c b d")), 3);
    }

    #[test]
    fn rouge_l_examples() {
        let x = t("a b c d");
        assert_eq!(rouge_l(&x, &x).f1, 1.0);
        let s = rouge_l(&t("a b c d"), &t("a c b d"));
        assert_eq!((s.precision, s.recall, s.f1), (0.75, 0.75, 0.75));
        assert_eq!(rouge_l(&t("a b"), &t("c d")).f1, 0.0);
    }

    fn seq() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec((0u8..10).prop_map(|i| format!("w{i}")), 0..30)
    }

    proptest! {
        #[test]
        fn swap_exchanges_precision_and_recall(a in seq(), b in seq()) {
            for (x, y) in [
                (rouge_n(&a, &b, 1), rouge_n(&b, &a, 1)),
                (rouge_n(&a, &b, 2), rouge_n(&b, &a, 2)),
                (rouge_l(&a, &b), rouge_l(&b, &a)),
            ] {
                prop_assert_eq!(x.precision, y.recall);
                prop_assert_eq!(x.recall, y.precision);
                prop_assert_eq!(x.f1, y.f1);
                for v in [x.precision, x.recall, x.f1] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }

        #[test]
        fn rouge1_recall_ignores_candidate_order(a in seq(), b in seq(), seed in 0u64..1000) {
            let mut shuffled = a.clone();
            crate::rng::Rng::new(seed).shuffle(&mut shuffled);
            prop_assert_eq!(rouge_n(&a, &b, 1).recall, rouge_n(&shuffled, &b, 1).recall);
        }
    }
}
