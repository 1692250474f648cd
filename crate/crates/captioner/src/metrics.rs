//! Corpus-level CIDEr-D and BLEU@4 over whitespace-tokenized captions.
//!
//! The word splitter is exactly [`crate::vocab::words`], so the reward seen
//! by SCST and the text seen by training agree on tokenization.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::vocab::words;

pub const MAX_NGRAM: usize = 4;
pub const CIDER_SIGMA: f64 = 6.0;

type Ngram = Vec<String>;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Ngram, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

fn tokenize(text: &str) -> Vec<String> {
    words(text).map(|w| w.to_string()).collect()
}

/// Per-sentence TF vectors for n = 1..=4 plus token length.
struct SentenceStats {
    counts: [HashMap<Ngram, usize>; MAX_NGRAM],
    len: usize,
}

impl SentenceStats {
    fn of(text: &str) -> SentenceStats {
        let tokens = tokenize(text);
        let counts = std::array::from_fn(|i| ngram_counts(&tokens, i + 1));
        SentenceStats {
            counts,
            len: tokens.len(),
        }
    }
}

/// IDF table for CIDEr-D. A document is one image's reference set; built once
/// and reused so SCST rewards are stationary across epochs.
#[derive(Debug, Clone)]
pub struct CiderIdf {
    doc_freq: HashMap<Ngram, f64>,
    log_num_images: f64,
}

impl CiderIdf {
    pub fn from_references<S: AsRef<str>>(references: &[Vec<S>]) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::Data("CIDEr IDF needs at least one image".into()));
        }
        let mut doc_freq: HashMap<Ngram, f64> = HashMap::new();
        for refs in references {
            let mut seen: HashMap<Ngram, ()> = HashMap::new();
            for r in refs {
                let tokens = tokenize(r.as_ref());
                for n in 1..=MAX_NGRAM {
                    for (ng, _) in ngram_counts(&tokens, n) {
                        seen.entry(ng).or_insert(());
                    }
                }
            }
            for (ng, _) in seen {
                *doc_freq.entry(ng).or_insert(0.0) += 1.0;
            }
        }
        Ok(CiderIdf {
            doc_freq,
            log_num_images: (references.len() as f64).ln(),
        })
    }

    fn idf(&self, ng: &Ngram) -> f64 {
        let df = self.doc_freq.get(ng).copied().unwrap_or(0.0).max(1.0);
        self.log_num_images - df.ln()
    }

    /// TF-IDF vector and its norm, per n.
    fn weigh(&self, s: &SentenceStats) -> ([HashMap<Ngram, f64>; MAX_NGRAM], [f64; MAX_NGRAM]) {
        let mut vecs: [HashMap<Ngram, f64>; MAX_NGRAM] = Default::default();
        let mut norms = [0.0; MAX_NGRAM];
        for n in 0..MAX_NGRAM {
            for (ng, &tf) in &s.counts[n] {
                let w = tf as f64 * self.idf(ng);
                norms[n] += w * w;
                vecs[n].insert(ng.clone(), w);
            }
            norms[n] = norms[n].sqrt();
        }
        (vecs, norms)
    }

    /// CIDEr-D score of one candidate against one image's references,
    /// in `[0, 10]`.
    pub fn score<S: AsRef<str>>(&self, candidate: &str, refs: &[S]) -> f64 {
        let cand = SentenceStats::of(candidate);
        let (cv, cn) = self.weigh(&cand);
        let mut acc = [0.0; MAX_NGRAM];
        for r in refs {
            let rs = SentenceStats::of(r.as_ref());
            let (rv, rn) = self.weigh(&rs);
            let delta = cand.len as f64 - rs.len as f64;
            let penalty = (-delta * delta / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            for n in 0..MAX_NGRAM {
                let mut dot = 0.0;
                for (ng, &hw) in &cv[n] {
                    if let Some(&rw) = rv[n].get(ng) {
                        // count clipping: candidate weight clipped to the reference's
                        dot += hw.min(rw) * rw;
                    }
                }
                if cn[n] > 0.0 && rn[n] > 0.0 {
                    acc[n] += dot / (cn[n] * rn[n]) * penalty;
                }
            }
        }
        let per_n_mean: f64 = acc.iter().map(|v| v / refs.len() as f64).sum::<f64>() / MAX_NGRAM as f64;
        10.0 * per_n_mean
    }
}

/// Corpus CIDEr-D with IDF computed from the provided references.
/// `ids` label images in error messages.
pub fn cider_d<S: AsRef<str>>(
    ids: &[String],
    candidates: &[String],
    references: &[Vec<S>],
) -> Result<(f64, Vec<f64>)> {
    if ids.len() != candidates.len() || ids.len() != references.len() {
        return Err(Error::Data(format!(
            "cider_d: {} ids, {} candidates, {} reference sets",
            ids.len(),
            candidates.len(),
            references.len()
        )));
    }
    for (id, refs) in ids.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::Data(format!("image {id} has zero references")));
        }
    }
    let idf = CiderIdf::from_references(references)?;
    let per_sample: Vec<f64> = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| idf.score(c, r))
        .collect();
    let corpus = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok((corpus, per_sample))
}

/// Corpus BLEU@4: clipped n-gram precision pooled over the corpus, geometric
/// mean over n = 1..4, brevity penalty from per-image closest-reference
/// lengths. No smoothing — any n with zero matches scores 0.
pub fn bleu4<S: AsRef<str>>(
    ids: &[String],
    candidates: &[String],
    references: &[Vec<S>],
) -> Result<f64> {
    if ids.len() != candidates.len() || ids.len() != references.len() {
        return Err(Error::Data(format!(
            "bleu4: {} ids, {} candidates, {} reference sets",
            ids.len(),
            candidates.len(),
            references.len()
        )));
    }
    let mut matched = [0usize; MAX_NGRAM];
    let mut total = [0usize; MAX_NGRAM];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (id, (cand, refs)) in ids.iter().zip(candidates.iter().zip(references)) {
        if refs.is_empty() {
            return Err(Error::Data(format!("image {id} has zero references")));
        }
        let ctok = tokenize(cand);
        let rtoks: Vec<Vec<String>> = refs.iter().map(|r| tokenize(r.as_ref())).collect();
        cand_len += ctok.len();
        // closest reference length; ties broken toward the shorter
        let closest = rtoks
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(ctok.len()), l))
            .unwrap();
        ref_len += closest;
        for n in 1..=MAX_NGRAM {
            let cc = ngram_counts(&ctok, n);
            let mut max_ref: HashMap<&Ngram, usize> = HashMap::new();
            let rcs: Vec<HashMap<Ngram, usize>> =
                rtoks.iter().map(|r| ngram_counts(r, n)).collect();
            for rc in &rcs {
                for (ng, &c) in rc {
                    let e = max_ref.entry(ng).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (ng, &c) in &cc {
                total[n - 1] += c;
                matched[n - 1] += c.min(max_ref.get(ng).copied().unwrap_or(0));
            }
        }
    }
    if cand_len == 0 || matched.iter().any(|&m| m == 0) || total.iter().any(|&t| t == 0) {
        return Ok(0.0);
    }
    let log_prec: f64 = (0..MAX_NGRAM)
        .map(|n| (matched[n] as f64 / total[n] as f64).ln())
        .sum::<f64>()
        / MAX_NGRAM as f64;
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * log_prec.exp())
}

/// Corpus-level metric report with per-sample CIDEr-D breakdown.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub cider_d: f64,
    pub bleu4: f64,
    pub per_sample_cider: Vec<f64>,
}

pub fn evaluate<S: AsRef<str>>(
    ids: &[String],
    candidates: &[String],
    references: &[Vec<S>],
) -> Result<MetricReport> {
    let (corpus_cider, per_sample_cider) = cider_d(ids, candidates, references)?;
    let bleu = bleu4(ids, candidates, references)?;
    Ok(MetricReport {
        cider_d: corpus_cider,
        bleu4: bleu,
        per_sample_cider,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("img-{i}")).collect()
    }

    #[test]
    fn self_match_scores_ten_and_one() {
        let candidates = vec![
            "a big red circle".to_string(),
            "a small blue square above a big green triangle".to_string(),
        ];
        let references: Vec<Vec<String>> = candidates.iter().map(|c| vec![c.clone()]).collect();
        let report = evaluate(&ids(2), &candidates, &references).unwrap();
        assert!((report.cider_d - 10.0).abs() < 1e-9, "{}", report.cider_d);
        assert!((report.bleu4 - 1.0).abs() < 1e-12);
        for s in &report.per_sample_cider {
            assert!((s - 10.0).abs() < 1e-9);
        }
    }

    #[test]
    fn disjoint_unigrams_score_zero() {
        let candidates = vec!["x y z w v".to_string(), "a big red circle".to_string()];
        let references = vec![
            vec!["a small blue square".to_string()],
            vec!["a big red circle".to_string()],
        ];
        let (_, per_sample) = cider_d(&ids(2), &candidates, &references).unwrap();
        assert_eq!(per_sample[0], 0.0);
    }

    #[test]
    fn zero_references_error_names_the_image() {
        let err = cider_d(
            &ids(1),
            &["a".to_string()],
            &[Vec::<String>::new()],
        )
        .unwrap_err();
        assert!(err.to_string().contains("img-0"), "{err}");
    }

    #[test]
    fn brevity_penalty_applies_to_short_candidates() {
        // candidate is a 4-token prefix of the only 6-token reference:
        // perfect clipped precisions, so score = BP * 1
        let candidates = vec!["a b c d".to_string(), "p q r s t u".to_string()];
        let references = vec![
            vec!["a b c d e f".to_string()],
            vec!["p q r s t u".to_string()],
        ];
        let got = bleu4(&ids(2), &candidates, &references).unwrap();
        let (c, r) = (10.0f64, 12.0f64);
        let expected = (1.0 - r / c).exp();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn corpus_scores_are_order_invariant() {
        let candidates = vec![
            "a big red circle".to_string(),
            "a small blue square".to_string(),
            "there is a green triangle".to_string(),
        ];
        let references = vec![
            vec!["a big red circle".to_string(), "there is a big red circle".to_string()],
            vec!["a small blue square".to_string(), "a blue square".to_string()],
            vec!["a small green triangle".to_string(), "there is a green triangle".to_string()],
        ];
        let fwd = evaluate(&ids(3), &candidates, &references).unwrap();
        let perm = [2usize, 0, 1];
        let c2: Vec<String> = perm.iter().map(|&i| candidates[i].clone()).collect();
        let r2: Vec<Vec<String>> = perm.iter().map(|&i| references[i].clone()).collect();
        let rev = evaluate(&ids(3), &c2, &r2).unwrap();
        assert!((fwd.cider_d - rev.cider_d).abs() < 1e-12);
        assert!((fwd.bleu4 - rev.bleu4).abs() < 1e-12);
    }

    #[test]
    fn duplicate_reference_never_hurts_matching_candidate() {
        let candidates = vec!["a big red circle".to_string(), "a small blue square".to_string()];
        let references = vec![
            vec!["a big red circle".to_string(), "a green triangle".to_string()],
            vec!["a small blue square".to_string()],
        ];
        let (_, base) = cider_d(&ids(2), &candidates, &references).unwrap();
        let mut dup = references.clone();
        dup[0].push("a big red circle".to_string());
        let (_, with_dup) = cider_d(&ids(2), &candidates, &dup).unwrap();
        assert!(with_dup[0] >= base[0] - 1e-12);
    }

    #[test]
    fn per_sample_scores_bounded_and_mean_matches_corpus() {
        let candidates = vec![
            "a big red circle".to_string(),
            "a blue square left of a red circle".to_string(),
            "".to_string(),
        ];
        let references = vec![
            vec!["a big red circle".to_string(), "there is a big red circle".to_string()],
            vec!["a small blue square left of a big red circle".to_string(), "a blue square".to_string()],
            vec!["a green triangle".to_string(), "a small green triangle".to_string()],
        ];
        let report = evaluate(&ids(3), &candidates, &references).unwrap();
        for &s in &report.per_sample_cider {
            assert!((0.0..=10.0).contains(&s));
        }
        let mean = report.per_sample_cider.iter().sum::<f64>() / 3.0;
        assert!((mean - report.cider_d).abs() < 1e-9);
    }
}
