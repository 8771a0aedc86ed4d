//! Generation metrics that double as RL rewards: CIDEr-D, BLEU-4, ROUGE-L.
//!
//! All metrics strip PAD and EOS before scoring, never mutate their inputs,
//! and are deterministic. CIDEr-D follows the standard definition (clipped
//! tf-idf cosine per n-gram order, Gaussian length penalty with sigma = 6,
//! scaled by 10) with one refinement: orders longer than the reference
//! sentence are left out of the average, so a sentence scored against itself
//! is exactly 10 regardless of its length.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datasets::{Corpus, EOS, PAD};
use crate::{HsrlError, Result};

pub const MAX_NGRAM: usize = 4;
const CIDER_SIGMA: f64 = 6.0;

/// Drop PAD and EOS; metric values are invariant to this preprocessing.
pub fn strip_reserved(tokens: &[u32]) -> Vec<u32> {
    tokens
        .iter()
        .copied()
        .filter(|&t| t != PAD && t != EOS)
        .collect()
}

fn ngram_counts(tokens: &[u32], n: usize) -> BTreeMap<Vec<u32>, u32> {
    let mut counts = BTreeMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Document frequencies of n-grams (orders 1..=4) over a reference corpus,
/// one document per reference sentence.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DocFreqTable {
    doc_count: usize,
    df: BTreeMap<Vec<u32>, u32>,
}

impl DocFreqTable {
    pub fn from_documents<I>(documents: I) -> Self
    where
        I: IntoIterator,
        I::Item: AsRef<[u32]>,
    {
        let mut table = DocFreqTable::default();
        for doc in documents {
            let tokens = strip_reserved(doc.as_ref());
            table.doc_count += 1;
            for n in 1..=MAX_NGRAM {
                for ngram in ngram_counts(&tokens, n).into_keys() {
                    *table.df.entry(ngram).or_insert(0) += 1;
                }
            }
        }
        table
    }

    /// One document per reference sentence of the corpus.
    pub fn from_corpus(corpus: &Corpus) -> Self {
        Self::from_documents(corpus.records.iter().flat_map(|r| r.sentences.iter()))
    }

    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    pub fn df(&self, ngram: &[u32]) -> u32 {
        self.df.get(ngram).copied().unwrap_or(0)
    }

    fn idf(&self, ngram: &[u32]) -> f64 {
        (self.doc_count as f64).ln() - (self.df(ngram).max(1) as f64).ln()
    }
}

// tf-idf vector of one sentence at one n-gram order, with its L2 norm.
fn tfidf_vec(tokens: &[u32], n: usize, df: &DocFreqTable) -> (BTreeMap<Vec<u32>, f64>, f64) {
    let mut vec = BTreeMap::new();
    let mut sq = 0.0;
    for (ngram, count) in ngram_counts(tokens, n) {
        let w = count as f64 * df.idf(&ngram);
        sq += w * w;
        vec.insert(ngram, w);
    }
    (vec, sq.sqrt())
}

/// CIDEr-D of a candidate against one or more references.
pub fn cider_d(candidate: &[u32], references: &[Vec<u32>], df: &DocFreqTable) -> Result<f64> {
    if references.is_empty() {
        return Err(HsrlError::Config("cider_d needs at least one reference".into()));
    }
    let cand = strip_reserved(candidate);
    if cand.is_empty() {
        return Ok(0.0);
    }
    let cand_vecs: Vec<_> = (1..=MAX_NGRAM).map(|n| tfidf_vec(&cand, n, df)).collect();

    let mut total = 0.0;
    for reference in references {
        let reft = strip_reserved(reference);
        let effective_orders = MAX_NGRAM.min(reft.len());
        if effective_orders == 0 {
            continue;
        }
        let delta = cand.len() as f64 - reft.len() as f64;
        let penalty = (-delta * delta / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        let mut per_ref = 0.0;
        for n in 1..=effective_orders {
            let (cv, cn) = &cand_vecs[n - 1];
            let (rv, rn) = tfidf_vec(&reft, n, df);
            if *cn == 0.0 || rn == 0.0 {
                continue;
            }
            let mut sim = 0.0;
            for (ngram, cw) in cv {
                if let Some(rw) = rv.get(ngram) {
                    sim += cw.min(*rw) * rw;
                }
            }
            per_ref += sim / (cn * rn) * penalty;
        }
        total += per_ref / effective_orders as f64;
    }
    Ok(10.0 * total / references.len() as f64)
}

/// Corpus-level BLEU-4: clipped n-gram precisions pooled over all pairs,
/// geometric mean, brevity penalty from closest reference lengths.
pub fn bleu4(candidates: &[Vec<u32>], references: &[Vec<Vec<u32>>]) -> Result<f64> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(HsrlError::Config(format!(
            "bleu4 needs aligned non-empty lists, got {} candidates and {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    let mut clipped = [0u64; MAX_NGRAM];
    let mut totals = [0u64; MAX_NGRAM];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;

    for (candidate, refs) in candidates.iter().zip(references) {
        let cand = strip_reserved(candidate);
        let stripped_refs: Vec<Vec<u32>> = refs.iter().map(|r| strip_reserved(r)).collect();
        cand_len += cand.len();
        ref_len += closest_ref_len(cand.len(), &stripped_refs);
        for n in 1..=MAX_NGRAM {
            let (c, t) = clipped_matches(&cand, &stripped_refs, n);
            clipped[n - 1] += c;
            totals[n - 1] += t;
        }
    }

    let mut log_sum = 0.0;
    for n in 0..MAX_NGRAM {
        if totals[n] == 0 || clipped[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (clipped[n] as f64 / totals[n] as f64).ln();
    }
    let precision_mean = (log_sum / MAX_NGRAM as f64).exp();
    Ok(brevity_penalty(cand_len, ref_len) * precision_mean)
}

/// Sentence BLEU-4 with +1 smoothing on the numerator and denominator of
/// every precision. Diagnostics only; rewards use CIDEr-D.
pub fn sentence_bleu4(candidate: &[u32], references: &[Vec<u32>]) -> f64 {
    let cand = strip_reserved(candidate);
    if cand.is_empty() || references.is_empty() {
        return 0.0;
    }
    let stripped_refs: Vec<Vec<u32>> = references.iter().map(|r| strip_reserved(r)).collect();
    let mut log_sum = 0.0;
    for n in 1..=MAX_NGRAM {
        let (c, t) = clipped_matches(&cand, &stripped_refs, n);
        log_sum += ((c + 1) as f64 / (t + 1) as f64).ln();
    }
    let precision_mean = (log_sum / MAX_NGRAM as f64).exp();
    brevity_penalty(cand.len(), closest_ref_len(cand.len(), &stripped_refs)) * precision_mean
}

fn clipped_matches(cand: &[u32], refs: &[Vec<u32>], n: usize) -> (u64, u64) {
    let cand_counts = ngram_counts(cand, n);
    let total: u64 = cand_counts.values().map(|&c| c as u64).sum();
    let mut max_ref: BTreeMap<&[u32], u32> = BTreeMap::new();
    for r in refs {
        for (ngram, count) in ngram_counts(r, n) {
            let key = cand_counts.get_key_value(&ngram).map(|(k, _)| k.as_slice());
            if let Some(key) = key {
                let slot = max_ref.entry(key).or_insert(0);
                *slot = (*slot).max(count);
            }
        }
    }
    let clipped: u64 = cand_counts
        .iter()
        .map(|(ngram, &c)| c.min(max_ref.get(ngram.as_slice()).copied().unwrap_or(0)) as u64)
        .sum();
    (clipped, total)
}

fn closest_ref_len(cand_len: usize, refs: &[Vec<u32>]) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&len| {
            let diff = (len as i64 - cand_len as i64).abs();
            (diff, len)
        })
        .unwrap_or(0)
}

fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        return 0.0;
    }
    if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    }
}

fn lcs_len(a: &[u32], b: &[u32]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
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

const ROUGE_BETA: f64 = 1.2;

/// LCS F-measure with beta = 1.2.
pub fn rouge_l(candidate: &[u32], reference: &[u32]) -> Result<f64> {
    let reft = strip_reserved(reference);
    if reft.is_empty() {
        return Err(HsrlError::Config("rouge_l needs a non-empty reference".into()));
    }
    let cand = strip_reserved(candidate);
    if cand.is_empty() {
        return Ok(0.0);
    }
    let lcs = lcs_len(&cand, &reft) as f64;
    let p = lcs / cand.len() as f64;
    let r = lcs / reft.len() as f64;
    if p == 0.0 || r == 0.0 {
        return Ok(0.0);
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    Ok((1.0 + b2) * p * r / (r + b2 * p))
}

/// Multi-reference ROUGE-L: F-measure from the maximum precision and recall
/// over the references.
pub fn rouge_l_multi(candidate: &[u32], references: &[Vec<u32>]) -> Result<f64> {
    if references.is_empty() {
        return Err(HsrlError::Config("rouge_l needs at least one reference".into()));
    }
    let cand = strip_reserved(candidate);
    if cand.is_empty() {
        return Ok(0.0);
    }
    let mut p_max = 0.0f64;
    let mut r_max = 0.0f64;
    for reference in references {
        let reft = strip_reserved(reference);
        if reft.is_empty() {
            return Err(HsrlError::Config("rouge_l needs a non-empty reference".into()));
        }
        let lcs = lcs_len(&cand, &reft) as f64;
        p_max = p_max.max(lcs / cand.len() as f64);
        r_max = r_max.max(lcs / reft.len() as f64);
    }
    if p_max == 0.0 || r_max == 0.0 {
        return Ok(0.0);
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    Ok((1.0 + b2) * p_max * r_max / (r_max + b2 * p_max))
}

/// Per-sentence rewards and story-level metrics for one generated story.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RewardReport {
    /// CIDEr-D of sentence l against golden sentence l.
    pub rewards: Vec<f64>,
    pub bleu4: f64,
    pub rouge_l: f64,
    /// CIDEr-D of the concatenated story pair.
    pub cider_story_concat: f64,
    /// Mean of the per-sentence rewards.
    pub cider_sentence_mean: f64,
}

impl RewardReport {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .rewards
            .iter()
            .chain([
                &self.bleu4,
                &self.rouge_l,
                &self.cider_story_concat,
                &self.cider_sentence_mean,
            ]);
        for v in all {
            if !v.is_finite() || *v < 0.0 {
                return Err(HsrlError::Numeric(format!("invalid metric value {v}")));
            }
        }
        if self.bleu4 > 1.0 || self.rouge_l > 1.0 {
            return Err(HsrlError::Numeric(
                "bleu4 and rouge_l must not exceed 1".into(),
            ));
        }
        Ok(())
    }
}

/// Sentence-level credit assignment: reward sentence l with its CIDEr-D
/// against golden sentence l; story-level metrics come from the whole-story
/// concatenation.
pub fn sentence_rewards(
    generated: &[Vec<u32>],
    golden: &[Vec<u32>],
    df: &DocFreqTable,
) -> Result<RewardReport> {
    if generated.len() != golden.len() || golden.is_empty() {
        return Err(HsrlError::Alignment(format!(
            "generated story has {} sentences, golden has {}",
            generated.len(),
            golden.len()
        )));
    }
    let mut rewards = Vec::with_capacity(generated.len());
    for (gen, gold) in generated.iter().zip(golden) {
        rewards.push(cider_d(gen, std::slice::from_ref(gold), df)?);
    }
    let gen_concat: Vec<u32> = generated.iter().flat_map(|s| strip_reserved(s)).collect();
    let gold_concat: Vec<u32> = golden.iter().flat_map(|s| strip_reserved(s)).collect();

    let report = RewardReport {
        cider_sentence_mean: rewards.iter().sum::<f64>() / rewards.len() as f64,
        cider_story_concat: cider_d(&gen_concat, std::slice::from_ref(&gold_concat), df)?,
        bleu4: bleu4(
            std::slice::from_ref(&gen_concat),
            std::slice::from_ref(&vec![gold_concat.clone()]),
        )?,
        rouge_l: rouge_l(&gen_concat, &gold_concat)?,
        rewards,
    };
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Tokens >= 4 are ordinary words in these tests.
    const A: u32 = 4;
    const B: u32 = 5;
    const C: u32 = 6;
    const D: u32 = 7;
    const X: u32 = 8;
    const Y: u32 = 9;

    fn df_two_docs() -> DocFreqTable {
        DocFreqTable::from_documents(vec![vec![A, B, C], vec![X, Y]])
    }

    #[test]
    fn cider_identity_is_ten() {
        let df = df_two_docs();
        let s = vec![A, B, C];
        let score = cider_d(&s, &[s.clone()], &df).unwrap();
        assert!((score - 10.0).abs() < 1e-9, "score {score}");
        // Invariant to EOS/PAD in the inputs.
        let with_eos = vec![A, B, C, EOS];
        let score2 = cider_d(&with_eos, &[vec![PAD, A, B, C, EOS]], &df).unwrap();
        assert!((score2 - 10.0).abs() < 1e-9);
    }

    #[test]
    fn cider_disjoint_is_zero() {
        let df = df_two_docs();
        assert_eq!(cider_d(&[X, Y], &[vec![A, B, C]], &df).unwrap(), 0.0);
        assert_eq!(cider_d(&[], &[vec![A, B, C]], &df).unwrap(), 0.0);
    }

    #[test]
    fn cider_two_token_pair_matches_hand_computation() {
        // Corpus of 3 documents so idf values differ between n-grams.
        let df = DocFreqTable::from_documents(vec![vec![A, B], vec![A, C], vec![X, Y]]);
        let n = 3.0f64;
        // Candidate "A B" vs reference "A C".
        let cand = vec![A, B];
        let reference = vec![A, C];

        // Order 1: idf(A) = ln(3/2), idf(B) = idf(C) = ln 3.
        let wa = (n / 2.0).ln();
        let wb = n.ln();
        let wc = n.ln();
        let sim1 = wa.min(wa) * wa; // only A is shared
        let norm_c = (wa * wa + wb * wb).sqrt();
        let norm_r = (wa * wa + wc * wc).sqrt();
        let val1 = sim1 / (norm_c * norm_r);
        // Order 2: bigrams "A B" vs "A C" are different, so cosine 0.
        let expected = 10.0 * (val1 + 0.0) / 2.0; // orders 1..2 (ref length 2)
        let got = cider_d(&cand, &[reference], &df).unwrap();
        assert!((got - expected).abs() < 1e-12, "got {got}, want {expected}");
    }

    #[test]
    fn cider_length_penalty_applies() {
        let df = DocFreqTable::from_documents(vec![vec![A], vec![X, Y]]);
        // Candidate repeats the unigram: tf differs, lengths differ by 1.
        let got = cider_d(&[A, A], &[vec![A]], &df).unwrap();
        let idf = 2.0f64.ln();
        // cand vec: {A: 2*idf}, ref vec: {A: idf}; clipped min(2idf, idf)*idf.
        let sim = idf * idf / ((2.0 * idf) * idf);
        let penalty = (-1.0f64 / 72.0).exp();
        let expected = 10.0 * sim * penalty; // single effective order
        assert!((got - expected).abs() < 1e-12, "got {got}, want {expected}");
    }

    #[test]
    fn bleu_identity_and_short_candidate() {
        let s = vec![A, B, C, D];
        assert!((bleu4(&[s.clone()], &[vec![s.clone()]]).unwrap() - 1.0).abs() < 1e-12);
        // Length-2 candidate has no 4-grams: corpus BLEU-4 is 0 unsmoothed.
        assert_eq!(bleu4(&[vec![A, B]], &[vec![vec![A, B]]]).unwrap(), 0.0);
        assert!(bleu4(&[], &[]).is_err());
    }

    #[test]
    fn bleu_clipping_matches_hand_count() {
        // Candidate "A A B C D", reference "A B C D".
        let cand = vec![A, A, B, C, D];
        let reference = vec![A, B, C, D];
        // Unigrams: clip(A)=1, B, C, D -> 4/5. Bigrams: AA no, AB, BC, CD -> 3/4.
        // Trigrams: AAB no, ABC, BCD -> 2/3. Fourgrams: AABC no, ABCD -> 1/2.
        let p = [4.0 / 5.0, 3.0 / 4.0, 2.0 / 3.0, 1.0 / 2.0];
        let mean = (p.iter().map(|x: &f64| x.ln()).sum::<f64>() / 4.0).exp();
        // Candidate longer than reference: BP = 1.
        let got = bleu4(&[cand], &[vec![reference]]).unwrap();
        assert!((got - mean).abs() < 1e-12);
    }

    #[test]
    fn sentence_bleu_smoothing() {
        // Length-2 identical pair: p1 = (2+1)/(2+1), p2 = (1+1)/(1+1),
        // p3 = p4 = (0+1)/(0+1) = 1; BP = 1.
        let got = sentence_bleu4(&[A, B], &[vec![A, B]]);
        assert!((got - 1.0).abs() < 1e-12);
        assert_eq!(sentence_bleu4(&[], &[vec![A]]), 0.0);
    }

    #[test]
    fn rouge_cases() {
        let s = vec![A, B, C, D];
        assert!((rouge_l(&s, &s).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(rouge_l(&[X, Y], &[A, B]).unwrap(), 0.0);
        assert_eq!(rouge_l(&[], &[A]).unwrap(), 0.0);
        assert!(rouge_l(&[A], &[]).is_err());

        // "a b c d" vs "a c d": LCS 3, P 3/4, R 1, beta 1.2.
        let p: f64 = 0.75;
        let r: f64 = 1.0;
        let b2 = 1.44;
        let expected = (1.0 + b2) * p * r / (r + b2 * p);
        let got = rouge_l(&[A, B, C, D], &[A, C, D]).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.8798076923076923).abs() < 1e-12);
    }

    #[test]
    fn reward_report_identity_story() {
        let golden = vec![vec![A, B, C, EOS], vec![X, Y, A, EOS]];
        let df = DocFreqTable::from_documents(golden.clone());
        let report = sentence_rewards(&golden, &golden, &df).unwrap();
        for r in &report.rewards {
            assert!((r - 10.0).abs() < 1e-9);
        }
        assert!((report.bleu4 - 1.0).abs() < 1e-12);
        assert!((report.rouge_l - 1.0).abs() < 1e-12);
        assert!((report.cider_sentence_mean - 10.0).abs() < 1e-9);
    }

    #[test]
    fn one_perfect_sentence_among_garbage() {
        let golden = vec![vec![A, B, C, EOS], vec![X, Y, D, EOS]];
        let df = DocFreqTable::from_documents(golden.clone());
        let generated = vec![vec![A, B, C, EOS], vec![B, B, EOS]];
        let report = sentence_rewards(&generated, &golden, &df).unwrap();
        let perfect = report
            .rewards
            .iter()
            .filter(|r| (**r - 10.0).abs() < 1e-9)
            .count();
        assert_eq!(perfect, 1, "{:?}", report.rewards);
    }

    #[test]
    fn permuting_sentences_moves_rewards_but_not_story_bag() {
        let golden = vec![vec![A, B, C, EOS], vec![X, Y, D, EOS]];
        let df = DocFreqTable::from_documents(golden.clone());
        let forward = sentence_rewards(&golden, &golden, &df).unwrap();
        let mut swapped = golden.clone();
        swapped.swap(0, 1);
        let report = sentence_rewards(&swapped, &golden, &df).unwrap();
        assert!(report.rewards.iter().all(|r| *r < 9.0));
        assert!(forward.rewards.iter().all(|r| (*r - 10.0).abs() < 1e-9));
        // The bag of story tokens is unchanged by the permutation.
        let mut bag_a: Vec<u32> = golden.iter().flatten().copied().collect();
        let mut bag_b: Vec<u32> = swapped.iter().flatten().copied().collect();
        bag_a.sort_unstable();
        bag_b.sort_unstable();
        assert_eq!(bag_a, bag_b);
    }

    #[test]
    fn misaligned_story_is_an_alignment_error() {
        let df = df_two_docs();
        let err = sentence_rewards(&[vec![A, EOS]], &[vec![A, EOS], vec![B, EOS]], &df);
        assert!(matches!(err, Err(HsrlError::Alignment(_))));
    }

    proptest! {
        // Reference order must not change cider; PAD insertion must not
        // change any metric.
        #[test]
        fn reference_permutation_and_pad_invariance(
            cand in proptest::collection::vec(4u32..7, 1..5),
            r1 in proptest::collection::vec(4u32..7, 1..5),
            r2 in proptest::collection::vec(4u32..7, 1..5),
        ) {
            let df = DocFreqTable::from_documents(vec![r1.clone(), r2.clone(), vec![X, Y]]);
            let fwd = cider_d(&cand, &[r1.clone(), r2.clone()], &df).unwrap();
            let rev = cider_d(&cand, &[r2.clone(), r1.clone()], &df).unwrap();
            prop_assert!((fwd - rev).abs() < 1e-12);

            let mut padded = cand.clone();
            padded.insert(0, PAD);
            padded.push(PAD);
            let with_pad = cider_d(&padded, &[r1.clone(), r2.clone()], &df).unwrap();
            prop_assert!((fwd - with_pad).abs() < 1e-12);

            let b_fwd = bleu4(&[cand.clone()], &[vec![r1.clone()]]).unwrap();
            let b_pad = bleu4(&[padded.clone()], &[vec![r1.clone()]]).unwrap();
            prop_assert!((b_fwd - b_pad).abs() < 1e-12);

            let ro_fwd = rouge_l(&cand, &r1).unwrap();
            let ro_pad = rouge_l(&padded, &r1).unwrap();
            prop_assert!((ro_fwd - ro_pad).abs() < 1e-12);
        }
    }
}
