//! Caption metrics: BLEU-1..4 with clipped n-gram precision and brevity
//! penalty, GLEU, METEOR-lite, and word error rate, at sentence and corpus
//! level.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel;

// ----- n-gram counting ------------------------------------------------------

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for window in tokens.windows(n) {
        *counts.entry(window.to_vec()).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram matches and candidate n-gram total for order `n`: each
/// candidate n-gram's count is capped at its maximum count in any single
/// reference.
pub fn modified_precision<T: Eq + Hash + Clone>(
    candidate: &[T],
    references: &[Vec<T>],
    n: usize,
) -> Result<(usize, usize)> {
    if !(1..=4).contains(&n) {
        return Err(Error::contract("modified_precision: order must be in 1..4"));
    }
    let cand = ngram_counts(candidate, n);
    let ref_counts: Vec<HashMap<Vec<T>, usize>> =
        references.iter().map(|r| ngram_counts(r, n)).collect();
    let mut matches = 0;
    let mut total = 0;
    for (gram, &count) in &cand {
        let cap = ref_counts
            .iter()
            .map(|rc| rc.get(gram).copied().unwrap_or(0))
            .max()
            .unwrap_or(0);
        matches += count.min(cap);
        total += count;
    }
    Ok((matches, total))
}

fn require_nonempty_reference<T>(references: &[Vec<T>]) -> Result<()> {
    if references.iter().any(|r| !r.is_empty()) {
        Ok(())
    } else {
        Err(Error::contract("at least one reference must be nonempty"))
    }
}

/// Reference length closest to the candidate length; ties break toward the
/// shorter reference.
fn closest_reference_length<T>(candidate_len: usize, references: &[Vec<T>]) -> usize {
    let mut best = references[0].len();
    for r in &references[1..] {
        let len = r.len();
        let d_new = len.abs_diff(candidate_len);
        let d_old = best.abs_diff(candidate_len);
        if d_new < d_old || (d_new == d_old && len < best) {
            best = len;
        }
    }
    best
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        return 0.0;
    }
    if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

fn geometric_bleu(per_order: &[(usize, usize)], bp: f64) -> f64 {
    let mut log_sum = 0.0;
    let mut orders = 0;
    for &(matches, total) in per_order {
        if total == 0 {
            // Vacuous order: the candidate is too short to have any n-grams,
            // so the ratio is 0/0. Skipping keeps the identical-sentence
            // fixed point at every length (effective-order convention).
            continue;
        }
        if matches == 0 {
            return 0.0;
        }
        log_sum += (matches as f64 / total as f64).ln();
        orders += 1;
    }
    if orders == 0 {
        return 0.0;
    }
    bp * (log_sum / orders as f64).exp()
}

/// Sentence-level BLEU with no smoothing: any zero n-gram precision zeroes
/// the score. Orders the candidate is too short to populate are skipped
/// (geometric mean over the effective orders), so identical sentences score
/// 1 at every length; an empty candidate scores 0.
pub fn bleu<T: Eq + Hash + Clone>(
    candidate: &[T],
    references: &[Vec<T>],
    max_n: usize,
) -> Result<f64> {
    if !(1..=4).contains(&max_n) {
        return Err(Error::contract("bleu: max_n must be in 1..4"));
    }
    require_nonempty_reference(references)?;
    let per_order: Vec<(usize, usize)> = (1..=max_n)
        .map(|n| modified_precision(candidate, references, n))
        .collect::<Result<_>>()?;
    let r = closest_reference_length(candidate.len(), references);
    Ok(geometric_bleu(&per_order, brevity_penalty(candidate.len(), r)))
}

/// Corpus-level BLEU: clipped matches and totals are pooled across sentences
/// before the geometric mean; BP uses summed candidate and closest-reference
/// lengths.
pub fn corpus_bleu<T: Eq + Hash + Clone>(
    pairs: &[(Vec<T>, Vec<Vec<T>>)],
    max_n: usize,
) -> Result<f64> {
    if !(1..=4).contains(&max_n) {
        return Err(Error::contract("corpus_bleu: max_n must be in 1..4"));
    }
    if pairs.is_empty() {
        return Err(Error::contract("corpus_bleu: empty corpus"));
    }
    let mut pooled = vec![(0usize, 0usize); max_n];
    let mut c_total = 0;
    let mut r_total = 0;
    for (candidate, references) in pairs {
        require_nonempty_reference(references)?;
        for (i, slot) in pooled.iter_mut().enumerate() {
            let (m, t) = modified_precision(candidate, references, i + 1)?;
            slot.0 += m;
            slot.1 += t;
        }
        c_total += candidate.len();
        r_total += closest_reference_length(candidate.len(), references);
    }
    Ok(geometric_bleu(&pooled, brevity_penalty(c_total, r_total)))
}

/// GLEU: n-grams for n=1..4 pooled into one bag; against each reference take
/// min(precision, recall) of the clipped overlap; score is the best
/// single-reference value.
pub fn gleu<T: Eq + Hash + Clone>(candidate: &[T], references: &[Vec<T>]) -> Result<f64> {
    require_nonempty_reference(references)?;
    let cand_total: usize = (1..=4).map(|n| candidate.len().saturating_sub(n - 1)).sum();
    let mut best: f64 = 0.0;
    for reference in references {
        let ref_total: usize = (1..=4).map(|n| reference.len().saturating_sub(n - 1)).sum();
        let mut matches = 0;
        for n in 1..=4 {
            let single = std::slice::from_ref(reference);
            matches += modified_precision(candidate, single, n)?.0;
        }
        if cand_total == 0 || ref_total == 0 {
            continue;
        }
        let precision = matches as f64 / cand_total as f64;
        let recall = matches as f64 / ref_total as f64;
        best = best.max(precision.min(recall));
    }
    Ok(best)
}

/// Greedy left-to-right exact unigram alignment: each candidate token takes
/// the lowest-index unused matching reference token. Returns aligned
/// (candidate index, reference index) pairs in candidate order.
fn align_unigrams<T: Eq>(candidate: &[T], reference: &[T]) -> Vec<(usize, usize)> {
    let mut used = vec![false; reference.len()];
    let mut pairs = Vec::new();
    for (ci, token) in candidate.iter().enumerate() {
        if let Some(ri) = reference
            .iter()
            .enumerate()
            .position(|(ri, r)| !used[ri] && r == token)
        {
            used[ri] = true;
            pairs.push((ci, ri));
        }
    }
    pairs
}

/// Maximal runs of alignments contiguous in both sentences.
fn chunk_count(pairs: &[(usize, usize)]) -> usize {
    let mut chunks = 0;
    let mut prev: Option<(usize, usize)> = None;
    for &(ci, ri) in pairs {
        let contiguous = matches!(prev, Some((pc, pr)) if ci == pc + 1 && ri == pr + 1);
        if !contiguous {
            chunks += 1;
        }
        prev = Some((ci, ri));
    }
    chunks
}

/// METEOR-lite: exact-match unigram alignment only (no stemming or synonym
/// tables), F = 10PR/(R + 9P), penalty = 0.5·(chunks/matches)³, best score
/// over the references.
pub fn meteor_lite<T: Eq + Hash + Clone>(candidate: &[T], references: &[Vec<T>]) -> Result<f64> {
    require_nonempty_reference(references)?;
    let mut best: f64 = 0.0;
    for reference in references {
        if candidate.is_empty() || reference.is_empty() {
            continue;
        }
        let pairs = align_unigrams(candidate, reference);
        let matches = pairs.len();
        if matches == 0 {
            continue;
        }
        let p = matches as f64 / candidate.len() as f64;
        let r = matches as f64 / reference.len() as f64;
        let f_mean = 10.0 * p * r / (r + 9.0 * p);
        let chunks = chunk_count(&pairs);
        let penalty = 0.5 * (chunks as f64 / matches as f64).powi(3);
        best = best.max(f_mean * (1.0 - penalty));
    }
    Ok(best)
}

/// Word-level Levenshtein distance with unit substitution/insertion/deletion
/// costs.
pub fn edit_distance<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0; b.len() + 1];
    for (i, ta) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, tb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ta != tb);
            curr[j + 1] = sub.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Word error rate: edit distance divided by reference length.
pub fn wer<T: Eq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::contract("wer: reference must be nonempty"));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Multi-reference WER: the minimum rate over the nonempty references.
pub fn wer_multi<T: Eq>(references: &[Vec<T>], hypothesis: &[T]) -> Result<f64> {
    require_nonempty_reference(references)?;
    let mut best = f64::INFINITY;
    for reference in references {
        if reference.is_empty() {
            continue;
        }
        best = best.min(wer(reference, hypothesis)?);
    }
    Ok(best)
}

// ----- corpus evaluation ------------------------------------------------------

/// One scored candidate with its reference set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub id: u64,
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

/// Per-sentence metric row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceScores {
    pub id: u64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub gleu: f64,
    pub meteor: f64,
    pub wer: f64,
}

/// Corpus aggregates: pooled-count BLEU, arithmetic means for the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusScores {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub gleu: f64,
    pub meteor: f64,
    pub wer: f64,
}

/// Pinned metric definitions, echoed into every report so scores stay
/// interpretable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricVariants {
    pub bleu: String,
    pub gleu: String,
    pub meteor: String,
    pub wer: String,
}

impl Default for MetricVariants {
    fn default() -> Self {
        MetricVariants {
            bleu: "clipped n-gram precision, geometric mean over orders 1..max_n \
                   (orders with no candidate n-grams are skipped), \
                   BP=min(1,e^(1-r/c)) with r the closest reference length (ties to \
                   shorter); sentence level unsmoothed (any zero precision zeroes the \
                   score), corpus level pools counts across sentences"
                .into(),
            gleu: "n-grams of orders 1..4 pooled into one bag; score = \
                   min(precision, recall) of the clipped overlap against the best \
                   single reference"
                .into(),
            meteor: "METEOR-lite: exact-match unigram alignment only (greedy \
                     left-to-right, no stemming or synonym tables), F=10PR/(R+9P), \
                     penalty=0.5*(chunks/matches)^3, best reference wins"
                .into(),
            wer: "word-level Levenshtein distance / reference length, minimum over \
                  references"
                .into(),
        }
    }
}

/// Full evaluation artifact written by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub config: serde_json::Value,
    pub metric_variants: MetricVariants,
    pub per_sentence: Vec<SentenceScores>,
    pub corpus: CorpusScores,
}

fn sentence_scores(pair: &EvalPair) -> Result<SentenceScores> {
    Ok(SentenceScores {
        id: pair.id,
        bleu1: bleu(&pair.candidate, &pair.references, 1)?,
        bleu2: bleu(&pair.candidate, &pair.references, 2)?,
        bleu3: bleu(&pair.candidate, &pair.references, 3)?,
        bleu4: bleu(&pair.candidate, &pair.references, 4)?,
        gleu: gleu(&pair.candidate, &pair.references)?,
        meteor: meteor_lite(&pair.candidate, &pair.references)?,
        wer: wer_multi(&pair.references, &pair.candidate)?,
    })
}

/// Permutation-invariant mean: values are summed in total order so the
/// result is bit-identical for any input ordering.
fn stable_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut sorted: Vec<f64> = values.collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    sorted.into_iter().sum::<f64>() / n as f64
}

/// Score every pair (rows in input order) and aggregate: BLEU in pooled-count
/// corpus form, GLEU/METEOR/WER as arithmetic means.
pub fn corpus_evaluate(
    model: &str,
    config: serde_json::Value,
    pairs: &[EvalPair],
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::contract("corpus_evaluate: empty corpus"));
    }
    let per_sentence: Vec<SentenceScores> = parallel::map(pairs, sentence_scores)
        .into_iter()
        .collect::<Result<_>>()?;
    let raw: Vec<(Vec<String>, Vec<Vec<String>>)> = pairs
        .iter()
        .map(|p| (p.candidate.clone(), p.references.clone()))
        .collect();
    let corpus = CorpusScores {
        bleu1: corpus_bleu(&raw, 1)?,
        bleu2: corpus_bleu(&raw, 2)?,
        bleu3: corpus_bleu(&raw, 3)?,
        bleu4: corpus_bleu(&raw, 4)?,
        gleu: stable_mean(per_sentence.iter().map(|s| s.gleu)),
        meteor: stable_mean(per_sentence.iter().map(|s| s.meteor)),
        wer: stable_mean(per_sentence.iter().map(|s| s.wer)),
    };
    Ok(EvalReport {
        model: model.into(),
        config,
        metric_variants: MetricVariants::default(),
        per_sentence,
        corpus,
    })
}
