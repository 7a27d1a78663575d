//! Answer-matching metrics for free-text tasks.
//!
//! All sentence scores lie in [0, 1] except CIDEr, which is reported on its
//! raw [0, 10] scale.

use std::collections::{BTreeMap, HashMap};

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercase, punctuation removed, articles dropped, whitespace collapsed.
pub fn normalize_answer(s: &str) -> String {
    let lowered: String = s
        .to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !ARTICLES.contains(w))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Metric tokens: lowercase words with surrounding punctuation stripped.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn exact_match(pred: &str, refs: &[String]) -> f64 {
    let p = normalize_answer(pred);
    if refs.iter().any(|r| normalize_answer(r) == p) {
        1.0
    } else {
        0.0
    }
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

/// Zero precisions are replaced by this value at sentence level.
pub const BLEU_EPSILON: f64 = 1e-9;

/// Sentence BLEU with uniform weights over n = 1..=min(max_n, candidate length)
/// and the closest-reference brevity penalty.
pub fn bleu(pred: &str, refs: &[String], max_n: usize) -> f64 {
    let cand = tokenize(pred);
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let ref_tokens: Vec<Vec<String>> = refs.iter().map(|r| tokenize(r)).collect();
    // Orders longer than the candidate have no n-grams and are left out of the mean.
    let orders = max_n.min(cand.len());
    let mut log_sum = 0.0;
    for n in 1..=orders {
        let cand_counts = ngram_counts(&cand, n);
        let total: usize = cand_counts.values().sum();
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in &ref_tokens {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let clipped: usize = cand_counts
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if clipped == 0 {
            BLEU_EPSILON
        } else {
            clipped as f64 / total as f64
        };
        log_sum += p.ln() / orders as f64;
    }
    let c = cand.len();
    let r = ref_tokens
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(0);
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * log_sum.exp()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F1 (β = 1), maximized over references.
pub fn rouge_l(pred: &str, refs: &[String]) -> f64 {
    let cand = tokenize(pred);
    if cand.is_empty() {
        return 0.0;
    }
    refs.iter()
        .map(|r| {
            let rt = tokenize(r);
            let lcs = lcs_len(&cand, &rt);
            if lcs == 0 {
                return 0.0;
            }
            let p = lcs as f64 / cand.len() as f64;
            let rec = lcs as f64 / rt.len() as f64;
            2.0 * p * rec / (p + rec)
        })
        .fold(0.0, f64::max)
}

/// Crude suffix stripper used by the stem matching stage of METEOR.
pub fn stem(word: &str) -> &str {
    let n = word.len();
    if n > 5 && word.ends_with("ing") {
        &word[..n - 3]
    } else if (n > 4 && word.ends_with("ed"))
        || (n > 3 && word.ends_with("es") && ["x", "ch", "sh", "ss"].iter().any(|s| word[..n - 2].ends_with(s)))
    {
        &word[..n - 2]
    } else if n > 3 && word.ends_with('s') && !word.ends_with("ss") {
        &word[..n - 1]
    } else {
        word
    }
}

/// Greedy one-to-one alignment: exact matches first, then stem matches.
/// Returns (pred index, ref index) pairs sorted by pred index.
fn align(cand: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut used_c = vec![false; cand.len()];
    let mut used_r = vec![false; reference.len()];
    let mut pairs = Vec::new();
    let stages: [&dyn Fn(&str, &str) -> bool; 2] = [&|a, b| a == b, &|a, b| stem(a) == stem(b)];
    for matches in stages {
        for (i, c) in cand.iter().enumerate() {
            if used_c[i] {
                continue;
            }
            if let Some(j) = (0..reference.len()).find(|&j| !used_r[j] && matches(c, &reference[j])) {
                used_c[i] = true;
                used_r[j] = true;
                pairs.push((i, j));
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// METEOR with exact and stem modules only: Fmean = 10PR/(R+9P),
/// penalty = 0.5·(chunks/matches)³, maximized over references.
pub fn meteor_simple(pred: &str, refs: &[String]) -> f64 {
    let cand = tokenize(pred);
    if cand.is_empty() {
        return 0.0;
    }
    refs.iter()
        .map(|r| {
            let rt = tokenize(r);
            let pairs = align(&cand, &rt);
            let m = pairs.len();
            if m == 0 {
                return 0.0;
            }
            let p = m as f64 / cand.len() as f64;
            let rec = m as f64 / rt.len() as f64;
            let fmean = 10.0 * p * rec / (rec + 9.0 * p);
            let chunks = 1 + pairs
                .windows(2)
                .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
                .count();
            let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
            fmean * (1.0 - penalty)
        })
        .fold(0.0, f64::max)
}

// Ordered maps keep floating point accumulation order fixed across runs.
fn tfidf<'a>(tokens: &'a [String], n: usize, idf: &dyn Fn(usize, &[String]) -> f64) -> BTreeMap<&'a [String], f64> {
    let counts = ngram_counts(tokens, n);
    let total: usize = counts.values().sum();
    counts
        .into_iter()
        .map(|(g, c)| (g, c as f64 / total as f64 * idf(n, g)))
        .collect()
}

/// CIDEr over a corpus of (prediction, references) pairs.
///
/// Document frequencies come from the reference sets; the inverse document
/// frequency is `ln((1 + N) / (1 + df)) + 1`, which stays positive for a
/// single-sample corpus. Orders at which neither side has an n-gram are left
/// out of the mean over n. Returns per-sample scores in [0, 10].
pub fn cider_scores(corpus: &[(String, Vec<String>)]) -> Vec<f64> {
    const MAX_N: usize = 4;
    let n_docs = corpus.len() as f64;
    let tokenized: Vec<(Vec<String>, Vec<Vec<String>>)> = corpus
        .iter()
        .map(|(p, rs)| (tokenize(p), rs.iter().map(|r| tokenize(r)).collect()))
        .collect();

    let mut df: Vec<HashMap<Vec<String>, usize>> = vec![HashMap::new(); MAX_N + 1];
    for (_, refs) in &tokenized {
        for n in 1..=MAX_N {
            let mut seen: std::collections::HashSet<&[String]> = std::collections::HashSet::new();
            for r in refs {
                if r.len() >= n {
                    seen.extend(r.windows(n));
                }
            }
            for g in seen {
                *df[n].entry(g.to_vec()).or_insert(0) += 1;
            }
        }
    }
    let idf = |n: usize, g: &[String]| -> f64 {
        let d = df[n].get(g).copied().unwrap_or(0) as f64;
        ((1.0 + n_docs) / (1.0 + d)).ln() + 1.0
    };
    let vector = |tokens, n| tfidf(tokens, n, &idf);

    tokenized
        .iter()
        .map(|(cand, refs)| {
            if refs.is_empty() {
                return 0.0;
            }
            let mut total = 0.0;
            for r in refs {
                let mut sum_n = 0.0;
                let mut orders = 0;
                for n in 1..=MAX_N {
                    let vc = vector(cand, n);
                    let vr = vector(r, n);
                    if vc.is_empty() && vr.is_empty() {
                        continue;
                    }
                    orders += 1;
                    let norm_c = vc.values().map(|v| v * v).sum::<f64>().sqrt();
                    let norm_r = vr.values().map(|v| v * v).sum::<f64>().sqrt();
                    if norm_c > 0.0 && norm_r > 0.0 {
                        let d: f64 = vc.iter().filter_map(|(g, a)| vr.get(g).map(|b| a * b)).sum();
                        sum_n += d / (norm_c * norm_r);
                    }
                }
                if orders > 0 {
                    total += sum_n / orders as f64;
                }
            }
            10.0 * total / refs.len() as f64
        })
        .collect()
}

/// Corpus CIDEr: mean of the per-sample scores.
pub fn cider(corpus: &[(String, Vec<String>)]) -> f64 {
    let s = cider_scores(corpus);
    if s.is_empty() {
        0.0
    } else {
        s.iter().sum::<f64>() / s.len() as f64
    }
}
