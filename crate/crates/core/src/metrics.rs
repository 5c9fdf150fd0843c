//! Corpus-level caption metrics: BLEU-4, ROUGE-L and CIDEr-D.
//!
//! All three work on pre-tokenized captions and iterate ids in sorted order,
//! so results are bit-reproducible for a fixed corpus.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
pub const MAX_ORDER: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredItem {
    pub id: String,
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

/// Candidates aligned one-to-one with their reference sets, sorted by id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredCorpus {
    items: Vec<ScoredItem>,
}

/// Ids present on only one side of a candidate/reference pairing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdMismatch {
    pub missing_references: Vec<String>,
    pub missing_candidates: Vec<String>,
}

impl std::fmt::Display for IdMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "candidates without references: {:?}; references without candidates: {:?}",
            self.missing_references, self.missing_candidates
        )
    }
}

impl ScoredCorpus {
    pub fn align(
        candidates: BTreeMap<String, Vec<String>>,
        mut references: BTreeMap<String, Vec<Vec<String>>>,
    ) -> std::result::Result<Self, IdMismatch> {
        let missing_references: Vec<String> = candidates
            .keys()
            .filter(|id| !references.contains_key(*id))
            .cloned()
            .collect();
        let missing_candidates: Vec<String> = references
            .keys()
            .filter(|id| !candidates.contains_key(*id))
            .cloned()
            .collect();
        if !missing_references.is_empty() || !missing_candidates.is_empty() {
            return Err(IdMismatch {
                missing_references,
                missing_candidates,
            });
        }
        let items = candidates
            .into_iter()
            .map(|(id, candidate)| {
                let references = references.remove(&id).unwrap_or_default();
                ScoredItem {
                    id,
                    candidate,
                    references,
                }
            })
            .collect();
        Ok(ScoredCorpus { items })
    }

    pub fn from_items(mut items: Vec<ScoredItem>) -> Self {
        items.sort_by(|a, b| a.id.cmp(&b.id));
        ScoredCorpus { items }
    }

    pub fn items(&self) -> &[ScoredItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn check(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::contract("metric over an empty corpus"));
        }
        if let Some(item) = self.items.iter().find(|i| i.references.is_empty()) {
            return Err(Error::contract(format!("id {} has no references", item.id)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
}

pub fn score_all(corpus: &ScoredCorpus) -> Result<MetricReport> {
    Ok(MetricReport {
        bleu4: bleu4(corpus)?,
        rouge_l: rouge_l(corpus)?,
        cider_d: cider_d(corpus)?,
    })
}

type Ngram<'a> = &'a [String];

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Ngram<'_>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with clipped n-gram precision for n = 1..4, uniform weights,
/// the closest-reference-length brevity penalty (ties go to the shorter
/// reference) and no smoothing.
pub fn bleu4(corpus: &ScoredCorpus) -> Result<f64> {
    corpus.check()?;
    let mut matched = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for item in corpus.items() {
        let c = item.candidate.len();
        cand_len += c;
        ref_len += item
            .references
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(c), r))
            .unwrap_or(0);
        for n in 1..=MAX_ORDER {
            let cand = ngram_counts(&item.candidate, n);
            let mut max_ref: HashMap<Ngram<'_>, usize> = HashMap::new();
            for r in &item.references {
                for (g, k) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in &cand {
                matched[n - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if cand_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_precision: f64 = (0..MAX_ORDER)
        .map(|i| (matched[i] as f64 / total[i] as f64).ln())
        .sum::<f64>()
        / MAX_ORDER as f64;
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * log_precision.exp())
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure of one candidate against one reference.
pub fn rouge_l_pair(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    if p == 0.0 || r == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean over ids of the best ROUGE-L F-measure across references.
pub fn rouge_l(corpus: &ScoredCorpus) -> Result<f64> {
    corpus.check()?;
    let total: f64 = corpus
        .items()
        .iter()
        .map(|item| {
            item.references
                .iter()
                .map(|r| rouge_l_pair(&item.candidate, r))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(total / corpus.len() as f64)
}

struct TfIdf<'a> {
    vecs: Vec<HashMap<Ngram<'a>, f64>>,
    norms: Vec<f64>,
    len: usize,
}

fn tfidf<'a>(tokens: &'a [String], df: &HashMap<Ngram<'_>, usize>, log_n: f64) -> TfIdf<'a> {
    let mut vecs = Vec::with_capacity(MAX_ORDER);
    let mut norms = Vec::with_capacity(MAX_ORDER);
    for n in 1..=MAX_ORDER {
        let mut v = HashMap::new();
        let mut norm = 0.0;
        for (g, tf) in ngram_counts(tokens, n) {
            let d = (df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
            let w = tf as f64 * (log_n - d);
            norm += w * w;
            v.insert(g, w);
        }
        vecs.push(v);
        norms.push(norm.sqrt());
    }
    TfIdf {
        vecs,
        norms,
        len: tokens.len(),
    }
}

fn cider_sim(hyp: &TfIdf<'_>, reference: &TfIdf<'_>) -> [f64; MAX_ORDER] {
    let delta = hyp.len as f64 - reference.len as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut out = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        let mut val = 0.0;
        // sorted for a fixed summation order
        let mut grams: Vec<_> = hyp.vecs[n].iter().collect();
        grams.sort_by(|a, b| a.0.cmp(b.0));
        for (g, &h) in grams {
            if let Some(&r) = reference.vecs[n].get(g) {
                val += h.min(r) * r;
            }
        }
        if hyp.norms[n] != 0.0 && reference.norms[n] != 0.0 {
            val /= hyp.norms[n] * reference.norms[n];
        }
        out[n] = val * penalty;
    }
    out
}

/// Per-id CIDEr-D scores in corpus order.
///
/// Document frequencies are taken over each id's reference set; IDF uses
/// `ln(#ids) − ln(max(1, df))`. For every n the clipped cosine is damped by
/// `exp(−Δlen² / 2σ²)`, averaged over n and references and scaled by 10.
pub fn cider_d_per_id(corpus: &ScoredCorpus) -> Result<Vec<f64>> {
    corpus.check()?;
    if corpus.len() == 1 {
        log::warn!("CIDEr-D over a single id: every n-gram has zero IDF weight");
    }
    let mut df: HashMap<Ngram<'_>, usize> = HashMap::new();
    for item in corpus.items() {
        let mut seen = BTreeSet::new();
        for r in &item.references {
            for n in 1..=MAX_ORDER {
                if r.len() >= n {
                    seen.extend(r.windows(n));
                }
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_n = (corpus.len() as f64).ln();
    let scores = corpus
        .items()
        .iter()
        .map(|item| {
            let hyp = tfidf(&item.candidate, &df, log_n);
            let mut acc = [0.0; MAX_ORDER];
            for r in &item.references {
                let rv = tfidf(r, &df, log_n);
                for (a, s) in acc.iter_mut().zip(cider_sim(&hyp, &rv)) {
                    *a += s;
                }
            }
            let mean = acc.iter().sum::<f64>() / MAX_ORDER as f64;
            mean / item.references.len() as f64 * 10.0
        })
        .collect();
    Ok(scores)
}

pub fn cider_d(corpus: &ScoredCorpus) -> Result<f64> {
    let per_id = cider_d_per_id(corpus)?;
    Ok(per_id.iter().sum::<f64>() / per_id.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    fn item(id: &str, cand: &str, refs: &[&str]) -> ScoredItem {
        ScoredItem {
            id: id.into(),
            candidate: tokenize(cand),
            references: refs.iter().map(|r| tokenize(r)).collect(),
        }
    }

    #[test]
    fn bleu_forced_zero() {
        let c = ScoredCorpus::from_items(vec![item("x", "the cat", &["the cat sat"])]);
        assert_eq!(bleu4(&c).unwrap(), 0.0);
    }

    #[test]
    fn bleu_empty_candidate_contributes_nothing() {
        let c = ScoredCorpus::from_items(vec![
            item("a", "", &["a dog runs in the park"]),
            item("b", "a man plays the guitar", &["a man plays the guitar"]),
        ]);
        let v = bleu4(&c).unwrap();
        // all n-grams match; brevity penalty exp(1 − 11/5)
        assert!((v - (1.0f64 - 11.0 / 5.0).exp()).abs() < 1e-12, "{v}");
    }

    #[test]
    fn rouge_examples() {
        let p = rouge_l_pair(&tokenize("a b c d"), &tokenize("a c b d"));
        assert!((p - 0.75).abs() < 1e-12);
        assert_eq!(rouge_l_pair(&[], &tokenize("a b")), 0.0);
        let c = ScoredCorpus::from_items(vec![item("x", "a b c", &["q r", "a b c"])]);
        assert_eq!(rouge_l(&c).unwrap(), 1.0);
    }

    #[test]
    fn cider_identical_and_disjoint() {
        let c = ScoredCorpus::from_items(vec![
            item("1", "a man is playing a guitar", &["a man is playing a guitar"]),
            item("2", "a woman slices an onion", &["a woman slices an onion"]),
            item("3", "xx yy zz ww", &["a dog runs on the beach"]),
        ]);
        let s = cider_d_per_id(&c).unwrap();
        assert!((s[0] - 10.0).abs() < 1e-9, "{s:?}");
        assert!((s[1] - 10.0).abs() < 1e-9, "{s:?}");
        assert_eq!(s[2], 0.0);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(bleu4(&ScoredCorpus::default()).is_err());
    }

    #[test]
    fn align_reports_unmatched_ids() {
        let mut cands = BTreeMap::new();
        cands.insert("a".to_string(), tokenize("x"));
        cands.insert("b".to_string(), tokenize("y"));
        let mut refs = BTreeMap::new();
        refs.insert("a".to_string(), vec![tokenize("x")]);
        refs.insert("c".to_string(), vec![tokenize("z")]);
        let err = ScoredCorpus::align(cands, refs).unwrap_err();
        assert_eq!(err.missing_references, ["b"]);
        assert_eq!(err.missing_candidates, ["c"]);
    }
}
