//! Okapi BM25 retrieval and triplet mining.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{Qrels, Records, Triplet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

/// Lowercased alphanumeric runs.
pub fn analyze(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Collection statistics needed to score one document.
#[derive(Debug, Clone, Default)]
pub struct CorpusStats {
    pub n_docs: usize,
    pub avg_len: f64,
    pub df: HashMap<String, usize>,
}

impl CorpusStats {
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.n_docs as f64;
        let df = self.df.get(term).copied().unwrap_or(0) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }
}

/// BM25 of one document; repeated query terms count once.
pub fn bm25_score(query_terms: &[String], doc_terms: &[String], stats: &CorpusStats, p: Bm25Params) -> Result<f64> {
    if stats.n_docs == 0 || !(stats.avg_len > 0.0) {
        return Err(Error::Data("BM25 over empty corpus statistics".into()));
    }
    let mut tf: HashMap<&str, usize> = HashMap::new();
    for t in doc_terms {
        *tf.entry(t.as_str()).or_default() += 1;
    }
    let norm = p.k1 * (1.0 - p.b + p.b * doc_terms.len() as f64 / stats.avg_len);
    let mut seen = Vec::new();
    let mut score = 0.0;
    for q in query_terms {
        if seen.contains(&q) {
            continue;
        }
        seen.push(q);
        if let Some(&f) = tf.get(q.as_str()) {
            let f = f as f64;
            score += stats.idf(q) * f * (p.k1 + 1.0) / (f + norm);
        }
    }
    Ok(score)
}

/// Inverted index over a corpus.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    stats: CorpusStats,
    doc_lens: Vec<usize>,
    postings: HashMap<String, Vec<(u32, u32)>>,
    params: Bm25Params,
}

impl Bm25Index {
    pub fn build(docs: &[String], params: Bm25Params) -> Self {
        let mut postings: HashMap<String, Vec<(u32, u32)>> = HashMap::new();
        let mut doc_lens = Vec::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            let terms = analyze(d);
            doc_lens.push(terms.len());
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in terms {
                *tf.entry(t).or_default() += 1;
            }
            for (t, f) in tf {
                postings.entry(t).or_default().push((i as u32, f));
            }
        }
        let total: usize = doc_lens.iter().sum();
        let df = postings.iter().map(|(t, p)| (t.clone(), p.len())).collect();
        Self {
            stats: CorpusStats {
                n_docs: docs.len(),
                avg_len: if docs.is_empty() { 0.0 } else { total as f64 / docs.len() as f64 },
                df,
            },
            doc_lens,
            postings,
            params,
        }
    }

    pub fn stats(&self) -> &CorpusStats {
        &self.stats
    }

    pub fn len(&self) -> usize {
        self.doc_lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_lens.is_empty()
    }

    /// Scores for every document, indexed by corpus position.
    pub fn score_all(&self, query: &str) -> Vec<f64> {
        let mut scores = vec![0.0; self.len()];
        let p = self.params;
        let mut terms = analyze(query);
        terms.sort();
        terms.dedup();
        for t in terms {
            let Some(post) = self.postings.get(&t) else { continue };
            let idf = self.stats.idf(&t);
            for &(d, f) in post {
                let f = f as f64;
                let norm = p.k1 * (1.0 - p.b + p.b * self.doc_lens[d as usize] as f64 / self.stats.avg_len);
                scores[d as usize] += idf * f * (p.k1 + 1.0) / (f + norm);
            }
        }
        scores
    }

    /// Top `k` documents by descending score, ties by corpus order. Documents
    /// sharing no term with the query score 0 and fill the tail in corpus order.
    pub fn top_k(&self, query: &str, k: usize) -> Vec<(usize, f64)> {
        let scores = self.score_all(query);
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        idx.truncate(k);
        idx.into_iter().map(|i| (i, scores[i])).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TripletConfig {
    pub n: usize,
    pub seed: u64,
    /// BM25 depth negatives are drawn from.
    pub depth: usize,
    pub bm25: Bm25Params,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            n: 100,
            seed: 0,
            depth: 100,
            bm25: Bm25Params::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TripletBuild {
    pub triplets: Vec<Triplet>,
    /// `(query id, reason)` for every query that could not be used.
    pub skipped: Vec<(String, String)>,
    pub eligible: usize,
}

/// Samples `cfg.n` queries with a judged positive and mines one BM25 negative each.
///
/// The positive is drawn uniformly from the query's judged-relevant documents
/// present in the corpus; the negative uniformly from the BM25 top `depth`
/// minus every document judged relevant. Each query uses its own random
/// stream derived from the seed, so results do not depend on thread count.
pub fn build_triplets(queries: &Records, corpus: &Records, qrels: &Qrels, cfg: &TripletConfig) -> Result<TripletBuild> {
    if corpus.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let texts: Vec<String> = corpus.iter().map(|(_, t)| t.clone()).collect();
    let index = Bm25Index::build(&texts, cfg.bm25);
    let pos_of: HashMap<&str, usize> = corpus
        .iter()
        .enumerate()
        .map(|(i, (id, _))| (id.as_str(), i))
        .collect();

    let results: Vec<std::result::Result<Triplet, (String, String)>> = queries
        .par_iter()
        .enumerate()
        .map(|(qi, (qid, qtext))| {
            let skip = |r: &str| Err((qid.clone(), r.to_string()));
            let judged = qrels.get(qid);
            let positives: Vec<usize> = judged
                .into_iter()
                .flatten()
                .filter(|(_, &r)| r > 0)
                .filter_map(|(d, _)| pos_of.get(d.as_str()).copied())
                .collect();
            if positives.is_empty() {
                return skip("no judged positive in corpus");
            }
            let is_pos = |d: usize| {
                judged
                    .and_then(|j| j.get(&corpus[d].0))
                    .map_or(false, |&r| r > 0)
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(qi as u64);
            let p = positives[rng.gen_range(0..positives.len())];
            let candidates: Vec<usize> = index
                .top_k(qtext, cfg.depth)
                .into_iter()
                .map(|(d, _)| d)
                .filter(|&d| !is_pos(d) && corpus[d].1 != corpus[p].1)
                .collect();
            if candidates.is_empty() {
                return skip("no eligible BM25 negative");
            }
            let n = candidates[rng.gen_range(0..candidates.len())];
            Ok(Triplet {
                query_id: qid.clone(),
                query: qtext.clone(),
                positive: corpus[p].1.clone(),
                negative: corpus[n].1.clone(),
                positive_id: Some(corpus[p].0.clone()),
                negative_id: Some(corpus[n].0.clone()),
            })
        })
        .collect();

    let mut eligible = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r {
            Ok(t) => eligible.push(t),
            Err((q, why)) => {
                log::warn!("skipping query {q}: {why}");
                skipped.push((q, why));
            }
        }
    }
    if eligible.len() < cfg.n {
        return Err(Error::Data(format!(
            "only {} eligible queries, {} requested",
            eligible.len(),
            cfg.n
        )));
    }
    let count = eligible.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    eligible.shuffle(&mut rng);
    eligible.truncate(cfg.n);
    Ok(TripletBuild {
        triplets: eligible,
        skipped,
        eligible: count,
    })
}
