//! Per-head analyses: logit-lens projection of head outputs, attention
//! interaction scores, correlations and rank-biased overlap.

use std::collections::HashSet;
use std::hash::Hash;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ActivationCache, CacheKey, CaptureSet, HeadId, LogitScope, Model, NoHook, Site};
use crate::patching::IEGrid;
use crate::prompt::{PromptPair, Style};
use crate::tensor::Matrix;

/// Top-`k` vocabulary entries of `W_U · head_out[position] + b`, by descending
/// logit, ties by token id. The final normalization is not applied.
pub fn head_unembed_topk(model: &Model, cache: &ActivationCache, head: HeadId, position: usize, k: usize) -> Result<Vec<(u32, f32)>> {
    let m = cache.require(&CacheKey::head_out(head.layer, head.head))?;
    if position >= m.rows() {
        return Err(Error::Shape(format!("position {position} outside {} cached rows", m.rows())));
    }
    let logits = model.unembed(m.row(position))?;
    Ok(top_k(&logits, k))
}

/// Indices and values of the `k` largest entries, ties by index.
pub fn top_k(values: &[f32], k: usize) -> Vec<(u32, f32)> {
    let mut idx: Vec<u32> = (0..values.len() as u32).collect();
    idx.sort_by(|&a, &b| values[b as usize].total_cmp(&values[a as usize]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.into_iter().map(|i| (i, values[i as usize])).collect()
}

/// `s = Σ_{i ∈ query} max_{k ∈ doc} A[i, k]`.
pub fn attention_interaction_s(pattern: &Matrix, query: Range<usize>, doc: Range<usize>) -> Result<f64> {
    if query.is_empty() || doc.is_empty() {
        return Err(Error::Data("interaction score over an empty span".into()));
    }
    if query.end > pattern.rows() || doc.end > pattern.cols() {
        return Err(Error::Shape(format!(
            "spans {query:?} / {doc:?} outside a {}x{} pattern",
            pattern.rows(),
            pattern.cols()
        )));
    }
    if query.start < doc.end {
        return Err(Error::Data(format!(
            "query span {query:?} must follow document span {doc:?}"
        )));
    }
    Ok(query
        .map(|i| {
            pattern.row(i)[doc.clone()]
                .iter()
                .copied()
                .fold(f32::NEG_INFINITY, f32::max) as f64
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadInteraction {
    pub head: HeadId,
    pub s_pos: f64,
    pub s_neg: f64,
    #[serde(rename = "S")]
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionReport {
    pub style: Style,
    /// Number of prompts averaged.
    pub n: usize,
    pub heads: Vec<HeadInteraction>,
}

impl InteractionReport {
    pub fn get(&self, head: HeadId) -> Option<&HeadInteraction> {
        self.heads.iter().find(|h| h.head == head)
    }

    /// Head with the largest S; first in layer/head order on ties.
    pub fn best(&self) -> Option<&HeadInteraction> {
        self.heads
            .iter()
            .fold(None, |best: Option<&HeadInteraction>, h| match best {
                Some(b) if b.score >= h.score => Some(b),
                _ => Some(h),
            })
    }
}

fn span(pair: &PromptPair, slot: u8) -> Result<Range<usize>> {
    pair.map
        .document_span(slot)
        .ok_or_else(|| Error::Data(format!("prompt {} has no document slot {slot}", pair.query_id)))
}

fn s_all_heads(model: &Model, tokens: &crate::model::TokenSequence, query: Range<usize>, docs: &[Range<usize>]) -> Result<Vec<Vec<f64>>> {
    let out = model.forward_with(tokens, &CaptureSet::sites(&[Site::AttnPattern]), &NoHook, LogitScope::Last)?;
    docs.iter()
        .map(|d| {
            model
                .all_heads()
                .into_iter()
                .map(|h| {
                    let a = out.cache.require(&CacheKey::pattern(h.layer, h.head))?;
                    attention_interaction_s(a, query.clone(), d.clone())
                })
                .collect()
        })
        .collect()
}

/// Per-head `s_pos`, `s_neg` and `S = s_pos - s_neg` for one prompt pair.
///
/// Pointwise runs the clean (positive) and corrupted (negative) prompts once
/// each. Pairwise runs the clean prompt only and reads the two document spans.
pub fn interaction_score(model: &Model, pair: &PromptPair) -> Result<InteractionReport> {
    let query = pair
        .map
        .query_span()
        .ok_or_else(|| Error::Data(format!("prompt {} has no query span", pair.query_id)))?;
    let (pos, neg) = match pair.style {
        Style::Pointwise => {
            let d = span(pair, 0)?;
            let p = s_all_heads(model, &pair.clean, query.clone(), &[d.clone()])?;
            let n = s_all_heads(model, &pair.corrupted, query, &[d])?;
            (p.into_iter().next().unwrap(), n.into_iter().next().unwrap())
        }
        Style::Pairwise => {
            let mut both = s_all_heads(model, &pair.clean, query, &[span(pair, 0)?, span(pair, 1)?])?;
            let n = both.pop().unwrap();
            (both.pop().unwrap(), n)
        }
    };
    Ok(InteractionReport {
        style: pair.style,
        n: 1,
        heads: model
            .all_heads()
            .into_iter()
            .zip(pos.into_iter().zip(neg))
            .map(|(head, (s_pos, s_neg))| HeadInteraction {
                head,
                s_pos,
                s_neg,
                score: s_pos - s_neg,
            })
            .collect(),
    })
}

/// Dataset means of the per-prompt interaction reports.
pub fn interaction_report(model: &Model, pairs: &[PromptPair]) -> Result<InteractionReport> {
    let first = pairs.first().ok_or_else(|| Error::Data("empty prompt dataset".into()))?;
    let reports: Vec<InteractionReport> = pairs
        .par_iter()
        .map(|p| interaction_score(model, p))
        .collect::<Result<_>>()?;
    let n = reports.len() as f64;
    let heads = model
        .all_heads()
        .into_iter()
        .enumerate()
        .map(|(i, head)| {
            let s_pos = reports.iter().map(|r| r.heads[i].s_pos).sum::<f64>() / n;
            let s_neg = reports.iter().map(|r| r.heads[i].s_neg).sum::<f64>() / n;
            HeadInteraction {
                head,
                s_pos,
                s_neg,
                score: s_pos - s_neg,
            }
        })
        .collect();
    Ok(InteractionReport {
        style: first.style,
        n: reports.len(),
        heads,
    })
}

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::Data(format!("correlation of {} vs {} values", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::Undefined("correlation needs at least two points".into()));
    }
    Ok(())
}

/// Sample Pearson correlation (two-pass).
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation with zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks, ties share their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    pearson(&average_ranks(xs), &average_ranks(ys))
}

fn prefix_overlaps<T: Eq + Hash + Clone>(a: &[T], b: &[T]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::Data(format!("rankings of depth {} and {}", a.len(), b.len())));
    }
    let mut sa = HashSet::new();
    let mut sb = HashSet::new();
    let mut x = 0;
    let mut out = Vec::with_capacity(a.len());
    for (ai, bi) in a.iter().zip(b) {
        if !sa.insert(ai.clone()) || !sb.insert(bi.clone()) {
            return Err(Error::Data("ranking contains a duplicate item".into()));
        }
        if ai == bi {
            x += 1;
        } else {
            x += sb.contains(ai) as usize + sa.contains(bi) as usize;
        }
        out.push(x);
    }
    Ok(out)
}

fn check_p(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Data(format!("RBO persistence p = {p} outside (0, 1)")));
    }
    Ok(())
}

/// Extrapolated rank-biased overlap of two equal-depth rankings:
/// `(X_k/k) p^k + ((1-p)/p) Σ_{d=1..k} (X_d/d) p^d`.
pub fn rbo<T: Eq + Hash + Clone>(a: &[T], b: &[T], p: f64) -> Result<f64> {
    check_p(p)?;
    let x = prefix_overlaps(a, b)?;
    let k = a.len();
    if k == 0 {
        return Err(Error::Data("RBO of empty rankings".into()));
    }
    if a == b {
        return Ok(1.0);
    }
    let mut sum = 0.0;
    let mut pd = 1.0;
    for (d, &xd) in x.iter().enumerate() {
        pd *= p;
        sum += xd as f64 / (d + 1) as f64 * pd;
    }
    let v = x[k - 1] as f64 / k as f64 * pd + (1.0 - p) / p * sum;
    Ok(v.clamp(0.0, 1.0))
}

/// Truncated rank-biased overlap `(1-p) Σ_{d=1..k} p^{d-1} X_d/d` (a lower bound).
pub fn rbo_truncated<T: Eq + Hash + Clone>(a: &[T], b: &[T], p: f64) -> Result<f64> {
    check_p(p)?;
    let x = prefix_overlaps(a, b)?;
    let mut sum = 0.0;
    let mut pd = 1.0;
    for (d, &xd) in x.iter().enumerate() {
        sum += pd * xd as f64 / (d + 1) as f64;
        pd *= p;
    }
    Ok((1.0 - p) * sum)
}

/// Extrapolated RBO for two permutations of the same universe.
pub fn rbo_permutations<T: Eq + Hash + Clone>(a: &[T], b: &[T], p: f64) -> Result<f64> {
    let ua: HashSet<&T> = a.iter().collect();
    let ub: HashSet<&T> = b.iter().collect();
    if ua.len() != a.len() || ub.len() != b.len() {
        return Err(Error::Data("ranking contains a duplicate item".into()));
    }
    if ua != ub {
        return Err(Error::Data("rankings cover different universes".into()));
    }
    rbo(a, b, p)
}

/// Layers by descending mean IE in `column`, ties by layer index.
pub fn rank_layers_by_ie(grid: &IEGrid, column: &str) -> Result<Vec<usize>> {
    let col = grid.column(column)?;
    let mut order: Vec<usize> = (0..col.len()).collect();
    order.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
    Ok(order.into_iter().map(|i| grid.rows[i]).collect())
}

/// Heads by descending mean IE in a layer × head grid, ties by (layer, head).
pub fn rank_heads_by_ie(grid: &IEGrid) -> Vec<(HeadId, f64)> {
    let mut all: Vec<(HeadId, f64)> = grid
        .rows
        .iter()
        .enumerate()
        .flat_map(|(r, &layer)| {
            grid.mean_ie[r]
                .iter()
                .enumerate()
                .map(move |(h, &v)| (HeadId::new(layer, h), v))
        })
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RboReport {
    pub site: String,
    pub column: String,
    pub p: f64,
    pub rbo: f64,
    pub ranking_a: Vec<usize>,
    pub ranking_b: Vec<usize>,
}

/// RBO between the layer rankings of two grids (e.g. pointwise vs pairwise).
pub fn rbo_report(a: &IEGrid, b: &IEGrid, column: &str, p: f64) -> Result<RboReport> {
    let ranking_a = rank_layers_by_ie(a, column)?;
    let ranking_b = rank_layers_by_ie(b, column)?;
    Ok(RboReport {
        site: a.site.clone(),
        column: column.to_string(),
        p,
        rbo: rbo_permutations(&ranking_a, &ranking_b, p)?,
        ranking_a,
        ranking_b,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRow {
    pub head: [usize; 2],
    pub ie_output: f64,
    pub ie_attn: f64,
    pub s_pos: f64,
    pub s_neg: f64,
    #[serde(rename = "S")]
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// How points are formed.
    pub points: String,
    pub pearson_output_vs_attn: Option<f64>,
    pub pearson_output_vs_s: Option<f64>,
    pub spearman_output_vs_attn: Option<f64>,
    pub spearman_output_vs_s: Option<f64>,
    pub heads: Vec<HeadRow>,
}

/// One point per head: head-output IE vs attention-score IE and vs mean S.
/// Undefined correlations (zero variance) are reported as `null`.
pub fn head_correlations(ie_output: &IEGrid, ie_attn: &IEGrid, inter: &InteractionReport) -> Result<CorrelationReport> {
    if ie_output.mean_ie.len() != ie_attn.mean_ie.len() || ie_output.cols != ie_attn.cols {
        return Err(Error::Shape("head grids have different shapes".into()));
    }
    let mut heads = Vec::new();
    for (r, &layer) in ie_output.rows.iter().enumerate() {
        for h in 0..ie_output.n_cols() {
            let id = HeadId::new(layer, h);
            let s = inter
                .get(id)
                .ok_or_else(|| Error::Data(format!("interaction report lacks {id}")))?;
            heads.push(HeadRow {
                head: [layer, h],
                ie_output: ie_output.mean_ie[r][h],
                ie_attn: ie_attn.mean_ie[r][h],
                s_pos: s.s_pos,
                s_neg: s.s_neg,
                score: s.score,
            });
        }
    }
    let out: Vec<f64> = heads.iter().map(|h| h.ie_output).collect();
    let att: Vec<f64> = heads.iter().map(|h| h.ie_attn).collect();
    let sc: Vec<f64> = heads.iter().map(|h| h.score).collect();
    Ok(CorrelationReport {
        points: "per-head dataset means".into(),
        pearson_output_vs_attn: pearson(&out, &att).ok(),
        pearson_output_vs_s: pearson(&out, &sc).ok(),
        spearman_output_vs_attn: spearman(&out, &att).ok(),
        spearman_output_vs_s: spearman(&out, &sc).ok(),
        heads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn s_extremes() {
        let mut a = Matrix::zeros(6, 6);
        for i in 3..6 {
            a.set(i, i % 3, 1.0);
        }
        assert_eq!(attention_interaction_s(&a, 3..6, 0..3).unwrap(), 3.0);
        let b = Matrix::zeros(6, 6);
        assert_eq!(attention_interaction_s(&b, 3..6, 0..3).unwrap(), 0.0);
        assert!(attention_interaction_s(&a, 3..3, 0..3).is_err());
        assert!(attention_interaction_s(&a, 1..4, 0..3).is_err());
    }

    #[test]
    fn pearson_lines() {
        let xs = [1.0, 2.0, 4.0, 7.0];
        let up: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let down: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &up).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&xs, &down).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(pearson(&xs, &[1.0; 4]), Err(Error::Undefined(_))));
    }

    #[test]
    fn spearman_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 1000.0]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rbo_endpoints() {
        let a = ["a", "b", "c"];
        assert_eq!(rbo(&a, &a, 0.7).unwrap(), 1.0);
        assert_eq!(rbo(&a, &["x", "y", "z"], 0.7).unwrap(), 0.0);
        assert!(rbo(&a, &["a", "a", "b"], 0.7).is_err());
        assert!(rbo_permutations(&a, &["a", "b", "d"], 0.7).is_err());
        assert!(rbo(&a, &a, 1.0).is_err());
        // [a,b,c] vs [a,c,b]: X = 1, 1, 3
        let p: f64 = 0.7;
        let want = 3.0 / 3.0 * p.powi(3) + (1.0 - p) / p * (p + 0.5 * p * p + p.powi(3));
        assert!((rbo(&a, &["a", "c", "b"], p).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn topk_ties_by_id() {
        assert_eq!(top_k(&[1.0, 3.0, 3.0, 0.0], 3), vec![(1, 3.0), (2, 3.0), (0, 1.0)]);
    }
}
