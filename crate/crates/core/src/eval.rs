//! Relevance judgment and reranking, with and without head knockouts.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::rank_heads_by_ie;
use crate::intervention::{compute_mean_cache, knockout, MeanCache};
use crate::model::{CacheKey, CaptureSet, HeadId, LogitScope, Model, NoHook, TokenSequence};
use crate::patching::{logit_diff, IEGrid};
use crate::positions::{PositionGroup, PositionMap};
use crate::prompt::{Bm25Index, Bm25Params, PromptBuilder, PromptPair, Qrels, Records, Run, Style};

/// Heads to ablate, each at its own position group.
pub type Ablation = Vec<(HeadId, PositionGroup)>;

/// Relevant iff the logit difference is strictly positive.
pub fn judge(ld: f64) -> bool {
    ld > 0.0
}

/// F1 of the positive class; 0 when precision + recall = 0.
pub fn f1(predictions: &[bool], golds: &[bool]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            predictions.len(),
            golds.len()
        )));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fneg = 0usize;
    for (&p, &g) in predictions.iter().zip(golds) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fneg) as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// NDCG@k with gain `2^rel - 1` and discount `log2(rank + 1)`. The ideal DCG
/// uses the grades of the ranked candidates; 0 when it is 0.
pub fn ndcg_at_k(ranking: &[String], qrels: &BTreeMap<String, i32>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Data("NDCG cut-off must be positive".into()));
    }
    let gain = |d: &String| {
        let r = qrels.get(d).copied().unwrap_or(0).max(0);
        2f64.powi(r) - 1.0
    };
    let dcg = |gains: &[f64]| -> f64 {
        gains
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, g)| g / ((i + 2) as f64).log2())
            .sum()
    };
    let gains: Vec<f64> = ranking.iter().map(gain).collect();
    let mut ideal = gains.clone();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg = dcg(&ideal);
    if idcg == 0.0 {
        return Ok(0.0);
    }
    Ok(dcg(&gains) / idcg)
}

/// Candidate indices by descending score, ties by first-stage position.
pub fn order_by_scores(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Win counts over all ordered pairs: `first_wins(i, j)` judges the prompt
/// with `i` first; a "yes" credits `i`, a "no" credits `j`.
pub fn pairwise_wins(n: usize, outcomes: &[((usize, usize), bool)]) -> Vec<usize> {
    let mut wins = vec![0; n];
    for &((i, j), yes) in outcomes {
        wins[if yes { i } else { j }] += 1;
    }
    wins
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingTask {
    pub query_id: String,
    pub query: String,
    /// `(doc id, text)` in first-stage order.
    pub candidates: Vec<(String, String)>,
    pub qrels: BTreeMap<String, i32>,
}

impl RankingTask {
    pub fn first_stage_ids(&self) -> Vec<String> {
        self.candidates.iter().map(|(d, _)| d.clone()).collect()
    }
}

/// Ranking tasks from a first-stage run (or BM25 when `run` is `None`), keeping
/// the top `depth` candidates of every judged query.
pub fn build_ranking_tasks(
    queries: &Records,
    corpus: &Records,
    qrels: &Qrels,
    run: Option<&Run>,
    depth: usize,
    bm25: Bm25Params,
) -> Result<Vec<RankingTask>> {
    let text: HashMap<&str, &str> = corpus.iter().map(|(i, t)| (i.as_str(), t.as_str())).collect();
    let index = match run {
        Some(_) => None,
        None => Some(Bm25Index::build(
            &corpus.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>(),
            bm25,
        )),
    };
    let mut tasks = Vec::new();
    for (qid, q) in queries {
        let Some(judged) = qrels.get(qid) else { continue };
        let ids: Vec<String> = match (run, &index) {
            (Some(r), _) => r
                .get(qid)
                .map(|e| e.iter().take(depth).map(|e| e.doc_id.clone()).collect())
                .unwrap_or_default(),
            (None, Some(ix)) => ix
                .top_k(q, depth)
                .into_iter()
                .map(|(d, _)| corpus[d].0.clone())
                .collect(),
            _ => unreachable!(),
        };
        let mut candidates = Vec::with_capacity(ids.len());
        for d in ids {
            let t = text
                .get(d.as_str())
                .ok_or_else(|| Error::Data(format!("run document {d} is not in the corpus")))?;
            candidates.push((d, t.to_string()));
        }
        if candidates.len() < 2 {
            log::warn!("query {qid}: fewer than two candidates, skipped");
            continue;
        }
        tasks.push(RankingTask {
            query_id: qid.clone(),
            query: q.clone(),
            candidates,
            qrels: judged.clone(),
        });
    }
    Ok(tasks)
}

fn ablation_keys(ablation: &Ablation) -> Vec<CacheKey> {
    let mut keys: Vec<CacheKey> = ablation.iter().map(|(h, _)| CacheKey::head_out(h.layer, h.head)).collect();
    keys.sort();
    keys.dedup();
    keys
}

/// Logit differences of `prompts`, with `ablation` mean-ablated using means
/// over the same prompts.
fn lds_with_ablation(model: &Model, prompts: &[(TokenSequence, PositionMap)], yes: u32, no: u32, ablation: &Ablation) -> Result<Vec<f64>> {
    let means: Option<MeanCache> = if ablation.is_empty() {
        None
    } else {
        Some(compute_mean_cache(model, prompts, &ablation_keys(ablation))?)
    };
    prompts
        .par_iter()
        .map(|(t, map)| {
            let logits = match &means {
                None => model.forward_with(t, &CaptureSet::none(), &NoHook, LogitScope::Last)?.logits,
                Some(m) => knockout(model, t, map, ablation, m, LogitScope::Last)?,
            };
            Ok(logit_diff(logits.last(), yes, no))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgmentResult {
    pub f1: f64,
    /// `(query id, gold, logit difference)` per sample.
    pub samples: Vec<(String, bool, f64)>,
}

/// Each pair yields two samples: the clean prompt (relevant) and the corrupted
/// one (not). Means for ablation come from the pair's two prompts.
pub fn judgment_eval(model: &Model, pairs: &[PromptPair], ablation: &Ablation) -> Result<JudgmentResult> {
    let per_pair: Vec<Vec<f64>> = pairs
        .par_iter()
        .map(|p| {
            let prompts = [(p.clean.clone(), p.map.clone()), (p.corrupted.clone(), p.map.clone())];
            lds_with_ablation(model, &prompts, p.yes_id, p.no_id, ablation)
        })
        .collect::<Result<_>>()?;
    let mut samples = Vec::with_capacity(pairs.len() * 2);
    for (p, lds) in pairs.iter().zip(per_pair) {
        samples.push((p.query_id.clone(), true, lds[0]));
        samples.push((p.query_id.clone(), false, lds[1]));
    }
    let preds: Vec<bool> = samples.iter().map(|s| judge(s.2)).collect();
    let golds: Vec<bool> = samples.iter().map(|s| s.1).collect();
    Ok(JudgmentResult {
        f1: f1(&preds, &golds)?,
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RerankOptions {
    pub k: usize,
    /// Documents longer than this many tokens are cut.
    pub max_doc_tokens: Option<usize>,
}

impl Default for RerankOptions {
    fn default() -> Self {
        Self {
            k: 10,
            max_doc_tokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reranked {
    pub query_id: String,
    /// Candidate indices, best first.
    pub order: Vec<usize>,
    /// Pointwise: logit difference. Pairwise: win count.
    pub scores: Vec<f64>,
    pub ndcg: f64,
}

fn doc_tokens(b: &PromptBuilder, task: &RankingTask, opts: &RerankOptions) -> Result<Vec<Vec<u32>>> {
    task.candidates
        .iter()
        .map(|(_, t)| {
            let mut ids = b.encode(t)?;
            if let Some(m) = opts.max_doc_tokens {
                ids.truncate(m);
            }
            if ids.is_empty() {
                return Err(Error::Data(format!("query {}: empty candidate document", task.query_id)));
            }
            Ok(ids)
        })
        .collect()
}

fn finish(task: &RankingTask, order: Vec<usize>, scores: Vec<f64>, k: usize) -> Result<Reranked> {
    let ids: Vec<String> = order.iter().map(|&i| task.candidates[i].0.clone()).collect();
    Ok(Reranked {
        query_id: task.query_id.clone(),
        ndcg: ndcg_at_k(&ids, &task.qrels, k)?,
        order,
        scores,
    })
}

/// Ranks candidates by the logit difference of their pointwise prompt. Means
/// for ablation are taken over all candidate prompts of the query.
pub fn rerank_pointwise(model: &Model, b: &PromptBuilder, task: &RankingTask, ablation: &Ablation, opts: &RerankOptions) -> Result<Reranked> {
    let docs = doc_tokens(b, task, opts)?;
    let prompts: Vec<(TokenSequence, PositionMap)> = docs
        .iter()
        .map(|d| b.render_single(&task.query, d).map(|r| (r.tokens, r.map)))
        .collect::<Result<_>>()?;
    let (yes, no) = b.answer_ids(Style::Pointwise);
    let scores = lds_with_ablation(model, &prompts, yes, no, ablation)?;
    finish(task, order_by_scores(&scores), scores, opts.k)
}

/// Judges all `n(n-1)` ordered pairs and ranks by win count, ties by
/// first-stage order. Means for ablation are taken over all pair prompts.
pub fn rerank_pairwise(model: &Model, b: &PromptBuilder, task: &RankingTask, ablation: &Ablation, opts: &RerankOptions) -> Result<Reranked> {
    let docs = doc_tokens(b, task, opts)?;
    let n = docs.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    let prompts: Vec<(TokenSequence, PositionMap)> = pairs
        .iter()
        .map(|&(i, j)| b.render_two(&task.query, &docs[i], &docs[j]).map(|r| (r.tokens, r.map)))
        .collect::<Result<_>>()?;
    let (yes, no) = b.answer_ids(Style::Pairwise);
    let lds = lds_with_ablation(model, &prompts, yes, no, ablation)?;
    let outcomes: Vec<((usize, usize), bool)> = pairs.into_iter().zip(lds.into_iter().map(judge)).collect();
    let wins: Vec<f64> = pairwise_wins(n, &outcomes).into_iter().map(|w| w as f64).collect();
    finish(task, order_by_scores(&wins), wins, opts.k)
}

pub fn rerank(model: &Model, b: &PromptBuilder, task: &RankingTask, style: Style, ablation: &Ablation, opts: &RerankOptions) -> Result<Reranked> {
    match style {
        Style::Pointwise => rerank_pointwise(model, b, task, ablation, opts),
        Style::Pairwise => rerank_pairwise(model, b, task, ablation, opts),
    }
}

/// Mean NDCG over tasks plus the individual rankings.
pub fn rerank_all(model: &Model, b: &PromptBuilder, tasks: &[RankingTask], style: Style, ablation: &Ablation, opts: &RerankOptions) -> Result<(f64, Vec<Reranked>)> {
    if tasks.is_empty() {
        return Err(Error::Data("no ranking tasks".into()));
    }
    let out: Vec<Reranked> = tasks
        .par_iter()
        .map(|t| rerank(model, b, t, style, ablation, opts))
        .collect::<Result<_>>()?;
    let mean = out.iter().map(|r| r.ndcg).sum::<f64>() / out.len() as f64;
    Ok((mean, out))
}

/// Mean NDCG of the unchanged first-stage order.
pub fn first_stage_ndcg(tasks: &[RankingTask], k: usize) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::Data("no ranking tasks".into()));
    }
    let mut sum = 0.0;
    for t in tasks {
        sum += ndcg_at_k(&t.first_stage_ids(), &t.qrels, k)?;
    }
    Ok(sum / tasks.len() as f64)
}

/// One row of a knockout plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selection {
    /// `k` uniformly drawn heads at all positions, once per seed.
    Random { k: usize, seeds: Vec<u64> },
    /// Top-`k` heads by mean IE in the head grid of `group`, ablated there.
    Top { group: PositionGroup, k: usize },
    /// Union of the `Top` selections of several groups.
    Mixed { groups: Vec<PositionGroup>, k: usize },
    /// Explicit heads.
    Heads { heads: Ablation },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRow {
    pub name: String,
    #[serde(flatten)]
    pub selection: Selection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoutPlan {
    pub rows: Vec<PlanRow>,
}

impl KnockoutPlan {
    pub fn empty() -> Self {
        Self { rows: Vec::new() }
    }

    /// Random-`k_random`, Doc/Query/Inst/Last-`k_group` and Mixed rows.
    pub fn standard(k_group: usize, k_random: usize, seeds: &[u64]) -> Self {
        let top = |name: &str, group| PlanRow {
            name: format!("{name}-{k_group}"),
            selection: Selection::Top { group, k: k_group },
        };
        Self {
            rows: vec![
                PlanRow {
                    name: format!("Random-{k_random}"),
                    selection: Selection::Random {
                        k: k_random,
                        seeds: seeds.to_vec(),
                    },
                },
                top("Doc", PositionGroup::Documents),
                top("Query", PositionGroup::Query),
                top("Inst", PositionGroup::Instruction),
                top("Last", PositionGroup::Last),
                PlanRow {
                    name: format!("Mixed-{}", 4 * k_group),
                    selection: Selection::Mixed {
                        groups: PositionGroup::STANDARD.to_vec(),
                        k: k_group,
                    },
                },
            ],
        }
    }
}

/// A plan row with its concrete head sets (one per seed for random rows).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRow {
    pub name: String,
    pub seeds: Vec<u64>,
    pub variants: Vec<Ablation>,
}

/// `k` distinct heads drawn uniformly with a seeded generator, sorted.
pub fn random_heads(model: &Model, k: usize, seed: u64) -> Result<Vec<HeadId>> {
    let all = model.all_heads();
    if k > all.len() {
        return Err(Error::Data(format!("cannot draw {k} of {} heads", all.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<HeadId> = rand::seq::index::sample(&mut rng, all.len(), k)
        .into_iter()
        .map(|i| all[i])
        .collect();
    picked.sort();
    Ok(picked)
}

fn top_heads(grids: &BTreeMap<PositionGroup, IEGrid>, group: PositionGroup, k: usize) -> Result<Ablation> {
    let g = grids.get(&group).ok_or_else(|| {
        Error::Data(format!("knockout plan needs a head grid for position group {group}"))
    })?;
    let ranked = rank_heads_by_ie(g);
    if k > ranked.len() {
        return Err(Error::Data(format!("top-{k} requested from {} heads", ranked.len())));
    }
    Ok(ranked.into_iter().take(k).map(|(h, _)| (h, group)).collect())
}

impl KnockoutPlan {
    pub fn resolve(&self, model: &Model, grids: &BTreeMap<PositionGroup, IEGrid>) -> Result<Vec<ResolvedRow>> {
        let (l, h) = (model.n_layers(), model.n_heads());
        self.rows
            .iter()
            .map(|row| {
                let (seeds, variants) = match &row.selection {
                    Selection::Random { k, seeds } => {
                        if seeds.is_empty() {
                            return Err(Error::Data(format!("{}: random row without seeds", row.name)));
                        }
                        let v = seeds
                            .iter()
                            .map(|&s| {
                                random_heads(model, *k, s)
                                    .map(|hs| hs.into_iter().map(|x| (x, PositionGroup::All)).collect())
                            })
                            .collect::<Result<_>>()?;
                        (seeds.clone(), v)
                    }
                    Selection::Top { group, k } => (Vec::new(), vec![top_heads(grids, *group, *k)?]),
                    Selection::Mixed { groups, k } => {
                        let mut all = Vec::new();
                        for g in groups {
                            all.extend(top_heads(grids, *g, *k)?);
                        }
                        (Vec::new(), vec![all])
                    }
                    Selection::Heads { heads } => (Vec::new(), vec![heads.clone()]),
                };
                for v in &variants {
                    if let Some((bad, _)) = v.iter().find(|(x, _)| x.layer >= l || x.head >= h) {
                        return Err(Error::Data(format!(
                            "{}: head {bad} outside the model ({l} layers x {h} heads)",
                            row.name
                        )));
                    }
                }
                Ok(ResolvedRow {
                    name: row.name.clone(),
                    seeds,
                    variants,
                })
            })
            .collect()
    }
}

/// Percent change of `ablated` relative to `full` (negative for a drop).
pub fn percent_change(full: f64, ablated: f64) -> Option<f64> {
    (full != 0.0).then(|| (ablated - full) / full * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Judgment,
    Reranking,
}

impl Task {
    pub fn metric(self) -> &'static str {
        match self {
            Task::Judgment => "F1",
            Task::Reranking => "NDCG@10",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub task: Task,
    pub style: Style,
    pub value: f64,
    pub change_pct: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub n_heads: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<u64>,
    pub heads: Vec<Ablation>,
    pub cells: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnockoutReport {
    pub columns: Vec<(Task, Style)>,
    pub first_stage_ndcg: Option<f64>,
    pub rows: Vec<ReportRow>,
    pub notes: Vec<String>,
}

/// Inputs for [`knockout_eval`]; absent entries skip their columns.
#[derive(Debug, Default)]
pub struct EvalData<'a> {
    pub judgment: BTreeMap<Style, &'a [PromptPair]>,
    pub ranking: Option<&'a [RankingTask]>,
    pub ranking_styles: Vec<Style>,
}

fn metric(model: &Model, b: &PromptBuilder, data: &EvalData, task: Task, style: Style, ablation: &Ablation, opts: &RerankOptions) -> Result<f64> {
    match task {
        Task::Judgment => judgment_eval(model, data.judgment[&style], ablation).map(|r| r.f1),
        Task::Reranking => rerank_all(model, b, data.ranking.unwrap_or(&[]), style, ablation, opts).map(|r| r.0),
    }
}

/// Table of metrics with each plan row's heads mean-ablated; the first row is
/// the full model. Random rows average their seeds.
pub fn knockout_eval(model: &Model, b: &PromptBuilder, rows: &[ResolvedRow], data: &EvalData, opts: &RerankOptions) -> Result<KnockoutReport> {
    let mut columns: Vec<(Task, Style)> = data.judgment.keys().map(|&s| (Task::Judgment, s)).collect();
    if data.ranking.is_some() {
        columns.extend(data.ranking_styles.iter().map(|&s| (Task::Reranking, s)));
    }
    let full: Vec<f64> = columns
        .iter()
        .map(|&(t, s)| metric(model, b, data, t, s, &Vec::new(), opts))
        .collect::<Result<_>>()?;
    let mut out = vec![ReportRow {
        name: "Full model".into(),
        n_heads: 0,
        seeds: Vec::new(),
        heads: Vec::new(),
        cells: columns
            .iter()
            .zip(&full)
            .map(|(&(task, style), &value)| Cell {
                task,
                style,
                value,
                change_pct: None,
                per_seed: Vec::new(),
            })
            .collect(),
    }];
    for row in rows {
        let mut cells = Vec::new();
        for (ci, &(task, style)) in columns.iter().enumerate() {
            let per: Vec<f64> = row
                .variants
                .iter()
                .map(|v| metric(model, b, data, task, style, v, opts))
                .collect::<Result<_>>()?;
            let value = per.iter().sum::<f64>() / per.len() as f64;
            cells.push(Cell {
                task,
                style,
                value,
                change_pct: percent_change(full[ci], value),
                per_seed: if row.seeds.is_empty() { Vec::new() } else { per },
            });
        }
        let n_heads = row.variants.first().map_or(0, |v| {
            let mut hs: Vec<HeadId> = v.iter().map(|(h, _)| *h).collect();
            hs.sort();
            hs.dedup();
            hs.len()
        });
        out.push(ReportRow {
            name: row.name.clone(),
            n_heads,
            seeds: row.seeds.clone(),
            heads: row.variants.clone(),
            cells,
        });
    }
    let first_stage = match data.ranking {
        Some(t) if !t.is_empty() => Some(first_stage_ndcg(t, opts.k)?),
        _ => None,
    };
    Ok(KnockoutReport {
        columns,
        first_stage_ndcg: first_stage,
        rows: out,
        notes: vec![
            "judgment means: per query over its positive and negative prompt".into(),
            "reranking means: per query over all of its candidate prompts".into(),
            "pairwise reranking: all ordered pairs judged, ranked by win count, ties by first-stage order".into(),
            "random rows ablate at all positions and average over their seeds".into(),
        ],
    })
}

impl KnockoutReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Aligned text table: one column per (task, style), `value (change%)` cells.
    pub fn to_table(&self) -> String {
        let mut header = vec!["Setting".to_string()];
        header.extend(
            self.columns
                .iter()
                .map(|(t, s)| format!("{} {} ({})", task_name(*t), s, t.metric())),
        );
        let mut lines: Vec<Vec<String>> = vec![header];
        for r in &self.rows {
            let mut line = vec![r.name.clone()];
            for c in &r.cells {
                line.push(match c.change_pct {
                    Some(p) => format!("{:.2} ({:+.1}%)", c.value, p),
                    None => format!("{:.2}", c.value),
                });
            }
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|i| lines.iter().map(|l| l[i].chars().count()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for (n, l) in lines.iter().enumerate() {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            let _ = writeln!(s, "{}", cells.join("  ").trim_end());
            if n == 0 {
                let _ = writeln!(s, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            }
        }
        if let Some(f) = self.first_stage_ndcg {
            let _ = writeln!(s, "first-stage NDCG@10: {f:.2}");
        }
        s
    }
}

fn task_name(t: Task) -> &'static str {
    match t {
        Task::Judgment => "Judgment",
        Task::Reranking => "Reranking",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_cases() {
        assert_eq!(f1(&[true, false], &[true, false]).unwrap(), 1.0);
        assert_eq!(f1(&[false, false], &[true, false]).unwrap(), 0.0);
        // tp 1, fp 1, fn 1
        assert!((f1(&[true, true, false], &[true, false, true]).unwrap() - 0.5).abs() < 1e-15);
        assert!(f1(&[true], &[]).is_err());
    }

    #[test]
    fn judge_tie_is_nonrelevant() {
        assert!(judge(1.5));
        assert!(!judge(-0.2));
        assert!(!judge(0.0));
    }

    #[test]
    fn ndcg_cases() {
        let q: BTreeMap<String, i32> = [("d1", 2), ("d2", 0), ("d3", 1)]
            .into_iter()
            .map(|(d, r)| (d.to_string(), r))
            .collect();
        let ids = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert_eq!(ndcg_at_k(&ids(&["d1", "d3", "d2"]), &q, 10).unwrap(), 1.0);
        let idcg = 3.0 + 1.0 / 3f64.log2();
        let dcg = 0.0 + 3.0 / 3f64.log2() + 1.0 / 2.0;
        assert!((ndcg_at_k(&ids(&["d2", "d1", "d3"]), &q, 10).unwrap() - dcg / idcg).abs() < 1e-12);
        assert_eq!(ndcg_at_k(&ids(&["x", "y"]), &q, 10).unwrap(), 0.0);
        assert!(ndcg_at_k(&ids(&["d1"]), &q, 0).is_err());
    }

    #[test]
    fn ordering_rules() {
        assert_eq!(order_by_scores(&[2.1, -0.3]), vec![0, 1]);
        assert_eq!(order_by_scores(&[1.0, 1.0, 1.0]), vec![0, 1, 2]);
        let all_yes: Vec<((usize, usize), bool)> = (0..3)
            .flat_map(|i| (0..3).filter(move |&j| j != i).map(move |j| ((i, j), true)))
            .collect();
        assert_eq!(pairwise_wins(3, &all_yes), vec![2, 2, 2]);
    }

    #[test]
    fn percent_change_reference_case() {
        let p = percent_change(0.91, 0.55).unwrap();
        assert!((p - -39.56).abs() < 0.01);
        assert_eq!(percent_change(0.0, 0.5), None);
    }
}
