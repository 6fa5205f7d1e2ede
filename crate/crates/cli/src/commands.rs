use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use relpatch::eval::{
    build_ranking_tasks, first_stage_ndcg, judgment_eval, knockout_eval, rerank_all, EvalData, RankingTask,
    RerankOptions, Selection,
};
use relpatch::fixture::{self, PlantedConfig, TaskConfig};
use relpatch::heads::{head_correlations, head_unembed_topk, interaction_report, rank_heads_by_ie, rbo_report};
use relpatch::model::{CacheKey, CaptureSet, HeadId, Model, Site};
use relpatch::patching::{trace_attention_scores, trace_components, trace_heads, IEGrid, TraceOptions};
use relpatch::positions::PositionGroup;
use relpatch::prompt::{
    build_triplets, format_qrels, format_run, read_qrels, read_records, read_run, read_triplets, triplets_to_jsonl,
    Bm25Params, PromptBuilder, PromptPair, RunEntry, Style, Triplet, TripletConfig,
};
use relpatch::tokenizer::{load_tokenizer, Tokenizer};

use crate::config::{Granularity, Resolved};
use crate::output::{model_id, read_data, Meta, Output};

const RBO_P: f64 = 0.7;
const NDCG_K: usize = 10;
const UNEMBED_TOP: usize = 10;

struct Loaded {
    model: Model,
    tokenizer: Box<dyn Tokenizer>,
    id: String,
}

impl Loaded {
    fn new(cfg: &Resolved) -> Result<Self> {
        let dir = cfg.model.as_deref().expect("validated");
        let model = Model::load_dir(dir, cfg.storage_precision()).context("loading model")?;
        let tokenizer = load_tokenizer(cfg.tokenizer.as_deref().expect("validated")).context("loading tokenizer")?;
        Ok(Loaded {
            id: model_id(dir)?,
            model,
            tokenizer,
        })
    }

    fn builder(&self, cfg: &Resolved) -> Result<PromptBuilder<'_>> {
        PromptBuilder::new(self.tokenizer.as_ref(), cfg.template_config.clone()).context("preparing the template")
    }
}

fn triplets(cfg: &Resolved) -> Result<Vec<Triplet>> {
    let path = cfg.triplets.as_deref().expect("validated");
    let mut t = read_triplets(path).with_context(|| format!("reading triplets {}", path.display()))?;
    if t.is_empty() {
        bail!("{} holds no triplets", path.display());
    }
    if let Some(n) = cfg.n {
        t.truncate(n);
    }
    Ok(t)
}

fn render(b: &PromptBuilder, triplets: &[Triplet], style: Style) -> Result<Vec<PromptPair>> {
    triplets
        .iter()
        .map(|t| b.render(t, style).with_context(|| format!("rendering {style} prompt for query {}", t.query_id)))
        .collect()
}

fn trace_options(cfg: &Resolved) -> TraceOptions {
    TraceOptions {
        eps: cfg.eps,
        clamp: cfg.clamp,
        renormalize: cfg.renormalize,
    }
}

fn grid_file(style: Style, label: &str) -> String {
    format!("grid_{style}_{label}")
}

fn head_label(group: PositionGroup) -> String {
    format!("head_out_{group}")
}

fn write_grid(out: &mut Output, name: &str, grid: &IEGrid) -> Result<()> {
    out.json(&format!("{name}.json"), grid)?;
    out.text(&format!("{name}.csv"), "csv", &grid.to_csv())
}

fn load_grid(dir: &Path, style: Style, label: &str, hint: &str) -> Result<IEGrid> {
    let path = dir.join(format!("{}.json", grid_file(style, label)));
    if !path.exists() {
        bail!("missing grid {}; produce it first with `relpatch trace {hint} --style {style}`", path.display());
    }
    read_data(&path)
}

pub fn fixture(cfg: &Resolved) -> Result<()> {
    let planted = fixture::planted(&PlantedConfig {
        seed: cfg.seed,
        ..PlantedConfig::default()
    })
    .context("building the planted model")?;
    let task = fixture::generate_task(&TaskConfig {
        queries: cfg.n.unwrap_or(60),
        seed: cfg.seed,
        ..TaskConfig::default()
    });
    let model_dir = cfg.out.join("model");
    planted.model.save_dir(&model_dir).context("writing the model")?;
    let meta = Meta::new(cfg, model_id(&model_dir)?);
    let mut out = Output::create(cfg, meta)?;
    for f in ["config.json", "model.safetensors"] {
        let bytes = std::fs::read(model_dir.join(f))?;
        out.record(&format!("model/{f}"), "model", &bytes);
    }
    out.json_object("tokenizer.json", serde_json::from_str(&planted.tokenizer.to_json())?)?;
    let tsv = |records: &[(String, String)]| -> String { records.iter().map(|(i, t)| format!("{i}\t{t}\n")).collect() };
    out.text("queries.tsv", "records", &tsv(&task.queries))?;
    out.text("corpus.tsv", "records", &tsv(&task.corpus))?;
    out.text("qrels.txt", "qrels", &format_qrels(&task.qrels))?;
    let tag = out.meta().tag();
    out.text("run.txt", "run", &format_run(&task.run, &tag))?;
    #[derive(Serialize)]
    struct CircuitFile<'a> {
        template: &'a str,
        circuit: &'a fixture::Circuit,
        queries: usize,
    }
    out.json(
        "circuit.json",
        &CircuitFile {
            template: "fixture",
            circuit: &planted.circuit,
            queries: task.queries.len(),
        },
    )?;
    let manifest = out.finish()?;
    println!(
        "planted model with {} layers x {} heads, {} queries, {} documents",
        planted.model.n_layers(),
        planted.model.n_heads(),
        task.queries.len(),
        task.corpus.len()
    );
    println!(
        "output heads: {}",
        planted.circuit.output_heads.iter().map(HeadId::to_string).collect::<Vec<_>>().join(" ")
    );
    println!("use --template fixture with this model; manifest: {}", manifest.display());
    Ok(())
}

#[derive(Serialize)]
struct BuildReport {
    requested: usize,
    written: usize,
    eligible: usize,
    skipped: Vec<(String, String)>,
}

pub fn build_data(cfg: &Resolved) -> Result<()> {
    let queries = read_records(cfg.queries.as_deref().expect("validated")).context("reading queries")?;
    let corpus = read_records(cfg.corpus.as_deref().expect("validated")).context("reading corpus")?;
    let qrels = read_qrels(cfg.qrels.as_deref().expect("validated")).context("reading qrels")?;
    let tc = TripletConfig {
        n: cfg.n.unwrap_or(100),
        seed: cfg.seed,
        depth: cfg.depth,
        bm25: Bm25Params::default(),
    };
    let built = build_triplets(&queries, &corpus, &qrels, &tc).context("sampling triplets")?;
    let mut out = Output::create(cfg, Meta::new(cfg, "none".into()))?;
    out.text("triplets.jsonl", "triplets", &triplets_to_jsonl(&built.triplets))?;
    out.json(
        "build_report.json",
        &BuildReport {
            requested: tc.n,
            written: built.triplets.len(),
            eligible: built.eligible,
            skipped: built.skipped.clone(),
        },
    )?;
    out.finish()?;
    println!(
        "{} triplets from {} eligible queries, {} skipped",
        built.triplets.len(),
        built.eligible,
        built.skipped.len()
    );
    let mut reasons: BTreeMap<&str, usize> = BTreeMap::new();
    for (_, r) in &built.skipped {
        *reasons.entry(r.as_str()).or_default() += 1;
    }
    for (r, n) in reasons {
        println!("  skipped {n}: {r}");
    }
    Ok(())
}

pub fn trace(cfg: &Resolved) -> Result<()> {
    let l = Loaded::new(cfg)?;
    let b = l.builder(cfg)?;
    let ts = triplets(cfg)?;
    let dataset = cfg
        .triplets
        .as_deref()
        .and_then(Path::file_name)
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let opts = trace_options(cfg);
    let mut out = Output::create(cfg, Meta::new(cfg, l.id.clone()))?;
    for &style in &cfg.styles {
        let pairs = render(&b, &ts, style)?;
        let mut grids: Vec<(String, IEGrid)> = Vec::new();
        match cfg.granularity {
            Granularity::Layer => {
                let gs = trace_components(&l.model, &pairs, &cfg.sites, &cfg.positions, &opts)
                    .with_context(|| format!("tracing {style} layer grids"))?;
                for (site, g) in cfg.sites.iter().zip(gs) {
                    grids.push((site.to_string(), g));
                }
            }
            Granularity::Head => {
                for &group in &cfg.positions {
                    let g = trace_heads(&l.model, &pairs, group, &opts)
                        .with_context(|| format!("tracing {style} heads at {group}"))?;
                    grids.push((head_label(group), g));
                }
            }
            Granularity::AttnScore => {
                let g = trace_attention_scores(&l.model, &pairs, &opts)
                    .with_context(|| format!("tracing {style} attention scores"))?;
                grids.push(("attn_score".into(), g));
            }
        }
        for (label, mut g) in grids {
            g.model = l.id.clone();
            g.dataset = dataset.clone();
            let (r, c) = g.argmax();
            println!(
                "{style} {label}: max mean IE {:.4} at layer {} / {}, {} prompts used, {} excluded",
                g.get(r, c),
                g.rows[r],
                g.cols[c],
                g.counts[r][c],
                g.excluded
            );
            write_grid(&mut out, &grid_file(style, &label), &g)?;
        }
    }
    out.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct TokenTally {
    id: u32,
    token: String,
    count: usize,
    mean_logit: f64,
}

#[derive(Serialize)]
struct HeadTokens {
    head: [usize; 2],
    mean_ie: f64,
    prompts: usize,
    top: Vec<TokenTally>,
}

fn unembed_report(l: &Loaded, pairs: &[PromptPair], ranked: &[(HeadId, f64)]) -> Result<Vec<HeadTokens>> {
    ranked
        .iter()
        .map(|&(head, ie)| {
            let key = CacheKey::head_out(head.layer, head.head);
            let mut tally: BTreeMap<u32, (usize, f64)> = BTreeMap::new();
            for p in pairs {
                let fwd = l.model.forward(&p.clean, &CaptureSet::keys([key]))?;
                for (id, v) in head_unembed_topk(&l.model, &fwd.cache, head, p.map.last(), UNEMBED_TOP)? {
                    let e = tally.entry(id).or_default();
                    e.0 += 1;
                    e.1 += v as f64;
                }
            }
            let mut top: Vec<TokenTally> = tally
                .into_iter()
                .map(|(id, (count, sum))| TokenTally {
                    id,
                    token: l.tokenizer.decode(&[id]).unwrap_or_default(),
                    count,
                    mean_logit: sum / count as f64,
                })
                .collect();
            top.sort_by(|a, b| b.count.cmp(&a.count).then(b.mean_logit.total_cmp(&a.mean_logit)).then(a.id.cmp(&b.id)));
            top.truncate(UNEMBED_TOP);
            Ok(HeadTokens {
                head: [head.layer, head.head],
                mean_ie: ie,
                prompts: pairs.len(),
                top,
            })
        })
        .collect()
}

pub fn heads(cfg: &Resolved) -> Result<()> {
    let grids = cfg.grids.as_deref().expect("validated");
    // every upstream grid is checked before the model is touched
    let mut inputs = Vec::new();
    for &style in &cfg.styles {
        let ie_out = load_grid(grids, style, &head_label(PositionGroup::Last), "--granularity head --positions last")?;
        let ie_attn = load_grid(grids, style, "attn_score", "--granularity attn-score")?;
        inputs.push((style, ie_out, ie_attn));
    }
    let l = Loaded::new(cfg)?;
    let b = l.builder(cfg)?;
    let ts = triplets(cfg)?;
    let mut out = Output::create(cfg, Meta::new(cfg, l.id.clone()))?;
    for (style, ie_out, ie_attn) in inputs {
        let pairs = render(&b, &ts, style)?;
        let inter = interaction_report(&l.model, &pairs).context("interaction scores")?;
        let corr = head_correlations(&ie_out, &ie_attn, &inter).context("correlations")?;
        let ranked: Vec<(HeadId, f64)> = rank_heads_by_ie(&ie_out).into_iter().take(cfg.k).collect();
        let tokens = unembed_report(&l, &pairs, &ranked).context("head unembedding")?;
        if let Some(best) = inter.best() {
            println!("{style}: largest interaction S = {:.4} at {}", best.score, best.head);
        }
        if let Some(p) = corr.pearson_output_vs_attn {
            println!("{style}: pearson(output IE, attention IE) = {p:.4}");
        }
        let mut csv = String::from("layer,head,ie_output,ie_attn,s_pos,s_neg,S\n");
        for h in &corr.heads {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                h.head[0], h.head[1], h.ie_output, h.ie_attn, h.s_pos, h.s_neg, h.score
            ));
        }
        out.json(&format!("interaction_{style}.json"), &inter)?;
        out.json(&format!("correlation_{style}.json"), &corr)?;
        out.text(&format!("heads_{style}.csv"), "csv", &csv)?;
        out.json(&format!("unembed_{style}.json"), &tokens)?;
    }
    let mut rbo = Vec::new();
    for site in [Site::Resid, Site::AttnOut, Site::MlpOut] {
        let a = grids.join(format!("{}.json", grid_file(Style::Pointwise, site.as_str())));
        let b = grids.join(format!("{}.json", grid_file(Style::Pairwise, site.as_str())));
        if !(a.exists() && b.exists()) {
            continue;
        }
        let (ga, gb): (IEGrid, IEGrid) = (read_data(&a)?, read_data(&b)?);
        for col in &ga.cols {
            if gb.col_index(col).is_some() {
                rbo.push(rbo_report(&ga, &gb, col, RBO_P)?);
            }
        }
    }
    if rbo.is_empty() {
        println!("no pointwise/pairwise layer grid pairs in {}; RBO skipped", grids.display());
    } else {
        for r in &rbo {
            println!("RBO {} {} = {:.4}", r.site, r.column, r.rbo);
        }
        out.json("rbo.json", &rbo)?;
    }
    out.finish()?;
    Ok(())
}

fn ranking_tasks(cfg: &Resolved) -> Result<Option<Vec<RankingTask>>> {
    let (Some(q), Some(c), Some(r)) = (&cfg.queries, &cfg.corpus, &cfg.qrels) else {
        return Ok(None);
    };
    let queries = read_records(q).context("reading queries")?;
    let corpus = read_records(c).context("reading corpus")?;
    let qrels = read_qrels(r).context("reading qrels")?;
    let run = cfg.run.as_deref().map(read_run).transpose().context("reading run")?;
    let mut tasks = build_ranking_tasks(&queries, &corpus, &qrels, run.as_ref(), cfg.depth, Bm25Params::default())
        .context("building ranking tasks")?;
    if let Some(n) = cfg.n {
        tasks.truncate(n);
    }
    if tasks.is_empty() {
        bail!("no judged query has at least two candidates");
    }
    Ok(Some(tasks))
}

pub fn eval(cfg: &Resolved) -> Result<()> {
    let plan = cfg.plan.as_ref().expect("validated");
    let mut needed = BTreeSet::new();
    for row in &plan.rows {
        match &row.selection {
            Selection::Top { group, .. } => {
                needed.insert(*group);
            }
            Selection::Mixed { groups, .. } => needed.extend(groups.iter().copied()),
            _ => {}
        }
    }
    let mut grids = BTreeMap::new();
    for g in needed {
        let dir = cfg.grids.as_deref().expect("validated");
        let hint = format!("--granularity head --positions {g}");
        grids.insert(g, load_grid(dir, cfg.grid_style, &head_label(g), &hint)?);
    }
    let ranking = ranking_tasks(cfg)?;
    let l = Loaded::new(cfg)?;
    let b = l.builder(cfg)?;
    let rows = plan.resolve(&l.model, &grids).context("resolving the knockout plan")?;
    let ts = triplets(cfg)?;
    let pairs: Vec<(Style, Vec<PromptPair>)> =
        cfg.styles.iter().map(|&s| Ok((s, render(&b, &ts, s)?))).collect::<Result<_>>()?;
    let mut data = EvalData {
        ranking: ranking.as_deref(),
        ranking_styles: cfg.styles.clone(),
        ..EvalData::default()
    };
    for (s, p) in &pairs {
        data.judgment.insert(*s, p.as_slice());
    }
    let opts = RerankOptions {
        k: NDCG_K,
        max_doc_tokens: None,
    };
    let report = knockout_eval(&l.model, &b, &rows, &data, &opts).context("knockout evaluation")?;
    let table = report.to_table();
    print!("{table}");
    let mut out = Output::create(cfg, Meta::new(cfg, l.id.clone()))?;
    out.json("eval_report.json", &report)?;
    out.text("eval_report.txt", "table", &table)?;
    out.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct Judgments<'a> {
    style: Style,
    f1: f64,
    n: usize,
    samples: &'a [(String, bool, f64)],
}

pub fn judge(cfg: &Resolved) -> Result<()> {
    let l = Loaded::new(cfg)?;
    let b = l.builder(cfg)?;
    let ts = triplets(cfg)?;
    let mut out = Output::create(cfg, Meta::new(cfg, l.id.clone()))?;
    for &style in &cfg.styles {
        let pairs = render(&b, &ts, style)?;
        let r = judgment_eval(&l.model, &pairs, &Vec::new()).with_context(|| format!("{style} judgments"))?;
        println!("{style}: F1 = {:.4} over {} prompts", r.f1, r.samples.len());
        let mut csv = String::from("query_id,gold,logit_diff,judged_relevant\n");
        for (q, gold, ld) in &r.samples {
            csv.push_str(&format!("{q},{gold},{ld},{}\n", relpatch::eval::judge(*ld)));
        }
        out.json(
            &format!("judge_{style}.json"),
            &Judgments {
                style,
                f1: r.f1,
                n: r.samples.len(),
                samples: &r.samples,
            },
        )?;
        out.text(&format!("judge_{style}.csv"), "csv", &csv)?;
    }
    out.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct RerankSummary {
    style: Style,
    k: usize,
    ndcg: f64,
    first_stage_ndcg: f64,
    protocol: &'static str,
    per_query: Vec<(String, f64)>,
}

pub fn rerank(cfg: &Resolved) -> Result<()> {
    let tasks = ranking_tasks(cfg)?.expect("validated");
    let l = Loaded::new(cfg)?;
    let b = l.builder(cfg)?;
    let opts = RerankOptions {
        k: NDCG_K,
        max_doc_tokens: None,
    };
    let first = first_stage_ndcg(&tasks, NDCG_K)?;
    let mut out = Output::create(cfg, Meta::new(cfg, l.id.clone()))?;
    let tag = out.meta().tag();
    for &style in &cfg.styles {
        let (ndcg, runs) = rerank_all(&l.model, &b, &tasks, style, &Vec::new(), &opts)
            .with_context(|| format!("{style} reranking"))?;
        println!("{style}: NDCG@{NDCG_K} = {ndcg:.4} (first stage {first:.4}) over {} queries", tasks.len());
        let mut run = BTreeMap::new();
        for (t, r) in tasks.iter().zip(&runs) {
            run.insert(
                t.query_id.clone(),
                r.order
                    .iter()
                    .map(|&i| RunEntry {
                        doc_id: t.candidates[i].0.clone(),
                        score: r.scores[i],
                    })
                    .collect(),
            );
        }
        out.text(&format!("rerank_{style}.run"), "run", &format_run(&run, &tag))?;
        out.json(
            &format!("rerank_{style}.json"),
            &RerankSummary {
                style,
                k: NDCG_K,
                ndcg,
                first_stage_ndcg: first,
                protocol: match style {
                    Style::Pointwise => "candidates ordered by logit difference, ties by first-stage order",
                    Style::Pairwise => {
                        "all ordered pairs judged, ranked by win count, ties by first-stage order"
                    }
                },
                per_query: runs.iter().map(|r| (r.query_id.clone(), r.ndcg)).collect(),
            },
        )?;
    }
    out.finish()?;
    Ok(())
}
