//! Experiment settings: flags, `RELPATCH_*` environment variables and an
//! optional JSON config file, resolved and validated before any compute.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use relpatch::eval::KnockoutPlan;
use relpatch::model::{Site, StoragePrecision};
use relpatch::positions::PositionGroup;
use relpatch::prompt::{Style, TemplateConfig};

/// Every setting is optional here; a flag beats the environment, which beats
/// the config file, which beats the built-in default.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// Model directory (config.json + *.safetensors)
    #[arg(long, env = "RELPATCH_MODEL")]
    pub model: Option<PathBuf>,
    /// tokenizer.json, fixture tokenizer file, or a directory holding one
    #[arg(long, env = "RELPATCH_TOKENIZER")]
    pub tokenizer: Option<PathBuf>,
    /// Template preset (plain, llama3, qwen2, mistral, fixture) or JSON file
    #[arg(long, env = "RELPATCH_TEMPLATE")]
    pub template: Option<String>,
    /// Queries: id<TAB>text or JSON lines
    #[arg(long, env = "RELPATCH_QUERIES")]
    pub queries: Option<PathBuf>,
    #[arg(long, env = "RELPATCH_CORPUS")]
    pub corpus: Option<PathBuf>,
    /// TREC qrels
    #[arg(long, env = "RELPATCH_QRELS")]
    pub qrels: Option<PathBuf>,
    /// First-stage TREC run (BM25 over the corpus when absent)
    #[arg(long, env = "RELPATCH_RUN")]
    pub run: Option<PathBuf>,
    /// Triplet JSON lines written by build-data
    #[arg(long, env = "RELPATCH_TRIPLETS")]
    pub triplets: Option<PathBuf>,
    /// Directory with grids written by trace
    #[arg(long, env = "RELPATCH_GRIDS")]
    pub grids: Option<PathBuf>,
    /// Knockout plan: "standard" or a JSON file
    #[arg(long, env = "RELPATCH_PLAN")]
    pub plan: Option<String>,
    /// pointwise, pairwise or both
    #[arg(long, env = "RELPATCH_STYLE")]
    pub style: Option<String>,
    /// Comma-separated layer-level sites: resid, attn_out, mlp_out
    #[arg(long, env = "RELPATCH_SITE")]
    pub site: Option<String>,
    /// layer, head or attn-score
    #[arg(long, env = "RELPATCH_GRANULARITY")]
    pub granularity: Option<String>,
    /// Comma-separated position groups
    #[arg(long, env = "RELPATCH_POSITIONS")]
    pub positions: Option<String>,
    #[arg(long, env = "RELPATCH_SEED")]
    pub seed: Option<u64>,
    /// IE denominators at or below this magnitude exclude the prompt
    #[arg(long, env = "RELPATCH_EPS")]
    pub eps: Option<f64>,
    #[arg(long, env = "RELPATCH_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, env = "RELPATCH_THREADS")]
    pub threads: Option<usize>,
    /// Number of triplets (build-data) or a cap on prompts / queries used
    #[arg(long, env = "RELPATCH_N")]
    pub n: Option<usize>,
    /// BM25 depth for negatives, and first-stage depth for reranking
    #[arg(long, env = "RELPATCH_DEPTH")]
    pub depth: Option<usize>,
    /// Heads per group in the standard plan; heads listed by `heads`
    #[arg(long, env = "RELPATCH_K")]
    pub k: Option<usize>,
    /// Heads in the Random row of the standard plan (default 4k)
    #[arg(long, env = "RELPATCH_K_RANDOM")]
    pub k_random: Option<usize>,
    /// Comma-separated seeds for Random rows
    #[arg(long, env = "RELPATCH_SEEDS")]
    pub seeds: Option<String>,
    /// Style whose head grids select Top/Mixed heads
    #[arg(long, env = "RELPATCH_GRID_STYLE")]
    pub grid_style: Option<String>,
    /// f32 or native
    #[arg(long, env = "RELPATCH_PRECISION")]
    pub precision: Option<String>,
    #[arg(long, env = "RELPATCH_CLAMP", num_args = 0..=1, default_missing_value = "true")]
    pub clamp: Option<bool>,
    #[arg(long, env = "RELPATCH_RENORMALIZE", num_args = 0..=1, default_missing_value = "true")]
    pub renormalize: Option<bool>,
}

macro_rules! merge_fields {
    ($a:ident, $b:ident; $($f:ident),*) => {
        Settings { $($f: $a.$f.or($b.$f)),* }
    };
}

impl Settings {
    pub fn or(self, file: Settings) -> Settings {
        let a = self;
        let b = file;
        merge_fields!(a, b; model, tokenizer, template, queries, corpus, qrels, run, triplets, grids, plan,
            style, site, granularity, positions, seed, eps, out, threads, n, depth, k, k_random, seeds,
            grid_style, precision, clamp, renormalize)
    }

    pub fn with_file(self, path: Option<&Path>) -> Result<Settings> {
        let Some(p) = path else { return Ok(self) };
        let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
        let file: Settings = serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
        Ok(self.or(file))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    Layer,
    Head,
    AttnScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Fixture,
    BuildData,
    Trace,
    Heads,
    Eval,
    Judge,
    Rerank,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Fixture => "fixture",
            Command::BuildData => "build-data",
            Command::Trace => "trace",
            Command::Heads => "heads",
            Command::Eval => "eval",
            Command::Judge => "judge",
            Command::Rerank => "rerank",
        }
    }

    fn needs_model(self) -> bool {
        !matches!(self, Command::Fixture | Command::BuildData)
    }
}

/// Settings after defaults and parsing. Everything that can change an output
/// byte is serialized into the config hash.
#[derive(Debug, Clone, Serialize)]
pub struct Resolved {
    pub command: &'static str,
    pub model: Option<PathBuf>,
    pub tokenizer: Option<PathBuf>,
    pub template: String,
    pub queries: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    pub run: Option<PathBuf>,
    pub triplets: Option<PathBuf>,
    pub grids: Option<PathBuf>,
    pub plan: Option<KnockoutPlan>,
    pub styles: Vec<Style>,
    pub sites: Vec<Site>,
    pub granularity: Granularity,
    pub positions: Vec<PositionGroup>,
    pub seed: u64,
    pub eps: f64,
    pub n: Option<usize>,
    pub depth: usize,
    pub k: usize,
    pub grid_style: Style,
    pub precision: &'static str,
    pub clamp: bool,
    pub renormalize: bool,
    #[serde(skip)]
    pub template_config: TemplateConfig,
    #[serde(skip)]
    pub out: PathBuf,
    #[serde(skip)]
    pub threads: usize,
}

fn list<T>(s: &str, what: &str, parse: impl Fn(&str) -> relpatch::Result<T>) -> Result<Vec<T>> {
    let items: Vec<T> = s
        .split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| parse(x).with_context(|| format!("--{what}")))
        .collect::<Result<_>>()?;
    ensure!(!items.is_empty(), "--{what} is empty");
    Ok(items)
}

fn styles(s: &str) -> Result<Vec<Style>> {
    if s == "both" {
        return Ok(vec![Style::Pointwise, Style::Pairwise]);
    }
    list(s, "style", str::parse)
}

fn existing(p: &Option<PathBuf>, flag: &str, cmd: Command) -> Result<PathBuf> {
    match p {
        None => bail!("{} needs --{flag}", cmd.name()),
        Some(p) if !p.exists() => bail!("--{flag}: {} does not exist", p.display()),
        Some(p) => Ok(p.clone()),
    }
}

fn optional(p: &Option<PathBuf>, flag: &str) -> Result<Option<PathBuf>> {
    if let Some(p) = p {
        ensure!(p.exists(), "--{flag}: {} does not exist", p.display());
    }
    Ok(p.clone())
}

impl Resolved {
    pub fn new(cmd: Command, s: &Settings) -> Result<Self> {
        let seed = s.seed.unwrap_or(0);
        let eps = s.eps.unwrap_or(1e-3);
        ensure!(eps > 0.0 && eps.is_finite(), "--eps must be positive, got {eps}");
        let threads = s.threads.unwrap_or(0);
        let out = s.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        ensure!(!out.is_file(), "--out: {} is a file", out.display());

        let granularity = match s.granularity.as_deref().unwrap_or("layer") {
            "layer" => Granularity::Layer,
            "head" => Granularity::Head,
            "attn-score" | "attn_score" => Granularity::AttnScore,
            other => bail!("--granularity: expected layer, head or attn-score, got {other:?}"),
        };
        let sites: Vec<Site> = list(s.site.as_deref().unwrap_or("resid,attn_out,mlp_out"), "site", str::parse)?;
        if let Some(bad) = sites.iter().find(|x| x.is_per_head()) {
            bail!("--site: {bad} is per head; use --granularity head or attn-score instead");
        }
        let default_positions = match granularity {
            Granularity::Layer => "documents,query,instruction,last",
            _ => "last",
        };
        let positions: Vec<PositionGroup> = list(s.positions.as_deref().unwrap_or(default_positions), "positions", str::parse)?;
        let default_style = match cmd {
            Command::Eval | Command::Judge => "both",
            _ => "pointwise",
        };
        let styles = styles(s.style.as_deref().unwrap_or(default_style))?;
        let grid_style: Style = s
            .grid_style
            .as_deref()
            .unwrap_or("pointwise")
            .parse()
            .context("--grid-style")?;
        let precision = match s.precision.as_deref().unwrap_or("f32") {
            "f32" => "f32",
            "native" => "native",
            other => bail!("--precision: expected f32 or native, got {other:?}"),
        };
        let k = s.k.unwrap_or(match cmd {
            Command::Heads => 5,
            _ => 20,
        });
        ensure!(k > 0, "--k must be positive");
        if let Some(n) = s.n {
            ensure!(n > 0, "--n must be positive");
        }
        let depth = s.depth.unwrap_or(100);
        ensure!(depth > 0, "--depth must be positive");

        let template = s.template.clone().unwrap_or_else(|| "plain".into());
        let template_config = TemplateConfig::load(&template).with_context(|| format!("--template {template}"))?;

        let mut r = Resolved {
            command: cmd.name(),
            model: None,
            tokenizer: None,
            template,
            queries: None,
            corpus: None,
            qrels: None,
            run: optional(&s.run, "run")?,
            triplets: None,
            grids: None,
            plan: None,
            styles,
            sites,
            granularity,
            positions,
            seed,
            eps,
            n: s.n,
            depth,
            k,
            grid_style,
            precision,
            clamp: s.clamp.unwrap_or(false),
            renormalize: s.renormalize.unwrap_or(false),
            template_config,
            out,
            threads,
        };
        if cmd.needs_model() {
            r.model = Some(existing(&s.model, "model", cmd)?);
            r.tokenizer = Some(existing(&s.tokenizer, "tokenizer", cmd)?);
        }
        match cmd {
            Command::Fixture => {}
            Command::BuildData | Command::Rerank => {
                r.queries = Some(existing(&s.queries, "queries", cmd)?);
                r.corpus = Some(existing(&s.corpus, "corpus", cmd)?);
                r.qrels = Some(existing(&s.qrels, "qrels", cmd)?);
            }
            Command::Trace | Command::Judge => r.triplets = Some(existing(&s.triplets, "triplets", cmd)?),
            Command::Heads => {
                r.triplets = Some(existing(&s.triplets, "triplets", cmd)?);
                r.grids = Some(existing(&s.grids, "grids", cmd)?);
            }
            Command::Eval => {
                r.triplets = Some(existing(&s.triplets, "triplets", cmd)?);
                r.queries = optional(&s.queries, "queries")?;
                r.corpus = optional(&s.corpus, "corpus")?;
                r.qrels = optional(&s.qrels, "qrels")?;
                let ranking = [&r.queries, &r.corpus, &r.qrels].iter().filter(|p| p.is_some()).count();
                ensure!(
                    ranking == 0 || ranking == 3,
                    "eval: reranking columns need all of --queries, --corpus and --qrels"
                );
                let plan = plan(s, k)?;
                let needs_grids = plan.rows.iter().any(|row| {
                    !matches!(
                        row.selection,
                        relpatch::eval::Selection::Random { .. } | relpatch::eval::Selection::Heads { .. }
                    )
                });
                r.grids = if needs_grids {
                    Some(existing(&s.grids, "grids", cmd).context("the plan selects top heads from trace grids")?)
                } else {
                    optional(&s.grids, "grids")?
                };
                r.plan = Some(plan);
            }
        }
        Ok(r)
    }

    pub fn storage_precision(&self) -> StoragePrecision {
        match self.precision {
            "native" => StoragePrecision::Native,
            _ => StoragePrecision::F32,
        }
    }

    /// sha256 of the canonical JSON of the resolved settings.
    pub fn hash(&self) -> String {
        let v = serde_json::to_value(self).expect("settings serialize");
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

fn plan(s: &Settings, k: usize) -> Result<KnockoutPlan> {
    let spec = s.plan.as_deref().unwrap_or("standard");
    if spec == "standard" {
        let seeds: Vec<u64> = match &s.seeds {
            Some(text) => list(text, "seeds", |x| {
                x.parse()
                    .map_err(|_| relpatch::Error::Data(format!("bad seed {x:?}")))
            })?,
            None => (0..5).collect(),
        };
        return Ok(KnockoutPlan::standard(k, s.k_random.unwrap_or(4 * k), &seeds));
    }
    let path = Path::new(spec);
    let text = std::fs::read_to_string(path).with_context(|| format!("--plan: reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("--plan: parsing {}", path.display()))
}
