//! Deterministic test models and a synthetic relevance task.
//!
//! The planted model solves the task with a hand-wired attention circuit:
//!
//! * layer 0, head 0 stamps every token with the slot of the document it
//!   belongs to (`+1` for the first or only document, `-1` for the second);
//! * a set of match heads in layer 1 lets each query keyword attend to the
//!   document occurrences of the same concept and copies their slot value;
//! * output heads further up read the matched slot values from the query
//!   keywords into the last token's answer direction.
//!
//! Keywords are uppercase in queries and lowercase in documents, so the two
//! sides never share token ids. A document is relevant when it contains at
//! least two of the query's three concepts.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{HeadId, Model, ModelConfig, WeightMatrix, Weights};
use crate::prompt::{Qrels, Records, Run, RunEntry, TemplateConfig};
use crate::tokenizer::{FixtureTokenizer, Tokenizer, BYTE_TOKENS};

fn uniform(rng: &mut ChaCha8Rng, std: f32) -> f32 {
    let a = std * 3f32.sqrt();
    rng.gen_range(-a..=a)
}

fn fill(rng: &mut ChaCha8Rng, m: &mut WeightMatrix, std: f32) {
    for v in m.as_f32_mut().expect("fixture weights are f32") {
        *v = uniform(rng, std);
    }
}

/// Random weights of the given shape; norms are `1 ± 0.1`.
pub fn random_model_with(cfg: ModelConfig, seed: u64, scale: f32) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Weights::zeros(&cfg);
    fill(&mut rng, &mut w.embed, 1.0);
    for lw in &mut w.layers {
        for v in lw.attn_norm.iter_mut().chain(lw.mlp_norm.iter_mut()) {
            *v = 1.0 + uniform(&mut rng, 0.1);
        }
        for m in [
            &mut lw.wq,
            &mut lw.wk,
            &mut lw.wv,
            &mut lw.wo,
            &mut lw.w_gate,
            &mut lw.w_up,
            &mut lw.w_down,
        ] {
            fill(&mut rng, m, scale);
        }
    }
    for v in &mut w.final_norm {
        *v = 1.0 + uniform(&mut rng, 0.1);
    }
    if let Some(u) = &mut w.unembed {
        fill(&mut rng, u, scale);
    }
    Model::new(cfg, w)
}

/// 4 layers, 4 query heads sharing 2 key/value heads, width 64, vocabulary 512.
pub fn random_config() -> ModelConfig {
    ModelConfig::new(4, 4, 2, 64, 128, 512)
}

pub fn random_model(seed: u64) -> Result<Model> {
    random_model_with(random_config(), seed, 0.15)
}

// ---------------------------------------------------------------------------
// Planted circuit

pub const CONCEPTS: [&str; 13] = [
    "apple", "river", "stone", "cloud", "tiger", "piano", "candle", "rocket", "garden", "silver",
    "winter", "castle", "forest",
];

pub const FILLERS: [&str; 30] = [
    "bolt", "crane", "drum", "fern", "glass", "harp", "ink", "jade", "kite", "lamp", "moss",
    "nail", "oak", "pearl", "quill", "reed", "sand", "tent", "urn", "vine", "wool", "yarn",
    "zinc", "brick", "chalk", "dune", "flint", "gravel", "husk", "ivory",
];

const TEMPLATE_WORDS: [&str; 17] = [
    "<bos>", "Document:", "Document 1:", "\nDocument 2:", "\nQuery:", "Is", " the", " document",
    " first", " more", " relevant?", "\nAnswer:", "\nVerdict:", "yes", " yes", "no", " no",
];

/// Lexicon of the planted fixture: template words, four spellings per
/// concept, two per filler.
pub fn lexicon() -> Vec<String> {
    let mut words: Vec<String> = TEMPLATE_WORDS.iter().map(|s| s.to_string()).collect();
    for c in CONCEPTS {
        let up = c.to_uppercase();
        words.extend([c.to_string(), format!(" {c}"), up.clone(), format!(" {up}")]);
    }
    for f in FILLERS {
        words.extend([f.to_string(), format!(" {f}")]);
    }
    words
}

pub fn tokenizer() -> FixtureTokenizer {
    FixtureTokenizer::new(&lexicon()).expect("fixture lexicon is valid")
}

// residual directions
const BIAS: usize = 0;
const IS_BOS: usize = 1;
const IS_QKW: usize = 2;
const IS_LAST: usize = 3;
const SEGMARK: usize = 4;
const SEGVAL: usize = 5;
const SEG: usize = 6;
const MATCH_SEG: usize = 7;
const YES: usize = 8;
const QC: usize = 9;
const DC: usize = QC + CONCEPTS.len();
/// Evens out the norm of the two document markers.
const PAD: usize = DC + CONCEPTS.len();
const SPARE: usize = PAD + 1;

const BIAS_VALUE: f32 = 11.0;
/// Query/key magnitude giving a score of 16 at head width 16.
const QK: f32 = 8.0;

/// Head dimensions whose rotary frequency is negligible at `rope_theta = 1e30`.
const FLAT_DIMS: [usize; 14] = [1, 2, 3, 4, 5, 6, 7, 9, 10, 11, 12, 13, 14, 15];
const HEAD_DIM: usize = 16;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub match_heads: usize,
    pub output_heads: usize,
    /// Total write of the output heads into the answer direction.
    pub gain: f32,
    /// Unembedding scale of the answer direction.
    pub gamma: f32,
    /// Std of the weights outside the circuit.
    pub noise: f32,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            heads: 8,
            d_ff: 64,
            match_heads: 5,
            output_heads: 5,
            gain: 6.0,
            gamma: 2.0,
            noise: 0.01,
            seed: 0,
        }
    }
}

impl PlantedConfig {
    /// One match head and one output head.
    pub fn single() -> Self {
        Self {
            match_heads: 1,
            output_heads: 1,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    pub segment_head: HeadId,
    pub match_heads: Vec<HeadId>,
    pub output_heads: Vec<HeadId>,
}

#[derive(Debug, Clone)]
pub struct Planted {
    pub model: Model,
    pub tokenizer: FixtureTokenizer,
    pub template: TemplateConfig,
    pub circuit: Circuit,
}

fn set(m: &mut WeightMatrix, r: usize, c: usize, v: f32) {
    let cols = m.cols();
    m.as_f32_mut().expect("fixture weights are f32")[r * cols + c] = v;
}

fn zero_head(lw: &mut crate::model::LayerWeights, h: usize) {
    let d = lw.wq.cols();
    for r in h * HEAD_DIM..(h + 1) * HEAD_DIM {
        for c in 0..d {
            set(&mut lw.wq, r, c, 0.0);
            set(&mut lw.wk, r, c, 0.0);
            set(&mut lw.wv, r, c, 0.0);
        }
    }
    for r in 0..d {
        for c in h * HEAD_DIM..(h + 1) * HEAD_DIM {
            set(&mut lw.wo, r, c, 0.0);
        }
    }
}

/// Builds the planted model with its tokenizer and template.
pub fn planted(cfg: &PlantedConfig) -> Result<Planted> {
    assert!(cfg.layers >= 3, "the circuit needs three layers");
    assert!(cfg.match_heads >= 1 && cfg.match_heads <= cfg.heads);
    let out_layers = cfg.layers - 2;
    assert!(cfg.output_heads >= 1 && cfg.output_heads <= out_layers * cfg.heads);
    let d = HEAD_DIM * cfg.heads;
    assert!(d >= SPARE + 8, "too few heads for the residual layout");

    let tok = tokenizer();
    let vocab = (BYTE_TOKENS + tok.words().len()).next_power_of_two();
    let mut mc = ModelConfig::new(cfg.layers, cfg.heads, cfg.heads, d, cfg.d_ff, vocab);
    mc.rope_theta = 1e30;
    mc.max_seq_len = 512;
    mc.model_type = "llama".into();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = Weights::zeros(&mc);

    // embeddings: constant bias, random identity in the spare directions for
    // tokens outside the circuit
    let id = |w: &str| tok.token_to_id(w).expect("lexicon word");
    let mut wired: BTreeSet<u32> = TEMPLATE_WORDS.iter().map(|w| id(w)).collect();
    for c in CONCEPTS {
        let up = c.to_uppercase();
        for form in [c.to_string(), format!(" {c}"), up.clone(), format!(" {up}")] {
            wired.insert(id(&form));
        }
    }
    {
        let e = w.embed.as_f32_mut().expect("f32");
        for t in 0..vocab {
            let row = &mut e[t * d..(t + 1) * d];
            row[BIAS] = BIAS_VALUE;
            if !wired.contains(&(t as u32)) {
                for v in &mut row[SPARE..] {
                    *v = uniform(&mut rng, 0.3);
                }
            }
        }
    }
    let mut feat = |t: u32, dim: usize, v: f32| set(&mut w.embed, t as usize, dim, v);
    feat(id("<bos>"), IS_BOS, 1.0);
    for (m, v, pad) in [
        ("Document:", 1.0, 8f32.sqrt()),
        ("Document 1:", 1.0, 8f32.sqrt()),
        ("\nDocument 2:", -3.0, 0.0),
    ] {
        feat(id(m), SEGMARK, 1.0);
        feat(id(m), SEGVAL, v);
        feat(id(m), PAD, pad);
    }
    feat(id("\nAnswer:"), IS_LAST, 1.0);
    feat(id("\nAnswer:"), YES, -cfg.gain / 2.0);
    feat(id("\nVerdict:"), IS_LAST, 1.0);
    for (c, name) in CONCEPTS.iter().enumerate() {
        let up = name.to_uppercase();
        for form in [up.clone(), format!(" {up}")] {
            feat(id(&form), IS_QKW, 1.0);
            feat(id(&form), QC + c, 1.0);
        }
        for form in [name.to_string(), format!(" {name}")] {
            feat(id(&form), DC + c, 1.0);
        }
    }

    for lw in &mut w.layers {
        fill(&mut rng, &mut lw.wq, cfg.noise * 5.0);
        fill(&mut rng, &mut lw.wk, cfg.noise * 5.0);
        fill(&mut rng, &mut lw.wv, cfg.noise);
        fill(&mut rng, &mut lw.wo, cfg.noise);
        fill(&mut rng, &mut lw.w_gate, cfg.noise);
        fill(&mut rng, &mut lw.w_up, cfg.noise);
        fill(&mut rng, &mut lw.w_down, cfg.noise);
    }

    // segment head
    let seg = HeadId::new(0, 0);
    {
        let lw = &mut w.layers[0];
        zero_head(lw, 0);
        let u = FLAT_DIMS[0];
        set(&mut lw.wq, u, BIAS, QK / BIAS_VALUE);
        set(&mut lw.wk, u, SEGMARK, QK);
        set(&mut lw.wk, u, IS_BOS, QK / 2.0);
        set(&mut lw.wv, 0, SEGVAL, 1.0);
        set(&mut lw.wo, SEG, 0, 1.0);
    }

    // match heads
    let sink = FLAT_DIMS[CONCEPTS.len()];
    let mut match_heads = Vec::new();
    for h in 0..cfg.match_heads {
        let lw = &mut w.layers[1];
        zero_head(lw, h);
        let base = h * HEAD_DIM;
        for c in 0..CONCEPTS.len() {
            set(&mut lw.wq, base + FLAT_DIMS[c], QC + c, QK);
            set(&mut lw.wk, base + FLAT_DIMS[c], DC + c, QK);
        }
        set(&mut lw.wq, base + sink, IS_QKW, QK);
        set(&mut lw.wk, base + sink, IS_BOS, QK / 2.0);
        set(&mut lw.wv, base, SEG, 1.0);
        set(&mut lw.wo, MATCH_SEG, base, 1.0 / cfg.match_heads as f32);
        match_heads.push(HeadId::new(1, h));
    }

    // output heads, spread over layers 2..
    let mut output_heads = Vec::new();
    for i in 0..cfg.output_heads {
        let l = 2 + i % out_layers;
        let h = i / out_layers;
        let lw = &mut w.layers[l];
        zero_head(lw, h);
        let base = h * HEAD_DIM;
        let u = FLAT_DIMS[0];
        set(&mut lw.wq, base + u, IS_LAST, QK);
        set(&mut lw.wk, base + u, IS_QKW, QK);
        set(&mut lw.wv, base, MATCH_SEG, 1.0);
        set(&mut lw.wo, YES, base, cfg.gain / cfg.output_heads as f32);
        output_heads.push(HeadId::new(l, h));
    }
    output_heads.sort();

    let u = w.unembed.as_mut().expect("untied");
    fill(&mut rng, u, cfg.noise);
    for (word, sign) in [("yes", 1.0), (" yes", 1.0), ("no", -1.0), (" no", -1.0)] {
        let t = id(word) as usize;
        for c in 0..d {
            set(u, t, c, 0.0);
        }
        set(u, t, YES, sign * cfg.gamma);
    }

    let model = Model::new(mc, w)?;
    Ok(Planted {
        model,
        tokenizer: tok,
        template: TemplateConfig::preset("fixture")?,
        circuit: Circuit {
            segment_head: seg,
            match_heads,
            output_heads,
        },
    })
}

// ---------------------------------------------------------------------------
// Synthetic task

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskConfig {
    pub queries: usize,
    pub candidates: usize,
    /// Words per document; every word is one token.
    pub doc_len: usize,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            queries: 60,
            candidates: 20,
            doc_len: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Task {
    pub queries: Records,
    pub corpus: Records,
    /// Grade = concepts shared with the query minus one, floored at zero.
    pub qrels: Qrels,
    /// First stage: each query's candidates in random order.
    pub run: Run,
}

/// How many query concepts the `j`-th candidate of a query shares.
fn overlap_for(j: usize) -> usize {
    const PATTERN: [usize; 10] = [3, 3, 2, 2, 2, 1, 1, 1, 1, 1];
    PATTERN.get(j).copied().unwrap_or(0)
}

pub fn grade(overlap: usize) -> i32 {
    overlap.saturating_sub(1) as i32
}

/// Concept indices mentioned in a text (either case).
pub fn concepts_in(text: &str) -> BTreeSet<usize> {
    text.split_whitespace()
        .filter_map(|w| CONCEPTS.iter().position(|c| c.eq_ignore_ascii_case(w)))
        .collect()
}

pub fn generate_task(cfg: &TaskConfig) -> Task {
    assert!(cfg.doc_len >= 5, "documents need room for keywords and distractors");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut queries = Records::new();
    let mut corpus = Records::new();
    let mut own: Vec<Vec<usize>> = Vec::new();
    let mut query_concepts = Vec::new();
    for qi in 0..cfg.queries {
        let qc: Vec<usize> = index::sample(&mut rng, CONCEPTS.len(), 3).into_vec();
        let text: Vec<String> = qc.iter().map(|&c| CONCEPTS[c].to_uppercase()).collect();
        queries.push((format!("q{qi:03}"), text.join(" ")));
        let others: Vec<usize> = (0..CONCEPTS.len()).filter(|c| !qc.contains(c)).collect();
        let mut mine = Vec::new();
        for j in 0..cfg.candidates {
            let k = overlap_for(j);
            let mut words: Vec<&str> = qc
                .choose_multiple(&mut rng, k)
                .map(|&c| CONCEPTS[c])
                .collect();
            let n_distract = rng.gen_range(0..=2);
            words.extend(others.choose_multiple(&mut rng, n_distract).map(|&c| CONCEPTS[c]));
            while words.len() < cfg.doc_len {
                words.push(FILLERS[rng.gen_range(0..FILLERS.len())]);
            }
            words.shuffle(&mut rng);
            mine.push(corpus.len());
            corpus.push((format!("d{qi:03}_{j:02}"), words.join(" ")));
        }
        own.push(mine);
        query_concepts.push(qc.into_iter().collect::<BTreeSet<_>>());
    }

    let doc_concepts: Vec<BTreeSet<usize>> = corpus.iter().map(|(_, t)| concepts_in(t)).collect();
    let mut qrels = Qrels::new();
    let mut run = Run::new();
    for (qi, (qid, _)) in queries.iter().enumerate() {
        let judged = qrels.entry(qid.clone()).or_insert_with(BTreeMap::new);
        for (di, dc) in doc_concepts.iter().enumerate() {
            let g = grade(dc.intersection(&query_concepts[qi]).count());
            if g > 0 || own[qi].contains(&di) {
                judged.insert(corpus[di].0.clone(), g);
            }
        }
        let mut order = own[qi].clone();
        order.shuffle(&mut rng);
        let n = order.len();
        run.insert(
            qid.clone(),
            order
                .into_iter()
                .enumerate()
                .map(|(r, di)| RunEntry {
                    doc_id: corpus[di].0.clone(),
                    score: (n - r) as f64,
                })
                .collect(),
        );
    }
    Task {
        queries,
        corpus,
        qrels,
        run,
    }
}
