//! Prompt templates assembled token by token, so span boundaries are exact.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::data::Triplet;
use crate::error::{Error, Result};
use crate::model::TokenSequence;
use crate::positions::{PositionMap, SegmentKind};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Pointwise,
    Pairwise,
}

impl Style {
    pub fn as_str(self) -> &'static str {
        match self {
            Style::Pointwise => "pointwise",
            Style::Pairwise => "pairwise",
        }
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Style {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pointwise" => Ok(Style::Pointwise),
            "pairwise" => Ok(Style::Pairwise),
            _ => Err(Error::Data(format!("unknown style {s:?}"))),
        }
    }
}

/// Text placed around the whole user turn by instruction-tuned checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatWrapper {
    pub prefix: String,
    /// Tokens of the suffix count as instruction; its final token is the last token.
    pub suffix: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplateConfig {
    pub name: String,
    pub pointwise: String,
    pub pairwise: String,
    pub pointwise_instruction: String,
    pub pairwise_instruction: String,
    /// Prepended outside the chat wrapper, e.g. a BOS token.
    pub bos: String,
    pub chat: Option<ChatWrapper>,
    pub yes: String,
    pub no: String,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            name: "plain".into(),
            pointwise: "Document: {document}\nQuery: {query}\n{instruction}".into(),
            pairwise: "Document 1: {document_a}\nDocument 2: {document_b}\nQuery: {query}\n{instruction}"
                .into(),
            pointwise_instruction:
                "Does the document answer the query? Answer with only one word, yes or no.\nAnswer:".into(),
            pairwise_instruction: "Is the first document more relevant than the second to the query? \
                                   Answer with only one word, yes or no.\nAnswer:"
                .into(),
            bos: String::new(),
            chat: None,
            yes: "yes".into(),
            no: "no".into(),
        }
    }
}

pub const PRESETS: &[&str] = &["plain", "llama3", "qwen2", "mistral", "fixture"];

impl TemplateConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        let chat = |prefix: &str, suffix: &str| {
            Some(ChatWrapper {
                prefix: prefix.into(),
                suffix: suffix.into(),
            })
        };
        let instr = |s: &str| s.trim_end_matches("\nAnswer:").to_string();
        let cfg = match name {
            "plain" => base,
            "llama3" => Self {
                name: name.into(),
                bos: "<|begin_of_text|>".into(),
                chat: chat(
                    "<|start_header_id|>user<|end_header_id|>\n\n",
                    "<|eot_id|><|start_header_id|>assistant<|end_header_id|>\n\n",
                ),
                pointwise_instruction: instr(&base.pointwise_instruction),
                pairwise_instruction: instr(&base.pairwise_instruction),
                ..base
            },
            "qwen2" => Self {
                name: name.into(),
                chat: chat("<|im_start|>user\n", "<|im_end|>\n<|im_start|>assistant\n"),
                pointwise_instruction: instr(&base.pointwise_instruction),
                pairwise_instruction: instr(&base.pairwise_instruction),
                ..base
            },
            "mistral" => Self {
                name: name.into(),
                bos: "<s>".into(),
                chat: chat("[INST] ", " [/INST]"),
                pointwise_instruction: instr(&base.pointwise_instruction),
                pairwise_instruction: instr(&base.pairwise_instruction),
                ..base
            },
            "fixture" => Self {
                name: name.into(),
                bos: "<bos>".into(),
                pointwise: "Document:{document}\nQuery:{query}\n{instruction}".into(),
                pairwise: "Document 1:{document_a}\nDocument 2:{document_b}\nQuery:{query}\n{instruction}"
                    .into(),
                pointwise_instruction: "Is the document relevant?\nAnswer:".into(),
                pairwise_instruction: "Is the first document more relevant?\nVerdict:".into(),
                ..base
            },
            other => {
                return Err(Error::Template(format!(
                    "unknown template preset {other:?} (known: {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    /// Reads a JSON template file; a bare preset name is also accepted.
    pub fn load(spec: &str) -> Result<Self> {
        if PRESETS.contains(&spec) {
            return Self::preset(spec);
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// A rendered prompt with its position map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub tokens: TokenSequence,
    pub map: PositionMap,
}

/// Clean and corrupted prompts sharing one layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub style: Style,
    pub query_id: String,
    pub clean: TokenSequence,
    pub corrupted: TokenSequence,
    pub map: PositionMap,
    pub yes_id: u32,
    pub no_id: u32,
}

impl PromptPair {
    /// Checks equal lengths, a covering map and that only document tokens differ.
    pub fn check(&self) -> Result<()> {
        let n = self.clean.len();
        if self.corrupted.len() != n || self.map.len() != n {
            return Err(Error::Data(format!(
                "prompt pair {}: lengths {} / {} / map {}",
                self.query_id,
                n,
                self.corrupted.len(),
                self.map.len()
            )));
        }
        for seg in self.map.segments() {
            if matches!(seg.kind, SegmentKind::Document(_)) {
                continue;
            }
            for p in seg.range() {
                if self.clean.ids()[p] != self.corrupted.ids()[p] {
                    return Err(Error::Data(format!(
                        "prompt pair {}: non-document token {p} differs",
                        self.query_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Cuts both documents to the shorter length, keeping prefixes.
pub fn truncate_pair(pos: &[u32], neg: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let n = pos.len().min(neg.len());
    (pos[..n].to_vec(), neg[..n].to_vec())
}

#[derive(Debug, Clone)]
enum Part {
    Text(Vec<u32>, SegmentKind),
    Document(u8),
    Query,
}

/// Renders triplets into token sequences under one template and tokenizer.
#[derive(Debug)]
pub struct PromptBuilder<'a> {
    tok: &'a dyn Tokenizer,
    cfg: TemplateConfig,
    pointwise: Vec<Part>,
    pairwise: Vec<Part>,
    answers: [(u32, u32); 2],
}

fn parse_template(
    tok: &dyn Tokenizer,
    cfg: &TemplateConfig,
    template: &str,
    instruction: &str,
    style: Style,
) -> Result<Vec<Part>> {
    let mut parts = Vec::new();
    let text = |s: &str, kind: SegmentKind, parts: &mut Vec<Part>| -> Result<()> {
        if !s.is_empty() {
            parts.push(Part::Text(tok.encode(s)?, kind));
        }
        Ok(())
    };
    text(&cfg.bos, SegmentKind::Template, &mut parts)?;
    if let Some(c) = &cfg.chat {
        text(&c.prefix, SegmentKind::Template, &mut parts)?;
    }
    let mut seen = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        text(&rest[..open], SegmentKind::Template, &mut parts)?;
        let close = rest[open..]
            .find('}')
            .map(|c| open + c)
            .ok_or_else(|| Error::Template(format!("unclosed placeholder in {template:?}")))?;
        let name = &rest[open + 1..close];
        let allowed: &[&str] = match style {
            Style::Pointwise => &["document", "query", "instruction"],
            Style::Pairwise => &["document_a", "document_b", "query", "instruction"],
        };
        if !allowed.contains(&name) {
            return Err(Error::Template(format!(
                "placeholder {{{name}}} is not valid in a {style} template"
            )));
        }
        if seen.contains(&name) {
            return Err(Error::Template(format!("placeholder {{{name}}} appears twice")));
        }
        seen.push(name);
        match name {
            "document" | "document_a" => parts.push(Part::Document(0)),
            "document_b" => parts.push(Part::Document(1)),
            "query" => parts.push(Part::Query),
            _ => text(instruction, SegmentKind::Instruction, &mut parts)?,
        }
        rest = &rest[close + 1..];
    }
    text(rest, SegmentKind::Template, &mut parts)?;
    if let Some(c) = &cfg.chat {
        text(&c.suffix, SegmentKind::Instruction, &mut parts)?;
    }
    let required: &[&str] = match style {
        Style::Pointwise => &["document", "query"],
        Style::Pairwise => &["document_a", "document_b", "query"],
    };
    for r in required {
        if !seen.contains(r) {
            return Err(Error::Template(format!(
                "{style} template is missing the {{{r}}} placeholder"
            )));
        }
    }
    match parts.last() {
        Some(Part::Text(..)) => Ok(parts),
        _ => Err(Error::Template(format!(
            "{style} template must end with fixed text so the last token is not part of a document or query"
        ))),
    }
}

/// Resolves the answer words given the text the prompt ends with.
fn resolve_answers(tok: &dyn Tokenizer, cfg: &TemplateConfig, last_token: u32) -> Result<(u32, u32)> {
    let tail = tok.decode(&[last_token])?;
    let bare = tail.chars().last().map_or(true, char::is_whitespace);
    let one = |word: &str| -> Result<u32> {
        let form = if bare { word.to_string() } else { format!(" {word}") };
        let ids = tok.encode(&form)?;
        match (ids.as_slice(), tok.token_to_id(&form)) {
            ([id], Some(t)) if *id == t => Ok(*id),
            _ => Err(Error::Template(format!(
                "answer {form:?} is not a single token ({} tokens)",
                ids.len()
            ))),
        }
    };
    let yes = one(&cfg.yes)?;
    let no = one(&cfg.no)?;
    if yes == no {
        return Err(Error::Template("yes and no resolve to the same token".into()));
    }
    Ok((yes, no))
}

impl<'a> PromptBuilder<'a> {
    pub fn new(tok: &'a dyn Tokenizer, cfg: TemplateConfig) -> Result<Self> {
        let pointwise = parse_template(tok, &cfg, &cfg.pointwise, &cfg.pointwise_instruction, Style::Pointwise)?;
        let pairwise = parse_template(tok, &cfg, &cfg.pairwise, &cfg.pairwise_instruction, Style::Pairwise)?;
        let last = |parts: &[Part]| match parts.last() {
            Some(Part::Text(t, _)) => *t.last().expect("non-empty text"),
            _ => unreachable!("checked in parse_template"),
        };
        let answers = [
            resolve_answers(tok, &cfg, last(&pointwise))?,
            resolve_answers(tok, &cfg, last(&pairwise))?,
        ];
        Ok(Self {
            tok,
            cfg,
            pointwise,
            pairwise,
            answers,
        })
    }

    pub fn config(&self) -> &TemplateConfig {
        &self.cfg
    }

    pub fn tokenizer(&self) -> &dyn Tokenizer {
        self.tok
    }

    /// `(yes_id, no_id)` for prompts of `style`.
    pub fn answer_ids(&self, style: Style) -> (u32, u32) {
        self.answers[style as usize]
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        self.tok.encode(text)
    }

    fn assemble(&self, style: Style, query: &[u32], docs: [&[u32]; 2]) -> Result<RenderedPrompt> {
        if query.is_empty() {
            return Err(Error::Data("empty query".into()));
        }
        let parts = match style {
            Style::Pointwise => &self.pointwise,
            Style::Pairwise => &self.pairwise,
        };
        let mut ids = Vec::new();
        let mut kinds = Vec::new();
        for p in parts {
            let (t, k): (&[u32], SegmentKind) = match p {
                Part::Text(t, k) => (t, *k),
                Part::Document(s) => (docs[*s as usize], SegmentKind::Document(*s)),
                Part::Query => (query, SegmentKind::Query),
            };
            if t.is_empty() {
                return Err(Error::Data(format!("empty {k:?} span")));
            }
            ids.extend_from_slice(t);
            kinds.extend(std::iter::repeat(k).take(t.len()));
        }
        *kinds.last_mut().expect("nonempty prompt") = SegmentKind::Last;
        Ok(RenderedPrompt {
            tokens: TokenSequence(ids),
            map: PositionMap::from_kinds(&kinds)?,
        })
    }

    /// Pointwise prompt for one (query, document) with pre-tokenized document.
    pub fn render_single(&self, query: &str, doc: &[u32]) -> Result<RenderedPrompt> {
        let q = self.tok.encode(query)?;
        self.assemble(Style::Pointwise, &q, [doc, &[]])
    }

    /// Pairwise prompt with `first` in the first document slot.
    pub fn render_two(&self, query: &str, first: &[u32], second: &[u32]) -> Result<RenderedPrompt> {
        let q = self.tok.encode(query)?;
        self.assemble(Style::Pairwise, &q, [first, second])
    }

    fn truncated(&self, t: &Triplet) -> Result<(Vec<u32>, Vec<u32>)> {
        t.validate()?;
        let pos = self.tok.encode(&t.positive)?;
        let neg = self.tok.encode(&t.negative)?;
        Ok(truncate_pair(&pos, &neg))
    }

    /// Clean run shows the positive document, corrupted run the negative one.
    pub fn render_pointwise(&self, t: &Triplet) -> Result<PromptPair> {
        let (pos, neg) = self.truncated(t)?;
        let q = self.tok.encode(&t.query)?;
        let clean = self.assemble(Style::Pointwise, &q, [&pos, &[]])?;
        let corrupted = self.assemble(Style::Pointwise, &q, [&neg, &[]])?;
        self.pair(Style::Pointwise, t, clean, corrupted)
    }

    /// Clean run puts the positive first, corrupted run swaps the two.
    pub fn render_pairwise(&self, t: &Triplet) -> Result<PromptPair> {
        let (pos, neg) = self.truncated(t)?;
        let q = self.tok.encode(&t.query)?;
        let clean = self.assemble(Style::Pairwise, &q, [&pos, &neg])?;
        let corrupted = self.assemble(Style::Pairwise, &q, [&neg, &pos])?;
        self.pair(Style::Pairwise, t, clean, corrupted)
    }

    pub fn render(&self, t: &Triplet, style: Style) -> Result<PromptPair> {
        match style {
            Style::Pointwise => self.render_pointwise(t),
            Style::Pairwise => self.render_pairwise(t),
        }
    }

    fn pair(&self, style: Style, t: &Triplet, clean: RenderedPrompt, corrupted: RenderedPrompt) -> Result<PromptPair> {
        if clean.map != corrupted.map {
            return Err(Error::Data(format!(
                "query {}: clean and corrupted layouts differ",
                t.query_id
            )));
        }
        let (yes_id, no_id) = self.answer_ids(style);
        let pair = PromptPair {
            style,
            query_id: t.query_id.clone(),
            clean: clean.tokens,
            corrupted: corrupted.tokens,
            map: clean.map,
            yes_id,
            no_id,
        };
        pair.check()?;
        Ok(pair)
    }
}
