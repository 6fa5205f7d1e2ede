//! Corpus, query, qrels, run and triplet files.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// One training example: a query with a judged-relevant and a non-relevant document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub query_id: String,
    pub query: String,
    pub positive: String,
    pub negative: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_id: Option<String>,
}

impl Triplet {
    pub fn validate(&self) -> Result<()> {
        if self.query.trim().is_empty() || self.positive.trim().is_empty() || self.negative.trim().is_empty() {
            return Err(Error::Data(format!("triplet {} has an empty text", self.query_id)));
        }
        if self.positive == self.negative {
            return Err(Error::Data(format!(
                "triplet {} uses the same document as positive and negative",
                self.query_id
            )));
        }
        Ok(())
    }

    /// Swaps the roles of the two documents.
    pub fn swapped(&self) -> Self {
        Self {
            positive: self.negative.clone(),
            negative: self.positive.clone(),
            positive_id: self.negative_id.clone(),
            negative_id: self.positive_id.clone(),
            ..self.clone()
        }
    }
}

/// `(id, text)` records in file order.
pub type Records = Vec<(String, String)>;

/// Reads `id<TAB>text` lines, or JSON lines with `id`/`_id` and `text`/`contents`
/// (an optional `title` is prepended). The format follows the extension
/// (`.jsonl`/`.json` vs anything else). Lines starting with `#` are skipped.
pub fn read_records(path: &Path) -> Result<Records> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let jsonl = matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl") | Some("json")
    );
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let at = || format!("{}:{}", path.display(), n + 1);
        if jsonl {
            let v: Value = serde_json::from_str(line)?;
            let id = v
                .get("id")
                .or_else(|| v.get("_id"))
                .or_else(|| v.get("docid"))
                .or_else(|| v.get("qid"))
                .ok_or_else(|| Error::Data(format!("{}: record without an id", at())))?;
            let id = match id {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            let body = v
                .get("text")
                .or_else(|| v.get("contents"))
                .and_then(Value::as_str)
                .ok_or_else(|| Error::Data(format!("{}: record without text", at())))?;
            let body = match v.get("title").and_then(Value::as_str) {
                Some(t) if !t.is_empty() => format!("{t} {body}"),
                _ => body.to_string(),
            };
            out.push((id, body));
        } else {
            let (id, body) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("{}: expected id<TAB>text", at())))?;
            out.push((id.to_string(), body.to_string()));
        }
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[(String, String)]) -> Result<()> {
    let mut s = String::new();
    for (id, text) in records {
        s.push_str(id);
        s.push('\t');
        s.push_str(text);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// `qid -> docid -> grade`.
pub type Qrels = BTreeMap<String, BTreeMap<String, i32>>;

/// TREC qrels: `qid iter docid rel`.
pub fn read_qrels(path: &Path) -> Result<Qrels> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_qrels(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn parse_qrels(text: &str) -> Result<Qrels> {
    let mut q = Qrels::new();
    for (n, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() || f[0].starts_with('#') {
            continue;
        }
        if f.len() != 4 {
            return Err(Error::Data(format!("line {}: expected 4 qrels fields", n + 1)));
        }
        let rel: i32 = f[3]
            .parse()
            .map_err(|_| Error::Data(format!("line {}: bad relevance {:?}", n + 1, f[3])))?;
        q.entry(f[0].to_string()).or_default().insert(f[2].to_string(), rel);
    }
    Ok(q)
}

pub fn format_qrels(qrels: &Qrels) -> String {
    let mut s = String::new();
    for (qid, docs) in qrels {
        for (d, r) in docs {
            s.push_str(&format!("{qid} 0 {d} {r}\n"));
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub doc_id: String,
    pub score: f64,
}

/// `qid -> ranked entries` (rank order as in the file).
pub type Run = BTreeMap<String, Vec<RunEntry>>;

/// TREC run: `qid Q0 docid rank score tag`, ordered by rank within each query.
pub fn read_run(path: &Path) -> Result<Run> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: BTreeMap<String, Vec<(usize, RunEntry)>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() || f[0].starts_with('#') {
            continue;
        }
        if f.len() < 5 {
            return Err(Error::Data(format!(
                "{}:{}: expected qid Q0 docid rank score tag",
                path.display(),
                n + 1
            )));
        }
        let rank: usize = f[3]
            .parse()
            .map_err(|_| Error::Data(format!("{}:{}: bad rank", path.display(), n + 1)))?;
        let score: f64 = f[4]
            .parse()
            .map_err(|_| Error::Data(format!("{}:{}: bad score", path.display(), n + 1)))?;
        rows.entry(f[0].to_string()).or_default().push((
            rank,
            RunEntry {
                doc_id: f[2].to_string(),
                score,
            },
        ));
    }
    Ok(rows
        .into_iter()
        .map(|(q, mut v)| {
            v.sort_by_key(|(r, _)| *r);
            (q, v.into_iter().map(|(_, e)| e).collect())
        })
        .collect())
}

pub fn format_run(run: &Run, tag: &str) -> String {
    let mut s = String::new();
    for (qid, entries) in run {
        for (i, e) in entries.iter().enumerate() {
            s.push_str(&format!("{qid} Q0 {} {} {:.6} {tag}\n", e.doc_id, i + 1, e.score));
        }
    }
    s
}

pub fn read_triplets(path: &Path) -> Result<Vec<Triplet>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let t: Triplet = serde_json::from_str(line).map_err(|e| {
            Error::Data(format!("{}:{}: {e}", path.display(), n + 1))
        })?;
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}

pub fn triplets_to_jsonl(triplets: &[Triplet]) -> String {
    let mut buf = Vec::new();
    for t in triplets {
        serde_json::to_writer(&mut buf, t).expect("triplet serializes");
        buf.write_all(b"\n").expect("in-memory write");
    }
    String::from_utf8(buf).expect("json is utf-8")
}
