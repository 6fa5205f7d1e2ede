//! Tokenizers: byte-level BPE for real checkpoints and a small greedy lexicon
//! tokenizer for fixtures.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use fancy_regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub trait Tokenizer: Send + Sync + fmt::Debug {
    fn encode(&self, text: &str) -> Result<Vec<u32>>;

    fn decode(&self, ids: &[u32]) -> Result<String>;

    /// Id of a string that is exactly one vocabulary entry.
    fn token_to_id(&self, token: &str) -> Option<u32>;

    fn vocab_size(&self) -> usize;
}

/// Loads a tokenizer from a path.
///
/// * a directory: `tokenizer.json`, or `vocab.json` + `merges.txt`;
/// * a `tokenizer.json` file (HF format);
/// * a fixture tokenizer file (`{"kind": "fixture", ...}`);
/// * a `vocab.json` file with `merges.txt` next to it.
pub fn load_tokenizer(path: &Path) -> Result<Box<dyn Tokenizer>> {
    if path.is_dir() {
        let tj = path.join("tokenizer.json");
        if tj.exists() {
            return Ok(Box::new(BpeTokenizer::from_tokenizer_json(&tj)?));
        }
        return Ok(Box::new(BpeTokenizer::from_files(
            &path.join("vocab.json"),
            &path.join("merges.txt"),
        )?));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(&text)?;
    if value.get("kind").and_then(Value::as_str) == Some("fixture") {
        return Ok(Box::new(FixtureTokenizer::from_json(&text)?));
    }
    if value.get("model").is_some() {
        return Ok(Box::new(BpeTokenizer::from_tokenizer_json_value(&value)?));
    }
    let merges = path.with_file_name("merges.txt");
    Ok(Box::new(BpeTokenizer::from_files(path, &merges)?))
}

// ---------------------------------------------------------------------------
// Fixture tokenizer

/// Ids `0..256` are raw bytes; ids from 256 on are lexicon words, matched
/// greedily (longest first) with byte fallback for anything else.
#[derive(Debug, Clone)]
pub struct FixtureTokenizer {
    words: Vec<String>,
    index: HashMap<String, u32>,
    max_len: usize,
}

#[derive(Serialize, Deserialize)]
struct FixtureFile {
    kind: String,
    words: Vec<String>,
}

pub const BYTE_TOKENS: usize = 256;

impl FixtureTokenizer {
    pub fn new<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut index = HashMap::new();
        let mut list = Vec::with_capacity(words.len());
        for w in words {
            let w = w.as_ref();
            if w.len() < 2 {
                return Err(Error::Tokenizer(format!(
                    "lexicon entry {w:?} must be at least two bytes"
                )));
            }
            let id = (BYTE_TOKENS + list.len()) as u32;
            if index.insert(w.to_string(), id).is_some() {
                return Err(Error::Tokenizer(format!("duplicate lexicon entry {w:?}")));
            }
            list.push(w.to_string());
        }
        let max_len = list.iter().map(String::len).max().unwrap_or(1);
        Ok(Self {
            words: list,
            index,
            max_len,
        })
    }

    /// Built-in lexicon covering the default templates.
    pub fn standard() -> Self {
        Self::new(STANDARD_LEXICON).expect("standard lexicon is valid")
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn to_json(&self) -> String {
        let f = FixtureFile {
            kind: "fixture".into(),
            words: self.words.clone(),
        };
        serde_json::to_string_pretty(&f).expect("serializable") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: FixtureFile = serde_json::from_str(text)?;
        if f.kind != "fixture" {
            return Err(Error::Tokenizer(format!("unexpected tokenizer kind {:?}", f.kind)));
        }
        Self::new(&f.words)
    }
}

impl Tokenizer for FixtureTokenizer {
    fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let bytes = text.as_bytes();
        let mut out = Vec::new();
        let mut i = 0;
        while i < bytes.len() {
            let mut hit = None;
            let upper = self.max_len.min(bytes.len() - i);
            for len in (2..=upper).rev() {
                if let Ok(s) = std::str::from_utf8(&bytes[i..i + len]) {
                    if let Some(&id) = self.index.get(s) {
                        hit = Some((id, len));
                        break;
                    }
                }
            }
            match hit {
                Some((id, len)) => {
                    out.push(id);
                    i += len;
                }
                None => {
                    out.push(bytes[i] as u32);
                    i += 1;
                }
            }
        }
        Ok(out)
    }

    fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let id = id as usize;
            if id < BYTE_TOKENS {
                bytes.push(id as u8);
            } else {
                let w = self.words.get(id - BYTE_TOKENS).ok_or_else(|| {
                    Error::Tokenizer(format!("token id {id} outside fixture vocabulary"))
                })?;
                bytes.extend_from_slice(w.as_bytes());
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    fn token_to_id(&self, token: &str) -> Option<u32> {
        match token.as_bytes() {
            [b] => Some(*b as u32),
            _ => self.index.get(token).copied(),
        }
    }

    fn vocab_size(&self) -> usize {
        BYTE_TOKENS + self.words.len()
    }
}

const STANDARD_LEXICON: &[&str] = &[
    "<bos>", "yes", " yes", "no", " no", "Yes", " Yes", "No", " No", "Document", " document",
    "Query", " query", "Answer", " answer", "Does", " the", " passage", " Is", "Is", " first",
    " second", " more", " relevant", " than", " to", " with", " only", " or", " one", " word",
    " a", " Document", " Query", "\n\n", ": ", " 1", " 2", "1:", "2:", "?\n", "Answer:",
];

// ---------------------------------------------------------------------------
// Byte-level BPE

const GPT2_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

/// Byte-level BPE as used by GPT-2, Llama 3 and Qwen2 checkpoints.
pub struct BpeTokenizer {
    encoder: HashMap<String, u32>,
    decoder: Vec<Option<String>>,
    ranks: HashMap<(String, String), usize>,
    pattern: Regex,
    added: Vec<(String, u32)>,
    added_ids: HashMap<u32, String>,
    ignore_merges: bool,
    byte_to_char: [char; 256],
    char_to_byte: HashMap<char, u8>,
}

impl fmt::Debug for BpeTokenizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BpeTokenizer")
            .field("vocab", &self.encoder.len())
            .field("merges", &self.ranks.len())
            .field("added", &self.added.len())
            .finish()
    }
}

/// GPT-2's reversible byte → printable-char table.
fn bytes_to_unicode() -> [char; 256] {
    let mut printable: Vec<u32> = (b'!' as u32..=b'~' as u32)
        .chain(0xA1..=0xAC)
        .chain(0xAE..=0xFF)
        .collect();
    let mut table = ['\0'; 256];
    for &b in &printable {
        table[b as usize] = char::from_u32(b).unwrap();
    }
    let mut n = 0;
    for b in 0..256u32 {
        if !printable.contains(&b) {
            table[b as usize] = char::from_u32(256 + n).unwrap();
            n += 1;
            printable.push(b);
        }
    }
    table
}

impl BpeTokenizer {
    /// Builds from a vocabulary and an ordered merge list.
    pub fn new(
        vocab: HashMap<String, u32>,
        merges: Vec<(String, String)>,
        added: Vec<(String, u32)>,
        pattern: Option<&str>,
        ignore_merges: bool,
    ) -> Result<Self> {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, (a, b)) in merges.into_iter().enumerate() {
            for part in [&a, &b] {
                if !vocab.contains_key(part.as_str()) {
                    return Err(Error::Tokenizer(format!(
                        "merge #{rank} ({a} {b}) uses {part:?}, which is not in the vocabulary"
                    )));
                }
            }
            let merged = format!("{a}{b}");
            if !vocab.contains_key(&merged) {
                return Err(Error::Tokenizer(format!(
                    "merge #{rank} ({a} {b}) produces {merged:?}, which is not in the vocabulary"
                )));
            }
            ranks.entry((a, b)).or_insert(rank);
        }
        let size = vocab
            .values()
            .chain(added.iter().map(|(_, id)| id))
            .map(|&id| id as usize + 1)
            .max()
            .unwrap_or(0);
        let mut decoder = vec![None; size];
        for (tok, &id) in &vocab {
            decoder[id as usize] = Some(tok.clone());
        }
        let pattern = Regex::new(pattern.unwrap_or(GPT2_PATTERN))
            .map_err(|e| Error::Tokenizer(format!("bad pre-tokenizer pattern: {e}")))?;
        let byte_to_char = bytes_to_unicode();
        let char_to_byte = byte_to_char
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect();
        let mut added = added;
        // longest first so that overlapping specials resolve greedily
        added.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)));
        let added_ids = added.iter().map(|(s, id)| (*id, s.clone())).collect();
        Ok(Self {
            encoder: vocab,
            decoder,
            ranks,
            pattern,
            added,
            added_ids,
            ignore_merges,
            byte_to_char,
            char_to_byte,
        })
    }

    /// `vocab.json` + `merges.txt` (GPT-2 layout).
    pub fn from_files(vocab_path: &Path, merges_path: &Path) -> Result<Self> {
        let vtext = std::fs::read_to_string(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
        let vocab: HashMap<String, u32> = serde_json::from_str(&vtext)?;
        let mtext = std::fs::read_to_string(merges_path).map_err(|e| Error::io(merges_path, e))?;
        let mut merges = Vec::new();
        for (n, line) in mtext.lines().enumerate() {
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let (a, b) = line.split_once(' ').ok_or_else(|| {
                Error::Tokenizer(format!(
                    "{}:{}: malformed merge line {line:?}",
                    merges_path.display(),
                    n + 1
                ))
            })?;
            merges.push((a.to_string(), b.to_string()));
        }
        Self::new(vocab, merges, Vec::new(), None, false)
    }

    /// HF `tokenizer.json`.
    pub fn from_tokenizer_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text)?;
        Self::from_tokenizer_json_value(&value)
    }

    pub fn from_tokenizer_json_value(value: &Value) -> Result<Self> {
        let model = value
            .get("model")
            .ok_or_else(|| Error::Tokenizer("tokenizer.json has no model".into()))?;
        let kind = model.get("type").and_then(Value::as_str).unwrap_or("BPE");
        if kind != "BPE" {
            return Err(Error::Tokenizer(format!("unsupported tokenizer model {kind:?}")));
        }
        if model.get("byte_fallback").and_then(Value::as_bool) == Some(true) {
            return Err(Error::Tokenizer(
                "byte_fallback BPE (sentencepiece-style) is not supported; expected byte-level BPE".into(),
            ));
        }
        let vocab: HashMap<String, u32> = serde_json::from_value(
            model
                .get("vocab")
                .cloned()
                .ok_or_else(|| Error::Tokenizer("tokenizer.json model has no vocab".into()))?,
        )?;
        let mut merges = Vec::new();
        for m in model.get("merges").and_then(Value::as_array).into_iter().flatten() {
            let pair = match m {
                Value::String(s) => s
                    .split_once(' ')
                    .map(|(a, b)| (a.to_string(), b.to_string())),
                Value::Array(parts) if parts.len() == 2 => {
                    match (parts[0].as_str(), parts[1].as_str()) {
                        (Some(a), Some(b)) => Some((a.to_string(), b.to_string())),
                        _ => None,
                    }
                }
                _ => None,
            };
            merges.push(pair.ok_or_else(|| Error::Tokenizer(format!("malformed merge {m}")))?);
        }
        let ignore_merges = model
            .get("ignore_merges")
            .and_then(Value::as_bool)
            .unwrap_or(false);
        let mut added = Vec::new();
        for t in value.get("added_tokens").and_then(Value::as_array).into_iter().flatten() {
            if let (Some(content), Some(id)) = (
                t.get("content").and_then(Value::as_str),
                t.get("id").and_then(Value::as_u64),
            ) {
                added.push((content.to_string(), id as u32));
            }
        }
        let pattern = find_split_pattern(value.get("pre_tokenizer"))?;
        Self::new(vocab, merges, added, pattern.as_deref(), ignore_merges)
    }

    fn bpe_word(&self, word: &str, out: &mut Vec<u32>) -> Result<()> {
        let mapped: String = word.bytes().map(|b| self.byte_to_char[b as usize]).collect();
        if self.ignore_merges {
            if let Some(&id) = self.encoder.get(&mapped) {
                out.push(id);
                return Ok(());
            }
        }
        let mut parts: Vec<String> = mapped.chars().map(String::from).collect();
        while parts.len() > 1 {
            let best = parts
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((_, i)) = best else { break };
            let merged = format!("{}{}", parts[i], parts[i + 1]);
            parts[i] = merged;
            parts.remove(i + 1);
        }
        for p in parts {
            let id = self.encoder.get(&p).ok_or_else(|| {
                Error::Tokenizer(format!("symbol {p:?} has no vocabulary entry"))
            })?;
            out.push(*id);
        }
        Ok(())
    }

    fn encode_plain(&self, text: &str, out: &mut Vec<u32>) -> Result<()> {
        for m in self.pattern.find_iter(text) {
            let m = m.map_err(|e| Error::Tokenizer(format!("pre-tokenizer failed: {e}")))?;
            self.bpe_word(m.as_str(), out)?;
        }
        Ok(())
    }
}

fn find_split_pattern(pre: Option<&Value>) -> Result<Option<String>> {
    let Some(pre) = pre else { return Ok(None) };
    match pre.get("type").and_then(Value::as_str) {
        Some("Sequence") => {
            for p in pre
                .get("pretokenizers")
                .and_then(Value::as_array)
                .into_iter()
                .flatten()
            {
                if let Some(found) = find_split_pattern(Some(p))? {
                    return Ok(Some(found));
                }
            }
            Ok(None)
        }
        Some("Split") => Ok(pre
            .get("pattern")
            .and_then(|p| p.get("Regex").or_else(|| p.get("String")))
            .and_then(Value::as_str)
            .map(str::to_string)),
        Some("ByteLevel") => Ok(None),
        Some("Metaspace") => Err(Error::Tokenizer(
            "Metaspace pre-tokenizer is not supported; expected byte-level BPE".into(),
        )),
        _ => Ok(None),
    }
}

impl Tokenizer for BpeTokenizer {
    fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        let mut rest = text;
        'outer: while !rest.is_empty() {
            if !self.added.is_empty() {
                // earliest added token, longest at that position
                let mut best: Option<(usize, &str, u32)> = None;
                for (s, id) in &self.added {
                    if let Some(pos) = rest.find(s.as_str()) {
                        if best.map_or(true, |(bp, _, _)| pos < bp) {
                            best = Some((pos, s, *id));
                        }
                    }
                }
                if let Some((pos, s, id)) = best {
                    self.encode_plain(&rest[..pos], &mut out)?;
                    out.push(id);
                    rest = &rest[pos + s.len()..];
                    continue 'outer;
                }
            }
            self.encode_plain(rest, &mut out)?;
            break;
        }
        Ok(out)
    }

    fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            if let Some(s) = self.added_ids.get(&id) {
                bytes.extend_from_slice(s.as_bytes());
                continue;
            }
            let tok = self
                .decoder
                .get(id as usize)
                .and_then(Option::as_ref)
                .ok_or_else(|| Error::Tokenizer(format!("unknown token id {id}")))?;
            for c in tok.chars() {
                let b = self.char_to_byte.get(&c).ok_or_else(|| {
                    Error::Tokenizer(format!("token {tok:?} is not byte-level encoded"))
                })?;
                bytes.push(*b);
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    fn token_to_id(&self, token: &str) -> Option<u32> {
        if let Some((_, id)) = self.added.iter().find(|(s, _)| s == token) {
            return Some(*id);
        }
        let mapped: String = token.bytes().map(|b| self.byte_to_char[b as usize]).collect();
        self.encoder.get(&mapped).copied()
    }

    fn vocab_size(&self) -> usize {
        self.decoder.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_bpe() -> BpeTokenizer {
        let table = bytes_to_unicode();
        let mut vocab: HashMap<String, u32> = (0..256)
            .map(|b| (table[b].to_string(), b as u32))
            .collect();
        let merges = vec![
            ("y".to_string(), "e".to_string()),
            ("ye".to_string(), "s".to_string()),
            ("Ġ".to_string(), "yes".to_string()),
        ];
        for (i, t) in ["ye", "yes", "Ġyes"].iter().enumerate() {
            vocab.insert(t.to_string(), 256 + i as u32);
        }
        BpeTokenizer::new(vocab, merges, vec![("<s>".into(), 300)], None, false).unwrap()
    }

    #[test]
    fn byte_table_is_bijective() {
        let t = bytes_to_unicode();
        let set: std::collections::HashSet<char> = t.iter().copied().collect();
        assert_eq!(set.len(), 256);
        assert_eq!(t[b' ' as usize], 'Ġ');
    }

    #[test]
    fn bpe_merges_by_rank() {
        let tok = tiny_bpe();
        assert_eq!(tok.encode("yes").unwrap(), vec![257]);
        assert_eq!(tok.encode(" yes").unwrap(), vec![258]);
        assert_eq!(tok.encode("<s>yes").unwrap(), vec![300, 257]);
        assert_eq!(tok.decode(&[300, 258]).unwrap(), "<s> yes");
        assert_eq!(tok.token_to_id(" yes"), Some(258));
        assert_eq!(tok.encode("").unwrap(), Vec::<u32>::new());
    }

    #[test]
    fn bpe_rejects_unknown_merge_part() {
        let vocab: HashMap<String, u32> = [("a".to_string(), 0)].into_iter().collect();
        let err = BpeTokenizer::new(vocab, vec![("a".into(), "b".into())], vec![], None, false)
            .unwrap_err();
        assert!(matches!(err, Error::Tokenizer(_)));
    }

    #[test]
    fn fixture_greedy_longest_match() {
        let tok = FixtureTokenizer::new(&["ab", "abc", " yes"]).unwrap();
        let ids = tok.encode("abcab yes!").unwrap();
        assert_eq!(ids, vec![257, 256, 258, b'!' as u32]);
        assert_eq!(tok.decode(&ids).unwrap(), "abcab yes!");
    }

    #[test]
    fn fixture_json_roundtrip() {
        let tok = FixtureTokenizer::standard();
        let back = FixtureTokenizer::from_json(&tok.to_json()).unwrap();
        assert_eq!(back.words(), tok.words());
        assert_eq!(tok.encode("yes").unwrap().len(), 1);
    }
}
