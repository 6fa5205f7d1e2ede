//! Artifact writing. Every file carries the run metadata; `manifest.json`
//! indexes what was written.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::Resolved;

pub const TOOL: &str = "relpatch";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize)]
pub struct Meta {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config_hash: String,
    pub seed: u64,
    pub model: String,
}

impl Meta {
    pub fn new(cfg: &Resolved, model: String) -> Self {
        Meta {
            tool: TOOL,
            version: VERSION,
            command: cfg.command,
            config_hash: cfg.hash(),
            seed: cfg.seed,
            model,
        }
    }

    /// `relpatch-<first 8 hash chars>`, used as the TREC run tag.
    pub fn tag(&self) -> String {
        format!("{TOOL}-{}", &self.config_hash[..8])
    }

    fn comment(&self) -> String {
        format!(
            "# tool={} version={} command={} config_hash={} seed={} model={}\n",
            self.tool, self.version, self.command, self.config_hash, self.seed, self.model
        )
    }
}

/// Model identity: directory name plus a digest of its config.json.
pub fn model_id(dir: &Path) -> Result<String> {
    let cfg = dir.join("config.json");
    let bytes = std::fs::read(&cfg).with_context(|| format!("reading {}", cfg.display()))?;
    let name = dir
        .canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "model".into());
    Ok(format!("{name}@{}", &hex::encode(Sha256::digest(&bytes))[..12]))
}

#[derive(Serialize)]
struct Entry {
    path: String,
    kind: &'static str,
    sha256: String,
}

pub struct Output {
    dir: PathBuf,
    meta: Meta,
    config: Value,
    entries: Vec<Entry>,
}

impl Output {
    pub fn create(cfg: &Resolved, meta: Meta) -> Result<Self> {
        std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
        Ok(Output {
            dir: cfg.out.clone(),
            meta,
            config: serde_json::to_value(cfg)?,
            entries: Vec::new(),
        })
    }

    pub fn meta(&self) -> &Meta {
        &self.meta
    }

    fn write(&mut self, name: &str, kind: &'static str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.record(name, kind, bytes);
        Ok(())
    }

    /// Lists a file written by someone else.
    pub fn record(&mut self, name: &str, kind: &'static str, bytes: &[u8]) {
        self.entries.push(Entry {
            path: name.to_string(),
            kind,
            sha256: hex::encode(Sha256::digest(bytes)),
        });
    }

    /// `{"meta": ..., "data": ...}`.
    pub fn json<T: Serialize>(&mut self, name: &str, data: &T) -> Result<()> {
        let v = json!({ "meta": self.meta, "data": data });
        let text = serde_json::to_string_pretty(&v)? + "\n";
        self.write(name, "json", text.as_bytes())
    }

    /// A JSON object with the metadata added as a top-level `meta` key.
    pub fn json_object(&mut self, name: &str, mut object: Value) -> Result<()> {
        let map = object.as_object_mut().context("artifact is not a JSON object")?;
        map.insert("meta".into(), serde_json::to_value(&self.meta)?);
        let text = serde_json::to_string_pretty(&object)? + "\n";
        self.write(name, "json", text.as_bytes())
    }

    /// Text with a leading `#` metadata line (CSV, TREC, JSON lines, tables).
    pub fn text(&mut self, name: &str, kind: &'static str, body: &str) -> Result<()> {
        let text = self.meta.comment() + body;
        self.write(name, kind, text.as_bytes())
    }

    /// Writes `manifest.json`. Earlier runs recorded there are kept; a run
    /// with the same config hash is replaced in place.
    pub fn finish(mut self) -> Result<PathBuf> {
        self.entries.sort_by(|a, b| a.path.cmp(&b.path));
        let run = json!({
            "meta": self.meta,
            "config": self.config,
            "artifacts": self.entries,
        });
        let path = self.dir.join("manifest.json");
        let mut runs: Vec<Value> = match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str::<Value>(&text)
                .ok()
                .and_then(|mut v| v.get_mut("runs").map(Value::take))
                .and_then(|v| serde_json::from_value(v).ok())
                .with_context(|| format!("{} is not a relpatch manifest", path.display()))?,
            Err(_) => Vec::new(),
        };
        let hash = &self.meta.config_hash;
        match runs.iter_mut().find(|r| r["meta"]["config_hash"] == hash.as_str()) {
            Some(r) => *r = run,
            None => runs.push(run),
        }
        let v = json!({ "tool": TOOL, "version": VERSION, "runs": runs });
        std::fs::write(&path, serde_json::to_string_pretty(&v)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Reads the `data` field of an artifact written by [`Output::json`].
pub fn read_data<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let data = v
        .get_mut("data")
        .map(Value::take)
        .with_context(|| format!("{} is not a relpatch artifact", path.display()))?;
    serde_json::from_value(data).with_context(|| format!("decoding {}", path.display()))
}
