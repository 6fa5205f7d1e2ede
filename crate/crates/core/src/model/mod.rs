//! Decoder-only transformer forward pass with activation capture.
//!
//! Per layer `l` the residual stream evolves as
//! `resid[l] = resid[l-1] + attn_out[l] + mlp_out[l]`, where `attn_out[l]` is the
//! sum of the per-head outputs `head_out[l, h]` (each already projected through
//! that head's slice of `W_O`). Normalization happens inside each sublayer, so the
//! cached quantities satisfy the recurrence exactly.

mod cache;
mod config;
mod weights;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use cache::{ActivationCache, CacheKey, CapturePattern, CaptureSet, HeadId, Site};
pub use config::{ModelConfig, RopeScaling};
pub use weights::{
    linear, load_weights, save_weights, weight_files, LayerWeights, Storage, StoragePrecision,
    WeightMatrix, Weights,
};

use crate::error::{Error, Result};
use crate::tensor::{rms_norm, rms_norm_into, silu, softmax_inplace, Matrix};

/// Token ids for one input sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        Self(ids)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(v: Vec<u32>) -> Self {
        Self(v)
    }
}

/// Which positions get vocabulary logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogitScope {
    #[default]
    All,
    Last,
}

/// Logits for positions `first_position..first_position + values.rows()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    first_position: usize,
    values: Matrix,
}

impl Logits {
    pub fn at(&self, position: usize) -> Option<&[f32]> {
        position
            .checked_sub(self.first_position)
            .filter(|&r| r < self.values.rows())
            .map(|r| self.values.row(r))
    }

    pub fn last(&self) -> &[f32] {
        self.values.row(self.values.rows() - 1)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.values
    }

    pub fn first_position(&self) -> usize {
        self.first_position
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Logits,
    pub cache: ActivationCache,
}

/// Intervention point for a forward pass. `apply` sees every activation before
/// it is cached or consumed downstream and may overwrite it.
pub trait ActivationHook: Sync {
    fn apply(&self, key: &CacheKey, value: &mut Matrix) -> Result<()>;

    /// Fast path so the pass can skip `apply` for untouched keys.
    fn touches(&self, _key: &CacheKey) -> bool {
        true
    }
}

/// Hook that changes nothing.
pub struct NoHook;

impl ActivationHook for NoHook {
    fn apply(&self, _key: &CacheKey, _value: &mut Matrix) -> Result<()> {
        Ok(())
    }

    fn touches(&self, _key: &CacheKey) -> bool {
        false
    }
}

/// Validated config plus weights. Immutable after construction, so it can be
/// shared freely between threads.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: Weights,
    inv_freqs: Vec<f64>,
}

impl Model {
    pub fn new(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        weights.validate(&config)?;
        let inv_freqs = config.inv_freqs();
        Ok(Self {
            config,
            weights,
            inv_freqs,
        })
    }

    /// Loads `config_path` (JSON) and the tensors at `weights_path` (a file or a
    /// directory of `.safetensors` shards).
    pub fn load(weights_path: &Path, config_path: &Path, precision: StoragePrecision) -> Result<Self> {
        let config = ModelConfig::from_file(config_path)?;
        let weights = load_weights(weights_path, &config, precision)?;
        Self::new(config, weights)
    }

    /// Loads a checkpoint directory holding `config.json` and safetensors shards.
    pub fn load_dir(dir: &Path, precision: StoragePrecision) -> Result<Self> {
        Self::load(dir, &dir.join("config.json"), precision)
    }

    /// Writes `config.json` and `model.safetensors` into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join("config.json");
        let text = serde_json::to_string_pretty(&self.config)?;
        std::fs::write(&cfg_path, text + "\n").map_err(|e| Error::io(&cfg_path, e))?;
        save_weights(&dir.join("model.safetensors"), &self.weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.config.n_heads
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn all_heads(&self) -> Vec<HeadId> {
        (0..self.n_layers())
            .flat_map(|l| (0..self.n_heads()).map(move |h| HeadId::new(l, h)))
            .collect()
    }

    pub fn validate_tokens(&self, tokens: &TokenSequence) -> Result<()> {
        let n = tokens.len();
        if n == 0 || n > self.config.max_seq_len {
            return Err(Error::Length {
                len: n,
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = tokens
            .ids()
            .iter()
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Token embeddings, the residual stream entering layer 0.
    pub fn embed(&self, tokens: &TokenSequence) -> Result<Matrix> {
        self.validate_tokens(tokens)?;
        let d = self.config.d_model;
        let mut x = Matrix::zeros(tokens.len(), d);
        for (i, &id) in tokens.ids().iter().enumerate() {
            x.row_mut(i)
                .copy_from_slice(&self.weights.embed.row_f32(id as usize));
        }
        Ok(x)
    }

    /// `W_U · v + b`.
    pub fn unembed(&self, v: &[f32]) -> Result<Vec<f32>> {
        if v.len() != self.config.d_model {
            return Err(Error::Shape(format!(
                "unembed expects a {}-dim vector, got {}",
                self.config.d_model,
                v.len()
            )));
        }
        let w = self.weights.unembed_matrix();
        Ok((0..w.rows())
            .map(|j| w.dot_row(j, v) + self.weights.unembed_bias[j])
            .collect())
    }

    /// Applies the final RMS normalization to one residual vector.
    pub fn final_norm(&self, v: &[f32]) -> Result<Vec<f32>> {
        if v.len() != self.config.d_model {
            return Err(Error::Shape(format!(
                "final_norm expects a {}-dim vector, got {}",
                self.config.d_model,
                v.len()
            )));
        }
        let mut out = vec![0.0; v.len()];
        rms_norm_into(v, &self.weights.final_norm, self.config.norm_eps as f32, &mut out);
        Ok(out)
    }

    /// Plain forward pass returning logits at every position.
    pub fn forward(&self, tokens: &TokenSequence, capture: &CaptureSet) -> Result<ForwardOutput> {
        self.forward_with(tokens, capture, &NoHook, LogitScope::All)
    }

    /// Forward pass with an intervention hook.
    pub fn forward_with(
        &self,
        tokens: &TokenSequence,
        capture: &CaptureSet,
        hook: &dyn ActivationHook,
        scope: LogitScope,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let n = tokens.len();
        let mut resid = self.embed(tokens)?;
        let mut cache = ActivationCache::new();
        let eps = cfg.norm_eps as f32;
        let (cos, sin) = self.rope_tables(n);

        for (l, lw) in self.weights.layers.iter().enumerate() {
            let attn_out = self.attention(l, lw, &resid, &cos, &sin, capture, hook, &mut cache)?;
            resid.add_assign(&attn_out);

            let xn = rms_norm(&resid, &lw.mlp_norm, eps);
            let gate = linear(&xn, &lw.w_gate, None);
            let mut up = linear(&xn, &lw.w_up, None);
            for (u, g) in up.as_mut_slice().iter_mut().zip(gate.as_slice()) {
                *u *= silu(*g);
            }
            let mut mlp_out = linear(&up, &lw.w_down, None);
            emit(CacheKey::mlp_out(l), &mut mlp_out, capture, hook, &mut cache)?;
            resid.add_assign(&mlp_out);

            emit(CacheKey::resid(l), &mut resid, capture, hook, &mut cache)?;
        }

        let rows: Vec<usize> = match scope {
            LogitScope::All => (0..n).collect(),
            LogitScope::Last => vec![n - 1],
        };
        let mut normed = Matrix::zeros(rows.len(), cfg.d_model);
        for (i, &r) in rows.iter().enumerate() {
            rms_norm_into(resid.row(r), &self.weights.final_norm, eps, normed.row_mut(i));
        }
        let mut values = linear(&normed, self.weights.unembed_matrix(), None);
        for r in 0..values.rows() {
            for (v, b) in values.row_mut(r).iter_mut().zip(&self.weights.unembed_bias) {
                *v += *b;
            }
        }
        Ok(ForwardOutput {
            logits: Logits {
                first_position: rows[0],
                values,
            },
            cache,
        })
    }

    fn rope_tables(&self, n: usize) -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
        let mut cos = Vec::with_capacity(n);
        let mut sin = Vec::with_capacity(n);
        for p in 0..n {
            let (c, s): (Vec<f32>, Vec<f32>) = self
                .inv_freqs
                .iter()
                .map(|f| {
                    let a = p as f64 * f;
                    (a.cos() as f32, a.sin() as f32)
                })
                .unzip();
            cos.push(c);
            sin.push(s);
        }
        (cos, sin)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        l: usize,
        lw: &LayerWeights,
        resid: &Matrix,
        cos: &[Vec<f32>],
        sin: &[Vec<f32>],
        capture: &CaptureSet,
        hook: &dyn ActivationHook,
        cache: &mut ActivationCache,
    ) -> Result<Matrix> {
        let cfg = &self.config;
        let n = resid.rows();
        let hd = cfg.head_dim();
        let d = cfg.d_model;
        let xn = rms_norm(resid, &lw.attn_norm, cfg.norm_eps as f32);
        let mut q = linear(&xn, &lw.wq, lw.bq.as_deref());
        let mut k = linear(&xn, &lw.wk, lw.bk.as_deref());
        let v = linear(&xn, &lw.wv, lw.bv.as_deref());
        apply_rope(&mut q, cfg.n_heads, hd, cos, sin);
        apply_rope(&mut k, cfg.kv_heads(), hd, cos, sin);

        let scale = 1.0 / (hd as f32).sqrt();
        let mut attn_out = Matrix::zeros(n, d);
        for h in 0..cfg.n_heads {
            let g = h / cfg.group_size();
            let mut pattern = Matrix::zeros(n, n);
            for t in 0..n {
                let qt = &q.row(t)[h * hd..(h + 1) * hd];
                let row = &mut pattern.row_mut(t)[..=t];
                for (s, score) in row.iter_mut().enumerate() {
                    *score = crate::tensor::dot(qt, &k.row(s)[g * hd..(g + 1) * hd]) * scale;
                }
                softmax_inplace(row);
            }
            emit(CacheKey::pattern(l, h), &mut pattern, capture, hook, cache)?;

            // z = A · V_g, then this head's slice of W_O
            let mut z = vec![0.0f32; hd];
            let mut head_out = Matrix::zeros(n, d);
            for t in 0..n {
                z.iter_mut().for_each(|x| *x = 0.0);
                for s in 0..=t {
                    let a = pattern.get(t, s);
                    if a == 0.0 {
                        continue;
                    }
                    let vs = &v.row(s)[g * hd..(g + 1) * hd];
                    for (zi, vi) in z.iter_mut().zip(vs) {
                        *zi += a * vi;
                    }
                }
                let out = head_out.row_mut(t);
                for (j, o) in out.iter_mut().enumerate() {
                    *o = lw.wo.dot_row_range(j, h * hd, &z);
                }
            }
            emit(CacheKey::head_out(l, h), &mut head_out, capture, hook, cache)?;
            attn_out.add_assign(&head_out);
        }
        emit(CacheKey::attn_out(l), &mut attn_out, capture, hook, cache)?;
        Ok(attn_out)
    }
}

fn emit(
    key: CacheKey,
    value: &mut Matrix,
    capture: &CaptureSet,
    hook: &dyn ActivationHook,
    cache: &mut ActivationCache,
) -> Result<()> {
    if hook.touches(&key) {
        hook.apply(&key, value)?;
    }
    if capture.contains(&key) {
        cache.insert(key, value.clone());
    }
    Ok(())
}

/// Rotary embedding, rotate-half convention (pairs `i` and `i + hd/2`).
fn apply_rope(x: &mut Matrix, heads: usize, hd: usize, cos: &[Vec<f32>], sin: &[Vec<f32>]) {
    let half = hd / 2;
    for t in 0..x.rows() {
        let row = x.row_mut(t);
        for h in 0..heads {
            let base = h * hd;
            for i in 0..half {
                let a = row[base + i];
                let b = row[base + i + half];
                row[base + i] = a * cos[t][i] - b * sin[t][i];
                row[base + i + half] = b * cos[t][i] + a * sin[t][i];
            }
        }
    }
}

/// `logits[yes] - logits[no]`.
pub fn logit_diff(logits: &[f32], yes_id: u32, no_id: u32) -> f64 {
    logits[yes_id as usize] as f64 - logits[no_id as usize] as f64
}
