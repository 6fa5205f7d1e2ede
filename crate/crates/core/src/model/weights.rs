//! Named-tensor checkpoints (safetensors layout) and the in-memory weight set.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use half::{bf16, f16};
use rayon::prelude::*;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix};

/// Element storage for a weight matrix. Half-precision storage is widened to
/// f32 inside every dot product.
#[derive(Debug, Clone)]
pub enum Storage {
    F32(Vec<f32>),
    F16(Vec<f16>),
    Bf16(Vec<bf16>),
}

/// Weight matrix stored as `[out, in]`, the layout used by Hugging Face linears.
#[derive(Debug, Clone)]
pub struct WeightMatrix {
    rows: usize,
    cols: usize,
    storage: Storage,
}

impl WeightMatrix {
    pub fn from_f32(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self {
            rows,
            cols,
            storage: Storage::F32(data),
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_f32(rows, cols, vec![0.0; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    /// Mutable f32 access; `None` for half-precision storage.
    pub fn as_f32_mut(&mut self) -> Option<&mut [f32]> {
        match &mut self.storage {
            Storage::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        let i = r * self.cols + c;
        match &self.storage {
            Storage::F32(v) => v[i],
            Storage::F16(v) => v[i].to_f32(),
            Storage::Bf16(v) => v[i].to_f32(),
        }
    }

    pub fn row_f32(&self, r: usize) -> Vec<f32> {
        self.row_range_f32(r, 0, self.cols)
    }

    fn row_range_f32(&self, r: usize, start: usize, len: usize) -> Vec<f32> {
        let s = r * self.cols + start;
        match &self.storage {
            Storage::F32(v) => v[s..s + len].to_vec(),
            Storage::F16(v) => v[s..s + len].iter().map(|x| x.to_f32()).collect(),
            Storage::Bf16(v) => v[s..s + len].iter().map(|x| x.to_f32()).collect(),
        }
    }

    /// `row[r][start..start + x.len()] · x`.
    pub fn dot_row_range(&self, r: usize, start: usize, x: &[f32]) -> f32 {
        let s = r * self.cols + start;
        match &self.storage {
            Storage::F32(v) => dot(&v[s..s + x.len()], x),
            _ => dot(&self.row_range_f32(r, start, x.len()), x),
        }
    }

    pub fn dot_row(&self, r: usize, x: &[f32]) -> f32 {
        self.dot_row_range(r, 0, x)
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.storage {
            Storage::F32(v) => v.clone(),
            Storage::F16(v) => v.iter().map(|x| x.to_f32()).collect(),
            Storage::Bf16(v) => v.iter().map(|x| x.to_f32()).collect(),
        }
    }
}

const PAR_THRESHOLD: usize = 1 << 16;

/// `y = x · Wᵀ + bias` for every row of `x`.
pub fn linear(x: &Matrix, w: &WeightMatrix, bias: Option<&[f32]>) -> Matrix {
    assert_eq!(x.cols(), w.cols(), "linear input width mismatch");
    let out_dim = w.rows();
    let mut out = Matrix::zeros(x.rows(), out_dim);
    let row_job = |(r, orow): (usize, &mut [f32])| {
        let xr = x.row(r);
        for (j, o) in orow.iter_mut().enumerate() {
            let mut v = w.dot_row(j, xr);
            if let Some(b) = bias {
                v += b[j];
            }
            *o = v;
        }
    };
    if x.rows() * out_dim * w.cols() >= PAR_THRESHOLD && x.rows() > 1 {
        out.as_mut_slice()
            .par_chunks_mut(out_dim)
            .enumerate()
            .for_each(row_job);
    } else if out_dim * w.cols() >= PAR_THRESHOLD {
        // single row: split the output dimension instead
        let xr = x.row(0);
        out.as_mut_slice()
            .par_iter_mut()
            .enumerate()
            .for_each(|(j, o)| {
                let mut v = w.dot_row(j, xr);
                if let Some(b) = bias {
                    v += b[j];
                }
                *o = v;
            });
    } else {
        out.as_mut_slice()
            .chunks_mut(out_dim)
            .enumerate()
            .for_each(row_job);
    }
    out
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: WeightMatrix,
    pub bq: Option<Vec<f32>>,
    pub wk: WeightMatrix,
    pub bk: Option<Vec<f32>>,
    pub wv: WeightMatrix,
    pub bv: Option<Vec<f32>>,
    pub wo: WeightMatrix,
    pub mlp_norm: Vec<f32>,
    pub w_gate: WeightMatrix,
    pub w_up: WeightMatrix,
    pub w_down: WeightMatrix,
}

#[derive(Debug, Clone)]
pub struct Weights {
    pub embed: WeightMatrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    /// `None` when the unembedding is tied to the token embedding.
    pub unembed: Option<WeightMatrix>,
    pub unembed_bias: Vec<f32>,
}

impl Weights {
    /// All-zero weights (unit norm scales) with the shapes `cfg` requires.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let hd = cfg.head_dim();
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                attn_norm: vec![1.0; d],
                wq: WeightMatrix::zeros(cfg.n_heads * hd, d),
                bq: None,
                wk: WeightMatrix::zeros(cfg.kv_heads() * hd, d),
                bk: None,
                wv: WeightMatrix::zeros(cfg.kv_heads() * hd, d),
                bv: None,
                wo: WeightMatrix::zeros(d, cfg.n_heads * hd),
                mlp_norm: vec![1.0; d],
                w_gate: WeightMatrix::zeros(cfg.d_ff, d),
                w_up: WeightMatrix::zeros(cfg.d_ff, d),
                w_down: WeightMatrix::zeros(d, cfg.d_ff),
            })
            .collect();
        Self {
            embed: WeightMatrix::zeros(cfg.vocab_size, d),
            layers,
            final_norm: vec![1.0; d],
            unembed: if cfg.tie_word_embeddings {
                None
            } else {
                Some(WeightMatrix::zeros(cfg.vocab_size, d))
            },
            unembed_bias: vec![0.0; cfg.vocab_size],
        }
    }

    pub fn unembed_matrix(&self) -> &WeightMatrix {
        self.unembed.as_ref().unwrap_or(&self.embed)
    }

    /// Checks every tensor against `cfg`; the error names the offending tensor.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let d = cfg.d_model;
        let hd = cfg.head_dim();
        let v = cfg.vocab_size;
        check_mat("W_E", EMBED, &self.embed, [v, d])?;
        if self.layers.len() != cfg.n_layers {
            return Err(Error::load(
                "layers",
                format!("found {} layers, config says {}", self.layers.len(), cfg.n_layers),
            ));
        }
        for (l, lw) in self.layers.iter().enumerate() {
            let n = |s: &str| layer_name(l, s);
            check_vec("attn_norm", &n(ATTN_NORM), &lw.attn_norm, d)?;
            check_mat("W_Q", &n(WQ), &lw.wq, [cfg.n_heads * hd, d])?;
            check_mat("W_K", &n(WK), &lw.wk, [cfg.kv_heads() * hd, d])?;
            check_mat("W_V", &n(WV), &lw.wv, [cfg.kv_heads() * hd, d])?;
            check_mat("W_O", &n(WO), &lw.wo, [d, cfg.n_heads * hd])?;
            if let Some(b) = &lw.bq {
                check_vec("b_Q", &n(BQ), b, cfg.n_heads * hd)?;
            }
            if let Some(b) = &lw.bk {
                check_vec("b_K", &n(BK), b, cfg.kv_heads() * hd)?;
            }
            if let Some(b) = &lw.bv {
                check_vec("b_V", &n(BV), b, cfg.kv_heads() * hd)?;
            }
            check_vec("mlp_norm", &n(MLP_NORM), &lw.mlp_norm, d)?;
            check_mat("W_gate", &n(GATE), &lw.w_gate, [cfg.d_ff, d])?;
            check_mat("W_up", &n(UP), &lw.w_up, [cfg.d_ff, d])?;
            check_mat("W_down", &n(DOWN), &lw.w_down, [d, cfg.d_ff])?;
        }
        check_vec("final_norm", FINAL_NORM, &self.final_norm, d)?;
        match &self.unembed {
            Some(u) => check_mat("W_U", LM_HEAD, u, [v, d])?,
            None if !cfg.tie_word_embeddings => {
                return Err(Error::load(
                    format!("W_U ({LM_HEAD})"),
                    "missing tensor and tie_word_embeddings is false",
                ))
            }
            None => {}
        }
        check_vec("b", LM_HEAD_BIAS, &self.unembed_bias, v)?;
        Ok(())
    }
}

const EMBED: &str = "model.embed_tokens.weight";
const FINAL_NORM: &str = "model.norm.weight";
const LM_HEAD: &str = "lm_head.weight";
const LM_HEAD_BIAS: &str = "lm_head.bias";
const ATTN_NORM: &str = "input_layernorm.weight";
const MLP_NORM: &str = "post_attention_layernorm.weight";
const WQ: &str = "self_attn.q_proj.weight";
const WK: &str = "self_attn.k_proj.weight";
const WV: &str = "self_attn.v_proj.weight";
const WO: &str = "self_attn.o_proj.weight";
const BQ: &str = "self_attn.q_proj.bias";
const BK: &str = "self_attn.k_proj.bias";
const BV: &str = "self_attn.v_proj.bias";
const GATE: &str = "mlp.gate_proj.weight";
const UP: &str = "mlp.up_proj.weight";
const DOWN: &str = "mlp.down_proj.weight";

fn layer_name(l: usize, suffix: &str) -> String {
    format!("model.layers.{l}.{suffix}")
}

fn check_mat(role: &str, name: &str, m: &WeightMatrix, want: [usize; 2]) -> Result<()> {
    if m.shape() != want {
        return Err(Error::load(
            format!("{role} ({name})"),
            format!("shape {:?}, expected {:?}", m.shape(), want),
        ));
    }
    Ok(())
}

fn check_vec(role: &str, name: &str, v: &[f32], want: usize) -> Result<()> {
    if v.len() != want {
        return Err(Error::load(
            format!("{role} ({name})"),
            format!("shape [{}], expected [{want}]", v.len()),
        ));
    }
    Ok(())
}

/// How half-precision checkpoint tensors are held in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StoragePrecision {
    /// Widen everything to f32 at load time.
    #[default]
    F32,
    /// Keep f16/bf16 tensors as stored; accumulation is still f32.
    Native,
}

/// Raw tensors gathered from one or more safetensors files.
struct TensorStore {
    tensors: HashMap<String, (Vec<usize>, Storage)>,
}

impl TensorStore {
    fn read(files: &[PathBuf], precision: StoragePrecision) -> Result<Self> {
        let mut tensors = HashMap::new();
        for path in files {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let st = SafeTensors::deserialize(&bytes).map_err(|e| {
                Error::load(path.display().to_string(), format!("cannot parse container: {e}"))
            })?;
            for (name, view) in st.tensors() {
                let storage = convert(&name, &view, precision)?;
                tensors.insert(name, (view.shape().to_vec(), storage));
            }
        }
        Ok(Self { tensors })
    }

    fn take(&mut self, role: &str, name: &str) -> Result<(Vec<usize>, Storage)> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::load(format!("{role} ({name})"), "missing tensor"))
    }

    fn matrix(&mut self, role: &str, name: &str) -> Result<WeightMatrix> {
        let (shape, storage) = self.take(role, name)?;
        if shape.len() != 2 {
            return Err(Error::load(
                format!("{role} ({name})"),
                format!("expected a 2-d tensor, got shape {shape:?}"),
            ));
        }
        Ok(WeightMatrix {
            rows: shape[0],
            cols: shape[1],
            storage,
        })
    }

    fn vector(&mut self, role: &str, name: &str) -> Result<Vec<f32>> {
        let (shape, storage) = self.take(role, name)?;
        if shape.len() != 1 {
            return Err(Error::load(
                format!("{role} ({name})"),
                format!("expected a 1-d tensor, got shape {shape:?}"),
            ));
        }
        Ok(storage_to_f32(storage))
    }

    fn optional_vector(&mut self, role: &str, name: &str) -> Result<Option<Vec<f32>>> {
        if self.tensors.contains_key(name) {
            self.vector(role, name).map(Some)
        } else {
            Ok(None)
        }
    }
}

fn storage_to_f32(s: Storage) -> Vec<f32> {
    match s {
        Storage::F32(v) => v,
        Storage::F16(v) => v.into_iter().map(|x| x.to_f32()).collect(),
        Storage::Bf16(v) => v.into_iter().map(|x| x.to_f32()).collect(),
    }
}

fn convert(name: &str, view: &TensorView<'_>, precision: StoragePrecision) -> Result<Storage> {
    let data = view.data();
    let storage = match view.dtype() {
        Dtype::F32 => Storage::F32(
            data.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        ),
        Dtype::F16 => {
            let v: Vec<f16> = data
                .chunks_exact(2)
                .map(|b| f16::from_le_bytes([b[0], b[1]]))
                .collect();
            match precision {
                StoragePrecision::Native => Storage::F16(v),
                StoragePrecision::F32 => Storage::F32(v.into_iter().map(|x| x.to_f32()).collect()),
            }
        }
        Dtype::BF16 => {
            let v: Vec<bf16> = data
                .chunks_exact(2)
                .map(|b| bf16::from_le_bytes([b[0], b[1]]))
                .collect();
            match precision {
                StoragePrecision::Native => Storage::Bf16(v),
                StoragePrecision::F32 => Storage::F32(v.into_iter().map(|x| x.to_f32()).collect()),
            }
        }
        other => {
            return Err(Error::load(
                name,
                format!("unsupported dtype {other:?}"),
            ))
        }
    };
    Ok(storage)
}

/// Resolves a weights path (a `.safetensors` file or a directory of shards).
pub fn weight_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let rd = std::fs::read_dir(path).map_err(|e| Error::io(path, e))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "safetensors"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::load(
            path.display().to_string(),
            "no .safetensors files found",
        ));
    }
    Ok(files)
}

/// Reads and validates a checkpoint against `cfg`.
pub fn load_weights(path: &Path, cfg: &ModelConfig, precision: StoragePrecision) -> Result<Weights> {
    let files = weight_files(path)?;
    let mut store = TensorStore::read(&files, precision)?;
    let embed = store.matrix("W_E", EMBED)?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let n = |s: &str| layer_name(l, s);
        layers.push(LayerWeights {
            attn_norm: store.vector("attn_norm", &n(ATTN_NORM))?,
            wq: store.matrix("W_Q", &n(WQ))?,
            bq: store.optional_vector("b_Q", &n(BQ))?,
            wk: store.matrix("W_K", &n(WK))?,
            bk: store.optional_vector("b_K", &n(BK))?,
            wv: store.matrix("W_V", &n(WV))?,
            bv: store.optional_vector("b_V", &n(BV))?,
            wo: store.matrix("W_O", &n(WO))?,
            mlp_norm: store.vector("mlp_norm", &n(MLP_NORM))?,
            w_gate: store.matrix("W_gate", &n(GATE))?,
            w_up: store.matrix("W_up", &n(UP))?,
            w_down: store.matrix("W_down", &n(DOWN))?,
        });
    }
    let final_norm = store.vector("final_norm", FINAL_NORM)?;
    let unembed = if store.tensors.contains_key(LM_HEAD) {
        Some(store.matrix("W_U", LM_HEAD)?)
    } else if cfg.tie_word_embeddings {
        None
    } else {
        return Err(Error::load(format!("W_U ({LM_HEAD})"), "missing tensor"));
    };
    let unembed_bias = store
        .optional_vector("b", LM_HEAD_BIAS)?
        .unwrap_or_else(|| vec![0.0; cfg.vocab_size]);
    if layers.len() == cfg.n_layers {
        let extra: Vec<&String> = store
            .tensors
            .keys()
            .filter(|k| k.starts_with(&layer_name(cfg.n_layers, "")))
            .collect();
        if let Some(name) = extra.first() {
            return Err(Error::load(
                (*name).clone(),
                format!("checkpoint has more layers than num_hidden_layers={}", cfg.n_layers),
            ));
        }
    }
    let w = Weights {
        embed,
        layers,
        final_norm,
        unembed,
        unembed_bias,
    };
    w.validate(cfg)?;
    Ok(w)
}

/// Writes `weights` as a single f32 safetensors file.
pub fn save_weights(path: &Path, weights: &Weights) -> Result<()> {
    let mut named: BTreeMap<String, (Vec<usize>, Vec<u8>)> = BTreeMap::new();
    let mut put_mat = |name: String, m: &WeightMatrix| {
        named.insert(name, (m.shape().to_vec(), f32_bytes(&m.to_f32_vec())));
    };
    put_mat(EMBED.into(), &weights.embed);
    for (l, lw) in weights.layers.iter().enumerate() {
        put_mat(layer_name(l, WQ), &lw.wq);
        put_mat(layer_name(l, WK), &lw.wk);
        put_mat(layer_name(l, WV), &lw.wv);
        put_mat(layer_name(l, WO), &lw.wo);
        put_mat(layer_name(l, GATE), &lw.w_gate);
        put_mat(layer_name(l, UP), &lw.w_up);
        put_mat(layer_name(l, DOWN), &lw.w_down);
    }
    if let Some(u) = &weights.unembed {
        put_mat(LM_HEAD.into(), u);
    }
    let mut put_vec = |name: String, v: &[f32]| {
        named.insert(name, (vec![v.len()], f32_bytes(v)));
    };
    for (l, lw) in weights.layers.iter().enumerate() {
        put_vec(layer_name(l, ATTN_NORM), &lw.attn_norm);
        put_vec(layer_name(l, MLP_NORM), &lw.mlp_norm);
        if let Some(b) = &lw.bq {
            put_vec(layer_name(l, BQ), b);
        }
        if let Some(b) = &lw.bk {
            put_vec(layer_name(l, BK), b);
        }
        if let Some(b) = &lw.bv {
            put_vec(layer_name(l, BV), b);
        }
    }
    put_vec(FINAL_NORM.into(), &weights.final_norm);
    if weights.unembed_bias.iter().any(|&b| b != 0.0) {
        put_vec(LM_HEAD_BIAS.into(), &weights.unembed_bias);
    }
    let views: Vec<(String, TensorView<'_>)> = named
        .iter()
        .map(|(name, (shape, bytes))| {
            let view = TensorView::new(Dtype::F32, shape.clone(), bytes)
                .expect("tensor byte length matches its shape");
            (name.clone(), view)
        })
        .collect();
    safetensors::serialize_to_file(views, &None, path)
        .map_err(|e| Error::load(path.display().to_string(), format!("cannot write: {e}")))
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_matches_manual() {
        let x = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
        let w = WeightMatrix::from_f32(2, 3, vec![1.0, 0.0, 0.0, 0.5, 0.5, 0.5]);
        let y = linear(&x, &w, Some(&[0.0, 1.0]));
        assert_eq!(y.as_slice(), &[1.0, 4.0, -1.0, 1.0]);
    }

    #[test]
    fn half_storage_dot_widens() {
        let w = WeightMatrix {
            rows: 1,
            cols: 2,
            storage: Storage::Bf16(vec![bf16::from_f32(0.5), bf16::from_f32(2.0)]),
        };
        assert_eq!(w.dot_row(0, &[2.0, 1.0]), 3.0);
    }
}
