//! Forward passes with activations overwritten at chosen cells.
//!
//! A patch names a site, layer, optional head and a set of token positions
//! (plus attended-to positions for attention patterns). The replacement value
//! comes from a donor cache (`restore`), a mean cache (`mean_ablate`) or is zero.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    ActivationCache, ActivationHook, CacheKey, CaptureSet, ForwardOutput, HeadId, LogitScope,
    Logits, Model, Site, TokenSequence,
};
use crate::positions::{PositionGroup, PositionMap};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchMode {
    Restore,
    MeanAblate,
    Zero,
}

impl std::fmt::Display for PatchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PatchMode::Restore => "restore",
            PatchMode::MeanAblate => "mean_ablate",
            PatchMode::Zero => "zero",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub site: Site,
    pub layer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<usize>,
    /// Target (query-side) token positions.
    #[serde(alias = "target_positions")]
    pub positions: Vec<usize>,
    /// Attended-to positions; attention patterns only. `None` means every column.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_positions: Option<Vec<usize>>,
    pub mode: PatchMode,
}

impl PatchSpec {
    pub fn new(site: Site, layer: usize, head: Option<usize>, positions: Vec<usize>, mode: PatchMode) -> Self {
        Self {
            site,
            layer,
            head,
            positions,
            source_positions: None,
            mode,
        }
    }

    pub fn restore(key: CacheKey, positions: Vec<usize>) -> Self {
        Self::new(key.site, key.layer, key.head, positions, PatchMode::Restore)
    }

    pub fn with_sources(mut self, sources: Vec<usize>) -> Self {
        self.source_positions = Some(sources);
        self
    }

    pub fn key(&self) -> CacheKey {
        CacheKey::new(self.site, self.layer, self.head)
    }

    pub fn validate(&self, model: &Model, seq_len: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPatch(m));
        let cfg = model.config();
        if self.layer >= cfg.n_layers {
            return bad(format!("layer {} out of range (L = {})", self.layer, cfg.n_layers));
        }
        match (self.site.is_per_head(), self.head) {
            (true, None) => return bad(format!("site {} requires a head index", self.site)),
            (false, Some(_)) => return bad(format!("site {} does not take a head index", self.site)),
            (true, Some(h)) if h >= cfg.n_heads => {
                return bad(format!("head {h} out of range (H = {})", cfg.n_heads))
            }
            _ => {}
        }
        if self.source_positions.is_some() && self.site != Site::AttnPattern {
            return bad("source_positions only apply to attn_pattern patches".into());
        }
        let all = self
            .positions
            .iter()
            .chain(self.source_positions.iter().flatten());
        for &p in all {
            if p >= seq_len {
                return bad(format!("position {p} outside sequence of length {seq_len}"));
            }
        }
        Ok(())
    }
}

/// Per-segment, per-offset mean activations.
///
/// Positions are aligned through the prompts' position maps: the mean for
/// offset `k` of segment `i` averages offset `k` of segment `i` over every
/// sequence that has it. Lookups at an offset no sequence reached fall back to
/// the mean over the whole segment.
#[derive(Debug, Clone)]
pub struct MeanCache {
    entries: BTreeMap<CacheKey, MeanEntry>,
    layout: PositionMap,
    count: usize,
}

#[derive(Debug, Clone)]
enum MeanEntry {
    Rows(Vec<SegmentMean>),
    /// Attention patterns need one shared layout; stored as a full matrix.
    Pattern(Matrix),
}

#[derive(Debug, Clone)]
struct SegmentMean {
    offsets: Vec<Vec<f32>>,
    whole: Vec<f32>,
}

impl MeanCache {
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn keys(&self) -> impl Iterator<Item = &CacheKey> {
        self.entries.keys()
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.entries.contains_key(key)
    }

    /// Layout of the first sequence averaged.
    pub fn layout(&self) -> &PositionMap {
        &self.layout
    }

    /// Mean row for `key` at `pos` of a sequence laid out as `map`.
    pub fn row(&self, key: &CacheKey, map: &PositionMap, pos: usize) -> Result<Vec<f32>> {
        let entry = self.entries.get(key).ok_or(Error::MissingActivation(*key))?;
        match entry {
            MeanEntry::Pattern(m) => {
                if map != &self.layout {
                    return Err(Error::Shape(format!(
                        "mean attention pattern for {key} needs the averaged layout"
                    )));
                }
                Ok(m.row(pos).to_vec())
            }
            MeanEntry::Rows(segs) => {
                if !map.same_structure(&self.layout) {
                    return Err(Error::Shape(format!(
                        "prompt layout does not match the mean cache for {key}"
                    )));
                }
                let (i, off) = map
                    .locate(pos)
                    .ok_or_else(|| Error::Shape(format!("position {pos} outside prompt")))?;
                let seg = &segs[i];
                Ok(seg.offsets.get(off).unwrap_or(&seg.whole).clone())
            }
        }
    }
}

/// Streams activation caches into a [`MeanCache`]; sums in f64.
#[derive(Debug)]
pub struct MeanCacheBuilder {
    keys: Vec<CacheKey>,
    layout: Option<PositionMap>,
    rows: HashMap<CacheKey, Vec<SegmentSum>>,
    patterns: HashMap<CacheKey, Vec<f64>>,
    count: usize,
}

#[derive(Debug, Clone)]
struct SegmentSum {
    offsets: Vec<Vec<f64>>,
    offset_counts: Vec<usize>,
    whole: Vec<f64>,
    whole_count: usize,
}

impl MeanCacheBuilder {
    pub fn new(keys: Vec<CacheKey>) -> Self {
        Self {
            keys,
            layout: None,
            rows: HashMap::new(),
            patterns: HashMap::new(),
            count: 0,
        }
    }

    pub fn capture_set(&self) -> CaptureSet {
        CaptureSet::keys(self.keys.iter().copied())
    }

    pub fn add(&mut self, cache: &ActivationCache, map: &PositionMap) -> Result<()> {
        match &self.layout {
            None => self.layout = Some(map.clone()),
            Some(l) if !l.same_structure(map) => {
                return Err(Error::Shape(
                    "sequences averaged into one mean cache must share a segment structure".into(),
                ))
            }
            Some(_) => {}
        }
        for key in &self.keys {
            let m = cache.require(key)?;
            if m.rows() != map.len() {
                return Err(Error::Shape(format!(
                    "{key} has {} rows but the prompt has {} tokens",
                    m.rows(),
                    map.len()
                )));
            }
            if key.site == Site::AttnPattern {
                if self.layout.as_ref() != Some(map) {
                    return Err(Error::Shape(format!(
                        "mean of {key} requires identical prompt layouts"
                    )));
                }
                let acc = self
                    .patterns
                    .entry(*key)
                    .or_insert_with(|| vec![0.0; m.as_slice().len()]);
                for (a, v) in acc.iter_mut().zip(m.as_slice()) {
                    *a += *v as f64;
                }
                continue;
            }
            let d = m.cols();
            let sums = self.rows.entry(*key).or_insert_with(|| {
                map.segments()
                    .iter()
                    .map(|_| SegmentSum {
                        offsets: Vec::new(),
                        offset_counts: Vec::new(),
                        whole: vec![0.0; d],
                        whole_count: 0,
                    })
                    .collect()
            });
            for (seg, sum) in map.segments().iter().zip(sums.iter_mut()) {
                for (off, pos) in seg.range().enumerate() {
                    if sum.offsets.len() <= off {
                        sum.offsets.push(vec![0.0; d]);
                        sum.offset_counts.push(0);
                    }
                    let row = m.row(pos);
                    for ((o, w), v) in sum.offsets[off].iter_mut().zip(sum.whole.iter_mut()).zip(row) {
                        *o += *v as f64;
                        *w += *v as f64;
                    }
                    sum.offset_counts[off] += 1;
                    sum.whole_count += 1;
                }
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<MeanCache> {
        let layout = self
            .layout
            .ok_or_else(|| Error::Data("mean cache over zero sequences".into()))?;
        let n = self.count as f64;
        let mut entries = BTreeMap::new();
        for (key, sum) in self.patterns {
            let data = sum.iter().map(|v| (v / n) as f32).collect();
            entries.insert(key, MeanEntry::Pattern(Matrix::from_vec(layout.len(), layout.len(), data)));
        }
        for (key, segs) in self.rows {
            let means = segs
                .into_iter()
                .map(|s| SegmentMean {
                    offsets: s
                        .offsets
                        .iter()
                        .zip(&s.offset_counts)
                        .map(|(o, &c)| o.iter().map(|v| (v / c as f64) as f32).collect())
                        .collect(),
                    whole: s.whole.iter().map(|v| (v / s.whole_count as f64) as f32).collect(),
                })
                .collect();
            entries.insert(key, MeanEntry::Rows(means));
        }
        Ok(MeanCache {
            entries,
            layout,
            count: self.count,
        })
    }
}

/// Mean activations over `prompts` for exactly `keys`.
pub fn compute_mean_cache(
    model: &Model,
    prompts: &[(TokenSequence, PositionMap)],
    keys: &[CacheKey],
) -> Result<MeanCache> {
    if prompts.is_empty() {
        return Err(Error::Data("mean cache over zero sequences".into()));
    }
    let mut builder = MeanCacheBuilder::new(keys.to_vec());
    let capture = builder.capture_set();
    let chunk = rayon::current_num_threads().max(1);
    for batch in prompts.chunks(chunk) {
        let caches: Vec<Result<ActivationCache>> = batch
            .par_iter()
            .map(|(t, _)| {
                model
                    .forward_with(t, &capture, &crate::model::NoHook, LogitScope::Last)
                    .map(|o| o.cache)
            })
            .collect();
        for (c, (_, map)) in caches.into_iter().zip(batch) {
            builder.add(&c?, map)?;
        }
    }
    builder.finish()
}

/// Replacement sources for a patched run.
#[derive(Debug, Clone, Copy, Default)]
pub struct Donors<'a> {
    pub cache: Option<&'a ActivationCache>,
    pub means: Option<&'a MeanCache>,
    /// Layout of the sequence being run; needed for mean lookups.
    pub layout: Option<&'a PositionMap>,
}

impl<'a> Donors<'a> {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn cache(cache: &'a ActivationCache) -> Self {
        Self {
            cache: Some(cache),
            ..Self::default()
        }
    }

    pub fn means(means: &'a MeanCache, layout: &'a PositionMap) -> Self {
        Self {
            means: Some(means),
            layout: Some(layout),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PatchOptions {
    /// Rescale patched attention rows to sum to one.
    pub renormalize: bool,
    pub scope: LogitScope,
}

#[derive(Debug, Clone)]
enum Write {
    Row(usize, Vec<f32>),
    Cell(usize, usize, f32),
}

struct PatchHook {
    writes: HashMap<CacheKey, Vec<Write>>,
    renormalize: bool,
}

impl ActivationHook for PatchHook {
    fn apply(&self, key: &CacheKey, value: &mut Matrix) -> Result<()> {
        let Some(ws) = self.writes.get(key) else {
            return Ok(());
        };
        let mut rows = Vec::new();
        for w in ws {
            match w {
                Write::Row(t, v) => value.row_mut(*t).copy_from_slice(v),
                Write::Cell(t, s, v) => {
                    value.set(*t, *s, *v);
                    rows.push(*t);
                }
            }
        }
        if self.renormalize && key.site == Site::AttnPattern {
            rows.sort_unstable();
            rows.dedup();
            for t in rows {
                let row = value.row_mut(t);
                let sum: f32 = row.iter().sum();
                if sum > 0.0 {
                    row.iter_mut().for_each(|x| *x /= sum);
                }
            }
        }
        Ok(())
    }

    fn touches(&self, key: &CacheKey) -> bool {
        self.writes.contains_key(key)
    }
}

fn donor_shape(model: &Model, key: &CacheKey, n: usize) -> (usize, usize) {
    match key.site {
        Site::AttnPattern => (n, n),
        _ => (n, model.config().d_model),
    }
}

/// Resolves patches into concrete cell writes, checking conflicts and donors.
fn compile(
    model: &Model,
    n: usize,
    patches: &[PatchSpec],
    donors: &Donors,
) -> Result<HashMap<CacheKey, Vec<Write>>> {
    // cell -> mode, to detect conflicting modes on one cell
    let mut seen: HashMap<(CacheKey, usize, usize), PatchMode> = HashMap::new();
    let mut writes: HashMap<CacheKey, Vec<Write>> = HashMap::new();
    for p in patches {
        p.validate(model, n)?;
        let key = p.key();
        let donor = match p.mode {
            PatchMode::Restore => {
                let cache = donors.cache.ok_or_else(|| {
                    Error::InvalidPatch(format!("restore patch on {key} without a donor cache"))
                })?;
                let m = cache.require(&key)?;
                let want = donor_shape(model, &key, n);
                if m.shape() != want {
                    return Err(Error::Shape(format!(
                        "donor {key} is {:?}, run needs {:?}",
                        m.shape(),
                        want
                    )));
                }
                Some(m)
            }
            _ => None,
        };
        let mean_row = |t: usize| -> Result<Vec<f32>> {
            let means = donors.means.ok_or_else(|| {
                Error::InvalidPatch(format!("mean_ablate patch on {key} without a mean cache"))
            })?;
            let layout = donors.layout.ok_or_else(|| {
                Error::InvalidPatch("mean_ablate patch without the prompt layout".into())
            })?;
            if layout.len() != n {
                return Err(Error::Shape(format!(
                    "layout covers {} tokens, sequence has {n}",
                    layout.len()
                )));
            }
            means.row(&key, layout, t)
        };
        let cols = donor_shape(model, &key, n).1;
        let out = writes.entry(key).or_default();
        let mut check = |t: usize, s: usize| -> Result<bool> {
            match seen.insert((key, t, s), p.mode) {
                Some(prev) if prev != p.mode => Err(Error::PatchConflict {
                    key,
                    cell: if key.site == Site::AttnPattern {
                        format!("({t}, {s})")
                    } else {
                        format!("position {t}")
                    },
                    first: prev.to_string(),
                    second: p.mode.to_string(),
                }),
                Some(_) => Ok(false),
                None => Ok(true),
            }
        };
        if key.site == Site::AttnPattern {
            let sources: Vec<usize> = p
                .source_positions
                .clone()
                .unwrap_or_else(|| (0..n).collect());
            for &t in &p.positions {
                let mean = if p.mode == PatchMode::MeanAblate {
                    Some(mean_row(t)?)
                } else {
                    None
                };
                for &s in &sources {
                    if !check(t, s)? {
                        continue;
                    }
                    let v = match p.mode {
                        PatchMode::Restore => donor.expect("restore donor").get(t, s),
                        PatchMode::MeanAblate => mean.as_ref().expect("mean row")[s],
                        PatchMode::Zero => 0.0,
                    };
                    out.push(Write::Cell(t, s, v));
                }
            }
        } else {
            for &t in &p.positions {
                if !check(t, 0)? {
                    continue;
                }
                let v = match p.mode {
                    PatchMode::Restore => donor.expect("restore donor").row(t).to_vec(),
                    PatchMode::MeanAblate => mean_row(t)?,
                    PatchMode::Zero => vec![0.0; cols],
                };
                out.push(Write::Row(t, v));
            }
        }
    }
    Ok(writes)
}

/// Forward pass on `tokens` with `patches` applied; captures `capture`.
pub fn run_patched(
    model: &Model,
    tokens: &TokenSequence,
    patches: &[PatchSpec],
    donors: &Donors,
    capture: &CaptureSet,
    opts: PatchOptions,
) -> Result<ForwardOutput> {
    model.validate_tokens(tokens)?;
    let writes = compile(model, tokens.len(), patches, donors)?;
    let hook = PatchHook {
        writes,
        renormalize: opts.renormalize,
    };
    model.forward_with(tokens, capture, &hook, opts.scope)
}

/// Logits of a patched run.
pub fn run_with_patches(
    model: &Model,
    tokens: &TokenSequence,
    patches: &[PatchSpec],
    donors: &Donors,
) -> Result<Logits> {
    run_patched(model, tokens, patches, donors, &CaptureSet::none(), PatchOptions::default())
        .map(|o| o.logits)
}

/// Mean-ablation patches on `head_out` for each `(head, group)`.
pub fn knockout_patches(heads: &[(HeadId, PositionGroup)], layout: &PositionMap) -> Vec<PatchSpec> {
    heads
        .iter()
        .map(|(h, g)| {
            PatchSpec::new(
                Site::HeadOut,
                h.layer,
                Some(h.head),
                layout.positions(*g),
                PatchMode::MeanAblate,
            )
        })
        .collect()
}

/// Runs `tokens` with the listed heads mean-ablated at their position groups.
pub fn knockout(
    model: &Model,
    tokens: &TokenSequence,
    layout: &PositionMap,
    heads: &[(HeadId, PositionGroup)],
    means: &MeanCache,
    scope: LogitScope,
) -> Result<Logits> {
    let patches = knockout_patches(heads, layout);
    run_patched(
        model,
        tokens,
        &patches,
        &Donors::means(means, layout),
        &CaptureSet::none(),
        PatchOptions {
            renormalize: false,
            scope,
        },
    )
    .map(|o| o.logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_spec_json_schema() {
        let json = r#"{"site":"attn_pattern","layer":2,"head":1,"target_positions":[5,6],
                       "source_positions":[1,2],"mode":"restore"}"#;
        let p: PatchSpec = serde_json::from_str(json).unwrap();
        assert_eq!(p.site, Site::AttnPattern);
        assert_eq!(p.positions, vec![5, 6]);
        assert_eq!(p.source_positions, Some(vec![1, 2]));
        let back: PatchSpec = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);
        let m: PatchSpec =
            serde_json::from_str(r#"{"site":"mlp_out","layer":0,"positions":[0],"mode":"mean_ablate"}"#)
                .unwrap();
        assert_eq!(m.mode, PatchMode::MeanAblate);
        assert_eq!(m.head, None);
    }

    #[test]
    fn mean_builder_identical_and_opposite() {
        let map = PositionMap::flat(2).unwrap();
        let key = CacheKey::mlp_out(0);
        let mut a = ActivationCache::new();
        a.insert(key, Matrix::from_vec(2, 3, vec![0.1, -0.3, 7.0, 1.0, 2.0, 3.0]));
        let mut b = ActivationCache::new();
        b.insert(key, Matrix::from_vec(2, 3, vec![-0.1, 0.3, -7.0, -1.0, -2.0, -3.0]));

        let mut same = MeanCacheBuilder::new(vec![key]);
        for _ in 0..3 {
            same.add(&a, &map).unwrap();
        }
        let same = same.finish().unwrap();
        assert_eq!(same.count(), 3);
        assert_eq!(same.row(&key, &map, 0).unwrap(), vec![0.1, -0.3, 7.0]);

        let mut opp = MeanCacheBuilder::new(vec![key]);
        opp.add(&a, &map).unwrap();
        opp.add(&b, &map).unwrap();
        let opp = opp.finish().unwrap();
        assert_eq!(opp.row(&key, &map, 1).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn mean_builder_falls_back_to_segment_mean() {
        use crate::positions::SegmentKind::*;
        let key = CacheKey::resid(0);
        let long = PositionMap::from_kinds(&[Document(0), Document(0), Document(0), Last]).unwrap();
        let short = PositionMap::from_kinds(&[Document(0), Last]).unwrap();
        let mut c = ActivationCache::new();
        c.insert(key, Matrix::from_vec(2, 1, vec![4.0, 9.0]));
        let mut b = MeanCacheBuilder::new(vec![key]);
        b.add(&c, &short).unwrap();
        let m = b.finish().unwrap();
        assert_eq!(m.row(&key, &long, 0).unwrap(), vec![4.0]);
        // offsets 1 and 2 were never seen, so the segment-wide mean is used
        assert_eq!(m.row(&key, &long, 2).unwrap(), vec![4.0]);
        assert_eq!(m.row(&key, &long, 3).unwrap(), vec![9.0]);
        assert!(m.row(&CacheKey::resid(1), &long, 0).is_err());
        assert!(MeanCacheBuilder::new(vec![key]).finish().is_err());
    }
}
