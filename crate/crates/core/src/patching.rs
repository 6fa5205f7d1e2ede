//! Clean / corrupted / patched runs and indirect-effect grids.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervention::{run_patched, Donors, PatchOptions, PatchSpec};
use crate::model::{ActivationCache, CacheKey, CaptureSet, LogitScope, Model, NoHook, Site, TokenSequence};
use crate::positions::PositionGroup;
use crate::prompt::{PromptPair, Style};

pub use crate::model::logit_diff;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunTriple {
    pub clean: f64,
    pub corrupted: f64,
    pub patched: f64,
}

/// `(patched - corrupted) / (clean - corrupted)`, or `None` when the
/// clean/corrupted gap is at most `eps` in magnitude.
pub fn indirect_effect(t: RunTriple, eps: f64) -> Option<f64> {
    let denom = t.clean - t.corrupted;
    if !(denom.abs() > eps) || !t.patched.is_finite() {
        return None;
    }
    Some((t.patched - t.corrupted) / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceOptions {
    pub eps: f64,
    /// Clamp each IE into `[0, 1]` before averaging.
    pub clamp: bool,
    /// Rescale patched attention rows to sum to one.
    pub renormalize: bool,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            clamp: false,
            renormalize: false,
        }
    }
}

/// Mean indirect effect over a dataset, rows = layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IEGrid {
    pub model: String,
    pub dataset: String,
    pub style: Style,
    pub site: String,
    pub rows: Vec<usize>,
    pub cols: Vec<String>,
    pub mean_ie: Vec<Vec<f64>>,
    pub counts: Vec<Vec<usize>>,
    pub excluded: usize,
    pub clamped: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl IEGrid {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.cols.len()
    }

    pub fn col_index(&self, name: &str) -> Option<usize> {
        self.cols.iter().position(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let c = self
            .col_index(name)
            .ok_or_else(|| Error::Data(format!("grid has no column {name:?}")))?;
        Ok(self.mean_ie.iter().map(|r| r[c]).collect())
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.mean_ie[row][col]
    }

    /// `(row, col)` of the largest mean IE; first wins on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0);
        for (r, row) in self.mean_ie.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if v > self.mean_ie[best.0][best.1] {
                    best = (r, c);
                }
            }
        }
        best
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("grid serializes") + "\n"
    }

    /// `layer,col,mean_ie,n` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,col,mean_ie,n\n");
        for (r, layer) in self.rows.iter().enumerate() {
            for (c, col) in self.cols.iter().enumerate() {
                s.push_str(&format!("{layer},{col},{},{}\n", self.mean_ie[r][c], self.counts[r][c]));
            }
        }
        s
    }
}

/// Logit difference at the last position of a plain run, plus its cache.
pub fn run_ld(model: &Model, tokens: &TokenSequence, yes: u32, no: u32, capture: &CaptureSet) -> Result<(f64, ActivationCache)> {
    let out = model.forward_with(tokens, capture, &NoHook, LogitScope::Last)?;
    Ok((logit_diff(out.logits.last(), yes, no), out.cache))
}

/// Logit difference of a patched run on the corrupted prompt.
pub fn patched_ld(model: &Model, pair: &PromptPair, patches: &[PatchSpec], clean: &ActivationCache, opts: &TraceOptions) -> Result<f64> {
    let out = run_patched(
        model,
        &pair.corrupted,
        patches,
        &Donors::cache(clean),
        &CaptureSet::none(),
        PatchOptions {
            renormalize: opts.renormalize,
            scope: LogitScope::Last,
        },
    )?;
    Ok(logit_diff(out.logits.last(), pair.yes_id, pair.no_id))
}

/// The three runs for one prompt pair and one patch set (restored from the clean run).
pub fn run_triple(model: &Model, pair: &PromptPair, patches: &[PatchSpec], opts: &TraceOptions) -> Result<RunTriple> {
    let keys = CaptureSet::keys(patches.iter().map(PatchSpec::key));
    let (clean, cache) = run_ld(model, &pair.clean, pair.yes_id, pair.no_id, &keys)?;
    let (corrupted, _) = run_ld(model, &pair.corrupted, pair.yes_id, pair.no_id, &CaptureSet::none())?;
    let patched = patched_ld(model, pair, patches, &cache, opts)?;
    Ok(RunTriple {
        clean,
        corrupted,
        patched,
    })
}

/// One prompt's contribution: `None` when the prompt is excluded.
type PromptResult = Option<Vec<f64>>;

/// Runs `per_prompt` over the dataset and averages the IE of each cell.
fn aggregate(
    pairs: &[PromptPair],
    n_cells: usize,
    opts: &TraceOptions,
    per_prompt: impl Fn(&PromptPair, f64, f64) -> Result<Vec<f64>> + Sync,
    model: &Model,
) -> Result<(Vec<f64>, usize, usize)> {
    if pairs.is_empty() {
        return Err(Error::Data("empty prompt dataset".into()));
    }
    let results: Vec<Result<PromptResult>> = pairs
        .par_iter()
        .map(|pair| {
            pair.check()?;
            let (clean, _) = run_ld(model, &pair.clean, pair.yes_id, pair.no_id, &CaptureSet::none())?;
            let (corr, _) = run_ld(model, &pair.corrupted, pair.yes_id, pair.no_id, &CaptureSet::none())?;
            if !((clean - corr).abs() > opts.eps) {
                return Ok(None);
            }
            let lds = per_prompt(pair, clean, corr)?;
            debug_assert_eq!(lds.len(), n_cells);
            Ok(Some(
                lds.into_iter()
                    .map(|patched| {
                        let ie = indirect_effect(
                            RunTriple {
                                clean,
                                corrupted: corr,
                                patched,
                            },
                            opts.eps,
                        )
                        .expect("denominator checked");
                        if opts.clamp {
                            ie.clamp(0.0, 1.0)
                        } else {
                            ie
                        }
                    })
                    .collect(),
            ))
        })
        .collect();
    let mut sums = vec![0.0f64; n_cells];
    let mut used = 0;
    let mut excluded = 0;
    for r in results {
        match r? {
            None => excluded += 1,
            Some(ies) => {
                used += 1;
                for (s, v) in sums.iter_mut().zip(ies) {
                    *s += v;
                }
            }
        }
    }
    if used == 0 {
        return Err(Error::Undefined(format!(
            "all {excluded} prompts have |LD_clean - LD_corrupted| <= eps"
        )));
    }
    let means = sums.into_iter().map(|s| s / used as f64).collect();
    Ok((means, used, excluded))
}

fn dataset_style(pairs: &[PromptPair]) -> Result<Style> {
    let style = pairs
        .first()
        .map(|p| p.style)
        .ok_or_else(|| Error::Data("empty prompt dataset".into()))?;
    if pairs.iter().any(|p| p.style != style) {
        return Err(Error::Data("prompt dataset mixes pointwise and pairwise pairs".into()));
    }
    Ok(style)
}

fn grid(style: Style, site: &str, rows: usize, cols: Vec<String>, means: Vec<f64>, used: usize, excluded: usize, opts: &TraceOptions) -> IEGrid {
    let nc = cols.len();
    IEGrid {
        model: String::new(),
        dataset: String::new(),
        style,
        site: site.to_string(),
        rows: (0..rows).collect(),
        cols,
        mean_ie: means.chunks(nc).map(<[f64]>::to_vec).collect(),
        counts: vec![vec![used; nc]; rows],
        excluded,
        clamped: opts.clamp,
        notes: vec!["restore patches copy clean activations position by position".into()],
    }
}

/// Layer × position-group grids, one per site; each cell restores that site at
/// every position of the group.
pub fn trace_components(
    model: &Model,
    pairs: &[PromptPair],
    sites: &[Site],
    groups: &[PositionGroup],
    opts: &TraceOptions,
) -> Result<Vec<IEGrid>> {
    let style = dataset_style(pairs)?;
    if sites.iter().any(|s| s.is_per_head()) {
        return Err(Error::InvalidPatch("trace_components takes layer-level sites only".into()));
    }
    let l = model.n_layers();
    let cells: Vec<(Site, usize, PositionGroup)> = sites
        .iter()
        .flat_map(|&s| (0..l).flat_map(move |layer| groups.iter().map(move |&g| (s, layer, g))))
        .collect();
    let capture = CaptureSet::sites(sites);
    let (means, used, excluded) = aggregate(
        pairs,
        cells.len(),
        opts,
        |pair, _, _| {
            let (_, clean) = run_ld(model, &pair.clean, pair.yes_id, pair.no_id, &capture)?;
            cells
                .par_iter()
                .map(|&(site, layer, g)| {
                    let patch = PatchSpec::restore(CacheKey::new(site, layer, None), pair.map.positions(g));
                    patched_ld(model, pair, &[patch], &clean, opts)
                })
                .collect()
        },
        model,
    )?;
    let per_site = l * groups.len();
    Ok(sites
        .iter()
        .enumerate()
        .map(|(i, s)| {
            grid(
                style,
                s.as_str(),
                l,
                groups.iter().map(|g| g.to_string()).collect(),
                means[i * per_site..(i + 1) * per_site].to_vec(),
                used,
                excluded,
                opts,
            )
        })
        .collect())
}

fn per_head_grid(
    model: &Model,
    pairs: &[PromptPair],
    site: Site,
    opts: &TraceOptions,
    patch_for: impl Fn(&PromptPair, usize, usize) -> PatchSpec + Sync,
) -> Result<IEGrid> {
    let style = dataset_style(pairs)?;
    let (l, h) = (model.n_layers(), model.n_heads());
    let (means, used, excluded) = aggregate(
        pairs,
        l * h,
        opts,
        |pair, _, _| {
            let mut out = Vec::with_capacity(l * h);
            // one clean capture per layer keeps memory at H matrices
            for layer in 0..l {
                let capture = CaptureSet::keys((0..h).map(|hd| CacheKey::new(site, layer, Some(hd))));
                let (_, clean) = run_ld(model, &pair.clean, pair.yes_id, pair.no_id, &capture)?;
                let lds: Vec<f64> = (0..h)
                    .into_par_iter()
                    .map(|hd| patched_ld(model, pair, &[patch_for(pair, layer, hd)], &clean, opts))
                    .collect::<Result<_>>()?;
                out.extend(lds);
            }
            Ok(out)
        },
        model,
    )?;
    Ok(grid(
        style,
        site.as_str(),
        l,
        (0..h).map(|hd| format!("H{hd}")).collect(),
        means,
        used,
        excluded,
        opts,
    ))
}

/// Layer × head grid restoring each head's output at one position group.
pub fn trace_heads(model: &Model, pairs: &[PromptPair], group: PositionGroup, opts: &TraceOptions) -> Result<IEGrid> {
    let mut g = per_head_grid(model, pairs, Site::HeadOut, opts, |pair, layer, hd| {
        PatchSpec::restore(CacheKey::head_out(layer, hd), pair.map.positions(group))
    })?;
    g.site = format!("head_out@{group}");
    Ok(g)
}

/// Layer × head grid restoring attention weights from query tokens onto document tokens.
pub fn trace_attention_scores(model: &Model, pairs: &[PromptPair], opts: &TraceOptions) -> Result<IEGrid> {
    let mut g = per_head_grid(model, pairs, Site::AttnPattern, opts, |pair, layer, hd| {
        PatchSpec::restore(CacheKey::pattern(layer, hd), pair.map.positions(PositionGroup::Query))
            .with_sources(pair.map.positions(PositionGroup::Documents))
    })?;
    if opts.renormalize {
        g.notes.push("patched attention rows renormalized".into());
    }
    g.site = "attn_pattern@query->documents".into();
    Ok(g)
}
