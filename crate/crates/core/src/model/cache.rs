//! Activation sites, cache keys and the per-pass activation cache.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Where in the forward pass an activation lives.
///
/// `Resid` is the residual stream after a layer has added its attention and
/// feed-forward outputs. `AttnOut` and `MlpOut` are the vectors added to the
/// stream (after their output projections). `HeadOut` is one head's share of
/// `AttnOut`. `AttnPattern` is the post-softmax `N×N` attention matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Resid,
    AttnOut,
    HeadOut,
    MlpOut,
    AttnPattern,
}

impl Site {
    pub const ALL: [Site; 5] = [
        Site::Resid,
        Site::AttnOut,
        Site::HeadOut,
        Site::MlpOut,
        Site::AttnPattern,
    ];

    pub fn is_per_head(self) -> bool {
        matches!(self, Site::HeadOut | Site::AttnPattern)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Site::Resid => "resid",
            Site::AttnOut => "attn_out",
            Site::HeadOut => "head_out",
            Site::MlpOut => "mlp_out",
            Site::AttnPattern => "attn_pattern",
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Site::ALL
            .into_iter()
            .find(|site| site.as_str() == s)
            .ok_or_else(|| Error::InvalidPatch(format!("unknown site {s:?}")))
    }
}

/// An attention head, printed as `L{layer}H{head}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

impl FromStr for HeadId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Data(format!("bad head id {s:?}, expected L<layer>H<head>"));
        let rest = s.strip_prefix('L').ok_or_else(bad)?;
        let (l, h) = rest.split_once('H').ok_or_else(bad)?;
        Ok(HeadId {
            layer: l.parse().map_err(|_| bad())?,
            head: h.parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey {
    pub site: Site,
    pub layer: usize,
    pub head: Option<usize>,
}

impl CacheKey {
    pub fn new(site: Site, layer: usize, head: Option<usize>) -> Self {
        Self { site, layer, head }
    }

    pub fn resid(layer: usize) -> Self {
        Self::new(Site::Resid, layer, None)
    }

    pub fn attn_out(layer: usize) -> Self {
        Self::new(Site::AttnOut, layer, None)
    }

    pub fn mlp_out(layer: usize) -> Self {
        Self::new(Site::MlpOut, layer, None)
    }

    pub fn head_out(layer: usize, head: usize) -> Self {
        Self::new(Site::HeadOut, layer, Some(head))
    }

    pub fn pattern(layer: usize, head: usize) -> Self {
        Self::new(Site::AttnPattern, layer, Some(head))
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.head {
            Some(h) => write!(f, "{}[L{}H{}]", self.site, self.layer, h),
            None => write!(f, "{}[L{}]", self.site, self.layer),
        }
    }
}

/// Pattern over cache keys; `None` fields are wildcards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapturePattern {
    pub site: Site,
    pub layer: Option<usize>,
    pub head: Option<usize>,
}

impl CapturePattern {
    pub fn site(site: Site) -> Self {
        Self {
            site,
            layer: None,
            head: None,
        }
    }

    pub fn layer(site: Site, layer: usize) -> Self {
        Self {
            site,
            layer: Some(layer),
            head: None,
        }
    }

    pub fn exact(key: CacheKey) -> Self {
        Self {
            site: key.site,
            layer: Some(key.layer),
            head: key.head,
        }
    }

    pub fn matches(&self, key: &CacheKey) -> bool {
        self.site == key.site
            && self.layer.map_or(true, |l| l == key.layer)
            && self.head.map_or(true, |h| Some(h) == key.head)
    }
}

/// Set of capture patterns requested for a forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CaptureSet {
    patterns: Vec<CapturePattern>,
}

impl CaptureSet {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self {
            patterns: Site::ALL.into_iter().map(CapturePattern::site).collect(),
        }
    }

    pub fn sites(sites: &[Site]) -> Self {
        Self {
            patterns: sites.iter().copied().map(CapturePattern::site).collect(),
        }
    }

    pub fn keys(keys: impl IntoIterator<Item = CacheKey>) -> Self {
        Self {
            patterns: keys.into_iter().map(CapturePattern::exact).collect(),
        }
    }

    pub fn with(mut self, p: CapturePattern) -> Self {
        self.patterns.push(p);
        self
    }

    pub fn patterns(&self) -> &[CapturePattern] {
        &self.patterns
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.patterns.iter().any(|p| p.matches(key))
    }
}

/// Activations captured during one forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivationCache {
    entries: BTreeMap<CacheKey, Matrix>,
}

impl ActivationCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: CacheKey, value: Matrix) {
        self.entries.insert(key, value);
    }

    pub fn get(&self, key: &CacheKey) -> Option<&Matrix> {
        self.entries.get(key)
    }

    pub fn require(&self, key: &CacheKey) -> Result<&Matrix> {
        self.get(key).ok_or(Error::MissingActivation(*key))
    }

    pub fn remove(&mut self, key: &CacheKey) -> Option<Matrix> {
        self.entries.remove(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &CacheKey> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CacheKey, &Matrix)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Copies every entry of `other` into `self`, replacing duplicates.
    pub fn extend_from(&mut self, other: &ActivationCache) {
        for (k, v) in other.iter() {
            self.entries.insert(*k, v.clone());
        }
    }
}
