//! Token-position bookkeeping for rendered prompts.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a contiguous run of prompt tokens came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    /// Fixed template text that belongs to no analysis group (labels, BOS).
    Template,
    /// Document slot; 0 for pointwise and the first pairwise slot, 1 for the second.
    Document(u8),
    Query,
    Instruction,
    /// The final token, where the answer is read off.
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end()
    }
}

/// Named sets of positions used as patch targets and grid columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionGroup {
    /// Every document span (one pointwise, two pairwise).
    Documents,
    DocumentA,
    DocumentB,
    Query,
    Instruction,
    Last,
    All,
}

impl PositionGroup {
    /// The four columns of a layer × position grid.
    pub const STANDARD: [PositionGroup; 4] = [
        PositionGroup::Documents,
        PositionGroup::Query,
        PositionGroup::Instruction,
        PositionGroup::Last,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PositionGroup::Documents => "documents",
            PositionGroup::DocumentA => "document_a",
            PositionGroup::DocumentB => "document_b",
            PositionGroup::Query => "query",
            PositionGroup::Instruction => "instruction",
            PositionGroup::Last => "last",
            PositionGroup::All => "all",
        }
    }

    fn includes(self, kind: SegmentKind) -> bool {
        match self {
            PositionGroup::Documents => matches!(kind, SegmentKind::Document(_)),
            PositionGroup::DocumentA => kind == SegmentKind::Document(0),
            PositionGroup::DocumentB => kind == SegmentKind::Document(1),
            PositionGroup::Query => kind == SegmentKind::Query,
            PositionGroup::Instruction => kind == SegmentKind::Instruction,
            PositionGroup::Last => kind == SegmentKind::Last,
            PositionGroup::All => true,
        }
    }
}

impl fmt::Display for PositionGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PositionGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let all = [
            PositionGroup::Documents,
            PositionGroup::DocumentA,
            PositionGroup::DocumentB,
            PositionGroup::Query,
            PositionGroup::Instruction,
            PositionGroup::Last,
            PositionGroup::All,
        ];
        let norm = s.replace('-', "_");
        all.into_iter()
            .find(|g| g.as_str() == norm || (norm == "doc" && *g == PositionGroup::Documents))
            .ok_or_else(|| Error::Data(format!("unknown position group {s:?}")))
    }
}

/// Contiguous, ordered segments covering `0..len`, ending in a single `Last`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionMap {
    segments: Vec<Segment>,
}

impl PositionMap {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let map = Self { segments };
        map.validate()?;
        Ok(map)
    }

    /// Map for an unstructured sequence: everything is template except the last token.
    pub fn flat(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Data("position map over an empty sequence".into()));
        }
        let mut segments = Vec::new();
        if len > 1 {
            segments.push(Segment {
                kind: SegmentKind::Template,
                start: 0,
                len: len - 1,
            });
        }
        segments.push(Segment {
            kind: SegmentKind::Last,
            start: len - 1,
            len: 1,
        });
        Self::new(segments)
    }

    /// Builds from a per-token kind list, merging adjacent equal kinds.
    pub fn from_kinds(kinds: &[SegmentKind]) -> Result<Self> {
        let mut segments: Vec<Segment> = Vec::new();
        for (i, &k) in kinds.iter().enumerate() {
            match segments.last_mut() {
                Some(s) if s.kind == k && k != SegmentKind::Last => s.len += 1,
                _ => segments.push(Segment {
                    kind: k,
                    start: i,
                    len: 1,
                }),
            }
        }
        Self::new(segments)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Data(format!("invalid position map: {m}")));
        let Some(last) = self.segments.last() else {
            return bad("no segments".into());
        };
        let mut next = 0;
        for s in &self.segments {
            if s.len == 0 {
                return bad(format!("empty {:?} segment at {}", s.kind, s.start));
            }
            if s.start != next {
                return bad(format!("segment at {} does not start at {next}", s.start));
            }
            next = s.end();
        }
        if last.kind != SegmentKind::Last || last.len != 1 {
            return bad("final segment must be the single last token".into());
        }
        if self
            .segments
            .iter()
            .filter(|s| s.kind == SegmentKind::Last)
            .count()
            != 1
        {
            return bad("more than one last-token segment".into());
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, Segment::end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn last(&self) -> usize {
        self.len() - 1
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn positions(&self, group: PositionGroup) -> Vec<usize> {
        self.segments
            .iter()
            .filter(|s| group.includes(s.kind))
            .flat_map(Segment::range)
            .collect()
    }

    /// Contiguous span of one document slot, if present.
    pub fn document_span(&self, slot: u8) -> Option<std::ops::Range<usize>> {
        let mut it = self
            .segments
            .iter()
            .filter(|s| s.kind == SegmentKind::Document(slot));
        let first = it.next()?;
        let end = it.last().map_or(first.end(), Segment::end);
        Some(first.start..end)
    }

    pub fn query_span(&self) -> Option<std::ops::Range<usize>> {
        let q: Vec<usize> = self.positions(PositionGroup::Query);
        Some(*q.first()?..*q.last()? + 1)
    }

    /// `(segment index, offset within segment)` of a position.
    pub fn locate(&self, pos: usize) -> Option<(usize, usize)> {
        let i = self.segments.partition_point(|s| s.end() <= pos);
        let s = self.segments.get(i)?;
        (pos >= s.start).then(|| (i, pos - s.start))
    }

    /// Same segment kinds in the same order (lengths may differ).
    pub fn same_structure(&self, other: &PositionMap) -> bool {
        self.segments.len() == other.segments.len()
            && self
                .segments
                .iter()
                .zip(&other.segments)
                .all(|(a, b)| a.kind == b.kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use SegmentKind::*;

    #[test]
    fn groups_from_kinds() {
        let kinds = [
            Template, Document(0), Document(0), Template, Document(1), Query, Query, Instruction,
            Last,
        ];
        let m = PositionMap::from_kinds(&kinds).unwrap();
        assert_eq!(m.len(), 9);
        assert_eq!(m.positions(PositionGroup::Documents), vec![1, 2, 4]);
        assert_eq!(m.positions(PositionGroup::DocumentB), vec![4]);
        assert_eq!(m.positions(PositionGroup::Query), vec![5, 6]);
        assert_eq!(m.positions(PositionGroup::Last), vec![8]);
        assert_eq!(m.positions(PositionGroup::All).len(), 9);
        assert_eq!(m.locate(6), Some((4, 1)));
        assert_eq!(m.locate(8), Some((6, 0)));
        assert_eq!(m.locate(9), None);
        assert_eq!(m.query_span(), Some(5..7));
        assert_eq!(m.document_span(0), Some(1..3));
    }

    #[test]
    fn rejects_bad_layouts() {
        assert!(PositionMap::from_kinds(&[Query, Template]).is_err());
        assert!(PositionMap::from_kinds(&[Last, Last]).is_err());
        assert!(PositionMap::flat(0).is_err());
        assert_eq!(PositionMap::flat(1).unwrap().positions(PositionGroup::Last), vec![0]);
    }

    #[test]
    fn group_names_parse() {
        for g in PositionGroup::STANDARD {
            assert_eq!(g.as_str().parse::<PositionGroup>().unwrap(), g);
        }
        assert_eq!("document-a".parse::<PositionGroup>().unwrap(), PositionGroup::DocumentA);
    }
}
