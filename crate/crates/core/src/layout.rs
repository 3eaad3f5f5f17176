// SPDX-License-Identifier: MIT OR Apache-2.0

//! Token layout of a multimodal prompt: `[system | visual | text]`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open index interval `[start, end)`.
///
/// Serialized as a two-element array so metadata stays compact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub const fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub const fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub const fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub const fn contains(&self, idx: usize) -> bool {
        self.start <= idx && idx < self.end
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

impl From<[usize; 2]> for Span {
    fn from([start, end]: [usize; 2]) -> Self {
        Self { start, end }
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

/// Partition of a prompt into system, visual and text tokens.
///
/// The three spans are contiguous and ordered, so `sys.end == vis.start`,
/// `vis.end == txt.start` and `txt.end == seq_len`. Both the visual and
/// the text span are non-empty; the system span may be empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawLayout", into = "RawLayout")]
pub struct TokenLayout {
    sys: Span,
    vis: Span,
    txt: Span,
}

#[derive(Serialize, Deserialize)]
struct RawLayout {
    sys: Span,
    vis: Span,
    txt: Span,
}

impl TryFrom<RawLayout> for TokenLayout {
    type Error = Error;

    fn try_from(raw: RawLayout) -> Result<Self> {
        Self::from_spans(raw.sys, raw.vis, raw.txt)
    }
}

impl From<TokenLayout> for RawLayout {
    fn from(l: TokenLayout) -> Self {
        RawLayout { sys: l.sys, vis: l.vis, txt: l.txt }
    }
}

impl TokenLayout {
    /// Lays out `n_sys` system tokens, then `n_vis` visual tokens, then
    /// `n_txt` text tokens.
    pub fn build(n_sys: usize, n_vis: usize, n_txt: usize) -> Result<Self> {
        if n_vis == 0 {
            return Err(Error::Layout("visual span must contain at least one token".into()));
        }
        if n_txt == 0 {
            return Err(Error::Layout("text span must contain at least one token".into()));
        }
        let vis_start = n_sys;
        let txt_start = vis_start + n_vis;
        Ok(Self {
            sys: Span::new(0, vis_start),
            vis: Span::new(vis_start, txt_start),
            txt: Span::new(txt_start, txt_start + n_txt),
        })
    }

    /// Rebuilds a layout from explicit spans, checking contiguity.
    pub fn from_spans(sys: Span, vis: Span, txt: Span) -> Result<Self> {
        if sys.start != 0 || sys.end < sys.start {
            return Err(Error::Layout(format!("system span {sys:?} must start at 0")));
        }
        if vis.start != sys.end || txt.start != vis.end {
            return Err(Error::Layout(format!(
                "spans must be contiguous and ordered sys < vis < txt, got {sys:?} {vis:?} {txt:?}"
            )));
        }
        Self::build(sys.len(), vis.len(), txt.len())
    }

    pub fn sys(&self) -> Span {
        self.sys
    }

    pub fn vis(&self) -> Span {
        self.vis
    }

    pub fn txt(&self) -> Span {
        self.txt
    }

    pub fn seq_len(&self) -> usize {
        self.txt.end
    }

    /// Number of visual tokens.
    pub fn n_vis(&self) -> usize {
        self.vis.len()
    }

    /// Index of the last token of the prompt; the default saliency query.
    pub fn last_row(&self) -> usize {
        self.txt.end - 1
    }

    /// Whether column `j` belongs to the linguistic part (system or text).
    pub fn is_linguistic(&self, j: usize) -> bool {
        self.sys.contains(j) || self.txt.contains(j)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_layout() {
        let l = TokenLayout::build(1, 2, 1).unwrap();
        assert_eq!(l.sys(), Span::new(0, 1));
        assert_eq!(l.vis(), Span::new(1, 3));
        assert_eq!(l.txt(), Span::new(3, 4));
        assert_eq!(l.seq_len(), 4);
    }

    #[test]
    fn empty_system_prompt() {
        let l = TokenLayout::build(0, 4, 4).unwrap();
        assert!(l.sys().is_empty());
        assert_eq!(l.vis(), Span::new(0, 4));
        assert_eq!(l.txt(), Span::new(4, 8));
    }

    #[test]
    fn encoder_sized_layout() {
        let l = TokenLayout::build(35, 576, 20).unwrap();
        assert_eq!(l.seq_len(), 35 + 576 + 20);
        assert_eq!(l.seq_len(), 631);
        assert_eq!(l.vis(), Span::new(35, 611));
    }

    #[test]
    fn rejects_empty_visual_or_text() {
        assert!(matches!(TokenLayout::build(3, 0, 2), Err(Error::Layout(_))));
        assert!(matches!(TokenLayout::build(3, 2, 0), Err(Error::Layout(_))));
    }

    #[test]
    fn spans_partition_sequence() {
        for (s, v, t) in [(0, 1, 1), (3, 5, 2), (7, 1, 9)] {
            let l = TokenLayout::build(s, v, t).unwrap();
            let covered: Vec<usize> = l.sys().range().chain(l.vis().range()).chain(l.txt().range()).collect();
            assert_eq!(covered, (0..l.seq_len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn json_round_trip_and_rejection() {
        let l = TokenLayout::build(2, 3, 4).unwrap();
        let s = serde_json::to_string(&l).unwrap();
        assert_eq!(s, r#"{"sys":[0,2],"vis":[2,5],"txt":[5,9]}"#);
        assert_eq!(serde_json::from_str::<TokenLayout>(&s).unwrap(), l);
        let gap = r#"{"sys":[0,2],"vis":[3,5],"txt":[5,9]}"#;
        assert!(serde_json::from_str::<TokenLayout>(gap).is_err());
    }
}
