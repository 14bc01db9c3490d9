//! Packed token sequences with region bookkeeping.
//!
//! A batch of variable-length sequences is stacked along the row axis of a
//! single tape node; each sequence carries a [`Layout`] describing which
//! contiguous block of its positions belongs to which input region.

use std::fmt;
use std::ops::Range;

use m2pt_tensor::{AttentionSpec, Var};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Input region categories, in the order they appear in a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    TextualPrompt,
    SystemText,
    VisualPrompt,
    ImageTokens,
    Instruction,
    Target,
}

impl Region {
    pub const ALL: [Region; 6] = [
        Region::TextualPrompt,
        Region::SystemText,
        Region::VisualPrompt,
        Region::ImageTokens,
        Region::Instruction,
        Region::Target,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Region::TextualPrompt => "textual_prompt",
            Region::SystemText => "system_text",
            Region::VisualPrompt => "visual_prompt",
            Region::ImageTokens => "image_tokens",
            Region::Instruction => "instruction",
            Region::Target => "target",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ordered region widths of one sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    spans: Vec<(Region, usize)>,
}

impl Layout {
    /// Spans must be in canonical region order without repeats. Zero-width
    /// spans are dropped, so a region is present iff it has positions.
    pub fn new(spans: Vec<(Region, usize)>) -> Result<Self> {
        for pair in spans.windows(2) {
            if pair[0].0 >= pair[1].0 {
                return Err(Error::Layout(format!(
                    "region {} cannot precede {}",
                    pair[0].0, pair[1].0
                )));
            }
        }
        Ok(Layout {
            spans: spans.into_iter().filter(|&(_, w)| w > 0).collect(),
        })
    }

    pub fn spans(&self) -> &[(Region, usize)] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.spans.iter().map(|&(_, w)| w).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self, region: Region) -> usize {
        self.spans
            .iter()
            .find(|&&(r, _)| r == region)
            .map_or(0, |&(_, w)| w)
    }

    /// Position range of a region; empty if the region is absent.
    pub fn range(&self, region: Region) -> Range<usize> {
        let mut start = 0;
        for &(r, w) in &self.spans {
            if r == region {
                return start..start + w;
            }
            start += w;
        }
        start..start
    }

    /// Region tag of every position.
    pub fn tags(&self) -> Vec<Region> {
        self.spans
            .iter()
            .flat_map(|&(r, w)| std::iter::repeat_n(r, w))
            .collect()
    }

    /// Regions with nonzero width.
    pub fn present(&self) -> Vec<Region> {
        self.spans.iter().filter(|&&(_, w)| w > 0).map(|&(r, _)| r).collect()
    }

    pub(crate) fn with_width(&self, region: Region, width: usize) -> Layout {
        let mut spans: Vec<_> = self.spans.iter().copied().filter(|&(r, _)| r != region).collect();
        if width > 0 {
            let at = spans.iter().position(|&(r, _)| r > region).unwrap_or(spans.len());
            spans.insert(at, (region, width));
        }
        Layout { spans }
    }

    pub(crate) fn without(&self, region: Region) -> Layout {
        self.with_width(region, 0)
    }
}

/// Packed batch of sequences living on a tape.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub value: Var,
    pub layouts: Vec<Layout>,
    pub causal: bool,
}

impl TokenSequence {
    pub fn batch_size(&self) -> usize {
        self.layouts.len()
    }

    pub fn total_rows(&self) -> usize {
        self.layouts.iter().map(Layout::len).sum()
    }

    /// Starting row of each sequence.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.layouts
            .iter()
            .map(|l| {
                let o = acc;
                acc += l.len();
                o
            })
            .collect()
    }

    pub fn attention_spec(&self, heads: usize) -> AttentionSpec {
        let segments = self
            .offsets()
            .into_iter()
            .zip(&self.layouts)
            .map(|(o, l)| (o, l.len()))
            .collect();
        AttentionSpec {
            heads,
            causal: self.causal,
            segments,
        }
    }
}
