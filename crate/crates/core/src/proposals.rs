//! Proposal files: a JSON document holding raw, possibly overlapping,
//! zero-shot masks as row-major run-length encodings.
//!
//! ```json
//! {"height": 4, "width": 4, "masks": [{"rle": [5, 2, 2, 2, 5], "confidence": 0.87}]}
//! ```
//!
//! Runs alternate background/foreground starting with background (a leading
//! 0 when the first pixel is foreground) and sum to `height * width`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::maskops::{deoverlap_sized, Proposal, ProposalSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RleMask {
    pub rle: Vec<u64>,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalFile {
    pub height: usize,
    pub width: usize,
    pub masks: Vec<RleMask>,
}

pub fn encode_rle(mask: &BinaryMask) -> Vec<u64> {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for &v in mask.as_slice() {
        if v != current {
            counts.push(run);
            run = 0;
            current = v;
        }
        run += 1;
    }
    counts.push(run);
    counts
}

pub fn decode_rle(counts: &[u64], width: usize, height: usize) -> Result<BinaryMask> {
    let total = (width * height) as u64;
    let sum = counts
        .iter()
        .try_fold(0u64, |acc, &c| acc.checked_add(c))
        .ok_or_else(|| Error::Proposal("run-length counts overflow".into()))?;
    if sum != total {
        return Err(Error::Proposal(format!(
            "run-length counts sum to {sum}, expected {total} ({height}x{width})"
        )));
    }
    let mut data = Vec::with_capacity(total as usize);
    for (i, &c) in counts.iter().enumerate() {
        data.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
    }
    BinaryMask::from_vec(width, height, data)
}

impl ProposalFile {
    pub fn from_proposals(width: usize, height: usize, proposals: &[Proposal]) -> Self {
        ProposalFile {
            height,
            width,
            masks: proposals
                .iter()
                .map(|p| RleMask {
                    rle: encode_rle(&p.mask),
                    confidence: p.confidence,
                })
                .collect(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: ProposalFile =
            serde_json::from_str(text).map_err(|e| Error::Proposal(e.to_string()))?;
        if file.height == 0 || file.width == 0 {
            return Err(Error::Proposal(format!(
                "invalid canvas {}x{}",
                file.height, file.width
            )));
        }
        Ok(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("proposal file serializes")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Decodes every mask as stored, overlaps included.
    pub fn decode(&self) -> Result<Vec<Proposal>> {
        self.masks
            .iter()
            .enumerate()
            .map(|(i, m)| {
                if !(0.0..=1.0).contains(&m.confidence) {
                    return Err(Error::Proposal(format!(
                        "mask {i}: confidence {} outside [0, 1]",
                        m.confidence
                    )));
                }
                Ok(Proposal {
                    mask: decode_rle(&m.rle, self.width, self.height)
                        .map_err(|e| e.context(format!("mask {i}")))?,
                    confidence: m.confidence,
                })
            })
            .collect()
    }

    /// Decodes and de-overlaps into a disjoint proposal set.
    pub fn to_proposal_set(&self) -> Result<ProposalSet> {
        deoverlap_sized(self.width, self.height, &self.decode()?)
    }
}
