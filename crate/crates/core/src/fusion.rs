//! Refinement of the coarse matching mask with zero-shot proposals.
//!
//! Proposals mostly covered by the coarse mask are selected; their union is
//! the proposal result. Each connected region of the coarse mask that is
//! covered well enough by some dilated selected proposal is replaced by
//! that proposal; the rest are kept as they are.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::maskops::{connected_components, dilate, ComponentSet, ProposalSet};

pub const DEFAULT_TAU1: f64 = 0.2;
pub const DEFAULT_TAU2: f64 = 0.9;
pub const DEFAULT_DILATION: usize = 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionStrategy {
    /// Coarse mask only.
    None,
    /// Union of the selected proposals only.
    SamOnly,
    /// Coarse mask united with the selected proposals.
    #[serde(rename = "union")]
    SimpleUnion,
    /// Selection, dilated-coverage replacement, then union.
    Paper,
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionStrategy::None => "none",
            FusionStrategy::SamOnly => "sam-only",
            FusionStrategy::SimpleUnion => "union",
            FusionStrategy::Paper => "paper",
        })
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FusionStrategy::None),
            "sam-only" | "sam_only" => Ok(FusionStrategy::SamOnly),
            "union" | "simple-union" | "simple_union" => Ok(FusionStrategy::SimpleUnion),
            "paper" => Ok(FusionStrategy::Paper),
            other => Err(Error::InvalidArgument(format!(
                "unknown fusion strategy '{other}' (expected paper, none, sam-only or union)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// A proposal is selected when more than this fraction of it lies in
    /// the coarse mask.
    pub tau1: f64,
    /// A coarse region is replaced when some dilated selected proposal
    /// covers at least this fraction of it.
    pub tau2: f64,
    pub dilation_k: usize,
    pub strategy: FusionStrategy,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            tau1: DEFAULT_TAU1,
            tau2: DEFAULT_TAU2,
            dilation_k: DEFAULT_DILATION,
            strategy: FusionStrategy::Paper,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau1", self.tau1), ("tau2", self.tau2)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.dilation_k == 0 || self.dilation_k.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "dilation kernel must be odd and >= 1, got {}",
                self.dilation_k
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionResult {
    /// Final mask.
    pub mask: BinaryMask,
    /// Union of the selected proposals.
    pub sam: BinaryMask,
    pub selected: ProposalSet,
    /// Coarse regions kept by the retention test (paper strategy only).
    pub retained: ComponentSet,
}

/// Keeps proposals with `|m ∩ coarse| / |m| > tau1`.
pub fn select_masks(props: &ProposalSet, coarse: &BinaryMask, tau1: f64) -> Result<ProposalSet> {
    if props.dims() != coarse.dims() {
        return Err(Error::DimensionMismatch {
            what: "proposals vs coarse mask",
            expected: coarse.dims(),
            got: props.dims(),
        });
    }
    Ok(props.filter(|p| {
        // Proposal masks are never empty.
        let ratio = p.mask.intersection_count(coarse) as f64 / p.mask.count() as f64;
        ratio > tau1
    }))
}

/// Splits the coarse mask into 8-connected regions and keeps those for which
/// every dilated selected proposal covers less than `tau2` of the region.
pub fn retain_components(
    coarse: &BinaryMask,
    selected: &ProposalSet,
    tau2: f64,
    dilation_k: usize,
) -> Result<ComponentSet> {
    if selected.dims() != coarse.dims() {
        return Err(Error::DimensionMismatch {
            what: "proposals vs coarse mask",
            expected: coarse.dims(),
            got: selected.dims(),
        });
    }
    let dilated = selected
        .iter()
        .map(|p| dilate(&p.mask, dilation_k))
        .collect::<Result<Vec<_>>>()?;
    let regions = connected_components(coarse)
        .regions
        .into_iter()
        .filter(|region| {
            // Regions are never empty.
            let area = region.count() as f64;
            dilated
                .iter()
                .all(|d| (d.intersection_count(region) as f64 / area) < tau2)
        })
        .collect();
    Ok(ComponentSet { regions })
}

pub fn fuse(coarse: &BinaryMask, props: &ProposalSet, cfg: &FusionConfig) -> Result<FusionResult> {
    cfg.validate()?;
    if !props.is_disjoint() {
        return Err(Error::InvalidArgument(
            "proposals must be de-overlapped before fusion".into(),
        ));
    }
    let selected = select_masks(props, coarse, cfg.tau1)?;
    let sam = selected.union();
    let (mask, retained) = match cfg.strategy {
        FusionStrategy::None => (coarse.clone(), ComponentSet::default()),
        FusionStrategy::SamOnly => (sam.clone(), ComponentSet::default()),
        FusionStrategy::SimpleUnion => (coarse.union(&sam), ComponentSet::default()),
        FusionStrategy::Paper => {
            let retained = retain_components(coarse, &selected, cfg.tau2, cfg.dilation_k)?;
            let mut mask = sam.clone();
            for r in retained.iter() {
                mask.union_with(r);
            }
            (mask, retained)
        }
    };
    Ok(FusionResult {
        mask,
        sam,
        selected,
        retained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskops::{deoverlap_sized, Proposal};

    fn props(w: usize, h: usize, masks: Vec<(BinaryMask, f64)>) -> ProposalSet {
        ProposalSet::new(
            w,
            h,
            masks
                .into_iter()
                .map(|(mask, confidence)| Proposal { mask, confidence })
                .collect(),
        )
        .unwrap()
    }

    fn rect(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| (x0..x1).contains(&x) && (y0..y1).contains(&y))
    }

    #[test]
    fn selection_thresholds() {
        let coarse = rect(10, 4, 0, 0, 3, 1);
        let inside = rect(10, 4, 0, 0, 2, 1);
        let outside = rect(10, 4, 0, 3, 10, 4);
        let p = props(10, 4, vec![(inside, 0.5), (outside, 0.5)]);
        let sel = select_masks(&p, &coarse, 0.2).unwrap();
        assert_eq!(sel.len(), 1);
        assert_eq!(sel.proposals()[0].mask.count(), 2);

        let coarse = rect(10, 4, 0, 1, 3, 2);
        let ten = rect(10, 4, 0, 1, 10, 2);
        let p = props(10, 4, vec![(ten, 0.5)]);
        assert_eq!(select_masks(&p, &coarse, 0.2).unwrap().len(), 1);
        // 0.3 is not strictly greater than 0.3
        assert_eq!(select_masks(&p, &coarse, 0.3).unwrap().len(), 0);
        let coarse2 = rect(10, 4, 0, 1, 2, 2);
        // 2/10 == 0.2 exactly: rejected by the strict test
        assert_eq!(select_masks(&p, &coarse2, 0.2).unwrap().len(), 0);
    }

    #[test]
    fn retention_boundaries() {
        let coarse = rect(12, 12, 2, 2, 6, 6);
        // Fully covered -> dropped.
        let p = props(12, 12, vec![(rect(12, 12, 2, 2, 6, 6), 0.8)]);
        assert!(retain_components(&coarse, &p, 0.9, 1).unwrap().is_empty());
        // Empty selection -> retained.
        let none = ProposalSet::empty(12, 12);
        assert_eq!(retain_components(&coarse, &none, 0.9, 21).unwrap().len(), 1);
        // Half covered -> retained.
        let half = props(12, 12, vec![(rect(12, 12, 2, 2, 4, 6), 0.8)]);
        assert_eq!(retain_components(&coarse, &half, 0.9, 1).unwrap().len(), 1);
        // Exactly tau2 coverage drops the region.
        assert!(retain_components(&coarse, &half, 0.5, 1).unwrap().is_empty());
        // Dilation turns the half cover into a full one.
        assert!(retain_components(&coarse, &half, 0.9, 5).unwrap().is_empty());
    }

    #[test]
    fn coverage_is_per_proposal() {
        // Two proposals each covering half of one region: union covers all,
        // but no single one reaches tau2, so the region is kept.
        let coarse = rect(8, 1, 0, 0, 4, 1);
        let p = props(
            8,
            1,
            vec![(rect(8, 1, 0, 0, 2, 1), 0.5), (rect(8, 1, 2, 0, 4, 1), 0.5)],
        );
        assert_eq!(retain_components(&coarse, &p, 0.9, 1).unwrap().len(), 1);
    }

    #[test]
    fn empty_proposals_leave_coarse_unchanged() {
        let coarse = rect(16, 16, 3, 3, 9, 7);
        let r = fuse(&coarse, &ProposalSet::empty(16, 16), &FusionConfig::default()).unwrap();
        assert_eq!(r.mask, coarse);
    }

    #[test]
    fn empty_coarse_gives_empty_result() {
        let coarse = BinaryMask::new(16, 16);
        let p = props(16, 16, vec![(rect(16, 16, 0, 0, 5, 5), 0.9)]);
        for strategy in [
            FusionStrategy::None,
            FusionStrategy::SamOnly,
            FusionStrategy::SimpleUnion,
            FusionStrategy::Paper,
        ] {
            let cfg = FusionConfig {
                strategy,
                ..Default::default()
            };
            assert!(fuse(&coarse, &p, &cfg).unwrap().mask.is_empty());
        }
    }

    #[test]
    fn replaces_covered_blob_keeps_other() {
        // Blob A at the top left, ragged; proposal is the clean square around
        // it. Blob B at the bottom right is unmatched.
        let mut coarse = rect(40, 40, 1, 1, 6, 6);
        coarse.set(6, 3, true);
        coarse.set(1, 1, false);
        let blob_b = rect(40, 40, 30, 30, 33, 33);
        coarse.union_with(&blob_b);
        let proposal = rect(40, 40, 1, 1, 7, 6);
        let p = props(40, 40, vec![(proposal.clone(), 0.8)]);
        let r = fuse(&coarse, &p, &FusionConfig::default()).unwrap();
        assert_eq!(r.mask, proposal.union(&blob_b));
        assert_eq!(r.retained.len(), 1);
        assert_eq!(r.retained.regions[0], blob_b);
    }

    #[test]
    fn rejects_overlapping_proposals_and_bad_config() {
        let coarse = rect(4, 4, 0, 0, 2, 2);
        let p = props(4, 4, vec![(rect(4, 4, 0, 0, 2, 2), 0.5), (rect(4, 4, 1, 1, 3, 3), 0.4)]);
        assert!(fuse(&coarse, &p, &FusionConfig::default()).is_err());
        let fixed = deoverlap_sized(4, 4, p.proposals()).unwrap();
        assert!(fuse(&coarse, &fixed, &FusionConfig::default()).is_ok());
        let bad = FusionConfig {
            dilation_k: 4,
            ..Default::default()
        };
        assert!(fuse(&coarse, &fixed, &bad).is_err());
        let bad = FusionConfig {
            tau1: 1.5,
            ..Default::default()
        };
        assert!(fuse(&coarse, &fixed, &bad).is_err());
    }

    #[test]
    fn strategy_names_roundtrip() {
        for s in [
            FusionStrategy::None,
            FusionStrategy::SamOnly,
            FusionStrategy::SimpleUnion,
            FusionStrategy::Paper,
        ] {
            assert_eq!(s.to_string().parse::<FusionStrategy>().unwrap(), s);
            assert_eq!(
                serde_json::to_string(&s).unwrap(),
                format!("\"{s}\"")
            );
        }
    }
}
