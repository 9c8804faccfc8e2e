//! Binary-mask morphology used by proposal fusion: connected components,
//! square dilation, and de-overlapping of raw proposals.

use image::{GrayImage, Luma};
use imageproc::region_labelling::{connected_components as label_components, Connectivity};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Disjoint 8-connected regions of a mask, ordered by their first pixel in
/// row-major order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ComponentSet {
    pub regions: Vec<BinaryMask>,
}

impl ComponentSet {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, BinaryMask> {
        self.regions.iter()
    }

    /// Union of all regions, or `None` for an empty set.
    pub fn union(&self) -> Option<BinaryMask> {
        let mut iter = self.regions.iter();
        let mut out = iter.next()?.clone();
        for r in iter {
            out.union_with(r);
        }
        Some(out)
    }
}

/// One zero-shot mask proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub mask: BinaryMask,
    pub confidence: f64,
}

/// Proposals sharing one canvas size. No mask is empty; when `disjoint` is
/// set, no pixel belongs to more than one mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    width: usize,
    height: usize,
    proposals: Vec<Proposal>,
    disjoint: bool,
}

impl ProposalSet {
    pub fn empty(width: usize, height: usize) -> Self {
        ProposalSet {
            width,
            height,
            proposals: Vec::new(),
            disjoint: true,
        }
    }

    /// Validates sizes, confidences and non-emptiness. The disjoint flag is
    /// computed, not trusted.
    pub fn new(width: usize, height: usize, proposals: Vec<Proposal>) -> Result<Self> {
        for (i, p) in proposals.iter().enumerate() {
            if p.mask.dims() != (width, height) {
                return Err(Error::DimensionMismatch {
                    what: "proposal mask",
                    expected: (width, height),
                    got: p.mask.dims(),
                });
            }
            if p.mask.is_empty() {
                return Err(Error::InvalidArgument(format!("proposal {i} is empty")));
            }
            check_confidence(p.confidence)?;
        }
        let disjoint = pairwise_disjoint(proposals.iter().map(|p| &p.mask), width * height);
        Ok(ProposalSet {
            width,
            height,
            proposals,
            disjoint,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn is_disjoint(&self) -> bool {
        self.disjoint
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Proposal> {
        self.proposals.iter()
    }

    pub fn proposals(&self) -> &[Proposal] {
        &self.proposals
    }

    /// Keeps the proposals for which `keep` returns true. Subsets of a
    /// disjoint set stay disjoint.
    pub fn filter(&self, mut keep: impl FnMut(&Proposal) -> bool) -> ProposalSet {
        let proposals: Vec<Proposal> = self.proposals.iter().filter(|p| keep(p)).cloned().collect();
        let disjoint =
            self.disjoint || pairwise_disjoint(proposals.iter().map(|p| &p.mask), self.width * self.height);
        ProposalSet {
            width: self.width,
            height: self.height,
            proposals,
            disjoint,
        }
    }

    /// Union of every mask; all-background when the set is empty.
    pub fn union(&self) -> BinaryMask {
        let mut out = BinaryMask::new(self.width, self.height);
        for p in &self.proposals {
            out.union_with(&p.mask);
        }
        out
    }
}

fn check_confidence(c: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::InvalidArgument(format!(
            "confidence {c} outside [0, 1]"
        )));
    }
    Ok(())
}

fn pairwise_disjoint<'a>(masks: impl Iterator<Item = &'a BinaryMask>, len: usize) -> bool {
    let mut seen = vec![false; len];
    for m in masks {
        for (s, &v) in seen.iter_mut().zip(m.as_slice()) {
            if v {
                if *s {
                    return false;
                }
                *s = true;
            }
        }
    }
    true
}

/// Splits a mask into 8-connected regions.
pub fn connected_components(mask: &BinaryMask) -> ComponentSet {
    let (w, h) = mask.dims();
    if mask.is_empty() {
        return ComponentSet::default();
    }
    // imageproc's labeller indexes out of bounds on a single foreground pixel.
    if w * h == 1 {
        return ComponentSet {
            regions: vec![mask.clone()],
        };
    }
    let gray = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([mask.get(x as usize, y as usize) as u8])
    });
    let labels = label_components(&gray, Connectivity::Eight, Luma([0u8]));

    // label -> (first raster index, region)
    let mut regions: Vec<Option<(usize, BinaryMask)>> = Vec::new();
    for (i, p) in labels.pixels().enumerate() {
        let label = p.0[0] as usize;
        if label == 0 {
            continue;
        }
        if regions.len() < label {
            regions.resize(label, None);
        }
        let slot = &mut regions[label - 1];
        let (_, region) = slot.get_or_insert_with(|| (i, BinaryMask::new(w, h)));
        region.set(i % w, i / w, true);
    }
    let mut regions: Vec<(usize, BinaryMask)> = regions.into_iter().flatten().collect();
    regions.sort_by_key(|(first, _)| *first);
    ComponentSet {
        regions: regions.into_iter().map(|(_, r)| r).collect(),
    }
}

/// Dilation with a `k × k` square structuring element, clipped at the image
/// border. `k` must be odd.
pub fn dilate(mask: &BinaryMask, k: usize) -> Result<BinaryMask> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "dilation kernel side must be odd and >= 1, got {k}"
        )));
    }
    let (w, h) = mask.dims();
    let r = k / 2;
    if r == 0 || mask.is_empty() {
        return Ok(mask.clone());
    }
    // The square element is separable: horizontal pass, then vertical.
    let mut rows = BinaryMask::new(w, h);
    for y in 0..h {
        dilate_line(w, r, |x| mask.get(x, y), |x| rows.set(x, y, true));
    }
    let mut out = BinaryMask::new(w, h);
    for x in 0..w {
        dilate_line(h, r, |y| rows.get(x, y), |y| out.set(x, y, true));
    }
    Ok(out)
}

// Running count of foreground samples in the window [i - r, i + r].
fn dilate_line(len: usize, r: usize, get: impl Fn(usize) -> bool, mut set: impl FnMut(usize)) {
    let mut count = 0usize;
    for i in 0..len.min(r + 1) {
        count += get(i) as usize;
    }
    for i in 0..len {
        if count > 0 {
            set(i);
        }
        if i >= r {
            count -= get(i - r) as usize;
        }
        if i + r + 1 < len {
            count += get(i + r + 1) as usize;
        }
    }
}

/// Resolves overlaps among raw proposals. A pixel covered by several masks
/// goes to the one with the highest confidence, then the smaller original
/// area, then the earlier input position. Masks left empty are dropped.
pub fn deoverlap(raw: &[Proposal]) -> Result<ProposalSet> {
    let Some(first) = raw.first() else {
        return Err(Error::InvalidArgument(
            "deoverlap needs at least one proposal to know the canvas size; use ProposalSet::empty".into(),
        ));
    };
    let (w, h) = first.mask.dims();
    deoverlap_sized(w, h, raw)
}

/// [`deoverlap`] for a known canvas size; accepts an empty input.
pub fn deoverlap_sized(width: usize, height: usize, raw: &[Proposal]) -> Result<ProposalSet> {
    for p in raw {
        if p.mask.dims() != (width, height) {
            return Err(Error::DimensionMismatch {
                what: "proposal mask",
                expected: (width, height),
                got: p.mask.dims(),
            });
        }
        check_confidence(p.confidence)?;
    }

    // Priority order: index 0 wins every contest it takes part in.
    let areas: Vec<usize> = raw.iter().map(|p| p.mask.count()).collect();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| {
        raw[b]
            .confidence
            .total_cmp(&raw[a].confidence)
            .then(areas[a].cmp(&areas[b]))
            .then(a.cmp(&b))
    });

    let mut claimed = vec![false; width * height];
    let mut out: Vec<(usize, Proposal)> = Vec::new();
    for idx in order {
        let src = &raw[idx];
        let mut mask = BinaryMask::new(width, height);
        let mut any = false;
        for (i, (&v, c)) in src.mask.as_slice().iter().zip(claimed.iter_mut()).enumerate() {
            if v && !*c {
                *c = true;
                mask.as_mut_slice()[i] = true;
                any = true;
            }
        }
        if any {
            out.push((
                idx,
                Proposal {
                    mask,
                    confidence: src.confidence,
                },
            ));
        } else if areas[idx] > 0 {
            log::debug!("proposal {idx} fully absorbed during de-overlap");
        }
    }
    // Keep the caller's ordering in the output.
    out.sort_by_key(|(idx, _)| *idx);
    Ok(ProposalSet {
        width,
        height,
        proposals: out.into_iter().map(|(_, p)| p).collect(),
        disjoint: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn prop(mask: BinaryMask, confidence: f64) -> Proposal {
        Proposal { mask, confidence }
    }

    // Reference labelling by explicit flood fill.
    fn flood_fill_count(m: &BinaryMask) -> usize {
        let (w, h) = m.dims();
        let mut seen = vec![false; w * h];
        let mut n = 0;
        for sy in 0..h {
            for sx in 0..w {
                if !m.get(sx, sy) || seen[sy * w + sx] {
                    continue;
                }
                n += 1;
                let mut stack = vec![(sx, sy)];
                seen[sy * w + sx] = true;
                while let Some((x, y)) = stack.pop() {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let nx = x as i64 + dx;
                            let ny = y as i64 + dy;
                            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                                continue;
                            }
                            let (nx, ny) = (nx as usize, ny as usize);
                            if m.get(nx, ny) && !seen[ny * w + nx] {
                                seen[ny * w + nx] = true;
                                stack.push((nx, ny));
                            }
                        }
                    }
                }
            }
        }
        n
    }

    fn brute_dilate(m: &BinaryMask, k: usize) -> BinaryMask {
        let r = (k / 2) as i64;
        let (w, h) = m.dims();
        BinaryMask::from_fn(w, h, |x, y| {
            (-r..=r).any(|dy| {
                (-r..=r).any(|dx| {
                    let nx = x as i64 + dx;
                    let ny = y as i64 + dy;
                    nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64 && m.get(nx as usize, ny as usize)
                })
            })
        })
    }

    fn arb_mask(max: usize) -> impl Strategy<Value = BinaryMask> {
        (1..=max, 1..=max).prop_flat_map(|(w, h)| {
            proptest::collection::vec(any::<bool>(), w * h)
                .prop_map(move |d| BinaryMask::from_vec(w, h, d).unwrap())
        })
    }

    #[test]
    fn diagonal_pixels_form_one_component() {
        let m = BinaryMask::from_rows(&[&[1, 0], &[0, 1]]);
        assert_eq!(connected_components(&m).len(), 1);
    }

    #[test]
    fn separated_pixels_form_two_components() {
        let m = BinaryMask::from_rows(&[&[1, 0, 0], &[0, 0, 0], &[0, 0, 1]]);
        let cc = connected_components(&m);
        assert_eq!(cc.len(), 2);
        assert!(cc.regions[0].get(0, 0));
        assert!(cc.regions[1].get(2, 2));
    }

    #[test]
    fn empty_mask_has_no_components() {
        assert!(connected_components(&BinaryMask::new(5, 4)).is_empty());
    }

    #[test]
    fn components_ordered_by_first_pixel() {
        // The component starting at (3,0) comes before the one at (0,1), even
        // though the latter reaches further left.
        let m = BinaryMask::from_rows(&[
            &[0, 0, 0, 1, 0],
            &[1, 0, 0, 1, 0],
            &[1, 0, 0, 0, 0],
        ]);
        let cc = connected_components(&m);
        assert_eq!(cc.len(), 2);
        assert!(cc.regions[0].get(3, 0));
        assert!(cc.regions[1].get(0, 1));
    }

    #[test]
    fn dilate_center_pixel_gives_square() {
        let mut m = BinaryMask::new(41, 41);
        m.set(20, 20, true);
        let d = dilate(&m, 21).unwrap();
        assert_eq!(d.count(), 21 * 21);
        assert!(d.get(10, 10) && d.get(30, 30));
        assert!(!d.get(9, 20) && !d.get(31, 20));
    }

    #[test]
    fn dilate_unit_kernel_is_identity() {
        let m = BinaryMask::from_rows(&[&[1, 0, 0], &[0, 0, 1]]);
        assert_eq!(dilate(&m, 1).unwrap(), m);
    }

    #[test]
    fn dilate_corner_pixel_is_clipped() {
        let mut m = BinaryMask::new(41, 41);
        m.set(0, 0, true);
        let d = dilate(&m, 21).unwrap();
        assert_eq!(d.count(), 11 * 11);
    }

    #[test]
    fn dilate_rejects_even_kernel() {
        let m = BinaryMask::new(3, 3);
        assert!(dilate(&m, 4).is_err());
        assert!(dilate(&m, 0).is_err());
    }

    #[test]
    fn deoverlap_keeps_disjoint_masks() {
        let a = BinaryMask::from_rows(&[&[1, 1, 0, 0]]);
        let b = BinaryMask::from_rows(&[&[0, 0, 1, 0]]);
        let out = deoverlap(&[prop(a.clone(), 0.5), prop(b.clone(), 0.7)]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out.proposals()[0].mask, a);
        assert_eq!(out.proposals()[1].mask, b);
    }

    #[test]
    fn deoverlap_higher_confidence_absorbs_contained_mask() {
        let a = BinaryMask::from_rows(&[&[1, 1, 1, 1]]);
        let b = BinaryMask::from_rows(&[&[0, 1, 1, 0]]);
        let out = deoverlap(&[prop(a.clone(), 0.9), prop(b, 0.3)]).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.proposals()[0].mask, a);
        assert_eq!(out.proposals()[0].confidence, 0.9);
    }

    #[test]
    fn deoverlap_identical_masks_keep_first() {
        let a = BinaryMask::from_rows(&[&[0, 1, 1, 0]]);
        let out = deoverlap(&[prop(a.clone(), 0.5), prop(a.clone(), 0.5)]).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.proposals()[0].mask, a);
    }

    #[test]
    fn deoverlap_equal_confidence_prefers_smaller_area() {
        let big = BinaryMask::from_rows(&[&[1, 1, 1, 0]]);
        let small = BinaryMask::from_rows(&[&[0, 0, 1, 1]]);
        let out = deoverlap(&[prop(big, 0.5), prop(small.clone(), 0.5)]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out.proposals()[0].mask, BinaryMask::from_rows(&[&[1, 1, 0, 0]]));
        assert_eq!(out.proposals()[1].mask, small);
    }

    #[test]
    fn deoverlap_rejects_mismatched_dims() {
        let a = BinaryMask::new(3, 3);
        let b = BinaryMask::new(4, 3);
        assert!(matches!(
            deoverlap(&[prop(a, 0.1), prop(b, 0.1)]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn proposal_set_detects_overlap() {
        let a = BinaryMask::from_rows(&[&[1, 1, 0]]);
        let b = BinaryMask::from_rows(&[&[0, 1, 1]]);
        let set = ProposalSet::new(3, 1, vec![prop(a, 0.2), prop(b, 0.2)]).unwrap();
        assert!(!set.is_disjoint());
        assert!(ProposalSet::new(3, 1, vec![prop(BinaryMask::new(3, 1), 0.2)]).is_err());
    }

    #[test]
    fn single_pixel_canvas() {
        let m = BinaryMask::from_rows(&[&[1]]);
        assert_eq!(connected_components(&m).regions, vec![m.clone()]);
        assert!(connected_components(&BinaryMask::new(1, 1)).is_empty());
    }

    proptest! {
        #[test]
        fn components_match_flood_fill(m in arb_mask(32)) {
            let cc = connected_components(&m);
            prop_assert_eq!(cc.len(), flood_fill_count(&m));
            // partition: disjoint and union equals the input
            let total: usize = cc.iter().map(|r| r.count()).sum();
            prop_assert_eq!(total, m.count());
            let union = cc.union().unwrap_or_else(|| BinaryMask::new(m.width(), m.height()));
            prop_assert_eq!(union, m.clone());
            for r in cc.iter() {
                prop_assert_eq!(flood_fill_count(r), 1);
            }
        }

        #[test]
        fn dilate_matches_window_scan(m in arb_mask(20), half in 0usize..6) {
            let k = 2 * half + 1;
            let d = dilate(&m, k).unwrap();
            prop_assert_eq!(&d, &brute_dilate(&m, k));
            prop_assert!(m.is_subset_of(&d));
            let bigger = dilate(&m, k + 2).unwrap();
            prop_assert!(d.is_subset_of(&bigger));
        }

        #[test]
        fn deoverlap_conserves_union(
            (w, h, masks) in (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
                (Just(w), Just(h), proptest::collection::vec(
                    (proptest::collection::vec(any::<bool>(), w * h), 0u8..=4), 0..6))
            })
        ) {
            let raw: Vec<Proposal> = masks
                .into_iter()
                .map(|(d, c)| prop(BinaryMask::from_vec(w, h, d).unwrap(), c as f64 / 4.0))
                .collect();
            let out = deoverlap_sized(w, h, &raw).unwrap();
            prop_assert!(out.is_disjoint());
            prop_assert!(pairwise_disjoint(out.iter().map(|p| &p.mask), w * h));
            let mut expected = BinaryMask::new(w, h);
            for p in &raw {
                expected.union_with(&p.mask);
            }
            prop_assert_eq!(out.union(), expected);
            prop_assert!(out.iter().all(|p| !p.mask.is_empty()));
        }
    }
}
