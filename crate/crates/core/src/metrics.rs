//! IoU, class-level mIoU and product-level FB-IoU.
//!
//! Per-class IoU is the ratio of intersection and union pixel counts summed
//! over every episode of the class, not a mean of per-episode IoUs. FB-IoU is
//! computed per product from summed foreground and background counts and
//! then averaged over products.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::ClassId;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// `|pred ∩ gt| / |pred ∪ gt|`, or 1.0 when both masks are empty.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.ensure_same_dims(gt, "prediction vs ground truth")?;
    let union = pred.union_count(gt);
    if union == 0 {
        log::debug!("IoU of two empty masks taken as 1.0");
        return Ok(1.0);
    }
    Ok(pred.intersection_count(gt) as f64 / union as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IouCounts {
    pub intersection: u64,
    pub union: u64,
}

impl IouCounts {
    pub fn of(pred: &BinaryMask, gt: &BinaryMask) -> Self {
        IouCounts {
            intersection: pred.intersection_count(gt) as u64,
            union: pred.union_count(gt) as u64,
        }
    }

    pub fn add(&mut self, other: IouCounts) {
        self.intersection += other.intersection;
        self.union += other.union;
    }

    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FbCounts {
    pub foreground: IouCounts,
    pub background: IouCounts,
}

impl FbCounts {
    pub fn add(&mut self, other: FbCounts) {
        self.foreground.add(other.foreground);
        self.background.add(other.background);
    }

    pub fn fb_iou(&self) -> f64 {
        0.5 * (self.foreground.iou() + self.background.iou())
    }
}

/// Mergeable accumulator of pixel counts.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MetricLedger {
    classes: BTreeMap<ClassId, IouCounts>,
    products: BTreeMap<String, FbCounts>,
}

impl MetricLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn accumulate(&mut self, class_id: &ClassId, pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
        pred.ensure_same_dims(gt, "prediction vs ground truth")?;
        let fg = IouCounts::of(pred, gt);
        let bg = IouCounts::of(&pred.complement(), &gt.complement());
        self.add_counts(class_id, fg, bg);
        Ok(())
    }

    pub fn add_counts(&mut self, class_id: &ClassId, fg: IouCounts, bg: IouCounts) {
        self.classes.entry(class_id.clone()).or_default().add(fg);
        self.products
            .entry(class_id.product.clone())
            .or_default()
            .add(FbCounts {
                foreground: fg,
                background: bg,
            });
    }

    pub fn merge(&mut self, other: &MetricLedger) {
        for (k, v) in &other.classes {
            self.classes.entry(k.clone()).or_default().add(*v);
        }
        for (k, v) in &other.products {
            self.products.entry(k.clone()).or_default().add(*v);
        }
    }

    pub fn merged(mut self, other: &MetricLedger) -> MetricLedger {
        self.merge(other);
        self
    }

    pub fn class_counts(&self) -> &BTreeMap<ClassId, IouCounts> {
        &self.classes
    }

    pub fn product_counts(&self) -> &BTreeMap<String, FbCounts> {
        &self.products
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReportOptions {
    /// Also report FB-IoU from counts pooled across all products.
    pub pooled_fb_iou: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub product: String,
    pub class: String,
    pub iou: f64,
    pub intersection: u64,
    pub union: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductScore {
    pub product: String,
    pub iou_fg: f64,
    pub iou_bg: f64,
    pub fb_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class: Vec<ClassScore>,
    pub miou: f64,
    pub per_product: Vec<ProductScore>,
    pub mean_fb_iou: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pooled_fb_iou: Option<f64>,
}

pub fn report(ledger: &MetricLedger, opts: ReportOptions) -> Result<MetricReport> {
    if ledger.is_empty() {
        return Err(Error::Metrics("cannot report on an empty ledger".into()));
    }
    let per_class: Vec<ClassScore> = ledger
        .classes
        .iter()
        .map(|(id, c)| ClassScore {
            product: id.product.clone(),
            class: id.class.clone(),
            iou: c.iou(),
            intersection: c.intersection,
            union: c.union,
        })
        .collect();
    let miou = per_class.iter().map(|c| c.iou).sum::<f64>() / per_class.len() as f64;
    let per_product: Vec<ProductScore> = ledger
        .products
        .iter()
        .map(|(p, c)| ProductScore {
            product: p.clone(),
            iou_fg: c.foreground.iou(),
            iou_bg: c.background.iou(),
            fb_iou: c.fb_iou(),
        })
        .collect();
    let mean_fb_iou = per_product.iter().map(|p| p.fb_iou).sum::<f64>() / per_product.len() as f64;
    let pooled_fb_iou = opts.pooled_fb_iou.then(|| {
        let mut total = FbCounts::default();
        for c in ledger.products.values() {
            total.add(*c);
        }
        total.fb_iou()
    });
    Ok(MetricReport {
        per_class,
        miou,
        per_product,
        mean_fb_iou,
        pooled_fb_iou,
    })
}
