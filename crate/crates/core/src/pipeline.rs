//! End-to-end segmentation of one episode.

use std::fs;
use std::path::Path;
use std::time::Instant;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::dataset::{downsample_mask, resize_mask, LoadedSample, DEFAULT_IMAGE_SIDE};
use crate::error::{Error, Result, ResultExt};
use crate::features::{open_extractor, ExtractInput, ExtractorSpec, FeatureExtractor, FeatureMap, SampleKey};
use crate::fusion::{fuse, FusionConfig, FusionResult};
use crate::mask::BinaryMask;
use crate::maskops::{deoverlap_sized, ProposalSet};
use crate::matching::{build_prototypes, decide_mask, similarity_maps, PrototypeConfig};
use crate::metrics::iou;
use crate::proposals::ProposalFile;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub prototypes: PrototypeConfig,
    pub fusion: FusionConfig,
    /// Working resolution; images and masks are resized to `side × side`.
    pub image_side: u32,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            prototypes: PrototypeConfig::default(),
            fusion: FusionConfig::default(),
            image_side: DEFAULT_IMAGE_SIDE,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.prototypes.validate()?;
        self.fusion.validate()?;
        if self.image_side == 0 {
            return Err(Error::InvalidArgument("image side must be >= 1".into()));
        }
        Ok(())
    }
}

/// Wall-clock milliseconds per stage. Informational only.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub extract_ms: f64,
    pub match_ms: f64,
    pub fuse_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug)]
pub struct Segmentation {
    /// Feature-matching result at the working resolution.
    pub coarse: BinaryMask,
    pub fusion: FusionResult,
    pub timings: Timings,
}

impl Segmentation {
    pub fn mask(&self) -> &BinaryMask {
        &self.fusion.mask
    }
}

pub struct Engine {
    extractor: Box<dyn FeatureExtractor>,
    config: EngineConfig,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

impl Engine {
    pub fn new(spec: &ExtractorSpec, config: EngineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Engine {
            extractor: open_extractor(spec)?,
            config,
        })
    }

    pub fn with_extractor(extractor: Box<dyn FeatureExtractor>, config: EngineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Engine { extractor, config })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    fn extract(&self, image: &RgbImage, key: &SampleKey) -> Result<FeatureMap> {
        self.extractor
            .extract(ExtractInput { image, key })
            .context(|| format!("extracting features for '{}'", key.stem))
    }

    /// Segments `query` given annotated supports. All images and masks must
    /// already be at the working resolution. Missing proposals mean an empty
    /// proposal set.
    pub fn segment(
        &self,
        supports: &[LoadedSample],
        query_image: &RgbImage,
        query_key: &SampleKey,
        proposals: Option<&ProposalSet>,
    ) -> Result<Segmentation> {
        let side = self.config.image_side as usize;
        let start = Instant::now();
        if supports.is_empty() {
            return Err(Error::InvalidArgument("at least one support sample is required".into()));
        }
        for s in supports.iter().map(|s| (s.image.dimensions(), &s.key)).chain([(query_image.dimensions(), query_key)]) {
            if s.0 != (side as u32, side as u32) {
                return Err(Error::InvalidArgument(format!(
                    "image '{}' is {}x{}, expected {side}x{side}",
                    s.1.stem, s.0 .0, s.0 .1
                )));
            }
        }

        let support_feats = supports
            .iter()
            .map(|s| self.extract(&s.image, &s.key))
            .collect::<Result<Vec<_>>>()?;
        let query_feats = self.extract(query_image, query_key)?;
        let extract_ms = ms(start);

        let t = Instant::now();
        let grid_masks = supports
            .iter()
            .zip(&support_feats)
            .map(|(s, f)| downsample_mask(&s.mask, f.width(), f.height()))
            .collect::<Result<Vec<_>>>()?;
        let shots: Vec<(&FeatureMap, &BinaryMask)> = support_feats.iter().zip(&grid_masks).collect();
        let protos = build_prototypes(&shots, &self.config.prototypes)?;
        let maps = similarity_maps(&query_feats, &protos)?;
        let coarse = decide_mask(&maps, side, side);
        let match_ms = ms(t);

        let t = Instant::now();
        let empty;
        let proposals = match proposals {
            Some(p) => p,
            None => {
                empty = ProposalSet::empty(side, side);
                &empty
            }
        };
        let fusion = fuse(&coarse, proposals, &self.config.fusion)?;
        let fuse_ms = ms(t);

        Ok(Segmentation {
            coarse,
            fusion,
            timings: Timings {
                extract_ms,
                match_ms,
                fuse_ms,
                total_ms: ms(start),
            },
        })
    }
}

/// Reads a proposal file, rescales its masks to `side × side` when the
/// canvas differs, and de-overlaps them.
pub fn load_proposals(path: &Path, side: usize) -> Result<ProposalSet> {
    let file = ProposalFile::read(path)?;
    let mut raw = file.decode().map_err(|e| e.context(path.display().to_string()))?;
    if (file.width, file.height) != (side, side) {
        log::warn!(
            "{}: proposals are {}x{}, resizing to {side}x{side}",
            path.display(),
            file.width,
            file.height
        );
        for p in &mut raw {
            p.mask = resize_mask(&p.mask, side, side)?;
        }
    }
    deoverlap_sized(side, side, &raw)
}

/// Looks up `<dir>/<product>/<class>/<stem>.json`, then `<dir>/<stem>.json`.
/// A missing file yields an empty set and a warning.
pub fn find_proposals(dir: &Path, key: &SampleKey, side: usize) -> Result<ProposalSet> {
    match key.candidates(dir, "json").into_iter().find(|p| p.is_file()) {
        Some(path) => load_proposals(&path, side),
        None => {
            log::warn!("no proposal file for '{}' under {}; using none", key.stem, dir.display());
            Ok(ProposalSet::empty(side, side))
        }
    }
}

/// Query image with predicted foreground tinted red.
pub fn overlay(image: &RgbImage, mask: &BinaryMask) -> RgbImage {
    let mut out = image.clone();
    for (x, y) in mask.foreground() {
        let p = out.get_pixel_mut(x as u32, y as u32);
        *p = Rgb([
            ((p.0[0] as u16 + 255) / 2) as u8,
            p.0[1] / 2,
            p.0[2] / 2,
        ]);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub query: String,
    pub supports: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coarse_iou: Option<f64>,
    pub coarse_pixels: usize,
    pub final_pixels: usize,
    pub proposals: usize,
    pub selected_proposals: usize,
    pub retained_regions: usize,
}

impl EpisodeRecord {
    pub fn new(
        query: &SampleKey,
        supports: &[LoadedSample],
        seg: &Segmentation,
        proposals: usize,
        gt: Option<&BinaryMask>,
    ) -> Result<Self> {
        let (iou_final, iou_coarse) = match gt {
            Some(gt) => (Some(iou(seg.mask(), gt)?), Some(iou(&seg.coarse, gt)?)),
            None => (None, None),
        };
        Ok(EpisodeRecord {
            query: query.stem.clone(),
            supports: supports.iter().map(|s| s.key.stem.clone()).collect(),
            iou: iou_final,
            coarse_iou: iou_coarse,
            coarse_pixels: seg.coarse.count(),
            final_pixels: seg.mask().count(),
            proposals,
            selected_proposals: seg.fusion.selected.len(),
            retained_regions: seg.fusion.retained.len(),
        })
    }
}

/// Writes `overlay.png`, `r0.png`, `r.png` and `episode.json` into `dir`.
pub fn write_episode_outputs(
    dir: &Path,
    query_image: &RgbImage,
    seg: &Segmentation,
    record: &EpisodeRecord,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("overlay.png");
    overlay(query_image, seg.mask())
        .save(&path)
        .map_err(|e| Error::image(&path, e))?;
    seg.coarse.save(&dir.join("r0.png"))?;
    seg.mask().save(&dir.join("r.png"))?;
    #[derive(Serialize)]
    struct Doc<'a> {
        #[serde(flatten)]
        record: &'a EpisodeRecord,
        timings: Timings,
    }
    let path = dir.join("episode.json");
    let json = serde_json::to_string_pretty(&Doc {
        record,
        timings: seg.timings,
    })
    .expect("episode record serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}
