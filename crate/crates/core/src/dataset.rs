//! Benchmark folders, episode construction and image/mask resizing.
//!
//! Expected layout:
//!
//! ```text
//! <root>/<product>/<class>/images/<stem>.png|jpg
//! <root>/<product>/<class>/masks/<stem>.png      (8-bit, nonzero = defect)
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Pixel, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::SampleKey;
use crate::mask::BinaryMask;
use crate::maskops::connected_components;

pub const DEFAULT_IMAGE_SIDE: u32 = 256;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassId {
    pub product: String,
    pub class: String,
}

impl ClassId {
    pub fn new(product: impl Into<String>, class: impl Into<String>) -> Self {
        ClassId {
            product: product.into(),
            class: class.into(),
        }
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.product, self.class)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplePath {
    pub stem: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DefectClassEntry {
    pub name: String,
    pub samples: Vec<SamplePath>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProductEntry {
    pub name: String,
    pub classes: Vec<DefectClassEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub products: Vec<ProductEntry>,
}

impl DatasetIndex {
    pub fn class(&self, id: &ClassId) -> Option<&DefectClassEntry> {
        self.products
            .iter()
            .find(|p| p.name == id.product)?
            .classes
            .iter()
            .find(|c| c.name == id.class)
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        self.products
            .iter()
            .flat_map(|p| p.classes.iter().map(|c| ClassId::new(&p.name, &c.name)))
            .collect()
    }

    /// Number of samples in a class, if it exists.
    pub fn quantity(&self, id: &ClassId) -> Option<usize> {
        self.class(id).map(|c| c.samples.len())
    }

    /// Applies a class filter. Each entry is either `product` (all its
    /// classes) or `product/class`. An empty filter selects everything.
    pub fn select(&self, filter: &[String]) -> Result<Vec<ClassId>> {
        let all = self.class_ids();
        if filter.is_empty() {
            return Ok(all);
        }
        let selected: Vec<ClassId> = all
            .into_iter()
            .filter(|id| {
                filter.iter().any(|f| {
                    let f = f.trim().trim_matches('/');
                    match f.split_once('/') {
                        Some((p, c)) => p == id.product && c == id.class,
                        None => f == id.product,
                    }
                })
            })
            .collect();
        if selected.is_empty() {
            return Err(Error::InvalidArgument("no classes selected".into()));
        }
        Ok(selected)
    }
}

/// Reads a class list file: one `product/class` (or `product`) per line,
/// blank lines and `#` comments ignored.
pub fn read_class_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect())
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().into_owned();
        if path.is_dir() && !name.starts_with('.') {
            out.push((name, path));
        }
    }
    out.sort();
    Ok(out)
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() && !entry.file_name().to_string_lossy().starts_with('.') {
            out.push(path);
        }
    }
    out.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(out)
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn scan_class(dir: &Path) -> Result<Vec<SamplePath>> {
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    if !images_dir.is_dir() || !masks_dir.is_dir() {
        return Err(Error::Dataset(format!(
            "class folder {} must contain images/ and masks/",
            dir.display()
        )));
    }
    let mut samples = Vec::new();
    let mut stems = BTreeSet::new();
    for image in sorted_files(&images_dir)?
        .into_iter()
        .filter(|p| has_image_extension(p))
    {
        let stem = file_stem(&image);
        if !stems.insert(stem.clone()) {
            return Err(Error::Dataset(format!(
                "duplicate sample name '{stem}' in {}",
                images_dir.display()
            )));
        }
        let mask = masks_dir.join(format!("{stem}.png"));
        if !mask.is_file() {
            return Err(Error::Dataset(format!(
                "missing mask for image {} (expected {})",
                image.display(),
                mask.display()
            )));
        }
        let idims = image::image_dimensions(&image).map_err(|e| Error::image(&image, e))?;
        let mdims = image::image_dimensions(&mask).map_err(|e| Error::image(&mask, e))?;
        if idims != mdims {
            return Err(Error::Dataset(format!(
                "mask {} is {}x{} but image {} is {}x{}",
                mask.display(),
                mdims.0,
                mdims.1,
                image.display(),
                idims.0,
                idims.1
            )));
        }
        samples.push(SamplePath { stem, image, mask });
    }
    if samples.is_empty() {
        return Err(Error::Dataset(format!(
            "class folder {} is empty",
            dir.display()
        )));
    }
    for mask in sorted_files(&masks_dir)? {
        if !stems.contains(&file_stem(&mask)) {
            log::warn!("mask {} has no matching image; ignored", mask.display());
        }
    }
    Ok(samples)
}

/// Walks `root` and validates every product, class and image/mask pair.
pub fn scan_dataset(root: &Path) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let mut products = Vec::new();
    for (name, path) in sorted_subdirs(root)? {
        let mut classes = Vec::new();
        for (class_name, class_path) in sorted_subdirs(&path)? {
            classes.push(DefectClassEntry {
                name: class_name,
                samples: scan_class(&class_path)?,
            });
        }
        if classes.is_empty() {
            return Err(Error::Dataset(format!(
                "product folder {} has no classes",
                path.display()
            )));
        }
        products.push(ProductEntry { name, classes });
    }
    if products.is_empty() {
        return Err(Error::Dataset(format!(
            "no products found under {}",
            root.display()
        )));
    }
    Ok(DatasetIndex {
        root: root.to_owned(),
        products,
    })
}

/// `(query, supports)` index pairs of the cyclic leave-one-out schedule:
/// sample `i` is the query of episode `i` and the next `shots` samples
/// (wrapping around) are its supports.
pub fn cyclic_schedule(n_samples: usize, shots: usize) -> Result<Vec<(usize, Vec<usize>)>> {
    if shots == 0 {
        return Err(Error::InvalidArgument("shots must be >= 1".into()));
    }
    if n_samples < shots + 1 {
        return Err(Error::Dataset(format!(
            "class too small for {shots}-shot: {n_samples} samples, need at least {}",
            shots + 1
        )));
    }
    Ok((0..n_samples)
        .map(|q| (q, (1..=shots).map(|k| (q + k) % n_samples).collect()))
        .collect())
}

/// One evaluation unit, referencing files on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub class_id: ClassId,
    pub query: SamplePath,
    pub supports: Vec<SamplePath>,
}

pub fn build_episodes(index: &DatasetIndex, class_id: &ClassId, shots: usize) -> Result<Vec<Episode>> {
    let class = index
        .class(class_id)
        .ok_or_else(|| Error::Dataset(format!("unknown class {class_id}")))?;
    let schedule = cyclic_schedule(class.samples.len(), shots)
        .map_err(|e| e.context(class_id.to_string()))?;
    Ok(schedule
        .into_iter()
        .map(|(q, s)| Episode {
            class_id: class_id.clone(),
            query: class.samples[q].clone(),
            supports: s.into_iter().map(|i| class.samples[i].clone()).collect(),
        })
        .collect())
}

/// An image and its mask, resized to the working resolution.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub key: SampleKey,
    pub image: RgbImage,
    pub mask: BinaryMask,
}

impl LoadedSample {
    pub fn load(key: SampleKey, image: &Path, mask: &Path, side: u32) -> Result<Self> {
        let img = image::open(image).map_err(|e| Error::image(image, e))?.to_rgb8();
        let m = BinaryMask::load(mask)?;
        Ok(LoadedSample {
            key,
            image: resize_image(&img, side)?,
            mask: resize_mask(&m, side as usize, side as usize)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LoadedEpisode {
    pub class_id: ClassId,
    pub query: LoadedSample,
    pub supports: Vec<LoadedSample>,
}

impl Episode {
    /// Reads and resizes every image and mask. Support masks must be
    /// nonempty.
    pub fn load(&self, side: u32) -> Result<LoadedEpisode> {
        let load = |s: &SamplePath| {
            LoadedSample::load(
                SampleKey::in_class(&self.class_id.product, &self.class_id.class, &s.stem),
                &s.image,
                &s.mask,
                side,
            )
        };
        let supports = self.supports.iter().map(load).collect::<Result<Vec<_>>>()?;
        for (s, path) in supports.iter().zip(&self.supports) {
            if s.mask.is_empty() {
                return Err(Error::Dataset(format!(
                    "support mask {} has no foreground",
                    path.mask.display()
                )));
            }
        }
        Ok(LoadedEpisode {
            class_id: self.class_id.clone(),
            query: load(&self.query)?,
            supports,
        })
    }
}

/// Resizes to `side × side` with bilinear filtering. Aspect ratio is not
/// preserved. Same-size input is returned unchanged.
pub fn resize_image<P>(img: &ImageBuffer<P, Vec<P::Subpixel>>, side: u32) -> Result<ImageBuffer<P, Vec<P::Subpixel>>>
where
    P: Pixel + 'static,
    P::Subpixel: 'static,
{
    if img.width() == 0 || img.height() == 0 || side == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot resize {}x{} image to {side}x{side}",
            img.width(),
            img.height()
        )));
    }
    if img.dimensions() == (side, side) {
        return Ok(img.clone());
    }
    Ok(imageops::resize(img, side, side, FilterType::Triangle))
}

/// Resizes a mask to `width × height`: [`downsample_mask`] when shrinking
/// in both directions, nearest neighbour otherwise.
pub fn resize_mask(mask: &BinaryMask, width: usize, height: usize) -> Result<BinaryMask> {
    if mask.dims() == (width, height) {
        return Ok(mask.clone());
    }
    if width <= mask.width() && height <= mask.height() {
        downsample_mask(mask, width, height)
    } else {
        Ok(nearest(mask, width, height))
    }
}

// Half-pixel-centre bilinear sampling, no antialiasing.
fn bilinear(mask: &BinaryMask, width: usize, height: usize) -> BinaryMask {
    let (sw, sh) = mask.dims();
    let sx = sw as f64 / width as f64;
    let sy = sh as f64 / height as f64;
    let coord = |dst: usize, scale: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let v = |x: usize, y: usize| mask.get(x, y) as u8 as f64;
    BinaryMask::from_fn(width, height, |x, y| {
        let (x0, x1, lx) = coord(x, sx, sw);
        let (y0, y1, ly) = coord(y, sy, sh);
        let top = v(x0, y0) * (1.0 - lx) + v(x1, y0) * lx;
        let bottom = v(x0, y1) * (1.0 - lx) + v(x1, y1) * lx;
        top * (1.0 - ly) + bottom * ly >= 0.5
    })
}

// Source index floor(dst * src_len / dst_len).
fn nearest(mask: &BinaryMask, width: usize, height: usize) -> BinaryMask {
    let (sw, sh) = mask.dims();
    BinaryMask::from_fn(width, height, |x, y| {
        let sx = (x * sw / width).min(sw - 1);
        let sy = (y * sh / height).min(sh - 1);
        mask.get(sx, sy)
    })
}

/// Which stage of [`downsample_mask`] produced the result.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DownsampleStage {
    Bilinear,
    Nearest,
    Centroid,
}

/// Shrinks a support mask to the feature grid without losing small defects.
///
/// Bilinear resampling thresholded at 0.5 is tried first. If that erases a
/// nonempty mask, nearest-neighbour sampling is tried; if that is empty too,
/// the cell containing the centroid of every 8-connected foreground
/// component is set.
pub fn downsample_mask(mask: &BinaryMask, width: usize, height: usize) -> Result<BinaryMask> {
    downsample_mask_traced(mask, width, height).map(|(m, _)| m)
}

pub fn downsample_mask_traced(
    mask: &BinaryMask,
    width: usize,
    height: usize,
) -> Result<(BinaryMask, DownsampleStage)> {
    let (sw, sh) = mask.dims();
    if width == 0 || height == 0 || width > sw || height > sh {
        return Err(Error::InvalidArgument(format!(
            "cannot downsample {sw}x{sh} mask to {width}x{height}"
        )));
    }
    let out = bilinear(mask, width, height);
    if !out.is_empty() || mask.is_empty() {
        return Ok((out, DownsampleStage::Bilinear));
    }
    let out = nearest(mask, width, height);
    if !out.is_empty() {
        log::debug!("mask {sw}x{sh} -> {width}x{height}: bilinear empty, used nearest");
        return Ok((out, DownsampleStage::Nearest));
    }
    log::debug!("mask {sw}x{sh} -> {width}x{height}: using component centroids");
    let mut out = BinaryMask::new(width, height);
    for region in connected_components(mask).iter() {
        let (mut cx, mut cy, mut n) = (0.0f64, 0.0f64, 0.0f64);
        for (x, y) in region.foreground() {
            cx += x as f64;
            cy += y as f64;
            n += 1.0;
        }
        let cell = |c: f64, src: usize, dst: usize| {
            (((c / n + 0.5) * dst as f64 / src as f64).floor() as usize).min(dst - 1)
        };
        out.set(cell(cx, sw, width), cell(cy, sh, height), true);
    }
    Ok((out, DownsampleStage::Centroid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb};
    use proptest::prelude::*;

    #[test]
    fn cyclic_one_shot() {
        let s = cyclic_schedule(3, 1).unwrap();
        assert_eq!(s, vec![(0, vec![1]), (1, vec![2]), (2, vec![0])]);
    }

    #[test]
    fn cyclic_two_shot() {
        let s = cyclic_schedule(3, 2).unwrap();
        assert_eq!(s, vec![(0, vec![1, 2]), (1, vec![2, 0]), (2, vec![0, 1])]);
    }

    #[test]
    fn cyclic_rejects_small_class() {
        let err = cyclic_schedule(1, 1).unwrap_err();
        assert!(err.to_string().contains("class too small for 1-shot"), "{err}");
        assert!(cyclic_schedule(3, 0).is_err());
    }

    #[test]
    fn resize_constant_image() {
        let img = RgbImage::from_pixel(512, 512, Rgb([128, 128, 128]));
        let out = resize_image(&img, 256).unwrap();
        assert_eq!(out.dimensions(), (256, 256));
        assert!(out.pixels().all(|p| p.0 == [128, 128, 128]));
    }

    #[test]
    fn resize_same_size_is_identity() {
        let img = RgbImage::from_fn(256, 256, |x, y| Rgb([x as u8, y as u8, (x ^ y) as u8]));
        assert_eq!(resize_image(&img, 256).unwrap(), img);
    }

    #[test]
    fn resize_changes_aspect() {
        let img = RgbImage::new(500, 300);
        assert_eq!(resize_image(&img, 256).unwrap().dimensions(), (256, 256));
        let gray = GrayImage::from_pixel(7, 3, Luma([9]));
        assert_eq!(resize_image(&gray, 256).unwrap().dimensions(), (256, 256));
    }

    #[test]
    fn resize_rejects_empty() {
        assert!(resize_image(&RgbImage::new(0, 10), 256).is_err());
    }

    #[test]
    fn downsample_all_ones() {
        let m = BinaryMask::from_fn(4, 4, |_, _| true);
        assert_eq!(downsample_mask(&m, 2, 2).unwrap(), BinaryMask::from_fn(2, 2, |_, _| true));
    }

    #[test]
    fn downsample_exact_block() {
        let m = BinaryMask::from_fn(256, 256, |x, y| x < 64 && y < 64);
        let (d, stage) = downsample_mask_traced(&m, 64, 64).unwrap();
        assert_eq!(stage, DownsampleStage::Bilinear);
        assert_eq!(d, BinaryMask::from_fn(64, 64, |x, y| x < 16 && y < 16));
    }

    #[test]
    fn downsample_single_pixel_falls_back_to_centroid() {
        let mut m = BinaryMask::new(64, 64);
        m.set(5, 5, true);
        let (d, stage) = downsample_mask_traced(&m, 8, 8).unwrap();
        assert_eq!(stage, DownsampleStage::Centroid);
        assert_eq!(d.count(), 1);
        assert!(d.get(0, 0));
    }

    #[test]
    fn downsample_uses_nearest_when_it_hits() {
        // Pixel (8,8) is sampled by nearest (8 = 1 * 64/8) but lies outside
        // every bilinear footprint (8x + 3.5 +- 0.5).
        let mut m = BinaryMask::new(64, 64);
        m.set(8, 8, true);
        let (d, stage) = downsample_mask_traced(&m, 8, 8).unwrap();
        assert_eq!(stage, DownsampleStage::Nearest);
        assert!(d.get(1, 1));
        assert_eq!(d.count(), 1);
    }

    #[test]
    fn downsample_empty_stays_empty() {
        let m = BinaryMask::new(16, 16);
        assert!(downsample_mask(&m, 4, 4).unwrap().is_empty());
        assert!(downsample_mask(&m, 32, 4).is_err());
    }

    #[test]
    fn resize_mask_upsamples_with_nearest() {
        let m = BinaryMask::from_rows(&[&[1, 0], &[0, 0]]);
        let up = resize_mask(&m, 4, 4).unwrap();
        assert_eq!(up, BinaryMask::from_fn(4, 4, |x, y| x < 2 && y < 2));
    }

    #[test]
    fn select_filters() {
        let index = DatasetIndex {
            root: PathBuf::from("/x"),
            products: vec![
                ProductEntry {
                    name: "tile".into(),
                    classes: vec![
                        DefectClassEntry { name: "crack".into(), samples: vec![] },
                        DefectClassEntry { name: "rough".into(), samples: vec![] },
                    ],
                },
                ProductEntry {
                    name: "grid".into(),
                    classes: vec![DefectClassEntry { name: "bent".into(), samples: vec![] }],
                },
            ],
        };
        assert_eq!(index.select(&[]).unwrap().len(), 3);
        assert_eq!(index.select(&["tile".into()]).unwrap().len(), 2);
        assert_eq!(
            index.select(&["grid/bent".into()]).unwrap(),
            vec![ClassId::new("grid", "bent")]
        );
        let err = index.select(&["nothing".into()]).unwrap_err();
        assert!(err.to_string().contains("no classes selected"));
    }

    proptest! {
        #[test]
        fn downsample_never_empties_a_mask(
            (w, h, data, tw, th) in (1usize..48, 1usize..48).prop_flat_map(|(w, h)| {
                (Just(w), Just(h), proptest::collection::vec(proptest::bool::weighted(0.02), w * h), 1..=w, 1..=h)
            })
        ) {
            let m = BinaryMask::from_vec(w, h, data).unwrap();
            let d = downsample_mask(&m, tw, th).unwrap();
            prop_assert_eq!(d.dims(), (tw, th));
            prop_assert_eq!(d.is_empty(), m.is_empty());
        }

        #[test]
        fn schedule_covers_every_sample_once(n in 2usize..40, shots in 1usize..6) {
            prop_assume!(n > shots);
            let s = cyclic_schedule(n, shots).unwrap();
            let mut queries: Vec<usize> = s.iter().map(|(q, _)| *q).collect();
            queries.sort();
            prop_assert_eq!(queries, (0..n).collect::<Vec<_>>());
            for (q, sup) in &s {
                prop_assert_eq!(sup.len(), shots);
                prop_assert!(!sup.contains(q));
            }
        }
    }
}
