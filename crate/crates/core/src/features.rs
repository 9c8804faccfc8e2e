//! Dense feature maps, the `FMAP` container format and extractor backends.
//!
//! A backend turns a resized RGB image into an `H′ × W′ × C′` map. Three are
//! available:
//!
//! * a portable ONNX graph run in-process (feature `onnx`),
//! * precomputed `FMAP` files looked up by sample identity,
//! * a trivial average-pooling extractor for tests and smoke runs.
//!
//! Backends are shared across worker threads and must be `Send + Sync`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `H′ × W′ × C′` feature tensor, row-major with the channel index fastest.
#[derive(Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl fmt::Debug for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FeatureMap({})", self.shape())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl fmt::Display for FeatureShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "feature map dimensions must be >= 1, got {height}x{width}x{channels}"
            )));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Error::InvalidArgument("feature map too large".into()))?;
        if data.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "feature buffer has {} values, expected {expected}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite feature value at index {i}"
            )));
        }
        Ok(FeatureMap {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        FeatureMap::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> FeatureShape {
        FeatureShape {
            height: self.height,
            width: self.width,
            channels: self.channels,
        }
    }

    /// Feature vector of the cell at row `y`, column `x`.
    #[inline]
    pub fn vector(&self, y: usize, x: usize) -> &[f32] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Multiplies every value by `factor`.
    pub fn scaled(&self, factor: f32) -> Result<FeatureMap> {
        FeatureMap::new(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|v| v * factor).collect(),
        )
    }
}

// ---------------------------------------------------------------------------
// FMAP container
// ---------------------------------------------------------------------------

pub const FMAP_MAGIC: &[u8; 4] = b"FMAP";
pub const FMAP_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const HEADER_LEN: usize = 4 + 4 + 1 + 4 + 4 + 4;

/// Serializes a map as little-endian `FMAP` v1.
pub fn encode_features(f: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + f.data.len() * 4);
    out.extend_from_slice(FMAP_MAGIC);
    out.extend_from_slice(&FMAP_VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    for dim in [f.height, f.width, f.channels] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in &f.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let avail = self.buf.len() - self.pos;
        if avail < n {
            return Err(Error::Truncated {
                offset: self.pos as u64,
                expected: n as u64,
                got: avail as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMap> {
    if bytes.len() < 4 || &bytes[..4] != FMAP_MAGIC {
        return Err(Error::NotFeatureFile);
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32()?;
    if version != FMAP_VERSION {
        return Err(Error::FeatureFormat {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let dtype = r.take(1)?[0];
    if dtype != DTYPE_F32 {
        return Err(Error::FeatureFormat {
            offset: 8,
            msg: format!("unsupported dtype {dtype}"),
        });
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let c = r.u32()? as usize;
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::FeatureFormat {
            offset: 9,
            msg: format!("zero dimension in shape {h}x{w}x{c}"),
        });
    }
    let payload_len = (h as u64) * (w as u64) * (c as u64) * 4;
    let payload_start = r.pos;
    let avail = (bytes.len() - payload_start) as u64;
    if avail < payload_len {
        return Err(Error::Truncated {
            offset: payload_start as u64,
            expected: payload_len,
            got: avail,
        });
    }
    if avail > payload_len {
        return Err(Error::FeatureFormat {
            offset: payload_start as u64 + payload_len,
            msg: format!("{} trailing bytes", avail - payload_len),
        });
    }
    let payload = r.take(payload_len as usize)?;
    let mut data = Vec::with_capacity(h * w * c);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::FeatureFormat {
                offset: (payload_start + i * 4) as u64,
                msg: "non-finite value".into(),
            });
        }
        data.push(v);
    }
    FeatureMap::new(h, w, c, data)
}

pub fn save_features(f: &FeatureMap, path: &Path) -> Result<()> {
    fs::write(path, encode_features(f)).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<FeatureMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes).map_err(|e| e.context(path.display().to_string()))
}

// ---------------------------------------------------------------------------
// Extractors
// ---------------------------------------------------------------------------

/// Identifies a sample so file-backed extractors can find its features.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SampleKey {
    pub product: Option<String>,
    pub class: Option<String>,
    pub stem: String,
}

impl SampleKey {
    pub fn stem(stem: impl Into<String>) -> Self {
        SampleKey {
            stem: stem.into(),
            ..Default::default()
        }
    }

    pub fn in_class(product: &str, class: &str, stem: &str) -> Self {
        SampleKey {
            product: Some(product.to_owned()),
            class: Some(class.to_owned()),
            stem: stem.to_owned(),
        }
    }

    /// Candidate files under `dir` with the given extension: the
    /// `product/class/stem.ext` location first, then `stem.ext`.
    pub fn candidates(&self, dir: &Path, ext: &str) -> Vec<PathBuf> {
        let file = format!("{}.{ext}", self.stem);
        let mut out = Vec::with_capacity(2);
        if let (Some(p), Some(c)) = (&self.product, &self.class) {
            out.push(dir.join(p).join(c).join(&file));
        }
        out.push(dir.join(file));
        out
    }
}

#[derive(Clone, Copy)]
pub struct ExtractInput<'a> {
    pub image: &'a RgbImage,
    pub key: &'a SampleKey,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExtractorKind {
    /// ONNX graph taking `1×3×S×S` normalized RGB and returning `1×C×H×W`.
    PortableModel { path: PathBuf },
    /// Precomputed `FMAP` files under `dir`.
    FeatureFile { dir: PathBuf },
    /// Mean RGB over non-overlapping `factor × factor` windows.
    TrivialAvgPool { factor: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorSpec {
    #[serde(flatten)]
    pub kind: ExtractorKind,
    /// When set, every produced map must have exactly this shape.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expected_shape: Option<FeatureShape>,
}

impl ExtractorSpec {
    pub fn avg_pool(factor: usize) -> Self {
        ExtractorSpec {
            kind: ExtractorKind::TrivialAvgPool { factor },
            expected_shape: None,
        }
    }

    pub fn feature_files(dir: impl Into<PathBuf>) -> Self {
        ExtractorSpec {
            kind: ExtractorKind::FeatureFile { dir: dir.into() },
            expected_shape: None,
        }
    }

    pub fn portable_model(path: impl Into<PathBuf>) -> Self {
        ExtractorSpec {
            kind: ExtractorKind::PortableModel { path: path.into() },
            expected_shape: None,
        }
    }

    pub fn with_expected_shape(mut self, shape: FeatureShape) -> Self {
        self.expected_shape = Some(shape);
        self
    }
}

pub trait FeatureExtractor: Send + Sync {
    fn extract(&self, input: ExtractInput<'_>) -> Result<FeatureMap>;
}

/// Instantiates the backend described by `spec`. Model files are loaded
/// here, once.
pub fn open_extractor(spec: &ExtractorSpec) -> Result<Box<dyn FeatureExtractor>> {
    let inner: Box<dyn FeatureExtractor> = match &spec.kind {
        ExtractorKind::TrivialAvgPool { factor } => Box::new(AvgPoolExtractor::new(*factor)?),
        ExtractorKind::FeatureFile { dir } => {
            if !dir.is_dir() {
                return Err(Error::InvalidArgument(format!(
                    "features directory {} does not exist",
                    dir.display()
                )));
            }
            Box::new(FeatureFileExtractor { dir: dir.clone() })
        }
        ExtractorKind::PortableModel { path } => open_portable_model(path)?,
    };
    Ok(match spec.expected_shape {
        Some(shape) => Box::new(ShapeChecked { inner, shape }),
        None => inner,
    })
}

/// One-shot convenience: opens the backend and extracts a single map.
pub fn extract_features(input: ExtractInput<'_>, spec: &ExtractorSpec) -> Result<FeatureMap> {
    open_extractor(spec)?.extract(input)
}

struct ShapeChecked {
    inner: Box<dyn FeatureExtractor>,
    shape: FeatureShape,
}

impl FeatureExtractor for ShapeChecked {
    fn extract(&self, input: ExtractInput<'_>) -> Result<FeatureMap> {
        let f = self.inner.extract(input)?;
        if f.shape() != self.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.to_string(),
                got: f.shape().to_string(),
            });
        }
        Ok(f)
    }
}

pub struct AvgPoolExtractor {
    factor: usize,
}

impl AvgPoolExtractor {
    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidArgument("pool factor must be >= 1".into()));
        }
        Ok(AvgPoolExtractor { factor })
    }
}

impl FeatureExtractor for AvgPoolExtractor {
    fn extract(&self, input: ExtractInput<'_>) -> Result<FeatureMap> {
        let img = input.image;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let f = self.factor;
        if w == 0 || h == 0 || w % f != 0 || h % f != 0 {
            return Err(Error::InvalidArgument(format!(
                "image {w}x{h} is not divisible by pool factor {f}"
            )));
        }
        let (oh, ow) = (h / f, w / f);
        let mut sums = vec![0u64; oh * ow * 3];
        for (x, y, p) in img.enumerate_pixels() {
            let cell = ((y as usize / f) * ow + x as usize / f) * 3;
            for c in 0..3 {
                sums[cell + c] += p.0[c] as u64;
            }
        }
        let n = (f * f) as f64;
        FeatureMap::new(
            oh,
            ow,
            3,
            sums.into_iter().map(|s| (s as f64 / n) as f32).collect(),
        )
    }
}

pub struct FeatureFileExtractor {
    dir: PathBuf,
}

impl FeatureExtractor for FeatureFileExtractor {
    fn extract(&self, input: ExtractInput<'_>) -> Result<FeatureMap> {
        let candidates = input.key.candidates(&self.dir, "fmap");
        match candidates.iter().find(|p| p.is_file()) {
            Some(path) => load_features(path),
            None => Err(Error::InvalidArgument(format!(
                "no feature file for sample '{}' (looked for {})",
                input.key.stem,
                candidates
                    .iter()
                    .map(|p| p.display().to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            ))),
        }
    }
}

#[cfg(feature = "onnx")]
fn open_portable_model(path: &Path) -> Result<Box<dyn FeatureExtractor>> {
    Ok(Box::new(onnx::OnnxExtractor::load(path)?))
}

#[cfg(not(feature = "onnx"))]
fn open_portable_model(path: &Path) -> Result<Box<dyn FeatureExtractor>> {
    Err(Error::Model {
        path: path.to_owned(),
        msg: "built without the `onnx` feature".into(),
    })
}

#[cfg(feature = "onnx")]
pub mod onnx {
    //! In-process ONNX inference through tract.

    use std::path::{Path, PathBuf};

    use tract_onnx::prelude::*;

    use super::{ExtractInput, FeatureExtractor, FeatureMap};
    use crate::error::{Error, Result};

    // ImageNet statistics, applied after scaling pixels to [0, 1].
    const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
    const STD: [f32; 3] = [0.229, 0.224, 0.225];

    type Plan = std::sync::Arc<TypedRunnableModel>;

    pub struct OnnxExtractor {
        path: PathBuf,
        side: usize,
        plan: Plan,
    }

    impl OnnxExtractor {
        /// Loads a graph with a single `1×3×S×S` input. The side `S` is read
        /// from the graph's declared input shape and defaults to 256.
        pub fn load(path: &Path) -> Result<Self> {
            let model_err = |msg: String| Error::Model {
                path: path.to_owned(),
                msg,
            };
            if !path.is_file() {
                return Err(model_err("cannot read model file".into()));
            }
            let model = tract_onnx::onnx()
                .model_for_path(path)
                .map_err(|e| model_err(format!("{e:#}")))?;
            let side = declared_side(&model).unwrap_or(256);
            let plan = model
                .with_input_fact(0, f32::fact([1, 3, side, side]).into())
                .and_then(|m| m.into_optimized())
                .and_then(|m| m.into_runnable())
                .map_err(|e| model_err(format!("{e:#}")))?;
            Ok(OnnxExtractor {
                path: path.to_owned(),
                side,
                plan,
            })
        }

        pub fn input_side(&self) -> usize {
            self.side
        }
    }

    fn declared_side(model: &InferenceModel) -> Option<usize> {
        let fact = model.input_fact(0).ok()?;
        let shape = fact.shape.as_concrete_finite().ok()??;
        match shape.as_slice() {
            &[_, _, h, w] if h == w && h > 0 => Some(h),
            _ => None,
        }
    }

    impl FeatureExtractor for OnnxExtractor {
        fn extract(&self, input: ExtractInput<'_>) -> Result<FeatureMap> {
            let img = input.image;
            let side = self.side;
            if img.width() as usize != side || img.height() as usize != side {
                return Err(Error::InvalidArgument(format!(
                    "model {} expects {side}x{side} input, got {}x{}",
                    self.path.display(),
                    img.width(),
                    img.height()
                )));
            }
            let tensor: Tensor =
                tract_ndarray::Array4::from_shape_fn((1, 3, side, side), |(_, c, y, x)| {
                    let v = img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0;
                    (v - MEAN[c]) / STD[c]
                })
                .into();
            let model_err = |msg: String| Error::Model {
                path: self.path.clone(),
                msg,
            };
            let outputs = self
                .plan
                .run(tvec!(tensor.into()))
                .map_err(|e| model_err(format!("{e:#}")))?;
            let out = outputs[0]
                .to_plain_array_view::<f32>()
                .map_err(|e| model_err(format!("{e:#}")))?;
            let shape = out.shape().to_vec();
            let [1, c, h, w] = shape[..] else {
                return Err(model_err(format!("expected a 1xCxHxW output, got {shape:?}")));
            };
            let out = out
                .into_dimensionality::<tract_ndarray::Ix4>()
                .map_err(|e| model_err(e.to_string()))?;
            FeatureMap::from_fn(h, w, c, |y, x, ch| out[[0, ch, y, x]])
        }
    }
}
