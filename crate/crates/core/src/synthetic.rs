//! Seeded two-texture scenes: a flat-coloured defect on a striped, noisy
//! background. Used for fixtures and self-checks.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneParams {
    pub side: u32,
    pub defect_color: [u8; 3],
    /// Snap defect rectangles to multiples of this many pixels. `None`
    /// draws an ellipse at an arbitrary position.
    pub align: Option<u32>,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            side: 256,
            defect_color: [220, 40, 30],
            align: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub image: RgbImage,
    pub mask: BinaryMask,
}

fn background(rng: &mut ChaCha8Rng, side: u32) -> RgbImage {
    let period = rng.gen_range(10.0..24.0f32);
    let angle = rng.gen_range(0.0..std::f32::consts::PI);
    let (s, c) = angle.sin_cos();
    let base = [
        rng.gen_range(30..70) as f32,
        rng.gen_range(110..150) as f32,
        rng.gen_range(120..170) as f32,
    ];
    let mut img = RgbImage::new(side, side);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let t = ((x as f32 * c + y as f32 * s) / period * std::f32::consts::TAU).sin();
        let mut px = [0u8; 3];
        for (k, v) in px.iter_mut().enumerate() {
            let noise = rng.gen_range(-8.0..8.0f32);
            *v = (base[k] + 25.0 * t + noise).clamp(0.0, 255.0) as u8;
        }
        *p = Rgb(px);
    }
    img
}

fn defect_mask(rng: &mut ChaCha8Rng, params: &SceneParams) -> BinaryMask {
    let side = params.side as usize;
    let lo = (side / 3).max(2);
    let hi = (side / 2).max(lo + 1);
    match params.align {
        Some(a) => {
            let a = a.max(1) as usize;
            let cells = side / a;
            let w = (rng.gen_range(lo..hi) / a).clamp(1, cells.saturating_sub(2).max(1));
            let h = (rng.gen_range(lo..hi) / a).clamp(1, cells.saturating_sub(2).max(1));
            let x0 = rng.gen_range(0..=cells - w) * a;
            let y0 = rng.gen_range(0..=cells - h) * a;
            let (x1, y1) = (x0 + w * a, y0 + h * a);
            BinaryMask::from_fn(side, side, |x, y| (x0..x1).contains(&x) && (y0..y1).contains(&y))
        }
        None => {
            let rx = rng.gen_range(lo..hi) as f64 / 2.0;
            let ry = rng.gen_range(lo..hi) as f64 / 2.0;
            let cx = rng.gen_range(rx..side as f64 - rx);
            let cy = rng.gen_range(ry..side as f64 - ry);
            BinaryMask::from_fn(side, side, |x, y| {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            })
        }
    }
}

/// Deterministic for a given seed and parameters.
pub fn scene(seed: u64, params: &SceneParams) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = background(&mut rng, params.side);
    let mask = defect_mask(&mut rng, params);
    for (x, y) in mask.foreground() {
        image.put_pixel(x as u32, y as u32, Rgb(params.defect_color));
    }
    Scene { image, mask }
}

/// Writes `<root>/<product>/<class>/{images,masks}/NNN.png` for every
/// `(product, class, count)` entry. Each class gets its own seed stream.
pub fn write_dataset(
    root: &Path,
    layout: &[(&str, &str, usize)],
    seed: u64,
    params: &SceneParams,
) -> Result<()> {
    for (ci, &(product, class, count)) in layout.iter().enumerate() {
        let dir = root.join(product).join(class);
        let images = dir.join("images");
        let masks = dir.join("masks");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
        for i in 0..count {
            let s = scene(seed.wrapping_mul(1_000_003).wrapping_add((ci * 10_007 + i) as u64), params);
            let name = format!("{i:03}.png");
            let path = images.join(&name);
            s.image.save(&path).map_err(|e| Error::image(&path, e))?;
            s.mask.save(&masks.join(&name))?;
        }
    }
    Ok(())
}
