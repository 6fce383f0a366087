//! Image augmentations on `[H×W×C]` tensors: random resized crop and
//! horizontal/vertical flips. Positional labels stay in the raster frame
//! of the augmented image; only the content moves.

use rand::Rng as _;

use crate::config::Augmentation;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

fn dims3(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::dim(format!("expected an H×W×C image, got shape {s:?}"))),
    }
}

/// Mirrors columns.
pub fn hflip(image: &Tensor) -> Result<Tensor> {
    let (h, w, c) = dims3(image)?;
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for r in 0..h {
        for col in 0..w {
            let from = (r * w + (w - 1 - col)) * c;
            let to = (r * w + col) * c;
            out[to..to + c].copy_from_slice(&src[from..from + c]);
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Mirrors rows.
pub fn vflip(image: &Tensor) -> Result<Tensor> {
    let (h, w, c) = dims3(image)?;
    let src = image.data();
    let stride = w * c;
    let mut out = Vec::with_capacity(src.len());
    for r in (0..h).rev() {
        out.extend_from_slice(&src[r * stride..(r + 1) * stride]);
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Bilinear resample of the window `(top, left, height, width)` back to the full image size.
pub fn crop_resize(image: &Tensor, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor> {
    let (h, w, c) = dims3(image)?;
    if height == 0 || width == 0 || top + height > h || left + width > w {
        return Err(Error::dim(format!("crop {height}×{width} at ({top}, {left}) outside {h}×{w}")));
    }
    let src = image.data();
    let at = |r: usize, col: usize, ch: usize| src[((top + r) * w + left + col) * c + ch];
    let sy = height as f64 / h as f64;
    let sx = width as f64 / w as f64;
    let mut out = vec![0.0; src.len()];
    for r in 0..h {
        let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (height - 1) as f64);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(height - 1);
        let fy = y - y0 as f64;
        for col in 0..w {
            let x = ((col as f64 + 0.5) * sx - 0.5).clamp(0.0, (width - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(width - 1);
            let fx = x - x0 as f64;
            for ch in 0..c {
                let top_row = at(y0, x0, ch) * (1.0 - fx) + at(y0, x1, ch) * fx;
                let bottom_row = at(y1, x0, ch) * (1.0 - fx) + at(y1, x1, ch) * fx;
                out[(r * w + col) * c + ch] = top_row * (1.0 - fy) + bottom_row * fy;
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Crop covering a random area fraction in `[0.6, 1]` with aspect ratio in
/// `[3/4, 4/3]` (log-uniform), resized back to the input size.
pub fn random_resized_crop(image: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    let (h, w, _) = dims3(image)?;
    let area = (h * w) as f64;
    for _ in 0..10 {
        let scale = rng.gen_range(0.6..=1.0);
        let log_ratio = rng.gen_range((0.75f64).ln()..=(4.0f64 / 3.0).ln());
        let ratio = log_ratio.exp();
        let cw = (scale * area * ratio).sqrt().round() as usize;
        let ch = (scale * area / ratio).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.gen_range(0..=h - ch);
            let left = rng.gen_range(0..=w - cw);
            return crop_resize(image, top, left, ch, cw);
        }
    }
    Ok(image.clone())
}

/// Applies the enabled augmentations in the order crop, hflip, vflip.
/// Each flip fires with probability 1/2.
pub fn augment(image: &Tensor, flags: &[Augmentation], rng: &mut Rng) -> Result<Tensor> {
    let mut out = image.clone();
    if flags.contains(&Augmentation::Crop) {
        out = random_resized_crop(&out, rng)?;
    }
    if flags.contains(&Augmentation::Hflip) && rng.gen_bool(0.5) {
        out = hflip(&out)?;
    }
    if flags.contains(&Augmentation::Vflip) && rng.gen_bool(0.5) {
        out = vflip(&out)?;
    }
    Ok(out)
}
