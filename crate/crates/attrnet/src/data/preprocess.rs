//! The image pipeline: bbox crop with margin, resize to a canonical size,
//! training-mean subtraction, and random-crop/flip augmentation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{DatasetRecord, ImageBuf};

/// Fraction of the bbox width/height added on each side when cropping.
pub const DEFAULT_BBOX_MARGIN: f64 = 0.10;

/// Crop a record to its bounding box expanded by `margin` of the bbox
/// width/height on each side, clamped to the image. The window always
/// contains the original bbox.
pub fn crop_bbox_margin(record: &DatasetRecord, margin: f64) -> Result<ImageBuf> {
    let bbox = record
        .bbox
        .ok_or_else(|| Error::Parameter(format!("record {} has no bbox", record.image_id)))?;
    let img = &record.pixels;
    let mx = margin * bbox.width() as f64;
    let my = margin * bbox.height() as f64;
    let x0 = (bbox.x0 as f64 - mx).floor().max(0.0) as u32;
    let y0 = (bbox.y0 as f64 - my).floor().max(0.0) as u32;
    let x1 = (bbox.x1 as f64 + mx).ceil().min(img.width() as f64) as u32;
    let y1 = (bbox.y1 as f64 + my).ceil().min(img.height() as f64) as u32;
    img.crop(x0, y0, x1, y1)
}

/// Resize to `canonical x canonical` and subtract the per-channel training
/// mean, producing a channel-first `3 x canonical x canonical` tensor.
pub fn preprocess(pixels: &ImageBuf, canonical: u32, mean_rgb: [f64; 3]) -> Result<Tensor<f32>> {
    if canonical == 0 {
        return Err(Error::Parameter("canonical size must be positive".into()));
    }
    let resized = pixels.resize_bilinear(canonical, canonical)?;
    let n = (canonical * canonical) as usize;
    let mut data = vec![0.0f32; 3 * n];
    for (i, px) in resized.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + i] = (px[c] as f64 - mean_rgb[c]) as f32;
        }
    }
    Tensor::new(vec![3, canonical as usize, canonical as usize], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    /// Uniform random crop offset plus a coin-flip horizontal mirror.
    Train,
    /// Deterministic centre crop, no mirror.
    Eval,
}

/// Crop a `3 x s x s` tensor to `3 x crop x crop` per the augmentation
/// policy. Labels are untouched by construction; augmentation sees pixels
/// only.
pub fn augment<E: Scalar, R: Rng>(
    input: &Tensor<E>,
    crop: u32,
    mode: AugmentMode,
    rng: &mut R,
) -> Result<Tensor<E>> {
    let crop = crop as usize;
    let (c, h, w) = match input.shape() {
        [c, h, w] => (*c, *h, *w),
        other => {
            return Err(Error::Dimension(format!(
                "augment expects a c x h x w tensor, got {other:?}"
            )))
        }
    };
    if crop > h || crop > w {
        return Err(Error::Parameter(format!(
            "crop {crop} exceeds input {h}x{w}"
        )));
    }
    let (ox, oy, flip) = match mode {
        AugmentMode::Train => {
            let ox = rng.gen_range(0..=(w - crop));
            let oy = rng.gen_range(0..=(h - crop));
            (ox, oy, rng.gen::<f64>() < 0.5)
        }
        AugmentMode::Eval => ((w - crop) / 2, (h - crop) / 2, false),
    };
    let src = input.data();
    let mut data = vec![E::ZERO; c * crop * crop];
    for ch in 0..c {
        for y in 0..crop {
            let src_row = (ch * h + oy + y) * w + ox;
            let dst_row = (ch * crop + y) * crop;
            if flip {
                for x in 0..crop {
                    data[dst_row + x] = src[src_row + crop - 1 - x];
                }
            } else {
                data[dst_row..dst_row + crop].copy_from_slice(&src[src_row..src_row + crop]);
            }
        }
    }
    Tensor::new(vec![c, crop, crop], data)
}

/// Pixel-weighted per-channel mean over a set of images (the training set,
/// after whatever cropping the run uses).
pub fn compute_mean_rgb<'a>(images: impl IntoIterator<Item = &'a ImageBuf>) -> Result<[f64; 3]> {
    let mut sums = [0.0f64; 3];
    let mut count = 0u64;
    for img in images {
        for px in img.data().chunks_exact(3) {
            for c in 0..3 {
                sums[c] += px[c] as f64;
            }
        }
        count += (img.width() * img.height()) as u64;
    }
    if count == 0 {
        return Err(Error::Parameter(
            "mean RGB needs at least one training image".into(),
        ));
    }
    Ok([
        sums[0] / count as f64,
        sums[1] / count as f64,
        sums[2] / count as f64,
    ])
}
