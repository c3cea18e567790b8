//! Blurred and subsampled copies of a frame pair for coarse-to-fine fitting.

use image::{ImageBuffer, Luma};

use crate::error::Result;
use crate::geometry::Intrinsics;
use crate::instance::{InstanceMaskSet, ScenePair};
use crate::raster::{BinaryMask, DepthMap, Image};

/// Gaussian blur of every channel; `sigma` in pixels, 0 returns a copy.
pub(crate) fn blur_image(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let (w, h) = img.dims();
    let ch = img.channels();
    let mut out = img.clone();
    for c in 0..ch {
        let data: Vec<f32> = img.channel(c).data().iter().map(|&v| v as f32).collect();
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(w as u32, h as u32, data).expect("buffer matches dimensions");
        let blurred = image::imageops::blur(&buf, sigma as f32);
        for (i, p) in blurred.pixels().enumerate() {
            out.pixel_mut(i)[c] = f64::from(p.0[0]);
        }
    }
    out
}

/// Keeps every `step`-th pixel starting at 0.
fn subsample_dims(w: usize, h: usize, step: usize) -> (usize, usize) {
    ((w - 1) / step + 1, (h - 1) / step + 1)
}

fn subsample_image(img: &Image, step: usize) -> Image {
    let (w, h) = img.dims();
    let (nw, nh) = subsample_dims(w, h, step);
    Image::from_fn(nw, nh, img.channels(), |x, y, c| img.get(x * step, y * step, c))
}

fn subsample_depth(d: &DepthMap, step: usize) -> DepthMap {
    let (w, h) = d.dims();
    let (nw, nh) = subsample_dims(w, h, step);
    let mut values = Vec::with_capacity(nw * nh);
    let mut valid = Vec::with_capacity(nw * nh);
    for y in 0..nh {
        for x in 0..nw {
            let i = y * step * w + x * step;
            values.push(d.values()[i]);
            valid.push(d.is_valid(i));
        }
    }
    DepthMap::with_validity(nw, nh, values, valid)
}

fn subsample_masks(m: &InstanceMaskSet, step: usize) -> Result<InstanceMaskSet> {
    let (w, h) = m.dims();
    let (nw, nh) = subsample_dims(w, h, step);
    let mut out = InstanceMaskSet::new(nw, nh);
    for inst in m.iter() {
        let mask = BinaryMask::from_fn(nw, nh, |x, y| inst.mask.get(x * step, y * step));
        if mask.count() > 0 {
            out.insert(inst.id, inst.category, mask)?;
        }
    }
    Ok(out)
}

/// The pair at subsampling factor `2^level` with both images blurred by
/// `blur` full-resolution pixels beforehand. Pixel `x` of the result is
/// pixel `2^level * x` of the input, so intrinsics scale by `2^-level`.
pub(crate) fn stage_pair(pair: &ScenePair, level: u32, blur: f64) -> Result<ScenePair> {
    let step = 1usize << level;
    let i1 = blur_image(&pair.i1, blur);
    let i2 = blur_image(&pair.i2, blur);
    if step == 1 {
        return ScenePair::new(
            i1,
            i2,
            pair.d1.clone(),
            pair.d2.clone(),
            pair.m1.clone(),
            pair.m2.clone(),
            pair.k,
        );
    }
    let k = &pair.k;
    let (nw, nh) = subsample_dims(k.width, k.height, step);
    let s = step as f64;
    let k = Intrinsics::new(k.fx / s, k.fy / s, k.cx / s, k.cy / s, nw, nh)?;
    ScenePair::new(
        subsample_image(&i1, step),
        subsample_image(&i2, step),
        subsample_depth(&pair.d1, step),
        subsample_depth(&pair.d2, step),
        subsample_masks(&pair.m1, step)?,
        subsample_masks(&pair.m2, step)?,
        k,
    )
}
