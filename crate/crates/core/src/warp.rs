//! Inverse (sampling) and forward (splatting) warps of images, depths and masks.

use nalgebra::Vector3;

use crate::error::{ensure_same_shape, Error, Result};
use crate::geometry::{Intrinsics, PointCloud, PoseSE3, RigidTransform, EDGE_EPS, MIN_DEPTH};
use crate::raster::{BinaryMask, DepthMap, Image, Raster};

/// Four bilinear taps with weights and weight derivatives.
///
/// Tap order is `(x0,y0), (x1,y0), (x0,y1), (x1,y1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Bilinear {
    pub idx: [usize; 4],
    pub w: [f64; 4],
    pub dw_du: [f64; 4],
    pub dw_dv: [f64; 4],
}

impl Bilinear {
    /// Bilinear weights of `(u, v)` relative to the cell anchored at `(x0, y0)`.
    ///
    /// Coordinates outside the cell extrapolate linearly, which keeps the
    /// sample a smooth function of `(u, v)` once the cell is fixed.
    pub fn in_cell(u: f64, v: f64, x0: usize, y0: usize, width: usize, height: usize) -> Self {
        let x1 = (x0 + 1).min(width - 1);
        let y1 = (y0 + 1).min(height - 1);
        let fx = if x1 == x0 { 0.0 } else { u - x0 as f64 };
        let fy = if y1 == y0 { 0.0 } else { v - y0 as f64 };
        let (gx, gy) = (if x1 == x0 { 0.0 } else { 1.0 }, if y1 == y0 { 0.0 } else { 1.0 });
        Bilinear {
            idx: [y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1],
            w: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
            dw_du: [-gx * (1.0 - fy), gx * (1.0 - fy), -gx * fy, gx * fy],
            dw_dv: [-gy * (1.0 - fx), -gy * fx, gy * (1.0 - fx), gy * fx],
        }
    }

    /// Standard bilinear taps, `None` outside `[0, W-1] x [0, H-1]`.
    pub fn at(u: f64, v: f64, width: usize, height: usize) -> Option<Self> {
        let (wm, hm) = ((width - 1) as f64, (height - 1) as f64);
        if !(u >= -EDGE_EPS && v >= -EDGE_EPS && u <= wm + EDGE_EPS && v <= hm + EDGE_EPS) {
            return None;
        }
        let (u, v) = (u.clamp(0.0, wm), v.clamp(0.0, hm));
        let x0 = (u.floor() as usize).min(width.saturating_sub(2));
        let y0 = (v.floor() as usize).min(height.saturating_sub(2));
        Some(Self::in_cell(u, v, x0, y0, width, height))
    }

    /// True when every tap carrying positive weight satisfies `ok`.
    pub fn all_weighted(&self, mut ok: impl FnMut(usize) -> bool) -> bool {
        (0..4).all(|i| self.w[i] <= 0.0 || ok(self.idx[i]))
    }

    pub fn sample<R: Raster + ?Sized>(&self, src: &R, c: usize) -> f64 {
        (0..4).map(|i| self.w[i] * src.value(self.idx[i], c)).sum()
    }

    pub fn sample_slice(&self, values: &[f64]) -> f64 {
        (0..4).map(|i| self.w[i] * values[self.idx[i]]).sum()
    }

    /// Spatial derivatives `(d/du, d/dv)` of the sample.
    pub fn gradient_slice(&self, values: &[f64]) -> (f64, f64) {
        let mut du = 0.0;
        let mut dv = 0.0;
        for i in 0..4 {
            du += self.dw_du[i] * values[self.idx[i]];
            dv += self.dw_dv[i] * values[self.idx[i]];
        }
        (du, dv)
    }
}

/// A warped raster with a per-pixel validity mask.
///
/// Invalid pixels (out of view, holes, bad depth) carry value 0.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult {
    width: usize,
    height: usize,
    channels: usize,
    values: Vec<f64>,
    valid: BinaryMask,
}

impl WarpResult {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, x: usize, y: usize, c: usize) -> f64 {
        self.values[(y * self.width + x) * self.channels + c]
    }

    pub fn validity(&self) -> &BinaryMask {
        &self.valid
    }

    pub fn hole_fraction(&self) -> f64 {
        hole_fraction(&self.valid)
    }

    pub fn to_image(&self) -> Image {
        Image::from_raw(self.width, self.height, self.channels, self.values.clone())
    }

    /// First channel as a depth map; invalid pixels stay invalid.
    pub fn to_depth(&self) -> DepthMap {
        let values = (0..self.width * self.height)
            .map(|i| self.values[i * self.channels])
            .collect();
        DepthMap::with_validity(self.width, self.height, values, self.valid.data().to_vec())
    }

    /// First channel rounded up to `{0, 1}`; invalid pixels are 0.
    pub fn to_mask_ceil(&self) -> BinaryMask {
        let data = (0..self.width * self.height)
            .map(|i| self.valid.data()[i] && self.values[i * self.channels] > 0.0)
            .collect();
        BinaryMask::from_vec(self.width, self.height, data).expect("shape is consistent")
    }
}

/// Fraction of pixels that are not valid.
pub fn hole_fraction(valid: &BinaryMask) -> f64 {
    if valid.is_empty() {
        return 0.0;
    }
    1.0 - valid.count() as f64 / valid.len() as f64
}

/// Samples `src` at the projection of each target pixel moved by `pose_tgt_to_src`.
pub fn inverse_warp<S: Raster>(
    src: &S,
    depth_tgt: &DepthMap,
    pose_tgt_to_src: &PoseSE3,
    k: &Intrinsics,
) -> Result<WarpResult> {
    inverse_warp_transform(src, depth_tgt, &pose_tgt_to_src.to_transform(), k)
}

/// [`inverse_warp`] with an arbitrary rigid transform.
pub fn inverse_warp_transform<S: Raster>(
    src: &S,
    depth_tgt: &DepthMap,
    t: &RigidTransform,
    k: &Intrinsics,
) -> Result<WarpResult> {
    let dims = (src.width(), src.height());
    ensure_same_shape("inverse_warp source vs intrinsics", dims, k.dims())?;
    ensure_same_shape("inverse_warp depth vs intrinsics", depth_tgt.dims(), k.dims())?;
    let (w, h) = k.dims();
    let ch = src.channels();
    let mut values = vec![0.0; w * h * ch];
    let mut valid = BinaryMask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !depth_tgt.is_valid(i) {
                continue;
            }
            let p = t.apply(&(k.ray(x as f64, y as f64) * depth_tgt.values()[i]));
            let Some((u, v)) = k.project_point(&p) else {
                continue;
            };
            let Some(b) = Bilinear::at(u, v, w, h) else {
                continue;
            };
            if !b.all_weighted(|j| src.is_valid(j)) {
                continue;
            }
            for c in 0..ch {
                values[i * ch + c] = b.sample(src, c);
            }
            valid.set_index(i, true);
        }
    }
    Ok(WarpResult {
        width: w,
        height: h,
        channels: ch,
        values,
        valid,
    })
}

/// Parameters of the splatting rasterizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatConfig {
    /// Integer upsampling factor of the source grid.
    pub alpha: usize,
    /// Relative depth band treated as a tie by the z-buffer. Within the band
    /// the splat landing closest to the pixel centre wins; 0 gives a strict
    /// nearest-depth rule.
    pub tie_tolerance: f64,
    /// Max/min depth ratio among interpolation taps above which upsampling
    /// snaps to the dominant tap instead of blending across a discontinuity.
    pub discontinuity_ratio: f64,
}

impl Default for SplatConfig {
    fn default() -> Self {
        Self {
            alpha: 2,
            tie_tolerance: 0.05,
            discontinuity_ratio: 1.1,
        }
    }
}

impl SplatConfig {
    pub fn with_alpha(alpha: usize) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }
}

/// Interpolation taps of one upsampled source sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct UpTaps {
    pub idx: [usize; 4],
    pub w: [f64; 4],
    pub n: usize,
}

impl UpTaps {
    pub fn sample(&self, values: &[f64]) -> f64 {
        (0..self.n).map(|i| self.w[i] * values[self.idx[i]]).sum()
    }

    pub fn sample_image(&self, img: &Image, c: usize) -> f64 {
        (0..self.n).map(|i| self.w[i] * img.value(self.idx[i], c)).sum()
    }
}

/// Winner of the z-buffer at one target pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Splatted {
    pub taps: UpTaps,
    pub point: Vector3<f64>,
    dist2: f64,
}

/// Target-grid assignment of upsampled source samples.
#[derive(Debug, Clone)]
pub(crate) struct Splat {
    width: usize,
    height: usize,
    pub winners: Vec<Option<Splatted>>,
}

/// Guarded bilinear taps of the source depth at `(u, v)`.
fn upsample_taps(depth: &DepthMap, u: f64, v: f64, ratio: f64) -> Option<(UpTaps, f64)> {
    let (w, h) = depth.dims();
    let b = Bilinear::at(u.min((w - 1) as f64), v.min((h - 1) as f64), w, h)?;
    let mut taps = UpTaps {
        idx: [0; 4],
        w: [0.0; 4],
        n: 0,
    };
    let mut total = 0.0;
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    let mut best = None::<(usize, f64)>;
    for i in 0..4 {
        let j = b.idx[i];
        if b.w[i] <= 0.0 || !depth.is_valid(j) {
            continue;
        }
        // Identical indices appear on the last row/column.
        if let Some(k) = taps.idx[..taps.n].iter().position(|&q| q == j) {
            taps.w[k] += b.w[i];
        } else {
            taps.idx[taps.n] = j;
            taps.w[taps.n] = b.w[i];
            taps.n += 1;
        }
        total += b.w[i];
        let d = depth.values()[j];
        lo = lo.min(d);
        hi = hi.max(d);
    }
    if taps.n == 0 {
        return None;
    }
    for k in 0..taps.n {
        if best.is_none_or(|(_, bw)| taps.w[k] > bw) {
            best = Some((k, taps.w[k]));
        }
    }
    if hi > lo * ratio {
        let (k, _) = best.expect("at least one tap");
        taps = UpTaps {
            idx: [taps.idx[k], 0, 0, 0],
            w: [1.0, 0.0, 0.0, 0.0],
            n: 1,
        };
    } else {
        for k in 0..taps.n {
            taps.w[k] /= total;
        }
    }
    let d = taps.sample(depth.values());
    Some((taps, d))
}

impl Splat {
    /// Splats every upsampled source sample moved by `t` into the target grid.
    pub fn new(depth: &DepthMap, t: &RigidTransform, k: &Intrinsics, cfg: &SplatConfig) -> Result<Self> {
        if cfg.alpha < 1 {
            return Err(Error::InvalidArgument("upsampling factor must be >= 1".into()));
        }
        ensure_same_shape("forward_warp depth vs intrinsics", depth.dims(), k.dims())?;
        let (w, h) = k.dims();
        let a = cfg.alpha as f64;
        let mut winners: Vec<Option<Splatted>> = vec![None; w * h];
        for vy in 0..h * cfg.alpha {
            let v = vy as f64 / a;
            for ux in 0..w * cfg.alpha {
                let u = ux as f64 / a;
                let Some((taps, d)) = upsample_taps(depth, u, v, cfg.discontinuity_ratio) else {
                    continue;
                };
                let p = t.apply(&(k.ray(u, v) * d));
                if !(p.z > MIN_DEPTH) {
                    continue;
                }
                let (pu, pv) = k.project_raw(&p);
                let (tx, ty) = (pu.round(), pv.round());
                if !(tx >= 0.0 && ty >= 0.0 && tx < w as f64 && ty < h as f64) {
                    continue;
                }
                let i = ty as usize * w + tx as usize;
                let dist2 = (pu - tx).powi(2) + (pv - ty).powi(2);
                let cand = Splatted { taps, point: p, dist2 };
                let slot = &mut winners[i];
                let take = match slot {
                    None => true,
                    Some(cur) => {
                        if p.z < cur.point.z * (1.0 - cfg.tie_tolerance) {
                            true
                        } else if p.z <= cur.point.z * (1.0 + cfg.tie_tolerance) {
                            dist2 < cur.dist2 || (dist2 == cur.dist2 && p.z < cur.point.z)
                        } else {
                            false
                        }
                    }
                };
                if take {
                    *slot = Some(cand);
                }
            }
        }
        Ok(Self {
            width: w,
            height: h,
            winners,
        })
    }

    pub fn validity(&self) -> BinaryMask {
        let data = self.winners.iter().map(Option::is_some).collect();
        BinaryMask::from_vec(self.width, self.height, data).expect("shape is consistent")
    }

    pub fn image(&self, src: &Image) -> Result<Image> {
        ensure_same_shape("forward_warp image", src.dims(), (self.width, self.height))?;
        let ch = src.channels();
        let mut out = Image::new(self.width, self.height, ch);
        for (i, s) in self.winners.iter().enumerate() {
            if let Some(s) = s {
                for c in 0..ch {
                    out.pixel_mut(i)[c] = s.taps.sample_image(src, c);
                }
            }
        }
        Ok(out)
    }

    pub fn depth(&self) -> DepthMap {
        let values = self.winners.iter().map(|s| s.map_or(0.0, |s| s.point.z)).collect();
        let valid = self.winners.iter().map(Option::is_some).collect();
        DepthMap::with_validity(self.width, self.height, values, valid)
    }

    /// Splatted mask, rounded up so any covered fraction becomes 1.
    pub fn mask(&self, src: &BinaryMask) -> Result<BinaryMask> {
        ensure_same_shape("forward_warp mask", src.dims(), (self.width, self.height))?;
        let data = self
            .winners
            .iter()
            .map(|s| s.is_some_and(|s| (0..s.taps.n).any(|k| s.taps.w[k] > 0.0 && src.data()[s.taps.idx[k]])))
            .collect();
        BinaryMask::from_vec(self.width, self.height, data)
    }

    pub fn points(&self) -> PointCloud {
        let points = self
            .winners
            .iter()
            .map(|s| s.map_or(Vector3::zeros(), |s| s.point))
            .collect();
        let valid = self.winners.iter().map(Option::is_some).collect();
        PointCloud::new(self.width, self.height, points, valid)
    }
}

/// Output of [`forward_warp`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardWarp {
    pub image: Image,
    /// Camera-frame depth of each splatted point after the transform.
    pub depth: DepthMap,
    /// Transformed 3D points of the splatted samples.
    pub points: PointCloud,
    /// Pixels that received a splat; the rest are holes.
    pub valid: BinaryMask,
}

impl ForwardWarp {
    pub fn hole_fraction(&self) -> f64 {
        hole_fraction(&self.valid)
    }
}

/// Splats `src` into the target view given source depth and the source-to-target pose.
pub fn forward_warp(
    src: &Image,
    depth_ref: &DepthMap,
    pose_ref_to_tgt: &PoseSE3,
    k: &Intrinsics,
    alpha: usize,
) -> Result<ForwardWarp> {
    forward_warp_with(
        src,
        depth_ref,
        &pose_ref_to_tgt.to_transform(),
        k,
        &SplatConfig::with_alpha(alpha),
    )
}

/// [`forward_warp`] with an arbitrary transform and rasterizer settings.
pub fn forward_warp_with(
    src: &Image,
    depth_ref: &DepthMap,
    t: &RigidTransform,
    k: &Intrinsics,
    cfg: &SplatConfig,
) -> Result<ForwardWarp> {
    ensure_same_shape("forward_warp image vs depth", src.dims(), depth_ref.dims())?;
    let splat = Splat::new(depth_ref, t, k, cfg)?;
    Ok(ForwardWarp {
        image: splat.image(src)?,
        depth: splat.depth(),
        points: splat.points(),
        valid: splat.validity(),
    })
}

/// Splats a binary mask; returns the rounded-up mask and the splat validity.
pub fn forward_warp_mask(
    mask: &BinaryMask,
    depth_ref: &DepthMap,
    pose_ref_to_tgt: &PoseSE3,
    k: &Intrinsics,
    alpha: usize,
) -> Result<(BinaryMask, BinaryMask)> {
    let splat = Splat::new(
        depth_ref,
        &pose_ref_to_tgt.to_transform(),
        k,
        &SplatConfig::with_alpha(alpha),
    )?;
    Ok((splat.mask(mask)?, splat.validity()))
}

/// Depth of every pixel after moving its 3D point by `pose`, on the input grid.
pub fn scale_consistent_depth(depth: &DepthMap, pose: &PoseSE3, k: &Intrinsics) -> Result<DepthMap> {
    scale_consistent_depth_transform(depth, &pose.to_transform(), k)
}

pub fn scale_consistent_depth_transform(depth: &DepthMap, t: &RigidTransform, k: &Intrinsics) -> Result<DepthMap> {
    ensure_same_shape("scale_consistent_depth", depth.dims(), k.dims())?;
    let (w, h) = depth.dims();
    let mut values = vec![0.0; w * h];
    let mut valid = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !depth.is_valid(i) {
                continue;
            }
            let z = t.apply(&(k.ray(x as f64, y as f64) * depth.values()[i])).z;
            if z > MIN_DEPTH {
                values[i] = z;
                valid[i] = true;
            }
        }
    }
    Ok(DepthMap::with_validity(w, h, values, valid))
}
