//! Photometric, geometric, smoothness, translation and height objectives.

mod ssim;

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_shape, Error, Result};
use crate::geometry::PointCloud;
use crate::instance::InstanceMaskSet;
use crate::raster::{BinaryMask, DepthMap, Image, InconsistencyMap, ScalarMap};

pub use ssim::SsimParams;
pub(crate) use ssim::{ssim_channel, ssim_channel_grad_b};

/// Loss weights and photometric settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_r: f64,
    pub lambda_g: f64,
    pub lambda_s: f64,
    pub lambda_t: f64,
    pub lambda_h: f64,
    /// Weight of the SSIM term inside the reconstruction error.
    pub gamma: f64,
    pub ssim_window: usize,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let s = SsimParams::default();
        Self {
            lambda_r: 1.0,
            lambda_g: 0.5,
            lambda_s: 0.05,
            lambda_t: 0.1,
            lambda_h: 0.001,
            gamma: 0.8,
            ssim_window: s.window,
            ssim_c1: s.c1,
            ssim_c2: s.c2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            self.lambda_r,
            self.lambda_g,
            self.lambda_s,
            self.lambda_t,
            self.lambda_h,
        ];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::InvalidArgument(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument("gamma must lie in [0, 1]".into()));
        }
        if self.ssim_window == 0 || self.ssim_window.is_multiple_of(2) {
            return Err(Error::InvalidArgument("SSIM window must be odd".into()));
        }
        if !(self.ssim_c1 > 0.0 && self.ssim_c2 > 0.0) {
            return Err(Error::InvalidArgument("SSIM constants must be positive".into()));
        }
        Ok(())
    }

    pub fn ssim_params(&self) -> SsimParams {
        SsimParams {
            window: self.ssim_window,
            c1: self.ssim_c1,
            c2: self.ssim_c2,
        }
    }

    pub fn weights(&self) -> [f64; 5] {
        [
            self.lambda_r,
            self.lambda_g,
            self.lambda_s,
            self.lambda_t,
            self.lambda_h,
        ]
    }
}

/// Unweighted loss terms of one direction (or their average).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_r: f64,
    pub l_g: f64,
    pub l_s: f64,
    pub l_t: f64,
    pub l_h: f64,
}

impl LossTerms {
    pub fn as_array(&self) -> [f64; 5] {
        [self.l_r, self.l_g, self.l_s, self.l_t, self.l_h]
    }

    pub fn average(a: &LossTerms, b: &LossTerms) -> LossTerms {
        LossTerms {
            l_r: 0.5 * (a.l_r + b.l_r),
            l_g: 0.5 * (a.l_g + b.l_g),
            l_s: 0.5 * (a.l_s + b.l_s),
            l_t: 0.5 * (a.l_t + b.l_t),
            l_h: 0.5 * (a.l_h + b.l_h),
        }
    }
}

/// Loss values with their weighted total, as serialized per evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_r: f64,
    pub l_g: f64,
    pub l_s: f64,
    pub l_t: f64,
    pub l_h: f64,
    pub total: f64,
    pub n_valid_px: usize,
    pub n_instances: usize,
}

impl LossBreakdown {
    pub fn new(terms: &LossTerms, cfg: &LossConfig, n_valid_px: usize, n_instances: usize) -> Self {
        Self {
            l_r: terms.l_r,
            l_g: terms.l_g,
            l_s: terms.l_s,
            l_t: terms.l_t,
            l_h: terms.l_h,
            total: total_loss(terms, cfg),
            n_valid_px,
            n_instances,
        }
    }

    /// Averages the two frame directions before weighting.
    pub fn bidirectional(
        forward: &LossTerms,
        backward: &LossTerms,
        cfg: &LossConfig,
        n_valid_px: usize,
        n_instances: usize,
    ) -> Self {
        Self::new(&LossTerms::average(forward, backward), cfg, n_valid_px, n_instances)
    }

    pub fn terms(&self) -> LossTerms {
        LossTerms {
            l_r: self.l_r,
            l_g: self.l_g,
            l_s: self.l_s,
            l_t: self.l_t,
            l_h: self.l_h,
        }
    }
}

/// Weighted sum of the five terms.
pub fn total_loss(terms: &LossTerms, cfg: &LossConfig) -> f64 {
    terms.as_array().iter().zip(cfg.weights()).map(|(l, w)| l * w).sum()
}

/// Local SSIM averaged over channels.
pub fn ssim_map(a: &Image, b: &Image, params: &SsimParams) -> Result<ScalarMap> {
    ensure_same_shape("ssim_map", a.dims(), b.dims())?;
    if a.channels() != b.channels() {
        return Err(Error::ShapeMismatch("ssim_map channel counts differ".into()));
    }
    let (w, h) = a.dims();
    let ch = a.channels();
    let mut out = vec![0.0; w * h];
    for c in 0..ch {
        let s = ssim_channel(a.channel(c).data(), b.channel(c).data(), w, h, params);
        for (o, v) in out.iter_mut().zip(s) {
            *o += v / ch as f64;
        }
    }
    Ok(ScalarMap::from_vec(w, h, out))
}

/// Channel-mean absolute difference per pixel.
pub fn l1_map(a: &Image, b: &Image) -> Result<ScalarMap> {
    ensure_same_shape("l1_map", a.dims(), b.dims())?;
    if a.channels() != b.channels() {
        return Err(Error::ShapeMismatch("l1_map channel counts differ".into()));
    }
    let (w, h) = a.dims();
    let ch = a.channels();
    let data = (0..w * h)
        .map(|i| {
            a.pixel(i)
                .iter()
                .zip(b.pixel(i))
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
                / ch as f64
        })
        .collect();
    Ok(ScalarMap::from_vec(w, h, data))
}

/// A normalized weighted loss, flagged when no pixel carried weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedLoss {
    pub value: f64,
    pub degenerate: bool,
}

/// Reconstruction loss from precomputed L1 and SSIM maps.
pub fn reconstruction_loss_from_maps(
    l1: &ScalarMap,
    ssim: &ScalarMap,
    v: &ScalarMap,
    gamma: f64,
) -> Result<WeightedLoss> {
    ensure_same_shape("reconstruction L1 vs SSIM", l1.dims(), ssim.dims())?;
    ensure_same_shape("reconstruction weights", v.dims(), l1.dims())?;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..v.data().len() {
        let e = (1.0 - gamma) * l1.data()[i] + gamma * (1.0 - ssim.data()[i]);
        num += v.data()[i] * e;
        den += v.data()[i];
    }
    if den <= 0.0 {
        return Ok(WeightedLoss {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(WeightedLoss {
        value: num / den,
        degenerate: false,
    })
}

/// `sum V * ((1-g)|I2 - Î| + g(1 - SSIM)) / sum V`.
pub fn reconstruction_loss(
    i2: &Image,
    ihat: &Image,
    v: &ScalarMap,
    gamma: f64,
    params: &SsimParams,
) -> Result<WeightedLoss> {
    let l1 = l1_map(i2, ihat)?;
    let s = ssim_map(i2, ihat, params)?;
    reconstruction_loss_from_maps(&l1, &s, v, gamma)
}

/// Mean inconsistency over the valid mask.
pub fn geometric_loss(valid_mask: &BinaryMask, ddiff: &InconsistencyMap) -> Result<f64> {
    ensure_same_shape("geometric_loss", valid_mask.dims(), ddiff.dims())?;
    let mut num = 0.0;
    let mut den = 0usize;
    for i in 0..valid_mask.len() {
        if valid_mask.data()[i] && ddiff.is_valid(i) {
            num += ddiff.values()[i];
            den += 1;
        }
    }
    Ok(if den == 0 { 0.0 } else { num / den as f64 })
}

/// Channel-mean absolute intensity difference between two pixels.
#[inline]
pub(crate) fn intensity_step(img: &Image, i: usize, j: usize) -> f64 {
    let ch = img.channels();
    img.pixel(i)
        .iter()
        .zip(img.pixel(j))
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / ch as f64
}

/// Neighbouring pixel pairs used by the smoothness term, with edge weights.
pub(crate) struct SmoothnessPairs {
    /// `(i, j, weight, normalizer)` for each horizontal and vertical pair.
    pub pairs: Vec<(usize, usize, f64, f64)>,
}

impl SmoothnessPairs {
    pub fn new(depth: &DepthMap, img: &Image) -> Self {
        let (w, h) = depth.dims();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !depth.is_valid(i) {
                    continue;
                }
                if x + 1 < w && depth.is_valid(i + 1) {
                    xs.push((i, i + 1, (-intensity_step(img, i, i + 1)).exp()));
                }
                if y + 1 < h && depth.is_valid(i + w) {
                    ys.push((i, i + w, (-intensity_step(img, i, i + w)).exp()));
                }
            }
        }
        let (nx, ny) = (xs.len().max(1) as f64, ys.len().max(1) as f64);
        let pairs = xs
            .into_iter()
            .map(|(i, j, e)| (i, j, e, nx))
            .chain(ys.into_iter().map(|(i, j, e)| (i, j, e, ny)))
            .collect();
        Self { pairs }
    }

    pub fn loss(&self, d: &[f64]) -> f64 {
        self.pairs
            .iter()
            .map(|&(i, j, e, n)| ((d[j] - d[i]) * e).powi(2) / n)
            .sum()
    }

    /// Accumulates `scale * dL/dD` into `grad`.
    pub fn backward(&self, d: &[f64], scale: f64, grad: &mut [f64]) {
        for &(i, j, e, n) in &self.pairs {
            let g = scale * 2.0 * (d[j] - d[i]) * e * e / n;
            grad[j] += g;
            grad[i] -= g;
        }
    }
}

/// Edge-aware smoothness: mean squared depth step, damped by image edges,
/// averaged separately over horizontal and vertical pairs.
pub fn smoothness_loss(depth: &DepthMap, img: &Image) -> Result<f64> {
    ensure_same_shape("smoothness_loss", depth.dims(), img.dims())?;
    Ok(SmoothnessPairs::new(depth, img).loss(depth.values()))
}

/// Mean of valid masked points; `None` when the mask selects no valid point.
pub fn masked_centroid(points: &PointCloud, mask: &BinaryMask) -> Option<Vector3<f64>> {
    let mut sum = Vector3::zeros();
    let mut n = 0usize;
    for ((p, &ok), &m) in points.points().iter().zip(points.validity()).zip(mask.data()) {
        if ok && m {
            sum += p;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Translation prior: target-frame centroid minus forward-warped centroid.
pub fn translation_prior(
    fw_points: &PointCloud,
    fw_mask: &BinaryMask,
    tgt_points: &PointCloud,
    tgt_mask: &BinaryMask,
) -> Result<Option<Vector3<f64>>> {
    ensure_same_shape("translation_prior clouds", fw_points.dims(), tgt_points.dims())?;
    ensure_same_shape("translation_prior fw mask", fw_mask.dims(), fw_points.dims())?;
    ensure_same_shape("translation_prior target mask", tgt_mask.dims(), tgt_points.dims())?;
    Ok(
        match (
            masked_centroid(tgt_points, tgt_mask),
            masked_centroid(fw_points, fw_mask),
        ) {
            (Some(t), Some(f)) => Some(t - f),
            _ => None,
        },
    )
}

/// Mean over instances of the L1 distance between translation and prior.
pub fn translation_loss(predicted: &[Vector3<f64>], priors: &[Vector3<f64>]) -> Result<f64> {
    if predicted.len() != priors.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} translations vs {} priors",
            predicted.len(),
            priors.len()
        )));
    }
    if predicted.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = predicted.iter().zip(priors).map(|(t, p)| (t - p).abs().sum()).sum();
    Ok(sum / predicted.len() as f64)
}

/// Bounds applied to every height prior (meters).
pub const HEIGHT_PRIOR_RANGE: (f64, f64) = (0.5, 5.0);

/// Metric object heights per category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeightPriors {
    pub per_category: BTreeMap<u32, f64>,
    /// Used for categories without an entry.
    pub default: f64,
}

impl Default for HeightPriors {
    fn default() -> Self {
        Self {
            per_category: BTreeMap::new(),
            default: 1.5,
        }
    }
}

impl HeightPriors {
    pub fn get(&self, category: u32) -> f64 {
        let p = self.per_category.get(&category).copied().unwrap_or(self.default);
        p.clamp(HEIGHT_PRIOR_RANGE.0, HEIGHT_PRIOR_RANGE.1)
    }

    pub fn set(&mut self, category: u32, value: f64) {
        self.per_category
            .insert(category, value.clamp(HEIGHT_PRIOR_RANGE.0, HEIGHT_PRIOR_RANGE.1));
    }
}

/// Per-instance data of the height term: masked pixel indices and the
/// depth implied by the prior, `fy * p_h / h`.
pub(crate) struct HeightTerm {
    pub category: u32,
    pub pixels: Vec<usize>,
    pub pixel_height: f64,
}

pub(crate) fn height_terms(depth: &DepthMap, masks: &InstanceMaskSet, ids: &[u32]) -> Vec<HeightTerm> {
    ids.iter()
        .filter_map(|&id| masks.get(id))
        .filter_map(|inst| {
            let h = inst.mask.pixel_height();
            let pixels: Vec<usize> = (0..inst.mask.len())
                .filter(|&i| inst.mask.data()[i] && depth.is_valid(i))
                .collect();
            (h > 0 && !pixels.is_empty()).then_some(HeightTerm {
                category: inst.category,
                pixels,
                pixel_height: h as f64,
            })
        })
        .collect()
}

/// Height-prior loss summed over all instances of `masks`.
pub fn height_loss(depth: &DepthMap, masks: &InstanceMaskSet, priors: &HeightPriors, fy: f64) -> Result<f64> {
    ensure_same_shape("height_loss", depth.dims(), masks.dims())?;
    let ids = masks.ids();
    let Some(dbar) = depth.valid_mean() else {
        return Ok(0.0);
    };
    let d = depth.values();
    Ok(height_terms(depth, masks, &ids)
        .iter()
        .map(|t| {
            let target = fy * priors.get(t.category) / t.pixel_height;
            let s: f64 = t.pixels.iter().map(|&i| (d[i] - target).abs()).sum();
            s / t.pixels.len() as f64 / dbar
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_weights() {
        let cfg = LossConfig::default();
        let ones = LossTerms {
            l_r: 1.0,
            l_g: 1.0,
            l_s: 1.0,
            l_t: 1.0,
            l_h: 1.0,
        };
        assert!((total_loss(&ones, &cfg) - 1.651).abs() < 1e-12);
        assert_eq!(total_loss(&LossTerms::default(), &cfg), 0.0);
        let no_g = LossConfig { lambda_g: 0.0, ..cfg };
        assert!((total_loss(&ones, &no_g) - 1.151).abs() < 1e-12);
        assert_eq!(cfg.gamma, 0.8);
    }

    #[test]
    fn breakdown_total_matches_weights() {
        let cfg = LossConfig::default();
        let a = LossTerms {
            l_r: 0.2,
            l_g: 0.1,
            l_s: 0.3,
            l_t: 0.05,
            l_h: 2.0,
        };
        let b = LossTerms { l_r: 0.4, ..a };
        let br = LossBreakdown::bidirectional(&a, &b, &cfg, 10, 1);
        assert!((br.l_r - 0.3).abs() < 1e-15);
        let expect = 0.3 + 0.5 * 0.1 + 0.05 * 0.3 + 0.1 * 0.05 + 0.001 * 2.0;
        assert!((br.total - expect).abs() < 1e-12);
        let json = serde_json::to_value(br).unwrap();
        for key in ["l_r", "l_g", "l_s", "l_t", "l_h", "total", "n_valid_px", "n_instances"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn ssim_identical_and_constant() {
        let p = SsimParams::default();
        let a = Image::from_fn(5, 4, 3, |x, y, c| ((x * 3 + y + c) % 7) as f64 / 7.0);
        let s = ssim_map(&a, &a, &p).unwrap();
        assert!(s.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let zero = Image::new(4, 4, 1);
        let one = Image::from_fn(4, 4, 1, |_, _, _| 1.0);
        let s = ssim_map(&zero, &one, &p).unwrap();
        let expect = (p.c1 * p.c2) / ((1.0 + p.c1) * p.c2);
        assert!(s.data().iter().all(|&v| (v - expect).abs() < 1e-15));
    }

    #[test]
    fn ssim_rejects_mismatch() {
        let p = SsimParams::default();
        assert!(ssim_map(&Image::new(2, 2, 1), &Image::new(3, 2, 1), &p).is_err());
    }

    #[test]
    fn reconstruction_loss_cases() {
        let p = SsimParams::default();
        let img = Image::from_fn(4, 3, 3, |x, y, c| ((x + y * 2 + c) % 5) as f64 / 5.0);
        let v = ScalarMap::from_vec(4, 3, vec![0.5; 12]);
        let l = reconstruction_loss(&img, &img, &v, 0.8, &p).unwrap();
        assert!(l.value.abs() < 1e-12 && !l.degenerate);

        let l1 = ScalarMap::from_vec(1, 1, vec![0.5]);
        let s = ScalarMap::from_vec(1, 1, vec![0.9]);
        let one = ScalarMap::from_vec(1, 1, vec![1.0]);
        let l = reconstruction_loss_from_maps(&l1, &s, &one, 0.8).unwrap();
        assert!((l.value - 0.18).abs() < 1e-12);

        let zero = ScalarMap::new(4, 3);
        let other = Image::new(4, 3, 3);
        let l = reconstruction_loss(&img, &other, &zero, 0.8, &p).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.degenerate);
    }

    #[test]
    fn geometric_loss_cases() {
        let d = InconsistencyMap::from_parts(2, 1, vec![0.2, 0.4], vec![true, true]);
        let all = BinaryMask::filled(2, 1, true);
        assert!((geometric_loss(&all, &d).unwrap() - 0.3).abs() < 1e-15);
        let first = BinaryMask::from_vec(2, 1, vec![true, false]).unwrap();
        assert!((geometric_loss(&first, &d).unwrap() - 0.2).abs() < 1e-15);
        let z = InconsistencyMap::from_parts(2, 1, vec![0.0, 0.0], vec![true, true]);
        assert_eq!(geometric_loss(&all, &z).unwrap(), 0.0);
    }

    #[test]
    fn smoothness_cases() {
        let img = Image::new(2, 1, 3);
        assert_eq!(smoothness_loss(&DepthMap::constant(2, 1, 3.0), &img).unwrap(), 0.0);
        let step = DepthMap::from_vec(2, 1, vec![1.0, 2.0]).unwrap();
        assert!((smoothness_loss(&step, &img).unwrap() - 1.0).abs() < 1e-15);
        let edge = Image::from_vec(2, 1, 1, vec![0.0, 1.0]).unwrap();
        let damped = smoothness_loss(&step, &edge).unwrap();
        assert!((damped - (-2.0f64).exp()).abs() < 1e-15);
        assert!(damped < 1.0);
    }

    #[test]
    fn smoothness_gradient_matches_fd() {
        let (w, h) = (4, 3);
        let d = DepthMap::from_fn(w, h, |x, y| 2.0 + (x * x + 3 * y) as f64 * 0.1);
        let img = Image::from_fn(w, h, 1, |x, y, _| ((x + y) % 3) as f64 / 3.0);
        let pairs = SmoothnessPairs::new(&d, &img);
        let mut g = vec![0.0; w * h];
        pairs.backward(d.values(), 1.0, &mut g);
        for j in 0..w * h {
            let mut p = d.values().to_vec();
            let mut m = p.clone();
            p[j] += 1e-6;
            m[j] -= 1e-6;
            let fd = (pairs.loss(&p) - pairs.loss(&m)) / 2e-6;
            assert!((fd - g[j]).abs() < 1e-7);
        }
    }

    fn cloud(points: &[[f64; 3]]) -> PointCloud {
        let n = points.len();
        PointCloud::new(
            n,
            1,
            points.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect(),
            vec![true; n],
        )
    }

    #[test]
    fn translation_prior_cases() {
        let fw = cloud(&[[0.0, 0.0, 2.0], [9.0, 9.0, 9.0]]);
        let tgt = cloud(&[[9.0, 9.0, 9.0], [0.0, 0.0, 5.0]]);
        let fm = BinaryMask::from_vec(2, 1, vec![true, false]).unwrap();
        let tm = BinaryMask::from_vec(2, 1, vec![false, true]).unwrap();
        let tp = translation_prior(&fw, &fm, &tgt, &tm).unwrap().unwrap();
        assert_eq!(tp, Vector3::new(0.0, 0.0, 3.0));
        let empty = BinaryMask::new(2, 1);
        assert!(translation_prior(&fw, &empty, &tgt, &tm).unwrap().is_none());
        let same = translation_prior(&fw, &fm, &fw, &fm).unwrap().unwrap();
        assert_eq!(same, Vector3::zeros());
    }

    #[test]
    fn translation_loss_cases() {
        let z = Vector3::zeros();
        assert_eq!(translation_loss(&[z], &[z]).unwrap(), 0.0);
        assert_eq!(translation_loss(&[Vector3::new(1.0, 0.0, 0.0)], &[z]).unwrap(), 1.0);
        let two = translation_loss(&[Vector3::new(1.0, 0.0, 0.0), Vector3::new(1.0, 1.0, 1.0)], &[z, z]).unwrap();
        assert_eq!(two, 2.0);
    }

    #[test]
    fn height_loss_cases() {
        // One-pixel instance: h = 1, so fy * p_h = 8 gives a target of 8.
        let d = DepthMap::constant(1, 1, 10.0);
        let mut masks = InstanceMaskSet::new(1, 1);
        masks.insert(1, 2, BinaryMask::filled(1, 1, true)).unwrap();
        let mut priors = HeightPriors::default();
        priors.set(2, 2.0);
        let l = height_loss(&d, &masks, &priors, 4.0).unwrap();
        assert!((l - 0.2).abs() < 1e-15);
        priors.set(2, 2.5);
        assert_eq!(height_loss(&d, &masks, &priors, 4.0).unwrap(), 0.0);
        priors.set(2, 100.0);
        assert_eq!(priors.get(2), 5.0);
    }

    proptest! {
        #[test]
        fn ssim_is_symmetric_and_bounded(
            a in proptest::collection::vec(0.0..1.0f64, 20),
            b in proptest::collection::vec(0.0..1.0f64, 20),
        ) {
            let p = SsimParams::default();
            let ia = Image::from_vec(5, 4, 1, a).unwrap();
            let ib = Image::from_vec(5, 4, 1, b).unwrap();
            let s1 = ssim_map(&ia, &ib, &p).unwrap();
            let s2 = ssim_map(&ib, &ia, &p).unwrap();
            for (x, y) in s1.data().iter().zip(s2.data()) {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!((-1.0..=1.0 + 1e-12).contains(x));
            }
        }

        #[test]
        fn losses_are_non_negative(
            vals in proptest::collection::vec((0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64, 0.5..20.0f64), 12),
        ) {
            let a = Image::from_vec(4, 3, 1, vals.iter().map(|v| v.0).collect()).unwrap();
            let b = Image::from_vec(4, 3, 1, vals.iter().map(|v| v.1).collect()).unwrap();
            let v = ScalarMap::from_vec(4, 3, vals.iter().map(|v| v.2).collect());
            let d = DepthMap::from_vec(4, 3, vals.iter().map(|v| v.3).collect()).unwrap();
            let r = reconstruction_loss(&a, &b, &v, 0.8, &SsimParams::default()).unwrap();
            prop_assert!(r.value >= 0.0);
            prop_assert!(smoothness_loss(&d, &a).unwrap() >= 0.0);
        }
    }
}
