//! Depth accuracy and trajectory error metrics.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_shape, Error, Result};
use crate::geometry::PoseSE3;
use crate::raster::DepthMap;

/// Smallest predicted depth kept after scaling.
pub const MIN_EVAL_DEPTH: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Standard single-image depth metrics over pixels valid in both maps.
///
/// Ground truth is clamped to `cap`; predictions are optionally rescaled by
/// the ratio of medians and then clamped to `[MIN_EVAL_DEPTH, cap]`. The
/// ratio thresholds are strict. Returns `None` when no pixel overlaps.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, cap: f64, median_scaling: bool) -> Result<Option<DepthMetrics>> {
    ensure_same_shape("depth_metrics", pred.dims(), gt.dims())?;
    if !(cap > 0.0) {
        return Err(Error::InvalidArgument("depth cap must be positive".into()));
    }
    let mut g = Vec::new();
    let mut p = Vec::new();
    for i in 0..gt.len() {
        if gt.is_valid(i) && pred.is_valid(i) {
            g.push(gt.values()[i].min(cap));
            p.push(pred.values()[i]);
        }
    }
    if g.is_empty() {
        return Ok(None);
    }
    if median_scaling {
        let s = median(&mut g.clone()) / median(&mut p.clone());
        p.iter_mut().for_each(|x| *x *= s);
    }
    p.iter_mut().for_each(|x| *x = x.clamp(MIN_EVAL_DEPTH, cap));

    let n = g.len() as f64;
    let mut m = DepthMetrics {
        abs_rel: 0.0,
        sq_rel: 0.0,
        rmse: 0.0,
        rmse_log: 0.0,
        a1: 0.0,
        a2: 0.0,
        a3: 0.0,
    };
    for (&pi, &gi) in p.iter().zip(&g) {
        let d = pi - gi;
        m.abs_rel += d.abs() / gi;
        m.sq_rel += d * d / gi;
        m.rmse += d * d;
        m.rmse_log += (pi.ln() - gi.ln()).powi(2);
        let ratio = (pi / gi).max(gi / pi);
        m.a1 += f64::from(ratio < 1.25);
        m.a2 += f64::from(ratio < 1.25f64.powi(2));
        m.a3 += f64::from(ratio < 1.25f64.powi(3));
    }
    m.abs_rel /= n;
    m.sq_rel /= n;
    m.rmse = (m.rmse / n).sqrt();
    m.rmse_log = (m.rmse_log / n).sqrt();
    m.a1 /= n;
    m.a2 /= n;
    m.a3 /= n;
    Ok(Some(m))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AteResult {
    pub mean: f64,
    pub std: f64,
    pub snippets: usize,
}

/// Absolute trajectory error over every window of `snippet_len` frames.
///
/// Poses map camera coordinates to world coordinates. Within a window both
/// trajectories are expressed relative to their first pose, the prediction
/// is scaled by the least-squares factor onto the ground truth, and the
/// error is the mean position distance over the window's frames.
pub fn ate_metric(pred: &[PoseSE3], gt: &[PoseSE3], snippet_len: usize) -> Result<AteResult> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "trajectories have {} and {} poses",
            pred.len(),
            gt.len()
        )));
    }
    if snippet_len < 2 {
        return Err(Error::InvalidArgument("snippet length must be at least 2".into()));
    }
    if gt.len() < snippet_len {
        return Err(Error::InvalidArgument(format!(
            "trajectory of {} poses is shorter than the snippet length {snippet_len}",
            gt.len()
        )));
    }
    let relative = |poses: &[PoseSE3]| {
        let first = poses[0].to_transform().inverse();
        poses
            .iter()
            .map(|p| first.compose(&p.to_transform()).translation)
            .collect::<Vec<_>>()
    };
    let mut errors = Vec::new();
    for start in 0..=gt.len() - snippet_len {
        let p = relative(&pred[start..start + snippet_len]);
        let g = relative(&gt[start..start + snippet_len]);
        let pp: f64 = p.iter().map(|v| v.norm_squared()).sum();
        let gp: f64 = p.iter().zip(&g).map(|(a, b)| a.dot(b)).sum();
        let s = if pp > 0.0 { gp / pp } else { 1.0 };
        let e = p.iter().zip(&g).map(|(a, b)| (a * s - b).norm()).sum::<f64>() / snippet_len as f64;
        errors.push(e);
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let std = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(AteResult {
        mean,
        std,
        snippets: errors.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gt_map() -> DepthMap {
        DepthMap::from_vec(4, 1, vec![2.0, 5.0, 10.0, 40.0]).unwrap()
    }

    #[test]
    fn identical_prediction_is_perfect() {
        let m = depth_metrics(&gt_map(), &gt_map(), 80.0, false).unwrap().unwrap();
        assert_eq!((m.abs_rel, m.sq_rel, m.rmse, m.rmse_log), (0.0, 0.0, 0.0, 0.0));
        assert_eq!((m.a1, m.a2, m.a3), (1.0, 1.0, 1.0));
    }

    #[test]
    fn uniform_overestimate_by_quarter() {
        let pred = gt_map().map(|d| 1.25 * d);
        let m = depth_metrics(&pred, &gt_map(), 80.0, false).unwrap().unwrap();
        assert!((m.abs_rel - 0.25).abs() < 1e-12);
        assert_eq!(m.a1, 0.0);
        assert_eq!(m.a2, 1.0);
        assert_eq!(m.a3, 1.0);
    }

    #[test]
    fn median_scaling_removes_global_scale() {
        let pred = gt_map().map(|d| 2.0 * d);
        let m = depth_metrics(&pred, &gt_map(), 80.0, true).unwrap().unwrap();
        assert!(m.abs_rel < 1e-12 && m.rmse < 1e-12);
        assert_eq!(m.a1, 1.0);
    }

    #[test]
    fn no_overlap_gives_none() {
        let pred = DepthMap::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        let gt = DepthMap::from_vec(2, 1, vec![0.0, 3.0]).unwrap();
        assert!(depth_metrics(&pred, &gt, 80.0, true).unwrap().is_none());
    }

    #[test]
    fn ground_truth_is_capped() {
        let gt = DepthMap::from_vec(1, 1, vec![100.0]).unwrap();
        let m = depth_metrics(&gt, &gt, 80.0, false).unwrap().unwrap();
        assert_eq!(m.abs_rel, 0.0);
    }

    fn line(n: usize, step: f64) -> Vec<PoseSE3> {
        (0..n)
            .map(|i| PoseSE3::translation(0.0, 0.0, step * i as f64))
            .collect()
    }

    #[test]
    fn ate_of_truth_and_scaled_truth_is_zero() {
        let gt: Vec<PoseSE3> = (0..6)
            .map(|i| PoseSE3::new(0.01 * i as f64, 0.02, 0.0, 0.1 * i as f64, 0.0, 0.9 * i as f64))
            .collect();
        let r = ate_metric(&gt, &gt, 3).unwrap();
        assert_eq!((r.mean, r.std, r.snippets), (0.0, 0.0, 4));
        let scaled: Vec<PoseSE3> = gt
            .iter()
            .map(|p| {
                let mut q = *p;
                q.tx *= 3.0;
                q.ty *= 3.0;
                q.tz *= 3.0;
                q
            })
            .collect();
        let r = ate_metric(&scaled, &gt, 3).unwrap();
        assert!(r.mean < 1e-12 && r.std < 1e-12);
    }

    #[test]
    fn ate_lateral_offset_toy() {
        // Positions (0,0,0), (0,0,1), (0,0,2) against a prediction shifted
        // 0.1 m sideways after the first frame. Scale 5/5.02, per-frame
        // errors 0, 0.0996813.., 0.0999198.., averaged over three frames.
        let gt = line(3, 1.0);
        let mut pred = gt.clone();
        pred[1].tx = 0.1;
        pred[2].tx = 0.1;
        let r = ate_metric(&pred, &gt, 3).unwrap();
        assert!((r.mean - 0.066_533_7).abs() < 1e-6, "{}", r.mean);
        assert_eq!(r.std, 0.0);
    }

    #[test]
    fn ate_rejects_short_trajectories() {
        assert!(ate_metric(&line(2, 1.0), &line(2, 1.0), 3).is_err());
        assert!(ate_metric(&line(3, 1.0), &line(4, 1.0), 3).is_err());
    }

    proptest! {
        #[test]
        fn delta_accuracies_are_monotone(
            vals in proptest::collection::vec((0.1f64..90.0, 0.1f64..90.0), 1..40),
            scale in any::<bool>(),
        ) {
            let n = vals.len();
            let pred = DepthMap::from_vec(n, 1, vals.iter().map(|v| v.0).collect()).unwrap();
            let gt = DepthMap::from_vec(n, 1, vals.iter().map(|v| v.1).collect()).unwrap();
            let m = depth_metrics(&pred, &gt, 80.0, scale).unwrap().unwrap();
            prop_assert!(0.0 <= m.a1 && m.a1 <= m.a2 && m.a2 <= m.a3 && m.a3 <= 1.0);
            prop_assert!(m.abs_rel >= 0.0 && m.rmse >= 0.0);
        }
    }
}
