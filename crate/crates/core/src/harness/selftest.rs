//! Oracle checks bundled into one deterministic report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::annotate::{
    match_instances, mots_metrics, occlusion_consensus, ConsensusParams, FlowField, MatchMethod, TrackedSequence,
};
use crate::error::Result;
use crate::geometry::PoseSE3;
use crate::instance::InstanceMaskSet;
use crate::optimizer::{evaluate_pair, gradient, GradientMode, OptimizerConfig};
use crate::raster::{BinaryMask, DepthMap};
use crate::warp::forward_warp;

use super::metrics::{ate_metric, depth_metrics};
use super::render::render_sequence;
use super::scenes::{random_scene, RandomSceneOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftestReport {
    pub passed: bool,
    pub checks: Vec<Check>,
}

fn check(name: &str, passed: bool, values: &[(&str, f64)]) -> Check {
    Check {
        name: name.into(),
        passed,
        values: values.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
    }
}

/// Runs every check. The same build gives the same report bit for bit.
pub fn run_selftest() -> Result<SelftestReport> {
    let checks = vec![
        depth_checks()?,
        ate_check()?,
        mots_check()?,
        consensus_check()?,
        matching_check()?,
        forward_warp_check()?,
        ground_truth_check()?,
        gradient_check()?,
    ];
    Ok(SelftestReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

fn depth_checks() -> Result<Check> {
    let gt = DepthMap::from_fn(8, 4, |x, y| 2.0 + x as f64 + 0.5 * y as f64);
    let over = gt.map(|d| 1.25 * d);
    let m = depth_metrics(&over, &gt, 80.0, false)?.expect("maps overlap");
    let doubled = gt.map(|d| 2.0 * d);
    let s = depth_metrics(&doubled, &gt, 80.0, true)?.expect("maps overlap");
    let ok = (m.abs_rel - 0.25).abs() < 1e-12 && m.a1 == 0.0 && m.a2 == 1.0 && s.abs_rel < 1e-12 && s.a1 == 1.0;
    Ok(check(
        "depth_metrics",
        ok,
        &[
            ("abs_rel_quarter", m.abs_rel),
            ("a1_quarter", m.a1),
            ("a2_quarter", m.a2),
            ("abs_rel_median_scaled", s.abs_rel),
        ],
    ))
}

fn ate_check() -> Result<Check> {
    let gt: Vec<PoseSE3> = (0..6)
        .map(|i| {
            let t = i as f64;
            PoseSE3::new(0.01 * t, -0.02 * t, 0.005 * t, 0.3 * t, 0.02 * t * t, 1.1 * t)
        })
        .collect();
    let scaled: Vec<PoseSE3> = gt
        .iter()
        .map(|p| PoseSE3::new(p.rx, p.ry, p.rz, 3.0 * p.tx, 3.0 * p.ty, 3.0 * p.tz))
        .collect();
    let r = ate_metric(&scaled, &gt, 3)?;
    Ok(check(
        "ate_scaled_truth",
        r.mean < 1e-12,
        &[("mean", r.mean), ("std", r.std)],
    ))
}

fn mots_check() -> Result<Check> {
    let (w, h) = (5, 1);
    let mk = |m: Option<BinaryMask>, id: u32| -> Result<InstanceMaskSet> {
        let mut s = InstanceMaskSet::new(w, h);
        if let Some(m) = m {
            s.insert(id, 1, m)?;
        }
        Ok(s)
    };
    let g = BinaryMask::filled(w, h, true);
    let hm = BinaryMask::from_fn(w, h, |x, _| x < 4);
    let gt = TrackedSequence::from_frames(vec![mk(Some(g.clone()), 1)?, mk(Some(g.clone()), 1)?, mk(Some(g), 1)?]);
    let hyp = TrackedSequence::from_frames(vec![mk(Some(hm.clone()), 7)?, mk(None, 7)?, mk(Some(hm), 7)?]);
    let s = mots_metrics(&hyp, &gt, false)?;
    let motsa = s.motsa.unwrap_or(f64::NAN);
    let motsp = s.motsp.unwrap_or(f64::NAN);
    let ok =
        (s.tp, s.fn_, s.fp, s.ids) == (2, 1, 0, 0) && (motsa - 2.0 / 3.0).abs() < 1e-12 && (motsp - 0.8).abs() < 1e-12;
    Ok(check(
        "mots_three_frame_toy",
        ok,
        &[
            ("tp", s.tp as f64),
            ("fn", s.fn_ as f64),
            ("motsa", motsa),
            ("motsp", motsp),
        ],
    ))
}

fn consensus_check() -> Result<Check> {
    let p = ConsensusParams::default();
    let (w, h) = (20, 4);
    let f = FlowField::constant(w, h, 5.0, 0.0);
    let agree = occlusion_consensus(&f, &FlowField::constant(w, h, -5.0, 0.0), &p)?;
    let disagree = occlusion_consensus(&f, &FlowField::zeros(w, h), &p)?;
    // Pixels pushed past the right edge count as occluded in both.
    let ok = agree.count() == 5 * h && disagree.count() == w * h;
    Ok(check(
        "occlusion_consensus",
        ok,
        &[
            ("occluded_agree", agree.count() as f64),
            ("occluded_disagree", disagree.count() as f64),
        ],
    ))
}

fn matching_check() -> Result<Check> {
    let t = vec![vec![0.6, 0.7], vec![0.55, 0.65]];
    let m = match_instances(&t, 0.5, MatchMethod::Greedy)?;
    Ok(check(
        "greedy_matching",
        m == vec![(0, 1), (1, 0)],
        &[("pairs", m.len() as f64)],
    ))
}

fn forward_warp_check() -> Result<Check> {
    let opts = RandomSceneOptions {
        objects: 0,
        smooth: false,
        background_texture: 1.5,
        ..Default::default()
    };
    let seq = render_sequence(&random_scene(1, &opts)?)?;
    let (a, b) = (&seq.frames[0], &seq.frames[1]);
    let k = &seq.intrinsics;
    let (w, h) = k.dims();
    let mut holes = [0.0; 2];
    let mut mae = [0.0; 2];
    for (slot, alpha) in [1usize, 2].into_iter().enumerate() {
        let fw = forward_warp(&a.image, &a.depth, &seq.ego_motions[0], k, alpha)?;
        holes[slot] = fw.hole_fraction();
        let (mut sum, mut n) = (0.0, 0usize);
        for y in 0..h {
            for x in 0..w {
                if fw.valid.get(x, y) {
                    for c in 0..3 {
                        sum += (fw.image.get(x, y, c) - b.image.get(x, y, c)).abs();
                    }
                    n += 3;
                }
            }
        }
        mae[slot] = sum / n.max(1) as f64;
    }
    let values = [
        ("mae_alpha1", mae[0]),
        ("mae_alpha2", mae[1]),
        ("holes_alpha1", holes[0]),
        ("holes_alpha2", holes[1]),
    ];
    Ok(check(
        "forward_warp_static_scene",
        mae.iter().all(|&m| m < 2.0 / 255.0) && holes[1] < holes[0],
        &values,
    ))
}

fn ground_truth_check() -> Result<Check> {
    let opts = RandomSceneOptions {
        objects: 2,
        ..Default::default()
    };
    let seq = render_sequence(&random_scene(2, &opts)?)?;
    let pair = seq.pair(0)?;
    let cfg = OptimizerConfig::default();
    let gt = seq.gt_params(0, cfg.min_instance_pixels)?;
    let ev = evaluate_pair(&pair, &gt, &cfg)?;
    let mut zero = gt.clone();
    zero.ego = PoseSE3::default();
    let worse = evaluate_pair(&pair, &zero, &cfg)?.breakdown.total;
    let mut fractions = Vec::new();
    for d in [&ev.forward, &ev.backward] {
        let map = &d.inconsistency;
        let (mut good, mut n) = (0usize, 0usize);
        for (i, &v) in map.values().iter().enumerate() {
            if map.is_valid(i) {
                n += 1;
                good += usize::from(v < 0.01);
            }
        }
        fractions.push(good as f64 / n.max(1) as f64);
    }
    let total = ev.breakdown.total;
    let ok = fractions.iter().all(|&f| f >= 0.99) && total < worse;
    Ok(check(
        "ground_truth_consistency",
        ok,
        &[
            ("total_at_truth", total),
            ("total_zero_ego", worse),
            ("consistent_fraction_forward", fractions[0]),
            ("consistent_fraction_backward", fractions[1]),
        ],
    ))
}

fn gradient_check() -> Result<Check> {
    let opts = RandomSceneOptions {
        objects: 1,
        ..Default::default()
    };
    let seq = render_sequence(&random_scene(3, &opts)?)?;
    let pair = seq.pair(0)?;
    let cfg = OptimizerConfig::default();
    let mut p = seq.gt_params(0, cfg.min_instance_pixels)?;
    let jitter = |q: &PoseSE3, s: f64| {
        let a = q.to_array();
        PoseSE3::from_array(std::array::from_fn(|i| {
            a[i] + s * if i < 3 { 0.004 } else { 0.03 } * (i as f64 - 2.5)
        }))
    };
    p.ego = jitter(&p.ego, 1.0);
    for o in p.objects.values_mut() {
        *o = jitter(o, -1.0);
    }
    let ga = gradient(&pair, &p, &cfg)?.pose_entries();
    // A fine step keeps the truncation error of the differences well below
    // the tolerance; the loss has kinks from the L1 term.
    let fd_cfg = OptimizerConfig {
        gradient_mode: GradientMode::FiniteDifference,
        fd_step: 1e-6,
        ..cfg
    };
    let gf = gradient(&pair, &p, &fd_cfg)?.pose_entries();
    let worst = ga
        .iter()
        .zip(&gf)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    Ok(check(
        "analytic_gradient",
        worst < 1e-3,
        &[("max_relative_error", worst), ("fd_step", fd_cfg.fd_step)],
    ))
}
