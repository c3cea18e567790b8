//! Direct fitting of ego motion, per-object motion, an optional log-depth
//! correction and height priors to one frame pair, plus motion averaging
//! over three-frame chains.

mod pipeline;
mod pyramid;
mod solver;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PoseSE3;
use crate::instance::{ScenePair, DEFAULT_MIN_INSTANCE_PIXELS};
use crate::losses::{HeightPriors, LossConfig};
use crate::raster::DepthMap;

pub use pipeline::{evaluate_pair, gradient, DirectionDiagnostics, Evaluation};
pub use solver::{optimize, OptimizeResult, StageReport};

/// Coarse additive field on log depth, one grid per frame.
///
/// Grid nodes span the image uniformly; the per-pixel factor is the
/// exponential of the bilinearly interpolated field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthCorrection {
    pub cols: usize,
    pub rows: usize,
    pub frame1: Vec<f64>,
    pub frame2: Vec<f64>,
}

/// Pixel spacing of the correction grid nodes.
pub const DEPTH_GRID_STRIDE: usize = 8;

impl DepthCorrection {
    pub fn zeros(width: usize, height: usize) -> Self {
        let cols = width.div_ceil(DEPTH_GRID_STRIDE).max(1);
        let rows = height.div_ceil(DEPTH_GRID_STRIDE).max(1);
        Self {
            cols,
            rows,
            frame1: vec![0.0; cols * rows],
            frame2: vec![0.0; cols * rows],
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.cols * self.rows;
        if n == 0 || self.frame1.len() != n || self.frame2.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "depth correction grid {}x{} has {} and {} values",
                self.cols,
                self.rows,
                self.frame1.len(),
                self.frame2.len()
            )));
        }
        if self.frame1.iter().chain(&self.frame2).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("depth correction must be finite".into()));
        }
        Ok(())
    }

    /// Grid nodes and weights contributing to pixel `(x, y)`.
    pub(crate) fn taps(&self, x: usize, y: usize, width: usize, height: usize) -> [(usize, f64); 4] {
        let gx = if self.cols > 1 && width > 1 {
            x as f64 * (self.cols - 1) as f64 / (width - 1) as f64
        } else {
            0.0
        };
        let gy = if self.rows > 1 && height > 1 {
            y as f64 * (self.rows - 1) as f64 / (height - 1) as f64
        } else {
            0.0
        };
        let x0 = (gx.floor() as usize).min(self.cols.saturating_sub(2));
        let y0 = (gy.floor() as usize).min(self.rows.saturating_sub(2));
        let x1 = (x0 + 1).min(self.cols - 1);
        let y1 = (y0 + 1).min(self.rows - 1);
        let fx = if x1 == x0 { 0.0 } else { gx - x0 as f64 };
        let fy = if y1 == y0 { 0.0 } else { gy - y0 as f64 };
        [
            (y0 * self.cols + x0, (1.0 - fx) * (1.0 - fy)),
            (y0 * self.cols + x1, fx * (1.0 - fy)),
            (y1 * self.cols + x0, (1.0 - fx) * fy),
            (y1 * self.cols + x1, fx * fy),
        ]
    }

    /// Applies the grid of `frame` (0 or 1) to a depth map.
    pub fn apply(&self, depth: &DepthMap, frame: usize) -> DepthMap {
        let grid = if frame == 0 { &self.frame1 } else { &self.frame2 };
        let (w, h) = depth.dims();
        let mut values = depth.values().to_vec();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if depth.is_valid(i) {
                    let g: f64 = self.taps(x, y, w, h).iter().map(|&(n, wt)| wt * grid[n]).sum();
                    values[i] *= g.exp();
                }
            }
        }
        DepthMap::with_validity(w, h, values, depth.validity().to_vec())
    }
}

/// Everything fitted for one frame pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    /// Point transform from camera 1 to camera 2 for static points.
    pub ego: PoseSE3,
    /// Residual motion of each instance in camera-2 coordinates:
    /// `X2 = O_k * ego * X1`.
    pub objects: BTreeMap<u32, PoseSE3>,
    #[serde(default)]
    pub depth_correction: Option<DepthCorrection>,
    #[serde(default)]
    pub height_priors: HeightPriors,
}

impl SceneParams {
    /// Identity poses for the given instance IDs.
    pub fn identity(ids: impl IntoIterator<Item = u32>) -> Self {
        Self {
            ego: PoseSE3::IDENTITY,
            objects: ids.into_iter().map(|id| (id, PoseSE3::IDENTITY)).collect(),
            depth_correction: None,
            height_priors: HeightPriors::default(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.ego.is_finite()
            && self.objects.values().all(PoseSE3::is_finite)
            && self
                .height_priors
                .per_category
                .values()
                .chain(std::iter::once(&self.height_priors.default))
                .all(|v| v.is_finite())
    }
}

/// Partial derivatives of the total loss, laid out like [`SceneParams`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneGradient {
    pub ego: [f64; 6],
    pub objects: BTreeMap<u32, [f64; 6]>,
    pub depth_correction: Option<[Vec<f64>; 2]>,
    pub height_priors: BTreeMap<u32, f64>,
}

impl SceneGradient {
    /// Pose entries in layout order: ego, then objects by ID.
    pub fn pose_entries(&self) -> Vec<f64> {
        let mut out = self.ego.to_vec();
        for g in self.objects.values() {
            out.extend_from_slice(g);
        }
        out
    }

    pub fn norm(&self) -> f64 {
        let mut s: f64 = self.pose_entries().iter().map(|v| v * v).sum();
        if let Some([a, b]) = &self.depth_correction {
            s += a.iter().chain(b).map(|v| v * v).sum::<f64>();
        }
        s += self.height_priors.values().map(|v| v * v).sum::<f64>();
        s.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    Analytic,
    /// Central differences on the loss with the forward-warp stage held fixed.
    FiniteDifference,
}

/// Which loss terms contribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TermFlags {
    pub reconstruction: bool,
    pub geometric: bool,
    pub smoothness: bool,
    pub translation: bool,
    pub height: bool,
}

impl Default for TermFlags {
    fn default() -> Self {
        Self {
            reconstruction: true,
            geometric: true,
            smoothness: true,
            translation: true,
            height: true,
        }
    }
}

/// One coarse-to-fine step: subsampling level (factor `2^level`) and the
/// Gaussian blur applied to both images, in full-resolution pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub level: u32,
    pub blur: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub loss: LossConfig,
    pub terms: TermFlags,
    /// Depth pre-upsampling factor of the forward warp: 1, 2 or 4.
    pub alpha: usize,
    pub max_iterations: usize,
    /// Stop when an accepted step lowers the loss by less than this
    /// fraction of its value.
    pub tolerance: f64,
    pub gradient_mode: GradientMode,
    /// Step of the central differences.
    pub fd_step: f64,
    /// First trial step of each line search, in scaled units.
    pub initial_step: f64,
    /// Factor applied to the trial step after each rejected trial.
    pub backtrack: f64,
    pub max_backtracks: usize,
    /// Sufficient-decrease constant of the line search.
    pub armijo: f64,
    /// Number of curvature pairs kept by the quasi-Newton update; 0 gives
    /// plain steepest descent.
    pub memory: usize,
    pub min_instance_pixels: usize,
    pub optimize_depth: bool,
    pub optimize_height: bool,
    /// Warm-up stages run before the full-resolution, unblurred fit.
    pub warmup: Vec<Stage>,
    /// Iteration cap of each warm-up stage.
    pub warmup_iterations: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            terms: TermFlags::default(),
            alpha: 2,
            max_iterations: 200,
            tolerance: 1e-7,
            gradient_mode: GradientMode::Analytic,
            fd_step: 1e-4,
            initial_step: 1.0,
            backtrack: 0.5,
            max_backtracks: 20,
            armijo: 1e-4,
            memory: 8,
            min_instance_pixels: DEFAULT_MIN_INSTANCE_PIXELS,
            optimize_depth: false,
            optimize_height: false,
            warmup: vec![
                Stage { level: 2, blur: 4.0 },
                Stage { level: 1, blur: 2.0 },
                Stage { level: 0, blur: 1.0 },
            ],
            warmup_iterations: 30,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if ![1, 2, 4].contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be 1, 2 or 4, got {}",
                self.alpha
            )));
        }
        let positive = [
            ("tolerance", self.tolerance),
            ("fd_step", self.fd_step),
            ("initial_step", self.initial_step),
            ("armijo", self.armijo),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::InvalidArgument("backtrack factor must lie in (0, 1)".into()));
        }
        if self
            .warmup
            .iter()
            .any(|s| !(s.blur >= 0.0 && s.blur.is_finite()) || s.level > 6)
        {
            return Err(Error::InvalidArgument(
                "warm-up stages need blur >= 0 and level <= 6".into(),
            ));
        }
        Ok(())
    }

    /// Loss weights with disabled terms zeroed.
    pub fn effective_loss(&self) -> LossConfig {
        let mut l = self.loss;
        let t = &self.terms;
        if !t.reconstruction {
            l.lambda_r = 0.0;
        }
        if !t.geometric {
            l.lambda_g = 0.0;
        }
        if !t.smoothness {
            l.lambda_s = 0.0;
        }
        if !t.translation {
            l.lambda_t = 0.0;
        }
        if !t.height {
            l.lambda_h = 0.0;
        }
        l
    }
}

/// Object motions of a three-frame chain for one temporal direction:
/// `first` covers frames 0-1 and `second` frames 1-2.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MotionEstimates {
    pub first: BTreeMap<u32, PoseSE3>,
    pub second: BTreeMap<u32, PoseSE3>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CyclicTriplet {
    pub estimates: Vec<MotionEstimates>,
    /// Objects whose averaged rotations exceed the small-angle range.
    pub warnings: Vec<String>,
}

/// Largest rotation, in degrees, for which Euler averaging is trusted.
pub const EULER_AVERAGE_LIMIT_DEG: f64 = 5.0;

/// Replaces each object's two same-direction motions by their mean.
///
/// `chain` holds the pairs (0, 1) and (1, 2). Only objects matched in both
/// pairs and estimated in both halves are averaged; translations use the
/// arithmetic mean and rotations the componentwise mean of Euler angles.
pub fn cyclic_triplet(
    chain: &[ScenePair; 2],
    estimates: &[MotionEstimates],
    min_instance_pixels: usize,
) -> Result<CyclicTriplet> {
    let first = chain[0].matched_ids(min_instance_pixels);
    let second = chain[1].matched_ids(min_instance_pixels);
    let ids: Vec<u32> = first.into_iter().filter(|id| second.contains(id)).collect();
    let mut warnings = Vec::new();
    let mut out = Vec::with_capacity(estimates.len());
    for (d, est) in estimates.iter().enumerate() {
        let mut next = est.clone();
        for &id in &ids {
            let (Some(a), Some(b)) = (est.first.get(&id), est.second.get(&id)) else {
                continue;
            };
            let avg = average_motion(a, b);
            let limit = EULER_AVERAGE_LIMIT_DEG.to_radians();
            if a.rotation_angle() > limit || b.rotation_angle() > limit {
                warnings.push(format!(
                    "direction {d}, object {id}: rotation above {EULER_AVERAGE_LIMIT_DEG} degrees, Euler averaging is approximate"
                ));
            }
            next.first.insert(id, avg);
            next.second.insert(id, avg);
        }
        out.push(next);
    }
    Ok(CyclicTriplet {
        estimates: out,
        warnings,
    })
}

/// Componentwise mean of two poses.
pub fn average_motion(a: &PoseSE3, b: &PoseSE3) -> PoseSE3 {
    let (x, y) = (a.to_array(), b.to_array());
    let mut m = [0.0; 6];
    for i in 0..6 {
        m[i] = 0.5 * (x[i] + y[i]);
    }
    PoseSE3::from_array(m)
}
