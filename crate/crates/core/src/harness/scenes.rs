//! Seeded random driving-like scenes for tests and benchmarks.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, PoseSE3};

use super::render::{
    render_sequence, BackgroundConfig, DepthProfile, EgoTrajectory, MotionTrack, ObjectConfig, SyntheticSceneConfig,
    TextureConfig, TextureKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomSceneOptions {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub objects: usize,
    /// Ego translation per frame, meters.
    pub ego_translation: f64,
    /// Largest ego rotation per axis and frame, degrees.
    pub ego_rotation_deg: f64,
    /// Object translation per frame, meters.
    pub object_translation: f64,
    /// Smooth wave textures instead of random blocks.
    pub smooth: bool,
    /// Texture feature size on the background and on objects, meters.
    pub background_texture: f64,
    pub object_texture: f64,
    /// Background depth at the top and bottom image rows.
    pub background_depth: [f64; 2],
    /// Range of object depths; must stay in front of the background.
    pub object_depth: [f64; 2],
    pub supersample: usize,
    /// Focal length as a fraction of the image width.
    pub focal: f64,
}

impl Default for RandomSceneOptions {
    fn default() -> Self {
        Self {
            width: 416,
            height: 128,
            frames: 2,
            objects: 1,
            ego_translation: 0.3,
            ego_rotation_deg: 0.5,
            object_translation: 0.5,
            smooth: true,
            background_texture: 0.4,
            object_texture: 0.1,
            background_depth: [12.0, 5.0],
            object_depth: [3.0, 4.2],
            supersample: 1,
            focal: 0.58,
        }
    }
}

/// A ramp background with fronto-parallel objects in separate horizontal
/// slots. Objects translate in the ground plane; the camera mostly moves
/// forward with a small rotation.
pub fn random_scene(seed: u64, opts: &RandomSceneOptions) -> Result<SyntheticSceneConfig> {
    if opts.width < 16 || opts.height < 16 || opts.frames < 2 {
        return Err(Error::InvalidArgument(
            "random scenes need at least 16x16 pixels and 2 frames".into(),
        ));
    }
    let near = opts.background_depth[0].min(opts.background_depth[1]);
    if !(opts.object_depth[0] > 0.0 && opts.object_depth[1] < near) {
        return Err(Error::InvalidArgument(
            "objects must lie between the camera and the background".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (opts.width as f64, opts.height as f64);
    if !(opts.focal > 0.0) {
        return Err(Error::InvalidArgument("focal length must be positive".into()));
    }
    let f = opts.focal * w;
    let k = Intrinsics::new(f, f, (w - 1.0) / 2.0, (h - 1.0) / 2.0, opts.width, opts.height)?;

    let texture = |rng: &mut ChaCha8Rng, scale: f64| {
        let kind = if opts.smooth {
            TextureKind::Smooth {
                wavelength: scale * rng.random_range(3.0..5.0),
            }
        } else {
            TextureKind::RandomBlocks {
                cell: scale * rng.random_range(0.8..1.2),
            }
        };
        TextureConfig::new(kind, rng.random_range(0.4..0.6), rng.random_range(0.5..0.8))
    };

    let background = BackgroundConfig {
        depth: DepthProfile::Ramp {
            top: opts.background_depth[0],
            bottom: opts.background_depth[1],
        },
        texture: texture(&mut rng, opts.background_texture),
    };

    let dir = nalgebra::Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.05..0.05), -1.0).normalize()
        * opts.ego_translation;
    let r = opts.ego_rotation_deg.to_radians();
    let rot = |rng: &mut ChaCha8Rng, s: f64| if r > 0.0 { rng.random_range(-r..r) * s } else { 0.0 };
    let ego = PoseSE3::new(
        rot(&mut rng, 0.4),
        rot(&mut rng, 1.0),
        rot(&mut rng, 0.2),
        dir.x,
        dir.y,
        dir.z,
    );

    let mut cfg = SyntheticSceneConfig {
        intrinsics: k,
        background,
        objects: Vec::new(),
        ego: EgoTrajectory::ConstantVelocity { motion: ego },
        frames: opts.frames,
        seed,
        supersample: opts.supersample,
    };
    // Objects are redrawn, smaller each time, until every one stays fully
    // inside the image and clear of the others in every frame.
    let slot = w / opts.objects.max(1) as f64;
    for attempt in 0..MAX_ATTEMPTS {
        let shrink = 0.85f64.powi(attempt as i32);
        cfg.objects = (0..opts.objects)
            .map(|j| {
                let [z0, z1] = opts.object_depth;
                let z = if z1 > z0 { rng.random_range(z0..z1) } else { z0 };
                let max_w = 0.45 * slot * z / f;
                let width = rng.random_range(2.5..3.5f64).min(max_w) * shrink;
                let height = rng.random_range(1.2..1.8f64).min(0.35 * h * z / f) * shrink;
                let u = (j as f64 + 0.5) * slot + rng.random_range(-0.05..0.05) * slot;
                let v = k.cy + rng.random_range(0.0..0.1) * h;
                let ang = rng.random_range(0.0..std::f64::consts::TAU);
                let t = opts.object_translation;
                // Motion mostly across the image keeps the quads apart.
                let motion = PoseSE3::translation(t * ang.cos(), 0.0, 0.4 * t * ang.sin()).normalized_translation(t);
                ObjectConfig {
                    id: j as u32 + 1,
                    category: 1 + (j % 2) as u32,
                    size: [width, height],
                    center: [(u - k.cx) * z / f, (v - k.cy) * z / f, z],
                    motion: MotionTrack::Constant { motion },
                    texture: texture(&mut rng, opts.object_texture),
                }
            })
            .collect();
        if objects_clear(&cfg)? {
            return Ok(cfg);
        }
    }
    Err(Error::InvalidArgument(format!(
        "no object layout stays in view after {MAX_ATTEMPTS} attempts"
    )))
}

const MAX_ATTEMPTS: usize = 40;

/// Every object is visible in every frame, away from the image border, and
/// its bounding box keeps a gap to every other object's.
fn objects_clear(cfg: &SyntheticSceneConfig) -> Result<bool> {
    const GAP: usize = 2;
    let coarse = SyntheticSceneConfig {
        supersample: 1,
        ..cfg.clone()
    };
    let seq = render_sequence(&coarse)?;
    let (w, h) = cfg.intrinsics.dims();
    for frame in &seq.frames {
        if frame.masks.len() != cfg.objects.len() {
            return Ok(false);
        }
        let mut boxes = Vec::new();
        for inst in frame.masks.iter() {
            let Some([x0, y0, x1, y1]) = inst.mask.bounding_box() else {
                return Ok(false);
            };
            if x0 < GAP || y0 < GAP || x1 + GAP >= w || y1 + GAP >= h {
                return Ok(false);
            }
            boxes.push([x0, y0, x1, y1]);
        }
        for (i, a) in boxes.iter().enumerate() {
            for b in &boxes[i + 1..] {
                let apart = a[2] + GAP < b[0] || b[2] + GAP < a[0] || a[3] + GAP < b[1] || b[3] + GAP < a[1];
                if !apart {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

trait NormalizedTranslation {
    fn normalized_translation(self, length: f64) -> Self;
}

impl NormalizedTranslation for PoseSE3 {
    fn normalized_translation(mut self, length: f64) -> Self {
        let n = self.translation_vector().norm();
        if n > 0.0 {
            let s = length / n;
            self.tx *= s;
            self.ty *= s;
            self.tz *= s;
        }
        self
    }
}
