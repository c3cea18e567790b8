//! Ray-cast renderer of textured planar scenes with exact depth, masks,
//! flows and motions.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::annotate::{FlowField, TrackedSequence};
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, PoseSE3, RigidTransform, MIN_DEPTH};
use crate::instance::{InstanceMaskSet, ScenePair};
use crate::optimizer::SceneParams;
use crate::raster::{BinaryMask, DepthMap, Image};

/// Surface pattern, with sizes in meters on the surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TextureKind {
    Checker {
        cell: f64,
    },
    RandomBlocks {
        cell: f64,
    },
    /// Sum of three seeded plane waves.
    Smooth {
        wavelength: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureConfig {
    pub kind: TextureKind,
    /// Mean intensity.
    #[serde(default = "default_base")]
    pub base: f64,
    /// Peak-to-peak intensity range.
    #[serde(default = "default_contrast")]
    pub contrast: f64,
}

fn default_base() -> f64 {
    0.5
}

fn default_contrast() -> f64 {
    0.6
}

impl TextureConfig {
    pub fn new(kind: TextureKind, base: f64, contrast: f64) -> Self {
        Self { kind, base, contrast }
    }

    fn validate(&self) -> Result<()> {
        let size = match self.kind {
            TextureKind::Checker { cell } | TextureKind::RandomBlocks { cell } => cell,
            TextureKind::Smooth { wavelength } => wavelength,
        };
        if !(size > 0.0 && size.is_finite()) {
            return Err(Error::InvalidScene("texture size must be positive".into()));
        }
        Ok(())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_unit(seed: u64, a: i64, b: i64, c: u64) -> f64 {
    let h = splitmix64(seed ^ splitmix64(a as u64 ^ splitmix64(b as u64 ^ splitmix64(c))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// A texture bound to a seed.
#[derive(Debug, Clone, Copy)]
struct Texture {
    cfg: TextureConfig,
    seed: u64,
}

impl Texture {
    fn color(&self, s: f64, t: f64, out: &mut [f64; 3]) {
        let TextureConfig { kind, base, contrast } = self.cfg;
        match kind {
            TextureKind::Checker { cell } => {
                let parity = ((s / cell).floor() as i64 + (t / cell).floor() as i64).rem_euclid(2);
                let sign = if parity == 0 { 0.5 } else { -0.5 };
                for (c, o) in out.iter_mut().enumerate() {
                    let tint = 0.1 * (hash_unit(self.seed, 0, 0, c as u64) - 0.5);
                    *o = base + contrast * (sign + tint);
                }
            }
            TextureKind::RandomBlocks { cell } => {
                let (i, j) = ((s / cell).floor() as i64, (t / cell).floor() as i64);
                let g = hash_unit(self.seed, i, j, 99) - 0.5;
                for (c, o) in out.iter_mut().enumerate() {
                    let tint = hash_unit(self.seed, i, j, c as u64) - 0.5;
                    *o = base + contrast * (0.8 * g + 0.2 * tint);
                }
            }
            TextureKind::Smooth { wavelength } => {
                let k = std::f64::consts::TAU / wavelength;
                for (c, o) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for m in 0..3u64 {
                        let ang = std::f64::consts::TAU * hash_unit(self.seed, m as i64, 1, 7);
                        let phase = std::f64::consts::TAU * hash_unit(self.seed, m as i64, 2, c as u64);
                        let km = k * (1.0 + 0.5 * m as f64);
                        acc += (km * (ang.cos() * s + ang.sin() * t) + phase).sin();
                    }
                    *o = base + 0.5 * contrast * acc / 3.0;
                }
            }
        }
        for o in out.iter_mut() {
            *o = o.clamp(0.0, 1.0);
        }
    }
}

/// Background depth profile in the first camera frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DepthProfile {
    /// Fronto-parallel plane.
    Constant { depth: f64 },
    /// Plane whose inverse depth is linear in the image row, from `top`
    /// (row 0) to `bottom` (last row).
    Ramp { top: f64, bottom: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundConfig {
    pub depth: DepthProfile,
    pub texture: TextureConfig,
}

/// Per-frame rigid motion of an object: rotation about its own centre
/// (world axes) followed by a world translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MotionTrack {
    Constant { motion: PoseSE3 },
    PerFrame { motions: Vec<PoseSE3> },
}

impl MotionTrack {
    fn at(&self, i: usize) -> PoseSE3 {
        match self {
            MotionTrack::Constant { motion } => *motion,
            MotionTrack::PerFrame { motions } => motions.get(i).copied().unwrap_or_default(),
        }
    }
}

impl Default for MotionTrack {
    fn default() -> Self {
        MotionTrack::Constant {
            motion: PoseSE3::IDENTITY,
        }
    }
}

/// A fronto-parallel textured rectangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectConfig {
    pub id: u32,
    #[serde(default = "default_category")]
    pub category: u32,
    /// Width and height in meters.
    pub size: [f64; 2],
    /// Centre in the first camera frame at frame 0.
    pub center: [f64; 3],
    #[serde(default)]
    pub motion: MotionTrack,
    pub texture: TextureConfig,
}

fn default_category() -> u32 {
    1
}

/// Camera motion as the point transform between consecutive camera frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EgoTrajectory {
    Static,
    ConstantVelocity { motion: PoseSE3 },
    PerFrame { motions: Vec<PoseSE3> },
}

impl EgoTrajectory {
    fn at(&self, i: usize) -> PoseSE3 {
        match self {
            EgoTrajectory::Static => PoseSE3::IDENTITY,
            EgoTrajectory::ConstantVelocity { motion } => *motion,
            EgoTrajectory::PerFrame { motions } => motions.get(i).copied().unwrap_or_default(),
        }
    }
}

/// Complete description of a synthetic sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneConfig {
    pub intrinsics: Intrinsics,
    pub background: BackgroundConfig,
    #[serde(default)]
    pub objects: Vec<ObjectConfig>,
    pub ego: EgoTrajectory,
    pub frames: usize,
    #[serde(default)]
    pub seed: u64,
    /// Sub-pixel rays per axis averaged into each colour pixel.
    #[serde(default = "default_supersample")]
    pub supersample: usize,
}

fn default_supersample() -> usize {
    1
}

/// One rendered frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub image: Image,
    pub depth: DepthMap,
    pub masks: InstanceMaskSet,
    pub camera_from_world: RigidTransform,
}

/// Rendered frames with exact flows and relative motions.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedSequence {
    pub intrinsics: Intrinsics,
    pub frames: Vec<RenderedFrame>,
    /// `flows_forward[i]` maps frame `i` to `i + 1`.
    pub flows_forward: Vec<FlowField>,
    /// `flows_backward[i]` maps frame `i + 1` to `i`.
    pub flows_backward: Vec<FlowField>,
    /// Point transform from camera `i` to camera `i + 1` for static points.
    pub ego_motions: Vec<PoseSE3>,
    /// Residual motion of each object in camera `i + 1` coordinates:
    /// `X_{i+1} = O * E * X_i`.
    pub object_motions: Vec<BTreeMap<u32, PoseSE3>>,
    pub object_categories: BTreeMap<u32, u32>,
    /// Metric height of each object.
    pub object_heights: BTreeMap<u32, f64>,
}

impl RenderedSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frames `i` and `i + 1` with ground-truth depth and masks.
    pub fn pair(&self, i: usize) -> Result<ScenePair> {
        let (a, b) = (&self.frames[i], &self.frames[i + 1]);
        ScenePair::new(
            a.image.clone(),
            b.image.clone(),
            a.depth.clone(),
            b.depth.clone(),
            a.masks.clone(),
            b.masks.clone(),
            self.intrinsics,
        )
    }

    /// Ground-truth parameters of pair `i`: its ego motion, the motions of
    /// the objects matched in the pair, and per-category mean heights.
    pub fn gt_params(&self, i: usize, min_instance_pixels: usize) -> Result<SceneParams> {
        let pair = self.pair(i)?;
        let matched = pair.matched_ids(min_instance_pixels);
        let mut params = SceneParams::identity(std::iter::empty());
        params.ego = self.ego_motions[i];
        for id in matched {
            params.objects.insert(id, self.object_motions[i][&id]);
        }
        let mut per_cat: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
        for (id, &cat) in &self.object_categories {
            let e = per_cat.entry(cat).or_default();
            e.0 += self.object_heights[id];
            e.1 += 1;
        }
        for (cat, (sum, n)) in per_cat {
            params.height_priors.set(cat, sum / n as f64);
        }
        Ok(params)
    }

    /// Ground-truth masks as a tracked sequence keyed by object ID.
    pub fn tracks(&self) -> TrackedSequence {
        TrackedSequence::from_frames(self.frames.iter().map(|f| f.masks.clone()).collect())
    }
}

enum Surface {
    Background,
    Object(usize),
}

struct Scene<'a> {
    cfg: &'a SyntheticSceneConfig,
    plane: Vector3<f64>,
    basis: (Vector3<f64>, Vector3<f64>),
    bg_texture: Texture,
    obj_textures: Vec<Texture>,
    /// `world_from_object[frame][object]`.
    world_from_object: Vec<Vec<RigidTransform>>,
    camera_from_world: Vec<RigidTransform>,
}

struct Hit {
    depth: f64,
    surface: Surface,
    uv: (f64, f64),
}

impl<'a> Scene<'a> {
    fn new(cfg: &'a SyntheticSceneConfig) -> Result<Self> {
        let k = &cfg.intrinsics;
        if cfg.frames == 0 {
            return Err(Error::InvalidScene("at least one frame is required".into()));
        }
        if cfg.supersample == 0 {
            return Err(Error::InvalidScene("supersample must be >= 1".into()));
        }
        cfg.background.texture.validate()?;
        let plane = match cfg.background.depth {
            DepthProfile::Constant { depth } => {
                if !(depth > 0.0) {
                    return Err(Error::InvalidScene("background depth must be positive".into()));
                }
                Vector3::new(0.0, 0.0, 1.0 / depth)
            }
            DepthProfile::Ramp { top, bottom } => {
                if !(top > 0.0 && bottom > 0.0) {
                    return Err(Error::InvalidScene("background depths must be positive".into()));
                }
                // 1/z = a + b v with v = fy y / z + cy gives the plane n.X = 1.
                let a = 1.0 / top;
                let b = if k.height > 1 {
                    (1.0 / bottom - 1.0 / top) / (k.height - 1) as f64
                } else {
                    0.0
                };
                Vector3::new(0.0, b * k.fy, a + b * k.cy)
            }
        };
        let n = plane.normalize();
        let e1 = Vector3::x();
        let e2 = n.cross(&e1).normalize();

        let mut camera_from_world = vec![RigidTransform::identity()];
        for i in 1..cfg.frames {
            let e = cfg.ego.at(i - 1).to_transform();
            camera_from_world.push(e.compose(&camera_from_world[i - 1]));
        }

        let mut ids = std::collections::BTreeSet::new();
        let mut world_from_object = vec![Vec::new(); cfg.frames];
        for o in &cfg.objects {
            o.texture.validate()?;
            if o.id == 0 || !ids.insert(o.id) {
                return Err(Error::InvalidScene(format!(
                    "object IDs must be unique and non-zero ({})",
                    o.id
                )));
            }
            if !(o.size[0] > 0.0 && o.size[1] > 0.0) {
                return Err(Error::InvalidScene(format!("object {} has non-positive size", o.id)));
            }
            let mut t = RigidTransform::new(nalgebra::Matrix3::identity(), Vector3::from(o.center));
            for (i, slot) in world_from_object.iter_mut().enumerate() {
                if i > 0 {
                    let m = o.motion.at(i - 1).to_transform();
                    t = RigidTransform::new(m.rotation * t.rotation, t.translation + m.translation);
                }
                slot.push(t);
                let cam = camera_from_world[i].compose(&t);
                for (sx, sy) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
                    let corner = Vector3::new(0.5 * sx * o.size[0], 0.5 * sy * o.size[1], 0.0);
                    if cam.apply(&corner).z <= MIN_DEPTH {
                        return Err(Error::InvalidScene(format!(
                            "object {} is behind the camera in frame {i}",
                            o.id
                        )));
                    }
                }
            }
        }

        let obj_textures = cfg
            .objects
            .iter()
            .enumerate()
            .map(|(j, o)| Texture {
                cfg: o.texture,
                seed: splitmix64(cfg.seed ^ splitmix64(j as u64 + 1)),
            })
            .collect();
        Ok(Self {
            cfg,
            plane,
            basis: (e1, e2),
            bg_texture: Texture {
                cfg: cfg.background.texture,
                seed: splitmix64(cfg.seed),
            },
            obj_textures,
            world_from_object,
            camera_from_world,
        })
    }

    /// Nearest surface along the ray through continuous pixel `(u, v)`.
    fn cast(&self, frame: usize, u: f64, v: f64) -> Option<Hit> {
        let world_from_cam = self.camera_from_world[frame].inverse();
        let dir_c = self.cfg.intrinsics.ray(u, v);
        let origin = world_from_cam.translation;
        let dir = world_from_cam.rotation * dir_c;
        let mut best: Option<Hit> = None;

        let nd = self.plane.dot(&dir);
        if nd.abs() > 1e-15 {
            let t = (1.0 - self.plane.dot(&origin)) / nd;
            if t > MIN_DEPTH {
                let p = origin + dir * t;
                best = Some(Hit {
                    depth: t,
                    surface: Surface::Background,
                    uv: (p.dot(&self.basis.0), p.dot(&self.basis.1)),
                });
            }
        }
        for (j, o) in self.cfg.objects.iter().enumerate() {
            let obj_from_world = self.world_from_object[frame][j].inverse();
            let oo = obj_from_world.apply(&origin);
            let od = obj_from_world.rotation * dir;
            if od.z.abs() < 1e-15 {
                continue;
            }
            let t = -oo.z / od.z;
            if !(t > MIN_DEPTH) || best.as_ref().is_some_and(|b| b.depth <= t) {
                continue;
            }
            let p = oo + od * t;
            if p.x.abs() <= 0.5 * o.size[0] && p.y.abs() <= 0.5 * o.size[1] {
                best = Some(Hit {
                    depth: t,
                    surface: Surface::Object(j),
                    uv: (p.x, p.y),
                });
            }
        }
        best
    }

    fn shade(&self, hit: &Hit, out: &mut [f64; 3]) {
        let tex = match hit.surface {
            Surface::Background => &self.bg_texture,
            Surface::Object(j) => &self.obj_textures[j],
        };
        tex.color(hit.uv.0, hit.uv.1, out);
    }

    fn render_frame(&self, frame: usize) -> Result<(RenderedFrame, Vec<Option<Hit>>)> {
        let k = &self.cfg.intrinsics;
        let (w, h) = k.dims();
        let s = self.cfg.supersample;
        let mut img = vec![0.0; w * h * 3];
        let mut depth = vec![0.0; w * h];
        let mut labels = vec![None; w * h];
        let mut hits = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let centre = self
                    .cast(frame, x as f64, y as f64)
                    .ok_or_else(|| Error::InvalidScene(format!("pixel ({x}, {y}) of frame {frame} sees no surface")))?;
                depth[i] = centre.depth;
                if let Surface::Object(j) = centre.surface {
                    labels[i] = Some(j);
                }
                let mut acc = [0.0; 3];
                let mut c = [0.0; 3];
                if s == 1 {
                    self.shade(&centre, &mut acc);
                } else {
                    for sy in 0..s {
                        for sx in 0..s {
                            let du = (sx as f64 + 0.5) / s as f64 - 0.5;
                            let dv = (sy as f64 + 0.5) / s as f64 - 0.5;
                            let hit = self.cast(frame, x as f64 + du, y as f64 + dv).unwrap_or(Hit {
                                depth: centre.depth,
                                surface: Surface::Background,
                                uv: centre.uv,
                            });
                            self.shade(&hit, &mut c);
                            for q in 0..3 {
                                acc[q] += c[q] / (s * s) as f64;
                            }
                        }
                    }
                }
                img[i * 3..i * 3 + 3].copy_from_slice(&acc);
                hits.push(Some(centre));
            }
        }
        let mut masks = InstanceMaskSet::new(w, h);
        for (j, o) in self.cfg.objects.iter().enumerate() {
            let data: Vec<bool> = labels.iter().map(|l| *l == Some(j)).collect();
            if data.iter().any(|&b| b) {
                masks.insert(o.id, o.category, BinaryMask::from_vec(w, h, data)?)?;
            }
        }
        Ok((
            RenderedFrame {
                image: Image::from_vec(w, h, 3, img)?,
                depth: DepthMap::from_vec(w, h, depth)?,
                masks,
                camera_from_world: self.camera_from_world[frame],
            },
            hits,
        ))
    }

    /// World motion of object `j` from frame `i` to `i + 1`.
    fn object_world_motion(&self, j: usize, i: usize) -> RigidTransform {
        self.world_from_object[i + 1][j].compose(&self.world_from_object[i][j].inverse())
    }

    /// Camera-`a` point to camera-`b` point for the surface hit at `a`.
    fn point_motion(&self, surface: &Surface, a: usize, b: usize) -> RigidTransform {
        let world_from_a = self.camera_from_world[a].inverse();
        let world = match surface {
            Surface::Background => RigidTransform::identity(),
            Surface::Object(j) => {
                if b > a {
                    self.object_world_motion(*j, a)
                } else {
                    self.object_world_motion(*j, b).inverse()
                }
            }
        };
        self.camera_from_world[b].compose(&world).compose(&world_from_a)
    }

    fn flow(&self, hits: &[Option<Hit>], a: usize, b: usize) -> Result<FlowField> {
        let k = &self.cfg.intrinsics;
        let (w, h) = k.dims();
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let f = match &hits[y * w + x] {
                    Some(hit) => {
                        let p = k.ray(x as f64, y as f64) * hit.depth;
                        let mut q = self.point_motion(&hit.surface, a, b).apply(&p);
                        q.z = q.z.max(MIN_DEPTH);
                        let (u, v) = k.project_raw(&q);
                        [u - x as f64, v - y as f64]
                    }
                    None => [0.0, 0.0],
                };
                data.push(f);
            }
        }
        FlowField::from_vec(w, h, data)
    }
}

/// Renders every frame with ground-truth depth, masks, flows and motions.
pub fn render_sequence(cfg: &SyntheticSceneConfig) -> Result<RenderedSequence> {
    let scene = Scene::new(cfg)?;
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut hits = Vec::with_capacity(cfg.frames);
    for i in 0..cfg.frames {
        let (f, h) = scene.render_frame(i)?;
        frames.push(f);
        hits.push(h);
    }
    let mut flows_forward = Vec::new();
    let mut flows_backward = Vec::new();
    let mut ego_motions = Vec::new();
    let mut object_motions = Vec::new();
    for i in 0..cfg.frames.saturating_sub(1) {
        flows_forward.push(scene.flow(&hits[i], i, i + 1)?);
        flows_backward.push(scene.flow(&hits[i + 1], i + 1, i)?);
        let e = scene.camera_from_world[i + 1].compose(&scene.camera_from_world[i].inverse());
        ego_motions.push(e.to_pose());
        let world_from_b = scene.camera_from_world[i + 1].inverse();
        let objs = cfg
            .objects
            .iter()
            .enumerate()
            .map(|(j, o)| {
                let m = scene.object_world_motion(j, i);
                let rel = scene.camera_from_world[i + 1].compose(&m).compose(&world_from_b);
                (o.id, rel.to_pose())
            })
            .collect();
        object_motions.push(objs);
    }
    Ok(RenderedSequence {
        intrinsics: cfg.intrinsics,
        frames,
        flows_forward,
        flows_backward,
        ego_motions,
        object_motions,
        object_categories: cfg.objects.iter().map(|o| (o.id, o.category)).collect(),
        object_heights: cfg.objects.iter().map(|o| (o.id, o.size[1])).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config(w: usize, h: usize, fx: f64) -> SyntheticSceneConfig {
        SyntheticSceneConfig {
            intrinsics: Intrinsics::new(fx, fx, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h).unwrap(),
            background: BackgroundConfig {
                depth: DepthProfile::Constant { depth: 10.0 },
                texture: TextureConfig::new(TextureKind::RandomBlocks { cell: 0.5 }, 0.5, 0.6),
            },
            objects: Vec::new(),
            ego: EgoTrajectory::Static,
            frames: 3,
            seed: 7,
            supersample: 1,
        }
    }

    #[test]
    fn static_scene_is_constant_with_zero_flow() {
        let seq = render_sequence(&base_config(24, 16, 20.0)).unwrap();
        assert_eq!(seq.frames[0].image, seq.frames[2].image);
        assert!(seq
            .flows_forward
            .iter()
            .all(|f| f.data().iter().all(|v| v[0] == 0.0 && v[1] == 0.0)));
        assert!(seq.frames[0].depth.values().iter().all(|&d| (d - 10.0).abs() < 1e-9));
    }

    #[test]
    fn moving_quad_flow_matches_projection() {
        let mut cfg = base_config(64, 48, 100.0);
        cfg.objects.push(ObjectConfig {
            id: 1,
            category: 1,
            size: [0.4, 0.4],
            center: [0.0, 0.0, 2.0],
            motion: MotionTrack::Constant {
                motion: PoseSE3::translation(0.2, 0.0, 0.0),
            },
            texture: TextureConfig::new(TextureKind::Checker { cell: 0.1 }, 0.5, 0.8),
        });
        let seq = render_sequence(&cfg).unwrap();
        let m = &seq.frames[0].masks.get(1).unwrap().mask;
        let f = &seq.flows_forward[0];
        let (mut sum, mut n) = (0.0, 0.0);
        for (i, &on) in m.data().iter().enumerate() {
            if on {
                sum += f.data()[i][0];
                n += 1.0;
            }
        }
        assert!((sum / n - 10.0).abs() < 1e-9);
        let o = seq.object_motions[0][&1];
        assert!((o.tx - 0.2).abs() < 1e-12 && o.rotation_angle() < 1e-12);
    }

    #[test]
    fn ramp_depth_profile() {
        let mut cfg = base_config(8, 11, 10.0);
        cfg.background.depth = DepthProfile::Ramp { top: 40.0, bottom: 5.0 };
        let seq = render_sequence(&cfg).unwrap();
        let d = &seq.frames[0].depth;
        assert!((d.get(3, 0) - 40.0).abs() < 1e-9);
        assert!((d.get(3, 10) - 5.0).abs() < 1e-9);
        let mid = 1.0 / (0.5 / 40.0 + 0.5 / 5.0);
        assert!((d.get(0, 5) - mid).abs() < 1e-9);
    }

    #[test]
    fn object_behind_camera_is_rejected() {
        let mut cfg = base_config(16, 16, 10.0);
        cfg.objects.push(ObjectConfig {
            id: 1,
            category: 1,
            size: [1.0, 1.0],
            center: [0.0, 0.0, 1.0],
            motion: MotionTrack::Constant {
                motion: PoseSE3::translation(0.0, 0.0, -0.8),
            },
            texture: TextureConfig::new(TextureKind::Checker { cell: 0.1 }, 0.5, 0.8),
        });
        assert!(matches!(render_sequence(&cfg), Err(Error::InvalidScene(_))));
    }

    #[test]
    fn rendering_is_deterministic() {
        let mut cfg = base_config(32, 20, 30.0);
        cfg.ego = EgoTrajectory::ConstantVelocity {
            motion: PoseSE3::new(0.0, 0.01, 0.0, 0.05, 0.0, -0.2),
        };
        cfg.supersample = 2;
        let a = render_sequence(&cfg).unwrap();
        let b = render_sequence(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn flows_agree_with_ego_motion() {
        let mut cfg = base_config(40, 30, 35.0);
        cfg.ego = EgoTrajectory::ConstantVelocity {
            motion: PoseSE3::new(0.01, -0.02, 0.0, 0.1, 0.0, -0.3),
        };
        let seq = render_sequence(&cfg).unwrap();
        let e = seq.ego_motions[0].to_transform();
        let k = seq.intrinsics;
        let d = &seq.frames[0].depth;
        for (x, y) in [(3, 4), (20, 15), (33, 25)] {
            let p = e.apply(&(k.ray(x as f64, y as f64) * d.get(x, y)));
            let (u, v) = k.project_raw(&p);
            let f = seq.flows_forward[0].get(x, y);
            assert!((u - x as f64 - f[0]).abs() < 1e-9 && (v - y as f64 - f[1]).abs() < 1e-9);
        }
    }
}
