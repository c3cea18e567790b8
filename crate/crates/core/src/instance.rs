//! Background/instance decomposition and instance-wise view composition.

use std::collections::BTreeMap;

use crate::error::{ensure_same_shape, Error, Result};
use crate::geometry::{Intrinsics, PoseSE3};
use crate::raster::{BinaryMask, DepthMap, Image, InconsistencyMap, ScalarMap};
use crate::warp::inverse_warp;

/// Instances with fewer pixels than this are ignored by default.
pub const DEFAULT_MIN_INSTANCE_PIXELS: usize = 9;

/// One instance mask with its identity and category.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: u32,
    pub category: u32,
    pub mask: BinaryMask,
}

impl Instance {
    pub fn pixel_count(&self) -> usize {
        self.mask.count()
    }
}

/// Pairwise-disjoint instance masks of one frame, keyed by ID (0 is background).
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMaskSet {
    width: usize,
    height: usize,
    instances: Vec<Instance>,
}

impl InstanceMaskSet {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            instances: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Adds an instance, keeping the set sorted by ID.
    pub fn insert(&mut self, id: u32, category: u32, mask: BinaryMask) -> Result<()> {
        if id == 0 {
            return Err(Error::InvalidArgument(
                "instance ID 0 is reserved for background".into(),
            ));
        }
        ensure_same_shape("instance mask", mask.dims(), self.dims())?;
        if self.get(id).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate instance ID {id}")));
        }
        if let Some(other) = self.instances.iter().find(|o| o.mask.intersection(&mask).count() > 0) {
            return Err(Error::InvalidArgument(format!(
                "instance {id} overlaps instance {}",
                other.id
            )));
        }
        let at = self.instances.partition_point(|o| o.id < id);
        self.instances.insert(at, Instance { id, category, mask });
        Ok(())
    }

    /// Decodes a label map where each value is `1000 * category + id` and 0 is background.
    pub fn from_label_map(width: usize, height: usize, labels: &[u32]) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "label map {width}x{height} needs {} values, got {}",
                width * height,
                labels.len()
            )));
        }
        let mut by_label: BTreeMap<u32, Vec<bool>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            if l != 0 {
                by_label.entry(l).or_insert_with(|| vec![false; width * height])[i] = true;
            }
        }
        let mut set = Self::new(width, height);
        for (label, data) in by_label {
            let (category, id) = (label / 1000, label % 1000);
            set.insert(id, category, BinaryMask::from_vec(width, height, data)?)?;
        }
        Ok(set)
    }

    pub fn to_label_map(&self) -> Vec<u32> {
        let mut labels = vec![0; self.width * self.height];
        for inst in &self.instances {
            for (l, &m) in labels.iter_mut().zip(inst.mask.data()) {
                if m {
                    *l = 1000 * inst.category + inst.id;
                }
            }
        }
        labels
    }

    pub fn get(&self, id: u32) -> Option<&Instance> {
        self.instances
            .binary_search_by_key(&id, |o| o.id)
            .ok()
            .map(|i| &self.instances[i])
    }

    pub fn ids(&self) -> Vec<u32> {
        self.instances.iter().map(|o| o.id).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Instance> {
        self.instances.iter()
    }

    pub fn pixel_counts(&self) -> BTreeMap<u32, usize> {
        self.instances.iter().map(|o| (o.id, o.pixel_count())).collect()
    }

    pub fn union(&self) -> BinaryMask {
        self.instances
            .iter()
            .fold(BinaryMask::new(self.width, self.height), |acc, o| acc.union(&o.mask))
    }

    /// Per-pixel instance ID, 0 for background.
    pub fn id_map(&self) -> Vec<u32> {
        let mut ids = vec![0; self.width * self.height];
        for inst in &self.instances {
            for (l, &m) in ids.iter_mut().zip(inst.mask.data()) {
                if m {
                    *l = inst.id;
                }
            }
        }
        ids
    }
}

/// A matched adjacent-frame sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub i1: Image,
    pub i2: Image,
    pub d1: DepthMap,
    pub d2: DepthMap,
    pub m1: InstanceMaskSet,
    pub m2: InstanceMaskSet,
    pub k: Intrinsics,
}

impl ScenePair {
    pub fn new(
        i1: Image,
        i2: Image,
        d1: DepthMap,
        d2: DepthMap,
        m1: InstanceMaskSet,
        m2: InstanceMaskSet,
        k: Intrinsics,
    ) -> Result<Self> {
        let dims = k.dims();
        ensure_same_shape("frame 1 image", i1.dims(), dims)?;
        ensure_same_shape("frame 2 image", i2.dims(), dims)?;
        ensure_same_shape("frame 1 depth", d1.dims(), dims)?;
        ensure_same_shape("frame 2 depth", d2.dims(), dims)?;
        ensure_same_shape("frame 1 masks", m1.dims(), dims)?;
        ensure_same_shape("frame 2 masks", m2.dims(), dims)?;
        if i1.channels() != i2.channels() {
            return Err(Error::ShapeMismatch("frames have different channel counts".into()));
        }
        Ok(Self {
            i1,
            i2,
            d1,
            d2,
            m1,
            m2,
            k,
        })
    }

    /// IDs present in both frames with the same category and at least
    /// `min_pixels` pixels in each.
    pub fn matched_ids(&self, min_pixels: usize) -> Vec<u32> {
        self.m1
            .iter()
            .filter(|a| {
                self.m2.get(a.id).is_some_and(|b| {
                    b.category == a.category && a.pixel_count() >= min_pixels && b.pixel_count() >= min_pixels
                })
            })
            .map(|a| a.id)
            .collect()
    }

    /// The same pair with frames swapped.
    pub fn swapped(&self) -> ScenePair {
        ScenePair {
            i1: self.i2.clone(),
            i2: self.i1.clone(),
            d1: self.d2.clone(),
            d2: self.d1.clone(),
            m1: self.m2.clone(),
            m2: self.m1.clone(),
            k: self.k,
        }
    }
}

/// Pixels that belong to no instance in either frame.
pub fn background_mask(m1: &InstanceMaskSet, m2: &InstanceMaskSet) -> BinaryMask {
    m1.union().union(&m2.union()).complement()
}

/// Background of frame 2 reconstructed by sampling frame 1 under the ego pose.
pub fn reconstruct_background(
    i1: &Image,
    d2: &DepthMap,
    ego_pose_2_to_1: &PoseSE3,
    k: &Intrinsics,
    bg_mask: &BinaryMask,
) -> Result<Image> {
    ensure_same_shape("background mask", bg_mask.dims(), k.dims())?;
    let warped = inverse_warp(i1, d2, ego_pose_2_to_1, k)?;
    Ok(warped.to_image().masked(bg_mask))
}

/// Instance `k` of frame 2 reconstructed from its ego-compensated image.
pub fn reconstruct_instance(
    fw_instance_image: &Image,
    d2: &DepthMap,
    obj_pose_2_to_1: &PoseSE3,
    k: &Intrinsics,
) -> Result<Image> {
    Ok(inverse_warp(fw_instance_image, d2, obj_pose_2_to_1, k)?.to_image())
}

/// Inverse-warped instance mask, rounded up to `{0, 1}`.
pub fn propagate_instance_mask(
    fw_mask: &BinaryMask,
    d2: &DepthMap,
    obj_pose_2_to_1: &PoseSE3,
    k: &Intrinsics,
) -> Result<BinaryMask> {
    Ok(inverse_warp(fw_mask, d2, obj_pose_2_to_1, k)?.to_mask_ceil())
}

/// One region of the composed view: its pixels, colours and the depth used
/// to resolve overlaps (smaller is nearer).
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionLayer {
    pub id: u32,
    pub image: Image,
    pub mask: BinaryMask,
    pub depth: DepthMap,
}

/// Composed view with the owning layer ID per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub image: Image,
    pub owner: Vec<Option<u32>>,
}

impl Composite {
    /// Per-layer masks after overlap resolution.
    pub fn region(&self, id: u32) -> BinaryMask {
        let w = self.image.width();
        let h = self.image.height();
        let data = self.owner.iter().map(|&o| o == Some(id)).collect();
        BinaryMask::from_vec(w, h, data).expect("shape is consistent")
    }
}

/// Sums disjoint layers into one view. Where masks overlap the nearer
/// layer wins; equal depths go to the lower ID.
pub fn compose_full(bg: &CompositionLayer, instances: &[CompositionLayer]) -> Result<Composite> {
    let (w, h) = bg.image.dims();
    let ch = bg.image.channels();
    for l in std::iter::once(bg).chain(instances) {
        ensure_same_shape("composition image", l.image.dims(), (w, h))?;
        ensure_same_shape("composition mask", l.mask.dims(), (w, h))?;
        ensure_same_shape("composition depth", l.depth.dims(), (w, h))?;
        if l.image.channels() != ch {
            return Err(Error::ShapeMismatch("layers have different channel counts".into()));
        }
    }
    let mut image = Image::new(w, h, ch);
    let mut owner = vec![None; w * h];
    for i in 0..w * h {
        let mut best: Option<(&CompositionLayer, f64)> = None;
        for l in std::iter::once(bg).chain(instances) {
            if !l.mask.data()[i] {
                continue;
            }
            let d = if l.depth.is_valid(i) {
                l.depth.values()[i]
            } else {
                f64::INFINITY
            };
            let better = match best {
                None => true,
                Some((b, bd)) => d < bd || (d == bd && l.id < b.id),
            };
            if better {
                best = Some((l, d));
            }
        }
        if let Some((l, _)) = best {
            owner[i] = Some(l.id);
            image.pixel_mut(i).copy_from_slice(l.image.pixel(i));
        }
    }
    Ok(Composite { image, owner })
}

/// Background mask plus all propagated instance masks.
pub fn union_valid_mask(bg_mask: &BinaryMask, propagated: &[BinaryMask]) -> Result<BinaryMask> {
    let mut out = bg_mask.clone();
    for m in propagated {
        ensure_same_shape("union_valid_mask", m.dims(), bg_mask.dims())?;
        out = out.union(m);
    }
    Ok(out)
}

/// Normalized depth difference `|a - b| / (a + b)` inside `region`.
#[inline]
pub fn depth_difference(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a + b)
}

pub fn depth_inconsistency(aligned: &DepthMap, sc_depth: &DepthMap, region: &BinaryMask) -> Result<InconsistencyMap> {
    ensure_same_shape("depth_inconsistency depths", aligned.dims(), sc_depth.dims())?;
    ensure_same_shape("depth_inconsistency region", region.dims(), aligned.dims())?;
    let (w, h) = aligned.dims();
    let mut values = vec![0.0; w * h];
    let mut valid = vec![false; w * h];
    for i in 0..w * h {
        if !region.data()[i] || !aligned.is_valid(i) || !sc_depth.is_valid(i) {
            continue;
        }
        let (a, b) = (aligned.values()[i], sc_depth.values()[i]);
        if a + b > 0.0 {
            values[i] = depth_difference(a, b);
            valid[i] = true;
        }
    }
    Ok(InconsistencyMap::from_parts(w, h, values, valid))
}

/// Sums inconsistency maps defined on disjoint regions.
pub fn merge_inconsistency(bg: &InconsistencyMap, instances: &[InconsistencyMap]) -> Result<InconsistencyMap> {
    let (w, h) = bg.dims();
    let mut values = bg.values().to_vec();
    let mut valid = bg.validity().to_vec();
    for m in instances {
        ensure_same_shape("merge_inconsistency", m.dims(), (w, h))?;
        for i in 0..w * h {
            if m.is_valid(i) {
                values[i] += m.values()[i];
                valid[i] = true;
            }
        }
    }
    Ok(InconsistencyMap::from_parts(w, h, values, valid))
}

/// `V = (1 - D_diff) * M`, zero where the inconsistency is undefined.
pub fn weighted_valid_mask(ddiff: &InconsistencyMap, valid_mask: &BinaryMask) -> Result<ScalarMap> {
    ensure_same_shape("weighted_valid_mask", ddiff.dims(), valid_mask.dims())?;
    let (w, h) = ddiff.dims();
    let data = (0..w * h)
        .map(|i| {
            if valid_mask.data()[i] && ddiff.is_valid(i) {
                (1.0 - ddiff.values()[i]).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect();
    Ok(ScalarMap::from_vec(w, h, data))
}
