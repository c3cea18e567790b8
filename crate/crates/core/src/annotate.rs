//! Video instance auto-annotation by flow-transported IoU matching, and
//! mask-based tracking metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_shape, Error, Result};
use crate::instance::{Instance, InstanceMaskSet};
use crate::raster::BinaryMask;
use crate::warp::Bilinear;

/// Dense displacement field in pixels, `(u, v)` per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    data: Vec<[f64; 2]>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0.0; 2]; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, u: f64, v: f64) -> Self {
        Self {
            width,
            height,
            data: vec![[u, v]; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<[f64; 2]>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "flow {width}x{height} needs {} vectors, got {}",
                width * height,
                data.len()
            )));
        }
        if data.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("flow values must be finite".into()));
        }
        Ok(Self { width, height, data })
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

    pub fn data(&self) -> &[[f64; 2]] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 2] {
        self.data[y * self.width + x]
    }

    /// Bilinear sample at a continuous position, `None` outside the grid.
    pub fn sample(&self, u: f64, v: f64) -> Option<[f64; 2]> {
        let b = Bilinear::at(u, v, self.width, self.height)?;
        let mut out = [0.0; 2];
        for i in 0..4 {
            let f = self.data[b.idx[i]];
            out[0] += b.w[i] * f[0];
            out[1] += b.w[i] * f[1];
        }
        Some(out)
    }
}

/// Thresholds of the forward-backward flow consistency test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsensusParams {
    pub a: f64,
    pub b: f64,
}

impl Default for ConsensusParams {
    fn default() -> Self {
        Self { a: 0.01, b: 0.5 }
    }
}

/// Pixels of frame 1 whose forward flow is not confirmed by the backward flow.
pub fn occlusion_consensus(f12: &FlowField, f21: &FlowField, p: &ConsensusParams) -> Result<BinaryMask> {
    ensure_same_shape("occlusion_consensus", f12.dims(), f21.dims())?;
    let (w, h) = f12.dims();
    Ok(BinaryMask::from_fn(w, h, |x, y| {
        let f = f12.get(x, y);
        let Some(g) = f21.sample(x as f64 + f[0], y as f64 + f[1]) else {
            return true;
        };
        let r = (f[0] + g[0]).powi(2) + (f[1] + g[1]).powi(2);
        let mag = f[0] * f[0] + f[1] * f[1] + g[0] * g[0] + g[1] * g[1];
        r > p.a * mag + p.b
    }))
}

/// Moves a frame-1 mask into frame 2 along the flow, skipping occluded pixels.
pub fn transport_mask(mask: &BinaryMask, f12: &FlowField, occluded: &BinaryMask) -> Result<BinaryMask> {
    ensure_same_shape("transport_mask flow", f12.dims(), mask.dims())?;
    ensure_same_shape("transport_mask occlusion", occluded.dims(), mask.dims())?;
    let (w, h) = mask.dims();
    let mut out = BinaryMask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) || occluded.get(x, y) {
                continue;
            }
            let f = f12.get(x, y);
            let (tx, ty) = ((x as f64 + f[0]).round(), (y as f64 + f[1]).round());
            if tx >= 0.0 && ty >= 0.0 && tx < w as f64 && ty < h as f64 {
                out.set(tx as usize, ty as usize, true);
            }
        }
    }
    Ok(out)
}

fn masked_iou(a: &BinaryMask, b: &BinaryMask, ignore: &BinaryMask) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for ((&x, &y), &skip) in a.data().iter().zip(b.data()).zip(ignore.data()) {
        if skip {
            continue;
        }
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// IoU of every `(a, b)` instance pair over pixels not marked in `ignore`.
pub fn iou_table(a: &[Instance], b: &[Instance], ignore: &BinaryMask) -> Result<Vec<Vec<f64>>> {
    for inst in a.iter().chain(b) {
        ensure_same_shape("iou_table", inst.mask.dims(), ignore.dims())?;
    }
    Ok(a.iter()
        .map(|x| b.iter().map(|y| masked_iou(&x.mask, &y.mask, ignore)).collect())
        .collect())
}

/// Assignment strategy for [`match_instances`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMethod {
    #[default]
    Greedy,
    Hungarian,
}

/// Partial one-to-one matching of rows to columns with IoU strictly above `tau`.
pub fn match_instances(iou: &[Vec<f64>], tau: f64, method: MatchMethod) -> Result<Vec<(usize, usize)>> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidArgument(format!("tau must lie in (0, 1], got {tau}")));
    }
    let rows = iou.len();
    let cols = iou.first().map_or(0, Vec::len);
    if iou.iter().any(|r| r.len() != cols) {
        return Err(Error::ShapeMismatch("IoU table rows differ in length".into()));
    }
    let mut pairs = match method {
        MatchMethod::Greedy => {
            let mut cand: Vec<(usize, usize)> = (0..rows)
                .flat_map(|i| (0..cols).map(move |j| (i, j)))
                .filter(|&(i, j)| iou[i][j] > tau)
                .collect();
            cand.sort_by(|&(a, b), &(c, d)| iou[c][d].total_cmp(&iou[a][b]).then((a, b).cmp(&(c, d))));
            let mut used_r = vec![false; rows];
            let mut used_c = vec![false; cols];
            let mut out = Vec::new();
            for (i, j) in cand {
                if !used_r[i] && !used_c[j] {
                    used_r[i] = true;
                    used_c[j] = true;
                    out.push((i, j));
                }
            }
            out
        }
        MatchMethod::Hungarian => hungarian(iou, rows, cols)
            .into_iter()
            .filter(|&(i, j)| iou[i][j] > tau)
            .collect(),
    };
    pairs.sort_unstable();
    Ok(pairs)
}

fn hungarian(iou: &[Vec<f64>], rows: usize, cols: usize) -> Vec<(usize, usize)> {
    use pathfinding::prelude::{kuhn_munkres, Matrix};
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    // The solver needs integer weights and no more rows than columns.
    let scale = |v: f64| (v * 1e9).round() as i64;
    let transpose = rows > cols;
    let (r, c) = if transpose { (cols, rows) } else { (rows, cols) };
    let m = Matrix::from_fn(
        r,
        c,
        |(i, j)| {
            if transpose {
                scale(iou[j][i])
            } else {
                scale(iou[i][j])
            }
        },
    );
    let (_, assign) = kuhn_munkres(&m);
    assign
        .into_iter()
        .enumerate()
        .map(|(i, j)| if transpose { (j, i) } else { (i, j) })
        .collect()
}

/// Tracker settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub tau: f64,
    pub consensus: ConsensusParams,
    pub method: MatchMethod,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            consensus: ConsensusParams::default(),
            method: MatchMethod::Greedy,
        }
    }
}

/// Per-frame masks carrying sequence-wide track IDs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackedSequence {
    pub frames: Vec<InstanceMaskSet>,
    /// Category of each track.
    pub categories: BTreeMap<u32, u32>,
    /// `(frame, track)` for every track started after the first frame.
    pub births: Vec<(usize, u32)>,
}

impl TrackedSequence {
    /// Wraps frames whose instance IDs already are track IDs.
    pub fn from_frames(frames: Vec<InstanceMaskSet>) -> Self {
        let mut categories = BTreeMap::new();
        for f in &frames {
            for inst in f.iter() {
                categories.insert(inst.id, inst.category);
            }
        }
        Self {
            frames,
            categories,
            births: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Links per-frame detections into tracks using adjacent-frame flows.
///
/// `flows_fwd[t]` maps frame `t` to `t + 1`, `flows_bwd[t]` maps `t + 1` to `t`.
pub fn track_sequence(
    detections: &[InstanceMaskSet],
    flows_fwd: &[FlowField],
    flows_bwd: &[FlowField],
    cfg: &TrackerConfig,
) -> Result<TrackedSequence> {
    let n = detections.len();
    if n > 0 && (flows_fwd.len() != n - 1 || flows_bwd.len() != n - 1) {
        return Err(Error::ShapeMismatch(format!(
            "{n} frames need {} flows per direction, got {} and {}",
            n - 1,
            flows_fwd.len(),
            flows_bwd.len()
        )));
    }
    let mut next_id = 1u32;
    let mut categories = BTreeMap::new();
    let mut births = Vec::new();
    let mut frames: Vec<InstanceMaskSet> = Vec::with_capacity(n);
    for (t, det) in detections.iter().enumerate() {
        let mut out = InstanceMaskSet::new(det.width(), det.height());
        let cur: Vec<&Instance> = det.iter().collect();
        let mut assigned: Vec<Option<u32>> = vec![None; cur.len()];
        if t > 0 {
            let prev: Vec<&Instance> = frames[t - 1].iter().collect();
            let (f12, f21) = (&flows_fwd[t - 1], &flows_bwd[t - 1]);
            let occ1 = occlusion_consensus(f12, f21, &cfg.consensus)?;
            let occ2 = occlusion_consensus(f21, f12, &cfg.consensus)?;
            let moved: Vec<Instance> = prev
                .iter()
                .map(|p| {
                    Ok(Instance {
                        id: p.id,
                        category: p.category,
                        mask: transport_mask(&p.mask, f12, &occ1)?,
                    })
                })
                .collect::<Result<_>>()?;
            let cur_owned: Vec<Instance> = cur.iter().map(|&c| c.clone()).collect();
            let mut iou = iou_table(&moved, &cur_owned, &occ2)?;
            for (i, row) in iou.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    if moved[i].category != cur[j].category {
                        *v = 0.0;
                    }
                }
            }
            for (i, j) in match_instances(&iou, cfg.tau, cfg.method)? {
                assigned[j] = Some(moved[i].id);
            }
        }
        for (j, inst) in cur.iter().enumerate() {
            let id = assigned[j].unwrap_or_else(|| {
                let id = next_id;
                next_id += 1;
                if t > 0 {
                    births.push((t, id));
                }
                id
            });
            next_id = next_id.max(id + 1);
            categories.insert(id, inst.category);
            out.insert(id, inst.category, inst.mask.clone())?;
        }
        frames.push(out);
    }
    Ok(TrackedSequence {
        frames,
        categories,
        births,
    })
}

/// Mask-based multi-object tracking scores. Ratios are `None` when undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotsScores {
    pub smotsa: Option<f64>,
    pub motsa: Option<f64>,
    pub motsp: Option<f64>,
    pub ids: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Evaluates a tracked hypothesis against ground truth. With `ids_zero`
/// identity switches are counted as 0 in the scores.
pub fn mots_metrics(hyp: &TrackedSequence, gt: &TrackedSequence, ids_zero: bool) -> Result<MotsScores> {
    if hyp.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "hypothesis has {} frames, ground truth {}",
            hyp.len(),
            gt.len()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut ids) = (0usize, 0usize, 0usize, 0usize);
    let mut n_gt = 0usize;
    let mut iou_sum = 0.0;
    let mut last: BTreeMap<u32, u32> = BTreeMap::new();
    for (h, g) in hyp.frames.iter().zip(&gt.frames) {
        ensure_same_shape("mots_metrics frame", h.dims(), g.dims())?;
        let none = BinaryMask::new(g.width(), g.height());
        let mut current = BTreeMap::new();
        let mut used = vec![false; h.len()];
        let hyps: Vec<&Instance> = h.iter().collect();
        for gi in g.iter() {
            n_gt += 1;
            let best = hyps
                .iter()
                .enumerate()
                .filter(|(j, hi)| !used[*j] && hi.category == gi.category)
                .map(|(j, hi)| (j, masked_iou(&gi.mask, &hi.mask, &none)))
                .filter(|&(_, v)| v > 0.5)
                .max_by(|a, b| a.1.total_cmp(&b.1));
            match best {
                Some((j, v)) => {
                    used[j] = true;
                    tp += 1;
                    iou_sum += v;
                    current.insert(gi.id, hyps[j].id);
                }
                None => fn_ += 1,
            }
        }
        fp += used.iter().filter(|u| !**u).count();
        for (g_id, h_id) in &current {
            if last.get(g_id).is_some_and(|prev| prev != h_id) {
                ids += 1;
            }
        }
        last = current;
    }
    let ids_eff = if ids_zero { 0 } else { ids };
    let (motsa, smotsa) = if n_gt == 0 {
        (None, None)
    } else {
        let n = n_gt as f64;
        (
            Some(1.0 - (fn_ + fp + ids_eff) as f64 / n),
            Some((iou_sum - fp as f64 - ids_eff as f64) / n),
        )
    };
    Ok(MotsScores {
        smotsa,
        motsa,
        motsp: (tp > 0).then(|| iou_sum / tp as f64),
        ids: ids_eff,
        tp,
        fp,
        fn_,
    })
}
