//! Per-direction view synthesis and losses with their analytic gradient.
//!
//! Each evaluation runs in two parts. The frozen part splats the source
//! frame with the current ego motion, computes translation priors and
//! decides which target pixels each region (background or instance)
//! reconstructs and from which bilinear cell. The differentiable part
//! resamples those pixels under the current poses and evaluates the loss
//! terms; gradients flow only through it.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{backproject, euler_rotation_derivatives, PoseSE3, RigidTransform, MIN_DEPTH};
use crate::instance::{background_mask, depth_difference, ScenePair};
use crate::losses::{
    height_terms, ssim_channel, ssim_channel_grad_b, translation_prior, HeightPriors, HeightTerm, LossBreakdown,
    LossConfig, LossTerms, SmoothnessPairs, HEIGHT_PRIOR_RANGE,
};
use crate::raster::{BinaryMask, DepthMap, Image, InconsistencyMap, Raster, ScalarMap};
use crate::warp::{Bilinear, Splat, SplatConfig};

use super::{GradientMode, OptimizerConfig, SceneGradient, SceneParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Dir {
    /// Frame 1 reconstructs frame 2.
    Forward,
    /// Frame 2 reconstructs frame 1.
    Backward,
}

impl Dir {
    fn src(self) -> usize {
        match self {
            Dir::Forward => 0,
            Dir::Backward => 1,
        }
    }

    fn tgt(self) -> usize {
        1 - self.src()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Param {
    Ego,
    Object(u32),
}

/// `X = post * g * pre * X_t` where `g` is the pose of `param`, inverted
/// when `inverted` is set. `pre` and `post` carry no gradient.
#[derive(Debug, Clone, Copy)]
struct RegionWarp {
    pre: RigidTransform,
    post: RigidTransform,
    inverted: bool,
    param: Param,
}

impl RegionWarp {
    fn plain(inverted: bool, param: Param) -> Self {
        Self {
            pre: RigidTransform::identity(),
            post: RigidTransform::identity(),
            inverted,
            param,
        }
    }

    fn conjugated(ego: &RigidTransform, inverted: bool, param: Param) -> Self {
        Self {
            pre: *ego,
            post: ego.inverse(),
            inverted,
            param,
        }
    }

    fn pose<'p>(&self, params: &'p SceneParams) -> &'p PoseSE3 {
        match self.param {
            Param::Ego => &params.ego,
            Param::Object(id) => &params.objects[&id],
        }
    }

    fn core(&self, pose: &PoseSE3) -> RigidTransform {
        let g = pose.to_transform();
        if self.inverted {
            g.inverse()
        } else {
            g
        }
    }

    fn transform(&self, pose: &PoseSE3) -> RigidTransform {
        self.post.compose(&self.core(pose)).compose(&self.pre)
    }

    /// Derivative of the output point with respect to the input point.
    fn point_jacobian(&self, pose: &PoseSE3) -> Matrix3<f64> {
        self.post.rotation * self.core(pose).rotation * self.pre.rotation
    }
}

/// Running sums of `(dX/dtheta)^T G` over points `Y = pre * X_t`.
#[derive(Debug, Clone, Copy)]
struct PoseAcc {
    g: Vector3<f64>,
    outer: Matrix3<f64>,
}

impl Default for PoseAcc {
    fn default() -> Self {
        Self {
            g: Vector3::zeros(),
            outer: Matrix3::zeros(),
        }
    }
}

impl PoseAcc {
    fn add(&mut self, warp: &RegionWarp, pose_t: &Vector3<f64>, y: &Vector3<f64>, g_x: &Vector3<f64>) {
        let gp = warp.post.rotation.transpose() * g_x;
        self.g += gp;
        if warp.inverted {
            self.outer += (y - pose_t) * gp.transpose();
        } else {
            self.outer += gp * y.transpose();
        }
    }

    fn finish(&self, warp: &RegionWarp, pose: &PoseSE3) -> [f64; 6] {
        let d = euler_rotation_derivatives(pose.rx, pose.ry, pose.rz);
        let dt = if warp.inverted {
            -(pose.to_transform().rotation * self.g)
        } else {
            self.g
        };
        [
            d[0].component_mul(&self.outer).sum(),
            d[1].component_mul(&self.outer).sum(),
            d[2].component_mul(&self.outer).sum(),
            dt.x,
            dt.y,
            dt.z,
        ]
    }
}

/// Sign with `sign(0) = 0`, the subgradient used for absolute values.
#[inline]
fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// The fixed inputs of one optimization problem.
pub(crate) struct Problem<'a> {
    pub pair: &'a ScenePair,
    pub matched: Vec<u32>,
    pub loss: LossConfig,
    pub splat: SplatConfig,
    /// Smoothness pairs and height terms per target frame. Both depend on
    /// the images and depth validity only, which parameters never change.
    smooth: [SmoothnessPairs; 2],
    heights: [Vec<HeightTerm>; 2],
}

impl<'a> Problem<'a> {
    pub fn new(pair: &'a ScenePair, cfg: &OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        let matched = pair.matched_ids(cfg.min_instance_pixels);
        let smooth = [
            SmoothnessPairs::new(&pair.d1, &pair.i1),
            SmoothnessPairs::new(&pair.d2, &pair.i2),
        ];
        let heights = [
            height_terms(&pair.d1, &pair.m1, &matched),
            height_terms(&pair.d2, &pair.m2, &matched),
        ];
        Ok(Self {
            pair,
            matched,
            loss: cfg.effective_loss(),
            splat: SplatConfig::with_alpha(cfg.alpha),
            smooth,
            heights,
        })
    }

    /// Rejects parameters this problem cannot be evaluated at.
    pub fn check_params(&self, params: &SceneParams) -> Result<()> {
        if !params.is_finite() {
            return Err(Error::InvalidArgument("scene parameters must be finite".into()));
        }
        if let Some(c) = &params.depth_correction {
            c.validate()?;
        }
        if let Some(&id) = self.matched.iter().find(|id| !params.objects.contains_key(id)) {
            return Err(Error::MissingInstancePose(id));
        }
        Ok(())
    }

    fn depths(&self, params: &SceneParams) -> [DepthMap; 2] {
        match &params.depth_correction {
            Some(c) => [c.apply(&self.pair.d1, 0), c.apply(&self.pair.d2, 1)],
            None => [self.pair.d1.clone(), self.pair.d2.clone()],
        }
    }

    fn frame(&self, i: usize) -> (&Image, &crate::instance::InstanceMaskSet) {
        if i == 0 {
            (&self.pair.i1, &self.pair.m1)
        } else {
            (&self.pair.i2, &self.pair.m2)
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Owned {
    idx: usize,
    /// 0 for background, `j + 1` for the `j`-th matched instance.
    region: usize,
    x0: usize,
    y0: usize,
}

/// Non-differentiable state of one direction.
pub(crate) struct Frozen {
    dir: Dir,
    /// Ego transform at freeze time; fixes the splat and the conjugation
    /// of object motions in the backward direction.
    ego: RigidTransform,
    fw_image: Image,
    fw_depth: Vec<f64>,
    owned: Vec<Owned>,
    priors: Vec<Option<Vector3<f64>>>,
}

/// Background and instance samplers, and the motions compared with the
/// translation priors.
fn region_warps(dir: Dir, ego: &RigidTransform, matched: &[u32]) -> (Vec<RegionWarp>, Vec<RegionWarp>) {
    match dir {
        Dir::Forward => {
            let mut samplers = vec![RegionWarp::plain(true, Param::Ego)];
            samplers.extend(matched.iter().map(|&id| RegionWarp::plain(true, Param::Object(id))));
            let motions = matched
                .iter()
                .map(|&id| RegionWarp::plain(false, Param::Object(id)))
                .collect();
            (samplers, motions)
        }
        Dir::Backward => {
            let mut samplers = vec![RegionWarp::plain(false, Param::Ego)];
            samplers.extend(
                matched
                    .iter()
                    .map(|&id| RegionWarp::conjugated(ego, false, Param::Object(id))),
            );
            let motions = matched
                .iter()
                .map(|&id| RegionWarp::conjugated(ego, true, Param::Object(id)))
                .collect();
            (samplers, motions)
        }
    }
}

/// Bilinear cell for `(u, v)` whose positive-weight taps pass `ok`.
///
/// On exact grid coordinates the neighbouring cell is preferred when its
/// zero-weight taps also pass, so small motions stay on usable samples.
fn choose_cell(u: f64, v: f64, w: usize, h: usize, ok: impl Fn(usize) -> bool) -> Option<(usize, usize)> {
    let b = Bilinear::at(u, v, w, h)?;
    if !b.all_weighted(&ok) {
        return None;
    }
    let uc = u.clamp(0.0, (w - 1) as f64);
    let vc = v.clamp(0.0, (h - 1) as f64);
    let xb = (uc.floor() as usize).min(w.saturating_sub(2));
    let yb = (vc.floor() as usize).min(h.saturating_sub(2));
    let mut xs = vec![xb];
    if uc == xb as f64 && xb >= 1 {
        xs.push(xb - 1);
    }
    let mut ys = vec![yb];
    if vc == yb as f64 && yb >= 1 {
        ys.push(yb - 1);
    }
    for &y0 in &ys {
        for &x0 in &xs {
            let c = Bilinear::in_cell(uc, vc, x0, y0, w, h);
            if c.idx.iter().all(|&q| ok(q)) {
                return Some((x0, y0));
            }
        }
    }
    Some((xb, yb))
}

pub(crate) fn freeze(p: &Problem, dir: Dir, params: &SceneParams) -> Result<Frozen> {
    let k = p.pair.k;
    let (w, h) = k.dims();
    let depths = p.depths(params);
    let (d_s, d_t) = (&depths[dir.src()], &depths[dir.tgt()]);
    let (src_img, src_masks) = p.frame(dir.src());
    let (_, tgt_masks) = p.frame(dir.tgt());

    let ego = params.ego.to_transform();
    let e_st = match dir {
        Dir::Forward => ego,
        Dir::Backward => ego.inverse(),
    };
    let splat = Splat::new(d_s, &e_st, &k, &p.splat)?;
    let fw_image = splat.image(src_img)?;
    let fw_depth = splat.depth().values().to_vec();
    let moved_src = backproject(d_s, &k)?.transformed(&e_st);
    let tgt_points = backproject(d_t, &k)?;

    let mut cores = Vec::with_capacity(p.matched.len());
    let mut priors = Vec::with_capacity(p.matched.len());
    for &id in &p.matched {
        let sm = &src_masks.get(id).expect("matched in source").mask;
        let tm = &tgt_masks.get(id).expect("matched in target").mask;
        // Splats built only from this instance's pixels.
        let core: Vec<bool> = splat
            .winners
            .iter()
            .map(|s| s.is_some_and(|s| (0..s.taps.n).all(|q| s.taps.w[q] <= 0.0 || sm.data()[s.taps.idx[q]])))
            .collect();
        // The warped points themselves, not their rasterized copies: masks
        // of the splat lose boundary pixels on one side and shift the mean.
        priors.push(translation_prior(&moved_src, sm, &tgt_points, tm)?);
        cores.push(core);
    }

    let bg = background_mask(src_masks, tgt_masks);
    let src_union = src_masks.union();
    let tgt_ids = tgt_masks.id_map();
    let region_of: BTreeMap<u32, usize> = p.matched.iter().enumerate().map(|(j, &id)| (id, j + 1)).collect();
    let (samplers, _) = region_warps(dir, &ego, &p.matched);
    let transforms: Vec<RigidTransform> = samplers.iter().map(|s| s.transform(s.pose(params))).collect();

    let mut owned = Vec::new();
    for idx in 0..w * h {
        if !d_t.is_valid(idx) {
            continue;
        }
        let region = if bg.data()[idx] {
            0
        } else if let Some(&r) = region_of.get(&tgt_ids[idx]) {
            r
        } else {
            continue;
        };
        let (x, y) = (idx % w, idx / w);
        let xs = transforms[region].apply(&(k.ray(x as f64, y as f64) * d_t.values()[idx]));
        if !(xs.z > MIN_DEPTH) {
            continue;
        }
        let (u, v) = k.project_raw(&xs);
        let cell = if region == 0 {
            choose_cell(u, v, w, h, |q| d_s.is_valid(q) && !src_union.data()[q])
        } else {
            let core = &cores[region - 1];
            choose_cell(u, v, w, h, |q| core[q])
        };
        if let Some((x0, y0)) = cell {
            owned.push(Owned { idx, region, x0, y0 });
        }
    }

    Ok(Frozen {
        dir,
        ego,
        fw_image,
        fw_depth,
        owned,
        priors,
    })
}

/// Gradient sums of one evaluation, before the depth chain rule.
pub(crate) struct GradAcc {
    pub ego: [f64; 6],
    pub objects: BTreeMap<u32, [f64; 6]>,
    /// `dL/dD` per frame on the full pixel grid.
    pub depth: [Vec<f64>; 2],
    pub height: BTreeMap<u32, f64>,
}

impl GradAcc {
    fn new(params: &SceneParams, n: usize) -> Self {
        Self {
            ego: [0.0; 6],
            objects: params.objects.keys().map(|&id| (id, [0.0; 6])).collect(),
            depth: [vec![0.0; n], vec![0.0; n]],
            height: BTreeMap::new(),
        }
    }

    fn add_pose(&mut self, param: Param, g: [f64; 6]) {
        let slot = match param {
            Param::Ego => &mut self.ego,
            Param::Object(id) => self.objects.get_mut(&id).expect("object has a pose"),
        };
        for i in 0..6 {
            slot[i] += g[i];
        }
    }
}

/// Everything one direction produces.
pub(crate) struct DirectionOutput {
    pub terms: LossTerms,
    pub reconstruction: Image,
    pub owner: Vec<Option<u32>>,
    pub ddiff: Vec<f64>,
    pub weights: Vec<f64>,
    pub degenerate: bool,
    pub n_owned: usize,
}

struct PixelState {
    bil: Bilinear,
    xt: Vector3<f64>,
    xs: Vector3<f64>,
    a: f64,
    b: f64,
    dd: f64,
    clamped: bool,
}

fn height_prior_value(priors: &HeightPriors, category: u32) -> (f64, bool) {
    let raw = priors.per_category.get(&category).copied().unwrap_or(priors.default);
    let inside = raw > HEIGHT_PRIOR_RANGE.0 && raw < HEIGHT_PRIOR_RANGE.1;
    (priors.get(category), inside)
}

pub(crate) fn run(
    p: &Problem,
    f: &Frozen,
    params: &SceneParams,
    depths: &[DepthMap; 2],
    mut grad: Option<(&mut GradAcc, f64)>,
) -> DirectionOutput {
    let k = p.pair.k;
    let (w, h) = k.dims();
    let n = w * h;
    let dir = f.dir;
    let (d_s, d_t) = (&depths[dir.src()], &depths[dir.tgt()]);
    let (src_img, _) = p.frame(dir.src());
    let (tgt_img, _) = p.frame(dir.tgt());
    let ch = tgt_img.channels();
    let lc = &p.loss;
    let gamma = lc.gamma;

    let (samplers, motions) = region_warps(dir, &f.ego, &p.matched);
    let poses: Vec<&PoseSE3> = samplers.iter().map(|s| s.pose(params)).collect();
    let transforms: Vec<RigidTransform> = samplers.iter().zip(&poses).map(|(s, q)| s.transform(q)).collect();

    let mut ihat = tgt_img.clone();
    let mut owner = vec![None; n];
    let mut states = Vec::with_capacity(f.owned.len());
    for o in &f.owned {
        let (x, y) = (o.idx % w, o.idx / w);
        let xt = k.ray(x as f64, y as f64) * d_t.values()[o.idx];
        let xs = transforms[o.region].apply(&xt);
        let (u, v) = k.project_raw(&xs);
        let bil = Bilinear::in_cell(u, v, o.x0, o.y0, w, h);
        let (src, sdepth): (&Image, &[f64]) = if o.region == 0 {
            (src_img, d_s.values())
        } else {
            (&f.fw_image, &f.fw_depth)
        };
        let px = ihat.pixel_mut(o.idx);
        for (c, val) in px.iter_mut().enumerate() {
            *val = bil.sample(src, c);
        }
        let a = bil.sample_slice(sdepth);
        let b = xs.z;
        let clamped = !(a > MIN_DEPTH && b > MIN_DEPTH);
        let dd = depth_difference(a.max(MIN_DEPTH), b.max(MIN_DEPTH));
        owner[o.idx] = Some(if o.region == 0 { 0 } else { p.matched[o.region - 1] });
        states.push(PixelState {
            bil,
            xt,
            xs,
            a,
            b,
            dd,
            clamped,
        });
    }

    // Reconstruction: owned pixels carry Î, the rest keep the target so the
    // SSIM windows around region borders see no artificial edges.
    let ssim_params = lc.ssim_params();
    let tgt_channels: Vec<Vec<f64>> = (0..ch).map(|c| tgt_img.channel(c).data().to_vec()).collect();
    let hat_channels: Vec<Vec<f64>> = (0..ch).map(|c| ihat.channel(c).data().to_vec()).collect();
    let ssim: Vec<Vec<f64>> = (0..ch)
        .map(|c| ssim_channel(&tgt_channels[c], &hat_channels[c], w, h, &ssim_params))
        .collect();
    let mut errors = Vec::with_capacity(states.len());
    let (mut num, mut sum_v, mut sum_dd) = (0.0, 0.0, 0.0);
    for (o, s) in f.owned.iter().zip(&states) {
        let mut l1 = 0.0;
        let mut ss = 0.0;
        for c in 0..ch {
            l1 += (tgt_img.value(o.idx, c) - ihat.value(o.idx, c)).abs();
            ss += ssim[c][o.idx];
        }
        let e = (1.0 - gamma) * l1 / ch as f64 + gamma * (1.0 - ss / ch as f64);
        let v = 1.0 - s.dd;
        num += v * e;
        sum_v += v;
        sum_dd += s.dd;
        errors.push(e);
    }
    let degenerate = sum_v <= 0.0;
    let l_r = if degenerate { 0.0 } else { num / sum_v };
    let n_owned = f.owned.len();
    let l_g = if n_owned == 0 { 0.0 } else { sum_dd / n_owned as f64 };
    let smooth = &p.smooth[dir.tgt()];
    let heights = &p.heights[dir.tgt()];
    let l_s = smooth.loss(d_t.values());

    let mut lt_sum = 0.0;
    let mut lt_count = 0usize;
    for (j, prior) in f.priors.iter().enumerate() {
        if let Some(tp) = prior {
            let m = &motions[j];
            let t = m.transform(m.pose(params)).translation;
            lt_sum += (t - tp).abs().sum();
            lt_count += 1;
        }
    }
    let l_t = if lt_count == 0 { 0.0 } else { lt_sum / lt_count as f64 };

    let dbar = d_t.valid_mean();
    let mut height_values = Vec::with_capacity(heights.len());
    if let Some(dbar) = dbar {
        for t in heights {
            let (ph, _) = height_prior_value(&params.height_priors, t.category);
            let target = k.fy * ph / t.pixel_height;
            let s: f64 = t.pixels.iter().map(|&i| (d_t.values()[i] - target).abs()).sum();
            height_values.push(s / t.pixels.len() as f64 / dbar);
        }
    }
    let l_h: f64 = height_values.iter().sum();

    let terms = LossTerms {
        l_r,
        l_g,
        l_s,
        l_t,
        l_h,
    };

    if let Some((acc, scale)) = grad.as_mut() {
        let scale = *scale;
        let (wr, wg, ws, wt, wh) = (
            lc.lambda_r * scale,
            lc.lambda_g * scale,
            lc.lambda_s * scale,
            lc.lambda_t * scale,
            lc.lambda_h * scale,
        );
        let mut pose_accs = vec![PoseAcc::default(); samplers.len()];
        let jac: Vec<Matrix3<f64>> = samplers.iter().zip(&poses).map(|(s, q)| s.point_jacobian(q)).collect();
        let want_depth = params.depth_correction.is_some();
        let (mut gd_t, mut gd_s) = (vec![0.0; n], vec![0.0; n]);

        // dL/dÎ through SSIM, per channel on the full grid.
        let mut ssim_adj = vec![vec![0.0; n]; ch];
        if !degenerate && wr != 0.0 {
            let mut g = vec![0.0; n];
            for (o, s) in f.owned.iter().zip(&states) {
                g[o.idx] = -wr * gamma * (1.0 - s.dd) / sum_v / ch as f64;
            }
            for c in 0..ch {
                ssim_adj[c] = ssim_channel_grad_b(&tgt_channels[c], &hat_channels[c], w, h, &ssim_params, &g);
            }
        }

        for ((o, s), &e) in f.owned.iter().zip(&states).zip(&errors) {
            let v = 1.0 - s.dd;
            let g_v = if degenerate { 0.0 } else { wr * (e - l_r) / sum_v };
            let g_dd = -g_v + wg / n_owned as f64;
            let (src, sdepth): (&Image, &[f64]) = if o.region == 0 {
                (src_img, d_s.values())
            } else {
                (&f.fw_image, &f.fw_depth)
            };
            let (mut gu, mut gv) = (0.0, 0.0);
            for c in 0..ch {
                let mut g_i = ssim_adj[c][o.idx];
                if !degenerate {
                    g_i += wr * v / sum_v * (1.0 - gamma) / ch as f64
                        * sgn(ihat.value(o.idx, c) - tgt_img.value(o.idx, c));
                }
                if g_i == 0.0 {
                    continue;
                }
                let (mut du, mut dv) = (0.0, 0.0);
                for q in 0..4 {
                    let val = src.value(s.bil.idx[q], c);
                    du += s.bil.dw_du[q] * val;
                    dv += s.bil.dw_dv[q] * val;
                }
                gu += g_i * du;
                gv += g_i * dv;
            }
            let mut g_b = 0.0;
            let mut g_a = 0.0;
            if !s.clamped {
                let sum = s.a + s.b;
                let sign = sgn(s.a - s.b);
                g_a = g_dd * sign * 2.0 * s.b / (sum * sum);
                g_b = -g_dd * sign * 2.0 * s.a / (sum * sum);
                let (da_du, da_dv) = s.bil.gradient_slice(sdepth);
                gu += g_a * da_du;
                gv += g_a * da_dv;
            }
            let z = s.xs.z;
            let g_x = Vector3::new(
                gu * k.fx / z,
                gv * k.fy / z,
                -(gu * k.fx * s.xs.x + gv * k.fy * s.xs.y) / (z * z) + g_b,
            );
            let sampler = &samplers[o.region];
            let y = sampler.pre.apply(&s.xt);
            pose_accs[o.region].add(sampler, &poses[o.region].translation_vector(), &y, &g_x);
            if want_depth {
                let (x, yy) = (o.idx % w, o.idx / w);
                gd_t[o.idx] += g_x.dot(&(jac[o.region] * k.ray(x as f64, yy as f64)));
                if o.region == 0 {
                    for q in 0..4 {
                        gd_s[s.bil.idx[q]] += g_a * s.bil.w[q];
                    }
                }
            }
        }
        for (j, pa) in pose_accs.iter().enumerate() {
            let g = pa.finish(&samplers[j], poses[j]);
            acc.add_pose(samplers[j].param, g);
        }

        if lt_count > 0 && wt != 0.0 {
            for (j, prior) in f.priors.iter().enumerate() {
                let Some(tp) = prior else { continue };
                let m = &motions[j];
                let pose = m.pose(params);
                let t = m.transform(pose).translation;
                let d = t - tp;
                let g_x = Vector3::new(sgn(d.x), sgn(d.y), sgn(d.z)) * (wt / lt_count as f64);
                let mut pa = PoseAcc::default();
                pa.add(m, &pose.translation_vector(), &m.pre.translation, &g_x);
                acc.add_pose(m.param, pa.finish(m, pose));
            }
        }

        if want_depth && ws != 0.0 {
            smooth.backward(d_t.values(), ws, &mut gd_t);
        }
        if let Some(dbar) = dbar {
            if wh != 0.0 {
                let n_valid = d_t.valid_count() as f64;
                let mut g_dbar = 0.0;
                for (t, &val) in heights.iter().zip(&height_values) {
                    let (ph, inside) = height_prior_value(&params.height_priors, t.category);
                    let target = k.fy * ph / t.pixel_height;
                    let c = wh / (dbar * t.pixels.len() as f64);
                    let mut sign_sum = 0.0;
                    for &i in &t.pixels {
                        let sg = sgn(d_t.values()[i] - target);
                        sign_sum += sg;
                        if want_depth {
                            gd_t[i] += c * sg;
                        }
                    }
                    if inside {
                        *acc.height.entry(t.category).or_insert(0.0) += -c * sign_sum * k.fy / t.pixel_height;
                    }
                    g_dbar -= wh * val / dbar;
                }
                if want_depth {
                    let gj = g_dbar / n_valid;
                    for (i, g) in gd_t.iter_mut().enumerate() {
                        if d_t.is_valid(i) {
                            *g += gj;
                        }
                    }
                }
            }
        }
        if want_depth {
            for (a, b) in acc.depth[dir.tgt()].iter_mut().zip(&gd_t) {
                *a += b;
            }
            for (a, b) in acc.depth[dir.src()].iter_mut().zip(&gd_s) {
                *a += b;
            }
        }
    }

    let mut ddiff = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for (o, s) in f.owned.iter().zip(&states) {
        ddiff[o.idx] = s.dd;
        weights[o.idx] = 1.0 - s.dd;
    }
    DirectionOutput {
        terms,
        reconstruction: ihat,
        owner,
        ddiff,
        weights,
        degenerate,
        n_owned,
    }
}

/// Both frozen directions of one problem.
pub(crate) struct Evaluator<'p> {
    pub problem: &'p Problem<'p>,
    frozen: [Frozen; 2],
}

pub(crate) struct RunResult {
    pub breakdown: LossBreakdown,
    pub outputs: [DirectionOutput; 2],
    pub gradient: Option<SceneGradient>,
}

impl<'p> Evaluator<'p> {
    pub fn new(problem: &'p Problem<'p>, params: &SceneParams) -> Result<Self> {
        problem.check_params(params)?;
        let frozen = [
            freeze(problem, Dir::Forward, params)?,
            freeze(problem, Dir::Backward, params)?,
        ];
        Ok(Self { problem, frozen })
    }

    /// Forward-direction translation prior of every matched object that
    /// has one.
    pub fn translation_priors(&self) -> Vec<(u32, Vector3<f64>)> {
        self.problem
            .matched
            .iter()
            .zip(&self.frozen[0].priors)
            .filter_map(|(&id, p)| p.map(|p| (id, p)))
            .collect()
    }

    /// Differentiable part at `params` with the frozen part held fixed.
    pub fn run(&self, params: &SceneParams, want_grad: bool) -> RunResult {
        let p = &self.problem;
        let depths = p.depths(params);
        let n = p.pair.k.width * p.pair.k.height;
        let mut acc = want_grad.then(|| GradAcc::new(params, n));
        let fwd = run(p, &self.frozen[0], params, &depths, acc.as_mut().map(|a| (a, 0.5)));
        let bwd = run(p, &self.frozen[1], params, &depths, acc.as_mut().map(|a| (a, 0.5)));
        let breakdown = LossBreakdown::bidirectional(
            &fwd.terms,
            &bwd.terms,
            &p.loss,
            fwd.n_owned + bwd.n_owned,
            p.matched.len(),
        );
        let gradient = acc.map(|acc| self.finish_gradient(params, acc));
        RunResult {
            breakdown,
            outputs: [fwd, bwd],
            gradient,
        }
    }

    pub fn loss(&self, params: &SceneParams) -> f64 {
        self.run(params, false).breakdown.total
    }

    fn finish_gradient(&self, params: &SceneParams, acc: GradAcc) -> SceneGradient {
        let depth_correction = params.depth_correction.as_ref().map(|c| {
            let (w, h) = self.problem.pair.k.dims();
            let depths = self.problem.depths(params);
            let mut out = [vec![0.0; c.cols * c.rows], vec![0.0; c.cols * c.rows]];
            for f in 0..2 {
                for y in 0..h {
                    for x in 0..w {
                        let i = y * w + x;
                        if !depths[f].is_valid(i) || acc.depth[f][i] == 0.0 {
                            continue;
                        }
                        let g = acc.depth[f][i] * depths[f].values()[i];
                        for (node, wt) in c.taps(x, y, w, h) {
                            out[f][node] += g * wt;
                        }
                    }
                }
            }
            out
        });
        SceneGradient {
            ego: acc.ego,
            objects: acc.objects,
            depth_correction,
            height_priors: acc.height,
        }
    }

    /// Central differences of [`Evaluator::loss`] in every parameter.
    pub fn finite_difference(&self, params: &SceneParams, h: f64) -> SceneGradient {
        let central = |f: &dyn Fn(&mut SceneParams, f64)| {
            let mut plus = params.clone();
            f(&mut plus, h);
            let mut minus = params.clone();
            f(&mut minus, -h);
            (self.loss(&plus) - self.loss(&minus)) / (2.0 * h)
        };
        let mut g = SceneGradient::default();
        for i in 0..6 {
            g.ego[i] = central(&|q, d| {
                let mut a = q.ego.to_array();
                a[i] += d;
                q.ego = PoseSE3::from_array(a);
            });
        }
        for &id in params.objects.keys() {
            let mut e = [0.0; 6];
            for (i, slot) in e.iter_mut().enumerate() {
                *slot = central(&|q, d| {
                    let o = q.objects.get_mut(&id).expect("object present");
                    let mut a = o.to_array();
                    a[i] += d;
                    *o = PoseSE3::from_array(a);
                });
            }
            g.objects.insert(id, e);
        }
        if let Some(c) = &params.depth_correction {
            let mut out = [vec![0.0; c.frame1.len()], vec![0.0; c.frame2.len()]];
            for (f, grid) in out.iter_mut().enumerate() {
                for (node, slot) in grid.iter_mut().enumerate() {
                    *slot = central(&|q, d| {
                        let c = q.depth_correction.as_mut().expect("correction present");
                        if f == 0 {
                            c.frame1[node] += d;
                        } else {
                            c.frame2[node] += d;
                        }
                    });
                }
            }
            g.depth_correction = Some(out);
        }
        let cats: std::collections::BTreeSet<u32> = self
            .problem
            .matched
            .iter()
            .filter_map(|&id| self.problem.pair.m1.get(id).map(|i| i.category))
            .collect();
        for cat in cats {
            let v = central(&|q, d| {
                let cur = q
                    .height_priors
                    .per_category
                    .get(&cat)
                    .copied()
                    .unwrap_or(q.height_priors.default);
                q.height_priors.per_category.insert(cat, cur + d);
            });
            g.height_priors.insert(cat, v);
        }
        g
    }
}

/// Per-direction maps of one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionDiagnostics {
    pub terms: LossTerms,
    /// Synthesized target view; pixels outside every region keep the target.
    pub reconstruction: Image,
    /// Region of each target pixel: `Some(0)` background, `Some(id)` instance.
    pub owner: Vec<Option<u32>>,
    /// Merged depth inconsistency, valid on owned pixels.
    pub inconsistency: InconsistencyMap,
    /// Weighted valid mask.
    pub weights: ScalarMap,
    /// Union of all regions.
    pub valid: BinaryMask,
    pub degenerate: bool,
}

impl DirectionDiagnostics {
    pub fn region(&self, id: u32) -> BinaryMask {
        let (w, h) = self.valid.dims();
        BinaryMask::from_fn(w, h, |x, y| self.owner[y * w + x] == Some(id))
    }

    fn from_output(out: DirectionOutput, w: usize, h: usize) -> Self {
        let valid_flags: Vec<bool> = out.owner.iter().map(Option::is_some).collect();
        Self {
            terms: out.terms,
            reconstruction: out.reconstruction,
            inconsistency: InconsistencyMap::from_parts(w, h, out.ddiff, valid_flags.clone()),
            weights: ScalarMap::from_vec(w, h, out.weights),
            valid: BinaryMask::from_vec(w, h, valid_flags).expect("shape is consistent"),
            owner: out.owner,
            degenerate: out.degenerate,
        }
    }
}

/// Loss of one pair under `params`, with both directions' maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub breakdown: LossBreakdown,
    pub forward: DirectionDiagnostics,
    pub backward: DirectionDiagnostics,
}

/// Runs the full view-synthesis pipeline in both directions.
pub fn evaluate_pair(pair: &ScenePair, params: &SceneParams, cfg: &OptimizerConfig) -> Result<Evaluation> {
    let problem = Problem::new(pair, cfg)?;
    let ev = Evaluator::new(&problem, params)?;
    let r = ev.run(params, false);
    let (w, h) = pair.k.dims();
    let [fwd, bwd] = r.outputs;
    Ok(Evaluation {
        breakdown: r.breakdown,
        forward: DirectionDiagnostics::from_output(fwd, w, h),
        backward: DirectionDiagnostics::from_output(bwd, w, h),
    })
}

/// Gradient of the total loss, analytic or by central differences as
/// configured. The forward-warp stage is held fixed in both modes.
pub fn gradient(pair: &ScenePair, params: &SceneParams, cfg: &OptimizerConfig) -> Result<SceneGradient> {
    let problem = Problem::new(pair, cfg)?;
    let ev = Evaluator::new(&problem, params)?;
    Ok(match cfg.gradient_mode {
        GradientMode::Analytic => ev.run(params, true).gradient.expect("requested"),
        GradientMode::FiniteDifference => ev.finite_difference(params, cfg.fd_step),
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::harness::{random_scene, render_sequence, RandomSceneOptions};

    /// Pixels whose reconstruction differs between two runs, by owner.
    fn changed_owners(a: &DirectionOutput, b: &DirectionOutput) -> BTreeSet<u32> {
        assert_eq!(a.owner, b.owner);
        let ch = a.reconstruction.channels();
        let mut out = BTreeSet::new();
        for (i, o) in a.owner.iter().enumerate() {
            if let Some(id) = o {
                if (0..ch).any(|c| a.reconstruction.value(i, c) != b.reconstruction.value(i, c)) {
                    out.insert(*id);
                }
            }
        }
        out
    }

    #[test]
    fn frozen_pipeline_routes_each_pose_to_its_own_region() {
        let opts = RandomSceneOptions {
            objects: 2,
            ..Default::default()
        };
        let seq = render_sequence(&random_scene(5, &opts).unwrap()).unwrap();
        let pair = seq.pair(0).unwrap();
        let cfg = OptimizerConfig::default();
        let gt = seq.gt_params(0, cfg.min_instance_pixels).unwrap();
        assert_eq!(gt.objects.len(), 2);
        let problem = Problem::new(&pair, &cfg).unwrap();
        let ev = Evaluator::new(&problem, &gt).unwrap();
        let base = ev.run(&gt, false);

        let mut e = gt.clone();
        e.ego.tx += 0.02;
        e.ego.ry += 0.002;
        let moved = ev.run(&e, false);
        for d in 0..2 {
            assert_eq!(changed_owners(&base.outputs[d], &moved.outputs[d]), BTreeSet::from([0]));
        }

        let first = *gt.objects.keys().next().unwrap();
        let mut o = gt.clone();
        o.objects.get_mut(&first).unwrap().tz += 0.03;
        let moved = ev.run(&o, false);
        for d in 0..2 {
            assert_eq!(
                changed_owners(&base.outputs[d], &moved.outputs[d]),
                BTreeSet::from([first])
            );
        }
    }

    #[test]
    fn frozen_run_at_the_freeze_point_matches_evaluation() {
        let seq = render_sequence(&random_scene(6, &RandomSceneOptions::default()).unwrap()).unwrap();
        let pair = seq.pair(0).unwrap();
        let cfg = OptimizerConfig::default();
        let mut p = seq.gt_params(0, cfg.min_instance_pixels).unwrap();
        p.ego.tz += 0.01;
        let problem = Problem::new(&pair, &cfg).unwrap();
        let ev = Evaluator::new(&problem, &p).unwrap();
        assert_eq!(ev.loss(&p), evaluate_pair(&pair, &p, &cfg).unwrap().breakdown.total);
    }
}
