//! Pose fitting by alternation. The forward-warp stage is frozen at the
//! current estimate and the frozen loss is minimized by limited-memory
//! quasi-Newton descent with a backtracking line search; the result is then
//! accepted only if the loss re-evaluated with a fresh forward warp drops.
//! Blurred coarse-to-fine warm-up stages run first.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PoseSE3;
use crate::instance::ScenePair;
use crate::losses::LossBreakdown;

use super::pipeline::{Evaluator, Problem};
use super::pyramid::stage_pair;
use super::{OptimizerConfig, SceneGradient, SceneParams};

/// Solver units: one unit is this many radians or meters, or this much log
/// depth / meters of height prior.
const ROTATION_SCALE: f64 = 0.01;
const TRANSLATION_SCALE: f64 = 0.1;
const FIELD_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub level: u32,
    pub blur: f64,
    pub iterations: usize,
    /// Loss and gradient evaluations, including rejected line-search trials.
    pub evaluations: usize,
    /// Loss at the end of the stage, on the stage's own images.
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeResult {
    pub params: SceneParams,
    /// Loss after every accepted step of the final stage, starting with the
    /// loss of its starting point.
    pub trace: Vec<LossBreakdown>,
    /// Accepted steps of the final stage.
    pub iterations: usize,
    pub converged: bool,
    pub status: String,
    pub stages: Vec<StageReport>,
}

/// Which parameters a run moves, in solver order.
struct Layout {
    objects: Vec<u32>,
    depth: Option<(usize, usize)>,
    heights: Vec<u32>,
}

impl Layout {
    fn pose_scales() -> [f64; 6] {
        [
            ROTATION_SCALE,
            ROTATION_SCALE,
            ROTATION_SCALE,
            TRANSLATION_SCALE,
            TRANSLATION_SCALE,
            TRANSLATION_SCALE,
        ]
    }

    fn pack(&self, p: &SceneParams) -> Vec<f64> {
        let s = Self::pose_scales();
        let mut x: Vec<f64> = p.ego.to_array().iter().zip(&s).map(|(v, s)| v / s).collect();
        for id in &self.objects {
            x.extend(p.objects[id].to_array().iter().zip(&s).map(|(v, s)| v / s));
        }
        if self.depth.is_some() {
            let c = p.depth_correction.as_ref().expect("layout has a depth grid");
            x.extend(c.frame1.iter().chain(&c.frame2).map(|v| v / FIELD_SCALE));
        }
        for &cat in &self.heights {
            x.push(p.height_priors.get(cat) / FIELD_SCALE);
        }
        x
    }

    fn unpack(&self, x: &[f64], p: &mut SceneParams) {
        let s = Self::pose_scales();
        let pose = |chunk: &[f64]| {
            let mut a = [0.0; 6];
            for i in 0..6 {
                a[i] = chunk[i] * s[i];
            }
            PoseSE3::from_array(a)
        };
        p.ego = pose(&x[0..6]);
        let mut at = 6;
        for id in &self.objects {
            p.objects.insert(*id, pose(&x[at..at + 6]));
            at += 6;
        }
        if let Some((n1, n2)) = self.depth {
            let c = p.depth_correction.as_mut().expect("layout has a depth grid");
            for (i, v) in c.frame1.iter_mut().enumerate() {
                *v = x[at + i] * FIELD_SCALE;
            }
            at += n1;
            for (i, v) in c.frame2.iter_mut().enumerate() {
                *v = x[at + i] * FIELD_SCALE;
            }
            at += n2;
        }
        for &cat in &self.heights {
            p.height_priors.set(cat, x[at] * FIELD_SCALE);
            at += 1;
        }
    }

    fn gradient(&self, g: &SceneGradient) -> Vec<f64> {
        let s = Self::pose_scales();
        let mut out: Vec<f64> = g.ego.iter().zip(&s).map(|(v, s)| v * s).collect();
        for id in &self.objects {
            out.extend(g.objects[id].iter().zip(&s).map(|(v, s)| v * s));
        }
        if self.depth.is_some() {
            let [a, b] = g.depth_correction.as_ref().expect("gradient has a depth grid");
            out.extend(a.iter().chain(b).map(|v| v * FIELD_SCALE));
        }
        for cat in &self.heights {
            out.push(g.height_priors.get(cat).copied().unwrap_or(0.0) * FIELD_SCALE);
        }
        out
    }
}

#[derive(Clone)]
struct Point {
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
    breakdown: LossBreakdown,
}

struct Run {
    best: Point,
    trace: Vec<LossBreakdown>,
    iterations: usize,
    evaluations: usize,
    converged: bool,
    status: String,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn params_at(base: &SceneParams, layout: &Layout, x: &[f64]) -> SceneParams {
    let mut p = base.clone();
    layout.unpack(x, &mut p);
    p
}

/// Loss and gradient at solver point `x` with the frozen stage of `ev`.
fn run_at(ev: &Evaluator, base: &SceneParams, layout: &Layout, x: &[f64]) -> Point {
    let p = params_at(base, layout, x);
    let r = ev.run(&p, true);
    Point {
        x: x.to_vec(),
        f: r.breakdown.total,
        g: layout.gradient(&r.gradient.expect("requested")),
        breakdown: r.breakdown,
    }
}

/// Freezes at `x` and evaluates there.
fn evaluate<'p>(
    problem: &'p Problem<'p>,
    base: &SceneParams,
    layout: &Layout,
    x: &[f64],
) -> Result<(Point, Evaluator<'p>)> {
    let ev = Evaluator::new(problem, &params_at(base, layout, x))?;
    Ok((run_at(&ev, base, layout, x), ev))
}

/// `x` with every object motion replaced so that its composition with the
/// ego motion of `x` equals its composition with the ego motion of `from`.
/// Instance terms only see that composition once the warp is frozen again,
/// so a step in the ego motion alone would otherwise move every object.
fn transport(layout: &Layout, from: &[f64], x: &[f64]) -> Vec<f64> {
    if layout.objects.is_empty() {
        return x.to_vec();
    }
    let s = Layout::pose_scales();
    let pose = |c: &[f64]| PoseSE3::from_array(std::array::from_fn(|i| c[i] * s[i])).to_transform();
    let shift = pose(&from[0..6]).compose(&pose(&x[0..6]).inverse());
    let mut out = x.to_vec();
    for j in 0..layout.objects.len() {
        let at = 6 + 6 * j;
        let moved = pose(&x[at..at + 6]).compose(&shift).to_pose().to_array();
        for i in 0..6 {
            out[at + i] = moved[i] / s[i];
        }
    }
    out
}

/// Moves each object's translation onto its translation prior, with and
/// without its rotation, whenever that lowers the loss. Object motions that
/// start far from the truth can otherwise stall once their warped pixels
/// leave the object. Returns the evaluations spent.
fn reseed_objects<'p>(
    problem: &'p Problem<'p>,
    base: &SceneParams,
    layout: &Layout,
    state: &mut (Point, Evaluator<'p>),
) -> Result<usize> {
    let mut evaluations = 0;
    for (id, prior) in state.1.translation_priors() {
        let Some(j) = layout.objects.iter().position(|&o| o == id) else {
            continue;
        };
        let at = 6 + 6 * j;
        for keep_rotation in [true, false] {
            let mut x = state.0.x.clone();
            for a in 0..3 {
                x[at + 3 + a] = prior[a] / TRANSLATION_SCALE;
                if !keep_rotation {
                    x[at + a] = 0.0;
                }
            }
            if x == state.0.x {
                continue;
            }
            let cand = evaluate(problem, base, layout, &x)?;
            evaluations += 1;
            if cand.0.f.is_finite() && cand.0.f < state.0.f {
                *state = cand;
            }
        }
    }
    Ok(evaluations)
}

/// Two-loop recursion: `-H g` from the stored curvature pairs.
fn direction(g: &[f64], memory: &VecDeque<(Vec<f64>, Vec<f64>)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y) in memory.iter().rev() {
        let rho = 1.0 / dot(y, s);
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push((a, rho));
    }
    if let Some((s, y)) = memory.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y), (a, rho)) in memory.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

fn check_finite(p: &Point, iteration: usize) -> Result<()> {
    if !p.f.is_finite() {
        return Err(Error::Diverged {
            iteration,
            reason: format!("loss became {}", p.f),
        });
    }
    if p.g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            iteration,
            reason: "gradient has non-finite entries".into(),
        });
    }
    Ok(())
}

/// Quasi-Newton descent on the frozen objective of `ev` from `start`.
/// Returns the last accepted point and the number of accepted steps.
fn frozen_descent(
    ev: &Evaluator,
    base: &SceneParams,
    layout: &Layout,
    cfg: &OptimizerConfig,
    start: Point,
    budget: usize,
    evaluations: &mut usize,
) -> Result<(Point, usize)> {
    let mut cur = start;
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>)> = VecDeque::new();
    let mut steps = 0;
    while steps < budget {
        let gnorm_inf = cur.g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gnorm_inf == 0.0 {
            break;
        }
        let mut accepted = None;
        for quasi in [true, false] {
            if quasi && memory.is_empty() {
                continue;
            }
            let d: Vec<f64> = if quasi {
                direction(&cur.g, &memory)
            } else {
                cur.g.iter().map(|v| -v * cfg.initial_step / gnorm_inf).collect()
            };
            let slope = dot(&cur.g, &d);
            if !(slope < 0.0) {
                continue;
            }
            let mut t = 1.0;
            for _ in 0..=cfg.max_backtracks {
                let x: Vec<f64> = cur.x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
                let trial = run_at(ev, base, layout, &x);
                *evaluations += 1;
                check_finite(&trial, steps + 1)?;
                if trial.f <= cur.f + cfg.armijo * t * slope {
                    accepted = Some(trial);
                    break;
                }
                t *= cfg.backtrack;
            }
            if accepted.is_some() {
                break;
            }
            memory.clear();
        }
        let Some(next) = accepted else {
            break;
        };
        steps += 1;
        let s: Vec<f64> = next.x.iter().zip(&cur.x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next.g.iter().zip(&cur.g).map(|(a, b)| a - b).collect();
        if cfg.memory > 0 && dot(&s, &y) > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            memory.push_back((s, y));
            while memory.len() > cfg.memory {
                memory.pop_front();
            }
        }
        let small = cur.f - next.f <= cfg.tolerance * cur.f.abs().max(f64::MIN_POSITIVE);
        cur = next;
        if small {
            break;
        }
    }
    Ok((cur, steps))
}

/// Alternates a descent on the frozen objective with a fresh freeze at its
/// result. An outer step is kept only if the loss under the fresh freeze
/// drops; otherwise the step is shortened along the same segment.
fn descend<'p>(
    problem: &'p Problem<'p>,
    base: &SceneParams,
    layout: &Layout,
    cfg: &OptimizerConfig,
    start: (Point, Evaluator<'p>),
    max_iterations: usize,
) -> Result<Run> {
    let mut start = start;
    check_finite(&start.0, 0)?;
    let mut evaluations = 1 + reseed_objects(problem, base, layout, &mut start)?;
    let (mut cur, mut cur_ev) = start;
    let mut trace = vec![cur.breakdown];
    let mut iterations = 0;
    let mut reseeded = false;
    let mut status = format!("reached {max_iterations} iterations");
    let mut converged = false;

    while iterations < max_iterations {
        if cur.g.iter().all(|v| *v == 0.0) {
            status = "zero gradient".into();
            converged = true;
            break;
        }
        let (inner, steps) = frozen_descent(
            &cur_ev,
            base,
            layout,
            cfg,
            cur.clone(),
            max_iterations - iterations,
            &mut evaluations,
        )?;
        let mut accepted = None;
        if steps > 0 {
            let mut t = 1.0;
            for _ in 0..=cfg.max_backtracks {
                let x: Vec<f64> = cur.x.iter().zip(&inner.x).map(|(a, b)| a + t * (b - a)).collect();
                let (next, ev) = evaluate(problem, base, layout, &transport(layout, &cur.x, &x))?;
                evaluations += 1;
                check_finite(&next, iterations + 1)?;
                if next.f < cur.f {
                    accepted = Some((next, ev));
                    break;
                }
                t *= cfg.backtrack;
            }
        }
        let Some((next, ev)) = accepted else {
            if !reseeded && !layout.objects.is_empty() {
                reseeded = true;
                let mut state = (cur, cur_ev);
                let before = state.0.f;
                evaluations += reseed_objects(problem, base, layout, &mut state)?;
                (cur, cur_ev) = state;
                if cur.f < before {
                    trace.push(cur.breakdown);
                    continue;
                }
            }
            status = "no descent step found".into();
            converged = true;
            break;
        };
        iterations += steps;
        let small = cur.f - next.f <= cfg.tolerance * cur.f.abs().max(f64::MIN_POSITIVE);
        trace.push(next.breakdown);
        cur = next;
        cur_ev = ev;
        if small {
            status = "relative decrease below tolerance".into();
            converged = true;
            break;
        }
    }
    Ok(Run {
        best: cur,
        trace,
        iterations,
        evaluations,
        converged,
        status,
    })
}

/// Fits `init` to `pair`.
///
/// Warm-up stages fit the poses on blurred, subsampled copies of the pair.
/// The final stage then fits every enabled parameter at full resolution,
/// starting from whichever of `init` and the warm-up result has the lower
/// full-resolution loss.
pub fn optimize(pair: &ScenePair, init: &SceneParams, cfg: &OptimizerConfig) -> Result<OptimizeResult> {
    cfg.validate()?;
    if !init.is_finite() {
        return Err(Error::InvalidArgument("initial parameters must be finite".into()));
    }
    if let Some(c) = &init.depth_correction {
        c.validate()?;
    }
    let matched = pair.matched_ids(cfg.min_instance_pixels);
    if let Some(&id) = matched.iter().find(|id| !init.objects.contains_key(id)) {
        return Err(Error::MissingInstancePose(id));
    }
    let objects: Vec<u32> = init.objects.keys().copied().filter(|id| matched.contains(id)).collect();
    let poses_only = Layout {
        objects: objects.clone(),
        depth: None,
        heights: Vec::new(),
    };
    let categories: BTreeSet<u32> = matched
        .iter()
        .filter_map(|&id| pair.m2.get(id).map(|i| i.category))
        .collect();
    let full = Layout {
        objects,
        depth: match (&init.depth_correction, cfg.optimize_depth) {
            (Some(c), true) => Some((c.frame1.len(), c.frame2.len())),
            _ => None,
        },
        heights: if cfg.optimize_height {
            categories.into_iter().collect()
        } else {
            Vec::new()
        },
    };

    // Warm-up stages see the corrected depths and keep the grid fixed.
    let corrected;
    let warm_pair = match &init.depth_correction {
        Some(c) => {
            corrected = ScenePair::new(
                pair.i1.clone(),
                pair.i2.clone(),
                c.apply(&pair.d1, 0),
                c.apply(&pair.d2, 1),
                pair.m1.clone(),
                pair.m2.clone(),
                pair.k,
            )?;
            &corrected
        }
        None => pair,
    };
    let mut warm_base = init.clone();
    warm_base.depth_correction = None;
    let mut x = poses_only.pack(init);
    let mut stages = Vec::new();
    for st in &cfg.warmup {
        let sp = stage_pair(warm_pair, st.level, st.blur)?;
        let problem = Problem::new(&sp, cfg)?;
        let start = evaluate(&problem, &warm_base, &poses_only, &x)?;
        let run = descend(&problem, &warm_base, &poses_only, cfg, start, cfg.warmup_iterations)?;
        stages.push(StageReport {
            level: st.level,
            blur: st.blur,
            iterations: run.iterations,
            evaluations: run.evaluations,
            losses: run.best.breakdown,
        });
        x = run.best.x;
    }

    let mut warm = init.clone();
    poses_only.unpack(&x, &mut warm);
    let problem = Problem::new(pair, cfg)?;
    let from_init = evaluate(&problem, init, &full, &full.pack(init))?;
    let start = if cfg.warmup.is_empty() {
        from_init
    } else {
        let from_warm = evaluate(&problem, &warm, &full, &full.pack(&warm))?;
        if from_warm.0.f < from_init.0.f {
            from_warm
        } else {
            from_init
        }
    };
    let run = descend(&problem, init, &full, cfg, start, cfg.max_iterations)?;
    let mut params = init.clone();
    full.unpack(&run.best.x, &mut params);
    stages.push(StageReport {
        level: 0,
        blur: 0.0,
        iterations: run.iterations,
        evaluations: run.evaluations,
        losses: run.best.breakdown,
    });
    Ok(OptimizeResult {
        params,
        trace: run.trace,
        iterations: run.iterations,
        converged: run.converged,
        status: run.status,
        stages,
    })
}
