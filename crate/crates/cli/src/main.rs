use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use instawarp::annotate::{mots_metrics, track_sequence, TrackedSequence, TrackerConfig};
use instawarp::harness::io::{
    read_depth_pfm, read_flo, read_json, read_mask_png, read_png, write_json, write_mask_png, write_png,
    write_scalar_pfm,
};
use instawarp::harness::{
    ate_metric, depth_metrics, random_scene, render_sequence, run_selftest, RandomSceneOptions, SyntheticSceneConfig,
};
use instawarp::instance::ScenePair;
use instawarp::optimizer::{evaluate_pair, optimize, OptimizerConfig, SceneParams};
use instawarp::warp::{forward_warp, inverse_warp};
use instawarp::{Intrinsics, PoseSE3, Result};

mod layout;

use layout::SequenceDir;

#[derive(Parser)]
#[command(
    name = "instawarp",
    version,
    about = "Instance-wise warping, motion fitting and mask tracking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum WarpMode {
    /// Splat the source into the target view.
    Fw,
    /// Sample the source at target pixels.
    Iw,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic sequence into a directory.
    Synth {
        /// Scene description; without it a random scene is drawn.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Options of the random scene generator.
        #[arg(long, conflicts_with = "config")]
        random: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Warp an image with a depth map and a pose.
    Warp {
        #[arg(long, value_enum)]
        mode: WarpMode,
        #[arg(long, default_value_t = 2)]
        alpha: usize,
        /// Source image (PNG).
        #[arg(long)]
        image: PathBuf,
        /// Source depth for fw, target depth for iw (PFM).
        #[arg(long)]
        depth: PathBuf,
        /// Pose JSON: source-to-target for fw, target-to-source for iw.
        #[arg(long)]
        pose: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        /// Warped image (PNG).
        #[arg(long)]
        out: PathBuf,
        /// Optional validity mask (PNG).
        #[arg(long)]
        valid_out: Option<PathBuf>,
    },
    /// Fit ego and object motion to frames `pair` and `pair + 1` of a sequence directory.
    Optimize {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        pair: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Initial parameters; identity poses otherwise.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Link per-frame instance masks into tracks using flows.
    Annotate {
        /// Directory with mask_NNNN.png, flow_fwd_NNNN.flo and flow_bwd_NNNN.flo.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score tracked masks against ground truth.
    EvalMots {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Count identity switches as zero.
        #[arg(long)]
        ids_zero: bool,
    },
    /// Depth accuracy of predicted maps against ground truth.
    EvalDepth {
        /// PFM file or directory of depth_NNNN.pfm.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 80.0)]
        cap: f64,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        median_scaling: bool,
    },
    /// Absolute trajectory error of camera-to-world pose lists.
    EvalOdom {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 3)]
        snippet_len: usize,
    },
    /// Run the built-in oracle checks and print a JSON report.
    Selftest {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn config_or_default<T: for<'de> Deserialize<'de> + Default>(path: &Option<PathBuf>) -> Result<T> {
    path.as_deref()
        .map(read_json)
        .transpose()
        .map(Option::unwrap_or_default)
}

/// Returns whether the command succeeded.
fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Synth {
            config,
            random,
            seed,
            out,
        } => {
            let cfg: SyntheticSceneConfig = match config {
                Some(p) => read_json(&p)?,
                None => random_scene(seed, &config_or_default::<RandomSceneOptions>(&random)?)?,
            };
            let seq = render_sequence(&cfg)?;
            SequenceDir::new(&out).write(&cfg, &seq)?;
            eprintln!("wrote {} frames to {}", seq.len(), out.display());
        }
        Command::Warp {
            mode,
            alpha,
            image,
            depth,
            pose,
            intrinsics,
            out,
            valid_out,
        } => {
            let img = read_png(&image)?;
            let d = read_depth_pfm(&depth)?;
            let pose: PoseSE3 = read_json(&pose)?;
            let k: Intrinsics = read_json(&intrinsics)?;
            let (warped, valid) = match mode {
                WarpMode::Fw => {
                    let fw = forward_warp(&img, &d, &pose, &k, alpha)?;
                    (fw.image, fw.valid)
                }
                WarpMode::Iw => {
                    let iw = inverse_warp(&img, &d, &pose, &k)?;
                    (iw.to_image(), iw.validity().clone())
                }
            };
            write_png(&out, &warped)?;
            if let Some(p) = valid_out {
                let (w, h) = valid.dims();
                let m = instawarp::Image::from_fn(w, h, 1, |x, y, _| f64::from(u8::from(valid.get(x, y))));
                write_png(&p, &m)?;
            }
        }
        Command::Optimize {
            dir,
            pair,
            config,
            init,
            out,
        } => {
            let cfg: OptimizerConfig = config_or_default(&config)?;
            let seq = SequenceDir::new(&dir);
            let sp = seq.pair(pair)?;
            let init = match init {
                Some(p) => read_json(&p)?,
                None => SceneParams::identity(sp.matched_ids(cfg.min_instance_pixels)),
            };
            let result = optimize(&sp, &init, &cfg)?;
            std::fs::create_dir_all(&out)?;
            write_json(&out.join("result.json"), &result)?;
            write_visuals(&out, &sp, &result.params, &cfg)?;
            print_json(&serde_json::json!({
                "params": result.params,
                "final": result.trace.last(),
                "status": result.status,
            }))?;
        }
        Command::Annotate { dir, config, out } => {
            let cfg: TrackerConfig = config_or_default(&config)?;
            let seq = SequenceDir::new(&dir);
            let n = seq.count("mask_", ".png")?;
            let dets = (0..n)
                .map(|i| read_mask_png(&seq.mask(i)))
                .collect::<Result<Vec<_>>>()?;
            let fwd = (0..n.saturating_sub(1))
                .map(|i| read_flo(&seq.flow_fwd(i)))
                .collect::<Result<Vec<_>>>()?;
            let bwd = (0..n.saturating_sub(1))
                .map(|i| read_flo(&seq.flow_bwd(i)))
                .collect::<Result<Vec<_>>>()?;
            let tracked = track_sequence(&dets, &fwd, &bwd, &cfg)?;
            let target = SequenceDir::new(&out);
            target.create()?;
            for (i, f) in tracked.frames.iter().enumerate() {
                write_mask_png(&target.mask(i), f)?;
            }
            let births: Vec<_> = tracked
                .births
                .iter()
                .map(|&(frame, track)| serde_json::json!({ "frame": frame, "track": track }))
                .collect();
            let summary = serde_json::json!({
                "frames": tracked.len(),
                "tracks": tracked.categories,
                "births": births,
            });
            write_json(&out.join("tracks.json"), &summary)?;
            print_json(&summary)?;
        }
        Command::EvalMots { hyp, gt, ids_zero } => {
            let load = |d: &Path| -> Result<TrackedSequence> {
                let s = SequenceDir::new(d);
                let n = s.count("mask_", ".png")?;
                Ok(TrackedSequence::from_frames(
                    (0..n).map(|i| read_mask_png(&s.mask(i))).collect::<Result<Vec<_>>>()?,
                ))
            };
            print_json(&mots_metrics(&load(&hyp)?, &load(&gt)?, ids_zero)?)?;
        }
        Command::EvalDepth {
            pred,
            gt,
            cap,
            median_scaling,
        } => {
            let pairs = if pred.is_dir() {
                let (p, g) = (SequenceDir::new(&pred), SequenceDir::new(&gt));
                (0..p.count("depth_", ".pfm")?)
                    .map(|i| (p.depth(i), g.depth(i)))
                    .collect()
            } else {
                vec![(pred, gt)]
            };
            let mut per_image = Vec::new();
            for (p, g) in &pairs {
                if let Some(m) = depth_metrics(&read_depth_pfm(p)?, &read_depth_pfm(g)?, cap, median_scaling)? {
                    per_image.push(m);
                }
            }
            let mean = |f: fn(&instawarp::harness::DepthMetrics) -> f64| {
                (!per_image.is_empty()).then(|| per_image.iter().map(f).sum::<f64>() / per_image.len() as f64)
            };
            print_json(&serde_json::json!({
                "images": per_image.len(),
                "abs_rel": mean(|m| m.abs_rel),
                "sq_rel": mean(|m| m.sq_rel),
                "rmse": mean(|m| m.rmse),
                "rmse_log": mean(|m| m.rmse_log),
                "a1": mean(|m| m.a1),
                "a2": mean(|m| m.a2),
                "a3": mean(|m| m.a3),
            }))?;
        }
        Command::EvalOdom { pred, gt, snippet_len } => {
            let p: Vec<PoseSE3> = read_json(&pred)?;
            let g: Vec<PoseSE3> = read_json(&gt)?;
            print_json(&ate_metric(&p, &g, snippet_len)?)?;
        }
        Command::Selftest { out } => {
            let report = run_selftest()?;
            match out {
                Some(p) => write_json(&p, &report)?,
                None => print_json(&report)?,
            }
            return Ok(report.passed);
        }
    }
    Ok(true)
}

fn write_visuals(out: &Path, pair: &ScenePair, params: &SceneParams, cfg: &OptimizerConfig) -> Result<()> {
    let ev = evaluate_pair(pair, params, cfg)?;
    for (name, d) in [("forward", &ev.forward), ("backward", &ev.backward)] {
        write_png(&out.join(format!("reconstruction_{name}.png")), &d.reconstruction)?;
        let (w, h) = d.valid.dims();
        let map = &d.inconsistency;
        write_scalar_pfm(
            &out.join(format!("inconsistency_{name}.pfm")),
            w,
            h,
            map.values(),
            map.validity(),
        )?;
        let weights = instawarp::Image::from_vec(w, h, 1, d.weights.data().to_vec())?;
        write_png(&out.join(format!("weights_{name}.png")), &weights)?;
    }
    Ok(())
}
