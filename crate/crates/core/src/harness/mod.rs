//! Synthetic scenes, evaluation metrics and the self-test report.

pub mod io;
pub mod metrics;
pub mod render;
pub mod scenes;
pub mod selftest;

pub use metrics::{ate_metric, depth_metrics, AteResult, DepthMetrics};
pub use render::{
    render_sequence, BackgroundConfig, DepthProfile, EgoTrajectory, MotionTrack, ObjectConfig, RenderedFrame,
    RenderedSequence, SyntheticSceneConfig, TextureConfig, TextureKind,
};
pub use scenes::{random_scene, RandomSceneOptions};
pub use selftest::{run_selftest, Check, SelftestReport};
