//! File names inside a sequence directory.
//!
//! ```text
//! scene.json             scene description
//! intrinsics.json
//! motions.json           per pair: ego motion and object motions
//! trajectory.json        camera-to-world pose of every frame
//! image_NNNN.png  depth_NNNN.pfm  mask_NNNN.png
//! flow_fwd_NNNN.flo      frame N to N+1
//! flow_bwd_NNNN.flo      frame N+1 to N
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use instawarp::harness::io::{
    read_depth_pfm, read_json, read_mask_png, read_png, write_depth_pfm, write_flo, write_json, write_mask_png,
    write_png,
};
use instawarp::harness::{RenderedSequence, SyntheticSceneConfig};
use instawarp::instance::ScenePair;
use instawarp::{Error, Intrinsics, PoseSE3, Result};

#[derive(Serialize, Deserialize)]
struct PairMotion {
    ego: PoseSE3,
    objects: BTreeMap<u32, PoseSE3>,
}

pub struct SequenceDir {
    root: PathBuf,
}

impl SequenceDir {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn create(&self) -> Result<()> {
        std::fs::create_dir_all(&self.root)?;
        Ok(())
    }

    fn file(&self, stem: &str, i: usize, ext: &str) -> PathBuf {
        self.root.join(format!("{stem}_{i:04}.{ext}"))
    }

    pub fn image(&self, i: usize) -> PathBuf {
        self.file("image", i, "png")
    }

    pub fn depth(&self, i: usize) -> PathBuf {
        self.file("depth", i, "pfm")
    }

    pub fn mask(&self, i: usize) -> PathBuf {
        self.file("mask", i, "png")
    }

    pub fn flow_fwd(&self, i: usize) -> PathBuf {
        self.file("flow_fwd", i, "flo")
    }

    pub fn flow_bwd(&self, i: usize) -> PathBuf {
        self.file("flow_bwd", i, "flo")
    }

    /// Number of consecutive files `prefix0000suffix`, `prefix0001suffix`, ...
    pub fn count(&self, prefix: &str, suffix: &str) -> Result<usize> {
        let n = (0..)
            .take_while(|i| self.root.join(format!("{prefix}{i:04}{suffix}")).exists())
            .count();
        if n == 0 {
            return Err(Error::InvalidArgument(format!(
                "no {prefix}NNNN{suffix} files in {}",
                self.root.display()
            )));
        }
        Ok(n)
    }

    pub fn write(&self, cfg: &SyntheticSceneConfig, seq: &RenderedSequence) -> Result<()> {
        self.create()?;
        write_json(&self.root.join("scene.json"), cfg)?;
        write_json(&self.root.join("intrinsics.json"), &seq.intrinsics)?;
        let motions: Vec<PairMotion> = seq
            .ego_motions
            .iter()
            .zip(&seq.object_motions)
            .map(|(e, o)| PairMotion {
                ego: *e,
                objects: o.clone(),
            })
            .collect();
        write_json(&self.root.join("motions.json"), &motions)?;
        let trajectory: Vec<PoseSE3> = seq
            .frames
            .iter()
            .map(|f| f.camera_from_world.inverse().to_pose())
            .collect();
        write_json(&self.root.join("trajectory.json"), &trajectory)?;
        for (i, f) in seq.frames.iter().enumerate() {
            write_png(&self.image(i), &f.image)?;
            write_depth_pfm(&self.depth(i), &f.depth)?;
            write_mask_png(&self.mask(i), &f.masks)?;
        }
        for (i, (fw, bw)) in seq.flows_forward.iter().zip(&seq.flows_backward).enumerate() {
            write_flo(&self.flow_fwd(i), fw)?;
            write_flo(&self.flow_bwd(i), bw)?;
        }
        Ok(())
    }

    /// Frames `i` and `i + 1` with their depths and masks.
    pub fn pair(&self, i: usize) -> Result<ScenePair> {
        let k: Intrinsics = read_json(&self.root.join("intrinsics.json"))?;
        ScenePair::new(
            read_png(&self.image(i))?,
            read_png(&self.image(i + 1))?,
            read_depth_pfm(&self.depth(i))?,
            read_depth_pfm(&self.depth(i + 1))?,
            read_mask_png(&self.mask(i))?,
            read_mask_png(&self.mask(i + 1))?,
            k,
        )
    }
}
