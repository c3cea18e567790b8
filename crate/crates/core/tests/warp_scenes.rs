use instawarp::harness::{random_scene, render_sequence, RandomSceneOptions, RenderedSequence};
use instawarp::warp::{forward_warp, inverse_warp};
use instawarp::{BinaryMask, Image};

/// Static scenes with large constant-colour blocks.
fn block_scene(seed: u64) -> RenderedSequence {
    let opts = RandomSceneOptions {
        objects: 0,
        smooth: false,
        background_texture: 1.5,
        ..Default::default()
    };
    render_sequence(&random_scene(seed, &opts).unwrap()).unwrap()
}

fn mae_on(a: &Image, b: &Image, mask: &BinaryMask) -> f64 {
    let (w, _) = a.dims();
    let mut sum = 0.0;
    let mut n = 0;
    for (i, &m) in mask.data().iter().enumerate() {
        if !m {
            continue;
        }
        for c in 0..a.channels() {
            sum += (a.get(i % w, i / w, c) - b.get(i % w, i / w, c)).abs();
            n += 1;
        }
    }
    assert!(n > 0);
    sum / n as f64
}

#[test]
fn inverse_warp_with_true_motion_reproduces_the_next_frame() {
    for seed in 20..23 {
        let seq = block_scene(seed);
        let (f1, f2) = (&seq.frames[0], &seq.frames[1]);
        let iw = inverse_warp(&f1.image, &f2.depth, &seq.ego_motions[0].inverse(), &seq.intrinsics).unwrap();
        assert!(iw.validity().count() > iw.validity().len() / 2);
        let mae = mae_on(&iw.to_image(), &f2.image, iw.validity());
        assert!(mae < 2.0 / 255.0, "seed {seed}: {}", mae * 255.0);
    }
}

#[test]
fn forward_and_inverse_warps_agree() {
    for seed in 20..23 {
        let seq = block_scene(seed);
        let (f1, f2) = (&seq.frames[0], &seq.frames[1]);
        let e = seq.ego_motions[0];
        let fw = forward_warp(&f1.image, &f1.depth, &e, &seq.intrinsics, 2).unwrap();
        let iw = inverse_warp(&f1.image, &f2.depth, &e.inverse(), &seq.intrinsics).unwrap();
        let both = fw.valid.intersection(iw.validity());
        let mae = mae_on(&fw.image, &iw.to_image(), &both);
        assert!(mae < 2.0 / 255.0, "seed {seed}: {}", mae * 255.0);
    }
}

#[test]
fn holes_shrink_as_depth_is_upsampled() {
    for seed in 20..24 {
        let opts = RandomSceneOptions {
            objects: 1 + seed as usize % 3,
            ..Default::default()
        };
        let seq = render_sequence(&random_scene(seed, &opts).unwrap()).unwrap();
        let f1 = &seq.frames[0];
        let holes: Vec<f64> = [1, 2, 4]
            .iter()
            .map(|&a| {
                let fw = forward_warp(&f1.image, &f1.depth, &seq.ego_motions[0], &seq.intrinsics, a).unwrap();
                1.0 - fw.valid.count() as f64 / fw.valid.len() as f64
            })
            .collect();
        assert!(holes[1] < holes[0], "seed {seed}: {holes:?}");
        assert!(holes[2] <= holes[1], "seed {seed}: {holes:?}");
    }
}
