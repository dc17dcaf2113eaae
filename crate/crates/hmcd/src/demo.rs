//! Deterministic toy scenes for the examples and experiments: a straight
//! road with traffic signals facing an advancing camera.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{FrameRecord, Intrinsics, Pose, PoseRecord};
use crate::error::Result;
use crate::map::{HdMap, MapElement};

/// Intrinsics of the demo camera: a 64x64 image with a ~37 degree FOV.
pub fn demo_intrinsics() -> Intrinsics {
    Intrinsics {
        fx: 96.0,
        fy: 96.0,
        cx: 32.0,
        cy: 32.0,
        width: 64,
        height: 64,
    }
}

/// A map of overhead signals spread along the x axis, all facing -x
/// (toward the camera).
pub fn demo_map(seed: u64) -> Result<HdMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut elements = Vec::new();
    let xs = [18.0, 26.0, 34.0, 42.0, 50.0];
    for (i, &x) in xs.iter().enumerate() {
        let y = rng.gen_range(-5.0..5.0);
        let z = rng.gen_range(2.5..5.0);
        let w = rng.gen_range(2.4..3.4);
        let h = rng.gen_range(2.4..3.4);
        elements.push(MapElement::new(
            format!("sig{i}"),
            Vector3::new(x, y, z),
            Vector3::new(-1.0, 0.0, 0.0),
            w,
            h,
        )?);
    }
    HdMap::new("demo", elements)
}

fn level_pose(x: f64, y: f64, z: f64) -> Result<Pose> {
    Pose::looking(Vector3::new(x, y, z), Vector3::new(1.0, 0.0, 0.0), Vector3::z())
}

fn record(pose: &Pose, k: &Intrinsics, clip_id: &str, frame_idx: u32) -> FrameRecord {
    FrameRecord {
        image_path: String::new(),
        pose: PoseRecord {
            position: [pose.position.x, pose.position.y, pose.position.z],
            quaternion: pose.quat_wxyz(),
        },
        intrinsics: *k,
        clip_id: clip_id.to_string(),
        frame_idx,
    }
}

/// Isolated frames along the road, one per camera position.
pub fn demo_sicd_frames(n: usize, seed: u64) -> Result<Vec<FrameRecord>> {
    let k = demo_intrinsics();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51CD);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let pose = level_pose(
            i as f64 * 0.4,
            rng.gen_range(-0.8..0.8),
            rng.gen_range(1.2..1.8),
        )?;
        out.push(record(&pose, &k, "sicd", i as u32));
    }
    Ok(out)
}

/// Video clips: each advances 1 m per frame from a staggered start.
pub fn demo_vscd_frames(clips: usize, frames_per_clip: usize, seed: u64) -> Result<Vec<FrameRecord>> {
    let k = demo_intrinsics();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x56CD);
    let mut out = Vec::new();
    for c in 0..clips {
        let x0 = c as f64 * 1.3;
        let y = rng.gen_range(-0.6..0.6);
        let z = rng.gen_range(1.3..1.7);
        for f in 0..frames_per_clip {
            let pose = level_pose(x0 + f as f64, y, z)?;
            out.push(record(&pose, &k, &format!("clip{c}"), f as u32));
        }
    }
    Ok(out)
}
