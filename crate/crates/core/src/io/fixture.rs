//! Deterministic synthetic datasets with oracle features.
//!
//! Each human gets its own vertical slot of the frame. Its interacted object
//! overlaps the right edge of the human box at the human's depth; three
//! distractors sit in the top band of the slot, deeper in the scene. Mask
//! features are one-hot: every mask has its own channel and channel 0 is
//! background. Oracle queries point at the object channel; adversarial
//! queries point at the first distractor instead.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{CloudRecord, Dataset, Keyframe, Manifest, VideoEntry, MANIFEST_VERSION};
use super::{points_to_tensor, CandidateFile, CloudSidecar, Tensor, VERBS};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Mask};
use crate::layout4d::{CloudRole, Point3};
use crate::metrics::{Frame, GroundingInstance, ObjectTrack};

const SLOT_WIDTH: usize = 96;
const FRAME_HEIGHT: usize = 240;
const DISTRACTORS: usize = 3;
/// Context map cell size in pixels.
const STRIDE: usize = 8;
const MAX_INSTANCES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub seed: u64,
    pub n_videos: usize,
    /// Humans per video.
    pub n_instances: usize,
    pub adversarial: bool,
    pub with_clouds: bool,
    /// Decoder query rows per (keyframe, human).
    pub n_queries: usize,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self { seed: 0, n_videos: 2, n_instances: 3, adversarial: false, with_clouds: true, n_queries: 24 }
    }
}

struct Placed {
    rect: [usize; 4],
    depth: f64,
    channel: usize,
}

fn rect_box(r: [usize; 4]) -> BBox {
    BBox::new(r[0] as f64, r[1] as f64, r[2] as f64, r[3] as f64).expect("ordered rectangle")
}

fn q3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

fn one_hot(dim: usize, channel: usize) -> Vec<f32> {
    let mut v = vec![0.0; dim];
    v[channel] = 1.0;
    v
}

/// Builds the dataset in memory; pair with [`super::save_dataset`].
pub fn generate_fixture(spec: &FixtureSpec) -> Result<Dataset> {
    if spec.n_videos == 0 || spec.n_instances == 0 || spec.n_queries == 0 {
        return Err(Error::Config("fixture sizes must be at least 1".into()));
    }
    if spec.n_instances > MAX_INSTANCES {
        return Err(Error::Config(format!("at most {MAX_INSTANCES} humans per video")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_instances;
    let (width, height) = (SLOT_WIDTH * n, FRAME_HEIGHT);
    let dim = 1 + n * (1 + DISTRACTORS);

    let mut videos = Vec::new();
    let mut instances = Vec::new();
    let mut keyframes = BTreeMap::new();
    let mut queries = BTreeMap::new();
    let mut clouds = BTreeMap::new();

    for v in 0..spec.n_videos {
        let video_id = format!("vid{v:03}");
        let n_frames = rng.gen_range(3..=5);
        let stamps: Vec<i64> = (0..n_frames).collect();
        let verbs: Vec<&str> = (0..n).map(|_| VERBS[rng.gen_range(0..VERBS.len())]).collect();
        let depths: Vec<f64> = (0..n).map(|_| q3(rng.gen_range(2.0..4.0))).collect();
        let scale: f64 = q3(rng.gen_range(0.5..2.0));
        let shift: Point3 = [q3(rng.gen_range(-1.0..1.0)), q3(rng.gen_range(-1.0..1.0)), q3(rng.gen_range(-1.0..1.0))];
        let mut human_frames = vec![Vec::new(); n];
        let mut object_frames = vec![Vec::new(); n];

        for &ts in &stamps {
            let mut placed = Vec::new();
            for i in 0..n {
                let x0 = SLOT_WIDTH * i;
                let hx = x0 + 8 + rng.gen_range(0..8);
                let hy = 60 + rng.gen_range(0..20);
                let human = [hx, hy, hx + 32, 230];
                let ow = 20 + rng.gen_range(0..8);
                let oy = 120 + rng.gen_range(0..20);
                let object = [human[2] - 14, oy, human[2] - 14 + ow, oy + 24 + rng.gen_range(0..10)];
                human_frames[i].push(Frame { ts, bbox: rect_box(human), score: None });
                object_frames[i].push(Frame { ts, bbox: rect_box(object), score: None });
                let base = 1 + i * (1 + DISTRACTORS);
                placed.push(Placed { rect: object, depth: depths[i], channel: base });
                for k in 0..DISTRACTORS {
                    let dx = x0 + 4 + 30 * k + rng.gen_range(0..4);
                    let dy = 4 + rng.gen_range(0..8);
                    let rect = [dx, dy, dx + 14 + rng.gen_range(0..6), dy + 12 + rng.gen_range(0..20)];
                    placed.push(Placed { rect, depth: depths[i] + 1.0 + 0.5 * k as f64, channel: base + 1 + k });
                }
                let target = if spec.adversarial { base + 1 } else { base };
                let rows: Vec<f32> = (0..spec.n_queries).flat_map(|_| one_hot(dim, target)).collect();
                queries.insert(
                    (video_id.clone(), ts, i as u32 + 1),
                    Tensor::new(vec![spec.n_queries, dim], "queries", rows)?,
                );
                if spec.with_clouds {
                    let rec =
                        layout_clouds(&mut rng, &video_id, ts, i as u32 + 1, human, object, depths[i], scale, shift);
                    clouds.insert((video_id.clone(), ts, i as u32 + 1), rec);
                }
            }

            let mut masks = Vec::new();
            let mut features = Vec::new();
            for p in &placed {
                let [x0, y0, x1, y1] = p.rect;
                let m = Mask::from_rect(width, height, x0, y0, x1, y1);
                // depth varies slightly across the surface, column-major like the runs
                let depth: Vec<f64> =
                    (x0..x1).flat_map(|x| (y0..y1).map(move |y| q3(p.depth + 0.002 * ((x + y) % 5) as f64))).collect();
                masks.push(m.with_depth(depth)?);
                features.extend(one_hot(dim, p.channel));
            }
            let context = context_map(width, height, dim, &placed)?;
            let objects = Tensor::new(vec![placed.len(), dim], "objects", features)?;
            let candidates = CandidateFile { video_id: video_id.clone(), ts, width, height, masks };
            keyframes.insert(
                (video_id.clone(), ts),
                Keyframe { candidates, context: Some(context), objects: Some(objects) },
            );
        }

        for i in 0..n {
            instances.push(GroundingInstance {
                video_id: video_id.clone(),
                human_id: i as u32 + 1,
                verb: verbs[i].to_string(),
                human: human_frames[i].clone(),
                objects: vec![ObjectTrack { object_id: 1, frames: object_frames[i].clone() }],
            });
        }
        videos.push(VideoEntry { video_id, width, height, keyframes: stamps });
    }

    let manifest =
        Manifest { version: MANIFEST_VERSION, instances: instances.len(), keyframes: keyframes.len(), videos };
    Ok(Dataset { manifest, instances, keyframes, queries, clouds })
}

/// Coarse context map: each cell takes the channel of the last mask covering
/// its centre, background otherwise.
fn context_map(width: usize, height: usize, dim: usize, placed: &[Placed]) -> Result<Tensor> {
    let (h, w) = (height / STRIDE, width / STRIDE);
    let mut data = Vec::with_capacity(h * w * dim);
    for cy in 0..h {
        for cx in 0..w {
            let (px, py) = (cx * STRIDE + STRIDE / 2, cy * STRIDE + STRIDE / 2);
            let channel = placed
                .iter()
                .rev()
                .find(|p| px >= p.rect[0] && px < p.rect[2] && py >= p.rect[1] && py < p.rect[3])
                .map_or(0, |p| p.channel);
            data.extend(one_hot(dim, channel));
        }
    }
    Tensor::new(vec![h, w, dim], "context", data)
}

/// Pixel to camera-frame metres: 100 px per metre about the frame origin,
/// y pointing down like the image.
fn to_metric(x: f64, y: f64, depth: f64) -> Point3 {
    [x / 100.0, y / 100.0, depth]
}

#[allow(clippy::too_many_arguments)]
fn layout_clouds(
    rng: &mut ChaCha8Rng,
    video_id: &str,
    ts: i64,
    human_id: u32,
    human: [usize; 4],
    object: [usize; 4],
    depth: f64,
    scale: f64,
    shift: Point3,
) -> CloudRecord {
    let f32r = |p: Point3| p.map(|v| f64::from(v as f32));
    let [hx0, hy0, hx1, hy1] = human.map(|v| v as f64);
    let pelvis = f32r(to_metric((hx0 + hx1) / 2.0, (hy0 + hy1) / 2.0, depth));
    let mesh: Vec<Point3> = (0..120)
        .map(|_| f32r(to_metric(rng.gen_range(hx0..hx1), rng.gen_range(hy0..hy1), depth + rng.gen_range(-0.15..0.15))))
        .collect();
    let front: Vec<Point3> =
        (0..24).map(|_| f32r(to_metric(rng.gen_range(hx0..hx1), rng.gen_range(hy0..hy1), depth - 0.15))).collect();
    // the scene reconstruction lives in its own frame: x_scene = x / k + c
    let to_scene = |p: &Point3| f32r([p[0] / scale + shift[0], p[1] / scale + shift[1], p[2] / scale + shift[2]]);
    let corresp: Vec<Point3> = front.iter().map(to_scene).collect();
    let [ox0, oy0, ox1, oy1] = object.map(|v| v as f64);
    let mut scene: Vec<Point3> =
        (0..160).map(|_| to_metric(rng.gen_range(0.0..hx1 + 60.0), 235.0, depth + rng.gen_range(-1.0..2.0))).collect();
    scene.extend(
        (0..80)
            .map(|_| to_metric(rng.gen_range(ox0..ox1), rng.gen_range(oy0..oy1), depth + rng.gen_range(-0.05..0.05))),
    );
    let scene: Vec<Point3> = scene.iter().map(to_scene).collect();

    let roles =
        vec![CloudRole::HumanMesh, CloudRole::Scene, CloudRole::HumanFrontSurface, CloudRole::SceneCorrespondence];
    let clouds = vec![
        points_to_tensor(&mesh, CloudRole::HumanMesh),
        points_to_tensor(&scene, CloudRole::Scene),
        points_to_tensor(&front, CloudRole::HumanFrontSurface),
        points_to_tensor(&corresp, CloudRole::SceneCorrespondence),
    ];
    CloudRecord { sidecar: CloudSidecar { video_id: video_id.to_string(), ts, human_id, pelvis, roles }, clouds }
}
