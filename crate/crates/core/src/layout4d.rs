//! Human–scene alignment and basis-point-set (BPS) encoding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// Clouds at or above this size are searched through [`GridIndex`].
pub const LINEAR_SCAN_LIMIT: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloudRole {
    HumanMesh,
    Scene,
    HumanFrontSurface,
    SceneCorrespondence,
    BasePoints,
}

impl CloudRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            CloudRole::HumanMesh => "human_mesh",
            CloudRole::Scene => "scene",
            CloudRole::HumanFrontSurface => "human_front_surface",
            CloudRole::SceneCorrespondence => "scene_correspondence",
            CloudRole::BasePoints => "base_points",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            CloudRole::HumanMesh,
            CloudRole::Scene,
            CloudRole::HumanFrontSurface,
            CloudRole::SceneCorrespondence,
            CloudRole::BasePoints,
        ]
        .into_iter()
        .find(|r| r.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub role: CloudRole,
    pub points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(role: CloudRole, points: Vec<Point3>) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateCloud("non-finite coordinate".into()));
        }
        Ok(Self { role, points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<Point3> {
        centroid(&self.points)
    }

    /// Vertical extent along the camera-space y axis.
    pub fn vertical_extent(&self) -> Option<f64> {
        let ys = self.points.iter().map(|p| p[1]);
        let lo = ys.clone().fold(f64::INFINITY, f64::min);
        let hi = ys.fold(f64::NEG_INFINITY, f64::max);
        (!self.points.is_empty()).then_some(hi - lo)
    }
}

fn centroid(points: &[Point3]) -> Option<Point3> {
    if points.is_empty() {
        return None;
    }
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    Some(c.map(|v| v / n))
}

fn dist(a: &Point3, b: &Point3) -> f64 {
    dist2(a, b).sqrt()
}

fn dist2(a: &Point3, b: &Point3) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

/// Mean over all ordered pairs (diagonal included) of Euclidean distances.
pub fn mean_pairwise_distance(points: &[Point3]) -> f64 {
    let n = points.len();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += dist(&points[i], &points[j]);
        }
    }
    2.0 * total / (n * n) as f64
}

/// Scale-then-translate map `p -> p * scale + displacement`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentTransform {
    pub scale: f64,
    pub displacement: Point3,
}

impl AlignmentTransform {
    pub fn identity() -> Self {
        Self { scale: 1.0, displacement: [0.0; 3] }
    }

    pub fn apply_point(&self, p: &Point3) -> Point3 {
        [
            p[0] * self.scale + self.displacement[0],
            p[1] * self.scale + self.displacement[1],
            p[2] * self.scale + self.displacement[2],
        ]
    }
}

/// Recovers the scale and displacement that map index-corresponding scene
/// points onto the human front-surface vertices.
///
/// The scale is the ratio of mean pairwise distances; the displacement is
/// taken between the human centroid and the centroid of the already-scaled
/// scene points.
pub fn align_scene_to_human(human_front: &PointCloud, scene_corresp: &PointCloud) -> Result<AlignmentTransform> {
    let n = human_front.len();
    if n != scene_corresp.len() {
        return Err(Error::Dimension(format!("{n} human vertices but {} scene correspondences", scene_corresp.len())));
    }
    if n < 2 {
        return Err(Error::InsufficientPoints { needed: 2, got: n });
    }
    let d_h = mean_pairwise_distance(&human_front.points);
    let d_s = mean_pairwise_distance(&scene_corresp.points);
    if d_s == 0.0 {
        return Err(Error::DegenerateCloud("scene points all coincide".into()));
    }
    if d_h == 0.0 {
        return Err(Error::DegenerateCloud("human points all coincide".into()));
    }
    let scale = d_h / d_s;
    let scaled: Vec<Point3> = scene_corresp.points.iter().map(|p| p.map(|v| v * scale)).collect();
    let ch = centroid(&human_front.points).expect("n >= 2");
    let cs = centroid(&scaled).expect("n >= 2");
    Ok(AlignmentTransform { scale, displacement: [ch[0] - cs[0], ch[1] - cs[1], ch[2] - cs[2]] })
}

pub fn apply_alignment(cloud: &PointCloud, t: &AlignmentTransform) -> PointCloud {
    PointCloud { role: cloud.role, points: cloud.points.iter().map(|p| t.apply_point(p)).collect() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BpsConfig {
    /// Feature length; half of it is the number of base points.
    pub feature_dim: usize,
    /// Sphere radius as a multiple of body height.
    pub radius_factor: f64,
    pub seed: u64,
}

impl Default for BpsConfig {
    fn default() -> Self {
        Self { feature_dim: 512, radius_factor: 1.5, seed: 0 }
    }
}

impl BpsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || !self.feature_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("BPS feature dim must be even and positive, got {}", self.feature_dim)));
        }
        if !(self.radius_factor > 0.0 && self.radius_factor.is_finite()) {
            return Err(Error::Config(format!("BPS radius factor must be positive, got {}", self.radius_factor)));
        }
        Ok(())
    }

    pub fn num_base_points(&self) -> usize {
        self.feature_dim / 2
    }
}

/// Samples `D/2` points uniformly inside the sphere around the pelvis.
///
/// Rejection sampling from the enclosing cube with a seeded ChaCha stream,
/// so identical seeds give identical points on every platform.
pub fn generate_base_points(cfg: &BpsConfig, pelvis: Point3, body_height: f64) -> Result<PointCloud> {
    cfg.validate()?;
    if !(body_height > 0.0 && body_height.is_finite()) {
        return Err(Error::InvalidAnthropometry(body_height));
    }
    let radius = cfg.radius_factor * body_height;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut points = Vec::with_capacity(cfg.num_base_points());
    while points.len() < cfg.num_base_points() {
        let u: Point3 = [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)];
        if u[0] * u[0] + u[1] * u[1] + u[2] * u[2] <= 1.0 {
            points.push([pelvis[0] + radius * u[0], pelvis[1] + radius * u[1], pelvis[2] + radius * u[2]]);
        }
    }
    PointCloud::new(CloudRole::BasePoints, points)
}

/// Uniform voxel grid over a cloud answering exact nearest-distance queries.
pub struct GridIndex<'a> {
    points: &'a [Point3],
    origin: Point3,
    cell: f64,
    dims: [usize; 3],
    // cell id -> range into `order`
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> GridIndex<'a> {
    pub fn build(points: &'a [Point3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
        // roughly two points per occupied cell for a surface-like cloud
        let target_cells = (points.len() as f64 / 2.0).max(1.0);
        let cell = if extent > 0.0 { (extent / target_cells.cbrt()).max(extent * 1e-6) } else { 1.0 };
        let dims = [0, 1, 2].map(|k| (((hi[k] - lo[k]) / cell).floor() as usize + 1).min(1 << 10));
        let n_cells = dims[0] * dims[1] * dims[2];
        let mut index = Self {
            points,
            origin: lo,
            cell,
            dims,
            starts: vec![0; n_cells + 1],
            order: Vec::with_capacity(points.len()),
        };
        let ids: Vec<usize> = points.iter().map(|p| index.cell_id(index.cell_of(p))).collect();
        for &id in &ids {
            index.starts[id + 1] += 1;
        }
        for i in 0..n_cells {
            index.starts[i + 1] += index.starts[i];
        }
        let mut fill = index.starts.clone();
        index.order = vec![0; points.len()];
        for (pi, &id) in ids.iter().enumerate() {
            index.order[fill[id]] = pi;
            fill[id] += 1;
        }
        Ok(index)
    }

    fn cell_of(&self, p: &Point3) -> [i64; 3] {
        [0, 1, 2].map(|k| {
            let c = ((p[k] - self.origin[k]) / self.cell).floor() as i64;
            c.clamp(0, self.dims[k] as i64 - 1)
        })
    }

    fn cell_id(&self, c: [i64; 3]) -> usize {
        (c[0] as usize * self.dims[1] + c[1] as usize) * self.dims[2] + c[2] as usize
    }

    /// Exact minimum Euclidean distance from `q` to the indexed cloud.
    pub fn nearest_distance(&self, q: &Point3) -> f64 {
        let home = self.cell_of(q);
        let mut best = f64::INFINITY;
        let max_r = *self.dims.iter().max().unwrap() as i64;
        for r in 0..=max_r {
            if best.is_finite() {
                let bound = self.shell_lower_bound(q, home, r);
                if bound * bound > best {
                    break;
                }
            }
            self.scan_shell(q, home, r, &mut best);
        }
        best.sqrt()
    }

    fn shell_lower_bound(&self, q: &Point3, home: [i64; 3], r: i64) -> f64 {
        // a cell on ring r lies outside the ring r-1 cube along some axis,
        // so its points are at least the distance from q to that cube's faces
        (0..3)
            .map(|k| {
                let lo = self.origin[k] + (home[k] - r + 1) as f64 * self.cell;
                let hi = self.origin[k] + (home[k] + r) as f64 * self.cell;
                (q[k] - lo).min(hi - q[k]).max(0.0)
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn scan_shell(&self, q: &Point3, home: [i64; 3], r: i64, best: &mut f64) {
        let range = |k: usize| {
            let lo = (home[k] - r).max(0);
            let hi = (home[k] + r).min(self.dims[k] as i64 - 1);
            lo..=hi
        };
        for x in range(0) {
            for y in range(1) {
                for z in range(2) {
                    let ring = (x - home[0]).abs().max((y - home[1]).abs()).max((z - home[2]).abs());
                    if ring != r {
                        continue;
                    }
                    let id = self.cell_id([x, y, z]);
                    for &pi in &self.order[self.starts[id]..self.starts[id + 1]] {
                        let d = dist2(q, &self.points[pi]);
                        if d < *best {
                            *best = d;
                        }
                    }
                }
            }
        }
    }
}

/// Nearest-point search strategy for [`bps_encode_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NearestSearch {
    /// Linear scan below [`LINEAR_SCAN_LIMIT`] points, grid index above.
    Auto,
    Exhaustive,
    Grid,
}

fn nearest_distances(base: &[Point3], cloud: &[Point3], search: NearestSearch) -> Result<Vec<f64>> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let use_grid = match search {
        NearestSearch::Auto => cloud.len() >= LINEAR_SCAN_LIMIT,
        NearestSearch::Exhaustive => false,
        NearestSearch::Grid => true,
    };
    if use_grid {
        let index = GridIndex::build(cloud)?;
        Ok(base.iter().map(|b| index.nearest_distance(b)).collect())
    } else {
        Ok(base.iter().map(|b| cloud.iter().map(|p| dist2(b, p)).fold(f64::INFINITY, f64::min).sqrt()).collect())
    }
}

/// Distance-norm BPS feature: `D/2` human distances then `D/2` scene distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BpsFeature {
    pub values: Vec<f64>,
    pub anchor: Point3,
}

pub fn bps_encode(base: &PointCloud, human: &PointCloud, scene: &PointCloud) -> Result<BpsFeature> {
    bps_encode_with(base, human, scene, NearestSearch::Auto)
}

pub fn bps_encode_with(
    base: &PointCloud,
    human: &PointCloud,
    scene: &PointCloud,
    search: NearestSearch,
) -> Result<BpsFeature> {
    if base.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let mut values = nearest_distances(&base.points, &human.points, search)?;
    values.extend(nearest_distances(&base.points, &scene.points, search)?);
    Ok(BpsFeature { values, anchor: centroid(&base.points).expect("non-empty") })
}

/// Body height as the vertical extent of the keyframe's human mesh.
pub fn body_height(human_mesh: &PointCloud) -> Result<f64> {
    let h = human_mesh.vertical_extent().ok_or(Error::EmptyCloud)?;
    if h <= 0.0 {
        return Err(Error::InvalidAnthropometry(h));
    }
    Ok(h)
}

/// Per-(frame, human) encoding plus its ordering key.
#[derive(Debug, Clone)]
pub struct FrameHumanFeature {
    pub ts: i64,
    pub human_id: u32,
    pub feature: BpsFeature,
}

/// Packs per-(frame, human) features into an `n_slots × D` row-major matrix,
/// ordered frame-major then by human id, truncated or zero-padded.
pub fn assemble_3d_features(features: &[FrameHumanFeature], n_slots: usize, dim: usize) -> Result<Vec<f64>> {
    let mut sorted: Vec<&FrameHumanFeature> = features.iter().collect();
    sorted.sort_by_key(|f| (f.ts, f.human_id));
    let mut out = vec![0.0; n_slots * dim];
    for (slot, f) in sorted.into_iter().take(n_slots).enumerate() {
        if f.feature.values.len() != dim {
            return Err(Error::Dimension(format!("feature of length {} in a {dim}-wide slot", f.feature.values.len())));
        }
        out[slot * dim..(slot + 1) * dim].copy_from_slice(&f.feature.values);
    }
    Ok(out)
}

/// Full per-keyframe encoding: align the scene, sample the base points around
/// the pelvis, and encode the human mesh and aligned scene.
pub fn encode_keyframe(
    cfg: &BpsConfig,
    pelvis: Point3,
    human_mesh: &PointCloud,
    scene: &PointCloud,
    human_front: &PointCloud,
    scene_corresp: &PointCloud,
) -> Result<(AlignmentTransform, BpsFeature)> {
    let t = align_scene_to_human(human_front, scene_corresp)?;
    let aligned = apply_alignment(scene, &t);
    let base = generate_base_points(cfg, pelvis, body_height(human_mesh)?)?;
    let mut feature = bps_encode(&base, human_mesh, &aligned)?;
    feature.anchor = pelvis;
    Ok((t, feature))
}
