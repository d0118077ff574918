use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    is_known_verb, read_json, read_jsonl_numbered, read_tensor, write_bytes, write_json, write_jsonl, write_tensor,
};
use super::{CandidateFile, CloudSidecar, Tensor};
use crate::error::{Error, Result};
use crate::layout4d::CloudRole;
use crate::metrics::GroundingInstance;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub video_id: String,
    pub width: usize,
    pub height: usize,
    pub keyframes: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub videos: Vec<VideoEntry>,
    pub instances: usize,
    pub keyframes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub candidates: CandidateFile,
    pub context: Option<Tensor>,
    pub objects: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloudRecord {
    pub sidecar: CloudSidecar,
    /// One tensor per entry of `sidecar.roles`, same order.
    pub clouds: Vec<Tensor>,
}

impl CloudRecord {
    pub fn cloud(&self, role: CloudRole) -> Option<&Tensor> {
        self.sidecar.roles.iter().position(|r| *r == role).map(|i| &self.clouds[i])
    }
}

pub type FrameKey = (String, i64);
pub type HumanFrameKey = (String, i64, u32);

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub instances: Vec<GroundingInstance>,
    pub keyframes: BTreeMap<FrameKey, Keyframe>,
    pub queries: BTreeMap<HumanFrameKey, Tensor>,
    pub clouds: BTreeMap<HumanFrameKey, CloudRecord>,
}

impl Dataset {
    pub fn video(&self, id: &str) -> Option<&VideoEntry> {
        self.manifest.videos.iter().find(|v| v.video_id == id)
    }
}

struct Layout<'a>(&'a Path);

impl Layout<'_> {
    fn manifest(&self) -> PathBuf {
        self.0.join("manifest.json")
    }
    fn annotations(&self) -> PathBuf {
        self.0.join("annotations.jsonl")
    }
    fn candidates(&self, v: &str, ts: i64) -> PathBuf {
        self.0.join("candidates").join(v).join(format!("{ts}.json"))
    }
    fn context(&self, v: &str, ts: i64) -> PathBuf {
        self.0.join("features").join(v).join(format!("{ts}.context.stgt"))
    }
    fn objects(&self, v: &str, ts: i64) -> PathBuf {
        self.0.join("features").join(v).join(format!("{ts}.objects.stgt"))
    }
    fn queries(&self, v: &str, ts: i64, h: u32) -> PathBuf {
        self.0.join("features").join(v).join(format!("{ts}_h{h}.queries.stgt"))
    }
    fn sidecar(&self, v: &str, ts: i64, h: u32) -> PathBuf {
        self.0.join("clouds").join(v).join(format!("{ts}_h{h}.json"))
    }
    fn cloud(&self, v: &str, ts: i64, h: u32, role: CloudRole) -> PathBuf {
        self.0.join("clouds").join(v).join(format!("{ts}_h{h}.{}.stgt", role.as_str()))
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

fn optional_tensor(path: &Path) -> Result<Option<Tensor>> {
    if path.exists() {
        read_tensor(path).map(Some)
    } else {
        Ok(None)
    }
}

fn bad(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::schema(path, line, msg)
}

/// Loads and cross-checks a dataset directory.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let layout = Layout(root);
    let manifest_path = layout.manifest();
    if !manifest_path.exists() {
        return Err(Error::MissingFile(manifest_path));
    }
    let manifest: Manifest = read_json(&manifest_path)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(bad(&manifest_path, 1, format!("unsupported manifest version {}", manifest.version)));
    }
    let mut videos = BTreeMap::new();
    for v in &manifest.videos {
        if !valid_id(&v.video_id) {
            return Err(bad(&manifest_path, 1, format!("invalid video id {:?}", v.video_id)));
        }
        let frames: BTreeSet<i64> = v.keyframes.iter().copied().collect();
        if frames.len() != v.keyframes.len() {
            return Err(bad(&manifest_path, 1, format!("duplicate keyframes in {}", v.video_id)));
        }
        if videos.insert(v.video_id.as_str(), (v, frames)).is_some() {
            return Err(bad(&manifest_path, 1, format!("duplicate video {}", v.video_id)));
        }
    }

    let ann_path = layout.annotations();
    if !ann_path.exists() {
        return Err(Error::MissingFile(ann_path));
    }
    let numbered: Vec<(usize, GroundingInstance)> = read_jsonl_numbered(&ann_path)?;
    let mut keys = BTreeSet::new();
    for (line, inst) in &numbered {
        let at = |msg: String| bad(&ann_path, *line, msg);
        inst.validate().map_err(|e| at(e.to_string()))?;
        if !is_known_verb(&inst.verb) {
            return Err(at(format!("unknown verb {:?}", inst.verb)));
        }
        let (_, frames) = videos
            .get(inst.video_id.as_str())
            .ok_or_else(|| at(format!("video {:?} not in manifest", inst.video_id)))?;
        if let Some(f) = inst.human.iter().find(|f| !frames.contains(&f.ts)) {
            return Err(at(format!("human keyframe {} not listed for {}", f.ts, inst.video_id)));
        }
        let human_ts: BTreeSet<i64> = inst.human.iter().map(|f| f.ts).collect();
        for o in &inst.objects {
            if let Some(f) = o.frames.iter().find(|f| !human_ts.contains(&f.ts)) {
                return Err(at(format!("object {} keyframe {} is not a human keyframe", o.object_id, f.ts)));
            }
        }
        if !keys.insert(inst.key()) {
            return Err(at(format!("duplicate instance {:?}", inst.key())));
        }
    }
    let instances: Vec<GroundingInstance> = numbered.into_iter().map(|(_, i)| i).collect();

    let mut keyframes = BTreeMap::new();
    for (vid, (entry, frames)) in &videos {
        for &ts in frames {
            let path = layout.candidates(vid, ts);
            if !path.exists() {
                return Err(Error::MissingFile(path));
            }
            let candidates: CandidateFile = read_json(&path)?;
            if candidates.video_id != *vid || candidates.ts != ts {
                return Err(bad(
                    &path,
                    1,
                    format!("file is for ({}, {}), expected ({vid}, {ts})", candidates.video_id, candidates.ts),
                ));
            }
            if (candidates.width, candidates.height) != (entry.width, entry.height) {
                return Err(bad(&path, 1, "frame size differs from the manifest"));
            }
            if let Some(i) =
                candidates.masks.iter().position(|m| (m.width(), m.height()) != (entry.width, entry.height))
            {
                return Err(bad(&path, 1, format!("mask {i} has the wrong size")));
            }
            let context = optional_tensor(&layout.context(vid, ts))?;
            if let Some(t) = &context {
                if t.shape.len() != 3 {
                    return Err(Error::Tensor(format!(
                        "{}: context map must be H x W x D",
                        layout.context(vid, ts).display()
                    )));
                }
            }
            let objects = optional_tensor(&layout.objects(vid, ts))?;
            if let Some(t) = &objects {
                if t.shape.len() != 2 || t.shape[0] != candidates.masks.len() {
                    return Err(Error::Tensor(format!(
                        "{}: expected {} rows of mask features, shape {:?}",
                        layout.objects(vid, ts).display(),
                        candidates.masks.len(),
                        t.shape
                    )));
                }
            }
            keyframes.insert((vid.to_string(), ts), Keyframe { candidates, context, objects });
        }
    }

    let mut queries = BTreeMap::new();
    let mut clouds = BTreeMap::new();
    for inst in &instances {
        for f in &inst.human {
            let key = (inst.video_id.clone(), f.ts, inst.human_id);
            if queries.contains_key(&key) || clouds.contains_key(&key) {
                continue;
            }
            let qpath = layout.queries(&inst.video_id, f.ts, inst.human_id);
            if let Some(t) = optional_tensor(&qpath)? {
                if t.shape.len() != 2 {
                    return Err(Error::Tensor(format!("{}: queries must be N_q x D", qpath.display())));
                }
                queries.insert(key.clone(), t);
            }
            let spath = layout.sidecar(&inst.video_id, f.ts, inst.human_id);
            if spath.exists() {
                clouds.insert(key, load_cloud(&layout, &spath, inst.video_id.as_str(), f.ts, inst.human_id)?);
            }
        }
    }

    let ds = Dataset { manifest, instances, keyframes, queries, clouds };
    if ds.instances.len() != ds.manifest.instances || ds.keyframes.len() != ds.manifest.keyframes {
        return Err(bad(
            &manifest_path,
            1,
            format!(
                "manifest lists {} instances and {} keyframes, found {} and {}",
                ds.manifest.instances,
                ds.manifest.keyframes,
                ds.instances.len(),
                ds.keyframes.len()
            ),
        ));
    }
    Ok(ds)
}

fn load_cloud(layout: &Layout, spath: &Path, vid: &str, ts: i64, h: u32) -> Result<CloudRecord> {
    let sidecar: CloudSidecar = read_json(spath)?;
    if sidecar.video_id != vid || sidecar.ts != ts || sidecar.human_id != h {
        return Err(bad(spath, 1, "sidecar does not match its file name"));
    }
    if sidecar.pelvis.iter().any(|v| !v.is_finite()) {
        return Err(bad(spath, 1, "non-finite pelvis"));
    }
    let mut tensors = Vec::new();
    for &role in &sidecar.roles {
        let path = layout.cloud(vid, ts, h, role);
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        let t = read_tensor(&path)?;
        if t.shape.len() != 2 || t.shape[1] != 3 {
            return Err(Error::Tensor(format!("{}: points must be N x 3", path.display())));
        }
        tensors.push(t);
    }
    Ok(CloudRecord { sidecar, clouds: tensors })
}

/// Writes every part of the dataset under `root`.
pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    let layout = Layout(root);
    write_json(&layout.manifest(), &ds.manifest)?;
    write_jsonl(&layout.annotations(), &ds.instances)?;
    for ((vid, ts), kf) in &ds.keyframes {
        let mut bytes = serde_json::to_vec(&kf.candidates)?;
        bytes.push(b'\n');
        write_bytes(&layout.candidates(vid, *ts), &bytes)?;
        if let Some(t) = &kf.context {
            write_tensor(&layout.context(vid, *ts), t)?;
        }
        if let Some(t) = &kf.objects {
            write_tensor(&layout.objects(vid, *ts), t)?;
        }
    }
    for ((vid, ts, h), t) in &ds.queries {
        write_tensor(&layout.queries(vid, *ts, *h), t)?;
    }
    for ((vid, ts, h), rec) in &ds.clouds {
        write_json(&layout.sidecar(vid, *ts, *h), &rec.sidecar)?;
        for (role, t) in rec.sidecar.roles.iter().zip(&rec.clouds) {
            write_tensor(&layout.cloud(vid, *ts, *h, *role), t)?;
        }
    }
    Ok(())
}
