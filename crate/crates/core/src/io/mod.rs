//! File formats, run configuration, dataset loading, synthetic fixtures and
//! the end-to-end grounding pipeline.
//!
//! Dataset layout under a root directory:
//!
//! ```text
//! manifest.json
//! annotations.jsonl                       one GroundingInstance per line
//! candidates/<video>/<ts>.json            CandidateFile
//! features/<video>/<ts>.context.stgt      H x W x D context map
//! features/<video>/<ts>.objects.stgt      N_masks x D pooled mask features
//! features/<video>/<ts>_h<id>.queries.stgt  N_q x D decoder outputs
//! clouds/<video>/<ts>_h<id>.json          CloudSidecar
//! clouds/<video>/<ts>_h<id>.<role>.stgt   N x 3 points
//! ```
//!
//! Feature and cloud files are optional per keyframe; candidates are not.

mod config;
mod dataset;
mod fixture;
mod pipeline;
pub mod tensor;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Mask;
use crate::layout4d::{CloudRole, Point3};
use crate::metrics::{Frame, Tracklet};

pub use config::RunConfig;
pub use dataset::{load_dataset, save_dataset, CloudRecord, Dataset, Keyframe, Manifest, VideoEntry};
pub use fixture::{generate_fixture, FixtureSpec};
pub use pipeline::{run_pipeline, FailureRecord, PipelineMode, PipelineOutput, PipelineReport};
pub use tensor::{read_tensor, write_tensor, BpsVariant, Tensor};

/// The 51 interaction classes.
pub const VERBS: [&str; 51] = [
    "jump/leap",
    "lie/sleep",
    "sit",
    "answer phone",
    "brush teeth",
    "carry/hold",
    "catch",
    "chop",
    "clink glass",
    "close",
    "cook",
    "cut",
    "dig",
    "dress/put on clothing",
    "drink",
    "drive",
    "eat",
    "enter",
    "exit",
    "extract",
    "fishing",
    "hit",
    "kick",
    "lift/pick up",
    "listen",
    "open",
    "paint",
    "play board game",
    "play musical instrument",
    "play with pets",
    "point to",
    "press",
    "pull",
    "push",
    "put down",
    "read",
    "ride",
    "row boat",
    "sail boat",
    "shoot",
    "shovel",
    "smoke",
    "stir",
    "take a photo",
    "text on/look at a cellphone",
    "throw",
    "touch",
    "turn",
    "watch",
    "work on a computer",
    "write",
];

pub fn is_known_verb(v: &str) -> bool {
    VERBS.contains(&v)
}

/// Candidate masks of one keyframe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateFile {
    pub video_id: String,
    pub ts: i64,
    pub width: usize,
    pub height: usize,
    pub masks: Vec<Mask>,
}

/// Metadata of one (keyframe, human) point-cloud record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudSidecar {
    pub video_id: String,
    pub ts: i64,
    pub human_id: u32,
    pub pelvis: Point3,
    pub roles: Vec<CloudRole>,
}

/// One predicted tracklet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub video_id: String,
    pub human_id: u32,
    pub verb: String,
    pub frames: Vec<Frame>,
}

impl From<PredictionRecord> for Tracklet {
    fn from(p: PredictionRecord) -> Self {
        Tracklet { video_id: p.video_id, instance_id: p.human_id, verb: p.verb, frames: p.frames }
    }
}

impl From<Tracklet> for PredictionRecord {
    fn from(t: Tracklet) -> Self {
        PredictionRecord { video_id: t.video_id, human_id: t.instance_id, verb: t.verb, frames: t.frames }
    }
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::schema(path, e.line(), e.to_string()))
}

/// One compact JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n").expect("writing to a Vec");
    }
    write_bytes(path, &out)
}

/// Reads JSONL, skipping blank lines; errors carry the 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    Ok(read_jsonl_numbered(path)?.into_iter().map(|(_, v)| v).collect())
}

/// As [`read_jsonl`], keeping each record's line number.
pub fn read_jsonl_numbered<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::schema(path, i + 1, e.to_string()))?;
        out.push((i + 1, value));
    }
    Ok(out)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Tracklet>> {
    read_jsonl_numbered::<PredictionRecord>(path)?
        .into_iter()
        .map(|(line, r)| {
            let t = Tracklet::from(r);
            t.validate().map_err(|e| Error::schema(path, line, e.to_string()))?;
            Ok(t)
        })
        .collect()
}

pub fn write_predictions(path: &Path, preds: &[Tracklet]) -> Result<()> {
    let records: Vec<PredictionRecord> = preds.iter().cloned().map(PredictionRecord::from).collect();
    write_jsonl(path, &records)
}

/// Reads an `N x 3` tensor into points.
pub fn tensor_to_points(t: &Tensor) -> Result<Vec<Point3>> {
    match t.shape.as_slice() {
        [_, 3] => Ok(t.data.chunks_exact(3).map(|c| [f64::from(c[0]), f64::from(c[1]), f64::from(c[2])]).collect()),
        _ => Err(Error::Tensor(format!("point tensor must be N x 3, got {:?}", t.shape))),
    }
}

pub fn points_to_tensor(points: &[Point3], role: CloudRole) -> Tensor {
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    Tensor::from_f64(vec![points.len(), 3], role.as_str(), &flat).expect("shape matches")
}
