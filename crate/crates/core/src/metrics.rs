//! Tracklet-level grounding metrics: rank-reciprocal mAP at several IoU
//! thresholds, rank-weighted mIoU, and size/distance breakdowns.

use std::collections::{BTreeMap, HashMap};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{giou, iou, BBox};

pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub ts: i64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// Per-keyframe boxes of one instance at a one-second stride.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tracklet {
    pub video_id: String,
    pub instance_id: u32,
    pub verb: String,
    pub frames: Vec<Frame>,
}

impl Tracklet {
    pub fn new(
        video_id: impl Into<String>,
        instance_id: u32,
        verb: impl Into<String>,
        frames: Vec<Frame>,
    ) -> Result<Self> {
        let t = Self { video_id: video_id.into(), instance_id, verb: verb.into(), frames };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Dimension(format!("tracklet {} in {} has no frames", self.instance_id, self.video_id)));
        }
        if self.frames.windows(2).any(|w| w[1].ts <= w[0].ts) {
            return Err(Error::Dimension(format!(
                "tracklet {} in {} has non-increasing timestamps",
                self.instance_id, self.video_id
            )));
        }
        Ok(())
    }

    pub fn frame_at(&self, ts: i64) -> Option<&Frame> {
        self.frames.binary_search_by_key(&ts, |f| f.ts).ok().map(|i| &self.frames[i])
    }

    /// Ranking score: mean per-frame score, unscored frames counting as 0.
    pub fn score(&self) -> f64 {
        let total: f64 = self.frames.iter().map(|f| f.score.unwrap_or(0.0)).sum();
        total / self.frames.len() as f64
    }
}

/// How per-keyframe box IoUs are reduced to a tracklet IoU.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouAggregation {
    /// Mean over GT keyframes; a missing predicted frame scores 0.
    #[default]
    MeanOverGt,
    /// Best single keyframe.
    MaxOverFrames,
}

fn box_iou(a: &BBox, b: &BBox) -> f64 {
    iou(a, b).unwrap_or(0.0)
}

pub fn tracklet_iou(gt: &Tracklet, pred: &Tracklet, agg: IouAggregation) -> f64 {
    if gt.video_id != pred.video_id || gt.frames.is_empty() {
        return 0.0;
    }
    let per_frame = gt.frames.iter().map(|g| pred.frame_at(g.ts).map_or(0.0, |p| box_iou(&g.bbox, &p.bbox)));
    match agg {
        IouAggregation::MeanOverGt => per_frame.sum::<f64>() / gt.frames.len() as f64,
        IouAggregation::MaxOverFrames => per_frame.fold(0.0, f64::max),
    }
}

/// Stable descending order by score; ties keep input order.
pub fn rank_order(preds: &[Tracklet]) -> Vec<usize> {
    let scores: Vec<f64> = preds.iter().map(Tracklet::score).collect();
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Reciprocal rank of the first prediction whose tracklet IoU is strictly
/// above the threshold; 0 when none is.
pub fn instance_ap(gt: &Tracklet, preds: &[Tracklet], iou_thresh: f64, agg: IouAggregation) -> f64 {
    if preds.is_empty() {
        warn!("no predictions for {} instance {}", gt.video_id, gt.instance_id);
        return 0.0;
    }
    rank_order(preds)
        .into_iter()
        .position(|i| tracklet_iou(gt, &preds[i], agg) > iou_thresh)
        .map_or(0.0, |rank| 1.0 / (rank + 1) as f64)
}

/// Rank-weighted mean IoU with weights `1 / rank`.
pub fn weighted_miou(gt: &Tracklet, preds: &[Tracklet], agg: IouAggregation) -> f64 {
    if preds.is_empty() {
        warn!("no predictions for {} instance {}", gt.video_id, gt.instance_id);
        return 0.0;
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (rank, i) in rank_order(preds).into_iter().enumerate() {
        let w = 1.0 / (rank + 1) as f64;
        num += w * tracklet_iou(gt, &preds[i], agg);
        den += w;
    }
    num / den
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeBin {
    Small,
    Medium,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceBin {
    Far,
    Medium,
    Close,
}

impl SizeBin {
    pub fn from_ratio(r: f64) -> Self {
        if r <= 0.3 {
            SizeBin::Small
        } else if r <= 1.0 {
            SizeBin::Medium
        } else {
            SizeBin::Large
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SizeBin::Small => "small",
            SizeBin::Medium => "medium",
            SizeBin::Large => "large",
        }
    }
}

impl DistanceBin {
    pub fn from_giou(r: f64) -> Self {
        if r <= 0.04 {
            DistanceBin::Far
        } else if r <= 0.22 {
            DistanceBin::Medium
        } else {
            DistanceBin::Close
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DistanceBin::Far => "far",
            DistanceBin::Medium => "medium",
            DistanceBin::Close => "close",
        }
    }
}

/// Mean object/human area ratio and mean human–object GIoU over shared
/// keyframes. `None` when the tracklets share no usable keyframe.
pub fn instance_ratios(gt_object: &Tracklet, human: &Tracklet) -> Option<(f64, f64)> {
    let (mut size, mut dist, mut n) = (0.0, 0.0, 0usize);
    for o in &gt_object.frames {
        let Some(h) = human.frame_at(o.ts) else { continue };
        if h.bbox.is_degenerate() {
            continue;
        }
        let Ok(g) = giou(&h.bbox, &o.bbox) else { continue };
        size += o.bbox.area() / h.bbox.area();
        dist += g;
        n += 1;
    }
    (n > 0).then(|| (size / n as f64, dist / n as f64))
}

pub fn bin_instance(gt_object: &Tracklet, human: &Tracklet) -> Option<(SizeBin, DistanceBin)> {
    instance_ratios(gt_object, human).map(|(s, d)| (SizeBin::from_ratio(s), DistanceBin::from_giou(d)))
}

/// One annotated interaction: a human tracklet, its verb, and the GT object
/// tracklet(s) the human interacts with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingInstance {
    pub video_id: String,
    pub human_id: u32,
    pub verb: String,
    pub human: Vec<Frame>,
    pub objects: Vec<ObjectTrack>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrack {
    pub object_id: u32,
    pub frames: Vec<Frame>,
}

pub type InstanceKey = (String, u32, String);

impl GroundingInstance {
    pub fn key(&self) -> InstanceKey {
        (self.video_id.clone(), self.human_id, self.verb.clone())
    }

    pub fn human_tracklet(&self) -> Tracklet {
        Tracklet {
            video_id: self.video_id.clone(),
            instance_id: self.human_id,
            verb: self.verb.clone(),
            frames: self.human.clone(),
        }
    }

    pub fn object_tracklets(&self) -> Vec<Tracklet> {
        self.objects
            .iter()
            .map(|o| Tracklet {
                video_id: self.video_id.clone(),
                instance_id: o.object_id,
                verb: self.verb.clone(),
                frames: o.frames.clone(),
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.human_tracklet().validate()?;
        if self.objects.is_empty() {
            return Err(Error::Dimension(format!(
                "instance ({}, {}, {}) has no object tracklet",
                self.video_id, self.human_id, self.verb
            )));
        }
        self.object_tracklets().iter().try_for_each(Tracklet::validate)
    }
}

pub fn prediction_key(t: &Tracklet) -> InstanceKey {
    (t.video_id.clone(), t.instance_id, t.verb.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub aggregation: IouAggregation,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { aggregation: IouAggregation::MeanOverGt }
    }
}

/// Per GT object tracklet result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub video_id: String,
    pub human_id: u32,
    pub verb: String,
    pub object_id: u32,
    pub ap: Vec<f64>,
    pub miou_w: f64,
    pub size_bin: Option<SizeBin>,
    pub distance_bin: Option<DistanceBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    /// mAP per threshold, in the report's threshold order.
    pub map: Vec<f64>,
    pub miou_w: f64,
}

impl MetricSummary {
    fn from_results<'a, I>(results: I, n_thresholds: usize) -> Self
    where
        I: Iterator<Item = &'a InstanceResult>,
    {
        let mut count = 0;
        let mut ap = vec![0.0; n_thresholds];
        let mut miou = 0.0;
        for r in results {
            count += 1;
            ap.iter_mut().zip(&r.ap).for_each(|(a, v)| *a += v);
            miou += r.miou_w;
        }
        let n = count.max(1) as f64;
        Self { count, map: ap.into_iter().map(|a| a / n).collect(), miou_w: miou / n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub overall: MetricSummary,
    pub size: BTreeMap<SizeBin, MetricSummary>,
    pub distance: BTreeMap<DistanceBin, MetricSummary>,
    /// Instances without shared human/object keyframes, left out of the
    /// breakdowns but counted in `overall`.
    pub unbinned: usize,
    pub instances: Vec<InstanceResult>,
}

impl EvalReport {
    /// Table rows: split name, instance count, mAP per threshold and mIoU_w,
    /// metrics as percentages with two decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,instances");
        for t in &self.thresholds {
            out.push_str(&format!(",mAP@{t}"));
        }
        out.push_str(",mIoU_w\n");
        let mut row = |name: &str, s: &MetricSummary| {
            out.push_str(&format!("{name},{}", s.count));
            for m in &s.map {
                out.push_str(&format!(",{:.2}", 100.0 * m));
            }
            out.push_str(&format!(",{:.2}\n", 100.0 * s.miou_w));
        };
        row("all", &self.overall);
        for (bin, s) in &self.size {
            row(&format!("size:{}", bin.as_str()), s);
        }
        for (bin, s) in &self.distance {
            row(&format!("distance:{}", bin.as_str()), s);
        }
        out
    }
}

/// Scores every GT object tracklet against the predictions of its
/// `(video, human, verb)` key.
pub fn evaluate(
    gt_set: &[GroundingInstance],
    pred_set: &[Tracklet],
    thresholds: &[f64],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::Config(format!("IoU threshold {t} outside (0, 1)")));
    }
    let mut by_key: HashMap<InstanceKey, Vec<Tracklet>> = HashMap::new();
    for p in pred_set {
        by_key.entry(prediction_key(p)).or_default().push(p.clone());
    }
    let units: Vec<(&GroundingInstance, Tracklet)> =
        gt_set.iter().flat_map(|g| g.object_tracklets().into_iter().map(move |o| (g, o))).collect();
    let empty = Vec::new();
    let instances: Vec<InstanceResult> = units
        .par_iter()
        .map(|(g, obj)| {
            let preds = by_key.get(&g.key()).unwrap_or(&empty);
            let bins = bin_instance(obj, &g.human_tracklet());
            InstanceResult {
                video_id: g.video_id.clone(),
                human_id: g.human_id,
                verb: g.verb.clone(),
                object_id: obj.instance_id,
                ap: thresholds.iter().map(|&t| instance_ap(obj, preds, t, opts.aggregation)).collect(),
                miou_w: weighted_miou(obj, preds, opts.aggregation),
                size_bin: bins.map(|b| b.0),
                distance_bin: bins.map(|b| b.1),
            }
        })
        .collect();

    let n = thresholds.len();
    let overall = MetricSummary::from_results(instances.iter(), n);
    let size = [SizeBin::Small, SizeBin::Medium, SizeBin::Large]
        .into_iter()
        .map(|b| (b, MetricSummary::from_results(instances.iter().filter(|r| r.size_bin == Some(b)), n)))
        .collect();
    let distance = [DistanceBin::Far, DistanceBin::Medium, DistanceBin::Close]
        .into_iter()
        .map(|b| (b, MetricSummary::from_results(instances.iter().filter(|r| r.distance_bin == Some(b)), n)))
        .collect();
    Ok(EvalReport {
        thresholds: thresholds.to_vec(),
        overall,
        size,
        distance,
        unbinned: instances.iter().filter(|r| r.size_bin.is_none()).count(),
        instances,
    })
}
