use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{CloudRecord, Dataset, Keyframe};
use super::{tensor_to_points, RunConfig, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{mask_to_box, BBox, Mask};
use crate::grounding::{
    cap_candidates_to, generate_boxes, pool_human_query, pool_object_feature, score_and_select, FeatureKind,
    FeatureMap, FeatureVec,
};
use crate::layout4d::{assemble_3d_features, encode_keyframe, CloudRole, FrameHumanFeature, PointCloud};
use crate::metrics::{evaluate, EvalReport, Frame, GroundingInstance, Tracklet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PipelineMode {
    /// Depth-aware boxes plus per-keyframe layout encodings.
    #[serde(rename = "4d")]
    FourD,
    /// Candidate masks and features only.
    #[serde(rename = "2d")]
    TwoD,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub video_id: String,
    pub human_id: u32,
    pub verb: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub mode: PipelineMode,
    pub instances: usize,
    pub failed: usize,
    /// (keyframe, human) layouts encoded in 4D mode.
    pub layout_encodings: usize,
    pub failures: Vec<FailureRecord>,
    pub config: RunConfig,
    pub eval: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub predictions: Vec<Tracklet>,
    pub report: PipelineReport,
}

const LAYOUT_ROLES: [CloudRole; 4] =
    [CloudRole::HumanMesh, CloudRole::Scene, CloudRole::HumanFrontSurface, CloudRole::SceneCorrespondence];

/// 4D needs every annotated (keyframe, human) to carry a full cloud record
/// and every candidate mask it scores to carry depth.
fn detect_mode(ds: &Dataset) -> PipelineMode {
    if ds.instances.is_empty() {
        return PipelineMode::TwoD;
    }
    for inst in &ds.instances {
        for f in &inst.human {
            let key = (inst.video_id.clone(), f.ts, inst.human_id);
            let full = ds.clouds.get(&key).is_some_and(|r| LAYOUT_ROLES.iter().all(|&role| r.cloud(role).is_some()));
            if !full {
                info!("no layout clouds for {key:?}; running in 2D mode");
                return PipelineMode::TwoD;
            }
            let depth = ds
                .keyframes
                .get(&(inst.video_id.clone(), f.ts))
                .is_some_and(|k| k.candidates.masks.iter().all(|m| m.depth().is_some()));
            if !depth {
                info!("candidate masks at ({}, {}) lack depth; running in 2D mode", inst.video_id, f.ts);
                return PipelineMode::TwoD;
            }
        }
    }
    PipelineMode::FourD
}

fn feature_map(t: &Tensor) -> Result<FeatureMap> {
    match t.shape.as_slice() {
        &[h, w, d] => FeatureMap::new(h, w, d, t.to_f64()),
        _ => Err(Error::Tensor(format!("context map must be H x W x D, got {:?}", t.shape))),
    }
}

fn check_dim(cfg: &RunConfig, what: &str, dim: usize) -> Result<()> {
    match cfg.feature_dim {
        Some(d) if d != dim => Err(Error::Dimension(format!("{what} has width {dim}, config says {d}"))),
        _ => Ok(()),
    }
}

fn mask_features(kf: &Keyframe, kept: &[usize], cfg: &RunConfig) -> Result<Vec<FeatureVec>> {
    if let Some(t) = &kf.objects {
        check_dim(cfg, "mask features", t.shape[1])?;
        let rows = t.rows()?;
        return Ok(kept.iter().map(|&i| FeatureVec::new(FeatureKind::Object, rows[i].clone())).collect());
    }
    let t = kf
        .context
        .as_ref()
        .ok_or_else(|| Error::Config("keyframe has neither mask features nor a context map".into()))?;
    let fc = feature_map(t)?;
    check_dim(cfg, "context map", fc.dim())?;
    kept.iter().map(|&i| pool_object_feature(&fc, &kf.candidates.masks[i], cfg.pooling)).collect()
}

fn queries(
    ds: &Dataset,
    kf: &Keyframe,
    inst: &GroundingInstance,
    ts: i64,
    hbox: &BBox,
    cfg: &RunConfig,
) -> Result<Vec<FeatureVec>> {
    if let Some(t) = ds.queries.get(&(inst.video_id.clone(), ts, inst.human_id)) {
        check_dim(cfg, "queries", t.shape[1])?;
        let rows = t.rows()?;
        if rows.len() > cfg.n_q {
            warn!(
                "{} queries for ({}, {ts}, h{}); using the first {}",
                rows.len(),
                inst.video_id,
                inst.human_id,
                cfg.n_q
            );
        }
        return Ok(rows.into_iter().take(cfg.n_q).map(|r| FeatureVec::new(FeatureKind::DecoderOutput, r)).collect());
    }
    let t =
        kf.context.as_ref().ok_or_else(|| Error::Config("keyframe has neither queries nor a context map".into()))?;
    let fc = feature_map(t)?;
    let size = (kf.candidates.width, kf.candidates.height);
    Ok(vec![pool_human_query(&[fc], hbox, size)?])
}

fn cloud(rec: &CloudRecord, role: CloudRole) -> Result<PointCloud> {
    let t = rec.cloud(role).ok_or_else(|| Error::Config(format!("cloud record lacks {}", role.as_str())))?;
    PointCloud::new(role, tensor_to_points(t)?)
}

/// Predicted tracklets of one instance (one per box rank) and the number of
/// layouts encoded.
fn ground_instance(
    ds: &Dataset,
    inst: &GroundingInstance,
    cfg: &RunConfig,
    cap: usize,
    mode: PipelineMode,
) -> Result<(Vec<Tracklet>, usize)> {
    let use_depth = mode == PipelineMode::FourD;
    let mut ranked: Vec<Vec<Frame>> = Vec::new();
    let mut layouts = Vec::new();
    for f in &inst.human {
        let kf = ds
            .keyframes
            .get(&(inst.video_id.clone(), f.ts))
            .ok_or_else(|| Error::Config(format!("no candidates for ({}, {})", inst.video_id, f.ts)))?;
        let nonempty: Vec<usize> =
            (0..kf.candidates.masks.len()).filter(|&i| kf.candidates.masks[i].area() > 0).collect();
        let subset: Vec<Mask> = nonempty.iter().map(|&i| kf.candidates.masks[i].clone()).collect();
        let kept: Vec<usize> = cap_candidates_to(&subset, cap).into_iter().map(|i| nonempty[i]).collect();
        if kept.is_empty() {
            return Err(Error::NoCandidates);
        }
        let masks: Vec<Mask> = kept.iter().map(|&i| kf.candidates.masks[i].clone()).collect();
        let boxes: Vec<BBox> = masks.iter().map(mask_to_box).collect::<Result<_>>()?;
        let feats = mask_features(kf, &kept, cfg)?;
        let qs = queries(ds, kf, inst, f.ts, &f.bbox, cfg)?;
        let (scored, selected) = score_and_select(&qs, &feats, &boxes, &f.bbox, &cfg.fusion)?;
        let preds = generate_boxes(&selected, &masks, &scored, &cfg.fusion, use_depth)?;
        if ranked.is_empty() {
            ranked = vec![Vec::new(); preds.len()];
        }
        for (slot, p) in ranked.iter_mut().zip(&preds) {
            slot.push(Frame { ts: f.ts, bbox: p.bbox, score: Some(p.score) });
        }

        if use_depth {
            let rec = &ds.clouds[&(inst.video_id.clone(), f.ts, inst.human_id)];
            let (_, feature) = encode_keyframe(
                &cfg.bps,
                rec.sidecar.pelvis,
                &cloud(rec, CloudRole::HumanMesh)?,
                &cloud(rec, CloudRole::Scene)?,
                &cloud(rec, CloudRole::HumanFrontSurface)?,
                &cloud(rec, CloudRole::SceneCorrespondence)?,
            )?;
            layouts.push(FrameHumanFeature { ts: f.ts, human_id: inst.human_id, feature });
        }
    }
    if use_depth {
        assemble_3d_features(&layouts, cfg.n_3d, cfg.bps.feature_dim)?;
    }
    let tracklets = ranked
        .into_iter()
        .map(|frames| Tracklet {
            video_id: inst.video_id.clone(),
            instance_id: inst.human_id,
            verb: inst.verb.clone(),
            frames,
        })
        .collect();
    Ok((tracklets, layouts.len()))
}

/// Grounds every instance, then evaluates the predictions against the
/// annotations. Instance failures are recorded and leave that instance
/// without predictions.
pub fn run_pipeline(ds: &Dataset, cfg: &RunConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let cap = cfg.candidate_cap();
    let mode = detect_mode(ds);
    let results: Vec<Result<(Vec<Tracklet>, usize)>> =
        ds.instances.par_iter().map(|inst| ground_instance(ds, inst, cfg, cap, mode)).collect();

    let mut predictions = Vec::new();
    let mut failures = Vec::new();
    let mut layout_encodings = 0;
    for (inst, r) in ds.instances.iter().zip(results) {
        match r {
            Ok((t, n)) => {
                predictions.extend(t);
                layout_encodings += n;
            }
            Err(e) => {
                warn!("instance ({}, h{}, {}) failed: {e}", inst.video_id, inst.human_id, inst.verb);
                failures.push(FailureRecord {
                    video_id: inst.video_id.clone(),
                    human_id: inst.human_id,
                    verb: inst.verb.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    let eval = evaluate(&ds.instances, &predictions, &cfg.thresholds, &cfg.eval)?;
    Ok(PipelineOutput {
        predictions,
        report: PipelineReport {
            mode,
            instances: ds.instances.len(),
            failed: failures.len(),
            layout_encodings,
            failures,
            config: cfg.clone(),
            eval,
        },
    })
}
