//! The non-neural grounding head: mask-pooled object features, human query
//! pooling, cosine/GIoU score fusion, threshold selection, depth-clustered
//! box generation, the weighted BCE value, and the fusion grid search.

use std::collections::BTreeSet;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{giou, mask_intersection_area, mask_to_box, union_box, BBox, Mask};

/// Candidate masks kept per keyframe.
pub const MAX_CANDIDATES: usize = 255;
/// Bin width used when taking the mode of continuous depths.
pub const DEPTH_BIN: f64 = 0.05;
/// A proposal is a GT mask when more than this fraction of it lies inside
/// the accurate mask.
pub const GT_RATIO: (u64, u64) = (9, 10);
/// ROI-align output grid.
pub const ROI_GRID: usize = 7;
/// Bilinear samples per ROI cell along each axis.
pub const ROI_SAMPLES: usize = 2;
pub const DEFAULT_POS_WEIGHT: f64 = 10.0;
const BCE_EPS: f64 = 1e-7;

/// Dense `H × W × D` feature grid, row-major with the channel innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(Error::Dimension(format!("empty feature map {height}x{width}x{dim}")));
        }
        if data.len() != height * width * dim {
            return Err(Error::Dimension(format!("{} values for a {height}x{width}x{dim} map", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dimension("non-finite feature value".into()));
        }
        Ok(Self { height, width, dim, data })
    }

    pub fn filled(height: usize, width: usize, dim: usize, value: f64) -> Result<Self> {
        Self::new(height, width, dim, vec![value; height * width * dim])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn cell(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.width + x) * self.dim;
        &self.data[start..start + self.dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Object,
    VerbLanguage,
    HumanQuery,
    DecoderOutput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVec {
    pub kind: FeatureKind,
    pub values: Vec<f64>,
}

impl FeatureVec {
    pub fn new(kind: FeatureKind, values: Vec<f64>) -> Self {
        Self { kind, values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn cosine(a: &FeatureVec, b: &FeatureVec) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!("cosine of {}-d and {}-d vectors", a.dim(), b.dim())));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::UndefinedCosine);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Denominator of the masked average pool.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    /// Divide by the number of foreground cells.
    #[default]
    ForegroundMean,
    /// Divide by every cell of the map.
    AllCells,
}

/// Nearest-neighbour resize of a mask to an `height × width` row-major grid.
pub fn resize_mask(m: &Mask, height: usize, width: usize) -> Vec<bool> {
    let grid = m.decode();
    let (mh, mw) = (m.height(), m.width());
    let mut out = vec![false; height * width];
    if mh == 0 || mw == 0 {
        return out;
    }
    for y in 0..height {
        let sy = (((y as f64 + 0.5) * mh as f64 / height as f64) as usize).min(mh - 1);
        for x in 0..width {
            let sx = (((x as f64 + 0.5) * mw as f64 / width as f64) as usize).min(mw - 1);
            out[y * width + x] = grid[sx * mh + sy];
        }
    }
    out
}

/// Object feature of one candidate mask: average of the context map under
/// the resized mask.
pub fn pool_object_feature(fc: &FeatureMap, m: &Mask, mode: PoolingMode) -> Result<FeatureVec> {
    let resized = resize_mask(m, fc.height, fc.width);
    let count = resized.iter().filter(|&&c| c).count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let mut acc = vec![0.0; fc.dim];
    for (i, _) in resized.iter().enumerate().filter(|(_, &c)| c) {
        let cell = &fc.data[i * fc.dim..(i + 1) * fc.dim];
        acc.iter_mut().zip(cell).for_each(|(a, v)| *a += v);
    }
    let denom = match mode {
        PoolingMode::ForegroundMean => count,
        PoolingMode::AllCells => fc.height * fc.width,
    } as f64;
    Ok(FeatureVec::new(FeatureKind::Object, acc.into_iter().map(|v| v / denom).collect()))
}

fn bilinear(fc: &FeatureMap, y: f64, x: f64, out: &mut [f64], weight: f64) {
    let y = y.clamp(0.0, (fc.height - 1) as f64);
    let x = x.clamp(0.0, (fc.width - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(fc.height - 1), (x0 + 1).min(fc.width - 1));
    let (ly, lx) = (y - y0 as f64, x - x0 as f64);
    let taps =
        [(y0, x0, (1.0 - ly) * (1.0 - lx)), (y0, x1, (1.0 - ly) * lx), (y1, x0, ly * (1.0 - lx)), (y1, x1, ly * lx)];
    for (ty, tx, w) in taps {
        if w == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(fc.cell(ty, tx)) {
            *o += weight * w * v;
        }
    }
}

/// Human query: temporal mean of the context slices, 7×7 bilinear ROI-align
/// of the human box, then a spatial mean.
///
/// `image_size` is `(width, height)` of the frame the box is expressed in.
/// Sample coordinates are pixel-centre aligned and clamped to the map border.
pub fn pool_human_query(slices: &[FeatureMap], hbox: &BBox, image_size: (usize, usize)) -> Result<FeatureVec> {
    let first = slices.first().ok_or_else(|| Error::Dimension("no temporal slices".into()))?;
    if slices.iter().any(|s| s.height != first.height || s.width != first.width || s.dim != first.dim) {
        return Err(Error::Dimension("temporal slices differ in shape".into()));
    }
    let (img_w, img_h) = image_size;
    if img_w == 0 || img_h == 0 {
        return Err(Error::Dimension("zero-sized image".into()));
    }
    let sx = first.width as f64 / img_w as f64;
    let sy = first.height as f64 / img_h as f64;
    let (x1, y1, x2, y2) = (hbox.x1() * sx, hbox.y1() * sy, hbox.x2() * sx, hbox.y2() * sy);
    if x2 <= 0.0 || y2 <= 0.0 || x1 >= first.width as f64 || y1 >= first.height as f64 {
        return Err(Error::OutOfBounds(hbox.to_string()));
    }

    let n = slices.len() as f64;
    let mut mean = vec![0.0; first.data.len()];
    for s in slices {
        mean.iter_mut().zip(&s.data).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let avg = FeatureMap { data: mean, ..first.clone() };

    let cell_w = (x2 - x1) / ROI_GRID as f64;
    let cell_h = (y2 - y1) / ROI_GRID as f64;
    let per_axis = ROI_GRID * ROI_SAMPLES;
    let weight = 1.0 / (per_axis * per_axis) as f64;
    let mut out = vec![0.0; avg.dim];
    for gy in 0..per_axis {
        let y = y1 + (gy as f64 + 0.5) * cell_h / ROI_SAMPLES as f64 - 0.5;
        for gx in 0..per_axis {
            let x = x1 + (gx as f64 + 0.5) * cell_w / ROI_SAMPLES as f64 - 0.5;
            bilinear(&avg, y, x, &mut out, weight);
        }
    }
    Ok(FeatureVec::new(FeatureKind::HumanQuery, out))
}

/// Indices of proposals whose overlap with the accurate mask exceeds 90% of
/// the proposal's own area. Zero-area proposals are skipped.
pub fn match_gt_masks(proposals: &[Mask], accurate: &Mask) -> Result<Vec<usize>> {
    let mut matched = Vec::new();
    for (i, p) in proposals.iter().enumerate() {
        let area = p.area();
        if area == 0 {
            warn!("proposal {i} has zero area; skipped");
            continue;
        }
        let inter = mask_intersection_area(p, accurate)?;
        if inter * GT_RATIO.1 > area * GT_RATIO.0 {
            matched.push(i);
        }
    }
    Ok(matched)
}

/// Keeps at most [`MAX_CANDIDATES`] masks, preferring larger areas; returns
/// surviving indices in their original order.
pub fn cap_candidates(masks: &[Mask]) -> Vec<usize> {
    cap_candidates_to(masks, MAX_CANDIDATES)
}

/// As [`cap_candidates`] with a caller-chosen limit, itself capped at
/// [`MAX_CANDIDATES`].
pub fn cap_candidates_to(masks: &[Mask], limit: usize) -> Vec<usize> {
    let limit = limit.min(MAX_CANDIDATES);
    if masks.len() <= limit {
        return (0..masks.len()).collect();
    }
    warn!("{} candidate masks; keeping the {limit} largest", masks.len());
    let mut order: Vec<usize> = (0..masks.len()).collect();
    order.sort_by(|&a, &b| masks[b].area().cmp(&masks[a].area()).then(a.cmp(&b)));
    order.truncate(limit);
    order.sort_unstable();
    order
}

/// Mask-score weight `gamma`, selection threshold `tau` and depth gap `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub gamma: f64,
    pub tau: f64,
    pub beta: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { gamma: 0.8, tau: 0.5, beta: 0.5 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [-1, 1]", self.tau)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta {} must be positive", self.beta)));
        }
        Ok(())
    }

    pub fn fuse(&self, mask_score: f64, distance_score: f64) -> f64 {
        self.gamma * mask_score + (1.0 - self.gamma) * distance_score
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredMask {
    pub index: usize,
    /// Cosine similarity between the query and the mask feature.
    pub mask_score: f64,
    /// GIoU between the human box and the mask box.
    pub distance_score: f64,
    pub fused: f64,
    pub depth_mode: Option<f64>,
}

pub fn score_masks(
    fq: &FeatureVec,
    mask_feats: &[FeatureVec],
    mask_boxes: &[BBox],
    hbox: &BBox,
    cfg: &FusionConfig,
) -> Result<Vec<ScoredMask>> {
    if mask_feats.len() != mask_boxes.len() {
        return Err(Error::Dimension(format!(
            "{} mask features but {} mask boxes",
            mask_feats.len(),
            mask_boxes.len()
        )));
    }
    mask_feats
        .iter()
        .zip(mask_boxes)
        .enumerate()
        .map(|(index, (f, b))| {
            let mask_score = cosine(fq, f)?;
            let distance_score = giou(hbox, b)?;
            Ok(ScoredMask {
                index,
                mask_score,
                distance_score,
                fused: cfg.fuse(mask_score, distance_score),
                depth_mode: None,
            })
        })
        .collect()
}

fn argmax(scored: &[ScoredMask]) -> usize {
    let mut best = 0;
    for (i, s) in scored.iter().enumerate().skip(1) {
        if s.fused > scored[best].fused {
            best = i;
        }
    }
    best
}

/// Positions (into `scored`) whose fused score exceeds `tau`; falls back to
/// the single best mask, lowest position on ties.
pub fn select_masks(scored: &[ScoredMask], cfg: &FusionConfig) -> Result<BTreeSet<usize>> {
    if scored.is_empty() {
        return Err(Error::NoCandidates);
    }
    let above: BTreeSet<usize> = scored.iter().enumerate().filter(|(_, s)| s.fused > cfg.tau).map(|(i, _)| i).collect();
    if above.is_empty() {
        Ok(BTreeSet::from([argmax(scored)]))
    } else {
        Ok(above)
    }
}

/// Scores every query against the masks and merges the results: each mask
/// keeps its best-scoring query, and the selection is the union of the
/// per-query selections.
pub fn score_and_select(
    queries: &[FeatureVec],
    mask_feats: &[FeatureVec],
    mask_boxes: &[BBox],
    hbox: &BBox,
    cfg: &FusionConfig,
) -> Result<(Vec<ScoredMask>, BTreeSet<usize>)> {
    if queries.is_empty() || mask_feats.is_empty() {
        return Err(Error::NoCandidates);
    }
    let mut merged: Option<Vec<ScoredMask>> = None;
    let mut selected = BTreeSet::new();
    for q in queries {
        let scored = score_masks(q, mask_feats, mask_boxes, hbox, cfg)?;
        selected.extend(select_masks(&scored, cfg)?);
        merged = Some(match merged {
            None => scored,
            Some(prev) => prev.into_iter().zip(scored).map(|(a, b)| if b.fused > a.fused { b } else { a }).collect(),
        });
    }
    Ok((merged.expect("at least one query"), selected))
}

/// Most populated depth bin of the mask, reported as the lower median of the
/// raw depths falling in that bin. Ties go to the shallower bin.
pub fn depth_mode(m: &Mask) -> Result<f64> {
    let depth = m.depth().ok_or(Error::MissingDepth)?;
    if depth.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut binned: Vec<(i64, f64)> = depth.iter().map(|&d| ((d / DEPTH_BIN).floor() as i64, d)).collect();
    binned.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let (mut best_len, mut best_start) = (0usize, 0usize);
    let mut start = 0;
    while start < binned.len() {
        let bin = binned[start].0;
        let end = start + binned[start..].iter().take_while(|e| e.0 == bin).count();
        if end - start > best_len {
            (best_len, best_start) = (end - start, start);
        }
        start = end;
    }
    Ok(binned[best_start + (best_len - 1) / 2].1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxKind {
    /// Union of every selected mask.
    Union,
    /// Union of the top mask and the selected masks at a similar depth.
    DepthCluster,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPrediction {
    pub kind: BoxKind,
    pub bbox: BBox,
    pub score: f64,
}

/// Score of the union box when it is ranked behind the depth-clustered box.
fn demoted(score: f64) -> f64 {
    if score == 0.0 {
        -1e-9
    } else {
        score - 0.01 * score.abs()
    }
}

/// Turns the selected masks into ranked box predictions.
///
/// `selected` holds positions into both `masks` and `scored`. Without depth a
/// single union box is returned; with depth the depth-clustered box comes
/// first carrying the top mask's score, followed by the union box.
pub fn generate_boxes(
    selected: &BTreeSet<usize>,
    masks: &[Mask],
    scored: &[ScoredMask],
    cfg: &FusionConfig,
    use_depth: bool,
) -> Result<Vec<BoxPrediction>> {
    if selected.is_empty() {
        return Err(Error::NoCandidates);
    }
    if masks.len() != scored.len() {
        return Err(Error::Dimension(format!("{} masks but {} scores", masks.len(), scored.len())));
    }
    if let Some(&bad) = selected.iter().find(|&&i| i >= masks.len()) {
        return Err(Error::Dimension(format!("selected index {bad} out of range")));
    }
    let boxes: Vec<(usize, BBox)> =
        selected.iter().map(|&i| mask_to_box(&masks[i]).map(|b| (i, b))).collect::<Result<_>>()?;
    let top =
        *selected.iter().reduce(|a, b| if scored[*b].fused > scored[*a].fused { b } else { a }).expect("non-empty");
    let score = scored[top].fused;
    let union = union_box(boxes.iter().map(|(_, b)| b)).expect("non-empty");
    if !use_depth {
        return Ok(vec![BoxPrediction { kind: BoxKind::Union, bbox: union, score }]);
    }
    let top_depth = depth_mode(&masks[top])?;
    let mut cluster = Vec::new();
    for (i, b) in &boxes {
        if *i == top || (depth_mode(&masks[*i])? - top_depth).abs() < cfg.beta {
            cluster.push(*b);
        }
    }
    let clustered = union_box(cluster.iter()).expect("top mask always present");
    Ok(vec![
        BoxPrediction { kind: BoxKind::DepthCluster, bbox: clustered, score },
        BoxPrediction { kind: BoxKind::Union, bbox: union, score: demoted(score) },
    ])
}

/// Mean weighted binary cross-entropy; positives are weighted by `pos_weight`.
pub fn weighted_bce(predictions: &[f64], labels: &[bool], pos_weight: f64) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Dimension(format!("{} predictions but {} labels", predictions.len(), labels.len())));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            if y {
                -pos_weight * p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / predictions.len() as f64)
}

/// Candidate values for each fusion parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionGrid {
    pub gamma: Vec<f64>,
    pub tau: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Default for FusionGrid {
    fn default() -> Self {
        Self {
            gamma: (0..=10).map(|i| i as f64 / 10.0).collect(),
            tau: (-2..=8).map(|i| i as f64 / 10.0).collect(),
            beta: vec![0.1, 0.25, 0.5, 1.0],
        }
    }
}

impl FusionGrid {
    /// Cells in lexicographic `(gamma, tau, beta)` order of the sorted axes.
    pub fn cells(&self) -> Vec<FusionConfig> {
        let sorted = |v: &[f64]| {
            let mut v = v.to_vec();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v
        };
        let (gs, ts, bs) = (sorted(&self.gamma), sorted(&self.tau), sorted(&self.beta));
        let mut out = Vec::with_capacity(gs.len() * ts.len() * bs.len());
        for &gamma in &gs {
            for &tau in &ts {
                for &beta in &bs {
                    out.push(FusionConfig { gamma, tau, beta });
                }
            }
        }
        out
    }
}

/// Exhaustive search for the cell maximising `eval_fn`.
///
/// Cells are evaluated in parallel; the reduction walks them in lexicographic
/// order so the lexicographically first maximiser wins. NaN metrics never win.
pub fn grid_search<F>(grid: &FusionGrid, eval_fn: F) -> Result<(FusionConfig, f64)>
where
    F: Fn(&FusionConfig) -> f64 + Sync,
{
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(Error::Config("empty fusion grid".into()));
    }
    for c in &cells {
        c.validate()?;
    }
    let metrics: Vec<f64> = cells.par_iter().map(&eval_fn).collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, &m) in metrics.iter().enumerate() {
        if m.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| m > b) {
            best = Some((i, m));
        }
    }
    let (i, m) = best.ok_or_else(|| Error::Config("every grid cell produced NaN".into()))?;
    Ok((cells[i], m))
}
