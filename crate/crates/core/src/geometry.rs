//! Axis-aligned boxes and run-length-encoded binary masks.
//!
//! Boxes live in continuous pixel coordinates with the half-open convention:
//! pixel `(x, y)` covers `[x, x + 1) × [y, y + 1)`. Masks are integer grids
//! stored as COCO-style run lengths in column-major order, starting with
//! the number of background pixels.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Axis-aligned box `[x1, y1, x2, y2]` with `x1 <= x2` and `y1 <= y2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x2 < x1 || y2 < y1 {
            return Err(Error::UndefinedGeometry(format!("invalid box [{x1}, {y1}, {x2}, {y2}]")));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_degenerate(&self) -> bool {
        self.area() <= 0.0
    }

    /// Overlap area with `other` (zero when disjoint).
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Smallest box enclosing both.
    pub fn hull(&self, other: &BBox) -> BBox {
        BBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let [x1, y1, x2, y2] = <[f64; 4]>::deserialize(deserializer)?;
        BBox::new(x1, y1, x2, y2).map_err(serde::de::Error::custom)
    }
}

fn check_pair(a: &BBox, b: &BBox) -> Result<()> {
    if a.is_degenerate() && b.is_degenerate() {
        return Err(Error::UndefinedGeometry(format!("both boxes degenerate: {a} and {b}")));
    }
    Ok(())
}

/// Intersection over union. Errors when both boxes have zero area.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    check_pair(a, b)?;
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

/// Generalized IoU: IoU minus the empty fraction of the enclosing hull.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    check_pair(a, b)?;
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let hull = a.hull(b).area();
    Ok(inter / union - (hull - union) / hull)
}

/// Union bounding box of a non-empty collection of boxes.
pub fn union_box<'a, I>(boxes: I) -> Option<BBox>
where
    I: IntoIterator<Item = &'a BBox>,
{
    boxes.into_iter().fold(None, |acc, b| match acc {
        None => Some(*b),
        Some(h) => Some(h.hull(b)),
    })
}

/// Binary mask as column-major run lengths, optionally carrying one depth
/// value per foreground pixel (in column-major foreground order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MaskRecord", into = "MaskRecord")]
pub struct Mask {
    width: usize,
    height: usize,
    counts: Vec<u32>,
    depth: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct MaskRecord {
    width: usize,
    height: usize,
    counts: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth: Option<Vec<f64>>,
}

impl TryFrom<MaskRecord> for Mask {
    type Error = Error;

    fn try_from(r: MaskRecord) -> Result<Self> {
        let mask = Mask::from_rle(r.width, r.height, r.counts)?;
        match r.depth {
            Some(d) => mask.with_depth(d),
            None => Ok(mask),
        }
    }
}

impl From<Mask> for MaskRecord {
    fn from(m: Mask) -> Self {
        MaskRecord { width: m.width, height: m.height, counts: m.counts, depth: m.depth }
    }
}

impl Mask {
    /// Builds a mask from canonical run lengths: only the leading background
    /// run may be zero, and the runs must cover the grid exactly.
    pub fn from_rle(width: usize, height: usize, counts: Vec<u32>) -> Result<Self> {
        let total: u64 = counts.iter().map(|&c| u64::from(c)).sum();
        if total != (width * height) as u64 {
            return Err(Error::Dimension(format!("run lengths sum to {total}, grid is {width}x{height}")));
        }
        if counts.iter().skip(1).any(|&c| c == 0) {
            return Err(Error::Dimension("zero-length run after the leading background run".into()));
        }
        Ok(Self { width, height, counts, depth: None })
    }

    /// Encodes a column-major grid (`grid[x * height + y]`).
    pub fn from_grid(width: usize, height: usize, grid: &[bool]) -> Result<Self> {
        if grid.len() != width * height {
            return Err(Error::Dimension(format!("grid has {} cells, expected {width}x{height}", grid.len())));
        }
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &cell in grid {
            if cell != current {
                counts.push(run);
                run = 0;
                current = cell;
            }
            run += 1;
        }
        if run > 0 || counts.is_empty() {
            counts.push(run);
        }
        Mask::from_rle(width, height, counts)
    }

    /// Filled rectangle of pixels `[x0, x1) × [y0, y1)`, clipped to the grid.
    pub fn from_rect(width: usize, height: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        let mut grid = vec![false; width * height];
        for x in x0.min(width)..x1.min(width) {
            for y in y0.min(height)..y1.min(height) {
                grid[x * height + y] = true;
            }
        }
        Mask::from_grid(width, height, &grid).expect("grid sized from dimensions")
    }

    pub fn with_depth(mut self, depth: Vec<f64>) -> Result<Self> {
        if depth.len() as u64 != self.area() {
            return Err(Error::Dimension(format!(
                "{} depth values for {} foreground pixels",
                depth.len(),
                self.area()
            )));
        }
        if depth.iter().any(|d| !d.is_finite()) {
            return Err(Error::Dimension("non-finite depth value".into()));
        }
        self.depth = Some(depth);
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn depth(&self) -> Option<&[f64]> {
        self.depth.as_deref()
    }

    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| u64::from(c)).sum()
    }

    /// Foreground runs as half-open column-major index ranges.
    pub fn foreground_runs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let mut pos = 0usize;
        self.counts.iter().enumerate().filter_map(move |(i, &c)| {
            let start = pos;
            pos += c as usize;
            (i % 2 == 1).then_some((start, pos))
        })
    }

    pub fn decode(&self) -> Vec<bool> {
        let mut grid = vec![false; self.width * self.height];
        for (s, e) in self.foreground_runs() {
            grid[s..e].iter_mut().for_each(|c| *c = true);
        }
        grid
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        let idx = x * self.height + y;
        self.foreground_runs().any(|(s, e)| s <= idx && idx < e)
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Tight bounding box of the foreground, half-open pixel convention.
pub fn mask_to_box(m: &Mask) -> Result<BBox> {
    let h = m.height;
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for (s, e) in m.foreground_runs() {
        if s == e {
            continue;
        }
        let (xs, xe) = (s / h, (e - 1) / h);
        // a run crossing a column boundary reaches the bottom of its first
        // column and the top of its last
        let (ys, ye) = if xs == xe { (s % h, (e - 1) % h) } else { (0, h - 1) };
        bounds = Some(match bounds {
            None => (xs, ys, xe, ye),
            Some((a, b, c, d)) => (a.min(xs), b.min(ys), c.max(xe), d.max(ye)),
        });
    }
    let (x0, y0, x1, y1) = bounds.ok_or(Error::EmptyMask)?;
    BBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64)
}

/// Number of pixels that are foreground in both masks.
pub fn mask_intersection_area(a: &Mask, b: &Mask) -> Result<u64> {
    if !a.same_shape(b) {
        return Err(Error::Dimension(format!("masks are {}x{} and {}x{}", a.width, a.height, b.width, b.height)));
    }
    let ra: Vec<_> = a.foreground_runs().collect();
    let rb: Vec<_> = b.foreground_runs().collect();
    let (mut i, mut j, mut total) = (0, 0, 0u64);
    while i < ra.len() && j < rb.len() {
        let (s, e) = (ra[i].0.max(rb[j].0), ra[i].1.min(rb[j].1));
        if e > s {
            total += (e - s) as u64;
        }
        if ra[i].1 < rb[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    Ok(total)
}
