//! Test-split video selection: choose `N_t` videos minimising the variance of
//! the summed interaction and object histograms, subject to per-interaction
//! floors and a floor on the top half of the object-location heatmap.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest instance [`solve_exact`] will enumerate.
pub const EXACT_LIMIT: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoStats {
    pub id: String,
    pub interactions: Vec<u64>,
    pub objects: Vec<u64>,
    pub heatmap: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitProblem {
    pub videos: Vec<VideoStats>,
    pub target_size: usize,
    /// Minimum summed count per interaction class; empty means no floors.
    #[serde(default)]
    pub interaction_floors: Vec<u64>,
    /// Minimum summed count over the first half of the heatmap bins.
    #[serde(default)]
    pub top_half_floor: u64,
}

impl SplitProblem {
    pub fn validate(&self) -> Result<()> {
        let n = self.videos.len();
        if self.target_size == 0 || self.target_size > n {
            return Err(Error::Config(format!("target size {} must lie in 1..={n}", self.target_size)));
        }
        let first = &self.videos[0];
        for v in &self.videos {
            if v.interactions.len() != first.interactions.len()
                || v.objects.len() != first.objects.len()
                || v.heatmap.len() != first.heatmap.len()
            {
                return Err(Error::Dimension(format!("video {} histogram lengths differ", v.id)));
            }
        }
        if !self.interaction_floors.is_empty() && self.interaction_floors.len() != first.interactions.len() {
            return Err(Error::Dimension(format!(
                "{} floors for {} interaction classes",
                self.interaction_floors.len(),
                first.interactions.len()
            )));
        }
        Ok(())
    }

    fn n_interactions(&self) -> usize {
        self.videos.first().map_or(0, |v| v.interactions.len())
    }

    fn top_half(&self, video: usize) -> u64 {
        let h = &self.videos[video].heatmap;
        h[..h.len() / 2].iter().sum()
    }

    fn floor(&self, j: usize) -> u64 {
        self.interaction_floors.get(j).copied().unwrap_or(0)
    }
}

fn population_variance(values: &[u64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n
}

/// Running totals of a selection.
#[derive(Debug, Clone)]
struct Totals {
    interactions: Vec<u64>,
    objects: Vec<u64>,
    top_half: u64,
    size: usize,
}

impl Totals {
    fn empty(p: &SplitProblem) -> Self {
        let v = p.videos.first();
        Self {
            interactions: vec![0; v.map_or(0, |v| v.interactions.len())],
            objects: vec![0; v.map_or(0, |v| v.objects.len())],
            top_half: 0,
            size: 0,
        }
    }

    fn of(p: &SplitProblem, sel: &[usize]) -> Self {
        let mut t = Self::empty(p);
        for &i in sel {
            t.add(p, i);
        }
        t
    }

    fn add(&mut self, p: &SplitProblem, i: usize) {
        let v = &p.videos[i];
        self.interactions.iter_mut().zip(&v.interactions).for_each(|(a, b)| *a += b);
        self.objects.iter_mut().zip(&v.objects).for_each(|(a, b)| *a += b);
        self.top_half += p.top_half(i);
        self.size += 1;
    }

    fn remove(&mut self, p: &SplitProblem, i: usize) {
        let v = &p.videos[i];
        self.interactions.iter_mut().zip(&v.interactions).for_each(|(a, b)| *a -= b);
        self.objects.iter_mut().zip(&v.objects).for_each(|(a, b)| *a -= b);
        self.top_half -= p.top_half(i);
        self.size -= 1;
    }

    fn objective(&self) -> f64 {
        population_variance(&self.interactions) + population_variance(&self.objects)
    }

    /// Summed shortfall over the floors (size excluded).
    fn deficit(&self, p: &SplitProblem) -> u64 {
        let floors: u64 = (0..self.interactions.len()).map(|j| p.floor(j).saturating_sub(self.interactions[j])).sum();
        floors + p.top_half_floor.saturating_sub(self.top_half)
    }
}

/// Variance of the summed interaction histogram plus variance of the summed
/// object histogram, population form.
pub fn objective(p: &SplitProblem, sel: &[usize]) -> f64 {
    Totals::of(p, sel).objective()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feasibility {
    pub size_ok: bool,
    pub floors_ok: Vec<bool>,
    pub top_half_ok: bool,
    /// `selected - target` videos.
    pub size_slack: i64,
    /// Per interaction class, total minus floor.
    pub floor_slack: Vec<i64>,
    pub top_half_slack: i64,
}

impl Feasibility {
    pub fn is_feasible(&self) -> bool {
        self.size_ok && self.top_half_ok && self.floors_ok.iter().all(|&f| f)
    }
}

pub fn check_feasible(p: &SplitProblem, sel: &[usize]) -> Feasibility {
    let t = Totals::of(p, sel);
    let floor_slack: Vec<i64> = (0..p.n_interactions()).map(|j| t.interactions[j] as i64 - p.floor(j) as i64).collect();
    let top_half_slack = t.top_half as i64 - p.top_half_floor as i64;
    Feasibility {
        size_ok: sel.len() == p.target_size,
        floors_ok: floor_slack.iter().map(|&s| s >= 0).collect(),
        top_half_ok: top_half_slack >= 0,
        size_slack: sel.len() as i64 - p.target_size as i64,
        floor_slack,
        top_half_slack,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Feasible,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSolution {
    pub selected: Vec<usize>,
    pub objective: f64,
    pub status: SolveStatus,
    pub feasibility: Feasibility,
}

impl SplitSolution {
    fn new(p: &SplitProblem, mut selected: Vec<usize>, optimal: bool) -> Self {
        selected.sort_unstable();
        let feasibility = check_feasible(p, &selected);
        let status = match (feasibility.is_feasible(), optimal) {
            (false, _) => SolveStatus::Infeasible,
            (true, true) => SolveStatus::Optimal,
            (true, false) => SolveStatus::Feasible,
        };
        Self { objective: objective(p, &selected), selected, status, feasibility }
    }

    pub fn selected_ids<'a>(&self, p: &'a SplitProblem) -> Vec<&'a str> {
        self.selected.iter().map(|&i| p.videos[i].id.as_str()).collect()
    }
}

/// Total order used by both solvers: smaller deficit, then smaller
/// objective, then lexicographically smaller selection.
fn compare(a: &(u64, f64, Vec<usize>), b: &(u64, f64, Vec<usize>)) -> Ordering {
    a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then_with(|| a.2.cmp(&b.2))
}

/// Advances `comb` to the next k-combination of `0..n` in lexicographic order.
fn next_combination(comb: &mut [usize], n: usize) -> bool {
    let k = comb.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if comb[i] < n - k + i {
            comb[i] += 1;
            for j in i + 1..k {
                comb[j] = comb[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Exhaustive enumeration of every `N_t`-subset. When no subset meets the
/// floors, the least-deficient subset is returned with status `Infeasible`.
pub fn solve_exact(p: &SplitProblem) -> Result<SplitSolution> {
    p.validate()?;
    let n = p.videos.len();
    if n > EXACT_LIMIT {
        return Err(Error::SizeGuard { limit: EXACT_LIMIT, got: n });
    }
    let k = p.target_size;
    // one task per smallest element
    let best = (0..=n - k)
        .into_par_iter()
        .filter_map(|first| {
            let mut rest: Vec<usize> = (first + 1..first + k).collect();
            let mut best: Option<(u64, f64, Vec<usize>)> = None;
            loop {
                let mut sel = Vec::with_capacity(k);
                sel.push(first);
                sel.extend_from_slice(&rest);
                let t = Totals::of(p, &sel);
                let cand = (t.deficit(p), t.objective(), sel);
                if best.as_ref().is_none_or(|b| compare(&cand, b) == Ordering::Less) {
                    best = Some(cand);
                }
                if k == 1 || !next_combination_offset(&mut rest, first + 1, n) {
                    break;
                }
            }
            best
        })
        .min_by(compare)
        .expect("at least one subset");
    Ok(SplitSolution::new(p, best.2, true))
}

/// Combination of `offset..n` stored with absolute indices.
fn next_combination_offset(comb: &mut [usize], offset: usize, n: usize) -> bool {
    comb.iter_mut().for_each(|c| *c -= offset);
    let more = next_combination(comb, n - offset);
    comb.iter_mut().for_each(|c| *c += offset);
    more
}

fn key(p: &SplitProblem, t: &Totals) -> (u64, f64) {
    (t.deficit(p), t.objective())
}

fn improves(new: (u64, f64), old: (u64, f64)) -> bool {
    match new.0.cmp(&old.0) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => new.1 < old.1 - 1e-12 * old.1.abs().max(1.0),
    }
}

/// Greedy construction: fill the most violated floor first, otherwise add
/// the video that keeps the objective lowest.
pub fn greedy(p: &SplitProblem) -> Result<Vec<usize>> {
    p.validate()?;
    let n = p.videos.len();
    let mut totals = Totals::empty(p);
    let mut chosen = vec![false; n];
    let mut sel = Vec::with_capacity(p.target_size);
    while sel.len() < p.target_size {
        // (deficit, constraint index); the heatmap floor ranks after the classes
        let mut worst: Option<(u64, usize)> = None;
        for j in 0..p.n_interactions() {
            let d = p.floor(j).saturating_sub(totals.interactions[j]);
            if d > 0 && worst.is_none_or(|w| d > w.0) {
                worst = Some((d, j));
            }
        }
        let d = p.top_half_floor.saturating_sub(totals.top_half);
        if d > 0 && worst.is_none_or(|w| d > w.0) {
            worst = Some((d, p.n_interactions()));
        }
        let helps = |i: usize| match worst {
            None => true,
            Some((_, j)) if j == p.n_interactions() => p.top_half(i) > 0,
            Some((_, j)) => p.videos[i].interactions[j] > 0,
        };
        let mut pool: Vec<usize> = (0..n).filter(|&i| !chosen[i] && helps(i)).collect();
        if pool.is_empty() {
            pool = (0..n).filter(|&i| !chosen[i]).collect();
        }
        let mut best: Option<(usize, (u64, f64))> = None;
        for i in pool {
            totals.add(p, i);
            let k = key(p, &totals);
            totals.remove(p, i);
            if best.is_none_or(|(_, b)| improves(k, b)) {
                best = Some((i, k));
            }
        }
        let (i, _) = best.expect("unselected videos remain");
        chosen[i] = true;
        totals.add(p, i);
        sel.push(i);
    }
    Ok(sel)
}

/// Greedy start followed by seeded first-improvement 1-swap local search.
///
/// Each descent step scans all (out, in) pairs in a seeded random order and
/// accepts the first swap that lowers `(deficit, objective)`. Once a local
/// optimum is reached, the rest of the `iterations` budget goes to restarts:
/// two random swaps applied to the best selection so far, then another
/// descent. Only improvements over the best are kept.
pub fn solve_heuristic(p: &SplitProblem, seed: u64, iterations: usize) -> Result<SplitSolution> {
    let (mut best, trace) = local_search(p, greedy(p)?, seed, iterations);
    let mut best_key = *trace.last().expect("trace holds the start");
    let mut spent = trace.len();
    let n = p.videos.len();
    if p.target_size == 0 || p.target_size == n {
        return Ok(SplitSolution::new(p, best, false));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    while spent < iterations {
        let mut sel = best.clone();
        for _ in 0..2 {
            let outside: Vec<usize> = (0..n).filter(|i| !sel.contains(i)).collect();
            let pos = rng.gen_range(0..sel.len());
            sel[pos] = outside[rng.gen_range(0..outside.len())];
        }
        let (sel, trace) = local_search(p, sel, rng.gen(), iterations - spent);
        spent += trace.len();
        let k = *trace.last().expect("trace holds the start");
        if improves(k, best_key) {
            best = sel;
            best_key = k;
        }
    }
    Ok(SplitSolution::new(p, best, false))
}

/// Returns the improved selection and the `(deficit, objective)` trace of
/// every accepted state, starting with the initial one.
pub fn local_search(
    p: &SplitProblem,
    mut sel: Vec<usize>,
    seed: u64,
    iterations: usize,
) -> (Vec<usize>, Vec<(u64, f64)>) {
    let n = p.videos.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut totals = Totals::of(p, &sel);
    let mut current = key(p, &totals);
    let mut trace = vec![current];
    for _ in 0..iterations {
        let mut inside = vec![false; n];
        sel.iter().for_each(|&i| inside[i] = true);
        let mut pairs: Vec<(usize, usize)> =
            (0..sel.len()).flat_map(|pos| (0..n).filter(|&j| !inside[j]).map(move |j| (pos, j))).collect();
        pairs.shuffle(&mut rng);
        let mut accepted = false;
        for (pos, incoming) in pairs {
            let outgoing = sel[pos];
            totals.remove(p, outgoing);
            totals.add(p, incoming);
            let k = key(p, &totals);
            if improves(k, current) {
                sel[pos] = incoming;
                current = k;
                trace.push(k);
                accepted = true;
                break;
            }
            totals.remove(p, incoming);
            totals.add(p, outgoing);
        }
        if !accepted {
            break;
        }
    }
    (sel, trace)
}
