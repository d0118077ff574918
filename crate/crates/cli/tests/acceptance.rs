//! Acceptance criteria. Each check prints one PASS/FAIL line; the process
//! exits non-zero when any check fails.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use gio_core::geometry::{giou, iou, BBox, Mask};
use gio_core::grounding::match_gt_masks;
use gio_core::io::{
    generate_fixture, load_dataset, read_json, read_predictions, read_tensor, run_pipeline, save_dataset, write_json,
    write_predictions, write_tensor, BpsVariant, FixtureSpec, PipelineReport, RunConfig, Tensor,
};
use gio_core::layout4d::{
    align_scene_to_human, apply_alignment, bps_encode_with, generate_base_points, mean_pairwise_distance, BpsConfig,
    CloudRole, NearestSearch, Point3, PointCloud,
};
use gio_core::metrics::{
    evaluate, EvalOptions, EvalReport, Frame, GroundingInstance, ObjectTrack, Tracklet, DEFAULT_THRESHOLDS,
};
use gio_core::splitter::{solve_exact, solve_heuristic, SolveStatus, SplitProblem, SplitSolution, VideoStats};
use gio_core::taxonomy::{
    build_class_tree, cluster_classes, construct_tree, ClassTree, NestedNode, Overrides, TaxonomyGraph, TOY_GRAPH_TSV,
    TOY_OVERRIDES_TSV,
};

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let checks: [Check; 9] = [
        ("metric oracle equivalence", c1_metric_oracle),
        ("geometry raster oracle", c2_geometry_oracle),
        ("alignment round-trip", c3_alignment),
        ("BPS brute-force equivalence", c4_bps),
        ("GT-matching boundary", c5_gt_matching),
        ("oracle pipeline", c6_oracle_pipeline),
        ("splitter oracle dominance", c7_splitter),
        ("taxonomy fixtures", c8_taxonomy),
        ("determinism and round-trip", c9_determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  criterion {} {name}: {detail} ({secs:.2}s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL  criterion {} {name}: {detail} ({secs:.2}s)", i + 1);
            }
        }
    }
    let _ = panic::take_hook();
    if failed > 0 {
        println!("{failed} of {} criteria failed", checks.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", checks.len());
}

// ---------------------------------------------------------------------------
// 1. metrics against a direct evaluation

fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

fn oracle_box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    let inter = iw * ih;
    let union = (a.x2() - a.x1()) * (a.y2() - a.y1()) + (b.x2() - b.x1()) * (b.y2() - b.y1()) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn oracle_tracklet_iou(gt: &[Frame], pred: &Tracklet) -> f64 {
    let mut total = 0.0;
    for g in gt {
        if let Some(p) = pred.frames.iter().find(|p| p.ts == g.ts) {
            total += oracle_box_iou(&g.bbox, &p.bbox);
        }
    }
    total / gt.len() as f64
}

/// Selection-sort ranking: highest mean score first, earliest on ties.
fn oracle_ranking(preds: &[&Tracklet]) -> Vec<usize> {
    let score = |t: &Tracklet| t.frames.iter().map(|f| f.score.unwrap_or(0.0)).sum::<f64>() / t.frames.len() as f64;
    let mut left: Vec<usize> = (0..preds.len()).collect();
    let mut order = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for k in 1..left.len() {
            if score(preds[left[k]]) > score(preds[left[best]]) {
                best = k;
            }
        }
        order.push(left.remove(best));
    }
    order
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.gen_range(0.0..80.0f64).round();
    let y = rng.gen_range(0.0..80.0f64).round();
    let w = if rng.gen_bool(0.05) { 0.0 } else { rng.gen_range(1.0..40.0f64) };
    let h = rng.gen_range(1.0..40.0f64);
    bx(x, y, x + w, y + h)
}

fn jitter(rng: &mut ChaCha8Rng, b: &BBox) -> BBox {
    let d = rng.gen_range(0.0..6.0);
    let (dx, dy) = (rng.gen_range(-d..=d), rng.gen_range(-d..=d));
    bx(b.x1() + dx, b.y1() + dy, b.x2() + dx + rng.gen_range(0.0..d), b.y2() + dy)
}

fn ts_subset(rng: &mut ChaCha8Rng, from: &[i64]) -> Vec<i64> {
    let mut v: Vec<i64> = from.iter().copied().filter(|_| rng.gen_bool(0.6)).collect();
    if v.is_empty() {
        v.push(from[rng.gen_range(0..from.len())]);
    }
    v
}

fn micro_instance(rng: &mut ChaCha8Rng) -> (Vec<GroundingInstance>, Vec<Tracklet>) {
    let verbs = ["sit", "drink"];
    let mut gts = Vec::new();
    let mut budget = rng.gen_range(1..=6usize);
    let mut human_id = 1;
    while budget > 0 {
        let n_obj = rng.gen_range(1..=budget.min(2));
        budget -= n_obj;
        let stamps = ts_subset(rng, &[0, 1, 2, 3, 4]);
        let human = stamps.iter().map(|&ts| Frame { ts, bbox: random_box(rng), score: None }).collect();
        let objects = (0..n_obj)
            .map(|o| ObjectTrack {
                object_id: o as u32 + 1,
                frames: ts_subset(rng, &stamps)
                    .into_iter()
                    .map(|ts| Frame { ts, bbox: random_box(rng), score: None })
                    .collect(),
            })
            .collect();
        gts.push(GroundingInstance {
            video_id: "v".into(),
            human_id,
            verb: verbs[rng.gen_range(0..2)].into(),
            human,
            objects,
        });
        human_id += 1;
    }
    let mut preds = Vec::new();
    for _ in 0..rng.gen_range(0..=4) {
        let g = &gts[rng.gen_range(0..gts.len())];
        let obj = &g.objects[rng.gen_range(0..g.objects.len())];
        let stamps = ts_subset(rng, &[0, 1, 2, 3, 4]);
        let frames = stamps
            .iter()
            .map(|&ts| {
                let bbox = match obj.frames.iter().find(|f| f.ts == ts) {
                    Some(f) if rng.gen_bool(0.8) => jitter(rng, &f.bbox),
                    _ => random_box(rng),
                };
                let score = rng.gen_bool(0.9).then(|| f64::from(rng.gen_range(0..5)) / 4.0);
                Frame { ts, bbox, score }
            })
            .collect();
        let video_id = if rng.gen_bool(0.1) { "w" } else { "v" };
        preds.push(Tracklet { video_id: video_id.into(), instance_id: g.human_id, verb: g.verb.clone(), frames });
    }
    (gts, preds)
}

fn c1_metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases: Vec<_> = (0..200).map(|_| micro_instance(&mut rng)).collect();
    let opts = EvalOptions::default();
    let start = Instant::now();
    let reports: Vec<EvalReport> =
        cases.iter().map(|(g, p)| evaluate(g, p, &DEFAULT_THRESHOLDS, &opts).unwrap()).collect();
    let elapsed = start.elapsed().as_secs_f64();

    let mut worst = 0.0f64;
    let mut units = 0;
    for ((gts, preds), report) in cases.iter().zip(&reports) {
        let mut ap_sum = [0.0; 5];
        let mut miou_sum = 0.0;
        let mut k = 0;
        for g in gts {
            let mine: Vec<&Tracklet> = preds
                .iter()
                .filter(|p| p.video_id == g.video_id && p.instance_id == g.human_id && p.verb == g.verb)
                .collect();
            let order = oracle_ranking(&mine);
            for obj in &g.objects {
                let ious: Vec<f64> = order.iter().map(|&i| oracle_tracklet_iou(&obj.frames, mine[i])).collect();
                let got = &report.instances[k];
                ensure(got.object_id == obj.object_id && got.human_id == g.human_id, || "unit order differs".into())?;
                for (t, &thr) in DEFAULT_THRESHOLDS.iter().enumerate() {
                    let ap = ious.iter().position(|&v| v > thr).map_or(0.0, |r| 1.0 / (r + 1) as f64);
                    worst = worst.max((ap - got.ap[t]).abs());
                    ap_sum[t] += ap;
                }
                let (mut num, mut den) = (0.0, 0.0);
                for (r, v) in ious.iter().enumerate() {
                    num += v / (r + 1) as f64;
                    den += 1.0 / (r + 1) as f64;
                }
                let miou = if den > 0.0 { num / den } else { 0.0 };
                worst = worst.max((miou - got.miou_w).abs());
                miou_sum += miou;
                k += 1;
                units += 1;
            }
        }
        ensure(report.overall.count == k, || "unit count differs".into())?;
        for (sum, got) in ap_sum.iter().zip(&report.overall.map) {
            worst = worst.max((sum / k as f64 - got).abs());
        }
        worst = worst.max((miou_sum / k as f64 - report.overall.miou_w).abs());
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e} > 1e-12"))?;
    ensure(elapsed < 5.0, || format!("evaluation took {elapsed:.2}s"))?;
    Ok(format!("200 instances / {units} GT tracklets, max |diff| {worst:e}, evaluate {elapsed:.3}s"))
}

// ---------------------------------------------------------------------------
// 2. IoU / GIoU against a 512 x 512 raster

fn c2_geometry_oracle() -> Outcome {
    const N: usize = 512;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rand_box = |rng: &mut ChaCha8Rng| {
        let x1 = rng.gen_range(0..N - 1);
        let y1 = rng.gen_range(0..N - 1);
        let span = rng.gen_range(1..300);
        let x2 = rng.gen_range(x1 + 1..=N.min(x1 + 1 + span));
        let span = rng.gen_range(1..300);
        let y2 = rng.gen_range(y1 + 1..=N.min(y1 + 1 + span));
        [x1, y1, x2, y2]
    };
    let inside = |r: &[usize; 4], x: usize, y: usize| {
        let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
        cx > r[0] as f64 && cx < r[2] as f64 && cy > r[1] as f64 && cy < r[3] as f64
    };
    let mut worst_quanta = 0.0f64;
    for _ in 0..1000 {
        let (a, b) = (rand_box(&mut rng), rand_box(&mut rng));
        let hull = [a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])];
        let (mut ia, mut ib, mut inter, mut ih) = (0u64, 0u64, 0u64, 0u64);
        for y in 0..N {
            for x in 0..N {
                let (pa, pb) = (inside(&a, x, y), inside(&b, x, y));
                ia += pa as u64;
                ib += pb as u64;
                inter += (pa && pb) as u64;
                ih += inside(&hull, x, y) as u64;
            }
        }
        let union = ia + ib - inter;
        let r_iou = inter as f64 / union as f64;
        let r_giou = r_iou - (ih - union) as f64 / ih as f64;
        let to = |r: [usize; 4]| bx(r[0] as f64, r[1] as f64, r[2] as f64, r[3] as f64);
        let (ba, bb) = (to(a), to(b));
        let (ai, ag) = (iou(&ba, &bb).unwrap(), giou(&ba, &bb).unwrap());
        ensure(ag <= ai, || format!("GIoU {ag} > IoU {ai} for {ba} {bb}"))?;
        // one pixel of area, expressed in each ratio's denominator
        let q = ((ai - r_iou).abs() * union as f64).max((ag - r_giou).abs() * ih.min(union) as f64);
        worst_quanta = worst_quanta.max(q);
    }
    ensure(worst_quanta <= 1.0, || format!("deviation of {worst_quanta} pixel quanta"))?;
    Ok(format!("1000 pairs, worst deviation {worst_quanta:.2e} pixel quanta, GIoU <= IoU everywhere"))
}

// ---------------------------------------------------------------------------
// 3. scale/shift recovery

fn centroid(p: &[Point3]) -> Point3 {
    let n = p.len() as f64;
    let mut c = [0.0; 3];
    for q in p {
        (0..3).for_each(|i| c[i] += q[i]);
    }
    c.map(|v| v / n)
}

fn c3_alignment() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_centroid, mut worst_scale, mut worst_inv) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.gen_range(3..=80);
        let human: Vec<Point3> =
            (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(1.0..4.0)]).collect();
        let k: f64 = rng.gen_range(0.2..5.0);
        let c: Point3 = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
        let scene: Vec<Point3> =
            human.iter().map(|p| [(p[0] - c[0]) / k, (p[1] - c[1]) / k, (p[2] - c[2]) / k]).collect();
        let hc = PointCloud::new(CloudRole::HumanFrontSurface, human.clone()).unwrap();
        let sc = PointCloud::new(CloudRole::SceneCorrespondence, scene.clone()).unwrap();
        let t = align_scene_to_human(&hc, &sc).map_err(|e| e.to_string())?;
        let aligned = apply_alignment(&sc, &t);
        let (ca, ch) = (centroid(&aligned.points), centroid(&human));
        let err = ((ca[0] - ch[0]).powi(2) + (ca[1] - ch[1]).powi(2) + (ca[2] - ch[2]).powi(2)).sqrt();
        worst_centroid = worst_centroid.max(err / mean_pairwise_distance(&human));
        worst_scale = worst_scale.max((t.scale - k).abs() / k);

        let k2: f64 = rng.gen_range(0.2..5.0);
        let rescaled: Vec<Point3> = scene.iter().map(|p| p.map(|v| v * k2)).collect();
        let t2 = align_scene_to_human(&hc, &PointCloud::new(CloudRole::SceneCorrespondence, rescaled).unwrap())
            .map_err(|e| e.to_string())?;
        worst_inv = worst_inv.max((t2.scale - t.scale / k2).abs() / (t.scale / k2));
    }
    ensure(worst_centroid < 1e-9, || format!("relative centroid error {worst_centroid:e}"))?;
    ensure(worst_inv <= 1e-12, || format!("scale invariance off by {worst_inv:e}"))?;
    Ok(format!(
        "100 clouds, centroid err {worst_centroid:.1e}, scale err {worst_scale:.1e}, s'=s/k err {worst_inv:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 4. BPS indexed vs exhaustive

fn random_cloud(rng: &mut ChaCha8Rng, role: CloudRole, n: usize, spread: f64) -> PointCloud {
    let pts = (0..n)
        .map(|_| [rng.gen_range(-spread..spread), rng.gen_range(-spread..spread), rng.gen_range(-spread..spread)])
        .collect();
    PointCloud::new(role, pts).unwrap()
}

fn c4_bps() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut compared = 0;
    for case in 0..100u64 {
        let cfg = BpsConfig { feature_dim: 2 * rng.gen_range(1..=64), seed: case, ..BpsConfig::default() };
        let n = rng.gen_range(1..=100);
        let human = random_cloud(&mut rng, CloudRole::HumanMesh, n, 1.0);
        let n = rng.gen_range(1..=100);
        let scene = random_cloud(&mut rng, CloudRole::Scene, n, 3.0);
        let base = generate_base_points(&cfg, [0.0, 0.0, 0.0], rng.gen_range(0.5..2.0)).unwrap();
        let grid = bps_encode_with(&base, &human, &scene, NearestSearch::Grid).unwrap();
        let brute = bps_encode_with(&base, &human, &scene, NearestSearch::Exhaustive).unwrap();
        ensure(grid.values == brute.values, || format!("case {case}: indexed and exhaustive differ"))?;
        compared += grid.values.len();
    }
    for case in 0..50u64 {
        let cfg = BpsConfig { feature_dim: 64, seed: case, ..BpsConfig::default() };
        let n = rng.gen_range(2..=100);
        let mut human = random_cloud(&mut rng, CloudRole::HumanMesh, n, 1.0);
        let n = rng.gen_range(2..=100);
        let mut scene = random_cloud(&mut rng, CloudRole::Scene, n, 3.0);
        let base = generate_base_points(&cfg, [0.1, 0.2, 0.3], 1.7).unwrap();
        let reference = bps_encode_with(&base, &human, &scene, NearestSearch::Grid).unwrap();
        human.points.shuffle(&mut rng);
        scene.points.shuffle(&mut rng);
        for search in [NearestSearch::Grid, NearestSearch::Exhaustive, NearestSearch::Auto] {
            let got = bps_encode_with(&base, &human, &scene, search).unwrap();
            ensure(got.values == reference.values, || format!("shuffle {case}: encoding changed"))?;
        }
    }
    Ok(format!("100 clouds ({compared} distances) bit-identical, 50 shuffles invariant"))
}

// ---------------------------------------------------------------------------
// 5. strict 90% matching rule

fn c5_gt_matching() -> Outcome {
    // 10 x 10 proposal; the accurate mask drops 11, 10 or 9 of its pixels
    let proposal = Mask::from_rect(32, 32, 0, 0, 10, 10);
    let mut outcomes = Vec::new();
    for dropped in [11usize, 10, 9] {
        let mut grid = proposal.decode();
        let mut left = dropped;
        for cell in grid.iter_mut().filter(|c| **c) {
            if left == 0 {
                break;
            }
            *cell = false;
            left -= 1;
        }
        // extra accurate pixels outside the proposal must not matter
        for y in 20..25 {
            grid[30 * 32 + y] = true;
        }
        let accurate = Mask::from_grid(32, 32, &grid).unwrap();
        outcomes.push(!match_gt_masks(std::slice::from_ref(&proposal), &accurate).unwrap().is_empty());
    }
    ensure(outcomes == [false, false, true], || format!("ratios 0.89/0.90/0.91 matched as {outcomes:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (w, h) = (48, 40);
    let mut matched = 0;
    for _ in 0..100 {
        let rect = |rng: &mut ChaCha8Rng| {
            let x0 = rng.gen_range(0..w - 1);
            let y0 = rng.gen_range(0..h - 1);
            Mask::from_rect(w, h, x0, y0, rng.gen_range(x0 + 1..=w), rng.gen_range(y0 + 1..=h))
        };
        let accurate = rect(&mut rng);
        let proposals: Vec<Mask> =
            (0..4).map(|i| if i == 0 { Mask::from_rect(w, h, 0, 0, w, h) } else { rect(&mut rng) }).collect();
        let got = match_gt_masks(&proposals, &accurate).unwrap();
        let (ga, _) = (accurate.decode(), ());
        let want: Vec<usize> = proposals
            .iter()
            .enumerate()
            .filter(|(_, p)| {
                let gp = p.decode();
                let area = gp.iter().filter(|&&c| c).count();
                let inter = gp.iter().zip(&ga).filter(|(a, b)| **a && **b).count();
                area > 0 && 10 * inter > 9 * area
            })
            .map(|(i, _)| i)
            .collect();
        ensure(got == want, || format!("matched {got:?}, pixel count says {want:?}"))?;
        matched += got.len();
    }
    Ok(format!("boundary fixtures [0.89, 0.90, 0.91] -> {outcomes:?}; 100 random fixtures agree ({matched} matches)"))
}

// ---------------------------------------------------------------------------
// 6. oracle pipeline through the CLI

fn gio(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_gio")).args(args).env("RUST_LOG", "error").output().expect("running gio")
}

fn gio_ok(args: &[&str]) -> Result<(), String> {
    let out = gio(args);
    ensure(out.status.success(), || {
        format!("`gio {}` exited {:?}: {}", args.join(" "), out.status.code(), String::from_utf8_lossy(&out.stderr))
    })
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn report_at(dir: &Path) -> PipelineReport {
    read_json(&dir.join("report.json")).unwrap()
}

fn c6_oracle_pipeline() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let start = Instant::now();
    gio_ok(&["fixture", "--seed", "7", "--out", p(&t.join("data"))])?;
    gio_ok(&["ground", "--data", p(&t.join("data")), "--out", p(&t.join("oracle"))])?;
    let oracle = report_at(&t.join("oracle"));
    let map = &oracle.eval.overall.map;
    ensure(map.iter().all(|&m| (m - 1.0).abs() < 1e-12), || format!("oracle mAP {map:?}"))?;
    ensure(oracle.eval.overall.miou_w >= 0.99, || format!("oracle mIoU_w {}", oracle.eval.overall.miou_w))?;
    ensure(oracle.failed == 0, || format!("{} instances failed", oracle.failed))?;

    gio_ok(&["fixture", "--seed", "7", "--adversarial", "--out", p(&t.join("adv"))])?;
    for gamma in ["1", "0"] {
        let cfg = t.join(format!("gamma{gamma}.json"));
        fs::write(&cfg, format!(r#"{{"fusion": {{"gamma": {gamma}, "tau": 0.5, "beta": 0.5}}}}"#)).unwrap();
        gio_ok(&[
            "ground",
            "--config",
            p(&cfg),
            "--data",
            p(&t.join("adv")),
            "--out",
            p(&t.join(format!("adv{gamma}"))),
        ])?;
    }
    let elapsed = start.elapsed().as_secs_f64();
    let (r1, r0) = (report_at(&t.join("adv1")), report_at(&t.join("adv0")));
    let (p1, p0) = (
        read_predictions(&t.join("adv1/predictions.jsonl")).unwrap(),
        read_predictions(&t.join("adv0/predictions.jsonl")).unwrap(),
    );
    let (m1, m0) = (r1.eval.overall.map[0], r0.eval.overall.map[0]);
    ensure(p1 != p0, || "gamma 1 and gamma 0 predicted identical tracklets".into())?;
    ensure(m0 - m1 >= 0.5, || format!("mAP@0.5 gamma=1 {m1} vs gamma=0 {m0}"))?;
    ensure(elapsed < 30.0, || format!("took {elapsed:.1}s"))?;
    Ok(format!(
        "oracle mAP@0.5..0.9 = {map:?}, mIoU_w {:.3}, mode {:?}; adversarial mAP@0.5 gamma=1 {m1:.3} vs gamma=0 {m0:.3}",
        oracle.eval.overall.miou_w, oracle.mode
    ))
}

// ---------------------------------------------------------------------------
// 7. splitter against enumeration

fn variance(v: &[u64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<u64>() as f64 / n;
    v.iter().map(|&x| (x as f64 - mean) * (x as f64 - mean)).sum::<f64>() / n
}

fn oracle_z(p: &SplitProblem, sel: &[usize]) -> (bool, f64) {
    let ni = p.videos[0].interactions.len();
    let no = p.videos[0].objects.len();
    let mut inter = vec![0u64; ni];
    let mut obj = vec![0u64; no];
    let mut top = 0u64;
    for &i in sel {
        let v = &p.videos[i];
        (0..ni).for_each(|j| inter[j] += v.interactions[j]);
        (0..no).for_each(|j| obj[j] += v.objects[j]);
        top += v.heatmap[..v.heatmap.len() / 2].iter().sum::<u64>();
    }
    let feasible = sel.len() == p.target_size
        && (0..ni).all(|j| inter[j] >= p.interaction_floors.get(j).copied().unwrap_or(0))
        && top >= p.top_half_floor;
    (feasible, variance(&inter) + variance(&obj))
}

fn random_problem(rng: &mut ChaCha8Rng) -> SplitProblem {
    let n = rng.gen_range(6..=12);
    let videos: Vec<VideoStats> = (0..n)
        .map(|i| VideoStats {
            id: format!("v{i:02}"),
            interactions: (0..5).map(|_| rng.gen_range(0..20)).collect(),
            objects: (0..6).map(|_| rng.gen_range(0..30)).collect(),
            heatmap: (0..4).map(|_| rng.gen_range(0..10)).collect(),
        })
        .collect();
    let target = rng.gen_range(2..n - 1);
    // floors at half of a random subset's totals keep the instance feasible
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let witness = &idx[..target];
    let floors = (0..5).map(|j| witness.iter().map(|&i| videos[i].interactions[j]).sum::<u64>() / 2).collect();
    let top: u64 = witness.iter().map(|&i| videos[i].heatmap[..2].iter().sum::<u64>()).sum();
    SplitProblem { videos, target_size: target, interaction_floors: floors, top_half_floor: top / 2 }
}

fn c7_splitter() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let problems: Vec<SplitProblem> = (0..50).map(|_| random_problem(&mut rng)).collect();
    let solve_all = || -> Vec<(SplitSolution, SplitSolution)> {
        problems.iter().map(|p| (solve_exact(p).unwrap(), solve_heuristic(p, 0, 5000).unwrap())).collect()
    };
    let runs = [solve_all(), solve_all(), solve_all()];
    ensure(runs[0] == runs[1] && runs[1] == runs[2], || "solutions differ between reruns".into())?;

    let mut within = 0;
    let mut worst_gap = 0.0f64;
    for (p, (exact, heur)) in problems.iter().zip(&runs[0]) {
        let n = p.videos.len();
        let mut best = f64::INFINITY;
        for bits in 0u32..(1 << n) {
            if bits.count_ones() as usize != p.target_size {
                continue;
            }
            let sel: Vec<usize> = (0..n).filter(|i| bits >> i & 1 == 1).collect();
            let (ok, z) = oracle_z(p, &sel);
            if ok {
                best = best.min(z);
            }
        }
        let (ok, z) = oracle_z(p, &exact.selected);
        ensure(exact.status == SolveStatus::Optimal && ok, || "exact solution infeasible".into())?;
        ensure((z - best).abs() <= 1e-9 * best.max(1.0), || format!("exact z {z} but enumeration finds {best}"))?;
        let (hok, hz) = oracle_z(p, &heur.selected);
        if hok {
            let gap = (hz - best) / best.max(1e-12);
            worst_gap = worst_gap.max(gap);
            if hz <= 1.1 * best + 1e-12 {
                within += 1;
            }
        }
    }
    ensure(within >= 45, || format!("heuristic within 10% on only {within}/50"))?;
    Ok(format!(
        "exact optimal on 50/50, heuristic within 10% on {within}/50 (worst gap {:.1}%), 3 identical reruns",
        100.0 * worst_gap
    ))
}

// ---------------------------------------------------------------------------
// 8. taxonomy on the toy graph

fn words(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|w| w.to_string()).collect()
}

fn upward(g: &TaxonomyGraph, start: usize) -> HashMap<usize, usize> {
    let mut dist = HashMap::from([(start, 0)]);
    let mut queue = VecDeque::from([start]);
    while let Some(u) = queue.pop_front() {
        for &p in g.parents(u) {
            if !dist.contains_key(&p) {
                dist.insert(p, dist[&u] + 1);
                queue.push_back(p);
            }
        }
    }
    dist
}

fn c8_taxonomy() -> Outcome {
    let g = TaxonomyGraph::from_tsv(TOY_GRAPH_TSV).unwrap();
    let toy = Overrides::from_tsv(TOY_OVERRIDES_TSV).unwrap();
    let hound = Overrides::from_tsv("hound\tdog\n").unwrap();
    ensure(g.len() == 60, || format!("toy graph has {} nodes", g.len()))?;

    struct Case {
        words: &'static [&'static str],
        overrides: bool,
        clusters: &'static [&'static [&'static str]],
        outline: &'static str,
    }
    let cases = [
        Case {
            words: &["dog", "apple", "banana", "xyzzy", "cat", "chair", "laptop"],
            overrides: true,
            clusters: &[&["dog", "apple", "cat", "chair", "laptop"], &["xyzzy"], &["banana"]],
            outline: "[entity]\n  dog\n    apple\n    cat\n    chair\n      laptop\n  banana\n",
        },
        Case {
            words: &["cup", "bottle", "guitar", "piano", "knife", "gun"],
            overrides: true,
            clusters: &[&["cup", "bottle", "guitar", "piano", "knife", "gun"]],
            outline: "cup\n  bottle\n  guitar\n    piano\n  knife\n    gun\n",
        },
        Case {
            words: &["banana", "apple", "orange"],
            overrides: true,
            clusters: &[&["apple", "orange"], &["banana"]],
            outline: "[fruit]\n  apple\n    orange\n  banana\n",
        },
        Case {
            words: &["animal", "hound"],
            overrides: false,
            clusters: &[&["animal"], &["hound"]],
            outline: "animal\n  hound\n",
        },
        Case {
            words: &["dog", "hound"],
            overrides: false,
            clusters: &[&["dog"], &["hound"]],
            outline: "[animal]\n  dog\n  hound\n",
        },
    ];
    let mut merges_checked = 0;
    for (ci, c) in cases.iter().enumerate() {
        let o = if c.overrides { &toy } else { &hound };
        let clusters = cluster_classes(&words(c.words), &g, o);
        let expected: Vec<Vec<String>> = c.clusters.iter().map(|cl| words(cl)).collect();
        ensure(clusters == expected, || format!("case {ci}: clusters {clusters:?}"))?;
        for cl in &clusters {
            construct_tree(cl, &g, o).map_err(|e| e.to_string())?;
        }
        let (tree, merges) = build_class_tree(&clusters, &g, o).map_err(|e| e.to_string())?;
        ensure(tree.to_outline() == c.outline, || format!("case {ci}: tree\n{}", tree.to_outline()))?;
        for m in &merges {
            let (l, r, par) =
                (g.node(&m.left_root).unwrap(), g.node(&m.right_root).unwrap(), g.node(&m.parent).unwrap());
            let (ul, ur) = (upward(&g, l), upward(&g, r));
            if l == r {
                ensure(g.parents(l).contains(&par), || format!("case {ci}: {} is not a direct hypernym", m.parent))?;
            } else {
                ensure(ul.contains_key(&par) && ur.contains_key(&par), || {
                    format!("case {ci}: {} not a common ancestor", m.parent)
                })?;
                let best = ul.iter().filter_map(|(n, a)| ur.get(n).map(|b| a + b)).min().unwrap();
                ensure(ul[&par] + ur[&par] == best, || {
                    format!("case {ci}: {} is not the closest common ancestor", m.parent)
                })?;
            }
            merges_checked += 1;
        }
    }
    Ok(format!(
        "{} word lists reproduce expected partitions and trees, {merges_checked} merges verified by ancestor walk",
        cases.len()
    ))
}

// ---------------------------------------------------------------------------
// 9. thread-count independence and lossless formats

fn tree_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.is_file() {
            out.insert(PathBuf::new(), fs::read(&dir).unwrap());
            continue;
        }
        for e in fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn c9_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    gio_ok(&["fixture", "--seed", "5", "--out", p(&t.join("data"))])?;

    // inputs for the single-file commands
    let cand_path = t.join("data/candidates/vid000/0.json");
    let cand: Value = serde_json::from_str(&fs::read_to_string(&cand_path).unwrap()).unwrap();
    fs::write(t.join("accurate.json"), cand["masks"][0].to_string()).unwrap();
    let n_masks = cand["masks"].as_array().unwrap().len();
    let scores: Vec<f64> = (0..n_masks).map(|i| (i as f64 + 0.5) / n_masks as f64).collect();
    fs::write(t.join("scores.json"), serde_json::to_string(&scores).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut big = random_problem(&mut rng);
    while big.videos.len() < 24 {
        big.videos.extend(random_problem(&mut rng).videos.into_iter().take(24 - big.videos.len()));
    }
    big.videos.iter_mut().enumerate().for_each(|(i, v)| v.id = format!("v{i:02}"));
    write_json(&t.join("split_small.json"), &random_problem(&mut rng)).unwrap();
    write_json(&t.join("split_big.json"), &big).unwrap();
    fs::write(t.join("classes.txt"), "dog\napple\nbanana\ncat\nchair\nlaptop\ncup\nknife\n").unwrap();
    fs::write(t.join("grid.json"), r#"{"gamma": [0.0, 0.5, 1.0], "tau": [0.2, 0.5], "beta": [0.5]}"#).unwrap();
    let clouds = t.join("data/clouds/vid000/0_h1");
    let front = format!("{}.human_front_surface.stgt", p(&clouds));
    let corresp = format!("{}.scene_correspondence.stgt", p(&clouds));
    let scene = format!("{}.scene.stgt", p(&clouds));
    let sidecar = format!("{}.json", p(&clouds));

    let data = t.join("data");
    let ann = t.join("data/annotations.jsonl");
    let commands: Vec<(&str, Vec<String>)> = vec![
        ("fixture", vec!["fixture".into(), "--seed".into(), "3".into(), "--out".into()]),
        ("ground", vec!["ground".into(), "--data".into(), p(&data).into(), "--out".into()]),
        (
            "match-gt",
            vec![
                "match-gt".into(),
                "--candidates".into(),
                p(&cand_path).into(),
                "--accurate".into(),
                p(&t.join("accurate.json")).into(),
                "--scores".into(),
                p(&t.join("scores.json")).into(),
                "--out".into(),
            ],
        ),
        (
            "align",
            vec![
                "align".into(),
                "--human-front".into(),
                front,
                "--scene-corresp".into(),
                corresp,
                "--scene".into(),
                scene,
                "--aligned".into(),
                "aligned.stgt".into(),
                "--out".into(),
            ],
        ),
        ("bps", vec!["bps".into(), "--seed".into(), "4".into(), "--sidecar".into(), sidecar, "--out".into()]),
        (
            "split-exact",
            vec!["split".into(), "--problem".into(), p(&t.join("split_small.json")).into(), "--out".into()],
        ),
        (
            "split-heuristic",
            vec![
                "split".into(),
                "--seed".into(),
                "2".into(),
                "--problem".into(),
                p(&t.join("split_big.json")).into(),
                "--out".into(),
            ],
        ),
        ("taxonomy", vec!["taxonomy".into(), "--classes".into(), p(&t.join("classes.txt")).into(), "--out".into()]),
        (
            "tune",
            vec![
                "tune".into(),
                "--data".into(),
                p(&data).into(),
                "--grid".into(),
                p(&t.join("grid.json")).into(),
                "--out".into(),
            ],
        ),
    ];
    let mut checked = Vec::new();
    for (name, args) in &commands {
        let mut outputs = Vec::new();
        for threads in ["1", "4"] {
            let out = t.join(format!("{name}-t{threads}"));
            let side = t.join(format!("{name}-t{threads}-aligned.stgt"));
            let mut full: Vec<&str> = args.iter().map(|a| if a == "aligned.stgt" { p(&side) } else { a }).collect();
            full.push(p(&out));
            full.extend(["--threads", threads]);
            gio_ok(&full)?;
            let mut files = tree_files(&out);
            if side.exists() {
                files.insert(PathBuf::from("aligned"), fs::read(&side).unwrap());
            }
            outputs.push(files);
        }
        ensure(!outputs[0].is_empty() && outputs[0] == outputs[1], || format!("`{name}` output depends on --threads"))?;
        checked.push(*name);
    }
    // evaluate reuses ground's predictions
    let preds = t.join("ground-t1/predictions.jsonl");
    let mut evals = Vec::new();
    for threads in ["1", "4"] {
        let out = t.join(format!("evaluate-t{threads}"));
        gio_ok(&["evaluate", "--gt", p(&ann), "--pred", p(&preds), "--out", p(&out), "--threads", threads])?;
        evals.push(tree_files(&out));
    }
    ensure(evals[0] == evals[1], || "`evaluate` output depends on --threads".into())?;
    checked.push("evaluate");

    let formats = round_trips(t)?;
    Ok(format!("{} commands byte-identical across --threads 1/4; round-trips: {}", checked.len(), formats.join(", ")))
}

fn same_bytes(a: &Path, b: &Path) -> Result<(), String> {
    ensure(fs::read(a).unwrap() == fs::read(b).unwrap(), || format!("{} and {} differ", a.display(), b.display()))
}

fn round_trips(t: &Path) -> Result<Vec<&'static str>, String> {
    let rt = t.join("rt");
    let mut done = Vec::new();

    let ds = generate_fixture(&FixtureSpec { seed: 21, ..FixtureSpec::default() }).unwrap();
    save_dataset(&ds, &rt.join("a")).unwrap();
    let loaded = load_dataset(&rt.join("a")).map_err(|e| e.to_string())?;
    ensure(loaded == ds, || "dataset changed on load".into())?;
    save_dataset(&loaded, &rt.join("b")).unwrap();
    ensure(tree_files(&rt.join("a")) == tree_files(&rt.join("b")), || "dataset files changed on re-save".into())?;
    done.extend(["manifest", "annotations JSONL", "candidates JSON", "cloud sidecars", "STGT"]);

    let tensor = Tensor::new(vec![2, 3], "bps", vec![0.1, -2.0, 3.5e-8, f32::MAX, f32::MIN_POSITIVE, -0.0])
        .unwrap()
        .with_bps_variant(BpsVariant::Distance);
    write_tensor(&rt.join("x.stgt"), &tensor).unwrap();
    let back = read_tensor(&rt.join("x.stgt")).unwrap();
    ensure(back.to_bytes() == tensor.to_bytes(), || "STGT tensor changed".into())?;

    let out = run_pipeline(&loaded, &RunConfig::default()).map_err(|e| e.to_string())?;
    write_predictions(&rt.join("p1.jsonl"), &out.predictions).unwrap();
    let preds = read_predictions(&rt.join("p1.jsonl")).unwrap();
    ensure(preds == out.predictions, || "predictions changed".into())?;
    write_predictions(&rt.join("p2.jsonl"), &preds).unwrap();
    same_bytes(&rt.join("p1.jsonl"), &rt.join("p2.jsonl"))?;
    done.push("predictions JSONL");

    write_json(&rt.join("r1.json"), &out.report).unwrap();
    let report: PipelineReport = read_json(&rt.join("r1.json")).unwrap();
    ensure(report == out.report, || "report changed".into())?;
    write_json(&rt.join("r2.json"), &report).unwrap();
    same_bytes(&rt.join("r1.json"), &rt.join("r2.json"))?;
    done.push("report JSON");

    let cfg = RunConfig { n_o: 100, feature_dim: Some(13), ..RunConfig::default() };
    write_json(&rt.join("c1.json"), &cfg).unwrap();
    let cfg2 = RunConfig::load(&rt.join("c1.json")).map_err(|e| e.to_string())?;
    ensure(cfg2 == cfg, || "config changed".into())?;
    done.push("config JSON");

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let problem = random_problem(&mut rng);
    let sol = solve_exact(&problem).unwrap();
    write_json(&rt.join("s1.json"), &(&problem, &sol)).unwrap();
    let (p2, s2): (SplitProblem, SplitSolution) = read_json(&rt.join("s1.json")).unwrap();
    ensure(p2 == problem && s2 == sol, || "split problem/solution changed".into())?;
    done.push("split JSON");

    let g = TaxonomyGraph::from_tsv(TOY_GRAPH_TSV).unwrap();
    let text = g.to_tsv();
    ensure(TaxonomyGraph::from_tsv(&text).unwrap().to_tsv() == text, || "graph TSV changed".into())?;
    let o = Overrides::from_tsv(TOY_OVERRIDES_TSV).unwrap();
    ensure(Overrides::from_tsv(&o.to_tsv()).unwrap() == o, || "overrides TSV changed".into())?;
    let (tree, _) = build_class_tree(&cluster_classes(&words(&["dog", "banana", "cup"]), &g, &o), &g, &o).unwrap();
    let json = serde_json::to_string(&tree.to_nested()).unwrap();
    let nested: NestedNode = serde_json::from_str(&json).unwrap();
    ensure(ClassTree::from_nested(&nested).to_nested() == tree.to_nested(), || "tree JSON changed".into())?;
    done.extend(["hypernym TSV", "override TSV", "tree JSON"]);
    Ok(done)
}
