use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;

use gio_core::geometry::Mask;
use gio_core::grounding::{grid_search, match_gt_masks, weighted_bce, FusionGrid};
use gio_core::io::{
    self, generate_fixture, load_dataset, read_json, read_jsonl_numbered, read_predictions, read_tensor, run_pipeline,
    save_dataset, tensor_to_points, write_json, write_predictions, write_tensor, BpsVariant, CandidateFile,
    CloudSidecar, FixtureSpec, RunConfig, Tensor,
};
use gio_core::layout4d::{
    align_scene_to_human, apply_alignment, body_height, bps_encode_with, generate_base_points, CloudRole,
    NearestSearch, PointCloud,
};
use gio_core::metrics::{evaluate, GroundingInstance};
use gio_core::splitter::{solve_exact, solve_heuristic, SplitProblem, EXACT_LIMIT};
use gio_core::taxonomy::{
    build_class_tree, cluster_classes, Overrides, TaxonomyGraph, TOY_GRAPH_TSV, TOY_OVERRIDES_TSV,
};

#[derive(Parser)]
#[command(name = "gio", version, about = "Interacted-object grounding and evaluation tools")]
struct Cli {
    /// JSON run configuration; defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for fixtures, base points and the split heuristic.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score predictions against annotations.
    Evaluate {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Directory for report.json and report.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Ground every annotated instance of a dataset and evaluate.
    Ground {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label candidate masks against an accurate mask.
    MatchGt {
        /// Candidate file of one keyframe.
        #[arg(long)]
        candidates: PathBuf,
        /// Accurate mask as a JSON mask record.
        #[arg(long)]
        accurate: PathBuf,
        /// Optional JSON array of predicted probabilities, one per candidate.
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recover the scale and shift aligning scene points to the human.
    Align {
        #[arg(long)]
        human_front: PathBuf,
        #[arg(long)]
        scene_corresp: PathBuf,
        /// Scene cloud to transform with the recovered alignment.
        #[arg(long, requires = "aligned")]
        scene: Option<PathBuf>,
        #[arg(long)]
        aligned: Option<PathBuf>,
        /// Transform JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode one (keyframe, human) cloud record with basis points.
    Bps {
        /// Cloud sidecar; role tensors are read next to it.
        #[arg(long)]
        sidecar: PathBuf,
        #[arg(long, value_enum, default_value_t = Search::Auto)]
        search: Search,
        #[arg(long)]
        out: PathBuf,
    },
    /// Choose a balanced test split.
    Split {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long, value_enum, default_value_t = Solver::Auto)]
        solver: Solver,
        #[arg(long, default_value_t = 5000)]
        iterations: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster class names and build the class tree.
    Taxonomy {
        /// Hypernym edges as `child<TAB>parent`; the bundled toy graph otherwise.
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Word-to-node corrections as `word<TAB>node`.
        #[arg(long)]
        overrides: Option<PathBuf>,
        /// One class name per line.
        #[arg(long)]
        classes: PathBuf,
        /// Directory for clusters.json, tree.json, tree.txt and merges.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid-search the fusion parameters on a dataset.
    Tune {
        #[arg(long)]
        data: PathBuf,
        /// FusionGrid JSON; the default grid otherwise.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Objective::Map50)]
        objective: Objective,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset with oracle features.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        videos: usize,
        /// Humans per video.
        #[arg(long, default_value_t = 3)]
        instances: usize,
        /// Point every query at a distractor instead of the object.
        #[arg(long)]
        adversarial: bool,
        #[arg(long)]
        no_clouds: bool,
        #[arg(long, default_value_t = 24)]
        queries: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Search {
    Auto,
    Exhaustive,
    Grid,
}

#[derive(Clone, Copy, ValueEnum)]
enum Solver {
    Auto,
    Exact,
    Heuristic,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Objective {
    Map50,
    MeanMap,
    MiouW,
}

enum Outcome {
    Done,
    Partial(usize),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Partial(n)) => {
            eprintln!("{n} instance(s) failed; see the report");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            let io_failure = matches!(e.downcast_ref::<gio_core::Error>(), Some(gio_core::Error::Io { .. }));
            ExitCode::from(if io_failure { 1 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the worker pool")?;
    }
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.bps.seed = seed;
    }
    config.validate()?;
    let seed = cli.seed.unwrap_or(0);

    match cli.command {
        Command::Evaluate { gt, pred, out } => {
            let instances = read_annotations(&gt)?;
            let preds = read_predictions(&pred)?;
            let report = evaluate(&instances, &preds, &config.thresholds, &config.eval)?;
            write_json(&out.join("report.json"), &report)?;
            write_text(&out.join("report.csv"), &report.to_csv())?;
        }
        Command::Ground { data, out } => {
            let ds = load_dataset(&data)?;
            let result = run_pipeline(&ds, &config)?;
            write_predictions(&out.join("predictions.jsonl"), &result.predictions)?;
            write_json(&out.join("report.json"), &result.report)?;
            write_text(&out.join("report.csv"), &result.report.eval.to_csv())?;
            info!("{} predictions written to {}", result.predictions.len(), out.display());
            if result.report.failed > 0 {
                return Ok(Outcome::Partial(result.report.failed));
            }
        }
        Command::MatchGt { candidates, accurate, scores, out } => {
            let cands: CandidateFile = read_json(&candidates)?;
            let gt: Mask = read_json(&accurate)?;
            let matched = match_gt_masks(&cands.masks, &gt)?;
            let labels: Vec<bool> = (0..cands.masks.len()).map(|i| matched.contains(&i)).collect();
            let loss = match scores {
                Some(p) => {
                    let s: Vec<f64> = read_json(&p)?;
                    Some(weighted_bce(&s, &labels, config.pos_weight)?)
                }
                None => None,
            };
            write_json(&out, &MatchOutput { matched, labels, weighted_bce: loss })?;
        }
        Command::Align { human_front, scene_corresp, scene, aligned, out } => {
            let front = read_cloud(&human_front, CloudRole::HumanFrontSurface)?;
            let corresp = read_cloud(&scene_corresp, CloudRole::SceneCorrespondence)?;
            let t = align_scene_to_human(&front, &corresp)?;
            if let (Some(s), Some(dst)) = (scene, aligned) {
                let cloud = apply_alignment(&read_cloud(&s, CloudRole::Scene)?, &t);
                write_tensor(&dst, &io::points_to_tensor(&cloud.points, CloudRole::Scene))?;
            }
            write_json(&out, &t)?;
        }
        Command::Bps { sidecar, search, out } => {
            let meta: CloudSidecar = read_json(&sidecar)?;
            let stem = sidecar
                .to_str()
                .and_then(|s| s.strip_suffix(".json"))
                .ok_or_else(|| anyhow!("sidecar path must end in .json"))?;
            let role_path = |r: CloudRole| PathBuf::from(format!("{stem}.{}.stgt", r.as_str()));
            let front = read_cloud(&role_path(CloudRole::HumanFrontSurface), CloudRole::HumanFrontSurface)?;
            let corresp = read_cloud(&role_path(CloudRole::SceneCorrespondence), CloudRole::SceneCorrespondence)?;
            let mesh = read_cloud(&role_path(CloudRole::HumanMesh), CloudRole::HumanMesh)?;
            let scene = read_cloud(&role_path(CloudRole::Scene), CloudRole::Scene)?;
            let t = align_scene_to_human(&front, &corresp)?;
            let base = generate_base_points(&config.bps, meta.pelvis, body_height(&mesh)?)?;
            let search = match search {
                Search::Auto => NearestSearch::Auto,
                Search::Exhaustive => NearestSearch::Exhaustive,
                Search::Grid => NearestSearch::Grid,
            };
            let feature = bps_encode_with(&base, &mesh, &apply_alignment(&scene, &t), search)?;
            let tensor = Tensor::from_f64(vec![feature.values.len()], "bps", &feature.values)?
                .with_bps_variant(BpsVariant::Distance);
            write_tensor(&out, &tensor)?;
        }
        Command::Split { problem, solver, iterations, out } => {
            let p: SplitProblem = read_json(&problem)?;
            p.validate()?;
            let exact = match solver {
                Solver::Auto => p.videos.len() <= EXACT_LIMIT,
                Solver::Exact => true,
                Solver::Heuristic => false,
            };
            let sol = if exact { solve_exact(&p)? } else { solve_heuristic(&p, seed, iterations)? };
            if !sol.feasibility.is_feasible() {
                warn!("no split satisfies every constraint; reporting the least-violating one");
            }
            write_json(&out, &SplitOutput { video_ids: sol.selected_ids(&p), solution: &sol })?;
        }
        Command::Taxonomy { graph, overrides, classes, out } => {
            let (graph_text, default_overrides) = match &graph {
                Some(p) => (read_text(p)?, String::new()),
                None => (TOY_GRAPH_TSV.to_string(), TOY_OVERRIDES_TSV.to_string()),
            };
            let g = TaxonomyGraph::from_tsv(&graph_text)?;
            let o = Overrides::from_tsv(&match &overrides {
                Some(p) => read_text(p)?,
                None => default_overrides,
            })?;
            let words: Vec<String> = read_text(&classes)?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from)
                .collect();
            let clusters = cluster_classes(&words, &g, &o);
            write_json(&out.join("clusters.json"), &clusters)?;
            let (tree, merges) = build_class_tree(&clusters, &g, &o)?;
            write_json(&out.join("tree.json"), &tree.to_nested())?;
            write_text(&out.join("tree.txt"), &tree.to_outline())?;
            write_json(&out.join("merges.json"), &merges)?;
        }
        Command::Tune { data, grid, objective, out } => {
            let ds = load_dataset(&data)?;
            let grid: FusionGrid = match grid {
                Some(p) => read_json(&p)?,
                None => FusionGrid::default(),
            };
            let (best, metric) = grid_search(&grid, |fusion| {
                let cfg = RunConfig { fusion: *fusion, ..config.clone() };
                match run_pipeline(&ds, &cfg) {
                    Ok(r) => match objective {
                        Objective::Map50 => r.report.eval.overall.map[0],
                        Objective::MeanMap => {
                            let m = &r.report.eval.overall.map;
                            m.iter().sum::<f64>() / m.len() as f64
                        }
                        Objective::MiouW => r.report.eval.overall.miou_w,
                    },
                    Err(_) => f64::NAN,
                }
            })?;
            write_json(&out, &TuneOutput { objective, metric, fusion: best })?;
        }
        Command::Fixture { out, videos, instances, adversarial, no_clouds, queries } => {
            let spec = FixtureSpec {
                seed,
                n_videos: videos,
                n_instances: instances,
                adversarial,
                with_clouds: !no_clouds,
                n_queries: queries,
            };
            save_dataset(&generate_fixture(&spec)?, &out)?;
        }
    }
    Ok(Outcome::Done)
}

#[derive(Serialize)]
struct MatchOutput {
    matched: Vec<usize>,
    labels: Vec<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weighted_bce: Option<f64>,
}

#[derive(Serialize)]
struct SplitOutput<'a> {
    video_ids: Vec<&'a str>,
    solution: &'a gio_core::splitter::SplitSolution,
}

#[derive(Serialize)]
struct TuneOutput {
    objective: Objective,
    metric: f64,
    fusion: gio_core::grounding::FusionConfig,
}

fn read_annotations(path: &Path) -> anyhow::Result<Vec<GroundingInstance>> {
    let numbered: Vec<(usize, GroundingInstance)> = read_jsonl_numbered(path)?;
    numbered
        .into_iter()
        .map(|(line, inst)| {
            inst.validate().map_err(|e| gio_core::Error::Schema {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            })?;
            Ok(inst)
        })
        .collect()
}

fn read_cloud(path: &Path, role: CloudRole) -> anyhow::Result<PointCloud> {
    Ok(PointCloud::new(role, tensor_to_points(&read_tensor(path)?)?)?)
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).map_err(|e| gio_core::Error::Io { path: path.to_path_buf(), source: e }.into())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| gio_core::Error::Io { path: dir.to_path_buf(), source: e })?;
    }
    fs::write(path, text).map_err(|e| gio_core::Error::Io { path: path.to_path_buf(), source: e })?;
    Ok(())
}
