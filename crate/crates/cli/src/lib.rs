//! Command implementations behind the `doclayout` binary.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use doclayout_post::eval::{
    assign_doc_categories, doc_categories_from_labels, evaluate, parse_probabilities, DocCategory, EvalConfig,
    MapReport,
};
use doclayout_post::fuse::{fuse_sets, FusionConfig};
use doclayout_post::geom::{CategoryMap, PageId};
use doclayout_post::ingest::{
    parse_cells, parse_ground_truth, parse_predictions_with, parse_scales, rescale_boxes, CellSet, GroundTruthSet,
    PredictionSet,
};
use doclayout_post::refine::{refine_set, RefineConfig, RefineReport, RefinementAction};
use doclayout_post::synthgen::{build_pool, emit_dataset, generate_layouts, parse_patches, SynthConfig};
use doclayout_post::tune::{optimize_resumable, HyperSpace, TpeConfig, TrialPoint, TrialRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum StageOrder {
    #[default]
    RefineThenFuse,
    FuseThenRefine,
}

/// JSON config file; every section is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub refine: RefineConfig,
    /// Missing weights default to 1 per model; missing threshold to 0.55.
    pub fusion: Option<FusionConfig>,
    pub eval: EvalConfig,
    pub tpe: TpeConfig,
    pub synth: SynthConfig,
    pub order: StageOrder,
    /// Pages whose top-1 document probability falls below this count as others.
    pub doc_threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            refine: RefineConfig::default(),
            fusion: None,
            eval: EvalConfig::default(),
            tpe: TpeConfig::default(),
            synth: SynthConfig::default(),
            order: StageOrder::default(),
            doc_threshold: 0.5,
        }
    }
}

const DEFAULT_FUSION_IOU: f64 = 0.55;

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let bytes = read(path)?;
        let cfg: Self = serde_json::from_slice(&bytes).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.refine.validate()?;
        cfg.eval.validate()?;
        Ok(cfg)
    }

    pub fn fusion_for(&self, n_models: usize) -> FusionConfig {
        self.fusion
            .clone()
            .unwrap_or_else(|| FusionConfig::uniform(n_models, DEFAULT_FUSION_IOU))
    }
}

#[derive(Debug, Parser)]
#[command(name = "doclayout", version, about = "Refine, fuse, evaluate and tune document layout detections")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Snap predicted boxes onto text cells.
    Refine(RefineArgs),
    /// Fuse several models' predictions with weighted boxes fusion.
    Fuse(FuseArgs),
    /// Compute COCO-style mAP, per class and per document category.
    Evaluate(EvaluateArgs),
    /// Search model weights and the fusion IoU threshold.
    Tune(TuneArgs),
    /// Generate synthetic layout annotations from a patch catalogue.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// COCO ground truth; supplies page sizes and the category id table.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// COCO results file, one per model.
    #[arg(long = "preds")]
    pub preds: Vec<PathBuf>,
    /// Text cells per page.
    #[arg(long)]
    pub cells: Option<PathBuf>,
    /// Original page sizes of the cell coordinates; cells are mapped into the ground-truth page frame.
    #[arg(long)]
    pub scales: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub order: Option<StageOrder>,
}

#[derive(Debug, Clone, Args)]
pub struct RefineArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Audit log; defaults to `<out>.audit.json`.
    #[arg(long)]
    pub audit: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct FuseArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub input: InputArgs,
    /// Document-category probabilities per page (reports, manuals, patents, others).
    #[arg(long)]
    pub probs: Option<PathBuf>,
    /// Report JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub probs: Option<PathBuf>,
    /// Best fusion settings, written as a config file fragment.
    #[arg(long)]
    pub out: PathBuf,
    /// Trial log in JSON lines; an existing file is resumed. Defaults to `<out>.history.jsonl`.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// JSON array of patch records.
    #[arg(long)]
    pub patches: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// COCO ground truth output.
    #[arg(long)]
    pub out: PathBuf,
    /// Placement manifest; defaults to `<out>.manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Refine(a) => cmd_refine(&a).map(drop),
        Command::Fuse(a) => cmd_fuse(&a).map(drop),
        Command::Evaluate(a) => cmd_evaluate(&a).map(drop),
        Command::Tune(a) => cmd_tune(&a).map(drop),
        Command::Synth(a) => cmd_synth(&a).map(drop),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

/// Writes via a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating a file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn pool(jobs: Option<usize>) -> Result<ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        ensure!(j > 0, "--jobs must be positive");
        b = b.num_threads(j);
    }
    Ok(b.build()?)
}

/// Everything the pipeline stages read from disk.
pub struct Inputs {
    pub gt: Option<GroundTruthSet>,
    pub preds: Vec<PredictionSet>,
    pub cells: Option<CellSet>,
}

impl Inputs {
    pub fn load(a: &InputArgs) -> Result<Self> {
        let gt = match &a.gt {
            Some(p) => Some(parse_ground_truth(&read(p)?).with_context(|| format!("parsing {}", p.display()))?),
            None => None,
        };
        let categories = gt.as_ref().map(|g| g.categories.clone()).unwrap_or_default();
        let preds = a
            .preds
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let id = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| format!("model{i}"));
                parse_predictions_with(&read(p)?, &id, &categories).with_context(|| format!("parsing {}", p.display()))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(g) = &gt {
            for set in &preds {
                if let Some(page) = set.detections.keys().find(|p| !g.pages.contains_key(*p)) {
                    bail!("predictions of {} reference page {} absent from the ground truth", set.model_id, page.0);
                }
            }
        }
        let mut cells = match &a.cells {
            Some(p) => Some(parse_cells(&read(p)?).with_context(|| format!("parsing {}", p.display()))?),
            None => None,
        };
        if let Some(sp) = &a.scales {
            let scales = parse_scales(&read(sp)?).with_context(|| format!("parsing {}", sp.display()))?;
            let g = gt.as_ref().context("--scales needs --gt for the target page sizes")?;
            if let Some(c) = cells.as_mut() {
                align_cells(c, &scales.0, g)?;
            }
        }
        Ok(Inputs { gt, preds, cells })
    }

    pub fn categories(&self) -> CategoryMap {
        self.gt.as_ref().map(|g| g.categories.clone()).unwrap_or_default()
    }
}

/// Maps cells from their original page size into the ground-truth page frame.
pub fn align_cells(cells: &mut CellSet, scales: &BTreeMap<PageId, (f64, f64)>, gt: &GroundTruthSet) -> Result<()> {
    for (page, list) in cells.cells.iter_mut() {
        let (Some(from), Some(p)) = (scales.get(page), gt.pages.get(page)) else {
            continue;
        };
        let boxes: Vec<_> = list.iter().map(|c| c.bbox).collect();
        let mapped = rescale_boxes(&boxes, *from, (p.width, p.height))?;
        for (c, b) in list.iter_mut().zip(mapped) {
            c.bbox = b;
        }
    }
    Ok(())
}

/// Runs refinement and fusion in the requested order. Without cells the
/// refinement stage is skipped.
pub fn run_stages(
    preds: &[PredictionSet],
    cells: Option<&CellSet>,
    refine: &RefineConfig,
    fusion: &FusionConfig,
    order: StageOrder,
) -> Result<(PredictionSet, RefineReport)> {
    let mut report = RefineReport::default();
    let mut refine_one = |set: &PredictionSet| -> Result<PredictionSet> {
        match cells {
            Some(c) => {
                let (out, r) = refine_set(set, c, refine)?;
                report.audit.extend(r.audit);
                Ok(out)
            }
            None => Ok(set.clone()),
        }
    };
    let fused = match order {
        StageOrder::RefineThenFuse => {
            let refined = preds.iter().map(&mut refine_one).collect::<Result<Vec<_>>>()?;
            fuse_sets(&refined, fusion)?
        }
        StageOrder::FuseThenRefine => refine_one(&fuse_sets(preds, fusion)?)?,
    };
    Ok((fused, report))
}

fn print_counts(report: &RefineReport) {
    let counts = report.counts();
    for action in [
        RefinementAction::Unchanged,
        RefinementAction::ReplacedByCell,
        RefinementAction::ReplacedByEnvelope,
        RefinementAction::SnappedToCandidates,
    ] {
        println!("{:?}: {}", action, counts.get(&action).copied().unwrap_or(0));
    }
}

pub fn cmd_refine(a: &RefineArgs) -> Result<RefineReport> {
    let cfg = PipelineConfig::load(a.common.config.as_deref())?;
    let inputs = Inputs::load(&a.input)?;
    ensure!(inputs.preds.len() == 1, "refine takes exactly one --preds file");
    let cells = inputs.cells.as_ref().context("refine needs --cells")?;
    let (refined, report) = pool(a.common.jobs)?.install(|| refine_set(&inputs.preds[0], cells, &cfg.refine))?;
    write_atomic(&a.out, &refined.to_coco_results(&inputs.categories())?)?;
    let audit = a.audit.clone().unwrap_or_else(|| sibling(&a.out, ".audit.json"));
    write_atomic(&audit, &serde_json::to_vec_pretty(&report)?)?;
    print_counts(&report);
    Ok(report)
}

pub fn cmd_fuse(a: &FuseArgs) -> Result<PredictionSet> {
    let cfg = PipelineConfig::load(a.common.config.as_deref())?;
    let inputs = Inputs::load(&a.input)?;
    ensure!(!inputs.preds.is_empty(), "fuse needs at least one --preds file");
    let fusion = cfg.fusion_for(inputs.preds.len());
    let order = a.input.order.unwrap_or(cfg.order);
    let (fused, report) = pool(a.common.jobs)?
        .install(|| run_stages(&inputs.preds, inputs.cells.as_ref(), &cfg.refine, &fusion, order))?;
    write_atomic(&a.out, &fused.to_coco_results(&inputs.categories())?)?;
    if inputs.cells.is_some() {
        print_counts(&report);
    }
    println!("fused {} detections from {} models", fused.len(), inputs.preds.len());
    Ok(fused)
}

fn doc_categories(probs: Option<&Path>, gt: &GroundTruthSet, threshold: f64) -> Result<BTreeMap<PageId, DocCategory>> {
    match probs {
        Some(p) => {
            let probs = parse_probabilities(&read(p)?).with_context(|| format!("parsing {}", p.display()))?;
            Ok(assign_doc_categories(&probs, threshold)?)
        }
        None => Ok(doc_categories_from_labels(gt)),
    }
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<MapReport> {
    let cfg = PipelineConfig::load(a.common.config.as_deref())?;
    let inputs = Inputs::load(&a.input)?;
    let gt = inputs.gt.as_ref().context("evaluate needs --gt")?;
    ensure!(!inputs.preds.is_empty(), "evaluate needs at least one --preds file");
    let docs = doc_categories(a.probs.as_deref(), gt, cfg.doc_threshold)?;
    let order = a.input.order.unwrap_or(cfg.order);
    let report = pool(a.common.jobs)?.install(|| -> Result<MapReport> {
        let preds = if inputs.preds.len() == 1 && inputs.cells.is_none() {
            inputs.preds[0].clone()
        } else {
            let fusion = cfg.fusion_for(inputs.preds.len());
            run_stages(&inputs.preds, inputs.cells.as_ref(), &cfg.refine, &fusion, order)?.0
        };
        Ok(evaluate(&preds, gt, &docs, &cfg.eval)?)
    })?;
    if let Some(out) = &a.out {
        write_atomic(out, &serde_json::to_vec_pretty(&report)?)?;
    }
    print!("{}", report.table());
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub fusion: FusionConfig,
    pub objective: f64,
    pub trial_id: u64,
    pub trials: usize,
}

pub fn cmd_tune(a: &TuneArgs) -> Result<TuneOutcome> {
    let cfg = PipelineConfig::load(a.common.config.as_deref())?;
    let inputs = Inputs::load(&a.input)?;
    let gt = inputs.gt.as_ref().context("tune needs --gt")?;
    ensure!(!inputs.preds.is_empty(), "tune needs at least one --preds file");
    let docs = doc_categories(a.probs.as_deref(), gt, cfg.doc_threshold)?;
    let order = a.input.order.unwrap_or(cfg.order);
    let space = HyperSpace::new(inputs.preds.len())?;
    let mut tpe = cfg.tpe.clone();
    if let Some(b) = a.budget {
        tpe.budget = b;
    }
    if let Some(s) = a.seed {
        tpe.seed = s;
    }
    if let Some(j) = a.common.jobs {
        tpe.parallelism = j;
    }
    let template = cfg.fusion_for(inputs.preds.len());
    let workers = pool(a.common.jobs)?;

    // Refinement does not depend on the trial when it runs first.
    let (sets, cells) = match (order, inputs.cells.as_ref()) {
        (StageOrder::RefineThenFuse, Some(c)) => {
            let refined = workers.install(|| {
                inputs
                    .preds
                    .iter()
                    .map(|s| Ok(refine_set(s, c, &cfg.refine)?.0))
                    .collect::<Result<Vec<_>>>()
            })?;
            (refined, None)
        }
        (_, c) => (inputs.preds.clone(), c),
    };
    let objective = |p: &TrialPoint| -> Result<f64> {
        let fusion = FusionConfig {
            weights: p.fusion_config().weights,
            iou_threshold: p.iou_threshold,
            ..template.clone()
        };
        workers.install(|| {
            let (fused, _) = run_stages(&sets, cells, &cfg.refine, &fusion, order)?;
            Ok(evaluate(&fused, gt, &docs, &cfg.eval)?.score())
        })
    };
    let history = a.history.clone().unwrap_or_else(|| sibling(&a.out, ".history.jsonl"));
    let result = optimize_resumable(objective, &space, &tpe, Some(&history))?;
    let best: &TrialRecord = &result.best;
    let outcome = TuneOutcome {
        fusion: FusionConfig {
            weights: best.point.fusion_config().weights,
            iou_threshold: best.point.iou_threshold,
            ..template
        },
        objective: best.objective,
        trial_id: best.trial_id,
        trials: result.history.len(),
    };
    // A config fragment that `--config` accepts.
    let fragment = serde_json::json!({ "fusion": &outcome.fusion });
    write_atomic(&a.out, &serde_json::to_vec_pretty(&fragment)?)?;
    println!(
        "best of {} trials: trial {} objective {:.1} weights {:?} iou {:.2}",
        outcome.trials,
        outcome.trial_id,
        outcome.objective * 100.0,
        best.point.weights,
        best.point.iou_threshold
    );
    Ok(outcome)
}

pub fn cmd_synth(a: &SynthArgs) -> Result<usize> {
    let cfg = PipelineConfig::load(a.common.config.as_deref())?;
    let mut synth = cfg.synth.clone();
    if let Some(s) = a.seed {
        synth.seed = s;
    }
    let patches = parse_patches(&read(&a.patches)?).with_context(|| format!("parsing {}", a.patches.display()))?;
    let pool_ = build_pool(patches);
    let layouts = pool(a.common.jobs)?.install(|| generate_layouts(&pool_, &synth, a.count))?;
    let (coco, manifest) = emit_dataset(&layouts);
    write_atomic(&a.out, &coco)?;
    let manifest_path = a.manifest.clone().unwrap_or_else(|| sibling(&a.out, ".manifest.json"));
    write_atomic(&manifest_path, &manifest)?;
    let placements: usize = layouts.iter().map(|l| l.placements.len()).sum();
    println!("{} layouts, {} placements", layouts.len(), placements);
    Ok(placements)
}
