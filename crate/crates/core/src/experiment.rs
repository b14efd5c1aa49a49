//! End-to-end experiment plumbing shared by the CLI and the acceptance run:
//! benchmark preparation, evaluation, the source -> classifier -> adapt
//! pipeline, the ablation grid and the region-similarity analysis.

use std::path::Path;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{generate_benchmark_relaxed, load_tile_directory, RegionSpec, Tile, TileSet};
use crate::error::{GramError, Result};
use crate::metrics::{compute_metrics, group_similarity, tile_features, ConfusionMatrix, MetricsReport};
use crate::model::{RegionClassifier, RoutingPlan, SegModel};
use crate::train::{classifier_accuracy, train_region_classifier, train_source, SourceRun};
use crate::tta::{adapt, routing_regions, AdaptRun, FilterKind, FilterPolicy, RegionMode};

pub struct Benchmark {
    pub train: TileSet,
    pub val: TileSet,
    /// Unlabeled for adaptation; masks, when present, are used for evaluation only.
    pub target: TileSet,
}

/// Synthesize the benchmark from `cfg.seed`, or load it from the configured directories.
pub fn prepare_benchmark(cfg: &ExperimentConfig) -> Result<Benchmark> {
    let d = &cfg.data;
    let (source, target) = match (&d.source_dir, &d.target_dir) {
        (Some(s), Some(t)) => (load_tile_directory(s)?, load_tile_directory(t)?),
        (None, None) => {
            if d.num_regions < 3 {
                log::warn!("{} source region(s): routing MI is degenerate below 3 regions", d.num_regions);
            }
            generate_benchmark_relaxed(cfg.seed, d.num_regions, d.tiles_per_region, d.tile_size)?
        }
        _ => {
            return Err(GramError::config(
                "data.source_dir, data.target_dir",
                "must be set together",
            ))
        }
    };
    if target.is_empty() {
        return Err(GramError::Usage("target set is empty".into()));
    }
    let (train, val) = source.split_holdout(d.val_tiles_per_region)?;
    Ok(Benchmark { train, val, target })
}

/// Predicted masks for `set` with one routing region per tile.
pub fn predict_masks(model: &SegModel, set: &TileSet, regions: &[usize]) -> Result<Vec<Vec<u8>>> {
    if regions.len() != set.len() {
        return Err(GramError::Shape(format!("{} routing regions for {} tiles", regions.len(), set.len())));
    }
    set.tiles
        .par_iter()
        .zip(regions)
        .map(|(t, &d)| Ok(model.forward(&t.image_f64(), d, RoutingPlan::Inference)?.mask()))
        .collect()
}

/// Dataset-aggregated metrics of `model` on a labeled set.
pub fn evaluate(model: &SegModel, set: &TileSet, regions: &[usize]) -> Result<MetricsReport> {
    let preds = predict_masks(model, set, regions)?;
    let mut cm = ConfusionMatrix::default();
    for (t, p) in set.tiles.iter().zip(&preds) {
        let truth = t
            .mask
            .as_ref()
            .ok_or_else(|| GramError::Label(format!("tile {} has no reference mask to evaluate against", t.tile_id)))?;
        cm.add_pair(p, truth)?;
    }
    compute_metrics(&cm)
}

fn own_regions(set: &TileSet) -> Vec<usize> {
    set.tiles.iter().map(|t| t.region_id).collect()
}

pub fn new_seg_model(cfg: &ExperimentConfig) -> Result<SegModel> {
    SegModel::new(cfg.seg_model_config(), cfg.seed)
}

pub fn train_source_model(cfg: &ExperimentConfig, bench: &Benchmark) -> Result<SourceRun> {
    train_source(new_seg_model(cfg)?, &bench.train, &cfg.source)
}

/// The no-MoE baseline, trained on `L_seg` alone.
pub fn vanilla_config(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.model.use_moe = false;
    c.source.weights.lambda_mi = 0.0;
    c.source.weights.lambda_dom = 0.0;
    c
}

pub fn train_classifier(cfg: &ExperimentConfig, bench: &Benchmark) -> Result<RegionClassifier> {
    let clf = RegionClassifier::new(cfg.classifier_config(), cfg.seed)?;
    train_region_classifier(clf, &bench.train, &cfg.source)
}

/// The latest `n` epoch snapshots, final model included.
pub fn temporal_window(run: &SourceRun, n: usize) -> &[SegModel] {
    &run.checkpoints[run.checkpoints.len().saturating_sub(n)..]
}

pub fn adapt_with(
    cfg: &ExperimentConfig,
    model: &SegModel,
    target: &TileSet,
    clf: &RegionClassifier,
    checkpoints: &[SegModel],
    policy: FilterPolicy,
) -> Result<AdaptRun> {
    let mut ac = cfg.adapt_config();
    ac.policy = policy;
    adapt(model.clone(), target, clf, &ac, checkpoints)
}

/// Metrics of an adapted model, routed with the regions used during adaptation.
pub fn evaluate_adapted(run: &AdaptRun, target: &TileSet) -> Result<MetricsReport> {
    let regions: Vec<usize> = run.samples.iter().map(|s| s.inferred_region).collect();
    evaluate(&run.model, target, &regions)
}

/// Mean per-layer `I(d; e)` over the last epoch's batches.
pub fn final_mean_mi(run: &SourceRun) -> f64 {
    let Some(last) = run.log.last().map(|l| l.epoch) else {
        return 0.0;
    };
    let v: Vec<f64> = run.log.iter().filter(|l| l.epoch == last).map(|l| l.mean_mutual_info()).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub source_val: MetricsReport,
    pub classifier_val_accuracy: f64,
    pub final_mean_mi: f64,
    /// Target tiles per inferred source region.
    pub routing_histogram: Vec<usize>,
    pub vanilla_source: MetricsReport,
    pub moe_source: MetricsReport,
    pub adapted: MetricsReport,
    pub selected_tiles: usize,
}

pub struct PipelineRun {
    pub vanilla: SourceRun,
    pub source: SourceRun,
    pub classifier: RegionClassifier,
    pub adapted: AdaptRun,
    pub report: PipelineReport,
}

/// Source training, `h_psi`, adaptation with the configured filter, and
/// target evaluation against the vanilla and unadapted baselines.
pub fn run_pipeline(cfg: &ExperimentConfig, bench: &Benchmark) -> Result<PipelineRun> {
    cfg.validate()?;
    let source = train_source_model(cfg, bench)?;
    let vanilla = train_source_model(&vanilla_config(cfg), bench)?;
    let classifier = train_classifier(cfg, bench)?;
    let d = cfg.data.num_regions;
    let regions = routing_regions(&bench.target, &classifier, cfg.adapt.region_mode, d)?;
    let mut routing_histogram = vec![0; d];
    for &r in &regions {
        routing_histogram[r] += 1;
    }
    let adapted = adapt_with(
        cfg,
        &source.model,
        &bench.target,
        &classifier,
        temporal_window(&source, cfg.adapt.temporal_checkpoints),
        cfg.filter,
    )?;
    let report = PipelineReport {
        seed: cfg.seed,
        source_val: evaluate(&source.model, &bench.val, &own_regions(&bench.val))?,
        classifier_val_accuracy: classifier_accuracy(&classifier, &bench.val)?,
        final_mean_mi: final_mean_mi(&source),
        routing_histogram,
        vanilla_source: evaluate(&vanilla.model, &bench.target, &regions)?,
        moe_source: evaluate(&source.model, &bench.target, &regions)?,
        adapted: evaluate_adapted(&adapted, &bench.target)?,
        selected_tiles: adapted.selected.len(),
    };
    Ok(PipelineRun {
        vanilla,
        source,
        classifier,
        adapted,
        report,
    })
}

pub const ABLATION_ROWS: [&str; 6] = [
    "Full Component",
    "w/o L_dom",
    "w/o L_MI",
    "No Filtering",
    "Confidence Filtering",
    "Temporal Consistency",
];

pub const RHO_SWEEP: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub rho_s: f64,
    /// Target mIoU per seed, in seed order.
    pub per_seed_miou: Vec<f64>,
    pub miou: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub slum_iou: f64,
}

impl AblationRow {
    fn from_reports(name: &str, rho_s: f64, reports: &[MetricsReport]) -> Self {
        let mean = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / reports.len() as f64;
        Self {
            name: name.to_string(),
            rho_s,
            per_seed_miou: reports.iter().map(MetricsReport::miou).collect(),
            miou: mean(&|r| r.miou()),
            f1: mean(&|r| r.mean.f1),
            precision: mean(&|r| r.mean.precision),
            recall: mean(&|r| r.mean.recall),
            slum_iou: mean(&|r| r.slum.iou),
        }
    }
}

/// Per-seed reference numbers gathered alongside the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub vanilla_source_miou: f64,
    pub moe_source_miou: f64,
    pub final_mean_mi: f64,
    pub final_mean_mi_without_l_mi: f64,
    /// Unadapted MoE model routed per image through `h_psi`.
    pub inferred_routing_miou: f64,
    /// The source region with the lowest mean `h_psi` probability on the target.
    pub least_similar_region: usize,
    pub least_similar_routing_miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub per_seed: Vec<SeedSummary>,
}

impl AblationResult {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("configuration,rho_s,miou,f1,precision,recall,slum_iou");
        for s in &self.seeds {
            out.push_str(&format!(",miou_seed{s}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.name, r.rho_s, r.miou, r.f1, r.precision, r.recall, r.slum_iou
            ));
            for v in &r.per_seed_miou {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<24} {:>6} {:>8} {:>8} {:>10} {:>8}\n",
            "Configuration", "rho_s", "mIoU", "F1", "Precision", "Recall"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<24} {:>6.2} {:>8.4} {:>8.4} {:>10.4} {:>8.4}\n",
                r.name, r.rho_s, r.miou, r.f1, r.precision, r.recall
            ));
        }
        out
    }
}

/// Mean `h_psi` probability of each source region over the target tiles.
pub fn mean_region_probabilities(clf: &RegionClassifier, target: &TileSet) -> Result<Vec<f64>> {
    let probs: Vec<Vec<f64>> = target
        .tiles
        .par_iter()
        .map(|t| clf.classify_region_external(&t.image_f64(), t.size))
        .collect::<Result<_>>()?;
    let d = clf.config.num_regions;
    Ok((0..d)
        .map(|r| probs.iter().map(|p| p[r]).sum::<f64>() / probs.len() as f64)
        .collect())
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// Everything one seed contributes to the ablation grid.
struct SeedOutcome {
    rows: Vec<MetricsReport>,
    summary: SeedSummary,
}

fn ablation_seed(cfg: &ExperimentConfig) -> Result<SeedOutcome> {
    let bench = prepare_benchmark(cfg)?;
    let target = &bench.target;
    let window = cfg.adapt.temporal_checkpoints;
    log::info!("seed {}: source training", cfg.seed);
    let full = train_source_model(cfg, &bench)?;
    let mut no_dom_cfg = cfg.clone();
    no_dom_cfg.source.weights.lambda_dom = 0.0;
    let no_dom = train_source_model(&no_dom_cfg, &bench)?;
    let mut no_mi_cfg = cfg.clone();
    no_mi_cfg.source.weights.lambda_mi = 0.0;
    let no_mi = train_source_model(&no_mi_cfg, &bench)?;
    let vanilla = train_source_model(&vanilla_config(cfg), &bench)?;
    let clf = train_classifier(cfg, &bench)?;

    let d = cfg.data.num_regions;
    let regions = routing_regions(target, &clf, RegionMode::PerImage, d)?;
    let least = argmin(&mean_region_probabilities(&clf, target)?);
    let summary = SeedSummary {
        seed: cfg.seed,
        vanilla_source_miou: evaluate(&vanilla.model, target, &regions)?.miou(),
        moe_source_miou: evaluate(&full.model, target, &regions)?.miou(),
        final_mean_mi: final_mean_mi(&full),
        final_mean_mi_without_l_mi: final_mean_mi(&no_mi),
        inferred_routing_miou: evaluate(&full.model, target, &regions)?.miou(),
        least_similar_region: least,
        least_similar_routing_miou: evaluate(&full.model, target, &vec![least; target.len()])?.miou(),
    };

    log::info!("seed {}: adaptation grid", cfg.seed);
    let rho = cfg.filter.rho_s;
    let run = |source: &SourceRun, kind: FilterKind, rho_s: f64| -> Result<MetricsReport> {
        let policy = FilterPolicy { kind, rho_s };
        let a = adapt_with(cfg, &source.model, target, &clf, temporal_window(source, window), policy)?;
        evaluate_adapted(&a, target)
    };
    let full_row = run(&full, FilterKind::Stability, rho)?;
    let mut rows = vec![
        full_row.clone(),
        run(&no_dom, FilterKind::Stability, rho)?,
        run(&no_mi, FilterKind::Stability, rho)?,
        run(&full, FilterKind::None, rho)?,
        run(&full, FilterKind::Confidence, rho)?,
        run(&full, FilterKind::Temporal, rho)?,
    ];
    for r in RHO_SWEEP {
        rows.push(if r == rho {
            full_row.clone()
        } else {
            run(&full, FilterKind::Stability, r)?
        });
    }
    Ok(SeedOutcome { rows, summary })
}

/// The six named configurations plus the `rho_s` sweep, each averaged over
/// `seeds`. Every seed regenerates the benchmark and retrains from scratch.
pub fn run_ablation(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<AblationResult> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(GramError::config("analysis.seeds", "must not be empty"));
    }
    if cfg.source.epochs < 2 {
        return Err(GramError::config("source.epochs", "the temporal-consistency row needs at least 2 source epochs"));
    }
    let outcomes: Vec<SeedOutcome> = seeds
        .iter()
        .map(|&s| ablation_seed(&cfg.with_seed(s)))
        .collect::<Result<_>>()?;
    let names = ABLATION_ROWS
        .iter()
        .map(|n| (n.to_string(), cfg.filter.rho_s))
        .chain(RHO_SWEEP.iter().map(|&r| (format!("rho_s={r}"), r)));
    let rows = names
        .enumerate()
        .map(|(i, (name, rho))| {
            let reports: Vec<MetricsReport> = outcomes.iter().map(|o| o.rows[i].clone()).collect();
            AblationRow::from_reports(&name, rho, &reports)
        })
        .collect();
    Ok(AblationResult {
        seeds: seeds.to_vec(),
        rows,
        per_seed: outcomes.into_iter().map(|o| o.summary).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    /// Group names in matrix order: source regions, then target regions.
    pub labels: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub num_clusters: usize,
    /// For synthetic targets, the source regions they were blended from.
    pub blended_from: Vec<Option<(usize, usize)>>,
}

fn region_groups<'a>(set: &'a TileSet, specs: &[RegionSpec]) -> Vec<(String, Option<(usize, usize)>, Vec<&'a Tile>)> {
    set.region_ids()
        .into_iter()
        .map(|id| {
            let spec = specs.iter().find(|r| r.region_id == id);
            (
                spec.map_or_else(|| format!("region{id}"), |r| r.name.clone()),
                spec.and_then(|r| r.blended_from),
                set.tiles.iter().filter(|t| t.region_id == id).collect(),
            )
        })
        .collect()
}

/// Jaccard similarity between the cluster-label sets of every source region
/// and every target region, over the trained encoder's pooled features.
pub fn similarity_analysis(model: &SegModel, bench: &Benchmark, num_clusters: usize, seed: u64) -> Result<SimilarityReport> {
    let mut groups = region_groups(&bench.train, &bench.train.regions);
    groups.extend(region_groups(&bench.target, &bench.target.regions));
    let feats: Vec<Vec<Vec<f64>>> = groups
        .iter()
        .map(|(_, _, tiles)| tiles.par_iter().map(|t| tile_features(model, t)).collect())
        .collect::<Result<_>>()?;
    let matrix = group_similarity(&feats, num_clusters, seed)?;
    Ok(SimilarityReport {
        labels: groups.iter().map(|g| g.0.clone()).collect(),
        matrix,
        num_clusters,
        blended_from: groups.iter().map(|g| g.1).collect(),
    })
}

/// The input tile with predicted slum pixels tinted red.
pub fn overlay_image(tile: &Tile, mask: &[u8]) -> Result<RgbImage> {
    if mask.len() != tile.pixels() {
        return Err(GramError::Shape(format!("mask of {} pixels for tile {}", mask.len(), tile.tile_id)));
    }
    let n = tile.pixels();
    Ok(RgbImage::from_fn(tile.size as u32, tile.size as u32, |x, y| {
        let i = y as usize * tile.size + x as usize;
        let rgb: [f32; 3] = std::array::from_fn(|c| tile.image[c * n + i]);
        let px = if mask[i] == 1 {
            [0.5 * rgb[0] + 0.5, 0.5 * rgb[1], 0.5 * rgb[2]]
        } else {
            rgb
        };
        image::Rgb(px.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    }))
}

pub fn write_overlay(tile: &Tile, mask: &[u8], path: &Path) -> Result<()> {
    overlay_image(tile, mask)?
        .save(path)
        .map_err(|e| GramError::load(path, e.to_string()))
}
