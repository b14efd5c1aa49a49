use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gram_core::config::ExperimentConfig;
use gram_core::data::{export_tile_directory, generate_benchmark_relaxed};
use gram_core::experiment::{
    evaluate, prepare_benchmark, predict_masks, run_ablation, similarity_analysis, train_classifier,
    train_source_model, write_overlay, Benchmark,
};
use gram_core::model::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, RegionClassifier, SegModel};
use gram_core::tta::{adapt, routing_regions, FilterKind};
use gram_core::{GramError, Result};

const SOURCE_CKPT: &str = "source.ckpt";
const ADAPTED_CKPT: &str = "adapted.ckpt";
const CLASSIFIER_CKPT: &str = "region_classifier.ckpt";
const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Parser)]
#[command(name = "gram", version, about = "Region-aware MoE slum segmentation with test-time adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; defaults apply to everything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, e.g. `--set source.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Benchmark directory written by `synth` (with `source/` and `target/`).
    /// Without it the benchmark is synthesized in memory from the seed.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory; also where later commands look for checkpoints.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelChoice {
    Source,
    Adapted,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark as tile directories.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of source regions (data.num_regions)
        #[arg(long)]
        regions: Option<usize>,
        /// Tiles per source region, and in the target (data.tiles_per_region)
        #[arg(long)]
        tiles_per_region: Option<usize>,
        /// 32, 64 or 128 (data.tile_size)
        #[arg(long)]
        tile_size: Option<usize>,
    },
    /// Train the segmentation network on the labeled source regions.
    TrainSource {
        #[command(flatten)]
        common: Common,
    },
    /// Train the external region classifier on the source regions.
    TrainRegionClassifier {
        #[command(flatten)]
        common: Common,
    },
    /// Pseudo-label, filter and self-train on the target region.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Sample filter: stability, none, confidence or temporal
        #[arg(long, value_parser = parse_filter)]
        filter: Option<FilterKind>,
        /// Fraction of target tiles kept for self-training (rho_s)
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Target metrics for a trained model.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "adapted")]
        model: ModelChoice,
        /// Explicit checkpoint path; overrides `--model`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write one prediction overlay PNG per tile.
        #[arg(long)]
        overlays: bool,
    },
    /// Ablation grid plus the rho_s sweep over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated root seeds; defaults to `analysis.seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Jaccard similarity of regions over clustered encoder features.
    Similarity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn parse_filter(s: &str) -> std::result::Result<FilterKind, String> {
    FilterKind::ALL
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| format!("unknown filter `{s}` (stability, none, confidence, temporal)"))
}

fn resolve(common: &Common, patch: impl FnOnce(&mut ExperimentConfig)) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref(), &common.overrides)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.data {
        cfg.data.source_dir = Some(d.join("source"));
        cfg.data.target_dir = Some(d.join("target"));
    }
    patch(&mut cfg);
    cfg.sync_seeds();
    cfg.validate()?;
    fs::create_dir_all(&common.out).map_err(|e| GramError::io(&common.out, e))?;
    write(&common.out.join(RESOLVED_CONFIG), &cfg.to_toml())?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| GramError::io(path, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<SegModel> {
    load_checkpoint_expecting(path, &cfg.seg_model_config())
}

fn load_classifier(cfg: &ExperimentConfig, out: &Path) -> Result<RegionClassifier> {
    load_checkpoint_expecting(out.join(CLASSIFIER_CKPT), &cfg.classifier_config())
}

fn epoch_ckpt(e: usize) -> String {
    format!("source_epoch{e}.ckpt")
}

fn cmd_synth(common: &Common, regions: Option<usize>, tpr: Option<usize>, size: Option<usize>) -> Result<()> {
    let cfg = resolve(common, |c| {
        if let Some(r) = regions {
            c.data.num_regions = r;
        }
        if let Some(t) = tpr {
            c.data.tiles_per_region = t;
        }
        if let Some(s) = size {
            c.data.tile_size = s;
        }
    })?;
    let d = &cfg.data;
    if d.num_regions < 3 {
        log::warn!(
            "{} source region(s): the region/expert mutual information is degenerate with fewer than 3 regions",
            d.num_regions
        );
    }
    let (source, target) = generate_benchmark_relaxed(cfg.seed, d.num_regions, d.tiles_per_region, d.tile_size)?;
    export_tile_directory(&source, common.out.join("source"))?;
    export_tile_directory(&target, common.out.join("target"))?;
    println!(
        "wrote {} source and {} target tiles to {}",
        source.len(),
        target.len(),
        common.out.display()
    );
    Ok(())
}

fn cmd_train_source(common: &Common) -> Result<()> {
    let cfg = resolve(common, |_| {})?;
    let bench = prepare_benchmark(&cfg)?;
    let run = train_source_model(&cfg, &bench)?;
    let out = &common.out;
    let log_path = out.join("train_log.jsonl");
    let mut f = fs::File::create(&log_path).map_err(|e| GramError::io(&log_path, e))?;
    for step in &run.log {
        writeln!(f, "{}", serde_json::to_string(step)?).map_err(|e| GramError::io(&log_path, e))?;
    }
    for (e, m) in run.checkpoints.iter().enumerate() {
        save_checkpoint(m, out.join(epoch_ckpt(e)))?;
    }
    save_checkpoint(&run.model, out.join(SOURCE_CKPT))?;
    let val_regions: Vec<usize> = bench.val.tiles.iter().map(|t| t.region_id).collect();
    let report = evaluate(&run.model, &bench.val, &val_regions)?;
    write_json(&out.join("source_val_metrics.json"), &report)?;
    let last = run.log.last().expect("at least one step");
    println!(
        "source training: {} steps, final L_total {:.4}, mean I(d;e) {:.4}",
        run.log.len(),
        last.l_total,
        last.mean_mutual_info()
    );
    println!("source validation (own-region routing)\n{}", report.to_table());
    Ok(())
}

fn cmd_train_classifier(common: &Common) -> Result<()> {
    let cfg = resolve(common, |_| {})?;
    let bench = prepare_benchmark(&cfg)?;
    let clf = train_classifier(&cfg, &bench)?;
    save_checkpoint(&clf, common.out.join(CLASSIFIER_CKPT))?;
    let acc = gram_core::train::classifier_accuracy(&clf, &bench.val)?;
    write_json(&common.out.join("region_classifier_val.json"), &serde_json::json!({ "accuracy": acc }))?;
    println!("region classifier validation accuracy {acc:.4}");
    Ok(())
}

fn cmd_adapt(common: &Common, filter: Option<FilterKind>, rho: Option<f64>) -> Result<()> {
    let cfg = resolve(common, |c| {
        if let Some(f) = filter {
            c.filter.kind = f;
        }
        if let Some(r) = rho {
            c.filter.rho_s = r;
        }
    })?;
    let out = &common.out;
    let model = load_model(&cfg, &out.join(SOURCE_CKPT))?;
    let clf = load_classifier(&cfg, out)?;
    let mut history = Vec::new();
    if cfg.filter.kind == FilterKind::Temporal {
        let epochs = cfg.source.epochs;
        for e in epochs.saturating_sub(cfg.adapt.temporal_checkpoints)..epochs {
            history.push(load_model(&cfg, &out.join(epoch_ckpt(e)))?);
        }
    }
    let bench = prepare_benchmark(&cfg)?;
    let run = adapt(model, &bench.target, &clf, &cfg.adapt_config(), &history)?;
    save_checkpoint(&run.model, out.join(ADAPTED_CKPT))?;
    write_json(&out.join("adaptation_report.json"), &run.report)?;
    println!(
        "adapted on {} of {} target tiles ({} filter, rho_s {})",
        run.selected.len(),
        run.samples.len(),
        cfg.filter.kind.name(),
        cfg.filter.rho_s
    );
    Ok(())
}

fn target_regions(cfg: &ExperimentConfig, bench: &Benchmark, model: &SegModel, out: &Path) -> Result<Vec<usize>> {
    if !model.config.use_moe {
        return Ok(vec![0; bench.target.len()]);
    }
    let clf = load_classifier(cfg, out)?;
    routing_regions(&bench.target, &clf, cfg.adapt.region_mode, cfg.data.num_regions)
}

fn cmd_evaluate(common: &Common, choice: ModelChoice, checkpoint: Option<&Path>, overlays: bool) -> Result<()> {
    let cfg = resolve(common, |_| {})?;
    let out = &common.out;
    let (model, path) = match checkpoint {
        Some(p) => (load_checkpoint::<SegModel>(p)?, p.to_path_buf()),
        None => {
            let p = out.join(match choice {
                ModelChoice::Source => SOURCE_CKPT,
                ModelChoice::Adapted => ADAPTED_CKPT,
            });
            (load_model(&cfg, &p)?, p)
        }
    };
    let bench = prepare_benchmark(&cfg)?;
    let regions = target_regions(&cfg, &bench, &model, out)?;
    let report = evaluate(&model, &bench.target, &regions)?;
    write_json(&out.join("metrics.json"), &report)?;
    println!("target metrics for {}\n{}", path.display(), report.to_table());
    if overlays {
        let dir = out.join("overlays");
        fs::create_dir_all(&dir).map_err(|e| GramError::io(&dir, e))?;
        let masks = predict_masks(&model, &bench.target, &regions)?;
        for (t, m) in bench.target.tiles.iter().zip(&masks) {
            write_overlay(t, m, &dir.join(format!("{}.png", t.tile_id)))?;
        }
        println!("wrote {} overlays to {}", masks.len(), dir.display());
    }
    Ok(())
}

fn cmd_ablate(common: &Common, seeds: Option<Vec<u64>>) -> Result<()> {
    let cfg = resolve(common, |c| {
        if let Some(s) = seeds {
            c.analysis.seeds = s;
        }
    })?;
    let result = run_ablation(&cfg, &cfg.analysis.seeds)?;
    write(&common.out.join("comparison.csv"), &result.to_csv())?;
    write_json(&common.out.join("ablation.json"), &result)?;
    println!("{}", result.to_table());
    Ok(())
}

fn cmd_similarity(common: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = resolve(common, |_| {})?;
    let model = match checkpoint {
        Some(p) => load_checkpoint::<SegModel>(p)?,
        None => load_model(&cfg, &common.out.join(SOURCE_CKPT))?,
    };
    let bench = prepare_benchmark(&cfg)?;
    let report = similarity_analysis(&model, &bench, cfg.analysis.num_clusters, cfg.seed)?;
    write_json(&common.out.join("similarity.json"), &report)?;
    print!("{:>12}", "");
    for l in &report.labels {
        print!(" {l:>10}");
    }
    println!();
    for (l, row) in report.labels.iter().zip(&report.matrix) {
        print!("{l:>12}");
        for v in row {
            print!(" {v:>10.3}");
        }
        println!();
    }
    Ok(())
}

fn exit_code(e: &GramError) -> u8 {
    match e {
        GramError::Config { .. } | GramError::ConfigMismatch(_) => 2,
        GramError::MissingArtifact(_) => 3,
        GramError::Load { path, .. } if !path.exists() => 3,
        GramError::Numerical { .. } => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            common,
            regions,
            tiles_per_region,
            tile_size,
        } => cmd_synth(&common, regions, tiles_per_region, tile_size),
        Command::TrainSource { common } => cmd_train_source(&common),
        Command::TrainRegionClassifier { common } => cmd_train_classifier(&common),
        Command::Adapt { common, filter, rho } => cmd_adapt(&common, filter, rho),
        Command::Evaluate {
            common,
            model,
            checkpoint,
            overlays,
        } => cmd_evaluate(&common, model, checkpoint.as_deref(), overlays),
        Command::Ablate { common, seeds } => cmd_ablate(&common, seeds),
        Command::Similarity { common, checkpoint } => cmd_similarity(&common, checkpoint.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                GramError::Config { param, reason } => {
                    eprintln!("error: invalid configuration; offending keys: {param}");
                    eprintln!("  {reason}");
                }
                _ => eprintln!("error: {e}"),
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
