//! Experiment configuration: one TOML file plus `key=value` overrides.
//!
//! ```toml
//! seed = 0
//! [data]
//! tiles_per_region = 128
//! [source.weights]
//! lambda_mi = 0.1
//! [filter]
//! kind = "stability"
//! rho_s = 0.5
//! ```
//!
//! Every field has a default and unknown keys are rejected. Training seeds
//! are not configurable on their own; they all derive from the root `seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{GramError, Result};
use crate::model::{RegionClassifierConfig, SegModelConfig};
use crate::train::TrainConfig;
use crate::tta::{AdaptConfig, FilterKind, FilterPolicy, RegionMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_regions: usize,
    pub tiles_per_region: usize,
    pub tile_size: usize,
    /// Source tiles per region held out for validation.
    pub val_tiles_per_region: usize,
    /// Load source tiles from a tile directory instead of synthesizing them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_regions: 3,
            tiles_per_region: 128,
            tile_size: 64,
            val_tiles_per_region: 16,
            source_dir: None,
            target_dir: None,
        }
    }
}

/// Segmentation network settings; tile size and region count come from `data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub token_dim: usize,
    pub num_layers: usize,
    pub use_moe: bool,
    pub num_experts: usize,
    pub top_k: usize,
    pub noise_sigma: f64,
    pub expert_hidden_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let m = SegModelConfig::default();
        Self {
            patch_size: m.patch_size,
            token_dim: m.token_dim,
            num_layers: m.num_layers,
            use_moe: m.use_moe,
            num_experts: m.num_experts,
            top_k: m.top_k,
            noise_sigma: m.noise_sigma,
            expert_hidden_dim: m.expert_hidden_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub channels: [usize; 3],
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            channels: RegionClassifierConfig::default().channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptSection {
    pub region_mode: RegionMode,
    /// Source epoch snapshots consulted by the temporal filter (latest ones, final included).
    pub temporal_checkpoints: usize,
}

impl Default for AdaptSection {
    fn default() -> Self {
        Self {
            region_mode: RegionMode::PerImage,
            temporal_checkpoints: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub num_clusters: usize,
    /// Root seeds of the ablation sweep.
    pub seeds: Vec<u64>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            num_clusters: 8,
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub classifier: ClassifierConfig,
    /// Source training of the segmentation network; also drives `h_psi`.
    pub source: TrainConfig,
    /// Self-training on the target.
    pub target: TrainConfig,
    pub filter: FilterPolicy,
    pub adapt: AdaptSection,
    pub analysis: AnalysisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            classifier: ClassifierConfig::default(),
            source: TrainConfig::source(),
            target: TrainConfig::target(),
            filter: FilterPolicy::default(),
            adapt: AdaptSection::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

fn prefixed(prefix: &str, r: Result<()>) -> Option<(String, String)> {
    match r {
        Ok(()) => None,
        Err(GramError::Config { param, reason }) => Some((format!("{prefix}{param}"), reason)),
        Err(e) => Some((prefix.trim_end_matches('.').to_string(), e.to_string())),
    }
}

impl ExperimentConfig {
    /// Parse a TOML document, then apply `key=value` overrides (dotted keys,
    /// TOML values; bare words are taken as strings). Overrides win.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| GramError::config("<file>", e.to_string()))?;
        // Sections are filled from the experiment defaults, not their type
        // defaults (`target` differs from `TrainConfig::default()`).
        let mut table: toml::Table = toml::from_str(&Self::default().to_toml()).expect("defaults serialize");
        merge(&mut table, user);
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| GramError::config(unknown_key(&e).unwrap_or_else(|| "<config>".into()), e.message()))?;
        cfg.sync_seeds();
        Ok(cfg)
    }

    /// Load `path` (or start from defaults) and apply overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => GramError::MissingArtifact(p.to_path_buf()),
                _ => GramError::io(p, e),
            })?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    /// Push the root seed into every derived component.
    pub fn sync_seeds(&mut self) {
        self.source.seed = self.seed;
        self.target.seed = self.seed;
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.sync_seeds();
        c
    }

    pub fn seg_model_config(&self) -> SegModelConfig {
        let m = &self.model;
        SegModelConfig {
            tile_size: self.data.tile_size,
            patch_size: m.patch_size,
            token_dim: m.token_dim,
            num_layers: m.num_layers,
            num_classes: 2,
            num_regions: self.data.num_regions,
            use_moe: m.use_moe,
            num_experts: m.num_experts,
            top_k: m.top_k,
            noise_sigma: m.noise_sigma,
            expert_hidden_dim: m.expert_hidden_dim,
        }
    }

    pub fn classifier_config(&self) -> RegionClassifierConfig {
        RegionClassifierConfig {
            num_regions: self.data.num_regions,
            channels: self.classifier.channels,
        }
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        AdaptConfig {
            train: self.target.clone(),
            policy: self.filter,
            region_mode: self.adapt.region_mode,
        }
    }

    /// Every offending key with its reason; empty when valid.
    pub fn problems(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let d = &self.data;
        if d.num_regions == 0 {
            out.push(("data.num_regions".into(), "must be >= 1".into()));
        }
        if ![32, 64, 128].contains(&d.tile_size) {
            out.push(("data.tile_size".into(), format!("must be one of 32, 64, 128, got {}", d.tile_size)));
        }
        if d.tiles_per_region <= d.val_tiles_per_region {
            out.push((
                "data.tiles_per_region".into(),
                format!("must exceed data.val_tiles_per_region ({})", d.val_tiles_per_region),
            ));
        }
        if d.val_tiles_per_region == 0 {
            out.push(("data.val_tiles_per_region".into(), "must be >= 1".into()));
        }
        if d.num_regions >= 1 {
            out.extend(prefixed("model.", self.seg_model_config().validate()));
        }
        if d.num_regions >= 2 {
            out.extend(prefixed("classifier.", self.classifier_config().validate()));
        }
        out.extend(prefixed("source.", self.source.validate()));
        out.extend(prefixed("target.", self.target.validate()));
        out.extend(prefixed("filter.", self.filter.validate()));
        if let RegionMode::Fixed(r) = self.adapt.region_mode {
            if r >= d.num_regions {
                out.push(("adapt.region_mode".into(), format!("fixed region {r} >= num_regions {}", d.num_regions)));
            }
        }
        if self.adapt.temporal_checkpoints < 2 {
            out.push(("adapt.temporal_checkpoints".into(), "must be >= 2".into()));
        }
        if self.filter.kind == FilterKind::Temporal && self.source.epochs < 2 {
            out.push(("source.epochs".into(), "temporal filtering needs at least 2 source epochs".into()));
        }
        if self.analysis.num_clusters == 0 {
            out.push(("analysis.num_clusters".into(), "must be >= 1".into()));
        }
        if self.analysis.seeds.is_empty() {
            out.push(("analysis.seeds".into(), "must not be empty".into()));
        }
        out
    }

    /// All problems folded into one config error whose `param` lists the keys.
    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            return Ok(());
        }
        let keys: Vec<&str> = p.iter().map(|(k, _)| k.as_str()).collect();
        let reasons: Vec<String> = p.iter().map(|(k, r)| format!("{k}: {r}")).collect();
        Err(GramError::config(keys.join(", "), reasons.join("; ")))
    }
}

fn unknown_key(e: &toml::de::Error) -> Option<String> {
    let msg = e.message();
    let start = msg.find("unknown field `")? + "unknown field `".len();
    let end = msg[start..].find('`')?;
    Some(msg[start..start + end].to_string())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Set `a.b.c = value` in `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| GramError::config(assignment, "override must look like key=value"))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(GramError::config(key, "empty key segment"));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| GramError::config(key, format!("`{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}
