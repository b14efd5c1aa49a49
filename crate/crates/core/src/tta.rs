//! Target adaptation: per-image source-region inference with `h_psi`,
//! pseudo-masks under every routing region, stability scoring, top-rho
//! selection and self-training on the selected pseudo-labels. The baseline
//! filters (none, confidence, temporal) share the same path.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Tile, TileSet};
use crate::error::{GramError, Result};
use crate::metrics::agreement_miou;
use crate::model::{argmax_mask, RegionClassifier, RoutingPlan, SegModel};
use crate::params::SgdMomentum;
use crate::rng::{stream, streams};
use crate::train::{argmax, batch_gradient, as_divergence, check_finite, make_item, step_checked, BatchItem, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Stability,
    None,
    Confidence,
    Temporal,
}

impl FilterKind {
    pub const ALL: [FilterKind; 4] = [FilterKind::Stability, FilterKind::None, FilterKind::Confidence, FilterKind::Temporal];

    pub fn name(self) -> &'static str {
        match self {
            FilterKind::Stability => "stability",
            FilterKind::None => "none",
            FilterKind::Confidence => "confidence",
            FilterKind::Temporal => "temporal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterPolicy {
    pub kind: FilterKind,
    pub rho_s: f64,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            kind: FilterKind::Stability,
            rho_s: 0.5,
        }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_s > 0.0 && self.rho_s <= 1.0) {
            return Err(GramError::config("rho_s", format!("{} not in (0, 1]", self.rho_s)));
        }
        Ok(())
    }
}

/// How the routing region of a target tile is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionMode {
    /// `argmax h_psi(x)` per tile.
    PerImage,
    /// The most frequent per-tile prediction, for every tile.
    Majority,
    /// A fixed source region.
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub train: TrainConfig,
    pub policy: FilterPolicy,
    pub region_mode: RegionMode,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::target(),
            policy: FilterPolicy::default(),
            region_mode: RegionMode::PerImage,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeledSample {
    pub tile_index: usize,
    pub tile_id: String,
    pub inferred_region: usize,
    pub pseudo_mask: Vec<u8>,
    /// Mean agreement mIoU across routings; `None` when D = 1.
    pub stability: Option<f64>,
    /// Score used by the active filter.
    pub score: f64,
}

pub fn infer_target_region(tile: &Tile, clf: &RegionClassifier) -> Result<usize> {
    let p = clf.classify_region_external(&tile.image_f64(), tile.size)?;
    Ok(argmax(&p))
}

/// One argmax mask per routing region, without routing noise.
pub fn pseudo_masks_all_regions(tile: &Tile, model: &SegModel) -> Result<Vec<Vec<u8>>> {
    let img = tile.image_f64();
    (0..model.config.num_regions)
        .map(|d| Ok(model.forward(&img, d, RoutingPlan::Inference)?.mask()))
        .collect()
}

/// `s = 1/(D-1) sum_{d != d_t} mIoU(mask_{d_t}, mask_d)`.
pub fn stability_score(masks: &[Vec<u8>], d_t: usize) -> Result<f64> {
    if masks.len() < 2 {
        return Err(GramError::StabilityUndefined(format!(
            "needs at least 2 routing regions, got {}",
            masks.len()
        )));
    }
    if d_t >= masks.len() {
        return Err(GramError::Routing(format!("reference region {d_t} out of range")));
    }
    let mut sum = 0.0;
    for (d, m) in masks.iter().enumerate() {
        if d != d_t {
            sum += agreement_miou(&masks[d_t], m)?;
        }
    }
    Ok(sum / (masks.len() - 1) as f64)
}

/// Image mean of the per-pixel maximum class probability.
pub fn confidence_score(probs: &[f64]) -> f64 {
    let n = probs.len() / 2;
    (0..n).map(|i| probs[i].max(probs[n + i])).sum::<f64>() / n as f64
}

/// Mean agreement mIoU between `mask` and the masks of the given checkpoints.
pub fn temporal_score(tile: &Tile, region: usize, mask: &[u8], checkpoints: &[SegModel]) -> Result<f64> {
    if checkpoints.len() < 2 {
        return Err(GramError::config("checkpoints", "temporal filtering needs at least 2 checkpoints"));
    }
    let img = tile.image_f64();
    let mut sum = 0.0;
    for c in checkpoints {
        let m = c.forward(&img, region, RoutingPlan::Inference)?.mask();
        sum += agreement_miou(mask, &m)?;
    }
    Ok(sum / checkpoints.len() as f64)
}

/// Number of samples kept at fraction `rho` of `n`.
pub fn selection_count(n: usize, rho: f64) -> usize {
    // Guard against 0.3 * 10 = 3.0000000000000004.
    ((rho * n as f64 - 1e-9).ceil().max(1.0) as usize).min(n)
}

/// Indices of the kept samples, highest score first, ties by `tile_id`.
/// `None` keeps everything in `tile_id` order.
pub fn select_subset(samples: &[PseudoLabeledSample], policy: &FilterPolicy) -> Result<Vec<usize>> {
    policy.validate()?;
    if samples.is_empty() {
        return Err(GramError::Selection("empty target set".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if policy.kind == FilterKind::None {
        order.sort_by(|&a, &b| samples[a].tile_id.cmp(&samples[b].tile_id));
        return Ok(order);
    }
    order.sort_by(|&a, &b| {
        samples[b]
            .score
            .total_cmp(&samples[a].score)
            .then_with(|| samples[a].tile_id.cmp(&samples[b].tile_id))
    });
    order.truncate(selection_count(samples.len(), policy.rho_s));
    Ok(order)
}

/// Routing region of every target tile under `mode`.
pub fn routing_regions(target: &TileSet, clf: &RegionClassifier, mode: RegionMode, num_regions: usize) -> Result<Vec<usize>> {
    match mode {
        RegionMode::Fixed(d) => {
            if d >= num_regions {
                return Err(GramError::config("region_mode", format!("fixed region {d} out of range for D = {num_regions}")));
            }
            Ok(vec![d; target.len()])
        }
        RegionMode::PerImage | RegionMode::Majority => {
            let per: Vec<usize> = target
                .tiles
                .par_iter()
                .map(|t| infer_target_region(t, clf))
                .collect::<Result<_>>()?;
            if mode == RegionMode::Majority {
                let mut counts = vec![0usize; num_regions];
                for &d in &per {
                    counts[d.min(num_regions - 1)] += 1;
                }
                let counts: Vec<f64> = counts.into_iter().map(|c| c as f64).collect();
                return Ok(vec![argmax(&counts); target.len()]);
            }
            Ok(per)
        }
    }
}

/// Pseudo-labels and filter scores for every target tile. Masks on `target`
/// are never read.
pub fn pseudo_label(
    model: &SegModel,
    target: &TileSet,
    clf: &RegionClassifier,
    policy: &FilterPolicy,
    mode: RegionMode,
    checkpoints: &[SegModel],
) -> Result<Vec<PseudoLabeledSample>> {
    policy.validate()?;
    if target.is_empty() {
        return Err(GramError::Selection("empty target set".into()));
    }
    let d = model.config.num_regions;
    if policy.kind == FilterKind::Stability && d < 2 {
        return Err(GramError::StabilityUndefined("D = 1; use the `none` filter".into()));
    }
    let regions = routing_regions(target, clf, mode, d)?;
    target
        .tiles
        .par_iter()
        .zip(&regions)
        .enumerate()
        .map(|(i, (tile, &d_t))| {
            model.check_tile_size(tile.size)?;
            let img = tile.image_f64();
            let out = model.forward(&img, d_t, RoutingPlan::Inference)?;
            let pseudo_mask = out.mask();
            let stability = if d >= 2 {
                let mut masks = Vec::with_capacity(d);
                for r in 0..d {
                    if r == d_t {
                        masks.push(pseudo_mask.clone());
                    } else {
                        masks.push(argmax_mask(&model.forward(&img, r, RoutingPlan::Inference)?.probs));
                    }
                }
                Some(stability_score(&masks, d_t)?)
            } else {
                None
            };
            let score = match policy.kind {
                FilterKind::Stability => stability.unwrap_or(1.0),
                FilterKind::None => 0.0,
                FilterKind::Confidence => confidence_score(&out.probs),
                FilterKind::Temporal => temporal_score(tile, d_t, &pseudo_mask, checkpoints)?,
            };
            Ok(PseudoLabeledSample {
                tile_index: i,
                tile_id: tile.tile_id.clone(),
                inferred_region: d_t,
                pseudo_mask,
                stability,
                score,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileReport {
    pub tile_id: String,
    pub d_t: usize,
    pub stability: Option<f64>,
    pub score: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub policy: FilterKind,
    pub rho_s: f64,
    pub region_mode: RegionMode,
    pub tiles: Vec<TileReport>,
    /// Mean `L_target` per epoch.
    pub loss_curve: Vec<f64>,
}

pub struct AdaptRun {
    pub model: SegModel,
    pub samples: Vec<PseudoLabeledSample>,
    pub selected: Vec<usize>,
    pub report: AdaptationReport,
}

/// Self-train `model` on the filtered pseudo-labels of `target`.
///
/// Masks are stripped from `target` before anything else happens.
/// `checkpoints` are only used by the temporal filter.
pub fn adapt(
    mut model: SegModel,
    target: &TileSet,
    clf: &RegionClassifier,
    cfg: &AdaptConfig,
    checkpoints: &[SegModel],
) -> Result<AdaptRun> {
    cfg.train.validate()?;
    let target = target.without_masks();
    let samples = pseudo_label(&model, &target, clf, &cfg.policy, cfg.region_mode, checkpoints)?;
    let selected = select_subset(&samples, &cfg.policy)?;
    if selected.is_empty() {
        return Err(GramError::Selection("no samples selected".into()));
    }
    let tc = &cfg.train;
    let weights = crate::losses::LossWeights {
        lambda_mi: 0.0,
        lambda_dom: 0.0,
    };
    let mut opt = SgdMomentum::new(model.num_params(), tc.learning_rate, tc.momentum);
    let mut loss_curve = Vec::with_capacity(tc.epochs);
    let mut step = 0;
    for epoch in 0..tc.epochs {
        let mut rng = stream(tc.seed, streams::SAMPLER, &[2, epoch as u64]);
        let mut order = selected.clone();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for idx in order.chunks(tc.batch_size) {
            let items: Vec<BatchItem<'_>> = idx
                .iter()
                .map(|&i| {
                    let s = &samples[i];
                    let flip = tc.hflip && rand::Rng::random::<bool>(&mut rng);
                    make_item(&target.tiles[s.tile_index], &s.pseudo_mask, s.inferred_region, flip)
                })
                .collect();
            let g = batch_gradient(&model, &items, &weights, true).map_err(|e| as_divergence(e, epoch, step))?;
            check_finite(epoch, step, &g)?;
            step_checked(&mut opt, &mut model.params, &g.grads, epoch, step)?;
            model.steps += 1;
            epoch_loss += g.l_seg;
            batches += 1;
            step += 1;
        }
        loss_curve.push(epoch_loss / batches as f64);
        log::debug!("target epoch {epoch}: mean L_target {:.4}", epoch_loss / batches as f64);
    }
    let mut flags = vec![false; samples.len()];
    for &i in &selected {
        flags[i] = true;
    }
    let report = AdaptationReport {
        policy: cfg.policy.kind,
        rho_s: cfg.policy.rho_s,
        region_mode: cfg.region_mode,
        tiles: samples
            .iter()
            .zip(&flags)
            .map(|(s, &sel)| TileReport {
                tile_id: s.tile_id.clone(),
                d_t: s.inferred_region,
                stability: s.stability,
                score: s.score,
                selected: sel,
            })
            .collect(),
        loss_curve,
    };
    Ok(AdaptRun {
        model,
        samples,
        selected,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, score: f64) -> PseudoLabeledSample {
        PseudoLabeledSample {
            tile_index: 0,
            tile_id: id.into(),
            inferred_region: 0,
            pseudo_mask: vec![],
            stability: None,
            score,
        }
    }

    #[test]
    fn stability_examples() {
        let ones = vec![1u8; 16];
        let zeros = vec![0u8; 16];
        assert_eq!(stability_score(&[ones.clone(), ones.clone(), ones.clone()], 1).unwrap(), 1.0);
        assert_eq!(stability_score(&[ones.clone(), zeros], 0).unwrap(), 0.0);
        assert!(matches!(stability_score(&[ones], 0), Err(GramError::StabilityUndefined(_))));
    }

    #[test]
    fn stability_matches_confusion_oracle() {
        let masks: Vec<Vec<u8>> = vec![
            vec![1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 1, 0, 0, 1],
            vec![1, 0, 0, 0, 1, 1, 1, 0, 0, 0, 0, 0, 1, 1, 0, 1],
            vec![0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
        ];
        let oracle = |a: &[u8], b: &[u8]| {
            let mut iou = 0.0;
            for c in 0..2u8 {
                let inter = a.iter().zip(b).filter(|(x, y)| **x == c && **y == c).count();
                let union = a.iter().zip(b).filter(|(x, y)| **x == c || **y == c).count();
                iou += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
            }
            iou / 2.0
        };
        let expect = (oracle(&masks[0], &masks[1]) + oracle(&masks[0], &masks[2])) / 2.0;
        assert!((stability_score(&masks, 0).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn selection_examples() {
        let s: Vec<_> = [0.9, 0.2, 0.7, 0.5]
            .iter()
            .enumerate()
            .map(|(i, &v)| sample(&format!("t{i}"), v))
            .collect();
        let p = FilterPolicy::default();
        let mut got = select_subset(&s, &p).unwrap();
        got.sort_unstable();
        assert_eq!(got, vec![0, 2]);
        let all = FilterPolicy { rho_s: 1.0, ..p };
        assert_eq!(select_subset(&s, &all).unwrap().len(), 4);
        let none = FilterPolicy {
            kind: FilterKind::None,
            rho_s: 0.1,
        };
        assert_eq!(select_subset(&s, &none).unwrap().len(), 4);
        let tied: Vec<_> = ["c", "a", "d", "b"].iter().map(|id| sample(id, 0.5)).collect();
        assert_eq!(select_subset(&tied, &p).unwrap(), vec![1, 3]);
        assert!(matches!(select_subset(&[], &p), Err(GramError::Selection(_))));
        assert!(FilterPolicy { rho_s: 0.0, ..p }.validate().is_err());
    }

    #[test]
    fn selection_count_is_ceiling() {
        assert_eq!(selection_count(10, 0.3), 3);
        assert_eq!(selection_count(10, 0.25), 3);
        assert_eq!(selection_count(7, 0.5), 4);
        assert_eq!(selection_count(5, 1.0), 5);
        assert_eq!(selection_count(5, 0.01), 1);
    }

    #[test]
    fn confidence_of_uniform_is_half() {
        assert_eq!(confidence_score(&[0.5; 8]), 0.5);
        assert!((confidence_score(&[0.9, 0.2, 0.1, 0.8]) - 0.85).abs() < 1e-12);
    }
}
