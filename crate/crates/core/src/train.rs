//! Source training of the segmentation network on `L_total`, training of the
//! external region classifier, and the shared minibatch gradient step also
//! used by self-training.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Tile, TileSet};
use crate::error::{GramError, Result};
use crate::losses::{dom_loss_with_grad, mi_loss_grad, mutual_information, seg_loss_with_grad, total_loss, LossWeights};
use crate::model::{RegionClassifier, RoutingPlan, SegModel};
use crate::moe::accumulate_stats;
use crate::params::SgdMomentum;
use crate::rng::{stream, streams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Derived from the experiment's root seed, never read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub weights: LossWeights,
    /// Random horizontal flips of image and mask.
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::source()
    }
}

impl TrainConfig {
    pub fn source() -> Self {
        Self {
            epochs: 3,
            batch_size: 8,
            learning_rate: 0.01,
            momentum: 0.99,
            seed: 0,
            weights: LossWeights::default(),
            hflip: true,
        }
    }

    pub fn target() -> Self {
        Self {
            epochs: 10,
            learning_rate: 1e-4,
            hflip: false,
            ..Self::source()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(GramError::config("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(GramError::config("batch_size", "must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(GramError::config("learning_rate", "must be finite and > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(GramError::config("momentum", "must be in [0, 1)"));
        }
        self.weights.validate()
    }
}

/// One optimizer step's losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub l_seg: f64,
    pub l_mi: f64,
    pub l_dom: f64,
    pub l_total: f64,
    /// `I^l(d; e)` per MoE layer on this batch.
    pub mutual_info: Vec<f64>,
    pub regions_in_batch: usize,
}

impl StepLog {
    pub fn mean_mutual_info(&self) -> f64 {
        if self.mutual_info.is_empty() {
            0.0
        } else {
            self.mutual_info.iter().sum::<f64>() / self.mutual_info.len() as f64
        }
    }
}

/// A training sample: image, target mask (label or pseudo-label), routing region.
pub struct BatchItem<'a> {
    pub image: Vec<f64>,
    pub mask: std::borrow::Cow<'a, [u8]>,
    pub region: usize,
}

pub struct BatchGradient {
    pub grads: Vec<f64>,
    pub l_seg: f64,
    pub l_mi: f64,
    pub l_dom: f64,
    pub l_total: f64,
    pub mutual_info: Vec<f64>,
}

/// Gradient of `L_seg + lambda_MI L_MI + lambda_dom L_dom` over a batch.
///
/// Routing noise is drawn when `train_routing` is set; the per-batch joint
/// `P^l(d, e)` couples the samples, so forward passes run first, then the
/// batch-level losses, then the backward passes.
pub fn batch_gradient(model: &SegModel, batch: &[BatchItem<'_>], weights: &LossWeights, train_routing: bool) -> Result<BatchGradient> {
    let n = batch.len();
    if n == 0 {
        return Err(GramError::Usage("empty batch".into()));
    }
    let outputs = batch
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let plan = if train_routing {
                RoutingPlan::Train(model.noise_stream(i as u64))
            } else {
                RoutingPlan::Inference
            };
            let out = model.forward(&item.image, item.region, plan)?;
            let (seg, dlogits) = seg_loss_with_grad(&out.logits, &item.mask)?;
            let region_logits = model.classify_region_internal(&out.pooled)?;
            Ok((out, seg, dlogits, region_logits))
        })
        .collect::<Result<Vec<_>>>()?;

    let l_seg = outputs.iter().map(|o| o.1).sum::<f64>() / n as f64;
    let regions: Vec<usize> = batch.iter().map(|b| b.region).collect();
    let logits: Vec<&Vec<f64>> = outputs.iter().map(|o| &o.3).collect();
    let (l_dom, dom_grads) = dom_loss_with_grad(&logits, &regions)?;

    let cfg = &model.config;
    let (mut l_mi, mut mutual_info, mut mass_grads) = (0.0, Vec::new(), None);
    if cfg.use_moe {
        let decisions: Vec<_> = outputs.iter().map(|o| o.0.routing.clone()).collect();
        let stats = accumulate_stats(&decisions, &regions, cfg.num_regions, cfg.num_experts)?;
        for s in &stats {
            let i = mutual_information(s)?;
            mutual_info.push(i);
            l_mi -= i;
        }
        if weights.lambda_mi > 0.0 {
            // dL/dmass_s[e] = lambda * dL_MI/dP(d_s, e) / total_tokens.
            let gj = mi_loss_grad(&stats)?;
            let total_tokens = (cfg.tokens() * n) as f64;
            let e = cfg.num_experts;
            mass_grads = Some(
                regions
                    .iter()
                    .map(|&d| {
                        gj.iter()
                            .map(|g| g[d * e..(d + 1) * e].iter().map(|v| weights.lambda_mi * v / total_tokens).collect())
                            .collect::<Vec<Vec<f64>>>()
                    })
                    .collect::<Vec<_>>(),
            );
        }
    }
    let l_total = total_loss(l_seg, l_mi, l_dom, weights)?;

    let inv_n = 1.0 / n as f64;
    let per_sample: Vec<Vec<f64>> = outputs
        .par_iter()
        .enumerate()
        .map(|(i, (out, _, dlogits, _))| {
            let mut g = vec![0.0; model.num_params()];
            let dl: Vec<f64> = dlogits.iter().map(|v| v * inv_n).collect();
            let dr: Vec<f64> = dom_grads[i].iter().map(|v| v * weights.lambda_dom).collect();
            let dr = (weights.lambda_dom > 0.0).then_some(dr.as_slice());
            model.backward(&out.cache, &dl, dr, mass_grads.as_ref().map(|m| m[i].as_slice()), &mut g);
            g
        })
        .collect();
    let mut grads = vec![0.0; model.num_params()];
    for g in &per_sample {
        for (a, b) in grads.iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok(BatchGradient {
        grads,
        l_seg,
        l_mi,
        l_dom,
        l_total,
        mutual_info,
    })
}

/// Shuffled batches in which regions are interleaved, so every batch of
/// size >= 2 sees at least two regions while more than one region has
/// tiles left.
pub fn region_mixed_batches<R: Rng>(regions: &[usize], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let ids: BTreeSet<usize> = regions.iter().copied().collect();
    let mut pools: Vec<Vec<usize>> = ids
        .iter()
        .map(|&d| {
            let mut v: Vec<usize> = (0..regions.len()).filter(|&i| regions[i] == d).collect();
            v.shuffle(rng);
            v
        })
        .collect();
    let mut order = Vec::with_capacity(regions.len());
    loop {
        let mut live: Vec<usize> = (0..pools.len()).filter(|&p| !pools[p].is_empty()).collect();
        if live.is_empty() {
            break;
        }
        live.shuffle(rng);
        for p in live {
            order.push(pools[p].pop().unwrap());
        }
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn flip_image(img: &[f64], size: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for (plane_in, plane_out) in img.chunks(size * size).zip(out.chunks_mut(size * size)) {
        for r in 0..size {
            for c in 0..size {
                plane_out[r * size + c] = plane_in[r * size + size - 1 - c];
            }
        }
    }
    out
}

fn flip_mask(mask: &[u8], size: usize) -> Vec<u8> {
    let mut out = vec![0; mask.len()];
    for r in 0..size {
        for c in 0..size {
            out[r * size + c] = mask[r * size + size - 1 - c];
        }
    }
    out
}

/// Training sample of `tile` with the given target mask, optionally flipped.
pub fn make_item<'a>(tile: &Tile, mask: &'a [u8], region: usize, flip: bool) -> BatchItem<'a> {
    if flip {
        BatchItem {
            image: flip_image(&tile.image_f64(), tile.size),
            mask: std::borrow::Cow::Owned(flip_mask(mask, tile.size)),
            region,
        }
    } else {
        BatchItem {
            image: tile.image_f64(),
            mask: std::borrow::Cow::Borrowed(mask),
            region,
        }
    }
}

pub(crate) fn check_finite(epoch: usize, step: usize, g: &BatchGradient) -> Result<()> {
    if !g.l_total.is_finite() || g.grads.iter().any(|v| !v.is_finite()) {
        return Err(GramError::Numerical {
            epoch,
            step,
            reason: format!(
                "non-finite loss or gradient (L_seg {}, L_MI {}, L_dom {}, L_total {})",
                g.l_seg, g.l_mi, g.l_dom, g.l_total
            ),
        });
    }
    Ok(())
}

/// A forward pass that overflows surfaces as a non-finite gating logit; inside a
/// training loop that is divergence, not a routing contract violation.
pub(crate) fn as_divergence(e: GramError, epoch: usize, step: usize) -> GramError {
    match e {
        GramError::Routing(reason) if reason.starts_with("non-finite") => GramError::Numerical { epoch, step, reason },
        e => e,
    }
}

/// Applies one optimizer update and fails if it produced a non-finite parameter.
pub(crate) fn step_checked(opt: &mut SgdMomentum, params: &mut [f64], grads: &[f64], epoch: usize, step: usize) -> Result<()> {
    opt.step(params, grads);
    if params.iter().any(|v| !v.is_finite()) {
        return Err(GramError::Numerical {
            epoch,
            step,
            reason: "parameters became non-finite".into(),
        });
    }
    Ok(())
}

pub struct SourceRun {
    pub model: SegModel,
    /// Model snapshot after each epoch.
    pub checkpoints: Vec<SegModel>,
    pub log: Vec<StepLog>,
}

fn epoch_mean(log: &[StepLog], epoch: usize) -> f64 {
    let v: Vec<f64> = log.iter().filter(|l| l.epoch == epoch).map(|l| l.l_total).collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

impl SourceRun {
    pub fn epoch_mean_total(&self, epoch: usize) -> f64 {
        epoch_mean(&self.log, epoch)
    }
}

pub fn train_source(mut model: SegModel, source: &TileSet, cfg: &TrainConfig) -> Result<SourceRun> {
    cfg.validate()?;
    source.validate()?;
    if source.is_empty() {
        return Err(GramError::Usage("source set is empty".into()));
    }
    for t in &source.tiles {
        model.check_tile_size(t.size)?;
        if t.region_id >= model.config.num_regions {
            return Err(GramError::Label(format!(
                "tile {} has region {} but the model has D = {}",
                t.tile_id, t.region_id, model.config.num_regions
            )));
        }
    }
    let regions: Vec<usize> = source.tiles.iter().map(|t| t.region_id).collect();
    let mut opt = SgdMomentum::new(model.num_params(), cfg.learning_rate, cfg.momentum);
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut step = 0;
    let mut single_region = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = stream(cfg.seed, streams::SAMPLER, &[0, epoch as u64]);
        let batches = region_mixed_batches(&regions, cfg.batch_size, &mut rng);
        for idx in batches {
            let flips: Vec<bool> = idx.iter().map(|_| cfg.hflip && rng.random::<bool>()).collect();
            let items: Vec<BatchItem<'_>> = idx
                .iter()
                .zip(&flips)
                .map(|(&i, &f)| {
                    let t = &source.tiles[i];
                    make_item(t, t.mask.as_deref().expect("validated source split"), t.region_id, f)
                })
                .collect();
            let present: BTreeSet<usize> = items.iter().map(|b| b.region).collect();
            if present.len() < 2 && model.config.num_regions > 1 {
                single_region += 1;
            }
            let g = batch_gradient(&model, &items, &cfg.weights, true).map_err(|e| as_divergence(e, epoch, step))?;
            check_finite(epoch, step, &g)?;
            step_checked(&mut opt, &mut model.params, &g.grads, epoch, step)?;
            model.steps += 1;
            log.push(StepLog {
                step,
                epoch,
                l_seg: g.l_seg,
                l_mi: g.l_mi,
                l_dom: g.l_dom,
                l_total: g.l_total,
                mutual_info: g.mutual_info,
                regions_in_batch: present.len(),
            });
            step += 1;
        }
        log::debug!("source epoch {epoch}: mean L_total {:.4}", epoch_mean(&log, epoch));
        checkpoints.push(model.clone());
    }
    if single_region > 0 {
        log::warn!("{single_region} source batches contained a single region; their MI term is degenerate");
    }
    Ok(SourceRun {
        model,
        checkpoints,
        log,
    })
}

/// Train `h_psi` with cross-entropy on the source tiles' region ids.
pub fn train_region_classifier(mut clf: RegionClassifier, source: &TileSet, cfg: &TrainConfig) -> Result<RegionClassifier> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(GramError::Usage("source set is empty".into()));
    }
    let d = clf.config.num_regions;
    if let Some(t) = source.tiles.iter().find(|t| t.region_id >= d) {
        return Err(GramError::Label(format!("tile {} has region {} but D = {d}", t.tile_id, t.region_id)));
    }
    if source.region_ids().len() < 2 {
        log::warn!("region classifier trained on a single region is a constant predictor");
    }
    let mut opt = SgdMomentum::new(clf.params.len(), cfg.learning_rate, cfg.momentum);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = stream(cfg.seed, streams::SAMPLER, &[1, epoch as u64]);
        let mut order: Vec<usize> = (0..source.len()).collect();
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let results = idx
                .par_iter()
                .map(|&i| {
                    let t = &source.tiles[i];
                    let (logits, cache) = clf.forward(&t.image_f64(), t.size)?;
                    let (loss, g) = dom_loss_with_grad(&[logits], &[t.region_id])?;
                    let mut grads = vec![0.0; clf.params.len()];
                    clf.backward(&cache, &g[0], &mut grads);
                    Ok((loss, grads))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads = vec![0.0; clf.params.len()];
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l;
                for (a, b) in grads.iter_mut().zip(g) {
                    *a += b / idx.len() as f64;
                }
            }
            if !loss.is_finite() || grads.iter().any(|v| !v.is_finite()) {
                return Err(GramError::Numerical {
                    epoch,
                    step,
                    reason: format!("region classifier loss {loss}"),
                });
            }
            step_checked(&mut opt, &mut clf.params, &grads, epoch, step)?;
            step += 1;
        }
    }
    clf.trained = true;
    Ok(clf)
}

/// Fraction of tiles whose region `h_psi` predicts correctly.
pub fn classifier_accuracy(clf: &RegionClassifier, set: &TileSet) -> Result<f64> {
    if set.is_empty() {
        return Err(GramError::Usage("empty evaluation set".into()));
    }
    let hits = set
        .tiles
        .par_iter()
        .map(|t| {
            let p = clf.classify_region_external(&t.image_f64(), t.size)?;
            Ok(usize::from(argmax(&p) == t.region_id))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / set.len() as f64)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_benchmark;
    use crate::model::SegModelConfig;

    #[test]
    fn batches_mix_regions() {
        let regions: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let mut rng = stream(0, "t", &[]);
        let batches = region_mixed_batches(&regions, 4, &mut rng);
        let all: BTreeSet<usize> = batches.iter().flatten().copied().collect();
        assert_eq!(all.len(), 30);
        for b in &batches {
            let set: BTreeSet<usize> = b.iter().map(|&i| regions[i]).collect();
            assert!(set.len() >= 2 || b.len() == 1);
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn flip_is_an_involution() {
        let img: Vec<f64> = (0..3 * 16).map(f64::from).collect();
        assert_eq!(flip_image(&flip_image(&img, 4), 4), img);
        assert_eq!(flip_image(&img, 4)[0], 3.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::source().validate().is_ok());
        let bad = TrainConfig {
            momentum: 1.0,
            ..TrainConfig::source()
        };
        assert!(matches!(bad.validate(), Err(GramError::Config { .. })));
    }

    #[test]
    fn short_run_is_deterministic_and_snapshots_each_epoch() {
        let (src, _) = generate_benchmark(0, 3, 16, 32).unwrap();
        let model_cfg = SegModelConfig {
            tile_size: 32,
            ..SegModelConfig::default()
        };
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::source()
        };
        let a = train_source(SegModel::new(model_cfg.clone(), 0).unwrap(), &src, &cfg).unwrap();
        let b = train_source(SegModel::new(model_cfg, 0).unwrap(), &src, &cfg).unwrap();
        assert_eq!(a.checkpoints.len(), 2);
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.log.len(), 2 * 6);
        assert!(a.log.iter().all(|l| l.mutual_info.len() == 4 && l.regions_in_batch >= 2));
    }
}
