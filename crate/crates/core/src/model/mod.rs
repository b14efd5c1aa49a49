//! The segmentation network `f = h_s . F_L . ... . F_1` over a small token
//! encoder, its internal region head `h_d`, and the independent convolutional
//! region classifier `h_psi`.
//!
//! Encoder layout for one tile:
//!
//! ```text
//! patches [T, 3p^2] --linear--> z_0 [T, C]
//! block l:  z <- z + silu(dwconv3x3(LN(z))) W_mix + b_mix      (token mixing)
//!           z <- z + sum_topk alpha_e E_e(z)                   (region-routed MoE, optional)
//! head:     LN(z_L) W_head -> [T, 2] --bilinear x p--> [2, H, W] --softmax-->
//! region:   mean_t z after block max(L/2, 1) -> W_region -> D logits
//! ```

mod checkpoint;
mod region_classifier;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpointable, CHECKPOINT_VERSION};
pub use region_classifier::{RegionClassifier, RegionClassifierConfig};

use crate::error::{GramError, Result};
use crate::moe::{MoeBlock, MoeCache, MoeConfig, Routing, RoutingDecision};
use crate::nn::{self, Interp1d, LayerNormCache};
use crate::params::{fill_normal, ParamLayout, Slot};
use crate::rng::{stream, streams, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegModelConfig {
    pub tile_size: usize,
    pub patch_size: usize,
    pub token_dim: usize,
    /// Number of encoder blocks, each carrying an MoE adapter when `use_moe`.
    pub num_layers: usize,
    pub num_classes: usize,
    pub num_regions: usize,
    pub use_moe: bool,
    pub num_experts: usize,
    pub top_k: usize,
    pub noise_sigma: f64,
    pub expert_hidden_dim: usize,
}

impl Default for SegModelConfig {
    fn default() -> Self {
        Self {
            tile_size: 64,
            patch_size: 4,
            token_dim: 24,
            num_layers: 4,
            num_classes: 2,
            num_regions: 3,
            use_moe: true,
            num_experts: 12,
            top_k: 2,
            noise_sigma: 0.1,
            expert_hidden_dim: 16,
        }
    }
}

impl SegModelConfig {
    pub fn moe_config(&self) -> MoeConfig {
        MoeConfig {
            num_experts: self.num_experts,
            top_k: self.top_k,
            noise_sigma: self.noise_sigma,
            token_dim: self.token_dim,
            expert_hidden_dim: self.expert_hidden_dim,
            num_regions: self.num_regions,
        }
    }

    pub fn grid(&self) -> usize {
        self.tile_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Index of the block whose output feeds the internal region head.
    pub fn pool_block(&self) -> usize {
        (self.num_layers / 2).max(1) - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.tile_size.is_multiple_of(self.patch_size) {
            return Err(GramError::config(
                "patch_size",
                format!("tile_size {} not divisible by patch_size {}", self.tile_size, self.patch_size),
            ));
        }
        if self.num_layers == 0 {
            return Err(GramError::config("num_layers", "must be >= 1"));
        }
        if self.num_classes != 2 {
            return Err(GramError::config("num_classes", "only binary segmentation is supported"));
        }
        if self.token_dim == 0 {
            return Err(GramError::config("token_dim", "must be >= 1"));
        }
        self.moe_config().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlockSlots {
    ln_g: Slot,
    ln_b: Slot,
    dw_k: Slot,
    dw_b: Slot,
    mix_w: Slot,
    mix_b: Slot,
    moe: Option<MoeBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelSlots {
    patch_w: Slot,
    patch_b: Slot,
    blocks: Vec<BlockSlots>,
    head_ln_g: Slot,
    head_ln_b: Slot,
    head_w: Slot,
    head_b: Slot,
    region_w: Slot,
    region_b: Slot,
}

/// How a forward pass routes tokens in every MoE layer.
pub enum RoutingPlan<'a> {
    Inference,
    Train(StreamRng),
    /// Per-layer fixed expert indices (`[tokens, k]` each).
    Fixed(&'a [Vec<usize>]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    pub config: SegModelConfig,
    pub layout: ParamLayout,
    pub params: Vec<f64>,
    /// Root seed of the routing-noise streams.
    pub noise_seed: u64,
    /// Optimizer steps applied so far; indexes the routing-noise streams.
    pub steps: u64,
    slots: ModelSlots,
    rows: Interp1d,
    cols: Interp1d,
}

struct BlockCache {
    z_in: Vec<f64>,
    ln: LayerNormCache,
    u: Vec<f64>,
    v: Vec<f64>,
    moe: Option<MoeCache>,
}

/// Activations of one forward pass, needed by [`SegModel::backward`].
pub struct ForwardCache {
    patches: Vec<f64>,
    blocks: Vec<BlockCache>,
    z_final: Vec<f64>,
    head_ln: LayerNormCache,
    head_in: Vec<f64>,
    pooled: Vec<f64>,
}

pub struct SegOutput {
    /// Channel-major `[2, H, W]` class logits.
    pub logits: Vec<f64>,
    /// Channel-major `[2, H, W]` class probabilities.
    pub probs: Vec<f64>,
    /// One routing decision per MoE layer (empty without MoE).
    pub routing: Vec<RoutingDecision>,
    /// Mean-pooled token features feeding the internal region head.
    pub pooled: Vec<f64>,
    pub cache: ForwardCache,
}

impl SegOutput {
    /// Per-pixel argmax; ties go to non-slum.
    pub fn mask(&self) -> Vec<u8> {
        argmax_mask(&self.probs)
    }
}

pub fn argmax_mask(probs: &[f64]) -> Vec<u8> {
    let n = probs.len() / 2;
    (0..n).map(|i| u8::from(probs[n + i] > probs[i])).collect()
}

impl SegModel {
    pub fn new(config: SegModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (c, p, d) = (config.token_dim, config.patch_size, config.num_regions);
        let mut layout = ParamLayout::new();
        let patch_w = layout.alloc("patch_w", &[3 * p * p, c]);
        let patch_b = layout.alloc("patch_b", &[c]);
        let mut blocks = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            blocks.push(BlockSlots {
                ln_g: layout.alloc(format!("block{l}.ln_g"), &[c]),
                ln_b: layout.alloc(format!("block{l}.ln_b"), &[c]),
                dw_k: layout.alloc(format!("block{l}.dw_k"), &[c, 3, 3]),
                dw_b: layout.alloc(format!("block{l}.dw_b"), &[c]),
                mix_w: layout.alloc(format!("block{l}.mix_w"), &[c, c]),
                mix_b: layout.alloc(format!("block{l}.mix_b"), &[c]),
                moe: if config.use_moe {
                    Some(MoeBlock::new(config.moe_config(), &mut layout, &format!("block{l}.moe"))?)
                } else {
                    None
                },
            });
        }
        let slots = ModelSlots {
            patch_w,
            patch_b,
            blocks,
            head_ln_g: layout.alloc("head.ln_g", &[c]),
            head_ln_b: layout.alloc("head.ln_b", &[c]),
            head_w: layout.alloc("head.w", &[c, config.num_classes]),
            head_b: layout.alloc("head.b", &[config.num_classes]),
            region_w: layout.alloc("region.w", &[c, d]),
            region_b: layout.alloc("region.b", &[d]),
        };
        let mut params = vec![0.0; layout.len()];
        let mut rng = stream(seed, streams::MODEL_INIT, &[]);
        let inv_sqrt = |n: usize| 1.0 / (n as f64).sqrt();
        fill_normal(slots.patch_w.of_mut(&mut params), inv_sqrt(3 * p * p), &mut rng);
        for b in &slots.blocks {
            b.ln_g.of_mut(&mut params).fill(1.0);
            fill_normal(b.dw_k.of_mut(&mut params), 1.0 / 3.0, &mut rng);
            fill_normal(b.mix_w.of_mut(&mut params), inv_sqrt(c), &mut rng);
            if let Some(m) = &b.moe {
                m.init(&mut params, &mut rng);
            }
        }
        slots.head_ln_g.of_mut(&mut params).fill(1.0);
        fill_normal(slots.head_w.of_mut(&mut params), inv_sqrt(c), &mut rng);
        fill_normal(slots.region_w.of_mut(&mut params), inv_sqrt(c), &mut rng);
        let grid = config.grid();
        Ok(Self {
            rows: Interp1d::new(grid, config.tile_size),
            cols: Interp1d::new(grid, config.tile_size),
            config,
            layout,
            params,
            noise_seed: seed,
            steps: 0,
            slots,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn moe_blocks(&self) -> impl Iterator<Item = &MoeBlock> {
        self.slots.blocks.iter().filter_map(|b| b.moe.as_ref())
    }

    /// Zero every expert's second layer, making each MoE block the identity.
    pub fn zero_expert_heads(&mut self) {
        for b in &self.slots.blocks {
            if let Some(m) = &b.moe {
                m.slots.w2.of_mut(&mut self.params).fill(0.0);
                m.slots.b2.of_mut(&mut self.params).fill(0.0);
            }
        }
    }

    /// Routing-noise stream for sample `index` of the current optimizer step.
    pub fn noise_stream(&self, index: u64) -> StreamRng {
        stream(self.noise_seed, streams::ROUTING_NOISE, &[self.steps, index])
    }

    fn patchify(&self, image: &[f64]) -> Result<Vec<f64>> {
        let s = self.config.tile_size;
        if image.len() != 3 * s * s {
            return Err(GramError::Shape(format!(
                "image buffer of {} values does not match a 3x{s}x{s} tile",
                image.len()
            )));
        }
        let p = self.config.patch_size;
        let g = self.config.grid();
        let dim = 3 * p * p;
        let mut out = vec![0.0; g * g * dim];
        for pr in 0..g {
            for pc in 0..g {
                let t = pr * g + pc;
                for c in 0..3 {
                    for dy in 0..p {
                        for dx in 0..p {
                            let v = image[c * s * s + (pr * p + dy) * s + pc * p + dx];
                            out[t * dim + c * p * p + dy * p + dx] = 2.0 * v - 1.0;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Check a tile's spatial size against the model.
    pub fn check_tile_size(&self, size: usize) -> Result<()> {
        if !size.is_multiple_of(self.config.patch_size) {
            return Err(GramError::Shape(format!(
                "tile size {size} not divisible by patch size {}",
                self.config.patch_size
            )));
        }
        if size != self.config.tile_size {
            return Err(GramError::Shape(format!(
                "tile size {size} does not match model tile size {}",
                self.config.tile_size
            )));
        }
        Ok(())
    }

    /// Segment one image (`[3, H, W]`) routed through region `region`.
    pub fn forward(&self, image: &[f64], region: usize, plan: RoutingPlan<'_>) -> Result<SegOutput> {
        let cfg = &self.config;
        if region >= cfg.num_regions {
            return Err(GramError::Routing(format!(
                "region index {region} out of range for D = {}",
                cfg.num_regions
            )));
        }
        let p = &self.params;
        let (c, t_count, g) = (cfg.token_dim, cfg.tokens(), cfg.grid());
        let patches = self.patchify(image)?;
        let pdim = 3 * cfg.patch_size * cfg.patch_size;
        let mut z = nn::linear(&patches, t_count, pdim, self.slots.patch_w.of(p), self.slots.patch_b.of(p), c);
        let mut blocks = Vec::with_capacity(cfg.num_layers);
        let mut routing = Vec::new();
        let mut pooled = Vec::new();
        let (fixed, mut noise) = match plan {
            RoutingPlan::Inference => (None, None),
            RoutingPlan::Train(rng) => (None, Some(rng)),
            RoutingPlan::Fixed(f) => (Some(f), None),
        };
        let mut moe_index = 0;
        for (l, b) in self.slots.blocks.iter().enumerate() {
            let z_in = z.clone();
            let (a, ln) = nn::layer_norm(&z, t_count, c, b.ln_g.of(p), b.ln_b.of(p));
            let u = nn::depthwise_conv3x3(&a, g, g, c, b.dw_k.of(p), b.dw_b.of(p));
            let v: Vec<f64> = u.iter().map(|&x| nn::silu(x)).collect();
            let m = nn::linear(&v, t_count, c, b.mix_w.of(p), b.mix_b.of(p), c);
            for (zi, mi) in z.iter_mut().zip(&m) {
                *zi += mi;
            }
            let moe_cache = if let Some(moe) = &b.moe {
                let r = match (fixed, noise.as_mut()) {
                    (Some(f), _) => Routing::Fixed(&f[moe_index]),
                    (None, Some(rng)) => Routing::Train(rng),
                    (None, None) => Routing::Inference,
                };
                let (out, cache) = moe.forward(p, &z, region, r)?;
                z = out;
                routing.push(cache.decision.clone());
                moe_index += 1;
                Some(cache)
            } else {
                None
            };
            blocks.push(BlockCache {
                z_in,
                ln,
                u,
                v,
                moe: moe_cache,
            });
            if l == cfg.pool_block() {
                pooled = mean_tokens(&z, t_count, c);
            }
        }
        let (head_in, head_ln) = nn::layer_norm(&z, t_count, c, self.slots.head_ln_g.of(p), self.slots.head_ln_b.of(p));
        let tok_logits = nn::linear(&head_in, t_count, c, self.slots.head_w.of(p), self.slots.head_b.of(p), 2);
        let logits = nn::upsample_bilinear(&tok_logits, g, g, 2, &self.rows, &self.cols);
        let probs = pixel_softmax(&logits);
        Ok(SegOutput {
            logits,
            probs,
            routing,
            pooled: pooled.clone(),
            cache: ForwardCache {
                patches,
                blocks,
                z_final: z,
                head_ln,
                head_in,
                pooled,
            },
        })
    }

    /// Internal region head `h_d` on pooled features.
    pub fn classify_region_internal(&self, pooled: &[f64]) -> Result<Vec<f64>> {
        let c = self.config.token_dim;
        if pooled.len() != c {
            return Err(GramError::Shape(format!("pooled features have {} dims, expected {c}", pooled.len())));
        }
        let p = &self.params;
        Ok(nn::linear(
            pooled,
            1,
            c,
            self.slots.region_w.of(p),
            self.slots.region_b.of(p),
            self.config.num_regions,
        ))
    }

    /// Accumulate parameter gradients of one sample.
    ///
    /// * `dlogits` - gradient w.r.t. the `[2, H, W]` pixel logits.
    /// * `dregion` - gradient w.r.t. the internal region head's logits.
    /// * `mass_grads` - per MoE layer, gradient w.r.t. this sample's expert mass.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        dlogits: &[f64],
        dregion: Option<&[f64]>,
        mass_grads: Option<&[Vec<f64>]>,
        grads: &mut [f64],
    ) {
        let cfg = &self.config;
        let p = &self.params;
        let (c, t_count, g) = (cfg.token_dim, cfg.tokens(), cfg.grid());
        let s = &self.slots;

        let mut dtok = vec![0.0; t_count * 2];
        nn::upsample_bilinear_backward(dlogits, g, g, 2, &self.rows, &self.cols, &mut dtok);
        let mut dhead_in = vec![0.0; t_count * c];
        {
            let (dw, rest) = split_two(grads, s.head_w, s.head_b);
            nn::linear_backward(&cache.head_in, t_count, c, s.head_w.of(p), 2, &dtok, dw, rest, Some(&mut dhead_in));
        }
        let mut dz = vec![0.0; t_count * c];
        {
            let (dg, db) = split_two(grads, s.head_ln_g, s.head_ln_b);
            nn::layer_norm_backward(&cache.head_ln, t_count, c, s.head_ln_g.of(p), &dhead_in, dg, db, &mut dz);
        }
        let _ = &cache.z_final;

        let mut dpooled = None;
        if let Some(dr) = dregion {
            let mut dp = vec![0.0; c];
            let (dw, db) = split_two(grads, s.region_w, s.region_b);
            nn::linear_backward(&cache.pooled, 1, c, s.region_w.of(p), cfg.num_regions, dr, dw, db, Some(&mut dp));
            dpooled = Some(dp);
        }

        let mut moe_index = s.blocks.iter().filter(|b| b.moe.is_some()).count();
        for l in (0..cfg.num_layers).rev() {
            let b = &s.blocks[l];
            let bc = &cache.blocks[l];
            if l == cfg.pool_block() {
                if let Some(dp) = &dpooled {
                    let inv = 1.0 / t_count as f64;
                    for t in 0..t_count {
                        for (d, &v) in dz[t * c..(t + 1) * c].iter_mut().zip(dp) {
                            *d += v * inv;
                        }
                    }
                }
            }
            if let (Some(moe), Some(mc)) = (&b.moe, &bc.moe) {
                moe_index -= 1;
                let mg = mass_grads.map(|m| m[moe_index].as_slice());
                let mut dz_in = vec![0.0; t_count * c];
                moe.backward(p, mc, &dz, mg, grads, &mut dz_in);
                dz = dz_in;
            }
            // Mixer: z_out = z_in + silu(dw(LN(z_in))) W + b.
            let mut dv = vec![0.0; t_count * c];
            {
                let (dw, db) = split_two(grads, b.mix_w, b.mix_b);
                nn::linear_backward(&bc.v, t_count, c, b.mix_w.of(p), c, &dz, dw, db, Some(&mut dv));
            }
            let du: Vec<f64> = dv.iter().zip(&bc.u).map(|(d, &u)| d * nn::silu_grad(u)).collect();
            let mut da = vec![0.0; t_count * c];
            let a: Vec<f64> = {
                // Recompute the normalized input from the cache.
                let gam = b.ln_g.of(p);
                let bet = b.ln_b.of(p);
                bc.ln
                    .xhat
                    .iter()
                    .enumerate()
                    .map(|(i, &h)| h * gam[i % c] + bet[i % c])
                    .collect()
            };
            {
                let (dk, db) = split_two(grads, b.dw_k, b.dw_b);
                nn::depthwise_conv3x3_backward(&a, g, g, c, b.dw_k.of(p), &du, dk, db, &mut da);
            }
            {
                let (dg, db) = split_two(grads, b.ln_g, b.ln_b);
                nn::layer_norm_backward(&bc.ln, t_count, c, b.ln_g.of(p), &da, dg, db, &mut dz);
            }
            let _ = &bc.z_in;
        }
        let pdim = 3 * cfg.patch_size * cfg.patch_size;
        let (dw, db) = split_two(grads, s.patch_w, s.patch_b);
        nn::linear_backward(&cache.patches, t_count, pdim, s.patch_w.of(p), c, &dz, dw, db, None);
    }
}

/// Disjoint mutable views of two slots; `a` must precede `b` or vice versa
/// without overlap.
fn split_two(grads: &mut [f64], a: Slot, b: Slot) -> (&mut [f64], &mut [f64]) {
    if a.offset < b.offset {
        let (lo, hi) = grads.split_at_mut(b.offset);
        (&mut lo[a.range()], &mut hi[..b.len])
    } else {
        let (lo, hi) = grads.split_at_mut(a.offset);
        (&mut hi[..a.len], &mut lo[b.range()])
    }
}

fn mean_tokens(z: &[f64], tokens: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for t in 0..tokens {
        for (o, &v) in out.iter_mut().zip(&z[t * c..(t + 1) * c]) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= tokens as f64;
    }
    out
}

fn pixel_softmax(logits: &[f64]) -> Vec<f64> {
    let n = logits.len() / 2;
    let mut probs = vec![0.0; logits.len()];
    for i in 0..n {
        let p1 = nn::sigmoid(logits[n + i] - logits[i]);
        probs[i] = 1.0 - p1;
        probs[n + i] = p1;
    }
    probs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{dom_loss_with_grad, seg_loss_with_grad};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> SegModelConfig {
        SegModelConfig {
            tile_size: 8,
            patch_size: 4,
            token_dim: 4,
            num_layers: 2,
            num_classes: 2,
            num_regions: 2,
            use_moe: true,
            num_experts: 3,
            top_k: 2,
            noise_sigma: 0.0,
            expert_hidden_dim: 3,
        }
    }

    fn random_image(seed: u64, size: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..3 * size * size).map(|_| rng.random::<f64>()).collect()
    }

    fn perturb(model: &mut SegModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut model.params {
            *v += rng.random_range(-0.3..0.3);
        }
    }

    #[test]
    fn probabilities_are_normalized_and_shaped() {
        let model = SegModel::new(SegModelConfig::default(), 0).unwrap();
        let img = random_image(1, 64);
        let out = model.forward(&img, 1, RoutingPlan::Inference).unwrap();
        assert_eq!(out.probs.len(), 2 * 64 * 64);
        for i in 0..64 * 64 {
            assert!((out.probs[i] + out.probs[64 * 64 + i] - 1.0).abs() < 1e-12);
        }
        assert_eq!(out.routing.len(), 4);
        assert_eq!(out.pooled.len(), 24);
        assert_eq!(model.classify_region_internal(&out.pooled).unwrap().len(), 3);
    }

    #[test]
    fn zero_expert_heads_make_forward_region_invariant() {
        let model = SegModel::new(SegModelConfig::default(), 3).unwrap();
        let img = random_image(2, 64);
        let a = model.forward(&img, 0, RoutingPlan::Inference).unwrap();
        let b = model.forward(&img, 2, RoutingPlan::Inference).unwrap();
        assert_eq!(a.probs, b.probs);
        assert_ne!(a.routing, b.routing);
    }

    #[test]
    fn inference_is_deterministic() {
        let mut model = SegModel::new(SegModelConfig::default(), 4).unwrap();
        perturb(&mut model, 5);
        let img = random_image(3, 64);
        let a = model.forward(&img, 1, RoutingPlan::Inference).unwrap();
        let b = model.forward(&img, 1, RoutingPlan::Inference).unwrap();
        assert_eq!(a.probs, b.probs);
    }

    #[test]
    fn rejects_bad_shapes_and_regions() {
        let model = SegModel::new(SegModelConfig::default(), 0).unwrap();
        assert!(matches!(
            model.forward(&[0.0; 10], 0, RoutingPlan::Inference),
            Err(GramError::Shape(_))
        ));
        assert!(matches!(
            model.forward(&random_image(0, 64), 3, RoutingPlan::Inference),
            Err(GramError::Routing(_))
        ));
        assert!(matches!(model.check_tile_size(30), Err(GramError::Shape(_))));
        let bad = SegModelConfig {
            tile_size: 30,
            ..SegModelConfig::default()
        };
        assert!(matches!(SegModel::new(bad, 0), Err(GramError::Config { .. })));
        assert!(matches!(model.classify_region_internal(&[0.0; 3]), Err(GramError::Shape(_))));
    }

    /// Full-model gradient of `L_seg + 0.3 L_dom + 0.2 <mass, probe>` against
    /// central differences, routing held fixed.
    #[test]
    fn backward_matches_finite_differences() {
        for use_moe in [true, false] {
            let cfg = SegModelConfig { use_moe, ..tiny_config() };
            let mut model = SegModel::new(cfg, 9).unwrap();
            perturb(&mut model, 10);
            let img = random_image(11, 8);
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let mask: Vec<u8> = (0..64).map(|_| rng.random_range(0..2)).collect();
            let mass_probe: Vec<Vec<f64>> = (0..2).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let out = model.forward(&img, 1, RoutingPlan::Inference).unwrap();
            let fixed: Vec<Vec<usize>> = out.routing.iter().map(|r| r.expert_indices.clone()).collect();
            let objective = |m: &SegModel| {
                let o = m.forward(&img, 1, RoutingPlan::Fixed(&fixed)).unwrap();
                let (seg, _) = seg_loss_with_grad(&o.logits, &mask).unwrap();
                let rl = m.classify_region_internal(&o.pooled).unwrap();
                let (dom, _) = dom_loss_with_grad(&[rl], &[1]).unwrap();
                let mass: f64 = o
                    .routing
                    .iter()
                    .zip(&mass_probe)
                    .map(|(r, pr)| nn::dot(&r.expert_mass(3), pr))
                    .sum();
                seg + 0.3 * dom + 0.2 * mass
            };
            let (_, dlogits) = seg_loss_with_grad(&out.logits, &mask).unwrap();
            let rl = model.classify_region_internal(&out.pooled).unwrap();
            let (_, dr) = dom_loss_with_grad(&[rl], &[1]).unwrap();
            let dr: Vec<f64> = dr[0].iter().map(|v| 0.3 * v).collect();
            let mg: Vec<Vec<f64>> = mass_probe.iter().map(|v| v.iter().map(|x| 0.2 * x).collect()).collect();
            let mut grads = vec![0.0; model.num_params()];
            model.backward(&out.cache, &dlogits, Some(&dr), Some(&mg), &mut grads);
            let h = 1e-5;
            for i in 0..model.num_params() {
                let mut mp = model.clone();
                mp.params[i] += h;
                let mut mm = model.clone();
                mm.params[i] -= h;
                let num = (objective(&mp) - objective(&mm)) / (2.0 * h);
                let scale = grads[i].abs().max(num.abs()).max(1e-6);
                assert!(
                    (grads[i] - num).abs() / scale < 1e-4,
                    "moe={use_moe} param {} ({}): analytic {} numeric {num}",
                    i,
                    model.layout.entries().iter().find(|e| e.slot.range().contains(&i)).unwrap().name,
                    grads[i]
                );
            }
        }
    }
}
