//! Region-conditioned mixture-of-experts adapter block.
//!
//! Each block owns one linear gating network per source region and `E`
//! two-layer MLP experts. A token `z` of a sample from region `d` is routed as
//!
//! ```text
//! logits = z W_g[d] + b_g[d]  (+ N(0, sigma^2) noise while training)
//! S      = indices of the k largest logits (ties -> lowest index)
//! alpha  = softmax(logits[S])
//! out    = z + sum_{e in S} alpha_e * E_e(z),   E_e(z) = W2_e silu(W1_e z + b1_e) + b2_e
//! ```
//!
//! The second expert layer is zero-initialized so a fresh block is the
//! identity map.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{GramError, Result};
use crate::nn::{dot, silu, silu_grad};
use crate::params::{fill_normal, ParamLayout, Slot};
use crate::rng::StreamRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub noise_sigma: f64,
    pub token_dim: usize,
    pub expert_hidden_dim: usize,
    pub num_regions: usize,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            num_experts: 12,
            top_k: 2,
            noise_sigma: 0.1,
            token_dim: 24,
            expert_hidden_dim: 16,
            num_regions: 3,
        }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(GramError::config("num_experts", "must be >= 1"));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(GramError::config(
                "top_k",
                format!("must satisfy 1 <= k <= E = {}, got {}", self.num_experts, self.top_k),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(GramError::config("noise_sigma", "must be finite and >= 0"));
        }
        if self.num_regions == 0 {
            return Err(GramError::config("num_regions", "must be >= 1"));
        }
        if self.token_dim == 0 || self.expert_hidden_dim == 0 {
            return Err(GramError::config("token_dim", "dimensions must be >= 1"));
        }
        Ok(())
    }
}

/// Per-token expert selection: row-major `[tokens, k]` indices and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub top_k: usize,
    pub expert_indices: Vec<usize>,
    pub weights: Vec<f64>,
}

impl RoutingDecision {
    pub fn tokens(&self) -> usize {
        self.expert_indices.len() / self.top_k
    }

    pub fn token(&self, t: usize) -> (&[usize], &[f64]) {
        let r = t * self.top_k..(t + 1) * self.top_k;
        (&self.expert_indices[r.clone()], &self.weights[r])
    }

    /// Routing weight mass per expert, summed over tokens.
    pub fn expert_mass(&self, num_experts: usize) -> Vec<f64> {
        let mut mass = vec![0.0; num_experts];
        for (&e, &a) in self.expert_indices.iter().zip(&self.weights) {
            mass[e] += a;
        }
        mass
    }
}

/// Select the `k` largest logits per token and softmax over only those.
pub fn route_topk(logits: &[f64], num_experts: usize, k: usize) -> Result<RoutingDecision> {
    if k == 0 || k > num_experts {
        return Err(GramError::Routing(format!("top_k {k} not in 1..={num_experts}")));
    }
    if !logits.len().is_multiple_of(num_experts) {
        return Err(GramError::Routing(format!(
            "logit buffer of length {} is not a multiple of E = {num_experts}",
            logits.len()
        )));
    }
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(GramError::Routing(format!("non-finite gating logit {bad}")));
    }
    let tokens = logits.len() / num_experts;
    let mut expert_indices = Vec::with_capacity(tokens * k);
    let mut weights = Vec::with_capacity(tokens * k);
    let mut order: Vec<usize> = Vec::with_capacity(num_experts);
    for t in 0..tokens {
        let row = &logits[t * num_experts..(t + 1) * num_experts];
        order.clear();
        order.extend(0..num_experts);
        // Stable sort keeps lower indices first among equal logits.
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).expect("finite"));
        let selected = &order[..k];
        let max = row[selected[0]];
        let exps: Vec<f64> = selected.iter().map(|&e| (row[e] - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        expert_indices.extend_from_slice(selected);
        weights.extend(exps.iter().map(|v| v / sum));
    }
    Ok(RoutingDecision {
        top_k: k,
        expert_indices,
        weights,
    })
}

/// How a forward pass chooses experts.
pub enum Routing<'a> {
    /// Exact logits, no noise.
    Inference,
    /// Gaussian logit noise drawn from the given stream.
    Train(&'a mut StreamRng),
    /// Use these expert indices (`[tokens, k]`) with weights from the exact
    /// logits. Used to hold routing fixed for finite-difference checks.
    Fixed(&'a [usize]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeSlots {
    pub gate_w: Slot,
    pub gate_b: Slot,
    pub w1: Slot,
    pub b1: Slot,
    pub w2: Slot,
    pub b2: Slot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeBlock {
    pub config: MoeConfig,
    pub slots: MoeSlots,
}

/// Activations kept from the forward pass.
pub struct MoeCache {
    z: Vec<f64>,
    region: usize,
    pub decision: RoutingDecision,
    /// `[tokens, k, hidden]` pre-activations of the selected experts.
    pre: Vec<f64>,
    /// `[tokens, k, token_dim]` outputs of the selected experts.
    expert_out: Vec<f64>,
}

impl MoeBlock {
    pub fn new(config: MoeConfig, layout: &mut ParamLayout, prefix: &str) -> Result<Self> {
        config.validate()?;
        let (d, c, e, h) = (
            config.num_regions,
            config.token_dim,
            config.num_experts,
            config.expert_hidden_dim,
        );
        let slots = MoeSlots {
            gate_w: layout.alloc(format!("{prefix}.gate_w"), &[d, c, e]),
            gate_b: layout.alloc(format!("{prefix}.gate_b"), &[d, e]),
            w1: layout.alloc(format!("{prefix}.expert_w1"), &[e, c, h]),
            b1: layout.alloc(format!("{prefix}.expert_b1"), &[e, h]),
            w2: layout.alloc(format!("{prefix}.expert_w2"), &[e, h, c]),
            b2: layout.alloc(format!("{prefix}.expert_b2"), &[e, c]),
        };
        Ok(Self { config, slots })
    }

    /// Gating ~ N(0, 1/C), first expert layer ~ N(0, 1/C), second expert
    /// layer and all biases zero.
    pub fn init(&self, params: &mut [f64], rng: &mut StreamRng) {
        let std = 1.0 / (self.config.token_dim as f64).sqrt();
        fill_normal(self.slots.gate_w.of_mut(params), std, rng);
        self.slots.gate_b.of_mut(params).fill(0.0);
        fill_normal(self.slots.w1.of_mut(params), std, rng);
        self.slots.b1.of_mut(params).fill(0.0);
        self.slots.w2.of_mut(params).fill(0.0);
        self.slots.b2.of_mut(params).fill(0.0);
    }

    fn check_region(&self, region: usize) -> Result<()> {
        if region >= self.config.num_regions {
            return Err(GramError::Routing(format!(
                "region index {region} out of range for D = {}",
                self.config.num_regions
            )));
        }
        Ok(())
    }

    /// Exact gating logits `g_d(z)`, `[tokens, E]`.
    fn exact_logits(&self, params: &[f64], z: &[f64], region: usize) -> Vec<f64> {
        let (c, e) = (self.config.token_dim, self.config.num_experts);
        let w = self.slots.gate_w.chunk(region, self.config.num_regions).of(params);
        let b = self.slots.gate_b.chunk(region, self.config.num_regions).of(params);
        crate::nn::linear(z, z.len() / c, c, w, b, e)
    }

    /// Gating logits, with `N(0, sigma^2)` noise added when `noise` is given.
    pub fn gate_logits(
        &self,
        params: &[f64],
        z: &[f64],
        region: usize,
        noise: Option<&mut StreamRng>,
    ) -> Result<Vec<f64>> {
        self.check_region(region)?;
        if !z.len().is_multiple_of(self.config.token_dim) {
            return Err(GramError::Shape(format!(
                "token buffer of length {} is not a multiple of token_dim {}",
                z.len(),
                self.config.token_dim
            )));
        }
        let mut logits = self.exact_logits(params, z, region);
        if let Some(rng) = noise {
            let sigma = self.config.noise_sigma;
            if sigma > 0.0 {
                for v in &mut logits {
                    let eps: f64 = StandardNormal.sample(rng);
                    *v += sigma * eps;
                }
            }
        }
        Ok(logits)
    }

    pub fn forward(
        &self,
        params: &[f64],
        z: &[f64],
        region: usize,
        routing: Routing<'_>,
    ) -> Result<(Vec<f64>, MoeCache)> {
        let cfg = &self.config;
        let (c, e_count, h, k) = (cfg.token_dim, cfg.num_experts, cfg.expert_hidden_dim, cfg.top_k);
        let decision = match routing {
            Routing::Inference => {
                let logits = self.gate_logits(params, z, region, None)?;
                route_topk(&logits, e_count, k)?
            }
            Routing::Train(rng) => {
                let logits = self.gate_logits(params, z, region, Some(rng))?;
                route_topk(&logits, e_count, k)?
            }
            Routing::Fixed(indices) => {
                let logits = self.gate_logits(params, z, region, None)?;
                fixed_routing(&logits, e_count, k, indices)?
            }
        };
        let tokens = z.len() / c;
        let mut out = z.to_vec();
        let mut pre = vec![0.0; tokens * k * h];
        let mut expert_out = vec![0.0; tokens * k * c];
        let w1 = self.slots.w1.of(params);
        let b1 = self.slots.b1.of(params);
        let w2 = self.slots.w2.of(params);
        let b2 = self.slots.b2.of(params);
        let mut hidden = vec![0.0; h];
        for t in 0..tokens {
            let zt = &z[t * c..(t + 1) * c];
            let (idx, alpha) = decision.token(t);
            for (j, (&e, &a)) in idx.iter().zip(alpha).enumerate() {
                let pre_tj = &mut pre[(t * k + j) * h..(t * k + j + 1) * h];
                pre_tj.copy_from_slice(&b1[e * h..(e + 1) * h]);
                let w1e = &w1[e * c * h..(e + 1) * c * h];
                for (i, &zi) in zt.iter().enumerate() {
                    for (p, &w) in pre_tj.iter_mut().zip(&w1e[i * h..(i + 1) * h]) {
                        *p += zi * w;
                    }
                }
                for (hv, &p) in hidden.iter_mut().zip(pre_tj.iter()) {
                    *hv = silu(p);
                }
                let eo = &mut expert_out[(t * k + j) * c..(t * k + j + 1) * c];
                eo.copy_from_slice(&b2[e * c..(e + 1) * c]);
                let w2e = &w2[e * h * c..(e + 1) * h * c];
                for (m, &hv) in hidden.iter().enumerate() {
                    for (o, &w) in eo.iter_mut().zip(&w2e[m * c..(m + 1) * c]) {
                        *o += hv * w;
                    }
                }
                let ot = &mut out[t * c..(t + 1) * c];
                for (o, &v) in ot.iter_mut().zip(eo.iter()) {
                    *o += a * v;
                }
            }
        }
        Ok((
            out,
            MoeCache {
                z: z.to_vec(),
                region,
                decision,
                pre,
                expert_out,
            },
        ))
    }

    /// Backward pass. `mass_grad`, when given, is the gradient of an external
    /// objective with respect to this sample's per-expert routing mass
    /// (`sum_t alpha_{t,e}`), e.g. from the mutual-information loss.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &MoeCache,
        dy: &[f64],
        mass_grad: Option<&[f64]>,
        grads: &mut [f64],
        dz: &mut [f64],
    ) {
        let cfg = &self.config;
        let (c, e_count, h, k) = (cfg.token_dim, cfg.num_experts, cfg.expert_hidden_dim, cfg.top_k);
        let tokens = cache.z.len() / c;
        let w1 = self.slots.w1.of(params);
        let w2 = self.slots.w2.of(params);
        let gate_w = self.slots.gate_w.chunk(cache.region, cfg.num_regions).of(params);
        let gw_slot = self.slots.gate_w.chunk(cache.region, cfg.num_regions);
        let gb_slot = self.slots.gate_b.chunk(cache.region, cfg.num_regions);

        let mut d_alpha = vec![0.0; k];
        let mut dexp = vec![0.0; c];
        let mut dhid = vec![0.0; h];
        for t in 0..tokens {
            let zt = &cache.z[t * c..(t + 1) * c];
            let dyt = &dy[t * c..(t + 1) * c];
            for (a, b) in dz[t * c..(t + 1) * c].iter_mut().zip(dyt) {
                *a += b;
            }
            let (idx, alpha) = cache.decision.token(t);
            for (j, (&e, &a)) in idx.iter().zip(alpha).enumerate() {
                let eo = &cache.expert_out[(t * k + j) * c..(t * k + j + 1) * c];
                d_alpha[j] = dot(dyt, eo) + mass_grad.map_or(0.0, |g| g[e]);
                if a == 0.0 {
                    continue;
                }
                for (d, &g) in dexp.iter_mut().zip(dyt) {
                    *d = a * g;
                }
                let pre = &cache.pre[(t * k + j) * h..(t * k + j + 1) * h];
                // Second layer: out = silu(pre) W2 + b2.
                {
                    let b2g = &mut grads[self.slots.b2.offset + e * c..self.slots.b2.offset + (e + 1) * c];
                    for (g, &d) in b2g.iter_mut().zip(&dexp) {
                        *g += d;
                    }
                }
                let w2e = &w2[e * h * c..(e + 1) * h * c];
                let w2g_off = self.slots.w2.offset + e * h * c;
                for m in 0..h {
                    let hv = silu(pre[m]);
                    let row = &mut grads[w2g_off + m * c..w2g_off + (m + 1) * c];
                    for (g, &d) in row.iter_mut().zip(&dexp) {
                        *g += hv * d;
                    }
                    dhid[m] = dot(&w2e[m * c..(m + 1) * c], &dexp) * silu_grad(pre[m]);
                }
                // First layer: pre = z W1 + b1.
                {
                    let b1g = &mut grads[self.slots.b1.offset + e * h..self.slots.b1.offset + (e + 1) * h];
                    for (g, &d) in b1g.iter_mut().zip(&dhid) {
                        *g += d;
                    }
                }
                let w1e = &w1[e * c * h..(e + 1) * c * h];
                let w1g_off = self.slots.w1.offset + e * c * h;
                let dzt = &mut dz[t * c..(t + 1) * c];
                for i in 0..c {
                    let row = &mut grads[w1g_off + i * h..w1g_off + (i + 1) * h];
                    for (g, &d) in row.iter_mut().zip(&dhid) {
                        *g += zt[i] * d;
                    }
                    dzt[i] += dot(&w1e[i * h..(i + 1) * h], &dhid);
                }
            }
            // Softmax over the selected logits.
            let mean: f64 = alpha.iter().zip(&d_alpha).map(|(a, g)| a * g).sum();
            for (j, &e) in idx.iter().enumerate() {
                let dl = alpha[j] * (d_alpha[j] - mean);
                if dl == 0.0 {
                    continue;
                }
                grads[gb_slot.offset + e] += dl;
                let dzt = &mut dz[t * c..(t + 1) * c];
                for i in 0..c {
                    grads[gw_slot.offset + i * e_count + e] += zt[i] * dl;
                    dzt[i] += gate_w[i * e_count + e] * dl;
                }
            }
        }
    }
}

fn fixed_routing(logits: &[f64], num_experts: usize, k: usize, indices: &[usize]) -> Result<RoutingDecision> {
    let tokens = logits.len() / num_experts;
    if indices.len() != tokens * k {
        return Err(GramError::Routing(format!(
            "fixed routing has {} indices, expected {}",
            indices.len(),
            tokens * k
        )));
    }
    let mut weights = Vec::with_capacity(indices.len());
    for t in 0..tokens {
        let sel = &indices[t * k..(t + 1) * k];
        if sel.iter().any(|&e| e >= num_experts) {
            return Err(GramError::Routing("fixed routing index out of range".into()));
        }
        let vals: Vec<f64> = sel.iter().map(|&e| logits[t * num_experts + e]).collect();
        weights.extend(crate::nn::softmax(&vals));
    }
    Ok(RoutingDecision {
        top_k: k,
        expert_indices: indices.to_vec(),
        weights,
    })
}

/// Joint distribution `P(d, e)` of region and routing mass for one MoE layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub num_regions: usize,
    pub num_experts: usize,
    /// Row-major `[D, E]`.
    pub joint: Vec<f64>,
}

impl RoutingStats {
    pub fn get(&self, d: usize, e: usize) -> f64 {
        self.joint[d * self.num_experts + e]
    }

    pub fn region_marginal(&self) -> Vec<f64> {
        self.joint.chunks(self.num_experts).map(|r| r.iter().sum()).collect()
    }

    pub fn expert_marginal(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.num_experts];
        for row in self.joint.chunks(self.num_experts) {
            for (a, b) in m.iter_mut().zip(row) {
                *a += b;
            }
        }
        m
    }

    /// Build from per-sample expert masses (`sum_t alpha_{t,e}`) and token
    /// counts; `joint[d][e] = sum_{s: d_s = d} mass_s[e] / sum_s tokens_s`.
    pub fn from_masses(
        masses: &[Vec<f64>],
        tokens: &[usize],
        regions: &[usize],
        num_regions: usize,
        num_experts: usize,
    ) -> Result<Self> {
        let total: usize = tokens.iter().sum();
        if masses.is_empty() || total == 0 {
            return Err(GramError::Stats("empty batch: no routed tokens".into()));
        }
        let mut joint = vec![0.0; num_regions * num_experts];
        for (mass, &d) in masses.iter().zip(regions) {
            if d >= num_regions {
                return Err(GramError::Stats(format!("region {d} out of range for D = {num_regions}")));
            }
            for (e, &m) in mass.iter().enumerate() {
                joint[d * num_experts + e] += m;
            }
        }
        for v in &mut joint {
            *v /= total as f64;
        }
        Ok(Self {
            num_regions,
            num_experts,
            joint,
        })
    }
}

/// Per-layer joint routing statistics over a batch.
///
/// `decisions[s][l]` is the routing of sample `s` at MoE layer `l`;
/// `regions[s]` is the sample's region.
pub fn accumulate_stats(
    decisions: &[Vec<RoutingDecision>],
    regions: &[usize],
    num_regions: usize,
    num_experts: usize,
) -> Result<Vec<RoutingStats>> {
    if decisions.is_empty() {
        return Err(GramError::Stats("empty batch".into()));
    }
    if decisions.len() != regions.len() {
        return Err(GramError::Stats(format!(
            "{} routed samples but {} region labels",
            decisions.len(),
            regions.len()
        )));
    }
    let layers = decisions[0].len();
    (0..layers)
        .map(|l| {
            let masses: Vec<Vec<f64>> = decisions.iter().map(|s| s[l].expert_mass(num_experts)).collect();
            let tokens: Vec<usize> = decisions.iter().map(|s| s[l].tokens()).collect();
            RoutingStats::from_masses(&masses, &tokens, regions, num_regions, num_experts)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn block(cfg: MoeConfig, seed: u64) -> (MoeBlock, Vec<f64>) {
        let mut layout = ParamLayout::new();
        let b = MoeBlock::new(cfg, &mut layout, "moe").unwrap();
        let mut params = vec![0.0; layout.len()];
        b.init(&mut params, &mut stream(seed, "test", &[]));
        (b, params)
    }

    fn small_cfg() -> MoeConfig {
        MoeConfig {
            num_experts: 4,
            top_k: 2,
            noise_sigma: 0.1,
            token_dim: 3,
            expert_hidden_dim: 5,
            num_regions: 2,
        }
    }

    fn randomize_w2(b: &MoeBlock, params: &mut [f64], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in b.slots.w2.of_mut(params) {
            *v = rng.random_range(-1.0..1.0);
        }
        for v in b.slots.b2.of_mut(params) {
            *v = rng.random_range(-0.5..0.5);
        }
    }

    #[test]
    fn topk_worked_example() {
        let d = route_topk(&[2.0, 1.0, 0.5], 3, 2).unwrap();
        assert_eq!(d.expert_indices, vec![0, 1]);
        let e2 = 2f64.exp();
        let e1 = 1f64.exp();
        assert!((d.weights[0] - e2 / (e2 + e1)).abs() < 1e-12);
        assert!((d.weights[0] - 0.7311).abs() < 1e-4);
        assert!((d.weights[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn topk_ties_and_singleton() {
        let d = route_topk(&[0.3; 4], 4, 2).unwrap();
        assert_eq!(d.expert_indices, vec![0, 1]);
        assert_eq!(d.weights, vec![0.5, 0.5]);
        let d = route_topk(&[0.1, 0.9, -3.0], 3, 1).unwrap();
        assert_eq!(d.expert_indices, vec![1]);
        assert_eq!(d.weights, vec![1.0]);
    }

    #[test]
    fn topk_rejects_bad_input() {
        assert!(matches!(route_topk(&[f64::NAN, 1.0], 2, 1), Err(GramError::Routing(_))));
        assert!(matches!(route_topk(&[1.0, 1.0], 2, 3), Err(GramError::Routing(_))));
    }

    #[test]
    fn gate_logits_noise_contract() {
        let (b, params) = block(small_cfg(), 1);
        let z = [0.5, -0.2, 0.1, 1.0, 0.0, -1.0];
        let exact = b.gate_logits(&params, &z, 1, None).unwrap();
        let mut rng = stream(3, "noise", &[]);
        let noisy = b.gate_logits(&params, &z, 1, Some(&mut rng)).unwrap();
        assert_ne!(exact, noisy);
        let mut rng = stream(3, "noise", &[]);
        assert_eq!(noisy, b.gate_logits(&params, &z, 1, Some(&mut rng)).unwrap());

        let (b0, params0) = block(MoeConfig { noise_sigma: 0.0, ..small_cfg() }, 1);
        let mut rng = stream(3, "noise", &[]);
        assert_eq!(
            b0.gate_logits(&params0, &z, 0, Some(&mut rng)).unwrap(),
            b0.gate_logits(&params0, &z, 0, None).unwrap()
        );
        assert!(matches!(b.gate_logits(&params, &z, 2, None), Err(GramError::Routing(_))));
    }

    #[test]
    fn zero_init_block_is_identity() {
        let (b, params) = block(small_cfg(), 2);
        let z = [0.5, -0.2, 0.1, 1.0, 0.0, -1.0];
        let mut rng = stream(1, "noise", &[]);
        let (out, _) = b.forward(&params, &z, 0, Routing::Train(&mut rng)).unwrap();
        assert_eq!(out, z.to_vec());
    }

    #[test]
    fn hand_computed_two_expert_mixture() {
        // One token, two linear experts realised through silu-free paths:
        // W1 = 0 so hidden = silu(b1) is a constant, and the expert output is
        // the affine map b2 + silu(b1) W2.
        let cfg = MoeConfig {
            num_experts: 2,
            top_k: 2,
            noise_sigma: 0.0,
            token_dim: 2,
            expert_hidden_dim: 1,
            num_regions: 1,
        };
        let mut layout = ParamLayout::new();
        let b = MoeBlock::new(cfg, &mut layout, "m").unwrap();
        let mut p = vec![0.0; layout.len()];
        p[b.slots.gate_w.range()].copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        p[b.slots.b1.range()].copy_from_slice(&[1.0, 2.0]);
        p[b.slots.w2.range()].copy_from_slice(&[1.0, -1.0, 0.5, 2.0]);
        let z = [0.3, -0.4];
        let (out, cache) = b.forward(&p, &z, 0, Routing::Inference).unwrap();
        let la = [0.3f64, -0.4];
        let ea = la[0].exp();
        let eb = la[1].exp();
        let (a0, a1) = (ea / (ea + eb), eb / (ea + eb));
        assert_eq!(cache.decision.expert_indices, vec![0, 1]);
        let h0 = silu(1.0);
        let h1 = silu(2.0);
        let expect = [
            z[0] + a0 * h0 * 1.0 + a1 * h1 * 0.5,
            z[1] - a0 * h0 + a1 * h1 * 2.0,
        ];
        for i in 0..2 {
            assert!((out[i] - expect[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_topk_equals_full_softmax_mixture() {
        let cfg = MoeConfig {
            top_k: 4,
            noise_sigma: 0.0,
            ..small_cfg()
        };
        let (b, mut params) = block(cfg.clone(), 5);
        randomize_w2(&b, &mut params, 6);
        let z = [0.2, 0.7, -0.3];
        let (out, _) = b.forward(&params, &z, 1, Routing::Inference).unwrap();
        let logits = b.gate_logits(&params, &z, 1, None).unwrap();
        let alpha = crate::nn::softmax(&logits);
        let mut expect = z.to_vec();
        for (e, a) in alpha.iter().enumerate() {
            let (_, c) = b.forward(&params, &z, 1, Routing::Fixed(&[e, (e + 1) % 4, (e + 2) % 4, (e + 3) % 4])).unwrap();
            let eo = &c.expert_out[0..3];
            for i in 0..3 {
                expect[i] += a * eo[i];
            }
        }
        for i in 0..3 {
            assert!((out[i] - expect[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn stats_worked_examples() {
        // Everything routes to expert 0.
        let full0 = RoutingDecision {
            top_k: 1,
            expert_indices: vec![0, 0],
            weights: vec![1.0, 1.0],
        };
        let stats = accumulate_stats(&[vec![full0.clone()], vec![full0.clone()], vec![full0]], &[0, 1, 1], 2, 3).unwrap();
        let s = &stats[0];
        assert!((s.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.get(1, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.expert_marginal()[1..], [0.0, 0.0]);

        let uniform = RoutingDecision {
            top_k: 2,
            expert_indices: vec![1, 3],
            weights: vec![0.5, 0.5],
        };
        let stats = accumulate_stats(&[vec![uniform]], &[0], 1, 4).unwrap();
        assert_eq!(stats[0].joint, vec![0.0, 0.5, 0.0, 0.5]);
        assert!(matches!(accumulate_stats(&[], &[], 1, 4), Err(GramError::Stats(_))));
    }

    #[test]
    fn stats_match_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (d_count, e_count, k) = (2, 5, 2);
        let mut decisions = Vec::new();
        let mut regions = Vec::new();
        for s in 0..6 {
            let tokens = 3 + s % 2;
            let logits: Vec<f64> = (0..tokens * e_count).map(|_| rng.random_range(-2.0..2.0)).collect();
            decisions.push(vec![route_topk(&logits, e_count, k).unwrap()]);
            regions.push(s % d_count);
        }
        let stats = accumulate_stats(&decisions, &regions, d_count, e_count).unwrap();
        // Oracle: visit every (sample, token, expert) triple.
        let mut oracle = vec![vec![0.0; e_count]; d_count];
        let mut total = 0.0;
        for (s, dec) in decisions.iter().enumerate() {
            let dec = &dec[0];
            for t in 0..dec.tokens() {
                total += 1.0;
                for e in 0..e_count {
                    for j in 0..k {
                        if dec.expert_indices[t * k + j] == e {
                            oracle[regions[s]][e] += dec.weights[t * k + j];
                        }
                    }
                }
            }
        }
        for d in 0..d_count {
            for e in 0..e_count {
                assert!((stats[0].get(d, e) - oracle[d][e] / total).abs() < 1e-14);
            }
        }
        assert!((stats[0].joint.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn expert_permutation_leaves_output_unchanged() {
        let cfg = MoeConfig { noise_sigma: 0.0, ..small_cfg() };
        let (b, mut params) = block(cfg.clone(), 9);
        randomize_w2(&b, &mut params, 10);
        let perm = [2usize, 0, 3, 1];
        let mut permuted = params.clone();
        let (c, e, h, d) = (3, 4, 5, 2);
        for new in 0..e {
            let old = perm[new];
            for r in 0..d {
                for i in 0..c {
                    permuted[b.slots.gate_w.offset + (r * c + i) * e + new] = params[b.slots.gate_w.offset + (r * c + i) * e + old];
                }
                permuted[b.slots.gate_b.offset + r * e + new] = params[b.slots.gate_b.offset + r * e + old];
            }
            for (slot, size) in [(b.slots.w1, c * h), (b.slots.b1, h), (b.slots.w2, h * c), (b.slots.b2, c)] {
                let src = slot.offset + old * size;
                let dst = slot.offset + new * size;
                permuted[dst..dst + size].copy_from_slice(&params[src..src + size]);
            }
        }
        let z = [0.4, -0.1, 0.9, -0.6, 0.2, 0.3];
        let (a, _) = b.forward(&params, &z, 1, Routing::Inference).unwrap();
        let (bq, _) = b.forward(&permuted, &z, 1, Routing::Inference).unwrap();
        for (x, y) in a.iter().zip(&bq) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    /// Finite-difference check of the block backward with routing held fixed.
    #[test]
    fn backward_matches_finite_differences() {
        let cfg = MoeConfig { noise_sigma: 0.0, ..small_cfg() };
        let (b, mut params) = block(cfg.clone(), 12);
        randomize_w2(&b, &mut params, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let z: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let probe: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mass_probe: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, cache) = b.forward(&params, &z, 1, Routing::Inference).unwrap();
        let fixed = cache.decision.expert_indices.clone();
        let objective = |p: &[f64], z: &[f64]| {
            let (out, c) = b.forward(p, z, 1, Routing::Fixed(&fixed)).unwrap();
            dot(&out, &probe) + dot(&c.decision.expert_mass(4), &mass_probe)
        };
        let mut grads = vec![0.0; params.len()];
        let mut dz = vec![0.0; z.len()];
        b.backward(&params, &cache, &probe, Some(&mass_probe), &mut grads, &mut dz);
        let h = 1e-5;
        for i in 0..params.len() {
            let mut pp = params.clone();
            pp[i] += h;
            let mut pm = params.clone();
            pm[i] -= h;
            let num = (objective(&pp, &z) - objective(&pm, &z)) / (2.0 * h);
            let scale = grads[i].abs().max(num.abs()).max(1e-6);
            assert!((grads[i] - num).abs() / scale < 1e-4, "param {i}: {} vs {num}", grads[i]);
        }
        for i in 0..z.len() {
            let mut zp = z.clone();
            zp[i] += h;
            let mut zm = z.clone();
            zm[i] -= h;
            let num = (objective(&params, &zp) - objective(&params, &zm)) / (2.0 * h);
            assert!((dz[i] - num).abs() < 1e-8, "dz {i}: {} vs {num}", dz[i]);
        }
    }
}
