//! External region classifier `h_psi`: three stride-2 3x3 convolutions with
//! SiLU, global average pooling, layer norm and a linear layer to D logits.
//! Shares no parameters with the segmentation network so it can stay frozen
//! while the latter adapts.

use serde::{Deserialize, Serialize};

use crate::error::{GramError, Result};
use crate::nn::{self, Conv3x3, LayerNormCache};
use crate::params::{fill_normal, ParamLayout, Slot};
use crate::rng::{stream, streams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionClassifierConfig {
    pub num_regions: usize,
    pub channels: [usize; 3],
}

impl Default for RegionClassifierConfig {
    fn default() -> Self {
        Self {
            num_regions: 3,
            channels: [8, 16, 16],
        }
    }
}

impl RegionClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_regions < 2 {
            return Err(GramError::config("num_regions", "region classifier needs at least 2 regions"));
        }
        if self.channels.contains(&0) {
            return Err(GramError::config("channels", "every conv layer needs at least one channel"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ConvSlots {
    k: Slot,
    b: Slot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionClassifier {
    pub config: RegionClassifierConfig,
    pub layout: ParamLayout,
    pub params: Vec<f64>,
    /// Set by the trainer; inference before training is refused.
    pub trained: bool,
    convs: Vec<ConvSlots>,
    ln_g: Slot,
    ln_b: Slot,
    fc_w: Slot,
    fc_b: Slot,
}

pub struct ClassifierCache {
    /// Input and post-activation of every conv layer, with spatial sizes.
    inputs: Vec<(Vec<f64>, usize)>,
    pre: Vec<Vec<f64>>,
    ln: LayerNormCache,
    normed: Vec<f64>,
    last_size: usize,
}

impl RegionClassifier {
    pub fn new(config: RegionClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamLayout::new();
        let mut convs = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in config.channels.iter().enumerate() {
            convs.push(ConvSlots {
                k: layout.alloc(format!("conv{i}.k"), &[c_out, c_in, 3, 3]),
                b: layout.alloc(format!("conv{i}.b"), &[c_out]),
            });
            c_in = c_out;
        }
        let ln_g = layout.alloc("ln.g", &[c_in]);
        let ln_b = layout.alloc("ln.b", &[c_in]);
        let fc_w = layout.alloc("fc.w", &[c_in, config.num_regions]);
        let fc_b = layout.alloc("fc.b", &[config.num_regions]);
        let mut params = vec![0.0; layout.len()];
        let mut rng = stream(seed, streams::CLASSIFIER_INIT, &[]);
        let mut fan_in = 3;
        for (slots, &c_out) in convs.iter().zip(&config.channels) {
            fill_normal(slots.k.of_mut(&mut params), (2.0 / (9 * fan_in) as f64).sqrt(), &mut rng);
            fan_in = c_out;
        }
        ln_g.of_mut(&mut params).fill(1.0);
        fill_normal(fc_w.of_mut(&mut params), 1.0 / (fan_in as f64).sqrt(), &mut rng);
        Ok(Self {
            config,
            layout,
            params,
            trained: false,
            convs,
            ln_g,
            ln_b,
            fc_w,
            fc_b,
        })
    }

    fn conv(&self, i: usize) -> Conv3x3 {
        Conv3x3 {
            c_in: if i == 0 { 3 } else { self.config.channels[i - 1] },
            c_out: self.config.channels[i],
            stride: 2,
        }
    }

    /// Logits for a channel-major `[3, size, size]` image.
    pub fn forward(&self, image: &[f64], size: usize) -> Result<(Vec<f64>, ClassifierCache)> {
        if size == 0 || image.len() != 3 * size * size {
            return Err(GramError::Shape(format!(
                "image buffer of {} values does not match a 3x{size}x{size} tile",
                image.len()
            )));
        }
        let p = &self.params;
        let mut x: Vec<f64> = image.iter().map(|v| 2.0 * v - 1.0).collect();
        let mut s = size;
        let mut inputs = Vec::new();
        let mut pre = Vec::new();
        for (i, slots) in self.convs.iter().enumerate() {
            let conv = self.conv(i);
            let u = conv.forward(&x, s, s, slots.k.of(p), slots.b.of(p));
            inputs.push((x, s));
            x = u.iter().map(|&v| nn::silu(v)).collect();
            pre.push(u);
            s = conv.out_size(s);
        }
        let ch = *self.config.channels.last().unwrap();
        let n = s * s;
        let pooled: Vec<f64> = (0..ch).map(|c| x[c * n..(c + 1) * n].iter().sum::<f64>() / n as f64).collect();
        let (normed, ln) = nn::layer_norm(&pooled, 1, ch, self.ln_g.of(p), self.ln_b.of(p));
        let logits = nn::linear(&normed, 1, ch, self.fc_w.of(p), self.fc_b.of(p), self.config.num_regions);
        Ok((
            logits,
            ClassifierCache {
                inputs,
                pre,
                ln,
                normed,
                last_size: s,
            },
        ))
    }

    pub fn backward(&self, cache: &ClassifierCache, dlogits: &[f64], grads: &mut [f64]) {
        let p = &self.params;
        let ch = *self.config.channels.last().unwrap();
        let mut dnormed = vec![0.0; ch];
        {
            let (lo, hi) = grads.split_at_mut(self.fc_b.offset);
            nn::linear_backward(
                &cache.normed,
                1,
                ch,
                self.fc_w.of(p),
                self.config.num_regions,
                dlogits,
                &mut lo[self.fc_w.range()],
                &mut hi[..self.fc_b.len],
                Some(&mut dnormed),
            );
        }
        let mut dpooled = vec![0.0; ch];
        {
            let (lo, hi) = grads.split_at_mut(self.ln_b.offset);
            nn::layer_norm_backward(
                &cache.ln,
                1,
                ch,
                self.ln_g.of(p),
                &dnormed,
                &mut lo[self.ln_g.range()],
                &mut hi[..self.ln_b.len],
                &mut dpooled,
            );
        }
        let n = cache.last_size * cache.last_size;
        let mut dx: Vec<f64> = (0..ch * n).map(|i| dpooled[i / n] / n as f64).collect();
        for i in (0..self.convs.len()).rev() {
            let du: Vec<f64> = dx.iter().zip(&cache.pre[i]).map(|(d, &u)| d * nn::silu_grad(u)).collect();
            let (x, s) = &cache.inputs[i];
            let slots = &self.convs[i];
            let conv = self.conv(i);
            let mut dxin = if i > 0 { vec![0.0; x.len()] } else { Vec::new() };
            let (lo, hi) = grads.split_at_mut(slots.b.offset);
            conv.backward(
                x,
                *s,
                *s,
                slots.k.of(p),
                &du,
                &mut lo[slots.k.range()],
                &mut hi[..slots.b.len],
                if i > 0 { Some(&mut dxin) } else { None },
            );
            dx = dxin;
        }
    }

    /// Region probabilities for one tile image. Requires a trained classifier.
    pub fn classify_region_external(&self, image: &[f64], size: usize) -> Result<Vec<f64>> {
        if !self.trained {
            return Err(GramError::Usage("region classifier has not been trained".into()));
        }
        let (logits, _) = self.forward(image, size)?;
        Ok(nn::softmax(&logits))
    }
}
