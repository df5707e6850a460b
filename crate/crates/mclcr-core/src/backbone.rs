//! Desk-scale separable-convolution backbone.
//!
//! A 3x3 stem followed by B blocks of depthwise 3x3 -> pointwise 1x1 ->
//! channel layer norm -> GELU -> optional 2x2 max pool. The channel norm
//! plays the role batch norm plays in the full-size networks this stands
//! in for; without it the unnormalized style correlations downstream make
//! training diverge at the pinned learning rate. The activations after
//! blocks 1-3 feed the style branch; the final block is globally average
//! pooled into the global feature vector.

use crate::params::{ParamBinding, ParamMap, Value};
use crate::tensor::{Graph, NodeId, TensorError};

#[derive(Debug, Clone)]
pub struct BackboneConfig {
    /// Output channels per block, strictly increasing.
    pub channel_plan: Vec<usize>,
    /// Square input extent in pixels.
    pub input_extent: usize,
    /// Whether each block ends with a 2x2 max pool.
    pub downsample: Vec<bool>,
}

impl BackboneConfig {
    /// Default plan [64,128,256,512,1024] divided by `divisor`, every block
    /// downsampling.
    pub fn with_divisor(input_extent: usize, divisor: usize) -> Self {
        let channel_plan = [64, 128, 256, 512, 1024]
            .iter()
            .map(|&c| (c / divisor).max(1))
            .collect::<Vec<_>>();
        let downsample = vec![true; channel_plan.len()];
        Self {
            channel_plan,
            input_extent,
            downsample,
        }
    }

    pub fn stem_channels(&self) -> usize {
        (self.channel_plan[0] / 2).max(1)
    }

    pub fn blocks(&self) -> usize {
        self.channel_plan.len()
    }

    pub fn global_feature_len(&self) -> usize {
        *self.channel_plan.last().unwrap()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.blocks() < 4 {
            return Err(format!("need at least 4 blocks, got {}", self.blocks()));
        }
        if !self.channel_plan.windows(2).all(|w| w[0] < w[1]) {
            return Err(format!(
                "channel plan must be strictly increasing: {:?}",
                self.channel_plan
            ));
        }
        if self.downsample.len() != self.blocks() {
            return Err("downsample flags must match block count".into());
        }
        let mut extent = self.input_extent;
        for (i, &down) in self.downsample.iter().enumerate() {
            if down {
                if extent % 2 != 0 || extent < 2 {
                    return Err(format!(
                        "extent {extent} cannot be pooled at block {}",
                        i + 1
                    ));
                }
                extent /= 2;
            }
        }
        Ok(())
    }

    /// Receptive field of the activation after each block, from standard
    /// kernel/stride composition.
    pub fn receptive_fields(&self) -> Vec<usize> {
        let mut rf = 3usize; // stem 3x3
        let mut jump = 1usize;
        let mut out = Vec::with_capacity(self.blocks());
        for &down in &self.downsample {
            rf += 2 * jump; // depthwise 3x3
            if down {
                rf += jump; // 2x2 pool
                jump *= 2;
            }
            out.push(rf);
        }
        out
    }
}

/// Intermediate taps plus the pooled global feature.
#[derive(Debug, Clone, Copy)]
pub struct BackboneActivations {
    pub b1: NodeId,
    pub b2: NodeId,
    pub b3: NodeId,
    pub gf: NodeId,
}

/// Fan-in-scaled Gaussian weights, zero biases. Deterministic per seed.
pub fn init_backbone(cfg: &BackboneConfig, seed: u64) -> Vec<(String, Value)> {
    let mut rng = crate::params::rng_for(seed);
    let mut out = Vec::new();
    let stem_c = cfg.stem_channels();
    out.push((
        "backbone.stem.w".to_string(),
        Value::fan_in(&mut rng, &[3, 3, 3, stem_c], 3 * 3 * 3),
    ));
    out.push(("backbone.stem.b".to_string(), Value::zeros(&[stem_c])));
    out.push(("backbone.stem.ln.g".to_string(), Value::ones(&[stem_c])));
    out.push(("backbone.stem.ln.b".to_string(), Value::zeros(&[stem_c])));
    let mut cin = stem_c;
    for (i, &cout) in cfg.channel_plan.iter().enumerate() {
        let b = i + 1;
        out.push((
            format!("backbone.b{b}.dw.w"),
            Value::fan_in(&mut rng, &[3, 3, cin, 1], 3 * 3),
        ));
        out.push((format!("backbone.b{b}.dw.b"), Value::zeros(&[cin])));
        out.push((
            format!("backbone.b{b}.pw.w"),
            Value::fan_in(&mut rng, &[1, 1, cin, cout], cin),
        ));
        out.push((format!("backbone.b{b}.pw.b"), Value::zeros(&[cout])));
        out.push((format!("backbone.b{b}.ln.g"), Value::ones(&[cout])));
        out.push((format!("backbone.b{b}.ln.b"), Value::zeros(&[cout])));
        cin = cout;
    }
    out
}

fn bias_add(g: &mut Graph, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
    g.add_chan_vec(x, bias)
}

/// Per-site normalization over the channel axis with a learned affine.
fn channel_norm(
    g: &mut Graph,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
) -> Result<NodeId, TensorError> {
    g.layer_norm(x, gamma, beta, 1e-5)
}

pub fn backbone_forward(
    g: &mut Graph,
    binding: &mut ParamBinding,
    image: NodeId,
    cfg: &BackboneConfig,
) -> Result<BackboneActivations, TensorError> {
    let stem_w = binding.leaf(g, "backbone.stem.w")?;
    let stem_b = binding.leaf(g, "backbone.stem.b")?;
    let (stem_g, stem_bn) = binding.ln_pair(g, "backbone.stem.ln")?;
    let stem = g.conv2d(image, stem_w, 1, 1, false)?;
    let stem = bias_add(g, stem, stem_b)?;
    let stem = channel_norm(g, stem, stem_g, stem_bn)?;
    let mut x = g.gelu(stem);

    let mut taps = Vec::with_capacity(3);
    for (i, &down) in cfg.downsample.iter().enumerate() {
        let b = i + 1;
        let dw_w = binding.leaf(g, &format!("backbone.b{b}.dw.w"))?;
        let dw_b = binding.leaf(g, &format!("backbone.b{b}.dw.b"))?;
        let pw_w = binding.leaf(g, &format!("backbone.b{b}.pw.w"))?;
        let pw_b = binding.leaf(g, &format!("backbone.b{b}.pw.b"))?;
        let (ln_g, ln_b) = binding.ln_pair(g, &format!("backbone.b{b}.ln"))?;
        let dw = g.conv2d(x, dw_w, 1, 1, true)?;
        let dw = bias_add(g, dw, dw_b)?;
        let pw = g.conv2d(dw, pw_w, 1, 0, false)?;
        let pw = bias_add(g, pw, pw_b)?;
        let normed = channel_norm(g, pw, ln_g, ln_b)?;
        let act = g.gelu(normed);
        x = if down { g.max_pool2(act)? } else { act };
        if taps.len() < 3 {
            taps.push(x);
        }
    }
    let gf = g.global_avg_pool(x)?;
    Ok(BackboneActivations {
        b1: taps[0],
        b2: taps[1],
        b3: taps[2],
        gf,
    })
}

/// Binds an image as a constant input leaf, pixels scaled to [0,1].
pub fn image_input(g: &mut Graph, image: &crate::image::Image) -> Result<NodeId, TensorError> {
    debug_assert_eq!(image.channels, 3);
    let data: Vec<f64> = image.pixels.iter().map(|&v| v as f64 / 255.0).collect();
    g.constant(&[image.height, image.width, 3], data)
}

/// Initializes a map with just the backbone parameters (tests and
/// standalone use).
pub fn backbone_param_map(cfg: &BackboneConfig, seed: u64) -> ParamMap {
    init_backbone(cfg, seed).into_iter().collect()
}
