//! Two-layer MLP-Mixer branch for one token stream.
//!
//! Each layer mixes tokens (a shared MLP over the patch axis, applied per
//! channel on the transposed matrix) and then channels (a shared MLP over
//! the channel axis, applied per patch), both with GELU and residual
//! connections. The stream output is a final layer norm followed by
//! global average pooling over the token axis.

use crate::params::{ParamBinding, Value};
use crate::tensor::{Graph, NodeId, TensorError};

#[derive(Debug, Clone, Copy)]
pub struct MixerConfig {
    pub tokens: usize,
    pub dim: usize,
    /// Token-mixing hidden width (defaults to `tokens`).
    pub hidden_tokens: usize,
    /// Channel-mixing hidden width (defaults to `dim`).
    pub hidden_channels: usize,
    pub layers: usize,
    pub ln_eps: f64,
}

impl MixerConfig {
    pub fn new(tokens: usize, dim: usize) -> Self {
        Self {
            tokens,
            dim,
            hidden_tokens: tokens,
            hidden_channels: dim,
            layers: 2,
            ln_eps: 1e-5,
        }
    }
}

pub struct MixerLayerParams {
    pub ln1: (NodeId, NodeId),
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub ln2: (NodeId, NodeId),
    pub w3: NodeId,
    pub b3: NodeId,
    pub w4: NodeId,
    pub b4: NodeId,
}

pub struct MixerParams {
    pub layers: Vec<MixerLayerParams>,
    pub final_ln: (NodeId, NodeId),
}

pub fn init_mixer(
    prefix: &str,
    cfg: &MixerConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<(String, Value)> {
    let (n, d) = (cfg.tokens, cfg.dim);
    let (ht, hc) = (cfg.hidden_tokens, cfg.hidden_channels);
    let mut out = Vec::new();
    for l in 0..cfg.layers {
        let p = format!("{prefix}.l{l}");
        out.push((format!("{p}.ln1.g"), Value::ones(&[d])));
        out.push((format!("{p}.ln1.b"), Value::zeros(&[d])));
        out.push((format!("{p}.w1"), Value::fan_in(rng, &[n, ht], n)));
        out.push((format!("{p}.b1"), Value::zeros(&[ht])));
        out.push((format!("{p}.w2"), Value::fan_in(rng, &[ht, n], ht)));
        out.push((format!("{p}.b2"), Value::zeros(&[n])));
        out.push((format!("{p}.ln2.g"), Value::ones(&[d])));
        out.push((format!("{p}.ln2.b"), Value::zeros(&[d])));
        out.push((format!("{p}.w3"), Value::fan_in(rng, &[d, hc], d)));
        out.push((format!("{p}.b3"), Value::zeros(&[hc])));
        out.push((format!("{p}.w4"), Value::fan_in(rng, &[hc, d], hc)));
        out.push((format!("{p}.b4"), Value::zeros(&[d])));
    }
    out.push((format!("{prefix}.ln_f.g"), Value::ones(&[d])));
    out.push((format!("{prefix}.ln_f.b"), Value::zeros(&[d])));
    out
}

pub fn bind_mixer(
    g: &mut Graph,
    binding: &mut ParamBinding,
    prefix: &str,
    cfg: &MixerConfig,
) -> Result<MixerParams, TensorError> {
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = format!("{prefix}.l{l}");
        layers.push(MixerLayerParams {
            ln1: binding.ln_pair(g, &format!("{p}.ln1"))?,
            w1: binding.leaf(g, &format!("{p}.w1"))?,
            b1: binding.leaf(g, &format!("{p}.b1"))?,
            w2: binding.leaf(g, &format!("{p}.w2"))?,
            b2: binding.leaf(g, &format!("{p}.b2"))?,
            ln2: binding.ln_pair(g, &format!("{p}.ln2"))?,
            w3: binding.leaf(g, &format!("{p}.w3"))?,
            b3: binding.leaf(g, &format!("{p}.b3"))?,
            w4: binding.leaf(g, &format!("{p}.w4"))?,
            b4: binding.leaf(g, &format!("{p}.b4"))?,
        });
    }
    let final_ln = binding.ln_pair(g, &format!("{prefix}.ln_f"))?;
    Ok(MixerParams { layers, final_ln })
}

/// One token-mixing + channel-mixing layer with residuals.
pub fn mixer_layer(
    g: &mut Graph,
    tokens: NodeId,
    layer: &MixerLayerParams,
    cfg: &MixerConfig,
) -> Result<NodeId, TensorError> {
    // Token mixing on the transposed matrix: rows become channels.
    let ln = g.layer_norm(tokens, layer.ln1.0, layer.ln1.1, cfg.ln_eps)?;
    let lt = g.transpose(ln)?;
    let h = g.matmul(lt, layer.w1)?;
    let h = g.add_row_vec(h, layer.b1)?;
    let h = g.gelu(h);
    let tm = g.matmul(h, layer.w2)?;
    let tm = g.add_row_vec(tm, layer.b2)?;
    let tm = g.transpose(tm)?;
    let u = g.add(tokens, tm)?;

    // Channel mixing per patch row.
    let ln2 = g.layer_norm(u, layer.ln2.0, layer.ln2.1, cfg.ln_eps)?;
    let h2 = g.matmul(ln2, layer.w3)?;
    let h2 = g.add_row_vec(h2, layer.b3)?;
    let h2 = g.gelu(h2);
    let cm = g.matmul(h2, layer.w4)?;
    let cm = g.add_row_vec(cm, layer.b4)?;
    g.add(u, cm)
}

/// Full stream: stacked mixer layers, final layer norm, mean over tokens.
pub fn freq_feature(
    g: &mut Graph,
    tokens: NodeId,
    params: &MixerParams,
    cfg: &MixerConfig,
) -> Result<NodeId, TensorError> {
    let mut x = tokens;
    for layer in &params.layers {
        x = mixer_layer(g, x, layer, cfg)?;
    }
    let ln = g.layer_norm(x, params.final_ln.0, params.final_ln.1, cfg.ln_eps)?;
    g.global_avg_pool(ln)
}
