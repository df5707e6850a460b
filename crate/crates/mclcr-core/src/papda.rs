//! Patch-wise amplitude and phase dual attention.
//!
//! Patch spectra are flattened, linearly embedded with a learned per-patch
//! position table, then exchanged through two independent multi-head
//! cross-attention directions: phase queries attend over amplitude
//! keys/values to refine the amplitude tokens, and vice versa. Each
//! direction adds its attention output back onto its token stream.

use crate::params::{ParamBinding, Value};
use crate::tensor::{Graph, NodeId, TensorError};

/// Which denominator the attention logits are scaled by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnScale {
    /// 1/sqrt(d) with d the per-head dimension (default).
    SqrtHead,
    /// 1/sqrt(D) with D the full embedding width.
    SqrtModel,
}

impl AttnScale {
    pub fn factor(&self, model_dim: usize, head_dim: usize) -> f64 {
        match self {
            AttnScale::SqrtHead => 1.0 / (head_dim as f64).sqrt(),
            AttnScale::SqrtModel => 1.0 / (model_dim as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PapdaConfig {
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
    pub scale: AttnScale,
    pub ln_eps: f64,
}

impl PapdaConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(format!(
                "embedding dim {} not divisible by {} heads",
                self.dim, self.heads
            ));
        }
        Ok(())
    }
}

/// Bound projection nodes for one attention direction.
pub struct AttentionParams {
    pub ln_q: (NodeId, NodeId),
    pub ln_kv: (NodeId, NodeId),
    pub heads: Vec<HeadParams>,
    pub wo: NodeId,
    pub bo: NodeId,
}

pub struct HeadParams {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    /// Query and value projections carry biases; a key bias would shift
    /// every logit in a row equally and cancel inside the softmax, so the
    /// key projection has none.
    pub bq: NodeId,
    pub bv: NodeId,
}

/// Initial values for one embedding stream: shared projection, bias, and
/// position table.
pub fn init_embedding(
    prefix: &str,
    patch_bins: usize,
    cfg: &PapdaConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<(String, Value)> {
    vec![
        (
            format!("{prefix}.w"),
            Value::fan_in(rng, &[patch_bins, cfg.dim], patch_bins),
        ),
        (format!("{prefix}.b"), Value::zeros(&[cfg.dim])),
        (
            format!("{prefix}.pos"),
            Value::gaussian(rng, &[cfg.tokens, cfg.dim], 0.02),
        ),
    ]
}

/// Initial values for one attention direction.
pub fn init_attention(
    prefix: &str,
    cfg: &PapdaConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<(String, Value)> {
    let d = cfg.dim;
    let hd = cfg.head_dim();
    let mut out = vec![
        (format!("{prefix}.ln_q.g"), Value::ones(&[d])),
        (format!("{prefix}.ln_q.b"), Value::zeros(&[d])),
        (format!("{prefix}.ln_kv.g"), Value::ones(&[d])),
        (format!("{prefix}.ln_kv.b"), Value::zeros(&[d])),
    ];
    for h in 0..cfg.heads {
        for proj in ["wq", "wk", "wv"] {
            out.push((
                format!("{prefix}.h{h}.{proj}"),
                Value::fan_in(rng, &[d, hd], d),
            ));
        }
        for bias in ["bq", "bv"] {
            out.push((format!("{prefix}.h{h}.{bias}"), Value::zeros(&[hd])));
        }
    }
    out.push((
        format!("{prefix}.wo"),
        Value::fan_in(rng, &[d, d], d),
    ));
    out.push((format!("{prefix}.bo"), Value::zeros(&[d])));
    out
}

pub fn bind_attention(
    g: &mut Graph,
    binding: &mut ParamBinding,
    prefix: &str,
    cfg: &PapdaConfig,
) -> Result<AttentionParams, TensorError> {
    let ln_q = binding.ln_pair(g, &format!("{prefix}.ln_q"))?;
    let ln_kv = binding.ln_pair(g, &format!("{prefix}.ln_kv"))?;
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        heads.push(HeadParams {
            wq: binding.leaf(g, &format!("{prefix}.h{h}.wq"))?,
            wk: binding.leaf(g, &format!("{prefix}.h{h}.wk"))?,
            wv: binding.leaf(g, &format!("{prefix}.h{h}.wv"))?,
            bq: binding.leaf(g, &format!("{prefix}.h{h}.bq"))?,
            bv: binding.leaf(g, &format!("{prefix}.h{h}.bv"))?,
        });
    }
    let wo = binding.leaf(g, &format!("{prefix}.wo"))?;
    let bo = binding.leaf(g, &format!("{prefix}.bo"))?;
    Ok(AttentionParams {
        ln_q,
        ln_kv,
        heads,
        wo,
        bo,
    })
}

/// Flattened patch buffers -> `[n, dim]` embedding: shared linear
/// projection plus the learned per-patch position vector.
pub fn embed_spectra(
    g: &mut Graph,
    feats: &[Vec<f64>],
    proj: NodeId,
    bias: NodeId,
    pos: NodeId,
) -> Result<NodeId, TensorError> {
    let n = feats.len();
    let bins = feats[0].len();
    let mut flat = Vec::with_capacity(n * bins);
    for f in feats {
        debug_assert_eq!(f.len(), bins);
        flat.extend_from_slice(f);
    }
    let x = g.constant(&[n, bins], flat)?;
    let projected = g.matmul(x, proj)?;
    let with_bias = g.add_row_vec(projected, bias)?;
    g.add(with_bias, pos)
}

/// Multi-head cross attention: queries from one normalized stream, keys
/// and values from the other, heads concatenated and projected back.
pub fn cross_attention(
    g: &mut Graph,
    q_src: NodeId,
    kv_src: NodeId,
    params: &AttentionParams,
    cfg: &PapdaConfig,
) -> Result<NodeId, TensorError> {
    let qn = g.layer_norm(q_src, params.ln_q.0, params.ln_q.1, cfg.ln_eps)?;
    let kvn = g.layer_norm(kv_src, params.ln_kv.0, params.ln_kv.1, cfg.ln_eps)?;
    let factor = cfg.scale.factor(cfg.dim, cfg.head_dim());

    let mut head_outs = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let q = g.matmul(qn, head.wq)?;
        let q = g.add_row_vec(q, head.bq)?;
        let k = g.matmul(kvn, head.wk)?;
        let v = g.matmul(kvn, head.wv)?;
        let v = g.add_row_vec(v, head.bv)?;
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let scaled = g.scale(logits, factor);
        let attn = g.softmax_rows(scaled)?;
        head_outs.push(g.matmul(attn, v)?);
    }
    let concat = g.concat_cols(&head_outs)?;
    let out = g.matmul(concat, params.wo)?;
    g.add_row_vec(out, params.bo)
}

/// Both dual-attention directions with residual connections:
/// amplitude tokens gain phase-queried attention and vice versa.
pub fn papda_forward(
    g: &mut Graph,
    e_as: NodeId,
    e_ps: NodeId,
    params_amp: &AttentionParams,
    params_phase: &AttentionParams,
    cfg: &PapdaConfig,
) -> Result<(NodeId, NodeId), TensorError> {
    let amp_attn = cross_attention(g, e_ps, e_as, params_amp, cfg)?;
    let at = g.add(e_as, amp_attn)?;
    let phase_attn = cross_attention(g, e_as, e_ps, params_phase, cfg)?;
    let pt = g.add(e_ps, phase_attn)?;
    Ok((at, pt))
}
