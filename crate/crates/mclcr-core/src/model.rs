//! Full model assembly: spatial branch (backbone + style block), frequency
//! branch (patch spectra -> embeddings -> dual attention -> mixers), fusion,
//! and the contrastive/classifier heads.
//!
//! The fused vector concatenates, in order: the three style vectors, the
//! global feature, the amplitude feature, and the phase feature. Ablation
//! flags zero out segments without changing the fusion width, so checkpoints
//! stay interchangeable across ablations of one configuration.

use thiserror::Error;

use crate::backbone::{backbone_forward, image_input, init_backbone, BackboneConfig};
use crate::dataset::DatasetError;
use crate::image::{to_grayscale, Image};
use crate::losses::LossError;
use crate::mixer::{bind_mixer, freq_feature, init_mixer, MixerConfig};
use crate::papda::{
    bind_attention, embed_spectra, init_attention, init_embedding, papda_forward, AttnScale,
    PapdaConfig,
};
use crate::params::{rng_for, ParamBinding, ParamMap, Value};
use crate::spectral::patch_spectra;
use crate::ssrb::multi_scale_ssrb;
use crate::tensor::{Graph, NodeId, TensorError};

pub use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use crate::losses::SupconDenominator;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Spectral(#[from] crate::spectral::SpectralError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub image_extent: usize,
    pub patch: usize,
    /// Frequency embedding width; defaults to patch².
    pub embed_dim: usize,
    pub heads: usize,
    pub mixer_layers: usize,
    pub backbone_divisor: usize,
    /// Whether backbone blocks end with a 2x2 max pool. Disabled for
    /// finite-difference checks, where the pooling argmax would break
    /// smoothness.
    pub pool_blocks: bool,
    pub encode_dim: usize,
    pub projection_dim: usize,
    pub dropout: f64,
    pub tau: f64,
    pub alpha: f64,
    pub use_ssrb: bool,
    pub use_papda: bool,
    pub use_scloss: bool,
    pub attention_scale: AttnScale,
    pub supcon_denominator: SupconDenominator,
}

impl Default for ModelConfig {
    /// Desk-scale defaults: 64x64 inputs, 8x8 patches, quarter-width
    /// backbone.
    fn default() -> Self {
        Self {
            image_extent: 64,
            patch: 8,
            embed_dim: 64,
            heads: 4,
            mixer_layers: 2,
            backbone_divisor: 4,
            pool_blocks: true,
            encode_dim: 1024,
            projection_dim: 128,
            dropout: 0.5,
            tau: 0.1,
            alpha: 0.5,
            use_ssrb: true,
            use_papda: true,
            use_scloss: true,
            attention_scale: AttnScale::SqrtHead,
            supcon_denominator: SupconDenominator::Negatives,
        }
    }
}

impl ModelConfig {
    /// Full-width reference configuration: 256x256 inputs, 16x16 patches.
    pub fn paper_scale() -> Self {
        Self {
            image_extent: 256,
            patch: 16,
            embed_dim: 256,
            backbone_divisor: 1,
            ..Self::default()
        }
    }

    pub fn tokens(&self) -> usize {
        (self.image_extent / self.patch) * (self.image_extent / self.patch)
    }

    pub fn backbone(&self) -> BackboneConfig {
        let mut cfg = BackboneConfig::with_divisor(self.image_extent, self.backbone_divisor);
        if !self.pool_blocks {
            cfg.downsample = vec![false; cfg.blocks()];
        }
        cfg
    }

    pub fn papda(&self) -> PapdaConfig {
        PapdaConfig {
            tokens: self.tokens(),
            dim: self.embed_dim,
            heads: self.heads,
            scale: self.attention_scale,
            ln_eps: 1e-5,
        }
    }

    pub fn mixer(&self) -> MixerConfig {
        let mut cfg = MixerConfig::new(self.tokens(), self.embed_dim);
        cfg.layers = self.mixer_layers;
        cfg
    }

    /// Width of the fused feature: style vectors + global feature + the two
    /// frequency features.
    pub fn fusion_width(&self) -> usize {
        let plan = &self.backbone().channel_plan;
        plan[0] + plan[1] + plan[2] + plan.last().unwrap() + 2 * self.embed_dim
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.patch == 0 || self.image_extent % self.patch != 0 {
            return Err(ModelError::Config(format!(
                "extent {} not divisible by patch {}",
                self.image_extent, self.patch
            )));
        }
        self.backbone().validate().map_err(ModelError::Config)?;
        self.papda().validate().map_err(ModelError::Config)?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {}", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(ModelError::Config(format!("alpha {}", self.alpha)));
        }
        if self.tau <= 0.0 {
            return Err(ModelError::Config(format!("tau {}", self.tau)));
        }
        if self.encode_dim == 0 || self.projection_dim == 0 {
            return Err(ModelError::Config("zero head width".into()));
        }
        Ok(())
    }
}

/// All trainable parameters plus configuration and training bookkeeping.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamMap,
    pub epoch: usize,
    pub best_val_loss: f64,
    pub best_val_acc: f64,
    pub lr: f64,
}

/// Deterministic initialization of every component, followed by a
/// probe-based calibration of the fusion encoder.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelState, ModelError> {
    let mut state = init_model_raw(config, seed)?;
    calibrate_fusion(&mut state, seed)?;
    Ok(state)
}

/// Parameter allocation without the fusion calibration pass (shape
/// enumeration and checkpoint loading paths).
pub fn init_model_raw(config: &ModelConfig, seed: u64) -> Result<ModelState, ModelError> {
    config.validate()?;
    let mut params = ParamMap::new();
    params.extend(init_backbone(&config.backbone(), crate::dataset::sub_seed(seed, 10, 0)));

    let papda = config.papda();
    let bins = config.patch * config.patch;
    let mut rng = rng_for(crate::dataset::sub_seed(seed, 11, 0));
    params.extend(init_embedding("embed.amp", bins, &papda, &mut rng));
    params.extend(init_embedding("embed.phase", bins, &papda, &mut rng));
    // Frozen per-bin spectrum standardization, filled by calibration.
    params.insert("embed.amp.norm.mean".into(), Value::zeros(&[bins]));
    params.insert("embed.amp.norm.scale".into(), Value::ones(&[bins]));
    params.insert("embed.phase.norm.mean".into(), Value::zeros(&[bins]));
    params.insert("embed.phase.norm.scale".into(), Value::ones(&[bins]));
    params.extend(init_attention("papda.amp", &papda, &mut rng));
    params.extend(init_attention("papda.phase", &papda, &mut rng));

    let mixer = config.mixer();
    params.extend(init_mixer("mixer.amp", &mixer, &mut rng));
    params.extend(init_mixer("mixer.phase", &mixer, &mut rng));

    let fmm = config.fusion_width();
    let (e, p) = (config.encode_dim, config.projection_dim);
    params.insert(
        "fuse.enc.w".into(),
        Value::fan_in(&mut rng, &[fmm, e], fmm),
    );
    params.insert("fuse.enc.b".into(), Value::zeros(&[e]));
    params.insert("fuse.ln.g".into(), Value::ones(&[e]));
    params.insert("fuse.ln.b".into(), Value::zeros(&[e]));
    // Frozen input standardization, filled by the calibration pass.
    params.insert("fuse.norm.mean".into(), Value::zeros(&[fmm]));
    params.insert("fuse.norm.scale".into(), Value::ones(&[fmm]));
    params.insert("head.proj.w".into(), Value::fan_in(&mut rng, &[e, p], e));
    params.insert("head.proj.b".into(), Value::zeros(&[p]));
    // The unnormalized style features make the fused vector large, so a
    // fan-in classifier would start saturated; a zero head starts every
    // sample at probability 0.5 and picks up scale from its first step.
    params.insert("head.cls.w".into(), Value::zeros(&[e, 1]));
    params.insert("head.cls.b".into(), Value::zeros(&[1]));

    Ok(ModelState {
        config: config.clone(),
        params,
        epoch: 0,
        best_val_loss: f64::INFINITY,
        best_val_acc: 0.0,
        lr: 0.0,
    })
}

/// Expected parameter names and shapes for a configuration (checkpoint
/// validation).
pub fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let state = init_model_raw(config, 0).expect("validated config");
    state
        .params
        .into_iter()
        .map(|(name, v)| (name, v.shape))
        .collect()
}

/// Fills the frozen fusion standardization from probe statistics so the
/// fused segments enter the encoder centered and at unit segment RMS. The
/// style vectors are unnormalized channel correlations sitting orders of
/// magnitude above the pooled features and sharing one large common-mode
/// direction; feeding them raw leaves every projection collinear (a
/// contrastive collapse point) and saturates the heads. The statistics
/// are constants of the initialized model, not trainable weights, so the
/// optimizer step size keeps its meaning relative to the encoder weights.
fn calibrate_fusion(state: &mut ModelState, seed: u64) -> Result<(), ModelError> {
    let config = state.config.clone();
    let plan = config.backbone().channel_plan;
    let d = config.embed_dim;
    let segments = [plan[0], plan[1], plan[2], *plan.last().unwrap(), d, d];
    let width = config.fusion_width();
    let bins = config.patch * config.patch;

    let probes = 16u64;
    let probe_images: Vec<Image> = (0..probes)
        .map(|p| {
            crate::dataset::gen_real(
                config.image_extent,
                config.image_extent,
                config.patch,
                crate::dataset::sub_seed(seed, 12, p),
            )
        })
        .collect::<Result<_, _>>()?;

    // Pass 1: per-bin spectrum statistics over every probe patch.
    let mut amp_stats = (vec![0.0f64; bins], vec![0.0f64; bins], 0.0f64);
    let mut phase_stats = (vec![0.0f64; bins], vec![0.0f64; bins], 0.0f64);
    for img in &probe_images {
        let spec = sample_spectra(img, config.patch)?;
        for (buffers, stats) in [(&spec.amp, &mut amp_stats), (&spec.phase, &mut phase_stats)] {
            for patch in buffers {
                for (j, &v) in patch.iter().enumerate() {
                    stats.0[j] += v;
                    stats.1[j] += v * v;
                }
                stats.2 += 1.0;
            }
        }
    }
    for (prefix, (sum, sq, n)) in [("embed.amp", amp_stats), ("embed.phase", phase_stats)] {
        let means: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let stds: Vec<f64> = sq
            .iter()
            .zip(&means)
            .map(|(&s, &m)| (s / n - m * m).max(0.0).sqrt())
            .collect();
        let pooled = (stds.iter().map(|s| s * s).sum::<f64>() / bins as f64).sqrt();
        let floor = (1e-3 * pooled).max(1e-12);
        let scales: Vec<f64> = stds.iter().map(|s| 1.0 / s.max(floor)).collect();
        state
            .params
            .get_mut(&format!("{prefix}.norm.mean"))
            .expect("embed mean")
            .data = means;
        state
            .params
            .get_mut(&format!("{prefix}.norm.scale"))
            .expect("embed scale")
            .data = scales;
    }

    // Pass 2: fused-feature statistics with the embed normalization live.
    let mut sums = vec![0.0f64; width];
    let mut sq_sums = vec![0.0f64; width];
    for img in &probe_images {
        let out = forward(img, state, false)?;
        for (j, v) in out.fmm.iter().enumerate() {
            sums[j] += v;
            sq_sums[j] += v * v;
        }
    }

    let means: Vec<f64> = sums.iter().map(|s| s / probes as f64).collect();
    // Per-coordinate spread, floored per segment so near-constant
    // coordinates cannot explode; zeroed ablation segments keep scale 1.
    let stds: Vec<f64> = sq_sums
        .iter()
        .zip(&means)
        .map(|(&sq, &m)| (sq / probes as f64 - m * m).max(0.0).sqrt())
        .collect();
    let mut scales = vec![1.0f64; width];
    let mut offset = 0;
    for seg in segments {
        let seg_rms = (stds[offset..offset + seg]
            .iter()
            .map(|s| s * s)
            .sum::<f64>()
            / seg as f64)
            .sqrt();
        if seg_rms > 1e-9 {
            let floor = 1e-3 * seg_rms;
            for j in offset..offset + seg {
                scales[j] = 1.0 / stds[j].max(floor);
            }
        }
        offset += seg;
    }

    state
        .params
        .get_mut("fuse.norm.mean")
        .expect("fusion mean")
        .data = means;
    state
        .params
        .get_mut("fuse.norm.scale")
        .expect("fusion scale")
        .data = scales;
    Ok(())
}

/// Precomputed per-image frequency inputs: flattened per-patch amplitude
/// and phase buffers. Pure function of the image, so callers cache it.
#[derive(Debug, Clone)]
pub struct SampleSpectra {
    pub amp: Vec<Vec<f64>>,
    pub phase: Vec<Vec<f64>>,
}

pub fn sample_spectra(image: &Image, patch: usize) -> Result<SampleSpectra, ModelError> {
    let spec = patch_spectra(&to_grayscale(image), patch)?;
    Ok(SampleSpectra {
        amp: spec.amplitude,
        phase: spec.phase,
    })
}

/// Graph nodes produced for one sample inside a batch graph.
pub struct SampleNodes {
    pub fmm: NodeId,
    pub fe: NodeId,
    pub z_raw: NodeId,
    pub logit: NodeId,
    pub yhat: NodeId,
}

/// Builds the full forward pass for one image on an existing graph. The
/// dropout mask, when given, multiplies the encoded feature (inverted
/// dropout: entries are 0 or 1/keep).
pub fn forward_sample(
    g: &mut Graph,
    binding: &mut ParamBinding,
    image: &Image,
    spectra: &SampleSpectra,
    config: &ModelConfig,
    dropout_mask: Option<&[f64]>,
) -> Result<SampleNodes, ModelError> {
    if image.height != config.image_extent || image.width != config.image_extent {
        return Err(ModelError::Config(format!(
            "image {}x{} vs configured extent {}",
            image.height, image.width, config.image_extent
        )));
    }
    let bb_cfg = config.backbone();
    let plan = &bb_cfg.channel_plan;

    // Spatial branch.
    let input = image_input(g, image)?;
    let acts = backbone_forward(g, binding, input, &bb_cfg)?;
    let (ssf1, ssf2, ssf3) = if config.use_ssrb {
        multi_scale_ssrb(g, &acts)?
    } else {
        (
            g.constant(&[plan[0]], vec![0.0; plan[0]])?,
            g.constant(&[plan[1]], vec![0.0; plan[1]])?,
            g.constant(&[plan[2]], vec![0.0; plan[2]])?,
        )
    };

    // Frequency branch. Spectra are standardized per bin with frozen
    // statistics so the informative high-frequency bins, orders of
    // magnitude below the DC bin, enter the shared projection at
    // comparable scale (the composition stays one affine map per patch).
    let d = config.embed_dim;
    let (af, pf) = if config.use_papda {
        let papda_cfg = config.papda();
        let amp_feats = standardize_feats(&spectra.amp, state_norm(binding, g, "embed.amp")?);
        let phase_feats =
            standardize_feats(&spectra.phase, state_norm(binding, g, "embed.phase")?);
        let amp_w = binding.leaf(g, "embed.amp.w")?;
        let amp_b = binding.leaf(g, "embed.amp.b")?;
        let amp_pos = binding.leaf(g, "embed.amp.pos")?;
        let e_as = embed_spectra(g, &amp_feats, amp_w, amp_b, amp_pos)?;
        let ph_w = binding.leaf(g, "embed.phase.w")?;
        let ph_b = binding.leaf(g, "embed.phase.b")?;
        let ph_pos = binding.leaf(g, "embed.phase.pos")?;
        let e_ps = embed_spectra(g, &phase_feats, ph_w, ph_b, ph_pos)?;

        let attn_amp = bind_attention(g, binding, "papda.amp", &papda_cfg)?;
        let attn_phase = bind_attention(g, binding, "papda.phase", &papda_cfg)?;
        let (at, pt) = papda_forward(g, e_as, e_ps, &attn_amp, &attn_phase, &papda_cfg)?;

        let mixer_cfg = config.mixer();
        let mix_amp = bind_mixer(g, binding, "mixer.amp", &mixer_cfg)?;
        let mix_phase = bind_mixer(g, binding, "mixer.phase", &mixer_cfg)?;
        (
            freq_feature(g, at, &mix_amp, &mixer_cfg)?,
            freq_feature(g, pt, &mix_phase, &mixer_cfg)?,
        )
    } else {
        (
            g.constant(&[d], vec![0.0; d])?,
            g.constant(&[d], vec![0.0; d])?,
        )
    };

    // Fusion and heads. The encoded feature is layer normalized before
    // both heads: the style correlations are unnormalized and the conv
    // stack carries no internal normalization, so an unbounded encoding
    // would let the heads saturate and drift.
    let fmm = g.concat_vec(&[ssf1, ssf2, ssf3, acts.gf, af, pf])?;
    let norm_mean = binding.frozen(g, "fuse.norm.mean")?;
    let norm_scale = binding.frozen(g, "fuse.norm.scale")?;
    let centered = g.sub(fmm, norm_mean)?;
    let standardized = g.mul(centered, norm_scale)?;
    let enc_w = binding.leaf(g, "fuse.enc.w")?;
    let enc_b = binding.leaf(g, "fuse.enc.b")?;
    let fe_lin = g.vecmat(standardized, enc_w)?;
    let fe_lin = g.add(fe_lin, enc_b)?;
    let ln_g = binding.leaf(g, "fuse.ln.g")?;
    let ln_b = binding.leaf(g, "fuse.ln.b")?;
    let fe = g.layer_norm(fe_lin, ln_g, ln_b, 1e-5)?;

    let fe_dropped = match dropout_mask {
        Some(mask) => {
            let m = g.constant(&[config.encode_dim], mask.to_vec())?;
            g.mul(fe, m)?
        }
        None => fe,
    };

    let proj_w = binding.leaf(g, "head.proj.w")?;
    let proj_b = binding.leaf(g, "head.proj.b")?;
    let z_raw = g.vecmat(fe_dropped, proj_w)?;
    let z_raw = g.add(z_raw, proj_b)?;

    let cls_w = binding.leaf(g, "head.cls.w")?;
    let cls_b = binding.leaf(g, "head.cls.b")?;
    let logit = g.vecmat(fe_dropped, cls_w)?;
    let logit = g.add(logit, cls_b)?;
    let yhat = g.sigmoid(logit);

    Ok(SampleNodes {
        fmm,
        fe,
        z_raw,
        logit,
        yhat,
    })
}

/// Concrete per-sample outputs from a standalone forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub fmm: Vec<f64>,
    pub fe: Vec<f64>,
    pub z: Vec<f64>,
    pub yhat: f64,
}

/// Single-image forward. In training mode the dropout mask is drawn from a
/// stream derived from the state's epoch counter, so the call stays
/// reproducible; inference mode is deterministic outright.
pub fn forward(
    image: &Image,
    state: &ModelState,
    training: bool,
) -> Result<ForwardOutput, ModelError> {
    let spectra = sample_spectra(image, state.config.patch)?;
    let mask = if training {
        let mut rng = rng_for(crate::dataset::sub_seed(0xD0, state.epoch as u64, 0));
        Some(dropout_mask(
            &mut rng,
            state.config.encode_dim,
            state.config.dropout,
        ))
    } else {
        None
    };
    let mut g = Graph::new();
    let mut binding = ParamBinding::new(&state.params);
    let nodes = forward_sample(
        &mut g,
        &mut binding,
        image,
        &spectra,
        &state.config,
        mask.as_deref(),
    )?;
    let z = g.l2_normalize(nodes.z_raw)?;
    Ok(ForwardOutput {
        fmm: g.data(nodes.fmm).to_vec(),
        fe: g.data(nodes.fe).to_vec(),
        z: g.data(z).to_vec(),
        yhat: g.data(nodes.yhat)[0],
    })
}

fn state_norm<'a>(
    binding: &'a mut ParamBinding,
    g: &mut Graph,
    prefix: &str,
) -> Result<(Vec<f64>, Vec<f64>), TensorError> {
    // The frozen tensors ride through the binding so checkpoints carry
    // them; their values are applied to the constant inputs directly.
    let mean_id = binding.frozen(g, &format!("{prefix}.norm.mean"))?;
    let scale_id = binding.frozen(g, &format!("{prefix}.norm.scale"))?;
    Ok((g.data(mean_id).to_vec(), g.data(scale_id).to_vec()))
}

fn standardize_feats(feats: &[Vec<f64>], norm: (Vec<f64>, Vec<f64>)) -> Vec<Vec<f64>> {
    let (mean, scale) = norm;
    feats
        .iter()
        .map(|f| {
            f.iter()
                .zip(&mean)
                .zip(&scale)
                .map(|((v, m), s)| (v - m) * s)
                .collect()
        })
        .collect()
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else
/// 1/(1-rate).
pub fn dropout_mask(rng: &mut rand_chacha::ChaCha8Rng, len: usize, rate: f64) -> Vec<f64> {
    use rand::Rng;
    let keep = 1.0 - rate;
    (0..len)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                0.0
            } else {
                1.0 / keep
            }
        })
        .collect()
}
