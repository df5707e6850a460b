//! Named finite-difference gradient checks over each differentiable
//! subsystem and the assembled model, shared by the CLI and the
//! verification suite.

use std::collections::BTreeMap;

use crate::dataset::{apply_tamper, gen_real, sub_seed, Region, TamperKind, TamperSpec};
use crate::losses::{ce_loss, combined_loss, supcon_loss, LossError, SupconDenominator};
use crate::mixer::{bind_mixer, freq_feature, init_mixer, MixerConfig};
use crate::model::{forward_sample, init_model, sample_spectra, ModelConfig, ModelError};
use crate::papda::{
    bind_attention, embed_spectra, init_attention, init_embedding, papda_forward, AttnScale,
    PapdaConfig,
};
use crate::params::{rng_for, uniform, ParamBinding, Value};
use crate::ssrb::ssrb_forward;
use crate::tensor::{grad_check, NodeId, ParamSpec, TensorError};

/// Finite-difference step used everywhere in the suite.
pub const GRAD_CHECK_EPS: f64 = 1e-3;
/// Every subsystem must beat this relative error in 64-bit floats.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

fn lift_loss(e: LossError) -> TensorError {
    match e {
        LossError::Tensor(t) => t,
        other => panic!("unexpected loss construction failure: {other}"),
    }
}

fn values_to_specs(values: Vec<(String, Value)>) -> Vec<ParamSpec> {
    values
        .into_iter()
        .map(|(name, v)| ParamSpec::new(name, &v.shape, v.data))
        .collect()
}

fn prebound_ids(specs: &[ParamSpec], ids: &[NodeId]) -> BTreeMap<String, NodeId> {
    specs
        .iter()
        .zip(ids)
        .map(|(s, &id)| (s.name.clone(), id))
        .collect()
}

fn check_gram_gap(seed: u64) -> Result<f64, TensorError> {
    let mut rng = rng_for(sub_seed(seed, 30, 0));
    let params = [ParamSpec::new(
        "feature_map",
        &[4, 3, 5],
        uniform(&mut rng, 60, -1.0, 1.0),
    )];
    let report = grad_check(
        |g, ids| {
            let ssf = ssrb_forward(g, ids[0])?;
            let sq = g.mul(ssf, ssf)?;
            Ok(g.sum(sq))
        },
        &params,
        GRAD_CHECK_EPS,
        32,
    )?;
    Ok(report.max_rel_err())
}

fn check_embed_papda(seed: u64) -> Result<f64, TensorError> {
    let cfg = PapdaConfig {
        tokens: 4,
        dim: 8,
        heads: 2,
        scale: AttnScale::SqrtHead,
        ln_eps: 1e-5,
    };
    let bins = 8;
    let mut rng = rng_for(sub_seed(seed, 31, 0));
    let mut values = init_embedding("embed.amp", bins, &cfg, &mut rng);
    values.extend(init_embedding("embed.phase", bins, &cfg, &mut rng));
    values.extend(init_attention("papda.amp", &cfg, &mut rng));
    values.extend(init_attention("papda.phase", &cfg, &mut rng));
    let specs = values_to_specs(values);
    let closure_specs = specs.clone();

    let amp_feats: Vec<Vec<f64>> = (0..4).map(|_| uniform(&mut rng, bins, 0.0, 1.0)).collect();
    let phase_feats: Vec<Vec<f64>> = (0..4).map(|_| uniform(&mut rng, bins, -1.0, 1.0)).collect();

    let report = grad_check(
        move |g, ids| {
            let ids_map = prebound_ids(&closure_specs, ids);
            let mut binding = ParamBinding::prebound(&ids_map);
            let aw = binding.leaf(g, "embed.amp.w")?;
            let ab = binding.leaf(g, "embed.amp.b")?;
            let ap = binding.leaf(g, "embed.amp.pos")?;
            let e_as = embed_spectra(g, &amp_feats, aw, ab, ap)?;
            let pw = binding.leaf(g, "embed.phase.w")?;
            let pb = binding.leaf(g, "embed.phase.b")?;
            let pp = binding.leaf(g, "embed.phase.pos")?;
            let e_ps = embed_spectra(g, &phase_feats, pw, pb, pp)?;
            let pa = bind_attention(g, &mut binding, "papda.amp", &cfg)?;
            let ph = bind_attention(g, &mut binding, "papda.phase", &cfg)?;
            let (at, pt) = papda_forward(g, e_as, e_ps, &pa, &ph, &cfg)?;
            let at2 = g.mul(at, at)?;
            let pt2 = g.mul(pt, pt)?;
            let s1 = g.sum(at2);
            let s2 = g.sum(pt2);
            g.add(s1, s2)
        },
        &specs,
        GRAD_CHECK_EPS,
        4,
    )?;
    Ok(report.max_rel_err())
}

fn check_mixer(seed: u64) -> Result<f64, TensorError> {
    let cfg = MixerConfig::new(4, 6);
    let mut rng = rng_for(sub_seed(seed, 32, 0));
    let mut values = init_mixer("mixer", &cfg, &mut rng);
    values.push((
        "tokens".to_string(),
        Value::new(&[4, 6], uniform(&mut rng, 24, -1.0, 1.0)),
    ));
    let specs = values_to_specs(values);
    let closure_specs = specs.clone();

    let report = grad_check(
        move |g, ids| {
            let ids_map = prebound_ids(&closure_specs, ids);
            let mut binding = ParamBinding::prebound(&ids_map);
            let tokens = ids_map["tokens"];
            let mp = bind_mixer(g, &mut binding, "mixer", &cfg)?;
            let feat = freq_feature(g, tokens, &mp, &cfg)?;
            let sq = g.mul(feat, feat)?;
            Ok(g.sum(sq))
        },
        &specs,
        GRAD_CHECK_EPS,
        4,
    )?;
    Ok(report.max_rel_err())
}

fn check_heads(seed: u64) -> Result<f64, TensorError> {
    let mut rng = rng_for(sub_seed(seed, 33, 0));
    let params = [
        ParamSpec::new("z_raw", &[4, 5], uniform(&mut rng, 20, -1.0, 1.0)),
        ParamSpec::new("logits", &[4], uniform(&mut rng, 4, -1.0, 1.0)),
    ];
    let labels = [0u8, 0, 1, 1];
    let report = grad_check(
        move |g, ids| {
            let z = g.l2_normalize(ids[0])?;
            let sc = supcon_loss(g, z, &labels, 0.1, SupconDenominator::Negatives)
                .map_err(lift_loss)?;
            let yhat = g.sigmoid(ids[1]);
            let ce = ce_loss(g, yhat, &labels).map_err(lift_loss)?;
            combined_loss(g, sc, ce, 0.5).map_err(lift_loss)
        },
        &params,
        GRAD_CHECK_EPS,
        20,
    )?;
    Ok(report.max_rel_err())
}

/// Toy configuration small enough for whole-model finite differences.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        image_extent: 16,
        patch: 8,
        embed_dim: 16,
        heads: 2,
        backbone_divisor: 16,
        pool_blocks: false,
        encode_dim: 24,
        projection_dim: 8,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn check_full_model(seed: u64) -> Result<f64, ModelError> {
    let config = toy_config();
    let state = init_model(&config, sub_seed(seed, 34, 0))?;
    let specs: Vec<ParamSpec> = state
        .params
        .iter()
        .map(|(name, v)| ParamSpec::new(name.clone(), &v.shape, v.data.clone()))
        .collect();

    // Two reals and two tampered fakes keep both loss terms well defined.
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..2u64 {
        images.push(gen_real(16, 16, 8, sub_seed(seed, 35, i))?);
        labels.push(0u8);
    }
    for i in 0..2u64 {
        let base = gen_real(16, 16, 8, sub_seed(seed, 36, i))?;
        let spec = TamperSpec {
            kind: if i == 0 {
                TamperKind::UpsampleArtifact
            } else {
                TamperKind::TextureSwap
            },
            region: Region {
                x: 4,
                y: 4,
                w: 10,
                h: 10,
            },
            strength: 1.0,
        };
        images.push(apply_tamper(&base, &spec, sub_seed(seed, 37, i))?);
        labels.push(1u8);
    }
    let spectra: Vec<_> = images
        .iter()
        .map(|img| sample_spectra(img, config.patch))
        .collect::<Result<_, _>>()?;

    let labels_arr = labels.clone();
    let closure_specs = specs.clone();
    let report = grad_check(
        move |g, ids| {
            let ids_map = prebound_ids(&closure_specs, ids);
            let mut binding = ParamBinding::prebound(&ids_map);
            let mut z_rows = Vec::new();
            let mut yhat_parts = Vec::new();
            for (img, spec) in images.iter().zip(&spectra) {
                let nodes = forward_sample(g, &mut binding, img, spec, &config, None)
                    .map_err(|e| match e {
                        ModelError::Tensor(t) => t,
                        other => panic!("forward failed during grad check: {other}"),
                    })?;
                z_rows.push(nodes.z_raw);
                yhat_parts.push(nodes.yhat);
            }
            let stacked = g.stack_rows(&z_rows)?;
            let z = g.l2_normalize(stacked)?;
            let sc =
                supcon_loss(g, z, &labels_arr, 0.1, SupconDenominator::Negatives).map_err(lift_loss)?;
            let yhat = g.concat_vec(&yhat_parts)?;
            let ce = ce_loss(g, yhat, &labels_arr).map_err(lift_loss)?;
            combined_loss(g, sc, ce, 0.5).map_err(lift_loss)
        },
        &specs,
        GRAD_CHECK_EPS,
        2,
    )?;
    Ok(report.max_rel_err())
}

/// Runs every named check; returns (name, max relative error) pairs.
pub fn gradient_suite(seed: u64) -> Result<Vec<(String, f64)>, ModelError> {
    Ok(vec![
        ("gram+gap".to_string(), check_gram_gap(seed)?),
        ("embed+papda".to_string(), check_embed_papda(seed)?),
        ("mixer-2-layer".to_string(), check_mixer(seed)?),
        ("supcon+ce-heads".to_string(), check_heads(seed)?),
        ("full-toy-model".to_string(), check_full_model(seed)?),
    ])
}
