//! Central-difference verification of reverse-mode gradients.

use super::{Graph, NodeId, TensorError};

/// A named parameter fed to a graph builder under test.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        }
    }
}

/// Per-parameter worst relative error between analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_param
            .iter()
            .map(|(_, e)| *e)
            .fold(0.0, f64::max)
    }
}

/// Checks the analytic gradient of `build` against central finite
/// differences. `build` receives a fresh graph plus leaf ids for every
/// parameter (in order) and returns the scalar loss node; it must be
/// deterministic, so dropout and any other sampling must be disabled.
///
/// For tensors with more than `max_coords` entries a deterministic
/// stride-spread subset of coordinates is probed. The relative error per
/// coordinate is `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(
    build: F,
    params: &[ParamSpec],
    eps: f64,
    max_coords: usize,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, TensorError>,
{
    if eps <= 0.0 {
        return Err(TensorError::NonPositiveEps { eps });
    }

    let eval = |data: &[Vec<f64>]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let ids = alloc_leaves(&mut g, params, data)?;
        let loss = build(&mut g, &ids)?;
        Ok(g.scalar_value(loss))
    };

    let base: Vec<Vec<f64>> = params.iter().map(|p| p.data.clone()).collect();

    // Analytic pass.
    let mut g = Graph::new();
    let ids = alloc_leaves(&mut g, params, &base)?;
    let loss = build(&mut g, &ids)?;
    let loss_val = g.scalar_value(loss);
    g.backward(loss)?;

    // Determinism guard: the same build must reproduce the same loss bits.
    let replay = eval(&base)?;
    if replay.to_bits() != loss_val.to_bits() {
        return Err(TensorError::Nondeterministic(format!(
            "loss {loss_val} vs replay {replay}"
        )));
    }

    let mut per_param = Vec::with_capacity(params.len());
    for (pi, spec) in params.iter().enumerate() {
        let analytic = g
            .grad(ids[pi])
            .expect("requires_grad leaf has gradient after backward")
            .to_vec();
        let coords = pick_coords(spec.data.len(), max_coords);
        let mut worst = 0.0f64;
        for ci in coords {
            let mut plus = base.clone();
            plus[pi][ci] += eps;
            let mut minus = base.clone();
            minus[pi][ci] -= eps;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            let a = analytic[ci];
            let rel = (a - numeric).abs() / (1e-8f64).max(a.abs() + numeric.abs());
            worst = worst.max(rel);
        }
        per_param.push((spec.name.clone(), worst));
    }

    Ok(GradCheckReport { per_param })
}

fn alloc_leaves(
    g: &mut Graph,
    params: &[ParamSpec],
    data: &[Vec<f64>],
) -> Result<Vec<NodeId>, TensorError> {
    params
        .iter()
        .zip(data)
        .map(|(p, d)| g.leaf(&p.shape, d.clone(), true))
        .collect()
}

fn pick_coords(len: usize, max_coords: usize) -> Vec<usize> {
    if len <= max_coords {
        (0..len).collect()
    } else {
        // Evenly spread, deterministic.
        (0..max_coords)
            .map(|i| i * len / max_coords)
            .collect()
    }
}
