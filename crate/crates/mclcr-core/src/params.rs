//! Named parameter storage shared by the model components.
//!
//! Parameters live outside any graph as plain values; each forward pass
//! binds the ones it uses as fresh `requires_grad` leaves and records the
//! name-to-node mapping so the optimizer can route gradients back.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Graph, NodeId, TensorError};

/// A parameter value: shape plus row-major f64 data.
#[derive(Debug, Clone, PartialEq)]
pub struct Value {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Value {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![1.0; n])
    }

    /// Zero-mean Gaussian entries with the given standard deviation.
    pub fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], sigma: f64) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * sigma)
            .collect();
        Self::new(shape, data)
    }

    /// Fan-in-scaled Gaussian: sigma = sqrt(2 / fan_in).
    pub fn fan_in(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Self {
        Self::gaussian(rng, shape, (2.0 / fan_in as f64).sqrt())
    }
}

pub type ParamMap = BTreeMap<String, Value>;

/// Binds named parameters into a graph as trainable leaves, remembering
/// which node each name got. Rebinding a name returns the leaf created the
/// first time, so a batch graph shares one node per parameter and its
/// gradient accumulates across every sample that touches it. The prebound
/// mode reuses leaves somebody else already created (the gradient checker
/// owns them there).
pub struct ParamBinding<'a> {
    source: BindingSource<'a>,
    created: BTreeMap<String, NodeId>,
    pub bound: Vec<(String, NodeId)>,
}

enum BindingSource<'a> {
    Values(&'a ParamMap),
    Prebound(&'a BTreeMap<String, NodeId>),
}

impl<'a> ParamBinding<'a> {
    pub fn new(params: &'a ParamMap) -> Self {
        Self {
            source: BindingSource::Values(params),
            created: BTreeMap::new(),
            bound: Vec::new(),
        }
    }

    pub fn prebound(ids: &'a BTreeMap<String, NodeId>) -> Self {
        Self {
            source: BindingSource::Prebound(ids),
            created: BTreeMap::new(),
            bound: Vec::new(),
        }
    }

    /// Binds a named value as a frozen (non-trainable) input; it is not
    /// recorded for the optimizer.
    pub fn frozen(&mut self, g: &mut Graph, name: &str) -> Result<NodeId, TensorError> {
        if let Some(&id) = self.created.get(name) {
            return Ok(id);
        }
        let id = match &self.source {
            BindingSource::Values(params) => {
                let v = params
                    .get(name)
                    .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
                g.leaf(&v.shape, v.data.clone(), false)?
            }
            BindingSource::Prebound(ids) => *ids
                .get(name)
                .unwrap_or_else(|| panic!("unbound parameter {name:?}")),
        };
        self.created.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn leaf(&mut self, g: &mut Graph, name: &str) -> Result<NodeId, TensorError> {
        if let Some(&id) = self.created.get(name) {
            return Ok(id);
        }
        let id = match &self.source {
            BindingSource::Values(params) => {
                let v = params
                    .get(name)
                    .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
                g.leaf(&v.shape, v.data.clone(), true)?
            }
            BindingSource::Prebound(ids) => *ids
                .get(name)
                .unwrap_or_else(|| panic!("unbound parameter {name:?}")),
        };
        self.created.insert(name.to_string(), id);
        self.bound.push((name.to_string(), id));
        Ok(id)
    }

    /// Convenience for the ubiquitous (gamma, beta) layer-norm pair.
    pub fn ln_pair(
        &mut self,
        g: &mut Graph,
        prefix: &str,
    ) -> Result<(NodeId, NodeId), TensorError> {
        Ok((
            self.leaf(g, &format!("{prefix}.g"))?,
            self.leaf(g, &format!("{prefix}.b"))?,
        ))
    }
}

pub fn rng_for(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform helper for tests and toy inputs.
pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}
