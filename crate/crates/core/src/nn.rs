//! Layer specifications, Xavier initialization, and the named parameter store.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Gradients, Var};
use crate::tensor::{Element, Tensor};

/// Layer kinds the networks are assembled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Conv2d,
    Deconv2d,
    BatchNorm,
    LeakyRelu,
}

/// Geometry of one layer: enough to derive weight shapes and output sizes.
#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel_size: usize,
    pub stride: usize,
    pub leakiness: f64,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LayerSpec {
    pub fn dense(fan_in: usize, fan_out: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Dense,
            kernel_size: 1,
            stride: 1,
            leakiness: 0.2,
            fan_in,
            fan_out,
        }
    }

    pub fn conv2d(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv2d,
            kernel_size: kernel,
            stride,
            leakiness: 0.2,
            fan_in: in_channels * kernel * kernel,
            fan_out: out_channels * kernel * kernel,
        }
    }

    pub fn deconv2d(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Deconv2d,
            kernel_size: kernel,
            stride,
            leakiness: 0.2,
            fan_in: in_channels * kernel * kernel,
            fan_out: out_channels * kernel * kernel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            LayerKind::Conv2d | LayerKind::Deconv2d => {
                if self.kernel_size < 1 || self.stride < 1 {
                    return Err(Error::InvalidSpec(
                        "conv/deconv kernel_size and stride must be >= 1".into(),
                    ));
                }
            }
            LayerKind::LeakyRelu => {
                if !(self.leakiness > 0.0 && self.leakiness < 1.0) {
                    return Err(Error::InvalidSpec(format!(
                        "leakiness {} outside (0,1)",
                        self.leakiness
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Xavier/Glorot uniform initialization: values in +-sqrt(6/(fan_in+fan_out)),
/// deterministic per seed.
pub fn xavier_init<E: Element>(spec: &LayerSpec, seed: u64) -> Result<Tensor<E>> {
    spec.validate()?;
    if spec.fan_in == 0 || spec.fan_out == 0 {
        return Err(Error::InvalidSpec(
            "xavier: fan_in and fan_out must be positive".into(),
        ));
    }
    let shape = match spec.kind {
        LayerKind::Dense => vec![spec.fan_in, spec.fan_out],
        LayerKind::Conv2d => {
            let kk = spec.kernel_size * spec.kernel_size;
            if spec.fan_in % kk != 0 || spec.fan_out % kk != 0 {
                return Err(Error::InvalidSpec(
                    "xavier: conv fans must be channel multiples of kernel^2".into(),
                ));
            }
            vec![spec.fan_out / kk, spec.fan_in / kk, spec.kernel_size, spec.kernel_size]
        }
        LayerKind::Deconv2d => {
            let kk = spec.kernel_size * spec.kernel_size;
            if spec.fan_in % kk != 0 || spec.fan_out % kk != 0 {
                return Err(Error::InvalidSpec(
                    "xavier: deconv fans must be channel multiples of kernel^2".into(),
                ));
            }
            vec![spec.fan_in / kk, spec.fan_out / kk, spec.kernel_size, spec.kernel_size]
        }
        LayerKind::BatchNorm | LayerKind::LeakyRelu => {
            return Err(Error::InvalidSpec(format!(
                "xavier: {:?} has no weight tensor",
                spec.kind
            )))
        }
    };
    let bound = (6.0 / (spec.fan_in + spec.fan_out) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel: usize = shape.iter().product();
    let data: Vec<E> = (0..numel)
        .map(|_| E::from_f64(bound * (2.0 * rng.random::<f64>() - 1.0)))
        .collect();
    Tensor::new(shape, data)
}

/// One named parameter; frozen entries (batchnorm running stats) ride along
/// in checkpoints but are skipped by the optimizer.
#[derive(Clone, Debug)]
pub struct ParamEntry<E: Element> {
    pub tensor: Tensor<E>,
    pub trainable: bool,
}

/// Ordered name -> tensor map backing every network.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<E: Element> {
    entries: BTreeMap<String, ParamEntry<E>>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<E>) {
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                tensor,
                trainable: true,
            },
        );
    }

    pub fn insert_frozen(&mut self, name: &str, tensor: Tensor<E>) {
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                tensor,
                trainable: false,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::Usage(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<E>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::Usage(format!("unknown parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<E>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    /// Merge another store under a disjoint namespace.
    pub fn absorb(&mut self, other: ParamStore<E>) -> Result<()> {
        for (name, entry) in other.entries {
            if self.entries.contains_key(&name) {
                return Err(Error::Usage(format!("parameter '{name}' already present")));
            }
            self.entries.insert(name, entry);
        }
        Ok(())
    }

    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, e)| {
                    (
                        n.clone(),
                        ParamEntry {
                            tensor: e.tensor.cast(),
                            trainable: e.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Record every entry in the graph, returning a name -> Var binding.
    pub fn bind(&self, g: &mut Graph<E>) -> BoundParams {
        let mut vars = BTreeMap::new();
        for (name, entry) in &self.entries {
            let v = if entry.trainable {
                g.param(entry.tensor.clone())
            } else {
                g.input(entry.tensor.clone())
            };
            g.label(v, name);
            vars.insert(name.clone(), v);
        }
        BoundParams { vars }
    }
}

/// Name -> Var binding for one recorded graph.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Usage(format!("parameter '{name}' not bound")))
    }

    /// Extract named gradients after a backward pass (trainable names only
    /// appear if the store flagged them; zeros where the loss ignored them).
    pub fn named_grads<E: Element>(
        &self,
        store: &ParamStore<E>,
        grads: &Gradients<E>,
    ) -> BTreeMap<String, Tensor<E>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            if store.entries.get(name).map(|e| e.trainable) == Some(true) {
                out.insert(name.clone(), grads.get(*var));
            }
        }
        out
    }
}

/// Spec-level forward entry: run one layer by its `LayerSpec`.
/// `weights` carries [w, b] for dense/conv/deconv, [gamma, beta] for
/// batchnorm, nothing for leaky_relu.
pub fn forward_layer<E: Element>(
    g: &mut Graph<E>,
    spec: &LayerSpec,
    weights: &[Var],
    x: Var,
    training: bool,
    running: Option<(&[E], &[E])>,
    pad: usize,
    out_pad: usize,
) -> Result<Var> {
    spec.validate()?;
    match spec.kind {
        LayerKind::Dense => g.dense(x, weights[0], weights[1]),
        LayerKind::Conv2d => g.conv2d(x, weights[0], weights[1], spec.stride, pad),
        LayerKind::Deconv2d => g.deconv2d(x, weights[0], weights[1], spec.stride, pad, out_pad),
        LayerKind::BatchNorm => g.batch_norm(x, weights[0], weights[1], 1e-5, training, running),
        LayerKind::LeakyRelu => g.leaky_relu(x, spec.leakiness),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xavier_bound_is_one_for_fan_six() {
        // fan_in=1, fan_out=5 -> bound sqrt(6/6) = 1.
        let spec = LayerSpec::dense(1, 5);
        let t: Tensor<f64> = xavier_init(&spec, 7).unwrap();
        assert_eq!(t.shape(), &[1, 5]);
        assert!(t.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn xavier_is_deterministic_per_seed() {
        let spec = LayerSpec::conv2d(3, 8, 4, 2);
        let a: Tensor<f32> = xavier_init(&spec, 123).unwrap();
        let b: Tensor<f32> = xavier_init(&spec, 123).unwrap();
        assert_eq!(a.data(), b.data());
        let c: Tensor<f32> = xavier_init(&spec, 124).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn xavier_sample_mean_is_near_zero() {
        // Oracle: direct sampling statistics over 10^4 draws.
        let spec = LayerSpec::dense(300, 300);
        let t: Tensor<f64> = xavier_init(&spec, 42).unwrap();
        let sample = &t.data()[..10_000];
        let mean: f64 = sample.iter().sum::<f64>() / sample.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn xavier_rejects_zero_fans() {
        let spec = LayerSpec::dense(0, 5);
        assert!(matches!(
            xavier_init::<f64>(&spec, 1),
            Err(Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn store_bind_and_grads_roundtrip() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::scalar(3.0));
        store.insert_frozen("state", Tensor::scalar(9.0));
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let w = bound.var("w").unwrap();
        let zero = g.input(Tensor::scalar(0.0));
        let loss = g.mse_mean(w, zero).unwrap();
        let grads = g.backward(loss).unwrap();
        let named = bound.named_grads(&store, &grads);
        assert_eq!(named.len(), 1);
        assert_eq!(named["w"].item().unwrap(), 6.0);
    }
}
