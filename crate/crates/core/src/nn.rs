//! Named parameters and the handful of layers the model is built from.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::tensor::{Float, Tensor};

/// Parameters keyed by module path, e.g. `encoder.level1.down.weight`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Float> {
    params: BTreeMap<String, Arc<Tensor<T>>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        let previous = self.params.insert(name.clone(), Arc::new(value));
        assert!(previous.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(Arc::as_ref)
    }

    /// Mutable access; clones only if a graph still holds the tensor.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(Arc::make_mut)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k, v.as_ref()))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), Arc::new(v.cast()))).collect() }
    }

    /// Places every parameter on the tape, trainable or frozen.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> Params<'g, T> {
        Params {
            vars: self.params.iter().map(|(k, v)| (k.clone(), graph.leaf(v.clone(), trainable))).collect(),
        }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Parameters of a [`ParamStore`] bound to one graph.
pub struct Params<'g, T: Float> {
    vars: BTreeMap<String, Var<'g, T>>,
}

impl<'g, T: Float> Params<'g, T> {
    pub fn var(&self, name: &str) -> Var<'g, T> {
        *self.vars.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'g, T>)> {
        self.vars.iter()
    }
}

fn normal_tensor<T: Float>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect())
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        assert!(kernel % 2 == 1, "odd kernels keep the centre aligned");
        Self { name: name.into(), in_ch, out_ch, kernel, stride }
    }

    /// Fan-in scaled normal weights times `gain`, zero bias.
    pub fn init<T: Float>(&self, store: &mut ParamStore<T>, gain: f64, rng: &mut impl Rng) {
        let fan_in = (self.in_ch * self.kernel * self.kernel) as f64;
        store.insert(
            format!("{}.weight", self.name),
            normal_tensor(&[self.out_ch, self.in_ch, self.kernel, self.kernel], gain / fan_in.sqrt(), rng),
        );
        store.insert(format!("{}.bias", self.name), Tensor::zeros([self.out_ch]));
    }

    pub fn forward<'g, T: Float>(&self, p: &Params<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.conv2d(
            p.var(&format!("{}.weight", self.name)),
            Some(p.var(&format!("{}.bias", self.name))),
            self.stride,
            self.kernel / 2,
        )
    }

    pub fn output_side(&self, input_side: usize) -> usize {
        (input_side + 2 * (self.kernel / 2) - self.kernel) / self.stride + 1
    }

    pub fn macs(&self, input_side: usize) -> usize {
        let o = self.output_side(input_side);
        o * o * self.out_ch * self.in_ch * self.kernel * self.kernel
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        Self { name: name.into(), fan_in, fan_out }
    }

    pub fn init<T: Float>(&self, store: &mut ParamStore<T>, gain: f64, rng: &mut impl Rng) {
        store.insert(
            format!("{}.weight", self.name),
            normal_tensor(&[self.fan_out, self.fan_in], gain / (self.fan_in as f64).sqrt(), rng),
        );
        store.insert(format!("{}.bias", self.name), Tensor::zeros([self.fan_out]));
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn forward<'g, T: Float>(&self, p: &Params<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.linear(p.var(&self.weight_name()), Some(p.var(&self.bias_name())))
    }
}

/// `x + conv(silu(conv(silu(x))))`, second conv initialised small.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub first: Conv2d,
    pub second: Conv2d,
}

impl ResBlock {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            first: Conv2d::new(format!("{name}.conv1"), channels, channels, 3, 1),
            second: Conv2d::new(format!("{name}.conv2"), channels, channels, 3, 1),
        }
    }

    pub fn init<T: Float>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.first.init(store, 1.0, rng);
        self.second.init(store, 0.1, rng);
    }

    pub fn forward<'g, T: Float>(&self, p: &Params<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let y = self.first.forward(p, x.silu());
        x.add(self.second.forward(p, y.silu()))
    }

    pub fn macs(&self, side: usize) -> usize {
        self.first.macs(side) + self.second.macs(side)
    }
}

/// Two-layer perceptron with a SiLU hidden layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(name: &str, fan_in: usize, hidden: usize, fan_out: usize) -> Self {
        Self { hidden: Linear::new(format!("{name}.hidden"), fan_in, hidden), out: Linear::new(format!("{name}.out"), hidden, fan_out) }
    }

    pub fn init<T: Float>(&self, store: &mut ParamStore<T>, out_gain: f64, rng: &mut impl Rng) {
        self.hidden.init(store, 1.0, rng);
        self.out.init(store, out_gain, rng);
    }

    pub fn forward<'g, T: Float>(&self, p: &Params<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        self.out.forward(p, self.hidden.forward(p, x).silu())
    }
}
