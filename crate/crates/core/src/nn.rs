//! Parameter storage and the convolution layer shared by all networks.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Bound, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Leaky-ReLU slope used throughout the networks.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Instance normalization epsilon.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor with same-named, same-shaped values.
    pub fn load(&mut self, names: &[String], values: Vec<Tensor<T>>) -> Result<()> {
        if names != self.names.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter layout differs: expected {} tensors, found {}",
                self.names.len(),
                names.len()
            )));
        }
        for ((name, slot), v) in self.names.iter().zip(&self.tensors).zip(&values) {
            if slot.shape() != v.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    slot.shape(),
                    v.shape()
                )));
            }
        }
        self.tensors = values;
        Ok(())
    }
}

/// Square-kernel 2-D convolution, with or without bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Allocates weights with fan-in scaled normal initialization (He init
    /// adjusted for the leaky-ReLU slope) and zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let mut conv = Self::unbiased(store, name, in_channels, out_channels, kernel, stride, pad, rng);
        conv.bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])));
        conv
    }

    /// As [`Conv2d::new`] without a bias, for convolutions followed by
    /// instance normalization (which would cancel it).
    #[allow(clippy::too_many_arguments)]
    pub fn unbiased<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let std = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE) / fan_in).sqrt();
        let shape = [out_channels, in_channels, kernel, kernel];
        let weight = Tensor::from_fn(&shape, |_| {
            let z: f64 = rng.sample(StandardNormal);
            T::of(z * std)
        });
        let weight = store.add(format!("{name}.weight"), weight);
        Conv2d {
            weight,
            bias: None,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    /// "Same" 3x3 convolution, stride 1.
    pub fn same3<T: Element, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, cin, cout, 3, 1, 1, rng)
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p[self.weight], self.bias.map(|b| p[b]), self.stride, self.pad)
    }

    pub fn parameter_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.bias.map_or(0, |_| self.out_channels)
    }

    pub fn zero<T: Element>(&self, store: &mut ParamStore<T>) {
        store.get_mut(self.weight).data_mut().fill(T::zero());
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().fill(T::zero());
        }
    }

    pub fn scale_weights<T: Element>(&self, store: &mut ParamStore<T>, s: f64) {
        for v in store.get_mut(self.weight).data_mut() {
            *v *= T::of(s);
        }
    }
}

/// `[conv3x3, leaky-ReLU, conv3x3]` with an identity skip.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResBlock {
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, name: &str, width: usize, rng: &mut R) -> Self {
        ResBlock {
            conv1: Conv2d::same3(store, &format!("{name}.conv1"), width, width, rng),
            conv2: Conv2d::same3(store, &format!("{name}.conv2"), width, width, rng),
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let h = self.conv1.forward(g, p, x);
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let h = self.conv2.forward(g, p, h);
        g.add(x, h)
    }

    pub fn parameter_count(&self) -> usize {
        self.conv1.parameter_count() + self.conv2.parameter_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn width64_residual_block_has_73856_parameters() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let block = ResBlock::new(&mut store, "b", 64, &mut rng);
        assert_eq!(block.parameter_count(), 73_856);
        assert_eq!(store.numel(), 2 * (9 * 64 * 64 + 64));
    }

    #[test]
    fn empty_store_counts_zero() {
        assert_eq!(ParamStore::<f64>::new().numel(), 0);
    }

    #[test]
    fn load_rejects_shape_change() {
        let mut store = ParamStore::<f64>::new();
        store.add("a", Tensor::zeros(&[2, 2]));
        let names = store.names().to_vec();
        assert!(store.load(&names, vec![Tensor::zeros(&[4])]).is_err());
        assert!(store.load(&names, vec![Tensor::full(&[2, 2], 1.0)]).is_ok());
    }
}
