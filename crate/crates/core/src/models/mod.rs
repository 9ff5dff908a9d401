//! Translation generator and per-level discriminators.

mod discriminator;
mod generator;

pub use discriminator::{Discriminator, DiscriminatorSpec, LevelDiscriminators};
pub use generator::{Generator, GeneratorSpec, HEAD_INIT_SCALE};

use crate::nn::ParamStore;
use crate::tensor::Element;

/// Anything with trainable parameters.
pub trait Model<T: Element> {
    fn param_store(&self) -> &ParamStore<T>;
}

impl<T: Element> Model<T> for Generator<T> {
    fn param_store(&self) -> &ParamStore<T> {
        self.params()
    }
}

impl<T: Element> Model<T> for Discriminator<T> {
    fn param_store(&self) -> &ParamStore<T> {
        self.params()
    }
}

impl<T: Element> Model<T> for ParamStore<T> {
    fn param_store(&self) -> &ParamStore<T> {
        self
    }
}

/// Exact number of trainable scalars.
pub fn count_parameters<T: Element>(model: &impl Model<T>) -> usize {
    model.param_store().numel()
}
