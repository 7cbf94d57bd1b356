//! A small CPU network engine: CHW tensors, gated convolutions with manual
//! backward passes, and the two fusion networks.

mod checkpoint;
pub mod conv;
mod fusion;
mod resnet;
mod scalar;
mod tensor;
mod unet;

#[cfg(test)]
mod tests;

pub use checkpoint::{
    assign_from_container, load_checkpoint, load_checkpoint_into, read_container, read_tensors, save_checkpoint,
    write_container, write_tensors, Container, NamedTensor, CHECKPOINT_VERSION,
};
pub use conv::{conv_backward, conv_forward, sigmoid, Activation, Conv2d, GatedCache, GatedConv};
pub use fusion::{FusionConfig, FusionNets, FusionMode};
pub use resnet::{ResNetCache, ResNetRefine, ResidualBlock, RESIDUAL_BLOCKS};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use unet::{UNetCache, UNetFusion};

/// Named access to every trainable tensor of a layer or network.
pub trait Params<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a [T], Vec<usize>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [T], Vec<usize>));
}

pub fn param_count<T, P: Params<T> + ?Sized>(p: &P) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, data, _| n += data.len());
    n
}

/// All parameters concatenated in visiting order.
pub fn flatten<T: Copy, P: Params<T> + ?Sized>(p: &P) -> Vec<T> {
    let mut out = Vec::new();
    p.visit("", &mut |_, data, _| out.extend_from_slice(data));
    out
}

/// Inverse of [`flatten`].
pub fn assign<T: Copy, P: Params<T> + ?Sized>(p: &mut P, values: &[T]) {
    let mut at = 0;
    p.visit_mut("", &mut |_, data, _| {
        data.copy_from_slice(&values[at..at + data.len()]);
        at += data.len();
    });
    assert_eq!(at, values.len(), "parameter vector length");
}

pub fn zero_params<T: Scalar, P: Params<T> + ?Sized>(p: &mut P) {
    p.visit_mut("", &mut |_, data, _| data.iter_mut().for_each(|v| *v = T::zero()));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
