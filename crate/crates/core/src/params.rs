//! Parameter containers generic over their leaf type.
//!
//! A container holds `Tensor`s at rest and `Var`s once bound to a tape; the
//! same `map` walk produces bindings, gradients, and the flat, named list
//! used by the optimizer and checkpoints.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Convolution weight `[cout, cin, k, k]` and bias `[cout]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<P> {
    pub weight: P,
    pub bias: P,
}

impl<P> ParamTree<P> for Conv<P> {
    type Of<Q> = Conv<Q>;

    fn map_params<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Conv<Q> {
        Conv {
            weight: f(&join(prefix, "weight"), &self.weight),
            bias: f(&join(prefix, "bias"), &self.bias),
        }
    }
}

impl Conv<Tensor> {
    /// He-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, cout: usize, cin: usize, k: usize) -> Self {
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        Self {
            weight: Tensor::rand_uniform(&[cout, cin, k, k], -bound, bound, rng),
            bias: Tensor::zeros(&[cout]),
        }
    }

    pub fn zeros(cout: usize, cin: usize, k: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[cout, cin, k, k]),
            bias: Tensor::zeros(&[cout]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl Conv<Var> {
    pub fn apply(&self, tape: &mut Tape, x: Var, stride: usize, pad: usize) -> crate::Result<Var> {
        tape.conv2d(x, self.weight, Some(self.bias), stride, pad)
    }
}

/// Fully connected layer: `y = x · weight + bias`, weight `[in, out]`,
/// bias `[1, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: P,
}

impl<P> ParamTree<P> for Linear<P> {
    type Of<Q> = Linear<Q>;

    fn map_params<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Linear<Q> {
        Linear {
            weight: f(&join(prefix, "weight"), &self.weight),
            bias: f(&join(prefix, "bias"), &self.bias),
        }
    }
}

impl Linear<Tensor> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        let bound = (6.0 / inputs as f64).sqrt();
        Self {
            weight: Tensor::rand_uniform(&[inputs, outputs], -bound, bound, rng),
            bias: Tensor::zeros(&[1, outputs]),
        }
    }
}

impl Linear<Var> {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> crate::Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add(y, self.bias)
    }
}

/// A container of parameters with leaf type `P`, walkable in a fixed order.
pub trait ParamTree<P> {
    type Of<Q>;

    /// Rebuild the container with every leaf replaced by `f(name, leaf)`.
    /// Leaves are visited in the same order on every call.
    fn map_params<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Self::Of<Q>;
}

impl<P, T: ParamTree<P>> ParamTree<P> for Vec<T> {
    type Of<Q> = Vec<T::Of<Q>>;

    fn map_params<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Self::Of<Q> {
        self.iter()
            .enumerate()
            .map(|(i, t)| t.map_params(&join(prefix, &i.to_string()), f))
            .collect()
    }
}

/// Bind every tensor as a trainable tape leaf.
pub fn bind<T: ParamTree<Tensor>>(tape: &mut Tape, params: &T) -> T::Of<Var> {
    params.map_params("", &mut |_, t| tape.param(t.clone()))
}

/// Bind every tensor as a constant; no gradients are tracked.
pub fn constants<T: ParamTree<Tensor>>(tape: &mut Tape, params: &T) -> T::Of<Var> {
    params.map_params("", &mut |_, t| tape.constant(t.clone()))
}

/// Gradients of bound parameters; zeros where backward did not reach.
pub fn grads<T: ParamTree<Var>>(tape: &Tape, bound: &T) -> T::Of<Tensor> {
    bound.map_params("", &mut |_, &v| tape.grad_or_zeros(v))
}

/// `(name, tensor)` pairs in walk order.
pub fn named<T: ParamTree<Tensor>>(params: &T) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    params.map_params("", &mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

/// Rebuild a container from `(name, tensor)` pairs, matching names and shapes.
pub fn from_named<T: ParamTree<Tensor>>(template: &T, entries: &[(String, Tensor)]) -> crate::Result<T::Of<Tensor>> {
    let mut iter = entries.iter();
    let mut err = None;
    let out = template.map_params("", &mut |name, t| match iter.next() {
        Some((n, v)) if n == name && v.shape() == t.shape() => v.clone(),
        found => {
            err.get_or_insert_with(|| {
                crate::Error::Validation(format!(
                    "parameter `{name}` {:?} does not match stored entry {:?}",
                    t.shape(),
                    found.map(|(n, v)| (n, v.shape()))
                ))
            });
            t.clone()
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if iter.next().is_some() {
        return Err(crate::Error::validation(
            "more stored parameters than the model defines",
        ));
    }
    Ok(out)
}

pub fn count<T: ParamTree<Tensor>>(params: &T) -> usize {
    let mut n = 0;
    params.map_params("", &mut |_, t| n += t.numel());
    n
}

/// Rebuild a container over already-created tape leaves, in walk order.
pub fn rebind<T: ParamTree<Tensor>>(template: &T, leaves: &[Var]) -> T::Of<Var> {
    let mut it = leaves.iter().copied();
    template.map_params("", &mut |name, _| {
        it.next()
            .unwrap_or_else(|| panic!("no leaf supplied for parameter `{name}`"))
    })
}

/// Flat list of parameter tensors in walk order.
pub fn leaves<T: ParamTree<Tensor>>(params: &T) -> Vec<Tensor> {
    named(params).into_iter().map(|(_, t)| t).collect()
}
