//! Reverse-mode differentiation over a linear tape of layer applications.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::nn::ops::{self, BnCache, BnStats, Mode};
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::tensor::Tensor4;
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Conv { input: Var, weight: Var, bias: Var },
    Relu { input: Var },
    MaxPool { input: Var, argmax: Vec<usize> },
    UpConv { input: Var, weight: Var, bias: Var },
    Concat { parts: Vec<Var>, channels: Vec<usize> },
    BatchNorm { input: Var, gamma: Var, beta: Var, cache: BnCache<T> },
    Add { a: Var, b: Var },
    Mse { prediction: Var, target: Var },
    Dot { input: Var, weights: Tensor4<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
}

/// Records a forward computation so gradients can be replayed backwards.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar output with respect to every tape node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor4<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, var: Var) -> Option<&Tensor4<T>> {
        self.grads[var.0].as_ref()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor4<T> {
        &self.nodes[var.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Tensor4<T>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    pub fn conv(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::conv2d_forward(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(out, Op::Conv { input, weight, bias }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu_forward(self.value(input));
        self.push(out, Op::Relu { input })
    }

    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = ops::maxpool2x2_forward(self.value(input))?;
        Ok(self.push(out, Op::MaxPool { input, argmax }))
    }

    pub fn upconv2x2(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::upconv2x2_forward(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(out, Op::UpConv { input, weight, bias }))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor4<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let channels = tensors.iter().map(|t| t.shape()[1]).collect();
        let out = ops::concat_channels(&tensors)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                channels,
            },
        ))
    }

    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        let (out, cache) = ops::batchnorm_forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            stats,
            mode,
        )?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(format!("add: {:?} vs {:?}", x.shape(), y.shape())));
        }
        let mut out = x.clone();
        out.add_assign(y);
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// Batch mean of per-image summed squared errors, as a `(1,1,1,1)` scalar.
    pub fn mse_loss(&mut self, prediction: Var, target: Var) -> Result<Var> {
        let l = ops::mse_loss(self.value(prediction), self.value(target))?;
        Ok(self.push(Tensor4::filled([1, 1, 1, 1], l), Op::Mse { prediction, target }))
    }

    /// Scalar `Σ input · weights`; used to probe arbitrary gradients.
    pub fn dot(&mut self, input: Var, weights: Tensor4<T>) -> Result<Var> {
        let x = self.value(input);
        if x.shape() != weights.shape() {
            return Err(Error::shape("dot: weight shape mismatch"));
        }
        let s: T = x
            .as_slice()
            .iter()
            .zip(weights.as_slice())
            .map(|(&a, &b)| a * b)
            .sum();
        Ok(self.push(Tensor4::filled([1, 1, 1, 1], s), Op::Dot { input, weights }))
    }

    /// Fingerprint of every piecewise-linear branch taken (ReLU signs and
    /// pooling winners). Two evaluations with equal fingerprints lie on the
    /// same smooth piece of the network.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for &v in self.value(*input).as_slice() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Back-propagates from the scalar `output`, accumulating parameter
    /// gradients into `store`.
    pub fn backward(&self, output: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        if self.value(output).len() != 1 {
            return Err(Error::shape("backward needs a scalar output"));
        }
        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor4::filled([1, 1, 1, 1], T::one()));

        fn accumulate<T: Scalar>(slot: &mut Option<Tensor4<T>>, g: Tensor4<T>) {
            match slot {
                Some(acc) => acc.add_assign(&g),
                None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => store.get_mut(*id).grad.add_assign(&g),
                Op::Conv { input, weight, bias } => {
                    let lg = ops::conv2d_backward(self.value(*input), self.value(*weight), &g)?;
                    accumulate(&mut grads[input.0], lg.input);
                    accumulate(&mut grads[weight.0], lg.weight);
                    let bshape = self.value(*bias).shape();
                    accumulate(&mut grads[bias.0], Tensor4::from_vec(bshape, lg.bias.into_vec())?);
                }
                Op::Relu { input } => {
                    accumulate(&mut grads[input.0], ops::relu_backward(self.value(*input), &g));
                }
                Op::MaxPool { input, argmax } => {
                    let gi = ops::maxpool2x2_backward(self.value(*input).shape(), argmax, &g);
                    accumulate(&mut grads[input.0], gi);
                }
                Op::UpConv { input, weight, bias } => {
                    let lg = ops::upconv2x2_backward(self.value(*input), self.value(*weight), &g)?;
                    accumulate(&mut grads[input.0], lg.input);
                    accumulate(&mut grads[weight.0], lg.weight);
                    let bshape = self.value(*bias).shape();
                    accumulate(&mut grads[bias.0], Tensor4::from_vec(bshape, lg.bias.into_vec())?);
                }
                Op::Concat { parts, channels } => {
                    for (p, gp) in parts.iter().zip(ops::concat_channels_backward(channels, &g)) {
                        accumulate(&mut grads[p.0], gp);
                    }
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    cache,
                } => {
                    let lg = ops::batchnorm_backward(self.value(*gamma), cache, &g);
                    accumulate(&mut grads[input.0], lg.input);
                    let gshape = self.value(*gamma).shape();
                    accumulate(&mut grads[gamma.0], Tensor4::from_vec(gshape, lg.weight.into_vec())?);
                    let bshape = self.value(*beta).shape();
                    accumulate(&mut grads[beta.0], Tensor4::from_vec(bshape, lg.bias.into_vec())?);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::Mse { prediction, target } => {
                    let scale = g.as_slice()[0];
                    let mut gp = ops::mse_loss_backward(self.value(*prediction), self.value(*target));
                    gp.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
                    let mut gt = gp.clone();
                    gt.as_mut_slice().iter_mut().for_each(|v| *v = -*v);
                    accumulate(&mut grads[prediction.0], gp);
                    accumulate(&mut grads[target.0], gt);
                }
                Op::Dot { input, weights } => {
                    let scale = g.as_slice()[0];
                    let mut gi = weights.clone();
                    gi.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
                    accumulate(&mut grads[input.0], gi);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}
