//! Recorded forward pass and reverse-mode gradient propagation.
//!
//! A [`Pass`] owns every intermediate value of one forward evaluation
//! (node `i` produced value `i`), so frozen weights can serve many
//! concurrent passes. [`backward`] walks the record in reverse and
//! accumulates gradients for the seeded outputs; seeding is only
//! possible with a completed pass in hand, so "backward before
//! forward" cannot be expressed.

use super::ops;
use super::ops::NormCache;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub type ValId = usize;
pub type ParamId = usize;

#[derive(Debug, Clone)]
pub enum Node<T: Scalar> {
    Input,
    Conv { x: ValId, w: ParamId, b: ParamId, pad: usize },
    TConv { x: ValId, w: ParamId, b: ParamId },
    Elu { x: ValId },
    AvgPool2 { x: ValId },
    Concat { xs: Vec<ValId> },
    Norm { x: ValId, scale: ParamId, shift: ParamId, cache: NormCache<T> },
    SoftmaxGroups { x: ValId, class_count: usize },
}

#[derive(Debug)]
pub struct Pass<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) vals: Vec<Tensor<T>>,
    /// Full-resolution class probabilities.
    pub main: ValId,
    /// Low-resolution auxiliary logits (training phase only, deepest first).
    pub aux: Vec<ValId>,
}

impl<T: Scalar> Pass<T> {
    pub(crate) fn new(input: Tensor<T>) -> Self {
        Pass {
            nodes: vec![Node::Input],
            vals: vec![input],
            main: 0,
            aux: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, node: Node<T>, val: Tensor<T>) -> ValId {
        debug_assert!(val.is_finite(), "non-finite forward value");
        self.nodes.push(node);
        self.vals.push(val);
        self.vals.len() - 1
    }

    pub fn value(&self, id: ValId) -> &Tensor<T> {
        &self.vals[id]
    }

    pub fn main_probs(&self) -> &Tensor<T> {
        &self.vals[self.main]
    }
}

/// Parameter gradients aligned with the parameter vector, plus the
/// gradient with respect to the input slab.
#[derive(Debug)]
pub struct Grads<T: Scalar> {
    pub params: Vec<Tensor<T>>,
    pub input: Tensor<T>,
}

/// Reverse sweep. `seeds` are (value id, upstream gradient) pairs; a
/// training step seeds the main probabilities and each auxiliary head.
pub fn backward<T: Scalar>(
    params: &[Tensor<T>],
    pass: &Pass<T>,
    seeds: Vec<(ValId, Tensor<T>)>,
) -> Result<Grads<T>> {
    let mut val_grads: Vec<Option<Tensor<T>>> = vec![None; pass.vals.len()];
    for (id, seed) in seeds {
        if seed.shape() != pass.vals[id].shape() {
            return Err(Error::shape(format!(
                "seed shape {:?} does not match value shape {:?}",
                seed.shape(),
                pass.vals[id].shape()
            )));
        }
        accumulate(&mut val_grads[id], seed);
    }
    let mut param_grads: Vec<Option<Tensor<T>>> = vec![None; params.len()];

    for id in (0..pass.nodes.len()).rev() {
        let gy = match val_grads[id].take() {
            Some(g) => g,
            None => continue,
        };
        debug_assert!(gy.is_finite(), "non-finite gradient at node {id}");
        match &pass.nodes[id] {
            Node::Input => {
                // Terminal: stash back for the caller.
                val_grads[id] = Some(gy);
            }
            Node::Conv { x, w, b, pad } => {
                let (gx, gw, gb) = ops::conv2d_backward(&pass.vals[*x], &params[*w], &gy, *pad)?;
                accumulate(&mut val_grads[*x], gx);
                accumulate(&mut param_grads[*w], gw);
                accumulate(&mut param_grads[*b], gb);
            }
            Node::TConv { x, w, b } => {
                let (gx, gw, gb) = ops::tconv2_backward(&pass.vals[*x], &params[*w], &gy)?;
                accumulate(&mut val_grads[*x], gx);
                accumulate(&mut param_grads[*w], gw);
                accumulate(&mut param_grads[*b], gb);
            }
            Node::Elu { x } => {
                let gx = ops::elu_backward(&pass.vals[*x], &gy);
                accumulate(&mut val_grads[*x], gx);
            }
            Node::AvgPool2 { x } => {
                let gx = ops::avg_pool2_backward(pass.vals[*x].shape(), &gy);
                accumulate(&mut val_grads[*x], gx);
            }
            Node::Concat { xs } => {
                let (h, w) = (gy.shape()[1], gy.shape()[2]);
                let plane = h * w;
                let mut offset = 0;
                for &xi in xs {
                    let c = pass.vals[xi].shape()[0];
                    let part = Tensor::from_vec(
                        &[c, h, w],
                        gy.data()[offset..offset + c * plane].to_vec(),
                    )?;
                    accumulate(&mut val_grads[xi], part);
                    offset += c * plane;
                }
            }
            Node::Norm { x, scale, shift, cache } => {
                let (gx, gs, gb) = ops::norm_backward(&pass.vals[*x], &params[*scale], cache, &gy);
                accumulate(&mut val_grads[*x], gx);
                accumulate(&mut param_grads[*scale], gs);
                accumulate(&mut param_grads[*shift], gb);
            }
            Node::SoftmaxGroups { x, class_count } => {
                let gx = ops::softmax_groups_backward(&pass.vals[id], &gy, *class_count);
                accumulate(&mut val_grads[*x], gx);
            }
        }
    }

    let input = val_grads[0]
        .take()
        .unwrap_or_else(|| Tensor::zeros(pass.vals[0].shape()));
    let params_out = param_grads
        .into_iter()
        .enumerate()
        .map(|(i, g)| g.unwrap_or_else(|| Tensor::zeros(params[i].shape())))
        .collect();
    Ok(Grads { params: params_out, input })
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => {
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        None => *slot = Some(g),
    }
}
