//! Reverse-mode automatic differentiation.
//!
//! Models are written once against the [`Backend`] trait. [`Graph`] records a
//! tape and can back-propagate; [`Eager`] evaluates the same code without
//! retaining intermediates, which keeps long-clip inference memory bounded.

mod kernels;

use alloc::borrow::Cow;
use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::{ParamId, ParamKey, ParamStore};
use crate::{Real, Result, Tensor};

pub use kernels::ConvSpec;

/// Elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Tanh,
    /// Exact (erf-based) GELU.
    Gelu,
    LeakyRelu(f64),
    Sqrt,
    Log,
    Exp,
    Abs,
    Square,
    /// `max(x, c)`; the gradient is zero where `x <= c`.
    ClampMin(f64),
    Neg,
}

/// A differentiable operation.
#[derive(Debug, Clone)]
pub enum Op<T> {
    Add,
    Sub,
    Mul,
    Scale(T),
    AddScalar(T),
    /// `x + b` with `b` of shape `[x.shape[axis]]`.
    AddBias {
        axis: usize,
    },
    /// Batched matrix product over the last two axes. The right operand may
    /// be rank 2 and shared across the batch.
    MatMul {
        ta: bool,
        tb: bool,
    },
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    Narrow {
        axis: usize,
        start: usize,
        len: usize,
    },
    /// Inputs `x [B, Cin, L]`, `w [Cout, Cin/groups, K]`, optional bias `[Cout]`.
    Conv1d(ConvSpec),
    /// Inputs `x [B, Cin, L]`, `w [Cin, Cout, K]`, optional bias `[Cout]`.
    ConvTranspose1d {
        stride: usize,
        padding: usize,
    },
    /// Reflection padding of the last axis (mirrors repeatedly when the pad
    /// exceeds the signal length).
    PadReflect {
        left: usize,
        right: usize,
    },
    /// Average pooling over the last axis, zero padding counted.
    AvgPool1d {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Unary(Unary),
    /// Softmax over the last axis.
    Softmax,
    /// Inputs `x`, `gamma`, `beta`; normalizes over the last axis.
    LayerNorm {
        eps: f64,
    },
    MeanAll,
    SumAll,
    Dropout {
        mask: Vec<T>,
    },
}

/// Execution backend for model code.
pub trait Backend<'a, T: Real> {
    type V: Clone;

    fn value<'s>(&'s self, v: &'s Self::V) -> &'s Tensor<T>;
    fn constant(&mut self, t: Tensor<T>) -> Self::V;
    fn param(&mut self, store: &'a ParamStore<T>, id: ParamId) -> Self::V;
    fn apply(&mut self, op: Op<T>, inputs: &[&Self::V]) -> Result<Self::V>;
    fn training(&self) -> bool;
    fn dropout_mask(&mut self, n: usize, p: f64) -> Vec<T>;

    fn shape(&self, v: &Self::V) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.apply(Op::Add, &[a, b])
    }
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.apply(Op::Sub, &[a, b])
    }
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.apply(Op::Mul, &[a, b])
    }
    fn scale(&mut self, a: &Self::V, c: f64) -> Result<Self::V> {
        self.apply(Op::Scale(T::from_f64(c)), &[a])
    }
    fn add_scalar(&mut self, a: &Self::V, c: f64) -> Result<Self::V> {
        self.apply(Op::AddScalar(T::from_f64(c)), &[a])
    }
    fn add_bias(&mut self, x: &Self::V, b: &Self::V, axis: usize) -> Result<Self::V> {
        self.apply(Op::AddBias { axis }, &[x, b])
    }
    fn matmul(&mut self, a: &Self::V, b: &Self::V, ta: bool, tb: bool) -> Result<Self::V> {
        self.apply(Op::MatMul { ta, tb }, &[a, b])
    }
    fn reshape(&mut self, x: &Self::V, shape: &[usize]) -> Result<Self::V> {
        self.apply(Op::Reshape(shape.to_vec()), &[x])
    }
    fn permute(&mut self, x: &Self::V, perm: &[usize]) -> Result<Self::V> {
        self.apply(Op::Permute(perm.to_vec()), &[x])
    }
    fn narrow(&mut self, x: &Self::V, axis: usize, start: usize, len: usize) -> Result<Self::V> {
        self.apply(Op::Narrow { axis, start, len }, &[x])
    }
    fn conv1d(
        &mut self,
        x: &Self::V,
        w: &Self::V,
        bias: Option<&Self::V>,
        spec: ConvSpec,
    ) -> Result<Self::V> {
        match bias {
            Some(b) => self.apply(Op::Conv1d(spec), &[x, w, b]),
            None => self.apply(Op::Conv1d(spec), &[x, w]),
        }
    }
    fn conv_transpose1d(
        &mut self,
        x: &Self::V,
        w: &Self::V,
        bias: Option<&Self::V>,
        stride: usize,
        padding: usize,
    ) -> Result<Self::V> {
        let op = Op::ConvTranspose1d { stride, padding };
        match bias {
            Some(b) => self.apply(op, &[x, w, b]),
            None => self.apply(op, &[x, w]),
        }
    }
    fn pad_reflect(&mut self, x: &Self::V, left: usize, right: usize) -> Result<Self::V> {
        self.apply(Op::PadReflect { left, right }, &[x])
    }
    fn avg_pool1d(
        &mut self,
        x: &Self::V,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self::V> {
        self.apply(
            Op::AvgPool1d {
                kernel,
                stride,
                padding,
            },
            &[x],
        )
    }
    fn unary(&mut self, x: &Self::V, u: Unary) -> Result<Self::V> {
        self.apply(Op::Unary(u), &[x])
    }
    fn tanh(&mut self, x: &Self::V) -> Result<Self::V> {
        self.unary(x, Unary::Tanh)
    }
    fn gelu(&mut self, x: &Self::V) -> Result<Self::V> {
        self.unary(x, Unary::Gelu)
    }
    fn leaky_relu(&mut self, x: &Self::V, slope: f64) -> Result<Self::V> {
        self.unary(x, Unary::LeakyRelu(slope))
    }
    fn abs(&mut self, x: &Self::V) -> Result<Self::V> {
        self.unary(x, Unary::Abs)
    }
    fn square(&mut self, x: &Self::V) -> Result<Self::V> {
        self.unary(x, Unary::Square)
    }
    fn softmax(&mut self, x: &Self::V) -> Result<Self::V> {
        self.apply(Op::Softmax, &[x])
    }
    fn layer_norm(
        &mut self,
        x: &Self::V,
        gamma: &Self::V,
        beta: &Self::V,
        eps: f64,
    ) -> Result<Self::V> {
        self.apply(Op::LayerNorm { eps }, &[x, gamma, beta])
    }
    fn mean_all(&mut self, x: &Self::V) -> Result<Self::V> {
        self.apply(Op::MeanAll, &[x])
    }
    fn sum_all(&mut self, x: &Self::V) -> Result<Self::V> {
        self.apply(Op::SumAll, &[x])
    }
    /// Inverted dropout; identity outside training or when `p == 0`.
    fn dropout(&mut self, x: Self::V, p: f64) -> Result<Self::V> {
        if !self.training() || p <= 0.0 {
            return Ok(x);
        }
        let n = self.value(&x).len();
        let mask = self.dropout_mask(n, p);
        self.apply(Op::Dropout { mask }, &[&x])
    }
}

fn make_dropout_mask<T: Real>(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<T> {
    let keep = T::from_f64(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect()
}

/// Tape-free evaluation. Intermediates are dropped as soon as model code
/// releases them.
pub struct Eager {
    training: bool,
    rng: ChaCha8Rng,
}

impl Eager {
    /// Evaluation mode (dropout disabled).
    pub fn new() -> Self {
        Self {
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

impl Default for Eager {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Backend<'a, T> for Eager {
    type V = Cow<'a, Tensor<T>>;

    fn value<'s>(&'s self, v: &'s Self::V) -> &'s Tensor<T> {
        v.as_ref()
    }
    fn constant(&mut self, t: Tensor<T>) -> Self::V {
        Cow::Owned(t)
    }
    fn param(&mut self, store: &'a ParamStore<T>, id: ParamId) -> Self::V {
        Cow::Borrowed(store.get(id))
    }
    fn apply(&mut self, op: Op<T>, inputs: &[&Self::V]) -> Result<Self::V> {
        let ins: Vec<&Tensor<T>> = inputs.iter().map(|v| v.as_ref()).collect();
        Ok(Cow::Owned(kernels::forward(&op, &ins)?))
    }
    fn training(&self) -> bool {
        self.training
    }
    fn dropout_mask(&mut self, n: usize, p: f64) -> Vec<T> {
        make_dropout_mask(&mut self.rng, n, p)
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Option<Op<T>>,
    inputs: Vec<usize>,
    needs_grad: bool,
    param: Option<ParamKey>,
}

/// A recording backend. Parameters from trainable groups (and inputs created
/// with [`Graph::input`]) receive gradients from [`Graph::backward`].
pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    trainable: Vec<u32>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<'a, T: Real> Graph<'a, T> {
    /// `training` enables dropout; `seed` drives the dropout masks.
    pub fn new(training: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            trainable: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Marks a parameter group as trainable. Parameters of other groups act
    /// as constants.
    pub fn train_group(&mut self, group: u32) -> &mut Self {
        if !self.trainable.contains(&group) {
            self.trainable.push(group);
        }
        self
    }

    /// A leaf whose gradient is reported by [`Grads::input`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), None, Vec::new(), true, None)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        value: Cow<'a, Tensor<T>>,
        op: Option<Op<T>>,
        inputs: Vec<usize>,
        needs_grad: bool,
        param: Option<ParamKey>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            needs_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(crate::error::shape_err!(
                "backward",
                "loss must have one element, got shape {:?}",
                root.value.shape()
            ));
        }
        let mut out = Grads {
            params: BTreeMap::new(),
            inputs: BTreeMap::new(),
        };
        if !root.needs_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(key) = node.param {
                accumulate(&mut out.params, key, g)?;
                continue;
            }
            let Some(op) = &node.op else {
                if node.needs_grad {
                    accumulate(&mut out.inputs, i, g)?;
                }
                continue;
            };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&j| self.nodes[j].needs_grad)
                .collect();
            if !needs.iter().any(|&n| n) {
                continue;
            }
            let ins: Vec<&Tensor<T>> = node
                .inputs
                .iter()
                .map(|&j| self.nodes[j].value.as_ref())
                .collect();
            let gin = kernels::backward(op, &ins, &node.value, &g, &needs)?;
            for (&j, gj) in node.inputs.iter().zip(gin) {
                if let Some(gj) = gj {
                    match &mut grads[j] {
                        Some(acc) => acc.add_assign(&gj)?,
                        slot @ None => *slot = Some(gj),
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<K: Ord, T: Real>(map: &mut BTreeMap<K, Tensor<T>>, key: K, g: Tensor<T>) -> Result<()> {
    match map.get_mut(&key) {
        Some(acc) => acc.add_assign(&g),
        None => {
            map.insert(key, g);
            Ok(())
        }
    }
}

impl<'a, T: Real> Backend<'a, T> for Graph<'a, T> {
    type V = Var;

    fn value<'s>(&'s self, v: &'s Var) -> &'s Tensor<T> {
        self.nodes[v.0].value.as_ref()
    }
    fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), None, Vec::new(), false, None)
    }
    fn param(&mut self, store: &'a ParamStore<T>, id: ParamId) -> Var {
        let key = store.key(id);
        let trainable = self.trainable.contains(&key.group);
        self.push(
            Cow::Borrowed(store.get(id)),
            None,
            Vec::new(),
            trainable,
            trainable.then_some(key),
        )
    }
    fn apply(&mut self, op: Op<T>, inputs: &[&Var]) -> Result<Var> {
        let value = {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(|v| self.nodes[v.0].value.as_ref()).collect();
            kernels::forward(&op, &ins)?
        };
        let idx: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let needs_grad = idx.iter().any(|&j| self.nodes[j].needs_grad);
        // Nodes that cannot receive gradient do not need their op kept.
        let op = needs_grad.then_some(op);
        Ok(self.push(Cow::Owned(value), op, idx, needs_grad, None))
    }
    fn training(&self) -> bool {
        self.training
    }
    fn dropout_mask(&mut self, n: usize, p: f64) -> Vec<T> {
        make_dropout_mask(&mut self.rng, n, p)
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Grads<T> {
    params: BTreeMap<ParamKey, Tensor<T>>,
    inputs: BTreeMap<usize, Tensor<T>>,
}

impl<T: Real> Grads<T> {
    pub fn param(&self, key: ParamKey) -> Option<&Tensor<T>> {
        self.params.get(&key)
    }

    pub fn input(&self, v: Var) -> Option<&Tensor<T>> {
        self.inputs.get(&v.0)
    }

    /// Gradients of one store, indexed by parameter id (`None` when unused).
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        (0..store.len())
            .map(|i| self.params.get(&store.key(ParamId(i))).cloned())
            .collect()
    }

    /// Sum of squared gradient entries over a parameter group.
    pub fn group_sq_norm(&self, group: u32) -> f64 {
        self.params
            .iter()
            .filter(|(k, _)| k.group == group)
            .flat_map(|(_, t)| t.data().iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum()
    }
}
