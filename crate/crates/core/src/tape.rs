//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value; the tape is
//! therefore in topological order by construction. [`Tape::backward`] walks
//! the nodes in reverse and accumulates gradients additively across fan-out.
//!
//! The tape doubles as the cost instrument: it counts the elements of every
//! recorded operation output ([`Tape::stored_elements`]) and the FLOPs of
//! every convolution ([`Tape::conv_flops`]).

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::optim::{ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(#[allow(dead_code)] ParamId),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample2(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Offset(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    SliceChannels {
        input: Var,
        start: usize,
    },
    BroadcastChannels(Var),
    Sum(Var),
    Mean(Var),
    SelectBatch {
        when_true: Var,
        when_false: Var,
        mask: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound_params: HashMap<ParamId, Var>,
    conv_flops: u64,
    stored_elements: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total element count of all recorded operation outputs (leaves excluded).
    pub fn stored_elements(&self) -> usize {
        self.stored_elements
    }

    /// FLOPs of all recorded convolutions (2 × multiply-adds, forward only).
    pub fn conv_flops(&self) -> u64 {
        self.conv_flops
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        if !matches!(op, Op::Leaf | Op::Param(_)) {
            self.stored_elements += value.len();
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn zeros(&mut self, shape: Shape) -> Var {
        self.leaf(Tensor::zeros(shape))
    }

    /// Binds a parameter onto the tape. Repeated calls return the same node so
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound_params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param(id));
        self.bound_params.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let g = ConvGeometry::new(self.shape(input), self.shape(weight))?;
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        )?;
        self.conv_flops += g.flops();
        Ok(self.push(out, Op::Conv2d { input, weight, bias }))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2_forward(self.value(input))?;
        Ok(self.push(out, Op::MaxPool2 { input, argmax }))
    }

    pub fn upsample2(&mut self, input: Var) -> Var {
        let out = kernels::upsample2_forward(self.value(input));
        self.push(out, Op::Upsample2(input))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: ta.shape(),
                right: tb.shape(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("hadamard", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor))
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, delta: f32) -> Var {
        let out = self.value(a).map(|v| v + delta);
        self.push(out, Op::Offset(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f32::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f32::abs);
        self.push(out, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.push(out, Op::Square(a))
    }

    /// Channels `start..start + count`.
    pub fn slice_channels(&mut self, input: Var, start: usize, count: usize) -> Result<Var> {
        let t = self.value(input);
        let s = t.shape();
        if count == 0 || start + count > s.channels {
            return Err(Error::InvalidShape(format!(
                "channel slice {start}..{} of {s}",
                start + count
            )));
        }
        let out_shape = Shape { channels: count, ..s };
        let plane = s.plane();
        let mut data = Vec::with_capacity(out_shape.numel());
        for b in 0..s.batch {
            let base = (b * s.channels + start) * plane;
            data.extend_from_slice(&t.data()[base..base + count * plane]);
        }
        let out = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(out, Op::SliceChannels { input, start }))
    }

    /// Repeats a single-channel tensor across `channels` channels.
    pub fn broadcast_channels(&mut self, input: Var, channels: usize) -> Result<Var> {
        let t = self.value(input);
        let s = t.shape();
        if s.channels != 1 {
            return Err(Error::InvalidShape(format!(
                "channel broadcast needs a single-channel input, got {s}"
            )));
        }
        let mut data = Vec::with_capacity(s.numel() * channels);
        for b in 0..s.batch {
            let p = &t.data()[b * s.plane()..(b + 1) * s.plane()];
            for _ in 0..channels {
                data.extend_from_slice(p);
            }
        }
        let out = Tensor::from_vec(Shape { channels, ..s }, data)?;
        Ok(self.push(out, Op::BroadcastChannels(input)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum() as f32;
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = (t.sum() / t.len() as f64) as f32;
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    /// Per-sample choice: sample `i` comes from `when_true` if `mask[i]`,
    /// otherwise from `when_false`.
    pub fn select_batch(&mut self, mask: &[bool], when_true: Var, when_false: Var) -> Result<Var> {
        let (a, b) = (self.value(when_true), self.value(when_false));
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "select_batch",
                left: a.shape(),
                right: b.shape(),
            });
        }
        if mask.len() != a.shape().batch {
            return Err(Error::InvalidShape(format!(
                "mask of {} entries for batch {}",
                mask.len(),
                a.shape().batch
            )));
        }
        let per = a.len() / mask.len();
        let mut data = Vec::with_capacity(a.len());
        for (i, &m) in mask.iter().enumerate() {
            let src = if m { a } else { b };
            data.extend_from_slice(&src.data()[i * per..(i + 1) * per]);
        }
        let out = Tensor::from_vec(a.shape(), data)?;
        Ok(self.push(
            out,
            Op::SelectBatch {
                when_true,
                when_false,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if !ls.is_scalar() {
            return Err(Error::NotScalar(ls));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(ls, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(g);
                }
                Op::Conv2d { input, weight, bias } => {
                    let cg = kernels::conv2d_backward(self.value(*input), self.value(*weight), &g)?;
                    accumulate(&mut grads, *input, cg.input);
                    accumulate(&mut grads, *weight, cg.weight);
                    if let Some(b) = bias {
                        let bt = Tensor::from_vec(self.shape(*b), cg.bias)?;
                        accumulate(&mut grads, *b, bt);
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    let gi = kernels::maxpool2_backward(self.shape(*input), argmax, &g);
                    accumulate(&mut grads, *input, gi);
                }
                Op::Upsample2(input) => {
                    let gi = kernels::upsample2_backward(self.shape(*input), &g);
                    accumulate(&mut grads, *input, gi);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = zip_map(&g, self.value(*b), |d, y| d * y);
                    let gb = zip_map(&g, self.value(*a), |d, x| d * x);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, g.map(|v| v * f)),
                Op::Offset(a) => accumulate(&mut grads, *a, g),
                Op::Sigmoid(a) => {
                    let ga = zip_map(&g, &node.value, |d, y| d * y * (1.0 - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = zip_map(&g, &node.value, |d, y| d * (1.0 - y * y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Abs(a) => {
                    let ga = zip_map(&g, self.value(*a), |d, x| {
                        if x > 0.0 {
                            d
                        } else if x < 0.0 {
                            -d
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = zip_map(&g, self.value(*a), |d, x| 2.0 * x * d);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceChannels { input, start } => {
                    let s = self.shape(*input);
                    let count = g.shape().channels;
                    let plane = s.plane();
                    let mut gi = Tensor::zeros(s);
                    for b in 0..s.batch {
                        let dst = (b * s.channels + start) * plane;
                        let src = b * count * plane;
                        gi.data_mut()[dst..dst + count * plane]
                            .copy_from_slice(&g.data()[src..src + count * plane]);
                    }
                    accumulate(&mut grads, *input, gi);
                }
                Op::BroadcastChannels(input) => {
                    let s = self.shape(*input);
                    let channels = g.shape().channels;
                    let plane = s.plane();
                    let mut gi = Tensor::zeros(s);
                    for b in 0..s.batch {
                        let dst = &mut gi.data_mut()[b * plane..(b + 1) * plane];
                        for c in 0..channels {
                            let src = &g.data()[(b * channels + c) * plane..(b * channels + c + 1) * plane];
                            dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                        }
                    }
                    accumulate(&mut grads, *input, gi);
                }
                Op::Sum(a) => {
                    let ga = Tensor::full(self.shape(*a), g.item());
                    accumulate(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let s = self.shape(*a);
                    let ga = Tensor::full(s, g.item() / s.numel() as f32);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SelectBatch {
                    when_true,
                    when_false,
                    mask,
                } => {
                    let per = g.len() / mask.len();
                    let mut gt = Tensor::zeros(g.shape());
                    let mut gf = Tensor::zeros(g.shape());
                    for (i, &m) in mask.iter().enumerate() {
                        let dst = if m { &mut gt } else { &mut gf };
                        dst.data_mut()[i * per..(i + 1) * per]
                            .copy_from_slice(&g.data()[i * per..(i + 1) * per]);
                    }
                    accumulate(&mut grads, *when_true, gt);
                    accumulate(&mut grads, *when_false, gf);
                }
            }
        }

        let params = self
            .bound_params
            .iter()
            .map(|(&id, &v)| (id, v))
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("zip_map operands share a shape")
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(e, &d)| *e += d),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients produced by [`Tape::backward`]. Only leaves and parameters keep
/// their gradient; intermediate gradients are released during the sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of a leaf or parameter node. `None` when the loss does not
    /// depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds parameter gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, v) in &self.params {
            if let Some(g) = self.get(v) {
                store.get_mut(id).accumulate_grad(g);
            }
        }
    }
}
