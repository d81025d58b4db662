use super::kernels::{self, ConvSpec};
use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weights: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2 {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    LeakyRelu {
        input: Var,
        alpha: T,
    },
    Sigmoid {
        input: Var,
    },
    Exp {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    SliceChannels {
        input: Var,
        start: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Blend {
        switch: Var,
        a: Var,
        b: Var,
    },
    AvgPoolTo {
        input: Var,
    },
    Sum {
        input: Var,
    },
    WeightedSum {
        input: Var,
        weights: Tensor<T>,
    },
    /// Scalar whose input gradient was computed alongside its value.
    Fused {
        input: Var,
        grad: Tensor<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weights,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weights];
                v.extend(bias);
                v
            }
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Concat { inputs } => inputs.clone(),
            Op::Add { a, b } => vec![*a, *b],
            Op::Blend { switch, a, b } => vec![*switch, *a, *b],
            Op::MaxPool2 { input, .. }
            | Op::Upsample2 { input }
            | Op::LeakyRelu { input, .. }
            | Op::Sigmoid { input }
            | Op::Exp { input }
            | Op::SliceChannels { input, .. }
            | Op::AvgPoolTo { input }
            | Op::Sum { input }
            | Op::WeightedSum { input, .. }
            | Op::Fused { input, .. } => vec![*input],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of executed operations. Values are immutable once
/// recorded; [`Tape::backward`] replays the record in reverse.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Tracked input (a parameter or an input under gradient check).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weights: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    ) -> Result<Var> {
        let value = kernels::conv2d(
            self.value(input),
            self.value(weights),
            bias.map(|b| self.value(b).data()),
            &spec,
        )?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weights,
                bias,
                spec,
            },
        ))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (value, argmax) = kernels::maxpool2(self.value(input))?;
        Ok(self.push(value, Op::MaxPool2 { input, argmax }))
    }

    pub fn upsample_nearest2(&mut self, input: Var) -> Var {
        let value = kernels::upsample_nearest2(self.value(input));
        self.push(value, Op::Upsample2 { input })
    }

    /// Training-mode batch norm over batch statistics. Returns the output and
    /// the batch mean and biased variance for the running-statistics update.
    pub fn batchnorm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let fwd = kernels::batchnorm_train(
            self.value(input),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        )?;
        let var = self.push(
            fwd.output,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
                training: true,
            },
        );
        Ok((var, fwd.batch_mean, fwd.batch_var))
    }

    pub fn batchnorm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let fwd = kernels::batchnorm_eval(
            self.value(input),
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            running_var,
            eps,
        )?;
        Ok(self.push(
            fwd.output,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
                training: false,
            },
        ))
    }

    pub fn leaky_relu(&mut self, input: Var, alpha: T) -> Var {
        let value = kernels::leaky_relu(self.value(input), alpha);
        self.push(value, Op::LeakyRelu { input, alpha })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = kernels::sigmoid(self.value(input));
        self.push(value, Op::Sigmoid { input })
    }

    pub fn exp(&mut self, input: Var) -> Var {
        let value = kernels::exp(self.value(input));
        self.push(value, Op::Exp { input })
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let value = kernels::concat_channels(&values)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        ))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let value = kernels::slice_channels(self.value(input), start, len)?;
        Ok(self.push(value, Op::SliceChannels { input, start }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::add(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn blend(&mut self, switch: Var, a: Var, b: Var) -> Result<Var> {
        let value = kernels::blend(self.value(switch), self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Blend { switch, a, b }))
    }

    pub fn avgpool_to(&mut self, input: Var, height: usize, width: usize) -> Result<Var> {
        let value = kernels::avgpool_to(self.value(input), height, width)?;
        Ok(self.push(value, Op::AvgPoolTo { input }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum { input })
    }

    /// `sum(input * weights)` for a constant weight tensor.
    pub fn weighted_sum(&mut self, input: Var, weights: Tensor<T>) -> Result<Var> {
        let x = self.value(input);
        if x.shape() != weights.shape() {
            return Err(Error::Shape(format!(
                "weighted sum of {} with weights {}",
                x.shape(),
                weights.shape()
            )));
        }
        let total = x
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum { input, weights }))
    }

    /// Records a scalar function of `input` whose gradient the caller already
    /// computed (used by losses with hand-derived gradients).
    pub fn fused_scalar(&mut self, input: Var, value: T, grad: Tensor<T>) -> Result<Var> {
        if grad.shape() != self.shape(input) {
            return Err(Error::Shape(format!(
                "fused gradient {} for input {}",
                grad.shape(),
                self.shape(input)
            )));
        }
        Ok(self.push(Tensor::scalar(value), Op::Fused { input, grad }))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_shape = self.shape(loss);
        if loss_shape.numel() != 1 {
            return Err(Error::Tape(format!(
                "loss must be a scalar, got {loss_shape}"
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_shape, T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (var, contribution) in self.input_grads(i, &g)? {
                if self.nodes[var.0].requires_grad {
                    accumulate(&mut grads[var.0], contribution);
                }
            }
            // Intermediate gradients are dropped once propagated.
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn input_grads(&self, node: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let op = &self.nodes[node].op;
        let output = &self.nodes[node].value;
        let out = match op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weights,
                bias,
                spec,
            } => {
                let want_input = self.requires_grad(*input);
                let cg = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*weights),
                    spec,
                    g,
                    want_input,
                )?;
                let mut v = vec![(*weights, cg.weights)];
                if let Some(dx) = cg.input {
                    v.push((*input, dx));
                }
                if let Some(b) = bias {
                    v.push((*b, Tensor::from_parts(self.shape(*b), cg.bias)));
                }
                v
            }
            Op::MaxPool2 { input, argmax } => {
                vec![(
                    *input,
                    kernels::maxpool2_backward(self.shape(*input), argmax, g),
                )]
            }
            Op::Upsample2 { input } => vec![(*input, kernels::upsample_nearest2_backward(g))],
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let bg = kernels::batchnorm_backward(
                    g,
                    xhat,
                    inv_std,
                    self.value(*gamma).data(),
                    *training,
                );
                vec![
                    (*input, bg.input),
                    (*gamma, Tensor::from_parts(self.shape(*gamma), bg.gamma)),
                    (*beta, Tensor::from_parts(self.shape(*beta), bg.beta)),
                ]
            }
            Op::LeakyRelu { input, alpha } => {
                let x = self.value(*input);
                let d = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &g)| if x > T::zero() { g } else { *alpha * g })
                    .collect();
                vec![(*input, Tensor::from_parts(x.shape(), d))]
            }
            Op::Sigmoid { input } => {
                let y = output;
                let d = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &g)| g * y * (T::one() - y))
                    .collect();
                vec![(*input, Tensor::from_parts(y.shape(), d))]
            }
            Op::Exp { input } => {
                let y = output;
                let d = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &g)| g * y)
                    .collect();
                vec![(*input, Tensor::from_parts(y.shape(), d))]
            }
            Op::Concat { inputs } => {
                let mut start = 0;
                let mut v = Vec::with_capacity(inputs.len());
                for &inp in inputs {
                    let c = self.shape(inp).c;
                    v.push((inp, kernels::slice_channels(g, start, c)?));
                    start += c;
                }
                v
            }
            Op::SliceChannels { input, start } => {
                let s = self.shape(*input);
                let gs = g.shape();
                let mut d = vec![T::zero(); s.numel()];
                let plane = s.plane();
                for n in 0..s.n {
                    let src = &g.data()[n * gs.c * plane..(n + 1) * gs.c * plane];
                    let base = (n * s.c + start) * plane;
                    d[base..base + gs.c * plane].copy_from_slice(src);
                }
                vec![(*input, Tensor::from_parts(s, d))]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Blend { switch, a, b } => {
                let (sv, av, bv) = (self.value(*switch), self.value(*a), self.value(*b));
                let s = av.shape();
                let plane = s.plane();
                let mut ds = vec![T::zero(); sv.numel()];
                let mut da = vec![T::zero(); s.numel()];
                let mut db = vec![T::zero(); s.numel()];
                for n in 0..s.n {
                    for c in 0..s.c {
                        let base = (n * s.c + c) * plane;
                        for p in 0..plane {
                            let i = base + p;
                            let w = sv.data()[n * plane + p];
                            let gi = g.data()[i];
                            da[i] = w * gi;
                            db[i] = (T::one() - w) * gi;
                            ds[n * plane + p] += gi * (av.data()[i] - bv.data()[i]);
                        }
                    }
                }
                vec![
                    (*switch, Tensor::from_parts(sv.shape(), ds)),
                    (*a, Tensor::from_parts(s, da)),
                    (*b, Tensor::from_parts(s, db)),
                ]
            }
            Op::AvgPoolTo { input } => {
                vec![(*input, kernels::avgpool_to_backward(self.shape(*input), g)?)]
            }
            Op::Sum { input } => {
                vec![(*input, Tensor::full(self.shape(*input), g.item()))]
            }
            Op::WeightedSum { input, weights } => {
                let s = g.item();
                vec![(*input, weights.map(|w| w * s))]
            }
            Op::Fused { input, grad } => {
                let s = g.item();
                vec![(*input, grad.map(|w| w * s))]
            }
        };
        Ok(out)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, contribution: Tensor<T>) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(contribution.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(contribution),
    }
}

/// Gradients of a loss with respect to every tracked leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a tracked leaf; `None` for constants and intermediates.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
