use rand::Rng;

use super::kernels::{self, ConvGeom, PoolGeom};
use super::{split_axis, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Hadamard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationKind {
    Relu,
    Sigmoid,
    Tanh,
}

/// Which statistics a batch-norm layer normalizes with.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a, T> {
    /// Per-channel batch statistics; the caller folds the returned
    /// [`BatchStats`] into its running estimates.
    Train,
    /// Running estimates. `None` means they were never populated.
    Eval {
        running_mean: Option<&'a Tensor<T>>,
        running_var: Option<&'a Tensor<T>>,
    },
}

/// Per-channel statistics observed by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n-1) variance, the convention used for running estimates.
    pub var: Vec<T>,
}

impl<T: Real> BatchStats<T> {
    pub fn update_running(
        &self,
        running_mean: &mut Tensor<T>,
        running_var: &mut Tensor<T>,
        momentum: T,
    ) {
        let keep = T::one() - momentum;
        for (r, &m) in running_mean.data_mut().iter_mut().zip(&self.mean) {
            *r = keep * *r + momentum * m;
        }
        for (r, &v) in running_var.data_mut().iter_mut().zip(&self.var) {
            *r = keep * *r + momentum * v;
        }
    }
}

enum Op<T> {
    Leaf,
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
        broadcast: bool,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    AvgPool {
        input: Var,
        geom: PoolGeom,
    },
    Activation {
        input: Var,
        kind: ActivationKind,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Affine {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Matmul {
        a: Var,
        b: Var,
    },
    Transpose {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    WeightedBce {
        score: Var,
        targets: Vec<T>,
        alpha: T,
        beta: T,
        eps: T,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Hadamard => "hadamard",
            },
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool { .. } => "avg_pool2d",
            Op::Activation { kind, .. } => match kind {
                ActivationKind::Relu => "relu",
                ActivationKind::Sigmoid => "sigmoid",
                ActivationKind::Tanh => "tanh",
            },
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::BatchNorm { .. } => "batch_norm2d",
            Op::Dropout { .. } => "dropout",
            Op::Affine { .. } => "affine",
            Op::Matmul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Softmax { .. } => "softmax",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Scale { .. } => "scale",
            Op::WeightedBce { .. } => "weighted_bce",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } | Op::Matmul { a, b } => vec![*a, *b],
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => std::iter::once(*input)
                .chain(std::iter::once(*kernel))
                .chain(*bias)
                .collect(),
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Affine {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            Op::AvgPool { input, .. }
            | Op::Activation { input, .. }
            | Op::Slice { input, .. }
            | Op::Dropout { input, .. }
            | Op::Transpose { input }
            | Op::Reshape { input }
            | Op::Softmax { input, .. }
            | Op::Sum { input }
            | Op::Mean { input }
            | Op::Scale { input, .. } => vec![*input],
            Op::WeightedBce { score, .. } => vec![*score],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in execution order and replays them backwards.
///
/// A tape is single-use: after [`Tape::backward`] it refuses new records
/// and a second backward until [`Tape::reset`] is called.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Option<Vec<Option<Vec<T>>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads = None;
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.check_open()?;
        value.ensure_finite("leaf")?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let grads = self.grads.as_ref()?;
        let g = grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.value(v).shape().to_vec(), g.clone()))
    }

    fn check_open(&self) -> Result<()> {
        if self.grads.is_some() {
            Err(Error::State(
                "tape already consumed by backward; reset it before recording".into(),
            ))
        } else {
            Ok(())
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Result<Var> {
        self.check_open()?;
        let value = Tensor::from_parts(shape, data);
        value.ensure_finite(op.name())?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- forward operations -------------------------------------------------

    /// Elementwise `a (op) b`. `b` may also be a per-channel vector whose
    /// length equals `a`'s axis-1 extent (bias broadcast).
    pub fn ew_binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let broadcast = if sa == sb {
            false
        } else if sb.len() == 1 && sa.len() >= 2 && sa[1] == sb[0] {
            true
        } else {
            return Err(Error::shape(
                "ew_binary",
                format!("cannot combine {sa:?} with {sb:?}"),
            ));
        };
        let shape = sa.to_vec();
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Hadamard => x * y,
        };
        let data = if broadcast {
            let (_, c, inner) = split_axis(&shape, 1);
            va.iter()
                .enumerate()
                .map(|(i, &x)| f(x, vb[(i / inner) % c]))
                .collect()
        } else {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        };
        self.push(
            shape,
            data,
            Op::Binary {
                a,
                b,
                kind,
                broadcast,
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew_binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew_binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew_binary(a, b, BinaryKind::Hadamard)
    }

    /// Cross-correlation over an NCHW input with an OIKhKw kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(kernel), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.o] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?}, expected [{}]", self.shape(b), geom.o),
                ));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        self.push(
            geom.output_shape(),
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        )
    }

    pub fn avg_pool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let geom = PoolGeom::new(self.shape(input), k, stride)?;
        let s = self.shape(input);
        let shape = vec![s[0], s[1], geom.ho, geom.wo];
        let out = kernels::avg_pool_forward(self.value(input).data(), &geom);
        self.push(shape, out, Op::AvgPool { input, geom })
    }

    pub fn activation(&mut self, input: Var, kind: ActivationKind) -> Result<Var> {
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| match kind {
                ActivationKind::Relu => v.max(T::zero()),
                ActivationKind::Sigmoid => sigmoid(v),
                ActivationKind::Tanh => v.tanh(),
            })
            .collect();
        self.push(x.shape().to_vec(), data, Op::Activation { input, kind })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, ActivationKind::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.activation(input, ActivationKind::Sigmoid)
    }

    pub fn tanh(&mut self, input: Var) -> Result<Var> {
        self.activation(input, ActivationKind::Tanh)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat(&parts, axis)?;
        let (shape, data) = (out.shape().to_vec(), out.into_data());
        self.push(
            shape,
            data,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Channel-axis concatenation of two NCHW tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape(
                "concat_channels",
                format!("{sa:?} and {sb:?} differ outside the channel axis"),
            ));
        }
        self.concat(&[a, b], 1)
    }

    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(input).narrow(axis, start, len)?;
        let (shape, data) = (out.shape().to_vec(), out.into_data());
        self.push(shape, data, Op::Slice { input, axis, start })
    }

    /// Batch normalization over the N, H and W axes of an NCHW tensor.
    ///
    /// Returns the normalized output and, in train mode, the observed
    /// statistics for the caller's running estimates.
    pub fn batch_norm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(input).to_vec();
        let &[n, c, h, w] = shape.as_slice() else {
            return Err(Error::shape("batch_norm2d", format!("expected NCHW, got {shape:?}")));
        };
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape(
                    "batch_norm2d",
                    format!("affine parameter shape {:?}, expected [{c}]", self.shape(p)),
                ));
            }
        }
        let hw = h * w;
        let count = n * hw;
        let x = self.value(input).data();
        let at = |b: usize, ch: usize| (b * c + ch) * hw;

        let (mean, var, train) = match mode {
            BatchNormMode::Train => {
                if count < 2 {
                    return Err(Error::Argument(format!(
                        "train-mode batch norm needs at least 2 values per channel, got {count}"
                    )));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let cnt = T::from_usize(count).unwrap();
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s += x[at(b, ch)..at(b, ch) + hw].iter().copied().sum::<T>();
                    }
                    let m = s / cnt;
                    let mut ss = T::zero();
                    for b in 0..n {
                        for &v in &x[at(b, ch)..at(b, ch) + hw] {
                            ss += (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = ss / cnt;
                }
                (mean, var, true)
            }
            BatchNormMode::Eval {
                running_mean: Some(rm),
                running_var: Some(rv),
            } => {
                if rm.shape() != [c] || rv.shape() != [c] {
                    return Err(Error::shape("batch_norm2d", "running statistics shape mismatch"));
                }
                (rm.data().to_vec(), rv.data().to_vec(), false)
            }
            BatchNormMode::Eval { .. } => {
                return Err(Error::State(
                    "eval-mode batch norm without populated running statistics".into(),
                ))
            }
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = at(b, ch);
                for i in base..base + hw {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let stats = train.then(|| {
            let bessel = T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap();
            BatchStats {
                mean: mean.clone(),
                var: var.iter().map(|&v| v * bessel).collect(),
            }
        });
        let var_out = self.push(
            shape,
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        )?;
        Ok((var_out, stats))
    }

    /// Inverted dropout. In eval mode (`train == false`) this is the identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        p: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Argument(format!("dropout probability {p} not in [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(input);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let x = self.value(input);
        let mask: Vec<T> = (0..x.len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        self.push(x.shape().to_vec(), data, Op::Dropout { input, mask })
    }

    /// `input · weight + bias` for an N×F input and F×G weight.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(input), self.shape(weight), self.shape(bias));
        let (&[n, f], &[fw, g]) = (sx, sw) else {
            return Err(Error::shape("affine", format!("expected 2-D operands, got {sx:?} and {sw:?}")));
        };
        if f != fw || sb != [g] {
            return Err(Error::shape(
                "affine",
                format!("input {sx:?}, weight {sw:?}, bias {sb:?}"),
            ));
        }
        let mut out = vec![T::zero(); n * g];
        let bv = self.value(bias).data();
        for row in out.chunks_mut(g) {
            row.copy_from_slice(bv);
        }
        T::gemm(
            n,
            f,
            g,
            T::one(),
            self.value(input).data(),
            f,
            1,
            self.value(weight).data(),
            g,
            1,
            T::one(),
            &mut out,
            g,
            1,
        );
        self.push(
            vec![n, g],
            out,
            Op::Affine {
                input,
                weight,
                bias,
            },
        )
    }

    /// Batched matrix product over the trailing two axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = matmul_dims(&sa, &sb)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &va[i * m * k..],
                k,
                1,
                &vb[i * k * n..],
                n,
                1,
                T::zero(),
                &mut out[i * m * n..],
                n,
                1,
            );
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        self.push(shape, out, Op::Matmul { a, b })
    }

    /// Swaps the trailing two axes.
    pub fn transpose(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose", format!("rank {} < 2", s.len())));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let x = self.value(input).data();
        let mut out = vec![T::zero(); x.len()];
        for (mat, dst) in x.chunks(r * c).zip(out.chunks_mut(r * c)) {
            transpose_into(mat, r, c, dst);
        }
        let mut shape = s.clone();
        let rank = shape.len();
        shape.swap(rank - 2, rank - 1);
        self.push(shape, out, Op::Transpose { input })
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        let (shape, data) = (out.shape().to_vec(), out.into_data());
        self.push(shape, data, Op::Reshape { input })
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let x = self.value(input).data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * extent + k) * inner + i;
                let max = (0..extent).map(|k| x[idx(k)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for k in 0..extent {
                    let e = (x[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..extent {
                    out[idx(k)] = out[idx(k)] / total;
                }
            }
        }
        self.push(shape, out, Op::Softmax { input, axis })
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).sum();
        self.push(vec![1], vec![s], Op::Sum { input })
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let m = x.sum() / T::from_usize(x.len()).unwrap();
        self.push(vec![1], vec![m], Op::Mean { input })
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let out = self.value(input).map(|v| v * factor);
        let (shape, data) = (out.shape().to_vec(), out.into_data());
        self.push(shape, data, Op::Scale { input, factor })
    }

    /// Mean weighted binary cross-entropy of probabilities `score` against
    /// 0/1 `targets`, with `alpha` on positive and `beta` on negative terms.
    /// Scores are clamped to `[eps, 1 - eps]` before the logarithm.
    pub fn weighted_bce(
        &mut self,
        score: Var,
        targets: &[T],
        alpha: T,
        beta: T,
        eps: T,
    ) -> Result<Var> {
        let p = self.value(score).data();
        if p.len() != targets.len() {
            return Err(Error::shape(
                "weighted_bce",
                format!("{} scores for {} targets", p.len(), targets.len()),
            ));
        }
        let n = T::from_usize(p.len()).unwrap();
        let mut total = T::zero();
        for (&pi, &y) in p.iter().zip(targets) {
            let pc = pi.max(eps).min(T::one() - eps);
            total += alpha * y * pc.ln() + beta * (T::one() - y) * (T::one() - pc).ln();
        }
        self.push(
            vec![1],
            vec![-total / n],
            Op::WeightedBce {
                score,
                targets: targets.to_vec(),
                alpha,
                beta,
                eps,
            },
        )
    }

    // ---- reverse pass -------------------------------------------------------

    /// Accumulates d`loss`/d`leaf` for every leaf recorded with a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::State(
                "backward already ran on this tape; record a new graph first".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_with(loss, Tensor::scalar(T::one()))
    }

    /// Reverse pass from a non-scalar `output` seeded with the upstream
    /// gradient `seed` (same shape as the output).
    pub fn backward_with(&mut self, output: Var, seed: Tensor<T>) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::State(
                "backward already ran on this tape; record a new graph first".into(),
            ));
        }
        if seed.shape() != self.shape(output) {
            return Err(Error::shape(
                "backward",
                format!("seed shape {:?} for output {:?}", seed.shape(), self.shape(output)),
            ));
        }
        seed.ensure_finite("backward")?;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed.into_data());
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads)?;
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>, op: &'static str) -> Result<()> {
        if !self.needs(v) {
            return Ok(());
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot => *slot = Some(g),
        }
        Ok(())
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let name = node.op.name();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary {
                a,
                b,
                kind,
                broadcast,
            } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let shape = self.shape(*a);
                let (_, c, inner) = split_axis(shape, 1.min(shape.len() - 1));
                let b_at = |idx: usize| if *broadcast { vb[(idx / inner) % c] } else { vb[idx] };
                if self.needs(*a) {
                    let da = match kind {
                        BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                        BinaryKind::Hadamard => g.iter().enumerate().map(|(k, &gv)| gv * b_at(k)).collect(),
                    };
                    self.accumulate(grads, *a, da, name)?;
                }
                if self.needs(*b) {
                    let elem: Vec<T> = match kind {
                        BinaryKind::Add => g.to_vec(),
                        BinaryKind::Sub => g.iter().map(|&v| -v).collect(),
                        BinaryKind::Hadamard => g.iter().zip(va).map(|(&gv, &x)| gv * x).collect(),
                    };
                    let db = if *broadcast {
                        let mut acc = vec![T::zero(); c];
                        for (k, v) in elem.into_iter().enumerate() {
                            acc[(k / inner) % c] += v;
                        }
                        acc
                    } else {
                        elem
                    };
                    self.accumulate(grads, *b, db, name)?;
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let need_db = bias.is_some_and(|b| self.needs(b));
                let cg = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    geom,
                    (self.needs(*input), self.needs(*kernel), need_db),
                );
                if let Some(dx) = cg.input {
                    self.accumulate(grads, *input, dx, name)?;
                }
                if let Some(dk) = cg.kernel {
                    self.accumulate(grads, *kernel, dk, name)?;
                }
                if let (Some(b), Some(db)) = (bias, cg.bias) {
                    self.accumulate(grads, *b, db, name)?;
                }
            }
            Op::AvgPool { input, geom } => {
                self.accumulate(grads, *input, kernels::avg_pool_backward(g, geom), name)?;
            }
            Op::Activation { input, kind } => {
                let dx = g
                    .iter()
                    .zip(out)
                    .map(|(&gv, &y)| match kind {
                        ActivationKind::Relu => {
                            if y > T::zero() {
                                gv
                            } else {
                                T::zero()
                            }
                        }
                        ActivationKind::Sigmoid => gv * y * (T::one() - y),
                        ActivationKind::Tanh => gv * (T::one() - y * y),
                    })
                    .collect();
                self.accumulate(grads, *input, dx, name)?;
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let extent = self.shape(v)[*axis];
                    if self.needs(v) {
                        let mut part = Vec::with_capacity(outer * extent * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            part.extend_from_slice(&g[base..base + extent * inner]);
                        }
                        self.accumulate(grads, v, part, name)?;
                    }
                    offset += extent;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, extent, inner) = split_axis(self.shape(*input), *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![T::zero(); outer * extent * inner];
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *input, dx, name)?;
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = node.value.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let at = |b: usize, ch: usize| (b * c + ch) * hw;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        for k in at(b, ch)..at(b, ch) + hw {
                            dgamma[ch] += g[k] * xhat[k];
                            dbeta[ch] += g[k];
                        }
                    }
                }
                if self.needs(*input) {
                    let mut dx = vec![T::zero(); g.len()];
                    if *train {
                        let cnt = T::from_usize(n * hw).unwrap();
                        for ch in 0..c {
                            // Σ dxhat = γ Σ g,  Σ dxhat·xhat = γ Σ g·xhat
                            let sum_d = gam[ch] * dbeta[ch];
                            let sum_dx = gam[ch] * dgamma[ch];
                            let k0 = inv_std[ch] / cnt;
                            for b in 0..n {
                                for k in at(b, ch)..at(b, ch) + hw {
                                    let dxh = g[k] * gam[ch];
                                    dx[k] = k0 * (cnt * dxh - sum_d - xhat[k] * sum_dx);
                                }
                            }
                        }
                    } else {
                        for b in 0..n {
                            for ch in 0..c {
                                for k in at(b, ch)..at(b, ch) + hw {
                                    dx[k] = g[k] * gam[ch] * inv_std[ch];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *input, dx, name)?;
                }
                self.accumulate(grads, *gamma, dgamma, name)?;
                self.accumulate(grads, *beta, dbeta, name)?;
            }
            Op::Dropout { input, mask } => {
                let dx = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                self.accumulate(grads, *input, dx, name)?;
            }
            Op::Affine {
                input,
                weight,
                bias,
            } => {
                let (n, f) = (self.shape(*input)[0], self.shape(*input)[1]);
                let gcols = self.shape(*weight)[1];
                if self.needs(*input) {
                    let mut dx = vec![T::zero(); n * f];
                    T::gemm(n, gcols, f, T::one(), g, gcols, 1, self.value(*weight).data(), 1, gcols, T::zero(), &mut dx, f, 1);
                    self.accumulate(grads, *input, dx, name)?;
                }
                if self.needs(*weight) {
                    let mut dw = vec![T::zero(); f * gcols];
                    T::gemm(f, n, gcols, T::one(), self.value(*input).data(), 1, f, g, gcols, 1, T::zero(), &mut dw, gcols, 1);
                    self.accumulate(grads, *weight, dw, name)?;
                }
                let mut db = vec![T::zero(); gcols];
                for row in g.chunks(gcols) {
                    db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                }
                self.accumulate(grads, *bias, db, name)?;
            }
            Op::Matmul { a, b } => {
                let (batch, m, k, n) = matmul_dims(self.shape(*a), self.shape(*b))?;
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        // dA = dC · Bᵀ
                        T::gemm(m, n, k, T::one(), &g[i * m * n..], n, 1, &vb[i * k * n..], 1, n, T::zero(), &mut da[i * m * k..], k, 1);
                    }
                    self.accumulate(grads, *a, da, name)?;
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        // dB = Aᵀ · dC
                        T::gemm(k, m, n, T::one(), &va[i * m * k..], 1, k, &g[i * m * n..], n, 1, T::zero(), &mut db[i * k * n..], n, 1);
                    }
                    self.accumulate(grads, *b, db, name)?;
                }
            }
            Op::Transpose { input } => {
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let mut dx = vec![T::zero(); g.len()];
                for (mat, dst) in g.chunks(r * c).zip(dx.chunks_mut(r * c)) {
                    transpose_into(mat, r, c, dst);
                }
                self.accumulate(grads, *input, dx, name)?;
            }
            Op::Reshape { input } => {
                self.accumulate(grads, *input, g.to_vec(), name)?;
            }
            Op::Softmax { input, axis } => {
                let (outer, extent, inner) = split_axis(node.value.shape(), *axis);
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * extent + k) * inner + i;
                        let dot: T = (0..extent).map(|k| g[idx(k)] * out[idx(k)]).sum();
                        for k in 0..extent {
                            dx[idx(k)] = out[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *input, dx, name)?;
            }
            Op::Sum { input } => {
                let n = self.value(*input).len();
                self.accumulate(grads, *input, vec![g[0]; n], name)?;
            }
            Op::Mean { input } => {
                let n = self.value(*input).len();
                let v = g[0] / T::from_usize(n).unwrap();
                self.accumulate(grads, *input, vec![v; n], name)?;
            }
            Op::Scale { input, factor } => {
                let dx = g.iter().map(|&v| v * *factor).collect();
                self.accumulate(grads, *input, dx, name)?;
            }
            Op::WeightedBce {
                score,
                targets,
                alpha,
                beta,
                eps,
            } => {
                let p = self.value(*score).data();
                let n = T::from_usize(p.len()).unwrap();
                let dx = p
                    .iter()
                    .zip(targets)
                    .map(|(&pi, &y)| {
                        if pi < *eps || pi > T::one() - *eps {
                            T::zero()
                        } else {
                            -g[0] / n * (*alpha * y / pi - *beta * (T::one() - y) / (T::one() - pi))
                        }
                    })
                    .collect();
                self.accumulate(grads, *score, dx, name)?;
            }
        }
        Ok(())
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn transpose_into<T: Copy>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if sa.len() < 2 || sa.len() != sb.len() {
        return Err(Error::shape("matmul", format!("operands {sa:?} and {sb:?}")));
    }
    let r = sa.len();
    let (m, k, k2, n) = (sa[r - 2], sa[r - 1], sb[r - 2], sb[r - 1]);
    if k != k2 || sa[..r - 2] != sb[..r - 2] {
        return Err(Error::shape("matmul", format!("operands {sa:?} and {sb:?}")));
    }
    Ok((sa[..r - 2].iter().product(), m, k, n))
}
