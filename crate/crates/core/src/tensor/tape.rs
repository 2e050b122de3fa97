use super::kernels::{self, BnSaved, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::wavelet;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether layers that behave differently during training do so.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Every differentiable op kind the tape records.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Conv1d,
    BatchNorm1d,
    Relu,
    Linear,
    Dropout,
    ConcatChannels,
    Flatten,
    Add,
    Sum,
    WeightedSum,
    SoftmaxCrossEntropy,
    DwtLevel,
}

impl OpKind {
    pub const ALL: [OpKind; 12] = [
        OpKind::Conv1d,
        OpKind::BatchNorm1d,
        OpKind::Relu,
        OpKind::Linear,
        OpKind::Dropout,
        OpKind::ConcatChannels,
        OpKind::Flatten,
        OpKind::Add,
        OpKind::Sum,
        OpKind::WeightedSum,
        OpKind::SoftmaxCrossEntropy,
        OpKind::DwtLevel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv1d => "conv1d",
            OpKind::BatchNorm1d => "batchnorm1d",
            OpKind::Relu => "relu",
            OpKind::Linear => "linear",
            OpKind::Dropout => "dropout",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::Flatten => "flatten",
            OpKind::Add => "add",
            OpKind::Sum => "sum",
            OpKind::WeightedSum => "weighted_sum",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::DwtLevel => "dwt_level",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// How a batch-norm layer obtains its normalization statistics.
pub enum BnState<'a, T> {
    /// Normalize with batch statistics and fold them into the running
    /// estimates (momentum 0.1, unbiased variance).
    Train {
        running_mean: &'a mut [T],
        running_var: &'a mut [T],
    },
    /// Normalize with the running estimates.
    Eval {
        running_mean: &'a [T],
        running_var: &'a [T],
    },
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

enum Op<T> {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved<T>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Dropout {
        x: Var,
        // 0 or 1/(1-p) per element
        mask: Vec<T>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Reshape {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Dwt {
        x: Var,
        level: usize,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::BatchNorm { .. } => OpKind::BatchNorm1d,
            Op::Relu { .. } => OpKind::Relu,
            Op::Linear { .. } => OpKind::Linear,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Concat { .. } => OpKind::ConcatChannels,
            Op::Reshape { .. } => OpKind::Flatten,
            Op::Add { .. } => OpKind::Add,
            Op::Sum { .. } => OpKind::Sum,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
            Op::CrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::Dwt { .. } => OpKind::DwtLevel,
        })
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, so every node's inputs precede it.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every node of a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Scales the backward output of every op of `kind` by 1.5. Exists so
    /// the gradient checker can be shown to catch a broken backward pass.
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (batch, cin, len) = self.value(x).dims3()?;
        let (cout, wcin, kernel) = self.value(w).dims3().map_err(|_| {
            Error::Dimension(format!(
                "conv weight must be (out, in, kernel), got {:?}",
                self.shape(w)
            ))
        })?;
        if wcin != cin {
            return Err(Error::Dimension(format!(
                "conv input has {cin} channels but weight expects {wcin}"
            )));
        }
        if self.shape(b) != [cout] {
            return Err(Error::Dimension(format!(
                "conv bias must be ({cout}), got {:?}",
                self.shape(b)
            )));
        }
        if kernel % 2 == 0 {
            return Err(Error::Param(format!(
                "conv kernel size {kernel} is not odd"
            )));
        }
        if stride == 0 {
            return Err(Error::Param("conv stride must be at least 1".into()));
        }
        if len + 2 * padding < kernel {
            return Err(Error::Length(format!(
                "conv input length {len} with padding {padding} is shorter than kernel {kernel}"
            )));
        }
        let geom = ConvGeom {
            batch,
            in_channels: cin,
            out_channels: cout,
            len,
            kernel,
            stride,
            padding,
        };
        let out = kernels::conv1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let value = Tensor::new(vec![batch, cout, geom.out_len()], out)?;
        Ok(self.push(value, Op::Conv1d { x, w, b, geom }))
    }

    /// Batch normalization over (batch, length) per channel, eps 1e-5.
    pub fn batchnorm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: BnState<'_, T>,
    ) -> Result<Var> {
        let (batch, channels, len) = self.value(x).dims3()?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(p) != [channels] {
                return Err(Error::Dimension(format!(
                    "batchnorm {name} must be ({channels}), got {:?}",
                    self.shape(p)
                )));
            }
        }
        let stat_lens = match &state {
            BnState::Train {
                running_mean,
                running_var,
            } => (running_mean.len(), running_var.len()),
            BnState::Eval {
                running_mean,
                running_var,
            } => (running_mean.len(), running_var.len()),
        };
        if stat_lens != (channels, channels) {
            return Err(Error::Dimension(format!(
                "batchnorm running stats must have {channels} channels"
            )));
        }
        let eps = T::lit(BN_EPS);
        let xs = self.value(x).data();
        let train = matches!(state, BnState::Train { .. });
        let (y, saved) = match state {
            BnState::Train {
                running_mean,
                running_var,
            } => {
                let n = batch * len;
                if n < 2 {
                    return Err(Error::DegenerateBatch(format!(
                        "batchnorm needs at least 2 values per channel in train mode, got {n}"
                    )));
                }
                let (mean, var) = kernels::channel_stats(xs, batch, channels, len);
                let m = T::lit(BN_MOMENTUM);
                let unbias = T::from_usize_lossy(n) / T::from_usize_lossy(n - 1);
                for c in 0..channels {
                    running_mean[c] = (T::one() - m) * running_mean[c] + m * mean[c];
                    running_var[c] = (T::one() - m) * running_var[c] + m * var[c] * unbias;
                }
                let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
                kernels::batchnorm_apply(xs, batch, channels, len, &mean, &var, g, bt, eps)
            }
            BnState::Eval {
                running_mean,
                running_var,
            } => {
                let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
                kernels::batchnorm_apply(
                    xs,
                    batch,
                    channels,
                    len,
                    running_mean,
                    running_var,
                    g,
                    bt,
                    eps,
                )
            }
        };
        let value = Tensor::new(vec![batch, channels, len], y)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
                batch_stats: train,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu { x })
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (rows, fin) = self.value(x).dims2()?;
        let (fout, wfin) = self.value(w).dims2()?;
        if wfin != fin {
            return Err(Error::Dimension(format!(
                "linear input has {fin} features but weight expects {wfin}"
            )));
        }
        if self.shape(b) != [fout] {
            return Err(Error::Dimension(format!(
                "linear bias must be ({fout}), got {:?}",
                self.shape(b)
            )));
        }
        let y = kernels::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            rows,
            fin,
        );
        let value = Tensor::new(vec![rows, fout], y)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`; eval mode and
    /// `p == 0` pass the input through.
    pub fn dropout<R: rand::Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        rng: &mut R,
        mode: Mode,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Param(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        let n = self.value(x).len();
        let mask = if mode == Mode::Eval || p == 0.0 {
            vec![T::one(); n]
        } else {
            let keep = T::lit(1.0 / (1.0 - p));
            (0..n)
                .map(|_| {
                    if rng.random::<f64>() < p {
                        T::zero()
                    } else {
                        keep
                    }
                })
                .collect()
        };
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    /// Stacks `a` then `b` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, la) = self.value(a).dims3()?;
        let (bb, cb, lb) = self.value(b).dims3()?;
        if ba != bb || la != lb {
            return Err(Error::Dimension(format!(
                "concat needs equal batch and length, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for i in 0..ba {
            out.extend_from_slice(&da[i * ca * la..(i + 1) * ca * la]);
            out.extend_from_slice(&db[i * cb * lb..(i + 1) * cb * lb]);
        }
        let value = Tensor::new(vec![ba, ca + cb, la], out)?;
        Ok(self.push(value, Op::Concat { a, b }))
    }

    /// `(B, C, L) -> (B, C·L)`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let (b, c, l) = self.value(x).dims3()?;
        self.reshape(x, vec![b, c * l])
    }

    /// Row-major reinterpretation under `shape`.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "add needs equal shapes, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    /// `Σ x·weights` with constant weights; projects any output to a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::Dimension(format!(
                "weighted_sum got {} weights for {} elements",
                weights.len(),
                self.value(x).len()
            )));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(&weights)
            .map(|(&a, &b)| a * b)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }))
    }

    /// Mean categorical cross-entropy of `(B, K)` logits, via log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, classes) = self.value(logits).dims2()?;
        if targets.len() != rows {
            return Err(Error::Dimension(format!(
                "{} targets for {rows} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Index(format!("target {bad} outside 0..{classes}")));
        }
        let (loss, probs) =
            kernels::softmax_cross_entropy(self.value(logits).data(), targets, classes);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Haar coefficients of `x: (B, 1, L)` at `level`, as `(B, 2, L/2^level)`
    /// with the approximation in channel 0 and the detail in channel 1.
    pub fn dwt_level(&mut self, x: Var, level: usize) -> Result<Var> {
        let (batch, channels, len) = self.value(x).dims3()?;
        if channels != 1 {
            return Err(Error::Dimension(format!(
                "dwt_level expects a single-channel signal, got {channels} channels"
            )));
        }
        let out = wavelet::level_coefficients(self.value(x).data(), batch, len, level)?;
        let value = Tensor::new(vec![batch, 2, len >> level], out)?;
        Ok(self.push(value, Op::Dwt { x, level }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut contribs = self.backward_node(node, &g)?;
            if self.fault.is_some() && node.op.kind() == self.fault {
                let bump = T::lit(1.5);
                for (_, c) in contribs.iter_mut() {
                    c.iter_mut().for_each(|v| *v *= bump);
                }
            }
            for (input, c) in contribs {
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, &v)| *a += v),
                    slot @ None => *slot = Some(c),
                }
            }
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv1d { x, w, b, geom } => {
                let (dx, dw, db) =
                    kernels::conv1d_backward(g, self.value(*x).data(), self.value(*w).data(), geom);
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
                batch_stats,
            } => {
                let (batch, channels, len) = self.value(*x).dims3()?;
                let (dx, dg, db) = kernels::batchnorm_backward(
                    g,
                    saved,
                    self.value(*gamma).data(),
                    batch,
                    channels,
                    len,
                    *batch_stats,
                );
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Relu { x } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Linear { x, w, b } => {
                let (rows, fin) = self.value(*x).dims2()?;
                let fout = self.shape(*b)[0];
                let (dx, dw, db) = kernels::linear_backward(
                    g,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    rows,
                    fin,
                    fout,
                );
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::Dropout { x, mask } => {
                vec![(*x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect())]
            }
            Op::Concat { a, b } => {
                let (batch, ca, len) = self.value(*a).dims3()?;
                let cb = self.shape(*b)[1];
                let mut ga = Vec::with_capacity(batch * ca * len);
                let mut gb = Vec::with_capacity(batch * cb * len);
                for chunk in g.chunks((ca + cb) * len) {
                    ga.extend_from_slice(&chunk[..ca * len]);
                    gb.extend_from_slice(&chunk[ca * len..]);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Reshape { x } => vec![(*x, g.to_vec())],
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sum { x } => vec![(*x, vec![g[0]; self.value(*x).len()])],
            Op::WeightedSum { x, weights } => {
                vec![(*x, weights.iter().map(|&w| w * g[0]).collect())]
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let classes = self.shape(*logits)[1];
                let scale = g[0] / T::from_usize_lossy(targets.len());
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * classes + t] -= scale;
                }
                vec![(*logits, d)]
            }
            Op::Dwt { x, level } => {
                let (batch, _, len) = self.value(*x).dims3()?;
                vec![(
                    *x,
                    wavelet::level_coefficients_adjoint(g, batch, len, *level)?,
                )]
            }
        })
    }
}
