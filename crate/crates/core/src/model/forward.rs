use std::collections::BTreeMap;

use super::config::{ModelConfig, ModelKind};
use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{BnState, Gradients, Mode, Tape, Tensor, Var};

enum Buffers<'a, T> {
    Train(&'a mut BTreeMap<String, Tensor<T>>),
    Eval(&'a BTreeMap<String, Tensor<T>>),
}

/// Shapes observed while building one forward graph, batch axis dropped.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ShapeTrace {
    /// (channels, length) entering each convolutional block.
    pub block_inputs: Vec<(usize, usize)>,
    /// (channels, length) leaving each block, after any inception stage.
    pub block_outputs: Vec<(usize, usize)>,
    /// (channels, length) of each DWT gate output.
    pub gate_outputs: Vec<(usize, usize)>,
    pub pre_flatten: (usize, usize),
    pub flatten: usize,
}

pub struct ForwardOutput {
    pub logits: Var,
    pub trace: ShapeTrace,
}

/// Parameter leaves created on a tape during one forward pass.
#[derive(Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradient for every parameter in `params`; parameters that never
    /// reached the loss get zeros.
    pub fn gradients<T: Scalar>(
        &self,
        grads: &mut Gradients<T>,
        params: &ParamSet<T>,
    ) -> BTreeMap<String, Tensor<T>> {
        params
            .params
            .iter()
            .map(|(name, p)| {
                let g = self
                    .vars
                    .get(name)
                    .and_then(|&v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(p.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Builds the graph of either architecture on a tape.
///
/// Parameters become tape leaves the first time a layer uses them. In
/// train mode batch norm updates the running statistics in place and
/// dropout draws from the supplied generator.
pub struct ForwardPass<'a, T: Scalar> {
    tape: &'a mut Tape<T>,
    params: &'a BTreeMap<String, Tensor<T>>,
    buffers: Buffers<'a, T>,
    rng: Option<&'a mut Rng>,
    bound: Bindings,
}

impl<'a, T: Scalar> ForwardPass<'a, T> {
    pub fn train(tape: &'a mut Tape<T>, params: &'a mut ParamSet<T>, rng: &'a mut Rng) -> Self {
        Self {
            tape,
            params: &params.params,
            buffers: Buffers::Train(&mut params.buffers),
            rng: Some(rng),
            bound: Bindings::default(),
        }
    }

    pub fn eval(tape: &'a mut Tape<T>, params: &'a ParamSet<T>) -> Self {
        Self {
            tape,
            params: &params.params,
            buffers: Buffers::Eval(&params.buffers),
            rng: None,
            bound: Bindings::default(),
        }
    }

    pub fn mode(&self) -> Mode {
        match self.buffers {
            Buffers::Train(_) => Mode::Train,
            Buffers::Eval(_) => Mode::Eval,
        }
    }

    pub fn tape(&mut self) -> &mut Tape<T> {
        self.tape
    }

    pub fn into_bindings(self) -> Bindings {
        self.bound
    }

    fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.vars.get(name) {
            return Ok(*v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?;
        let v = self.tape.leaf(t.clone());
        self.bound.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Convolution with "same" padding `(k-1)/2`.
    fn conv(&mut self, layer: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.param(&format!("{layer}.w"))?;
        let b = self.param(&format!("{layer}.b"))?;
        let k = self.tape.shape(w)[2];
        self.tape.conv1d(x, w, b, stride, (k - 1) / 2)
    }

    fn bn(&mut self, layer: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{layer}.gamma"))?;
        let beta = self.param(&format!("{layer}.beta"))?;
        let (mk, vk) = (
            format!("{layer}.running_mean"),
            format!("{layer}.running_var"),
        );
        let missing = || Error::Contract(format!("missing running stats for {layer}"));
        match &mut self.buffers {
            Buffers::Eval(bufs) => {
                let m = bufs.get(&mk).ok_or_else(missing)?;
                let v = bufs.get(&vk).ok_or_else(missing)?;
                let state = BnState::Eval {
                    running_mean: m.data(),
                    running_var: v.data(),
                };
                self.tape.batchnorm1d(x, gamma, beta, state)
            }
            Buffers::Train(bufs) => {
                let mut m = bufs.remove(&mk).ok_or_else(missing)?;
                let mut v = bufs.remove(&vk).ok_or_else(missing)?;
                let state = BnState::Train {
                    running_mean: m.data_mut(),
                    running_var: v.data_mut(),
                };
                let out = self.tape.batchnorm1d(x, gamma, beta, state);
                bufs.insert(mk, m);
                bufs.insert(vk, v);
                out
            }
        }
    }

    fn conv_bn_relu(&mut self, conv: &str, bn: &str, x: Var, stride: usize) -> Result<Var> {
        let y = self.conv(conv, x, stride)?;
        let y = self.bn(bn, y)?;
        Ok(self.tape.relu(y))
    }

    fn linear(&mut self, layer: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{layer}.w"))?;
        let b = self.param(&format!("{layer}.b"))?;
        self.tape.linear(x, w, b)
    }

    /// conv(k) → BN → ReLU → conv(k, stride 2) → BN → ReLU, emitting
    /// c·2ⁿ⁻¹ channels at half the input length.
    pub fn conv_block(&mut self, x: Var, n: usize) -> Result<Var> {
        let len = self.tape.shape(x)[2];
        if !len.is_multiple_of(2) {
            return Err(Error::Length(format!(
                "block {n} input length {len} is odd"
            )));
        }
        let y = self.conv_bn_relu(&format!("block{n}.conv1"), &format!("block{n}.bn1"), x, 1)?;
        self.conv_bn_relu(&format!("block{n}.conv2"), &format!("block{n}.bn2"), y, 2)
    }

    /// Parallel conv → BN → ReLU branches, channel-concatenated back to
    /// the input width and added to the input.
    pub fn inception_residual(&mut self, cfg: &ModelConfig, x: Var, n: usize) -> Result<Var> {
        let channels = self.tape.shape(x)[1];
        let branches = cfg.inception_kernels.len();
        if branches == 0 || !channels.is_multiple_of(branches) {
            return Err(Error::Config(format!(
                "{channels} channels cannot be split across {branches} inception branches"
            )));
        }
        let mut merged: Option<Var> = None;
        for j in 0..branches {
            let prefix = format!("block{n}.inception.branch{j}");
            let y = self.conv_bn_relu(&format!("{prefix}.conv"), &format!("{prefix}.bn"), x, 1)?;
            merged = Some(match merged {
                None => y,
                Some(m) => self.tape.concat_channels(m, y)?,
            });
        }
        let merged = merged.expect("at least one branch");
        if self.tape.shape(merged) != self.tape.shape(x) {
            return Err(Error::Config(format!(
                "inception branches produce {:?}, block carries {:?}",
                self.tape.shape(merged),
                self.tape.shape(x)
            )));
        }
        self.tape.add(merged, x)
    }

    /// Two conv → BN → ReLU stages taking the (approx, detail) pair of one
    /// level to `g` channels.
    pub fn dwt_gate(&mut self, coeffs: Var, n: usize) -> Result<Var> {
        let y = self.conv_bn_relu(
            &format!("gate{n}.conv1"),
            &format!("gate{n}.bn1"),
            coeffs,
            1,
        )?;
        self.conv_bn_relu(&format!("gate{n}.conv2"), &format!("gate{n}.bn2"), y, 1)
    }

    /// Hidden linear → ReLU → dropout layers, then the output linear layer.
    pub fn fc_block(&mut self, cfg: &ModelConfig, flat: Var) -> Result<Var> {
        let mut h = flat;
        for i in 1..=cfg.fc_widths.len() {
            h = self.linear(&format!("fc{i}"), h)?;
            h = self.tape.relu(h);
            if self.mode() == Mode::Train && cfg.dropout_p > 0.0 {
                let rng = self.rng.as_deref_mut().ok_or_else(|| {
                    Error::Contract("train-mode dropout needs a generator".into())
                })?;
                h = self.tape.dropout(h, cfg.dropout_p, rng, Mode::Train)?;
            }
        }
        self.linear(super::params::OUTPUT_LAYER, h)
    }

    fn check_input(&self, cfg: &ModelConfig, x: Var, kind: ModelKind) -> Result<()> {
        if cfg.kind != kind {
            return Err(Error::Config(format!(
                "config describes {:?}, not {kind:?}",
                cfg.kind
            )));
        }
        let shape = self.tape.shape(x);
        if shape.len() != 3 || shape[1] != 1 || shape[2] != cfg.window_len {
            return Err(Error::Dimension(format!(
                "model input must be (batch, 1, {}), got {shape:?}",
                cfg.window_len
            )));
        }
        Ok(())
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let s = self.tape.shape(v);
        (s[1], s[2])
    }

    fn head(
        &mut self,
        cfg: &ModelConfig,
        features: Var,
        mut trace: ShapeTrace,
    ) -> Result<ForwardOutput> {
        trace.pre_flatten = self.dims(features);
        let flat = self.tape.flatten(features)?;
        trace.flatten = self.tape.shape(flat)[1];
        let logits = self.fc_block(cfg, flat)?;
        Ok(ForwardOutput { logits, trace })
    }

    pub fn naive(&mut self, cfg: &ModelConfig, x: Var) -> Result<ForwardOutput> {
        self.check_input(cfg, x, ModelKind::Naive)?;
        let mut trace = ShapeTrace::default();
        let mut h = x;
        for n in 1..=cfg.blocks {
            trace.block_inputs.push(self.dims(h));
            h = self.conv_block(h, n)?;
            trace.block_outputs.push(self.dims(h));
        }
        self.head(cfg, h, trace)
    }

    /// Block n's output is fused with the gated level-n wavelet
    /// coefficients of the raw input before entering block n+1; the
    /// level-N gate output joins the last block's output before flatten.
    pub fn wadenet(&mut self, cfg: &ModelConfig, x: Var) -> Result<ForwardOutput> {
        self.check_input(cfg, x, ModelKind::Wadenet)?;
        let mut trace = ShapeTrace::default();
        let mut h = x;
        for n in 1..=cfg.blocks {
            trace.block_inputs.push(self.dims(h));
            let y = self.conv_block(h, n)?;
            let y = self.inception_residual(cfg, y, n)?;
            trace.block_outputs.push(self.dims(y));
            let coeffs = self.tape.dwt_level(x, n)?;
            let gate = self.dwt_gate(coeffs, n)?;
            trace.gate_outputs.push(self.dims(gate));
            h = self.tape.concat_channels(y, gate)?;
        }
        self.head(cfg, h, trace)
    }

    pub fn run(&mut self, cfg: &ModelConfig, x: Var) -> Result<ForwardOutput> {
        match cfg.kind {
            ModelKind::Naive => self.naive(cfg, x),
            ModelKind::Wadenet => self.wadenet(cfg, x),
        }
    }
}
