//! The Naive CNN and WaDeNet architectures.

mod config;
mod forward;
mod params;

use std::collections::BTreeMap;

pub use config::{ModelConfig, ModelKind};
pub use forward::{Bindings, ForwardOutput, ForwardPass, ShapeTrace};
pub use params::{
    init_bound, init_params, layout, param_count, LayerKind, LayerSpec, ParamReport, ParamRow,
    ParamSet, OUTPUT_LAYER,
};

use crate::error::Result;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamSet<T>,
}

/// Loss of one training batch and the gradient of every parameter.
pub struct TrainStep<T> {
    pub loss: T,
    pub grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let params = init_params(&config, rng)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    /// Eval-mode logits for a `(B, 1, l)` batch.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let input = tape.leaf(x.clone());
        let out = ForwardPass::eval(&mut tape, &self.params).run(&self.config, input)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Class with the largest logit for each window.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        self.logits(x)?.argmax_rows()
    }

    /// Eval-mode shape trace for a `(B, 1, l)` batch.
    pub fn trace(&self, x: &Tensor<T>) -> Result<ShapeTrace> {
        let mut tape = Tape::new();
        let input = tape.leaf(x.clone());
        Ok(ForwardPass::eval(&mut tape, &self.params)
            .run(&self.config, input)?
            .trace)
    }

    /// Train-mode forward, cross-entropy and backward on one batch. Updates
    /// batch-norm running statistics; parameters are left untouched.
    pub fn train_step(
        &mut self,
        x: &Tensor<T>,
        targets: &[usize],
        rng: &mut Rng,
    ) -> Result<TrainStep<T>> {
        self.train_step_on(Tape::new(), x, targets, rng)
    }

    /// [`Model::train_step`] on a caller-supplied (empty) tape.
    pub fn train_step_on(
        &mut self,
        mut tape: Tape<T>,
        x: &Tensor<T>,
        targets: &[usize],
        rng: &mut Rng,
    ) -> Result<TrainStep<T>> {
        let input = tape.leaf(x.clone());
        let mut pass = ForwardPass::train(&mut tape, &mut self.params, rng);
        let out = pass.run(&self.config, input)?;
        let bindings = pass.into_bindings();
        let loss = tape.softmax_cross_entropy(out.logits, targets)?;
        let mut grads = tape.backward(loss)?;
        let loss = tape.value(loss).item()?;
        let grads = bindings.gradients(&mut grads, &self.params);
        Ok(TrainStep { loss, grads })
    }

    /// Train-mode loss alone, for finite-difference checks.
    pub fn train_loss(&mut self, x: &Tensor<T>, targets: &[usize], rng: &mut Rng) -> Result<T> {
        let mut tape = Tape::new();
        let input = tape.leaf(x.clone());
        let out = ForwardPass::train(&mut tape, &mut self.params, rng).run(&self.config, input)?;
        let loss = tape.softmax_cross_entropy(out.logits, targets)?;
        tape.value(loss).item()
    }
}
