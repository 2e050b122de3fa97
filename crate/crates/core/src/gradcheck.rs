//! Central finite-difference verification of every differentiable op.

use rand::Rng as _;

use crate::error::Result;
use crate::model::{Model, ModelConfig, ModelKind, ParamSet};
use crate::rng::{rng_from_seed, Rng};
use crate::tensor::{BnState, OpKind, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

/// Denominator floor, so a tensor whose exact gradient is zero is judged
/// on absolute error. A convolution bias feeding batch norm is such a
/// tensor; central differences reproduce its zero only up to roundoff
/// of about 1e-9.
pub const ZERO_FLOOR: f64 = 1e-4;

/// `‖a − n‖ / max(‖a‖, ‖n‖, ZERO_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    diff / scale.max(ZERO_FLOOR)
}

/// Central differences of `f` at `x` for the listed coordinates.
pub fn numeric_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    coords: &[usize],
    step: f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

type Builder<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Compares tape gradients of a scalar graph against finite differences
/// with respect to every element of every input.
pub fn check_graph(
    inputs: &[Tensor<f64>],
    build: &Builder<'_>,
    fault: Option<OpKind>,
) -> Result<f64> {
    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_backward_fault(kind);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .map_or_else(|| vec![0.0; input.len()], |g| g.data().to_vec());
        let coords: Vec<usize> = (0..input.len()).collect();
        let numeric = numeric_gradient(
            |probe| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j == i {
                            tape.leaf(Tensor::new(t.shape().to_vec(), probe.to_vec()).unwrap())
                        } else {
                            tape.leaf(t.clone())
                        }
                    })
                    .collect();
                let out = build(&mut tape, &vars).expect("graph rebuilt");
                tape.value(out).data()[0]
            },
            input.data(),
            &coords,
            FD_STEP,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Finite-difference check of a whole model's train-mode loss with
/// respect to its parameters. `max_per_tensor` caps how many entries of
/// each tensor are probed (evenly spaced); `None` probes all.
pub fn check_model(
    config: &ModelConfig,
    param_seed: u64,
    batch: usize,
    max_per_tensor: Option<usize>,
    fault: Option<OpKind>,
) -> Result<f64> {
    let mut rng = rng_from_seed(param_seed);
    let mut params: ParamSet<f64> = crate::model::init_params(config, &mut rng)?;
    generic_values(&mut params, "", &mut rng);
    let mut model = Model::from_params(config.clone(), params)?;
    let x = Tensor::from_fn(&[batch, 1, config.window_len], |_| {
        rng.random_range(-1.0..1.0)
    });
    let targets: Vec<usize> = (0..batch).map(|b| b % config.num_classes).collect();
    let dropout_seed = param_seed ^ 0xD00D;
    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_backward_fault(kind);
    }
    let step = model.train_step_on(tape, &x, &targets, &mut rng_from_seed(dropout_seed))?;
    let base: ParamSet<f64> = model.params().clone();
    let mut worst = 0.0f64;
    for (name, tensor) in &base.params {
        let n = tensor.len();
        let coords: Vec<usize> = match max_per_tensor {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        let analytic: Vec<f64> = coords.iter().map(|&i| step.grads[name].data()[i]).collect();
        let numeric = numeric_gradient(
            |probe| {
                let mut params = base.clone();
                params
                    .params
                    .get_mut(name)
                    .unwrap()
                    .data_mut()
                    .copy_from_slice(probe);
                let mut m = Model::from_params(config.clone(), params).unwrap();
                m.train_loss(&x, &targets, &mut rng_from_seed(dropout_seed))
                    .unwrap()
            },
            tensor.data(),
            &coords,
            FD_STEP,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// The small end-to-end configuration used by the gradient suite.
pub fn toy_config(kind: ModelKind) -> ModelConfig {
    ModelConfig {
        kind,
        blocks: 2,
        base_channels: 4,
        kernel_size: 3,
        gate_channels: 2,
        inception_kernels: vec![1, 3, 5, 7],
        fc_widths: vec![8],
        num_classes: 3,
        window_len: 64,
        dropout_p: 0.5,
    }
}

/// Moves parameters under `prefix` off their structured initial values:
/// zero output weights, unit gammas and zero biases and betas would
/// leave parts of the backward pass unexercised.
fn generic_values(params: &mut ParamSet<f64>, prefix: &str, rng: &mut Rng) {
    for (name, t) in params
        .params
        .iter_mut()
        .filter(|(n, _)| n.starts_with(prefix))
    {
        let output = name.starts_with(crate::model::OUTPUT_LAYER) && name.ends_with(".w");
        if output {
            let bound = (6.0 / t.shape()[1] as f64).sqrt();
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-bound..bound));
        } else if !name.ends_with(".w") {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-0.5..0.5));
        }
    }
}

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, so ReLU kinks sit outside the
/// finite-difference stencil.
fn random_off_zero(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn weights(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let n = tape.value(v).len();
    tape.weighted_sum(v, weights(&mut rng_from_seed(seed), n))
}

fn op_check(kind: OpKind, fault: Option<OpKind>) -> Result<f64> {
    let mut rng = rng_from_seed(0x5EED ^ kind as u64);
    match kind {
        OpKind::Conv1d => {
            let mut worst = 0.0f64;
            for (stride, padding, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 2, 5)] {
                let inputs = [
                    random(&mut rng, &[2, 3, 10]),
                    random(&mut rng, &[4, 3, k]),
                    random(&mut rng, &[4]),
                ];
                let e = check_graph(
                    &inputs,
                    &move |t, v| {
                        let y = t.conv1d(v[0], v[1], v[2], stride, padding)?;
                        project(t, y, 1)
                    },
                    fault,
                )?;
                worst = worst.max(e);
            }
            Ok(worst)
        }
        OpKind::BatchNorm1d => {
            let inputs = [
                random(&mut rng, &[2, 3, 8]),
                random(&mut rng, &[3]),
                random(&mut rng, &[3]),
            ];
            let train = check_graph(
                &inputs,
                &|t, v| {
                    let (mut m, mut s) = (vec![0.0; 3], vec![1.0; 3]);
                    let state = BnState::Train {
                        running_mean: &mut m,
                        running_var: &mut s,
                    };
                    let y = t.batchnorm1d(v[0], v[1], v[2], state)?;
                    project(t, y, 2)
                },
                fault,
            )?;
            let eval = check_graph(
                &inputs,
                &|t, v| {
                    let state = BnState::Eval {
                        running_mean: &[0.1, -0.2, 0.3],
                        running_var: &[0.5, 1.5, 2.0],
                    };
                    let y = t.batchnorm1d(v[0], v[1], v[2], state)?;
                    project(t, y, 3)
                },
                fault,
            )?;
            Ok(train.max(eval))
        }
        OpKind::Relu => check_graph(
            &[random_off_zero(&mut rng, &[2, 3, 5])],
            &|t, v| {
                let y = t.relu(v[0]);
                project(t, y, 4)
            },
            fault,
        ),
        OpKind::Linear => check_graph(
            &[
                random(&mut rng, &[4, 8]),
                random(&mut rng, &[5, 8]),
                random(&mut rng, &[5]),
            ],
            &|t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                project(t, y, 5)
            },
            fault,
        ),
        OpKind::Dropout => check_graph(
            &[random(&mut rng, &[3, 7])],
            &|t, v| {
                let y = t.dropout(
                    v[0],
                    0.5,
                    &mut rng_from_seed(77),
                    crate::tensor::Mode::Train,
                )?;
                project(t, y, 6)
            },
            fault,
        ),
        OpKind::ConcatChannels => check_graph(
            &[random(&mut rng, &[2, 2, 4]), random(&mut rng, &[2, 3, 4])],
            &|t, v| {
                let y = t.concat_channels(v[0], v[1])?;
                project(t, y, 7)
            },
            fault,
        ),
        OpKind::Flatten => check_graph(
            &[random(&mut rng, &[2, 3, 4])],
            &|t, v| {
                let y = t.flatten(v[0])?;
                project(t, y, 8)
            },
            fault,
        ),
        OpKind::Add => check_graph(
            &[random(&mut rng, &[2, 5]), random(&mut rng, &[2, 5])],
            &|t, v| {
                let y = t.add(v[0], v[1])?;
                let y = t.add(y, v[0])?;
                project(t, y, 9)
            },
            fault,
        ),
        OpKind::Sum => check_graph(&[random(&mut rng, &[3, 4])], &|t, v| Ok(t.sum(v[0])), fault),
        OpKind::WeightedSum => check_graph(
            &[random(&mut rng, &[3, 4])],
            &|t, v| project(t, v[0], 10),
            fault,
        ),
        OpKind::SoftmaxCrossEntropy => check_graph(
            &[random(&mut rng, &[3, 5])],
            &|t, v| t.softmax_cross_entropy(v[0], &[0, 4, 2]),
            fault,
        ),
        OpKind::DwtLevel => {
            let mut worst = 0.0f64;
            for level in 1..=3 {
                let e = check_graph(
                    &[random(&mut rng, &[2, 1, 16])],
                    &move |t, v| {
                        let y = t.dwt_level(v[0], level)?;
                        project(t, y, 11 + level as u64)
                    },
                    fault,
                )?;
                worst = worst.max(e);
            }
            Ok(worst)
        }
    }
}

/// Every tape op once (by its op name), then the inception-residual
/// block, the DWT gate and both toy end-to-end models.
pub fn run_suite(fault: Option<OpKind>) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for kind in OpKind::ALL {
        out.push(CheckResult {
            name: kind.name().to_string(),
            max_rel_error: op_check(kind, fault)?,
        });
    }
    let wade = toy_config(ModelKind::Wadenet);
    out.push(CheckResult {
        name: "inception_residual".into(),
        max_rel_error: check_block(&wade, Block::Inception, fault)?,
    });
    out.push(CheckResult {
        name: "dwt_gate".into(),
        max_rel_error: check_block(&wade, Block::Gate, fault)?,
    });
    out.push(CheckResult {
        name: "wadenet_end_to_end".into(),
        max_rel_error: check_model(&wade, 21, 2, None, fault)?,
    });
    out.push(CheckResult {
        name: "naive_end_to_end".into(),
        max_rel_error: check_model(&toy_config(ModelKind::Naive), 22, 2, None, fault)?,
    });
    Ok(out)
}

#[derive(Clone, Copy)]
enum Block {
    Inception,
    Gate,
}

/// Loss of one block: the block applied to `x`, projected to a scalar.
fn block_loss(
    cfg: &ModelConfig,
    block: Block,
    params: &mut ParamSet<f64>,
    x: &Tensor<f64>,
    fault: Option<OpKind>,
) -> Result<(Tape<f64>, Var, Var, crate::model::Bindings)> {
    use crate::model::ForwardPass;
    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_backward_fault(kind);
    }
    let mut rng = rng_from_seed(0);
    let input = tape.leaf(x.clone());
    let mut pass = ForwardPass::train(&mut tape, params, &mut rng);
    let y = match block {
        Block::Inception => pass.inception_residual(cfg, input, 1)?,
        Block::Gate => pass.dwt_gate(input, 1)?,
    };
    let bindings = pass.into_bindings();
    let loss = project(&mut tape, y, 40)?;
    Ok((tape, input, loss, bindings))
}

/// Gradient of a block with respect to its input and all its parameters.
fn check_block(cfg: &ModelConfig, block: Block, fault: Option<OpKind>) -> Result<f64> {
    let mut rng = rng_from_seed(31);
    let base: ParamSet<f64> = crate::model::init_params(cfg, &mut rng)?;
    let (prefix, shape) = match block {
        Block::Inception => ("block1.inception.", vec![2, cfg.block_channels(1), 16]),
        Block::Gate => ("gate1.", vec![2, 2, 16]),
    };
    let x = random(&mut rng, &shape);
    let mut base = base;
    generic_values(&mut base, prefix, &mut rng);

    let (tape, input, loss, bindings) = block_loss(cfg, block, &mut base.clone(), &x, fault)?;
    let mut grads = tape.backward(loss)?;
    let input_grad = grads
        .get(input)
        .map(|g| g.data().to_vec())
        .unwrap_or(vec![0.0; x.len()]);
    let param_grads = bindings.gradients(&mut grads, &base);

    let eval = |params: &ParamSet<f64>, x: &Tensor<f64>| -> f64 {
        let (tape, _, loss, _) =
            block_loss(cfg, block, &mut params.clone(), x, None).expect("block rebuilt");
        tape.value(loss).data()[0]
    };
    let coords: Vec<usize> = (0..x.len()).collect();
    let numeric = numeric_gradient(
        |probe| eval(&base, &Tensor::new(shape.clone(), probe.to_vec()).unwrap()),
        x.data(),
        &coords,
        FD_STEP,
    );
    let mut worst = relative_error(&input_grad, &numeric);
    for (name, tensor) in base.params.iter().filter(|(n, _)| n.starts_with(prefix)) {
        let coords: Vec<usize> = (0..tensor.len()).collect();
        let numeric = numeric_gradient(
            |probe| {
                let mut params = base.clone();
                params
                    .params
                    .get_mut(name)
                    .unwrap()
                    .data_mut()
                    .copy_from_slice(probe);
                eval(&params, &x)
            },
            tensor.data(),
            &coords,
            FD_STEP,
        );
        let e = relative_error(param_grads[name].data(), &numeric);
        worst = worst.max(e);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0], &[1.5]) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn numeric_gradient_of_cubic() {
        let g = numeric_gradient(|x| x[0].powi(3) + 2.0 * x[1], &[2.0, 5.0], &[0, 1], FD_STEP);
        assert!((g[0] - 12.0).abs() < 1e-6);
        assert!((g[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn every_op_passes_and_fault_is_caught() {
        let report = run_suite(None).unwrap();
        for r in &report {
            assert!(r.passed(), "{} rel error {}", r.name, r.max_rel_error);
        }
        let faulty = run_suite(Some(OpKind::Conv1d)).unwrap();
        let conv = faulty.iter().find(|r| r.name == "conv1d").unwrap();
        assert!(!conv.passed());
        assert!(faulty.iter().find(|r| r.name == "relu").unwrap().passed());
    }
}
