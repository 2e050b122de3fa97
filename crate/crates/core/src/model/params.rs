use std::collections::BTreeMap;

use rand::Rng as _;
use serde::Serialize;

use super::config::{ModelConfig, ModelKind};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerKind {
    Conv {
        cin: usize,
        cout: usize,
        kernel: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Linear {
        fin: usize,
        fout: usize,
    },
}

impl LayerKind {
    pub fn param_count(&self) -> usize {
        match *self {
            LayerKind::Conv { cin, cout, kernel } => cout * cin * kernel + cout,
            LayerKind::Linear { fin, fout } => fout * fin + fout,
            LayerKind::BatchNorm { channels } => 2 * channels,
        }
    }

    /// Shape of the layer's primary tensor.
    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerKind::Conv { cin, cout, kernel } => vec![cout, cin, kernel],
            LayerKind::Linear { fin, fout } => vec![fout, fin],
            LayerKind::BatchNorm { channels } => vec![channels],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

/// Every learnable layer of the configured model, in forward order.
pub fn layout(cfg: &ModelConfig) -> Vec<LayerSpec> {
    let mut out = Vec::new();
    let mut push = |name: String, kind| out.push(LayerSpec { name, kind });
    let k = cfg.kernel_size;
    for n in 1..=cfg.blocks {
        let cin = cfg.block_input_channels(n);
        let c = cfg.block_channels(n);
        push(
            format!("block{n}.conv1"),
            LayerKind::Conv {
                cin,
                cout: c,
                kernel: k,
            },
        );
        push(
            format!("block{n}.bn1"),
            LayerKind::BatchNorm { channels: c },
        );
        push(
            format!("block{n}.conv2"),
            LayerKind::Conv {
                cin: c,
                cout: c,
                kernel: k,
            },
        );
        push(
            format!("block{n}.bn2"),
            LayerKind::BatchNorm { channels: c },
        );
        if cfg.kind == ModelKind::Wadenet {
            let width = c / cfg.inception_kernels.len();
            for (j, &kernel) in cfg.inception_kernels.iter().enumerate() {
                push(
                    format!("block{n}.inception.branch{j}.conv"),
                    LayerKind::Conv {
                        cin: c,
                        cout: width,
                        kernel,
                    },
                );
                push(
                    format!("block{n}.inception.branch{j}.bn"),
                    LayerKind::BatchNorm { channels: width },
                );
            }
            let g = cfg.gate_channels;
            push(
                format!("gate{n}.conv1"),
                LayerKind::Conv {
                    cin: 2,
                    cout: g,
                    kernel: k,
                },
            );
            push(format!("gate{n}.bn1"), LayerKind::BatchNorm { channels: g });
            push(
                format!("gate{n}.conv2"),
                LayerKind::Conv {
                    cin: g,
                    cout: g,
                    kernel: k,
                },
            );
            push(format!("gate{n}.bn2"), LayerKind::BatchNorm { channels: g });
        }
    }
    let mut fin = cfg.flatten_len();
    for (i, &fout) in cfg.fc_widths.iter().enumerate() {
        push(format!("fc{}", i + 1), LayerKind::Linear { fin, fout });
        fin = fout;
    }
    push(
        OUTPUT_LAYER.into(),
        LayerKind::Linear {
            fin,
            fout: cfg.num_classes,
        },
    );
    out
}

/// Learnable tensors plus batch-norm running statistics, keyed by
/// hierarchical names such as `block2.conv1.w`. Iteration is lexicographic.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub params: BTreeMap<String, Tensor<T>>,
    pub buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Checks names and shapes against what `cfg` requires.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Self::zeros(cfg);
        for (kind, have, want) in [
            ("parameter", &self.params, &expected.params),
            ("buffer", &self.buffers, &expected.buffers),
        ] {
            for (name, t) in want {
                match have.get(name) {
                    None => return Err(Error::Checkpoint(format!("missing {kind} {name}"))),
                    Some(h) if h.shape() != t.shape() => {
                        return Err(Error::Checkpoint(format!(
                            "{kind} {name} has shape {:?}, config requires {:?}",
                            h.shape(),
                            t.shape()
                        )))
                    }
                    _ => {}
                }
            }
            if let Some(extra) = have.keys().find(|k| !want.contains_key(*k)) {
                return Err(Error::Checkpoint(format!("unexpected {kind} {extra}")));
            }
        }
        Ok(())
    }

    /// The configured layout with zero weights and biases, unit gammas and
    /// fresh running statistics.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let mut set = Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        };
        for layer in layout(cfg) {
            set.insert_layer(&layer, |shape| Tensor::zeros(shape));
        }
        set
    }

    fn insert_layer(&mut self, layer: &LayerSpec, mut weight: impl FnMut(&[usize]) -> Tensor<T>) {
        let name = &layer.name;
        match layer.kind {
            LayerKind::Conv { cout, .. } | LayerKind::Linear { fout: cout, .. } => {
                self.params
                    .insert(format!("{name}.w"), weight(&layer.kind.weight_shape()));
                self.params
                    .insert(format!("{name}.b"), Tensor::zeros(&[cout]));
            }
            LayerKind::BatchNorm { channels } => {
                self.params
                    .insert(format!("{name}.gamma"), Tensor::ones(&[channels]));
                self.params
                    .insert(format!("{name}.beta"), Tensor::zeros(&[channels]));
                self.buffers
                    .insert(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
                self.buffers
                    .insert(format!("{name}.running_var"), Tensor::ones(&[channels]));
            }
        }
    }
}

/// Name of the final (logit) linear layer.
pub const OUTPUT_LAYER: &str = "out";

/// Half-width `√(6/fan_in)` of the uniform weight initializer.
pub fn init_bound(kind: &LayerKind) -> f64 {
    let fan_in = match *kind {
        LayerKind::Conv { cin, kernel, .. } => cin * kernel,
        LayerKind::Linear { fin, .. } => fin,
        LayerKind::BatchNorm { .. } => return 0.0,
    };
    (6.0 / fan_in as f64).sqrt()
}

/// Fan-in scaled uniform weights, zero biases, unit gamma, zero beta.
/// Layers draw from `rng` in [`layout`] order.
///
/// The output layer starts at zero, so a fresh model predicts the uniform
/// distribution and its loss is exactly ln K. With fan-in uniform logits
/// the initial loss lands between 1.5 and 2.7 on a 3-class task. Hidden
/// layers receive gradient from the second step on.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, rng: &mut Rng) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut set = ParamSet {
        params: BTreeMap::new(),
        buffers: BTreeMap::new(),
    };
    for layer in layout(cfg) {
        if layer.name == OUTPUT_LAYER {
            set.insert_layer(&layer, |shape| Tensor::zeros(shape));
            continue;
        }
        let a = init_bound(&layer.kind);
        set.insert_layer(&layer, |shape| {
            Tensor::from_fn(shape, |_| T::lit(rng.random_range(-a..a)))
        });
    }
    Ok(set)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamRow {
    pub name: String,
    pub layer: LayerKind,
    pub shape: Vec<usize>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub rows: Vec<ParamRow>,
    pub total: usize,
}

/// Per-layer learnable parameter counts (conv `Cout·Cin·k + Cout`, linear
/// `Fout·Fin + Fout`, batch norm `2·C`).
pub fn param_count(cfg: &ModelConfig) -> Result<ParamReport> {
    cfg.validate()?;
    let rows: Vec<ParamRow> = layout(cfg)
        .into_iter()
        .map(|l| ParamRow {
            shape: l.kind.weight_shape(),
            count: l.kind.param_count(),
            layer: l.kind,
            name: l.name,
        })
        .collect();
    let total = rows.iter().map(|r| r.count).sum();
    Ok(ParamReport { rows, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn toy(kind: ModelKind) -> ModelConfig {
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

    #[test]
    fn layer_counts() {
        assert_eq!(
            LayerKind::Conv {
                cin: 1,
                cout: 64,
                kernel: 3
            }
            .param_count(),
            256
        );
        assert_eq!(LayerKind::Linear { fin: 100, fout: 10 }.param_count(), 1010);
        assert_eq!(LayerKind::BatchNorm { channels: 64 }.param_count(), 128);
    }

    #[test]
    fn init_is_deterministic_and_counts_agree() {
        for kind in [ModelKind::Naive, ModelKind::Wadenet] {
            let cfg = toy(kind);
            let a: ParamSet<f64> = init_params(&cfg, &mut rng_from_seed(9)).unwrap();
            let b: ParamSet<f64> = init_params(&cfg, &mut rng_from_seed(9)).unwrap();
            assert_eq!(a, b);
            let c: ParamSet<f64> = init_params(&cfg, &mut rng_from_seed(10)).unwrap();
            assert_ne!(a, c);
            assert_eq!(param_count(&cfg).unwrap().total, a.numel());
            a.check_against(&cfg).unwrap();
        }
    }

    #[test]
    fn init_bound_formula() {
        let b = init_bound(&LayerKind::Conv {
            cin: 1,
            cout: 64,
            kernel: 3,
        });
        assert!((b - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn check_against_names_first_bad_tensor() {
        let cfg = toy(ModelKind::Wadenet);
        let mut p: ParamSet<f64> = init_params(&cfg, &mut rng_from_seed(1)).unwrap();
        p.params
            .insert("block1.conv1.w".into(), Tensor::zeros(&[4, 1, 5]));
        let err = p.check_against(&cfg).unwrap_err().to_string();
        assert!(err.contains("block1.conv1.w"), "{err}");
    }
}
