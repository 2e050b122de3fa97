use proptest::prelude::*;
use rand::Rng as _;
use wadenet::gradcheck::{check_model, toy_config, TOLERANCE};
use wadenet::model::{init_bound, layout, param_count, ForwardPass, LayerKind, ShapeTrace};
use wadenet::{rng_from_seed, Model, ModelConfig, ModelKind, ParamSet, Tape64, Tensor64};

fn config(
    kind: ModelKind,
    blocks: usize,
    c: usize,
    k: usize,
    g: usize,
    fc: Vec<usize>,
    len_factor: usize,
) -> ModelConfig {
    ModelConfig {
        kind,
        blocks,
        base_channels: c,
        kernel_size: k,
        gate_channels: g,
        inception_kernels: vec![1, 3, 5, 7],
        fc_widths: fc,
        num_classes: 3,
        window_len: len_factor << blocks,
        dropout_p: 0.5,
    }
}

fn random_config() -> impl Strategy<Value = ModelConfig> {
    (
        prop_oneof![Just(ModelKind::Naive), Just(ModelKind::Wadenet)],
        1usize..4,
        1usize..3,
        prop_oneof![Just(1usize), Just(3), Just(5)],
        1usize..4,
        prop::collection::vec(1usize..12, 0..3),
        1usize..4,
    )
        .prop_map(|(kind, blocks, c4, k, g, fc, len)| config(kind, blocks, 4 * c4, k, g, fc, len))
}

/// (channels, length) per stage, written out from the architecture
/// description without using the library's own helpers.
fn expected_trace(cfg: &ModelConfig) -> ShapeTrace {
    let gate = if cfg.kind == ModelKind::Wadenet {
        cfg.gate_channels
    } else {
        0
    };
    let mut trace = ShapeTrace::default();
    let mut channels = 1;
    let mut len = cfg.window_len;
    for n in 1..=cfg.blocks {
        trace.block_inputs.push((channels, len));
        let c = cfg.base_channels << (n - 1);
        len /= 2;
        trace.block_outputs.push((c, len));
        if gate > 0 {
            trace.gate_outputs.push((gate, len));
        }
        channels = c + gate;
    }
    trace.pre_flatten = (channels, len);
    trace.flatten = channels * len;
    trace
}

fn expected_params(cfg: &ModelConfig) -> usize {
    let k = cfg.kernel_size;
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k + cout;
    let wade = cfg.kind == ModelKind::Wadenet;
    let g = if wade { cfg.gate_channels } else { 0 };
    let mut total = 0;
    let mut cin = 1;
    for n in 1..=cfg.blocks {
        let c = cfg.base_channels << (n - 1);
        total += conv(cin, c, k) + 2 * c + conv(c, c, k) + 2 * c;
        if wade {
            let w = c / 4;
            total += [1, 3, 5, 7]
                .iter()
                .map(|&kb| conv(c, w, kb) + 2 * w)
                .sum::<usize>();
            total += conv(2, g, k) + 2 * g + conv(g, g, k) + 2 * g;
        }
        cin = c + g;
    }
    let mut fin = cin * (cfg.window_len >> cfg.blocks);
    for &w in cfg
        .fc_widths
        .iter()
        .chain(std::iter::once(&cfg.num_classes))
    {
        total += w * fin + w;
        fin = w;
    }
    total
}

fn input(batch: usize, len: usize, seed: u64) -> Tensor64 {
    let mut rng = rng_from_seed(seed);
    Tensor64::from_fn(&[batch, 1, len], |_| rng.random_range(-1.0..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn shapes_and_counts_follow_the_architecture(cfg in random_config(), seed in any::<u64>()) {
        let model = Model::<f64>::init(cfg.clone(), &mut rng_from_seed(seed)).unwrap();
        let x = input(2, cfg.window_len, seed);
        prop_assert_eq!(model.trace(&x).unwrap(), expected_trace(&cfg));
        let logits = model.logits(&x).unwrap();
        prop_assert_eq!(logits.shape(), &[2, 3][..]);
        prop_assert!(logits.data().iter().all(|v| v.is_finite()));
        let report = param_count(&cfg).unwrap();
        prop_assert_eq!(report.total, expected_params(&cfg));
        prop_assert_eq!(report.total, model.params().numel());
    }
}

#[test]
fn reference_trace_halves_each_block() {
    let cfg = ModelConfig::reference(ModelKind::Naive, 7);
    assert_eq!(
        expected_trace(&cfg).block_outputs,
        vec![(64, 2560), (128, 1280), (256, 640), (512, 320)]
    );
    let wade = ModelConfig::reference(ModelKind::Wadenet, 7);
    let inputs: Vec<usize> = expected_trace(&wade)
        .block_inputs
        .iter()
        .map(|p| p.0)
        .collect();
    assert_eq!(inputs, vec![1, 80, 144, 272]);
}

#[test]
fn invalid_configs_are_rejected() {
    let good = config(ModelKind::Wadenet, 2, 8, 3, 2, vec![4], 4);
    assert!(good.validate().is_ok());
    for bad in [
        ModelConfig {
            kernel_size: 4,
            ..good.clone()
        },
        ModelConfig {
            base_channels: 6,
            ..good.clone()
        },
        ModelConfig {
            window_len: 18,
            ..good.clone()
        },
        ModelConfig {
            num_classes: 0,
            ..good.clone()
        },
        ModelConfig {
            dropout_p: 1.0,
            ..good.clone()
        },
    ] {
        let err = bad.validate().unwrap_err();
        assert!(err.is_config(), "{bad:?} gave {err}");
    }
    let text = serde_json::to_string(&good)
        .unwrap()
        .replace("\"N\"", "\"blocks\"");
    assert!(ModelConfig::from_json(&text).is_err());
}

#[test]
fn zero_branches_make_inception_an_identity() {
    let cfg = config(ModelKind::Wadenet, 1, 8, 3, 2, vec![], 2);
    let mut params: ParamSet<f64> = ParamSet::zeros(&cfg);
    for (name, t) in params.params.iter_mut() {
        if name.contains(".inception.") && !name.ends_with(".beta") {
            let mut rng = rng_from_seed(name.len() as u64);
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        if name.ends_with(".gamma") && name.contains(".inception.") {
            t.data_mut().fill(0.0);
        }
    }
    let mut tape = Tape64::new();
    let x = tape.leaf(
        input(24, 8, 1)
            .map(|v| v * 4.0)
            .reshape(vec![3, 8, 8])
            .unwrap(),
    );
    let mut pass = ForwardPass::eval(&mut tape, &params);
    let y = pass.inception_residual(&cfg, x, 1).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
}

#[test]
fn gate_with_zero_weights_emits_relu_beta() {
    let cfg = config(ModelKind::Wadenet, 1, 4, 3, 3, vec![], 8);
    let mut params: ParamSet<f64> = ParamSet::zeros(&cfg);
    let beta = [0.7, -0.2, 1.5];
    params
        .params
        .get_mut("gate1.bn2.beta")
        .unwrap()
        .data_mut()
        .copy_from_slice(&beta);
    params
        .params
        .get_mut("gate1.bn2.gamma")
        .unwrap()
        .data_mut()
        .fill(2.0);
    let mut rng = rng_from_seed(2);
    let mut tape = Tape64::new();
    let coeffs = tape.leaf(input(2, 12, 3).reshape(vec![2, 2, 6]).unwrap());
    let mut pass = ForwardPass::train(&mut tape, &mut params, &mut rng);
    let y = pass.dwt_gate(coeffs, 1).unwrap();
    assert_eq!(tape.shape(y), &[2, 3, 6]);
    for (i, &v) in tape.value(y).data().iter().enumerate() {
        assert_eq!(v, f64::max(beta[(i / 6) % 3], 0.0));
    }
}

#[test]
fn init_spread_matches_the_uniform_bound() {
    let cfg = config(ModelKind::Naive, 2, 128, 3, 1, vec![], 1);
    let model = Model::<f64>::init(cfg.clone(), &mut rng_from_seed(5)).unwrap();
    let spec = layout(&cfg)
        .into_iter()
        .find(|l| l.name == "block2.conv2")
        .unwrap();
    assert_eq!(
        spec.kind,
        LayerKind::Conv {
            cin: 256,
            cout: 256,
            kernel: 3
        }
    );
    let w = model.params().get("block2.conv2.w").unwrap().data();
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let want = init_bound(&spec.kind) / 3f64.sqrt();
    assert!((std / want - 1.0).abs() < 0.02, "std {std} vs {want}");
    assert!(w.iter().all(|v| v.abs() <= init_bound(&spec.kind)));
    assert!(model
        .params()
        .get("block2.conv2.b")
        .unwrap()
        .data()
        .iter()
        .all(|&b| b == 0.0));
    assert!(model
        .params()
        .get("out.w")
        .unwrap()
        .data()
        .iter()
        .all(|&b| b == 0.0));
}

#[test]
fn full_wadenet_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        window_len: 512,
        ..toy_config(ModelKind::Wadenet)
    };
    let worst = check_model(&cfg, 13, 2, Some(6), None).unwrap();
    assert!(worst < TOLERANCE, "{worst}");
}

#[test]
fn eval_is_deterministic_and_predict_is_argmax() {
    let cfg = toy_config(ModelKind::Wadenet);
    let mut model = Model::<f64>::init(cfg.clone(), &mut rng_from_seed(8)).unwrap();
    let mut rng = rng_from_seed(9);
    for t in model.params_mut().params.values_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
    let x = input(4, cfg.window_len, 10);
    let a = model.logits(&x).unwrap();
    assert_eq!(a, model.logits(&x).unwrap());
    assert_eq!(model.predict(&x).unwrap(), a.argmax_rows().unwrap());
    let batch_one = model.logits(&input(1, cfg.window_len, 11)).unwrap();
    assert!(batch_one.data().iter().all(|v| v.is_finite()));
}

#[test]
fn fresh_model_loss_is_log_k() {
    let cfg = toy_config(ModelKind::Naive);
    let mut model = Model::<f64>::init(cfg.clone(), &mut rng_from_seed(1)).unwrap();
    let loss = model
        .train_loss(
            &input(4, cfg.window_len, 2),
            &[0, 1, 2, 0],
            &mut rng_from_seed(3),
        )
        .unwrap();
    assert!((loss - (cfg.num_classes as f64).ln()).abs() < 1e-12);
}
