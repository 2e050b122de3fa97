use proptest::prelude::*;
use rand::Rng as _;
use wadenet::gradcheck::{check_graph, TOLERANCE};
use wadenet::tensor::{BnState, Mode};
use wadenet::{rng_from_seed, Tape64, Tensor64};

fn random(shape: &[usize], seed: u64) -> Tensor64 {
    let mut rng = rng_from_seed(seed);
    Tensor64::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[derive(Debug)]
struct Conv {
    batch: usize,
    cin: usize,
    cout: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Conv {
    fn out_len(&self) -> usize {
        (self.len + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Input index read by output `t` at `tap`, if it is inside the signal.
    fn source(&self, t: usize, tap: usize) -> Option<usize> {
        (t * self.stride + tap)
            .checked_sub(self.padding)
            .filter(|&i| i < self.len)
    }

    fn forward(&self, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let lo = self.out_len();
        let mut y = vec![0.0; self.batch * self.cout * lo];
        for n in 0..self.batch {
            for co in 0..self.cout {
                for t in 0..lo {
                    let mut acc = b[co];
                    for ci in 0..self.cin {
                        for j in 0..self.kernel {
                            if let Some(i) = self.source(t, j) {
                                acc += w[(co * self.cin + ci) * self.kernel + j]
                                    * x[(n * self.cin + ci) * self.len + i];
                            }
                        }
                    }
                    y[(n * self.cout + co) * lo + t] = acc;
                }
            }
        }
        y
    }

    /// Gradients of `<conv(x), up>` with respect to x, w and b.
    fn adjoint(&self, x: &[f64], w: &[f64], up: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let lo = self.out_len();
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; self.cout];
        for n in 0..self.batch {
            for co in 0..self.cout {
                for t in 0..lo {
                    let u = up[(n * self.cout + co) * lo + t];
                    db[co] += u;
                    for ci in 0..self.cin {
                        for j in 0..self.kernel {
                            if let Some(i) = self.source(t, j) {
                                let wi = (co * self.cin + ci) * self.kernel + j;
                                let xi = (n * self.cin + ci) * self.len + i;
                                dx[xi] += w[wi] * u;
                                dw[wi] += x[xi] * u;
                            }
                        }
                    }
                }
            }
        }
        (dx, dw, db)
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn conv_geometry() -> impl Strategy<Value = Conv> {
    (
        1usize..3,
        1usize..4,
        1usize..4,
        0usize..4,
        1usize..4,
        0usize..4,
        0usize..20,
    )
        .prop_map(|(batch, cin, cout, half, stride, padding, extra)| {
            let kernel = 2 * half + 1;
            Conv {
                batch,
                cin,
                cout,
                len: kernel.saturating_sub(2 * padding).max(1) + extra,
                kernel,
                stride,
                padding,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_brute_force(g in conv_geometry(), seed in any::<u64>()) {
        let x = random(&[g.batch, g.cin, g.len], seed);
        let w = random(&[g.cout, g.cin, g.kernel], seed ^ 1);
        let b = random(&[g.cout], seed ^ 2);
        let up = random(&[g.batch, g.cout, g.out_len()], seed ^ 3);

        let mut tape = Tape64::new();
        let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
        let y = tape.conv1d(xv, wv, bv, g.stride, g.padding).unwrap();
        prop_assert_eq!(tape.shape(y), &[g.batch, g.cout, g.out_len()][..]);
        prop_assert!(max_diff(tape.value(y).data(), &g.forward(x.data(), w.data(), b.data())) < 1e-12);

        let loss = tape.weighted_sum(y, up.data().to_vec()).unwrap();
        let grads = tape.backward(loss).unwrap();
        let (dx, dw, db) = g.adjoint(x.data(), w.data(), up.data());
        prop_assert!(max_diff(grads.get(xv).unwrap().data(), &dx) < 1e-12);
        prop_assert!(max_diff(grads.get(wv).unwrap().data(), &dw) < 1e-12);
        prop_assert!(max_diff(grads.get(bv).unwrap().data(), &db) < 1e-12);
    }

    #[test]
    fn same_padding_preserves_length(half in 0usize..4, len in 1usize..64) {
        let kernel = 2 * half + 1;
        prop_assume!(len + 2 * half >= kernel);
        let mut tape = Tape64::new();
        let x = tape.leaf(random(&[1, 2, len], len as u64));
        let w = tape.leaf(random(&[3, 2, kernel], 7));
        let b = tape.leaf(Tensor64::zeros(&[3]));
        let y = tape.conv1d(x, w, b, 1, (kernel - 1) / 2).unwrap();
        prop_assert_eq!(tape.shape(y), &[1, 3, len][..]);
    }

    #[test]
    fn linear_matches_nested_loops(rows in 1usize..5, fin in 1usize..20, fout in 1usize..6, seed in any::<u64>()) {
        let x = random(&[rows, fin], seed);
        let w = random(&[fout, fin], seed ^ 5);
        let b = random(&[fout], seed ^ 6);
        let mut tape = Tape64::new();
        let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
        let y = tape.linear(xv, wv, bv).unwrap();
        let mut want = vec![0.0; rows * fout];
        for r in 0..rows {
            for o in 0..fout {
                let mut acc = b.data()[o];
                for i in 0..fin {
                    acc += w.data()[o * fin + i] * x.data()[r * fin + i];
                }
                want[r * fout + o] = acc;
            }
        }
        prop_assert!(max_diff(tape.value(y).data(), &want) < 1e-12);
    }

    #[test]
    fn relu_splits_identity(seed in any::<u64>()) {
        let x = random(&[2, 3, 11], seed);
        let mut tape = Tape64::new();
        let xv = tape.leaf(x.clone());
        let neg = tape.leaf(x.map(|v| -v));
        let pos = tape.relu(xv);
        let negr = tape.relu(neg);
        let back: Vec<f64> = tape.value(pos).data().iter().zip(tape.value(negr).data()).map(|(p, n)| p - n).collect();
        prop_assert!(max_diff(&back, x.data()) == 0.0);
        prop_assert!(tape.value(pos).data().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn conv_rejects_bad_geometry() {
    let mut tape = Tape64::new();
    let x = tape.leaf(random(&[1, 2, 8], 1));
    let even = tape.leaf(random(&[1, 2, 4], 2));
    let odd = tape.leaf(random(&[1, 3, 3], 3));
    let b = tape.leaf(Tensor64::zeros(&[1]));
    assert!(tape.conv1d(x, even, b, 1, 1).is_err());
    assert!(tape.conv1d(x, odd, b, 1, 1).is_err());
}

#[test]
fn batchnorm_train_standardizes_each_channel() {
    let (batch, channels, len) = (8, 3, 40);
    let mut rng = rng_from_seed(11);
    let x = Tensor64::from_fn(&[batch, channels, len], |i| {
        let c = (i / len) % channels;
        3.0 * c as f64 - 2.0 + (1.0 + c as f64) * rng.random_range(-1.0..1.0)
    });
    let mut mean = vec![0.0; channels];
    let mut var = vec![1.0; channels];
    let mut tape = Tape64::new();
    let xv = tape.leaf(x.clone());
    let gamma = tape.leaf(Tensor64::ones(&[channels]));
    let beta = tape.leaf(Tensor64::zeros(&[channels]));
    let y = tape
        .batchnorm1d(
            xv,
            gamma,
            beta,
            BnState::Train {
                running_mean: &mut mean,
                running_var: &mut var,
            },
        )
        .unwrap();
    let n = (batch * len) as f64;
    for c in 0..channels {
        let vals: Vec<f64> = (0..batch)
            .flat_map(|b| {
                let start = (b * channels + c) * len;
                tape.value(y).data()[start..start + len].to_vec()
            })
            .collect();
        let m = vals.iter().sum::<f64>() / n;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        assert!(m.abs() < 1e-12, "channel {c} mean {m}");
        assert!((v - 1.0).abs() < 1e-3, "channel {c} var {v}");

        let raw: Vec<f64> = (0..batch)
            .flat_map(|b| {
                let start = (b * channels + c) * len;
                x.data()[start..start + len].to_vec()
            })
            .collect();
        let rm = raw.iter().sum::<f64>() / n;
        let unbiased = raw.iter().map(|x| (x - rm).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean[c] - 0.1 * rm).abs() < 1e-12);
        assert!((var[c] - (0.9 + 0.1 * unbiased)).abs() < 1e-12);
    }
}

#[test]
fn batchnorm_eval_uses_running_statistics() {
    let x = random(&[2, 2, 5], 4);
    let (mean, var) = (vec![0.5, -1.0], vec![4.0, 0.25]);
    let mut tape = Tape64::new();
    let xv = tape.leaf(x.clone());
    let gamma = tape.leaf(Tensor64::new(vec![2], vec![2.0, 1.0]).unwrap());
    let beta = tape.leaf(Tensor64::new(vec![2], vec![0.0, 3.0]).unwrap());
    let y = tape
        .batchnorm1d(
            xv,
            gamma,
            beta,
            BnState::Eval {
                running_mean: &mean,
                running_var: &var,
            },
        )
        .unwrap();
    for (i, (&yi, &xi)) in tape.value(y).data().iter().zip(x.data()).enumerate() {
        let c = (i / 5) % 2;
        let (g, b) = [(2.0, 0.0), (1.0, 3.0)][c];
        let want = g * (xi - mean[c]) / (var[c] + 1e-5f64).sqrt() + b;
        assert!((yi - want).abs() < 1e-12);
    }
}

#[test]
fn dropout_preserves_mean() {
    let n = 200_000;
    let p = 0.5;
    let mut tape = Tape64::new();
    let x = tape.leaf(Tensor64::ones(&[n]));
    let y = tape
        .dropout(x, p, &mut rng_from_seed(3), Mode::Train)
        .unwrap();
    let data = tape.value(y).data();
    let mean = data.iter().sum::<f64>() / n as f64;
    assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    assert!(data.iter().all(|&v| v == 0.0 || v == 2.0));

    let z = tape
        .dropout(x, p, &mut rng_from_seed(3), Mode::Eval)
        .unwrap();
    assert!(tape.value(z).data().iter().all(|&v| v == 1.0));
    assert!(tape
        .dropout(x, 1.0, &mut rng_from_seed(3), Mode::Train)
        .is_err());
}

#[test]
fn cross_entropy_gradient_rows_sum_to_zero() {
    let logits = random(&[6, 4], 9).map(|v| 5.0 * v);
    let targets = [0, 1, 2, 3, 1, 0];
    let mut tape = Tape64::new();
    let lv = tape.leaf(logits.clone());
    let loss = tape.softmax_cross_entropy(lv, &targets).unwrap();
    let grads = tape.backward(loss).unwrap();
    for row in grads.get(lv).unwrap().data().chunks(4) {
        assert!(row.iter().sum::<f64>().abs() < 1e-12);
    }
    let worst = check_graph(
        &[logits],
        &|t: &mut Tape64, v: &[wadenet::Var]| t.softmax_cross_entropy(v[0], &targets),
        None,
    )
    .unwrap();
    assert!(worst < TOLERANCE, "{worst}");
}

#[test]
fn cross_entropy_is_stable_for_large_logits() {
    let logits = Tensor64::new(vec![1, 3], vec![1000.0, 0.0, -1000.0]).unwrap();
    let mut tape = Tape64::new();
    let lv = tape.leaf(logits);
    let loss = tape.softmax_cross_entropy(lv, &[1]).unwrap();
    let value = tape.value(loss).data()[0];
    assert!((value - 1000.0).abs() < 1e-9, "{value}");
    assert!(tape.softmax_cross_entropy(lv, &[3]).is_err());
}

#[test]
fn tape_is_deterministic() {
    let run = || {
        let mut tape = Tape64::new();
        let x = tape.leaf(random(&[2, 3, 16], 21));
        let w = tape.leaf(random(&[4, 3, 5], 22));
        let b = tape.leaf(random(&[4], 23));
        let y = tape.conv1d(x, w, b, 2, 2).unwrap();
        let y = tape.relu(y);
        let y = tape
            .dropout(y, 0.3, &mut rng_from_seed(5), Mode::Train)
            .unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        (
            tape.value(loss).data()[0].to_bits(),
            grads
                .get(w)
                .unwrap()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn concat_then_flatten_routes_gradients() {
    let mut tape = Tape64::new();
    let a = tape.leaf(random(&[2, 1, 4], 1));
    let b = tape.leaf(random(&[2, 3, 4], 2));
    let c = tape.concat_channels(a, b).unwrap();
    assert_eq!(tape.shape(c), &[2, 4, 4]);
    let flat = tape.flatten(c).unwrap();
    assert_eq!(tape.shape(flat), &[2, 16]);
    let weights: Vec<f64> = (0..32).map(|i| i as f64).collect();
    let loss = tape.weighted_sum(flat, weights).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(
        grads.get(a).unwrap().data(),
        &[0.0, 1.0, 2.0, 3.0, 16.0, 17.0, 18.0, 19.0]
    );
    assert_eq!(grads.get(b).unwrap().data()[0], 4.0);
}
