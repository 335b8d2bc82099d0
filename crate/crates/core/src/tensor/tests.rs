use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::Rng;

use super::gradcheck::grad_check;
use super::*;
use crate::rng::{stream, Domain};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = stream(seed, Domain::Init, 0, 0);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

fn no_params() -> ParameterRegistry<f64> {
    ParameterRegistry::new()
}

#[test]
fn matmul_hand_product() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn matmul_identity_and_shape_error() {
    let m = random(&[3, 4], 1);
    let mut id = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        id.data_mut()[i * 3 + i] = 1.0;
    }
    let mut tape = Tape::new();
    let iv = tape.constant(id);
    let mv = tape.constant(m.clone());
    let out = tape.matmul(iv, mv).unwrap();
    assert_eq!(tape.value(out), &m);
    assert!(matches!(tape.matmul(mv, mv), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn matmul_matches_triple_loop() {
    let a = random(&[7, 5], 2);
    let b = random(&[5, 3], 3);
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(av, bv).unwrap();
    for i in 0..7 {
        for j in 0..3 {
            let mut want = 0.0;
            for p in 0..5 {
                want += a.data()[i * 5 + p] * b.data()[p * 3 + j];
            }
            let got = tape.value(c).data()[i * 3 + j];
            assert!((got - want).abs() <= 1e-5 * want.abs().max(1e-12), "{got} vs {want}");
        }
    }
}

/// Straight six-loop cross-correlation.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[o, ho, wo]);
    for oc in 0..o {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ic in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= wd {
                                continue;
                            }
                            acc += x.data()[(ic * h + iy as usize) * wd + ix as usize]
                                * w.data()[((oc * c + ic) * kh + ky) * kw + kx];
                        }
                    }
                }
                out.data_mut()[(oc * ho + oy) * wo + ox] = acc;
            }
        }
    }
    out
}

#[test]
fn conv_one_by_one_identity() {
    let x = random(&[2, 4, 5], 4);
    let mut w = Tensor::zeros(&[2, 2, 1, 1]);
    w.data_mut()[0] = 1.0;
    w.data_mut()[3] = 1.0;
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w));
    let y = tape.conv2d(xv, wv, None, 1, 0).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn conv_ones_kernel_on_constant_input() {
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::full(&[1, 5, 5], 1.0));
    let wv = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = tape.conv2d(xv, wv, None, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 3, 3]);
    assert!(tape.value(y).data().iter().all(|&v| v == 9.0));
}

#[test]
fn conv_matches_six_loop_oracle() {
    for (stride, pad, seed) in [(1, 0, 10), (1, 1, 11), (2, 1, 12)] {
        let x = random(&[3, 9, 9], seed);
        let w = random(&[4, 3, 3, 3], seed + 100);
        let want = naive_conv(&x, &w, stride, pad);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x), tape.constant(w));
        let y = tape.conv2d(xv, wv, None, stride, pad).unwrap();
        assert_eq!(tape.shape(y), want.shape());
        for (g, e) in tape.value(y).data().iter().zip(want.data()) {
            assert!((g - e).abs() <= 1e-5 * e.abs().max(1.0));
        }
    }
}

#[test]
fn conv_rejects_non_integral_output() {
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(Tensor::zeros(&[1, 4, 4]));
    let wv = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(tape.conv2d(xv, wv, None, 2, 0).is_err());
}

#[test]
fn avg_pool_halves_each_axis() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 2, 4], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
    let y = tape.avg_pool2(x).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 1, 2]);
    assert_eq!(tape.value(y).data(), &[3.5, 5.5]);
    let odd = tape.constant(Tensor::zeros(&[1, 1, 3, 4]));
    assert!(tape.avg_pool2(odd).is_err());
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 2], &[3.0, 3.0, 1.0, -1.0]));
    let g = tape.constant(t(&[2], &[1.0, 1.0]));
    let b = tape.constant(t(&[2], &[0.0, 0.0]));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    let out = tape.value(y).data();
    assert_eq!(&out[..2], &[0.0, 0.0]);
    assert!((out[2] - 1.0).abs() < 1e-5 && (out[3] + 1.0).abs() < 1e-5);
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3, 2], &[0.0, 0.0, 1000.0, 0.0, 2.0, -1.0]));
    let y = tape.softmax(x);
    let out = tape.value(y).data().to_vec();
    assert_eq!(&out[..2], &[0.5, 0.5]);
    assert_eq!(&out[2..4], &[1.0, 0.0]);
    let shifted = tape.constant(t(&[1, 2], &[2.0 + 37.5, -1.0 + 37.5]));
    let ys = tape.softmax(shifted);
    for (a, b) in tape.value(ys).data().iter().zip(&out[4..]) {
        assert!((a - b).abs() < 1e-7);
    }
}

#[test]
fn relu_and_eval_dropout() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[-3.0, 3.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 3.0]);
    let mut rng = stream(0, Domain::Dropout, 0, 0);
    let d = tape.dropout(x, 0.5, Mode::Eval, &mut rng);
    assert_eq!(tape.value(d), tape.value(x));
}

#[test]
fn train_dropout_preserves_mean() {
    let n = 100_000;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[n], 1.0));
    let mut rng = stream(3, Domain::Dropout, 0, 0);
    let y = tape.dropout(x, 0.5, Mode::Train, &mut rng);
    let vals = tape.value(y).data();
    assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
    let mean = vals.iter().sum::<f64>() / n as f64;
    // each element is 0 or 2 with equal odds: std 1
    let se = 1.0 / (n as f64).sqrt();
    assert!((mean - 1.0).abs() < 3.0 * se, "mean {mean}");
}

#[test]
fn gelu_tracks_erf_form() {
    // erf-form GELU values from a high-precision evaluation
    let cases = [(-3.0, -0.004_049_942_186_948_7), (-1.0, -0.158_655_253_931_457), (0.5, 0.345_731_404_830_707_5), (2.0, 1.954_499_736_103_642)];
    let mut tape = Tape::new();
    let x = tape.constant(t(&[4], &cases.map(|c| c.0)));
    let y = tape.gelu(x);
    for (got, (_, want)) in tape.value(y).data().iter().zip(cases) {
        assert!((got - want).abs() < 1e-3, "{got} vs {want}");
    }
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let z = tape.constant(t(&[1, 2], &[0.0, 0.0]));
    let l = tape.soft_cross_entropy(z, &t(&[1, 2], &[0.5, 0.5])).unwrap();
    assert!((tape.value(l).item() - core::f64::consts::LN_2).abs() < 1e-12);

    let z = tape.constant(t(&[1, 2], &[60.0, -60.0]));
    let l = tape.soft_cross_entropy(z, &t(&[1, 2], &[1.0, 0.0])).unwrap();
    assert!(tape.value(l).item() < 1e-12);

    let logits = t(&[1, 2], &[0.3, -1.2]);
    let z = tape.constant(logits);
    let la = tape.soft_cross_entropy(z, &t(&[1, 2], &[1.0, 0.0])).unwrap();
    let lb = tape.soft_cross_entropy(z, &t(&[1, 2], &[0.0, 1.0])).unwrap();
    let lm = tape.soft_cross_entropy(z, &t(&[1, 2], &[0.5, 0.5])).unwrap();
    let avg = 0.5 * (tape.value(la).item() + tape.value(lb).item());
    assert!((tape.value(lm).item() - avg).abs() < 1e-12);

    assert!(matches!(
        tape.soft_cross_entropy(z, &t(&[1, 2], &[0.7, 0.7])),
        Err(TensorError::TargetNotDistribution { row: 0, .. })
    ));
}

#[test]
fn backward_simple_cases() {
    let x = random(&[3, 4], 20);
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let s = tape.sum(xv);
    let g = tape.backward(s, &mut no_params()).unwrap().of(xv).unwrap();
    assert!(g.data().iter().all(|&v| v == 1.0));

    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let sq = tape.mul(xv, xv).unwrap();
    let s = tape.sum(sq);
    let g = tape.backward(s, &mut no_params()).unwrap().of(xv).unwrap();
    for (gv, xv) in g.data().iter().zip(x.data()) {
        assert_eq!(*gv, 2.0 * xv);
    }
    assert!(matches!(
        tape.backward(sq, &mut no_params()),
        Err(TensorError::NotScalar(_))
    ));
}

#[test]
fn parameter_gradients_accumulate_until_zeroed() {
    let mut reg = ParameterRegistry::new();
    let id = reg.add("w", t(&[2], &[1.0, 2.0])).unwrap();
    for _ in 0..2 {
        let mut tape = Tape::new();
        let w = tape.param(&reg, id);
        let s = tape.sum(w);
        tape.backward(s, &mut reg).unwrap();
    }
    assert_eq!(reg.get(id).grad.data(), &[2.0, 2.0]);
    reg.zero_grad();
    assert_eq!(reg.get(id).grad.data(), &[0.0, 0.0]);

    reg.get_mut(id).trainable = false;
    let mut tape = Tape::new();
    let w = tape.param(&reg, id);
    let s = tape.sum(w);
    tape.backward(s, &mut reg).unwrap();
    assert_eq!(reg.get(id).grad.data(), &[0.0, 0.0]);
}

/// Projects `y` to a scalar with fixed pseudo-random weights so every output
/// element carries a distinct gradient.
fn weighted_sum(tape: &mut Tape<f64>, y: Var) -> Result<Var, TensorError> {
    let shape = tape.shape(y).to_vec();
    let w = random(&shape, 999);
    let wv = tape.constant(w);
    let p = tape.mul(y, wv)?;
    Ok(tape.sum(p))
}

const OP_TOL: f64 = 1e-5;

#[test]
fn grad_check_linear_map_is_exact() {
    let a = random(&[4, 3], 30);
    let err = grad_check(
        |tape, x| {
            let av = tape.constant(a.clone());
            let y = tape.matmul(x, av)?;
            weighted_sum(tape, y)
        },
        &random(&[2, 4], 31),
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-9, "linear grad error {err}");
}

#[test]
fn grad_check_each_op() {
    type Case = (&'static str, Vec<usize>, fn(&mut Tape<f64>, Var) -> Result<Var, TensorError>);
    let cases: Vec<Case> = vec![
        ("matmul rhs", vec![3, 2], |tp, x| {
            let a = tp.constant(random(&[4, 3], 40));
            tp.matmul(a, x)
        }),
        ("bmm", vec![2, 3, 4], |tp, x| {
            let b = tp.constant(random(&[2, 4, 5], 41));
            tp.batch_matmul(x, b, false)
        }),
        ("bmm rhs", vec![2, 4, 5], |tp, x| {
            let a = tp.constant(random(&[2, 3, 4], 42));
            tp.batch_matmul(a, x, false)
        }),
        ("bmm trans lhs", vec![2, 3, 4], |tp, x| {
            let b = tp.constant(random(&[2, 5, 4], 43));
            tp.batch_matmul(x, b, true)
        }),
        ("bmm trans rhs", vec![2, 5, 4], |tp, x| {
            let a = tp.constant(random(&[2, 3, 4], 44));
            tp.batch_matmul(a, x, true)
        }),
        ("self attention scores", vec![2, 3, 4], |tp, x| tp.batch_matmul(x, x, true)),
        ("add broadcast", vec![4], |tp, x| {
            let a = tp.constant(random(&[3, 4], 45));
            tp.add(a, x)
        }),
        ("mul", vec![3, 4], |tp, x| tp.mul(x, x)),
        ("scale", vec![5], |tp, x| Ok(tp.scale(x, 0.37))),
        ("relu", vec![6], |tp, x| Ok(tp.relu(x))),
        ("gelu", vec![6], |tp, x| Ok(tp.gelu(x))),
        ("softmax", vec![3, 5], |tp, x| Ok(tp.softmax(x))),
        ("layer_norm", vec![3, 6], |tp, x| {
            let g = tp.constant(random(&[6], 46));
            let b = tp.constant(random(&[6], 47));
            tp.layer_norm(x, g, b, 1e-5)
        }),
        ("layer_norm gamma", vec![6], |tp, x| {
            let v = tp.constant(random(&[3, 6], 48));
            let b = tp.constant(random(&[6], 49));
            tp.layer_norm(v, x, b, 1e-5)
        }),
        ("layer_norm beta", vec![6], |tp, x| {
            let v = tp.constant(random(&[3, 6], 50));
            let g = tp.constant(random(&[6], 51));
            tp.layer_norm(v, g, x, 1e-5)
        }),
        ("conv input", vec![2, 2, 7, 7], |tp, x| {
            let w = tp.constant(random(&[3, 2, 3, 3], 52));
            let b = tp.constant(random(&[3], 53));
            tp.conv2d(x, w, Some(b), 2, 1)
        }),
        ("conv kernel", vec![3, 2, 3, 3], |tp, w| {
            let x = tp.constant(random(&[2, 2, 5, 5], 54));
            tp.conv2d(x, w, None, 1, 1)
        }),
        ("conv bias", vec![3], |tp, b| {
            let x = tp.constant(random(&[1, 2, 5, 5], 55));
            let w = tp.constant(random(&[3, 2, 3, 3], 56));
            tp.conv2d(x, w, Some(b), 1, 0)
        }),
        ("reshape", vec![2, 6], |tp, x| tp.reshape(x, &[3, 4])),
        ("permute", vec![2, 3, 4], |tp, x| tp.permute(x, &[2, 0, 1])),
        ("concat", vec![2, 3], |tp, x| {
            let o = tp.constant(random(&[2, 2], 57));
            tp.concat(&[o, x, x], 1)
        }),
        ("select", vec![2, 3, 4], |tp, x| tp.select(x, 1, 2)),
        ("patchify", vec![1, 2, 4, 4], |tp, x| tp.patchify(x, 2)),
        ("mean_last", vec![3, 4], |tp, x| Ok(tp.mean_last(x))),
        ("avg_pool2", vec![2, 3, 4, 6], |tp, x| tp.avg_pool2(x)),
        ("broadcast", vec![2, 3], |tp, x| Ok(tp.broadcast(x, 3))),
    ];
    for (i, (name, shape, f)) in cases.into_iter().enumerate() {
        let err = grad_check(
            |tp, x| {
                let y = f(tp, x)?;
                weighted_sum(tp, y)
            },
            &random(&shape, 300 + i as u64),
            1e-6,
        )
        .unwrap();
        assert!(err <= OP_TOL, "{name}: max relative error {err}");
    }
}

#[test]
fn grad_check_cross_entropy() {
    let target = t(&[3, 2], &[1.0, 0.0, 0.3, 0.7, 0.0, 1.0]);
    let err = grad_check(|tp, x| tp.soft_cross_entropy(x, &target), &random(&[3, 2], 60), 1e-6).unwrap();
    assert!(err <= OP_TOL, "{err}");
}

#[test]
fn grad_check_composite_mlp() {
    let w1 = random(&[4, 8], 61);
    let w2 = random(&[8, 2], 62);
    let target = t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 0.5, 0.5]);
    let err = grad_check(
        |tp, x| {
            let a = tp.constant(w1.clone());
            let b = tp.constant(w2.clone());
            let h = tp.matmul(x, a)?;
            let h = tp.gelu(h);
            let z = tp.matmul(h, b)?;
            tp.soft_cross_entropy(z, &target)
        },
        &random(&[3, 4], 63),
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut reg = ParameterRegistry::new();
        let w = reg.add("w", random(&[5, 3], 70)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(random(&[4, 5], 71));
        let wv = tape.param(&reg, w);
        let y = tape.matmul(x, wv).unwrap();
        let y = tape.softmax(y);
        let s = tape.sum(y);
        let s = tape.mul(s, s).unwrap();
        tape.backward(s, &mut reg).unwrap();
        reg.get(w).grad.data().to_vec()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 1..8), 1..5)) {
        let d = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied().chain(core::iter::repeat(0.0)).take(d)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[rows.len(), d], data).unwrap());
        let y = tape.softmax(x);
        for row in tape.value(y).data().chunks(d) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn f32_and_f64_paths_agree() {
    let x = random(&[2, 3], 80);
    let w = random(&[3, 2], 81);
    let mut t64 = Tape::new();
    let (a, b) = (t64.constant(x.clone()), t64.constant(w.clone()));
    let y64 = t64.matmul(a, b).unwrap();
    let mut t32 = Tape::<f32>::new();
    let (a, b) = (t32.constant(x.cast()), t32.constant(w.cast()));
    let y32 = t32.matmul(a, b).unwrap();
    for (p, q) in t64.value(y64).data().iter().zip(t32.value(y32).data()) {
        assert!((p - *q as f64).abs() < 1e-5);
    }
    let _ = vec![0u8];
}
