use aufed::gradcheck::{assert_gradients, GradCheckConfig};
use aufed::{Error, Graph, ParamSet, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct 7-deep loop convolution, independent of im2col.
fn conv_oracle(x: &Tensor, w: &Tensor, pad: usize) -> Vec<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let (oh, ow) = (h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k);
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = 0.0;
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + ky as isize - pad as isize;
                                let ix = xx as isize + kx as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((b * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * c + ic) * k + ky) * k + kx];
                                s += xv * wv;
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    out
}

#[test]
fn matmul_identity() {
    let mut r = rng(1);
    let x = Tensor::<f64>::randn(&[3, 3], 1.0, &mut r);
    let mut g = Graph::new();
    let i = g.constant(Tensor::eye(3));
    let xv = g.constant(x.clone());
    let y = g.matmul(i, xv).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[3]));
    let y = g.softmax(x).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn conv2d_matches_nested_loop_oracle() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let x = Tensor::<f64>::randn(&[1, 3, 5, 5], 1.0, &mut r);
        let w = Tensor::<f64>::randn(&[2, 3, 3, 3], 1.0, &mut r);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(xv, wv, None, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 5, 5]);
        let oracle = conv_oracle(&x, &w, 1);
        for (a, b) in g.value(y).data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    // batch > 1, no padding, 5x5 kernel
    let mut r = rng(99);
    let x = Tensor::<f64>::randn(&[3, 2, 7, 6], 1.0, &mut r);
    let w = Tensor::<f64>::randn(&[4, 2, 5, 5], 1.0, &mut r);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv2d(xv, wv, None, 0).unwrap();
    let oracle = conv_oracle(&x, &w, 0);
    assert_eq!(g.value(y).len(), oracle.len());
    for (a, b) in g.value(y).data().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn sum_gradient_is_all_ones() {
    let mut p = ParamSet::new();
    p.push("w", Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut rng(3))).unwrap();
    let mut g = Graph::new();
    let w = g.param(&p, 0);
    let l = g.sum(w).unwrap();
    g.backward(l, &mut p).unwrap();
    assert!(p.tensor_at(0).grad().unwrap().iter().all(|&v| v == 1.0));
}

#[test]
fn half_squared_norm_gradient_is_identity() {
    let w0 = Tensor::<f64>::randn(&[5, 2], 1.0, &mut rng(4));
    let mut p = ParamSet::new();
    p.push("w", w0.clone()).unwrap();
    let mut g = Graph::new();
    let w = g.param(&p, 0);
    let sq = g.mul(w, w).unwrap();
    let s = g.sum(sq).unwrap();
    let l = g.scale(s, 0.5).unwrap();
    g.backward(l, &mut p).unwrap();
    for (a, b) in p.tensor_at(0).grad().unwrap().iter().zip(w0.data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn repeated_backward_accumulates() {
    let mut p = ParamSet::new();
    p.push("w", Tensor::<f64>::ones(&[3])).unwrap();
    let mut g = Graph::new();
    let w = g.param(&p, 0);
    let l = g.sum(w).unwrap();
    g.backward(l, &mut p).unwrap();
    g.backward(l, &mut p).unwrap();
    assert_eq!(p.tensor_at(0).grad().unwrap(), &[2.0, 2.0, 2.0]);
}

#[test]
fn non_scalar_loss_is_a_contract_error() {
    let mut p = ParamSet::new();
    p.push("w", Tensor::<f64>::ones(&[3])).unwrap();
    let mut g = Graph::new();
    let w = g.param(&p, 0);
    assert!(matches!(g.backward(w, &mut p), Err(Error::Contract(_))));
    let mut ng = Graph::<f64>::no_grad();
    let w = ng.param(&p, 0);
    let s = ng.sum(w).unwrap();
    assert!(matches!(ng.backward(s, &mut p), Err(Error::Contract(_))));
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    match g.matmul(a, b) {
        Err(Error::Dimension { op, detail }) => {
            assert_eq!(op, "matmul");
            assert!(detail.contains("[2, 3]") && detail.contains("[4, 2]"));
        }
        other => panic!("unexpected {other:?}", other = other.map(|_| ())),
    }
    assert!(g.add(a, b).is_err());
}

#[test]
fn non_finite_output_is_a_numeric_error() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::full(&[2], 1e300));
    let r = g.mul(a, a);
    assert!(matches!(r, Err(Error::Numeric { op: "mul" })));
}

#[test]
fn masked_softmax_zeroes_masked_and_empty_rows() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[2, 3], vec![1.0, 5.0, 2.0, 0.3, 0.1, -4.0]).unwrap());
    let mask = [true, false, true, false, false, false];
    let y = g.masked_softmax(x, &mask).unwrap();
    let d = g.value(y).data();
    assert_eq!(d[1], 0.0);
    assert!((d[0] + d[2] - 1.0).abs() < 1e-15);
    assert_eq!(&d[3..], &[0.0, 0.0, 0.0]);
}

#[test]
fn bce_and_cross_entropy_values() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 4]));
    let l = g.bce_with_logits(x, &[1.0, 0.0, 0.0, 0.0]).unwrap();
    assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    let ce = g.cross_entropy(x, &[2]).unwrap();
    assert!((g.value(ce).data()[0] - 4f64.ln()).abs() < 1e-15);
}

#[test]
fn identical_inputs_give_bit_identical_outputs() {
    let run = || {
        let mut r = rng(7);
        let x = Tensor::<f64>::randn(&[2, 3, 5, 5], 1.0, &mut r);
        let w = Tensor::<f64>::randn(&[4, 3, 3, 3], 1.0, &mut r);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x), g.constant(w));
        let y = g.conv2d(xv, wv, None, 1).unwrap();
        let y = g.elu(y).unwrap();
        let y = g.flatten(y).unwrap();
        let y = g.softmax(y).unwrap();
        g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

// ---- per-op finite-difference checks over 20 seeds ----

type Builder = fn(&mut Graph<f64>, &ParamSet<f64>) -> aufed::Result<aufed::Var>;

fn p(set: &ParamSet<f64>, g: &mut Graph<f64>, name: &str) -> aufed::Var {
    g.param_named(set, name).unwrap()
}

/// Random readout weights make every op's output contribute non-trivially.
fn readout(g: &mut Graph<f64>, y: aufed::Var, seed: u64) -> aufed::Result<aufed::Var> {
    let r = Tensor::<f64>::randn(g.shape(y), 1.0, &mut rng(seed ^ 0xABCD));
    let rv = g.constant(r);
    let m = g.mul(y, rv)?;
    g.sum(m)
}

fn op_cases() -> Vec<(&'static str, bool, Vec<(&'static str, Vec<usize>)>, Builder)> {
    vec![
        ("add", false, vec![("a", vec![3, 4]), ("b", vec![3, 4])], |g, s| {
            let (a, b) = (p(s, g, "a"), p(s, g, "b"));
            let y = g.add(a, b)?;
            readout(g, y, 1)
        }),
        ("sub_mul", false, vec![("a", vec![3, 4]), ("b", vec![3, 4])], |g, s| {
            let (a, b) = (p(s, g, "a"), p(s, g, "b"));
            let y = g.sub(a, b)?;
            let y = g.mul(y, a)?;
            readout(g, y, 2)
        }),
        ("add_broadcast", false, vec![("x", vec![4, 3]), ("b", vec![3])], |g, s| {
            let (x, b) = (p(s, g, "x"), p(s, g, "b"));
            let y = g.add_broadcast(x, b)?;
            readout(g, y, 3)
        }),
        ("mul_repeat", false, vec![("x", vec![2, 3, 4]), ("w", vec![2, 3])], |g, s| {
            let (x, w) = (p(s, g, "x"), p(s, g, "w"));
            let y = g.mul_repeat(x, w)?;
            readout(g, y, 4)
        }),
        ("affine", false, vec![("x", vec![2, 3])], |g, s| {
            let x = p(s, g, "x");
            let y = g.affine(x, -0.7, Some(&Tensor::full(&[3], 0.2)))?;
            readout(g, y, 5)
        }),
        ("matmul", false, vec![("a", vec![3, 4]), ("b", vec![4, 2])], |g, s| {
            let (a, b) = (p(s, g, "a"), p(s, g, "b"));
            let y = g.matmul(a, b)?;
            readout(g, y, 6)
        }),
        ("bmm", false, vec![("a", vec![2, 3, 4]), ("b", vec![2, 4, 2])], |g, s| {
            let (a, b) = (p(s, g, "a"), p(s, g, "b"));
            let y = g.bmm(a, b)?;
            readout(g, y, 7)
        }),
        ("conv2d", false, vec![("x", vec![2, 3, 5, 5]), ("w", vec![2, 3, 3, 3]), ("b", vec![2])], |g, s| {
            let (x, w, b) = (p(s, g, "x"), p(s, g, "w"), p(s, g, "b"));
            let y = g.conv2d(x, w, Some(b), 1)?;
            readout(g, y, 8)
        }),
        ("max_pool2d", true, vec![("x", vec![1, 2, 4, 4])], |g, s| {
            let x = p(s, g, "x");
            let y = g.max_pool2d(x, 3, 1)?;
            readout(g, y, 9)
        }),
        ("batch_norm", false, vec![("x", vec![4, 3, 2, 2]), ("gamma", vec![3]), ("beta", vec![3])], |g, s| {
            let (x, ga, be) = (p(s, g, "x"), p(s, g, "gamma"), p(s, g, "beta"));
            let y = g.batch_norm(x, ga, be, 1e-5)?;
            readout(g, y, 10)
        }),
        ("batch_norm_eval", false, vec![("x", vec![4, 3, 2]), ("gamma", vec![3]), ("beta", vec![3])], |g, s| {
            let (x, ga, be) = (p(s, g, "x"), p(s, g, "gamma"), p(s, g, "beta"));
            let y = g.batch_norm_eval(x, ga, be, &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0], 1e-5)?;
            readout(g, y, 11)
        }),
        ("layer_norm", false, vec![("x", vec![3, 5]), ("gamma", vec![5]), ("beta", vec![5])], |g, s| {
            let (x, ga, be) = (p(s, g, "x"), p(s, g, "gamma"), p(s, g, "beta"));
            let y = g.layer_norm(x, ga, be, 1e-5)?;
            readout(g, y, 12)
        }),
        ("softmax", false, vec![("x", vec![3, 4])], |g, s| {
            let x = p(s, g, "x");
            let y = g.softmax(x)?;
            readout(g, y, 13)
        }),
        ("masked_softmax", false, vec![("x", vec![2, 3, 3])], |g, s| {
            let x = p(s, g, "x");
            let mask = [false, true, true, true, false, false, true, true, false];
            let y = g.masked_softmax(x, &mask)?;
            readout(g, y, 14)
        }),
        ("sigmoid", false, vec![("x", vec![6])], |g, s| {
            let x = p(s, g, "x");
            let y = g.sigmoid(x)?;
            readout(g, y, 15)
        }),
        ("relu", true, vec![("x", vec![6])], |g, s| {
            let x = p(s, g, "x");
            let y = g.relu(x)?;
            readout(g, y, 16)
        }),
        ("leaky_relu", true, vec![("x", vec![6])], |g, s| {
            let x = p(s, g, "x");
            let y = g.leaky_relu(x, 0.2)?;
            readout(g, y, 17)
        }),
        ("elu", true, vec![("x", vec![6])], |g, s| {
            let x = p(s, g, "x");
            let y = g.elu(x)?;
            readout(g, y, 18)
        }),
        ("cross_entropy", false, vec![("x", vec![3, 4])], |g, s| {
            let x = p(s, g, "x");
            g.cross_entropy(x, &[0, 3, 1])
        }),
        ("bce_with_logits", false, vec![("x", vec![2, 3])], |g, s| {
            let x = p(s, g, "x");
            g.bce_with_logits(x, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0])
        }),
        ("mean_and_mean_last", false, vec![("x", vec![3, 4])], |g, s| {
            let x = p(s, g, "x");
            let y = g.mean_last(x)?;
            let y = g.mul(y, y)?;
            g.mean(y)
        }),
        ("squared_distance", false, vec![("x", vec![2, 2])], |g, s| {
            let x = p(s, g, "x");
            g.squared_distance(x, &Tensor::new(&[2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap())
        }),
        ("concat_slice", false, vec![("a", vec![2, 3]), ("b", vec![2, 2])], |g, s| {
            let (a, b) = (p(s, g, "a"), p(s, g, "b"));
            let y = g.concat(&[a, b, a], 1)?;
            let y = g.slice(y, 1, 1, 4)?;
            readout(g, y, 19)
        }),
        ("gather_permute_reshape", false, vec![("x", vec![4, 2, 3])], |g, s| {
            let x = p(s, g, "x");
            let y = g.gather(x, &[3, 0, 0, 2])?;
            let y = g.permute(y, &[2, 0, 1])?;
            let y = g.reshape(y, &[6, 4])?;
            readout(g, y, 20)
        }),
    ]
}

#[test]
fn every_op_passes_finite_difference_checks_over_20_seeds() {
    for (name, piecewise, shapes, build) in op_cases() {
        for seed in 0..20u64 {
            let mut r = rng(seed * 31 + name.len() as u64);
            let mut set = ParamSet::new();
            for (n, s) in &shapes {
                set.push(*n, Tensor::<f64>::randn(s, 1.0, &mut r)).unwrap();
            }
            let cfg = if piecewise {
                GradCheckConfig { per_tensor: 64, ..GradCheckConfig::piecewise() }
            } else {
                GradCheckConfig { per_tensor: 64, ..GradCheckConfig::default() }
            };
            assert_gradients(&set, build, &cfg, &mut r)
                .unwrap_or_else(|e| panic!("{name} seed {seed}: {e}"));
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_positive_and_sum_to_one(
        rows in 1usize..5,
        vals in proptest::collection::vec(-30.0f64..30.0, 1..40),
    ) {
        let n = vals.len();
        let data: Vec<f64> = (0..rows).flat_map(|r| vals.iter().map(move |v| v * (r as f64 + 1.0) / 2.0)).collect();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[rows, n], data).unwrap());
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(n) {
            prop_assert!(row.iter().all(|&v| v > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
