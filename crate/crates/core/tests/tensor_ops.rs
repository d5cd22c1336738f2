//! Tensor operations against naive oracles and finite differences.

use avcc_core::rng::rng_for;
use avcc_core::tensor::gradcheck::{self, relative_error};
use avcc_core::tensor::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_for(seed, "randn");
    Tensor::from_fn(shape.to_vec(), |_| rng.sample::<f64, _>(StandardNormal))
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(&[i, p]) * b.at(&[p, j]);
            }
        }
    }
    t(&[m, n], &out)
}

fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: (usize, usize), pad: (usize, usize)) -> Tensor {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let ow = (wd + 2 * pad.1 - kw) / stride.1 + 1;
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = b[o];
                for c in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (y * stride.0 + ky) as isize - pad.0 as isize;
                            let ix = (xx * stride.1 + kx) as isize - pad.1 as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += x.at(&[c, iy as usize, ix as usize]) * w.at(&[o, c, ky, kx]);
                            }
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = acc;
            }
        }
    }
    t(&[c_out, oh, ow], &out)
}

#[test]
fn matmul_identity_and_projector() {
    let tape = Tape::new();
    let eye = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    assert_eq!(eye.matmul(&m).unwrap().value().data(), &[1., 2., 3., 4.]);

    let p = tape.constant(t(&[2, 2], &[1., 0., 0., 0.]));
    let q = tape.constant(t(&[2, 2], &[5., 6., 7., 8.]));
    assert_eq!(p.matmul(&q).unwrap().value().data(), &[5., 6., 0., 0.]);
}

#[test]
fn matmul_matches_triple_loop() {
    let a = randn(&[3, 4], 1);
    let b = randn(&[4, 2], 2);
    let tape = Tape::new();
    let c = tape.constant(a.clone()).matmul(&tape.constant(b.clone())).unwrap();
    assert!(c.value().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([2, 3]));
    let msg = a.matmul(&b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn softmax_uniform_and_stable() {
    let tape = Tape::new();
    let s = tape.constant(Tensor::zeros([3])).softmax(0).unwrap();
    for v in s.value().data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let s = tape.constant(t(&[2], &[1000.0, 0.0])).softmax(0).unwrap();
    assert!((s.value().data()[0] - 1.0).abs() < 1e-12);
    assert!(s.value().data()[1].abs() < 1e-12);
}

#[test]
fn softmax_matches_direct_formula() {
    let x = randn(&[7], 3);
    let tape = Tape::new();
    let s = tape.constant(x.clone()).softmax(0).unwrap();
    let z: f64 = x.data().iter().map(|v| v.exp()).sum();
    for (y, v) in s.value().data().iter().zip(x.data()) {
        assert!((y - v.exp() / z).abs() < 1e-12);
    }
}

#[test]
fn softmax_over_middle_axis() {
    let x = randn(&[2, 3, 4], 4);
    let tape = Tape::new();
    let s = tape.constant(x).softmax(1).unwrap();
    for a in 0..2 {
        for c in 0..4 {
            let total: f64 = (0..3).map(|b| s.value().at(&[a, b, c])).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_identity_and_overlap_counts() {
    let tape = Tape::new();
    let x = randn(&[1, 3, 3], 5);
    let w = tape.constant(Tensor::ones([1, 1, 1, 1]));
    let y = tape.constant(x.clone()).conv2d(&w, None, (1, 1), (0, 0)).unwrap();
    assert_eq!(y.value(), &x);

    let ones = tape.constant(Tensor::ones([1, 4, 4]));
    let k = tape.constant(Tensor::ones([1, 1, 3, 3]));
    let y = ones.conv2d(&k, None, (1, 1), (1, 1)).unwrap();
    assert_eq!(y.value().at(&[0, 0, 0]), 4.0);
    assert_eq!(y.value().at(&[0, 1, 1]), 9.0);
    assert_eq!(y.value().at(&[0, 0, 1]), 6.0);
}

#[test]
fn conv_matches_nested_loops() {
    for (seed, stride, pad) in [(6, (1, 1), (1, 1)), (7, (2, 2), (1, 1)), (8, (2, 1), (0, 2))] {
        let x = randn(&[3, 7, 6], seed);
        let w = randn(&[4, 3, 3, 3], seed + 100);
        let b = randn(&[4], seed + 200);
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .conv2d(&tape.constant(w.clone()), Some(&tape.constant(b.clone())), stride, pad)
            .unwrap();
        let oracle = naive_conv(&x, &w, b.data(), stride, pad);
        assert_eq!(y.shape(), oracle.shape());
        assert!(y.value().max_abs_diff(&oracle) < 1e-10);
    }
}

#[test]
fn conv_rejects_kernel_that_does_not_fit() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros([1, 2, 2]));
    let w = tape.constant(Tensor::zeros([1, 1, 5, 5]));
    assert!(x.conv2d(&w, None, (1, 1), (0, 0)).is_err());
}

#[test]
fn elementwise_basics() {
    let tape = Tape::new();
    let r = tape.constant(t(&[3], &[-1., 0., 2.])).relu().unwrap();
    assert_eq!(r.value().data(), &[0., 0., 2.]);

    let m = tape.constant(t(&[2, 2], &[1., 1., 2., 2.]));
    let row = tape.constant(t(&[2], &[10., 20.]));
    assert_eq!(m.add_rows(&row).unwrap().value().data(), &[11., 21., 12., 22.]);

    let bad = tape.constant(t(&[3], &[1., 2., 3.]));
    assert!(m.add_rows(&bad).is_err());
    assert!(m.add(&tape.constant(Tensor::zeros([3, 2]))).is_err());
}

#[test]
fn linear_identity_and_constant() {
    let tape = Tape::new();
    let x = randn(&[4, 3], 9);
    let eye = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    let zero_b = tape.constant(Tensor::zeros([3]));
    let y = tape.constant(x.clone()).linear(&eye, Some(&zero_b)).unwrap();
    assert!(y.value().max_abs_diff(&x) < 1e-15);

    let zero_w = tape.constant(Tensor::zeros([2, 3]));
    let c = tape.constant(t(&[2], &[1.5, -2.0]));
    let y = tape.constant(x).linear(&zero_w, Some(&c)).unwrap();
    for r in 0..4 {
        assert_eq!(y.value().at(&[r, 0]), 1.5);
        assert_eq!(y.value().at(&[r, 1]), -2.0);
    }
}

#[test]
fn structural_ops() {
    let tape = Tape::new();
    let x = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
    let r = x.reshape([3, 2]).unwrap();
    assert_eq!(r.value().data(), &[1., 2., 3., 4., 5., 6.]);
    assert!(x.reshape([4, 2]).is_err());

    let tr = x.transpose().unwrap();
    assert_eq!(tr.shape(), &[3, 2]);
    assert_eq!(tr.value().data(), &[1., 4., 2., 5., 3., 6.]);

    let c = tape.constant(Tensor::full([2, 4, 6], 3.25));
    let p = c.avg_pool2d(2).unwrap();
    assert_eq!(p.shape(), &[2, 2, 3]);
    assert!(p.value().data().iter().all(|&v| v == 3.25));
}

/// Hand-expanded half-pixel bilinear interpolation of a 2×2 grid to 4×4.
/// Output coordinate o maps to source o/2 − 0.25, clamped to [0, 1].
#[test]
fn bilinear_upsample_matches_interpolation_formula() {
    let (a, b, c, d) = (1.0, 2.0, 3.0, 5.0);
    let tape = Tape::new();
    let y = tape.constant(t(&[2, 2], &[a, b, c, d])).upsample_bilinear(2).unwrap();
    let src = [0.0, 0.25, 0.75, 1.0];
    let mut expected = vec![];
    for sy in src {
        for sx in src {
            let top = a * (1.0 - sx) + b * sx;
            let bottom = c * (1.0 - sx) + d * sx;
            expected.push(top * (1.0 - sy) + bottom * sy);
        }
    }
    assert!(y.value().max_abs_diff(&t(&[4, 4], &expected)) < 1e-14);
}

#[test]
fn upsample_factor_must_be_positive() {
    let tape = Tape::new();
    assert!(tape.constant(Tensor::zeros([2, 2])).upsample_bilinear(0).is_err());
}

#[test]
fn batchnorm_eval_is_affine_and_train_normalizes() {
    let tape = Tape::new();
    let x = randn(&[2, 3, 4, 5], 10);
    let gamma = tape.constant(Tensor::ones([3]));
    let beta = tape.constant(Tensor::zeros([3]));
    let (y, stats) = tape.constant(x.clone()).batchnorm(&gamma, &beta, 1e-5, None).unwrap();
    for c in 0..3 {
        let mut vals = vec![];
        for n in 0..2 {
            for i in 0..4 {
                for j in 0..5 {
                    vals.push(y.value().at(&[n, c, i, j]));
                }
            }
        }
        let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!(stats.var[c] > 0.0);
    }
    let mean = vec![0.5; 3];
    let var = vec![4.0 - 1e-5; 3];
    let (y, _) = tape
        .constant(x.clone())
        .batchnorm(&gamma, &beta, 1e-5, Some((&mean, &var)))
        .unwrap();
    for (yv, xv) in y.value().data().iter().zip(x.data()) {
        assert!((yv - (xv - 0.5) / 2.0).abs() < 1e-12);
    }
}

#[test]
fn dropout_is_identity_in_eval_and_inverted_in_train() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::ones([10_000]));
    let mut rng = rng_for(1, "dropout");
    let y = x.dropout(0.3, false, &mut rng).unwrap();
    assert_eq!(y.value(), x.value());
    let y = x.dropout(0.3, true, &mut rng).unwrap();
    let zeros = y.value().data().iter().filter(|&&v| v == 0.0).count();
    assert!((2700..3300).contains(&zeros), "{zeros}");
    let kept = y.value().data().iter().find(|&&v| v != 0.0).unwrap();
    assert!((kept - 1.0 / 0.7).abs() < 1e-12);
}

#[test]
fn backward_simple_losses() {
    let x = randn(&[5], 11);
    let tape = Tape::new();
    let v = tape.param(x.clone());
    let g = tape.backward(&v.sum().unwrap()).unwrap();
    assert!(g.wrt(&v).unwrap().data().iter().all(|&d| d == 1.0));

    let tape = Tape::new();
    let v = tape.param(x.clone());
    let g = tape.backward(&v.mul(&v).unwrap().sum().unwrap()).unwrap();
    for (gv, xv) in g.wrt(&v).unwrap().data().iter().zip(x.data()) {
        assert!((gv - 2.0 * xv).abs() < 1e-15);
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::new();
    let v = tape.param(Tensor::zeros([3]));
    assert!(tape.backward(&v).is_err());
}

#[test]
fn untracked_paths_record_nothing() {
    let tape = Tape::new();
    let c = tape.constant(Tensor::ones([2, 2]));
    let _ = c.relu().unwrap().sum().unwrap();
    assert!(tape.is_empty());
    let nograd = Tape::no_grad();
    let p = nograd.param(Tensor::ones([2]));
    assert!(!p.requires_grad());
}

// ---- finite-difference checks per differentiable op ----

fn assert_fd<F>(inputs: &[Tensor], f: F)
where
    F: for<'t> Fn(&[Var<'t>]) -> avcc_core::Result<Var<'t>>,
{
    let summary = gradcheck::check(inputs, f).unwrap();
    assert!(summary.max_rel_err < 1e-4, "max rel err {}", summary.max_rel_err);
}

#[test]
fn fd_mul_and_linear() {
    let a = randn(&[3, 4], 20);
    let b = randn(&[3, 4], 21);
    let summary = gradcheck::check(&[a, b], |v| v[0].mul(&v[1])?.sum()).unwrap();
    assert!(summary.max_rel_err < 1e-6);

    let x = randn(&[5, 3], 22);
    let w = randn(&[2, 3], 23);
    let b = randn(&[2], 24);
    let summary = gradcheck::check(&[x, w, b], |v| v[0].linear(&v[1], Some(&v[2]))?.sum()).unwrap();
    assert!(summary.max_rel_err < 1e-6);
}

#[test]
fn fd_conv_bn_pool_resize() {
    let x = randn(&[2, 2, 5, 6], 30);
    let w = randn(&[3, 2, 3, 3], 31);
    let b = randn(&[3], 32);
    let g = randn(&[3], 33);
    let be = randn(&[3], 34);
    let probe = randn(&[2, 3, 4, 4], 35);
    assert_fd(&[x, w, b, g, be, probe], |v| {
        let y = v[0].conv2d(&v[1], Some(&v[2]), (2, 1), (1, 1))?;
        let (y, _) = y.batchnorm(&v[3], &v[4], 1e-5, None)?;
        let y = y.adaptive_avg_pool2d(3, 4)?.resize_bilinear(4, 4)?;
        y.mul(&v[5])?.sum()
    });
}

#[test]
fn fd_attention_chain() {
    let c = randn(&[3, 6], 40);
    let row = randn(&[6], 41);
    let dst = randn(&[3, 6], 42);
    let probe = randn(&[3, 6], 43);
    assert_fd(&[c, row, dst, probe], |v| {
        let cp = v[0].add_rows(&v[1])?;
        let aw = cp.matmul(&cp.transpose()?)?.softmax(1)?;
        aw.matmul(&v[2])?.mul(&v[3])?.sum()
    });
}

#[test]
fn fd_misc_ops() {
    let x = randn(&[4, 3], 50).map(|v| v.abs() + 0.1);
    let col = randn(&[4, 1], 51);
    let probe = randn(&[4, 3], 52);
    assert_fd(&[x, col, probe], |v| {
        let a = v[0].ln_clamped(1e-12)?.mul_col(&v[1])?;
        let stacked = Var::stack(&[a.clone(), a.scale(2.0)?])?;
        let back = stacked.select(1)?.sub(&stacked.select(0)?)?;
        back.mul(&v[2])?.sum()
    });
    let a = randn(&[1, 2, 3, 3], 53);
    let b = randn(&[1, 3, 3, 3], 54);
    let probe = randn(&[1, 5, 3, 3], 55);
    assert_fd(&[a, b, probe], |v| {
        let c = Var::concat_channels(&[v[0].relu()?, v[1].clone()])?;
        c.mul(&v[2])?.sum()
    });
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..8, seed in any::<u64>(), big in any::<bool>()) {
        let scale = if big { 1e3 } else { 1.0 };
        let x = randn(&[rows, cols], seed).map(|v| v * scale);
        let tape = Tape::new();
        let s = tape.constant(x).softmax(1).unwrap();
        for r in 0..rows {
            let total: f64 = (0..cols).map(|c| s.value().at(&[r, c])).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!((0..cols).all(|c| s.value().at(&[r, c]) >= 0.0));
        }
    }

    #[test]
    fn reshape_round_trip(a in 1usize..5, b in 1usize..5, c in 1usize..5, seed in any::<u64>()) {
        let x = randn(&[a, b, c], seed);
        let tape = Tape::new();
        let y = tape.constant(x.clone()).reshape([a * b, c]).unwrap().reshape([a, b, c]).unwrap();
        prop_assert_eq!(y.value(), &x);
    }

    #[test]
    fn matmul_and_conv_match_loop_oracles(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in any::<u64>()) {
        let a = randn(&[m, k], seed);
        let b = randn(&[k, n], seed ^ 1);
        let tape = Tape::new();
        let c = tape.constant(a.clone()).matmul(&tape.constant(b.clone())).unwrap();
        prop_assert!(c.value().max_abs_diff(&naive_matmul(&a, &b)) < 1e-10);

        let x = randn(&[k, m + 2, n + 2], seed ^ 2);
        let w = randn(&[m, k, 3, 3], seed ^ 3);
        let bias = vec![0.25; m];
        let y = tape.constant(x.clone())
            .conv2d(&tape.constant(w.clone()), Some(&tape.constant(Tensor::new([m], bias.clone()).unwrap())), (1, 1), (1, 1))
            .unwrap();
        prop_assert!(y.value().max_abs_diff(&naive_conv(&x, &w, &bias, (1, 1), (1, 1))) < 1e-10);
    }

    /// Central differences on randomized shapes for the differentiable ops
    /// that carry nontrivial backward rules.
    #[test]
    fn random_shape_gradients(rows in 1usize..4, cols in 2usize..5, seed in any::<u64>()) {
        let x = randn(&[rows, cols], seed);
        let y = randn(&[cols, rows], seed ^ 7);
        let w = randn(&[3, cols], seed ^ 8);
        let probe = randn(&[rows, rows], seed ^ 9);
        let summary = gradcheck::check(&[x, y, w, probe], |v| {
            let attn = v[0].matmul(&v[1])?.softmax(1)?;
            let lin = v[0].linear(&v[2], None)?.sum()?;
            attn.mul(&v[3])?.sum()?.add(&lin)
        }).unwrap();
        prop_assert!(summary.max_rel_err < 1e-4, "{}", summary.max_rel_err);

        let img = randn(&[1, 2, rows + 3, cols + 3], seed ^ 10);
        let k = randn(&[2, 2, 3, 3], seed ^ 11);
        let summary = gradcheck::check(&[img, k], |v| {
            let c = v[0].conv2d(&v[1], None, (1, 1), (1, 1))?;
            c.mul(&c)?.sum()
        }).unwrap();
        prop_assert!(summary.max_rel_err < 1e-4, "{}", summary.max_rel_err);
    }
}

#[test]
fn relative_error_definition() {
    assert!(relative_error(1.0, 1.0 + 1e-9) < 1e-8);
}
