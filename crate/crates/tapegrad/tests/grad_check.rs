//! Finite-difference verification for every differentiable op.
//!
//! Each op is wrapped into a scalar head `sum(op(..) * probe)` with a fixed
//! random probe so every output element contributes a distinct weight, then
//! the tape gradient is compared against central differences in f64.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tapegrad::check::{central_diff, max_rel_err};
use tapegrad::{Graph, TensorId};

const H: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

/// Check d(scalar head)/d(each input) against finite differences.
fn check_grads(
    inputs: &[ArrayD<f64>],
    build: impl Fn(&mut Graph<f64>, &[TensorId]) -> TensorId,
) {
    // probe fixed per call so f is deterministic
    let mut g = Graph::<f64>::new();
    let ids: Vec<TensorId> = inputs.iter().map(|x| g.param("x", x.clone())).collect();
    let out = build(&mut g, &ids);
    let probe = rand_arr(&mut rng(999), g.shape(out), 0.5, 1.5);
    let scalar_head = |g: &mut Graph<f64>, out: TensorId, probe: &ArrayD<f64>| {
        let p = g.constant(probe.clone());
        let prod = g.mul(out, p);
        g.sum_all(prod)
    };
    let head = scalar_head(&mut g, out, &probe);
    let grads = g.backward(head);

    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(&g, ids[k]);
        let numeric = central_diff(
            |xp| {
                let mut g2 = Graph::<f64>::new();
                let ids2: Vec<TensorId> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, v)| g2.constant(if i == k { xp.clone() } else { v.clone() }))
                    .collect();
                let out2 = build(&mut g2, &ids2);
                let p

= g2.constant(probe.clone());
                let prod = g2.mul(out2, p);
                let h = g2.sum_all(prod);
                g2.scalar(h)
            },
            x,
            H,
        );
        let err = max_rel_err(&analytic, &numeric, 1e-4);
        assert!(
            err < TOL,
            "input {k}: max rel err {err:.3e} exceeds {TOL:.0e}"
        );
    }
}

#[test]
fn elementwise_binary_with_broadcast() {
    let mut r = rng(1);
    let a = rand_arr(&mut r, &[3, 4], -2.0, 2.0);
    let b = rand_arr(&mut r, &[4], 0.5, 2.0); // positive so div is safe
    check_grads(&[a.clone(), b.clone()], |g, ids| g.add(ids[0], ids[1]));
    check_grads(&[a.clone(), b.clone()], |g, ids| g.sub(ids[0], ids[1]));
    check_grads(&[a.clone(), b.clone()], |g, ids| g.mul(ids[0], ids[1]));
    check_grads(&[a, b], |g, ids| g.div(ids[0], ids[1]));
}

#[test]
fn broadcast_middle_axis() {
    let mut r = rng(2);
    let a = rand_arr(&mut r, &[2, 3, 4], -1.0, 1.0);
    let b = rand_arr(&mut r, &[2, 1, 4], -1.0, 1.0);
    check_grads(&[a, b], |g, ids| g.mul(ids[0], ids[1]));
}

#[test]
fn min_max_ops() {
    let mut r = rng(3);
    let a = rand_arr(&mut r, &[5, 3], -1.0, 1.0);
    let b = rand_arr(&mut r, &[5, 3], -1.0, 1.0);
    check_grads(&[a.clone(), b.clone()], |g, ids| g.minimum(ids[0], ids[1]));
    check_grads(&[a, b], |g, ids| g.maximum(ids[0], ids[1]));
}

#[test]
fn unary_ops() {
    let mut r = rng(4);
    let x = rand_arr(&mut r, &[4, 3], 0.3, 2.0);
    let y = rand_arr(&mut r, &[4, 3], -2.0, 2.0);
    check_grads(&[y.clone()], |g, ids| g.neg(ids[0]));
    check_grads(&[y.clone()], |g, ids| g.scale(ids[0], -1.7));
    check_grads(&[y.clone()], |g, ids| g.add_scalar(ids[0], 0.9));
    check_grads(&[y.clone()], |g, ids| g.sigmoid(ids[0]));
    check_grads(&[y.clone()], |g, ids| g.exp(ids[0]));
    check_grads(&[x.clone()], |g, ids| g.sqrt(ids[0]));
    check_grads(&[x.clone()], |g, ids| g.ln(ids[0]));
    // keep relu/abs inputs away from the kink
    let z = y.mapv(|v| if v.abs() < 0.05 { 0.2 } else { v });
    check_grads(&[z.clone()], |g, ids| g.relu(ids[0]));
    check_grads(&[z], |g, ids| g.abs(ids[0]));
}

#[test]
fn clamp_interior_and_saturated() {
    let x = ArrayD::from_shape_vec(IxDyn(&[4]), vec![-2.0, 0.2, 0.8, 3.0]).unwrap();
    let mut g = Graph::<f64>::new();
    let id = g.param("x", x);
    let y = g.clamp(id, 0.0, 1.0);
    let s = g.sum_all(y);
    let grads = g.backward(s);
    let dx = grads.get(id).unwrap();
    assert_eq!(dx.as_slice().unwrap(), &[0.0, 1.0, 1.0, 0.0]);
}

#[test]
fn grad_reverse_negates_and_scales() {
    let mut r = rng(5);
    let x = rand_arr(&mut r, &[3, 2], -1.0, 1.0);
    for lambda in [0.0, 0.5, 1.0] {
        let mut g = Graph::<f64>::new();
        let id = g.param("x", x.clone());
        let y = g.grad_reverse(id, lambda);
        // forward must be the identity, bit-exact
        assert_eq!(g.value(y), &x);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        let dx = grads.get(id).unwrap();
        for &v in dx.iter() {
            assert_eq!(v, -lambda);
        }
    }
}

#[test]
fn matmul_and_bmm() {
    let mut r = rng(6);
    let a = rand_arr(&mut r, &[3, 4], -1.0, 1.0);
    let b = rand_arr(&mut r, &[4, 2], -1.0, 1.0);
    check_grads(&[a, b], |g, ids| g.matmul(ids[0], ids[1]));
    let a3 = rand_arr(&mut r, &[2, 3, 4], -1.0, 1.0);
    let b3 = rand_arr(&mut r, &[2, 4, 5], -1.0, 1.0);
    check_grads(&[a3, b3], |g, ids| g.bmm(ids[0], ids[1]));
}

#[test]
fn shape_ops() {
    let mut r = rng(7);
    let x = rand_arr(&mut r, &[2, 3, 4], -1.0, 1.0);
    check_grads(&[x.clone()], |g, ids| g.reshape(ids[0], &[6, 4]));
    check_grads(&[x.clone()], |g, ids| g.permute(ids[0], &[2, 0, 1]));
    check_grads(&[x.clone()], |g, ids| g.narrow(ids[0], 1, 1, 2));
    check_grads(&[x.clone()], |g, ids| g.index_select(ids[0], 1, &[2, 0, 2]));
    let q = rand_arr(&mut r, &[3, 4], -1.0, 1.0);
    check_grads(&[q], |g, ids| g.tile_batch(ids[0], 3));
    let y = rand_arr(&mut r, &[2, 2, 4], -1.0, 1.0);
    check_grads(&[x, y], |g, ids| g.concat(1, &[ids[0], ids[1]]));
}

#[test]
fn reductions() {
    let mut r = rng(8);
    let x = rand_arr(&mut r, &[3, 4, 2], -1.0, 1.0);
    check_grads(&[x.clone()], |g, ids| g.sum_axis_op(ids[0], 1, false));
    check_grads(&[x.clone()], |g, ids| g.sum_axis_op(ids[0], 1, true));
    check_grads(&[x.clone()], |g, ids| g.mean_axis_op(ids[0], 2, true));
    check_grads(&[x.clone()], |g, ids| {
        let s = g.sum_all(ids[0]);
        g.reshape(s, &[1])
    });
    check_grads(&[x], |g, ids| {
        let s = g.mean_all(ids[0]);
        g.reshape(s, &[1])
    });
}

#[test]
fn softmax_forward_and_grad() {
    let mut r = rng(9);
    let x = rand_arr(&mut r, &[4, 5], -3.0, 3.0);
    let mut g = Graph::<f64>::new();
    let id = g.constant(x.clone());
    let y = g.softmax(id);
    for row in g.value(y).rows() {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p > 0.0));
    }
    check_grads(&[x], |g, ids| g.softmax(ids[0]));
}

#[test]
fn cross_entropy_matches_hand_value_and_grad() {
    // uniform logits over 6 classes -> loss = ln 6
    let x = ArrayD::zeros(IxDyn(&[2, 6]));
    let mut g = Graph::<f64>::new();
    let id = g.constant(x);
    let ce = g.softmax_cross_entropy(id, &[0, 3]);
    for &v in g.value(ce).iter() {
        assert!((v - 6.0f64.ln()).abs() < 1e-12);
    }
    let mut r = rng(10);
    let x = rand_arr(&mut r, &[5, 4], -2.0, 2.0);
    check_grads(&[x], |g, ids| g.softmax_cross_entropy(ids[0], &[1, 0, 3, 2, 2]));
}

#[test]
fn layer_norm_forward_and_grad() {
    let mut r = rng(11);
    let x = rand_arr(&mut r, &[3, 6], -2.0, 2.0);
    let gamma = rand_arr(&mut r, &[6], 0.5, 1.5);
    let beta = rand_arr(&mut r, &[6], -0.5, 0.5);
    {
        let mut g = Graph::<f64>::new();
        let xi = g.constant(x.clone());
        let gi = g.constant(ndarray::ArrayD::from_elem(IxDyn(&[6]), 1.0));
        let bi = g.constant(ndarray::ArrayD::zeros(IxDyn(&[6])));
        let y = g.layer_norm(xi, gi, bi, 1e-5);
        for row in g.value(y).rows() {
            let mean: f64 = row.iter().sum::<f64>() / 6.0;
            let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
    check_grads(&[x, gamma, beta], |g, ids| {
        g.layer_norm(ids[0], ids[1], ids[2], 1e-5)
    });
}

#[test]
fn linear_layer() {
    let mut r = rng(12);
    let x = rand_arr(&mut r, &[2, 3, 4], -1.0, 1.0);
    let w = rand_arr(&mut r, &[4, 5], -1.0, 1.0);
    let b = rand_arr(&mut r, &[5], -1.0, 1.0);
    check_grads(&[x, w, b], |g, ids| g.linear(ids[0], ids[1], ids[2]));
}

#[test]
fn conv2d_matches_naive_and_grads() {
    let mut r = rng(13);
    let x = rand_arr(&mut r, &[2, 3, 6, 6], -1.0, 1.0);
    let w = rand_arr(&mut r, &[4, 3, 3, 3], -1.0, 1.0);
    let b = rand_arr(&mut r, &[4], -0.5, 0.5);

    for (stride, pad) in [(1usize, 1usize), (2, 1)] {
        // naive direct convolution oracle
        let mut g = Graph::<f64>::new();
        let (xi, wi, bi) = (
            g.constant(x.clone()),
            g.constant(w.clone()),
            g.constant(b.clone()),
        );
        let y = g.conv2d(xi, wi, bi, stride, pad);
        let yv = g.value(y);
        let (hh, ww) = (x.shape()[2], x.shape()[3]);
        let ho = (hh + 2 * pad - 3) / stride + 1;
        let wo = (ww + 2 * pad - 3) / stride + 1;
        assert_eq!(yv.shape(), &[2, 4, ho, wo]);
        for bi_ in 0..2 {
            for oc in 0..4 {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[[oc]];
                        for ic in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= hh as isize || ix >= ww as isize {
                                        continue;
                                    }
                                    acc += x[[bi_, ic, iy as usize, ix as usize]]
                                        * w[[oc, ic, ky, kx]];
                                }
                            }
                        }
                        let got = yv[[bi_, oc, oy, ox]];
                        assert!((got - acc).abs() < 1e-12, "conv mismatch at {bi_},{oc},{oy},{ox}");
                    }
                }
            }
        }
        check_grads(&[x.clone(), w.clone(), b.clone()], |g, ids| {
            g.conv2d(ids[0], ids[1], ids[2], stride, pad)
        });
    }
}

#[test]
fn shared_leaf_accumulates_both_paths() {
    // y = x*x contributes gradient through both parents of mul
    let x = ArrayD::from_shape_vec(IxDyn(&[2]), vec![3.0, -2.0]).unwrap();
    let mut g = Graph::<f64>::new();
    let id = g.param("x", x);
    let y = g.mul(id, id);
    let s = g.sum_all(y);
    let grads = g.backward(s);
    let dx = grads.get(id).unwrap();
    assert_eq!(dx.as_slice().unwrap(), &[6.0, -4.0]);
}

#[test]
fn inference_graph_skips_tape() {
    let mut g = Graph::<f64>::inference();
    let a = g.constant(ArrayD::from_elem(IxDyn(&[2, 2]), 1.5));
    let b = g.relu(a);
    assert_eq!(g.value(b).sum(), 6.0);
    assert!(!g.is_tracking());
}
