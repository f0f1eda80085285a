use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vase_autograd::testing::{central_difference_input, rel_err};
use vase_autograd::{Array, Graph, Var};

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
    let n = shape.iter().product();
    Array::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Check d(sum(w ⊙ f(inputs)))/d(input_k) against central differences for
/// every element of every input.
fn check(inputs: &[Array<f64>], f: impl for<'g> Fn(&[Var<'g, f64>]) -> Var<'g, f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe_shape = {
        let g = Graph::new();
        let vs: Vec<_> = inputs.iter().map(|a| g.constant(a.clone())).collect();
        f(&vs).shape()
    };
    let weights = rand_array(&mut rng, &probe_shape);
    let eval = |xs: &[Array<f64>]| -> f64 {
        let g = Graph::new();
        let vs: Vec<_> = xs.iter().map(|a| g.constant(a.clone())).collect();
        let y = f(&vs);
        (y * g.constant(weights.clone())).sum_all().item()
    };
    let g = Graph::new();
    let vs: Vec<_> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
    let loss = (f(&vs) * g.constant(weights.clone())).sum_all();
    let grads = g.backward(loss);
    for (k, v) in vs.iter().enumerate() {
        let analytic = grads.get(*v).expect("grad");
        for i in 0..inputs[k].len() {
            let num = central_difference_input(&inputs[k], i, 1e-5, |x| {
                let mut xs = inputs.to_vec();
                xs[k] = x.clone();
                eval(&xs)
            });
            let e = rel_err(analytic.data()[i], num, 1e-6);
            assert!(e < 1e-5, "input {k} elem {i}: analytic {} numeric {num}", analytic.data()[i]);
        }
    }
}

#[test]
fn broadcast_arithmetic_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_array(&mut rng, &[2, 3, 4]);
    let b = rand_array(&mut rng, &[3, 1]);
    check(&[a.clone(), b.clone()], |v| v[0].add(v[1]));
    check(&[a.clone(), b.clone()], |v| v[0].sub(v[1]));
    check(&[a.clone(), b.clone()], |v| v[0].mul(v[1]));
    let bpos = b.map(|x| x.abs() + 0.5);
    check(&[a, bpos], |v| v[0].div(v[1]));
}

#[test]
fn unary_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_array(&mut rng, &[3, 5]);
    check(&[a.clone()], |v| v[0].silu());
    check(&[a.clone()], |v| v[0].sigmoid());
    check(&[a.clone()], |v| v[0].tanh());
    check(&[a.clone()], |v| v[0].exp());
    check(&[a.clone()], |v| v[0].sqr().scale(0.3).add_scalar(1.0));
    check(&[a], |v| v[0].mean_axes_keep(&[1]));
}

#[test]
fn matmul_gradients_all_transposes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for ta in [false, true] {
        for tb in [false, true] {
            let a = rand_array(&mut rng, if ta { &[2, 4, 3] } else { &[2, 3, 4] });
            let b = rand_array(&mut rng, if tb { &[2, 5, 4] } else { &[2, 4, 5] });
            check(&[a, b], move |v| v[0].matmul_t(v[1], ta, tb));
        }
    }
    let x = rand_array(&mut rng, &[2, 3, 4]);
    let w = rand_array(&mut rng, &[6, 4]);
    let b = rand_array(&mut rng, &[6]);
    check(&[x, w, b], |v| v[0].linear(v[1], Some(v[2])));
}

#[test]
fn conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
        let x = rand_array(&mut rng, &[2, 3, 6, 5]);
        let w = rand_array(&mut rng, &[4, 3, k, k]);
        let b = rand_array(&mut rng, &[4]);
        check(&[x, w, b], move |v| v[0].conv2d(v[1], Some(v[2]), stride, pad));
    }
}

#[test]
fn conv_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, c, h, w, o, k, s, p) = (2, 3, 7, 6, 4, 3, 2, 1);
    let x = rand_array(&mut rng, &[n, c, h, w]);
    let wt = rand_array(&mut rng, &[o, c, k, k]);
    let g = Graph::new();
    let y = g.constant(x.clone()).conv2d(g.constant(wt.clone()), None, s, p).value();
    let (oh, ow) = ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1);
    assert_eq!(y.shape(), &[n, o, oh, ow]);
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * s + ki) as isize - p as isize;
                                let ix = (ox * s + kj) as isize - p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.data()[((b * c + ic) * h + iy as usize) * w + ix as usize]
                                        * wt.data()[((oc * c + ic) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                    let got = y.data()[((b * o + oc) * oh + oy) * ow + ox];
                    assert!((got - acc).abs() < 1e-12, "({b},{oc},{oy},{ox}) {got} vs {acc}");
                }
            }
        }
    }
}

#[test]
fn norm_softmax_and_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_array(&mut rng, &[2, 4, 3, 2]);
    let gamma = rand_array(&mut rng, &[4]);
    let beta = rand_array(&mut rng, &[4]);
    check(&[x, gamma, beta], |v| v[0].group_norm(2, v[1], v[2], 1e-5));
    let x = rand_array(&mut rng, &[3, 5]);
    let gamma = rand_array(&mut rng, &[5]);
    let beta = rand_array(&mut rng, &[5]);
    check(&[x.clone(), gamma, beta], |v| v[0].layer_norm(v[1], v[2], 1e-5));
    check(&[x.clone()], |v| v[0].softmax_last());
    let targets = x.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    check(&[x.clone()], move |v| v[0].bce_with_logits_mean(&targets));
    let y = rand_array(&mut rng, &[3, 5]);
    check(&[x, y], |v| v[0].mse(v[1]));
}

#[test]
fn shape_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_array(&mut rng, &[2, 3, 4]);
    let y = rand_array(&mut rng, &[2, 2, 4]);
    check(&[x.clone()], |v| v[0].permute(&[2, 0, 1]));
    check(&[x.clone()], |v| v[0].narrow(1, 1, 2));
    check(&[x.clone(), y], |v| Var::concat(&[v[0], v[1]], 1));
    check(&[x.clone()], |v| v[0].pad_axis(1, 1, 2));
    check(&[x.clone()], |v| v[0].index_select(&[1, 0, 1]));
    check(&[x.clone()], |v| v[0].reshape(&[6, 4]).upsample_nearest(2));
    check(&[x], |v| v[0].broadcast_to(&[3, 2, 3, 4]));
}

#[test]
fn attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let q = rand_array(&mut rng, &[2, 3, 4]);
    let k = rand_array(&mut rng, &[2, 5, 4]);
    let v = rand_array(&mut rng, &[2, 5, 4]);
    let bias = rand_array(&mut rng, &[3, 5]);
    check(&[q, k, v, bias], |x| vase_autograd::nn::attention(x[0], x[1], x[2], Some(x[3])));
}

#[test]
fn reused_var_accumulates_gradient() {
    let g = Graph::new();
    let x = g.leaf(Array::from_vec(&[2], vec![1.5f64, -2.0]));
    let loss = (x * x + x).sum_all();
    let grads = g.backward(loss);
    assert_eq!(grads.get(x).unwrap().data(), &[4.0, -3.0]);
}
