use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::audit;
use super::*;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::normal(shape, 1.0, rng)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

const FD_H: f64 = 1e-4;
const FD_TOL: f64 = 1e-4;

fn assert_grad<F>(inputs: &[Tensor], build: F)
where
    F: FnMut(&mut Graph, &[Var]) -> crate::Result<Var>,
{
    let a = audit(inputs, FD_H, build).unwrap();
    assert!(a.max_rel_error < FD_TOL, "gradient check failed: {a:?}");
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn probe(g: &mut Graph, y: Var, seed: u64) -> crate::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::normal(g.shape(y), 1.0, &mut rng);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut g = Graph::new();
    let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
    let c = g.matmul(i, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).shape(), &[1, 1]);
    assert_eq!(g.value(c).item(), 11.0);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&[3, 4], &mut rng);
    let b = rand_tensor(&[4, 2], &mut rng);
    let mut oracle = [0.0; 6];
    for i in 0..3 {
        for j in 0..2 {
            for k in 0..4 {
                oracle[i * 2 + j] += a.data()[i * 4 + k] * b.data()[k * 2 + j];
            }
        }
    }
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a), g.constant(b));
    let c = g.matmul(va, vb).unwrap();
    for (x, y) in g.value(c).data().iter().zip(oracle) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let one = g.constant(Tensor::full(&[3], 1.0));
    let zero = g.constant(Tensor::zeros(&[3]));
    let x = g.constant(Tensor::full(&[3], 1.0));
    let y = g.layer_norm(x, one, zero, LAYER_NORM_EPS).unwrap();
    assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-12));

    let one = g.constant(Tensor::full(&[2], 1.0));
    let zero = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(t(&[2], &[1.0, 3.0]));
    let y = g.layer_norm(x, one, zero, LAYER_NORM_EPS).unwrap();
    let d = g.value(y).data();
    assert!((d[0] + 1.0).abs() < 1e-5 && (d[1] - 1.0).abs() < 1e-5);
}

#[test]
fn layer_norm_slices_are_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let x = g.constant(Tensor::normal(&[2, 8], 3.0, &mut rng));
    let one = g.constant(Tensor::full(&[8], 1.0));
    let zero = g.constant(Tensor::zeros(&[8]));
    let y = g.layer_norm(x, one, zero, LAYER_NORM_EPS).unwrap();
    for row in g.value(y).data().chunks(8) {
        let mu = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 8.0;
        assert!(mu.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-5);
    }
}

#[test]
fn layer_norm_rejects_width_mismatch() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 4]));
    let one = g.constant(Tensor::full(&[3], 1.0));
    let zero = g.constant(Tensor::zeros(&[3]));
    assert!(matches!(g.layer_norm(x, one, zero, 1e-5), Err(crate::Error::Dimension { .. })));
}

/// Standard normal CDF by composite Simpson quadrature of the density.
fn normal_cdf(x: f64) -> f64 {
    let n = 20_000;
    let h = x / n as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(0.0) + pdf(x);
    for i in 1..n {
        s += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    0.5 + s * h / 3.0
}

#[test]
fn gelu_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[5], &[0.0, 1.0, 12.0, -12.0, -1.0]));
    let y = g.gelu(x);
    let d = g.value(y).data().to_vec();
    assert_eq!(d[0], 0.0);
    assert!((d[1] - 1.0 * normal_cdf(1.0)).abs() < 1e-3);
    assert!((d[2] - 12.0).abs() < 1e-9);
    assert!(d[3].abs() < 1e-9);
    assert!((d[4] - -normal_cdf(-1.0)).abs() < 1e-3);
}

#[test]
fn softmax_sigmoid_dropout_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2]));
    let s = g.softmax_last(x);
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    let z = g.constant(Tensor::zeros(&[1]));
    let sg = g.sigmoid(z);
    assert_eq!(g.value(sg).item(), 0.5);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = g.constant(Tensor::normal(&[4, 4], 1.0, &mut rng));
    let d = g.dropout(x, 0.2, false, &mut rng).unwrap();
    assert_eq!(g.value(d), g.value(x));
    assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::new();
    let x = g.constant(Tensor::normal(&[7, 9], 4.0, &mut rng));
    let s = g.softmax_last(x);
    for row in g.value(s).data().chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn dropout_train_mode_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[20_000], 1.0));
    let y = g.dropout(x, 0.2, true, &mut rng).unwrap();
    let d = g.value(y).data();
    let zeros = d.iter().filter(|&&v| v == 0.0).count() as f64 / d.len() as f64;
    assert!((zeros - 0.2).abs() < 0.01);
    assert!(d.iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-12));
}

#[test]
fn backward_sum_and_square() {
    let mut g = Graph::new();
    let x = g.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, -1.5]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let xs = [1.0, -2.0, 3.0, 0.5];
    let x = g.param(t(&[4], &xs));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    for (gv, xv) in g.grad(x).unwrap().iter().zip(xs) {
        assert_eq!(*gv, 2.0 * xv);
    }
}

#[test]
fn backward_requires_scalar_and_leaves_unreachable_untouched() {
    let mut g = Graph::new();
    let x = g.param(Tensor::full(&[3], 1.0));
    let other = g.param(Tensor::full(&[3], 1.0));
    assert!(matches!(g.backward(x), Err(crate::Error::Contract(_))));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(g.grad(other).is_none());
}

#[test]
fn forward_is_deterministic_for_a_seed() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut g = Graph::new();
        let x = g.param(Tensor::normal(&[4, 6], 1.0, &mut rng));
        let w = g.param(Tensor::xavier_uniform(&[6, 6], 6, 6, &mut rng));
        let y = g.linear(x, w, None).unwrap();
        let y = g.gelu(y);
        let y = g.dropout(y, 0.2, true, &mut rng).unwrap();
        g.value(y).data().to_vec()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn grad_matmul_transpose_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let ins = vec![rand_tensor(&[3, 4], &mut rng), rand_tensor(&[4, 5], &mut rng), rand_tensor(&[5], &mut rng)];
    assert_grad(&ins, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        let y = g.transpose(y)?;
        probe(g, y, 1)
    });
    let x = rand_tensor(&[2, 3, 4], &mut rng);
    assert_grad(&[x, ins[1].clone(), ins[2].clone()], |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]))?;
        probe(g, y, 2)
    });
}

#[test]
fn grad_elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let ins = vec![rand_tensor(&[3, 4], &mut rng), rand_tensor(&[3, 4], &mut rng), Tensor::scalar(0.7)];
    assert_grad(&ins, |g, v| {
        let a = g.add(v[0], v[1])?;
        let b = g.sub(a, v[1])?;
        let c = g.mul(b, v[1])?;
        let c = g.scale(c, 1.5);
        let e = g.exp(v[2]);
        let d = g.scale_by(c, e)?;
        let d = g.gelu(d);
        let s = g.sigmoid(d);
        let r = g.reshape(s, &[4, 3])?;
        let m = g.mean(r);
        let p = probe(g, r, 3)?;
        g.add(m, p)
    });
}

#[test]
fn grad_layer_norm_softmax_normalize() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let ins = vec![rand_tensor(&[3, 6], &mut rng), rand_tensor(&[6], &mut rng), rand_tensor(&[6], &mut rng)];
    assert_grad(&ins, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)?;
        let s = g.softmax_last(y);
        let n = g.l2_normalize(s);
        probe(g, n, 4)
    });
}

#[test]
fn grad_attention_with_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let ins: Vec<Tensor> = (0..3).map(|_| rand_tensor(&[2, 4, 6], &mut rng)).collect();
    let mask = [true, true, false, true, true, false, false, true];
    assert_grad(&ins, |g, v| {
        let y = g.attention(v[0], v[1], v[2], &mask, 3)?;
        probe(g, y, 5)
    });
}

#[test]
fn attention_ignores_masked_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let q = rand_tensor(&[1, 3, 4], &mut rng);
    let k = rand_tensor(&[1, 3, 4], &mut rng);
    let mut v = rand_tensor(&[1, 3, 4], &mut rng);
    let mask = [true, true, false];
    let run = |v: &Tensor| {
        let mut g = Graph::new();
        let (a, b, c) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let y = g.attention(a, b, c, &mask, 2).unwrap();
        g.value(y).data()[..8].to_vec()
    };
    let before = run(&v);
    v.data_mut()[8..].iter_mut().for_each(|x| *x += 100.0);
    assert_eq!(before, run(&v));
}

#[test]
fn grad_token_plumbing() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let ins = vec![rand_tensor(&[2, 3, 4], &mut rng), rand_tensor(&[4], &mut rng)];
    assert_grad(&ins, |g, v| {
        let y = g.append_token(v[0], v[1])?;
        let a = g.slice_tokens(y, 3, 1)?;
        let b = g.slice_tokens(y, 0, 3)?;
        let pa = probe(g, a, 6)?;
        let pb = probe(g, b, 7)?;
        g.add(pa, pb)
    });
}

#[test]
fn grad_conv_pool_embedding() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let ins = vec![rand_tensor(&[2, 2, 4, 6], &mut rng), rand_tensor(&[3, 2, 3, 3], &mut rng), rand_tensor(&[3], &mut rng)];
    assert_grad(&ins, |g, v| {
        let y = g.conv2d(v[0], v[1], v[2])?;
        let y = g.avg_pool2(y)?;
        probe(g, y, 8)
    });
    let table = rand_tensor(&[6, 3], &mut rng);
    let toks = vec![vec![0, 2, 2], vec![5], vec![1, 3]];
    assert_grad(&[table], |g, v| {
        let y = g.embedding_mean(v[0], &toks)?;
        probe(g, y, 9)
    });
}

#[test]
fn grad_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let target: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
    let labels: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
    let mask = [true, true, false, true, true, true];
    let ins = vec![rand_tensor(&[6], &mut rng)];
    assert_grad(&ins, |g, v| {
        let p = g.sigmoid(v[0]);
        let a = g.mse(p, &target)?;
        let b = g.masked_bce(p, &labels, &mask)?;
        let b = g.scale(b, 0.5);
        g.add(a, b)
    });
    let logits = rand_tensor(&[5, 5], &mut rng);
    assert_grad(&[logits], |g, v| g.diag_cross_entropy(v[0]));
}

#[test]
fn conv_matches_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let (c, h, w, o) = (2, 5, 4, 3);
    let x = rand_tensor(&[1, c, h, w], &mut rng);
    let k = rand_tensor(&[o, c, 3, 3], &mut rng);
    let b = rand_tensor(&[o], &mut rng);
    let mut g = Graph::new();
    let (vx, vk, vb) = (g.constant(x.clone()), g.constant(k.clone()), g.constant(b.clone()));
    let y = g.conv2d(vx, vk, vb).unwrap();
    let got = g.value(y).data();
    for oc in 0..o {
        for yy in 0..h as isize {
            for xx in 0..w as isize {
                let mut s = b.data()[oc];
                for ic in 0..c {
                    for ky in -1..=1isize {
                        for kx in -1..=1isize {
                            let (sy, sx) = (yy + ky, xx + kx);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let wv = k.data()[((oc * c + ic) * 3 + (ky + 1) as usize) * 3 + (kx + 1) as usize];
                            s += wv * x.data()[(ic * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                let idx = (oc * h + yy as usize) * w + xx as usize;
                assert!((got[idx] - s).abs() < 1e-12);
            }
        }
    }
}
