//! Finite-difference checks for every differentiable tensor operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sepkit::tensor::gradcheck::GradCheck;
use sepkit::tensor::{self, depthwise_conv1d, layer_norm, matmul, rel_gather, rel_scatter, Tensor};
use sepkit::Result;

fn rand_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let n = shape.iter().product();
    ((0..n).map(|_| rng.gen_range(-1.5..1.5)).collect(), shape.to_vec())
}

fn positive_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let n = shape.iter().product();
    ((0..n).map(|_| rng.gen_range(0.2..2.0)).collect(), shape.to_vec())
}

/// Contracts an output with fixed random weights so every entry matters.
fn project(y: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..y.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok(y.mul(&Tensor::new(w, y.shape()))?.sum_all())
}

fn check(inputs: &[(Vec<f64>, Vec<usize>)], f: impl Fn(&[Tensor]) -> Result<Tensor>) {
    let report = GradCheck::default().run(inputs, None, f).unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn binary_ops_with_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for shapes in [[vec![3, 4], vec![3, 4]], [vec![2, 3, 4], vec![4]], [vec![5], vec![1]]] {
        let a = rand_input(&mut rng, &shapes[0]);
        let b = positive_input(&mut rng, &shapes[1]);
        check(&[a.clone(), b.clone()], |t| project(&t[0].add(&t[1])?, 1));
        check(&[a.clone(), b.clone()], |t| project(&t[0].sub(&t[1])?, 2));
        check(&[a.clone(), b.clone()], |t| project(&t[0].mul(&t[1])?, 3));
        check(&[a, b], |t| project(&t[0].div(&t[1])?, 4));
    }
}

#[test]
fn unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_input(&mut rng, &[4, 3]);
    let pos = positive_input(&mut rng, &[4, 3]);
    check(std::slice::from_ref(&x), |t| project(&t[0].sigmoid(), 5));
    check(std::slice::from_ref(&x), |t| project(&t[0].swish(), 6));
    check(std::slice::from_ref(&x), |t| project(&t[0].relu(), 7));
    check(std::slice::from_ref(&x), |t| project(&t[0].exp(), 8));
    check(std::slice::from_ref(&x), |t| project(&t[0].square(), 9));
    check(std::slice::from_ref(&x), |t| project(&t[0].scale(-2.5).add_scalar(1.0), 10));
    check(std::slice::from_ref(&x), |t| project(&t[0].clamp_min(0.1), 11));
    check(std::slice::from_ref(&pos), |t| project(&t[0].log()?, 12));
    check(std::slice::from_ref(&pos), |t| project(&t[0].log_clamped(1e-8), 13));
    check(&[pos], |t| project(&t[0].sqrt(), 14));
    check(&[x], |t| Ok(t[0].frobenius()));
}

#[test]
fn swish_at_one() {
    check(&[(vec![1.0], vec![1])], |t| Ok(t[0].swish()));
}

#[test]
fn elementwise_dispatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_input(&mut rng, &[6]);
    let y = rand_input(&mut rng, &[6]);
    use tensor::ElementwiseOp::*;
    for op in [Add, Sub, Mul, Sigmoid, Swish, Relu, Exp] {
        check(&[x.clone(), y.clone()], |t| project(&tensor::elementwise(op, &t[0], Some(&t[1]))?, 15));
    }
}

#[test]
fn matmul_plain_shared_and_batched() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_input(&mut rng, &[3, 4]);
    let b = rand_input(&mut rng, &[4, 2]);
    check(&[a, b], |t| project(&matmul(&t[0], &t[1])?, 16));
    let a = rand_input(&mut rng, &[2, 3, 4]);
    let b = rand_input(&mut rng, &[4, 5]);
    check(&[a, b], |t| project(&matmul(&t[0], &t[1])?, 17));
    let a = rand_input(&mut rng, &[2, 3, 4]);
    let b = rand_input(&mut rng, &[2, 4, 5]);
    check(&[a, b], |t| project(&matmul(&t[0], &t[1])?, 18));
}

#[test]
fn matmul_grad_of_sum_is_b_transpose_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_input(&mut rng, &[3, 2]);
    let b = rand_input(&mut rng, &[2, 4]);
    check(&[a, b], |t| Ok(matmul(&t[0], &t[1])?.sum_all()));
}

#[test]
fn reductions_and_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_input(&mut rng, &[2, 3, 4]);
    for axis in 0..3 {
        check(std::slice::from_ref(&x), |t| project(&t[0].sum_axis(axis)?, 19));
        check(std::slice::from_ref(&x), |t| project(&t[0].mean_axis(axis)?, 20));
    }
    check(std::slice::from_ref(&x), |t| Ok(t[0].mean_all()));
    check(std::slice::from_ref(&x), |t| project(&t[0].permute(&[2, 0, 1])?, 21));
    check(std::slice::from_ref(&x), |t| project(&t[0].reshape(&[6, 4])?, 22));
    check(std::slice::from_ref(&x), |t| project(&t[0].narrow(2, 1, 2)?, 23));
    check(std::slice::from_ref(&x), |t| project(&t[0].transpose_last()?, 24));
    let y = rand_input(&mut rng, &[2, 1, 4]);
    check(&[x, y], |t| project(&Tensor::concat(&[t[0].clone(), t[1].clone()], 1)?, 25));
    let table = rand_input(&mut rng, &[5, 3]);
    check(&[table], |t| project(&t[0].index_select(&[4, 0, 4, 2])?, 26));
}

#[test]
fn layer_norm_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_input(&mut rng, &[3, 5]);
    let g = rand_input(&mut rng, &[5]);
    let b = rand_input(&mut rng, &[5]);
    check(&[x, g, b], |t| project(&layer_norm(&t[0], &t[1], &t[2], 1e-5)?, 27));
}

#[test]
fn layer_norm_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (x, _) = rand_input(&mut rng, &[4, 16]);
    let ones = Tensor::new(vec![1.0; 16], &[16]);
    let zeros = Tensor::zeros(&[16]);
    let y = layer_norm(&Tensor::new(x, &[4, 16]), &ones, &zeros, 1e-12).unwrap();
    for row in y.data().chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn softmax_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_input(&mut rng, &[3, 4]);
    check(std::slice::from_ref(&x), |t| project(&tensor::softmax_lastaxis(&t[0]), 28));
    check(std::slice::from_ref(&x), |t| project(&t[0].log_softmax(), 29));
    let g = rand_input(&mut rng, &[3, 6]);
    check(&[g], |t| project(&t[0].glu()?, 30));
}

#[test]
fn depthwise_conv_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (t_len, k) in [(6, 3), (4, 5), (2, 7)] {
        let x = rand_input(&mut rng, &[t_len, 3]);
        let w = rand_input(&mut rng, &[3, k]);
        check(&[x, w], |t| project(&depthwise_conv1d(&t[0], &t[1], k)?, 31));
    }
}

#[test]
fn relative_index_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let r = rand_input(&mut rng, &[2, 5, 5]);
    check(&[r], |t| project(&rel_gather(&t[0], 2)?, 32));
    let a = rand_input(&mut rng, &[2, 5, 5]);
    check(&[a], |t| project(&rel_scatter(&t[0], 2)?, 33));
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (a, sa) = rand_input(&mut rng, &[7, 9]);
    let (b, sb) = rand_input(&mut rng, &[9, 3]);
    let run = || {
        let y = matmul(&Tensor::new(a.clone(), &sa), &Tensor::new(b.clone(), &sb)).unwrap();
        y.softmax().data().to_vec()
    };
    assert_eq!(run(), run());
}
