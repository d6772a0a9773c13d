mod common;

use std::sync::Arc;

use common::rng;
use nasprune::kd;
use nasprune::numerics::{grad_check, rms_norm, softmax_rows, Tape, Tensor, Var};
use nasprune::Result;
use proptest::prelude::*;
use rand::Rng;

fn rand_tensor<R: Rng>(r: &mut R, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| scale * (2.0 * r.random::<f64>() - 1.0)).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    c
}

/// `Σ op(x)·w` with a fixed random `w`, so every output element matters.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let w = rand_tensor(&mut rng(seed), &shape, 1.0);
    let wv = tape.constant(w);
    let m = tape.mul(out, wv)?;
    tape.sum(m)
}

fn check(name: &str, shapes: &[Vec<usize>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) {
    for seed in 0..20 {
        let mut r = rng(seed);
        let point: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut r, s, 1.0)).collect();
        let report = grad_check(
            |tape, vars| {
                let out = f(tape, vars)?;
                project(tape, out, 1000 + seed)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(1e-5), "{name} seed {seed}: {report:?}");
    }
}

#[test]
fn matmul_matches_naive_product() {
    let mut r = rng(0);
    for (m, k, n) in [(1, 1, 1), (3, 5, 2), (7, 4, 9), (16, 33, 5)] {
        let a = rand_tensor(&mut r, &[m, k], 1.0);
        let b = rand_tensor(&mut r, &[k, n], 1.0);
        let c = a.matmul(&b).unwrap();
        let want = naive_matmul(a.data(), b.data(), m, k, n);
        for (x, y) in c.data().iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_and_rms_norm_match_definitions() {
    let mut r = rng(1);
    let x = rand_tensor(&mut r, &[4, 7], 3.0);
    let s = softmax_rows(&x);
    for row in 0..4 {
        let z: Vec<f64> = x.data()[row * 7..(row + 1) * 7].to_vec();
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        for c in 0..7 {
            assert!((s.data()[row * 7 + c] - z[c].exp() / denom).abs() < 1e-14);
        }
    }
    let g = rand_tensor(&mut r, &[7], 1.0);
    let y = rms_norm(&x, &g, 1e-5).unwrap();
    for row in 0..4 {
        let z = &x.data()[row * 7..(row + 1) * 7];
        let ms = z.iter().map(|v| v * v).sum::<f64>() / 7.0;
        for c in 0..7 {
            let want = z[c] / (ms + 1e-5).sqrt() * g.data()[c];
            assert!((y.data()[row * 7 + c] - want).abs() < 1e-13);
        }
    }
}

#[test]
fn causal_softmax_ignores_the_future() {
    let mut r = rng(2);
    let x = rand_tensor(&mut r, &[2, 5, 5], 2.0);
    let mut tape = Tape::inference();
    let v = tape.constant(x.clone());
    let p = tape.causal_softmax(v).unwrap();
    let p = tape.value(p);
    for n in 0..2 {
        for i in 0..5 {
            let row = &p.data()[(n * 5 + i) * 5..(n * 5 + i + 1) * 5];
            assert!(row[i + 1..].iter().all(|&v| v == 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            let z = &x.data()[(n * 5 + i) * 5..(n * 5 + i) * 5 + i + 1];
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            for j in 0..=i {
                assert!((row[j] - z[j].exp() / denom).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn cross_entropy_matches_log_softmax() {
    let mut r = rng(3);
    let x = rand_tensor(&mut r, &[3, 6], 2.0);
    let targets: Arc<[usize]> = vec![0, 5, 2].into();
    let mut tape = Tape::inference();
    let v = tape.constant(x.clone());
    let l = tape.cross_entropy(v, targets.clone()).unwrap();
    let mut want = 0.0;
    for (row, &t) in targets.iter().enumerate() {
        let z = &x.data()[row * 6..(row + 1) * 6];
        let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        want += lse - z[t];
    }
    assert!((tape.value(l).data()[0] - want / 3.0).abs() < 1e-13);
}

#[test]
fn gradients_of_matmul_variants() {
    check("matmul", &[vec![3, 4], vec![4, 5]], |t, v| t.matmul(v[0], v[1]));
    check("matmul_ta", &[vec![4, 3], vec![4, 5]], |t, v| t.matmul_t(v[0], v[1], true, false));
    check("matmul_tb", &[vec![3, 4], vec![5, 4]], |t, v| t.matmul_t(v[0], v[1], false, true));
    check("matmul_tt", &[vec![4, 3], vec![5, 4]], |t, v| t.matmul_t(v[0], v[1], true, true));
    check("bmm", &[vec![2, 3, 4], vec![2, 4, 3]], |t, v| t.batch_matmul(v[0], v[1], false));
    check("bmm_tb", &[vec![2, 3, 4], vec![2, 5, 4]], |t, v| t.batch_matmul(v[0], v[1], true));
}

#[test]
fn gradients_of_elementwise_ops() {
    check("add", &[vec![3, 4], vec![3, 4]], |t, v| t.add(v[0], v[1]));
    check("mul", &[vec![3, 4], vec![3, 4]], |t, v| t.mul(v[0], v[1]));
    check("scale", &[vec![3, 4]], |t, v| t.scale(v[0], -1.7));
    check("sigmoid", &[vec![3, 4]], |t, v| t.sigmoid(v[0]));
    check("silu", &[vec![3, 4]], |t, v| t.silu(v[0]));
    check("sum", &[vec![3, 4]], |t, v| t.sum(v[0]));
}

#[test]
fn gradients_of_normalization_and_softmax() {
    check("rms_norm", &[vec![3, 6], vec![6]], |t, v| t.rms_norm(v[0], v[1], 1e-5));
    check("softmax", &[vec![3, 6]], |t, v| t.softmax(v[0]));
    check("causal_softmax", &[vec![2, 4, 4]], |t, v| t.causal_softmax(v[0]));
}

#[test]
fn gradients_of_indexing_ops() {
    let idx: Arc<[u32]> = vec![0, 5, 5, 2, 11, 7].into();
    check("gather", &[vec![3, 4]], move |t, v| t.gather(v[0], idx.clone(), vec![2, 3]));
    check("select", &[vec![5, 6]], |t, v| t.select(v[0], vec![4, 0, 2].into(), vec![1, 5].into()));
    check("concat", &[vec![3, 2], vec![3, 4], vec![3, 1]], |t, v| t.concat(v.to_vec()));
}

#[test]
fn gradients_of_losses() {
    let targets: Arc<[usize]> = vec![1, 0, 4].into();
    check("cross_entropy", &[vec![3, 5]], move |t, v| t.cross_entropy(v[0], targets.clone()));
    for (name, loss) in kd::builtin().iter() {
        for temp in [1.0, 2.5] {
            let teacher = Arc::new(rand_tensor(&mut rng(77), &[3, 5], 2.0));
            let loss = loss.clone();
            check(name, &[vec![3, 5]], move |t, v| t.distill(v[0], teacher.clone(), loss.clone(), temp));
        }
    }
}

#[test]
fn inference_tape_tracks_no_gradients() {
    let mut tape = Tape::<f64>::inference();
    let a = tape.param(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
    let s = tape.sum(a).unwrap();
    assert!(!tape.is_recording());
    assert!(tape.backward(s).is_err());
}

proptest! {
    #[test]
    fn matmul_is_bilinear(seed in 0u64..1000, m in 1usize..6, k in 1usize..6, n in 1usize..6, alpha in -3.0f64..3.0) {
        let mut r = rng(seed);
        let a = rand_tensor(&mut r, &[m, k], 1.0);
        let b1 = rand_tensor(&mut r, &[k, n], 1.0);
        let b2 = rand_tensor(&mut r, &[k, n], 1.0);
        let mix: Vec<f64> = b1.data().iter().zip(b2.data()).map(|(x, y)| alpha * x + y).collect();
        let lhs = a.matmul(&Tensor::from_f64(&[k, n], &mix).unwrap()).unwrap();
        let c1 = a.matmul(&b1).unwrap();
        let c2 = a.matmul(&b2).unwrap();
        for i in 0..m * n {
            prop_assert!((lhs.data()[i] - (alpha * c1.data()[i] + c2.data()[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(seed in 0u64..1000, rows in 1usize..5, cols in 1usize..9, scale in 0.1f64..50.0) {
        let x = rand_tensor(&mut rng(seed), &[rows, cols], scale);
        let s = softmax_rows(&x);
        for r in 0..rows {
            let row = &s.data()[r * cols..(r + 1) * cols];
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_is_an_involution(seed in 0u64..1000, m in 1usize..7, n in 1usize..7) {
        let a = rand_tensor(&mut rng(seed), &[m, n], 1.0);
        prop_assert_eq!(a.transpose().unwrap().transpose().unwrap(), a);
    }
}
