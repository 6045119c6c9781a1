use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn check(point: &[Array], f: impl Fn(&mut Tape, &[Var]) -> crate::Result<Var>) -> f64 {
    finite_diff_check(f, point, gradcheck::DEFAULT_EPS).unwrap().max_rel_error
}

/// Projects an arbitrary output onto a fixed random direction so every
/// output element contributes to the scalar.
fn project(tape: &mut Tape, y: Var, seed: u64) -> crate::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(y).shape().to_vec();
    let w = tape.leaf(random(&mut rng, &shape));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

#[test]
fn softmax_examples() {
    let x = Array::from_rows(&[vec![0.0, 0.0, 0.0], vec![1.0, 2.0, 0.0]]).unwrap();
    let y = softmax_rows(&x, 7.5).unwrap();
    for v in y.row(0) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let y = softmax_rows(&Array::from_rows(&[vec![1.0, 2.0]]).unwrap(), 1.0).unwrap();
    assert!((y.data()[0] - 0.26894).abs() < 1e-4);
    assert!((y.data()[1] - 0.73106).abs() < 1e-4);
    assert!(matches!(softmax_rows(&x, 0.0), Err(crate::Error::Parameter(_))));
    assert!(softmax_rows(&x, -1.0).is_err());
}

#[test]
fn softmax_is_stable_for_large_logits() {
    let x = Array::from_rows(&[vec![1000.0, 1001.0]]).unwrap();
    let y = softmax_rows(&x, 1.0).unwrap();
    assert!(y.is_finite());
    assert!((y.data()[1] - 0.73106).abs() < 1e-4);
}

#[test]
fn conv1d_identity_and_edges() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[5, 3]);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let k = tape.leaf(Array::identity(3).reshape(&[1, 3, 3]).unwrap());
    let b = tape.leaf(Array::zeros(&[3]));
    let y = tape.conv1d(xv, k, b).unwrap();
    assert_eq!(tape.value(y), &x);

    // t = 1: only the centre tap sees data.
    let mut tape = Tape::new();
    let xv = tape.leaf(Array::from_rows(&[vec![2.0]]).unwrap());
    let k = tape.leaf(Array::new(vec![3, 1, 1], vec![10.0, 3.0, 100.0]).unwrap());
    let b = tape.leaf(Array::scalar(0.5));
    let y = tape.conv1d(xv, k, b).unwrap();
    assert_eq!(tape.value(y).data(), &[6.5]);

    // Averaging kernel on a constant: interior keeps the value, edges lose one tap.
    let mut tape = Tape::new();
    let xv = tape.leaf(Array::filled(&[4, 1], 3.0));
    let k = tape.leaf(Array::filled(&[3, 1, 1], 1.0 / 3.0));
    let b = tape.leaf(Array::zeros(&[1]));
    let y = tape.conv1d(xv, k, b).unwrap();
    let out = tape.value(y).data();
    assert!((out[1] - 3.0).abs() < 1e-12 && (out[2] - 3.0).abs() < 1e-12);
    assert!((out[0] - 2.0).abs() < 1e-12 && (out[3] - 2.0).abs() < 1e-12);

    let even = tape.leaf(Array::zeros(&[2, 1, 1]));
    assert!(matches!(tape.conv1d(xv, even, b), Err(crate::Error::Parameter(_))));
}

#[test]
fn conv2d_identity_and_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[4, 6]);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let k = tape.leaf(Array::filled(&[1, 1, 1], 1.0));
    let b = tape.leaf(Array::zeros(&[1]));
    let y = tape.conv2d(xv, k, b).unwrap();
    assert_eq!(tape.value(y).data(), x.data());
    assert_eq!(tape.value(y).shape(), &[4, 6, 1]);

    let mut tape = Tape::new();
    let xv = tape.leaf(Array::filled(&[3, 3], 1.0));
    let k = tape.leaf(Array::filled(&[3, 3, 1], 1.0));
    let b = tape.leaf(Array::zeros(&[1]));
    let y = tape.conv2d(xv, k, b).unwrap();
    let out = tape.value(y);
    assert_eq!(out.get(&[1, 1, 0]), 9.0);
    assert_eq!(out.get(&[0, 0, 0]), 4.0);
    assert_eq!(out.get(&[0, 1, 0]), 6.0);

    let even = tape.leaf(Array::zeros(&[3, 2, 1]));
    assert!(matches!(tape.conv2d(xv, even, b), Err(crate::Error::Parameter(_))));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Array::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[6.0]);

    // Diamond: y = x + x.
    let mut tape = Tape::new();
    let x = tape.leaf(Array::scalar(1.5));
    let y = tape.add(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0]);

    // d/dA sum(A·B) = ones·Bᵀ
    let mut tape = Tape::new();
    let a = tape.leaf(Array::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let b = tape.leaf(Array::from_rows(&[vec![5.0, 6.0, 7.0], vec![8.0, 9.0, 10.0]]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    let s = tape.sum(c);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(a).unwrap().data(), &[18.0, 27.0, 18.0, 27.0]);
    assert_eq!(g.get(b).unwrap().data(), &[4.0, 4.0, 4.0, 6.0, 6.0, 6.0]);

    assert!(matches!(tape.backward(c), Err(crate::Error::Contract(_))));
}

#[test]
fn shared_node_gradient_is_sum_of_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = random(&mut rng, &[3, 2]);
    let w = random(&mut rng, &[2, 2]);

    let grad_of = |paths: (bool, bool)| {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let wv = tape.leaf(w.clone());
        let h = tape.matmul(x, wv).unwrap();
        let mut terms = Vec::new();
        if paths.0 {
            let r = tape.relu(h);
            terms.push(tape.sum(r));
        }
        if paths.1 {
            let s = tape.sigmoid(h);
            terms.push(tape.sum(s));
        }
        let root = if terms.len() == 2 { tape.add(terms[0], terms[1]).unwrap() } else { terms[0] };
        tape.backward(root).unwrap().wrt(&tape, x)
    };
    let both = grad_of((true, true));
    let a = grad_of((true, false));
    let b = grad_of((false, true));
    for ((g, ga), gb) in both.data().iter().zip(a.data()).zip(b.data()) {
        assert!((g - (ga + gb)).abs() < 1e-14);
    }
}

#[test]
fn softmax_cross_entropy_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = random(&mut rng, &[3, 4]);
    let onehot = Array::new(vec![3, 4], vec![1., 0., 0., 0., 0., 0., 1., 0., 0., 1., 0., 0.]).unwrap();
    let err = check(&[logits], |tape, v| {
        let p = tape.softmax_rows(v[0], 1.0)?;
        let lp = tape.log(p)?;
        let target = tape.leaf(onehot.clone());
        let picked = tape.mul(lp, target)?;
        let s = tape.sum(picked);
        Ok(tape.scale(s, -1.0))
    });
    assert!(err < 1e-3, "{err}");
}

#[test]
fn primitive_gradchecks() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    let c = random(&mut rng, &[5, 4]);
    let bias = random(&mut rng, &[2]);

    type Build = Box<dyn Fn(&mut Tape, &[Var]) -> crate::Result<Var>>;
    let cases: Vec<(&str, Vec<Array>, Build)> = vec![
        ("matmul", vec![a.clone(), b.clone()], Box::new(|t, v| { let y = t.matmul(v[0], v[1])?; project(t, y, 10) })),
        ("matmul_nt", vec![a.clone(), c.clone()], Box::new(|t, v| { let y = t.matmul_nt(v[0], v[1])?; project(t, y, 11) })),
        ("linear", vec![a.clone(), b.clone(), bias.clone()], Box::new(|t, v| { let y = t.linear(v[0], v[1], v[2])?; project(t, y, 12) })),
        ("sub", vec![a.clone(), a.map(|x| x * 0.3)], Box::new(|t, v| { let y = t.sub(v[0], v[1])?; project(t, y, 13) })),
        ("sigmoid", vec![a.clone()], Box::new(|t, v| { let y = t.sigmoid(v[0]); project(t, y, 14) })),
        ("softmax", vec![a.clone()], Box::new(|t, v| { let y = t.softmax_rows(v[0], 1.7)?; project(t, y, 15) })),
        ("slice_concat", vec![a.clone()], Box::new(|t, v| {
            let l = t.slice_cols(v[0], 0, 1)?;
            let r = t.slice_cols(v[0], 2, 2)?;
            let y = t.concat_cols(&[r, l, r])?;
            project(t, y, 16)
        })),
        ("row_diff", vec![c.clone()], Box::new(|t, v| { let y = t.row_diff(v[0])?; project(t, y, 17) })),
        ("reshape_gather", vec![a.clone()], Box::new(|t, v| {
            let r = t.reshape(v[0], &[12])?;
            let y = t.gather(r, &[3, 0, 3, 11])?;
            project(t, y, 18)
        })),
        ("variance_mean", vec![c.clone()], Box::new(|t, v| {
            let var = t.variance(v[0]);
            let m = t.mean(v[0]);
            t.add(var, m)
        })),
        ("bce", vec![a.map(|x| 0.5 + 0.4 * x)], Box::new(|t, v| { let y = t.bce(v[0], 1.0, 1e-7); let z = t.bce(v[0], 0.0, 1e-7); let s = t.add(y, z)?; project(t, s, 19) })),
        ("relu", vec![a.map(|x| if x.abs() < 0.05 { x + 0.2 } else { x })], Box::new(|t, v| { let y = t.relu(v[0]); project(t, y, 20) })),
    ];
    for (name, point, f) in cases {
        let err = check(&point, |t, v| f(t, v));
        assert!(err < 1e-3, "{name}: {err}");
    }
}

#[test]
fn conv_gradchecks() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[5, 3]);
    let k = random(&mut rng, &[3, 3, 4]);
    let b = random(&mut rng, &[4]);
    let err = check(&[x, k, b], |t, v| {
        let y = t.conv1d(v[0], v[1], v[2])?;
        project(t, y, 30)
    });
    assert!(err < 1e-3, "conv1d {err}");

    let map = random(&mut rng, &[4, 5]);
    let k2 = random(&mut rng, &[3, 3, 2]);
    let b2 = random(&mut rng, &[2]);
    let err = check(&[map, k2, b2], |t, v| {
        let y = t.conv2d(v[0], v[1], v[2])?;
        project(t, y, 31)
    });
    assert!(err < 1e-3, "conv2d {err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5, cols in 1usize..7, seed in any::<u64>(), scale in 0.1f64..10.0
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[rows, cols]).map(|v| v * 20.0);
        let y = softmax_rows(&x, scale).unwrap();
        for r in 0..rows {
            let row = y.row(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_gradients_match_finite_differences(
        m in 1usize..4, k in 1usize..4, n in 1usize..4, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[m, k]);
        let b = random(&mut rng, &[k, n]);
        let err = check(&[a, b], |t, v| { let y = t.matmul(v[0], v[1])?; let s = t.sigmoid(y); project(t, s, seed) });
        prop_assert!(err < 1e-3, "{}", err);
    }

    #[test]
    fn conv1d_gradients_match_finite_differences(
        len in 1usize..6, d_in in 1usize..3, d_out in 1usize..3, half in 0usize..2, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[len, d_in]);
        let k = random(&mut rng, &[2 * half + 1, d_in, d_out]);
        let b = random(&mut rng, &[d_out]);
        let err = check(&[x, k, b], |t, v| { let y = t.conv1d(v[0], v[1], v[2])?; let s = t.sigmoid(y); project(t, s, seed) });
        prop_assert!(err < 1e-3, "{}", err);
    }
}
