use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t2(rows: &[&[f64]]) -> Tensor<f64> {
    Tensor::from_rows(rows).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn tensor_invariants() {
    assert!(Tensor::<f32>::new(&[2, 0], vec![]).is_err());
    assert!(Tensor::<f32>::new(&[2, 2], vec![1.0; 3]).is_err());
    assert_eq!(Tensor::<f32>::zeros(&[3, 4]).len(), 12);
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let b = g.constant(t2(&[&[5.0, 6.0], &[7.0, 8.0]]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);

    let eye = g.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let c = g.matmul(eye, b).unwrap();
    assert_eq!(g.value(c), g.value(b));

    let zero = g.constant(Tensor::zeros(&[2, 3]));
    let c = g.matmul(a, zero).unwrap();
    assert!(g.value(c).data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(Tensor::new(&[2], vec![2f64.ln(), 0.0]).unwrap());
    let y = g.softmax(x, 0).unwrap();
    assert!((g.value(y).data()[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((g.value(y).data()[1] - 1.0 / 3.0).abs() < 1e-15);

    let v = random(&[3, 5], 1);
    let shifted = Tensor::new(&[3, 5], v.data().iter().map(|x| x + 7.5).collect()).unwrap();
    let a = g.constant(v);
    let b = g.constant(shifted);
    let ya = g.softmax(a, 1).unwrap();
    let yb = g.softmax(b, 1).unwrap();
    assert!(g.value(ya).max_abs_diff(g.value(yb)) < 1e-12);
}

#[test]
fn softmax_nan_propagates() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new(&[2], vec![f32::NAN, 0.0]).unwrap());
    let y = g.softmax(x, 0).unwrap();
    assert!(g.value(y).data().iter().all(|v| v.is_nan()));
}

#[test]
fn softmax_along_leading_axis() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(random(&[4, 3], 2));
    let y = g.softmax(x, 0).unwrap();
    let v = g.value(y);
    for col in 0..3 {
        let s: f64 = (0..4).map(|r| v.data()[r * 3 + col]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let gamma = g.constant(Tensor::full(&[3], 1.0));
    let beta = g.constant(Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap());
    let x = g.constant(Tensor::full(&[1, 3], 4.0));
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.1, 0.2, 0.3]);

    let gamma = g.constant(Tensor::full(&[2], 1.0));
    let beta = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(t2(&[&[1.0, -1.0]]));
    let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
    assert!((g.value(y).data()[0] - 1.0).abs() < 1e-10);
    assert!((g.value(y).data()[1] + 1.0).abs() < 1e-10);

    let zero = g.constant(Tensor::zeros(&[3]));
    let x = g.constant(random(&[2, 3], 3));
    let shifted = beta_of(&mut g);
    let y = g.layer_norm(x, zero, shifted, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, -0.5, 2.0, 0.5, -0.5, 2.0]);

    let x = g.constant(random(&[1, 3], 3));
    assert!(g.layer_norm(x, zero, zero, 0.0).is_err());
}

fn beta_of(g: &mut Graph<f64>) -> Var {
    g.constant(Tensor::new(&[3], vec![0.5, -0.5, 2.0]).unwrap())
}

#[test]
fn gelu_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[3], vec![0.0, 10.0, 1.0]).unwrap());
    let y = g.gelu(x);
    let v = g.value(y).data();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 10.0).abs() < 1e-6);
    // Φ(1) = 0.841344746...
    assert!((v[2] - 0.841_344_746_068_543).abs() < 1e-12);
}

#[test]
fn gather_examples() {
    let mut g = Graph::<f64>::new();
    let eye = g.param(t2(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]));
    let y = g.embedding_gather(eye, &[2, 0]).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    let y = g.embedding_gather(eye, &[0]).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 0.0, 0.0]);

    let table = g.param(random(&[5, 2], 4));
    let y = g.embedding_gather(table, &[3, 3]).unwrap();
    assert_eq!(g.value(y).row(0), g.value(y).row(1));
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(table).unwrap()[6..8], [2.0, 2.0]);
    assert_eq!(g.grad(table).unwrap()[0..6], [0.0; 6]);

    match g.embedding_gather(table, &[5]) {
        Err(TensorError::Index { index: 5, .. }) => {}
        other => panic!("expected index error, got {other:?}"),
    }
}

#[test]
fn backward_sum_and_product() {
    let mut g = Graph::<f64>::new();
    let x = g.param(random(&[2, 3], 5));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.param(Tensor::scalar(-2.0));
    let p = g.mul(x, y).unwrap();
    g.backward(p).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[-2.0]);
    assert_eq!(g.grad(y).unwrap(), &[3.0]);
}

#[test]
fn backward_accumulates_on_leaves() {
    let mut g = Graph::<f64>::new();
    let x = g.param(random(&[3], 6));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    let once = g.grad(x).unwrap().to_vec();
    g.backward(loss).unwrap();
    let twice = g.grad(x).unwrap();
    for (a, b) in once.iter().zip(twice) {
        assert_eq!(2.0 * a, *b);
    }
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.param(random(&[3], 6));
    assert!(matches!(g.backward(x), Err(TensorError::Contract(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(random(&[2, 2], 7));
    let w = g.param(random(&[2, 2], 8));
    let y = g.matmul(x, w).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(x).is_none());
    assert!(g.grad(w).is_some());
}

#[test]
fn dropout_is_identity_outside_training() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::full(&[4, 4], 1.0));
    assert_eq!(g.dropout(x, 0.5), x);

    let mut g = Graph::<f32>::training(1);
    let x = g.param(Tensor::full(&[64, 64], 1.0));
    let y = g.dropout(x, 0.5);
    let v = g.value(y).data();
    assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
    let kept = v.iter().filter(|&&e| e > 0.0).count();
    assert!((1700..2400).contains(&kept), "{kept}");
}

#[test]
fn attention_single_key_copies_value() {
    // One token: the only key gets probability 1, so the output is its value.
    let mut g = Graph::<f64>::new();
    let qkv = g.constant(t2(&[&[0.3, -0.2, 1.5, 0.7, 2.0, -4.0]]));
    let y = g.attention(qkv, &[0..1], 1, Queries::All).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, -4.0]);
}

#[test]
fn attention_last_matches_all() {
    let mut g = Graph::<f64>::new();
    let qkv = g.constant(random(&[7, 12], 9));
    let spans = [0..3, 3..7];
    let all = g.attention(qkv, &spans, 2, Queries::All).unwrap();
    let last = g.attention(qkv, &spans, 2, Queries::Last).unwrap();
    assert_eq!(g.value(last).row(0), g.value(all).row(2));
    assert_eq!(g.value(last).row(1), g.value(all).row(6));
}

#[test]
fn attention_is_causal_within_span() {
    let base = random(&[5, 6], 10);
    let mut changed = base.clone();
    for v in &mut changed.data_mut()[4 * 6..] {
        *v += 1.0;
    }
    let mut g = Graph::<f64>::new();
    let a = g.constant(base);
    let b = g.constant(changed);
    let ya = g.attention(a, &[0..5], 1, Queries::All).unwrap();
    let yb = g.attention(b, &[0..5], 1, Queries::All).unwrap();
    for r in 0..4 {
        assert_eq!(g.value(ya).row(r), g.value(yb).row(r));
    }
    assert_ne!(g.value(ya).row(4), g.value(yb).row(4));
}

#[test]
fn cross_entropy_closed_form() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(t2(&[&[0.0, 0.0]]));
    let l = g.cross_entropy(z, &[0]).unwrap();
    assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(g.cross_entropy(z, &[2]).is_err());
}

#[test]
fn soft_kl_zero_for_equal_logits() {
    let mut g = Graph::<f64>::new();
    let t = random(&[4, 3], 11);
    let s = g.param(t.clone());
    for dir in [KlDirection::StudentTeacher, KlDirection::TeacherStudent] {
        let kl = g.soft_kl(s, &t, 2.0, dir).unwrap();
        assert!(g.value(kl).item().abs() < 1e-15);
    }
}

// Finite-difference checks of every primitive, 64-bit, h = 1e-5.

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn check(name: &str, input: Tensor<f64>, f: impl Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>) {
    let err = grad_check(f, &input, H).unwrap();
    assert!(err < TOL, "{name}: relative error {err:e}");
}

#[test]
fn grad_check_sum_of_squares() {
    let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let err = grad_check(
        |g, x| {
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err:e}");
}

#[test]
fn grad_check_linear_is_exact() {
    let w = random(&[4, 1], 12);
    for h in [1e-1, 1e-3, 1e-6] {
        let w = w.clone();
        let err = grad_check(
            move |g, x| {
                let w = g.constant(w.clone());
                let y = g.matmul(x, w)?;
                Ok(g.sum(y))
            },
            &random(&[3, 4], 13),
            h,
        )
        .unwrap();
        assert!(err < 1e-9, "h={h}: {err:e}");
    }
}

#[test]
fn grad_check_primitives() {
    let w = random(&[4, 3], 20);
    check("matmul lhs", random(&[3, 4], 22), |g, x| {
        let w = g.constant(w.clone());
        let y = g.matmul(x, w)?;
        let sq = g.mul(y, y)?;
        Ok(g.sum(sq))
    });
    let a = random(&[2, 4], 23);
    check("matmul rhs", random(&[4, 3], 24), |g, x| {
        let a = g.constant(a.clone());
        let y = g.matmul(a, x)?;
        let sq = g.mul(y, y)?;
        Ok(g.sum(sq))
    });
    let other = random(&[3, 4], 25);
    check("add", random(&[3, 4], 26), |g, x| {
        let o = g.constant(other.clone());
        let y = g.add(x, o)?;
        let sq = g.mul(y, y)?;
        Ok(g.sum(sq))
    });
    let base = random(&[3, 4], 27);
    check("add_row", random(&[4], 28), |g, x| {
        let b = g.constant(base.clone());
        let y = g.add_row(b, x)?;
        let sq = g.mul(y, y)?;
        Ok(g.sum(sq))
    });
    check("scale", random(&[5], 29), |g, x| {
        let y = g.scale(x, -1.7);
        let sq = g.mul(y, y)?;
        Ok(g.sum(sq))
    });
    let weights = random(&[3, 5], 30);
    for axis in [0, 1] {
        check("softmax", random(&[3, 5], 31), |g, x| {
            let y = g.softmax(x, axis)?;
            let w = g.constant(weights.clone());
            let p = g.mul(y, w)?;
            Ok(g.sum(p))
        });
    }
    let gamma = random(&[6], 32);
    let beta = random(&[6], 33);
    let wts = random(&[4, 6], 34);
    check("layer_norm x", random(&[4, 6], 35), |g, x| {
        let ga = g.constant(gamma.clone());
        let be = g.constant(beta.clone());
        let y = g.layer_norm(x, ga, be, 1e-5)?;
        let w = g.constant(wts.clone());
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    });
    let xs = random(&[4, 6], 36);
    check("layer_norm gamma", random(&[6], 37), |g, ga| {
        let x = g.constant(xs.clone());
        let be = g.constant(beta.clone());
        let y = g.layer_norm(x, ga, be, 1e-5)?;
        let w = g.constant(wts.clone());
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    });
    check("layer_norm beta", random(&[6], 38), |g, be| {
        let x = g.constant(xs.clone());
        let ga = g.constant(gamma.clone());
        let y = g.layer_norm(x, ga, be, 1e-5)?;
        let w = g.constant(wts.clone());
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    });
    check("gelu", random(&[10], 39).cast(), |g, x| {
        let y = g.gelu(x);
        let sq = g.mul(y, y)?;
        Ok(g.sum(sq))
    });
    let mix = random(&[4, 3], 40);
    check("embedding_gather", random(&[5, 3], 41), |g, t| {
        let y = g.embedding_gather(t, &[4, 1, 1, 0])?;
        let m = g.constant(mix.clone());
        let p = g.mul(y, m)?;
        let sq = g.mul(p, p)?;
        Ok(g.sum(sq))
    });
    let mix2 = random(&[2, 3], 42);
    check("select_rows", random(&[5, 3], 43), |g, x| {
        let y = g.select_rows(x, &[3, 3])?;
        let m = g.constant(mix2.clone());
        let p = g.mul(y, m)?;
        let sq = g.mul(p, p)?;
        Ok(g.sum(sq))
    });
    let out_w = random(&[9, 4], 44);
    for queries in [Queries::All, Queries::Last] {
        check("attention", random(&[9, 12], 45), |g, x| {
            let y = g.attention(x, &[0..4, 4..9], 2, queries)?;
            let rows = g.value(y).rows();
            let w = g.constant(Tensor::new(&[rows, 4], out_w.data()[..rows * 4].to_vec())?);
            let p = g.mul(y, w)?;
            let sq = g.mul(p, p)?;
            Ok(g.sum(sq))
        });
    }
    check("cross_entropy", random(&[4, 3], 46), |g, x| {
        g.cross_entropy(x, &[0, 2, 1, 2])
    });
    let teacher = random(&[4, 3], 47);
    for dir in [KlDirection::StudentTeacher, KlDirection::TeacherStudent] {
        for tau in [1.0, 2.0, 5.0] {
            check("soft_kl", random(&[4, 3], 48), |g, x| g.soft_kl(x, &teacher, tau, dir));
        }
    }
}

#[test]
fn grad_check_dropout_with_fixed_mask() {
    // Same seed on every evaluation gives the same mask, so the op is linear.
    let x = random(&[4, 4], 49);
    let f = |g: &mut Graph<f64>, x: Var| -> Result<Var, TensorError> {
        let mut inner = Graph::<f64>::training(3);
        let v = inner.constant(g.value(x).clone());
        let d = inner.dropout(v, 0.3);
        let mask: Vec<f64> = inner
            .value(d)
            .data()
            .iter()
            .zip(g.value(x).data())
            .map(|(a, b)| a / b)
            .collect();
        let m = g.constant(Tensor::new(&[4, 4], mask)?);
        let y = g.mul(x, m)?;
        let sq = g.mul(y, y)?;
        Ok(g.sum(sq))
    };
    let err = grad_check(f, &x, H).unwrap();
    assert!(err < TOL);
    let mut g = Graph::<f64>::training(3);
    let xv = g.param(x);
    let d = g.dropout(xv, 0.3);
    let s = g.sum(d);
    g.backward(s).unwrap();
    let gv = g.grad(xv).unwrap();
    assert!(gv.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12));
}

#[test]
fn sign_flip_is_detected() {
    let x = random(&[6], 50);
    let err = grad_check_with(
        |g, x| {
            let y = g.gelu(x);
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        },
        &x,
        H,
        Some(Primitive::Gelu),
    )
    .unwrap();
    assert!(err > 0.5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-50.0f64..50.0, 1..40), cols in 1usize..8) {
        let rows = values.len() / cols;
        prop_assume!(rows > 0);
        let v64 = Tensor::new(&[rows, cols], values[..rows * cols].to_vec()).unwrap();
        let v32: Tensor<f32> = v64.cast();
        let mut g = Graph::<f64>::new();
        let x = g.constant(v64);
        let y = g.softmax(x, 1).unwrap();
        for r in 0..rows {
            let row = g.value(y).row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let mut g = Graph::<f32>::new();
        let x = g.constant(v32);
        let y = g.softmax(x, 1).unwrap();
        for r in 0..rows {
            prop_assert!((g.value(y).row(r).iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_associative(seed in any::<u64>(), m in 1usize..6, k in 1usize..6, n in 1usize..6, p in 1usize..6) {
        let a: Tensor<f32> = random(&[m, k], seed).cast();
        let b: Tensor<f32> = random(&[k, n], seed ^ 1).cast();
        let c: Tensor<f32> = random(&[n, p], seed ^ 2).cast();
        let left = matmul_plain(&matmul_plain(&a, &b).unwrap(), &c).unwrap();
        let right = matmul_plain(&a, &matmul_plain(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-4);
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>()) {
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g.constant(random(&[5, 12], seed).cast());
            let y = g.attention(x, &[0..2, 2..5], 2, Queries::All).unwrap();
            let z = g.gelu(y);
            g.value(z).clone()
        };
        prop_assert_eq!(run(), run());
    }
}
