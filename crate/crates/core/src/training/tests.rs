use proptest::prelude::*;

use super::*;
use crate::autodiff::grad_check;
use crate::data::{generate_synthetic, ClassSpec, SyntheticSpec, TaskSpec};
use crate::model::{init_student_from_teacher, Checkpoint};

fn t(rows: &[&[f64]]) -> Tensor<f64> {
    Tensor::from_rows(rows).unwrap()
}

#[test]
fn ce_examples() {
    let l = ce_loss_value(&t(&[&[0.0, 0.0]]), &[0]).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((l - 0.693147).abs() < 1e-6);
    let l = ce_loss_value(&t(&[&[60.0, -60.0]]), &[0]).unwrap();
    assert!(l < 1e-40);
    let z = t(&[&[0.3, -1.2, 2.0], &[1.0, 0.5, -0.5]]);
    let zz = t(&[&[0.3, -1.2, 2.0], &[1.0, 0.5, -0.5], &[0.3, -1.2, 2.0], &[1.0, 0.5, -0.5]]);
    let a = ce_loss_value(&z, &[2, 0]).unwrap();
    let b = ce_loss_value(&zz, &[2, 0, 2, 0]).unwrap();
    assert!((a - b).abs() < 1e-15);
    assert!(ce_loss_value(&z, &[3, 0]).is_err());
}

#[test]
fn distill_examples() {
    let s = t(&[&[0.3, -1.2, 2.0], &[1.0, 0.5, -0.5]]);
    let teacher = t(&[&[1.0, 0.0, 0.0], &[0.0, 2.0, 1.0]]);
    let dir = KlDirection::StudentTeacher;
    assert_eq!(
        distill_loss_value(&s, &teacher, &[2, 1], 0.0, 2.0, dir).unwrap(),
        ce_loss_value(&s, &[2, 1]).unwrap()
    );
    assert_eq!(distill_loss_value(&s, &s, &[2, 1], 1.0, 2.0, dir).unwrap(), 0.0);
    assert!(distill_loss_value(&s, &teacher, &[2, 1], 1.1, 2.0, dir).is_err());
    assert!(distill_loss_value(&s, &teacher, &[2, 1], 0.5, 0.0, dir).is_err());
    let mixed = distill_loss_value(&s, &teacher, &[2, 1], 0.5, 2.0, dir).unwrap();
    let kl = distill_loss_value(&s, &teacher, &[2, 1], 1.0, 2.0, dir).unwrap();
    let ce = ce_loss_value(&s, &[2, 1]).unwrap();
    assert!((mixed - (0.5 * ce + 0.5 * kl)).abs() < 1e-12);
}

#[test]
fn distill_gradient_matches_differences() {
    let teacher = t(&[&[1.0, 0.0, -0.4], &[0.0, 2.0, 1.0]]);
    for dir in [KlDirection::StudentTeacher, KlDirection::TeacherStudent] {
        let err = grad_check(
            |g, x| {
                distill_loss(g, x, &teacher, &[2, 1], 0.5, 2.0, dir)
                    .map_err(|e| TensorError::Contract(e.to_string()))
            },
            &t(&[&[0.3, -1.2, 2.0], &[1.0, 0.5, -0.5]]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err:e}");
    }
}

fn soft_grad_norm(tau: f64) -> f64 {
    let teacher = t(&[&[1.0, 0.0, -0.4, 0.3]]);
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[&[0.3, -1.2, 2.0, 0.1]]));
    let l = distill_loss(&mut g, x, &teacher, &[0], 1.0, tau, KlDirection::StudentTeacher).unwrap();
    g.backward(l).unwrap();
    g.grad(x).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn tau_squared_keeps_soft_gradient_finite() {
    let (a, b) = (soft_grad_norm(10.0), soft_grad_norm(100.0));
    assert!(a > 0.0 && b > 0.0);
    assert!((a - b).abs() / b < 0.1, "{a} vs {b}");
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let cfg = ModelConfig {
        n_layers: 1,
        hidden_dim: 4,
        n_heads: 1,
        max_seq: 4,
        ..ModelConfig::default()
    };
    let mut p = init_params::<f32>(&cfg, 0).unwrap();
    let before = p.clone();
    let mut opt = Adam::new(&p, 0.1, 1.0);
    let zeros: Vec<Vec<f32>> = p.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    opt.step(&mut p, &zeros);
    assert_eq!(p, before);
}

/// A one-tensor parameter set is not expressible, so the single-scalar
/// example runs on the first coordinate of a tiny model.
#[test]
fn adam_first_step_is_lr() {
    let cfg = ModelConfig {
        n_layers: 1,
        hidden_dim: 4,
        n_heads: 1,
        max_seq: 4,
        ..ModelConfig::default()
    };
    let mut p = init_params::<f32>(&cfg, 0).unwrap();
    let w0 = p.tensors()[0].data()[0];
    let mut grads: Vec<Vec<f32>> = p.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    grads[0][0] = 1.0;
    let mut opt = Adam::new(&p, 0.1, 0.0);
    opt.step(&mut p, &grads);
    let dw = w0 - p.tensors()[0].data()[0];
    assert!((dw - 0.1).abs() < 1e-6, "{dw}");
    assert_eq!(opt.state.step, 1);
}

#[test]
fn clipping_rescales_to_threshold() {
    let mut g = vec![vec![6.0f32, 0.0], vec![8.0]];
    let n = clip_global_norm(&mut g, 1.0);
    assert!((n - 10.0).abs() < 1e-12);
    assert_eq!(g, vec![vec![0.6f32, 0.0], vec![0.8]]);

    let cfg = ModelConfig {
        n_layers: 1,
        hidden_dim: 4,
        n_heads: 1,
        max_seq: 4,
        ..ModelConfig::default()
    };
    let p0 = init_params::<f32>(&cfg, 0).unwrap();
    let mut grads: Vec<Vec<f32>> = p0.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    grads[2][0] = 6.0;
    grads[3][1] = -8.0;
    let scaled: Vec<Vec<f32>> = grads.iter().map(|g| g.iter().map(|v| v * 0.1).collect()).collect();
    let (mut a, mut b) = (p0.clone(), p0.clone());
    Adam::new(&a, 0.01, 1.0).step(&mut a, &grads);
    Adam::new(&b, 0.01, 0.0).step(&mut b, &scaled);
    assert_eq!(a, b);
}

fn easy_records(samples: usize, seed: u64) -> Vec<TrafficRecord> {
    let class = |name: &str, len: f64, proto: &str| ClassSpec {
        name: name.into(),
        len_mean: len,
        len_std: 10.0,
        iat_mean: 500.0,
        iat_std: 50.0,
        protocols: [(proto.to_string(), 1.0)].into(),
    };
    let spec = SyntheticSpec {
        packets_per_flow: 2,
        tasks: vec![TaskSpec {
            name: "t".into(),
            port_range: [1000, 1999],
            samples,
            noise: 0.0,
            classes: vec![class("small", 100.0, "TCP"), class("large", 1000.0, "UDP")],
        }],
    };
    generate_synthetic(&spec, seed).unwrap()
}

fn easy_examples() -> Vec<Example> {
    let recs = easy_records(320, 1);
    make_examples(&recs, true, |r| Some(usize::from(r.label == "large"))).unwrap()
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        hidden_dim: 32,
        n_heads: 4,
        max_seq: 96,
        n_classes: 2,
        ..ModelConfig::default()
    }
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        epochs: 5,
        batch_size: 16,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn supervised_learns_separable_task() {
    let data = easy_examples();
    let (params, trace) = train_supervised(&data, &tiny_model(), &quick_train()).unwrap();
    assert_eq!(trace.len(), 5);
    assert!(trace[4].accuracy >= 0.98, "{trace:?}");
    for w in trace.windows(2) {
        assert!(w[1].mean_loss <= w[0].mean_loss + 1e-3, "{trace:?}");
    }
    assert!(accuracy(&params, &data).unwrap() >= 0.98);
}

#[test]
fn supervised_is_deterministic() {
    let data = easy_examples();
    let cfg = TrainConfig { epochs: 1, ..quick_train() };
    let classes = vec!["small".to_string(), "large".to_string()];
    let bytes = |p: ParameterSet| Checkpoint::new(p, classes.clone()).unwrap().to_bytes();
    let (a, ta) = train_supervised(&data, &tiny_model(), &cfg).unwrap();
    let (b, tb) = train_supervised(&data, &tiny_model(), &cfg).unwrap();
    assert_eq!(ta, tb);
    assert_eq!(bytes(a), bytes(b));
}

#[test]
fn empty_data_rejected() {
    assert!(matches!(
        train_supervised(&[], &tiny_model(), &quick_train()),
        Err(TrainError::Contract(_))
    ));
}

#[test]
fn distill_fixed_point() {
    let data = easy_examples();
    let teacher = init_params::<f32>(&tiny_model(), 3).unwrap();
    let student = init_student_from_teacher(&teacher, 2).unwrap();
    let before = teacher.clone();
    let cfg = TrainConfig {
        epochs: 1,
        alpha: 1.0,
        learning_rate: 0.0,
        ..quick_train()
    };
    let (trained, trace) = distill(&teacher, student, &data, &cfg).unwrap();
    assert_eq!(trace[0].mean_loss, 0.0);
    assert!(trained.max_abs_diff(&teacher) <= 1e-5);
    assert_eq!(teacher, before);
}

#[test]
fn distill_rejects_mismatched_heads() {
    let teacher = init_params::<f32>(&tiny_model(), 3).unwrap();
    let other = ModelConfig { n_classes: 3, ..tiny_model() };
    let student = init_params::<f32>(&other, 3).unwrap();
    assert!(distill(&teacher, student, &easy_examples(), &quick_train()).is_err());
}

#[test]
fn loss_trace_format() {
    let mut out = Vec::new();
    let trace = vec![EpochStats { epoch: 1, mean_loss: 0.5, accuracy: 0.75 }];
    write_loss_trace(&mut out, &trace).unwrap();
    assert_eq!(String::from_utf8(out).unwrap(), "epoch\tmean_loss\taccuracy\n1\t0.500000\t0.750000\n");
}

fn logits(c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-8.0f64..8.0, c)
}

proptest! {
    #[test]
    fn alpha_zero_is_cross_entropy(rows in prop::collection::vec((logits(4), logits(4), 0usize..4), 1..6),
                                   tau in 0.5f64..5.0) {
        let s: Vec<&[f64]> = rows.iter().map(|r| r.0.as_slice()).collect();
        let te: Vec<&[f64]> = rows.iter().map(|r| r.1.as_slice()).collect();
        let labels: Vec<usize> = rows.iter().map(|r| r.2).collect();
        let (s, te) = (t(&s), t(&te));
        prop_assert_eq!(
            distill_loss_value(&s, &te, &labels, 0.0, tau, KlDirection::StudentTeacher).unwrap(),
            ce_loss_value(&s, &labels).unwrap()
        );
    }

    #[test]
    fn distill_loss_nonnegative(a in logits(5), b in logits(5), alpha in 0.0f64..=1.0, tau in 0.5f64..5.0) {
        for dir in [KlDirection::StudentTeacher, KlDirection::TeacherStudent] {
            let v = distill_loss_value(&t(&[&a]), &t(&[&b]), &[0], alpha, tau, dir).unwrap();
            prop_assert!(v >= 0.0);
        }
    }
}
