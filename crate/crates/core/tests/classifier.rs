mod common;

use agcd::classifier::{attention_loss, class_names, cross_entropy_smoothed, final_loss, fuse, fuse_classify, objective, EmotionLabel};
use agcd::tensor::{Graph, Tensor};
use common::{rng, uniform};
use proptest::prelude::*;
use rand::Rng;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), v).unwrap()
}

fn ce(logits: &Tensor<f64>, labels: &[usize], eps: f64) -> f64 {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let out = cross_entropy_smoothed(&mut g, l, labels, eps).unwrap();
    g.value(out).item()
}

#[test]
fn labels_and_names() {
    let names = class_names(7);
    assert_eq!(names, ["angry", "disgust", "fear", "happy", "neutral", "sad", "surprise"]);
    assert_eq!(EmotionLabel::new(3, 7).unwrap().to_string(), "happy");
    assert_eq!(EmotionLabel::new(1, 3).unwrap().name(), "class1");
    assert!(EmotionLabel::new(7, 7).is_err());
}

#[test]
fn zero_head_predicts_uniform() {
    let mut g = Graph::<f64>::new();
    let pf = g.constant(uniform(&mut rng(0), &[3, 4], -2.0, 2.0));
    let pc = g.constant(uniform(&mut rng(1), &[3, 4], -2.0, 2.0));
    let hf = g.constant(uniform(&mut rng(2), &[3], -2.0, 2.0));
    let hc = g.constant(uniform(&mut rng(3), &[3], -2.0, 2.0));
    let w = g.constant(Tensor::zeros([4, 7]));
    let b = g.constant(Tensor::zeros([7]));
    let logits = fuse_classify(&mut g, pf, pc, hf, hc, w, b).unwrap();
    let probs = g.softmax(logits).unwrap();
    assert!(g.value(probs).data().iter().all(|&p| (p - 1.0 / 7.0).abs() < 1e-15));
}

#[test]
fn zero_gates_fuse_to_half_sum() {
    let (a, b) = (uniform::<f64>(&mut rng(4), &[2, 3], -1.0, 1.0), uniform::<f64>(&mut rng(5), &[2, 3], -1.0, 1.0));
    let mut g = Graph::new();
    let (pf, pc) = (g.constant(a.clone()), g.constant(b.clone()));
    let h = g.constant(Tensor::zeros([2]));
    let fused = fuse(&mut g, pf, pc, h, h).unwrap();
    for ((f, x), y) in g.value(fused).data().iter().zip(a.data()).zip(b.data()) {
        assert_eq!(*f, 0.5 * x + 0.5 * y);
    }
}

#[test]
fn two_class_fusion_scalar_evaluation() {
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let (phi_f, phi_c, hf, hc) = ([0.5, -1.0], [2.0, 0.25], 0.4, -1.2);
    let w = [[1.0, -0.5], [0.3, 2.0]];
    let bias = [0.1, -0.2];
    let fused = [sig(hf) * phi_f[0] + sig(hc) * phi_c[0], sig(hf) * phi_f[1] + sig(hc) * phi_c[1]];
    let z: Vec<f64> = (0..2).map(|k| fused[0] * w[0][k] + fused[1] * w[1][k] + bias[k]).collect();
    let m = z[0].max(z[1]);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let expected = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];

    let mut g = Graph::new();
    let pf = g.constant(t(&[1, 2], &phi_f));
    let pc = g.constant(t(&[1, 2], &phi_c));
    let h1 = g.constant(t(&[1], &[hf]));
    let h2 = g.constant(t(&[1], &[hc]));
    let wv = g.constant(t(&[2, 2], &[w[0][0], w[0][1], w[1][0], w[1][1]]));
    let bv = g.constant(t(&[2], &bias));
    let logits = fuse_classify(&mut g, pf, pc, h1, h2, wv, bv).unwrap();
    let probs = g.softmax(logits).unwrap();
    for (p, e) in g.value(probs).data().iter().zip(expected) {
        assert!((p - e).abs() < 1e-15);
    }
}

#[test]
fn fusion_rejects_mismatched_dims() {
    let mut g = Graph::<f64>::new();
    let pf = g.constant(Tensor::zeros([1, 2]));
    let pc = g.constant(Tensor::zeros([1, 3]));
    let h = g.constant(Tensor::zeros([1]));
    assert!(fuse(&mut g, pf, pc, h, h).is_err());
}

#[test]
fn uniform_prediction_costs_log_k() {
    for k in [2usize, 3, 7] {
        for eps in [0.0, 0.1, 0.2, 0.9] {
            let l = ce(&Tensor::full([3, k], 0.7), &[0, k - 1, 1], eps);
            assert!((l - (k as f64).ln()).abs() < 1e-14, "k={k} eps={eps}: {l}");
        }
    }
    assert!((ce(&Tensor::zeros([1, 7]), &[4], 0.2) - 1.945_910_149_055_313).abs() < 1e-12);
}

#[test]
fn confident_correct_prediction_without_smoothing() {
    // p_y = 1 - 1e-7 on two classes.
    let logit = ((1.0 - 1e-7) / 1e-7f64).ln();
    let l = ce(&t(&[1, 2], &[logit, 0.0]), &[0], 0.0);
    assert!(l <= 1e-6 && l >= 0.0, "{l}");
}

#[test]
fn two_class_smoothed_value() {
    let l = ce(&t(&[1, 2], &[0.8f64.ln(), 0.2f64.ln()]), &[0], 0.2);
    let expected = -(0.9 * 0.8f64.ln() + 0.1 * 0.2f64.ln());
    assert!((l - expected).abs() < 1e-15);
    assert!((l - 0.3618).abs() < 1e-4);
}

#[test]
fn invalid_smoothing_and_labels_are_rejected() {
    let mut g = Graph::<f64>::new();
    let l = g.constant(Tensor::zeros([1, 3]));
    assert!(cross_entropy_smoothed(&mut g, l, &[0], 1.0).is_err());
    assert!(cross_entropy_smoothed(&mut g, l, &[0], -0.1).is_err());
    assert!(cross_entropy_smoothed(&mut g, l, &[3], 0.1).is_err());
    assert!(cross_entropy_smoothed(&mut g, l, &[0, 1], 0.1).is_err());
}

fn att(hf: &[f64], hc: &[f64]) -> f64 {
    let mut g = Graph::new();
    let (a, b) = (g.constant(t(&[hf.len()], hf)), g.constant(t(&[hc.len()], hc)));
    let out = attention_loss(&mut g, a, b).unwrap();
    g.value(out).item()
}

#[test]
fn attention_loss_examples() {
    assert_eq!(att(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    assert_eq!(att(&[1.0, -1.0], &[0.0, 2.0]), 2.0);
    let mut g = Graph::<f64>::new();
    let (a, b) = (g.constant(Tensor::zeros([2])), g.constant(Tensor::zeros([3])));
    assert!(attention_loss(&mut g, a, b).is_err());
}

#[test]
fn final_loss_examples() {
    assert_eq!(final_loss(0.0, 0.0).unwrap().total, 0.0);
    let p = final_loss(1.5, 0.25).unwrap();
    assert_eq!((p.ce, p.att, p.total), (1.5, 0.25, 1.75));
    assert!(final_loss(f64::NAN, 0.0).is_err());
    assert!(final_loss(1.0, f64::INFINITY).is_err());

    let mut g = Graph::<f64>::new();
    let logits = g.constant(uniform(&mut rng(6), &[2, 3], -1.0, 1.0));
    let h = g.constant(Tensor::zeros([2]));
    let (total, parts) = objective(&mut g, logits, &[0, 2], 0.2, h, h).unwrap();
    assert_eq!(parts.att, 0.0);
    assert_eq!(parts.total, parts.ce);
    assert_eq!(g.value(total).item(), parts.ce);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn probabilities_sum_to_one(seed in any::<u64>(), k in 2usize..9, scale in 0.1f64..50.0) {
        let mut g = Graph::new();
        let l = g.constant(uniform(&mut rng(seed), &[4, k], -scale, scale));
        let p = g.softmax(l).unwrap();
        for row in g.value(p).data().chunks(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn smoothed_loss_bounded_below_by_target_entropy(seed in any::<u64>(), k in 2usize..9, eps in 0.0f64..0.99) {
        let mut r = rng(seed);
        let y = r.random_range(0..k);
        let l = ce(&uniform(&mut r, &[1, k], -5.0, 5.0), &[y], eps);
        let (on, off) = (1.0 - eps + eps / k as f64, eps / k as f64);
        let xlogx = |q: f64| if q > 0.0 { q * q.ln() } else { 0.0 };
        let entropy = -(xlogx(on) + (k - 1) as f64 * xlogx(off));
        prop_assert!(l >= entropy - 1e-12);
    }

    #[test]
    fn attention_loss_is_nonnegative_and_zero_only_at_zero(hf in prop::collection::vec(-3.0f64..3.0, 1..6), seed in any::<u64>()) {
        let hc: Vec<f64> = uniform::<f64>(&mut rng(seed), &[hf.len()], -3.0, 3.0).data().to_vec();
        let v = att(&hf, &hc);
        prop_assert!(v >= 0.0);
        prop_assert_eq!(v == 0.0, hf.iter().chain(&hc).all(|&x| x == 0.0));
        // Convexity along the segment to the origin.
        let half: Vec<f64> = hf.iter().map(|x| 0.5 * x).collect();
        let halfc: Vec<f64> = hc.iter().map(|x| 0.5 * x).collect();
        prop_assert!(att(&half, &halfc) <= 0.5 * v + 1e-12);
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for check in agcd::checks::model().unwrap() {
        assert!(check.passed(), "{check}");
    }
}
