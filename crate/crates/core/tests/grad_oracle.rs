//! Checks analytic input gradients against central finite differences.
//! The numeric side only ever evaluates the forward pass, so the two
//! computations share no code beyond the network itself.

use rand::Rng;
use xgap_core::attribution::head_value;
use xgap_core::model::{Head, Network};
use xgap_core::rng::derive_rng;
use xgap_core::tensor::Tensor;

const FD_STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-6;
/// Below this magnitude both sides count as zero and the ratio is skipped.
const ZERO_GUARD: f64 = 1e-7;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < ZERO_GUARD {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn check_instance(seed: u64, head: Head) -> f64 {
    let mut rng = derive_rng(seed, "fd-instance");
    let input_dim = rng.random_range(2..=64);
    let hidden = rng.random_range(3..=24);
    let classes = rng.random_range(2..=6);
    let net = Network::new(input_dim, &[hidden], classes, seed).unwrap();
    let x = Tensor::new(
        vec![input_dim],
        (0..input_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let class = rng.random_range(0..classes);

    let analytic = net.grad_input(&x, class, head).unwrap();
    let mut worst = 0.0f64;
    for i in 0..input_dim {
        let mut plus = x.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= FD_STEP;
        let numeric = (head_value(&net, &plus, class, head).unwrap()
            - head_value(&net, &minus, class, head).unwrap())
            / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    worst
}

fn check_head(head: Head) {
    let mut worst = 0.0f64;
    for instance in 0..20 {
        let err = check_instance(1000 + instance, head);
        assert!(
            err <= REL_TOL,
            "{head:?} instance {instance}: relative error {err:.3e} exceeds {REL_TOL:.0e}"
        );
        worst = worst.max(err);
    }
    println!("{head:?}: worst relative error {worst:.3e} over 20 instances");
}

#[test]
fn loss_head_gradients_match_finite_differences() {
    check_head(Head::Loss);
}

#[test]
fn logit_head_gradients_match_finite_differences() {
    check_head(Head::Logit);
}

#[test]
fn probability_head_gradients_match_finite_differences() {
    check_head(Head::Probability);
}

#[test]
fn logistic_detector_gradient_matches_finite_differences() {
    // The detector's loss gradient, probed through training: one
    // gradient-descent epoch from the origin moves parameters by exactly
    // -lr * grad, so the step reveals the analytic gradient. The numeric
    // side recomputes the penalized loss from scratch.
    use xgap_core::detector::{logreg_train, LogisticParams};

    let mut rng = derive_rng(77, "logreg-fd");
    let n = 12;
    let d = 3;
    let features: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let l2 = 0.01;
    let lr = 0.25;

    let params = LogisticParams {
        learning_rate: lr,
        epochs: 1,
        l2,
    };
    let (model, _) = logreg_train(&features, &labels, &params, 0).unwrap();
    let xgap_core::detector::DetectorModel::Logistic(m) = &model else {
        panic!("expected logistic model");
    };

    // Standardize exactly as training did, then measure the loss surface
    // at the origin numerically.
    let standardized: Vec<Vec<f64>> = features
        .iter()
        .map(|row| {
            row.iter()
                .zip(m.feature_mean.iter().zip(&m.feature_std))
                .map(|(&v, (&mean, &std))| (v - mean) / std)
                .collect()
        })
        .collect();
    let loss_at = |w: &[f64], b: f64| -> f64 {
        let mut total = 0.0;
        for (row, &y) in standardized.iter().zip(&labels) {
            let z: f64 = b + row.iter().zip(w).map(|(&x, &wv)| x * wv).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            let y = y as f64;
            total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        total / n as f64 + l2 * w.iter().map(|v| v * v).sum::<f64>()
    };

    let mut worst = 0.0f64;
    for i in 0..d {
        let analytic = -m.weights[i] / lr;
        let mut wp = vec![0.0; d];
        wp[i] = FD_STEP;
        let mut wm = vec![0.0; d];
        wm[i] = -FD_STEP;
        let numeric = (loss_at(&wp, 0.0) - loss_at(&wm, 0.0)) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic, numeric));
    }
    let analytic_bias = -m.bias / lr;
    let numeric_bias = (loss_at(&vec![0.0; d], FD_STEP) - loss_at(&vec![0.0; d], -FD_STEP)) / (2.0 * FD_STEP);
    worst = worst.max(relative_error(analytic_bias, numeric_bias));
    assert!(worst <= 1e-5, "worst relative error {worst:.3e}");
    println!("logistic gradient: worst relative error {worst:.3e}");
}
