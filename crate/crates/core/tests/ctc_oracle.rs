use htr_autograd::gradcheck::{central_difference, worst_mismatch};
use htr_convtext::ctc::{ctc_loss_oracle, ctc_nll, greedy_decode, required_frames};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random feasible instance with L ≤ 6, V ≤ 4 and at most 3 labels.
fn instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, usize, Vec<usize>) {
    loop {
        let frames = rng.random_range(1..=6);
        let classes = rng.random_range(2..=4);
        let n = rng.random_range(0..=3);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(1..classes)).collect();
        if required_frames(&labels) > frames {
            continue;
        }
        let logits = (0..frames * classes).map(|_| rng.random_range(-3.0..3.0)).collect();
        return (logits, classes, labels);
    }
}

#[test]
fn forward_recursion_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..300 {
        let (logits, v, labels) = instance(&mut rng);
        let (fast, _) = ctc_nll(&logits, v, &labels).unwrap();
        let slow = ctc_loss_oracle(&logits, v, &labels).unwrap();
        let rel = (fast - slow).abs() / slow.abs().max(1e-300);
        assert!(rel <= 1e-6 || (fast - slow).abs() < 1e-12, "{fast} vs {slow} for {labels:?}");
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let (logits, v, labels) = instance(&mut rng);
        let (_, grad) = ctc_nll(&logits, v, &labels).unwrap();
        let numeric = central_difference(|x| ctc_nll(x, v, &labels).unwrap().0, &logits, 1e-4);
        let worst = worst_mismatch(&grad, &numeric, 1e-8).unwrap();
        assert!(worst.rel_err <= 1e-4, "{worst:?}");
    }
}

#[test]
fn long_sequences_stay_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (frames, classes) = (128, 80);
    let logits: Vec<f64> = (0..frames * classes).map(|_| rng.random_range(-20.0..20.0)).collect();
    let labels: Vec<usize> = (0..60).map(|_| rng.random_range(2..classes)).collect();
    let (loss, grad) = ctc_nll(&logits, classes, &labels).unwrap();
    assert!(loss.is_finite() && grad.iter().all(|g| g.is_finite()));
    // each frame's gradient is softmax minus a distribution, so it sums to zero
    for row in grad.chunks(classes) {
        assert!(row.iter().sum::<f64>().abs() < 1e-9);
    }
}

proptest! {
    #[test]
    fn frame_shift_invariance(seed in any::<u64>(), shift in -5.0f64..5.0, frame in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut logits, v, labels) = instance(&mut rng);
        let (base, _) = ctc_nll(&logits, v, &labels).unwrap();
        let t = frame % (logits.len() / v);
        for x in &mut logits[t * v..(t + 1) * v] {
            *x += shift;
        }
        let (moved, _) = ctc_nll(&logits, v, &labels).unwrap();
        prop_assert!((base - moved).abs() <= 1e-9 * base.abs().max(1.0));
    }

    #[test]
    fn decoded_output_has_no_blanks(logits in prop::collection::vec(-2.0f64..2.0, 4 * 10)) {
        let out = greedy_decode(&logits, 4);
        prop_assert!(out.iter().all(|&k| k != 0));
        prop_assert!(out.len() <= 10);
    }
}
