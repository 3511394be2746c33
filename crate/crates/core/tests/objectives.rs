use cocktail::classifier::PredictionMatrix;
use cocktail::objectives::*;
use cocktail::selfcheck::{brute_force_pit, dominance, pit_oracle};
use cocktail_tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn slices(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

fn matrix(columns: &[&[f64]]) -> PredictionMatrix {
    let s = columns[0].len();
    PredictionMatrix {
        values: (0..s).map(|i| columns.iter().map(|c| c[i]).collect()).collect(),
    }
}

#[test]
fn pit_of_identical_sets_is_zero_with_identity() {
    let refs = vec![vec![0.5, 1.0, 2.0], vec![0.0, 3.0, 1.0]];
    let r = pit_mse(&slices(&refs), &slices(&refs)).unwrap();
    assert_eq!(r.loss, 0.0);
    assert_eq!(r.permutation, vec![0, 1]);
}

#[test]
fn pit_recovers_swapped_channels() {
    let refs = vec![vec![0.5, 1.0, 2.0], vec![0.0, 3.0, 1.0]];
    let est = vec![refs[1].clone(), refs[0].clone()];
    let r = pit_mse(&slices(&est), &slices(&refs)).unwrap();
    assert_eq!(r.loss, 0.0);
    assert_eq!(r.permutation, vec![1, 0]);
}

#[test]
fn pit_matches_brute_force_on_small_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> { (0..2).map(|_| (0..9).map(|_| rng.gen()).collect()).collect() };
    let (est, refs) = (draw(&mut rng), draw(&mut rng));
    let r = pit_mse(&slices(&est), &slices(&refs)).unwrap();
    let (loss, perm) = brute_force_pit(&slices(&est), &slices(&refs));
    assert_eq!(r.loss.to_bits(), loss.to_bits());
    assert_eq!(r.permutation, perm);
}

#[test]
fn pit_oracle_suite_has_no_mismatches() {
    let (checked, mismatches) = pit_oracle(11, 100).unwrap();
    assert_eq!(checked, 300);
    assert_eq!(mismatches, 0);
}

#[test]
fn pit_rejects_count_mismatch_and_too_many_sources() {
    let a = vec![vec![1.0]; 2];
    let b = vec![vec![1.0]; 3];
    assert!(pit_mse(&slices(&a), &slices(&b)).is_err());
    let five = vec![vec![1.0]; 5];
    assert!(pit_mse(&slices(&five), &slices(&five)).is_err());
}

#[test]
fn pit_tape_gradient_flows_only_through_selected_pairs() {
    let mut tape = Tape::<f64>::new();
    // channel 1 matches reference 0 exactly
    let est = tape.variable(Tensor::from_f64(vec![2, 1, 2], &[5.0, 5.0, 1.0, 2.0]).unwrap());
    let refs = tape.constant(Tensor::from_f64(vec![2, 1, 2], &[1.0, 2.0, 4.0, 4.0]).unwrap());
    let (loss, result) = pit_mse_tape(&mut tape, est, refs).unwrap();
    assert_eq!(result.permutation, vec![1, 0]);
    assert_eq!(tape.value(loss).item().unwrap(), 0.5);
    let g = tape.backward(loss).unwrap();
    // d/d est[0] = 2 (est0 - ref1) / 4, channel 1 is exact
    assert_eq!(g.get(est).unwrap().data(), &[0.5, 0.5, 0.0, 0.0]);
}

#[test]
fn maxpool_cce_examples() {
    let one_sure = matrix(&[&[0.0, 1.0, 0.0], &[0.3, 0.3, 0.4]]);
    assert_eq!(maxpool_cce(&one_sure, &[0.0, 1.0, 0.0]).unwrap(), 0.0);

    let halves = matrix(&[&[0.5, 0.5, 0.0, 0.0], &[0.0, 0.5, 0.5, 0.0]]);
    let two = maxpool_cce(&halves, &[1.0, 0.0, 1.0, 0.0]).unwrap();
    assert!((two - 2.0 * 2f64.ln()).abs() < 1e-15);
    assert!((two - 1.386).abs() < 1e-3);

    let swapped = matrix(&[&[0.0, 0.5, 0.5, 0.0], &[0.5, 0.5, 0.0, 0.0]]);
    assert_eq!(maxpool_cce(&swapped, &[1.0, 0.0, 1.0, 0.0]).unwrap(), two);
}

#[test]
fn maxpool_cce_rejects_empty_targets() {
    let m = matrix(&[&[0.5, 0.5]]);
    assert!(maxpool_cce(&m, &[0.0, 0.0]).is_err());
}

#[test]
fn maxpool_cce_clamps_zero_probability() {
    let m = matrix(&[&[1.0, 0.0]]);
    let loss = maxpool_cce(&m, &[0.0, 1.0]).unwrap();
    assert!((loss + LOG_FLOOR.ln()).abs() < 1e-12);
}

#[test]
fn maxpool_gradient_is_sparse() {
    let mut tape = Tape::<f64>::new();
    // [C=2, S=3]
    let p = tape.variable(Tensor::from_f64(vec![2, 3], &[0.2, 0.5, 0.3, 0.6, 0.1, 0.3]).unwrap());
    let loss = maxpool_cce_tape(&mut tape, p, &[1.0, 1.0, 0.0]).unwrap();
    let g = tape.backward(loss).unwrap();
    let g = g.get(p).unwrap().data().to_vec();
    // speaker 0 argmax channel 1, speaker 1 argmax channel 0, speaker 2 not a target
    assert_eq!(g, vec![0.0, -1.0 / 0.5, 0.0, -1.0 / 0.6, 0.0, 0.0]);
}

#[test]
fn dominance_holds_on_random_triples() {
    let (checked, violations) = dominance(5, 200, &[4, 8, 20]).unwrap();
    assert_eq!(checked, 600);
    assert_eq!(violations, 0);
}

#[test]
fn joint_loss_examples() {
    assert_eq!(joint_loss(0.19, 0.0, 20.0).unwrap(), 3.8);
    assert_eq!(20.0 * 0.19, 3.8);
    assert_eq!(joint_loss(0.5, 0.0, 300.0).unwrap(), 150.0);
    assert_eq!(joint_loss(0.25, 1.5, 20.0).unwrap(), 6.5);
    assert!(joint_loss(0.1, 0.1, 0.0).is_err());
    assert!(joint_loss(0.1, 0.1, -1.0).is_err());
}

#[test]
fn mn_accuracy_examples() {
    let both = vec![0.9, 0.8, 0.1, 0.05];
    let one = vec![0.9, 0.1, 0.8, 0.05];
    let targets = vec![vec![0, 1]];
    assert_eq!(mn_accuracy(&[both.clone()], &targets, 1, 2).unwrap(), 100.0);
    assert_eq!(mn_accuracy(&[both], &targets, 2, 2).unwrap(), 100.0);
    assert_eq!(mn_accuracy(&[one.clone()], &targets, 1, 2).unwrap(), 100.0);
    assert_eq!(mn_accuracy(&[one], &targets, 2, 2).unwrap(), 0.0);
    assert!(mn_accuracy(&[vec![0.5, 0.5]], &targets, 3, 2).is_err());
}

#[test]
fn top_n_breaks_ties_toward_lower_index() {
    assert_eq!(top_n(&[0.2, 0.4, 0.4, 0.1], 2), vec![1, 2]);
    assert_eq!(top_n(&[0.3, 0.3, 0.3], 2), vec![0, 1]);
}

proptest! {
    #[test]
    fn pit_is_invariant_to_estimate_order(seed in any::<u64>(), n in 2usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let est: Vec<Vec<f64>> = (0..n).map(|_| (0..6).map(|_| rng.gen()).collect()).collect();
        let refs: Vec<Vec<f64>> = (0..n).map(|_| (0..6).map(|_| rng.gen()).collect()).collect();
        let base = pit_mse(&slices(&est), &slices(&refs)).unwrap();
        let mut shuffled = est.clone();
        shuffled.rotate_left(1);
        let other = pit_mse(&slices(&shuffled), &slices(&refs)).unwrap();
        prop_assert!((base.loss - other.loss).abs() <= 1e-12 * base.loss.max(1.0));
        let identity: f64 = (0..n).map(|i| squared_error(&est[i], &refs[i])).sum::<f64>() / (6 * n) as f64;
        prop_assert!(base.loss <= identity);
    }

    #[test]
    fn accuracy_is_monotone_in_m(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pooled: Vec<Vec<f64>> = (0..30).map(|_| (0..8).map(|_| rng.gen()).collect()).collect();
        let targets: Vec<Vec<usize>> = (0..30).map(|_| {
            let a = rng.gen_range(0..8);
            let mut b = rng.gen_range(0..7);
            if b >= a { b += 1; }
            let c = (0..8).find(|x| *x != a && *x != b).unwrap();
            vec![a, b, c]
        }).collect();
        let acc: Vec<f64> = (1..=3).map(|m| mn_accuracy(&pooled, &targets, m, 3).unwrap()).collect();
        prop_assert!(acc[0] >= acc[1] && acc[1] >= acc[2]);
        prop_assert!(acc.iter().all(|a| (0.0..=100.0).contains(a)));
    }
}
