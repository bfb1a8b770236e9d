use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use timemil::entropy::{
    block_entropy, entropy_bits, mean_by_rate, prop2_distributions, prop2_example, shuffle_experiment, shuffle_fraction,
    theorem3_check, write_shuffle_csv, Conditioning, DiscreteJoint, SHUFFLE_RATES,
};

fn chars(s: &str) -> Vec<char> {
    s.chars().collect()
}

#[test]
fn block_entropy_examples() {
    // {AA: 2/3, AB: 1/3} and {AB: 2/3, BA: 1/3}
    let third = -(2.0 / 3.0f64) * (2.0 / 3.0f64).log2() - (1.0 / 3.0f64) * (1.0 / 3.0f64).log2();
    assert_abs_diff_eq!(third, 0.9183, epsilon = 5e-5);
    assert_abs_diff_eq!(block_entropy(&chars("AAAB"), 2).unwrap(), third, epsilon = 1e-12);
    assert_abs_diff_eq!(block_entropy(&chars("ABAB"), 2).unwrap(), third, epsilon = 1e-12);
    assert_eq!(block_entropy(&chars("ZZZZZZ"), 3).unwrap(), 0.0);
    assert_abs_diff_eq!(block_entropy(&chars("ABCD"), 1).unwrap(), 2.0, epsilon = 1e-12);
    assert!(block_entropy(&chars("AB"), 3).is_err());
    assert!(block_entropy(&chars("AB"), 0).is_err());
}

#[test]
fn ordered_bernoulli_example() {
    let (o, s) = prop2_distributions();
    for d in [o, s] {
        assert_abs_diff_eq!(d.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(d.iter().all(|&p| p >= 0.0));
    }
    let (ho, hs) = prop2_example();
    assert_abs_diff_eq!(ho, 0.70, epsilon = 0.005);
    assert_abs_diff_eq!(hs, 1.16, epsilon = 0.005);
    assert!(hs > ho);
}

#[test]
fn full_shuffle_is_a_permutation() {
    let text = chars("the quick brown fox jumps over the lazy dog");
    let s = shuffle_fraction(&text, 1.0, 3).unwrap();
    let (mut a, mut b) = (text.clone(), s.clone());
    a.sort_unstable();
    b.sort_unstable();
    assert_eq!(a, b);
    assert_ne!(s, text);
    assert_eq!(shuffle_fraction(&text, 0.0, 3).unwrap(), text);
    assert_eq!(shuffle_fraction(&text, 1.0, 3).unwrap(), s);
    assert!(shuffle_fraction(&text, 1.5, 0).is_err());
}

#[test]
fn partial_shuffle_touches_at_most_the_chosen_positions() {
    let text: Vec<u32> = (0..200).collect();
    let s = shuffle_fraction(&text, 0.25, 9).unwrap();
    let moved = s.iter().zip(&text).filter(|(a, b)| a != b).count();
    assert!(moved <= 50 && moved > 30, "moved {moved}");
}

#[test]
fn shuffle_raises_block_entropy_on_text() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/sonnets.txt")).unwrap();
    let rows = shuffle_experiment(&text, &SHUFFLE_RATES, 3, 2).unwrap();
    assert_eq!(rows.len(), 15);
    let means = mean_by_rate(&rows);
    assert_eq!(means.len(), 5);
    assert!(means.windows(2).all(|w| w[1].1 > w[0].1), "{means:?}");

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("shuffle.csv");
    write_shuffle_csv(&rows, &p).unwrap();
    let out = std::fs::read_to_string(&p).unwrap();
    assert_eq!(out.lines().next().unwrap(), "rate,seed,block_entropy");
    assert_eq!(out.lines().count(), 16);
}

#[test]
fn conditional_entropy_examples() {
    // two independent fair bits, independent of a fair label
    let indep = DiscreteJoint::new(vec![2, 2], 2, vec![0.125; 8]).unwrap();
    assert_abs_diff_eq!(indep.conditional_entropy(Conditioning::Joint), 2.0, epsilon = 1e-12);
    assert_abs_diff_eq!(indep.conditional_entropy(Conditioning::Factorized), 2.0, epsilon = 1e-12);

    // second bit copies the first: joint keeps 1 bit, factorized counts 2
    let mut probs = vec![0.0; 8];
    for a in 0..2 {
        for y in 0..2 {
            probs[(a * 2 + a) * 2 + y] = 0.25;
        }
    }
    let copy = DiscreteJoint::new(vec![2, 2], 2, probs).unwrap();
    assert_abs_diff_eq!(copy.conditional_entropy(Conditioning::Joint), 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(copy.conditional_entropy(Conditioning::Factorized), 2.0, epsilon = 1e-12);

    // the variable equals the label
    let det = DiscreteJoint::new(vec![2], 2, vec![0.5, 0.0, 0.0, 0.5]).unwrap();
    assert_eq!(det.conditional_entropy(Conditioning::Joint), 0.0);

    assert!(DiscreteJoint::new(vec![2], 2, vec![0.5, 0.5, 0.5, 0.5]).is_err());
    assert!(DiscreteJoint::new(vec![2], 2, vec![1.0]).is_err());
    assert!(DiscreteJoint::new(vec![], 2, vec![0.5, 0.5]).is_err());
}

#[test]
fn conditioning_check_has_no_violations() {
    let r = theorem3_check(0, 300, 4, 3).unwrap();
    assert_eq!(r.trials, 300);
    assert!(r.violations.is_empty());
    assert!(r.min_gap >= -1e-9);
    assert_eq!(theorem3_check(0, 300, 4, 3).unwrap(), r);
    assert!(theorem3_check(0, 0, 4, 3).is_err());
}

proptest! {
    #[test]
    fn unigram_entropy_survives_shuffling(text in "[a-e ]{2,80}", rate in 0.0f64..=1.0, seed in any::<u64>()) {
        let c = chars(&text);
        let s = shuffle_fraction(&c, rate, seed).unwrap();
        let a = block_entropy(&c, 1).unwrap();
        let b = block_entropy(&s, 1).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn block_entropy_is_bounded(text in "[a-d]{3,60}", n in 1usize..3) {
        let c = chars(&text);
        let h = block_entropy(&c, n).unwrap();
        let windows = (c.len() - n + 1) as f64;
        prop_assert!(h >= 0.0 && h <= windows.log2() + 1e-12);
        prop_assert!(h <= n as f64 * 2.0 + 1e-12);
    }

    #[test]
    fn conditional_entropy_bounds(seed in any::<u64>(), vars in 1usize..4, a in 2usize..4, l in 2usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let j = DiscreteJoint::random(vec![a; vars], l, &mut rng);
        let joint = j.conditional_entropy(Conditioning::Joint);
        let fact = j.conditional_entropy(Conditioning::Factorized);
        prop_assert!(joint >= -1e-12);
        prop_assert!(joint <= fact + 1e-9);
        prop_assert!(fact <= vars as f64 * (a as f64).log2() + 1e-9);
        prop_assert!(entropy_bits(&j.probs) >= joint - 1e-12);
    }
}
