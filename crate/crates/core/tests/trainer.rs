use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use timemil::synthetic::{gen_dataset, to_bags};
use timemil::trainer::{
    adamw_step, compute_metrics, mask_windows, ovr_bce_loss, predict, roc_auc, split_validation, window_mask_augment,
    write_metrics_csv, write_validation_csv, AdamParams, AdamState, Lookahead, TrainConfig, Trainer, METRICS_HEADER,
};
use timemil::{Bag, Error, RunConfig, Tensor, TimeMil};

const DEFAULTS: AdamParams = AdamParams {
    lr: 1e-3,
    weight_decay: 1e-4,
    beta1: 0.9,
    beta2: 0.999,
    eps: 1e-8,
};

fn with_grad(data: &[f64], grad: &[f64]) -> Tensor<f64> {
    let mut t = Tensor::new(&[data.len()], data.to_vec()).unwrap().with_grad();
    t.grad_mut().unwrap().copy_from_slice(grad);
    t
}

#[test]
fn adamw_first_steps_by_hand() {
    let mut p = vec![with_grad(&[1.0], &[1.0])];
    let mut st = AdamState::new(&p);
    adamw_step(&mut p, &mut st, &DEFAULTS);
    // m̂ = v̂ = 1 after bias correction
    let w1 = 1.0 * (1.0 - 1e-7) - 1e-3 / (1.0 + 1e-8);
    assert_abs_diff_eq!(p[0].data()[0], w1, epsilon = 1e-15);
    assert_abs_diff_eq!(w1, 0.99899990001, epsilon = 1e-12);
    adamw_step(&mut p, &mut st, &DEFAULTS);
    let w2 = w1 * (1.0 - 1e-7) - 1e-3 / (1.0 + 1e-8);
    assert_abs_diff_eq!(p[0].data()[0], w2, epsilon = 1e-15);
    assert_eq!(st.steps(), 2);
}

#[test]
fn adamw_zero_gradient_only_decays() {
    let mut p = vec![with_grad(&[2.0, -4.0], &[0.0, 0.0])];
    let mut st = AdamState::new(&p);
    adamw_step(&mut p, &mut st, &DEFAULTS);
    assert_abs_diff_eq!(p[0].data()[0], 2.0 * (1.0 - 1e-7), epsilon = 1e-15);
    assert_abs_diff_eq!(p[0].data()[1], -4.0 * (1.0 - 1e-7), epsilon = 1e-15);

    let hp = AdamParams {
        weight_decay: 0.0,
        ..DEFAULTS
    };
    let mut p = vec![with_grad(&[2.0], &[0.0])];
    let mut st = AdamState::new(&p);
    adamw_step(&mut p, &mut st, &hp);
    assert_eq!(p[0].data(), &[2.0]);

    let mut frozen = vec![Tensor::new(&[1], vec![3.0]).unwrap()];
    let mut st = AdamState::new(&frozen);
    adamw_step(&mut frozen, &mut st, &DEFAULTS);
    assert_eq!(frozen[0].data(), &[3.0]);
}

#[test]
fn lookahead_examples() {
    let mut p = vec![Tensor::new(&[2], vec![0.0, 10.0]).unwrap()];
    let mut la = Lookahead::new(&p, 3, 0.5);
    p[0].data_mut().copy_from_slice(&[4.0, 2.0]);
    assert!(!la.step(&mut p));
    assert!(!la.step(&mut p));
    assert_eq!(p[0].data(), &[4.0, 2.0]);
    assert_eq!(la.slow()[0], vec![0.0, 10.0]);
    assert!(la.step(&mut p));
    assert_eq!(p[0].data(), &[2.0, 6.0]);
    assert_eq!(la.slow()[0], vec![2.0, 6.0]);

    let mut p = vec![Tensor::new(&[1], vec![0.1f32]).unwrap()];
    let mut la = Lookahead::new(&p, 1, 1.0);
    p[0].data_mut()[0] = 0.7;
    assert!(la.step(&mut p));
    assert_eq!(p[0].data()[0].to_bits(), 0.7f32.to_bits());
    assert_eq!(la.slow()[0][0].to_bits(), 0.7f32.to_bits());
}

fn ramp_bag(t: usize, d: usize) -> Bag {
    Bag::new("r", (0..t * d).map(|i| 100.0 + i as f64).collect(), t, d, 0).unwrap()
}

#[test]
fn masking_examples() {
    let bag = ramp_bag(120, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = window_mask_augment(&bag, 0.0, &mut rng);
    assert_eq!(out.values, bag.values);
    assert!(out.windows.is_empty() && !out.skipped);

    let out = window_mask_augment(&bag, 0.5, &mut rng);
    assert_eq!(out.windows.len(), 5);
    let changed = out.values.iter().zip(&bag.values).filter(|(a, b)| a != b).count();
    assert_eq!(changed, 60);
    let bounds = mask_windows(120);
    for (i, &(s, e)) in bounds.iter().enumerate() {
        let hit = out.windows.contains(&i);
        assert!((s..e).all(|k| (out.values[k] != bag.values[k]) == hit));
    }

    let short = ramp_bag(9, 2);
    let out = window_mask_augment(&short, 0.5, &mut rng);
    assert!(out.skipped);
    assert_eq!(out.values, short.values);
}

#[test]
fn mask_windows_cover_the_series() {
    let w = mask_windows(125);
    assert_eq!(w.len(), 10);
    assert_eq!(w[0], (0, 12));
    assert_eq!(w[9], (108, 125));
    assert!(w.windows(2).all(|p| p[0].1 == p[1].0));
}

#[test]
fn mask_noise_is_standard_normal() {
    let bag = ramp_bag(100, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut noise = Vec::new();
    for _ in 0..200 {
        let out = window_mask_augment(&bag, 0.5, &mut rng);
        noise.extend(out.values.iter().zip(&bag.values).filter(|(a, b)| a != b).map(|(a, _)| *a));
    }
    let n = noise.len() as f64;
    let mean = noise.iter().sum::<f64>() / n;
    let var = noise.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 0.1, "mean {mean}");
    assert!((var - 1.0).abs() < 0.1, "variance {var}");
}

#[test]
fn loss_examples() {
    assert!(ovr_bce_loss(&[20.0, -20.0], 0).unwrap() < 1e-6);
    assert_abs_diff_eq!(ovr_bce_loss(&[0.0, 0.0], 1).unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);
    assert_abs_diff_eq!(ovr_bce_loss(&[-20.0, 20.0], 0).unwrap(), 20.0, epsilon = 1e-6);
    assert!(ovr_bce_loss(&[1000.0, -1000.0], 1).unwrap().is_finite());
    assert!(matches!(ovr_bce_loss(&[0.0], 0), Err(Error::Usage(_))));
    assert!(ovr_bce_loss(&[0.0, 1.0], 2).is_err());
}

#[test]
fn predict_examples() {
    assert_eq!(predict(&[0.1, 2.0, -1.0]), 1);
    assert_eq!(predict(&[3.0, 3.0, 1.0]), 0);
    assert_eq!(predict(&[-5.0, -2.0]), 1);
}

#[test]
fn metrics_examples() {
    let perfect = compute_metrics(&[vec![2.0, -2.0], vec![-2.0, 2.0]], &[0, 1], 2).unwrap();
    assert_eq!(perfect.accuracy, 1.0);
    assert_eq!(perfect.macro_f1, 1.0);
    assert_eq!(perfect.auc_roc, 1.0);

    let constant = compute_metrics(&vec![vec![1.0, 0.0]; 4], &[0, 0, 1, 1], 2).unwrap();
    assert_eq!(constant.accuracy, 0.5);
    assert_eq!(constant.auc_roc, 0.5);

    // true 0 0 1 1 2 2, predicted 0 1 1 1 2 0
    let logits: Vec<Vec<f64>> = [0, 1, 1, 1, 2, 0]
        .iter()
        .map(|&p| (0..3).map(|c| if c == p { 1.0 } else { 0.0 }).collect())
        .collect();
    let m = compute_metrics(&logits, &[0, 0, 1, 1, 2, 2], 3).unwrap();
    assert_abs_diff_eq!(m.accuracy, 4.0 / 6.0, epsilon = 1e-12);
    // per class (p, r, f1): (1/2, 1/2, 1/2), (2/3, 1, 4/5), (1, 1/2, 2/3)
    assert_abs_diff_eq!(m.macro_precision, (0.5 + 2.0 / 3.0 + 1.0) / 3.0, epsilon = 1e-12);
    assert_abs_diff_eq!(m.macro_recall, (0.5 + 1.0 + 0.5) / 3.0, epsilon = 1e-12);
    assert_abs_diff_eq!(m.macro_f1, (0.5 + 0.8 + 2.0 / 3.0) / 3.0, epsilon = 1e-12);
    assert!(m.skipped_classes.is_empty());

    let m = compute_metrics(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]], &[0, 1], 3).unwrap();
    assert_eq!(m.skipped_classes, vec![2]);
    assert_eq!(m.macro_f1, 1.0);

    assert!(compute_metrics(&[vec![1.0, 0.0]], &[0, 1], 2).is_err());
    assert!(compute_metrics(&[vec![1.0]], &[0], 2).is_err());
}

#[test]
fn auc_with_ties_by_hand() {
    // pairs (pos, neg): 0.9>0.1, 0.9>0.5, 0.5=0.5 counts one half
    let auc = roc_auc(&[0.9, 0.5, 0.5, 0.1], &[true, true, false, false]).unwrap();
    assert_abs_diff_eq!(auc, 0.875, epsilon = 1e-12);
    assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_none());
}

fn small_run(seed: u64, epochs: usize) -> RunConfig {
    RunConfig {
        output_dim: 8,
        bottleneck_dim: 4,
        kernel_sizes: vec![3, 5, 9],
        d_model: 8,
        num_heads: 2,
        batch_size: 8,
        epochs,
        mask_p_choices: vec![0.0],
        learning_rate: 3e-3,
        seed,
        ..RunConfig::default()
    }
}

fn tiny_bags(n: usize, seed: u64) -> Vec<Bag> {
    let half = n / 2;
    let data = gen_dataset(half, n - half, seed);
    to_bags(&data, "b")
        .into_iter()
        .map(|b| {
            // first 60 steps keep the pulse region short and the test fast
            let t = 60;
            let mut v = b.values[..t * b.d].to_vec();
            if b.label == 1 {
                v[10 * b.d] += 4.0;
            }
            Bag::new(b.id, v, t, b.d, b.label).unwrap()
        })
        .collect()
}

#[test]
fn loss_decreases_on_a_fixed_batch() {
    let bags = tiny_bags(8, 3);
    let model = TimeMil::<f32>::new(small_run(0, 1), 1, 2).unwrap();
    let mut tr = Trainer::from_run(model).unwrap();
    let mut losses = Vec::new();
    for step in 0..50 {
        // epochs past the warm-up phase
        losses.push(tr.train_epoch(&bags, 100 + step).unwrap().loss);
    }
    let first = losses[..5].iter().sum::<f64>() / 5.0;
    let last = losses[45..].iter().sum::<f64>() / 5.0;
    assert!(last < first * 0.8, "loss {first} -> {last}");
}

#[test]
fn same_seed_same_reports() {
    let bags = tiny_bags(8, 5);
    let run = |seed| {
        let model = TimeMil::<f32>::new(small_run(seed, 3), 1, 2).unwrap();
        let mut tr = Trainer::from_run(model).unwrap();
        let fit = tr.fit(&bags, None).unwrap();
        (fit, tr.model.params.tensors().to_vec())
    };
    let (a, pa) = run(7);
    let (b, pb) = run(7);
    assert_eq!(a, b);
    for (x, y) in pa.iter().zip(&pb) {
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    let (c, _) = run(8);
    assert_ne!(a.reports, c.reports);
}

#[test]
fn fit_restores_the_best_validation_epoch() {
    let bags = tiny_bags(12, 6);
    let (train, val) = split_validation(&bags, 0.25, 0);
    assert_eq!((train.len(), val.len()), (9, 3));
    let model = TimeMil::<f32>::new(small_run(2, 4), 1, 2).unwrap();
    let mut tr = Trainer::from_run(model).unwrap();
    let fit = tr.fit(&train, Some(&val)).unwrap();
    let accs: Vec<f64> = fit.reports.iter().map(|r| r.validation.as_ref().unwrap().accuracy).collect();
    let best = accs.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(fit.best_epoch, accs.iter().position(|&a| a == best).unwrap());
    let now = timemil::trainer::evaluate(&tr.model, &val).unwrap();
    assert_eq!(now, *fit.reports[fit.best_epoch].validation.as_ref().unwrap());
}

#[test]
fn non_finite_loss_is_reported() {
    let bags = tiny_bags(4, 1);
    let mut model = TimeMil::<f32>::new(small_run(0, 1), 1, 2).unwrap();
    for t in model.params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = f32::NAN);
    }
    let mut tr = Trainer::from_run(model).unwrap();
    match tr.train_epoch(&bags, 0) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("epoch 0")),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn invalid_train_config_is_rejected() {
    let model = TimeMil::<f32>::new(small_run(0, 1), 1, 2).unwrap();
    let mut cfg = TrainConfig::from_run(&model.config);
    cfg.lookahead_alpha = 0.0;
    assert!(Trainer::new(model, cfg).is_err());
}

#[test]
fn split_and_metric_files() {
    let bags = tiny_bags(10, 2);
    let (a, b) = split_validation(&bags, 0.3, 11);
    let (c, d) = split_validation(&bags, 0.3, 11);
    assert_eq!((a.len(), b.len()), (7, 3));
    assert_eq!((&a, &b), (&c, &d));
    let (all, none) = split_validation(&bags, 0.0, 0);
    assert_eq!((all.len(), none.len()), (10, 0));

    let model = TimeMil::<f32>::new(small_run(0, 2), 1, 2).unwrap();
    let mut tr = Trainer::from_run(model).unwrap();
    let fit = tr.fit(&a, Some(&b)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("metrics.csv");
    let v = dir.path().join("validation.csv");
    write_metrics_csv(&fit.reports, &m).unwrap();
    write_validation_csv(&fit.reports, &v).unwrap();
    for p in [m, v] {
        let text = std::fs::read_to_string(p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER.join(","));
        assert_eq!(lines.len(), 3);
    }
}

proptest! {
    #[test]
    fn loss_is_non_negative(logits in prop::collection::vec(-50.0f64..50.0, 2..6), pick in 0usize..6) {
        let label = pick % logits.len();
        prop_assert!(ovr_bce_loss(&logits, label).unwrap() >= 0.0);
    }

    #[test]
    fn predict_ignores_monotone_transforms(logits in prop::collection::vec(-10.0f64..10.0, 1..8), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let mapped: Vec<f64> = logits.iter().map(|z| (a * z + b).exp()).collect();
        prop_assert_eq!(predict(&logits), predict(&mapped));
    }

    #[test]
    fn metrics_lie_in_unit_interval(
        logits in prop::collection::vec(prop::collection::vec(-4.0f64..4.0, 3), 1..20),
        labels_seed in any::<u64>(),
    ) {
        let labels: Vec<usize> = (0..logits.len()).map(|i| ((labels_seed >> (i % 32)) % 3) as usize).collect();
        let m = compute_metrics(&logits, &labels, 3).unwrap();
        for v in [m.accuracy, m.macro_f1, m.macro_precision, m.macro_recall] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(m.auc_roc.is_nan() || (0.0..=1.0).contains(&m.auc_roc));
    }
}
