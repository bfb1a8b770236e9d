use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use timemil::synthetic::{
    dataset_meta, export_boundary_csv, gen_dataset, pca_project, to_bags, BOUNDARY_HEADER, NOISE_VARIANCE, PULSE_LEN,
    PULSE_MEAN, SERIES_LEN,
};

#[test]
fn noise_and_pulse_moments() {
    let data = gen_dataset(200, 200, 11);
    let (mut noise, mut pulse) = (Vec::new(), Vec::new());
    for b in &data {
        for (v, &l) in b.values.iter().zip(&b.instance_labels) {
            if l == 1 { pulse.push(*v) } else { noise.push(*v) }
        }
    }
    assert_eq!(pulse.len(), 200 * PULSE_LEN);
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64)
    };
    let (nm, nv) = stats(&noise);
    let (pm, pv) = stats(&pulse);
    assert_abs_diff_eq!(nm, 0.0, epsilon = 0.02);
    assert_abs_diff_eq!(nv, NOISE_VARIANCE, epsilon = 0.02);
    assert_abs_diff_eq!(pm, PULSE_MEAN, epsilon = 0.03);
    assert_abs_diff_eq!(pv, NOISE_VARIANCE, epsilon = 0.03);
}

#[test]
fn bags_and_metadata() {
    let data = gen_dataset(3, 2, 0);
    let bags = to_bags(&data, "s");
    assert_eq!(bags.len(), 5);
    assert!(bags.iter().all(|b| b.t == SERIES_LEN && b.d == 1 && !b.is_padded()));
    assert_eq!(bags[2].id, "s-2");
    let meta = dataset_meta("pulse", 5);
    assert_eq!(meta.num_classes(), 2);
    meta.validate(&bags).unwrap();
    assert_ne!(gen_dataset(3, 2, 0), gen_dataset(3, 2, 1));
}

fn normal_rows(n: usize, scales: &[f64], seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| scales.iter().map(|s| s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect())
        .collect()
}

#[test]
fn isotropic_cloud_has_balanced_variances() {
    let rows = normal_rows(1000, &[1.0; 5], 2);
    let p = pca_project(&rows, 2).unwrap();
    let r = p.explained_variance[0] / p.explained_variance[1];
    assert!((1.0..1.2).contains(&r), "ratio {r}");
    assert!(p.explained_variance.iter().all(|v| (v - 1.0).abs() < 0.2));
}

#[test]
fn projection_of_two_bags() {
    let data = gen_dataset(1, 1, 4);
    // instance features: value, and its neighbours
    let mut rows = Vec::new();
    for b in &data {
        for t in 0..SERIES_LEN {
            let at = |k: isize| b.values[(t as isize + k).clamp(0, SERIES_LEN as isize - 1) as usize];
            rows.push(vec![at(-1), at(0), at(1)]);
        }
    }
    let p = pca_project(&rows, 2).unwrap();
    assert_eq!(p.projected.len(), 240);
    assert!(p.projected.iter().all(|r| r.len() == 2));
    let dot: f64 = p.projected.iter().map(|r| r[0] * r[1]).sum();
    let norm0: f64 = p.projected.iter().map(|r| r[0] * r[0]).sum();
    assert!(dot.abs() < 1e-8 * norm0, "components correlate: {dot}");
    let var0 = norm0 / 239.0;
    assert_abs_diff_eq!(var0, p.explained_variance[0], epsilon = 1e-9 * var0);
}

#[test]
fn boundary_csv_round_trip() {
    let rows = normal_rows(6, &[2.0, 1.0, 0.5], 8);
    let p = pca_project(&rows, 2).unwrap();
    let labels = [0u8, 1, 1, 0, 0, 1];
    let ids: Vec<String> = ["a", "a", "a", "b", "b", "b"].iter().map(|s| s.to_string()).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("boundary.csv");
    export_boundary_csv(&p.projected, &labels, &ids, &path).unwrap();
    let mut rdr = csv::Reader::from_path(&path).unwrap();
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>().join(","), BOUNDARY_HEADER);
    let recs: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(recs.len(), 6);
    for (i, r) in recs.iter().enumerate() {
        assert_eq!(&r[0], ids[i]);
        assert_eq!(r[1].parse::<usize>().unwrap(), i % 3);
        assert_eq!(r[2].parse::<f64>().unwrap(), p.projected[i][0]);
        assert_eq!(r[3].parse::<f64>().unwrap(), p.projected[i][1]);
        assert_eq!(r[4].parse::<u8>().unwrap(), labels[i]);
    }
    assert!(export_boundary_csv(&p.projected, &labels[..2], &ids, &path).is_err());
}

proptest! {
    #[test]
    fn pca_preserves_centred_energy(seed in any::<u64>(), n in 4usize..30) {
        let rows = normal_rows(n, &[3.0, 1.0], seed);
        let p = pca_project(&rows, 2).unwrap();
        prop_assume!(!p.rank_deficient);
        let mean: Vec<f64> = (0..2).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let before: f64 = rows.iter().map(|r| (r[0] - mean[0]).powi(2) + (r[1] - mean[1]).powi(2)).sum();
        let after: f64 = p.projected.iter().map(|r| r[0] * r[0] + r[1] * r[1]).sum();
        prop_assert!((before - after).abs() <= 1e-9 * before.max(1.0));
        prop_assert!(p.explained_variance[0] >= p.explained_variance[1]);
    }

    #[test]
    fn every_positive_has_exactly_one_pulse(seed in any::<u64>()) {
        for b in gen_dataset(3, 3, seed) {
            let ones = b.instance_labels.iter().filter(|&&l| l == 1).count();
            prop_assert_eq!(ones, if b.bag_label == 1 { PULSE_LEN } else { 0 });
            if let Some((a, e)) = b.pulse_window {
                prop_assert!(b.instance_labels[a..=e].iter().all(|&l| l == 1));
            }
        }
    }
}
