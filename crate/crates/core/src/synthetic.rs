//! Univariate pulse task: negatives are pure noise, positives carry a
//! 21-step pulse of mean 5 starting somewhere in 55..=65.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Bag, DatasetMeta};
use crate::error::{Error, Result};

pub const SERIES_LEN: usize = 120;
pub const PULSE_LEN: usize = 21;
pub const PULSE_START_MIN: usize = 55;
pub const PULSE_START_MAX: usize = 65;
pub const NOISE_VARIANCE: f64 = 0.5;
pub const PULSE_MEAN: f64 = 5.0;
pub const CLASS_LABELS: [&str; 2] = ["negative", "positive"];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBag {
    pub values: Vec<f64>,
    pub bag_label: usize,
    pub instance_labels: Vec<u8>,
    /// Inclusive pulse bounds `[a, a + 20]`.
    pub pulse_window: Option<(usize, usize)>,
}

impl SyntheticBag {
    pub fn to_bag(&self, id: impl Into<String>) -> Bag {
        Bag::new(id, self.values.clone(), self.values.len(), 1, self.bag_label).expect("generated values are finite")
    }
}

pub fn gen_bag<R: Rng + ?Sized>(positive: bool, rng: &mut R) -> SyntheticBag {
    let sd = NOISE_VARIANCE.sqrt();
    let noise = Normal::new(0.0, sd).expect("valid normal");
    let pulse = Normal::new(PULSE_MEAN, sd).expect("valid normal");
    let window = positive.then(|| {
        let a = rng.random_range(PULSE_START_MIN..=PULSE_START_MAX);
        (a, a + PULSE_LEN - 1)
    });
    let mut values = Vec::with_capacity(SERIES_LEN);
    let mut instance_labels = Vec::with_capacity(SERIES_LEN);
    for t in 0..SERIES_LEN {
        let inside = window.is_some_and(|(a, b)| (a..=b).contains(&t));
        values.push(if inside { pulse.sample(rng) } else { noise.sample(rng) });
        instance_labels.push(inside as u8);
    }
    SyntheticBag {
        values,
        bag_label: positive as usize,
        instance_labels,
        pulse_window: window,
    }
}

/// `n_pos` positives and `n_neg` negatives in a seeded random order.
pub fn gen_dataset(n_pos: usize, n_neg: usize, seed: u64) -> Vec<SyntheticBag> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bags: Vec<SyntheticBag> = (0..n_pos + n_neg).map(|i| gen_bag(i < n_pos, &mut rng)).collect();
    bags.shuffle(&mut rng);
    bags
}

pub fn to_bags(bags: &[SyntheticBag], prefix: &str) -> Vec<Bag> {
    bags.iter().enumerate().map(|(i, b)| b.to_bag(format!("{prefix}-{i}"))).collect()
}

pub fn dataset_meta(name: &str, num_bags: usize) -> DatasetMeta {
    DatasetMeta {
        name: name.to_string(),
        dimensions: 1,
        series_length: Some(SERIES_LEN),
        max_length: SERIES_LEN,
        class_labels: CLASS_LABELS.iter().map(|s| s.to_string()).collect(),
        num_bags,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `N` rows of up to `k` coordinates.
    pub projected: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    /// Fewer than `k` components carried variance.
    pub rank_deficient: bool,
}

/// Principal component projection of mean-centred rows. Eigenvectors are
/// ordered by decreasing variance and signed so their largest-magnitude
/// entry is positive.
pub fn pca_project(rows: &[Vec<f64>], k: usize) -> Result<Projection> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if k == 0 || n < k || d < k {
        return Err(Error::usage(format!("PCA of {n} x {d} data into {k} components")));
    }
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::dim("PCA rows have unequal widths"));
    }
    let mut x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    for j in 0..d {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let denom = (n.max(2) - 1) as f64;
    let cov = (x.transpose() * &x) / denom;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = top * 1e-10 + 1e-300;
    let kept: Vec<usize> = order.into_iter().take(k).filter(|&i| eig.eigenvalues[i] > tol).collect();
    let mut vectors = Vec::with_capacity(kept.len());
    for &i in &kept {
        let mut v = eig.eigenvectors.column(i).into_owned();
        let mut arg = 0;
        for r in 1..d {
            if v[r].abs() > v[arg].abs() {
                arg = r;
            }
        }
        if v[arg] < 0.0 {
            v.neg_mut();
        }
        vectors.push(v);
    }
    let projected = (0..n)
        .map(|i| vectors.iter().map(|v| x.row(i).iter().zip(v.iter()).map(|(a, b)| a * b).sum()).collect())
        .collect();
    Ok(Projection {
        projected,
        explained_variance: kept.iter().map(|&i| eig.eigenvalues[i]).collect(),
        rank_deficient: kept.len() < k,
    })
}

pub const BOUNDARY_HEADER: &str = "bag_id,t,pc1,pc2,instance_label";

/// Rows `bag_id,t,pc1,pc2,instance_label`; `t` counts positions within each
/// bag id. A missing second component is written as 0.
pub fn export_boundary_csv(projected: &[Vec<f64>], instance_labels: &[u8], bag_ids: &[String], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if projected.len() != instance_labels.len() || projected.len() != bag_ids.len() {
        return Err(Error::dim(format!(
            "{} projections, {} labels, {} bag ids",
            projected.len(),
            instance_labels.len(),
            bag_ids.len()
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    w.write_record(BOUNDARY_HEADER.split(','))?;
    let mut counts = std::collections::HashMap::new();
    for ((p, &l), id) in projected.iter().zip(instance_labels).zip(bag_ids) {
        let t = counts.entry(id.as_str()).or_insert(0usize);
        let pc = |i: usize| p.get(i).copied().unwrap_or(0.0).to_string();
        w.write_record([id.clone(), t.to_string(), pc(0), pc(1), l.to_string()])?;
        *t += 1;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
