//! Block entropy, positional shuffling and conditional entropies of small
//! discrete joints. Entropies are in bits.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::Serialize;

use crate::error::{Error, Result};

/// `−Σ p log₂ p`, skipping zero entries.
pub fn entropy_bits(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.log2()).sum::<f64>()
}

/// Entropy of the empirical distribution of overlapping length-`n` blocks.
pub fn block_entropy<T: Ord>(seq: &[T], n: usize) -> Result<f64> {
    if n == 0 || seq.len() < n {
        return Err(Error::usage(format!("block length {n} for a sequence of length {}", seq.len())));
    }
    let mut counts: BTreeMap<&[T], usize> = BTreeMap::new();
    for w in seq.windows(n) {
        *counts.entry(w).or_default() += 1;
    }
    let total = (seq.len() - n + 1) as f64;
    let probs: Vec<f64> = counts.values().map(|&c| c as f64 / total).collect();
    Ok(entropy_bits(&probs))
}

/// Picks `⌊rate·len⌋` positions uniformly and permutes their symbols among
/// themselves.
pub fn shuffle_fraction<T: Clone>(seq: &[T], rate: f64, seed: u64) -> Result<Vec<T>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::usage(format!("shuffle rate {rate} outside [0, 1]")));
    }
    let k = (rate * seq.len() as f64).floor() as usize;
    let mut out = seq.to_vec();
    if k < 2 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = index::sample(&mut rng, seq.len(), k).into_vec();
    positions.sort_unstable();
    let mut symbols: Vec<T> = positions.iter().map(|&i| seq[i].clone()).collect();
    symbols.shuffle(&mut rng);
    for (&i, s) in positions.iter().zip(symbols) {
        out[i] = s;
    }
    Ok(out)
}

/// The two four-outcome distributions of the ordered Bernoulli example and
/// its permuted counterpart.
pub fn prop2_distributions() -> ([f64; 4], [f64; 4]) {
    let e = |x: f64| x.exp();
    let original = [1.0 - e(-2.0), 0.0, e(-2.0) * (1.0 - e(-1.0)), e(-3.0)];
    let shuffled = [1.0 - e(-1.0), 0.0, e(-1.0) * (1.0 - e(-2.0)), e(-3.0)];
    (original, shuffled)
}

/// Entropies of the original and permuted distributions.
pub fn prop2_example() -> (f64, f64) {
    let (o, s) = prop2_distributions();
    (entropy_bits(&o), entropy_bits(&s))
}

/// Joint table over `(Λ¹, …, Λᵀ, Y)`, row-major with `Y` varying fastest.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiscreteJoint {
    pub alphabets: Vec<usize>,
    pub label_size: usize,
    pub probs: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    /// `H(Λ¹, …, Λᵀ | Y)` from the full table.
    Joint,
    /// `Σᵢ H(Λⁱ | Y)` from the per-variable marginals.
    Factorized,
}

impl DiscreteJoint {
    pub fn new(alphabets: Vec<usize>, label_size: usize, probs: Vec<f64>) -> Result<Self> {
        if alphabets.is_empty() || alphabets.contains(&0) || label_size == 0 {
            return Err(Error::usage("joint needs at least one variable and non-empty alphabets"));
        }
        let size = alphabets.iter().product::<usize>() * label_size;
        if probs.len() != size {
            return Err(Error::dim(format!("{} probabilities for a table of {size}", probs.len())));
        }
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::usage(format!("probabilities must be non-negative and sum to 1, got {total}")));
        }
        Ok(Self {
            alphabets,
            label_size,
            probs,
        })
    }

    pub fn num_vars(&self) -> usize {
        self.alphabets.len()
    }

    /// Symbol of variable `var` in flat cell `cell`.
    fn symbol(&self, cell: usize, var: usize) -> usize {
        let stride: usize = self.alphabets[var + 1..].iter().product::<usize>() * self.label_size;
        (cell / stride) % self.alphabets[var]
    }

    fn label_marginal(&self) -> Vec<f64> {
        let mut py = vec![0.0; self.label_size];
        for (cell, &p) in self.probs.iter().enumerate() {
            py[cell % self.label_size] += p;
        }
        py
    }

    /// `H(X | Y) = H(X, Y) − H(Y)` for the chosen view of `X`.
    pub fn conditional_entropy(&self, kind: Conditioning) -> f64 {
        let hy = entropy_bits(&self.label_marginal());
        match kind {
            Conditioning::Joint => entropy_bits(&self.probs) - hy,
            Conditioning::Factorized => (0..self.num_vars())
                .map(|v| {
                    let a = self.alphabets[v];
                    let mut pxy = vec![0.0; a * self.label_size];
                    for (cell, &p) in self.probs.iter().enumerate() {
                        pxy[self.symbol(cell, v) * self.label_size + cell % self.label_size] += p;
                    }
                    entropy_bits(&pxy) - hy
                })
                .sum(),
        }
    }

    /// Flat-Dirichlet draw over the whole table.
    pub fn random<R: Rng + ?Sized>(alphabets: Vec<usize>, label_size: usize, rng: &mut R) -> Self {
        let size = alphabets.iter().product::<usize>() * label_size;
        let mut probs: Vec<f64> = (0..size).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        Self {
            alphabets,
            label_size,
            probs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Theorem3Report {
    pub trials: usize,
    /// Serialized tables where `H(X_c|Y) > H(X_nc|Y) + 1e-9`.
    pub violations: Vec<String>,
    /// Smallest and largest `H(X_nc|Y) − H(X_c|Y)`.
    pub min_gap: f64,
    pub max_gap: f64,
}

pub const THEOREM3_TOLERANCE: f64 = 1e-9;

/// Random joints with `1..=max_vars` variables and alphabets of
/// `2..=max_alphabet` symbols (labels included), checking that conditioning
/// on the joint never exceeds the factorized sum.
pub fn theorem3_check(seed: u64, trials: usize, max_vars: usize, max_alphabet: usize) -> Result<Theorem3Report> {
    if trials == 0 || max_vars == 0 || max_alphabet < 2 {
        return Err(Error::usage("theorem check needs trials >= 1, max_vars >= 1, max_alphabet >= 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Theorem3Report {
        trials,
        violations: Vec::new(),
        min_gap: f64::INFINITY,
        max_gap: f64::NEG_INFINITY,
    };
    for _ in 0..trials {
        let t = rng.random_range(1..=max_vars);
        let alphabets: Vec<usize> = (0..t).map(|_| rng.random_range(2..=max_alphabet)).collect();
        let labels = rng.random_range(2..=max_alphabet);
        let joint = DiscreteJoint::random(alphabets, labels, &mut rng);
        let gap = joint.conditional_entropy(Conditioning::Factorized) - joint.conditional_entropy(Conditioning::Joint);
        report.min_gap = report.min_gap.min(gap);
        report.max_gap = report.max_gap.max(gap);
        if gap < -THEOREM3_TOLERANCE {
            report.violations.push(serde_json::to_string(&joint)?);
        }
    }
    Ok(report)
}

pub const SHUFFLE_RATES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShuffleRow {
    pub rate: f64,
    pub seed: u64,
    pub block_entropy: f64,
}

/// Block entropy of `text` (as characters) after shuffling at each rate with
/// seeds `0..seeds`.
pub fn shuffle_experiment(text: &str, rates: &[f64], seeds: u64, n: usize) -> Result<Vec<ShuffleRow>> {
    let chars: Vec<char> = text.chars().collect();
    let mut rows = Vec::with_capacity(rates.len() * seeds as usize);
    for &rate in rates {
        for seed in 0..seeds {
            let s = shuffle_fraction(&chars, rate, seed)?;
            rows.push(ShuffleRow {
                rate,
                seed,
                block_entropy: block_entropy(&s, n)?,
            });
        }
    }
    Ok(rows)
}

/// Mean entropy per rate, in the order rates first appear.
pub fn mean_by_rate(rows: &[ShuffleRow]) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(rate, _, _)| *rate == r.rate) {
            Some(e) => {
                e.1 += r.block_entropy;
                e.2 += 1;
            }
            None => out.push((r.rate, r.block_entropy, 1)),
        }
    }
    out.into_iter().map(|(r, s, n)| (r, s / n as f64)).collect()
}

pub fn write_shuffle_csv(rows: &[ShuffleRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    w.write_record(["rate", "seed", "block_entropy"])?;
    for r in rows {
        w.write_record([r.rate.to_string(), r.seed.to_string(), r.block_entropy.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
