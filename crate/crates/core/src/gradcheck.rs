//! Central finite-difference checks of the reverse-mode gradients, per
//! operation, per module and for the whole model, in double precision.
//!
//! Derivatives are Richardson-extrapolated central differences,
//! `(4·D(h/2) − D(h)) / 3` with `D(h) = (f(x+h) − f(x−h)) / 2h`, which
//! cancels the `h²` truncation term.
//!
//! Non-scalar outputs are reduced with fixed random weights so every output
//! entry contributes. Perturbations that change the branch fingerprint of a
//! non-smooth operation (relu sign, argmax) are skipped.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use crate::attention::{AttentionConfig, MhsaWeights};
use crate::backbone::{Backbone, BackboneConfig};
use crate::config::{AttentionMode, RunConfig};
use crate::data::Bag;
use crate::error::{Error, Result};
use crate::model::{Classifier, ForwardOptions, TimeMil};
use crate::params::{Bindings, Init, ParamStore};
use crate::pooling::{warmup_mix, Pooling, PoolingConfig};
use crate::tensor::{Graph, Tensor, Var};
use crate::wavelet::{WaveletBank, WaveletConfig, A_MIN};

pub const STEP: f64 = 2e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Lower bound on the denominator of the elementwise relative error; entries
/// smaller than this are judged on an absolute scale of `TOLERANCE · REL_FLOOR`.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Ops,
    Backbone,
    Wpe,
    Attention,
    Pooling,
    Loss,
    Model,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Ops,
        Suite::Backbone,
        Suite::Wpe,
        Suite::Attention,
        Suite::Pooling,
        Suite::Loss,
        Suite::Model,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Ops => "ops",
            Suite::Backbone => "backbone",
            Suite::Wpe => "wpe",
            Suite::Attention => "attention",
            Suite::Pooling => "pooling",
            Suite::Loss => "loss",
            Suite::Model => "model",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown gradcheck module '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    /// Worst `|a − n| / max(|a|, |n|, REL_FLOOR)` over checked entries.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn projection(shape: &[usize], seed: u64) -> Tensor<f64> {
    Init::new(seed ^ 0x5eed).normal(shape, 1.0)
}

struct Eval {
    loss: f64,
    signature: u64,
    grads: Vec<Vec<f64>>,
}

fn evaluate<G>(inputs: &[Tensor<f64>], seed: u64, f: &G, grads: bool) -> Result<Eval>
where
    G: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new().with_decision_tracking();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let n = g.value(out).len();
    let loss = if n == 1 {
        out
    } else {
        let flat = g.reshape(out, &[1, n])?;
        let w = g.constant(projection(&[1, n], seed));
        let prod = g.mul(flat, w)?;
        g.sum_axis(prod, 1)?
    };
    let value = g.scalar(loss);
    let signature = g.decision_signature();
    let grads = if grads {
        g.backward(loss)?;
        vars.iter()
            .map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).len()], <[f64]>::to_vec))
            .collect()
    } else {
        Vec::new()
    };
    Ok(Eval {
        loss: value,
        signature,
        grads,
    })
}

/// Compares the tape gradient of `f` with respect to every entry of every
/// input against central differences.
pub fn check_fn<G>(suite: Suite, name: &str, inputs: Vec<Tensor<f64>>, seed: u64, f: G) -> Result<CheckResult>
where
    G: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let base = evaluate(&inputs, seed, &f, true)?;
    let mut inputs = inputs;
    let mut res = CheckResult {
        suite: suite.name(),
        name: name.to_string(),
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
    };
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            let mut kinked = false;
            let mut central = |h: f64, inputs: &mut Vec<Tensor<f64>>| -> Result<f64> {
                inputs[i].data_mut()[j] = orig + h;
                let plus = evaluate(inputs, seed, &f, false)?;
                inputs[i].data_mut()[j] = orig - h;
                let minus = evaluate(inputs, seed, &f, false)?;
                inputs[i].data_mut()[j] = orig;
                kinked |= plus.signature != base.signature || minus.signature != base.signature;
                Ok((plus.loss - minus.loss) / (2.0 * h))
            };
            let coarse = central(STEP, &mut inputs)?;
            let fine = central(STEP / 2.0, &mut inputs)?;
            if kinked {
                res.skipped += 1;
                continue;
            }
            let numeric = (4.0 * fine - coarse) / 3.0;
            let analytic = base.grads[i][j];
            let abs = (analytic - numeric).abs();
            let rel = abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            res.checked += 1;
            res.max_abs_error = res.max_abs_error.max(abs);
            res.max_rel_error = res.max_rel_error.max(rel);
        }
    }
    if !base.loss.is_finite() {
        res.max_rel_error = f64::INFINITY;
    }
    Ok(res)
}

/// Like [`check_fn`] but over every tensor of `store` plus `extra` inputs;
/// the closure receives bindings for the store and the extra variables.
fn check_store<G>(
    suite: Suite,
    name: &str,
    store: &ParamStore<f64>,
    extra: Vec<Tensor<f64>>,
    seed: u64,
    f: G,
) -> Result<CheckResult>
where
    G: Fn(&mut Graph<f64>, &Bindings, &[Var]) -> Result<Var>,
{
    let n_extra = extra.len();
    let mut inputs = extra;
    inputs.extend(store.tensors().iter().cloned());
    check_fn(suite, name, inputs, seed, move |g, vars| {
        let b = Bindings::from_vars(vars[n_extra..].to_vec());
        f(g, &b, &vars[..n_extra])
    })
}

fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
    Init::new(seed).normal(shape, 1.0)
}

fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
    let t = rnd(shape, seed);
    let data: Vec<f64> = t.data().iter().map(|v| 0.5 + v.abs()).collect();
    Tensor::new(shape, data).expect("same shape")
}

fn ops(seed: u64) -> Result<Vec<CheckResult>> {
    let s = Suite::Ops;
    let r = |shape: &[usize], k: u64| rnd(shape, seed.wrapping_mul(1000).wrapping_add(k));
    let mut out = vec![
        check_fn(s, "matmul", vec![r(&[3, 4], 1), r(&[4, 2], 2)], seed, |g, v| g.matmul(v[0], v[1]))?,
        check_fn(s, "matmul_nt", vec![r(&[3, 4], 3), r(&[2, 4], 4)], seed, |g, v| g.matmul_nt(v[0], v[1]))?,
        check_fn(s, "transpose", vec![r(&[3, 5], 5)], seed, |g, v| g.transpose(v[0]))?,
        check_fn(s, "reshape", vec![r(&[2, 6], 6)], seed, |g, v| g.reshape(v[0], &[3, 4]))?,
        check_fn(s, "add_broadcast", vec![r(&[3, 4], 7), r(&[1, 4], 8)], seed, |g, v| g.add(v[0], v[1]))?,
        check_fn(s, "sub_broadcast", vec![r(&[3, 4], 9), r(&[3, 1], 10)], seed, |g, v| g.sub(v[0], v[1]))?,
        check_fn(s, "mul_broadcast", vec![r(&[2, 3, 4], 11), r(&[3, 4], 12)], seed, |g, v| g.mul(v[0], v[1]))?,
        check_fn(s, "scale", vec![r(&[2, 3], 13)], seed, |g, v| Ok(g.scale(v[0], -1.7)))?,
        check_fn(s, "exp", vec![r(&[2, 3], 14)], seed, |g, v| Ok(g.exp(v[0])))?,
        check_fn(s, "sigmoid", vec![r(&[2, 3], 15)], seed, |g, v| Ok(g.sigmoid(v[0])))?,
        check_fn(s, "relu", vec![r(&[3, 4], 16)], seed, |g, v| Ok(g.relu(v[0])))?,
        check_fn(s, "gelu", vec![r(&[3, 4], 17)], seed, |g, v| Ok(g.gelu(v[0])))?,
        check_fn(s, "square", vec![r(&[2, 3], 18)], seed, |g, v| Ok(g.square(v[0])))?,
        check_fn(s, "softplus", vec![r(&[2, 3], 19)], seed, |g, v| Ok(g.softplus(v[0])))?,
        check_fn(s, "softmax_last", vec![r(&[3, 5], 20)], seed, |g, v| Ok(g.softmax_last(v[0])))?,
        check_fn(
            s,
            "layer_norm",
            vec![r(&[4, 6], 21), r(&[6], 22), r(&[6], 23)],
            seed,
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        )?,
        check_fn(s, "sum_axis", vec![r(&[3, 4], 24)], seed, |g, v| g.sum_axis(v[0], 0))?,
        check_fn(s, "mean_axis", vec![r(&[3, 4], 25)], seed, |g, v| g.mean_axis(v[0], 1))?,
        check_fn(s, "max_axis", vec![r(&[3, 4], 26)], seed, |g, v| g.max_axis(v[0], 1))?,
        check_fn(s, "conv1d_same", vec![r(&[3, 10], 27), r(&[3, 5], 28)], seed, |g, v| g.conv1d_same(v[0], v[1]))?,
        check_fn(s, "conv1d_same_shared", vec![r(&[3, 10], 29), r(&[1, 5], 30)], seed, |g, v| {
            g.conv1d_same(v[0], v[1])
        })?,
        check_fn(s, "conv1d", vec![r(&[10, 3], 31), r(&[5, 3, 2], 32)], seed, |g, v| g.conv1d(v[0], v[1]))?,
        check_fn(s, "maxpool3", vec![r(&[8, 3], 33)], seed, |g, v| g.maxpool3(v[0]))?,
        check_fn(s, "concat_rows", vec![r(&[2, 3], 34), r(&[1, 3], 35)], seed, |g, v| g.concat(&[v[0], v[1]], 0))?,
        check_fn(s, "concat_cols", vec![r(&[2, 3], 36), r(&[2, 2], 37)], seed, |g, v| g.concat(&[v[0], v[1]], 1))?,
        check_fn(s, "slice_rows", vec![r(&[5, 3], 38)], seed, |g, v| g.slice_rows(v[0], 1, 4))?,
        check_fn(s, "slice_cols", vec![r(&[3, 5], 39)], seed, |g, v| g.slice_cols(v[0], 2, 5))?,
        check_fn(s, "wavelet_kernels", vec![r(&[2, 3], 40), r(&[2, 3], 41)], seed, |g, v| {
            g.wavelet_kernels(v[0], v[1], 7, A_MIN)
        })?,
        check_fn(s, "pinv_init", vec![positive(&[4, 4], 42)], seed, |g, v| g.pinv_init(v[0]))?,
        check_fn(s, "ovr_bce", vec![r(&[1, 3], 43)], seed, |g, v| g.ovr_bce(v[0], 1))?,
    ];
    out.push(check_fn(s, "iterative_pinv", vec![positive(&[4, 4], 44)], seed, |g, v| {
        crate::attention::pinv_graph(g, v[0], 6)
    })?);
    Ok(out)
}

/// Reduced-size configuration used by the module and model checks.
pub fn micro_config(seed: u64) -> RunConfig {
    RunConfig {
        output_dim: 8,
        num_blocks: 3,
        bottleneck_dim: 2,
        kernel_sizes: vec![3, 5, 7],
        d_model: 8,
        num_heads: 2,
        landmarks: 256,
        pinv_iters: 6,
        ffn_mult: 2,
        n_wavelets: 2,
        kernel_taps: 7,
        seed,
        ..RunConfig::default()
    }
}

fn backbone(seed: u64) -> Result<Vec<CheckResult>> {
    let cfg = BackboneConfig::from_run(&micro_config(seed), 2);
    let mut store = ParamStore::new();
    let net = Backbone::build(cfg, &mut store, &mut Init::new(seed))?;
    let x = rnd(&[12, 2], seed + 1);
    Ok(vec![check_store(Suite::Backbone, "backbone", &store, vec![x], seed, |g, p, v| {
        net.forward(g, p, v[0])
    })?])
}

fn wpe(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for shared in [false, true] {
        let mut store = ParamStore::new();
        let cfg = WaveletConfig {
            n_bases: 3,
            channels: 4,
            taps: 7,
            shared,
        };
        let bank = WaveletBank::build(cfg, &mut store, "wpe")?;
        // move off the symmetric initial translations
        for t in store.tensors_mut() {
            let noise = rnd(t.shape(), seed + 7);
            for (d, n) in t.data_mut().iter_mut().zip(noise.data()) {
                *d += 0.3 * n;
            }
        }
        let x = rnd(&[10, 4], seed + 2);
        let name = if shared { "wpe_shared" } else { "wpe" };
        out.push(check_store(Suite::Wpe, name, &store, vec![x], seed, |g, p, v| {
            bank.forward(g, p, v[0], 1.0)
        })?);
    }
    Ok(out)
}

fn attention(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let cases: [(&str, usize, AttentionMode, usize); 3] = [
        ("attention_exact", 64, AttentionMode::Exact, 9),
        ("attention_masked", 64, AttentionMode::Exact, 6),
        ("attention_nystrom", 3, AttentionMode::Nystrom, 9),
    ];
    for (name, landmarks, mode, valid) in cases {
        let cfg = AttentionConfig {
            d_model: 8,
            num_heads: 2,
            landmarks,
            pinv_iters: 6,
            mode,
        };
        let mut store = ParamStore::new();
        let w = MhsaWeights::build(cfg, &mut store, &mut Init::new(seed), "attn")?;
        let x = rnd(&[9, 8], seed + 3);
        out.push(check_store(Suite::Attention, name, &store, vec![x], seed, |g, p, v| {
            Ok(w.forward(g, p, v[0], mode, valid)?.out)
        })?);
    }
    Ok(out)
}

fn pooling(seed: u64) -> Result<Vec<CheckResult>> {
    let cfg = PoolingConfig::from_run(&micro_config(seed));
    let mut store = ParamStore::new();
    let pool = Pooling::build(cfg, &mut store, &mut Init::new(seed))?;
    let feats = rnd(&[10, 8], seed + 4);
    let mut out = Vec::new();
    for (name, alpha) in [("pooling", None), ("pooling_warmup", Some(0.6))] {
        out.push(check_store(Suite::Pooling, name, &store, vec![feats.clone()], seed, |g, p, v| {
            let o = pool.forward(g, p, v[0], 8, AttentionMode::Exact)?;
            match alpha {
                Some(a) => warmup_mix(g, o.bag_embedding, o.instance_mean, a, true),
                None => Ok(o.bag_embedding),
            }
        })?);
    }
    Ok(out)
}

fn loss(seed: u64) -> Result<Vec<CheckResult>> {
    let mut store = ParamStore::new();
    let head = Classifier::build(8, 3, &mut store, &mut Init::new(seed));
    let emb = rnd(&[1, 8], seed + 5);
    Ok(vec![check_store(Suite::Loss, "classifier_ovr_bce", &store, vec![emb], seed, |g, p, v| {
        let logits = head.forward(g, p, v[0])?;
        g.ovr_bce(logits, 2)
    })?])
}

/// Two bags, `T = 16`, two channels, two classes: the mean loss as a
/// function of every model parameter.
fn model(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, landmarks, warmup) in [("model", 256, None), ("model_nystrom_warmup", 5, Some(0.99))] {
        let cfg = RunConfig {
            landmarks,
            ..micro_config(seed)
        };
        let m = TimeMil::<f64>::new(cfg, 2, 2)?;
        let bags: Vec<Bag> = (0..2)
            .map(|i| Bag::new(format!("g{i}"), rnd(&[16, 2], seed + 10 + i as u64).into_data(), 16, 2, i))
            .collect::<Result<_>>()?;
        let opts = ForwardOptions {
            mode: m.config.attention_mode,
            warmup_alpha: warmup,
        };
        out.push(check_store(Suite::Model, name, &m.params, Vec::new(), seed, |g, p, _| {
            let mut total = None;
            for b in &bags {
                let o = m.forward(g, p, b, None, opts)?;
                let l = g.ovr_bce(o.logits, b.label)?;
                total = Some(match total {
                    Some(t) => g.add(t, l)?,
                    None => l,
                });
            }
            Ok(g.scale(total.expect("two bags"), 0.5))
        })?);
    }
    Ok(out)
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<CheckResult>> {
    match suite {
        Suite::Ops => ops(seed),
        Suite::Backbone => backbone(seed),
        Suite::Wpe => wpe(seed),
        Suite::Attention => attention(seed),
        Suite::Pooling => pooling(seed),
        Suite::Loss => loss(seed),
        Suite::Model => model(seed),
    }
}

pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for s in Suite::ALL {
        out.extend(run_suite(s, seed)?);
    }
    Ok(out)
}

/// Fixed-width table of the worst error per check.
pub fn format_table(results: &[CheckResult]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<10} {:<24} {:>8} {:>8} {:>12} {:>12}  status",
        "suite", "check", "entries", "skipped", "max_rel", "max_abs"
    );
    for r in results {
        let _ = writeln!(
            s,
            "{:<10} {:<24} {:>8} {:>8} {:>12.3e} {:>12.3e}  {}",
            r.suite,
            r.name,
            r.checked,
            r.skipped,
            r.max_rel_error,
            r.max_abs_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_and_suite_names() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("nope".parse::<Suite>().is_err());
        let r = run_suite(Suite::Loss, 0).unwrap();
        let t = format_table(&r);
        assert!(t.contains("classifier_ovr_bce"));
    }
}
