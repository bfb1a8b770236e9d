//! Time-aware MIL pooling: instance embeddings are projected to the model
//! width, a learnable class token is prepended, and two pre-norm transformer
//! blocks run over the token sequence. Before each block the instance tokens
//! (never the class token) receive that block's wavelet positional encoding
//! as a residual. The bag embedding is the final class token.

use crate::attention::{AttentionConfig, MhsaWeights};
use crate::config::{AttentionMode, RunConfig};
use crate::error::{Error, Result};
use crate::params::{Bindings, Init, ParamId, ParamStore};
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::wavelet::{WaveletBank, WaveletConfig};

const LN_EPS: f64 = 1e-5;
pub const NUM_BLOCKS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct PoolingConfig {
    pub input_dim: usize,
    pub ffn_mult: usize,
    pub n_wavelets: usize,
    pub kernel_taps: usize,
    pub shared_wavelets: bool,
    pub wpe_gate: f64,
    pub attention: AttentionConfig,
}

impl PoolingConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            input_dim: cfg.output_dim,
            ffn_mult: cfg.ffn_mult,
            n_wavelets: cfg.n_wavelets,
            kernel_taps: cfg.kernel_taps,
            shared_wavelets: cfg.shared_wavelets,
            wpe_gate: cfg.wpe_gate,
            attention: AttentionConfig::from_run(cfg),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarmupConfig {
    pub alpha: f64,
    pub warmup_epochs: usize,
}

impl WarmupConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            alpha: cfg.warmup_alpha,
            warmup_epochs: cfg.warmup_epochs,
        }
    }

    pub fn active(&self, epoch: usize) -> bool {
        epoch < self.warmup_epochs
    }
}

#[derive(Clone, Debug)]
struct Block {
    wpe: WaveletBank,
    ln1: (ParamId, ParamId),
    attn: MhsaWeights,
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct Pooling {
    cfg: PoolingConfig,
    class_token: ParamId,
    proj: (ParamId, ParamId),
    blocks: Vec<Block>,
}

pub struct PoolOutput {
    /// Final class token, `1 × d_model`.
    pub bag_embedding: Var,
    /// Mean of the final valid instance tokens, `1 × d_model`.
    pub instance_mean: Var,
    /// Class-token attention over instances, one vector per block.
    pub attention: [Vec<f64>; NUM_BLOCKS],
}

impl Pooling {
    pub fn build<F: Real>(cfg: PoolingConfig, store: &mut ParamStore<F>, init: &mut Init) -> Result<Self> {
        cfg.attention.validate()?;
        if cfg.wpe_gate != 0.0 && cfg.wpe_gate != 1.0 {
            return Err(Error::config("wpe gate must be 0 or 1"));
        }
        let d = cfg.attention.d_model;
        let hidden = d * cfg.ffn_mult;
        let class_token = store.add("pool.class_token", init.normal(&[1, d], 0.02));
        let proj = (
            store.add("pool.proj.w", init.fan_in(&[cfg.input_dim, d], cfg.input_dim)),
            store.add("pool.proj.b", Tensor::zeros(&[1, d])),
        );
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        for j in 0..NUM_BLOCKS {
            let n = format!("pool.block{j}");
            let wpe = WaveletBank::build(
                WaveletConfig {
                    n_bases: cfg.n_wavelets,
                    channels: d,
                    taps: cfg.kernel_taps,
                    shared: cfg.shared_wavelets,
                },
                store,
                &format!("{n}.wpe"),
            )?;
            let ln1 = (
                store.add(format!("{n}.ln1.gain"), Tensor::full(&[d], F::one())),
                store.add(format!("{n}.ln1.bias"), Tensor::zeros(&[d])),
            );
            let attn = MhsaWeights::build(cfg.attention.clone(), store, init, &format!("{n}.attn"))?;
            let ln2 = (
                store.add(format!("{n}.ln2.gain"), Tensor::full(&[d], F::one())),
                store.add(format!("{n}.ln2.bias"), Tensor::zeros(&[d])),
            );
            let ff1 = (
                store.add(format!("{n}.ff1.w"), init.fan_in(&[d, hidden], d)),
                store.add(format!("{n}.ff1.b"), Tensor::zeros(&[1, hidden])),
            );
            let ff2 = (
                store.add(format!("{n}.ff2.w"), init.fan_in(&[hidden, d], hidden)),
                store.add(format!("{n}.ff2.b"), Tensor::zeros(&[1, d])),
            );
            blocks.push(Block { wpe, ln1, attn, ln2, ff1, ff2 });
        }
        Ok(Self { cfg, class_token, proj, blocks })
    }

    pub fn config(&self) -> &PoolingConfig {
        &self.cfg
    }

    /// Switches the positional encoding on (1) or off (0).
    pub fn set_wpe_gate(&mut self, gate: f64) {
        self.cfg.wpe_gate = gate;
    }

    pub fn wavelet_banks(&self) -> Vec<&WaveletBank> {
        self.blocks.iter().map(|b| &b.wpe).collect()
    }

    pub fn class_token_id(&self) -> ParamId {
        self.class_token
    }

    /// Pools `features` (`T × L`); rows `valid..` are padding.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &Bindings,
        features: Var,
        valid: usize,
        mode: AttentionMode,
    ) -> Result<PoolOutput> {
        let shape = g.shape(features).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.input_dim {
            return Err(Error::dim(format!(
                "pooling expects T x {} features, got {shape:?}",
                self.cfg.input_dim
            )));
        }
        let t = shape[0];
        if valid == 0 || valid > t {
            return Err(Error::usage(format!("valid length {valid} outside 1..={t}")));
        }
        let h = g.matmul(features, p[self.proj.0])?;
        let mut inst = g.add(h, p[self.proj.1])?;
        let mut cls = p[self.class_token];
        let mut attention: [Vec<f64>; NUM_BLOCKS] = Default::default();
        let mut tokens = inst;
        for (j, blk) in self.blocks.iter().enumerate() {
            let pe = blk.wpe.forward(g, p, inst, self.cfg.wpe_gate)?;
            inst = g.add(inst, pe)?;
            tokens = g.concat(&[cls, inst], 0)?;
            let normed = g.layer_norm(tokens, p[blk.ln1.0], p[blk.ln1.1], LN_EPS)?;
            let att = blk.attn.forward(g, p, normed, mode, valid + 1)?;
            attention[j] = att.class_attention;
            tokens = g.add(tokens, att.out)?;
            let normed = g.layer_norm(tokens, p[blk.ln2.0], p[blk.ln2.1], LN_EPS)?;
            let f = g.matmul(normed, p[blk.ff1.0])?;
            let f = g.add(f, p[blk.ff1.1])?;
            let f = g.gelu(f);
            let f = g.matmul(f, p[blk.ff2.0])?;
            let f = g.add(f, p[blk.ff2.1])?;
            tokens = g.add(tokens, f)?;
            cls = g.slice_rows(tokens, 0, 1)?;
            inst = g.slice_rows(tokens, 1, t + 1)?;
        }
        let valid_inst = g.slice_rows(tokens, 1, valid + 1)?;
        let mean = g.mean_axis(valid_inst, 0)?;
        let d = self.cfg.attention.d_model;
        let instance_mean = g.reshape(mean, &[1, d])?;
        Ok(PoolOutput {
            bag_embedding: cls,
            instance_mean,
            attention,
        })
    }

    /// Inference-only pooling of a feature matrix; returns the bag embedding
    /// and the per-block class-token attention.
    pub fn pool<F: Real>(
        &self,
        store: &ParamStore<F>,
        features: &Tensor<F>,
        mode: AttentionMode,
    ) -> Result<(Vec<f64>, [Vec<f64>; NUM_BLOCKS])> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(features.clone());
        let out = self.forward(&mut g, &p, x, features.rows(), mode)?;
        let emb = g.value(out.bag_embedding).iter().map(|v| v.f64()).collect();
        Ok((emb, out.attention))
    }
}

/// `alpha·instance_mean + (1 − alpha)·class_emb` during warm-up, the class
/// embedding alone afterwards.
pub fn warmup_mix<F: Real>(
    g: &mut Graph<F>,
    class_emb: Var,
    instance_mean: Var,
    alpha: f64,
    in_warmup: bool,
) -> Result<Var> {
    if g.shape(class_emb) != g.shape(instance_mean) {
        return Err(Error::dim(format!(
            "warm-up mix of {:?} and {:?}",
            g.shape(class_emb),
            g.shape(instance_mean)
        )));
    }
    if !in_warmup {
        return Ok(class_emb);
    }
    if alpha == 1.0 {
        return Ok(instance_mean);
    }
    let a = g.scale(instance_mean, F::c(alpha));
    let b = g.scale(class_emb, F::c(1.0 - alpha));
    g.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> PoolingConfig {
        PoolingConfig {
            input_dim: 6,
            ffn_mult: 2,
            n_wavelets: 3,
            kernel_taps: 5,
            shared_wavelets: false,
            wpe_gate: 1.0,
            attention: AttentionConfig {
                d_model: 8,
                num_heads: 2,
                landmarks: 256,
                pinv_iters: 6,
                mode: AttentionMode::Exact,
            },
        }
    }

    fn mix(c: [f64; 2], m: [f64; 2], alpha: f64, warm: bool) -> Vec<f64> {
        let mut g = Graph::<f64>::new();
        let cv = g.constant(Tensor::from_f64(&[1, 2], &c).unwrap());
        let mv = g.constant(Tensor::from_f64(&[1, 2], &m).unwrap());
        let out = warmup_mix(&mut g, cv, mv, alpha, warm).unwrap();
        g.value(out).to_vec()
    }

    #[test]
    fn warmup_mix_rules() {
        assert_eq!(mix([1.0, 0.0], [0.3, 0.7], 1.0, true), vec![0.3, 0.7]);
        assert_eq!(mix([1.0, 0.0], [0.3, 0.7], 0.4, false), vec![1.0, 0.0]);
        let v = mix([1.0, 0.0], [0.0, 1.0], 0.99, true);
        assert!((v[0] - 0.01).abs() < 1e-12 && (v[1] - 0.99).abs() < 1e-12);
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[1, 2]));
        let b = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(warmup_mix(&mut g, a, b, 0.5, true), Err(Error::Dimension(_))));
    }

    #[test]
    fn single_instance_attention_is_one() {
        let mut store = ParamStore::<f64>::new();
        let pool = Pooling::build(small_cfg(), &mut store, &mut Init::new(0)).unwrap();
        let f = Init::new(3).normal::<f64>(&[1, 6], 1.0);
        let (emb, att) = pool.pool(&store, &f, AttentionMode::Exact).unwrap();
        assert_eq!(emb.len(), 8);
        for a in att {
            assert_eq!(a.len(), 1);
            assert!((a[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut store = ParamStore::<f64>::new();
        let pool = Pooling::build(small_cfg(), &mut store, &mut Init::new(0)).unwrap();
        let f = Tensor::<f64>::zeros(&[4, 5]);
        assert!(matches!(pool.pool(&store, &f, AttentionMode::Exact), Err(Error::Dimension(_))));
    }

    #[test]
    fn attention_vectors_are_distributions() {
        let mut store = ParamStore::<f64>::new();
        let pool = Pooling::build(small_cfg(), &mut store, &mut Init::new(2)).unwrap();
        let f = Init::new(4).normal::<f64>(&[13, 6], 1.0);
        let (emb, att) = pool.pool(&store, &f, AttentionMode::Exact).unwrap();
        assert_eq!(emb.len(), 8);
        for a in att {
            assert_eq!(a.len(), 13);
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(a.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn gated_off_encoding_is_permutation_invariant() {
        let mut store = ParamStore::<f64>::new();
        let mut cfg = small_cfg();
        cfg.wpe_gate = 0.0;
        let pool = Pooling::build(cfg, &mut store, &mut Init::new(5)).unwrap();
        let f = Init::new(6).normal::<f64>(&[9, 6], 1.0);
        let (base, _) = pool.pool(&store, &f, AttentionMode::Exact).unwrap();
        let perm = [3usize, 8, 0, 5, 1, 7, 2, 6, 4];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&r| f.data()[r * 6..(r + 1) * 6].to_vec()).collect();
        let (other, _) = pool.pool(&store, &Tensor::from_rows(&rows).unwrap(), AttentionMode::Exact).unwrap();
        for (a, b) in base.iter().zip(&other) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
