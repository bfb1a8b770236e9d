//! InceptionTime-style feature extractor mapping a `T × d` series to `T × L`
//! instance embeddings.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::{Bindings, Init, ParamId, ParamStore};
use crate::tensor::{Graph, Real, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub output_dim: usize,
    pub num_blocks: usize,
    pub bottleneck_dim: usize,
    pub kernel_sizes: Vec<usize>,
    pub use_residual: bool,
}

impl BackboneConfig {
    pub fn from_run(cfg: &RunConfig, input_channels: usize) -> Self {
        Self {
            input_channels,
            output_dim: cfg.output_dim,
            num_blocks: cfg.num_blocks,
            bottleneck_dim: cfg.bottleneck_dim,
            kernel_sizes: cfg.kernel_sizes.clone(),
            use_residual: cfg.use_residual,
        }
    }

    /// Kernel lengths actually used: even sizes move up to the next odd one.
    pub fn effective_kernels(&self) -> Vec<usize> {
        self.kernel_sizes.iter().map(|&k| k | 1).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::config("backbone needs at least one input channel"));
        }
        if self.output_dim == 0 || !self.output_dim.is_multiple_of(4) {
            return Err(Error::config(format!(
                "output dimension {} must be divisible by the 4 inception branches",
                self.output_dim
            )));
        }
        if self.kernel_sizes.len() != 3 || self.kernel_sizes.contains(&0) {
            return Err(Error::config(format!(
                "inception blocks need three positive kernel sizes, got {:?}",
                self.kernel_sizes
            )));
        }
        if self.num_blocks == 0 || self.bottleneck_dim == 0 {
            return Err(Error::config("num_blocks and bottleneck_dim must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct InceptionBlock {
    bottleneck: ParamId,
    convs: Vec<ParamId>,
    pool_proj: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

#[derive(Clone, Debug)]
struct Shortcut {
    proj: Option<ParamId>,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

/// Handles of the backbone parameters inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    blocks: Vec<InceptionBlock>,
    shortcuts: Vec<Shortcut>,
}

impl Backbone {
    /// Registers freshly initialized backbone weights in `store`.
    pub fn build<F: Real>(cfg: BackboneConfig, store: &mut ParamStore<F>, init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        let l = cfg.output_dim;
        let branch = l / 4;
        let b = cfg.bottleneck_dim;
        let kernels = cfg.effective_kernels();
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        let mut shortcuts = Vec::new();
        let mut cin = cfg.input_channels;
        let mut res_in = cfg.input_channels;
        for i in 0..cfg.num_blocks {
            let p = format!("backbone.block{i}");
            let bottleneck = store.add(format!("{p}.bottleneck"), init.fan_in(&[1, cin, b], cin));
            let convs = kernels
                .iter()
                .map(|&k| store.add(format!("{p}.conv{k}"), init.fan_in(&[k, b, branch], k * b)))
                .collect();
            let pool_proj = store.add(format!("{p}.pool_proj"), init.fan_in(&[1, cin, branch], cin));
            let ln_gain = store.add(format!("{p}.ln.gain"), crate::tensor::Tensor::full(&[l], F::one()));
            let ln_bias = store.add(format!("{p}.ln.bias"), crate::tensor::Tensor::zeros(&[l]));
            blocks.push(InceptionBlock {
                bottleneck,
                convs,
                pool_proj,
                ln_gain,
                ln_bias,
            });
            cin = l;
            if cfg.use_residual && i % 3 == 2 {
                let s = format!("backbone.shortcut{}", i / 3);
                let proj = (res_in != l)
                    .then(|| store.add(format!("{s}.proj"), init.fan_in(&[1, res_in, l], res_in)));
                let ln_gain = store.add(format!("{s}.ln.gain"), crate::tensor::Tensor::full(&[l], F::one()));
                let ln_bias = store.add(format!("{s}.ln.bias"), crate::tensor::Tensor::zeros(&[l]));
                shortcuts.push(Shortcut { proj, ln_gain, ln_bias });
                res_in = l;
            }
        }
        Ok(Self { cfg, blocks, shortcuts })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Runs the extractor on `x` (`T × d`), returning `T × L` embeddings.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bindings, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.input_channels {
            return Err(Error::dim(format!(
                "backbone expects T x {} input, got {shape:?}",
                self.cfg.input_channels
            )));
        }
        let mut h = x;
        let mut res = x;
        let mut shortcuts = self.shortcuts.iter();
        for (i, blk) in self.blocks.iter().enumerate() {
            let bott = g.conv1d(h, p[blk.bottleneck])?;
            let mut branches = Vec::with_capacity(4);
            for &c in &blk.convs {
                branches.push(g.conv1d(bott, p[c])?);
            }
            let pooled = g.maxpool3(h)?;
            branches.push(g.conv1d(pooled, p[blk.pool_proj])?);
            let cat = g.concat(&branches, 1)?;
            let normed = g.layer_norm(cat, p[blk.ln_gain], p[blk.ln_bias], LN_EPS)?;
            h = g.relu(normed);
            if self.cfg.use_residual && i % 3 == 2 {
                let sc = shortcuts.next().expect("one shortcut per residual group");
                let skip = match sc.proj {
                    Some(w) => {
                        let proj = g.conv1d(res, p[w])?;
                        g.layer_norm(proj, p[sc.ln_gain], p[sc.ln_bias], LN_EPS)?
                    }
                    None => res,
                };
                let sum = g.add(h, skip)?;
                h = g.relu(sum);
                res = h;
            }
        }
        Ok(h)
    }
}

/// Analytic parameter count of an inception backbone.
pub fn parameter_count(cfg: &BackboneConfig) -> usize {
    let l = cfg.output_dim;
    let b = cfg.bottleneck_dim;
    let taps: usize = cfg.effective_kernels().iter().sum();
    let mut total = 0;
    let mut cin = cfg.input_channels;
    let mut res_in = cfg.input_channels;
    for i in 0..cfg.num_blocks {
        total += cin * b + taps * b * (l / 4) + cin * (l / 4) + 2 * l;
        cin = l;
        if cfg.use_residual && i % 3 == 2 {
            if res_in != l {
                total += res_in * l;
            }
            total += 2 * l;
            res_in = l;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn cfg(d: usize) -> BackboneConfig {
        BackboneConfig::from_run(&RunConfig::default(), d)
    }

    fn small(d: usize) -> BackboneConfig {
        BackboneConfig {
            input_channels: d,
            output_dim: 8,
            num_blocks: 3,
            bottleneck_dim: 4,
            kernel_sizes: vec![3, 5, 9],
            use_residual: true,
        }
    }

    fn run(bb: &Backbone, store: &ParamStore<f64>, t: usize, d: usize, vals: &[f64]) -> Tensor<f64> {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::from_f64(&[t, d], vals).unwrap());
        let y = bb.forward(&mut g, &p, x).unwrap();
        g.tensor(y)
    }

    #[test]
    fn default_parameter_count_is_frozen() {
        // d=3: block1 3*32 + 73*32*32 + 3*32 + 256 = 75200;
        // blocks 2,3: 128*32 + 74752 + 128*32 + 256 = 83200 each;
        // shortcut 3*128 + 256 = 640.
        assert_eq!(parameter_count(&cfg(3)), 242_240);
        let mut store = ParamStore::<f32>::new();
        Backbone::build(cfg(3), &mut store, &mut Init::new(0)).unwrap();
        assert_eq!(store.num_scalars(), 242_240);
    }

    #[test]
    fn rejects_width_not_divisible_by_four() {
        let mut c = cfg(2);
        c.output_dim = 30;
        let mut store = ParamStore::<f32>::new();
        assert!(matches!(
            Backbone::build(c, &mut store, &mut Init::new(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn same_seed_same_weights() {
        let mut a = ParamStore::<f32>::new();
        let mut b = ParamStore::<f32>::new();
        Backbone::build(cfg(2), &mut a, &mut Init::new(7)).unwrap();
        Backbone::build(cfg(2), &mut b, &mut Init::new(7)).unwrap();
        for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn output_width_is_l_for_any_length() {
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::build(cfg(3), &mut store, &mut Init::new(1)).unwrap();
        for t in [1usize, 2, 7, 50] {
            let vals: Vec<f64> = (0..t * 3).map(|i| (i as f64 * 0.37).sin()).collect();
            let y = run(&bb, &store, t, 3, &vals);
            assert_eq!(y.shape(), &[t, 128]);
        }
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::build(small(2), &mut store, &mut Init::new(1)).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[5, 3]));
        assert!(matches!(bb.forward(&mut g, &p, x), Err(Error::Dimension(_))));
    }

    #[test]
    fn interior_translation_moves_response_peak() {
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::build(cfg(1), &mut store, &mut Init::new(3)).unwrap();
        let t = 400;
        let response = |pos: usize| {
            let mut vals = vec![0.0; t];
            for k in 0..5 {
                vals[pos + k] = 3.0;
            }
            let y = run(&bb, &store, t, 1, &vals);
            // background = response at a far-away constant region
            let bg: Vec<f64> = (0..128).map(|c| y.at(320, c)).collect();
            let dev: Vec<f64> = (0..t)
                .map(|r| (0..128).map(|c| (y.at(r, c) - bg[c]).powi(2)).sum::<f64>())
                .collect();
            dev.iter()
                .enumerate()
                .fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0
        };
        // Pulse support stays far from both borders and from the background probe.
        let base = response(150);
        for s in [3usize, 10, 17] {
            assert_eq!(response(150 + s), base + s, "shift {s}");
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        for seed in 0..5 {
            let mut store = ParamStore::<f64>::new();
            let bb = Backbone::build(small(2), &mut store, &mut Init::new(seed)).unwrap();
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let vals: Vec<f64> = (0..40).map(|i| ((i as f64 + seed as f64) * 0.91).sin()).collect();
            let x = g.constant(Tensor::from_f64(&[20, 2], &vals).unwrap());
            let y = bb.forward(&mut g, &p, x).unwrap();
            let sq = g.square(y);
            let s0 = g.sum_axis(sq, 0).unwrap();
            let loss = g.sum_axis(s0, 0).unwrap();
            g.backward(loss).unwrap();
            store.collect_grads(&g, &p);
            for (name, t) in store.iter() {
                let gmax = t.grad().unwrap().iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(gmax > 0.0, "seed {seed}: {name} has zero gradient");
            }
        }
    }
}
