//! The complete classifier: backbone `f`, time-aware pooling `σ` and the
//! two-layer head `g`.

use crate::backbone::{Backbone, BackboneConfig};
use crate::config::{AttentionMode, RunConfig};
use crate::data::Bag;
use crate::error::{Error, Result};
use crate::params::{Bindings, Init, ParamId, ParamStore};
use crate::pooling::{warmup_mix, Pooling, PoolingConfig, NUM_BLOCKS};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Two affine layers `d_model → d_model → C` with relu in between.
#[derive(Clone, Debug)]
pub struct Classifier {
    l1: (ParamId, ParamId),
    l2: (ParamId, ParamId),
    num_classes: usize,
}

impl Classifier {
    pub fn build<F: Real>(d: usize, num_classes: usize, store: &mut ParamStore<F>, init: &mut Init) -> Self {
        Self {
            l1: (
                store.add("head.l1.w", init.fan_in(&[d, d], d)),
                store.add("head.l1.b", Tensor::zeros(&[1, d])),
            ),
            l2: (
                store.add("head.l2.w", init.fan_in(&[d, num_classes], d)),
                store.add("head.l2.b", Tensor::zeros(&[1, num_classes])),
            ),
            num_classes,
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bindings, emb: Var) -> Result<Var> {
        let h = g.matmul(emb, p[self.l1.0])?;
        let h = g.add(h, p[self.l1.1])?;
        let h = g.relu(h);
        let o = g.matmul(h, p[self.l2.0])?;
        g.add(o, p[self.l2.1])
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
}

/// How a forward pass feeds the classifier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub mode: AttentionMode,
    /// Warm-up mixing weight on the instance mean, when in warm-up.
    pub warmup_alpha: Option<f64>,
}

impl ForwardOptions {
    pub fn inference(mode: AttentionMode) -> Self {
        Self {
            mode,
            warmup_alpha: None,
        }
    }
}

pub struct ForwardOutput {
    pub logits: Var,
    pub bag_embedding: Var,
    pub features: Var,
    pub attention: [Vec<f64>; NUM_BLOCKS],
}

#[derive(Clone, Debug)]
pub struct TimeMil<F> {
    pub config: RunConfig,
    pub input_channels: usize,
    pub num_classes: usize,
    pub params: ParamStore<F>,
    pub backbone: Backbone,
    pub pooling: Pooling,
    pub head: Classifier,
}

impl<F: Real> TimeMil<F> {
    /// Builds a freshly initialized model; the seed comes from `config.seed`.
    pub fn new(config: RunConfig, input_channels: usize, num_classes: usize) -> Result<Self> {
        config.validate()?;
        if num_classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {num_classes}")));
        }
        let mut params = ParamStore::new();
        let mut init = Init::new(config.seed);
        let backbone = Backbone::build(BackboneConfig::from_run(&config, input_channels), &mut params, &mut init)?;
        let pooling = Pooling::build(PoolingConfig::from_run(&config), &mut params, &mut init)?;
        let head = Classifier::build(config.d_model, num_classes, &mut params, &mut init);
        Ok(Self {
            config,
            input_channels,
            num_classes,
            params,
            backbone,
            pooling,
            head,
        })
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<G: Real>(&self) -> TimeMil<G> {
        TimeMil {
            config: self.config.clone(),
            input_channels: self.input_channels,
            num_classes: self.num_classes,
            params: self.params.cast(),
            backbone: self.backbone.clone(),
            pooling: self.pooling.clone(),
            head: self.head.clone(),
        }
    }

    pub fn input_var(&self, g: &mut Graph<F>, bag: &Bag, values: Option<&[f64]>) -> Result<Var> {
        if bag.d != self.input_channels {
            return Err(Error::dim(format!(
                "bag {} has {} channels, model expects {}",
                bag.id, bag.d, self.input_channels
            )));
        }
        let vals = values.unwrap_or(&bag.values);
        Ok(g.constant(Tensor::from_f64(&[bag.t, bag.d], vals)?))
    }

    /// Records the whole model on `g`. `values` overrides the bag's series
    /// (used by augmentation).
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        p: &Bindings,
        bag: &Bag,
        values: Option<&[f64]>,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        let x = self.input_var(g, bag, values)?;
        let features = self.backbone.forward(g, p, x)?;
        let pooled = self.pooling.forward(g, p, features, bag.valid_len, opts.mode)?;
        let emb = match opts.warmup_alpha {
            Some(alpha) => warmup_mix(g, pooled.bag_embedding, pooled.instance_mean, alpha, true)?,
            None => pooled.bag_embedding,
        };
        let logits = self.head.forward(g, p, emb)?;
        Ok(ForwardOutput {
            logits,
            bag_embedding: pooled.bag_embedding,
            features,
            attention: pooled.attention,
        })
    }

    /// Inference logits and per-block class-token attention.
    pub fn infer(&self, bag: &Bag, mode: AttentionMode) -> Result<(Vec<f64>, [Vec<f64>; NUM_BLOCKS])> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let out = self.forward(&mut g, &p, bag, None, ForwardOptions::inference(mode))?;
        let logits = g.value(out.logits).iter().map(|v| v.f64()).collect();
        Ok((logits, out.attention))
    }

    pub fn logits(&self, bag: &Bag) -> Result<Vec<f64>> {
        Ok(self.infer(bag, self.config.attention_mode)?.0)
    }

    /// Backbone embeddings (`T × L`) of a bag.
    pub fn instance_embeddings(&self, bag: &Bag) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = self.input_var(&mut g, bag, None)?;
        let f = self.backbone.forward(&mut g, &p, x)?;
        Ok(g.tensor(f))
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }
}
