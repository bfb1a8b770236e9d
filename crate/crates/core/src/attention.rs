//! Multi-head self-attention, exact and Nyström-approximated.
//!
//! Row 0 of every token matrix is the class token. Both paths also report
//! the class token's attention over the instance rows (self entry dropped,
//! renormalized, averaged over heads).

use crate::config::{AttentionMode, RunConfig};
use crate::error::{Error, Result};
use crate::params::{Bindings, Init, ParamId, ParamStore};
use crate::tensor::{softmax_in_place, Graph, Real, Tensor, Var};

/// Additive score bias for padded keys.
const MASK_BIAS: f64 = -1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub landmarks: usize,
    pub pinv_iters: usize,
    pub mode: AttentionMode,
}

impl AttentionConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            d_model: cfg.d_model,
            num_heads: cfg.num_heads,
            landmarks: cfg.landmarks,
            pinv_iters: cfg.pinv_iters,
            mode: cfg.attention_mode,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "d_model {} must be divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.landmarks == 0 || self.pinv_iters == 0 {
            return Err(Error::config("landmarks and pinv_iters must be >= 1"));
        }
        Ok(())
    }

    /// Exact attention is used in auto mode whenever the token count does not
    /// exceed the landmark count.
    pub fn resolve(&self, mode: AttentionMode, tokens: usize) -> AttentionMode {
        match mode {
            AttentionMode::Auto if tokens <= self.landmarks => AttentionMode::Exact,
            AttentionMode::Auto => AttentionMode::Nystrom,
            m => m,
        }
    }
}

/// Query/key/value projections (heads packed column-wise, head `h` owning
/// columns `h·d_k..(h+1)·d_k`) and the output projection `W₀`.
#[derive(Clone, Debug)]
pub struct MhsaWeights {
    cfg: AttentionConfig,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

/// Attention output plus the class token's attention over instances.
pub struct AttentionOutput {
    pub out: Var,
    pub class_attention: Vec<f64>,
}

impl MhsaWeights {
    pub fn build<F: Real>(cfg: AttentionConfig, store: &mut ParamStore<F>, init: &mut Init, name: &str) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let wq = store.add(format!("{name}.wq"), init.fan_in(&[d, d], d));
        let wk = store.add(format!("{name}.wk"), init.fan_in(&[d, d], d));
        let wv = store.add(format!("{name}.wv"), init.fan_in(&[d, d], d));
        let wo = store.add(format!("{name}.wo"), init.fan_in(&[d, d], d));
        Ok(Self { cfg, wq, wk, wv, wo })
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.cfg
    }

    fn project<F: Real>(&self, g: &mut Graph<F>, p: &Bindings, x: Var) -> Result<(Var, Var, Var)> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.cfg.d_model {
            return Err(Error::dim(format!(
                "attention expects N x {} tokens, got {shape:?}",
                self.cfg.d_model
            )));
        }
        Ok((g.matmul(x, p[self.wq])?, g.matmul(x, p[self.wk])?, g.matmul(x, p[self.wv])?))
    }

    fn heads<F: Real>(&self, g: &mut Graph<F>, m: Var) -> Result<Vec<Var>> {
        let dk = self.cfg.head_dim();
        (0..self.cfg.num_heads)
            .map(|h| g.slice_cols(m, h * dk, (h + 1) * dk))
            .collect()
    }

    /// Runs attention in `mode`. Tokens at index `valid..` are padding: exact
    /// attention masks them as keys, the Nyström path drops them.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &Bindings,
        x: Var,
        mode: AttentionMode,
        valid: usize,
    ) -> Result<AttentionOutput> {
        let n = g.shape(x)[0];
        match self.cfg.resolve(mode, valid) {
            AttentionMode::Nystrom if valid < n => {
                let kept = g.slice_rows(x, 0, valid)?;
                let res = self.nystrom(g, p, kept)?;
                let pad = g.constant(Tensor::zeros(&[n - valid, self.cfg.d_model]));
                let out = g.concat(&[res.out, pad], 0)?;
                Ok(AttentionOutput {
                    out,
                    class_attention: res.class_attention,
                })
            }
            AttentionMode::Nystrom => self.nystrom(g, p, x),
            _ => self.exact_masked(g, p, x, valid),
        }
    }

    /// Full softmax attention.
    pub fn exact<F: Real>(&self, g: &mut Graph<F>, p: &Bindings, x: Var) -> Result<AttentionOutput> {
        let n = g.shape(x)[0];
        self.exact_masked(g, p, x, n)
    }

    fn exact_masked<F: Real>(&self, g: &mut Graph<F>, p: &Bindings, x: Var, valid: usize) -> Result<AttentionOutput> {
        let (q, k, v) = self.project(g, p, x)?;
        let n = g.shape(x)[0];
        let scale = F::c(1.0 / (self.cfg.head_dim() as f64).sqrt());
        let mask = (valid < n).then(|| {
            let bias: Vec<f64> = (0..n).map(|j| if j < valid { 0.0 } else { MASK_BIAS }).collect();
            g.constant(Tensor::from_f64(&[1, n], &bias).expect("mask shape"))
        });
        let (qh, kh, vh) = (self.heads(g, q)?, self.heads(g, k)?, self.heads(g, v)?);
        let mut outs = Vec::with_capacity(qh.len());
        for h in 0..qh.len() {
            let s = g.matmul_nt(qh[h], kh[h])?;
            let mut s = g.scale(s, scale);
            if let Some(m) = mask {
                s = g.add(s, m)?;
            }
            let a = g.softmax_last(s);
            outs.push(g.matmul(a, vh[h])?);
        }
        let class_attention = class_row(g, &qh, &kh, valid)?;
        let cat = g.concat(&outs, 1)?;
        let out = g.matmul(cat, p[self.wo])?;
        Ok(AttentionOutput { out, class_attention })
    }

    /// Landmark approximation:
    /// `softmax(Q K̃ᵀ/√d_k) · pinv(softmax(Q̃ K̃ᵀ/√d_k)) · softmax(Q̃ Kᵀ/√d_k) · V`
    /// with landmarks formed as contiguous segment means.
    pub fn nystrom<F: Real>(&self, g: &mut Graph<F>, p: &Bindings, x: Var) -> Result<AttentionOutput> {
        let (q, k, v) = self.project(g, p, x)?;
        let n = g.shape(x)[0];
        let scale = F::c(1.0 / (self.cfg.head_dim() as f64).sqrt());
        let seg = g.constant(segment_means(n, self.cfg.landmarks));
        let (qh, kh, vh) = (self.heads(g, q)?, self.heads(g, k)?, self.heads(g, v)?);
        let mut outs = Vec::with_capacity(qh.len());
        for h in 0..qh.len() {
            let ql = g.matmul(seg, qh[h])?;
            let kl = g.matmul(seg, kh[h])?;
            let s1 = g.matmul_nt(qh[h], kl)?;
            let s1 = g.scale(s1, scale);
            let k1 = g.softmax_last(s1);
            let s2 = g.matmul_nt(ql, kl)?;
            let s2 = g.scale(s2, scale);
            let k2 = g.softmax_last(s2);
            let s3 = g.matmul_nt(ql, kh[h])?;
            let s3 = g.scale(s3, scale);
            let k3 = g.softmax_last(s3);
            let z = pinv_graph(g, k2, self.cfg.pinv_iters)?;
            let k3v = g.matmul(k3, vh[h])?;
            let zk3v = g.matmul(z, k3v)?;
            outs.push(g.matmul(k1, zk3v)?);
        }
        let class_attention = class_row(g, &qh, &kh, n)?;
        let cat = g.concat(&outs, 1)?;
        let out = g.matmul(cat, p[self.wo])?;
        Ok(AttentionOutput { out, class_attention })
    }

    /// Class-token attention over the instance rows of `x` (row 0 is the
    /// class token), averaged over heads.
    pub fn class_token_attention<F: Real>(&self, store: &ParamStore<F>, x: &Tensor<F>) -> Result<Vec<f64>> {
        if x.shape().len() != 2 || x.rows() < 2 {
            return Err(Error::usage("class-token attention needs at least one instance row"));
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(x.clone());
        let (q, k, _) = self.project(&mut g, &p, xv)?;
        let qh = self.heads(&mut g, q)?;
        let kh = self.heads(&mut g, k)?;
        class_row(&mut g, &qh, &kh, x.rows())
    }
}

/// Softmax of the class-token query against the valid instance keys,
/// averaged over heads. Computed from recorded values, outside the tape.
/// Empty when there are no instance rows.
fn class_row<F: Real>(g: &mut Graph<F>, qh: &[Var], kh: &[Var], valid: usize) -> Result<Vec<f64>> {
    if valid < 2 {
        return Ok(Vec::new());
    }
    let t = valid - 1;
    let mut acc = vec![0.0f64; t];
    for (&q, &k) in qh.iter().zip(kh) {
        let dk = g.shape(q)[1];
        let scale = 1.0 / (dk as f64).sqrt();
        let (qv, kv) = (g.value(q), g.value(k));
        let q0: Vec<f64> = qv[..dk].iter().map(|v| v.f64()).collect();
        let mut scores: Vec<f64> = (1..valid)
            .map(|j| {
                kv[j * dk..(j + 1) * dk]
                    .iter()
                    .zip(&q0)
                    .map(|(a, b)| a.f64() * b)
                    .sum::<f64>()
                    * scale
            })
            .collect();
        softmax_in_place(&mut scores);
        for (a, s) in acc.iter_mut().zip(&scores) {
            *a += s;
        }
    }
    let heads = qh.len() as f64;
    acc.iter_mut().for_each(|a| *a /= heads);
    Ok(acc)
}

/// Averaging matrix over contiguous segments of `⌈n/landmarks⌉` rows, one
/// per output row; leftover rows join the last segment.
pub fn segment_means<F: Real>(n: usize, landmarks: usize) -> Tensor<F> {
    let size = n.div_ceil(landmarks.max(1)).max(1);
    let m = n / size;
    let mut s = vec![0.0f64; m * n];
    for seg in 0..m {
        let start = seg * size;
        let end = if seg + 1 == m { n } else { start + size };
        let w = 1.0 / (end - start) as f64;
        for j in start..end {
            s[seg * n + j] = w;
        }
    }
    Tensor::from_f64(&[m, n], &s).expect("segment matrix shape")
}

/// Iterative pseudo-inverse recorded on the tape, gradient flowing through the
/// initial guess as well.
pub fn pinv_graph<F: Real>(g: &mut Graph<F>, a: Var, iters: usize) -> Result<Var> {
    let m = g.shape(a)[0];
    let eye = |c: f64| {
        let mut t = Tensor::<F>::identity(m);
        t.data_mut().iter_mut().for_each(|v| *v *= F::c(c));
        t
    };
    let (i7, i15, i13) = (g.constant(eye(7.0)), g.constant(eye(15.0)), g.constant(eye(13.0)));
    let mut z = g.pinv_init(a)?;
    for _ in 0..iters {
        let az = g.matmul(a, z)?;
        let t1 = g.sub(i7, az)?;
        let t1 = g.matmul(az, t1)?;
        let t2 = g.sub(i15, t1)?;
        let t2 = g.matmul(az, t2)?;
        let t3 = g.sub(i13, t2)?;
        let zq = g.scale(z, F::c(0.25));
        z = g.matmul(zq, t3)?;
    }
    Ok(z)
}

/// Moore-Penrose pseudo-inverse approximation by the stabilized cubic
/// iteration `Z ← ¼ Z (13I − AZ(15I − AZ(7I − AZ)))`, started from
/// `Aᵀ/(‖A‖₁‖A‖∞)`.
pub fn iterative_pinv<F: Real>(a: &Tensor<F>, iters: usize) -> Result<Tensor<F>> {
    if a.shape().len() != 2 || a.rows() != a.cols() {
        return Err(Error::dim(format!("pseudo-inverse needs a square matrix, got {:?}", a.shape())));
    }
    if iters == 0 {
        return Err(Error::config("pseudo-inverse needs at least one iteration"));
    }
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let z = pinv_graph(&mut g, av, iters)?;
    Ok(g.tensor(z))
}
