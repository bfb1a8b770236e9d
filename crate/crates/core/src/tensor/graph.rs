use super::{broadcast_index, broadcast_shape, gemm, split_axis, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul { a: usize, b: usize, tb: bool },
    Transpose(usize),
    Reshape(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    Exp(usize),
    Sigmoid(usize),
    Relu(usize),
    Gelu(usize),
    Square(usize),
    Softplus(usize),
    SoftmaxLast(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Sum { a: usize, axis: usize },
    Mean { a: usize, axis: usize },
    Max { a: usize, arg: Vec<usize> },
    DepthwiseConv { x: usize, k: usize },
    Conv { x: usize, w: usize },
    MaxPool { x: usize, arg: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize },
    Wavelet { theta: usize, shift: usize, taps: usize, a_min: F },
    PinvInit { a: usize, col: usize, row: usize, n1: F, ninf: F },
    OvrBce { logits: usize, label: usize },
}

struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    grad: Option<Vec<F>>,
    op: Op<F>,
    tracked: bool,
}

/// Operation tape for one forward pass.
///
/// Nodes are appended in execution order, so inputs always precede the
/// operations that consume them.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    track_decisions: bool,
    decisions: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track_decisions: false,
            decisions: FNV_OFFSET,
        }
    }

    /// Records a fingerprint of every branch taken by non-smooth operations
    /// (relu sign, max/argmax positions). Finite-difference checks compare
    /// fingerprints to detect perturbations that cross a kink.
    pub fn with_decision_tracking(mut self) -> Self {
        self.track_decisions = true;
        self
    }

    pub fn decision_signature(&self) -> u64 {
        self.decisions
    }

    fn note(&mut self, v: u64) {
        if self.track_decisions {
            self.decisions = (self.decisions ^ v).wrapping_mul(FNV_PRIME);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, inputs: &[usize]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let tracked = inputs.iter().any(|&i| self.nodes[i].tracked);
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, shape: &[usize], value: Vec<F>, tracked: bool) -> Var {
        self.nodes.push(Node {
            shape: shape.to_vec(),
            value,
            grad: None,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf holding a copy of `t`; gradients are tracked when the
    /// tensor requires them.
    pub fn param(&mut self, t: &Tensor<F>) -> Var {
        self.leaf(t.shape(), t.data().to_vec(), t.requires_grad())
    }

    /// Records a leaf that always receives gradients.
    pub fn variable(&mut self, t: Tensor<F>) -> Var {
        let shape = t.shape().to_vec();
        self.leaf(&shape, t.into_data(), true)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        let shape = t.shape().to_vec();
        self.leaf(&shape, t.into_data(), false)
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    /// Adds the gradient held by leaf `v` into `t`'s accumulator.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<F>) {
        if let (Some(src), Some(dst)) = (self.grad(v), t.grad_mut()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += *s;
            }
        }
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(format!("{what}: expected a 2-D tensor, got {s:?}"))),
        }
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        Ok(self.push(vec![m, n], out, Op::MatMul { a: a.0, b: b.0, tb: false }, &[a.0, b.0]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (n, k2) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions disagree: {:?} x {:?}ᵀ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), true, &mut out, false);
        Ok(self.push(vec![m, n], out, Op::MatMul { a: a.0, b: b.0, tb: true }, &[a.0, b.0]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let src = self.value(a);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose(a.0), &[a.0]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() || shape.contains(&0) {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(a)
            )));
        }
        let v = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), v, Op::Reshape(a.0), &[a.0]))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<(Vec<usize>, Vec<F>)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (va, vb) = (self.value(a), self.value(b));
        if sa == sb {
            return Ok((sa, va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()));
        }
        let out = broadcast_shape(&sa, &sb)?;
        let ia = broadcast_index(&out, &sa);
        let ib = broadcast_index(&out, &sb);
        let v = ia.iter().zip(&ib).map(|(&i, &j)| f(va[i], vb[j])).collect();
        Ok((out, v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(s, v, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(s, v, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(s, v, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    fn unary(&mut self, a: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let v = self.value(a).iter().map(|&x| f(x)).collect();
        let s = self.shape(a).to_vec();
        self.push(s, v, op, &[a.0])
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        self.unary(a, Op::Scale(a.0, c), |x| x * c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), |x| x.exp())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a.0), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        if self.track_decisions {
            let bits: Vec<bool> = self.value(a).iter().map(|&x| x > F::zero()).collect();
            for b in bits {
                self.note(b as u64 + 1);
            }
        }
        self.unary(a, Op::Relu(a.0), |x| if x > F::zero() { x } else { F::zero() })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a.0), |x| gelu(x).0)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a.0), |x| x * x)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a.0), softplus)
    }

    // ---- normalisation --------------------------------------------------

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let n = *self.shape(a).last().expect("rank >= 1");
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let s = self.shape(a).to_vec();
        self.push(s, out, Op::SoftmaxLast(a.0), &[a.0])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::config("layer norm eps must be positive"));
        }
        let d = *self.shape(x).last().expect("rank >= 1");
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::dim(format!(
                "layer norm width {d} vs gain {:?} / bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let eps = F::c(eps);
        let dn = F::c(d as f64);
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let rows = xv.len() / d;
        let mut out = vec![F::zero(); xv.len()];
        let mut xhat = vec![F::zero(); xv.len()];
        let mut rstd = vec![F::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv[c] + bv[c];
            }
        }
        let s = self.shape(x).to_vec();
        Ok(self.push(
            s,
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
            &[x.0, gain.0, bias.0],
        ))
    }

    // ---- reductions -----------------------------------------------------

    fn reduced_shape(&self, a: Var, axis: usize) -> Result<Vec<usize>> {
        let s = self.shape(a);
        if axis >= s.len() {
            return Err(Error::dim(format!("axis {axis} out of range for shape {s:?}")));
        }
        let mut out: Vec<usize> = s.to_vec();
        out.remove(axis);
        if out.is_empty() {
            out.push(1);
        }
        Ok(out)
    }

    fn reduce(&self, a: Var, axis: usize, init: F, f: impl Fn(F, F) -> F) -> Vec<F> {
        let (outer, len, inner) = split_axis(self.shape(a), axis);
        let v = self.value(a);
        let mut out = vec![init; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    let slot = &mut out[o * inner + i];
                    *slot = f(*slot, v[base + i]);
                }
            }
        }
        out
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.reduced_shape(a, axis)?;
        let out = self.reduce(a, axis, F::zero(), |s, x| s + x);
        Ok(self.push(shape, out, Op::Sum { a: a.0, axis }, &[a.0]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.reduced_shape(a, axis)?;
        let n = F::c(self.shape(a)[axis] as f64);
        let out = self
            .reduce(a, axis, F::zero(), |s, x| s + x)
            .into_iter()
            .map(|s| s / n)
            .collect();
        Ok(self.push(shape, out, Op::Mean { a: a.0, axis }, &[a.0]))
    }

    /// Maximum along `axis`; the gradient goes to the first maximal element.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.reduced_shape(a, axis)?;
        let (outer, len, inner) = split_axis(self.shape(a), axis);
        let v = self.value(a);
        let mut out = vec![F::zero(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for k in 1..len {
                    let idx = (o * len + k) * inner + i;
                    if v[idx] > v[best] {
                        best = idx;
                    }
                }
                out[o * inner + i] = v[best];
                arg[o * inner + i] = best;
            }
        }
        for &i in &arg {
            self.note(i as u64);
        }
        Ok(self.push(shape, out, Op::Max { a: a.0, arg }, &[a.0]))
    }

    // ---- convolution ----------------------------------------------------

    /// Depthwise same-padded correlation. `x` is `[channels × T]`, `kernels`
    /// is `[channels × K]` (or `[1 × K]`, shared by every channel), `K` odd.
    pub fn conv1d_same(&mut self, x: Var, kernels: Var) -> Result<Var> {
        let (c, t) = self.dims2(x, "conv1d_same input")?;
        let (kc, k) = self.dims2(kernels, "conv1d_same kernels")?;
        if k % 2 == 0 {
            return Err(Error::config(format!("convolution kernel length {k} must be odd")));
        }
        if kc != c && kc != 1 {
            return Err(Error::dim(format!(
                "kernel bank has {kc} rows for {c} channels"
            )));
        }
        let half = (k - 1) / 2;
        let (xv, kv) = (self.value(x), self.value(kernels));
        let mut out = vec![F::zero(); c * t];
        for ch in 0..c {
            let kr = if kc == 1 { 0 } else { ch };
            let kern = &kv[kr * k..(kr + 1) * k];
            let xs = &xv[ch * t..(ch + 1) * t];
            let ys = &mut out[ch * t..(ch + 1) * t];
            for (tap, &w) in kern.iter().enumerate() {
                let (lo, hi) = tap_range(t, tap, half);
                for ti in lo..hi {
                    ys[ti] += xs[ti + tap - half] * w;
                }
            }
        }
        Ok(self.push(vec![c, t], out, Op::DepthwiseConv { x: x.0, k: kernels.0 }, &[x.0, kernels.0]))
    }

    /// Dense same-padded correlation over time. `x` is `[T × C_in]`, `w` is
    /// `[K × C_in × C_out]` with `K` odd; output is `[T × C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (t, ci) = self.dims2(x, "conv1d input")?;
        let (k, wci, co) = match self.shape(w) {
            [a, b, c] => (*a, *b, *c),
            s => return Err(Error::dim(format!("conv1d weights must be 3-D, got {s:?}"))),
        };
        if wci != ci {
            return Err(Error::dim(format!(
                "conv1d expects {wci} input channels, got {ci}"
            )));
        }
        if k % 2 == 0 {
            return Err(Error::config(format!("convolution kernel length {k} must be odd")));
        }
        let half = (k - 1) / 2;
        let mut out = vec![F::zero(); t * co];
        let (xv, wv) = (self.value(x), self.value(w));
        for tap in 0..k {
            let (lo, hi) = tap_range(t, tap, half);
            if lo >= hi {
                continue;
            }
            let src = lo + tap - half;
            let r = hi - lo;
            gemm(
                r,
                ci,
                co,
                &xv[src * ci..(src + r) * ci],
                false,
                &wv[tap * ci * co..(tap + 1) * ci * co],
                false,
                &mut out[lo * co..hi * co],
                true,
            );
        }
        Ok(self.push(vec![t, co], out, Op::Conv { x: x.0, w: w.0 }, &[x.0, w.0]))
    }

    /// Stride-1 max pooling over a centred window of 3 time steps on a
    /// `[T × C]` input; out-of-range neighbours are ignored.
    pub fn maxpool3(&mut self, x: Var) -> Result<Var> {
        let (t, c) = self.dims2(x, "maxpool input")?;
        let xv = self.value(x);
        let mut out = vec![F::zero(); t * c];
        let mut arg = vec![0usize; t * c];
        for ti in 0..t {
            let lo = ti.saturating_sub(1);
            let hi = (ti + 2).min(t);
            for ch in 0..c {
                let mut best = lo * c + ch;
                for s in lo + 1..hi {
                    if xv[s * c + ch] > xv[best] {
                        best = s * c + ch;
                    }
                }
                out[ti * c + ch] = xv[best];
                arg[ti * c + ch] = best;
            }
        }
        for &i in &arg {
            self.note(i as u64);
        }
        Ok(self.push(vec![t, c], out, Op::MaxPool { x: x.0, arg }, &[x.0]))
    }

    // ---- structural -----------------------------------------------------

    /// Concatenates 2-D tensors along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat of zero tensors"));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.dims2(p, "concat"))
            .collect::<Result<_>>()?;
        let out_shape = match axis {
            0 => {
                let c = dims[0].1;
                if dims.iter().any(|d| d.1 != c) {
                    return Err(Error::dim(format!("row concat with widths {dims:?}")));
                }
                vec![dims.iter().map(|d| d.0).sum(), c]
            }
            1 => {
                let r = dims[0].0;
                if dims.iter().any(|d| d.0 != r) {
                    return Err(Error::dim(format!("column concat with heights {dims:?}")));
                }
                vec![r, dims.iter().map(|d| d.1).sum()]
            }
            _ => return Err(Error::dim(format!("concat axis {axis} out of range"))),
        };
        let mut out = Vec::with_capacity(out_shape[0] * out_shape[1]);
        if axis == 0 {
            for &p in parts {
                out.extend_from_slice(self.value(p));
            }
        } else {
            for r in 0..out_shape[0] {
                for (&p, &(_, c)) in parts.iter().zip(&dims) {
                    out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
                }
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(out_shape, out, Op::Concat { parts: ids.clone(), axis }, &ids))
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2(a, "slice_rows")?;
        if start >= end || end > r {
            return Err(Error::dim(format!("row range {start}..{end} of {r} rows")));
        }
        let v = self.value(a)[start * c..end * c].to_vec();
        Ok(self.push(vec![end - start, c], v, Op::SliceRows { a: a.0, start }, &[a.0]))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2(a, "slice_cols")?;
        if start >= end || end > c {
            return Err(Error::dim(format!("column range {start}..{end} of {c} columns")));
        }
        let src = self.value(a);
        let mut v = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            v.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        Ok(self.push(vec![r, end - start], v, Op::SliceCols { a: a.0, start }, &[a.0]))
    }

    // ---- fused model-specific operations --------------------------------

    /// Sampled Mexican-hat kernels. `theta` and `shift` are `[bases × channels]`;
    /// the scale of each entry is `softplus(theta) + a_min`. Output is
    /// `[bases × channels × taps]`, tap `i` sampled at `i - (taps-1)/2`.
    pub fn wavelet_kernels(&mut self, theta: Var, shift: Var, taps: usize, a_min: f64) -> Result<Var> {
        if taps.is_multiple_of(2) {
            return Err(Error::config(format!("wavelet kernel taps {taps} must be odd")));
        }
        let (nb, nc) = self.dims2(theta, "wavelet scales")?;
        if self.shape(shift) != [nb, nc] {
            return Err(Error::dim(format!(
                "wavelet translations {:?} vs scales {:?}",
                self.shape(shift),
                self.shape(theta)
            )));
        }
        let a_min = F::c(a_min);
        let half = (taps - 1) / 2;
        let (tv, bv) = (self.value(theta), self.value(shift));
        let mut out = Vec::with_capacity(nb * nc * taps);
        for (&th, &b) in tv.iter().zip(bv) {
            let a = softplus(th) + a_min;
            for i in 0..taps {
                let t = F::c(i as f64 - half as f64);
                out.push(wavelet_tap(a, b, t).0);
            }
        }
        Ok(self.push(
            vec![nb, nc, taps],
            out,
            Op::Wavelet {
                theta: theta.0,
                shift: shift.0,
                taps,
                a_min,
            },
            &[theta.0, shift.0],
        ))
    }

    /// `Aᵀ / (‖A‖₁ ‖A‖∞)`, the starting point of the iterative pseudo-inverse.
    pub fn pinv_init(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "pinv_init")?;
        if m != n {
            return Err(Error::dim(format!("pseudo-inverse needs a square matrix, got {m}x{n}")));
        }
        let v = self.value(a);
        let mut col_sums = vec![F::zero(); n];
        let mut row_sums = vec![F::zero(); m];
        for i in 0..m {
            for j in 0..n {
                let x = v[i * n + j].abs();
                col_sums[j] += x;
                row_sums[i] += x;
            }
        }
        let (col, n1) = first_max(&col_sums);
        let (row, ninf) = first_max(&row_sums);
        let s = n1 * ninf;
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j] / s;
            }
        }
        // A selection among values equal up to rounding (softmax rows all sum
        // to one) is not a decision: any choice yields the same norm.
        if !near_tie(&col_sums, col) {
            self.note(col as u64);
        }
        if !near_tie(&row_sums, row) {
            self.note(row as u64);
        }
        Ok(self.push(vec![n, m], out, Op::PinvInit { a: a.0, col, row, n1, ninf }, &[a.0]))
    }

    /// Mean over classes of the binary cross entropy between
    /// `sigmoid(logits)` and the one-hot encoding of `label`.
    pub fn ovr_bce(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits);
        let c = z.len();
        if c < 2 {
            return Err(Error::usage(format!("one-vs-rest loss needs at least 2 classes, got {c}")));
        }
        if label >= c {
            return Err(Error::usage(format!("label {label} out of range for {c} classes")));
        }
        let total: F = z
            .iter()
            .enumerate()
            .map(|(k, &zk)| if k == label { softplus(zk) - zk } else { softplus(zk) })
            .sum();
        let loss = total / F::c(c as f64);
        Ok(self.push(vec![1], vec![loss], Op::OvrBce { logits: logits.0, label }, &[logits.0]))
    }

    // ---- backward -------------------------------------------------------

    /// Propagates d(loss)/d(node) to every tracked node. Leaf gradients
    /// accumulate across repeated calls; intermediate gradients are reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        self.add_grad(loss.0, &[F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn add_grad(&mut self, id: usize, contrib: &[F]) {
        let node = &mut self.nodes[id];
        if !node.tracked {
            return;
        }
        let g = node.grad.get_or_insert_with(|| vec![F::zero(); node.value.len()]);
        for (d, &s) in g.iter_mut().zip(contrib) {
            *d += s;
        }
    }

    fn add_grad_indexed(&mut self, id: usize, idx: &[usize], contrib: &[F]) {
        let node = &mut self.nodes[id];
        if !node.tracked {
            return;
        }
        let g = node.grad.get_or_insert_with(|| vec![F::zero(); node.value.len()]);
        for (&i, &s) in idx.iter().zip(contrib) {
            g[i] += s;
        }
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes[id].tracked
    }

    fn val(&self, id: usize) -> &[F] {
        &self.nodes[id].value
    }

    fn broadcast_back(&mut self, out_shape: &[usize], id: usize, contrib: Vec<F>) {
        if !self.tracked(id) {
            return;
        }
        let src = self.nodes[id].shape.clone();
        if src == out_shape {
            self.add_grad(id, &contrib);
        } else {
            let idx = broadcast_index(out_shape, &src);
            self.add_grad_indexed(id, &idx, &contrib);
        }
    }

    fn backprop(&mut self, i: usize, op: &Op<F>, g: &[F]) {
        let out_shape = self.nodes[i].shape.clone();
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b, tb } => {
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = out_shape[1];
                if self.tracked(a) {
                    let mut da = vec![F::zero(); m * k];
                    // tb=false: G·Bᵀ with B stored k×n; tb=true: G·B with B stored n×k.
                    gemm(m, n, k, g, false, self.val(b), !tb, &mut da, false);
                    self.add_grad(a, &da);
                }
                if self.tracked(b) {
                    let db = if tb {
                        let mut db = vec![F::zero(); n * k];
                        gemm(n, m, k, g, true, self.val(a), false, &mut db, false);
                        db
                    } else {
                        let mut db = vec![F::zero(); k * n];
                        gemm(k, m, n, self.val(a), true, g, false, &mut db, false);
                        db
                    };
                    self.add_grad(b, &db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out_shape[1], out_shape[0]);
                let mut da = vec![F::zero(); r * c];
                for x in 0..r {
                    for y in 0..c {
                        da[x * c + y] = g[y * r + x];
                    }
                }
                self.add_grad(a, &da);
            }
            Op::Reshape(a) => self.add_grad(a, g),
            Op::Add(a, b) => {
                self.broadcast_back(&out_shape, a, g.to_vec());
                self.broadcast_back(&out_shape, b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.broadcast_back(&out_shape, a, g.to_vec());
                self.broadcast_back(&out_shape, b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.nodes[a].shape.clone(), self.nodes[b].shape.clone());
                let ia = broadcast_index(&out_shape, &sa);
                let ib = broadcast_index(&out_shape, &sb);
                if self.tracked(a) {
                    let vb = self.val(b);
                    let da: Vec<F> = g.iter().zip(&ib).map(|(&x, &j)| x * vb[j]).collect();
                    self.add_grad_indexed(a, &ia, &da);
                }
                if self.tracked(b) {
                    let va = self.val(a);
                    let db: Vec<F> = g.iter().zip(&ia).map(|(&x, &j)| x * va[j]).collect();
                    self.add_grad_indexed(b, &ib, &db);
                }
            }
            Op::Scale(a, c) => {
                let da: Vec<F> = g.iter().map(|&x| x * c).collect();
                self.add_grad(a, &da);
            }
            Op::Exp(a) => {
                let y = &self.nodes[i].value;
                let da: Vec<F> = g.iter().zip(y).map(|(&x, &v)| x * v).collect();
                self.add_grad(a, &da);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                let da: Vec<F> = g
                    .iter()
                    .zip(y)
                    .map(|(&x, &v)| x * v * (F::one() - v))
                    .collect();
                self.add_grad(a, &da);
            }
            Op::Relu(a) => {
                let xv = self.val(a);
                let da: Vec<F> = g
                    .iter()
                    .zip(xv)
                    .map(|(&x, &v)| if v > F::zero() { x } else { F::zero() })
                    .collect();
                self.add_grad(a, &da);
            }
            Op::Gelu(a) => {
                let xv = self.val(a);
                let da: Vec<F> = g.iter().zip(xv).map(|(&x, &v)| x * gelu(v).1).collect();
                self.add_grad(a, &da);
            }
            Op::Square(a) => {
                let xv = self.val(a);
                let two = F::c(2.0);
                let da: Vec<F> = g.iter().zip(xv).map(|(&x, &v)| x * two * v).collect();
                self.add_grad(a, &da);
            }
            Op::Softplus(a) => {
                let xv = self.val(a);
                let da: Vec<F> = g.iter().zip(xv).map(|(&x, &v)| x * sigmoid(v)).collect();
                self.add_grad(a, &da);
            }
            Op::SoftmaxLast(a) => {
                let n = *out_shape.last().expect("rank >= 1");
                let y = &self.nodes[i].value;
                let mut da = vec![F::zero(); y.len()];
                for ((dr, yr), gr) in da.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: F = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((d, &p), &q) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = p * (q - dot);
                    }
                }
                self.add_grad(a, &da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                ref xhat,
                ref rstd,
            } => {
                let d = *out_shape.last().expect("rank >= 1");
                let dn = F::c(d as f64);
                let gv = self.val(gain).to_vec();
                let mut dg = vec![F::zero(); d];
                let mut db = vec![F::zero(); d];
                let mut dx = vec![F::zero(); g.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = F::zero();
                    let mut mean_dh_h = F::zero();
                    for c in 0..d {
                        let dh = gr[c] * gv[c];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[c];
                        dg[c] += gr[c] * hr[c];
                        db[c] += gr[c];
                    }
                    mean_dh = mean_dh / dn;
                    mean_dh_h = mean_dh_h / dn;
                    for c in 0..d {
                        let dh = gr[c] * gv[c];
                        dx[r * d + c] = rs * (dh - mean_dh - hr[c] * mean_dh_h);
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(gain, &dg);
                self.add_grad(bias, &db);
            }
            Op::Sum { a, axis } | Op::Mean { a, axis } => {
                let (outer, len, inner) = split_axis(&self.nodes[a].shape, axis);
                let scale = if matches!(op, Op::Mean { .. }) {
                    F::one() / F::c(len as f64)
                } else {
                    F::one()
                };
                let mut da = vec![F::zero(); outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        for ii in 0..inner {
                            da[(o * len + k) * inner + ii] = g[o * inner + ii] * scale;
                        }
                    }
                }
                self.add_grad(a, &da);
            }
            Op::Max { a, ref arg, .. } | Op::MaxPool { x: a, ref arg } => {
                self.add_grad_indexed(a, arg, g);
            }
            Op::DepthwiseConv { x, k } => {
                let (c, t) = (out_shape[0], out_shape[1]);
                let (kc, kl) = (self.nodes[k].shape[0], self.nodes[k].shape[1]);
                let half = (kl - 1) / 2;
                let (xv, kv) = (self.val(x), self.val(k));
                let mut dx = vec![F::zero(); c * t];
                let mut dk = vec![F::zero(); kc * kl];
                for ch in 0..c {
                    let kr = if kc == 1 { 0 } else { ch };
                    for tap in 0..kl {
                        let w = kv[kr * kl + tap];
                        let (lo, hi) = tap_range(t, tap, half);
                        let mut acc = F::zero();
                        for ti in lo..hi {
                            let src = ch * t + ti + tap - half;
                            let gg = g[ch * t + ti];
                            dx[src] += gg * w;
                            acc += gg * xv[src];
                        }
                        dk[kr * kl + tap] += acc;
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(k, &dk);
            }
            Op::Conv { x, w } => {
                let (t, ci) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                let (kl, co) = (self.nodes[w].shape[0], self.nodes[w].shape[2]);
                let half = (kl - 1) / 2;
                let (tx, tw) = (self.tracked(x), self.tracked(w));
                let mut dx = vec![F::zero(); if tx { t * ci } else { 0 }];
                let mut dw = vec![F::zero(); if tw { kl * ci * co } else { 0 }];
                let (xv, wv) = (self.val(x), self.val(w));
                for tap in 0..kl {
                    let (lo, hi) = tap_range(t, tap, half);
                    if lo >= hi {
                        continue;
                    }
                    let src = lo + tap - half;
                    let r = hi - lo;
                    let gr = &g[lo * co..hi * co];
                    if tx {
                        gemm(
                            r,
                            co,
                            ci,
                            gr,
                            false,
                            &wv[tap * ci * co..(tap + 1) * ci * co],
                            true,
                            &mut dx[src * ci..(src + r) * ci],
                            true,
                        );
                    }
                    if tw {
                        gemm(
                            ci,
                            r,
                            co,
                            &xv[src * ci..(src + r) * ci],
                            true,
                            gr,
                            false,
                            &mut dw[tap * ci * co..(tap + 1) * ci * co],
                            true,
                        );
                    }
                }
                if tx {
                    self.add_grad(x, &dx);
                }
                if tw {
                    self.add_grad(w, &dw);
                }
            }
            Op::Concat { ref parts, axis } => {
                let total_cols = out_shape[1];
                let mut row_off = 0;
                let mut col_off = 0;
                for &p in parts {
                    let (r, c) = (self.nodes[p].shape[0], self.nodes[p].shape[1]);
                    let dp: Vec<F> = if axis == 0 {
                        g[row_off * c..(row_off + r) * c].to_vec()
                    } else {
                        (0..r)
                            .flat_map(|ri| {
                                g[ri * total_cols + col_off..ri * total_cols + col_off + c]
                                    .iter()
                                    .copied()
                            })
                            .collect()
                    };
                    self.add_grad(p, &dp);
                    row_off += r;
                    col_off += c;
                }
            }
            Op::SliceRows { a, start } => {
                let c = out_shape[1];
                let mut da = vec![F::zero(); self.nodes[a].value.len()];
                da[start * c..start * c + g.len()].copy_from_slice(g);
                self.add_grad(a, &da);
            }
            Op::SliceCols { a, start } => {
                let (r, w) = (out_shape[0], out_shape[1]);
                let c = self.nodes[a].shape[1];
                let mut da = vec![F::zero(); r * c];
                for ri in 0..r {
                    da[ri * c + start..ri * c + start + w].copy_from_slice(&g[ri * w..(ri + 1) * w]);
                }
                self.add_grad(a, &da);
            }
            Op::Wavelet {
                theta,
                shift,
                taps,
                a_min,
            } => {
                let half = (taps - 1) / 2;
                let (tv, bv) = (self.val(theta).to_vec(), self.val(shift).to_vec());
                let mut dth = vec![F::zero(); tv.len()];
                let mut dsh = vec![F::zero(); bv.len()];
                for (e, (&th, &b)) in tv.iter().zip(&bv).enumerate() {
                    let a = softplus(th) + a_min;
                    let mut ga = F::zero();
                    let mut gb = F::zero();
                    for tap in 0..taps {
                        let t = F::c(tap as f64 - half as f64);
                        let (_, da, db) = wavelet_tap(a, b, t);
                        let gg = g[e * taps + tap];
                        ga += gg * da;
                        gb += gg * db;
                    }
                    dth[e] = ga * sigmoid(th);
                    dsh[e] = gb;
                }
                self.add_grad(theta, &dth);
                self.add_grad(shift, &dsh);
            }
            Op::PinvInit {
                a,
                col,
                row,
                n1,
                ninf,
            } => {
                let m = self.nodes[a].shape[0];
                let av = self.val(a);
                let s = n1 * ninf;
                let mut da = vec![F::zero(); m * m];
                let mut dot = F::zero();
                for ii in 0..m {
                    for j in 0..m {
                        let gji = g[j * m + ii];
                        da[ii * m + j] = gji / s;
                        dot += gji * av[ii * m + j];
                    }
                }
                let ds = -dot / (s * s);
                for ii in 0..m {
                    let v = av[ii * m + col];
                    da[ii * m + col] += ds * ninf * sign(v);
                }
                for j in 0..m {
                    let v = av[row * m + j];
                    da[row * m + j] += ds * n1 * sign(v);
                }
                self.add_grad(a, &da);
            }
            Op::OvrBce { logits, label } => {
                let z = self.val(logits);
                let c = F::c(z.len() as f64);
                let da: Vec<F> = z
                    .iter()
                    .enumerate()
                    .map(|(k, &zk)| {
                        let target = if k == label { F::one() } else { F::zero() };
                        g[0] * (sigmoid(zk) - target) / c
                    })
                    .collect();
                self.add_grad(logits, &da);
            }
        }
    }
}

/// Output positions `lo..hi` for which input index `t + tap - half` is valid.
fn tap_range(t: usize, tap: usize, half: usize) -> (usize, usize) {
    let lo = half.saturating_sub(tap);
    let hi = (t + half).saturating_sub(tap).min(t);
    (lo, hi.max(lo))
}

fn first_max<F: Real>(v: &[F]) -> (usize, F) {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    (best, v[best])
}

fn near_tie<F: Real>(v: &[F], best: usize) -> bool {
    let tol = v[best].abs().f64() * 1e-12;
    v.iter()
        .enumerate()
        .any(|(i, &x)| i != best && (v[best] - x).f64() <= tol)
}

fn sign<F: Real>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn softplus<F: Real>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

/// tanh-approximated GELU and its derivative.
fn gelu<F: Real>(x: F) -> (F, F) {
    let k = F::c((2.0 / std::f64::consts::PI).sqrt());
    let c = F::c(0.044715);
    let half = F::c(0.5);
    let u = k * (x + c * x * x * x);
    let th = u.tanh();
    let y = half * x * (F::one() + th);
    let du = k * (F::one() + F::c(3.0) * c * x * x);
    let dy = half * (F::one() + th) + half * x * (F::one() - th * th) * du;
    (y, dy)
}

pub(crate) fn softmax_in_place<F: Real>(row: &mut [F]) {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Value of `a^{-1/2} ψ((t - b)/a)` and its partials in `a` and `b`.
pub(crate) fn wavelet_tap<F: Real>(a: F, b: F, t: F) -> (F, F, F) {
    let u = (t - b) / a;
    let (psi, dpsi) = crate::wavelet::mexican_hat_with_derivative(u);
    let inv_sqrt = F::one() / a.sqrt();
    let val = inv_sqrt * psi;
    let da = -F::c(0.5) * val / a + inv_sqrt * dpsi * (-u / a);
    let db = inv_sqrt * dpsi * (-F::one() / a);
    (val, da, db)
}
