//! Learnable wavelet positional encoding.
//!
//! Each bank holds `n_W` Mexican-hat bases per channel with learnable scale
//! `a = softplus(θ) + a_min` and translation `b`. The encoding of an
//! instance sequence `X` (`T × L`) is the sum over bases of the channel-wise
//! same-padded convolution of `X` with the sampled kernels
//! `a^{-1/2} ψ((t - b) / a)`, `t ∈ {-(K-1)/2, …, (K-1)/2}`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Lower bound on every learned scale.
pub const A_MIN: f64 = 1e-2;

/// Scales at initialization are log-spaced over this range.
const INIT_SCALE_RANGE: (f64, f64) = (0.5, 4.0);

fn hat_norm() -> f64 {
    2.0 / (3f64.sqrt() * std::f64::consts::PI.powf(0.25))
}

/// L²-normalized Mexican hat (Ricker) mother wavelet.
pub fn mexican_hat(t: f64) -> f64 {
    hat_norm() * (1.0 - t * t) * (-0.5 * t * t).exp()
}

pub(crate) fn mexican_hat_with_derivative<F: Real>(u: F) -> (F, F) {
    let c = F::c(hat_norm());
    let u2 = u * u;
    let e = (-F::c(0.5) * u2).exp();
    let psi = c * (F::one() - u2) * e;
    let dpsi = c * e * u * (u2 - F::c(3.0));
    (psi, dpsi)
}

/// Samples `a^{-1/2} ψ((t - b)/a)` at the `taps` integer offsets centred on 0.
pub fn discretize_kernel(a: f64, b: f64, taps: usize) -> Result<Vec<f64>> {
    if taps.is_multiple_of(2) {
        return Err(Error::config(format!("wavelet kernel taps {taps} must be odd")));
    }
    if !(a >= A_MIN) {
        return Err(Error::config(format!("wavelet scale {a} below minimum {A_MIN}")));
    }
    let half = (taps - 1) as f64 / 2.0;
    Ok((0..taps)
        .map(|i| {
            let t = i as f64 - half;
            mexican_hat((t - b) / a) / a.sqrt()
        })
        .collect())
}

/// Inverse of the scale parameterization.
pub fn theta_for_scale(a: f64) -> f64 {
    let x = a - A_MIN;
    assert!(x > 0.0, "scale must exceed the minimum");
    // ln(exp(x) - 1), written to stay finite for large x
    x + (-(-x).exp()).ln_1p()
}

#[derive(Clone, Debug, PartialEq)]
pub struct WaveletConfig {
    pub n_bases: usize,
    pub channels: usize,
    pub taps: usize,
    /// One `(a, b)` per basis shared by every channel instead of per channel.
    pub shared: bool,
}

/// Handles of one bank's parameters: `theta` and `shift` are
/// `[n_bases × channels]` (or `[n_bases × 1]` when shared).
#[derive(Clone, Debug)]
pub struct WaveletBank {
    cfg: WaveletConfig,
    theta: ParamId,
    shift: ParamId,
}

impl WaveletBank {
    pub fn build<F: Real>(cfg: WaveletConfig, store: &mut ParamStore<F>, name: &str) -> Result<Self> {
        if cfg.taps.is_multiple_of(2) {
            return Err(Error::config(format!("wavelet kernel taps {} must be odd", cfg.taps)));
        }
        if cfg.n_bases == 0 || cfg.channels == 0 {
            return Err(Error::config("wavelet bank needs at least one basis and channel"));
        }
        let cols = if cfg.shared { 1 } else { cfg.channels };
        let (lo, hi) = INIT_SCALE_RANGE;
        let n = cfg.n_bases;
        let mut theta = Vec::with_capacity(n * cols);
        for j in 0..n {
            let frac = if n == 1 { 0.0 } else { j as f64 / (n - 1) as f64 };
            let a = (lo.ln() + frac * (hi.ln() - lo.ln())).exp();
            theta.extend(std::iter::repeat_n(theta_for_scale(a), cols));
        }
        let theta = store.add(format!("{name}.theta"), Tensor::from_f64(&[n, cols], &theta)?);
        let shift = store.add(format!("{name}.shift"), Tensor::zeros(&[n, cols]));
        Ok(Self { cfg, theta, shift })
    }

    pub fn config(&self) -> &WaveletConfig {
        &self.cfg
    }

    /// Current `(a, b)` per basis and channel, row-major `[n_bases × cols]`.
    pub fn scales_and_shifts<F: Real>(&self, store: &ParamStore<F>) -> Vec<(f64, f64)> {
        let th = store.get(self.theta).data();
        let sh = store.get(self.shift).data();
        th.iter()
            .zip(sh)
            .map(|(&t, &b)| (crate::tensor::graph_softplus(t).f64() + A_MIN, b.f64()))
            .collect()
    }

    pub fn theta_id(&self) -> ParamId {
        self.theta
    }

    pub fn shift_id(&self) -> ParamId {
        self.shift
    }

    /// Encoding of `x` (`T × L`, class token excluded), scaled by `gate`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bindings, x: Var, gate: f64) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.channels {
            return Err(Error::dim(format!(
                "wavelet bank has {} channels, input is {shape:?}",
                self.cfg.channels
            )));
        }
        let kernels = g.wavelet_kernels(p[self.theta], p[self.shift], self.cfg.taps, A_MIN)?;
        // Convolution is linear in the kernel, so the per-basis transforms
        // can be summed through a single combined kernel.
        let combined = g.sum_axis(kernels, 0)?;
        let combined = if gate == 1.0 { combined } else { g.scale(combined, F::c(gate)) };
        let xt = g.transpose(x)?;
        let conv = g.conv1d_same(xt, combined)?;
        g.transpose(conv)
    }
}

/// Writes `(bank, basis, channel, a, b)` rows for every bank.
pub fn export_csv<F: Real>(
    banks: &[&WaveletBank],
    store: &ParamStore<F>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["bank", "basis", "channel", "a", "b"])?;
    for (bi, bank) in banks.iter().enumerate() {
        let cols = if bank.cfg.shared { 1 } else { bank.cfg.channels };
        for (e, (a, b)) in bank.scales_and_shifts(store).into_iter().enumerate() {
            w.write_record([
                bi.to_string(),
                (e / cols).to_string(),
                (e % cols).to_string(),
                a.to_string(),
                b.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
