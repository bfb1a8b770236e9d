//! Run configuration: a flat JSON object whose keys cover the backbone,
//! attention, wavelet, warm-up and optimizer settings.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Exact,
    Nystrom,
    #[default]
    Auto,
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "nystrom" => Ok(Self::Nystrom),
            "auto" => Ok(Self::Auto),
            other => Err(Error::config(format!("unknown attention mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // optimizer
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    pub lookahead_k: usize,
    pub lookahead_alpha: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub mask_p_choices: Vec<f64>,
    pub validation_fraction: f64,
    pub seed: u64,
    // warm-up
    pub warmup_alpha: f64,
    pub warmup_epochs: usize,
    // backbone
    pub output_dim: usize,
    pub num_blocks: usize,
    pub bottleneck_dim: usize,
    pub kernel_sizes: Vec<usize>,
    pub use_residual: bool,
    // attention
    pub d_model: usize,
    pub num_heads: usize,
    pub landmarks: usize,
    pub pinv_iters: usize,
    pub attention_mode: AttentionMode,
    pub ffn_mult: usize,
    // wavelet positional encoding
    pub n_wavelets: usize,
    pub kernel_taps: usize,
    pub shared_wavelets: bool,
    pub wpe_gate: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
            lookahead_k: 5,
            lookahead_alpha: 0.5,
            batch_size: 16,
            epochs: 100,
            mask_p_choices: vec![0.0, 0.5],
            validation_fraction: 0.0,
            seed: 0,
            warmup_alpha: 0.99,
            warmup_epochs: 10,
            output_dim: 128,
            num_blocks: 3,
            bottleneck_dim: 32,
            kernel_sizes: vec![10, 20, 40],
            use_residual: true,
            d_model: 512,
            num_heads: 8,
            landmarks: 256,
            pinv_iters: 6,
            attention_mode: AttentionMode::Auto,
            ffn_mult: 4,
            n_wavelets: 3,
            kernel_taps: 15,
            shared_wavelets: false,
            wpe_gate: 1.0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay must be >= 0".into());
        }
        if self.adam_betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return fail(format!("adam_betas must lie in [0, 1), got {:?}", self.adam_betas));
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps must be > 0".into());
        }
        if self.lookahead_k == 0 {
            return fail("lookahead_k must be >= 1".into());
        }
        if !(self.lookahead_alpha > 0.0 && self.lookahead_alpha <= 1.0) {
            return fail(format!("lookahead_alpha must lie in (0, 1], got {}", self.lookahead_alpha));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.mask_p_choices.is_empty() || self.mask_p_choices.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return fail(format!("mask_p_choices must be non-empty values in [0, 1], got {:?}", self.mask_p_choices));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return fail("validation_fraction must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_alpha) {
            return fail(format!("warmup_alpha must lie in [0, 1], got {}", self.warmup_alpha));
        }
        if self.output_dim == 0 || !self.output_dim.is_multiple_of(4) {
            return fail(format!("output_dim {} must be a positive multiple of 4", self.output_dim));
        }
        if self.num_blocks == 0 || self.bottleneck_dim == 0 {
            return fail("num_blocks and bottleneck_dim must be >= 1".into());
        }
        if self.kernel_sizes.len() != 3 || self.kernel_sizes.contains(&0) {
            return fail(format!("kernel_sizes needs three positive sizes, got {:?}", self.kernel_sizes));
        }
        if self.d_model == 0 || self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return fail(format!("d_model {} must be divisible by num_heads {}", self.d_model, self.num_heads));
        }
        if self.landmarks == 0 || self.pinv_iters == 0 {
            return fail("landmarks and pinv_iters must be >= 1".into());
        }
        if self.ffn_mult == 0 {
            return fail("ffn_mult must be >= 1".into());
        }
        if self.n_wavelets == 0 {
            return fail("n_wavelets must be >= 1".into());
        }
        if self.kernel_taps.is_multiple_of(2) {
            return fail(format!("kernel_taps {} must be odd", self.kernel_taps));
        }
        if self.wpe_gate != 0.0 && self.wpe_gate != 1.0 {
            return fail(format!("wpe_gate must be 0 or 1, got {}", self.wpe_gate));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            if e.is_data() && e.to_string().contains("unknown field") {
                Error::config(e.to_string())
            } else {
                Error::Json(e)
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Reads and validates a JSON configuration file; missing keys take their
/// defaults and unknown keys are rejected.
pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_json(&text)
}
