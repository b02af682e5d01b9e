//! Model and training configuration with a flat `key=value` text format.
//!
//! One format everywhere: config files, CLI `--set` overrides, checkpoint
//! headers, and run manifests. Keys are prefixed `model.` / `train.`;
//! serialization is sorted so configs diff cleanly.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Transformer architecture configuration. Defaults mirror the full-scale
/// setup (12×768, 12 heads, 2048 intermediate, RoPE θ=10000, RMSNorm ε=1e-6,
/// context 512); desk-scale runs override the sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_intermediate: usize,
    pub rope_theta: f64,
    pub rmsnorm_eps: f64,
    pub vocab_size: usize,
    pub context_len: usize,
    /// Master switch: off reproduces the full-precision baseline exactly.
    pub quantize: bool,
    /// Ablation: also quantize the embedding table and output projection.
    pub quantize_embeddings: bool,
    /// Ablation: binary {−1,+1} signs, no zero code.
    pub binary_mode: bool,
    /// SiLU on the attention sub-layer output (after the O-projection).
    pub attn_activation_enabled: bool,
    /// Ablation: substitute mean-subtracting LayerNorm for RMSNorm.
    pub use_layernorm: bool,
    /// Carry the alpha factor through the straight-through weight gradient.
    pub ste_alpha_scaling: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 12,
            d_model: 768,
            n_heads: 12,
            d_intermediate: 2048,
            rope_theta: 10_000.0,
            rmsnorm_eps: 1e-6,
            vocab_size: 256,
            context_len: 512,
            quantize: true,
            quantize_embeddings: false,
            binary_mode: false,
            attn_activation_enabled: true,
            use_layernorm: false,
            ste_alpha_scaling: true,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "head_dim {} must be even for rotary embedding",
                self.head_dim()
            )));
        }
        if self.context_len < 1 {
            return Err(Error::Config("context_len must be ≥ 1".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be ≥ 2".into()));
        }
        if self.n_layers == 0 || self.d_intermediate == 0 {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self, out: &mut BTreeMap<String, String>) {
        let mut put = |k: &str, v: String| {
            out.insert(format!("model.{k}"), v);
        };
        put("n_layers", self.n_layers.to_string());
        put("d_model", self.d_model.to_string());
        put("n_heads", self.n_heads.to_string());
        put("d_intermediate", self.d_intermediate.to_string());
        put("rope_theta", self.rope_theta.to_string());
        put("rmsnorm_eps", self.rmsnorm_eps.to_string());
        put("vocab_size", self.vocab_size.to_string());
        put("context_len", self.context_len.to_string());
        put("quantize", self.quantize.to_string());
        put("quantize_embeddings", self.quantize_embeddings.to_string());
        put("binary_mode", self.binary_mode.to_string());
        put(
            "attn_activation_enabled",
            self.attn_activation_enabled.to_string(),
        );
        put("use_layernorm", self.use_layernorm.to_string());
        put("ste_alpha_scaling", self.ste_alpha_scaling.to_string());
        put("init_std", self.init_std.to_string());
    }

    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "n_layers" => self.n_layers = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "d_intermediate" => self.d_intermediate = parse(key, value)?,
            "rope_theta" => self.rope_theta = parse(key, value)?,
            "rmsnorm_eps" => self.rmsnorm_eps = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "context_len" => self.context_len = parse(key, value)?,
            "quantize" => self.quantize = parse(key, value)?,
            "quantize_embeddings" => self.quantize_embeddings = parse(key, value)?,
            "binary_mode" => self.binary_mode = parse(key, value)?,
            "attn_activation_enabled" => self.attn_activation_enabled = parse(key, value)?,
            "use_layernorm" => self.use_layernorm = parse(key, value)?,
            "ste_alpha_scaling" => self.ste_alpha_scaling = parse(key, value)?,
            "init_std" => self.init_std = parse(key, value)?,
            other => return Err(Error::UnknownConfigKey(format!("model.{other}"))),
        }
        Ok(())
    }
}

/// Optimization configuration. Defaults mirror the full-scale recipe:
/// AdamW β=(0.9, 0.95), λ=1e-5, peak 1e-3 after 1000 warmup steps with a
/// cosine decay to zero, clip 1.0, smoothing 0.1, batch 64×512.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    /// 0 derives epochs × steps-per-epoch from the corpus.
    pub total_steps: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Extra validation every N steps; 0 = at epoch ends only.
    pub eval_interval: usize,
    /// Checkpoint every N steps; 0 = final checkpoint only.
    pub checkpoint_interval: usize,
    /// Tail fraction of the corpus held out for validation.
    pub val_fraction: f64,
    /// Ablation: false fixes every alpha at its init value.
    pub train_alpha: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 1e-3,
            warmup_steps: 1000,
            total_steps: 0,
            epochs: 15,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 1e-5,
            grad_clip_norm: 1.0,
            batch_size: 64,
            seq_len: 512,
            label_smoothing: 0.1,
            seed: 0,
            eval_interval: 0,
            checkpoint_interval: 0,
            val_fraction: 0.05,
            train_alpha: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 && self.total_steps == 0 {
            return Err(Error::Config("epochs or total_steps must be set".into()));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::Config("batch_size and seq_len must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing must be in [0,1), got {}",
                self.label_smoothing
            )));
        }
        if self.grad_clip_norm <= 0.0 {
            return Err(Error::Config("grad_clip_norm must be > 0".into()));
        }
        if !(0.0..0.9).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 0.9)".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self, out: &mut BTreeMap<String, String>) {
        let mut put = |k: &str, v: String| {
            out.insert(format!("train.{k}"), v);
        };
        put("peak_lr", self.peak_lr.to_string());
        put("warmup_steps", self.warmup_steps.to_string());
        put("total_steps", self.total_steps.to_string());
        put("epochs", self.epochs.to_string());
        put("beta1", self.beta1.to_string());
        put("beta2", self.beta2.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("grad_clip_norm", self.grad_clip_norm.to_string());
        put("batch_size", self.batch_size.to_string());
        put("seq_len", self.seq_len.to_string());
        put("label_smoothing", self.label_smoothing.to_string());
        put("seed", self.seed.to_string());
        put("eval_interval", self.eval_interval.to_string());
        put("checkpoint_interval", self.checkpoint_interval.to_string());
        put("val_fraction", self.val_fraction.to_string());
        put("train_alpha", self.train_alpha.to_string());
    }

    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "peak_lr" => self.peak_lr = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "total_steps" => self.total_steps = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "grad_clip_norm" => self.grad_clip_norm = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seq_len" => self.seq_len = parse(key, value)?,
            "label_smoothing" => self.label_smoothing = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "eval_interval" => self.eval_interval = parse(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, value)?,
            "val_fraction" => self.val_fraction = parse(key, value)?,
            "train_alpha" => self.train_alpha = parse(key, value)?,
            other => return Err(Error::UnknownConfigKey(format!("train.{other}"))),
        }
        Ok(())
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::Config(format!(
            "cannot parse value '{value}' for key '{key}' as {}",
            std::any::type_name::<T>()
        ))
    })
}

/// Combined configuration as used by the CLI and the run manifest.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FullConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl FullConfig {
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        self.model.to_kv(&mut out);
        self.train.to_kv(&mut out);
        out
    }

    pub fn to_text(&self) -> String {
        kv_to_text(&self.to_kv())
    }

    /// Apply one `prefix.key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(k) = key.strip_prefix("model.") {
            self.model.set_key(k, value)
        } else if let Some(k) = key.strip_prefix("train.") {
            self.train.set_key(k, value)
        } else {
            Err(Error::UnknownConfigKey(key.to_string()))
        }
    }

    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in kv {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = FullConfig::default();
        cfg.apply_kv(&parse_kv_text(text)?)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

/// Parse flat `key=value` text: one pair per line, `#` comments, blank lines
/// ignored.
pub fn parse_kv_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected key=value, got '{line}'",
                lineno + 1
            )));
        };
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn kv_to_text(kv: &BTreeMap<String, String>) -> String {
    let mut s = String::new();
    for (k, v) in kv {
        s.push_str(k);
        s.push('=');
        s.push_str(v);
        s.push('\n');
    }
    s
}

/// Keys whose values differ between two flat maps (union of key sets).
pub fn kv_diff(a: &BTreeMap<String, String>, b: &BTreeMap<String, String>) -> Vec<String> {
    let mut keys: Vec<String> = a.keys().chain(b.keys()).cloned().collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .filter(|k| a.get(k) != b.get(k))
        .collect()
}
