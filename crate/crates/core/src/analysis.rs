//! Quantization diagnostics: layer-wise sparsity profiles, weight-distribution
//! histograms, the ablation grid, and the efficiency benchmark.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{kv_diff, FullConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::infer::packed_clone;
use crate::infer::storage::storage_report;
use crate::model::LanguageModel;
use crate::quant::{compute_threshold, QuantStats, TernaryLinear};
use crate::tensor::{no_grad, Elem};
use crate::train::{self, train_val_split, MemorySink, Vocab};

pub const HISTOGRAM_BINS: usize = 101;

/// Fixed-relative-range latent-weight histogram: 101 uniform bins over
/// [−3α, +3α]; out-of-range weights land in the edge bins so counts always
/// conserve the weight total.
#[derive(Debug, Clone)]
pub struct LayerHistogram {
    pub layer_id: String,
    pub alpha: f64,
    pub counts: Vec<u64>,
}

impl LayerHistogram {
    pub fn bin_bounds(&self, i: usize) -> (f64, f64) {
        let lo = -3.0 * self.alpha;
        let width = 6.0 * self.alpha / HISTOGRAM_BINS as f64;
        (lo + i as f64 * width, lo + (i + 1) as f64 * width)
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        let (l, r) = self.bin_bounds(i);
        0.5 * (l + r)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Histogram of one layer's latent weights.
pub fn weight_histogram<E: Elem>(layer: &TernaryLinear<E>) -> Result<LayerHistogram> {
    let w = layer.weight().ok_or_else(|| {
        Error::Quant(format!("layer '{}' has no latent weights", layer.name))
    })?;
    let alpha = layer.alpha_value();
    let lo = -3.0 * alpha;
    let width = 6.0 * alpha / HISTOGRAM_BINS as f64;
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    for &v in w.data().iter() {
        let v = v.as_f64();
        let idx = ((v - lo) / width).floor();
        let idx = if idx < 0.0 {
            0
        } else if idx as usize >= HISTOGRAM_BINS {
            HISTOGRAM_BINS - 1
        } else {
            idx as usize
        };
        counts[idx] += 1;
    }
    Ok(LayerHistogram {
        layer_id: layer.name.clone(),
        alpha,
        counts,
    })
}

/// Histograms for every block projection (depth order).
pub fn weight_histograms<E: Elem>(model: &LanguageModel<E>) -> Result<Vec<LayerHistogram>> {
    model
        .block_layers()
        .iter()
        .filter(|l| l.weight().is_some())
        .map(|l| weight_histogram(l))
        .collect()
}

/// Fraction of weights in bins whose centers lie within ±0.1α of one of the
/// ternary targets {−α, 0, +α}; the clustering statistic behind the
/// distribution-evolution check.
pub fn tri_modality_mass(hist: &LayerHistogram) -> f64 {
    let a = hist.alpha;
    let targets = [-a, 0.0, a];
    let tol = 0.1 * a;
    let mut mass = 0u64;
    for i in 0..HISTOGRAM_BINS {
        let c = hist.bin_center(i);
        if targets.iter().any(|t| (c - t).abs() <= tol) {
            mass += hist.counts[i];
        }
    }
    mass as f64 / hist.total().max(1) as f64
}

#[derive(Debug, Clone)]
pub struct SparsityProfile {
    /// One entry per quantized projection, depth order.
    pub layers: Vec<QuantStats>,
    /// Weight-count-weighted aggregate per block.
    pub blocks: Vec<QuantStats>,
}

impl SparsityProfile {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", QuantStats::CSV_HEADER);
        for q in self.layers.iter().chain(self.blocks.iter()) {
            s.push_str(&q.to_csv_row());
            s.push('\n');
        }
        s
    }
}

fn weighted_aggregate(id: &str, stats: &[QuantStats]) -> QuantStats {
    let total: usize = stats.iter().map(|s| s.weight_count).sum();
    let wmean = |f: &dyn Fn(&QuantStats) -> f64| -> f64 {
        stats
            .iter()
            .map(|s| f(s) * s.weight_count as f64)
            .sum::<f64>()
            / total as f64
    };
    QuantStats {
        layer_id: id.to_string(),
        sparsity: wmean(&|s| s.sparsity),
        fraction_pos: wmean(&|s| s.fraction_pos),
        fraction_neg: wmean(&|s| s.fraction_neg),
        tau: wmean(&|s| s.tau),
        alpha: wmean(&|s| s.alpha),
        weight_count: total,
    }
}

/// Recompute every enabled layer's quantization cache from the current
/// weights (no graph recorded).
pub fn requantize_all<E: Elem>(model: &LanguageModel<E>) -> Result<()> {
    no_grad(|| {
        for l in model.all_layers() {
            if l.quantize_enabled && l.weight().is_some() {
                l.quantize()?;
            }
        }
        Ok(())
    })
}

/// Per-layer and per-block sparsity stats, in depth order. Requires a
/// quantized model with cached sign patterns.
pub fn sparsity_profile<E: Elem>(model: &LanguageModel<E>) -> Result<SparsityProfile> {
    let quantized: Vec<&TernaryLinear<E>> = model
        .block_layers()
        .into_iter()
        .filter(|l| l.quantize_enabled)
        .collect();
    if quantized.is_empty() {
        return Err(Error::Quant(
            "sparsity profile requires a quantized model".into(),
        ));
    }
    let mut layers = Vec::new();
    for l in &quantized {
        layers.push(l.layer_stats()?);
    }
    let per_block = layers.len() / model.blocks.len();
    let blocks = layers
        .chunks(per_block)
        .enumerate()
        .map(|(i, chunk)| weighted_aggregate(&format!("blocks.{i}"), chunk))
        .collect();
    Ok(SparsityProfile { layers, blocks })
}

/// What-if probe: quantization stats for a copy of the embedding table,
/// without touching the model (the table itself stays full precision).
pub fn embedding_whatif_stats<E: Elem>(model: &LanguageModel<E>) -> Result<QuantStats> {
    let w = model.embed.weight().ok_or_else(|| {
        Error::Quant("embedding what-if probe requires latent embedding weights".into())
    })?;
    let wd = w.data();
    let tau = compute_threshold(&wd);
    let signs = crate::quant::ternary_sign(&wd, tau);
    Ok(QuantStats::from_signs(
        "embed.whatif",
        &signs,
        tau,
        model.embed.alpha_value(),
    ))
}

// ── ablation grid ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct AblationResult {
    pub name: String,
    pub final_val_ppl: f64,
    pub final_train_loss: f64,
    pub per_epoch_loss: Vec<f64>,
    pub diverged: bool,
}

/// The full configuration plus the five single-factor variants. Isolation is
/// asserted: each variant differs from base by exactly one key.
pub fn ablation_variants(base: &FullConfig) -> Result<Vec<(String, FullConfig)>> {
    let mut out = vec![("full".to_string(), base.clone())];
    let mut add = |name: &str, f: &dyn Fn(&mut FullConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        out.push((name.to_string(), cfg));
    };
    add("no-learnable-alpha", &|c| c.train.train_alpha = false);
    add("layernorm", &|c| c.model.use_layernorm = true);
    add("no-label-smoothing", &|c| c.train.label_smoothing = 0.0);
    add("binary-only", &|c| c.model.binary_mode = true);
    add("quantized-embeddings", &|c| {
        c.model.quantize_embeddings = true
    });
    let base_kv = base.to_kv();
    for (name, cfg) in out.iter().skip(1) {
        let diff = kv_diff(&base_kv, &cfg.to_kv());
        if diff.len() != 1 {
            return Err(Error::Config(format!(
                "ablation '{name}' is not single-factor: differs in {diff:?}"
            )));
        }
    }
    Ok(out)
}

/// Train all six configurations with identical seed, corpus, and step budget.
/// A diverging run is recorded, not propagated.
pub fn run_ablations(base: &FullConfig, corpus: &str) -> Result<Vec<AblationResult>> {
    let vocab = Vocab::from_corpus(corpus);
    let stream = vocab.encode_strict(corpus)?;
    let (tr, va) = train_val_split(&stream, base.train.val_fraction);
    let mut results = Vec::new();
    for (name, cfg) in ablation_variants(base)? {
        let mut mcfg = cfg.model.clone();
        mcfg.vocab_size = vocab.size();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let model = LanguageModel::<f32>::new(&mcfg, &mut rng)?;
        let mut sink = MemorySink::default();
        match train::train(&model, tr, va, &cfg.train, &mut sink) {
            Ok(summary) => results.push(AblationResult {
                name,
                final_val_ppl: summary.final_val_ppl,
                final_train_loss: summary.final_train_loss,
                per_epoch_loss: summary.epoch_train_loss,
                diverged: false,
            }),
            Err(Error::Divergence(_)) => results.push(AblationResult {
                name,
                final_val_ppl: f64::NAN,
                final_train_loss: f64::NAN,
                per_epoch_loss: sink
                    .epochs
                    .iter()
                    .map(|e| e.train_loss_mean)
                    .collect(),
                diverged: true,
            }),
            Err(other) => return Err(other),
        }
    }
    Ok(results)
}

pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut s = String::from("config,final_val_ppl,final_train_loss,diverged\n");
    for r in results {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.name, r.final_val_ppl, r.final_train_loss, r.diverged
        ));
    }
    s
}

// ── efficiency benchmark ────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub config: String,
    pub path: String,
    pub median_ms_per_token: f64,
    pub iqr_ms: f64,
    pub bytes_fp32: u64,
    pub bytes_packed: u64,
    pub ratio: f64,
    pub peak_working_set_bytes: u64,
}

fn median_iqr(samples: &mut [f64]) -> (f64, f64) {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| -> f64 {
        let idx = p * (samples.len() - 1) as f64;
        let lo = idx.floor() as usize;
        let hi = idx.ceil() as usize;
        let frac = idx - lo as f64;
        samples[lo] * (1.0 - frac) + samples[hi] * frac
    };
    (q(0.5), q(0.75) - q(0.25))
}

/// Inference activation working-set estimate for one forward at batch 1:
/// parameters plus the dominant per-layer activation buffers.
fn working_set_estimate(cfg: &ModelConfig, seq: usize, param_bytes: u64) -> u64 {
    let act_per_layer = seq * (6 * cfg.d_model + 2 * cfg.d_intermediate) + cfg.n_heads * seq * seq;
    param_bytes + (act_per_layer * cfg.n_layers * 4) as u64
}

/// Median / IQR per-token forward latency at batch size 1 for the dense-fp32
/// weightpath and the packed ternary path of the same model.
pub fn efficiency_bench(
    cfg: &ModelConfig,
    seq_len: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<BenchResult>> {
    if repeats < 10 {
        return Err(Error::Config(format!(
            "bench needs ≥ 10 repeats, got {repeats}"
        )));
    }
    let seq = seq_len.min(cfg.context_len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = LanguageModel::<f32>::new(cfg, &mut rng)?;
    let tokens: Vec<u32> = (0..seq)
        .map(|_| rng.gen_range(0..cfg.vocab_size as u32))
        .collect();
    let report = storage_report(&model);
    let config_tag = format!(
        "L{}-d{}-h{}-i{}-v{}",
        cfg.n_layers, cfg.d_model, cfg.n_heads, cfg.d_intermediate, cfg.vocab_size
    );

    let mut time_path = |m: &LanguageModel<f32>| -> Result<(f64, f64)> {
        no_grad(|| m.forward(&tokens)).map(|_| ())?; // warmup
        let mut samples = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t0 = Instant::now();
            no_grad(|| m.forward(&tokens)).map(|_| ())?;
            let ms = t0.elapsed().as_secs_f64() * 1e3;
            samples.push(ms / seq as f64);
        }
        Ok(median_iqr(&mut samples))
    };

    let (dense_med, dense_iqr) = time_path(&model)?;
    let packed = packed_clone(&model)?;
    let (packed_med, packed_iqr) = time_path(&packed)?;

    Ok(vec![
        BenchResult {
            config: config_tag.clone(),
            path: "dense-fp32".into(),
            median_ms_per_token: dense_med,
            iqr_ms: dense_iqr,
            bytes_fp32: report.fp32_total,
            bytes_packed: report.packed_total,
            ratio: report.ratio_overall,
            peak_working_set_bytes: working_set_estimate(cfg, seq, report.fp32_total),
        },
        BenchResult {
            config: config_tag,
            path: "packed-ternary".into(),
            median_ms_per_token: packed_med,
            iqr_ms: packed_iqr,
            bytes_fp32: report.fp32_total,
            bytes_packed: report.packed_total,
            ratio: report.ratio_overall,
            peak_working_set_bytes: working_set_estimate(cfg, seq, report.packed_total),
        },
    ])
}
