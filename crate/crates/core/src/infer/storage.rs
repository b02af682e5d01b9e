//! Byte accounting: fp32 vs packed storage per layer, per section, and
//! overall.

use serde::Serialize;

use crate::config::ModelConfig;
use crate::model::LanguageModel;
use crate::tensor::Elem;

#[derive(Debug, Clone, Serialize)]
pub struct LayerStorage {
    pub name: String,
    pub params: usize,
    /// 4 bytes per parameter.
    pub fp32_bytes: u64,
    /// Quantized layers: 2 bits per weight (0.25 B/param) + one fp32 alpha.
    /// Full-precision layers: same as fp32.
    pub packed_bytes: u64,
    pub quantized: bool,
    pub section: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct StorageReport {
    pub layers: Vec<LayerStorage>,
    pub fp32_total: u64,
    pub packed_total: u64,
    pub fp32_embeddings: u64,
    pub packed_embeddings: u64,
    pub fp32_transformer: u64,
    pub packed_transformer: u64,
    /// fp32 / packed over quantized layers only.
    pub ratio_quantized: f64,
    /// fp32 / packed over the whole model.
    pub ratio_overall: f64,
}

const SEC_EMBED: &str = "embeddings";
const SEC_TRANSFORMER: &str = "transformer";

fn layer_entry(name: &str, params: usize, quantized: bool, section: &'static str) -> LayerStorage {
    let fp32 = 4 * params as u64;
    let packed = if quantized {
        params.div_ceil(4) as u64 + 4
    } else {
        fp32
    };
    LayerStorage {
        name: name.to_string(),
        params,
        fp32_bytes: fp32,
        packed_bytes: packed,
        quantized,
        section,
    }
}

fn build_report(layers: Vec<LayerStorage>) -> StorageReport {
    let sum = |f: &dyn Fn(&LayerStorage) -> bool, packed: bool| -> u64 {
        layers
            .iter()
            .filter(|l| f(l))
            .map(|l| if packed { l.packed_bytes } else { l.fp32_bytes })
            .sum()
    };
    let fp32_total = sum(&|_| true, false);
    let packed_total = sum(&|_| true, true);
    let fp32_q = sum(&|l: &LayerStorage| l.quantized, false);
    let packed_q = sum(&|l: &LayerStorage| l.quantized, true);
    let fp32_embeddings = sum(&|l: &LayerStorage| l.section == SEC_EMBED, false);
    let packed_embeddings = sum(&|l: &LayerStorage| l.section == SEC_EMBED, true);
    StorageReport {
        fp32_total,
        packed_total,
        fp32_embeddings,
        packed_embeddings,
        fp32_transformer: fp32_total - fp32_embeddings,
        packed_transformer: packed_total - packed_embeddings,
        ratio_quantized: if packed_q > 0 {
            fp32_q as f64 / packed_q as f64
        } else {
            1.0
        },
        ratio_overall: fp32_total as f64 / packed_total as f64,
        layers,
    }
}

/// Analytic accounting straight from an architecture configuration.
pub fn storage_report_for_config(cfg: &ModelConfig) -> StorageReport {
    let d = cfg.d_model;
    let quant = cfg.quantize;
    let exception_quant = cfg.quantize && cfg.quantize_embeddings;
    let mut layers = Vec::new();
    layers.push(layer_entry(
        "embed",
        cfg.vocab_size * d,
        exception_quant,
        SEC_EMBED,
    ));
    for i in 0..cfg.n_layers {
        for (suffix, params) in [
            ("attn_q", d * d),
            ("attn_k", d * d),
            ("attn_v", d * d),
            ("attn_o", d * d),
            ("mlp_up", cfg.d_intermediate * d),
            ("mlp_down", d * cfg.d_intermediate),
        ] {
            layers.push(layer_entry(
                &format!("blocks.{i}.{suffix}"),
                params,
                quant,
                SEC_TRANSFORMER,
            ));
        }
        layers.push(layer_entry(
            &format!("blocks.{i}.norm1.gain"),
            d,
            false,
            SEC_TRANSFORMER,
        ));
        layers.push(layer_entry(
            &format!("blocks.{i}.norm2.gain"),
            d,
            false,
            SEC_TRANSFORMER,
        ));
    }
    layers.push(layer_entry("final_norm.gain", d, false, SEC_TRANSFORMER));
    layers.push(layer_entry(
        "output",
        cfg.vocab_size * d,
        exception_quant,
        SEC_EMBED,
    ));
    build_report(layers)
}

/// Accounting over an instantiated model.
pub fn storage_report<E: Elem>(model: &LanguageModel<E>) -> StorageReport {
    let mut layers = Vec::new();
    layers.push(layer_entry(
        "embed",
        model.embed.weight_count(),
        model.embed.quantize_enabled,
        SEC_EMBED,
    ));
    for (i, b) in model.blocks.iter().enumerate() {
        for l in b.layers() {
            layers.push(layer_entry(
                &l.name,
                l.weight_count(),
                l.quantize_enabled,
                SEC_TRANSFORMER,
            ));
        }
        layers.push(layer_entry(
            &format!("blocks.{i}.norm1.gain"),
            model.cfg.d_model,
            false,
            SEC_TRANSFORMER,
        ));
        layers.push(layer_entry(
            &format!("blocks.{i}.norm2.gain"),
            model.cfg.d_model,
            false,
            SEC_TRANSFORMER,
        ));
    }
    layers.push(layer_entry(
        "final_norm.gain",
        model.cfg.d_model,
        false,
        SEC_TRANSFORMER,
    ));
    layers.push(layer_entry(
        "output",
        model.output.weight_count(),
        model.output.quantize_enabled,
        SEC_EMBED,
    ));
    build_report(layers)
}

pub fn report_text(r: &StorageReport) -> String {
    let mb = |b: u64| b as f64 / (1024.0 * 1024.0);
    let mut s = String::new();
    s.push_str("layer,params,fp32_bytes,packed_bytes,quantized,section\n");
    for l in &r.layers {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            l.name, l.params, l.fp32_bytes, l.packed_bytes, l.quantized, l.section
        ));
    }
    s.push_str(&format!(
        "# embeddings: {:.2} MB fp32 → {:.2} MB packed\n",
        mb(r.fp32_embeddings),
        mb(r.packed_embeddings)
    ));
    s.push_str(&format!(
        "# transformer: {:.2} MB fp32 → {:.2} MB packed\n",
        mb(r.fp32_transformer),
        mb(r.packed_transformer)
    ));
    s.push_str(&format!(
        "# total: {:.2} MB fp32 → {:.2} MB packed (quantized-layer ratio {:.2}x, overall {:.2}x)\n",
        mb(r.fp32_total),
        mb(r.packed_total),
        r.ratio_quantized,
        r.ratio_overall
    ));
    s
}
