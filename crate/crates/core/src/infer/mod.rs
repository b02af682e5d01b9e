//! Inference-side machinery: packed ternary weights, checkpoints, sampling,
//! and storage accounting.

pub mod packed;
pub mod storage;

pub use packed::PackedTernaryMatrix;

use crate::error::Result;
use crate::model::{LanguageModel, TransformerBlock};
use crate::quant::TernaryLinear;
use crate::tensor::Tensor;

fn pack_layer(l: &TernaryLinear<f32>) -> Result<TernaryLinear<f32>> {
    if let Some(p) = l.packed_matrix() {
        return Ok(TernaryLinear::from_packed(&l.name, p.clone()));
    }
    if !l.quantize_enabled {
        return l.clone_fp();
    }
    let (_, signs) = l.signs_now()?;
    let packed = PackedTernaryMatrix::pack(
        &signs,
        l.out_features,
        l.in_features,
        l.alpha_value() as f32,
    )?;
    Ok(TernaryLinear::from_packed(&l.name, packed))
}

/// Inference-only copy of a model with every quantized layer in packed form
/// (signs from the current latent weights) and full-precision layers copied.
pub fn packed_clone(model: &LanguageModel<f32>) -> Result<LanguageModel<f32>> {
    let blocks = model
        .blocks
        .iter()
        .map(|b| {
            Ok(TransformerBlock {
                attn_q: pack_layer(&b.attn_q)?,
                attn_k: pack_layer(&b.attn_k)?,
                attn_v: pack_layer(&b.attn_v)?,
                attn_o: pack_layer(&b.attn_o)?,
                mlp_up: pack_layer(&b.mlp_up)?,
                mlp_down: pack_layer(&b.mlp_down)?,
                norm1_gain: Tensor::from_vec(&[model.cfg.d_model], b.norm1_gain.data_vec())?,
                norm2_gain: Tensor::from_vec(&[model.cfg.d_model], b.norm2_gain.data_vec())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LanguageModel {
        cfg: model.cfg.clone(),
        embed: pack_layer(&model.embed)?,
        blocks,
        final_gain: Tensor::from_vec(&[model.cfg.d_model], model.final_gain.data_vec())?,
        output: pack_layer(&model.output)?,
    })
}
