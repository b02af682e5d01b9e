//! Decoder-only transformer with ternary projections: pre-norm residual
//! blocks, causal multi-head attention with RoPE, RMSNorm, GELU MLP, and the
//! label-smoothed autoregressive loss.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::quant::TernaryLinear;
use crate::tensor::{cross_entropy_smoothed, embedding_lookup, Elem, Mask, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// 2-D projection latent weight; the only kind weight decay touches.
    Projection,
    /// Per-layer quantization scale; clamped positive after each step.
    Alpha,
    /// Norm gain vector.
    Gain,
    /// Embedding-class exception layer (token table, output projection).
    Embedding,
}

pub struct Param<E: Elem> {
    pub name: String,
    pub tensor: Tensor<E>,
    pub kind: ParamKind,
}

fn quantized_layer<E: Elem, R: Rng>(
    name: &str,
    out: usize,
    inp: usize,
    cfg: &ModelConfig,
    rng: &mut R,
) -> TernaryLinear<E> {
    let mut l = TernaryLinear::new(name, out, inp, cfg.init_std, rng);
    l.quantize_enabled = cfg.quantize;
    l.binary_mode = cfg.binary_mode;
    l.ste_alpha_scaling = cfg.ste_alpha_scaling;
    l
}

pub struct TransformerBlock<E: Elem> {
    pub attn_q: TernaryLinear<E>,
    pub attn_k: TernaryLinear<E>,
    pub attn_v: TernaryLinear<E>,
    pub attn_o: TernaryLinear<E>,
    pub mlp_up: TernaryLinear<E>,
    pub mlp_down: TernaryLinear<E>,
    pub norm1_gain: Tensor<E>,
    pub norm2_gain: Tensor<E>,
}

impl<E: Elem> TransformerBlock<E> {
    fn new(idx: usize, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let di = cfg.d_intermediate;
        TransformerBlock {
            attn_q: quantized_layer(&format!("blocks.{idx}.attn_q"), d, d, cfg, rng),
            attn_k: quantized_layer(&format!("blocks.{idx}.attn_k"), d, d, cfg, rng),
            attn_v: quantized_layer(&format!("blocks.{idx}.attn_v"), d, d, cfg, rng),
            attn_o: quantized_layer(&format!("blocks.{idx}.attn_o"), d, d, cfg, rng),
            mlp_up: quantized_layer(&format!("blocks.{idx}.mlp_up"), di, d, cfg, rng),
            mlp_down: quantized_layer(&format!("blocks.{idx}.mlp_down"), d, di, cfg, rng),
            norm1_gain: Tensor::full(&[d], E::one()).requires_grad(true),
            norm2_gain: Tensor::full(&[d], E::one()).requires_grad(true),
        }
    }

    pub fn layers(&self) -> [&TernaryLinear<E>; 6] {
        [
            &self.attn_q,
            &self.attn_k,
            &self.attn_v,
            &self.attn_o,
            &self.mlp_up,
            &self.mlp_down,
        ]
    }

    /// Pre-norm residual block: x + Attn(Norm(x)), then + MLP(Norm(·)).
    /// `x` holds `batch` sequences stacked as [batch·seq, d_model].
    pub fn forward_batched(
        &self,
        x: &Tensor<E>,
        cfg: &ModelConfig,
        batch: usize,
    ) -> Result<Tensor<E>> {
        let seq = x.shape()[0] / batch;
        let positions: Vec<usize> = (0..seq).collect();
        let norm = |t: &Tensor<E>, gain: &Tensor<E>| -> Result<Tensor<E>> {
            if cfg.use_layernorm {
                t.layernorm(gain, cfg.rmsnorm_eps)
            } else {
                t.rmsnorm(gain, cfg.rmsnorm_eps)
            }
        };

        // attention sub-layer
        let h = norm(x, &self.norm1_gain)?;
        let q = self
            .attn_q
            .forward(&h)?
            .split_heads_batched(cfg.n_heads, batch)?;
        let k = self
            .attn_k
            .forward(&h)?
            .split_heads_batched(cfg.n_heads, batch)?;
        let v = self
            .attn_v
            .forward(&h)?
            .split_heads_batched(cfg.n_heads, batch)?;
        let q = q.rope_apply(&positions, cfg.rope_theta)?;
        let k = k.rope_apply(&positions, cfg.rope_theta)?;
        let scale = E::from_f(1.0 / (cfg.head_dim() as f64).sqrt());
        let scores = q.bmm_nt(&k)?.scale(scale)?;
        let probs = scores.softmax_lastdim(Some(&Mask::Causal))?;
        let ctx = probs.bmm_nn(&v)?.merge_heads_batched(batch)?;
        let mut attn_out = self.attn_o.forward(&ctx)?;
        if cfg.attn_activation_enabled {
            attn_out = attn_out.silu()?;
        }
        let x = x.add(&attn_out)?;

        // MLP sub-layer
        let h = norm(&x, &self.norm2_gain)?;
        let mlp = self
            .mlp_down
            .forward(&self.mlp_up.forward(&h)?.gelu()?)?;
        x.add(&mlp)
    }

    pub fn forward(&self, x: &Tensor<E>, cfg: &ModelConfig) -> Result<Tensor<E>> {
        self.forward_batched(x, cfg, 1)
    }
}

/// Decoder-only language model. The token embedding and output projection are
/// exception layers kept in full precision unless `quantize_embeddings` is set.
pub struct LanguageModel<E: Elem> {
    pub cfg: ModelConfig,
    pub embed: TernaryLinear<E>,
    pub blocks: Vec<TransformerBlock<E>>,
    pub final_gain: Tensor<E>,
    pub output: TernaryLinear<E>,
}

impl<E: Elem> LanguageModel<E> {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let exception_quant = cfg.quantize && cfg.quantize_embeddings;
        let mut embed =
            TernaryLinear::new("embed", cfg.vocab_size, cfg.d_model, cfg.init_std, rng);
        embed.quantize_enabled = exception_quant;
        embed.binary_mode = cfg.binary_mode;
        embed.ste_alpha_scaling = cfg.ste_alpha_scaling;
        let blocks: Vec<TransformerBlock<E>> = (0..cfg.n_layers)
            .map(|i| TransformerBlock::new(i, cfg, rng))
            .collect();
        let final_gain = Tensor::full(&[cfg.d_model], E::one()).requires_grad(true);
        let mut output =
            TernaryLinear::new("output", cfg.vocab_size, cfg.d_model, cfg.init_std, rng);
        output.quantize_enabled = exception_quant;
        output.binary_mode = cfg.binary_mode;
        output.ste_alpha_scaling = cfg.ste_alpha_scaling;
        Ok(LanguageModel {
            cfg: cfg.clone(),
            embed,
            blocks,
            final_gain,
            output,
        })
    }

    /// Hidden states [batch·seq, d_model] after the final norm, for `batch`
    /// equal-length sequences concatenated into one token buffer.
    pub fn final_hidden_batched(&self, tokens: &[u32], batch: usize) -> Result<Tensor<E>> {
        if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
            return Err(Error::Data(format!(
                "batched forward needs equal-length sequences, got {} tokens in {batch} sequences",
                tokens.len()
            )));
        }
        let seq = tokens.len() / batch;
        if seq > self.cfg.context_len {
            return Err(Error::Data(format!(
                "sequence length {seq} exceeds context_len {}",
                self.cfg.context_len
            )));
        }
        let table = if let Some(p) = self.embed.packed_matrix() {
            // inference-only model: materialize alpha · signs for the gather
            let a = E::from_f(p.alpha() as f64);
            let data: Vec<E> = p
                .unpack()?
                .iter()
                .map(|&s| match s {
                    1 => a,
                    -1 => -a,
                    _ => E::zero(),
                })
                .collect();
            Tensor::from_vec(&[self.cfg.vocab_size, self.cfg.d_model], data)?
        } else if self.embed.quantize_enabled {
            self.embed.quantize()?
        } else {
            self.embed
                .weight()
                .ok_or_else(|| Error::Quant("embedding table missing".into()))?
                .clone()
        };
        let mut x = embedding_lookup(&table, tokens)?;
        for block in &self.blocks {
            x = block.forward_batched(&x, &self.cfg, batch)?;
        }
        if self.cfg.use_layernorm {
            x.layernorm(&self.final_gain, self.cfg.rmsnorm_eps)
        } else {
            x.rmsnorm(&self.final_gain, self.cfg.rmsnorm_eps)
        }
    }

    /// Hidden states [seq, d_model] after the final norm.
    pub fn final_hidden(&self, tokens: &[u32]) -> Result<Tensor<E>> {
        self.final_hidden_batched(tokens, 1)
    }

    /// Logits [batch·seq, vocab] for concatenated equal-length sequences.
    pub fn forward_batched(&self, tokens: &[u32], batch: usize) -> Result<Tensor<E>> {
        let x = self.final_hidden_batched(tokens, batch)?;
        self.output.forward(&x)
    }

    /// Logits [seq, vocab] for a token sequence.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor<E>> {
        self.forward_batched(tokens, 1)
    }

    /// Label-smoothed autoregressive loss; targets are the inputs shifted by
    /// one position.
    pub fn loss(&self, logits: &Tensor<E>, targets: &[u32], smoothing: f64) -> Result<Tensor<E>> {
        cross_entropy_smoothed(logits, targets, smoothing)
    }

    /// exp(mean NLL) of next-token predictions over non-overlapping
    /// context-length windows, with no label smoothing.
    pub fn perplexity(&self, stream: &[u32]) -> Result<f64> {
        if stream.len() < 2 {
            return Err(Error::Data(format!(
                "perplexity needs a stream of length ≥ 2, got {}",
                stream.len()
            )));
        }
        let mut total_nll = 0.0f64;
        let mut count = 0usize;
        crate::tensor::no_grad(|| -> Result<()> {
            for window in stream.chunks(self.cfg.context_len) {
                if window.len() < 2 {
                    continue;
                }
                let inputs = &window[..window.len() - 1];
                let targets = &window[1..];
                let logits = self.forward(inputs)?;
                let nll = self.loss(&logits, targets, 0.0)?.item().as_f64();
                total_nll += nll * targets.len() as f64;
                count += targets.len();
            }
            Ok(())
        })?;
        Ok((total_nll / count as f64).exp())
    }

    /// Every trainable tensor in a fixed traversal order.
    pub fn parameters(&self) -> Vec<Param<E>> {
        fn push_layer<E: Elem>(out: &mut Vec<Param<E>>, l: &TernaryLinear<E>, kind: ParamKind) {
            if let Some(w) = l.weight() {
                out.push(Param {
                    name: format!("{}.w", l.name),
                    tensor: w.clone(),
                    kind,
                });
            }
            out.push(Param {
                name: format!("{}.alpha", l.name),
                tensor: l.alpha_tensor().clone(),
                kind: ParamKind::Alpha,
            });
        }
        let mut out = Vec::new();
        push_layer(&mut out, &self.embed, ParamKind::Embedding);
        for (i, b) in self.blocks.iter().enumerate() {
            for l in b.layers() {
                push_layer(&mut out, l, ParamKind::Projection);
            }
            out.push(Param {
                name: format!("blocks.{i}.norm1.gain"),
                tensor: b.norm1_gain.clone(),
                kind: ParamKind::Gain,
            });
            out.push(Param {
                name: format!("blocks.{i}.norm2.gain"),
                tensor: b.norm2_gain.clone(),
                kind: ParamKind::Gain,
            });
        }
        out.push(Param {
            name: "final_norm.gain".into(),
            tensor: self.final_gain.clone(),
            kind: ParamKind::Gain,
        });
        push_layer(&mut out, &self.output, ParamKind::Embedding);
        out
    }

    /// The six quantized projections of every block, in depth order.
    pub fn block_layers(&self) -> Vec<&TernaryLinear<E>> {
        self.blocks.iter().flat_map(|b| b.layers()).collect()
    }

    /// All ternary-capable layers including the exception layers.
    pub fn all_layers(&self) -> Vec<&TernaryLinear<E>> {
        let mut v = vec![&self.embed];
        v.extend(self.block_layers());
        v.push(&self.output);
        v
    }

    /// Freeze every quantized layer's sign pattern (gradient-check mode).
    pub fn freeze_signs(&self) -> Result<()> {
        for l in self.all_layers() {
            if l.quantize_enabled {
                l.freeze_signs()?;
            }
        }
        Ok(())
    }

    pub fn unfreeze_signs(&self) {
        for l in self.all_layers() {
            l.unfreeze_signs();
        }
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.tensor.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_intermediate: 32,
            vocab_size: 11,
            context_len: 32,
            ..ModelConfig::default()
        }
    }

    // ── rmsnorm ─────────────────────────────────────────────────────

    #[test]
    fn rmsnorm_constant_vector() {
        // x = (3,3,3), gain = 1, eps → 0 gives (1,1,1)
        let x = Tensor::from_vec(&[3], vec![3.0f64; 3]).unwrap();
        let g = Tensor::full(&[3], 1.0f64);
        let y = x.rmsnorm(&g, 0.0).unwrap().data_vec();
        for v in y {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rmsnorm_zero_vector_stays_zero() {
        let x = Tensor::<f64>::zeros(&[4]);
        let g = Tensor::full(&[4], 1.0f64);
        let y = x.rmsnorm(&g, 1e-6).unwrap().data_vec();
        assert_eq!(y, vec![0.0; 4]);
    }

    #[test]
    fn rmsnorm_output_rms_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..64).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = Tensor::from_vec(&[64], data).unwrap();
        let g = Tensor::full(&[64], 1.0f64);
        let y = x.rmsnorm(&g, 1e-12).unwrap().data_vec();
        let rms = (y.iter().map(|v| v * v).sum::<f64>() / 64.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-6, "rms {rms}");
    }

    #[test]
    fn rmsnorm_positive_rescale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..32).map(|_| rng.gen_range(0.5..2.0)).collect();
        let g = Tensor::full(&[32], 1.0f64);
        let base = Tensor::from_vec(&[32], data.clone())
            .unwrap()
            .rmsnorm(&g, 1e-9)
            .unwrap()
            .data_vec();
        for c in [0.5f64, 1.3, 2.0] {
            let scaled: Vec<f64> = data.iter().map(|v| v * c).collect();
            let y = Tensor::from_vec(&[32], scaled)
                .unwrap()
                .rmsnorm(&g, 1e-9)
                .unwrap()
                .data_vec();
            for (a, b) in base.iter().zip(y.iter()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    // ── rope ────────────────────────────────────────────────────────

    #[test]
    fn rope_position_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(&[1, 8], data.clone()).unwrap();
        let y = x.rope_apply(&[0], 10_000.0).unwrap().data_vec();
        assert_eq!(y, data);
    }

    #[test]
    fn rope_quarter_rotation() {
        // first pair at angle π/2: (1,0) → (0,1). With head_dim = 2 the pair
        // frequency is 1, so position m rotates by exactly m radians; use an
        // explicit position table to land on π/2 via theta^0.
        let x = Tensor::from_vec(&[1, 2], vec![1.0f64, 0.0]).unwrap();
        // pos·θ^0 = pos; emulate angle π/2 by perturbing... instead compute at
        // pos = 1 with theta arbitrary: angle = 1; check against (cos1, sin1).
        let y = x.rope_apply(&[1], 10_000.0).unwrap().data_vec();
        assert!((y[0] - 1f64.cos()).abs() < 1e-12);
        assert!((y[1] - 1f64.sin()).abs() < 1e-12);
    }

    #[test]
    fn rope_norm_preserved_and_relative_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hd = 8usize;
        let q: Vec<f64> = (0..hd).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..hd).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // per-pair L2 norms preserved
        let qt = Tensor::from_vec(&[1, hd], q.clone()).unwrap();
        let rq = qt.rope_apply(&[7], 10_000.0).unwrap().data_vec();
        for i in 0..hd / 2 {
            let n0 = (q[2 * i].powi(2) + q[2 * i + 1].powi(2)).sqrt();
            let n1 = (rq[2 * i].powi(2) + rq[2 * i + 1].powi(2)).sqrt();
            assert!((n0 - n1).abs() < 1e-6);
        }

        // ⟨RoPE(q,m), RoPE(k,n)⟩ depends only on n−m
        let dot_at = |m: usize, n: usize| -> f64 {
            let a = Tensor::from_vec(&[1, hd], q.clone())
                .unwrap()
                .rope_apply(&[m], 10_000.0)
                .unwrap()
                .data_vec();
            let b = Tensor::from_vec(&[1, hd], k.clone())
                .unwrap()
                .rope_apply(&[n], 10_000.0)
                .unwrap()
                .data_vec();
            a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
        };
        let d1 = dot_at(2, 5);
        let d2 = dot_at(6, 9);
        assert!(
            (d1 - d2).abs() < 1e-5 * d1.abs().max(1.0),
            "shift invariance: {d1} vs {d2}"
        );
    }

    // ── block & model forward ───────────────────────────────────────

    #[test]
    fn zero_gains_make_block_identity() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let block = TransformerBlock::<f64>::new(0, &cfg, &mut rng);
        block.norm1_gain.set_data(vec![0.0; 16]).unwrap();
        block.norm2_gain.set_data(vec![0.0; 16]).unwrap();
        let x = Tensor::randn(&[5, 16], 1.0, &mut rng);
        let y = block.forward(&x, &cfg).unwrap();
        assert_eq!(y.data_vec(), x.data_vec());
    }

    #[test]
    fn single_token_attention_reduces_to_v_projection() {
        // with one token, softmax over one element is 1, so the attention
        // context is exactly the (rope of the) V row; verify the sub-layer
        // output against a manual recomputation through O and SiLU.
        let cfg = ModelConfig {
            attn_activation_enabled: true,
            ..tiny_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let block = TransformerBlock::<f64>::new(0, &cfg, &mut rng);
        let x = Tensor::randn(&[1, 16], 0.5, &mut rng);
        let y = block.forward(&x, &cfg).unwrap();

        let h = x.rmsnorm(&block.norm1_gain, cfg.rmsnorm_eps).unwrap();
        let v = block.attn_v.forward(&h).unwrap();
        // position 0 rope is identity; ctx == v
        let o = block.attn_o.forward(&v).unwrap().silu().unwrap();
        let x1 = x.add(&o).unwrap();
        let h2 = x1.rmsnorm(&block.norm2_gain, cfg.rmsnorm_eps).unwrap();
        let mlp = block
            .mlp_down
            .forward(&block.mlp_up.forward(&h2).unwrap().gelu().unwrap())
            .unwrap();
        let expect = x1.add(&mlp).unwrap();
        assert_eq!(y.data_vec(), expect.data_vec());
    }

    #[test]
    fn logits_are_causal_under_future_token_flips() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = LanguageModel::<f64>::new(&cfg, &mut rng).unwrap();
        let tokens: Vec<u32> = vec![1, 4, 7, 2, 0, 9, 3, 5];
        let base = model.forward(&tokens).unwrap().data_vec();
        let v = cfg.vocab_size;
        for t in 0..tokens.len() - 1 {
            let mut flipped = tokens.clone();
            flipped[t + 1] = (flipped[t + 1] + 3) % v as u32;
            let out = model.forward(&flipped).unwrap().data_vec();
            // rows ≤ t must be bitwise identical
            assert_eq!(
                base[..(t + 1) * v],
                out[..(t + 1) * v],
                "future flip at {} leaked into logits ≤ {t}",
                t + 1
            );
        }
    }

    #[test]
    fn forward_shape_and_token_range() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = LanguageModel::<f32>::new(&cfg, &mut rng).unwrap();
        let logits = model.forward(&[0, 1, 2]).unwrap();
        assert_eq!(logits.shape(), &[3, 11]);
        assert!(model.forward(&[11]).is_err());
        assert!(model.forward(&[]).is_err());
        let too_long: Vec<u32> = vec![0; cfg.context_len + 1];
        assert!(model.forward(&too_long).is_err());
    }

    #[test]
    fn quantize_off_model_equals_plain_linear_stack() {
        // the master switch off must route every projection through the
        // latent weights; rebuild the forward manually from raw tensor ops.
        let cfg = ModelConfig {
            quantize: false,
            ..tiny_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = LanguageModel::<f64>::new(&cfg, &mut rng).unwrap();
        let tokens = [3u32, 1, 4, 1, 5];
        let got = model.forward(&tokens).unwrap().data_vec();

        let positions: Vec<usize> = (0..tokens.len()).collect();
        let mut x =
            crate::tensor::embedding_lookup(model.embed.weight().unwrap(), &tokens).unwrap();
        for b in &model.blocks {
            let h = x.rmsnorm(&b.norm1_gain, cfg.rmsnorm_eps).unwrap();
            let q = h
                .linear(b.attn_q.weight().unwrap())
                .unwrap()
                .split_heads(cfg.n_heads)
                .unwrap()
                .rope_apply(&positions, cfg.rope_theta)
                .unwrap();
            let k = h
                .linear(b.attn_k.weight().unwrap())
                .unwrap()
                .split_heads(cfg.n_heads)
                .unwrap()
                .rope_apply(&positions, cfg.rope_theta)
                .unwrap();
            let v = h
                .linear(b.attn_v.weight().unwrap())
                .unwrap()
                .split_heads(cfg.n_heads)
                .unwrap();
            let scores = q
                .bmm_nt(&k)
                .unwrap()
                .scale(1.0 / (cfg.head_dim() as f64).sqrt())
                .unwrap();
            let probs = scores.softmax_lastdim(Some(&Mask::Causal)).unwrap();
            let ctx = probs.bmm_nn(&v).unwrap().merge_heads().unwrap();
            let o = ctx
                .linear(b.attn_o.weight().unwrap())
                .unwrap()
                .silu()
                .unwrap();
            x = x.add(&o).unwrap();
            let h2 = x.rmsnorm(&b.norm2_gain, cfg.rmsnorm_eps).unwrap();
            let up = h2.linear(b.mlp_up.weight().unwrap()).unwrap().gelu().unwrap();
            let mlp = up.linear(b.mlp_down.weight().unwrap()).unwrap();
            x = x.add(&mlp).unwrap();
        }
        let x = x.rmsnorm(&model.final_gain, cfg.rmsnorm_eps).unwrap();
        let expect = x.linear(model.output.weight().unwrap()).unwrap().data_vec();
        assert_eq!(got, expect);
    }

    // ── loss & perplexity ───────────────────────────────────────────

    #[test]
    fn uniform_logits_loss_is_log_vocab() {
        let v = 7usize;
        let logits = Tensor::<f64>::zeros(&[4, v]);
        for eps in [0.0, 0.1, 0.5] {
            let loss = cross_entropy_smoothed(&logits, &[0, 3, 6, 2], eps)
                .unwrap()
                .item();
            assert!(
                (loss - (v as f64).ln()).abs() < 1e-12,
                "eps {eps}: {loss}"
            );
        }
    }

    #[test]
    fn one_hot_correct_prediction_drives_loss_to_zero() {
        let mut data = vec![0.0f64; 2 * 5];
        data[2] = 1e4;
        data[5 + 4] = 1e4;
        let logits = Tensor::from_vec(&[2, 5], data).unwrap();
        let loss = cross_entropy_smoothed(&logits, &[2, 4], 0.0).unwrap().item();
        assert!(loss.abs() < 1e-9, "{loss}");
    }

    #[test]
    fn loss_matches_direct_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (t, v) = (6usize, 9usize);
        let data: Vec<f64> = (0..t * v).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let targets: Vec<u32> = (0..t).map(|_| rng.gen_range(0..v as u32)).collect();
        let eps = 0.1;
        let logits = Tensor::from_vec(&[t, v], data.clone()).unwrap();
        let loss = cross_entropy_smoothed(&logits, &targets, eps).unwrap().item();

        // independent oracle: explicit smoothed distribution + log softmax
        let mut total = 0.0;
        for r in 0..t {
            let row = &data[r * v..(r + 1) * v];
            let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = maxv + row.iter().map(|x| (x - maxv).exp()).sum::<f64>().ln();
            for (j, &x) in row.iter().enumerate() {
                let q = if j == targets[r] as usize {
                    1.0 - eps
                } else {
                    eps / (v as f64 - 1.0)
                };
                total += q * (lse - x);
            }
        }
        let oracle = total / t as f64;
        assert!((loss - oracle).abs() < 1e-6 * oracle.abs().max(1.0), "{loss} vs {oracle}");
    }

    #[test]
    fn smoothed_loss_lower_bounded_by_target_entropy() {
        let (t, v) = (3usize, 6usize);
        let eps = 0.2;
        let on: f64 = 1.0 - eps;
        let off: f64 = eps / (v as f64 - 1.0);
        let entropy = -(on * on.ln() + (v as f64 - 1.0) * off * off.ln());

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let data: Vec<f64> = (0..t * v).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let targets: Vec<u32> = (0..t).map(|_| rng.gen_range(0..v as u32)).collect();
            let logits = Tensor::from_vec(&[t, v], data).unwrap();
            let loss = cross_entropy_smoothed(&logits, &targets, eps).unwrap().item();
            assert!(loss >= entropy - 1e-12);
        }

        // equality iff the prediction equals the smoothed target
        let targets = [1u32, 0, 5];
        let mut data = vec![0.0f64; t * v];
        for r in 0..t {
            for j in 0..v {
                let q = if j == targets[r] as usize { on } else { off };
                data[r * v + j] = q.ln() + 0.7; // shift-invariant
            }
        }
        let logits = Tensor::from_vec(&[t, v], data).unwrap();
        let loss = cross_entropy_smoothed(&logits, &targets, eps).unwrap().item();
        assert!((loss - entropy).abs() < 1e-12, "{loss} vs {entropy}");
    }

    #[test]
    fn uniform_model_perplexity_equals_vocab_size() {
        let cfg = ModelConfig {
            vocab_size: 11,
            ..tiny_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let model = LanguageModel::<f64>::new(&cfg, &mut rng).unwrap();
        // zero output weights force uniform logits regardless of the hidden state
        model
            .output
            .weight()
            .unwrap()
            .set_data(vec![0.0; 11 * 16])
            .unwrap();
        let stream: Vec<u32> = (0..100u32).map(|i| i % 11).collect();
        let ppl = model.perplexity(&stream).unwrap();
        assert!((ppl - 11.0).abs() < 1e-9, "ppl {ppl}");
    }

    #[test]
    fn perfect_predictor_perplexity_is_one() {
        // kill the blocks with zero gains; route the embedding straight to the
        // output projection and craft orthogonal class directions.
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 4,
            n_heads: 2,
            d_intermediate: 8,
            vocab_size: 2,
            context_len: 64,
            quantize: false,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let model = LanguageModel::<f64>::new(&cfg, &mut rng).unwrap();
        for b in &model.blocks {
            b.norm1_gain.set_data(vec![0.0; 4]).unwrap();
            b.norm2_gain.set_data(vec![0.0; 4]).unwrap();
        }
        let e0 = vec![1.0, 0.0, 0.0, 0.0];
        let e1 = vec![0.0, 1.0, 0.0, 0.0];
        let mut table = Vec::new();
        table.extend_from_slice(&e0);
        table.extend_from_slice(&e1);
        model.embed.weight().unwrap().set_data(table).unwrap();
        // rms of e0/e1 = 1/2 → normed h0 = 2·e0, h1 = 2·e1; predict the OTHER token
        let k = 500.0;
        let mut w = vec![0.0f64; 2 * 4];
        w[0..4].copy_from_slice(&[0.0, k, 0.0, 0.0]); // logit of token 0 high on h1
        w[4..8].copy_from_slice(&[k, 0.0, 0.0, 0.0]); // logit of token 1 high on h0
        model.output.weight().unwrap().set_data(w).unwrap();
        let stream: Vec<u32> = (0..50).map(|i| (i % 2) as u32).collect();
        let ppl = model.perplexity(&stream).unwrap();
        assert!((ppl - 1.0).abs() < 1e-9, "ppl {ppl}");
    }

    #[test]
    fn perplexity_is_exp_of_unsmoothed_loss() {
        let cfg = ModelConfig {
            context_len: 512,
            ..tiny_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let model = LanguageModel::<f64>::new(&cfg, &mut rng).unwrap();
        let stream: Vec<u32> = (0..100).map(|_| rng.gen_range(0..11)).collect();
        let ppl = model.perplexity(&stream).unwrap();
        let logits = model.forward(&stream[..99]).unwrap();
        let loss = model.loss(&logits, &stream[1..], 0.0).unwrap().item();
        assert!(
            ((ppl - loss.exp()) / ppl).abs() < 1e-6,
            "{ppl} vs {}",
            loss.exp()
        );
        assert!(model.perplexity(&stream[..1]).is_err());
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences_small() {
        use crate::tensor::gradcheck::finite_diff_check;
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_intermediate: 12,
            vocab_size: 5,
            context_len: 8,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let model = LanguageModel::<f64>::new(&cfg, &mut rng).unwrap();
        model.freeze_signs().unwrap();
        let tokens = [0u32, 3, 1, 4];
        let f = || {
            let logits = model.forward(&tokens[..3])?;
            model.loss(&logits, &tokens[1..], 0.1)
        };
        for p in model.parameters() {
            let err = finite_diff_check(&f, &p.tensor, 1e-5, 1e-6).unwrap();
            assert!(err < 1e-4, "param {}: grad error {err}", p.name);
        }
    }
}
