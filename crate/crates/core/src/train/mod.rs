//! End-to-end training: per-minibatch requantization, forward, label-smoothed
//! loss, straight-through backward, clipping, AdamW, and the frozen-backbone
//! classifier-head fine-tuning protocol.

pub mod data;
pub mod optim;

pub use data::{synthetic_corpus, train_val_split, Batcher, Vocab, Window};
pub use optim::{clip_grad_norm, global_grad_norm, lr_at, AdamW};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::{weight_histograms, LayerHistogram};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{LanguageModel, Param, ParamKind};
use crate::quant::QuantStats;
use crate::tensor::{cross_entropy_smoothed, no_grad, Elem, Tensor};

/// Divergence guard: abort when the loss exceeds 3× the initial loss for this
/// many consecutive steps (or turns non-finite at any point).
pub const DIVERGENCE_FACTOR: f64 = 3.0;
pub const DIVERGENCE_PATIENCE: usize = 200;

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val_ppl: f64,
    pub train_loss_mean: f64,
    pub quant_stats: Vec<QuantStats>,
    pub histograms: Vec<LayerHistogram>,
}

/// Observer for training progress; implementations write logs, checkpoints,
/// or just collect records in memory.
pub trait TrainSink<E: Elem> {
    fn on_step(&mut self, _rec: &StepRecord) -> Result<()> {
        Ok(())
    }
    fn on_eval(&mut self, _step: usize, _val_ppl: f64) -> Result<()> {
        Ok(())
    }
    fn on_epoch(&mut self, _model: &LanguageModel<E>, _rec: &EpochRecord) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _model: &LanguageModel<E>, _step: usize) -> Result<()> {
        Ok(())
    }
}

/// Collects every record; the default sink for tests.
#[derive(Default)]
pub struct MemorySink {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl<E: Elem> TrainSink<E> for MemorySink {
    fn on_step(&mut self, rec: &StepRecord) -> Result<()> {
        self.steps.push(rec.clone());
        Ok(())
    }
    fn on_epoch(&mut self, _model: &LanguageModel<E>, rec: &EpochRecord) -> Result<()> {
        self.epochs.push(rec.clone());
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps_run: usize,
    pub final_val_ppl: f64,
    pub epoch_train_loss: Vec<f64>,
    pub final_train_loss: f64,
}

/// Fill in `total_steps` from the corpus when it was left at 0.
pub fn resolve_schedule(cfg: &TrainConfig, train_stream_len: usize) -> Result<TrainConfig> {
    let mut cfg = cfg.clone();
    cfg.validate()?;
    if cfg.total_steps == 0 {
        if train_stream_len <= cfg.seq_len {
            return Err(Error::Data(format!(
                "training stream of {train_stream_len} tokens is too short for seq_len {}",
                cfg.seq_len
            )));
        }
        let windows = (train_stream_len - 1) / cfg.seq_len;
        let spe = windows.div_ceil(cfg.batch_size);
        cfg.total_steps = spe * cfg.epochs;
    }
    Ok(cfg)
}

/// Mean batch loss as one graph: the equal-length windows are stacked into a
/// single batched forward, and the position mean over all sequences equals
/// the mean over sequences of per-sequence means.
fn batch_loss<E: Elem>(
    model: &LanguageModel<E>,
    batch: &[Window],
    smoothing: f64,
) -> Result<Tensor<E>> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut inputs = Vec::with_capacity(batch.len() * batch[0].input.len());
    let mut targets = Vec::with_capacity(inputs.capacity());
    for w in batch {
        inputs.extend_from_slice(&w.input);
        targets.extend_from_slice(&w.target);
    }
    let logits = model.forward_batched(&inputs, batch.len())?;
    cross_entropy_smoothed(&logits, &targets, smoothing)
}

/// Train `model` on a pre-encoded token stream. Validation perplexity, layer
/// stats, and weight histograms are emitted at every epoch boundary.
pub fn train<E: Elem>(
    model: &LanguageModel<E>,
    train_stream: &[u32],
    val_stream: &[u32],
    cfg: &TrainConfig,
    sink: &mut dyn TrainSink<E>,
) -> Result<TrainSummary> {
    let cfg = resolve_schedule(cfg, train_stream.len())?;
    if val_stream.len() < 2 {
        return Err(Error::Data(
            "validation stream needs ≥ 2 tokens; adjust val_fraction".into(),
        ));
    }
    let batcher = Batcher::new(train_stream, cfg.batch_size, cfg.seq_len, cfg.seed)?;
    let params = model.parameters();
    let mut opt = AdamW::new(&params, &cfg);
    let mut step = 0usize;
    let mut initial_loss: Option<f64> = None;
    let mut high_loss_streak = 0usize;
    let mut epoch_train_loss = Vec::new();
    let mut last_loss = f64::NAN;
    let mut val_ppl = f64::NAN;

    'epochs: for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for batch in batcher.epoch(epoch) {
            step += 1;
            let lr = lr_at(step, &cfg);
            for p in &params {
                p.tensor.zero_grad();
            }
            let loss_t = batch_loss(model, &batch, cfg.label_smoothing)?;
            let loss = loss_t.item().as_f64();
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss {loss} at step {step}"
                )));
            }
            loss_t.backward()?;
            let grad_norm = global_grad_norm(&params)?;
            clip_grad_norm(&params, cfg.grad_clip_norm)?;
            opt.step(&params, lr)?;

            let init = *initial_loss.get_or_insert(loss);
            if loss > DIVERGENCE_FACTOR * init {
                high_loss_streak += 1;
                if high_loss_streak >= DIVERGENCE_PATIENCE {
                    return Err(Error::Divergence(format!(
                        "loss {loss} above {DIVERGENCE_FACTOR}× initial ({init}) for \
                         {DIVERGENCE_PATIENCE} consecutive steps at step {step}"
                    )));
                }
            } else {
                high_loss_streak = 0;
            }

            loss_sum += loss;
            batches += 1;
            last_loss = loss;
            sink.on_step(&StepRecord {
                step,
                lr,
                loss,
                grad_norm,
            })?;
            if cfg.eval_interval > 0 && step % cfg.eval_interval == 0 {
                sink.on_eval(step, model.perplexity(val_stream)?)?;
            }
            if cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 {
                sink.on_checkpoint(model, step)?;
            }
            if step >= cfg.total_steps {
                // explicit budget exhausted; close out the epoch summary below
                val_ppl = model.perplexity(val_stream)?;
                epoch_train_loss.push(loss_sum / batches as f64);
                emit_epoch(model, epoch, val_ppl, &epoch_train_loss, sink)?;
                break 'epochs;
            }
        }
        val_ppl = model.perplexity(val_stream)?;
        epoch_train_loss.push(loss_sum / batches.max(1) as f64);
        emit_epoch(model, epoch, val_ppl, &epoch_train_loss, sink)?;
    }

    Ok(TrainSummary {
        steps_run: step,
        final_val_ppl: val_ppl,
        epoch_train_loss,
        final_train_loss: last_loss,
    })
}

fn emit_epoch<E: Elem>(
    model: &LanguageModel<E>,
    epoch: usize,
    val_ppl: f64,
    epoch_train_loss: &[f64],
    sink: &mut dyn TrainSink<E>,
) -> Result<()> {
    // the perplexity pass just requantized every enabled layer, so the caches
    // reflect the current weights
    let mut quant_stats = Vec::new();
    for l in model.block_layers() {
        if l.quantize_enabled {
            quant_stats.push(l.layer_stats()?);
        }
    }
    let histograms = weight_histograms(model)?;
    sink.on_epoch(
        model,
        &EpochRecord {
            epoch,
            val_ppl,
            train_loss_mean: *epoch_train_loss.last().unwrap_or(&f64::NAN),
            quant_stats,
            histograms,
        },
    )
}

// ── frozen-backbone classifier fine-tuning ──────────────────────────

#[derive(Debug, Clone)]
pub struct HeadConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            lr: 1e-3,
            epochs: 10,
            seed: 0,
        }
    }
}

/// Task head: pooled hidden state → d_model hidden layer with Tanh → C-way
/// output. Only these parameters train; the backbone stays frozen.
pub struct ClassifierHead<E: Elem> {
    pub w1: Tensor<E>,
    pub b1: Tensor<E>,
    pub w2: Tensor<E>,
    pub b2: Tensor<E>,
    pub n_classes: usize,
}

impl<E: Elem> ClassifierHead<E> {
    pub fn new(d_model: usize, n_classes: usize, rng: &mut impl Rng) -> Self {
        ClassifierHead {
            w1: Tensor::trunc_randn(&[d_model, d_model], 0.02, rng).requires_grad(true),
            b1: Tensor::zeros(&[d_model]).requires_grad(true),
            w2: Tensor::trunc_randn(&[n_classes, d_model], 0.02, rng).requires_grad(true),
            b2: Tensor::zeros(&[n_classes]).requires_grad(true),
            n_classes,
        }
    }

    pub fn params(&self) -> Vec<Param<E>> {
        vec![
            Param {
                name: "head.w1".into(),
                tensor: self.w1.clone(),
                kind: ParamKind::Projection,
            },
            Param {
                name: "head.b1".into(),
                tensor: self.b1.clone(),
                kind: ParamKind::Gain,
            },
            Param {
                name: "head.w2".into(),
                tensor: self.w2.clone(),
                kind: ParamKind::Projection,
            },
            Param {
                name: "head.b2".into(),
                tensor: self.b2.clone(),
                kind: ParamKind::Gain,
            },
        ]
    }

    /// pooled [1, d] → logits [1, C]
    pub fn forward(&self, pooled: &Tensor<E>) -> Result<Tensor<E>> {
        pooled
            .linear(&self.w1)?
            .add(&self.b1)?
            .tanh_op()?
            .linear(&self.w2)?
            .add(&self.b2)
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Set when fewer than two classes appear in the gold labels, which makes
    /// macro-F1 degenerate.
    pub degenerate_f1: bool,
    pub warning: Option<String>,
}

/// Pooled feature: final hidden state at the last non-pad position, detached
/// from the backbone graph.
fn pooled_feature<E: Elem>(model: &LanguageModel<E>, tokens: &[u32]) -> Result<Tensor<E>> {
    let last = tokens
        .iter()
        .rposition(|&t| t != Vocab::PAD)
        .ok_or_else(|| Error::Data("sequence is all padding".into()))?;
    let h = no_grad(|| model.final_hidden(tokens))?;
    let d = h.shape()[1];
    h.select_row(last)?.reshape(&[1, d])
}

/// Train a classifier head on a frozen backbone; backbone parameters are
/// bit-identical before and after. Returns the head and eval metrics
/// (accuracy and macro-F1).
pub fn finetune_classifier<E: Elem>(
    model: &LanguageModel<E>,
    train_pairs: &[(Vec<u32>, usize)],
    eval_pairs: &[(Vec<u32>, usize)],
    hcfg: &HeadConfig,
) -> Result<(ClassifierHead<E>, FinetuneMetrics)> {
    if train_pairs.is_empty() || eval_pairs.is_empty() {
        return Err(Error::Data("empty fine-tuning dataset".into()));
    }
    let n_classes = train_pairs
        .iter()
        .chain(eval_pairs.iter())
        .map(|(_, c)| *c)
        .max()
        .unwrap()
        + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(hcfg.seed);
    let head = ClassifierHead::new(model.cfg.d_model, n_classes.max(2), &mut rng);
    let params = head.params();
    let opt_cfg = TrainConfig {
        weight_decay: 0.0,
        total_steps: 1,
        ..TrainConfig::default()
    };
    let mut opt = AdamW::new(&params, &opt_cfg);

    // the backbone is frozen, so features can be computed once
    let feats: Vec<Tensor<E>> = train_pairs
        .iter()
        .map(|(x, _)| pooled_feature(model, x))
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    for epoch in 0..hcfg.epochs {
        let mut erng = ChaCha8Rng::seed_from_u64(hcfg.seed);
        erng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut erng);
        for &i in &order {
            for p in &params {
                p.tensor.zero_grad();
            }
            let logits = head.forward(&feats[i])?;
            let loss = cross_entropy_smoothed(&logits, &[train_pairs[i].1 as u32], 0.0)?;
            loss.backward()?;
            opt.step(&params, hcfg.lr)?;
        }
    }

    // evaluation
    let mut correct = 0usize;
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (x, y) in eval_pairs {
        let logits = no_grad(|| -> Result<Vec<E>> {
            Ok(head.forward(&pooled_feature(model, x)?)?.data_vec())
        })?;
        let pred = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if pred == *y {
            correct += 1;
        }
        confusion[*y][pred] += 1;
    }
    let accuracy = correct as f64 / eval_pairs.len() as f64;

    let gold_classes: Vec<usize> = (0..n_classes)
        .filter(|&c| confusion[c].iter().sum::<usize>() > 0)
        .collect();
    let mut f1_sum = 0.0;
    for &c in &gold_classes {
        let tp = confusion[c][c] as f64;
        let fp = (0..n_classes).map(|g| confusion[g][c]).sum::<usize>() as f64 - tp;
        let fnn = confusion[c].iter().sum::<usize>() as f64 - tp;
        let f1 = if 2.0 * tp + fp + fnn > 0.0 {
            2.0 * tp / (2.0 * tp + fp + fnn)
        } else {
            0.0
        };
        f1_sum += f1;
    }
    let macro_f1 = f1_sum / gold_classes.len().max(1) as f64;
    let degenerate = gold_classes.len() < 2;
    Ok((
        head,
        FinetuneMetrics {
            accuracy,
            macro_f1,
            degenerate_f1: degenerate,
            warning: degenerate.then(|| {
                "macro-F1 is degenerate: fewer than two classes in the gold labels".to_string()
            }),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn desk_cfg(seed: u64) -> (ModelConfig, TrainConfig) {
        let mcfg = ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            d_intermediate: 64,
            context_len: 64,
            ..ModelConfig::default()
        };
        let tcfg = TrainConfig {
            batch_size: 4,
            seq_len: 32,
            warmup_steps: 20,
            epochs: 1,
            seed,
            val_fraction: 0.1,
            ..TrainConfig::default()
        };
        (mcfg, tcfg)
    }

    fn build(seed: u64, corpus: &str) -> (LanguageModel<f32>, Vec<u32>, Vec<u32>, TrainConfig) {
        let (mut mcfg, tcfg) = desk_cfg(seed);
        let vocab = Vocab::from_corpus(corpus);
        mcfg.vocab_size = vocab.size();
        let stream = vocab.encode_strict(corpus).unwrap();
        let (tr, va) = train_val_split(&stream, tcfg.val_fraction);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = LanguageModel::<f32>::new(&mcfg, &mut rng).unwrap();
        (model, tr.to_vec(), va.to_vec(), tcfg)
    }

    #[test]
    fn single_step_with_zero_lr_leaves_parameters_unchanged() {
        let corpus = synthetic_corpus(20_000, 3);
        let (model, tr, va, mut cfg) = build(3, &corpus);
        cfg.peak_lr = 0.0;
        cfg.total_steps = 1;
        cfg.weight_decay = 0.0;
        let before: Vec<Vec<f32>> = model.parameters().iter().map(|p| p.tensor.data_vec()).collect();
        let mut sink = MemorySink::default();
        let summary = train(&model, &tr, &va, &cfg, &mut sink).unwrap();
        assert_eq!(summary.steps_run, 1);
        let after: Vec<Vec<f32>> = model.parameters().iter().map(|p| p.tensor.data_vec()).collect();
        for (b, a) in before.iter().zip(after.iter()) {
            assert_eq!(b, a);
        }
        // re-running the same batch loss on the untouched model reproduces it
        let batcher = Batcher::new(&tr, cfg.batch_size, cfg.seq_len, cfg.seed).unwrap();
        let batch = &batcher.epoch(0)[0];
        let again = batch_loss(&model, batch, cfg.label_smoothing)
            .unwrap()
            .item() as f64;
        assert_eq!(sink.steps[0].loss, again);
    }

    #[test]
    fn same_seed_gives_bitwise_identical_loss_sequence() {
        let corpus = synthetic_corpus(30_000, 5);
        let run = || {
            let (model, tr, va, mut cfg) = build(9, &corpus);
            cfg.total_steps = 12;
            let mut sink = MemorySink::default();
            train(&model, &tr, &va, &cfg, &mut sink).unwrap();
            sink.steps.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn short_training_run_reduces_loss_and_emits_epoch_records() {
        let corpus = synthetic_corpus(60_000, 7);
        let (model, tr, va, mut cfg) = build(7, &corpus);
        cfg.epochs = 2;
        cfg.warmup_steps = 30;
        let t0 = std::time::Instant::now();
        let mut sink = MemorySink::default();
        let summary = train(&model, &tr, &va, &cfg, &mut sink).unwrap();
        eprintln!(
            "short run: {} steps in {:.1}s, epoch losses {:?}, ppl {:.2}",
            summary.steps_run,
            t0.elapsed().as_secs_f64(),
            summary.epoch_train_loss,
            summary.final_val_ppl
        );
        assert_eq!(sink.epochs.len(), 2);
        assert!(summary.epoch_train_loss[1] < summary.epoch_train_loss[0]);
        assert!(summary.final_val_ppl.is_finite());
        // epoch records carry quant stats and conserving histograms
        let ep = &sink.epochs[1];
        assert_eq!(ep.quant_stats.len(), 12);
        assert_eq!(ep.histograms.len(), 12);
        for h in &ep.histograms {
            let expect = if h.layer_id.contains("mlp") { 32 * 64 } else { 32 * 32 };
            assert_eq!(h.total(), expect, "histogram of {} lost counts", h.layer_id);
        }
    }

    #[test]
    fn finetune_separates_toy_patterns_and_freezes_backbone() {
        let corpus = synthetic_corpus(20_000, 11);
        let (model, _, _, _) = build(11, &corpus);
        let vocab = Vocab::from_corpus(&corpus);

        // two disjoint character patterns
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let make = |class: usize, rng: &mut ChaCha8Rng| -> (Vec<u32>, usize) {
            let word = if class == 0 { "cat dog " } else { "king queen " };
            let reps = rng.gen_range(2..5);
            (vocab.encode_strict(&word.repeat(reps)).unwrap(), class)
        };
        let train_pairs: Vec<_> = (0..40).map(|i| make(i % 2, &mut rng)).collect();
        let eval_pairs: Vec<_> = (0..20).map(|i| make(i % 2, &mut rng)).collect();

        let before: Vec<Vec<f32>> = model.parameters().iter().map(|p| p.tensor.data_vec()).collect();
        let (_, metrics) = finetune_classifier(
            &model,
            &train_pairs,
            &eval_pairs,
            &HeadConfig::default(),
        )
        .unwrap();
        let after: Vec<Vec<f32>> = model.parameters().iter().map(|p| p.tensor.data_vec()).collect();
        for (b, a) in before.iter().zip(after.iter()) {
            assert_eq!(b, a, "backbone changed during fine-tuning");
        }
        assert!(metrics.accuracy >= 0.95, "accuracy {}", metrics.accuracy);
        assert!(!metrics.degenerate_f1);
    }

    #[test]
    fn single_class_dataset_flags_degenerate_f1() {
        let corpus = synthetic_corpus(20_000, 13);
        let (model, _, _, _) = build(13, &corpus);
        let vocab = Vocab::from_corpus(&corpus);
        let pair = (vocab.encode_strict("cat dog cat dog").unwrap(), 0usize);
        let pairs = vec![pair.clone(), pair.clone(), pair];
        let (_, metrics) =
            finetune_classifier(&model, &pairs, &pairs, &HeadConfig::default()).unwrap();
        assert_eq!(metrics.accuracy, 1.0);
        assert!(metrics.degenerate_f1);
        assert!(metrics.warning.is_some());
        assert!(finetune_classifier(&model, &[], &pairs, &HeadConfig::default()).is_err());
    }
}
