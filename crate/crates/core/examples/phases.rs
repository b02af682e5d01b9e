use std::time::Instant;
use tlm_core::config::{ModelConfig, TrainConfig};
use tlm_core::model::LanguageModel;
use tlm_core::train::{synthetic_corpus, train_val_split, Batcher, Vocab, AdamW, clip_grad_norm, global_grad_norm};
use tlm_core::tensor::{cross_entropy_smoothed, no_grad};
use rand::SeedableRng;

fn main() {
    let corpus = synthetic_corpus(300_000, 1);
    let vocab = Vocab::from_corpus(&corpus);
    let mcfg = ModelConfig {
        n_layers: 4, d_model: 128, n_heads: 4, d_intermediate: 256,
        context_len: 128, vocab_size: vocab.size(),
        ..ModelConfig::default()
    };
    let tcfg = TrainConfig { batch_size: 16, seq_len: 128, total_steps: 1000, seed: 0, ..TrainConfig::default() };
    let stream = vocab.encode_strict(&corpus).unwrap();
    let (tr, _va) = train_val_split(&stream, 0.02);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let model = LanguageModel::<f32>::new(&mcfg, &mut rng).unwrap();
    let batcher = Batcher::new(tr, 16, 128, 0).unwrap();
    let batches = batcher.epoch(0);
    let params = model.parameters();
    let mut opt = AdamW::new(&params, &tcfg);
    let n = 12;

    // forward only (no grad)
    let t0 = Instant::now();
    for b in batches.iter().take(n) {
        let mut inp = Vec::new();
        for w in b { inp.extend_from_slice(&w.input); }
        no_grad(|| model.forward_batched(&inp, b.len()).unwrap());
    }
    println!("fwd-nograd: {:.0} ms/step", t0.elapsed().as_secs_f64()*1e3 / n as f64);

    // forward with graph
    let t0 = Instant::now();
    for b in batches.iter().take(n) {
        let mut inp = Vec::new(); let mut tgt = Vec::new();
        for w in b { inp.extend_from_slice(&w.input); tgt.extend_from_slice(&w.target); }
        let logits = model.forward_batched(&inp, b.len()).unwrap();
        let _l = cross_entropy_smoothed(&logits, &tgt, 0.1).unwrap();
    }
    println!("fwd-graph:  {:.0} ms/step", t0.elapsed().as_secs_f64()*1e3 / n as f64);

    // full step
    let t0 = Instant::now();
    for b in batches.iter().take(n) {
        for p in &params { p.tensor.zero_grad(); }
        let mut inp = Vec::new(); let mut tgt = Vec::new();
        for w in b { inp.extend_from_slice(&w.input); tgt.extend_from_slice(&w.target); }
        let logits = model.forward_batched(&inp, b.len()).unwrap();
        let l = cross_entropy_smoothed(&logits, &tgt, 0.1).unwrap();
        l.backward().unwrap();
        let _gn = global_grad_norm(&params).unwrap();
        clip_grad_norm(&params, 1.0).unwrap();
        opt.step(&params, 1e-3).unwrap();
    }
    println!("full-step:  {:.0} ms/step", t0.elapsed().as_secs_f64()*1e3 / n as f64);
}
