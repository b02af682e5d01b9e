use tlm_core::config::{ModelConfig, TrainConfig};
use tlm_core::model::LanguageModel;
use tlm_core::train::{self, synthetic_corpus, train_val_split, MemorySink, Vocab};
use rand::SeedableRng;

fn main() {
    let corpus = synthetic_corpus(100_000, 1);
    let vocab = Vocab::from_corpus(&corpus);
    let mcfg = ModelConfig {
        n_layers: 4, d_model: 128, n_heads: 4, d_intermediate: 256,
        context_len: 128, vocab_size: vocab.size(),
        ..ModelConfig::default()
    };
    let tcfg = TrainConfig {
        batch_size: 16, seq_len: 128, warmup_steps: 100, epochs: 1,
        val_fraction: 0.02, seed: 0, ..TrainConfig::default()
    };
    let stream = vocab.encode_strict(&corpus).unwrap();
    let (tr, va) = train_val_split(&stream, tcfg.val_fraction);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let model = LanguageModel::<f32>::new(&mcfg, &mut rng).unwrap();
    let t0 = std::time::Instant::now();
    let mut sink = MemorySink::default();
    let s = train::train(&model, tr, va, &tcfg, &mut sink).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    let tokens = s.steps_run * 16 * 128;
    println!("steps {} in {:.1}s → {:.0} tok/s (loss {:?} → ppl {:.2})",
        s.steps_run, dt, tokens as f64 / dt, s.epoch_train_loss, s.final_val_ppl);
}
