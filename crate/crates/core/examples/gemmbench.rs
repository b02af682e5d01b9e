use std::time::Instant;
use tlm_core::tensor::kernels::{gemm_nn, gemm_nt, gemm_tn};

fn bench(label: &str, m: usize, k: usize, n: usize, iters: usize) {
    let a: Vec<f32> = (0..m * k).map(|i| (i % 97) as f32 * 0.01).collect();
    let b: Vec<f32> = (0..k * n).map(|i| (i % 89) as f32 * 0.01).collect();
    let bt: Vec<f32> = (0..n * k).map(|i| (i % 89) as f32 * 0.01).collect();
    let at: Vec<f32> = (0..k * m).map(|i| (i % 97) as f32 * 0.01).collect();
    let mut out = vec![0.0f32; m * n];
    let flop = 2.0 * (m * k * n) as f64 * iters as f64;
    let t0 = Instant::now();
    for _ in 0..iters { gemm_nn(&a, &b, &mut out, m, k, n); }
    println!("{label} nn: {:.2} GFLOP/s", flop / t0.elapsed().as_secs_f64() / 1e9);
    let t0 = Instant::now();
    for _ in 0..iters { gemm_tn(&at, &b, &mut out, m, k, n); }
    println!("{label} tn: {:.2} GFLOP/s", flop / t0.elapsed().as_secs_f64() / 1e9);
    let t0 = Instant::now();
    for _ in 0..iters { gemm_nt(&a, &bt, &mut out, m, k, n); }
    println!("{label} nt: {:.2} GFLOP/s", flop / t0.elapsed().as_secs_f64() / 1e9);
}

fn main() {
    bench("128x128x128", 128, 128, 128, 2000);
    bench("128x128x256", 128, 128, 256, 1000);
    bench("128x256x128", 128, 256, 128, 1000);
    bench("2048x128x128", 2048, 128, 128, 200);
}
