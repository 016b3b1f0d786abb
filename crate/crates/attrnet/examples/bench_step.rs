use attrnet::model::{build_tinydan, initialize};
use attrnet::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = build_tinydan(12, (3, 64, 64)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = initialize::<f32, _>(&cfg, &mut rng).unwrap();
    let data: Vec<f32> = (0..32 * 3 * 64 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let batch = Tensor::new(vec![32, 3, 64, 64], data).unwrap();
    let labels: Vec<f32> = (0..32 * 12).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
    let weights = vec![0.8f32; 12];

    // raw GEMM ceiling on a conv-shaped product
    let (m, k, n) = (16usize, 144usize, 4096usize);
    let a: Vec<f32> = (0..m * k).map(|i| (i % 13) as f32 * 0.1).collect();
    let b: Vec<f32> = (0..k * n).map(|i| (i % 17) as f32 * 0.1).collect();
    let mut c = vec![0.0f32; m * n];
    let t0 = std::time::Instant::now();
    let reps = 2000;
    for _ in 0..reps {
        attrnet::tensor::bench_mm(&a, &b, m, k, n, &mut c);
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("raw mm {}x{}x{}: {:.1} GFLOP/s", m, k, n, reps as f64 * 2.0 * (m * k * n) as f64 / dt / 1e9);

    let t0 = std::time::Instant::now();
    let iters = 10;
    for _ in 0..iters {
        let mut g = attrnet::tensor::Graph::new();
        let trace = attrnet::model::forward_graph(&cfg, &params, &mut g, batch.clone(), true, &mut rng).unwrap();
        let _ = trace;
    }
    let dt_f = t0.elapsed().as_secs_f64();
    println!("forward only: {:.2} ms/sample ({:.1} GFLOP/s at 84 MFLOP)", dt_f * 1000.0 / (iters as f64 * 32.0), iters as f64 * 32.0 * 84e6 / dt_f / 1e9);

    let t0 = std::time::Instant::now();
    for _ in 0..iters {
        let mut g = attrnet::tensor::Graph::new();
        let trace = attrnet::model::forward_graph(&cfg, &params, &mut g, batch.clone(), true, &mut rng).unwrap();
        let loss = g.weighted_bce(trace.logits, &labels, &weights).unwrap();
        g.backward(loss).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = iters as f64 * 32.0 * 254e6;
    println!("{} iters batch-32 fwd+bwd: {:.2}s => {:.1} GFLOP/s, {:.2} ms/sample (bwd = {:.2} ms)", iters, dt, flops / dt / 1e9, dt * 1000.0 / (iters as f64 * 32.0), (dt - dt_f) * 1000.0 / (iters as f64 * 32.0));
}
