use sketchpad_core::tensor::{matmul, Tensor};
use sketchpad_core::rng::Rng;
use std::time::Instant;

#[test]
fn bench_sgemm() {
    let mut rng = Rng::from_seed(1);
    for &(m, k, n) in &[(256usize, 256usize, 256usize), (300, 256, 1024), (300, 256, 256), (64, 128, 128)] {
        let a = Tensor::randn(vec![m, k], 1.0, &mut rng);
        let b = Tensor::randn(vec![k, n], 1.0, &mut rng);
        let reps = (2e9 / (2.0 * (m*k*n) as f64)).max(3.0) as usize;
        let t0 = Instant::now();
        let mut acc = 0.0f32;
        for _ in 0..reps {
            let c = matmul(&a, &b);
            acc += c.data()[0];
        }
        let dt = t0.elapsed().as_secs_f64();
        let gf = 2.0 * (m*k*n) as f64 * reps as f64 / dt / 1e9;
        println!("{}x{}x{}: {:.1} GFLOP/s ({} reps, {:.2}s, acc {acc})", m, k, n, gf, reps, dt);
    }
}
