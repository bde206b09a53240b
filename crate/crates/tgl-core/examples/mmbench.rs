//! Matmul kernel microbenchmark.

use std::time::Instant;
use tgl_core::tensor::{Graph, Tensor};

fn main() {
    let sizes = [(128usize, 128usize, 595usize), (128, 128, 128), (128, 512, 128)];
    for (m, k, n) in sizes {
        let a = Tensor::<f32>::new(
            vec![m, k],
            (0..m * k).map(|i| (i as f32 * 0.001).sin()).collect(),
        )
        .unwrap();
        let b = Tensor::<f32>::new(
            vec![k, n],
            (0..k * n).map(|i| (i as f32 * 0.002).cos()).collect(),
        )
        .unwrap();
        let reps = 200;
        let t0 = Instant::now();
        let mut sink = 0.0f32;
        for _ in 0..reps {
            let mut g = Graph::new();
            let na = g.leaf(a.clone());
            let nb = g.leaf(b.clone());
            let c = g.matmul(na, nb).unwrap();
            sink += g.value(c).data()[0];
        }
        let dt = t0.elapsed().as_secs_f64() / reps as f64;
        let flops = 2.0 * (m * k * n) as f64;
        println!(
            "mm_nn {m}x{k}x{n}: {:.3} ms  {:.2} GFLOP/s  (sink {sink})",
            dt * 1e3,
            flops / dt / 1e9
        );
    }
}
