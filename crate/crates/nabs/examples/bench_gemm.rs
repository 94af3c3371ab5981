// quick throughput probe for the training matmuls
use ndarray::Array2;
use std::time::Instant;

fn main() {
    for (bsz, i, o) in [(1024usize, 80usize, 200usize), (1024, 4, 40), (1024, 40, 80), (1024, 200, 80)] {
        let a = Array2::<f64>::ones((bsz, i));
        let w = Array2::<f64>::ones((i, o));
        let t0 = Instant::now();
        let mut acc = 0.0;
        let iters = 200;
        for _ in 0..iters {
            let z = a.dot(&w);
            acc += z[[0, 0]];
        }
        let dt = t0.elapsed().as_secs_f64();
        let flops = 2.0 * (bsz * i * o * iters) as f64;
        println!("({bsz},{i})x({i},{o}): {:.2} GF/s (acc {acc})", flops / dt / 1e9);
    }
    // transposed-LHS gemm as in backprop
    let a = Array2::<f64>::ones((1024, 80));
    let d = Array2::<f64>::ones((1024, 200));
    let t0 = Instant::now();
    for _ in 0..200 {
        let g = a.t().dot(&d);
        std::hint::black_box(&g);
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("t-gemm 80x1024x200: {:.2} GF/s", 2.0 * (1024.0 * 80.0 * 200.0 * 200.0) / dt / 1e9);
}
