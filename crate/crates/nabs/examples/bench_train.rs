// end-to-end training throughput probe
use nabs::nn::{Activation, MemorySource, Mlp, MlpConfig};
use ndarray::Array2;
use std::time::Instant;

fn main() {
    let n = 183_000usize;
    let x = Array2::<f64>::from_shape_fn((n, 4), |(i, j)| ((i * 7 + j) % 100) as f64 / 50.0 - 1.0);
    let t = Array2::<f64>::from_shape_fn((n, 200), |(i, j)| ((i + j) % 50 == 0) as u8 as f64);
    let mut src = MemorySource::new(x, t);
    let mut cfg = MlpConfig::new(vec![4, 40, 80, 200], Activation::Relu, 1);
    cfg.epochs = 5;
    cfg.batch_size = 1024;
    let mut net = Mlp::init(cfg).unwrap();
    let t0 = Instant::now();
    net.train_sgd(&mut src).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("classification-shaped net: {:.2} s/epoch (in-memory)", dt / 5.0);

    let x = Array2::<f64>::from_shape_fn((n, 4), |(i, j)| ((i * 7 + j) % 100) as f64 / 50.0 - 1.0);
    let t = Array2::<f64>::from_shape_fn((n, 4), |(i, j)| ((i + j) % 7) as f64 / 7.0);
    let mut src = MemorySource::new(x, t);
    let mut cfg = MlpConfig::new(vec![4, 20, 40, 30, 4], Activation::Tanh, 1);
    cfg.epochs = 5;
    cfg.batch_size = 1024;
    let mut net = Mlp::init(cfg).unwrap();
    let t0 = Instant::now();
    net.train_sgd(&mut src).unwrap();
    println!("regression-shaped net:     {:.2} s/epoch (in-memory)", t0.elapsed().as_secs_f64() / 5.0);
}
