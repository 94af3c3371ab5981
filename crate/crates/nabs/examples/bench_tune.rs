// hyperparameter sweep on the desk planar-car instance
use nabs::abstraction::{build_backward, build_forward};
use nabs::grid::Grid;
use nabs::models::ModelSpec;
use nabs::nn::{Activation, Mlp, MlpConfig};
use nabs::repr::*;
use std::time::Instant;

fn main() {
    let model = ModelSpec::builtin("car2d").unwrap();
    let sg = Grid::new(vec![0.0, 0.0], vec![5.0, 5.0], vec![0.1, 0.1]).unwrap();
    let ug = Grid::with_target_eta(vec![-1.0, -1.0], vec![1.0, 1.0], vec![0.23, 0.23]).unwrap();
    let table = build_forward(&model, &sg, &ug, None).unwrap();
    let hulls = build_backward(&table).unwrap();
    let (bf, _bb) = extract_ball_datasets(&table, &hulls);
    let (cf, _cb) = extract_corner_datasets(&table, &hulls);
    let total = sg.num_cells() * ug.num_cells();

    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("cls");

    if mode == "reg" {
        for (lr, epochs) in [(1e-3, 100), (3e-3, 100), (3e-3, 200), (1e-2, 200)] {
            let mut cfg = MlpConfig::new(vec![4, 20, 40, 30, 4], Activation::Tanh, 101);
            cfg.learning_rate = lr;
            cfg.epochs = epochs;
            let mut net = Mlp::init(cfg).unwrap();
            let t0 = Instant::now();
            match net.train_sgd(&mut BallBatchSource::new(&bf)) {
                Ok(rep) => {
                    let (ec, er) = max_ball_deviation(&net, &bf).unwrap();
                    println!(
                        "reg lr={lr} ep={epochs}: loss={:.2e} e_c={ec:.3?} e_r={er:.3?} ({:.0}s)",
                        rep.final_epoch_mean_loss.unwrap(),
                        t0.elapsed().as_secs_f64()
                    );
                }
                Err(e) => println!("reg lr={lr} ep={epochs}: {e}"),
            }
        }
    } else {
        let code = corner_code_len(&sg);
        for (hidden, lr, epochs) in [
            (vec![40, 80], 0.02, 50),
            (vec![40, 80], 0.05, 50),
            (vec![40, 80], 0.1, 50),
            (vec![40, 160], 0.05, 50),
            (vec![64], 0.05, 50),
        ] {
            let mut sizes = vec![4];
            sizes.extend_from_slice(&hidden);
            sizes.push(code);
            let mut cfg = MlpConfig::new(sizes, Activation::Relu, 202);
            cfg.learning_rate = lr;
            cfg.epochs = epochs;
            let mut net = Mlp::init(cfg).unwrap();
            let t0 = Instant::now();
            match net.train_sgd(&mut CornerBatchSource::new(&cf)) {
                Ok(rep) => {
                    let misses: usize = {
                        let mut m = 0;
                        for rec in &cf.records {
                            let nu = ug.num_cells();
                            let (s, u) = (rec.pair as usize / nu, rec.pair as usize % nu);
                            let sc = sg.center_of_flat(s);
                            let uc = ug.center_of_flat(u);
                            let ss = UnitScaler::from_grid(&sg);
                            let us = UnitScaler::from_grid(&ug);
                            let x = vec![
                                ss.to_unit(0, sc[0]),
                                ss.to_unit(1, sc[1]),
                                us.to_unit(0, uc[0]),
                                us.to_unit(1, uc[1]),
                            ];
                            let out = net.forward(&x).unwrap();
                            let ok = decode_corners(&sg, &out)
                                .is_some_and(|d| d.contains_box(&rec.corners));
                            if !ok {
                                m += 1;
                            }
                        }
                        m
                    };
                    println!(
                        "cls {hidden:?} lr={lr} ep={epochs}: loss={:.2e} err={:.4} ({:.0}s)",
                        rep.final_epoch_mean_loss.unwrap(),
                        misses as f64 / total as f64,
                        t0.elapsed().as_secs_f64()
                    );
                }
                Err(e) => println!("cls {hidden:?} lr={lr} ep={epochs}: {e}"),
            }
        }
    }
}
