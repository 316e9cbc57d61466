//! Trains a toy PCCNN on single-shell phantoms and compares it with order-2
//! SH interpolation on a held-out phantom at q_in = 6.
//!
//! Usage: `baseline_comparison [iterations] [seed] [q_in_max] [lr]`

use std::time::Instant;

use pccnn::data::{fibonacci_shells, generate_phantom, PhantomSpec, SamplingConfig};
use pccnn::model::PCCNNConfig;
use pccnn::trainer::{evaluate, train, AdamWConfig, EvalConfig, Predictor, TrainConfig};

fn main() -> pccnn::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations = args.next().map_or(300, |s| s.parse().expect("iterations"));
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));
    let q_in_max = args.next().map_or(6, |s| s.parse().expect("q_in_max"));
    let lr = args.next().map_or(3e-3, |s| s.parse().expect("lr"));

    let phantom = |s: u64| {
        let spec = PhantomSpec::standard(16, 0.02, s);
        generate_phantom(&spec, &fibonacci_shells(&[1000.0], 90, s))
    };
    let train_sets = [phantom(100)?, phantom(101)?];
    let val_sets = [phantom(200)?];
    let test_sets = [phantom(300)?];

    let cfg = TrainConfig {
        model: PCCNNConfig {
            n_pointwise: 1,
            n_blocks: 1,
            c1: 8,
            c3: 8,
            hidden: 16,
            ..PCCNNConfig::default()
        },
        sampling: SamplingConfig {
            patch_size: 6,
            stride: 3,
            q_out: Some(8),
            q_in_max,
            ..SamplingConfig::default()
        },
        optim: AdamWConfig {
            lr,
            ..AdamWConfig::default()
        },
        batch_size: 8,
        iterations,
        seed,
        log_every: 25,
        val_every: 50,
        val_examples: 8,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let outcome = train(&cfg, &train_sets, &val_sets)?;
    for r in &outcome.history {
        println!("step {:4}  loss {:.5}  val {:?}", r.step, r.loss, r.val_loss);
    }
    println!("trained in {:.1?}", t0.elapsed());

    let eval = EvalConfig {
        q_in: 6,
        patch_size: 6,
        chunk: Some(8),
        ..EvalConfig::default()
    };
    let model = outcome.best.model()?;
    let t0 = Instant::now();
    let ours = evaluate(&Predictor::Model(&model), &test_sets, &eval)?;
    let sh = evaluate(&Predictor::ShInterpolation, &test_sets, &eval)?;
    println!("evaluated in {:.1?}", t0.elapsed());
    for metric in ["mae", "psnr", "mssim"] {
        let a = ours.find("pccnn", "1000", metric).map(|r| r.summary.mean);
        let b = sh.find("sh", "1000", metric).map(|r| r.summary.mean);
        println!("{metric:6} pccnn {a:?}  sh {b:?}");
    }
    Ok(())
}
