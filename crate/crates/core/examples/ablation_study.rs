//! Trains one toy PCCNN per ablation arm with shared seeds and data, then
//! reports held-out MAE at q_in = 6 for each arm.
//!
//! Usage: `ablation_study [iterations] [seed] [lr]`

use pccnn::data::{fibonacci_shells, generate_phantom, PhantomSpec, SamplingConfig};
use pccnn::model::PCCNNConfig;
use pccnn::trainer::{run_ablation, AdamWConfig, Ablation, EvalConfig, TrainConfig};

fn main() -> pccnn::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations = args.next().map_or(300, |s| s.parse().expect("iterations"));
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));
    let lr = args.next().map_or(3e-3, |s| s.parse().expect("lr"));

    let phantom = |s: u64| generate_phantom(&PhantomSpec::standard(16, 0.02, s), &fibonacci_shells(&[1000.0], 90, s));
    let train_sets = [phantom(100)?, phantom(101)?];
    let val_sets = [phantom(200)?];
    let test_sets = [phantom(300)?];

    let base = TrainConfig {
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
            q_in_max: 6,
            q_out: Some(8),
            ..SamplingConfig::default()
        },
        optim: AdamWConfig {
            lr,
            ..AdamWConfig::default()
        },
        batch_size: 8,
        iterations,
        seed,
        val_every: 50,
        val_examples: 8,
        ..TrainConfig::default()
    };
    let eval = EvalConfig {
        q_in: 6,
        patch_size: 6,
        chunk: Some(8),
        ..EvalConfig::default()
    };
    let (report, _) = run_ablation(&base, &Ablation::ALL, &train_sets, &val_sets, &test_sets, &eval)?;
    for arm in Ablation::ALL {
        let method = format!("pccnn[{}]", arm.name());
        let mae = report.find(&method, "1000", "mae").map(|r| r.summary.mean);
        println!("{:16} mae {:?}", arm.name(), mae);
    }
    print!("{}", report.to_csv()?);
    Ok(())
}
