//! Overfits the default toy PCCNN to a single noiseless phantom patch and
//! reports the relative ℓ1 reduction.
//!
//! Usage: `overfit_patch [steps] [lr] [draw]`

use std::time::Instant;

use pccnn::data::{extract_patches, fibonacci_shells, generate_phantom, normalize_99, sample_training_example, PhantomSpec, SamplingConfig};
use pccnn::model::{PCCNNConfig, PCCNN};
use pccnn::trainer::{fit_examples, AdamWConfig};

fn main() -> pccnn::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().map_or(500, |s| s.parse().expect("steps"));
    let lr = args.next().map_or(2e-3, |s| s.parse().expect("lr"));
    let draw = args.next().map_or(3, |s| s.parse().expect("draw"));

    let raw = generate_phantom(&PhantomSpec::standard(16, 0.0, 7), &fibonacci_shells(&[1000.0], 90, 7))?;
    let (vols, _) = normalize_99(&raw)?;
    let sampling = SamplingConfig {
        q_out: Some(8),
        ..SamplingConfig::default()
    };
    let patches = extract_patches(&vols, sampling.patch_size, sampling.stride)?;
    let example = sample_training_example(&vols, &patches, &sampling, draw)?;
    println!(
        "patch {:?}, b {} -> {}, q_in {}, {} targets",
        example.patch.origin,
        example.b_in,
        example.b_out,
        example.q_in,
        example.out_volumes.len()
    );

    let mut model = PCCNN::<f32>::build(PCCNNConfig::default(), 0)?;
    let optim = AdamWConfig { lr, ..AdamWConfig::default() };
    let t0 = Instant::now();
    let losses = fit_examples(&mut model, &[example], &optim, steps, 1)?;
    for (i, l) in losses.iter().enumerate().step_by(50) {
        println!("step {i:4}  loss {l:.6}");
    }
    let (first, last) = (losses[0], *losses.last().unwrap());
    println!("loss {first:.6} -> {last:.6} ({:.1}% reduction) in {:.1?}", 100.0 * (1.0 - last / first), t0.elapsed());
    Ok(())
}
