//! Shows greedy farthest-point ordering on a shell and a few training
//! examples drawn from a two-shell phantom.
//!
//! Usage: `direction_sampling [draws]`

use pccnn::data::{extract_patches, fibonacci_shells, generate_phantom, sample_training_example, PhantomSpec, SamplingConfig};
use pccnn::geometry::{d_ang, farthest_point_subset, Shell};

fn main() -> pccnn::Result<()> {
    let draws = std::env::args().nth(1).map_or(5, |s| s.parse().expect("draws"));

    let dirs = Shell::fibonacci(1000.0, 90, 0).directions;
    let order = farthest_point_subset(&dirs, 0, dirs.len())?;
    for n in [2, 6, 10, 20, 45] {
        let chosen = &order[..n];
        let spread = chosen
            .iter()
            .flat_map(|&a| chosen.iter().filter(move |&&b| b != a).map(move |&b| (a, b)))
            .map(|(a, b)| d_ang(&dirs[a], &dirs[b]))
            .fold(f64::INFINITY, f64::min);
        println!("first {n:2} greedy directions: min pairwise angle {:.1}°", spread.to_degrees());
    }

    let vols = generate_phantom(&PhantomSpec::standard(16, 0.0, 1), &fibonacci_shells(&[1000.0, 3000.0], 45, 1))?;
    let sampling = SamplingConfig {
        q_out: Some(8),
        ..SamplingConfig::default()
    };
    let patches = extract_patches(&vols, sampling.patch_size, sampling.stride)?;
    println!("{} patches of {}³", patches.len(), sampling.patch_size);
    for seed in 0..draws {
        let ex = sample_training_example(&vols, &patches, &sampling, seed)?;
        println!(
            "draw {seed}: patch {:?}, b {} -> {}, q_in {:2}, valid targets {}",
            ex.patch.origin,
            ex.b_in,
            ex.b_out,
            ex.q_in,
            ex.valid.iter().filter(|&&v| v).count()
        );
    }
    Ok(())
}
