//! Generates a noisy multi-shell phantom, writes it as a dataset directory,
//! reads it back and prints its shells and normalisation scale.
//!
//! Usage: `phantom_dataset [out_dir] [size] [noise]`

use std::collections::BTreeMap;
use std::path::PathBuf;

use pccnn::data::{fibonacci_shells, generate_phantom, normalize_99, read_dataset, write_dataset, PhantomSpec};

fn main() -> pccnn::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map_or_else(|| std::env::temp_dir().join("pccnn_phantom"), PathBuf::from);
    let size = args.next().map_or(20, |s| s.parse().expect("size"));
    let noise = args.next().map_or(0.02, |s| s.parse().expect("noise"));

    let spec = PhantomSpec::standard(size, noise, 0);
    let vols = generate_phantom(&spec, &fibonacci_shells(&[1000.0, 2000.0, 3000.0], 30, 0))?;
    write_dataset(&out, &vols, Some(0), BTreeMap::new())?;
    let back = read_dataset(&out)?;

    let masked = back.mask.iter().filter(|&&m| m).count();
    println!("wrote {} ({:?}, {} volumes)", out.display(), back.dims, back.n_volumes());
    println!("mask covers {masked} of {} voxels", back.n_voxels());
    for b in back.shells() {
        println!("shell b={b}: {} directions", back.shell_volumes(b)?.len());
    }
    let (_, norm) = normalize_99(&back)?;
    println!("99th percentile scale {:.4}", norm.scale);
    Ok(())
}
