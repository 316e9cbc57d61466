//! Fits spherical harmonics to a phantom voxel, interpolates held-out
//! directions and reports MAE, PSNR, MSSIM and ACC for the order-2 baseline.
//!
//! Usage: `spherical_harmonics [q_in]`

use pccnn::data::{fibonacci_shells, generate_phantom, PhantomSpec};
use pccnn::geometry::farthest_point_subset;
use pccnn::metrics::{acc, mae, mssim, psnr, sh_fit, sh_interpolate, ACC_ORDER};

fn main() -> pccnn::Result<()> {
    let q_in = std::env::args().nth(1).map_or(6, |s| s.parse().expect("q_in"));
    let vols = generate_phantom(&PhantomSpec::standard(12, 0.0, 3), &fibonacci_shells(&[1000.0], 90, 3))?;
    let shell = vols.shell_volumes(1000.0)?;
    let dirs: Vec<_> = shell.iter().map(|&v| vols.gradients[v].dir).collect();
    let order = farthest_point_subset(&dirs, 0, dirs.len())?;
    let (inputs, targets) = order.split_at(q_in);
    let in_dirs: Vec<_> = inputs.iter().map(|&i| dirs[i]).collect();
    let out_dirs: Vec<_> = targets.iter().map(|&i| dirs[i]).collect();

    let nt = targets.len();
    let mut pred = vec![0.0; vols.n_voxels() * nt];
    let mut truth = vec![0.0; vols.n_voxels() * nt];
    let mut acc_sum = (0.0, 0usize);
    for v in 0..vols.n_voxels() {
        let x: Vec<f64> = inputs.iter().map(|&i| vols.value(v, shell[i])).collect();
        let y = sh_interpolate(&x, &in_dirs, &out_dirs, 2)?;
        let t: Vec<f64> = targets.iter().map(|&i| vols.value(v, shell[i])).collect();
        pred[v * nt..(v + 1) * nt].copy_from_slice(&y);
        truth[v * nt..(v + 1) * nt].copy_from_slice(&t);
        if vols.mask[v] {
            let mut full_pred = x.clone();
            full_pred.extend(&y);
            let mut full_true = x;
            full_true.extend(&t);
            let all: Vec<_> = order.iter().map(|&i| dirs[i]).collect();
            let a = acc(&sh_fit(&full_pred, &all, ACC_ORDER)?, &sh_fit(&full_true, &all, ACC_ORDER)?)?;
            acc_sum = (acc_sum.0 + a, acc_sum.1 + 1);
        }
    }
    let entry_mask: Vec<bool> = vols.mask.iter().flat_map(|&m| std::iter::repeat_n(m, nt)).collect();
    println!("order-2 SH from {q_in} inputs to {nt} targets");
    println!("mae   {:.4}", mae(&pred, &truth, &entry_mask)?);
    println!("psnr  {:.2} dB", psnr(&pred, &truth, &entry_mask, None)?);
    println!("mssim {:.4}", mssim(&pred, &truth, vols.dims, nt, &vols.mask)?);
    println!("acc   {:.4}", acc_sum.0 / acc_sum.1 as f64);
    Ok(())
}
