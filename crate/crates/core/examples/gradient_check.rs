//! Runs the finite-difference gradient suite and prints one line per check.
//!
//! Usage: `gradient_check [seed] [flip_op]`

use pccnn::gradcheck::{run_suite, OPS};

fn main() -> pccnn::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));
    let flip = args.next().map(|op| *OPS.iter().find(|o| **o == op).expect("known op"));

    let report = run_suite(seed, flip)?;
    for c in &report.checks {
        let verdict = if c.passed(report.tolerance) { "ok  " } else { "FAIL" };
        println!("{verdict} {:40} {:5} scalars  max rel err {:.2e}", c.name, c.n_checked, c.max_rel_err);
    }
    println!("suite {}", if report.passed() { "passed" } else { "failed" });
    Ok(())
}
