//! Lists the α and pyramid-kernel grids and runs a short α sweep through the
//! same code path as the `sweep` command.
//!
//!     cargo run --release --example sweeps -- /tmp/sweep

use asl::cli::{kernel_sweep, main_with, ALPHA_SWEEP};

fn main() -> asl::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/example_sweep".into());
    println!("alpha grid:  {ALPHA_SWEEP:?}");
    println!("kernel grid: {:?}", kernel_sweep());
    let summary = main_with([
        "asl", "sweep", "--axis", "alpha", "--out", &out, "--iterations", "30", "--tasks", "20",
    ])?;
    println!("{summary}");
    Ok(())
}
