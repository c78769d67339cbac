//! Compare reverse-mode gradients with central differences for every
//! operator of the tensor engine.

use socl::autodiff::{grad_check, CHECKED_OPS};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seeds: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(3);
    for op in CHECKED_OPS {
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for seed in 0..seeds {
            let r = grad_check(op, seed)?;
            worst = worst.max(r.max_rel_err);
            checked += r.checked;
        }
        println!("{op:<12} {checked:>5} entries  max rel err {worst:.2e}");
    }
    Ok(())
}
