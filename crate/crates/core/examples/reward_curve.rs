//! Prints the clipped, zero-centered reward for one category as its count
//! sweeps a group of 20, for the binary and five-class cases.

use holofair::reward::{reward_curve, RewardConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = RewardConfig::default();
    let binary = reward_curve(20, 2, &config)?;
    let five = reward_curve(20, 5, &config)?;
    println!("{:>4} {:>10} {:>10}", "N_k", "C=2", "C=5");
    for (b, f) in binary.iter().zip(&five) {
        println!("{:>4} {:>10.4} {:>10.4}", b.n_k, b.clipped, f.clipped);
    }
    Ok(())
}
