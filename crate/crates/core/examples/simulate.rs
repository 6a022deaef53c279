//! Fine-tunes a toy demographic policy from a skewed start and prints the
//! checkpoint trace: smoothed group reward against measured fairness.
//!
//! `cargo run --example simulate -- [preset] [seed]` where preset is one of
//! `uniform`, `biased-gender`, `biased-all` (default).

use holofair::grpo::{train, Policy, Preset, SimConfig};
use holofair::reward::RewardConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let preset: Preset = args.next().as_deref().unwrap_or("biased-all").parse()?;
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let config = SimConfig {
        seed,
        max_updates: Some(5000),
        ..SimConfig::default()
    };
    let reference = Policy::preset(preset, &config.contexts);
    let start = std::time::Instant::now();
    let trajectory = train(config, RewardConfig::default(), reference)?;

    println!("{:>6} {:>7} {:>9} {:>9} {:>8}", "epoch", "update", "reward", "fairness", "KL");
    for c in &trajectory.checkpoints {
        println!(
            "{:>6} {:>7} {:>9.4} {:>9.4} {:>8.4}",
            c.epoch, c.update, c.smoothed_reward, c.fairness, c.mean_kl_to_reference
        );
    }
    if let Some(c) = trajectory.first_reaching(0.95) {
        println!("fairness >= 0.95 first at update {}", c.update);
    }
    println!("reward/fairness Spearman {:.3}", trajectory.reward_fairness_correlation());
    for w in &trajectory.warnings {
        println!("warning: {w:?}");
    }
    println!("elapsed {:.2?}", start.elapsed());
    Ok(())
}
