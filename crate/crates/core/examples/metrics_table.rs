//! Recomputes the headline fairness table from the bundled per-attribute
//! entropies of eight public generators, with quantile sensitivity and a
//! context-level bootstrap interval for CA-mean.

use holofair::metrics::{
    bootstrap_ci, quantile_sensitivity, write_table_csv, ModelTable, Statistic, DEFAULT_EPSILON,
    DEFAULT_Q, DEFAULT_REPLICATES, SENSITIVITY_QS,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let table = ModelTable::bundled();
    let mut rows = Vec::new();
    for model in &table.models {
        rows.push((model.name.clone(), model.report(DEFAULT_Q, DEFAULT_EPSILON)?));
    }
    write_table_csv(&rows, std::io::stdout())?;

    println!();
    println!("{:<10} {:>8} {:>8} {:>8}   CA-mean 95% CI", "model", "q=0.05", "q=0.10", "q=0.20");
    for (name, report) in &rows {
        let g = report.g_scores();
        let sens = quantile_sensitivity(&g, &SENSITIVITY_QS)?;
        let ci = bootstrap_ci(&g, Statistic::CaMean, DEFAULT_REPLICATES, 0.95, 0)?;
        println!(
            "{:<10} {:>8.4} {:>8.4} {:>8.4}   [{:.4}, {:.4}]",
            name, sens[0].1, sens[1].1, sens[2].1, ci.lower, ci.upper
        );
    }
    Ok(())
}
