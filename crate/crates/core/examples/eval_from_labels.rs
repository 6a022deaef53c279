//! End-to-end label pipeline: synthesizes classifier labels whose
//! per-attribute entropies match one bundled generator, writes them as JSONL,
//! reads them back and scores them.

use holofair::commands::{report_from_labels, ContextMap};
use holofair::labels::{parse_labels, synthesize_labels, write_labels};
use holofair::metrics::{ModelTable, DEFAULT_EPSILON, DEFAULT_Q};
use holofair::taxonomy::Taxonomy;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "SDXL".into());
    let table = ModelTable::bundled();
    let model = table.get(&name).ok_or_else(|| format!("unknown model `{name}`"))?;

    let images = 10_000;
    let mut records = synthesize_labels("neutral/fixture", &model.neutral, images);
    for (trigger, entropies) in &model.triggers {
        records.extend(synthesize_labels(&format!("{trigger}/fixture"), entropies, images));
    }
    let mut jsonl = Vec::new();
    write_labels(&records, &mut jsonl)?;
    let parsed = parse_labels(jsonl.as_slice())?;
    println!("{} label records, {} bytes of JSONL", parsed.len(), jsonl.len());

    let out = report_from_labels(
        &parsed,
        &ContextMap::default(),
        &Taxonomy::default(),
        0.0,
        DEFAULT_Q,
        DEFAULT_EPSILON,
    )?;
    let direct = model.report(DEFAULT_Q, DEFAULT_EPSILON)?;
    let r = &out.report;
    println!("{:<8} {:>8} {:>8}", "", "labels", "table");
    println!("{:<8} {:>8.4} {:>8.4}", "ID", r.id_score, direct.id_score);
    for (label, a, b) in [
        ("CA_0.10", r.ca_q, direct.ca_q),
        ("CA-mean", r.ca_mean, direct.ca_mean),
        ("MGBI", r.mgbi, direct.mgbi),
    ] {
        println!("{:<8} {:>8.4} {:>8.4}", label, a.unwrap_or(f64::NAN), b.unwrap_or(f64::NAN));
    }
    for w in &out.warnings {
        println!("warning: {w}");
    }
    Ok(())
}
