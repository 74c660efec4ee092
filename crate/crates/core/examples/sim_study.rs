//! Train CLIP, CCL and InfoCORE on one dataset and print their metrics side
//! by side: screen-representation probes for simulated data, fairness
//! metrics for tabular data.
//!
//! `cargo run --release --example sim_study -- [config.json] [clip,ccl,infocore]`

use infocore::config::ExperimentConfig;
use infocore::objectives::ObjectiveKind;
use infocore::pipeline::compare_objectives;

fn main() -> infocore::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cfg = match std::env::args().nth(1) {
        Some(path) => ExperimentConfig::load(path.as_ref())?,
        None => ExperimentConfig::default(),
    };
    let start = std::time::Instant::now();
    let objectives = match std::env::args().nth(2) {
        Some(list) => list.split(',').map(str::parse).collect::<infocore::Result<Vec<ObjectiveKind>>>()?,
        None => vec![ObjectiveKind::Clip, ObjectiveKind::Ccl, ObjectiveKind::Infocore],
    };
    let results = compare_objectives(&cfg, &objectives)?;
    if results.iter().any(|(_, r)| r.get("fairness/eo").is_some()) {
        println!("{:<10} {:>9} {:>8} {:>8} {:>8}", "objective", "accuracy", "eo", "eopp", "dp");
        for (kind, r) in &results {
            let g = |k: &str| r.get(k).unwrap_or(f64::NAN);
            println!(
                "{:<10} {:>9.4} {:>8.4} {:>8.4} {:>8.4}",
                kind.to_string(),
                g("fairness/accuracy"),
                g("fairness/eo"),
                g("fairness/eopp"),
                g("fairness/dp"),
            );
        }
        println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
        return Ok(());
    }
    println!("{:<10} {:>8} {:>8} {:>9} {:>9} {:>8} {:>8}", "objective", "effect", "batch", "entropy", "purity", "d_eff", "d_batch");
    for (kind, r) in &results {
        let g = |k: &str| r.get(k).unwrap_or(f64::NAN);
        println!(
            "{:<10} {:>8.3} {:>8.3} {:>9.3} {:>9.3} {:>8.3} {:>8.3}",
            kind.to_string(),
            g("probe/screen/effect"),
            g("probe/screen/batch"),
            g("mixing_entropy/screen"),
            g("knn_purity/screen"),
            g("probe/drug/effect"),
            g("probe/drug/batch"),
        );
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
