//! End-to-end analysis of a CSV file: ingest, select, fit, test, write reports.
//! Without an argument a simulated table is written to a temporary directory first.

use std::path::PathBuf;

use fvicm::io::{ingest, run_analysis, write_dataset, PenaltyChoice, RunConfig};
use fvicm::sim::{generate_dataset, SimDesign};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("fvicm_analyze_csv");
    std::fs::create_dir_all(&dir)?;
    let path = match std::env::args().nth(1) {
        Some(p) => PathBuf::from(p),
        None => {
            let p = dir.join("simulated.csv");
            let data = generate_dataset(&SimDesign { n_subjects: 150, ..SimDesign::default() }, 8)?;
            write_dataset(std::fs::File::create(&p)?, &data, b',')?;
            p
        }
    };
    let cfg = RunConfig {
        output_dir: dir.join("report"),
        degrees: vec![2, 3],
        knot_counts: vec![1, 2],
        penalty: PenaltyChoice::Fixed(1e-4),
        n_null: 1000,
        ..RunConfig::default()
    };
    let ingested = ingest(&path, cfg.standardize)?;
    let rep = run_analysis(&ingested, &cfg)?;
    println!("chose q = {}, K = {} from {} candidates", rep.degree, rep.num_knots, rep.candidates.len());
    for r in &rep.parameters {
        println!("{:<8} {:>10.5} (se {:.5})", r.name, r.estimate, r.se);
    }
    if let Some(t) = &rep.linearity {
        println!("linearity: LRT = {:.3}, p = {:.4}", t.lrt_obs, t.p_value);
    }
    println!("reports written to {}", cfg.output_dir.display());
    Ok(())
}
