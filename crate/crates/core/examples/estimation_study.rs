//! Monte Carlo bias, spread, standard error and coverage of the loadings, plus
//! mean integrated squared error of both curves. Pass the replicate count as the
//! first argument (default 50).

use fvicm::sim::{simulation_study, write_estimation_tsv, SelectionPolicy, SimDesign, StudyConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let reps = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(50);
    let cfg = StudyConfig {
        design: SimDesign { n_subjects: 200, maf: 0.3, rho: 0.5, ..SimDesign::default() },
        reps,
        seed: 1,
        policy: SelectionPolicy::Pinned { degree: 2, num_knots: 2, lambda: 1e-4 },
        ..StudyConfig::default()
    };
    let started = std::time::Instant::now();
    let (est, curves) = simulation_study(&cfg)?;
    write_estimation_tsv(&mut std::io::stdout().lock(), &est)?;
    println!("MISE m0 {:.3e}, m1 {:.3e}", curves.mise0, curves.mise1);
    println!("{} replicates, {} failed, {:.1?}", est.replicates.len(), est.failed, started.elapsed());
    Ok(())
}
