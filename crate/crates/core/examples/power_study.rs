//! Rejection rate of the linearity test as the interaction curve moves from a
//! line (tau = 0) to the full sine (tau = 1). Pass the replicate count as the
//! first argument (default 40).

use fvicm::lmm::LrtConfig;
use fvicm::sim::{power_study, write_power_tsv, SelectionPolicy, SimDesign, StudyConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let reps = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(40);
    let cfg = StudyConfig {
        design: SimDesign { n_subjects: 500, maf: 0.3, ..SimDesign::default() },
        reps,
        seed: 3,
        policy: SelectionPolicy::Pinned { degree: 2, num_knots: 2, lambda: 1e-4 },
        ..StudyConfig::default()
    };
    let lrt = LrtConfig { n_null: 1000, ..LrtConfig::default() };
    let study = power_study(&cfg, &[0.0, 0.25, 0.5, 0.75, 1.0], 0.05, &lrt)?;
    write_power_tsv(&mut std::io::stdout().lock(), &study)?;
    Ok(())
}
