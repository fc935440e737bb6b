//! Test whether the interaction curve is linear, on data with and without curvature.

use fvicm::fit::{fit, FitConfig};
use fvicm::lmm::{linearity_test, LrtConfig};
use fvicm::sim::{generate_dataset, SimDesign};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = FitConfig { degree: 2, num_knots: 2, lambda: 1e-4, ..FitConfig::default() };
    let lrt = LrtConfig { n_null: 2000, seed: 5, ..LrtConfig::default() };
    for tau in [0.0, 1.0] {
        let design = SimDesign { n_subjects: 500, maf: 0.3, tau, ..SimDesign::default() };
        let data = generate_dataset(&design, 99)?;
        let f = fit(&data, &config)?;
        let t = linearity_test(&f, &data, &lrt)?;
        println!(
            "tau = {tau}: LRT = {:8.3}, p = {:.4}, ratio = {:.3e}, variances {:?}",
            t.lrt_obs, t.p_value, t.ratio_hat, t.variances
        );
    }
    Ok(())
}
