//! Choose the spline degree, knot count and penalty for one simulated dataset
//! by GCV within each candidate and BIC across candidates.

use fvicm::fit::FitConfig;
use fvicm::select::{select_model, SelectionGrid};
use fvicm::sim::{generate_dataset, SimDesign};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(7);
    let data = generate_dataset(&SimDesign::default(), seed)?;
    let grid = SelectionGrid::default();
    let started = std::time::Instant::now();
    let report = select_model(&data, &FitConfig::default(), &grid)?;
    println!("{:>2} {:>2} {:>10} {:>9} {:>3} {:>9} {:>8}", "q", "K", "lambda", "Q", "k", "BIC", "gof p");
    for c in &report.candidates {
        println!(
            "{:>2} {:>2} {:>10.3e} {:>9.3} {:>3} {:>9.3} {:>8}",
            c.degree,
            c.num_knots,
            c.lambda,
            c.q,
            c.k,
            c.bic,
            c.gof.p_value().map_or("-".to_string(), |p| format!("{p:.3}"))
        );
    }
    let best = report.chosen();
    println!(
        "chosen: q = {}, K = {}, lambda = {:.3e} ({:.1?})",
        best.degree,
        best.num_knots,
        best.lambda,
        started.elapsed()
    );
    Ok(())
}
