//! Evaluate the quadratic inference function at the truth and at a perturbed point,
//! then show the goodness-of-fit test at the fitted value.

use fvicm::fit::{fit, initialize, specs_at, FitConfig};
use fvicm::qif::{PenaltySpec, QifModel, WorkingBasis};
use fvicm::select::gof_test;
use fvicm::sim::{generate_dataset, SimDesign, Truth};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = generate_dataset(&SimDesign::default(), 11)?;
    let config = FitConfig { degree: 2, num_knots: 2, lambda: 1e-4, ..FitConfig::default() };
    let truth = Truth::standard();
    let (s0, s1) = specs_at(&data, &config, &truth.beta0, &truth.beta1)?;
    let mut start = initialize(&data, &s0, &s1)?;
    start.beta0 = truth.beta0.clone();
    start.beta1 = truth.beta1.clone();

    let model = QifModel::new(&data, s0.clone(), s1.clone(), WorkingBasis::Exchangeable)?;
    let penalty = PenaltySpec::new(config.lambda, data.p(), &s0, &s1)?;
    let at = start.to_free()?;
    let here = model.penalized_objective(&at, &penalty)?;
    println!("{} moments for {} free parameters", model.n_moments(), at.layout().free_dim());
    println!("at the true loadings: Q = {:.3}, objective {:.5}, |grad| {:.3e}", here.eval.q, here.value, here.gradient.norm());

    let mut moved = at.clone();
    moved.beta1_tail[0] += 0.05;
    let there = model.qif_value(&moved)?;
    println!("beta1 tail moved by 0.05: Q = {:.3}", there.q);

    let f = fit(&data, &config)?;
    let gof = gof_test(f.q_value, f.n_moments, f.k());
    println!("fitted: Q = {:.3}, goodness-of-fit p = {:?}", f.q_value, gof.p_value());
    Ok(())
}
