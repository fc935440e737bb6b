//! Evaluate a truncated power basis, its derivative, and evenly placed knots.

use fvicm::spline::{place_knots, BasisSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let values: Vec<f64> = (0..=100).map(|i| 0.2 + 1.4 * i as f64 / 100.0).collect();
    let knots = place_knots(&values, 3)?;
    let spec = BasisSpec::new(2, knots)?;
    println!("degree {}, knots {:?}, dim {}", spec.degree(), spec.knots(), spec.dim());
    println!("{:>6}  basis / derivative", "u");
    for u in [0.2, 0.5, 0.9, 1.3, 1.6] {
        let b: Vec<String> = spec.eval(u).iter().map(|v| format!("{v:7.4}")).collect();
        let d: Vec<String> = spec.deriv(u)?.iter().map(|v| format!("{v:7.4}")).collect();
        println!("{u:6.2}  [{}]", b.join(" "));
        println!("{:6}  [{}]", "", d.join(" "));
    }
    let mask: Vec<f64> = spec.penalty_mask().collect();
    println!("penalized coefficients: {mask:?}");
    Ok(())
}
