//! One-dimensional golden-section minimization.

/// Minimizer found by [`golden_section`] with every probed point.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldenResult {
    pub x: f64,
    pub fx: f64,
    /// `(x, f(x))` in evaluation order.
    pub probes: Vec<(f64, f64)>,
    pub iterations: usize,
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Minimize `f` on `[a, b]` until the bracket is narrower than `tol` or
/// `max_iter` reductions have been made. Non-finite values count as `+∞`.
pub fn golden_section(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, tol: f64, max_iter: usize) -> GoldenResult {
    let (mut a, mut b) = if a <= b { (a, b) } else { (b, a) };
    let mut probes = Vec::new();
    let mut eval = |x: f64, probes: &mut Vec<(f64, f64)>| {
        let v = f(x);
        let v = if v.is_finite() { v } else { f64::INFINITY };
        probes.push((x, v));
        v
    };
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = eval(c, &mut probes);
    let mut fd = eval(d, &mut probes);
    let mut iterations = 0;
    while (b - a) > tol && iterations < max_iter {
        iterations += 1;
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = eval(c, &mut probes);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = eval(d, &mut probes);
        }
    }
    let (x, fx) = probes
        .iter()
        .copied()
        .fold((f64::NAN, f64::INFINITY), |best, p| if p.1 < best.1 { p } else { best });
    let (x, fx) = if x.is_nan() { (0.5 * (a + b), f64::INFINITY) } else { (x, fx) };
    GoldenResult {
        x,
        fx,
        probes,
        iterations,
    }
}
