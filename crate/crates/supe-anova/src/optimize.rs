//! Derivative-free simplex maximizer.
//!
//! Classic Nelder-Mead with the standard coefficients, run on the
//! transformed (unconstrained) parameter coordinates. The objective may
//! return negative infinity or NaN for infeasible points; both are treated
//! as arbitrarily bad. Fully deterministic for a given starting point.

#[derive(Debug, Clone)]
pub struct SimplexOptions {
    pub max_iterations: usize,
    /// Convergence when the simplex objective spread falls below this,
    /// relative to the best value's magnitude.
    pub objective_tolerance: f64,
    /// Convergence also requires the simplex parameter spread below this.
    pub parameter_tolerance: f64,
    /// Initial simplex step added to each coordinate of the start point.
    pub initial_step: f64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        SimplexOptions {
            max_iterations: 2000,
            objective_tolerance: 1e-9,
            parameter_tolerance: 1e-7,
            initial_step: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimplexOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

/// Maximizes `f` starting from `x0`.
pub fn maximize<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], options: &SimplexOptions) -> SimplexOutcome {
    let n = x0.len();
    assert!(n > 0, "cannot optimize a zero-dimensional objective");
    let mut evaluations = 0usize;
    let mut eval = |x: &[f64]| {
        evaluations += 1;
        sanitize(f(x))
    };

    // Vertices with objective values, kept sorted best-first.
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let v0 = eval(x0);
    simplex.push((x0.to_vec(), v0));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += options.initial_step;
        let v = eval(&x);
        simplex.push((x, v));
    }
    let sort = |s: &mut Vec<(Vec<f64>, f64)>| {
        s.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    };
    sort(&mut simplex);

    let (alpha, gamma, beta, delta) = (1.0, 2.0, 0.5, 0.5);
    let mut iterations = 0usize;
    let mut converged = false;
    while iterations < options.max_iterations {
        iterations += 1;
        let best = simplex[0].1;
        let worst = simplex[n].1;
        let spread = best - worst;
        let param_spread = (0..n)
            .map(|d| {
                let (lo, hi) = simplex.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |acc, v| {
                    (acc.0.min(v.0[d]), acc.1.max(v.0[d]))
                });
                hi - lo
            })
            .fold(0.0f64, f64::max);
        if best.is_finite()
            && worst.is_finite()
            && spread <= options.objective_tolerance * (best.abs() + options.objective_tolerance)
            && param_spread <= options.parameter_tolerance
        {
            converged = true;
            break;
        }

        // Centroid of all but the worst vertex.
        let mut centroid = vec![0.0; n];
        for vertex in simplex.iter().take(n) {
            for d in 0..n {
                centroid[d] += vertex.0[d] / n as f64;
            }
        }
        let blend = |from: &[f64], coeff: f64| -> Vec<f64> {
            (0..n)
                .map(|d| centroid[d] + coeff * (centroid[d] - from[d]))
                .collect()
        };

        let reflected = blend(&simplex[n].0, alpha);
        let reflected_value = eval(&reflected);
        if reflected_value > simplex[0].1 {
            // Try to expand further in the same direction.
            let expanded = blend(&simplex[n].0, gamma);
            let expanded_value = eval(&expanded);
            simplex[n] = if expanded_value > reflected_value {
                (expanded, expanded_value)
            } else {
                (reflected, reflected_value)
            };
        } else if reflected_value > simplex[n - 1].1 {
            simplex[n] = (reflected, reflected_value);
        } else {
            // Contract toward the centroid, outside or inside.
            let (contracted, contracted_value) = if reflected_value > simplex[n].1 {
                let point = blend(&simplex[n].0, beta);
                let value = eval(&point);
                (point, value)
            } else {
                let point: Vec<f64> = (0..n)
                    .map(|d| centroid[d] - beta * (centroid[d] - simplex[n].0[d]))
                    .collect();
                let value = eval(&point);
                (point, value)
            };
            if contracted_value > simplex[n].1.max(reflected_value) {
                simplex[n] = (contracted, contracted_value);
            } else {
                // Shrink toward the best vertex.
                let best_point = simplex[0].0.clone();
                for vertex in simplex.iter_mut().skip(1) {
                    for d in 0..n {
                        vertex.0[d] = best_point[d] + delta * (vertex.0[d] - best_point[d]);
                    }
                    vertex.1 = eval(&vertex.0);
                }
            }
        }
        sort(&mut simplex);
    }

    let (x, value) = simplex.swap_remove(0);
    SimplexOutcome {
        x,
        value,
        iterations,
        evaluations,
        converged,
    }
}
