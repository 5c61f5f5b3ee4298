//! Derivative-free simplex minimizer used for all hyperparameter fits.
//!
//! Positivity-constrained parameters are handled by the callers through log
//! transforms, so the search space here is unconstrained. Objective values of
//! +inf are legal (rejected-step sentinels) and simply rank worst.

#[derive(Debug, Clone, Copy)]
pub(crate) struct NelderMeadOpts {
    pub max_evals: usize,
    /// Convergence when the simplex objective spread drops below this.
    pub tol: f64,
}

impl Default for NelderMeadOpts {
    fn default() -> Self {
        Self { max_evals: 500, tol: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct OptimResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub evaluations: usize,
    pub iterations: usize,
    pub converged: bool,
}

fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

pub(crate) fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    step: &[f64],
    opts: &NelderMeadOpts,
) -> OptimResult {
    let dim = x0.len();
    assert!(dim > 0 && step.len() == dim);
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| -> f64 {
        *evals += 1;
        sanitize(f(x))
    };

    // initial simplex: x0 plus one perturbed vertex per dimension
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    let f0 = eval(x0, &mut evals);
    simplex.push((x0.to_vec(), f0));
    for d in 0..dim {
        let mut x = x0.to_vec();
        x[d] += step[d];
        let fx = eval(&x, &mut evals);
        simplex.push((x, fx));
    }

    let (alpha, gamma, beta, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut iterations = 0usize;
    let mut converged = false;

    while evals < opts.max_evals {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let best = simplex[0].1;
        let worst = simplex[dim].1;
        if worst.is_finite() && (worst - best).abs() < opts.tol {
            converged = true;
            break;
        }
        iterations += 1;

        // centroid of all but the worst vertex
        let mut centroid = vec![0f64; dim];
        for v in &simplex[..dim] {
            for d in 0..dim {
                centroid[d] += v.0[d];
            }
        }
        for c in centroid.iter_mut() {
            *c /= dim as f64;
        }

        let lerp = |from: &[f64], coef: f64| -> Vec<f64> {
            (0..dim).map(|d| centroid[d] + coef * (from[d] - centroid[d])).collect()
        };

        let xr = lerp(&simplex[dim].0, -alpha);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = lerp(&simplex[dim].0, -gamma);
            let fe = eval(&xe, &mut evals);
            simplex[dim] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[dim - 1].1 {
            simplex[dim] = (xr, fr);
        } else {
            // contract (outside if the reflection helped at all)
            let (xc, fc) = if fr < simplex[dim].1 {
                let xc = lerp(&simplex[dim].0, -beta);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            } else {
                let xc = lerp(&simplex[dim].0, beta);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            };
            if fc < simplex[dim].1.min(fr) {
                simplex[dim] = (xc, fc);
            } else {
                // shrink toward the best vertex
                let x_best = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    for d in 0..dim {
                        v.0[d] = x_best[d] + sigma * (v.0[d] - x_best[d]);
                    }
                    let xv = v.0.clone();
                    v.1 = eval(&xv, &mut evals);
                    if evals >= opts.max_evals {
                        break;
                    }
                }
            }
        }
    }

    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    OptimResult {
        x: simplex[0].0.clone(),
        fx: simplex[0].1,
        evaluations: evals,
        iterations,
        converged,
    }
}
