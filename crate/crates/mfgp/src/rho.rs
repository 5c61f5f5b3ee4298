//! Cross-fidelity coupling models: the coefficient rho that scales the latent
//! LF process into the HF observation equation, either constant, a low-order
//! polynomial in the spatial coordinates, or an empirical-GP (eGP) smoother of
//! per-station regression slopes.
//!
//! The eGP model is data driven and fixed after construction: per-station
//! slopes `cov(y_H, y_L) / var(y_L)` are smoothed by a small spatial GP whose
//! own hyperparameters are fitted by maximum likelihood, and the posterior
//! mean is looked up wherever a rho value is needed. Polynomial coefficients,
//! in contrast, are optimized jointly with the kernel parameters.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelParams;
use crate::optim::{nelder_mead, NelderMeadOpts};

/// Spatial RBF smoother hyperparameters for the eGP model. The kernel's
/// temporal length scale is unused (all smoothing is purely spatial).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmootherParams {
    pub kernel: KernelParams,
    pub noise_var: f64,
}

/// Per-station empirical slope with its coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationSlope {
    pub station: String,
    pub coords: (f64, f64),
    pub rho_hat: f64,
}

/// A station with matched LF/HF series on common time stamps.
#[derive(Debug, Clone)]
pub struct MatchedStation {
    pub station: String,
    pub coords: (f64, f64),
    pub y_l: Vec<f64>,
    pub y_h: Vec<f64>,
}

/// Fitted state of the eGP smoother.
#[derive(Debug, Clone)]
pub struct EmpiricalGpFit {
    pub params: SmootherParams,
    pub coords: Vec<(f64, f64)>,
    pub slopes: Vec<f64>,
    /// (K + noise I)^-1 slopes, precomputed for posterior-mean lookups.
    weights: DVector<f64>,
}

#[derive(Debug, Clone)]
pub enum RhoModel {
    Constant(f64),
    Linear {
        alpha: f64,
        beta_s1: f64,
        beta_s2: f64,
    },
    Quadratic {
        alpha: f64,
        beta_s1: f64,
        beta_s2: f64,
        beta_s1_sq: f64,
        beta_s2_sq: f64,
    },
    /// Fitted via [`fit_empirical_gp`]; evaluating an unfitted model errors.
    EmpiricalGp(Option<EmpiricalGpFit>),
}

impl RhoModel {
    /// Number of coefficients optimized jointly with the kernel parameters.
    pub fn trainable_len(&self) -> usize {
        match self {
            RhoModel::Constant(_) => 1,
            RhoModel::Linear { .. } => 3,
            RhoModel::Quadratic { .. } => 5,
            RhoModel::EmpiricalGp(_) => 0,
        }
    }

    pub fn trainable_values(&self) -> Vec<f64> {
        match self {
            RhoModel::Constant(r) => vec![*r],
            RhoModel::Linear { alpha, beta_s1, beta_s2 } => vec![*alpha, *beta_s1, *beta_s2],
            RhoModel::Quadratic { alpha, beta_s1, beta_s2, beta_s1_sq, beta_s2_sq } => {
                vec![*alpha, *beta_s1, *beta_s2, *beta_s1_sq, *beta_s2_sq]
            }
            RhoModel::EmpiricalGp(_) => Vec::new(),
        }
    }

    pub fn with_trainable_values(&self, v: &[f64]) -> RhoModel {
        match self {
            RhoModel::Constant(_) => RhoModel::Constant(v[0]),
            RhoModel::Linear { .. } => {
                RhoModel::Linear { alpha: v[0], beta_s1: v[1], beta_s2: v[2] }
            }
            RhoModel::Quadratic { .. } => RhoModel::Quadratic {
                alpha: v[0],
                beta_s1: v[1],
                beta_s2: v[2],
                beta_s1_sq: v[3],
                beta_s2_sq: v[4],
            },
            RhoModel::EmpiricalGp(fit) => RhoModel::EmpiricalGp(fit.clone()),
        }
    }
}

fn spatial_kernel(a: (f64, f64), b: (f64, f64), kp: &KernelParams) -> f64 {
    let d1 = a.0 - b.0;
    let d2 = a.1 - b.1;
    let ls2 = kp.length_scale_space * kp.length_scale_space;
    kp.signal_amplitude * (-0.5 * (d1 * d1 + d2 * d2) / ls2).exp()
}

/// rho value per location. Logs a warning when an extrapolation exceeds |10|,
/// which usually signals a runaway polynomial.
pub fn evaluate(model: &RhoModel, locations: &[(f64, f64)]) -> Result<Vec<f64>> {
    let out: Vec<f64> = match model {
        RhoModel::Constant(r) => vec![*r; locations.len()],
        RhoModel::Linear { alpha, beta_s1, beta_s2 } => locations
            .iter()
            .map(|&(s1, s2)| alpha + beta_s1 * s1 + beta_s2 * s2)
            .collect(),
        RhoModel::Quadratic { alpha, beta_s1, beta_s2, beta_s1_sq, beta_s2_sq } => locations
            .iter()
            .map(|&(s1, s2)| alpha + beta_s1 * s1 + beta_s2 * s2 + beta_s1_sq * s1 * s1 + beta_s2_sq * s2 * s2)
            .collect(),
        RhoModel::EmpiricalGp(fit) => {
            let fit = fit.as_ref().ok_or(Error::UnfittedEmpiricalModel)?;
            locations
                .iter()
                .map(|&loc| {
                    fit.coords
                        .iter()
                        .zip(fit.weights.iter())
                        .map(|(&c, w)| spatial_kernel(loc, c, &fit.params.kernel) * w)
                        .sum()
                })
                .collect()
        }
    };
    if let Some(bad) = out.iter().find(|v| v.abs() > 10.0) {
        log::warn!("rho evaluation produced extreme coupling value {bad:.3}; check the model specification");
    }
    Ok(out)
}

/// Per-station empirical slope `cov(y_H, y_L) / var(y_L)` over the station's
/// common time series, with the unbiased (n-1) convention. Requires at least
/// three common time points per station.
pub fn empirical_slopes(stations: &[MatchedStation]) -> Result<Vec<StationSlope>> {
    stations
        .iter()
        .map(|st| {
            if st.y_l.len() != st.y_h.len() {
                return Err(Error::InvalidParameter(format!(
                    "station {}: LF and HF series lengths differ ({} vs {})",
                    st.station,
                    st.y_l.len(),
                    st.y_h.len()
                )));
            }
            let n = st.y_l.len();
            if n < 3 {
                return Err(Error::InvalidParameter(format!(
                    "station {}: empirical slope needs >= 3 common time points, got {n}",
                    st.station
                )));
            }
            let nf = n as f64;
            let ml = st.y_l.iter().sum::<f64>() / nf;
            let mh = st.y_h.iter().sum::<f64>() / nf;
            let cov: f64 = st
                .y_l
                .iter()
                .zip(&st.y_h)
                .map(|(a, b)| (a - ml) * (b - mh))
                .sum::<f64>()
                / (nf - 1.0);
            let var: f64 = st.y_l.iter().map(|a| (a - ml) * (a - ml)).sum::<f64>() / (nf - 1.0);
            if var < 1e-12 {
                return Err(Error::DegenerateVariance { station: st.station.clone() });
            }
            Ok(StationSlope { station: st.station.clone(), coords: st.coords, rho_hat: cov / var })
        })
        .collect()
}

fn smoother_gram(coords: &[(f64, f64)], kp: &KernelParams, noise_var: f64) -> DMatrix<f64> {
    let n = coords.len();
    let mut k = DMatrix::from_fn(n, n, |i, j| spatial_kernel(coords[i], coords[j], kp));
    let ridge = noise_var + kp.default_jitter();
    for i in 0..n {
        k[(i, i)] += ridge;
    }
    k
}

fn smoother_nlml(coords: &[(f64, f64)], slopes: &DVector<f64>, kp: &KernelParams, noise_var: f64) -> f64 {
    let n = coords.len() as f64;
    let k = smoother_gram(coords, kp, noise_var);
    match Cholesky::new(k) {
        Some(chol) => {
            let alpha = chol.solve(slopes);
            let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            0.5 * slopes.dot(&alpha) + 0.5 * logdet + 0.5 * n * (2.0 * std::f64::consts::PI).ln()
        }
        None => f64::INFINITY,
    }
}

/// Fit the eGP smoother to per-station slopes. With `smoother` given the
/// hyperparameters are used as-is; otherwise they are estimated by maximizing
/// the smoother's own marginal likelihood (dense; station counts are small).
/// The noise variance is floored at 1e-6 times the slope variance to keep
/// interpolation well-posed.
pub fn fit_empirical_gp(
    slopes: &[StationSlope],
    smoother: Option<SmootherParams>,
) -> Result<RhoModel> {
    if slopes.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "eGP smoothing needs >= 2 stations with valid slopes, got {}",
            slopes.len()
        )));
    }
    let coords: Vec<(f64, f64)> = slopes.iter().map(|s| s.coords).collect();
    let vals = DVector::from_iterator(slopes.len(), slopes.iter().map(|s| s.rho_hat));

    let nf = vals.len() as f64;
    let mean = vals.sum() / nf;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0);
    let noise_floor = (1e-6 * var).max(1e-12);

    let params = match smoother {
        Some(p) => SmootherParams { kernel: p.kernel, noise_var: p.noise_var.max(noise_floor) },
        None => {
            // scale-aware initial guesses
            let mut dmax = 0f64;
            for i in 0..coords.len() {
                for j in (i + 1)..coords.len() {
                    let d1 = coords[i].0 - coords[j].0;
                    let d2 = coords[i].1 - coords[j].1;
                    dmax = dmax.max((d1 * d1 + d2 * d2).sqrt());
                }
            }
            let amp0 = (var + mean * mean).max(1e-6);
            let ls0 = (dmax / 2.0).max(1e-3);
            let x0 = [amp0.ln(), ls0.ln(), (0.1 * amp0).max(noise_floor).ln()];
            let r = nelder_mead(
                |x| {
                    let kp = match KernelParams::new(x[0].exp(), x[1].exp(), 1.0) {
                        Ok(kp) => kp,
                        Err(_) => return f64::INFINITY,
                    };
                    smoother_nlml(&coords, &vals, &kp, x[2].exp().max(noise_floor))
                },
                &x0,
                &[0.5, 0.5, 0.5],
                &NelderMeadOpts { max_evals: 300, tol: 1e-8 },
            );
            SmootherParams {
                kernel: KernelParams::new(r.x[0].exp(), r.x[1].exp(), 1.0)?,
                noise_var: r.x[2].exp().max(noise_floor),
            }
        }
    };

    let k = smoother_gram(&coords, &params.kernel, params.noise_var);
    let chol = Cholesky::new(k).ok_or(Error::DenseCholeskyFailure)?;
    let weights = chol.solve(&vals);

    Ok(RhoModel::EmpiricalGp(Some(EmpiricalGpFit {
        params,
        coords,
        slopes: vals.as_slice().to_vec(),
        weights,
    })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn constant_model_broadcasts() {
        let locs = vec![(0.0, 0.0), (1.0, 2.0), (-3.0, 5.0)];
        let v = evaluate(&RhoModel::Constant(0.6), &locs).unwrap();
        assert_eq!(v, vec![0.6, 0.6, 0.6]);
    }

    #[test]
    fn polynomial_models_evaluate_pointwise() {
        let lin = RhoModel::Linear { alpha: 1.0, beta_s1: 2.0, beta_s2: 0.0 };
        assert_eq!(evaluate(&lin, &[(0.5, 7.0)]).unwrap(), vec![2.0]);
        let quad = RhoModel::Quadratic {
            alpha: 0.0,
            beta_s1: 0.0,
            beta_s2: 0.0,
            beta_s1_sq: 1.0,
            beta_s2_sq: 0.0,
        };
        assert_eq!(evaluate(&quad, &[(3.0, 0.0)]).unwrap(), vec![9.0]);
    }

    #[test]
    fn unfitted_empirical_model_errors() {
        let r = evaluate(&RhoModel::EmpiricalGp(None), &[(0.0, 0.0)]);
        assert!(matches!(r, Err(Error::UnfittedEmpiricalModel)));
    }

    fn station(name: &str, coords: (f64, f64), y_l: Vec<f64>, y_h: Vec<f64>) -> MatchedStation {
        MatchedStation { station: name.into(), coords, y_l, y_h }
    }

    #[test]
    fn slope_of_exact_linear_relation() {
        let y_l = vec![0.3, -0.7, 1.1, 0.4];
        let y_h: Vec<f64> = y_l.iter().map(|v| 2.0 * v).collect();
        let s = empirical_slopes(&[station("a", (0.0, 0.0), y_l, y_h)]).unwrap();
        assert_relative_eq!(s[0].rho_hat, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn slope_of_hand_dataset() {
        // y_L = (0,1,2), y_H = (1,3,5): cov = 2, var = 1
        let s = empirical_slopes(&[station(
            "a",
            (1.0, 1.0),
            vec![0.0, 1.0, 2.0],
            vec![1.0, 3.0, 5.0],
        )])
        .unwrap();
        assert_relative_eq!(s[0].rho_hat, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn independent_noise_slope_vanishes() {
        let mut rng = StdRng::seed_from_u64(5);
        let y_l: Vec<f64> = (0..10_000).map(|_| rng.gen::<f64>() - 0.5).collect();
        let y_h: Vec<f64> = (0..10_000).map(|_| rng.gen::<f64>() - 0.5).collect();
        let s = empirical_slopes(&[station("a", (0.0, 0.0), y_l, y_h)]).unwrap();
        assert!(s[0].rho_hat.abs() < 0.1);
    }

    #[test]
    fn degenerate_variance_and_short_series_error() {
        let r = empirical_slopes(&[station("flat", (0.0, 0.0), vec![1.0; 5], vec![0.0, 1.0, 2.0, 3.0, 4.0])]);
        assert!(matches!(r, Err(Error::DegenerateVariance { .. })));
        let r = empirical_slopes(&[station("short", (0.0, 0.0), vec![0.0, 1.0], vec![0.0, 1.0])]);
        assert!(r.is_err());
    }

    fn slope(coords: (f64, f64), v: f64) -> StationSlope {
        StationSlope { station: format!("{coords:?}"), coords, rho_hat: v }
    }

    #[test]
    fn constant_field_smooths_to_constant() {
        let slopes: Vec<StationSlope> = (0..5)
            .flat_map(|i| (0..5).map(move |j| slope((i as f64, j as f64), 0.75)))
            .collect();
        let model = fit_empirical_gp(&slopes, None).unwrap();
        let locs: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 0.5 + i as f64 * 0.7)).collect();
        for v in evaluate(&model, &locs).unwrap() {
            assert!((v - 0.75).abs() < 1e-6, "posterior mean {v} should stay at 0.75");
        }
    }

    #[test]
    fn near_interpolation_at_training_stations() {
        let slopes = vec![
            slope((0.0, 0.0), 0.4),
            slope((1.0, 0.0), 0.9),
            slope((0.0, 1.0), 0.7),
            slope((1.0, 1.0), 0.55),
        ];
        let params = SmootherParams {
            kernel: KernelParams::new(1.0, 0.6, 1.0).unwrap(),
            noise_var: 1e-10,
        };
        let model = fit_empirical_gp(&slopes, Some(params)).unwrap();
        let locs: Vec<(f64, f64)> = slopes.iter().map(|s| s.coords).collect();
        let v = evaluate(&model, &locs).unwrap();
        for (got, want) in v.iter().zip(&slopes) {
            assert!((got - want.rho_hat).abs() < 1e-4, "{got} vs {}", want.rho_hat);
        }
    }

    #[test]
    fn midpoint_prediction_brackets_two_stations() {
        let slopes = vec![slope((0.0, 0.0), 1.0), slope((2.0, 0.0), 2.0)];
        let params = SmootherParams {
            kernel: KernelParams::new(1.0, 4.0, 1.0).unwrap(),
            noise_var: 1e-8,
        };
        let model = fit_empirical_gp(&slopes, Some(params)).unwrap();
        let v = evaluate(&model, &[(1.0, 0.0)]).unwrap()[0];
        assert!(v > 1.0 && v < 2.0, "midpoint value {v} should lie between the slopes");
    }

    #[test]
    fn posterior_mean_scales_linearly_in_observations() {
        let base = vec![
            slope((0.0, 0.0), 0.5),
            slope((1.5, 0.3), 0.8),
            slope((0.2, 1.1), 0.3),
        ];
        let scaled: Vec<StationSlope> = base
            .iter()
            .map(|s| StationSlope { rho_hat: 3.0 * s.rho_hat, ..s.clone() })
            .collect();
        let params = SmootherParams {
            kernel: KernelParams::new(0.7, 1.2, 1.0).unwrap(),
            noise_var: 1e-4,
        };
        let m1 = fit_empirical_gp(&base, Some(params)).unwrap();
        let m2 = fit_empirical_gp(&scaled, Some(params)).unwrap();
        let locs = vec![(0.4, 0.4), (1.0, 0.9), (2.0, 2.0)];
        let v1 = evaluate(&m1, &locs).unwrap();
        let v2 = evaluate(&m2, &locs).unwrap();
        for (a, b) in v1.iter().zip(&v2) {
            assert_relative_eq!(3.0 * a, *b, epsilon = 1e-10);
        }
    }

    #[test]
    fn too_few_stations_rejected() {
        assert!(fit_empirical_gp(&[slope((0.0, 0.0), 1.0)], None).is_err());
    }
}
