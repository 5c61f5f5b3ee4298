//! Synthetic multi-fidelity spatio-temporal data generation.
//!
//! Stations sit on a regular `n_space x n_space` grid with unit spacing;
//! time runs over `n_time` equispaced steps on [0, 1]. The low-fidelity field
//! is a latent GP draw plus i.i.d. noise, the discrepancy is an independent
//! GP draw plus noise, and the high-fidelity field is
//! `y_H = rho_true * y_L + delta`. Kernel length scales are parameterized by
//! target nearest-neighbor correlations via `lengthscale_from_corr`.
//!
//! Components use separable squared-exponential covariances whose spatial and
//! temporal factors each carry the component's `sigma2` multiplier, so the
//! zero-lag variance of a component equals `sigma2^2`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::SpaceTimePoint;

/// Declarative description of one simulation draw.
///
/// RNG streams are split by sampled field: the latent LF draw, LF noise,
/// latent discrepancy draw, discrepancy noise, and the station split each use
/// their own ChaCha stream of the same seed, so parallel replications with
/// distinct seeds are reproducible field by field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Grid side; the number of stations is `n_space^2`.
    pub n_space: usize,
    /// Time steps, equispaced on [0, 1].
    pub n_time: usize,
    /// True cross-fidelity coefficient.
    pub rho_true: f64,
    /// Target correlation between spatially adjacent LF values.
    pub target_corr_space_l: f64,
    /// Target correlation between spatially adjacent discrepancy values.
    pub target_corr_space_d: f64,
    /// Target correlation between successive time steps (both components).
    pub target_corr_time: f64,
    /// LF signal variance multiplier (enters each separable factor).
    pub sigma2_l: f64,
    /// Discrepancy signal variance multiplier (enters each separable factor).
    pub sigma2_d: f64,
    /// LF measurement-noise variance.
    pub noise_var_l: f64,
    /// Discrepancy measurement-noise variance.
    pub noise_var_d: f64,
    /// Jitter added to sampling covariances for numerical stability.
    pub jitter: f64,
    /// Fraction of stations used for HF training (round half up).
    pub train_fraction: f64,
    /// Explicit training-station count, overriding `train_fraction`.
    pub n_train_stations: Option<usize>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_space: 6,
            n_time: 10,
            rho_true: 0.6,
            target_corr_space_l: 0.72,
            target_corr_space_d: 0.72,
            target_corr_time: 0.8,
            sigma2_l: 1.0,
            sigma2_d: 2.0,
            noise_var_l: 0.1,
            noise_var_d: 0.1,
            jitter: 1e-8,
            train_fraction: 0.3,
            n_train_stations: None,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_space < 2 {
            return Err(Error::InvalidParameter("n_space must be >= 2".into()));
        }
        if self.n_time < 2 {
            return Err(Error::InvalidParameter("n_time must be >= 2".into()));
        }
        for (name, c) in [
            ("target_corr_space_l", self.target_corr_space_l),
            ("target_corr_space_d", self.target_corr_space_d),
            ("target_corr_time", self.target_corr_time),
        ] {
            if !(c > 0.0 && c < 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must lie strictly in (0,1), got {c}"
                )));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidParameter(
                "train_fraction must lie strictly in (0,1)".into(),
            ));
        }
        for (name, v) in [
            ("rho_true", self.rho_true),
            ("sigma2_l", self.sigma2_l),
            ("sigma2_d", self.sigma2_d),
            ("noise_var_l", self.noise_var_l),
            ("noise_var_d", self.noise_var_d),
            ("jitter", self.jitter),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFiniteInput(format!("sim config field {name}")));
            }
        }
        Ok(())
    }

    pub fn n_stations(&self) -> usize {
        self.n_space * self.n_space
    }
}

/// One high-fidelity observation row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HfRow {
    pub station_id: usize,
    pub point: SpaceTimePoint,
    pub y: f64,
}

/// Latent fields kept for diagnostics.
#[derive(Debug, Clone)]
pub struct SimTruth {
    /// Latent LF draw (before measurement noise), stacked time-fastest.
    pub latent_lf: Vec<f64>,
    /// Discrepancy delta = latent draw + its noise.
    pub delta: Vec<f64>,
    /// High-fidelity field `rho * y_L + delta` on the full grid.
    pub f_h: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SimDataset {
    pub config: SimConfig,
    /// Station coordinates, indexed by station id.
    pub stations: Vec<(f64, f64)>,
    /// LF rows over the full space-time grid, time-fastest within station.
    pub lf_points: Vec<SpaceTimePoint>,
    pub y_l: Vec<f64>,
    pub hf_train: Vec<HfRow>,
    pub hf_test: Vec<HfRow>,
    pub train_stations: Vec<usize>,
    pub test_stations: Vec<usize>,
    pub truth: SimTruth,
}

impl SimDataset {
    pub fn hf_train_points(&self) -> Vec<SpaceTimePoint> {
        self.hf_train.iter().map(|r| r.point).collect()
    }

    pub fn hf_train_values(&self) -> Vec<f64> {
        self.hf_train.iter().map(|r| r.y).collect()
    }

    pub fn hf_test_points(&self) -> Vec<SpaceTimePoint> {
        self.hf_test.iter().map(|r| r.point).collect()
    }

    pub fn hf_test_values(&self) -> Vec<f64> {
        self.hf_test.iter().map(|r| r.y).collect()
    }

    /// LF value lookup at an exact space-time point (nested designs).
    pub fn lf_value_at(&self, p: &SpaceTimePoint) -> Option<f64> {
        self.lf_points.iter().position(|q| q == p).map(|i| self.y_l[i])
    }
}

/// Length scale achieving correlation `c` at distance `d` for a
/// squared-exponential kernel: `l = d / sqrt(-2 ln c)`.
pub fn lengthscale_from_corr(c: f64, d: f64) -> Result<f64> {
    if !(c > 0.0 && c < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "target correlation must lie strictly in (0,1), got {c}"
        )));
    }
    if !(d > 0.0) || !d.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "distance must be positive and finite, got {d}"
        )));
    }
    Ok(d / (-2.0 * c.ln()).sqrt())
}

/// Deterministic station split: `round(fraction * n)` training stations
/// (half-up), at least one on each side, sampled uniformly at random.
pub fn split_stations(station_ids: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n = station_ids.len();
    let k = ((fraction * n as f64) + 0.5).floor() as usize;
    split_stations_count(station_ids, k, seed)
}

fn split_stations_count(station_ids: &[usize], k: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n = station_ids.len();
    let k = k.clamp(1, (n - 1).max(1));
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(4);
    let mut ids = station_ids.to_vec();
    use rand::seq::SliceRandom;
    ids.shuffle(&mut rng);
    let mut train: Vec<usize> = ids[..k].to_vec();
    let mut test: Vec<usize> = ids[k..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn standard_normal_vec(n: usize, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Draw one multi-fidelity dataset. Pure given the config; bit-identical
/// tables for identical configs.
pub fn generate(cfg: &SimConfig) -> Result<SimDataset> {
    cfg.validate()?;
    let ns = cfg.n_stations();
    let nt = cfg.n_time;
    let n = ns * nt;

    let stations: Vec<(f64, f64)> = (0..cfg.n_space)
        .flat_map(|i| (0..cfg.n_space).map(move |j| (i as f64, j as f64)))
        .collect();
    let dt = 1.0 / (nt as f64 - 1.0);
    let times: Vec<f64> = (0..nt).map(|k| k as f64 * dt).collect();

    // time-fastest within station
    let mut points = Vec::with_capacity(n);
    for &(s1, s2) in &stations {
        for &t in &times {
            points.push(SpaceTimePoint::new(s1, s2, t)?);
        }
    }

    let ls_l = lengthscale_from_corr(cfg.target_corr_space_l, 1.0)?;
    let ls_d = lengthscale_from_corr(cfg.target_corr_space_d, 1.0)?;
    let lt = lengthscale_from_corr(cfg.target_corr_time, dt)?;

    let draw_field = |sigma2: f64, ls: f64, seed_stream: u64| -> Result<Vec<f64>> {
        let k_s = spatial_gram(&stations, sigma2, ls);
        let k_t = temporal_gram(&times, sigma2, lt);
        let mut k_full = DMatrix::zeros(n, n);
        for j in 0..ns {
            for jp in 0..ns {
                let ks = k_s[(j, jp)];
                for k in 0..nt {
                    for kp in 0..nt {
                        k_full[(j * nt + k, jp * nt + kp)] = ks * k_t[(k, kp)];
                    }
                }
            }
        }
        for i in 0..n {
            k_full[(i, i)] += cfg.jitter;
        }
        let chol = k_full.cholesky().ok_or(Error::DenseCholeskyFailure)?;
        let z = DVector::from_vec(standard_normal_vec(n, cfg.seed, seed_stream));
        Ok((chol.l() * z).as_slice().to_vec())
    };

    let d_l = draw_field(cfg.sigma2_l, ls_l, 0)?;
    let e_l = standard_normal_vec(n, cfg.seed, 1);
    let d_d = draw_field(cfg.sigma2_d, ls_d, 2)?;
    let e_d = standard_normal_vec(n, cfg.seed, 3);

    let sd_noise_l = cfg.noise_var_l.sqrt();
    let sd_noise_d = cfg.noise_var_d.sqrt();
    let y_l: Vec<f64> = d_l.iter().zip(&e_l).map(|(d, e)| d + sd_noise_l * e).collect();
    let delta: Vec<f64> = d_d.iter().zip(&e_d).map(|(d, e)| d + sd_noise_d * e).collect();
    let f_h: Vec<f64> = y_l.iter().zip(&delta).map(|(yl, dd)| cfg.rho_true * yl + dd).collect();

    let ids: Vec<usize> = (0..ns).collect();
    let (train_stations, test_stations) = match cfg.n_train_stations {
        Some(k) => split_stations_count(&ids, k, cfg.seed),
        None => split_stations(&ids, cfg.train_fraction, cfg.seed),
    };

    let hf_rows = |station_list: &[usize]| -> Vec<HfRow> {
        station_list
            .iter()
            .flat_map(|&s| {
                let points = &points;
                let f_h = &f_h;
                (0..nt).map(move |k| HfRow {
                    station_id: s,
                    point: points[s * nt + k],
                    y: f_h[s * nt + k],
                })
            })
            .collect()
    };
    let hf_train = hf_rows(&train_stations);
    let hf_test = hf_rows(&test_stations);

    Ok(SimDataset {
        config: cfg.clone(),
        stations,
        lf_points: points,
        y_l,
        hf_train,
        hf_test,
        train_stations,
        test_stations,
        truth: SimTruth { latent_lf: d_l, delta, f_h },
    })
}

fn spatial_gram(stations: &[(f64, f64)], sigma2: f64, ls: f64) -> DMatrix<f64> {
    let n = stations.len();
    DMatrix::from_fn(n, n, |a, b| {
        let d1 = stations[a].0 - stations[b].0;
        let d2 = stations[a].1 - stations[b].1;
        sigma2 * (-(d1 * d1 + d2 * d2) / (2.0 * ls * ls)).exp()
    })
}

fn temporal_gram(times: &[f64], sigma2: f64, lt: f64) -> DMatrix<f64> {
    let n = times.len();
    DMatrix::from_fn(n, n, |a, b| {
        let dt = times[a] - times[b];
        sigma2 * (-(dt * dt) / (2.0 * lt * lt)).exp()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn lengthscale_closed_forms() {
        // c = e^{-1/2} at unit distance gives exactly l = 1
        let c = (-0.5f64).exp();
        assert_relative_eq!(lengthscale_from_corr(c, 1.0).unwrap(), 1.0, epsilon = 1e-14);
        // 1/sqrt(-2 ln 0.8), checked against the algebraic round trip below
        assert_relative_eq!(
            lengthscale_from_corr(0.8, 1.0).unwrap(),
            1.496_900_4,
            epsilon = 1e-6
        );
        assert!(lengthscale_from_corr(1.0, 1.0).is_err());
        assert!(lengthscale_from_corr(0.0, 1.0).is_err());
        assert!(lengthscale_from_corr(-0.3, 1.0).is_err());
    }

    #[test]
    fn lengthscale_round_trips() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        use rand::Rng;
        for _ in 0..50 {
            let c: f64 = rng.gen_range(0.01..0.99);
            let d: f64 = rng.gen_range(0.05..3.0);
            let l = lengthscale_from_corr(c, d).unwrap();
            let back = (-0.5 * (d / l).powi(2)).exp();
            assert_relative_eq!(back, c, epsilon = 1e-12);
        }
    }

    #[test]
    fn table2_shape_with_pinned_split() {
        let cfg = SimConfig { n_train_stations: Some(12), ..SimConfig::default() };
        let ds = generate(&cfg).unwrap();
        assert_eq!(ds.lf_points.len(), 360);
        assert_eq!(ds.train_stations.len(), 12);
        assert_eq!(ds.test_stations.len(), 24);
        assert_eq!(ds.hf_train.len(), 120);
        assert_eq!(ds.hf_test.len(), 240);
        // stations split exhaustively, full series on one side only
        let mut all: Vec<usize> =
            ds.train_stations.iter().chain(&ds.test_stations).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..36).collect::<Vec<_>>());
    }

    #[test]
    fn split_rounding_and_guards() {
        let ids: Vec<usize> = (0..36).collect();
        let (train, test) = split_stations(&ids, 0.3, 7);
        // round-half-up(10.8) = 11
        assert_eq!(train.len(), 11);
        assert_eq!(test.len(), 25);
        let (train, test) = split_stations(&ids, 0.001, 7);
        assert_eq!(train.len(), 1, "at least one training station enforced");
        assert_eq!(test.len(), 35);
        let (t1, _) = split_stations(&ids, 0.3, 123);
        let (t2, _) = split_stations(&ids, 0.3, 123);
        assert_eq!(t1, t2);
    }

    #[test]
    fn generation_is_reproducible() {
        let cfg = SimConfig { n_space: 3, n_time: 4, ..SimConfig::default() };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.y_l, b.y_l);
        assert!(a.hf_train.iter().zip(&b.hf_train).all(|(x, y)| x == y));
        let c = generate(&SimConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.y_l, c.y_l);
    }

    #[test]
    fn separable_covariance_matches_kronecker() {
        let stations = vec![(0.0, 0.0), (1.0, 0.0), (0.0, 2.0)];
        let times = vec![0.0, 0.5, 1.0];
        let sigma2 = 1.3;
        let ls = 0.9;
        let lt = 0.7;
        let k_s = spatial_gram(&stations, sigma2, ls);
        let k_t = temporal_gram(&times, sigma2, lt);
        let kron = k_s.kronecker(&k_t);
        for (j, jp) in [(0, 1), (1, 2), (2, 0), (0, 0)] {
            for (k, kp) in [(0, 2), (1, 1), (2, 0)] {
                let want = k_s[(j, jp)] * k_t[(k, kp)];
                assert_relative_eq!(kron[(j * 3 + k, jp * 3 + kp)], want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn temporal_lag_one_correlation_hits_target() {
        // average sample lag-1 autocorrelation of the latent LF field at one
        // station over replications
        let mut num = 0.0;
        let mut da = 0.0;
        let mut db = 0.0;
        for rep in 0..200 {
            let cfg = SimConfig {
                n_space: 4,
                n_time: 10,
                seed: 1000 + rep,
                ..SimConfig::default()
            };
            let ds = generate(&cfg).unwrap();
            let series = &ds.truth.latent_lf[..10]; // station 0, time-fastest
            for k in 0..9 {
                num += series[k] * series[k + 1];
                da += series[k] * series[k];
                db += series[k + 1] * series[k + 1];
            }
        }
        let corr = num / (da.sqrt() * db.sqrt());
        assert!(
            (corr - 0.8).abs() < 0.05,
            "lag-1 correlation {corr} should be near the 0.80 target"
        );
    }

    #[test]
    fn degenerate_limit_yields_null_hf() {
        let cfg = SimConfig {
            n_space: 3,
            n_time: 4,
            rho_true: 0.0,
            sigma2_d: 1e-9,
            noise_var_d: 1e-18,
            ..SimConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let max_h = ds.hf_train.iter().chain(&ds.hf_test).map(|r| r.y.abs()).fold(0.0, f64::max);
        assert!(max_h < 1e-3, "y_H should collapse to ~0, got {max_h}");
    }

    #[test]
    fn pooled_regression_slope_recovers_rho() {
        let cfg = SimConfig {
            n_space: 5,
            n_time: 12,
            sigma2_d: 0.02,
            noise_var_l: 1e-6,
            noise_var_d: 1e-6,
            seed: 5,
            ..SimConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let y_h = &ds.truth.f_h;
        let y_l = &ds.y_l;
        let my = y_l.iter().sum::<f64>() / y_l.len() as f64;
        let mh = y_h.iter().sum::<f64>() / y_h.len() as f64;
        let cov: f64 = y_l.iter().zip(y_h).map(|(a, b)| (a - my) * (b - mh)).sum();
        let var: f64 = y_l.iter().map(|a| (a - my) * (a - my)).sum();
        let slope = cov / var;
        assert!(
            (slope - 0.6).abs() < 0.02,
            "pooled slope {slope} should approach rho_true in the near-noiseless limit"
        );
    }
}
