//! End-to-end NLML evaluation, hyperparameter optimization over transformed
//! parameters, and posterior prediction at held-out HF space-time points.
//!
//! One NLML evaluation runs the full pipeline: Vecchia factors for the latent
//! LF and discrepancy processes, the rho vector at HF locations, assembly of
//! A/D_eps/H with its sparse Cholesky, optional GLS centering, and the
//! Gaussian log-density. Recoverable numerical failures (non-positive
//! conditional variance, Cholesky breakdown) surface as a +inf sentinel so the
//! optimizer treats the step as rejected; malformed data is a hard error.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{latent_cov, KernelParams, SpaceTimePoint};
use crate::meanmodel::{build_design, gls_fit, reml_correction, GlsFit, GlsKind, GlsMode};
use crate::mfstruct::{assemble, build_layout, FidelityLayout, MfSystem, NoiseModel};
use crate::optim::{nelder_mead, NelderMeadOpts};
use crate::rho::{self, MatchedStation, RhoModel};
use crate::simulate::SimDataset;
use crate::vecchia::{
    build_factor, factor_from_neighbors, order_points, select_all_neighbors, ConditioningKind,
    ConditioningRule, OrderingStrategy, VecchiaFactor,
};

const LN_2PI: f64 = 1.8378770664093453;

/// Observations of both fidelities plus the latent layout built from them.
#[derive(Debug, Clone)]
pub struct MfData {
    pub lf_points: Vec<SpaceTimePoint>,
    pub y_l: Vec<f64>,
    pub hf_points: Vec<SpaceTimePoint>,
    pub y_h: Vec<f64>,
    pub layout: FidelityLayout,
}

impl MfData {
    pub fn new(
        lf_points: Vec<SpaceTimePoint>,
        y_l: Vec<f64>,
        hf_points: Vec<SpaceTimePoint>,
        y_h: Vec<f64>,
    ) -> Result<Self> {
        if lf_points.is_empty() {
            return Err(Error::EmptyFidelity("LF".into()));
        }
        if lf_points.len() != y_l.len() || hf_points.len() != y_h.len() {
            return Err(Error::InvalidParameter(
                "point and value vectors must have matching lengths".into(),
            ));
        }
        for (i, v) in y_l.iter().chain(&y_h).enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteValue { path: "observations".into(), row: i });
            }
        }
        let layout = build_layout(&lf_points, &hf_points)?;
        Ok(Self { lf_points, y_l, hf_points, y_h, layout })
    }

    pub fn from_sim(ds: &SimDataset) -> Result<Self> {
        Self::new(
            ds.lf_points.clone(),
            ds.y_l.clone(),
            ds.hf_train_points(),
            ds.hf_train_values(),
        )
    }

    pub fn n(&self) -> usize {
        self.lf_points.len() + self.hf_points.len()
    }

    /// Stacked observation vector [y_L; y_H].
    pub fn values(&self) -> Vec<f64> {
        self.y_l.iter().chain(&self.y_h).copied().collect()
    }

    /// LF value lookup keyed by exact space-time coordinates.
    pub fn lf_value_map(&self) -> HashMap<(u64, u64, u64), f64> {
        self.lf_points.iter().map(|p| p.key()).zip(self.y_l.iter().copied()).collect()
    }

    /// Stations where both fidelities are observed at common time stamps
    /// (exact coordinate matching), for empirical-slope estimation. Stations
    /// with fewer than three common times are dropped.
    pub fn matched_stations(&self) -> Vec<MatchedStation> {
        let mut lf_by_loc: HashMap<(u64, u64), Vec<(u64, f64, f64)>> = HashMap::new();
        for (p, &v) in self.lf_points.iter().zip(&self.y_l) {
            lf_by_loc.entry(p.location_key()).or_default().push((
                crate::kernels::bits(p.t),
                p.t,
                v,
            ));
        }
        let mut hf_by_loc: HashMap<(u64, u64), Vec<(f64, f64, f64, f64)>> = HashMap::new();
        for (p, &v) in self.hf_points.iter().zip(&self.y_h) {
            hf_by_loc.entry(p.location_key()).or_default().push((p.t, p.s1, p.s2, v));
        }
        let mut out = Vec::new();
        let mut locs: Vec<_> = hf_by_loc.keys().copied().collect();
        locs.sort_unstable();
        for loc in locs {
            let hf_rows = &hf_by_loc[&loc];
            let Some(lf_rows) = lf_by_loc.get(&loc) else { continue };
            let lf_map: HashMap<u64, f64> = lf_rows.iter().map(|&(k, _, v)| (k, v)).collect();
            let mut rows: Vec<(f64, f64, f64)> = hf_rows
                .iter()
                .filter_map(|&(t, _, _, yh)| {
                    lf_map.get(&crate::kernels::bits(t)).map(|&yl| (t, yl, yh))
                })
                .collect();
            rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            if rows.len() < 3 {
                continue;
            }
            let (s1, s2) = (hf_rows[0].1, hf_rows[0].2);
            out.push(MatchedStation {
                station: format!("({s1},{s2})"),
                coords: (s1, s2),
                y_l: rows.iter().map(|r| r.1).collect(),
                y_h: rows.iter().map(|r| r.2).collect(),
            });
        }
        out
    }
}

/// All trainable parameters of the multi-fidelity model.
#[derive(Debug, Clone)]
pub struct MfHyperParams {
    pub kernel_l: KernelParams,
    pub kernel_d: KernelParams,
    pub noise: NoiseModel,
    pub rho: RhoModel,
}

impl MfHyperParams {
    /// Transformed parameter vector: log of every positivity-constrained
    /// parameter, identity for rho / polynomial coefficients.
    pub fn pack(&self) -> Vec<f64> {
        let mut v = vec![
            self.noise.g_l_sq.ln(),
            self.noise.g_d_sq.ln(),
            self.kernel_l.signal_amplitude.ln(),
            self.kernel_l.length_scale_space.ln(),
            self.kernel_l.length_scale_time.ln(),
            self.kernel_d.signal_amplitude.ln(),
            self.kernel_d.length_scale_space.ln(),
            self.kernel_d.length_scale_time.ln(),
        ];
        v.extend(self.rho.trainable_values());
        v
    }

    /// Inverse of [`pack`]; fails when a transformed value exponentiates to a
    /// non-finite or zero parameter.
    pub fn unpack(&self, x: &[f64]) -> Result<MfHyperParams> {
        if x.len() != 8 + self.rho.trainable_len() {
            return Err(Error::InvalidParameter("parameter vector length mismatch".into()));
        }
        Ok(MfHyperParams {
            noise: NoiseModel::new(x[0].exp(), x[1].exp())?,
            kernel_l: KernelParams::new(x[2].exp(), x[3].exp(), x[4].exp())?,
            kernel_d: KernelParams::new(x[5].exp(), x[6].exp(), x[7].exp())?,
            rho: self.rho.with_trainable_values(&x[8..]),
        })
    }
}

/// Vecchia settings for both latent processes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VecchiaConfig {
    pub ordering: OrderingStrategy,
    pub conditioning: ConditioningRule,
    /// Compute correlation-based conditioning sets once at the initial
    /// parameters instead of refreshing them every likelihood evaluation.
    pub freeze_neighbors: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub vecchia: VecchiaConfig,
    pub gls: GlsMode,
}

/// Cached orderings (and optionally frozen conditioning sets) for repeated
/// NLML evaluations over one dataset.
pub struct NlmlEngine<'a> {
    data: &'a MfData,
    config: InferenceConfig,
    ordered_latent: Vec<SpaceTimePoint>,
    lperm: Vec<usize>,
    ordered_hf: Vec<SpaceTimePoint>,
    dperm: Vec<usize>,
    frozen_l: Option<Vec<Vec<usize>>>,
    frozen_d: Option<Vec<Vec<usize>>>,
}

impl<'a> NlmlEngine<'a> {
    /// `freeze_at`: parameters at which correlation conditioning sets are
    /// frozen when the config requests it. Nearest-neighbor sets do not depend
    /// on parameters and are always precomputed.
    pub fn new(
        data: &'a MfData,
        config: &InferenceConfig,
        freeze_at: Option<&MfHyperParams>,
    ) -> Result<Self> {
        let lperm = order_points(&data.layout.latent_points, &config.vecchia.ordering)?;
        let ordered_latent: Vec<SpaceTimePoint> =
            lperm.iter().map(|&i| data.layout.latent_points[i]).collect();
        let (dperm, ordered_hf) = if data.hf_points.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            let dperm = order_points(&data.hf_points, &config.vecchia.ordering)?;
            let ordered: Vec<SpaceTimePoint> = dperm.iter().map(|&i| data.hf_points[i]).collect();
            (dperm, ordered)
        };

        let rule = config.vecchia.conditioning;
        let freeze = match rule.kind {
            ConditioningKind::NearestNeighbor => Some(KernelParams::new(1.0, 1.0, 1.0)?),
            ConditioningKind::Correlation if config.vecchia.freeze_neighbors => {
                freeze_at.map(|p| p.kernel_l)
            }
            _ => None,
        };
        let (frozen_l, frozen_d) = match (rule.kind, freeze_at, freeze) {
            (ConditioningKind::NearestNeighbor, _, Some(dummy)) => (
                Some(select_all_neighbors(&ordered_latent, &rule, &dummy)),
                (!ordered_hf.is_empty())
                    .then(|| select_all_neighbors(&ordered_hf, &rule, &dummy)),
            ),
            (ConditioningKind::Correlation, Some(p), _) if config.vecchia.freeze_neighbors => (
                Some(select_all_neighbors(&ordered_latent, &rule, &p.kernel_l)),
                (!ordered_hf.is_empty())
                    .then(|| select_all_neighbors(&ordered_hf, &rule, &p.kernel_d)),
            ),
            _ => (None, None),
        };

        Ok(Self {
            data,
            config: *config,
            ordered_latent,
            lperm,
            ordered_hf,
            dperm,
            frozen_l,
            frozen_d,
        })
    }

    /// Assemble the multi-fidelity system at the given parameters.
    pub fn build_system(&self, params: &MfHyperParams) -> Result<MfSystem> {
        let rho_vec = rho::evaluate(&params.rho, &self.data.layout.hf_locations())?;
        let rule = self.config.vecchia.conditioning;

        let mut factor_l = match &self.frozen_l {
            Some(nb) => factor_from_neighbors(&self.ordered_latent, nb, &params.kernel_l, None)?,
            None => build_factor(&self.ordered_latent, &rule, &params.kernel_l, None)?,
        };
        factor_l.permutation = self.lperm.clone();

        let factor_d = if self.ordered_hf.is_empty() {
            VecchiaFactor { permutation: Vec::new(), columns: Vec::new() }
        } else {
            let mut f = match &self.frozen_d {
                Some(nb) => factor_from_neighbors(&self.ordered_hf, nb, &params.kernel_d, None)?,
                None => build_factor(&self.ordered_hf, &rule, &params.kernel_d, None)?,
            };
            f.permutation = self.dperm.clone();
            f
        };

        assemble(&self.data.layout, factor_l, factor_d, &rho_vec, params.noise)
    }

    /// Negative log marginal likelihood at the given parameters, or +inf when
    /// a recoverable numerical failure rejects the step.
    pub fn nlml(&self, params: &MfHyperParams) -> Result<f64> {
        let sys = match self.build_system(params) {
            Ok(s) => s,
            Err(Error::NonPositiveConditionalVariance { .. })
            | Err(Error::CholeskyFailure { .. })
            | Err(Error::DenseCholeskyFailure) => return Ok(f64::INFINITY),
            Err(e) => return Err(e),
        };
        let y = self.data.values();
        let n = y.len() as f64;
        let logdet = sys.logdet_k();

        match self.config.gls.kind {
            GlsKind::None => {
                let kinv_y = sys.solve_k(&y);
                let quad: f64 = y.iter().zip(&kinv_y).map(|(a, b)| a * b).sum();
                Ok(0.5 * quad + 0.5 * logdet + 0.5 * n * LN_2PI)
            }
            _ => {
                let design = build_design(&self.data.layout, &self.config.gls)?;
                let fit = gls_fit(&sys, &y, &design)?;
                let kres = fit.k_inv_residual();
                let quad: f64 = fit.residual.iter().zip(&kres).map(|(a, b)| a * b).sum();
                if self.config.gls.reml {
                    let p = fit.p() as f64;
                    let reml = reml_correction(&fit)?;
                    Ok(0.5 * quad + 0.5 * logdet + reml + 0.5 * (n - p) * LN_2PI)
                } else {
                    Ok(0.5 * quad + 0.5 * logdet + 0.5 * n * LN_2PI)
                }
            }
        }
    }
}

/// Single-shot NLML evaluation (Algorithm 1, both GLS branches).
pub fn nlml(params: &MfHyperParams, data: &MfData, config: &InferenceConfig) -> Result<f64> {
    NlmlEngine::new(data, config, None)?.nlml(params)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub restarts: usize,
    pub max_evals: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self { restarts: 3, max_evals: 500, tol: 1e-6, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptTrace {
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

#[derive(Debug)]
pub struct FitResult {
    pub params: MfHyperParams,
    pub nlml: f64,
    pub gls: Option<GlsFit>,
    pub trace: OptTrace,
}

/// Fit hyperparameters by minimizing the NLML over log-transformed positive
/// parameters (identity transform for rho and polynomial coefficients) with a
/// seeded multi-restart simplex search. An `EmpiricalGp(None)` rho model is
/// fitted once from the data before optimization and held fixed.
pub fn fit(
    data: &MfData,
    config: &InferenceConfig,
    init: &MfHyperParams,
    opt: &OptimizerSettings,
) -> Result<FitResult> {
    let mut init = init.clone();
    if let RhoModel::EmpiricalGp(None) = init.rho {
        let slopes = rho::empirical_slopes(&data.matched_stations())?;
        init.rho = rho::fit_empirical_gp(&slopes, None)?;
    }

    let engine = NlmlEngine::new(data, config, Some(&init))?;
    // surface malformed-data errors before the search starts
    let f0 = engine.nlml(&init)?;

    let x0 = init.pack();
    let dim = x0.len();
    let step = vec![0.3; dim];
    let nm_opts = NelderMeadOpts { max_evals: opt.max_evals, tol: opt.tol };

    let starts: Vec<Vec<f64>> = (0..opt.restarts.max(1))
        .map(|r| {
            if r == 0 {
                x0.clone()
            } else {
                let mut rng = ChaCha12Rng::seed_from_u64(opt.seed);
                rng.set_stream(100 + r as u64);
                x0.iter()
                    .map(|&v| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        v + 0.3 * z
                    })
                    .collect()
            }
        })
        .collect();

    let results: Vec<_> = starts
        .par_iter()
        .map(|start| {
            nelder_mead(
                |x| match init.unpack(x) {
                    Ok(p) => engine.nlml(&p).unwrap_or(f64::INFINITY),
                    Err(_) => f64::INFINITY,
                },
                start,
                &step,
                &nm_opts,
            )
        })
        .collect();

    let best = results
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.fx.partial_cmp(&b.1.fx).unwrap().then(a.0.cmp(&b.0)))
        .map(|(_, r)| r)
        .expect("at least one restart");
    if !best.fx.is_finite() && !f0.is_finite() {
        return Err(Error::OptimizationFailed(
            "all restarts ended at a rejected (non-finite) NLML".into(),
        ));
    }
    // the descent guarantee is against the supplied init
    let (params, nlml_val) = if best.fx <= f0 {
        (init.unpack(&best.x)?, best.fx)
    } else {
        (init.clone(), f0)
    };

    let gls = match config.gls.kind {
        GlsKind::None => None,
        _ => {
            let sys = engine.build_system(&params)?;
            let design = build_design(&data.layout, &config.gls)?;
            Some(gls_fit(&sys, &data.values(), &design)?)
        }
    };

    Ok(FitResult {
        params,
        nlml: nlml_val,
        gls,
        trace: OptTrace {
            iterations: results.iter().map(|r| r.iterations).sum(),
            evaluations: results.iter().map(|r| r.evaluations).sum(),
            converged: results.iter().any(|r| r.converged && r.fx.is_finite()),
        },
    })
}

/// Posterior prediction with observation-level uncertainty.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub mean: Vec<f64>,
    /// Observation-level predictive variance (includes the HF nugget).
    pub variance: Vec<f64>,
    pub lower95: Vec<f64>,
    pub upper95: Vec<f64>,
}

impl Prediction {
    fn from_mean_var(mean: Vec<f64>, variance: Vec<f64>) -> Self {
        let lower95 = mean
            .iter()
            .zip(&variance)
            .map(|(m, v)| m - 1.96 * v.sqrt())
            .collect();
        let upper95 = mean
            .iter()
            .zip(&variance)
            .map(|(m, v)| m + 1.96 * v.sqrt())
            .collect();
        Self { mean, variance, lower95, upper95 }
    }
}

/// GP conditional under the joint multi-fidelity covariance at HF targets:
/// cross-covariances are dense against the training rows while the
/// training-side K^-1 action stays sparse through the Woodbury factorization.
pub fn predict(
    fitres: &FitResult,
    data: &MfData,
    config: &InferenceConfig,
    targets: &[SpaceTimePoint],
) -> Result<Prediction> {
    let params = &fitres.params;
    let engine = NlmlEngine::new(data, config, Some(params))?;
    let sys = engine.build_system(params)?;
    let y = data.values();

    let gls = match config.gls.kind {
        GlsKind::None => None,
        _ => {
            let design = build_design(&data.layout, &config.gls)?;
            Some(gls_fit(&sys, &y, &design)?)
        }
    };
    let kres = match &gls {
        Some(f) => f.k_inv_residual(),
        None => sys.solve_k(&y),
    };

    let target_locs: Vec<(f64, f64)> = targets.iter().map(|p| p.location()).collect();
    let rho_t = rho::evaluate(&params.rho, &target_locs)?;
    let rho_hf = sys.rho_at_hf().to_vec();
    let jl = params.kernel_l.default_jitter();
    let jd = params.kernel_d.default_jitter();
    let n_lf = data.lf_points.len();

    let results: Vec<(f64, f64)> = targets
        .par_iter()
        .enumerate()
        .map(|(j, x_star)| {
            let mut cross = vec![0f64; sys.n()];
            for (i, p) in data.lf_points.iter().enumerate() {
                cross[i] = rho_t[j] * latent_cov(x_star, p, &params.kernel_l, jl);
            }
            for (h, p) in data.hf_points.iter().enumerate() {
                cross[n_lf + h] = rho_t[j] * rho_hf[h] * latent_cov(x_star, p, &params.kernel_l, jl)
                    + latent_cov(x_star, p, &params.kernel_d, jd);
            }
            let mean0: f64 = cross.iter().zip(&kres).map(|(a, b)| a * b).sum();
            let kc = sys.solve_k(&cross);
            let explained: f64 = cross.iter().zip(&kc).map(|(a, b)| a * b).sum();
            let prior = rho_t[j] * rho_t[j] * (params.kernel_l.signal_amplitude + jl)
                + params.kernel_d.signal_amplitude
                + jd
                + params.noise.g_d_sq;
            let var = (prior - explained).max(1e-12 * prior);
            let mean = mean0
                + gls.as_ref().map_or(0.0, |f| f.hf_mean_at(x_star.location()));
            (mean, var)
        })
        .collect();

    let (mean, variance): (Vec<f64>, Vec<f64>) = results.into_iter().unzip();
    Ok(Prediction::from_mean_var(mean, variance))
}

/// Single-fidelity GP baselines over different input spaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    /// 1-D regression in LF-value space: y_H ~ GP(y_L).
    GpL,
    /// Spatio-temporal coordinates only: y_H ~ GP(s1, s2, t).
    Gp3d,
    /// LF value plus coordinates: y_H ~ GP(y_L, s1, s2, t).
    Gp4d,
}

impl BaselineKind {
    pub fn input_dim(&self) -> usize {
        match self {
            BaselineKind::GpL => 1,
            BaselineKind::Gp3d => 3,
            BaselineKind::Gp4d => 4,
        }
    }
}

pub(crate) fn baseline_features(
    kind: BaselineKind,
    point: &SpaceTimePoint,
    lf_value: Option<f64>,
) -> Result<Vec<f64>> {
    let need_lf = matches!(kind, BaselineKind::GpL | BaselineKind::Gp4d);
    let yl = if need_lf {
        Some(lf_value.ok_or_else(|| {
            Error::InvalidParameter(format!(
                "no LF value available at ({}, {}, {}); GP-L/GP-4D need a matched design",
                point.s1, point.s2, point.t
            ))
        })?)
    } else {
        None
    };
    Ok(match kind {
        BaselineKind::GpL => vec![yl.unwrap()],
        BaselineKind::Gp3d => vec![point.s1, point.s2, point.t],
        BaselineKind::Gp4d => vec![yl.unwrap(), point.s1, point.s2, point.t],
    })
}

fn iso_rbf(a: &[f64], b: &[f64], amplitude: f64, ls: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    amplitude * (-0.5 * d2 / (ls * ls)).exp()
}

/// Dense single-GP regression with an isotropic squared-exponential kernel
/// over the baseline's input space (one shared length scale across the raw
/// input axes), amplitude/length-scale/nugget fitted by maximum likelihood.
/// Desk scale only: errors above `dense_cap` training rows.
pub fn baseline_fit_predict(
    kind: BaselineKind,
    data: &MfData,
    targets: &[SpaceTimePoint],
    dense_cap: usize,
    opt: &OptimizerSettings,
) -> Result<Prediction> {
    let n = data.hf_points.len();
    if n == 0 {
        return Err(Error::EmptyFidelity("HF".into()));
    }
    if n > dense_cap {
        return Err(Error::DenseSizeExceeded { n, cap: dense_cap });
    }
    let lf_map = data.lf_value_map();
    let feats: Vec<Vec<f64>> = data
        .hf_points
        .iter()
        .map(|p| baseline_features(kind, p, lf_map.get(&p.key()).copied()))
        .collect::<Result<_>>()?;
    let t_feats: Vec<Vec<f64>> = targets
        .iter()
        .map(|p| baseline_features(kind, p, lf_map.get(&p.key()).copied()))
        .collect::<Result<_>>()?;

    let y_mean = data.y_h.iter().sum::<f64>() / n as f64;
    let yc = DVector::from_iterator(n, data.y_h.iter().map(|v| v - y_mean));
    let y_var = (yc.dot(&yc) / (n as f64 - 1.0).max(1.0)).max(1e-12);

    // scale-aware init: spread of the feature cloud
    let dim = kind.input_dim();
    let mut spread = 0f64;
    for d in 0..dim {
        let lo = feats.iter().map(|f| f[d]).fold(f64::MAX, f64::min);
        let hi = feats.iter().map(|f| f[d]).fold(f64::MIN, f64::max);
        spread = spread.max(hi - lo);
    }
    let ls0 = (spread / 3.0).max(1e-3);

    let gram = |amplitude: f64, ls: f64, nugget: f64| -> DMatrix<f64> {
        let mut k = DMatrix::from_fn(n, n, |i, j| iso_rbf(&feats[i], &feats[j], amplitude, ls));
        let ridge = nugget + crate::JITTER_SCALE * amplitude;
        for i in 0..n {
            k[(i, i)] += ridge;
        }
        k
    };
    let objective = |x: &[f64]| -> f64 {
        let (a, l, g) = (x[0].exp(), x[1].exp(), x[2].exp());
        if !(a.is_finite() && l.is_finite() && g.is_finite()) || a <= 0.0 || l <= 0.0 {
            return f64::INFINITY;
        }
        match Cholesky::new(gram(a, l, g)) {
            Some(chol) => {
                let alpha = chol.solve(&yc);
                let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                0.5 * yc.dot(&alpha) + 0.5 * logdet + 0.5 * n as f64 * LN_2PI
            }
            None => f64::INFINITY,
        }
    };

    let x0 = vec![y_var.ln(), ls0.ln(), (0.1 * y_var).ln()];
    let nm_opts = NelderMeadOpts { max_evals: opt.max_evals.min(300), tol: opt.tol };
    let starts: Vec<Vec<f64>> = (0..opt.restarts.max(1))
        .map(|r| {
            if r == 0 {
                x0.clone()
            } else {
                let mut rng = ChaCha12Rng::seed_from_u64(opt.seed);
                rng.set_stream(200 + r as u64);
                x0.iter()
                    .map(|&v| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        v + 0.5 * z
                    })
                    .collect()
            }
        })
        .collect();
    let best = starts
        .par_iter()
        .map(|s| nelder_mead(objective, s, &[0.4, 0.4, 0.4], &nm_opts))
        .min_by(|a, b| a.fx.partial_cmp(&b.fx).unwrap())
        .expect("at least one restart");
    if !best.fx.is_finite() {
        return Err(Error::OptimizationFailed("baseline GP fit never produced a finite NLML".into()));
    }
    let (a, l, g) = (best.x[0].exp(), best.x[1].exp(), best.x[2].exp());

    let chol = Cholesky::new(gram(a, l, g)).ok_or(Error::DenseCholeskyFailure)?;
    let alpha = chol.solve(&yc);
    let mut mean = Vec::with_capacity(targets.len());
    let mut var = Vec::with_capacity(targets.len());
    for tf in &t_feats {
        let kstar = DVector::from_fn(n, |i, _| iso_rbf(&feats[i], tf, a, l));
        let m = kstar.dot(&alpha) + y_mean;
        let v = chol.solve(&kstar);
        let pv = (a + g + crate::JITTER_SCALE * a - kstar.dot(&v)).max(1e-12 * (a + g));
        mean.push(m);
        var.push(pv);
    }
    Ok(Prediction::from_mean_var(mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::gram;
    use crate::simulate::{generate, SimConfig};
    use crate::vecchia::OrderingKind;
    use approx::assert_relative_eq;

    fn pt(s1: f64, s2: f64, t: f64) -> SpaceTimePoint {
        SpaceTimePoint::new(s1, s2, t).unwrap()
    }

    fn exact_config(n_latent: usize, gls: GlsMode) -> InferenceConfig {
        InferenceConfig {
            vecchia: VecchiaConfig {
                ordering: OrderingStrategy::new(OrderingKind::SpaceMajor, 0),
                conditioning: ConditioningRule::new(
                    ConditioningKind::NearestNeighbor,
                    (n_latent - 1).max(1),
                )
                .unwrap(),
                freeze_neighbors: false,
            },
            gls,
        }
    }

    fn small_params() -> MfHyperParams {
        MfHyperParams {
            kernel_l: KernelParams::new(1.0, 1.4, 0.5).unwrap(),
            kernel_d: KernelParams::new(1.5, 1.0, 0.6).unwrap(),
            noise: NoiseModel::new(0.1, 0.12).unwrap(),
            rho: RhoModel::Constant(0.6),
        }
    }

    fn small_data() -> MfData {
        let ds = generate(&SimConfig {
            n_space: 3,
            n_time: 4,
            n_train_stations: Some(4),
            seed: 42,
            ..SimConfig::default()
        })
        .unwrap();
        MfData::from_sim(&ds).unwrap()
    }

    #[test]
    fn lf_only_reduces_to_single_gp_nlml() {
        let ds = generate(&SimConfig {
            n_space: 3,
            n_time: 4,
            seed: 3,
            ..SimConfig::default()
        })
        .unwrap();
        let data = MfData::new(ds.lf_points.clone(), ds.y_l.clone(), vec![], vec![]).unwrap();
        let params = small_params();
        let cfg = exact_config(data.layout.latent_points.len(), GlsMode::none());
        let got = nlml(&params, &data, &cfg).unwrap();

        // independent dense single-GP likelihood of the LF block
        let mut k = gram(&data.lf_points, &params.kernel_l, params.kernel_l.default_jitter());
        for i in 0..k.nrows() {
            k[(i, i)] += params.noise.g_l_sq;
        }
        let chol = k.cholesky().unwrap();
        let y = DVector::from_column_slice(&data.y_l);
        let alpha = chol.solve(&y);
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let want = 0.5 * y.dot(&alpha) + 0.5 * logdet + 0.5 * y.len() as f64 * LN_2PI;
        assert_relative_eq!(got, want, max_relative = 1e-8);
    }

    #[test]
    fn unpack_round_trips_and_rejects_bad_lengths() {
        let p = small_params();
        let x = p.pack();
        assert_eq!(x.len(), 9);
        let q = p.unpack(&x).unwrap();
        assert_relative_eq!(q.kernel_l.signal_amplitude, p.kernel_l.signal_amplitude);
        assert_relative_eq!(q.noise.g_d_sq, p.noise.g_d_sq);
        match q.rho {
            RhoModel::Constant(r) => assert_relative_eq!(r, 0.6),
            _ => panic!("rho kind changed"),
        }
        assert!(p.unpack(&x[..5]).is_err());
        // extreme transformed values exponentiate to non-finite parameters
        let mut bad = x.clone();
        bad[2] = 1e10;
        assert!(p.unpack(&bad).is_err());
    }

    #[test]
    fn fit_never_worsens_a_truth_init() {
        let data = small_data();
        let cfg = exact_config(data.layout.latent_points.len(), GlsMode::none());
        let init = small_params();
        let f0 = nlml(&init, &data, &cfg).unwrap();
        let fit_res = fit(
            &data,
            &cfg,
            &init,
            &OptimizerSettings { restarts: 1, max_evals: 80, tol: 1e-6, seed: 0 },
        )
        .unwrap();
        assert!(fit_res.nlml <= f0 + 1e-12, "{} > {}", fit_res.nlml, f0);
    }

    #[test]
    fn restart_seeds_agree_on_small_problem() {
        let data = small_data();
        let cfg = exact_config(data.layout.latent_points.len(), GlsMode::none());
        let init = small_params();
        let opt = |seed| OptimizerSettings { restarts: 2, max_evals: 150, tol: 1e-6, seed };
        let a = fit(&data, &cfg, &init, &opt(1)).unwrap().nlml;
        let b = fit(&data, &cfg, &init, &opt(2)).unwrap().nlml;
        assert!((a - b).abs() <= 0.01 * a.abs().max(b.abs()), "{a} vs {b}");
    }

    #[test]
    fn prediction_interpolates_training_point_as_nuggets_vanish() {
        let data = small_data();
        let cfg = exact_config(data.layout.latent_points.len(), GlsMode::none());
        let mut params = small_params();
        params.noise = NoiseModel::new(1e-8, 1e-8).unwrap();
        let fitres = FitResult {
            params: params.clone(),
            nlml: 0.0,
            gls: None,
            trace: OptTrace { iterations: 0, evaluations: 0, converged: true },
        };
        let target = data.hf_points[3];
        let pred = predict(&fitres, &data, &cfg, &[target]).unwrap();
        assert!(
            (pred.mean[0] - data.y_h[3]).abs() < 1e-4,
            "interpolation limit: predicted {} vs observed {}",
            pred.mean[0],
            data.y_h[3]
        );
        assert!(pred.variance[0] > 0.0);
    }

    #[test]
    fn rho_zero_prediction_equals_single_gp_on_hf() {
        let data = small_data();
        let cfg = exact_config(data.layout.latent_points.len(), GlsMode::none());
        let mut params = small_params();
        params.rho = RhoModel::Constant(0.0);
        let fitres = FitResult {
            params: params.clone(),
            nlml: 0.0,
            gls: None,
            trace: OptTrace { iterations: 0, evaluations: 0, converged: true },
        };
        let targets = [pt(0.5, 0.5, 0.37), pt(1.7, 0.1, 0.9)];
        let pred = predict(&fitres, &data, &cfg, &targets).unwrap();

        // dense single-GP conditional on the HF block only
        let mut k = gram(&data.hf_points, &params.kernel_d, params.kernel_d.default_jitter());
        for i in 0..k.nrows() {
            k[(i, i)] += params.noise.g_d_sq;
        }
        let chol = k.cholesky().unwrap();
        let y = DVector::from_column_slice(&data.y_h);
        let alpha = chol.solve(&y);
        for (j, target) in targets.iter().enumerate() {
            let kstar = DVector::from_fn(data.hf_points.len(), |i, _| {
                crate::kernels::eval_separable(&data.hf_points[i], target, &params.kernel_d)
            });
            let want_mean = kstar.dot(&alpha);
            let want_var = params.kernel_d.signal_amplitude
                + params.kernel_d.default_jitter()
                + params.noise.g_d_sq
                - kstar.dot(&chol.solve(&kstar));
            assert_relative_eq!(pred.mean[j], want_mean, max_relative = 1e-8, epsilon = 1e-10);
            assert_relative_eq!(pred.variance[j], want_var, max_relative = 1e-8);
        }
    }

    #[test]
    fn variance_shrinks_approaching_a_training_point() {
        let data = small_data();
        let cfg = exact_config(data.layout.latent_points.len(), GlsMode::none());
        let params = small_params();
        let fitres = FitResult {
            params,
            nlml: 0.0,
            gls: None,
            trace: OptTrace { iterations: 0, evaluations: 0, converged: true },
        };
        // stay within one grid cell so no other station interferes
        let anchor = data.hf_points[0];
        let offsets = [0.45, 0.35, 0.25, 0.15, 0.05];
        let targets: Vec<SpaceTimePoint> =
            offsets.iter().map(|o| pt(anchor.s1 + o, anchor.s2, anchor.t)).collect();
        let pred = predict(&fitres, &data, &cfg, &targets).unwrap();
        for w in pred.variance.windows(2) {
            assert!(w[1] < w[0], "variance must shrink toward the training point: {:?}", pred.variance);
        }
        assert!(pred.variance.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn baseline_feature_shapes() {
        assert_eq!(BaselineKind::GpL.input_dim(), 1);
        assert_eq!(BaselineKind::Gp3d.input_dim(), 3);
        assert_eq!(BaselineKind::Gp4d.input_dim(), 4);
        let p = pt(1.0, 2.0, 0.5);
        let f = baseline_features(BaselineKind::Gp4d, &p, Some(7.0)).unwrap();
        assert_eq!(f, vec![7.0, 1.0, 2.0, 0.5]);
        assert!(baseline_features(BaselineKind::Gp4d, &p, None).is_err());
        assert_eq!(baseline_features(BaselineKind::Gp3d, &p, None).unwrap(), vec![1.0, 2.0, 0.5]);
    }

    #[test]
    fn gp_l_interpolates_identity_mapping() {
        // y_H == y_L: the value-space GP should reproduce held-out values as
        // the nugget vanishes
        let ds = generate(&SimConfig {
            n_space: 3,
            n_time: 5,
            seed: 9,
            ..SimConfig::default()
        })
        .unwrap();
        let hf_points: Vec<SpaceTimePoint> = ds.lf_points.iter().take(30).copied().collect();
        let y_h: Vec<f64> = ds.y_l.iter().take(30).copied().collect();
        let data =
            MfData::new(ds.lf_points.clone(), ds.y_l.clone(), hf_points.clone(), y_h.clone())
                .unwrap();
        let targets: Vec<SpaceTimePoint> = ds.lf_points.iter().skip(30).take(10).copied().collect();
        let pred = baseline_fit_predict(
            BaselineKind::GpL,
            &data,
            &targets,
            5000,
            &OptimizerSettings { restarts: 2, max_evals: 250, tol: 1e-8, seed: 0 },
        )
        .unwrap();
        let mae: f64 = pred
            .mean
            .iter()
            .zip(ds.y_l.iter().skip(30).take(10))
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 10.0;
        assert!(mae < 0.05, "identity mapping should be learned nearly exactly, MAE {mae}");
    }

    #[test]
    fn dense_cap_is_enforced() {
        let data = small_data();
        let r = baseline_fit_predict(
            BaselineKind::Gp3d,
            &data,
            &[pt(0.0, 0.0, 0.0)],
            3,
            &OptimizerSettings::default(),
        );
        assert!(matches!(r, Err(Error::DenseSizeExceeded { .. })));
    }
}
