//! Vecchia approximation machinery for a single Gaussian process: observation
//! orderings, conditioning-set selection, and construction of the sparse
//! inverse-Cholesky factor U with per-point conditional variances, so that
//! `Sigma^-1 ~= U U'`.
//!
//! The factor is built over the *noise-free* latent kernel; nuggets live in
//! the diagonal matrix D_eps of the multi-fidelity system, not here.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{latent_cov, KernelParams, SpaceTimePoint};

/// How observations are permuted before conditioning sets are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderingKind {
    /// Grouped by location (lexicographic in (s1, s2)), time increasing within
    /// each location. The "native" ordering of station data.
    SpaceMajor,
    /// Grouped by time step, locations in lexicographic order within each step.
    TimeMajor,
    /// Time-major with the locations shuffled independently per time step.
    TimeMajorRandSpace,
    /// A uniformly random permutation.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderingStrategy {
    pub kind: OrderingKind,
    /// Used by `Random` and `TimeMajorRandSpace`.
    pub seed: u64,
}

impl OrderingStrategy {
    pub fn new(kind: OrderingKind, seed: u64) -> Self {
        Self { kind, seed }
    }
}

/// How the conditioning set of each point is chosen among its predecessors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditioningKind {
    /// Euclidean distance in (s1, s2, t) after standardizing each axis to unit
    /// sample standard deviation, so space and time are commensurable.
    NearestNeighbor,
    /// Kernel value under the designated `KernelParams`. For a separable
    /// squared-exponential kernel with a shared amplitude this ranking equals
    /// nearest-neighbor in coordinates scaled by the length scales, which is
    /// how it is computed.
    Correlation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditioningRule {
    pub kind: ConditioningKind,
    /// Maximum conditioning-set size, m >= 1.
    pub m: usize,
}

impl ConditioningRule {
    pub fn new(kind: ConditioningKind, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidParameter("conditioning size m must be >= 1".into()));
        }
        Ok(Self { kind, m })
    }
}

/// One column of the factor: the conditioning set C(i) (ascending), the
/// regression coefficients b_i, and the conditional variance d_i.
#[derive(Debug, Clone)]
pub struct FactorColumn {
    pub neighbors: Vec<usize>,
    pub coeffs: Vec<f64>,
    pub d: f64,
}

/// Sparse inverse-Cholesky factor: U is upper triangular with
/// `U[i,i] = 1/sqrt(d_i)` and `U[C(i), i] = -b_i/sqrt(d_i)`, so that the
/// implied approximation satisfies `Sigma^-1 = U U'`.
#[derive(Debug, Clone)]
pub struct VecchiaFactor {
    /// Ordering applied to the original point list: position -> original index.
    pub permutation: Vec<usize>,
    pub columns: Vec<FactorColumn>,
}

/// Permutation realizing the ordering strategy; deterministic given the seed.
/// Rejects duplicate space-time points (grouping would be ambiguous).
pub fn order_points(points: &[SpaceTimePoint], strategy: &OrderingStrategy) -> Result<Vec<usize>> {
    assert!(!points.is_empty(), "ordering an empty point list");
    let mut seen = HashSet::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        if !seen.insert(p.key()) {
            return Err(Error::DuplicatePoint(i));
        }
    }
    let mut idx: Vec<usize> = (0..points.len()).collect();
    let loc_key = |i: usize| (points[i].location_key(), crate::kernels::bits(points[i].t));
    match strategy.kind {
        OrderingKind::SpaceMajor => {
            idx.sort_by_key(|&i| loc_key(i));
        }
        OrderingKind::TimeMajor => {
            idx.sort_by_key(|&i| (crate::kernels::bits(points[i].t), points[i].location_key()));
        }
        OrderingKind::TimeMajorRandSpace => {
            idx.sort_by_key(|&i| (crate::kernels::bits(points[i].t), points[i].location_key()));
            // shuffle each time-group independently with its own stream
            let mut out = Vec::with_capacity(idx.len());
            let mut start = 0usize;
            let mut group = 0u64;
            while start < idx.len() {
                let t0 = points[idx[start]].t;
                let mut end = start;
                while end < idx.len() && points[idx[end]].t == t0 {
                    end += 1;
                }
                let mut rng = ChaCha12Rng::seed_from_u64(strategy.seed);
                rng.set_stream(group);
                let mut g = idx[start..end].to_vec();
                g.shuffle(&mut rng);
                out.extend(g);
                start = end;
                group += 1;
            }
            idx = out;
        }
        OrderingKind::Random => {
            let mut rng = ChaCha12Rng::seed_from_u64(strategy.seed);
            idx.shuffle(&mut rng);
        }
    }
    Ok(idx)
}

/// Per-axis inverse scales that turn neighbor ranking into a squared-distance
/// minimization for both conditioning kinds.
#[derive(Debug, Clone, Copy)]
struct AxisScales {
    w1: f64,
    w2: f64,
    wt: f64,
}

fn axis_scales(points: &[SpaceTimePoint], rule: &ConditioningRule, kp: &KernelParams) -> AxisScales {
    match rule.kind {
        ConditioningKind::Correlation => AxisScales {
            w1: 1.0 / kp.length_scale_space,
            w2: 1.0 / kp.length_scale_space,
            wt: 1.0 / kp.length_scale_time,
        },
        ConditioningKind::NearestNeighbor => {
            let n = points.len() as f64;
            let std_of = |f: &dyn Fn(&SpaceTimePoint) -> f64| {
                let mean = points.iter().map(|p| f(p)).sum::<f64>() / n;
                let var = points.iter().map(|p| (f(p) - mean).powi(2)).sum::<f64>()
                    / (n - 1.0).max(1.0);
                let sd = var.sqrt();
                if sd > 1e-300 {
                    1.0 / sd
                } else {
                    1.0
                }
            };
            AxisScales {
                w1: std_of(&|p: &SpaceTimePoint| p.s1),
                w2: std_of(&|p: &SpaceTimePoint| p.s2),
                wt: std_of(&|p: &SpaceTimePoint| p.t),
            }
        }
    }
}

fn scaled_sq_dist(a: &SpaceTimePoint, b: &SpaceTimePoint, sc: &AxisScales) -> f64 {
    let d1 = (a.s1 - b.s1) * sc.w1;
    let d2 = (a.s2 - b.s2) * sc.w2;
    let dt = (a.t - b.t) * sc.wt;
    d1 * d1 + d2 * d2 + dt * dt
}

fn select_with_scales(
    i: usize,
    points: &[SpaceTimePoint],
    m: usize,
    sc: &AxisScales,
) -> Vec<usize> {
    if i == 0 {
        return Vec::new();
    }
    if i <= m {
        return (0..i).collect();
    }
    let mut cand: Vec<(f64, usize)> = (0..i)
        .map(|j| (scaled_sq_dist(&points[i], &points[j], sc), j))
        .collect();
    // ties broken by lower index
    cand.select_nth_unstable_by(m - 1, |a, b| a.partial_cmp(b).unwrap());
    cand.truncate(m);
    let mut out: Vec<usize> = cand.into_iter().map(|(_, j)| j).collect();
    out.sort_unstable();
    out
}

/// Conditioning set for the i-th ordered point: a subset of {0..i-1} of size
/// min(m, i), ranked per the rule with ties broken by lower index.
pub fn select_neighbors(
    i: usize,
    ordered_points: &[SpaceTimePoint],
    rule: &ConditioningRule,
    kp: &KernelParams,
) -> Vec<usize> {
    let sc = axis_scales(ordered_points, rule, kp);
    select_with_scales(i, ordered_points, rule.m, &sc)
}

/// Conditioning sets for every point at once (shared axis standardization).
pub fn select_all_neighbors(
    ordered_points: &[SpaceTimePoint],
    rule: &ConditioningRule,
    kp: &KernelParams,
) -> Vec<Vec<usize>> {
    let sc = axis_scales(ordered_points, rule, kp);
    (0..ordered_points.len())
        .into_par_iter()
        .map(|i| select_with_scales(i, ordered_points, rule.m, &sc))
        .collect()
}

/// Build the factor from explicit conditioning sets. `nugget` adds an
/// observation-noise variance to every diagonal; the multi-fidelity pipeline
/// passes `None` (noise is handled by D_eps), single-GP uses may pass `Some`.
pub fn factor_from_neighbors(
    ordered_points: &[SpaceTimePoint],
    neighbors: &[Vec<usize>],
    kp: &KernelParams,
    nugget: Option<f64>,
) -> Result<VecchiaFactor> {
    let n = ordered_points.len();
    assert_eq!(neighbors.len(), n);
    let jitter = kp.default_jitter();
    let diag_extra = nugget.unwrap_or(0.0);
    let floor = 1e-12 * kp.signal_amplitude;

    let columns: Vec<Result<FactorColumn>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let c = &neighbors[i];
            let k_ii = kp.signal_amplitude + jitter + diag_extra;
            if c.is_empty() {
                return Ok(FactorColumn { neighbors: Vec::new(), coeffs: Vec::new(), d: k_ii });
            }
            let nc = c.len();
            let mut k_cc = DMatrix::zeros(nc, nc);
            for a in 0..nc {
                k_cc[(a, a)] = kp.signal_amplitude + jitter + diag_extra;
                for b in (a + 1)..nc {
                    let v = latent_cov(&ordered_points[c[a]], &ordered_points[c[b]], kp, jitter);
                    k_cc[(a, b)] = v;
                    k_cc[(b, a)] = v;
                }
            }
            let k_ci = DVector::from_fn(nc, |a, _| {
                latent_cov(&ordered_points[c[a]], &ordered_points[i], kp, jitter)
            });
            let chol = k_cc
                .cholesky()
                .ok_or(Error::NonPositiveConditionalVariance { index: i, value: 0.0 })?;
            let b = chol.solve(&k_ci);
            let d = k_ii - k_ci.dot(&b);
            if !(d > floor) {
                return Err(Error::NonPositiveConditionalVariance { index: i, value: d });
            }
            Ok(FactorColumn { neighbors: c.clone(), coeffs: b.as_slice().to_vec(), d })
        })
        .collect();

    let mut cols = Vec::with_capacity(n);
    for c in columns {
        cols.push(c?);
    }
    Ok(VecchiaFactor { permutation: (0..n).collect(), columns: cols })
}

/// Build the factor for points that are already in conditioning order.
pub fn build_factor(
    ordered_points: &[SpaceTimePoint],
    rule: &ConditioningRule,
    kp: &KernelParams,
    nugget: Option<f64>,
) -> Result<VecchiaFactor> {
    let neighbors = select_all_neighbors(ordered_points, rule, kp);
    factor_from_neighbors(ordered_points, &neighbors, kp, nugget)
}

/// Order the points with the strategy, then build; the applied permutation is
/// recorded on the factor.
pub fn ordered_factor(
    points: &[SpaceTimePoint],
    strategy: &OrderingStrategy,
    rule: &ConditioningRule,
    kp: &KernelParams,
    nugget: Option<f64>,
) -> Result<VecchiaFactor> {
    let perm = order_points(points, strategy)?;
    let ordered: Vec<SpaceTimePoint> = perm.iter().map(|&i| points[i]).collect();
    let mut factor = build_factor(&ordered, rule, kp, nugget)?;
    factor.permutation = perm;
    Ok(factor)
}

impl VecchiaFactor {
    pub fn n(&self) -> usize {
        self.columns.len()
    }

    /// log|Sigma_hat| = sum_i log d_i.
    pub fn logdet(&self) -> f64 {
        self.columns.iter().map(|c| c.d.ln()).sum()
    }

    /// Number of stored off-diagonal coefficients, sum_i |C(i)|.
    pub fn nnz_coeffs(&self) -> usize {
        self.columns.iter().map(|c| c.neighbors.len()).sum()
    }

    /// w = U'v (upper triangular, so w_i depends on v_i and v_{C(i)}).
    pub fn apply_ut(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.n());
        self.columns
            .iter()
            .enumerate()
            .map(|(i, col)| {
                let mut acc = v[i];
                for (b, &j) in col.coeffs.iter().zip(&col.neighbors) {
                    acc -= b * v[j];
                }
                acc / col.d.sqrt()
            })
            .collect()
    }

    /// u = U w (scatter over columns).
    pub fn apply_u(&self, w: &[f64]) -> Vec<f64> {
        debug_assert_eq!(w.len(), self.n());
        let mut out = vec![0f64; self.n()];
        for (i, col) in self.columns.iter().enumerate() {
            let wi = w[i] / col.d.sqrt();
            out[i] += wi;
            for (b, &j) in col.coeffs.iter().zip(&col.neighbors) {
                out[j] -= b * wi;
            }
        }
        out
    }

    /// Sigma^-1 v = U (U' v), computed with sparse triangular products only.
    pub fn apply_precision(&self, v: &[f64]) -> Vec<f64> {
        self.apply_u(&self.apply_ut(v))
    }

    /// Triplets of U U' shifted by `offset` on both indices, for assembling
    /// the block-diagonal Sigma_w^-1 inside H.
    pub(crate) fn precision_triplets(&self, offset: usize, out: &mut Vec<(usize, usize, f64)>) {
        let mut entries: Vec<(usize, f64)> = Vec::new();
        for (i, col) in self.columns.iter().enumerate() {
            let inv_sqrt_d = 1.0 / col.d.sqrt();
            entries.clear();
            entries.push((i, inv_sqrt_d));
            for (b, &j) in col.coeffs.iter().zip(&col.neighbors) {
                entries.push((j, -b * inv_sqrt_d));
            }
            for &(r1, v1) in &entries {
                for &(r2, v2) in &entries {
                    out.push((offset + r1, offset + r2, v1 * v2));
                }
            }
        }
    }

    /// Dense U for small-scale verification.
    pub fn dense_u(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut u = DMatrix::zeros(n, n);
        for (i, col) in self.columns.iter().enumerate() {
            let inv_sqrt_d = 1.0 / col.d.sqrt();
            u[(i, i)] = inv_sqrt_d;
            for (b, &j) in col.coeffs.iter().zip(&col.neighbors) {
                u[(j, i)] = -b * inv_sqrt_d;
            }
        }
        u
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::gram;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn pt(s1: f64, s2: f64, t: f64) -> SpaceTimePoint {
        SpaceTimePoint::new(s1, s2, t).unwrap()
    }

    fn random_points(n: usize, seed: u64) -> Vec<SpaceTimePoint> {
        let mut rng = StdRng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                pt(
                    rng.gen_range(0.0..5.0),
                    rng.gen_range(0.0..5.0),
                    rng.gen_range(0.0..1.0),
                )
            })
            .collect()
    }

    fn kp() -> KernelParams {
        KernelParams::new(1.0, 1.2, 0.4).unwrap()
    }

    #[test]
    fn space_and_time_major_on_two_by_two() {
        // two locations x two times; input scrambled
        let l1t1 = pt(0.0, 0.0, 0.0);
        let l1t2 = pt(0.0, 0.0, 1.0);
        let l2t1 = pt(1.0, 0.0, 0.0);
        let l2t2 = pt(1.0, 0.0, 1.0);
        let pts = [l2t2, l1t1, l2t1, l1t2];
        let sm = order_points(&pts, &OrderingStrategy::new(OrderingKind::SpaceMajor, 0)).unwrap();
        let got: Vec<_> = sm.iter().map(|&i| pts[i]).collect();
        assert_eq!(got, vec![l1t1, l1t2, l2t1, l2t2]);
        let tm = order_points(&pts, &OrderingStrategy::new(OrderingKind::TimeMajor, 0)).unwrap();
        let got: Vec<_> = tm.iter().map(|&i| pts[i]).collect();
        assert_eq!(got, vec![l1t1, l2t1, l1t2, l2t2]);
    }

    #[test]
    fn random_ordering_is_seed_deterministic() {
        let pts = random_points(37, 3);
        let s = OrderingStrategy::new(OrderingKind::Random, 99);
        assert_eq!(order_points(&pts, &s).unwrap(), order_points(&pts, &s).unwrap());
        let s2 = OrderingStrategy::new(OrderingKind::Random, 100);
        assert_ne!(order_points(&pts, &s).unwrap(), order_points(&pts, &s2).unwrap());
    }

    #[test]
    fn rand_space_shuffles_within_time_steps_only() {
        let mut pts = Vec::new();
        for t in 0..3 {
            for l in 0..5 {
                pts.push(pt(l as f64, 0.0, t as f64));
            }
        }
        let s = OrderingStrategy::new(OrderingKind::TimeMajorRandSpace, 11);
        let perm = order_points(&pts, &s).unwrap();
        let times: Vec<f64> = perm.iter().map(|&i| pts[i].t).collect();
        let mut sorted = times.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(times, sorted, "time blocks must stay contiguous and ascending");
        assert_eq!(order_points(&pts, &s).unwrap(), perm);
    }

    #[test]
    fn duplicate_points_rejected() {
        let p = pt(0.5, 0.5, 0.5);
        let r = order_points(&[p, pt(1.0, 0.0, 0.0), p], &OrderingStrategy::new(OrderingKind::Random, 0));
        assert!(matches!(r, Err(Error::DuplicatePoint(2))));
    }

    #[test]
    fn first_point_has_empty_conditioning_set() {
        let pts = random_points(10, 5);
        let rule = ConditioningRule::new(ConditioningKind::NearestNeighbor, 4).unwrap();
        assert!(select_neighbors(0, &pts, &rule, &kp()).is_empty());
    }

    #[test]
    fn all_predecessors_taken_when_m_large() {
        let pts = random_points(10, 6);
        let rule = ConditioningRule::new(ConditioningKind::Correlation, 10).unwrap();
        assert_eq!(select_neighbors(4, &pts, &rule, &kp()), vec![0, 1, 2, 3]);
    }

    #[test]
    fn nearest_neighbor_on_equispaced_chain() {
        // 1-D chain: the two nearest predecessors of the 6th point are 5 and 4.
        let pts: Vec<_> = (0..8).map(|i| pt(i as f64, 0.0, 0.0)).collect();
        let rule = ConditioningRule::new(ConditioningKind::NearestNeighbor, 2).unwrap();
        assert_eq!(select_neighbors(5, &pts, &rule, &kp()), vec![3, 4]);
    }

    #[test]
    fn correlation_ranking_matches_kernel_values() {
        let pts = random_points(60, 8);
        let k = kp();
        let rule = ConditioningRule::new(ConditioningKind::Correlation, 7).unwrap();
        let i = 41;
        let got = select_neighbors(i, &pts, &rule, &k);
        // brute force by kernel value, ties by lower index
        let mut by_corr: Vec<(f64, usize)> = (0..i)
            .map(|j| (crate::kernels::eval_separable(&pts[i], &pts[j], &k), j))
            .collect();
        by_corr.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut want: Vec<usize> = by_corr[..7].iter().map(|&(_, j)| j).collect();
        want.sort_unstable();
        assert_eq!(got, want);
    }

    #[test]
    fn exact_factor_reconstructs_dense_gram() {
        let pts = random_points(60, 13);
        let k = kp();
        let rule = ConditioningRule::new(ConditioningKind::NearestNeighbor, 59).unwrap();
        let f = build_factor(&pts, &rule, &k, None).unwrap();
        let u = f.dense_u();
        let prec = &u * u.transpose();
        let sigma = prec.try_inverse().unwrap();
        let dense = gram(&pts, &k, k.default_jitter());
        let err = (&sigma - &dense).abs().max();
        assert!(err < 1e-8, "reconstruction error {err}");
    }

    #[test]
    fn single_point_factor() {
        let k = kp();
        let rule = ConditioningRule::new(ConditioningKind::NearestNeighbor, 3).unwrap();
        let f = build_factor(&[pt(0.0, 0.0, 0.0)], &rule, &k, None).unwrap();
        assert_eq!(f.n(), 1);
        assert_relative_eq!(f.columns[0].d, 1.0 + k.default_jitter());
        assert_relative_eq!(f.logdet(), (1.0 + k.default_jitter()).ln());
        assert_relative_eq!(f.apply_precision(&[2.0])[0], 2.0 / (1.0 + k.default_jitter()));
    }

    #[test]
    fn independence_limit_gives_diagonal_factor() {
        // points far apart relative to a tiny length scale: d_i -> sigma + jitter
        let k = KernelParams::new(2.0, 1e-3, 1e-3).unwrap();
        let pts: Vec<_> = (0..12).map(|i| pt(i as f64, 0.0, 0.0)).collect();
        let rule = ConditioningRule::new(ConditioningKind::NearestNeighbor, 4).unwrap();
        let f = build_factor(&pts, &rule, &k, None).unwrap();
        for col in &f.columns {
            assert_relative_eq!(col.d, 2.0 + k.default_jitter(), max_relative = 1e-10);
            for &b in &col.coeffs {
                assert!(b.abs() < 1e-12);
            }
        }
        assert_relative_eq!(
            f.logdet(),
            12.0 * (2.0 + k.default_jitter()).ln(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn exact_logdet_and_precision_match_dense() {
        let pts = random_points(50, 21);
        let k = kp();
        let rule = ConditioningRule::new(ConditioningKind::Correlation, 49).unwrap();
        let f = build_factor(&pts, &rule, &k, None).unwrap();
        let dense = gram(&pts, &k, k.default_jitter());
        let chol = dense.clone().cholesky().unwrap();
        let ld_dense: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        assert_relative_eq!(f.logdet(), ld_dense, max_relative = 1e-8);

        let mut rng = StdRng::seed_from_u64(2);
        let v: Vec<f64> = (0..50).map(|_| rng.gen::<f64>() - 0.5).collect();
        let got = f.apply_precision(&v);
        let want = chol.solve(&DVector::from_column_slice(&v));
        for i in 0..50 {
            assert_relative_eq!(got[i], want[i], max_relative = 1e-8, epsilon = 1e-10);
        }
        assert!(f.apply_precision(&vec![0.0; 50]).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn exactness_is_ordering_independent() {
        let pts = random_points(40, 30);
        let k = kp();
        let rule = ConditioningRule::new(ConditioningKind::NearestNeighbor, 39).unwrap();
        let mut logdets = Vec::new();
        for kind in [
            OrderingKind::SpaceMajor,
            OrderingKind::TimeMajor,
            OrderingKind::TimeMajorRandSpace,
            OrderingKind::Random,
        ] {
            let f = ordered_factor(&pts, &OrderingStrategy::new(kind, 7), &rule, &k, None).unwrap();
            logdets.push(f.logdet());
        }
        for w in logdets.windows(2) {
            assert_relative_eq!(w[0], w[1], max_relative = 1e-8);
        }
    }

    #[test]
    fn reconstructed_precision_is_positive_definite() {
        let pts = random_points(30, 44);
        let rule = ConditioningRule::new(ConditioningKind::Correlation, 5).unwrap();
        let f = build_factor(&pts, &rule, &kp(), None).unwrap();
        let u = f.dense_u();
        let prec = &u * u.transpose();
        assert!(prec.cholesky().is_some());
        let sigma_hat = (&u * u.transpose()).try_inverse().unwrap();
        assert!(sigma_hat.cholesky().is_some());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn sparsity_accounting(n in 2usize..40, m in 1usize..12, seed in 0u64..1000) {
            let pts = random_points(n, seed);
            let rule = ConditioningRule::new(ConditioningKind::NearestNeighbor, m).unwrap();
            let f = build_factor(&pts, &rule, &kp(), None).unwrap();
            let expected: usize = (0..n).map(|i| i.min(m)).sum();
            prop_assert_eq!(f.nnz_coeffs(), expected);
            prop_assert!(f.nnz_coeffs() <= n * m);
            for col in &f.columns {
                prop_assert!(col.d > 0.0);
            }
        }
    }
}
