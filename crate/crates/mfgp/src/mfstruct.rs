//! Assembly of the multi-fidelity system: incidence maps Z1/Z21, the coupling
//! matrix A = [[Z1, 0], [R Z21, I]] with R = diag(rho at HF locations), the
//! noise diagonal D_eps, the sparse auxiliary precision
//! `H = Sigma_w^-1 + A' D_eps^-1 A`, and all Woodbury-based solves and
//! determinants with K. The inverse of K is never formed; every solve runs
//! through the cached AMD-permuted sparse Cholesky factor of H.
//!
//! The latent LF vector is indexed by (location, time) pairs over all unique
//! locations and the union of observed time stamps of both fidelities; Z1 and
//! Z21 select rows of this space-time latent vector. The latent discrepancy
//! vector is indexed by the HF observation points themselves.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::SpaceTimePoint;
use crate::sparse::{amd_order, CscMatrix, LdlFactor};
use crate::vecchia::VecchiaFactor;

/// Observation-to-latent bookkeeping shared by both fidelities.
#[derive(Debug, Clone)]
pub struct FidelityLayout {
    /// Unique spatial locations (union over fidelities), lexicographic order.
    pub locations: Vec<(f64, f64)>,
    /// Union of observed time stamps, ascending.
    pub times: Vec<f64>,
    /// Latent LF points: every location crossed with every time stamp,
    /// location-major with time ascending within location.
    pub latent_points: Vec<SpaceTimePoint>,
    pub lf_points: Vec<SpaceTimePoint>,
    pub hf_points: Vec<SpaceTimePoint>,
    /// Per LF observation: canonical latent index.
    pub lf_latent: Vec<usize>,
    /// Per HF observation: canonical latent index.
    pub hf_latent: Vec<usize>,
    /// True when every HF location is also observed at low fidelity.
    pub nested: bool,
}

impl FidelityLayout {
    pub fn n_lf(&self) -> usize {
        self.lf_points.len()
    }

    pub fn n_hf(&self) -> usize {
        self.hf_points.len()
    }

    /// N1, the number of distinct spatial locations.
    pub fn n_locations(&self) -> usize {
        self.locations.len()
    }

    pub fn hf_locations(&self) -> Vec<(f64, f64)> {
        self.hf_points.iter().map(|p| p.location()).collect()
    }
}

/// Nugget variances of the two observation equations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// LF nugget variance g_L^2.
    pub g_l_sq: f64,
    /// HF/discrepancy nugget variance g_delta^2.
    pub g_d_sq: f64,
}

impl NoiseModel {
    pub fn new(g_l_sq: f64, g_d_sq: f64) -> Result<Self> {
        for (name, v) in [("g_l_sq", g_l_sq), ("g_d_sq", g_d_sq)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "nugget {name} must be finite and strictly positive, got {v}"
                )));
            }
        }
        Ok(Self { g_l_sq, g_d_sq })
    }
}

/// Build the observation/latent layout. Locations are matched by exact
/// coordinate equality; duplicate space-time points within one fidelity are
/// rejected.
pub fn build_layout(
    lf_points: &[SpaceTimePoint],
    hf_points: &[SpaceTimePoint],
) -> Result<FidelityLayout> {
    for (fid, pts) in [("LF", lf_points), ("HF", hf_points)] {
        let mut seen = HashMap::new();
        for (i, p) in pts.iter().enumerate() {
            if seen.insert(p.key(), i).is_some() {
                let _ = fid;
                return Err(Error::DuplicatePoint(i));
            }
        }
    }

    let mut loc_keys: Vec<((u64, u64), (f64, f64))> = Vec::new();
    let mut time_keys: Vec<(u64, f64)> = Vec::new();
    for p in lf_points.iter().chain(hf_points) {
        loc_keys.push((p.location_key(), p.location()));
        time_keys.push((crate::kernels::bits(p.t), p.t));
    }
    loc_keys.sort_by(|a, b| {
        (a.1 .0)
            .partial_cmp(&b.1 .0)
            .unwrap()
            .then((a.1 .1).partial_cmp(&b.1 .1).unwrap())
    });
    loc_keys.dedup_by_key(|e| e.0);
    time_keys.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    time_keys.dedup_by_key(|e| e.0);

    let locations: Vec<(f64, f64)> = loc_keys.iter().map(|e| e.1).collect();
    let times: Vec<f64> = time_keys.iter().map(|e| e.1).collect();
    let loc_index: HashMap<(u64, u64), usize> =
        loc_keys.iter().enumerate().map(|(i, e)| (e.0, i)).collect();
    let time_index: HashMap<u64, usize> =
        time_keys.iter().enumerate().map(|(i, e)| (e.0, i)).collect();

    let nt = times.len();
    let mut latent_points = Vec::with_capacity(locations.len() * nt);
    for &(s1, s2) in &locations {
        for &t in &times {
            latent_points.push(SpaceTimePoint { s1, s2, t });
        }
    }

    let latent_of = |p: &SpaceTimePoint| -> usize {
        loc_index[&p.location_key()] * nt + time_index[&crate::kernels::bits(p.t)]
    };
    let lf_latent: Vec<usize> = lf_points.iter().map(|p| latent_of(p)).collect();
    let hf_latent: Vec<usize> = hf_points.iter().map(|p| latent_of(p)).collect();

    let lf_locs: std::collections::HashSet<(u64, u64)> =
        lf_points.iter().map(|p| p.location_key()).collect();
    let nested = hf_points.iter().all(|p| lf_locs.contains(&p.location_key()));

    Ok(FidelityLayout {
        locations,
        times,
        latent_points,
        lf_points: lf_points.to_vec(),
        hf_points: hf_points.to_vec(),
        lf_latent,
        hf_latent,
        nested,
    })
}

/// Structural statistics of the auxiliary precision and its factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub nnz_h: usize,
    pub density_h: f64,
    pub nnz_chol_h: usize,
}

/// The assembled engine for all solves with K.
#[derive(Debug)]
pub struct MfSystem {
    pub n_lf: usize,
    pub n_hf: usize,
    pub latent_l: usize,
    /// LF obs -> H index (position in the ordered LF latent block).
    z1: Vec<usize>,
    /// HF obs -> H index into the LF latent block.
    z21: Vec<usize>,
    /// HF obs -> H index into the discrepancy block.
    zd: Vec<usize>,
    rho_at_hf: Vec<f64>,
    noise: NoiseModel,
    ldl: LdlFactor,
    dim_h: usize,
    nnz_h: usize,
    logdet_sigma_w: f64,
    logdet_h: f64,
    logdet_d_eps: f64,
}

/// Assemble A, D_eps, and H from per-process Vecchia factors, factor H with a
/// fill-reducing permutation, and cache the log-determinant pieces.
///
/// `factor_l` must be built over the layout's latent LF points and `factor_d`
/// over the HF points; each factor carries the ordering permutation it was
/// built under.
pub fn assemble(
    layout: &FidelityLayout,
    factor_l: VecchiaFactor,
    factor_d: VecchiaFactor,
    rho_at_hf: &[f64],
    noise: NoiseModel,
) -> Result<MfSystem> {
    let latent_l = layout.latent_points.len();
    let n_lf = layout.n_lf();
    let n_hf = layout.n_hf();
    if factor_l.n() != latent_l {
        return Err(Error::InvalidParameter(format!(
            "LF factor covers {} points but the latent grid has {latent_l}",
            factor_l.n()
        )));
    }
    if factor_d.n() != n_hf {
        return Err(Error::InvalidParameter(format!(
            "discrepancy factor covers {} points but there are {n_hf} HF observations",
            factor_d.n()
        )));
    }
    if rho_at_hf.len() != n_hf {
        return Err(Error::InvalidParameter(
            "rho vector length must equal the HF observation count".into(),
        ));
    }

    // positions of canonical indices inside each factor's ordering
    let mut latent_pos = vec![0usize; latent_l];
    for (pos, &orig) in factor_l.permutation.iter().enumerate() {
        latent_pos[orig] = pos;
    }
    let mut delta_pos = vec![0usize; n_hf];
    for (pos, &orig) in factor_d.permutation.iter().enumerate() {
        delta_pos[orig] = pos;
    }

    let z1: Vec<usize> = layout.lf_latent.iter().map(|&c| latent_pos[c]).collect();
    let z21: Vec<usize> = layout.hf_latent.iter().map(|&c| latent_pos[c]).collect();
    let zd: Vec<usize> = (0..n_hf).map(|h| latent_l + delta_pos[h]).collect();

    let dim_h = latent_l + n_hf;
    let mut trips: Vec<(usize, usize, f64)> = Vec::new();
    factor_l.precision_triplets(0, &mut trips);
    factor_d.precision_triplets(latent_l, &mut trips);
    let inv_gl = 1.0 / noise.g_l_sq;
    let inv_gd = 1.0 / noise.g_d_sq;
    for &zi in &z1 {
        trips.push((zi, zi, inv_gl));
    }
    for h in 0..n_hf {
        let r = rho_at_hf[h];
        trips.push((z21[h], z21[h], r * r * inv_gd));
        trips.push((zd[h], zd[h], inv_gd));
        trips.push((z21[h], zd[h], r * inv_gd));
        trips.push((zd[h], z21[h], r * inv_gd));
    }
    let h_mat = CscMatrix::from_triplets(dim_h, trips);
    let nnz_h = h_mat.nnz();
    let perm = amd_order(&h_mat);
    let ldl = LdlFactor::new(&h_mat, perm)?;

    let logdet_sigma_w = factor_l.logdet() + factor_d.logdet();
    let logdet_h = ldl.logdet();
    let logdet_d_eps = n_lf as f64 * noise.g_l_sq.ln() + n_hf as f64 * noise.g_d_sq.ln();

    Ok(MfSystem {
        n_lf,
        n_hf,
        latent_l,
        z1,
        z21,
        zd,
        rho_at_hf: rho_at_hf.to_vec(),
        noise,
        ldl,
        dim_h,
        nnz_h,
        logdet_sigma_w,
        logdet_h,
        logdet_d_eps,
    })
}

impl MfSystem {
    pub fn n(&self) -> usize {
        self.n_lf + self.n_hf
    }

    pub fn noise(&self) -> NoiseModel {
        self.noise
    }

    pub fn rho_at_hf(&self) -> &[f64] {
        &self.rho_at_hf
    }

    fn d_inv(&self, v: &[f64]) -> Vec<f64> {
        let inv_gl = 1.0 / self.noise.g_l_sq;
        let inv_gd = 1.0 / self.noise.g_d_sq;
        v.iter()
            .enumerate()
            .map(|(i, &x)| if i < self.n_lf { x * inv_gl } else { x * inv_gd })
            .collect()
    }

    fn a_transpose_times(&self, v: &[f64]) -> Vec<f64> {
        let mut u = vec![0f64; self.dim_h];
        for (i, &zi) in self.z1.iter().enumerate() {
            u[zi] += v[i];
        }
        for h in 0..self.n_hf {
            let vh = v[self.n_lf + h];
            u[self.z21[h]] += self.rho_at_hf[h] * vh;
            u[self.zd[h]] += vh;
        }
        u
    }

    fn a_times(&self, s: &[f64]) -> Vec<f64> {
        let mut t = vec![0f64; self.n()];
        for (i, &zi) in self.z1.iter().enumerate() {
            t[i] = s[zi];
        }
        for h in 0..self.n_hf {
            t[self.n_lf + h] = self.rho_at_hf[h] * s[self.z21[h]] + s[self.zd[h]];
        }
        t
    }

    /// K^-1 v via the Woodbury identity:
    /// `K^-1 = D^-1 - D^-1 A H^-1 A' D^-1`.
    pub fn solve_k(&self, rhs: &[f64]) -> Vec<f64> {
        assert_eq!(rhs.len(), self.n(), "right-hand side length mismatch");
        let w = self.d_inv(rhs);
        let u = self.a_transpose_times(&w);
        let s = self.ldl.solve(&u);
        let t = self.d_inv(&self.a_times(&s));
        w.iter().zip(&t).map(|(a, b)| a - b).collect()
    }

    /// K^-1 applied to each column; all columns share the cached factorization.
    pub fn solve_k_multi(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(rhs.nrows(), self.n());
        let mut out = DMatrix::zeros(rhs.nrows(), rhs.ncols());
        for c in 0..rhs.ncols() {
            let col: Vec<f64> = rhs.column(c).iter().copied().collect();
            let sol = self.solve_k(&col);
            for r in 0..rhs.nrows() {
                out[(r, c)] = sol[r];
            }
        }
        out
    }

    /// log|K| = log|Sigma_w| + log|H| + log|D_eps| (matrix determinant lemma).
    pub fn logdet_k(&self) -> f64 {
        self.logdet_sigma_w + self.logdet_h + self.logdet_d_eps
    }

    pub fn quad_form(&self, v: &[f64]) -> f64 {
        v.iter().zip(self.solve_k(v)).map(|(a, b)| a * b).sum()
    }

    pub fn sparsity_report(&self) -> SparsityReport {
        SparsityReport {
            nnz_h: self.nnz_h,
            density_h: self.nnz_h as f64 / (self.dim_h as f64 * self.dim_h as f64),
            nnz_chol_h: self.ldl.nnz_factor(),
        }
    }
}
