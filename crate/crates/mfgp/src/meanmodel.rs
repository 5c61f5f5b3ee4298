//! GLS mean removal with fidelity-specific offsets, estimated under the joint
//! multi-fidelity covariance, plus the REML determinant correction.
//!
//! Two designs are supported: `Global` fits one intercept per fidelity;
//! `Adaptive` adds a spatial linear trend per fidelity, with coordinates
//! centered (pooled mean over all observations) before entering the design,
//! which keeps the Gramian well conditioned. Coefficients are reported in the
//! centered parameterization.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mfstruct::{FidelityLayout, MfSystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GlsKind {
    None,
    Global,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlsMode {
    pub kind: GlsKind,
    /// Add the REML determinant term to the objective when centering is on.
    pub reml: bool,
}

impl GlsMode {
    pub fn none() -> Self {
        Self { kind: GlsKind::None, reml: false }
    }

    pub fn global(reml: bool) -> Self {
        Self { kind: GlsKind::Global, reml }
    }

    pub fn adaptive(reml: bool) -> Self {
        Self { kind: GlsKind::Adaptive, reml }
    }
}

/// Anything that can apply K^-1 to columns; implemented by the sparse
/// Woodbury engine and by the dense oracle.
pub trait KSolver {
    fn dim(&self) -> usize;
    fn solve_columns(&self, rhs: &DMatrix<f64>) -> DMatrix<f64>;
}

impl KSolver for MfSystem {
    fn dim(&self) -> usize {
        self.n()
    }

    fn solve_columns(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.solve_k_multi(rhs)
    }
}

/// The GLS design matrix plus the bookkeeping needed to evaluate the fitted
/// mean at prediction targets.
#[derive(Debug, Clone)]
pub struct Design {
    pub matrix: DMatrix<f64>,
    pub kind: GlsKind,
    /// Pooled spatial centering applied to Adaptive columns.
    pub centering: (f64, f64),
    /// Column range of the LF block (empty when n_lf = 0).
    pub lf_cols: std::ops::Range<usize>,
    /// Column range of the HF block (empty when n_hf = 0).
    pub hf_cols: std::ops::Range<usize>,
}

impl Design {
    pub fn p(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Build the design for the given mode (`None` is rejected: running without a
/// mean model means skipping GLS entirely).
pub fn build_design(layout: &FidelityLayout, mode: &GlsMode) -> Result<Design> {
    let n_lf = layout.n_lf();
    let n_hf = layout.n_hf();
    let n = n_lf + n_hf;
    let per_block = match mode.kind {
        GlsKind::None => {
            return Err(Error::InvalidParameter(
                "build_design called with GLS mode None".into(),
            ))
        }
        GlsKind::Global => 1,
        GlsKind::Adaptive => 3,
    };

    let mut centering = (0.0, 0.0);
    if mode.kind == GlsKind::Adaptive {
        let mut c1 = 0.0;
        let mut c2 = 0.0;
        for p in layout.lf_points.iter().chain(&layout.hf_points) {
            c1 += p.s1;
            c2 += p.s2;
        }
        centering = (c1 / n as f64, c2 / n as f64);
    }

    let lf_block = if n_lf > 0 { per_block } else { 0 };
    let hf_block = if n_hf > 0 { per_block } else { 0 };
    let p_total = lf_block + hf_block;
    let mut g = DMatrix::zeros(n, p_total);
    for (i, pt) in layout.lf_points.iter().enumerate() {
        g[(i, 0)] = 1.0;
        if per_block == 3 {
            g[(i, 1)] = pt.s1 - centering.0;
            g[(i, 2)] = pt.s2 - centering.1;
        }
    }
    for (h, pt) in layout.hf_points.iter().enumerate() {
        let r = n_lf + h;
        g[(r, lf_block)] = 1.0;
        if per_block == 3 {
            g[(r, lf_block + 1)] = pt.s1 - centering.0;
            g[(r, lf_block + 2)] = pt.s2 - centering.1;
        }
    }

    Ok(Design {
        matrix: g,
        kind: mode.kind,
        centering,
        lf_cols: 0..lf_block,
        hf_cols: lf_block..p_total,
    })
}

/// Result of the generalized least squares mean fit.
#[derive(Debug, Clone)]
pub struct GlsFit {
    pub design: Design,
    pub beta_hat: DVector<f64>,
    /// Centered residuals y - G beta_hat.
    pub residual: Vec<f64>,
    /// Plug-in coefficient covariance (G' K^-1 G)^-1.
    pub beta_cov: DMatrix<f64>,
    /// G' K^-1 G, kept for the REML correction.
    gram: DMatrix<f64>,
    /// Cached K^-1 y.
    pub k_inv_y: Vec<f64>,
    /// Cached K^-1 G.
    pub k_inv_g: DMatrix<f64>,
}

const MAX_GRAM_CONDITION: f64 = 1e12;

/// beta_hat = (G' K^-1 G)^-1 G' K^-1 y, with all K^-1 products computed
/// against one cached factorization (P + 1 right-hand sides).
pub fn gls_fit<S: KSolver>(solver: &S, y: &[f64], design: &Design) -> Result<GlsFit> {
    let n = solver.dim();
    assert_eq!(y.len(), n, "observation vector length mismatch");
    let g = &design.matrix;
    assert_eq!(g.nrows(), n);
    let p = g.ncols();

    let mut rhs = DMatrix::zeros(n, p + 1);
    rhs.view_mut((0, 0), (n, p)).copy_from(g);
    for (i, &v) in y.iter().enumerate() {
        rhs[(i, p)] = v;
    }
    let solved = solver.solve_columns(&rhs);
    let k_inv_g = solved.view((0, 0), (n, p)).into_owned();
    let k_inv_y: Vec<f64> = (0..n).map(|i| solved[(i, p)]).collect();

    let gram = g.transpose() * &k_inv_g;
    let gram = 0.5 * (&gram + gram.transpose()); // exact symmetry for the eigencheck

    let eig = SymmetricEigen::new(gram.clone());
    let max_ev = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min_ev = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    let cond = if min_ev > 0.0 { max_ev / min_ev } else { f64::INFINITY };
    if !(min_ev > 0.0) || cond > MAX_GRAM_CONDITION {
        return Err(Error::SingularGramian { cond });
    }

    let chol = Cholesky::new(gram.clone()).ok_or(Error::SingularGramian { cond })?;
    let gty = g.transpose() * DVector::from_column_slice(&k_inv_y);
    let beta_hat = chol.solve(&gty);
    let beta_cov = chol.inverse();

    let fitted = g * &beta_hat;
    let residual: Vec<f64> = y.iter().zip(fitted.iter()).map(|(a, b)| a - b).collect();

    Ok(GlsFit { design: design.clone(), beta_hat, residual, beta_cov, gram, k_inv_y, k_inv_g })
}

impl GlsFit {
    /// K^-1 (y - G beta_hat), from the cached solves.
    pub fn k_inv_residual(&self) -> Vec<f64> {
        let corr = &self.k_inv_g * &self.beta_hat;
        self.k_inv_y.iter().zip(corr.iter()).map(|(a, b)| a - b).collect()
    }

    /// Fitted mean contribution for an HF prediction target at location `s`.
    pub fn hf_mean_at(&self, s: (f64, f64)) -> f64 {
        let cols = self.design.hf_cols.clone();
        if cols.is_empty() {
            return 0.0;
        }
        match self.design.kind {
            GlsKind::Global => self.beta_hat[cols.start],
            GlsKind::Adaptive => {
                self.beta_hat[cols.start]
                    + self.beta_hat[cols.start + 1] * (s.0 - self.design.centering.0)
                    + self.beta_hat[cols.start + 2] * (s.1 - self.design.centering.1)
            }
            GlsKind::None => 0.0,
        }
    }

    pub fn p(&self) -> usize {
        self.design.p()
    }
}

/// REML determinant correction `0.5 log|G' K^-1 G|`; the caller pairs it with
/// the (N - P)/2 constant using [`GlsFit::p`].
pub fn reml_correction(fit: &GlsFit) -> Result<f64> {
    let chol = Cholesky::new(fit.gram.clone()).ok_or(Error::SingularGramian { cond: f64::INFINITY })?;
    Ok(chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}
