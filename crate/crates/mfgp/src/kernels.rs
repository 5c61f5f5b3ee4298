//! Separable spatio-temporal squared-exponential covariance functions.
//!
//! A kernel evaluation factorizes into a spatial and a temporal part,
//! `k(p, q) = sigma_s * exp(-|s_p - s_q|^2 / (2 l_s^2)) * exp(-(t_p - t_q)^2 / (2 l_t^2))`.
//!
//! Note that `sigma_s` multiplies the exponentials directly, so it *is* the
//! covariance at zero lag. Many GP libraries square the amplitude instead;
//! here the stored value is the variance.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A spatial location plus a time index; the unit of all kernel evaluations.
///
/// Equality is exact coordinate equality — it is used for location matching
/// between fidelities, so callers must hand in bit-identical coordinates for
/// points meant to coincide.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimePoint {
    pub s1: f64,
    pub s2: f64,
    pub t: f64,
}

impl SpaceTimePoint {
    pub fn new(s1: f64, s2: f64, t: f64) -> Result<Self> {
        if !(s1.is_finite() && s2.is_finite() && t.is_finite()) {
            return Err(Error::NonFiniteInput(format!(
                "space-time point ({s1}, {s2}, {t})"
            )));
        }
        Ok(Self { s1, s2, t })
    }

    /// Bit-level key for exact-equality hashing; normalizes -0.0 to 0.0 so the
    /// key agrees with `==` on f64.
    pub(crate) fn key(&self) -> (u64, u64, u64) {
        (bits(self.s1), bits(self.s2), bits(self.t))
    }

    /// Bit-level key of the spatial location only.
    pub(crate) fn location_key(&self) -> (u64, u64) {
        (bits(self.s1), bits(self.s2))
    }

    pub fn location(&self) -> (f64, f64) {
        (self.s1, self.s2)
    }

    pub(crate) fn sq_space_dist(&self, other: &Self) -> f64 {
        let d1 = self.s1 - other.s1;
        let d2 = self.s2 - other.s2;
        d1 * d1 + d2 * d2
    }
}

pub(crate) fn bits(v: f64) -> u64 {
    if v == 0.0 {
        0f64.to_bits()
    } else {
        v.to_bits()
    }
}

/// Parameters of one separable squared-exponential kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// Signal amplitude sigma_s: the covariance at zero lag (not squared).
    pub signal_amplitude: f64,
    /// Spatial length scale, shared by both spatial axes (isotropic space).
    pub length_scale_space: f64,
    /// Temporal length scale.
    pub length_scale_time: f64,
}

impl KernelParams {
    pub fn new(signal_amplitude: f64, length_scale_space: f64, length_scale_time: f64) -> Result<Self> {
        for (name, v) in [
            ("signal_amplitude", signal_amplitude),
            ("length_scale_space", length_scale_space),
            ("length_scale_time", length_scale_time),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "kernel {name} must be finite and strictly positive, got {v}"
                )));
            }
        }
        Ok(Self {
            signal_amplitude,
            length_scale_space,
            length_scale_time,
        })
    }

    /// Default absolute jitter for factorizations involving this kernel.
    pub fn default_jitter(&self) -> f64 {
        crate::JITTER_SCALE * self.signal_amplitude
    }
}

/// Separable squared-exponential covariance between two space-time points.
pub fn eval_separable(p: &SpaceTimePoint, q: &SpaceTimePoint, kp: &KernelParams) -> f64 {
    let ds2 = p.sq_space_dist(q);
    let dt = p.t - q.t;
    let ls2 = kp.length_scale_space * kp.length_scale_space;
    let lt2 = kp.length_scale_time * kp.length_scale_time;
    kp.signal_amplitude * (-0.5 * ds2 / ls2 - 0.5 * (dt * dt) / lt2).exp()
}

/// Latent-process covariance: the kernel plus jitter at exactly coincident
/// points. This is the matrix entry the Vecchia and dense pipelines both see,
/// so the jitter must follow coordinate identity, not index identity.
pub(crate) fn latent_cov(
    p: &SpaceTimePoint,
    q: &SpaceTimePoint,
    kp: &KernelParams,
    jitter: f64,
) -> f64 {
    let mut v = eval_separable(p, q, kp);
    if p == q {
        v += jitter;
    }
    v
}

/// Dense Gram matrix with `jitter` added on the diagonal.
///
/// Exactly symmetric by construction: each off-diagonal value is computed once
/// and written to both triangles.
pub fn gram(points: &[SpaceTimePoint], kp: &KernelParams, jitter: f64) -> DMatrix<f64> {
    let n = points.len();
    assert!(n > 0, "gram of an empty point list");
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = kp.signal_amplitude + jitter;
        for j in (i + 1)..n {
            let v = eval_separable(&points[i], &points[j], kp);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Rectangular cross-covariance matrix between two point lists.
pub fn cross_gram(
    rows: &[SpaceTimePoint],
    cols: &[SpaceTimePoint],
    kp: &KernelParams,
) -> DMatrix<f64> {
    assert!(!rows.is_empty() && !cols.is_empty(), "cross_gram of empty point list");
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
        eval_separable(&rows[i], &cols[j], kp)
    })
}
