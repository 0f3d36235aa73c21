//! Jacobians of the forward maps, the uniqueness determinant, the
//! inverse-norm bound for the ratio map, and condition numbers.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix2, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{EitError, Result};
use crate::model::{kernel_hessian, kernel_k, DesignAngles, EllipseAnomaly, EllipseParams};

pub use crate::model::squared_distance;

/// `[(1−R)², (1+R)²]`, the range of `S` over `|b| ≤ R`.
pub fn distance_bracket(radius: f64) -> (f64, f64) {
    ((1.0 - radius).powi(2), (1.0 + radius).powi(2))
}

/// The three angles of a location/area design.
pub fn three(design: &DesignAngles) -> Result<[f64; 3]> {
    design
        .angles()
        .try_into()
        .map_err(|_| EitError::InvalidDesign(format!("expected 3 angles, got {}", design.len())))
}

fn offset(b1: f64, b2: f64, phi: f64) -> [f64; 2] {
    let (s, c) = phi.sin_cos();
    [b1 - c, b2 - s]
}

/// `∂(A·K(b; φᵢ))/∂(A, b₁, b₂)`; rows follow the design angles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jacobian3 {
    pub rows: [[f64; 3]; 3],
}

impl Jacobian3 {
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.rows[i][j])
    }

    pub fn dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(3, 3, |i, j| self.rows[i][j])
    }

    pub fn det(&self) -> f64 {
        self.matrix().determinant()
    }
}

pub fn jacobian3(area: f64, b1: f64, b2: f64, phi: [f64; 3]) -> Result<Jacobian3> {
    let mut rows = [[0.0; 3]; 3];
    for (row, &p) in rows.iter_mut().zip(&phi) {
        let k = kernel_k(b1, b2, p)?;
        let s = squared_distance(b1, b2, p);
        let d = offset(b1, b2, p);
        let s3 = s * s * s;
        *row = [k, -4.0 * area * d[0] / s3, -4.0 * area * d[1] / s3];
    }
    Ok(Jacobian3 { rows })
}

fn half_sine_product(phi: [f64; 3]) -> f64 {
    ((phi[0] - phi[1]) / 2.0).sin() * ((phi[1] - phi[2]) / 2.0).sin() * ((phi[2] - phi[0]) / 2.0).sin()
}

/// `det J₃ = −64A²(|b|²−1)/(S₁S₂S₃)³ · Π sin((φᵢ−φⱼ)/2)`.
pub fn det_jacobian3_closed(area: f64, b1: f64, b2: f64, phi: [f64; 3]) -> f64 {
    let prod: f64 = phi.iter().map(|&p| squared_distance(b1, b2, p)).product();
    -64.0 * area * area * (b1 * b1 + b2 * b2 - 1.0) / prod.powi(3) * half_sine_product(phi)
}

/// Jacobian of the ratio map `(S₁/S₃, S₂/S₃)` in `(b₁, b₂)`, stored as
/// `−(1/S₃²)·[[J₁, J₂], [J₃, J₄]]` together with the `Jᵢ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jacobian2 {
    pub matrix: [[f64; 2]; 2],
    pub j: [f64; 4],
    pub s: [f64; 3],
}

impl Jacobian2 {
    pub fn new(b1: f64, b2: f64, phi: [f64; 3]) -> Self {
        let s = phi.map(|p| squared_distance(b1, b2, p));
        let d = phi.map(|p| offset(b1, b2, p));
        let j = [
            -2.0 * d[0][0] * s[2] + 2.0 * d[2][0] * s[0],
            -2.0 * d[0][1] * s[2] + 2.0 * d[2][1] * s[0],
            -2.0 * d[1][0] * s[2] + 2.0 * d[2][0] * s[1],
            -2.0 * d[1][1] * s[2] + 2.0 * d[2][1] * s[1],
        ];
        let c = -1.0 / (s[2] * s[2]);
        Self { matrix: [[c * j[0], c * j[1]], [c * j[2], c * j[3]]], j, s }
    }

    pub fn denominator(&self) -> f64 {
        self.j[0] * self.j[3] - self.j[1] * self.j[2]
    }

    /// `‖(DÃ)⁻¹‖₁`, infinite when singular.
    pub fn inverse_norm1(&self) -> f64 {
        let m = Matrix2::new(self.matrix[0][0], self.matrix[0][1], self.matrix[1][0], self.matrix[1][1]);
        match m.try_inverse() {
            Some(inv) => (0..2).map(|c| inv[(0, c)].abs() + inv[(1, c)].abs()).fold(0.0, f64::max),
            None => f64::INFINITY,
        }
    }
}

/// The ratio-map Jacobian and its inverse-norm bound, evaluated in the frame
/// rotated so that the centre lies on the positive `x₁` axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityBound {
    /// Jacobian in the original coordinates.
    pub jacobian: Jacobian2,
    /// Jacobian in the rotated frame.
    pub rotated: Jacobian2,
    /// Rotation angle `atan2(b₂, b₁)`.
    pub theta: f64,
    /// `J₁J₄ − J₂J₃` in the rotated frame.
    pub denominator: f64,
    /// `16(1−|b|²) Π sin((φᵢ−φⱼ)/2) S₃` in the rotated frame.
    pub denominator_closed: f64,
    /// `‖(DÃ)⁻¹‖₁` in the rotated frame.
    pub inverse_norm1: f64,
    /// `2√2 S₃^{3/2} max{S₁+√(S₁S₃), S₂+√(S₂S₃)} / ((1−|b|²)|Π sin|)`.
    pub bound: f64,
    /// Same estimate with the exact denominator kept, 16 times smaller.
    pub tight_bound: f64,
}

pub fn jacobian2_and_bound(b1: f64, b2: f64, phi: [f64; 3]) -> Result<StabilityBound> {
    let r = b1.hypot(b2);
    if !(r < 1.0) {
        return Err(EitError::InvalidAnomaly(format!("centre ({b1}, {b2}) outside the disc")));
    }
    let theta = b2.atan2(b1);
    let rphi = phi.map(|p| p - theta);
    let jacobian = Jacobian2::new(b1, b2, phi);
    let rotated = Jacobian2::new(r, 0.0, rphi);
    let s = rotated.s;
    let sines = half_sine_product(rphi);
    let denominator_closed = 16.0 * (1.0 - r * r) * sines * s[2];
    let spread = (s[0] + (s[0] * s[2]).sqrt()).max(s[1] + (s[1] * s[2]).sqrt());
    let (bound, tight_bound) = if sines == 0.0 {
        (f64::INFINITY, f64::INFINITY)
    } else {
        let b = 2.0 * 2f64.sqrt() * s[2].powf(1.5) * spread / ((1.0 - r * r) * sines.abs());
        (b, b / 16.0)
    };
    Ok(StabilityBound {
        jacobian,
        rotated,
        theta,
        denominator: rotated.denominator(),
        denominator_closed,
        inverse_norm1: rotated.inverse_norm1(),
        bound,
        tight_bound,
    })
}

/// `∂I/∂(b₁, b₂, a₁, a₂, ζ)` of the quadratic-Taylor map, `ζ = sin ξ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Jacobian5 {
    pub rows: Vec<[f64; 5]>,
}

impl Jacobian5 {
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows.len(), 5, |i, j| self.rows[i][j])
    }

    pub fn column_norms(&self) -> [f64; 5] {
        let mut out = [0.0; 5];
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.rows.iter().map(|r| r[j] * r[j]).sum::<f64>().sqrt();
        }
        out
    }
}

/// Rows of `∂I/∂(b₁, b₂, a₁, a₂, ξ)` for unconstrained parameters.
pub(crate) fn jacobian5_xi(p: &EllipseParams, angles: &[f64]) -> Result<Vec<[f64; 5]>> {
    let (sx, cx) = p.xi.sin_cos();
    let u = [cx, sx];
    let v = [-sx, cx];
    let (a1, a2) = (p.a1, p.a2);
    let base = PI * a1 * a2;
    angles
        .iter()
        .map(|&phi| {
            let k = kernel_k(p.b1, p.b2, phi)?;
            let h = kernel_hessian(p.b1, p.b2, phi)?;
            let d = offset(p.b1, p.b2, phi);
            let s = squared_distance(p.b1, p.b2, phi);
            let s4 = s * s * s * s;
            let s5 = s4 * s;
            let quad = |x: [f64; 2], y: [f64; 2]| {
                h[0][0] * x[0] * y[0] + h[0][1] * (x[0] * y[1] + x[1] * y[0]) + h[1][1] * x[1] * y[1]
            };
            let (huu, hvv, huv) = (quad(u, u), quad(v, v), quad(u, v));
            let du = d[0] * u[0] + d[1] * u[1];
            let dv = d[0] * v[0] + d[1] * v[1];
            // ∂/∂bⱼ of tᵀ𝒦t for a unit vector t.
            let dh = |dt: f64, t: [f64; 2], j: usize| {
                48.0 * dt * t[j] / s4 - 192.0 * dt * dt * d[j] / s5 + 24.0 * d[j] / s4
            };
            let db = |j: usize| {
                base * (-4.0 * d[j] / (s * s * s) + 0.125 * (a1 * a1 * dh(du, u, j) + a2 * a2 * dh(dv, v, j)))
            };
            Ok([
                db(0),
                db(1),
                PI * a2 * (k + 0.125 * (3.0 * a1 * a1 * huu + a2 * a2 * hvv)),
                PI * a1 * (k + 0.125 * (a1 * a1 * huu + 3.0 * a2 * a2 * hvv)),
                0.25 * base * (a1 * a1 - a2 * a2) * huv,
            ])
        })
        .collect()
}

/// Rows in the `ζ = sin ξ` parameterisation; `dξ/dζ = 1/cos ξ`.
pub(crate) fn jacobian5_params(p: &EllipseParams, angles: &[f64]) -> Result<Vec<[f64; 5]>> {
    let zeta = p.xi.sin();
    if zeta.abs() >= 1.0 {
        return Err(EitError::Degenerate(format!("orientation xi = {} has |sin xi| = 1", p.xi)));
    }
    let c = p.xi.cos();
    let mut rows = jacobian5_xi(p, angles)?;
    rows.iter_mut().for_each(|r| r[4] /= c);
    Ok(rows)
}

pub fn jacobian5(e: &EllipseAnomaly, design: &DesignAngles) -> Result<Jacobian5> {
    Ok(Jacobian5 { rows: jacobian5_params(&e.params(), design.angles())? })
}

/// `σ_min/σ_max`; zero when the matrix is numerically rank deficient.
pub fn reciprocal_condition(j: &DMatrix<f64>) -> f64 {
    if j.is_empty() {
        return 0.0;
    }
    let sv = j.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    let cutoff = max * f64::EPSILON * j.nrows().max(j.ncols()) as f64;
    if !(max > 0.0) || min <= cutoff {
        0.0
    } else {
        min / max
    }
}
