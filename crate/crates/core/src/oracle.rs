//! Brute-force ground truth: quadrature of the exact kernel over the ellipse.
//!
//! The ellipse is mapped onto the unit disc, `x = b + R(ξ)(a₁ρ cos θ, a₂ρ sin θ)`,
//! and integrated with Gauss–Legendre in `u = ρ²` (which makes the radial
//! integrand smooth after angular averaging) and the trapezoid rule in `θ`
//! (spectrally accurate for periodic integrands). The source lies outside the
//! ellipse, so the integrand is analytic on the domain.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{EitError, Result};
use crate::model::{self, EllipseAnomaly, EllipseParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadratureRule {
    /// One tensor rule at the requested order, checked against double order.
    TensorGauss,
    /// Uniform radial splitting, refined until the requested tolerance.
    AdaptiveSubdivision,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureSpec {
    pub rule: QuadratureRule,
    /// Gauss points per radial panel; the angular rule uses twice as many.
    pub order: usize,
    /// Relative accuracy target of the adaptive rule.
    pub tol: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self { rule: QuadratureRule::AdaptiveSubdivision, order: 16, tol: 1e-12 }
    }
}

impl QuadratureSpec {
    pub fn tensor(order: usize) -> Self {
        Self { rule: QuadratureRule::TensorGauss, order, tol: 1e-12 }
    }

    pub fn adaptive(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.order < 2 {
            return Err(EitError::InvalidParameter(format!("quadrature order {} < 2", self.order)));
        }
        if !(self.tol > 0.0) {
            return Err(EitError::InvalidParameter(format!("quadrature tolerance {} must be positive", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureResult {
    pub value: f64,
    /// Absolute change between the last two refinement levels.
    pub error_estimate: f64,
    /// Radial panels used by the returned value.
    pub panels: usize,
}

/// Maximum number of halvings of the radial panel width.
const MAX_DEPTH: u32 = 10;

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Chebyshev-like initial guess, then Newton on P_n.
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let k = k as f64;
                let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

struct TensorRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl TensorRule {
    fn new(order: usize) -> Self {
        let (nodes, weights) = gauss_legendre(order);
        Self { nodes, weights }
    }

    /// `∫_D f` with `panels` equal radial panels in `u = ρ²` and `angles`
    /// trapezoid points.
    fn apply(&self, p: &EllipseParams, panels: usize, angles: usize, f: &impl Fn(f64, f64) -> f64) -> f64 {
        let (s, c) = p.xi.sin_cos();
        let trig: Vec<(f64, f64)> = (0..angles).map(|k| (TAU * k as f64 / angles as f64).sin_cos()).collect();
        let width = 1.0 / panels as f64;
        let mut total = 0.0;
        for panel in 0..panels {
            let lo = panel as f64 * width;
            for (x, w) in self.nodes.iter().zip(&self.weights) {
                let u = lo + 0.5 * width * (x + 1.0);
                let rho = u.sqrt();
                let mut ring = 0.0;
                for &(st, ct) in &trig {
                    let x1 = p.a1 * rho * ct;
                    let x2 = p.a2 * rho * st;
                    ring += f(p.b1 + c * x1 - s * x2, p.b2 + s * x1 + c * x2);
                }
                total += 0.5 * width * w * ring;
            }
        }
        // dx = a₁a₂ ρ dρ dθ = ½ a₁a₂ du dθ
        0.5 * p.a1 * p.a2 * total * TAU / angles as f64
    }
}

/// Integrates `f` over the ellipse `p`.
pub fn integrate_over_ellipse(
    p: &EllipseParams,
    spec: &QuadratureSpec,
    f: impl Fn(f64, f64) -> f64,
) -> Result<QuadratureResult> {
    spec.validate()?;
    let coarse = TensorRule::new(spec.order);
    let fine = TensorRule::new(2 * spec.order);
    let floor = |v: f64| 4.0 * f64::EPSILON * v.abs();
    match spec.rule {
        QuadratureRule::TensorGauss => {
            let lo = coarse.apply(p, 1, 2 * spec.order, &f);
            let hi = fine.apply(p, 1, 4 * spec.order, &f);
            Ok(QuadratureResult { value: hi, error_estimate: (hi - lo).abs().max(floor(hi)), panels: 1 })
        }
        QuadratureRule::AdaptiveSubdivision => {
            let mut prev = coarse.apply(p, 1, 2 * spec.order, &f);
            for depth in 1..=MAX_DEPTH {
                let panels = 1usize << depth;
                let cur = coarse.apply(p, panels, 2 * spec.order * panels, &f);
                let err = (cur - prev).abs();
                if !cur.is_finite() {
                    return Err(EitError::Quadrature("non-finite integrand".into()));
                }
                if err <= spec.tol * cur.abs() {
                    return Ok(QuadratureResult { value: cur, error_estimate: err.max(floor(cur)), panels });
                }
                prev = cur;
            }
            Err(EitError::Quadrature(format!(
                "relative tolerance {} not reached after {} radial halvings",
                spec.tol, MAX_DEPTH
            )))
        }
    }
}

/// `I(D; φ) = ∫_D K dx` for the exact kernel.
pub fn integrate_kernel_over_ellipse(e: &EllipseAnomaly, phi: f64, spec: &QuadratureSpec) -> Result<QuadratureResult> {
    integrate_kernel_params(&e.params(), phi, spec)
}

pub(crate) fn integrate_kernel_params(p: &EllipseParams, phi: f64, spec: &QuadratureSpec) -> Result<QuadratureResult> {
    let (sn, cs) = phi.sin_cos();
    integrate_over_ellipse(p, spec, |x1, x2| {
        let dx = x1 - cs;
        let dy = x2 - sn;
        let s = dx * dx + dy * dy;
        1.0 / (s * s)
    })
}

/// Geometric ladder of scales used by [`taylor_error_scaling`] when the
/// caller has no preference.
pub const DEFAULT_SCALES: [f64; 5] = [0.04, 0.028_284_271_247_461_9, 0.02, 0.014_142_135_623_730_95, 0.01];

/// Relative truncation error of the quadratic Taylor map for the ellipses
/// with semi-axes `(s·aspect, s)` centred at `b`, for each `s` in `scales`.
pub fn taylor_error_scaling(b1: f64, b2: f64, phi: f64, aspect: f64, scales: &[f64]) -> Result<Vec<(f64, f64)>> {
    if !(aspect > 0.0) {
        return Err(EitError::InvalidParameter(format!("aspect {aspect} must be positive")));
    }
    let spec = QuadratureSpec::adaptive(1e-14);
    let radius = b1.hypot(b2);
    scales
        .iter()
        .map(|&s| {
            if !(s > 0.0) || radius + s * aspect.max(1.0) >= 1.0 {
                return Err(EitError::InvalidParameter(format!("scale {s} leaves the unit disc")));
            }
            let p = EllipseParams { b1, b2, a1: s * aspect, a2: s, xi: 0.3 };
            let exact = integrate_kernel_params(&p, phi, &spec)?.value;
            let taylor = model::forward_ellipse_params(&p, phi)?;
            Ok((s, (taylor - exact).abs() / exact.abs()))
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x.ln(), b + y.ln()));
    let (mx, my) = (sx / n, sy / n);
    let (num, den) = points.iter().fold((0.0, 0.0), |(a, b), (x, y)| {
        let dx = x.ln() - mx;
        (a + dx * (y.ln() - my), b + dx * dx)
    });
    num / den
}

/// Regression constants for the reference ellipse `(0.4, 0.5, 0.08, 0.04, 45°)`
/// at the five standard dipole angles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenConstants {
    pub anomaly: EllipseAnomaly,
    pub angles_deg: Vec<f64>,
    pub quadrature: Vec<f64>,
    pub taylor: Vec<f64>,
    pub simplified: Vec<f64>,
    pub tol: f64,
}

pub fn freeze_reference(tol: f64) -> Result<FrozenConstants> {
    let anomaly = EllipseAnomaly::from_degrees(0.4, 0.5, 0.08, 0.04, 45.0)?;
    let angles_deg = vec![0.0, 90.0, 270.0, 180.0, 45.0];
    let spec = QuadratureSpec::adaptive(tol);
    let mut quadrature = Vec::new();
    let mut taylor = Vec::new();
    let mut simplified = Vec::new();
    for d in &angles_deg {
        let phi = f64::to_radians(*d);
        quadrature.push(integrate_kernel_over_ellipse(&anomaly, phi, &spec)?.value);
        taylor.push(model::forward_ellipse(&anomaly, phi)?);
        simplified.push(model::forward_simplified(anomaly.area(), anomaly.b1(), anomaly.b2(), phi)?);
    }
    Ok(FrozenConstants { anomaly, angles_deg, quadrature, taylor, simplified, tol })
}
