//! Direct recovery of centre and area from three measurements.
//!
//! Under the area-only model `gᵢ = A/Sᵢ²`, the ratio `r = √(g_ref/gᵢ) = Sᵢ/S_ref`
//! is independent of `A`, and the set of centres with a given ratio is an
//! Apollonius circle (a line when `r = 1`). Two such loci intersect at the
//! centre; `A` follows by back-substitution.

use serde::{Deserialize, Serialize};

use crate::error::{EitError, Result};
use crate::model::{squared_distance, MeasurementSet};

/// `|r − 1| ≤ TIE_TOLERANCE·(1 + r)` selects the line locus.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Relative discriminant below which two loci are reported tangent.
pub const TANGENT_TOLERANCE: f64 = 1e-9;

/// Intersections at most this far outside the unit circle are pulled back in.
pub const SNAP_DISTANCE: f64 = 1e-6;

/// Set of points `b` with `w|b|² − 2v·b + k = 0`.
///
/// Loci built from data are stored in this form rather than as centre and
/// radius, since the centre diverges as the ratio approaches one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocusEquation {
    pub w: f64,
    pub v: [f64; 2],
    pub k: f64,
}

impl LocusEquation {
    pub fn eval(&self, b: [f64; 2]) -> f64 {
        self.w * (b[0] * b[0] + b[1] * b[1]) - 2.0 * (self.v[0] * b[0] + self.v[1] * b[1]) + self.k
    }

    fn normalized(&self) -> Self {
        let n = (self.w * self.w + self.v[0] * self.v[0] + self.v[1] * self.v[1] + self.k * self.k).sqrt();
        let sign = if self.w < 0.0 || (self.w == 0.0 && (self.v[0] < 0.0 || (self.v[0] == 0.0 && self.v[1] < 0.0))) {
            -1.0
        } else {
            1.0
        };
        let s = sign / n;
        Self { w: self.w * s, v: [self.v[0] * s, self.v[1] * s], k: self.k * s }
    }
}

/// Geometric description of a locus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LocusShape {
    Circle { center: [f64; 2], radius: f64 },
    Line { point: [f64; 2], direction: [f64; 2] },
}

/// A circle or line of candidate centres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApolloniusLocus {
    pub shape: LocusShape,
    pub equation: LocusEquation,
}

impl ApolloniusLocus {
    pub fn circle(center: [f64; 2], radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite() && center.iter().all(|c| c.is_finite())) {
            return Err(EitError::InvalidParameter(format!("circle radius {radius} centre {center:?}")));
        }
        let k = center[0] * center[0] + center[1] * center[1] - radius * radius;
        Ok(Self {
            shape: LocusShape::Circle { center, radius },
            equation: LocusEquation { w: 1.0, v: center, k },
        })
    }

    pub fn line(point: [f64; 2], direction: [f64; 2]) -> Result<Self> {
        let len = direction[0].hypot(direction[1]);
        if !(len > 0.0 && len.is_finite() && point.iter().all(|c| c.is_finite())) {
            return Err(EitError::InvalidParameter(format!("line direction {direction:?}")));
        }
        let d = [direction[0] / len, direction[1] / len];
        let n = [-d[1], d[0]];
        Ok(Self {
            shape: LocusShape::Line { point, direction: d },
            equation: LocusEquation { w: 0.0, v: [n[0] / 2.0, n[1] / 2.0], k: n[0] * point[0] + n[1] * point[1] },
        })
    }

    /// Radius of a circle locus, `∞` for a line.
    pub fn radius(&self) -> f64 {
        match self.shape {
            LocusShape::Circle { radius, .. } => radius,
            LocusShape::Line { .. } => f64::INFINITY,
        }
    }
}

fn unit(phi: f64) -> [f64; 2] {
    let (s, c) = phi.sin_cos();
    [c, s]
}

/// Locus of centres `b` with `Sᵢ(b)/S_ref(b) = √(g_ref/gᵢ)`.
pub fn apollonius_locus(g_i: f64, g_ref: f64, phi_i: f64, phi_ref: f64) -> Result<ApolloniusLocus> {
    if !(g_i > 0.0 && g_ref > 0.0 && g_i.is_finite() && g_ref.is_finite()) {
        return Err(EitError::InvalidData(format!("measurements must be positive, got {g_i} and {g_ref}")));
    }
    let pi = unit(phi_i);
    let pr = unit(phi_ref);
    if (pi[0] - pr[0]).hypot(pi[1] - pr[1]) < 1e-12 {
        return Err(EitError::InvalidDesign("locus needs two distinct dipole angles".into()));
    }
    let r = (g_ref / g_i).sqrt();
    if (r - 1.0).abs() <= TIE_TOLERANCE * (1.0 + r) {
        // Perpendicular bisector of the two dipoles, through the origin.
        let mut loc = ApolloniusLocus::line([0.0, 0.0], [-(pi[1] - pr[1]), pi[0] - pr[0]])?;
        loc.equation = LocusEquation { w: 0.0, v: [pi[0] - pr[0], pi[1] - pr[1]], k: 0.0 };
        return Ok(loc);
    }
    let w = 1.0 - r;
    let v = [pi[0] - r * pr[0], pi[1] - r * pr[1]];
    let center = [v[0] / w, v[1] / w];
    let radius = (center[0] * center[0] + center[1] * center[1] - 1.0).max(0.0).sqrt();
    Ok(ApolloniusLocus { shape: LocusShape::Circle { center, radius }, equation: LocusEquation { w, v, k: w } })
}

/// Intersections of two loci, sorted by distance from the origin.
pub fn intersect_loci(l1: &ApolloniusLocus, l2: &ApolloniusLocus) -> Result<Vec<[f64; 2]>> {
    let e1 = l1.equation.normalized();
    let e2 = l2.equation.normalized();
    let same = (e1.w - e2.w).abs() + (e1.v[0] - e2.v[0]).abs() + (e1.v[1] - e2.v[1]).abs() + (e1.k - e2.k).abs();
    if same < 1e-12 {
        return Err(EitError::Degenerate("coincident loci".into()));
    }

    if e1.w == 0.0 && e2.w == 0.0 {
        // Two lines: -2vⱼ·b + kⱼ = 0.
        let det = e1.v[0] * e2.v[1] - e1.v[1] * e2.v[0];
        if det.abs() < 1e-14 {
            return Ok(Vec::new());
        }
        let (h1, h2) = (e1.k / 2.0, e2.k / 2.0);
        return Ok(vec![[(h1 * e2.v[1] - h2 * e1.v[1]) / det, (e1.v[0] * h2 - e2.v[0] * h1) / det]]);
    }

    // Eliminating |b|² gives the radical line n·b = h.
    let n = [e2.w * e1.v[0] - e1.w * e2.v[0], e2.w * e1.v[1] - e1.w * e2.v[1]];
    let h = (e2.w * e1.k - e1.w * e2.k) / 2.0;
    let nn = n[0].hypot(n[1]);
    if nn < 1e-14 {
        // Concentric circles or parallel lines, not coincident.
        return Ok(Vec::new());
    }
    let nhat = [n[0] / nn, n[1] / nn];
    let u = [-nhat[1], nhat[0]];
    let q = [nhat[0] * h / nn, nhat[1] * h / nn];

    // Restrict the better-conditioned equation to b = q + t·u.
    let e = if e1.w.abs() >= e2.w.abs() { e1 } else { e2 };
    let alpha = e.w;
    let beta = -2.0 * (e.v[0] * u[0] + e.v[1] * u[1]);
    let gamma = e.eval(q);
    let at = |t: f64| [q[0] + t * u[0], q[1] + t * u[1]];

    let mut pts = Vec::with_capacity(2);
    if alpha.abs() <= 1e-14 * beta.abs().max(gamma.abs()).max(1e-300) {
        if beta.abs() < 1e-300 {
            return Ok(Vec::new());
        }
        pts.push(at(-gamma / beta));
    } else {
        let disc = beta * beta - 4.0 * alpha * gamma;
        // Squared half-chord against the squared radius of the chosen circle.
        let half_chord_sq = disc / (4.0 * alpha * alpha);
        let radius_sq = (e.v[0] * e.v[0] + e.v[1] * e.v[1]) / (alpha * alpha) - e.k / alpha;
        if half_chord_sq.abs() <= TANGENT_TOLERANCE * radius_sq.abs() {
            pts.push(at(-beta / (2.0 * alpha)));
        } else if disc < 0.0 {
            return Ok(Vec::new());
        } else {
            let root = -0.5 * (beta + beta.signum() * disc.sqrt());
            if root == 0.0 {
                pts.push(at(0.0));
            } else {
                pts.push(at(root / alpha));
                pts.push(at(gamma / root));
            }
        }
    }
    pts.sort_by(|a, b| a[0].hypot(a[1]).total_cmp(&b[0].hypot(b[1])));
    Ok(pts)
}

/// Recovered centre and area with diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InversionResult {
    pub b1: f64,
    pub b2: f64,
    pub area: f64,
    /// Largest relative mismatch between the data and `A·K(b; φᵢ)`.
    pub residual: f64,
    /// True when the intersection sat just outside the disc and was pulled in.
    pub snapped: bool,
    pub locus1: ApolloniusLocus,
    pub locus2: ApolloniusLocus,
}

/// Centre and area from exactly three measurements; the third angle is the
/// reference for both ratios.
pub fn invert_location_size(m: &MeasurementSet) -> Result<InversionResult> {
    if m.design.len() != 3 {
        return Err(EitError::InvalidDesign(format!("inversion needs 3 angles, got {}", m.design.len())));
    }
    let phi = m.design.angles();
    let g = &m.values;
    let locus1 = apollonius_locus(g[0], g[2], phi[0], phi[2])?;
    let locus2 = apollonius_locus(g[1], g[2], phi[1], phi[2])?;
    let pts = intersect_loci(&locus1, &locus2)?;

    let interior: Vec<[f64; 2]> = pts.iter().copied().filter(|p| p[0].hypot(p[1]) < 1.0).collect();
    let (b, snapped) = match interior.as_slice() {
        [only] => (*only, false),
        [first, second, ..] => return Err(EitError::Ambiguous { first: *first, second: *second }),
        [] => match pts.first() {
            Some(p) if p[0].hypot(p[1]) <= 1.0 + SNAP_DISTANCE => {
                let s = (1.0 - SNAP_DISTANCE) / p[0].hypot(p[1]);
                log::warn!("inversion snapped centre {p:?} onto the disc");
                ([p[0] * s, p[1] * s], true)
            }
            _ => {
                return Err(EitError::OutOfRange(format!(
                    "no interior intersection (candidates {pts:?}); data inconsistent with an interior anomaly"
                )))
            }
        },
    };

    let s3 = squared_distance(b[0], b[1], phi[2]);
    let area = g[2] * s3 * s3;
    let residual = phi
        .iter()
        .zip(g)
        .map(|(&p, &gi)| {
            let s = squared_distance(b[0], b[1], p);
            (area / (s * s) - gi).abs() / gi
        })
        .fold(0.0, f64::max);
    Ok(InversionResult { b1: b[0], b2: b[1], area, residual, snapped, locus1, locus2 })
}
