//! Domain types, the dipole kernel and the forward maps.
//!
//! Data convention: a "measurement" is `I(D; φ) = ∫_D |∇U₀|² dx` exactly.
//! The tangential derivative of the perturbation potential at the dipole is
//! twice this value; that factor is never applied anywhere in the crate.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{EitError, Result};
use crate::rng;

/// Area above which an anomaly is no longer considered small. Exceeding it
/// only logs a warning.
pub const SMALL_AREA_THRESHOLD: f64 = 0.1;

/// Minimum angular separation (radians) for two design angles to count as
/// distinct.
pub const ANGLE_TOLERANCE: f64 = 1e-12;

/// Points closer than this to the dipole are treated as the source itself.
const SOURCE_RADIUS: f64 = 1e-12;

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(x: f64) -> f64 {
    let r = x.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Squared distance from `(b1, b2)` to the dipole at `(cos φ, sin φ)`.
pub fn squared_distance(b1: f64, b2: f64, phi: f64) -> f64 {
    let (s, c) = phi.sin_cos();
    let dx = b1 - c;
    let dy = b2 - s;
    dx * dx + dy * dy
}

/// Offsets `(b1 - cos φ, b2 - sin φ)` and their squared norm, rejecting the
/// source point itself.
fn offsets(b1: f64, b2: f64, phi: f64) -> Result<(f64, f64, f64)> {
    let (s, c) = phi.sin_cos();
    let dx = b1 - c;
    let dy = b2 - s;
    let sq = dx * dx + dy * dy;
    if sq > SOURCE_RADIUS * SOURCE_RADIUS && sq.is_finite() {
        Ok((dx, dy, sq))
    } else {
        Err(EitError::SourceSingularity { x1: b1, x2: b2, phi })
    }
}

/// `K = |∇U₀|² = 1/S²`.
pub fn kernel_k(b1: f64, b2: f64, phi: f64) -> Result<f64> {
    let (_, _, s) = offsets(b1, b2, phi)?;
    Ok(1.0 / (s * s))
}

/// `(∂K/∂x₁, ∂K/∂x₂) = -4 (b - p) / S³`.
pub fn kernel_gradient(b1: f64, b2: f64, phi: f64) -> Result<[f64; 2]> {
    let (dx, dy, s) = offsets(b1, b2, phi)?;
    let s3 = s * s * s;
    Ok([-4.0 * dx / s3, -4.0 * dy / s3])
}

/// Hessian of `K`; its trace is `16/S³`.
pub fn kernel_hessian(b1: f64, b2: f64, phi: f64) -> Result<[[f64; 2]; 2]> {
    let (dx, dy, s) = offsets(b1, b2, phi)?;
    let s4 = (s * s) * (s * s);
    let k11 = (20.0 * dx * dx - 4.0 * dy * dy) / s4;
    let k12 = 24.0 * dx * dy / s4;
    let k22 = (-4.0 * dx * dx + 20.0 * dy * dy) / s4;
    Ok([[k11, k12], [k12, k22]])
}

/// Background potential of a unit dipole at `(cos φ, sin φ)`.
pub fn dipole_potential(x1: f64, x2: f64, phi: f64) -> Result<f64> {
    let (_, _, s) = offsets(x1, x2, phi)?;
    let (sn, cs) = phi.sin_cos();
    Ok((-x1 * sn + x2 * cs) / s)
}

/// Analytic gradient of [`dipole_potential`]. Its squared norm equals
/// [`kernel_k`] identically.
pub fn dipole_potential_gradient(x1: f64, x2: f64, phi: f64) -> Result<[f64; 2]> {
    let (dx, dy, s) = offsets(x1, x2, phi)?;
    let (sn, cs) = phi.sin_cos();
    let num = -x1 * sn + x2 * cs;
    let s2 = s * s;
    Ok([
        (-sn * s - 2.0 * num * dx) / s2,
        (cs * s - 2.0 * num * dy) / s2,
    ])
}

/// Unvalidated five-parameter ellipse. Used inside iterative solvers where
/// the axis ordering and orientation range are not yet canonical.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseParams {
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
    pub xi: f64,
}

impl EllipseParams {
    pub fn area(&self) -> f64 {
        PI * self.a1 * self.a2
    }
}

/// A small elliptical anomaly strictly contained in the unit disc.
///
/// `a1 >= a2 > 0`; `xi` is the orientation of the `a1` axis, stored in
/// `[0, π)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EllipseParams", into = "EllipseParams")]
pub struct EllipseAnomaly {
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
    xi: f64,
}

impl EllipseAnomaly {
    pub fn new(b1: f64, b2: f64, a1: f64, a2: f64, xi: f64) -> Result<Self> {
        if ![b1, b2, a1, a2, xi].iter().all(|v| v.is_finite()) {
            return Err(EitError::InvalidAnomaly("non-finite parameter".into()));
        }
        if !(a2 > 0.0) {
            return Err(EitError::InvalidAnomaly(format!("semi-minor axis {a2} must be positive")));
        }
        if a1 < a2 {
            return Err(EitError::InvalidAnomaly(format!(
                "semi-major axis {a1} is shorter than semi-minor axis {a2}"
            )));
        }
        let radius = b1.hypot(b2);
        if radius >= 1.0 {
            return Err(EitError::InvalidAnomaly(format!(
                "centre ({b1}, {b2}) is not inside the unit disc"
            )));
        }
        if radius + a1 >= 1.0 {
            return Err(EitError::InvalidAnomaly(format!(
                "ellipse reaches the boundary: |b| + a1 = {}",
                radius + a1
            )));
        }
        let area = PI * a1 * a2;
        if area > SMALL_AREA_THRESHOLD {
            log::warn!("anomaly area {area:.4} exceeds the small-anomaly threshold {SMALL_AREA_THRESHOLD}");
        }
        Ok(Self { b1, b2, a1, a2, xi: xi.rem_euclid(PI) })
    }

    /// Orientation given in degrees.
    pub fn from_degrees(b1: f64, b2: f64, a1: f64, a2: f64, xi_deg: f64) -> Result<Self> {
        Self::new(b1, b2, a1, a2, xi_deg.to_radians())
    }

    pub fn circle(b1: f64, b2: f64, radius: f64) -> Result<Self> {
        Self::new(b1, b2, radius, radius, 0.0)
    }

    /// Builds an anomaly from raw parameters, swapping the axes (and turning
    /// the orientation by π/2) when `a2 > a1`.
    pub fn canonical(p: EllipseParams) -> Result<Self> {
        if p.a2 > p.a1 {
            Self::new(p.b1, p.b2, p.a2, p.a1, p.xi + PI / 2.0)
        } else {
            Self::new(p.b1, p.b2, p.a1, p.a2, p.xi)
        }
    }

    pub fn b1(&self) -> f64 {
        self.b1
    }
    pub fn b2(&self) -> f64 {
        self.b2
    }
    pub fn a1(&self) -> f64 {
        self.a1
    }
    pub fn a2(&self) -> f64 {
        self.a2
    }
    pub fn xi(&self) -> f64 {
        self.xi
    }
    pub fn center(&self) -> [f64; 2] {
        [self.b1, self.b2]
    }
    pub fn area(&self) -> f64 {
        PI * self.a1 * self.a2
    }
    pub fn params(&self) -> EllipseParams {
        EllipseParams { b1: self.b1, b2: self.b2, a1: self.a1, a2: self.a2, xi: self.xi }
    }
}

impl TryFrom<EllipseParams> for EllipseAnomaly {
    type Error = EitError;
    fn try_from(p: EllipseParams) -> Result<Self> {
        Self::new(p.b1, p.b2, p.a1, p.a2, p.xi)
    }
}

impl From<EllipseAnomaly> for EllipseParams {
    fn from(e: EllipseAnomaly) -> Self {
        e.params()
    }
}

/// `Ĩ = A·K(b; φ)`: the forward map with the second-order terms dropped.
pub fn forward_simplified(area: f64, b1: f64, b2: f64, phi: f64) -> Result<f64> {
    Ok(area * kernel_k(b1, b2, phi)?)
}

/// Quadratic-Taylor forward map over the ellipse.
pub fn forward_ellipse(e: &EllipseAnomaly, phi: f64) -> Result<f64> {
    forward_ellipse_params(&e.params(), phi)
}

/// `πa₁a₂ [K + ⅛ t₁ᵀ𝒦t₁ + ⅛ t₂ᵀ𝒦t₂]` with `t₁ = a₁(cos ξ, sin ξ)`,
/// `t₂ = a₂(−sin ξ, cos ξ)` and `𝒦` the kernel Hessian at the centre.
pub fn forward_ellipse_params(p: &EllipseParams, phi: f64) -> Result<f64> {
    let k = kernel_k(p.b1, p.b2, phi)?;
    let h = kernel_hessian(p.b1, p.b2, phi)?;
    let (s, c) = p.xi.sin_cos();
    let quad = |u: [f64; 2]| {
        h[0][0] * u[0] * u[0] + 2.0 * h[0][1] * u[0] * u[1] + h[1][1] * u[1] * u[1]
    };
    let t1 = [p.a1 * c, p.a1 * s];
    let t2 = [-p.a2 * s, p.a2 * c];
    Ok(PI * p.a1 * p.a2 * (k + 0.125 * quad(t1) + 0.125 * quad(t2)))
}

/// Orientation moments `(m₁, m₂)` with `M₁₁ = K²m₁`, `M₂₂ = K²m₂`, where
/// `M = Uᵀ𝒦U` is the Hessian in the ellipse frame.
pub fn orientation_moments(dx: f64, dy: f64, xi: f64) -> (f64, f64) {
    let (s, c) = xi.sin_cos();
    let p = 20.0 * dx * dx - 4.0 * dy * dy;
    let q = 48.0 * dx * dy;
    let r = -4.0 * dx * dx + 20.0 * dy * dy;
    (p * c * c + q * c * s + r * s * s, p * s * s - q * c * s + r * c * c)
}

/// Same map as [`forward_ellipse_params`], evaluated through the expanded
/// `K·πa₁a₂ + M₁₁(π/8)a₁³a₂ + M₂₂(π/8)a₁a₂³` form. Kept as an independent
/// algebraic route for cross-checking.
pub fn forward_ellipse_expanded(p: &EllipseParams, phi: f64) -> Result<f64> {
    let (dx, dy, s) = offsets(p.b1, p.b2, phi)?;
    let k = 1.0 / (s * s);
    let (m1, m2) = orientation_moments(dx, dy, p.xi);
    let k2 = k * k;
    Ok(k * PI * p.a1 * p.a2
        + k2 * m1 * PI / 8.0 * p.a1.powi(3) * p.a2
        + k2 * m2 * PI / 8.0 * p.a1 * p.a2.powi(3))
}

/// Polarization tensor of the ellipse for conductivity contrast `gamma`.
pub fn polarization_tensor(e: &EllipseAnomaly, gamma: f64) -> [[f64; 2]; 2] {
    let (a1, a2) = (e.a1, e.a2);
    let l1 = (a1 + a2) / (a1 + (1.0 + gamma) * a2);
    let l2 = (a1 + a2) / (a2 + (1.0 + gamma) * a1);
    let (s, c) = e.xi.sin_cos();
    // Qᵀ diag(l1, l2) Q with Q = [[c, s], [-s, c]].
    let scale = PI * a1 * a2;
    [
        [scale * (l1 * c * c + l2 * s * s), scale * (l1 - l2) * c * s],
        [scale * (l1 - l2) * c * s, scale * (l1 * s * s + l2 * c * c)],
    ]
}

/// Small-inclusion forward map `∇U₀(b)ᵀ M ∇U₀(b)`.
///
/// Normalised so that for `γ → 0` it reduces to `A·K(b)`, i.e. to
/// [`forward_simplified`]; the `εγ/π` prefactor of the asymptotic formula is
/// absorbed into that convention.
pub fn forward_polarization(e: &EllipseAnomaly, gamma: f64, phi: f64) -> Result<f64> {
    if !(gamma.abs() < 1.0) {
        return Err(EitError::InvalidParameter(format!("contrast gamma = {gamma} must satisfy |gamma| < 1")));
    }
    let g = dipole_potential_gradient(e.b1, e.b2, phi)?;
    let m = polarization_tensor(e, gamma);
    Ok(g[0] * (m[0][0] * g[0] + m[0][1] * g[1]) + g[1] * (m[1][0] * g[0] + m[1][1] * g[1]))
}

/// Ordered dipole angles (radians). Three angles for location/area
/// inversion, five for the full ellipse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DesignAngles(Vec<f64>);

impl DesignAngles {
    pub fn new(angles: Vec<f64>) -> Result<Self> {
        if angles.len() != 3 && angles.len() != 5 {
            return Err(EitError::InvalidDesign(format!(
                "expected 3 or 5 angles, got {}",
                angles.len()
            )));
        }
        if angles.iter().any(|a| !a.is_finite()) {
            return Err(EitError::InvalidDesign("non-finite angle".into()));
        }
        for i in 0..angles.len() {
            for j in i + 1..angles.len() {
                if wrap_angle(angles[i] - angles[j]).abs() <= ANGLE_TOLERANCE {
                    return Err(EitError::InvalidDesign(format!(
                        "angles {i} and {j} coincide modulo 2π"
                    )));
                }
            }
        }
        Ok(Self(angles))
    }

    pub fn from_degrees(degrees: &[f64]) -> Result<Self> {
        Self::new(degrees.iter().map(|d| d.to_radians()).collect())
    }

    pub fn angles(&self) -> &[f64] {
        &self.0
    }

    pub fn degrees(&self) -> Vec<f64> {
        self.0.iter().map(|a| a.to_degrees()).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Sub-design made of the angles at `idx`.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            let a = self.0.get(i).ok_or_else(|| {
                EitError::InvalidDesign(format!("index {i} out of range for {} angles", self.0.len()))
            })?;
            out.push(*a);
        }
        Self::new(out)
    }
}

impl TryFrom<Vec<f64>> for DesignAngles {
    type Error = EitError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<DesignAngles> for Vec<f64> {
    fn from(d: DesignAngles) -> Self {
        d.0
    }
}

/// Three-angle design `(φ − ψ, φ + ψ, φ)` centred on `φ` with half-spread `ψ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SymmetricDesign {
    pub phi: f64,
    pub psi: f64,
}

impl SymmetricDesign {
    pub fn new(phi: f64, psi: f64) -> Result<Self> {
        if !phi.is_finite() || !(psi > 0.0 && psi <= PI) {
            return Err(EitError::InvalidDesign(format!("half-spread psi = {psi} outside (0, π]")));
        }
        Ok(Self { phi, psi })
    }

    pub fn from_degrees(phi_deg: f64, psi_deg: f64) -> Result<Self> {
        Self::new(phi_deg.to_radians(), psi_deg.to_radians())
    }

    /// Expands to three distinct angles; fails when `ψ ≡ 0 (mod π)`.
    pub fn angles(&self) -> Result<DesignAngles> {
        DesignAngles::new(vec![self.phi - self.psi, self.phi + self.psi, self.phi])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// Fixed standard deviation `sigma`.
    Absolute,
    /// Standard deviation `sigma·|gᵢ|` per datum.
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub sigma: f64,
}

impl NoiseModel {
    pub fn new(kind: NoiseKind, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(EitError::InvalidParameter(format!("noise sigma = {sigma} must be nonnegative")));
        }
        Ok(Self { kind, sigma })
    }

    pub fn absolute(sigma: f64) -> Result<Self> {
        Self::new(NoiseKind::Absolute, sigma)
    }

    pub fn relative(sigma: f64) -> Result<Self> {
        Self::new(NoiseKind::Relative, sigma)
    }

    /// Standard deviation applied to a datum of value `g`.
    pub fn std_for(&self, g: f64) -> f64 {
        match self.kind {
            NoiseKind::Absolute => self.sigma,
            NoiseKind::Relative => self.sigma * g.abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MeasurementSetRaw {
    design: DesignAngles,
    values: Vec<f64>,
    #[serde(default)]
    noise: Option<NoiseModel>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    noise_l1: f64,
}

/// Per-angle data `gᵢ` together with the noise that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MeasurementSetRaw")]
pub struct MeasurementSet {
    pub design: DesignAngles,
    pub values: Vec<f64>,
    /// `None` for clean data.
    pub noise: Option<NoiseModel>,
    /// Seed of the noise draw; 0 for clean data.
    pub seed: u64,
    /// Realised relative noise `‖ε‖₁ / ‖g‖₁`.
    pub noise_l1: f64,
}

impl MeasurementSet {
    pub fn new(design: DesignAngles, values: Vec<f64>) -> Result<Self> {
        if values.len() != design.len() {
            return Err(EitError::InvalidData(format!(
                "{} values for {} angles",
                values.len(),
                design.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EitError::InvalidData("non-finite measurement".into()));
        }
        Ok(Self { design, values, noise: None, seed: 0, noise_l1: 0.0 })
    }

    /// Clean data from an arbitrary per-angle forward map.
    pub fn simulate(design: DesignAngles, forward: impl Fn(f64) -> Result<f64>) -> Result<Self> {
        let values = design.angles().iter().map(|&phi| forward(phi)).collect::<Result<Vec<_>>>()?;
        Self::new(design, values)
    }

    pub fn is_clean(&self) -> bool {
        self.noise.is_none()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let design = self.design.subset(idx)?;
        let values = idx.iter().map(|&i| self.values[i]).collect();
        Ok(Self { design, values, noise: self.noise, seed: self.seed, noise_l1: self.noise_l1 })
    }

    /// Multiplies every datum by `lambda`.
    pub fn scaled(&self, lambda: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= lambda);
        out
    }
}

impl TryFrom<MeasurementSetRaw> for MeasurementSet {
    type Error = EitError;
    fn try_from(raw: MeasurementSetRaw) -> Result<Self> {
        let mut m = Self::new(raw.design, raw.values)?;
        m.noise = raw.noise;
        m.seed = raw.seed;
        m.noise_l1 = raw.noise_l1;
        Ok(m)
    }
}

/// Perturbs clean data with Gaussian noise drawn from the stream `seed`.
pub fn apply_noise(clean: &MeasurementSet, noise: NoiseModel, seed: u64) -> MeasurementSet {
    debug_assert!(clean.is_clean(), "noise applied twice");
    let mut rng = rng::seeded(seed);
    let mut out = clean.clone();
    let mut abs_noise = 0.0;
    let mut abs_signal = 0.0;
    for v in out.values.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        let eps = noise.std_for(*v) * z;
        abs_noise += eps.abs();
        abs_signal += v.abs();
        *v += eps;
    }
    out.noise = Some(noise);
    out.seed = seed;
    out.noise_l1 = if abs_signal > 0.0 { abs_noise / abs_signal } else { 0.0 };
    out
}

/// Independent normal priors on `(A, b₁, b₂)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianPrior3 {
    pub mu_a: f64,
    pub sigma_a: f64,
    pub mu_b1: f64,
    pub sigma_b1: f64,
    pub mu_b2: f64,
    pub sigma_b2: f64,
}

impl Default for GaussianPrior3 {
    /// `A ~ N(0.01, 0.005²)`, `b₁ ~ N(0.4, 0.2²)`, `b₂ ~ N(0.3, 0.2²)`.
    fn default() -> Self {
        Self { mu_a: 0.01, sigma_a: 0.005, mu_b1: 0.4, sigma_b1: 0.2, mu_b2: 0.3, sigma_b2: 0.2 }
    }
}

/// Rejection cap for drawing from the truncated prior.
const MAX_PRIOR_REJECTIONS: usize = 100_000;

impl GaussianPrior3 {
    pub fn new(mu_a: f64, sigma_a: f64, mu_b1: f64, sigma_b1: f64, mu_b2: f64, sigma_b2: f64) -> Result<Self> {
        let p = Self { mu_a, sigma_a, mu_b1, sigma_b1, mu_b2, sigma_b2 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.mu_a, self.sigma_a, self.mu_b1, self.sigma_b1, self.mu_b2, self.sigma_b2];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(EitError::InvalidParameter("non-finite prior parameter".into()));
        }
        if !(self.sigma_a > 0.0 && self.sigma_b1 > 0.0 && self.sigma_b2 > 0.0) {
            return Err(EitError::InvalidParameter("prior standard deviations must be positive".into()));
        }
        Ok(())
    }

    pub fn means(&self) -> [f64; 3] {
        [self.mu_a, self.mu_b1, self.mu_b2]
    }

    pub fn sigmas(&self) -> [f64; 3] {
        [self.sigma_a, self.sigma_b1, self.sigma_b2]
    }

    /// Support of the truncated prior: positive area, centre in the open disc.
    pub fn in_support(theta: &[f64; 3]) -> bool {
        theta[0] > 0.0 && theta[1] * theta[1] + theta[2] * theta[2] < 1.0
    }

    /// Draws `(A, b₁, b₂)` from the prior restricted to [`Self::in_support`].
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<[f64; 3]> {
        for _ in 0..MAX_PRIOR_REJECTIONS {
            let z: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let theta = [
                self.mu_a + self.sigma_a * z[0],
                self.mu_b1 + self.sigma_b1 * z[1],
                self.mu_b2 + self.sigma_b2 * z[2],
            ];
            if Self::in_support(&theta) {
                return Ok(theta);
            }
        }
        Err(EitError::Degenerate("prior has negligible mass inside the admissible region".into()))
    }

    /// Unnormalised log density; `-∞` outside the support.
    pub fn log_density(&self, theta: &[f64; 3]) -> f64 {
        if !Self::in_support(theta) {
            return f64::NEG_INFINITY;
        }
        let z = |x: f64, mu: f64, s: f64| {
            let t = (x - mu) / s;
            -0.5 * t * t
        };
        z(theta[0], self.mu_a, self.sigma_a) + z(theta[1], self.mu_b1, self.sigma_b1) + z(theta[2], self.mu_b2, self.sigma_b2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn kernel_examples() {
        for phi in [0.0, 1.0, 2.5, -3.0] {
            assert!((kernel_k(0.0, 0.0, phi).unwrap() - 1.0).abs() < 1e-15);
        }
        assert!(rel(kernel_k(0.4, 0.3, 0.0).unwrap(), 1.0 / (0.45 * 0.45)) < 1e-14);
        assert!(rel(kernel_k(0.4, 0.3, 0.0).unwrap(), 4.938_271_604_938_271) < 1e-14);
        assert!(rel(kernel_k(0.5, 0.0, PI).unwrap(), 0.197_530_864_197_530_87) < 1e-14);
    }

    #[test]
    fn kernel_rejects_source_point() {
        assert!(matches!(kernel_k(1.0, 0.0, 0.0), Err(EitError::SourceSingularity { .. })));
        assert!(kernel_gradient(0.0, 1.0, PI / 2.0).is_err());
        assert!(kernel_hessian(-1.0, 0.0, PI).is_err());
        assert!(dipole_potential(0.0, -1.0, -PI / 2.0).is_err());
    }

    #[test]
    fn gradient_examples() {
        let g = kernel_gradient(0.0, 0.0, 0.0).unwrap();
        assert!((g[0] - 4.0).abs() < 1e-14 && g[1].abs() < 1e-14);
        let g = kernel_gradient(0.0, 0.0, PI / 2.0).unwrap();
        assert!(g[0].abs() < 1e-14 && (g[1] - 4.0).abs() < 1e-14);
        let g = kernel_gradient(0.4, 0.3, 0.0).unwrap();
        // S = 0.45, S³ = 0.091125
        assert!(rel(g[0], 2.4 / 0.091125) < 1e-13);
        assert!(rel(g[1], -1.2 / 0.091125) < 1e-13);
        assert!((g[0] - 26.337).abs() < 1e-3 && (g[1] + 13.168).abs() < 1e-3);
    }

    #[test]
    fn hessian_examples() {
        let h = kernel_hessian(0.0, 0.0, 0.0).unwrap();
        assert_eq!(h, [[20.0, 0.0], [0.0, -4.0]]);
        let h = kernel_hessian(0.0, 0.0, PI / 2.0).unwrap();
        assert!((h[0][0] + 4.0).abs() < 1e-13 && h[0][1].abs() < 1e-13 && (h[1][1] - 20.0).abs() < 1e-13);
        for (b1, b2, phi) in [(0.4, 0.3, 0.0), (-0.2, 0.7, 2.0), (0.1, -0.5, 4.0)] {
            let h = kernel_hessian(b1, b2, phi).unwrap();
            let s = squared_distance(b1, b2, phi);
            assert!(rel(h[0][0] + h[1][1], 16.0 / (s * s * s)) < 1e-13);
        }
    }

    #[test]
    fn simplified_examples() {
        for phi in [0.0, 1.3, 5.0] {
            assert!((forward_simplified(0.01, 0.0, 0.0, phi).unwrap() - 0.01).abs() < 1e-16);
        }
        assert!(rel(forward_simplified(0.01, 0.4, 0.3, 0.0).unwrap(), 0.049_382_716_049_382_71) < 1e-13);
        let one = forward_simplified(1.0, 0.3, -0.2, 0.7).unwrap();
        assert_eq!(forward_simplified(0.02, 0.3, -0.2, 0.7).unwrap(), 0.02 * one);
    }

    #[test]
    fn circle_forward_is_orientation_free() {
        let r = 0.05;
        let (b1, b2, phi) = (0.2, -0.3, 1.1);
        let s = squared_distance(b1, b2, phi);
        let expect = PI * r * r / (s * s) + PI / 8.0 * r.powi(4) * 16.0 / (s * s * s);
        for k in 0..32 {
            let xi = k as f64 * 0.37;
            let v = forward_ellipse_params(&EllipseParams { b1, b2, a1: r, a2: r, xi }, phi).unwrap();
            assert!(rel(v, expect) < 1e-13);
        }
    }

    #[test]
    fn two_algebraic_routes_agree() {
        let p = EllipseParams { b1: 0.4, b2: 0.5, a1: 0.08, a2: 0.04, xi: PI / 4.0 };
        for deg in [0.0, 90.0, 270.0, 180.0, 45.0, 123.0] {
            let phi = f64::to_radians(deg);
            let a = forward_ellipse_params(&p, phi).unwrap();
            let b = forward_ellipse_expanded(&p, phi).unwrap();
            assert!(rel(a, b) < 4.0 * f64::EPSILON * 4.0, "{deg}: {a} vs {b}");
        }
    }

    #[test]
    fn small_axes_reduce_to_simplified() {
        let (b1, b2, phi) = (0.3, 0.1, 0.5);
        let mut prev = f64::INFINITY;
        for scale in [1.0, 0.5, 0.25] {
            let a = 0.05 * scale;
            let p = EllipseParams { b1, b2, a1: a, a2: a / 2.0, xi: 0.3 };
            let diff = (forward_ellipse_params(&p, phi).unwrap() - forward_simplified(p.area(), b1, b2, phi).unwrap()).abs();
            // second-order term is O(A²)
            assert!(diff <= 50.0 * p.area() * p.area() / squared_distance(b1, b2, phi).powi(3));
            assert!(diff < prev);
            prev = diff;
        }
    }

    #[test]
    fn polarization_limits() {
        let e = EllipseAnomaly::circle(0.3, -0.2, 0.03).unwrap();
        for phi in [0.0, 1.0, 4.0] {
            let v = forward_polarization(&e, 0.0, phi).unwrap();
            assert!(rel(v, forward_simplified(e.area(), 0.3, -0.2, phi).unwrap()) < 1e-12);
        }
        let truth = EllipseAnomaly::from_degrees(0.4, 0.5, 0.08, 0.04, 45.0).unwrap();
        let gamma = 1e-3;
        for deg in [0.0, 90.0, 270.0, 180.0, 45.0] {
            let phi = f64::to_radians(deg);
            let v = forward_polarization(&truth, gamma, phi).unwrap();
            let s = forward_simplified(truth.area(), 0.4, 0.5, phi).unwrap();
            assert!(rel(v, s) <= f64::max(gamma, truth.a1().powi(2)) * 10.0);
        }
        let flipped = EllipseAnomaly::new(0.4, 0.5, 0.08, 0.04, truth.xi() + PI).unwrap();
        for phi in [0.2, 2.2] {
            assert!(rel(forward_polarization(&truth, 0.2, phi).unwrap(), forward_polarization(&flipped, 0.2, phi).unwrap()) < 1e-14);
        }
        assert!(forward_polarization(&truth, 1.0, 0.0).is_err());
    }

    #[test]
    fn dipole_potential_examples() {
        for phi in [0.0, 0.7, 3.0] {
            assert_eq!(dipole_potential(0.0, 0.0, phi).unwrap(), 0.0);
        }
        // reflection across the dipole axis flips the sign
        let phi: f64 = 0.6;
        let (s, c) = phi.sin_cos();
        for (x1, x2) in [(0.2, 0.5), (-0.4, 0.1), (0.3, -0.6)] {
            let d = x1 * c + x2 * s;
            let (r1, r2) = (2.0 * d * c - x1, 2.0 * d * s - x2);
            let u = dipole_potential(x1, x2, phi).unwrap();
            let v = dipole_potential(r1, r2, phi).unwrap();
            assert!((u + v).abs() < 1e-13);
        }
    }

    #[test]
    fn dipole_potential_gradient_matches_kernel() {
        let h = 1e-5;
        let (x1, x2, phi) = (0.4, 0.3, 0.0);
        let gx = (dipole_potential(x1 + h, x2, phi).unwrap() - dipole_potential(x1 - h, x2, phi).unwrap()) / (2.0 * h);
        let gy = (dipole_potential(x1, x2 + h, phi).unwrap() - dipole_potential(x1, x2 - h, phi).unwrap()) / (2.0 * h);
        let k = kernel_k(x1, x2, phi).unwrap();
        assert!((gx * gx + gy * gy - k).abs() < 1e-5);
        assert!((k - 4.938).abs() < 1e-3);
        let g = dipole_potential_gradient(x1, x2, phi).unwrap();
        assert!(rel(g[0] * g[0] + g[1] * g[1], k) < 1e-13);
    }

    #[test]
    fn anomaly_validation() {
        assert!(EllipseAnomaly::new(0.4, 0.5, 0.08, 0.04, 0.3).is_ok());
        assert!(EllipseAnomaly::new(0.9, 0.0, 0.2, 0.1, 0.0).is_err());
        assert!(EllipseAnomaly::new(0.0, 0.0, 0.04, 0.08, 0.0).is_err());
        assert!(EllipseAnomaly::new(0.0, 0.0, 0.04, 0.0, 0.0).is_err());
        assert!(EllipseAnomaly::new(1.0, 0.0, 0.0, 0.0, 0.0).is_err());
        // large but contained: allowed with a warning
        assert!(EllipseAnomaly::new(0.0, 0.0, 0.5, 0.4, 0.0).is_ok());
        let e = EllipseAnomaly::new(0.0, 0.0, 0.1, 0.05, 3.0 * PI / 2.0).unwrap();
        assert!((e.xi() - PI / 2.0).abs() < 1e-14);
        let c = EllipseAnomaly::canonical(EllipseParams { b1: 0.1, b2: 0.1, a1: 0.02, a2: 0.05, xi: 0.2 }).unwrap();
        assert_eq!((c.a1(), c.a2()), (0.05, 0.02));
        assert!((c.xi() - (0.2 + PI / 2.0)).abs() < 1e-14);
    }

    #[test]
    fn design_validation() {
        assert!(DesignAngles::from_degrees(&[0.0, 90.0, 210.0]).is_ok());
        assert!(DesignAngles::from_degrees(&[0.0, 360.0, 210.0]).is_err());
        assert!(DesignAngles::from_degrees(&[0.0, 90.0]).is_err());
        assert!(DesignAngles::from_degrees(&[0.0, 90.0, 270.0, 180.0, 45.0]).is_ok());
        let d = SymmetricDesign::from_degrees(36.3, 44.1).unwrap().angles().unwrap();
        let deg = d.degrees();
        assert!((deg[0] + 7.8).abs() < 1e-12 && (deg[1] - 80.4).abs() < 1e-12 && (deg[2] - 36.3).abs() < 1e-12);
        assert!(SymmetricDesign::new(0.3, PI).unwrap().angles().is_err());
        assert!(SymmetricDesign::new(0.3, 0.0).is_err());
        let parsed: std::result::Result<DesignAngles, _> = serde_json::from_str("[0.0, 0.0, 1.0]");
        assert!(parsed.is_err());
    }

    #[test]
    fn noise_is_identity_at_zero_and_deterministic() {
        let design = DesignAngles::from_degrees(&[0.0, 90.0, 210.0]).unwrap();
        let clean = MeasurementSet::simulate(design, |phi| forward_simplified(0.01, 0.4, 0.3, phi)).unwrap();
        let same = apply_noise(&clean, NoiseModel::relative(0.0).unwrap(), 9);
        assert_eq!(same.values, clean.values);
        assert_eq!(same.noise_l1, 0.0);
        let a = apply_noise(&clean, NoiseModel::absolute(1e-3).unwrap(), 42);
        let b = apply_noise(&clean, NoiseModel::absolute(1e-3).unwrap(), 42);
        assert_eq!(a, b);
        let c = apply_noise(&clean, NoiseModel::absolute(1e-3).unwrap(), 43);
        assert_ne!(a.values, c.values);
        assert!(a.noise_l1 > 0.0);
    }

    #[test]
    fn relative_noise_has_requested_spread() {
        let n = 100_000;
        let design = DesignAngles::from_degrees(&[0.0, 90.0, 210.0]).unwrap();
        let clean = MeasurementSet::simulate(design, |phi| forward_simplified(0.01, 0.4, 0.3, phi)).unwrap();
        let noise = NoiseModel::relative(0.01).unwrap();
        let mut ratios = Vec::with_capacity(n);
        for seed in 0..(n / 3 + 1) as u64 {
            let noisy = apply_noise(&clean, noise, seed);
            for (g, y) in clean.values.iter().zip(&noisy.values) {
                ratios.push((y - g) / g.abs());
            }
        }
        ratios.truncate(n);
        let mean = ratios.iter().sum::<f64>() / n as f64;
        let var = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let sd = var.sqrt();
        assert!((0.0099..=0.0101).contains(&sd), "sd = {sd}");
    }

    #[test]
    fn prior_sampling_respects_support() {
        let prior = GaussianPrior3::default();
        let mut rng = rng::seeded(3);
        for _ in 0..2000 {
            let t = prior.sample(&mut rng).unwrap();
            assert!(GaussianPrior3::in_support(&t));
        }
        assert_eq!(prior.log_density(&[-0.1, 0.0, 0.0]), f64::NEG_INFINITY);
        assert_eq!(prior.log_density(&[0.01, 0.4, 0.3]), 0.0);
        assert!(GaussianPrior3::new(0.01, 0.0, 0.4, 0.2, 0.3, 0.2).is_err());
        let far = GaussianPrior3::new(0.01, 0.001, 50.0, 0.01, 0.0, 0.01).unwrap();
        assert!(far.sample(&mut rng).is_err());
    }

    #[test]
    fn measurement_json_round_trip() {
        let design = DesignAngles::from_degrees(&[0.0, 90.0, 270.0, 180.0, 45.0]).unwrap();
        let e = EllipseAnomaly::from_degrees(0.4, 0.5, 0.08, 0.04, 45.0).unwrap();
        let clean = MeasurementSet::simulate(design, |phi| forward_ellipse(&e, phi)).unwrap();
        let noisy = apply_noise(&clean, NoiseModel::relative(1e-3).unwrap(), 5);
        let text = serde_json::to_string(&noisy).unwrap();
        let back: MeasurementSet = serde_json::from_str(&text).unwrap();
        assert_eq!(back, noisy);
        let bad = r#"{"design":[0.0,1.0,2.0],"values":[1.0,2.0]}"#;
        assert!(serde_json::from_str::<MeasurementSet>(bad).is_err());
        let text = serde_json::to_string(&e).unwrap();
        assert_eq!(serde_json::from_str::<EllipseAnomaly>(&text).unwrap(), e);
        assert!(serde_json::from_str::<EllipseAnomaly>(r#"{"b1":0.95,"b2":0,"a1":0.1,"a2":0.1,"xi":0}"#).is_err());
    }
}
