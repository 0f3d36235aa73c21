//! Browser bindings. Each exported function takes plain numbers and returns a
//! JSON string, so the page needs no generated type definitions. The same
//! functions are available natively through [`api`].

use wasm_bindgen::prelude::*;

pub mod api {
    use eit_dipole::geometry::invert_location_size;
    use eit_dipole::model::{apply_noise, dipole_potential, forward_ellipse, kernel_k};
    use eit_dipole::newton::{initial_guess, newton_solve, NewtonConfig};
    use eit_dipole::oed::{det_design_surface, DesignGrid};
    use eit_dipole::{DesignAngles, EllipseAnomaly, EitError, MeasurementSet, NoiseModel};
    use serde::Serialize;

    pub type ApiResult = Result<String, String>;

    fn to_json<T: Serialize>(v: &T) -> ApiResult {
        serde_json::to_string(v).map_err(|e| e.to_string())
    }

    fn err(e: EitError) -> String {
        e.to_string()
    }

    #[derive(Serialize)]
    pub struct FieldGrid {
        pub n: usize,
        /// Row-major over `x₂` then `x₁`, both from −1 to 1; null outside the disc.
        pub log10_k: Vec<Option<f64>>,
        pub u0: Vec<Option<f64>>,
    }

    /// Kernel and dipole potential on an `n × n` grid for a dipole at `phi_deg`.
    pub fn field_grid(phi_deg: f64, n: usize) -> ApiResult {
        if !(16..=400).contains(&n) {
            return Err(format!("resolution {n} must be between 16 and 400"));
        }
        let phi = phi_deg.to_radians();
        let coord = |k: usize| -1.0 + 2.0 * k as f64 / (n - 1) as f64;
        let mut g = FieldGrid { n, log10_k: Vec::with_capacity(n * n), u0: Vec::with_capacity(n * n) };
        for r in 0..n {
            for c in 0..n {
                let (x, y) = (coord(c), coord(r));
                let inside = x * x + y * y < 1.0;
                g.log10_k.push(inside.then(|| kernel_k(x, y, phi).ok().map(f64::log10)).flatten());
                g.u0.push(inside.then(|| dipole_potential(x, y, phi).ok()).flatten());
            }
        }
        to_json(&g)
    }

    /// Reciprocal condition number over symmetric designs for the prior point.
    pub fn det_surface(area: f64, b1: f64, b2: f64, n_phi: usize, n_psi: usize) -> ApiResult {
        let grid = DesignGrid::new(n_phi, n_psi).map_err(err)?;
        to_json(&det_design_surface(area, b1, b2, &grid).map_err(err)?)
    }

    #[derive(Serialize)]
    pub struct Recovery {
        pub angles_deg: Vec<f64>,
        pub data: Vec<f64>,
        pub noise_l1: f64,
        /// `(b₁, b₂, A)` from the first three angles.
        pub step1: [f64; 3],
        /// `(b₁, b₂, a₁, a₂, ξ in degrees)`.
        pub step2: [f64; 5],
        pub iterations: usize,
        pub termination: String,
    }

    /// Simulates five measurements of the ellipse with relative noise, then
    /// recovers it: centre and area from the first three angles, the full
    /// ellipse by Newton iteration.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_invert(b1: f64, b2: f64, a1: f64, a2: f64, xi_deg: f64, angles_deg: &[f64], noise: f64, seed: u64) -> ApiResult {
        let e = EllipseAnomaly::from_degrees(b1, b2, a1, a2, xi_deg).map_err(err)?;
        let design = DesignAngles::from_degrees(angles_deg).map_err(err)?;
        if design.len() != 5 {
            return Err("the recovery needs five angles".into());
        }
        let clean = MeasurementSet::simulate(design, |p| forward_ellipse(&e, p)).map_err(err)?;
        let m = if noise > 0.0 { apply_noise(&clean, NoiseModel::relative(noise).map_err(err)?, seed) } else { clean };
        let inv = invert_location_size(&m.subset(&[0, 1, 2]).map_err(err)?).map_err(err)?;
        let (x0, _) = initial_guess(&m, [0, 1, 2], 0.0).map_err(err)?;
        let (found, trace) = newton_solve(&m, &NewtonConfig::default(), x0).map_err(err)?;
        to_json(&Recovery {
            angles_deg: m.design.degrees(),
            data: m.values.clone(),
            noise_l1: m.noise_l1,
            step1: [inv.b1, inv.b2, inv.area],
            step2: [found.b1(), found.b2(), found.a1(), found.a2(), found.xi().to_degrees()],
            iterations: trace.iterations.len(),
            termination: serde_json::to_value(trace.termination)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
        })
    }
}

#[wasm_bindgen]
pub fn field_grid(phi_deg: f64, n: usize) -> Result<String, JsValue> {
    api::field_grid(phi_deg, n).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn det_surface(area: f64, b1: f64, b2: f64, n_phi: usize, n_psi: usize) -> Result<String, JsValue> {
    api::det_surface(area, b1, b2, n_phi, n_psi).map_err(|e| JsValue::from_str(&e))
}

/// `angles_deg` arrives as a `Float64Array`; `seed` as a plain number.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn forward_invert(
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
    xi_deg: f64,
    angles_deg: &[f64],
    noise: f64,
    seed: f64,
) -> Result<String, JsValue> {
    api::forward_invert(b1, b2, a1, a2, xi_deg, angles_deg, noise, seed as u64).map_err(|e| JsValue::from_str(&e))
}
