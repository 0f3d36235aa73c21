//! Five-parameter ellipse recovery by truncated pseudo-inverse Newton
//! iteration, started from the geometric three-measurement inversion.
//!
//! The unknowns are `x = (b₁, b₂, a₁, a₂, ζ)` with `ζ = sin ξ`; the update is
//! `x ← x − α J⁺(x) (I(x) − g)` where `J⁺` drops singular values below the
//! cutoff.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EitError, Result};
use crate::geometry::{invert_location_size, InversionResult};
use crate::model::{apply_noise, forward_ellipse_params, DesignAngles, EllipseAnomaly, EllipseParams, MeasurementSet, NoiseModel};
use crate::rng;
use crate::stability::jacobian5_params;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewtonConfig {
    /// Step length in `(0, 1]`.
    pub alpha: f64,
    /// Absolute residual tolerance; `None` means `1e-10·‖g‖`.
    pub tol: Option<f64>,
    pub max_iter: usize,
    /// Singular values below this are discarded.
    pub sv_cutoff: f64,
    /// Interpret `sv_cutoff` relative to the largest singular value.
    pub relative_cutoff: bool,
    /// Step halvings allowed to regain feasibility and descent.
    pub max_backtracks: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self { alpha: 0.5, tol: None, max_iter: 200, sv_cutoff: 1e-6, relative_cutoff: false, max_backtracks: 10 }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(EitError::InvalidParameter(format!("alpha = {} not in (0, 1]", self.alpha)));
        }
        if let Some(t) = self.tol {
            if !(t > 0.0) {
                return Err(EitError::InvalidParameter(format!("tol = {t} must be positive")));
            }
        }
        if self.max_iter == 0 {
            return Err(EitError::InvalidParameter("max_iter must be positive".into()));
        }
        if !(self.sv_cutoff > 0.0) {
            return Err(EitError::InvalidParameter(format!("sv_cutoff = {} must be positive", self.sv_cutoff)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIter,
    /// Residual stayed far above its starting value; the best iterate is returned.
    Diverged,
    /// No feasible step was found after all halvings.
    Stalled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Iteration {
    /// `(b₁, b₂, a₁, a₂, ζ)` at the start of the iteration.
    pub x: [f64; 5],
    pub residual: f64,
    /// Singular values kept by the pseudo-inverse.
    pub rank: usize,
    /// Step length actually taken after backtracking.
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewtonTrace {
    pub iterations: Vec<Iteration>,
    pub termination: Termination,
    /// Final iterate and its residual.
    pub x: [f64; 5],
    pub residual: f64,
    pub tol: f64,
}

/// `‖g − I(e)‖₂` over the measurement angles.
pub fn residual(m: &MeasurementSet, e: &EllipseAnomaly) -> Result<f64> {
    residual_params(m, &e.params())
}

fn residual_params(m: &MeasurementSet, p: &EllipseParams) -> Result<f64> {
    let mut sum = 0.0;
    for (&phi, &g) in m.design.angles().iter().zip(&m.values) {
        let d = g - forward_ellipse_params(p, phi)?;
        sum += d * d;
    }
    Ok(sum.sqrt())
}

fn params_of(x: &[f64; 5]) -> EllipseParams {
    EllipseParams { b1: x[0], b2: x[1], a1: x[2], a2: x[3], xi: x[4].asin() }
}

fn feasible(x: &[f64; 5]) -> bool {
    x.iter().all(|v| v.is_finite())
        && x[2] > 0.0
        && x[3] > 0.0
        && x[0].hypot(x[1]) + x[2].max(x[3]) < 1.0
        && x[4].abs() < 1.0
}

/// Moore–Penrose inverse with singular values below `cutoff` removed, and
/// the number kept.
pub fn truncated_pinv(j: &DMatrix<f64>, cutoff: f64) -> (DMatrix<f64>, usize) {
    let svd = j.clone().svd(true, true);
    let u = svd.u.expect("left singular vectors requested");
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut inv = DMatrix::zeros(j.ncols(), j.nrows());
    let mut rank = 0;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s >= cutoff && s > 0.0 {
            rank += 1;
            inv += v_t.row(k).transpose() * u.column(k).transpose() / s;
        }
    }
    (inv, rank)
}

/// Circle start `(b₁, b₂, √(A/π), √(A/π), ζ₀)` from three of the measurements.
pub fn initial_guess(m5: &MeasurementSet, subset: [usize; 3], zeta0: f64) -> Result<([f64; 5], InversionResult)> {
    if !(zeta0.abs() <= 1.0) {
        return Err(EitError::InvalidParameter(format!("zeta0 = {zeta0} not in [-1, 1]")));
    }
    if subset.iter().any(|&i| i >= m5.values.len()) {
        return Err(EitError::InvalidDesign(format!("subset {subset:?} out of bounds")));
    }
    let inv = invert_location_size(&m5.subset(&subset)?)?;
    let a = (inv.area / PI).sqrt();
    Ok(([inv.b1, inv.b2, a, a, zeta0], inv))
}

/// Runs the iteration from `x0` and returns the recovered ellipse in
/// canonical form. Of the two orientations `ξ` and `π − ξ` sharing `ζ`, the
/// one with the smaller residual is reported.
pub fn newton_solve(m5: &MeasurementSet, cfg: &NewtonConfig, x0: [f64; 5]) -> Result<(EllipseAnomaly, NewtonTrace)> {
    cfg.validate()?;
    if !feasible(&x0) {
        return Err(EitError::InvalidParameter(format!("initial point {x0:?} is infeasible")));
    }
    let angles = m5.design.angles();
    let g = DVector::from_column_slice(&m5.values);
    let tol = cfg.tol.unwrap_or(1e-10 * g.norm());

    let predict = |x: &[f64; 5]| -> Result<DVector<f64>> {
        let p = params_of(x);
        let v = angles.iter().map(|&phi| forward_ellipse_params(&p, phi)).collect::<Result<Vec<_>>>()?;
        Ok(DVector::from_vec(v))
    };

    let mut x = x0;
    let mut iterations = Vec::new();
    let mut best = (f64::INFINITY, x0);
    let mut above = 0;
    let mut e0 = None;
    let termination = loop {
        let r = predict(&x)? - &g;
        let e = r.norm();
        if e < best.0 {
            best = (e, x);
        }
        let e0 = *e0.get_or_insert(e);
        if e <= tol {
            iterations.push(Iteration { x, residual: e, rank: 0, step: 0.0 });
            break Termination::Converged;
        }
        above = if e > 10.0 * e0 { above + 1 } else { 0 };
        if above >= 5 {
            iterations.push(Iteration { x, residual: e, rank: 0, step: 0.0 });
            break Termination::Diverged;
        }
        if iterations.len() >= cfg.max_iter {
            iterations.push(Iteration { x, residual: e, rank: 0, step: 0.0 });
            break Termination::MaxIter;
        }

        let rows = jacobian5_params(&params_of(&x), angles)?;
        let j = DMatrix::from_fn(rows.len(), 5, |i, c| rows[i][c]);
        let cutoff = if cfg.relative_cutoff {
            cfg.sv_cutoff * j.clone().svd(false, false).singular_values.max()
        } else {
            cfg.sv_cutoff
        };
        let (pinv, rank) = truncated_pinv(&j, cutoff);
        let dx = pinv * r;

        // Halve until the step is feasible and does not raise the residual;
        // without a descent step, fall back to the longest feasible one.
        let mut t = cfg.alpha;
        let mut next = None;
        let mut fallback = None;
        for _ in 0..=cfg.max_backtracks {
            let cand: [f64; 5] = std::array::from_fn(|k| x[k] - t * dx[k]);
            if feasible(&cand) {
                if (predict(&cand)? - &g).norm() <= e {
                    next = Some((cand, t));
                    break;
                }
                fallback.get_or_insert((cand, t));
            }
            t *= 0.5;
        }
        let next = next.or(fallback);
        let t = next.map_or(0.0, |(_, t)| t);
        let next = next.map(|(c, _)| c);
        iterations.push(Iteration { x, residual: e, rank, step: t });
        match next {
            Some(n) => x = n,
            None => break Termination::Stalled,
        }
    };

    let (residual, x) = match termination {
        Termination::Diverged => best,
        _ => (iterations.last().map_or(f64::INFINITY, |it| it.residual), x),
    };

    let p = params_of(&x);
    let flipped = EllipseParams { xi: PI - p.xi, ..p };
    let chosen = if residual_params(m5, &flipped)? < residual_params(m5, &p)? { flipped } else { p };
    let ellipse = EllipseAnomaly::canonical(chosen)?;
    Ok((ellipse, NewtonTrace { iterations, termination, x, residual, tol }))
}

/// Solves from each `ζ₀` and keeps the result with the smallest residual.
pub fn solve_with_restarts(
    m5: &MeasurementSet,
    cfg: &NewtonConfig,
    subset: [usize; 3],
    zetas: &[f64],
) -> Result<(EllipseAnomaly, NewtonTrace, InversionResult)> {
    let mut best: Option<(EllipseAnomaly, NewtonTrace, InversionResult)> = None;
    for &z in zetas {
        let (x0, inv) = initial_guess(m5, subset, z)?;
        let (e, trace) = newton_solve(m5, cfg, x0)?;
        if best.as_ref().is_none_or(|b| trace.residual < b.1.residual) {
            best = Some((e, trace, inv));
        }
    }
    best.ok_or_else(|| EitError::InvalidParameter("no restart values given".into()))
}

/// Setup of the noisy five-angle recovery experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoveryExperiment {
    pub truth: EllipseParams,
    /// Measurement angles in degrees.
    pub angles_deg: Vec<f64>,
    /// Indices of the three angles used for the starting point.
    pub subset: [usize; 3],
    /// Target mean relative noise levels.
    pub levels: Vec<f64>,
    pub seeds_per_level: usize,
    pub zeta0: f64,
    pub newton: NewtonConfig,
}

impl Default for RecoveryExperiment {
    fn default() -> Self {
        Self {
            truth: EllipseParams { b1: 0.4, b2: 0.5, a1: 0.08, a2: 0.04, xi: PI / 4.0 },
            angles_deg: vec![0.0, 90.0, 270.0, 180.0, 45.0],
            subset: [0, 1, 2],
            levels: vec![7.5e-4, 1.5e-3, 3.6e-3, 1.2e-2, 1.7e-2],
            seeds_per_level: 5,
            zeta0: 0.0,
            newton: NewtonConfig::default(),
        }
    }
}

/// Relative noise whose expected `‖ε‖₁/‖g‖₁` equals `level`:
/// `E|σz| = σ√(2/π)` for standard normal `z`.
pub fn relative_noise_for_level(level: f64) -> Result<NoiseModel> {
    NoiseModel::relative(level * (PI / 2.0).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRun {
    pub level: f64,
    pub seed: u64,
    /// Realised `‖ε‖₁/‖g‖₁`.
    pub noise_l1: f64,
    pub data: MeasurementSet,
    /// `(b₁, b₂, A)` from the three-angle inversion.
    pub step1: [f64; 3],
    /// `(b₁, b₂, a₁, a₂, ξ in degrees)` after Newton.
    pub step2: [f64; 5],
    pub termination: Termination,
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub level: f64,
    pub median_step1: [f64; 3],
    pub median_step2: [f64; 5],
    pub diverged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub runs: Vec<RecoveryRun>,
    pub summary: Vec<LevelSummary>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Noise seed for run `run` at level index `level` under `master`.
pub fn run_seed(master: u64, level: usize, run: usize) -> u64 {
    rng::substream(master, ((level as u64) << 32) | run as u64).random()
}

/// Regenerates the recovery table: for every level and seed, noisy data,
/// the three-angle start and the Newton result, plus per-level medians.
pub fn recovery_experiment(cfg: &RecoveryExperiment, master_seed: u64) -> Result<RecoveryReport> {
    let truth = EllipseAnomaly::try_from(cfg.truth)?;
    let design = DesignAngles::from_degrees(&cfg.angles_deg)?;
    let clean = MeasurementSet::simulate(design, |phi| crate::model::forward_ellipse(&truth, phi))?;
    let jobs: Vec<(usize, usize)> =
        (0..cfg.levels.len()).flat_map(|l| (0..cfg.seeds_per_level).map(move |s| (l, s))).collect();
    let runs = jobs
        .par_iter()
        .map(|&(l, s)| -> Result<RecoveryRun> {
            let level = cfg.levels[l];
            let seed = run_seed(master_seed, l, s);
            let data = apply_noise(&clean, relative_noise_for_level(level)?, seed);
            let (x0, inv) = initial_guess(&data, cfg.subset, cfg.zeta0)?;
            let (e, trace) = newton_solve(&data, &cfg.newton, x0)?;
            Ok(RecoveryRun {
                level,
                seed,
                noise_l1: data.noise_l1,
                step1: [inv.b1, inv.b2, inv.area],
                step2: [e.b1(), e.b2(), e.a1(), e.a2(), e.xi().to_degrees()],
                termination: trace.termination,
                iterations: trace.iterations.len() - 1,
                residual: trace.residual,
                data,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let summary = cfg
        .levels
        .iter()
        .map(|&level| {
            let at: Vec<&RecoveryRun> = runs.iter().filter(|r| r.level == level).collect();
            LevelSummary {
                level,
                median_step1: std::array::from_fn(|k| median(at.iter().map(|r| r.step1[k]).collect())),
                median_step2: std::array::from_fn(|k| median(at.iter().map(|r| r.step2[k]).collect())),
                diverged: at.iter().filter(|r| r.termination == Termination::Diverged).count(),
            }
        })
        .collect();
    Ok(RecoveryReport { runs, summary })
}
