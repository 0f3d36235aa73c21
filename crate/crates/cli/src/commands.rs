//! Subcommand implementations. Each reads its sections of the run
//! configuration, calls into the library and writes its files to the sink.

use std::path::Path;

use eit_dipole::geometry::{invert_location_size, InversionResult};
use eit_dipole::model::{
    apply_noise, dipole_potential, forward_ellipse, forward_polarization, forward_simplified, kernel_k,
};
use eit_dipole::newton::{recovery_experiment, solve_with_restarts, NewtonTrace, RecoveryReport, Termination};
use eit_dipole::oed::{compare_designs, det_design_surface, mh_posterior, utility_surface, UtilitySurface};
use eit_dipole::oracle::{freeze_reference, integrate_kernel_over_ellipse, QuadratureSpec};
use eit_dipole::stability::{det_jacobian3_closed, jacobian2_and_bound, jacobian3, jacobian5, reciprocal_condition, three};
use eit_dipole::{DesignAngles, EllipseAnomaly, MeasurementSet};
use serde::Serialize;
use serde_json::json;

use crate::config::{FieldConfig, PointConfig, RunConfig};
use crate::output::{Cell, Format, Sink, Table};
use crate::CliError;

/// Default five dipole angles in degrees, the order used by the recovery experiment.
pub const FIVE_ANGLES: [f64; 5] = [0.0, 90.0, 270.0, 180.0, 45.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Simplified,
    Ellipse,
    Polarization,
}

pub struct Ctx<'a> {
    pub config: &'a RunConfig,
    pub seed: u64,
    pub format: Format,
    pub data: Option<&'a Path>,
}

impl Ctx<'_> {
    fn measurements(&self) -> Result<Option<MeasurementSet>, CliError> {
        let Some(path) = self.data else { return Ok(None) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read data {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| CliError::Config(format!("data {}: {e}", path.display())))
    }

    /// Data from `--data`, or simulated from `simulate` with the configured noise.
    fn data_or(&self, simulate: impl FnOnce() -> Result<MeasurementSet, CliError>) -> Result<MeasurementSet, CliError> {
        if let Some(m) = self.measurements()? {
            return Ok(m);
        }
        let clean = simulate()?;
        Ok(match self.config.noise_model()? {
            Some(noise) => apply_noise(&clean, noise, self.seed),
            None => clean,
        })
    }

    fn anomaly(&self) -> Result<EllipseAnomaly, CliError> {
        self.config.anomaly.unwrap_or_default().ellipse()
    }
}

#[derive(Serialize)]
struct EllipseOut {
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
    xi_deg: f64,
    area: f64,
}

impl From<&EllipseAnomaly> for EllipseOut {
    fn from(e: &EllipseAnomaly) -> Self {
        Self { b1: e.b1(), b2: e.b2(), a1: e.a1(), a2: e.a2(), xi_deg: e.xi().to_degrees(), area: e.area() }
    }
}

pub fn forward(ctx: &Ctx, sink: &mut Sink, models: &[Model], exact: bool) -> Result<(), CliError> {
    let e = ctx.anomaly()?;
    let design = ctx.config.design_or(&FIVE_ANGLES)?;
    let gamma = ctx.config.gamma.unwrap_or(0.0);
    let eval = |model: Model, phi: f64| match model {
        Model::Simplified => forward_simplified(e.area(), e.b1(), e.b2(), phi),
        Model::Ellipse => forward_ellipse(&e, phi),
        Model::Polarization => forward_polarization(&e, gamma, phi),
    };
    let mut columns = Vec::new();
    for &model in models {
        let values = design.angles().iter().map(|&p| eval(model, p)).collect::<Result<Vec<_>, _>>()?;
        columns.push((model, values));
    }
    let quadrature = ctx.config.quadrature.unwrap_or_default();
    let exact_values = if exact {
        Some(
            design
                .angles()
                .iter()
                .map(|&p| integrate_kernel_over_ellipse(&e, p, &quadrature).map(|r| r.value))
                .collect::<Result<Vec<_>, _>>()?,
        )
    } else {
        None
    };
    // The data file carries the exact values when requested, else the first model.
    let primary = exact_values.clone().unwrap_or_else(|| columns[0].1.clone());
    let data = ctx.data_or(|| Ok(MeasurementSet::new(design.clone(), primary.clone())?))?;

    match ctx.format {
        Format::Json => {
            let models: serde_json::Map<String, serde_json::Value> =
                columns.iter().map(|(m, v)| (json!(m).as_str().unwrap().to_string(), json!(v))).collect();
            sink.json(
                "forward.json",
                &json!({
                    "anomaly": EllipseOut::from(&e),
                    "gamma": gamma,
                    "angles_deg": design.degrees(),
                    "models": models,
                    "exact": exact_values,
                    "measurements": data,
                }),
            )?;
        }
        Format::Csv => {
            let mut header = vec!["phi_deg".to_string()];
            header.extend(columns.iter().map(|(m, _)| json!(m).as_str().unwrap().to_string()));
            if exact {
                header.push("exact".into());
            }
            header.push("data".into());
            let mut t = Table::new(&header.iter().map(String::as_str).collect::<Vec<_>>());
            for (k, d) in design.degrees().into_iter().enumerate() {
                let mut row = vec![Cell::Num(d)];
                row.extend(columns.iter().map(|(_, v)| Cell::Num(v[k])));
                if let Some(x) = &exact_values {
                    row.push(Cell::Num(x[k]));
                }
                row.push(Cell::Num(data.values[k]));
                t.push(row);
            }
            sink.csv("forward.csv", &t)?;
        }
    }
    sink.raw_json("measurements.json", &data)
}

#[derive(Serialize)]
struct FieldGrid {
    phi_deg: f64,
    resolution: usize,
    /// Shared coordinates of both axes.
    coords: Vec<f64>,
    /// `u0[row][col]` at `(coords[col], coords[row])`; null outside the disc.
    u0: Vec<Vec<Option<f64>>>,
    log10_k: Vec<Vec<Option<f64>>>,
    /// Interior cell with the largest kernel.
    peak: [f64; 2],
}

fn field_grid_values(f: &FieldConfig) -> Result<FieldGrid, CliError> {
    if f.resolution < 16 {
        return Err(CliError::Config(format!("field.resolution = {} must be at least 16", f.resolution)));
    }
    let n = f.resolution;
    let phi = f.phi_deg.to_radians();
    let coords: Vec<f64> = (0..n).map(|k| -1.0 + 2.0 * k as f64 / (n - 1) as f64).collect();
    let mut u0 = vec![vec![None; n]; n];
    let mut log10_k = vec![vec![None; n]; n];
    let mut peak = ([0.0, 0.0], f64::NEG_INFINITY);
    for (r, &y) in coords.iter().enumerate() {
        for (c, &x) in coords.iter().enumerate() {
            if x * x + y * y >= 1.0 {
                continue;
            }
            u0[r][c] = dipole_potential(x, y, phi).ok();
            if let Ok(k) = kernel_k(x, y, phi) {
                let lk = k.log10();
                log10_k[r][c] = Some(lk);
                if lk > peak.1 {
                    peak = ([x, y], lk);
                }
            }
        }
    }
    Ok(FieldGrid { phi_deg: f.phi_deg, resolution: n, coords, u0, log10_k, peak: peak.0 })
}

pub fn field_grid(ctx: &Ctx, sink: &mut Sink) -> Result<(), CliError> {
    let g = field_grid_values(&ctx.config.field.unwrap_or_default())?;
    match ctx.format {
        Format::Json => sink.json("field-grid.json", &g),
        Format::Csv => {
            let mut t = Table::new(&["x1", "x2", "u0", "log10_k"]);
            for (r, &y) in g.coords.iter().enumerate() {
                for (c, &x) in g.coords.iter().enumerate() {
                    t.push(vec![x.into(), y.into(), g.u0[r][c].into(), g.log10_k[r][c].into()]);
                }
            }
            sink.csv("field-grid.csv", &t)?;
            sink.json("field-grid.json", &json!({"phi_deg": g.phi_deg, "resolution": g.resolution, "peak": g.peak}))
        }
    }
}

fn three_angle_data(ctx: &Ctx, m: MeasurementSet) -> Result<MeasurementSet, CliError> {
    match m.design.len() {
        3 => Ok(m),
        _ => Ok(m.subset(&ctx.config.start.clone().unwrap_or_default().subset)?),
    }
}

pub fn invert(ctx: &Ctx, sink: &mut Sink) -> Result<(), CliError> {
    let e = ctx.anomaly()?;
    let design = ctx.config.design_or(&FIVE_ANGLES[..3])?;
    let m = ctx.data_or(|| Ok(MeasurementSet::simulate(design, |p| forward_ellipse(&e, p))?))?;
    let m3 = three_angle_data(ctx, m)?;
    let r = invert_location_size(&m3)?;
    match ctx.format {
        Format::Json => sink.json("invert.json", &json!({"measurements": m3, "inversion": r})),
        Format::Csv => {
            let mut t = Table::new(&["b1", "b2", "area", "residual", "snapped"]);
            t.push(vec![r.b1.into(), r.b2.into(), r.area.into(), r.residual.into(), Cell::Int(r.snapped as i64)]);
            sink.csv("invert.csv", &t)?;
            sink.json("invert.json", &json!({"measurements": m3, "inversion": r}))
        }
    }
}

pub fn stability(ctx: &Ctx, sink: &mut Sink) -> Result<(), CliError> {
    let p = ctx.config.point.unwrap_or_default();
    let design = ctx.config.design_or(&FIVE_ANGLES)?;
    let d3 = if design.len() == 3 { design.clone() } else { design.subset(&ctx.config.start.clone().unwrap_or_default().subset)? };
    let phi = three(&d3)?;
    let j3 = jacobian3(p.area, p.b1, p.b2, phi)?;
    let bound = jacobian2_and_bound(p.b1, p.b2, phi)?;
    let j5 = if design.len() == 5 {
        let e = ctx.anomaly()?;
        let j = jacobian5(&e, &design)?;
        Some(json!({
            "anomaly": EllipseOut::from(&e),
            "angles_deg": design.degrees(),
            "rows": j.rows,
            "column_norms": j.column_norms(),
            "reciprocal_condition": reciprocal_condition(&j.matrix()),
        }))
    } else {
        None
    };
    let result = json!({
        "point": p,
        "angles_deg": d3.degrees(),
        "jacobian3": j3.rows,
        "det_numeric": j3.det(),
        "det_closed": det_jacobian3_closed(p.area, p.b1, p.b2, phi),
        "reciprocal_condition": reciprocal_condition(&j3.dmatrix()),
        "bound": bound,
        "jacobian5": j5,
    });
    match ctx.format {
        Format::Json => sink.json("stability.json", &result),
        Format::Csv => {
            let mut t = Table::new(&["quantity", "value"]);
            t.push(vec!["det_numeric".into(), j3.det().into()]);
            t.push(vec!["det_closed".into(), det_jacobian3_closed(p.area, p.b1, p.b2, phi).into()]);
            t.push(vec!["reciprocal_condition".into(), reciprocal_condition(&j3.dmatrix()).into()]);
            t.push(vec!["inverse_norm1".into(), bound.inverse_norm1.into()]);
            t.push(vec!["bound".into(), bound.bound.into()]);
            t.push(vec!["tight_bound".into(), bound.tight_bound.into()]);
            sink.csv("stability.csv", &t)?;
            sink.json("stability.json", &result)
        }
    }
}

fn surface_summary(s: &UtilitySurface) -> serde_json::Value {
    json!({"grid": s.grid, "argmax": s.argmax, "argmin": s.argmin, "meta": s.meta})
}

fn write_surface(ctx: &Ctx, sink: &mut Sink, name: &str, s: &UtilitySurface) -> Result<(), CliError> {
    match ctx.format {
        Format::Json => sink.json(&format!("{name}.json"), s),
        Format::Csv => {
            let mut t = Table::new(&["phi_deg", "psi_deg", "value", "stderr"]);
            for i in 0..s.grid.n_phi {
                for j in 0..s.grid.n_psi {
                    let k = s.grid.index(i, j);
                    t.push(vec![
                        s.grid.phi(i).to_degrees().into(),
                        s.grid.psi(j).to_degrees().into(),
                        s.values[k].into(),
                        s.stderr[k].into(),
                    ]);
                }
            }
            sink.csv(&format!("{name}.csv"), &t)?;
            sink.json(&format!("{name}.json"), &surface_summary(s))
        }
    }
}

pub fn oed_bayes(ctx: &Ctx, sink: &mut Sink) -> Result<(), CliError> {
    let prior = ctx.config.prior.unwrap_or_default();
    let grid = ctx.config.grid.unwrap_or_default();
    let opts = ctx.config.mc.unwrap_or_default().surface();
    let s = utility_surface(&prior, &grid, &opts, ctx.seed)?;
    write_surface(ctx, sink, "oed-bayes", &s)
}

pub fn oed_det(ctx: &Ctx, sink: &mut Sink) -> Result<(), CliError> {
    let PointConfig { area, b1, b2 } = ctx.config.point.unwrap_or_default();
    let grid = ctx.config.grid.unwrap_or_default();
    let s = det_design_surface(area, b1, b2, &grid)?;
    write_surface(ctx, sink, "oed-det", &s)
}

pub fn posterior(ctx: &Ctx, sink: &mut Sink) -> Result<(), CliError> {
    let prior = ctx.config.prior.unwrap_or_default();
    let pc = ctx.config.posterior.unwrap_or_default();
    let design = match ctx.config.design.as_ref().map(|d| d.angles()).transpose()?.flatten() {
        Some(d) => d,
        None => eit_dipole::SymmetricDesign::from_degrees(36.3, 44.1)?.angles()?,
    };
    let [a, b1, b2] = pc.truth;
    let m = ctx.data_or(|| Ok(MeasurementSet::simulate(design, |p| forward_simplified(a, b1, b2, p))?))?;
    let chain = mh_posterior(&prior, &m, pc.sigma, &pc.mcmc, ctx.seed)?;
    let table: Vec<_> = ["A", "b1", "b2"]
        .iter()
        .zip(chain.summary)
        .map(|(name, s)| json!({"parameter": name, "mean": s.mean, "lower": s.lower, "upper": s.upper}))
        .collect();
    let summary = json!({
        "angles_deg": m.design.degrees(),
        "measurements": m,
        "sigma": pc.sigma,
        "acceptance_rate": chain.acceptance_rate,
        "burn_in": chain.burn_in,
        "proposal_scales": chain.proposal_scales,
        "table": table,
    });
    match ctx.format {
        Format::Json => {
            let mut full = summary;
            full["samples"] = json!(chain.samples);
            sink.json("posterior.json", &full)
        }
        Format::Csv => {
            let mut t = Table::new(&["A", "b1", "b2"]);
            for s in &chain.samples {
                t.push(s.iter().map(|&v| Cell::Num(v)).collect());
            }
            sink.csv("posterior.csv", &t)?;
            sink.json("posterior.json", &summary)
        }
    }
}

#[derive(Serialize)]
struct NewtonOut<'a> {
    measurements: &'a MeasurementSet,
    start: &'a InversionResult,
    ellipse: EllipseOut,
    trace: &'a NewtonTrace,
}

pub fn newton(ctx: &Ctx, sink: &mut Sink) -> Result<(), CliError> {
    let e = ctx.anomaly()?;
    let design: DesignAngles = ctx.config.design_or(&FIVE_ANGLES)?;
    let m = ctx.data_or(|| Ok(MeasurementSet::simulate(design, |p| forward_ellipse(&e, p))?))?;
    let cfg = ctx.config.newton.unwrap_or_default();
    let start = ctx.config.start.clone().unwrap_or_default();
    let (found, trace, inv) = solve_with_restarts(&m, &cfg, start.subset, &start.zetas)?;
    let out = NewtonOut { measurements: &m, start: &inv, ellipse: EllipseOut::from(&found), trace: &trace };
    if trace.termination == Termination::Diverged {
        return Err(CliError::Numerical {
            message: "Newton iteration diverged".into(),
            diagnostic: json!(out),
        });
    }
    match ctx.format {
        Format::Json => sink.json("newton.json", &out),
        Format::Csv => {
            let mut t = Table::new(&["iteration", "b1", "b2", "a1", "a2", "zeta", "residual", "rank", "step"]);
            for (k, it) in trace.iterations.iter().enumerate() {
                let mut row = vec![Cell::from(k)];
                row.extend(it.x.iter().map(|&v| Cell::Num(v)));
                row.extend([it.residual.into(), it.rank.into(), it.step.into()]);
                t.push(row);
            }
            sink.csv("newton.csv", &t)?;
            sink.json("newton.json", &out)
        }
    }
}

pub fn table2(ctx: &Ctx, sink: &mut Sink) -> Result<(), CliError> {
    let exp = ctx.config.table2.clone().unwrap_or_default().experiment(ctx.config.newton.unwrap_or_default());
    let report: RecoveryReport = recovery_experiment(&exp, ctx.seed)?;
    match ctx.format {
        Format::Json => sink.json("table2.json", &report),
        Format::Csv => {
            let mut t = Table::new(&[
                "level", "step1_b1", "step1_b2", "step1_area", "step2_b1", "step2_b2", "step2_a1", "step2_a2", "step2_xi_deg",
                "diverged",
            ]);
            for s in &report.summary {
                let mut row = vec![Cell::Num(s.level)];
                row.extend(s.median_step1.iter().chain(&s.median_step2).map(|&v| Cell::Num(v)));
                row.push(s.diverged.into());
                t.push(row);
            }
            sink.csv("table2.csv", &t)?;
            let mut runs = Table::new(&[
                "level", "seed", "noise_l1", "step1_b1", "step1_b2", "step1_area", "step2_b1", "step2_b2", "step2_a1", "step2_a2",
                "step2_xi_deg", "termination", "iterations", "residual",
            ]);
            for r in &report.runs {
                let mut row = vec![Cell::Num(r.level), Cell::Text(r.seed.to_string()), Cell::Num(r.noise_l1)];
                row.extend(r.step1.iter().chain(&r.step2).map(|&v| Cell::Num(v)));
                row.push(Cell::Text(json!(r.termination).as_str().unwrap_or_default().to_string()));
                row.extend([r.iterations.into(), r.residual.into()]);
                runs.push(row);
            }
            sink.csv("table2-runs.csv", &runs)?;
            sink.json("table2.json", &json!({"summary": report.summary}))
        }
    }
}

pub fn compare(ctx: &Ctx, sink: &mut Sink) -> Result<(), CliError> {
    let cfg = ctx.config.compare.clone().unwrap_or_default();
    let rows = compare_designs(&cfg, ctx.seed)?;
    match ctx.format {
        Format::Json => sink.json("compare-designs.json", &rows),
        Format::Csv => {
            let mut t = Table::new(&["mu_b1", "psi_bayes_deg", "psi_det_deg", "eig_max", "rcond_max"]);
            for r in &rows {
                t.push(vec![r.mu_b1.into(), r.psi_bayes_deg.into(), r.psi_det_deg.into(), r.eig_max.into(), r.rcond_max.into()]);
            }
            sink.csv("compare-designs.csv", &t)
        }
    }
}

pub fn oracle_freeze(ctx: &Ctx, sink: &mut Sink) -> Result<(), CliError> {
    let tol = ctx.config.quadrature.map_or(1e-10, |q: QuadratureSpec| q.tol);
    let frozen = freeze_reference(tol)?;
    match ctx.format {
        Format::Json => sink.json("oracle.json", &frozen),
        Format::Csv => {
            let mut t = Table::new(&["phi_deg", "quadrature", "taylor", "simplified"]);
            for (k, d) in frozen.angles_deg.iter().enumerate() {
                t.push(vec![(*d).into(), frozen.quadrature[k].into(), frozen.taylor[k].into(), frozen.simplified[k].into()]);
            }
            sink.csv("oracle.csv", &t)?;
            sink.json("oracle.json", &frozen)
        }
    }
}
