use rayon::prelude::*;

use super::config::{HamiltonianKind, Sampling, ScenarioConfig};
use super::output::{fmt_num, CsvTable};
use crate::dynamics::{
    lab_moments, propagate_driven_with, propagate_static, run_ensemble, uniform_times, DdDrive, EnsembleScenario,
    SpinMoments, StepPolicy, TrajectoryMoments,
};
use crate::hamiltonians::{
    build_dr, build_oat, build_tat, dd_residual, AveragedKind, ControlParams,
};
use crate::noise::OuParams;
use crate::spin::{build_collective_operators, CollectiveOperators, Operator, PureState, SpinSystem};
use crate::squeezing::{refine_minimum, xi_r_squared, xi_s_squared, MinSqueezing};
use crate::{Error, Result};

/// Process exit statuses used by the command-line front end.
pub mod exit {
    pub const OK: u8 = 0;
    pub const USAGE: u8 = 2;
    pub const NUMERIC: u8 = 3;
    pub const IO: u8 = 4;
    /// `verify-dd` ran but an expected-pass pair failed.
    pub const CHECK_FAILED: u8 = 5;
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io(_) => exit::IO,
        Error::Trajectory { source, .. } => exit_code(source),
        e if e.is_usage() => exit::USAGE,
        _ => exit::NUMERIC,
    }
}

/// Absolute residual bound for a decoupling pair to count as passing.
pub const DD_RESIDUAL_TOL: f64 = 1e-8;

/// A pair that violates first-order decoupling is confirmed when some
/// residual reaches this fraction of the corresponding `||J_k||_F`.
pub const DD_VIOLATION_FRACTION: f64 = 0.1;

/// Refinement samples around the coarse grid minimum.
const FINE_POINTS: usize = 65;

/// Smallest drop below `xi_S^2(0)` that counts as squeezing in a scan.
const NO_SQUEEZING_MARGIN: f64 = 1e-9;

/// Window doublings allowed before a scan gives up.
const MAX_DOUBLINGS: usize = 12;

fn static_hamiltonian(kind: HamiltonianKind, ops: &CollectiveOperators<f64>, chi: f64) -> Result<Operator<f64>> {
    match kind {
        HamiltonianKind::Oat => Ok(build_oat(ops, chi)),
        HamiltonianKind::Tat => Ok(build_tat(ops, chi)),
        HamiltonianKind::DrAveraged => Ok(build_dr(ops, chi)),
        HamiltonianKind::DrivenDd => Err(Error::Usage(
            "driven-dd is time dependent; expected oat, tat or dr-averaged".into(),
        )),
    }
}

/// `xi_S^2`, or NaN where the mean spin is too short to define a direction.
fn xi_or_nan(m: &SpinMoments<f64>, n_spins: u32) -> Result<f64> {
    match xi_s_squared(m, n_spins) {
        Ok(x) => Ok(x),
        Err(Error::DegenerateDirection { .. }) => Ok(f64::NAN),
        Err(e) => Err(e),
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    let step = (b - a) / (n - 1) as f64;
    (0..n).map(|k| if k == n - 1 { b } else { a + k as f64 * step }).collect()
}

/// Result of a static-Hamiltonian minimum search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanResult {
    pub min: MinSqueezing<f64>,
    /// Final coarse window `[0, window]`.
    pub window: f64,
}

/// Global minimum of `xi_S^2(t)` for evolution of `|J,-J>` under `h` on
/// `[0, window]`.
///
/// A coarse grid of `points` samples brackets the minimum, a finer grid
/// over the bracketing interval narrows it, and a parabola through the best
/// fine samples gives the result. The window doubles while the coarse
/// minimum sits on its right edge.
pub fn scan_minimum(h: &Operator<f64>, sys: &SpinSystem, window: f64, points: usize) -> Result<ScanResult> {
    if points < 3 || !(window > 0.0) {
        return Err(Error::InvalidParams(format!(
            "scan needs >= 3 points and a positive window (points = {points}, window = {window})"
        )));
    }
    let eig = h.eigh()?;
    let coeffs = eig.to_eigenbasis(&PureState::spin_down(sys))?;
    let n = sys.n_spins();
    let sample = |times: &[f64]| -> Result<Vec<f64>> {
        times
            .par_iter()
            .map(|&t| xi_or_nan(&SpinMoments::of_state(&eig.from_eigenbasis(&coeffs, t))?, n))
            .collect()
    };
    let mut window = window;
    for _ in 0..=MAX_DOUBLINGS {
        let times = linspace(0.0, window, points);
        let values = sample(&times)?;
        let coarse = refine_minimum(&times, &values)?;
        if coarse.index == 0 || coarse.xi_min > values[0] - NO_SQUEEZING_MARGIN {
            return Err(Error::Search("no squeezing: xi_S^2 never drops below its initial value".into()));
        }
        if coarse.at_boundary {
            window *= 2.0;
            continue;
        }
        let fine_times = linspace(times[coarse.index - 1], times[coarse.index + 1], FINE_POINTS);
        let mut min = refine_minimum(&fine_times, &sample(&fine_times)?)?;
        min.at_boundary = false;
        return Ok(ScanResult { min, window });
    }
    Err(Error::Search(format!(
        "minimum still on the window edge after {MAX_DOUBLINGS} doublings (window = {window})"
    )))
}

/// Optimal squeezing time of `(chi/4)(J_x^2 + J_x J_y + J_y J_x)` for `N`
/// spins.
pub fn optimal_dr_time(sys: &SpinSystem, chi: f64) -> Result<f64> {
    let ops = build_collective_operators(sys);
    let h = build_dr(&ops, chi);
    let seed = 5.0 / (chi.abs() * sys.n_spins() as f64);
    Ok(scan_minimum(&h, sys, seed, 400)?.min.t_min)
}

/// Control parameters of a config, with `t_c = t_min / n_cyc`.
pub fn resolve_control(config: &ScenarioConfig) -> Result<Option<ControlParams<f64>>> {
    let Some(c) = &config.control else {
        return Ok(None);
    };
    let t_min = match c.t_min {
        Some(t) => t,
        None => optimal_dr_time(&SpinSystem::new(config.n_spins.into())?, config.chi)?,
    };
    ControlParams::new(config.chi, c.n_x, c.n_y, t_min / f64::from(c.n_cyc)).map(Some)
}

fn series_columns() -> [&'static str; 7] {
    ["t", "xi_s_sq", "xi_r_sq", "mean_spin_len", "jx", "jy", "jz"]
}

fn series_row(t: f64, m: &SpinMoments<f64>, n_spins: u32) -> Result<Vec<String>> {
    let xi_s = xi_or_nan(m, n_spins)?;
    let xi_r = if xi_s.is_nan() {
        f64::NAN
    } else {
        xi_r_squared(m, n_spins)?
    };
    Ok(vec![
        fmt_num(t),
        fmt_num(xi_s),
        fmt_num(xi_r),
        fmt_num(m.mean_spin_length()),
        fmt_num(m.mean[0]),
        fmt_num(m.mean[1]),
        fmt_num(m.mean[2]),
    ])
}

fn header(command: &str, config: &ScenarioConfig, control: Option<&ControlParams<f64>>) -> CsvTable {
    let mut table = CsvTable::new(command, &series_columns());
    table.echo_config(&config.to_toml_string());
    if let Some(p) = control {
        table.comment(format!("t_c = {}", fmt_num(p.t_c())));
    }
    table
}

fn policy(config: &ScenarioConfig) -> Result<StepPolicy<f64>> {
    StepPolicy::new(config.time.substeps_per_period, config.time.dt)
}

/// Moments along the trajectory a config describes, without noise.
pub fn evolve_trajectory(config: &ScenarioConfig) -> Result<TrajectoryMoments<f64>> {
    config.validate()?;
    let control = resolve_control(config)?;
    evolve_with(config, control.as_ref())
}

fn evolve_with(config: &ScenarioConfig, control: Option<&ControlParams<f64>>) -> Result<TrajectoryMoments<f64>> {
    let sys = SpinSystem::new(config.n_spins.into())?;
    let ops = build_collective_operators(&sys);
    let t_end = config.time.t_end;
    let stroboscopic = config.time.sampling == Sampling::Stroboscopic;
    if stroboscopic && control.is_none() {
        return Err(Error::Config("stroboscopic sampling needs a [control] table".into()));
    }
    if config.hamiltonian == HamiltonianKind::DrivenDd {
        let params = *control.expect("validated");
        let drive = DdDrive::new(params, &ops);
        let policy = policy(config)?;
        let k = policy.substeps_per_period();
        let mut out = TrajectoryMoments {
            times: Vec::new(),
            moments: Vec::new(),
        };
        propagate_driven_with(&drive, &PureState::spin_down(&sys), t_end, &policy, |step, t, psi| {
            if !stroboscopic || step % k == 0 {
                out.times.push(t);
                out.moments.push(lab_moments(&drive, t, psi)?);
            }
            Ok(())
        })?;
        return Ok(out);
    }
    let h = static_hamiltonian(config.hamiltonian, &ops, config.chi)?;
    let times = match control {
        Some(p) if stroboscopic => uniform_times(t_end, p.t_c())?,
        _ => uniform_times(t_end, config.time.dt)?,
    };
    propagate_static(&h, &PureState::spin_down(&sys), &times)
}

/// Noiseless time series: `t, xi_s_sq, xi_r_sq, mean_spin_len, jx, jy, jz`.
pub fn cmd_evolve(config: &ScenarioConfig) -> Result<CsvTable> {
    config.validate()?;
    let control = resolve_control(config)?;
    let traj = evolve_with(config, control.as_ref())?;
    let mut table = header("evolve", config, control.as_ref());
    for (t, m) in traj.times.iter().zip(&traj.moments) {
        table.push(series_row(*t, m, config.n_spins)?);
    }
    Ok(table)
}

/// Noise-averaged time series with the same columns as [`cmd_evolve`].
///
/// `driven-dd` runs the control field plus noise; `oat` runs the bare
/// one-axis twist plus noise. Both step on `t_c / K` when a control block is
/// present and on `time.dt` otherwise.
pub fn cmd_noise_ensemble(config: &ScenarioConfig) -> Result<CsvTable> {
    config.validate()?;
    let noise_cfg = config
        .noise
        .as_ref()
        .ok_or_else(|| Error::Usage("noise-ensemble needs a [noise] table".into()))?;
    let dd_enabled = match config.hamiltonian {
        HamiltonianKind::DrivenDd => true,
        HamiltonianKind::Oat => false,
        other => {
            return Err(Error::Config(format!(
                "noise-ensemble runs oat or driven-dd, not {other}"
            )))
        }
    };
    let control = resolve_control(config)?;
    let policy = policy(config)?;
    let grid_control = match control {
        Some(p) => p,
        None => ControlParams::new(
            config.chi,
            2,
            1,
            config.time.dt * policy.substeps_per_period() as f64,
        )?,
    };
    let sys = SpinSystem::new(config.n_spins.into())?;
    let scenario = EnsembleScenario {
        ops: build_collective_operators(&sys),
        control: grid_control,
        dd_enabled,
        noise: OuParams::new(noise_cfg.alpha, noise_cfg.sigma_sq)?,
        t_end: config.time.t_end,
    };
    let out = run_ensemble(
        &scenario,
        noise_cfg.n_paths,
        noise_cfg.master_seed,
        &policy,
        noise_cfg.reduction.into(),
    )?;

    let mut table = header("noise-ensemble", config, control.as_ref());
    table.comment(format!("n_paths = {}", out.n_paths));
    table.comment(format!("master_seed = {}", noise_cfg.master_seed));
    if out.mean_xi_s.is_some() {
        table.columns.push("xi_s_sq_path_mean".into());
    }
    let stride = if config.time.sampling == Sampling::Stroboscopic {
        if control.is_none() {
            return Err(Error::Config("stroboscopic sampling needs a [control] table".into()));
        }
        policy.substeps_per_period()
    } else {
        1
    };
    let traj = &out.moments;
    for i in (0..traj.len()).step_by(stride) {
        let mut row = series_row(traj.times[i], &traj.moments[i], config.n_spins)?;
        if let Some(xi) = &out.mean_xi_s {
            row.push(fmt_num(xi[i]));
        }
        table.push(row);
    }
    Ok(table)
}

/// One line of the `verify-dd` report.
#[derive(Clone, Debug, PartialEq)]
pub struct DdCheck {
    pub n_x: i32,
    pub n_y: i32,
    pub residuals: [f64; 3],
    /// `||J_k||_F`, the scale the residuals are compared against.
    pub norms: [f64; 3],
    pub kind: AveragedKind,
    /// First-order decoupling is expected, i.e. `|n_x| != |n_y|`.
    pub expected_pass: bool,
    /// The outcome agrees with the expectation.
    pub ok: bool,
}

impl DdCheck {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().cloned().fold(0.0, f64::max)
    }

    pub fn status(&self) -> &'static str {
        match (self.expected_pass, self.ok) {
            (true, true) => "pass",
            (true, false) => "FAIL",
            (false, true) => "expected-fail",
            (false, false) => "unexpected-pass",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DdReport {
    pub n_spins: u32,
    pub checks: Vec<DdCheck>,
}

impl DdReport {
    /// Every pair expected to decouple does.
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| !c.expected_pass || c.ok)
    }

    pub fn table(&self, config: &ScenarioConfig) -> CsvTable {
        let mut t = CsvTable::new(
            "verify-dd",
            &["n_x", "n_y", "residual_x", "residual_y", "residual_z", "averaged", "expected", "status"],
        );
        t.echo_config(&config.to_toml_string());
        t.comment(format!("n_spins = {}", self.n_spins));
        t.comment(format!("pass: every residual < {}", fmt_num(DD_RESIDUAL_TOL)));
        for c in &self.checks {
            t.push(vec![
                c.n_x.to_string(),
                c.n_y.to_string(),
                fmt_num(c.residuals[0]),
                fmt_num(c.residuals[1]),
                fmt_num(c.residuals[2]),
                c.kind.to_string(),
                if c.expected_pass { "pass" } else { "fail" }.into(),
                c.status().into(),
            ]);
        }
        t
    }
}

/// Period-averaged control-frame residual of `J_x, J_y, J_z` for every pair
/// in `verify_dd.pairs`.
///
/// Pairs with `|n_x| != |n_y|` must have every residual below
/// [`DD_RESIDUAL_TOL`]. Pairs with `|n_x| = |n_y|` are reported as expected
/// failures when some residual reaches [`DD_VIOLATION_FRACTION`] of
/// `||J_k||_F`.
pub fn cmd_verify_dd(config: &ScenarioConfig) -> Result<DdReport> {
    let v = &config.verify_dd;
    if v.pairs.is_empty() {
        return Err(Error::Usage("verify-dd needs at least one (n_x, n_y) pair".into()));
    }
    if let Some(p) = v.pairs.iter().find(|p| p[0] == 0 || p[1] == 0) {
        return Err(Error::Usage(format!("windings must be nonzero, got ({}, {})", p[0], p[1])));
    }
    let sys = SpinSystem::new(v.n_spins.into())?;
    let ops = build_collective_operators(&sys);
    let norms = [0, 1, 2].map(|k| ops.get(k).frobenius_norm());
    let checks = v
        .pairs
        .par_iter()
        .map(|&[n_x, n_y]| {
            let params = ControlParams::diagnostic(config.chi, n_x, n_y, 1.0)?;
            let residuals = dd_residual(&params, &ops)?;
            let expected_pass = params.satisfies_first_order_dd();
            let ok = if expected_pass {
                residuals.iter().all(|r| *r < DD_RESIDUAL_TOL)
            } else {
                (0..3).any(|k| residuals[k] >= DD_VIOLATION_FRACTION * norms[k])
            };
            Ok(DdCheck {
                n_x,
                n_y,
                residuals,
                norms,
                kind: params.averaged_kind(),
                expected_pass,
                ok,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DdReport {
        n_spins: v.n_spins,
        checks,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalingRow {
    pub hamiltonian: HamiltonianKind,
    pub n_spins: u32,
    pub xi_min: f64,
    /// `10 log10(xi_min)`.
    pub xi_min_db: f64,
    pub t_min: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingReport {
    /// Grouped by Hamiltonian, each group in `n_values` order.
    pub rows: Vec<ScalingRow>,
    /// Least-squares slope of `ln xi_min` against `ln N`.
    pub slopes: Vec<(HamiltonianKind, f64)>,
}

impl ScalingReport {
    pub fn slope(&self, kind: HamiltonianKind) -> Option<f64> {
        self.slopes.iter().find(|(k, _)| *k == kind).map(|(_, s)| *s)
    }

    pub fn row(&self, kind: HamiltonianKind, n_spins: u32) -> Option<&ScalingRow> {
        self.rows.iter().find(|r| r.hamiltonian == kind && r.n_spins == n_spins)
    }

    pub fn table(&self, config: &ScenarioConfig) -> CsvTable {
        let mut t = CsvTable::new("scaling", &["hamiltonian", "n_spins", "xi_min", "xi_min_db", "t_min"]);
        t.echo_config(&config.to_toml_string());
        for r in &self.rows {
            t.push(vec![
                r.hamiltonian.to_string(),
                r.n_spins.to_string(),
                fmt_num(r.xi_min),
                fmt_num(r.xi_min_db),
                fmt_num(r.t_min),
            ]);
        }
        for (k, s) in &self.slopes {
            t.trailer.push(format!("slope {k} = {}", fmt_num(*s)));
        }
        t
    }
}

/// Ordinary least-squares slope of `y` against `x`.
pub fn least_squares_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn scaling_series(kind: HamiltonianKind, config: &ScenarioConfig) -> Result<Vec<ScalingRow>> {
    let mut rows: Vec<ScalingRow> = Vec::with_capacity(config.scaling.n_values.len());
    for &n in &config.scaling.n_values {
        let sys = SpinSystem::new(n.into())?;
        let ops = build_collective_operators(&sys);
        let h = static_hamiltonian(kind, &ops, config.chi)?;
        let window = match rows.last() {
            Some(prev) => 5.0 * prev.t_min * f64::from(prev.n_spins) / f64::from(n),
            None => 5.0 / (config.chi.abs() * f64::from(n)),
        };
        let min = scan_minimum(&h, &sys, window, config.scaling.grid_points)?.min;
        if !(min.xi_min > 0.0) {
            return Err(Error::Search(format!("non-positive xi_min {} for {kind}, N = {n}", min.xi_min)));
        }
        rows.push(ScalingRow {
            hamiltonian: kind,
            n_spins: n,
            xi_min: min.xi_min,
            xi_min_db: 10.0 * min.xi_min.log10(),
            t_min: min.t_min,
        });
    }
    Ok(rows)
}

/// Minimum squeezing against `N` for each static Hamiltonian, with the
/// fitted log-log slope.
pub fn cmd_scaling(config: &ScenarioConfig) -> Result<ScalingReport> {
    let s = &config.scaling;
    if s.n_values.len() < 4 {
        return Err(Error::Usage(format!(
            "scaling fit needs at least 4 values of N, got {}",
            s.n_values.len()
        )));
    }
    if s.hamiltonians.is_empty() {
        return Err(Error::Usage("scaling needs at least one hamiltonian".into()));
    }
    if s.n_values.contains(&0) {
        return Err(Error::Usage("scaling N values must be positive".into()));
    }
    if s.grid_points < 3 {
        return Err(Error::Usage("scaling.grid_points must be at least 3".into()));
    }
    let groups = s
        .hamiltonians
        .par_iter()
        .map(|&kind| scaling_series(kind, config))
        .collect::<Result<Vec<_>>>()?;
    let slopes = groups
        .iter()
        .zip(&s.hamiltonians)
        .map(|(rows, &kind)| {
            let x: Vec<f64> = rows.iter().map(|r| f64::from(r.n_spins).ln()).collect();
            let y: Vec<f64> = rows.iter().map(|r| r.xi_min.ln()).collect();
            (kind, least_squares_slope(&x, &y))
        })
        .collect();
    Ok(ScalingReport {
        rows: groups.into_iter().flatten().collect(),
        slopes,
    })
}
