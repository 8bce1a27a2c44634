//! State propagation and reduction to collective-spin moments.
//!
//! Static Hamiltonians are evolved exactly from one eigendecomposition.
//! Time-dependent ones use midpoint-exponential steps: on each substep of
//! length `dt` the state is multiplied by `exp(-i H(t + dt/2) dt)`, with any
//! noise term held at its value for that step. The step exponential is a
//! scaled Taylor series applied to the state vector, restricted to the band
//! of the Hamiltonian (collective Hamiltonians are at most pentadiagonal in
//! the Dicke basis).

use nalgebra::{ComplexField, DVector, Matrix3, Vector3};
use num_complex::Complex;
use rayon::prelude::*;

use crate::hamiltonians::{build_oat, ControlParams, QuadraticBasis};
use crate::noise::{derive_seed, noise_hamiltonian, sample_ou_path, NoisePath, OuParams};
use crate::spin::{CollectiveOperators, Operator, PureState, SpinSystem};
use crate::squeezing::xi_s_squared;
use crate::{Error, Real, Result};

/// Largest allowed `| |psi| - 1 |` before a driven run is declared failed.
pub const NORM_DRIFT_LIMIT: f64 = 1e-8;
/// Minimum number of substeps per control period.
pub const MIN_SUBSTEPS: usize = 16;
/// Trajectories per deterministic reduction block.
const ENSEMBLE_BLOCK: usize = 16;

/// First moments `<J_k>` and symmetrized second moments
/// `S_ab = <J_a J_b + J_b J_a> / 2`.
///
/// Both are linear in the density matrix, so averages over trajectories are
/// again valid moments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpinMoments<T: Real> {
    pub mean: Vector3<T>,
    pub second: Matrix3<T>,
}

impl<T: Real> SpinMoments<T> {
    /// Moments of a state in the symmetric sector, in `O(N)` operations via
    /// the ladder matrix elements.
    pub fn of_state(psi: &PureState<T>) -> Result<Self> {
        let sys = SpinSystem::from_dim(psi.dim())?;
        let a = psi.amplitudes();
        let n = sys.n_spins() as usize;
        let ladder: Vec<T> = (0..n)
            .map(|i| T::of(((n - i) * (i + 1)) as f64).sqrt())
            .collect();
        let zero = Complex::new(T::zero(), T::zero());
        // <J+>, <J+^2>, <J+ Jz + Jz J+>
        let mut raise = zero;
        let mut raise2 = zero;
        let mut raise_z = zero;
        let mut jz = T::zero();
        let mut jz2 = T::zero();
        let mut norm_sq = T::zero();
        for i in 0..=n {
            let p = a[i].norm_sqr();
            let m = sys.m::<T>(i);
            norm_sq += p;
            jz += p * m;
            jz2 += p * m * m;
            if i < n {
                let amp = a[i + 1].conj() * a[i];
                raise += amp.scale(ladder[i]);
                raise_z += amp.scale(ladder[i] * (m + m + T::one()));
            }
            if i + 1 < n {
                raise2 += (a[i + 2].conj() * a[i]).scale(ladder[i] * ladder[i + 1]);
            }
        }
        let half = T::of(0.5);
        let transverse = half * (sys.casimir::<T>() * norm_sq - jz2);
        let sxx = half * raise2.re + transverse;
        let syy = -half * raise2.re + transverse;
        let sxy = half * raise2.im;
        let sxz = half * raise_z.re;
        let syz = half * raise_z.im;
        Ok(Self {
            mean: Vector3::new(raise.re, raise.im, jz),
            second: Matrix3::new(sxx, sxy, sxz, sxy, syy, syz, sxz, syz, jz2),
        })
    }

    pub fn zero() -> Self {
        Self {
            mean: Vector3::zeros(),
            second: Matrix3::zeros(),
        }
    }

    /// Covariance matrix `S - <J><J>^T`.
    pub fn covariance(&self) -> Matrix3<T> {
        self.second - self.mean * self.mean.transpose()
    }

    pub fn mean_spin_length(&self) -> T {
        self.mean.norm()
    }

    /// Moments in a frame rotated by `r` (`J' = r J`).
    pub fn rotated(&self, r: &Matrix3<T>) -> Self {
        Self {
            mean: r * self.mean,
            second: r * self.second * r.transpose(),
        }
    }

    fn values(&self) -> [T; 12] {
        let s = &self.second;
        [
            self.mean.x, self.mean.y, self.mean.z,
            s[(0, 0)], s[(0, 1)], s[(0, 2)],
            s[(1, 0)], s[(1, 1)], s[(1, 2)],
            s[(2, 0)], s[(2, 1)], s[(2, 2)],
        ]
    }

    fn from_values(v: [T; 12]) -> Self {
        Self {
            mean: Vector3::new(v[0], v[1], v[2]),
            second: Matrix3::new(v[3], v[4], v[5], v[6], v[7], v[8], v[9], v[10], v[11]),
        }
    }
}

/// Folds samples into a running mean `mean += (x - mean) / (k + 1)`.
///
/// Identical inputs leave the mean bit-identical to them.
#[derive(Clone, Debug)]
struct RunningMean<T: Real> {
    count: usize,
    values: Vec<T>,
}

impl<T: Real> RunningMean<T> {
    fn new() -> Self {
        Self {
            count: 0,
            values: Vec::new(),
        }
    }

    fn push(&mut self, x: &[T]) {
        if self.count == 0 {
            self.values = x.to_vec();
        } else {
            debug_assert_eq!(x.len(), self.values.len());
            let k1 = T::of_usize(self.count + 1);
            for (m, &v) in self.values.iter_mut().zip(x) {
                if v != *m {
                    *m += (v - *m) / k1;
                }
            }
        }
        self.count += 1;
    }
}

/// Integration controls.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepPolicy<T: Real> {
    substeps_per_period: usize,
    dt_static: T,
}

impl<T: Real> StepPolicy<T> {
    pub fn new(substeps_per_period: usize, dt_static: T) -> Result<Self> {
        if substeps_per_period < MIN_SUBSTEPS {
            return Err(Error::InvalidParams(format!(
                "need at least {MIN_SUBSTEPS} substeps per period, got {substeps_per_period}"
            )));
        }
        if !(dt_static > T::zero()) || !dt_static.is_finite() {
            return Err(Error::InvalidParams(format!(
                "static sampling step must be positive, got {dt_static}"
            )));
        }
        Ok(Self {
            substeps_per_period,
            dt_static,
        })
    }

    pub fn substeps_per_period(&self) -> usize {
        self.substeps_per_period
    }

    pub fn dt_static(&self) -> T {
        self.dt_static
    }
}

impl<T: Real> Default for StepPolicy<T> {
    fn default() -> Self {
        Self {
            substeps_per_period: 128,
            dt_static: T::of(1e-3),
        }
    }
}

/// Moments sampled along a trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryMoments<T: Real> {
    pub times: Vec<T>,
    pub moments: Vec<SpinMoments<T>>,
}

impl<T: Real> TrajectoryMoments<T> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Uniform grid `0, dt, 2 dt, ...` up to `t_end` inclusive (rounded to the
/// nearest whole step).
pub fn uniform_times<T: Real>(t_end: T, dt: T) -> Result<Vec<T>> {
    if !(dt > T::zero()) || !(t_end >= T::zero()) {
        return Err(Error::InvalidParams(format!(
            "time grid needs dt > 0 and t_end >= 0 (dt = {dt}, t_end = {t_end})"
        )));
    }
    let steps = (t_end / dt).round().as_f64() as usize;
    Ok((0..=steps).map(|k| T::of_usize(k) * dt).collect())
}

/// Exact evolution under a time-independent Hamiltonian, sampled at `times`.
pub fn propagate_static<T: Real>(
    h: &Operator<T>,
    psi0: &PureState<T>,
    times: &[T],
) -> Result<TrajectoryMoments<T>> {
    let eig = h.eigh()?;
    let coeffs = eig.to_eigenbasis(psi0)?;
    let moments = times
        .par_iter()
        .map(|&t| SpinMoments::of_state(&eig.from_eigenbasis(&coeffs, t)))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryMoments {
        times: times.to_vec(),
        moments,
    })
}

/// A Hamiltonian sampled at substep midpoints.
pub trait DrivenHamiltonian<T: Real>: Sync {
    /// Period that the substep grid divides.
    fn period(&self) -> T;

    /// Hamiltonian at time `t`, for substep `step`.
    fn at(&self, t: T, step: usize) -> Result<Operator<T>>;

    /// For sources that integrate in a moving frame, the rotation `r` with
    /// `U^dagger J_k U = sum_l r_kl J_l`, where `U` maps frame states to lab
    /// states. Lab moments are then `frame_moments.rotated(&r)`.
    fn frame_rotation(&self, _t: T) -> Option<Matrix3<T>> {
        None
    }
}

/// Lab-frame moments of a state produced by propagating `h`.
pub fn lab_moments<T, H>(h: &H, t: T, psi: &PureState<T>) -> Result<SpinMoments<T>>
where
    T: Real,
    H: DrivenHamiltonian<T> + ?Sized,
{
    let m = SpinMoments::of_state(psi)?;
    Ok(match h.frame_rotation(t) {
        Some(r) => m.rotated(&r),
        None => m,
    })
}

/// The 3x3 rotation of the collective spin induced by the control
/// propagator: `U_c^dagger(t) J_k U_c(t) = sum_l r_kl J_l`.
pub fn control_rotation<T: Real>(params: &ControlParams<T>, t: T) -> Matrix3<T> {
    let w = params.omega() * t;
    let (sx, cx) = (w * T::of_i64(params.n_x() as i64)).sin_cos();
    let (sy, cy) = (w * T::of_i64(params.n_y() as i64)).sin_cos();
    let (o, z) = (T::one(), T::zero());
    let my = Matrix3::new(cy, z, sy, z, o, z, -sy, z, cy);
    let mx = Matrix3::new(o, z, z, z, cx, -sx, z, sx, cx);
    my * mx
}

/// A fixed Hamiltonian on a substep grid of the given period.
#[derive(Clone, Debug)]
pub struct ConstantHamiltonian<T: Real> {
    pub h: Operator<T>,
    pub period: T,
}

impl<T: Real> DrivenHamiltonian<T> for ConstantHamiltonian<T> {
    fn period(&self) -> T {
        self.period
    }

    fn at(&self, _t: T, _step: usize) -> Result<Operator<T>> {
        Ok(self.h.clone())
    }
}

/// Where a [`DdDrive`] integrates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DriveFrame {
    /// Interaction frame of the control field: the state is
    /// `psi_c = U_c^dagger psi` and evolves under `chi U_c^dagger J_x^2 U_c`,
    /// so the fast control rotation is handled exactly and only the slow
    /// twisting is stepped.
    Control,
    /// Step `chi J_x^2 + H_c(t)` directly. Needs many more substeps for the
    /// same accuracy; kept as a cross-check.
    Lab,
}

/// One-axis twisting plus the DD control field, `chi J_x^2 + H_c(t)`.
#[derive(Clone, Debug)]
pub struct DdDrive<T: Real> {
    params: ControlParams<T>,
    ops: CollectiveOperators<T>,
    frame: DriveFrame,
    basis: Option<QuadraticBasis<T>>,
    static_part: Operator<T>,
}

impl<T: Real> DdDrive<T> {
    /// Drive integrated in the control frame.
    pub fn new(params: ControlParams<T>, ops: &CollectiveOperators<T>) -> Self {
        Self {
            params,
            ops: ops.clone(),
            frame: DriveFrame::Control,
            basis: Some(QuadraticBasis::new(ops)),
            static_part: Operator::zeros(ops.dim()),
        }
    }

    /// Drive integrated in the lab frame.
    pub fn lab_frame(params: ControlParams<T>, ops: &CollectiveOperators<T>) -> Self {
        let wy = params.omega() * T::of_i64(params.n_y() as i64);
        let static_part = build_oat(ops, params.chi())
            .add_scaled(wy, &ops.jy)
            .expect("shared dimension");
        Self {
            params,
            ops: ops.clone(),
            frame: DriveFrame::Lab,
            basis: None,
            static_part,
        }
    }

    pub fn params(&self) -> &ControlParams<T> {
        &self.params
    }

    pub fn frame(&self) -> DriveFrame {
        self.frame
    }
}

impl<T: Real> DrivenHamiltonian<T> for DdDrive<T> {
    fn period(&self) -> T {
        self.params.t_c()
    }

    fn at(&self, t: T, _step: usize) -> Result<Operator<T>> {
        if let Some(basis) = &self.basis {
            let mut c = QuadraticBasis::coefficients(&self.params, t);
            for x in c.iter_mut() {
                *x *= self.params.chi();
            }
            return Ok(basis.combine(&c));
        }
        let w = self.params.omega();
        let wx = w * T::of_i64(self.params.n_x() as i64);
        let wy = w * T::of_i64(self.params.n_y() as i64);
        let (s, c) = (wy * t).sin_cos();
        self.static_part
            .add_scaled(wx * c, &self.ops.jx)?
            .add_scaled(-wx * s, &self.ops.jz)
    }

    fn frame_rotation(&self, t: T) -> Option<Matrix3<T>> {
        match self.frame {
            DriveFrame::Control => Some(control_rotation(&self.params, t)),
            DriveFrame::Lab => None,
        }
    }
}

/// Adds the classical bath coupling `B(step) . J` to another source.
#[derive(Clone, Debug)]
pub struct WithNoise<'a, T: Real, H> {
    pub inner: H,
    pub path: NoisePath<T>,
    pub ops: &'a CollectiveOperators<T>,
}

impl<T: Real, H: DrivenHamiltonian<T>> DrivenHamiltonian<T> for WithNoise<'_, T, H> {
    fn period(&self) -> T {
        self.inner.period()
    }

    fn at(&self, t: T, step: usize) -> Result<Operator<T>> {
        let h = self.inner.at(t, step)?;
        let b = self.path.at(step)?;
        if b.iter().all(|x| x.is_zero()) {
            return Ok(h);
        }
        let Some(r) = self.inner.frame_rotation(t) else {
            return Ok(&h + &noise_hamiltonian(&self.path, step, self.ops)?);
        };
        // U^dagger (B . J) U = (r^T B) . J
        let b = r.transpose() * Vector3::new(b[0], b[1], b[2]);
        let mut h = h;
        for k in 0..3 {
            h = h.add_scaled(b[k], self.ops.get(k))?;
        }
        Ok(h)
    }

    fn frame_rotation(&self, t: T) -> Option<Matrix3<T>> {
        self.inner.frame_rotation(t)
    }
}

/// Reusable buffers for [`exp_step`].
struct StepScratch<T: Real> {
    term: DVector<Complex<T>>,
    next: DVector<Complex<T>>,
    acc: DVector<Complex<T>>,
}

impl<T: Real> StepScratch<T> {
    fn new(dim: usize) -> Self {
        Self {
            term: DVector::zeros(dim),
            next: DVector::zeros(dim),
            acc: DVector::zeros(dim),
        }
    }
}

/// Largest `||H dt||_1` handled by a single Taylor chunk.
const TAYLOR_CHUNK_NORM: f64 = 3.0;
const TAYLOR_MAX_TERMS: usize = 80;

fn inf_norm<T: Real>(v: &DVector<Complex<T>>) -> T {
    v.iter().fold(T::zero(), |m, z| m.max(z.re.abs().max(z.im.abs())))
}

/// `psi <- exp(-i H dt) psi` by a scaled Taylor series truncated once terms
/// fall below machine precision.
fn exp_step<T: Real>(h: &Operator<T>, dt: T, psi: &mut PureState<T>, scratch: &mut StepScratch<T>) {
    let dim = h.dim();
    let bandwidth = h.bandwidth();
    let mut one_norm = T::zero();
    for j in 0..dim {
        let lo = j.saturating_sub(bandwidth);
        let hi = (j + bandwidth).min(dim - 1);
        let col = (lo..=hi).fold(T::zero(), |s, i| s + h.get(i, j).modulus());
        one_norm = one_norm.max(col);
    }
    let scaled = (one_norm * dt.abs()).as_f64();
    let chunks = ((scaled / TAYLOR_CHUNK_NORM).ceil() as usize).max(1);
    let tau = dt / T::of_usize(chunks);
    // -i tau
    let factor = Complex::new(T::zero(), -tau);
    let eps = T::eps();

    let v = psi.amplitudes_mut();
    for _ in 0..chunks {
        scratch.term.copy_from(v);
        scratch.acc.copy_from(v);
        let mut small = 0;
        for k in 1..=TAYLOR_MAX_TERMS {
            h.mul_vec_banded(bandwidth, &scratch.term, &mut scratch.next);
            let coeff = factor.unscale(T::of_usize(k));
            for (t, n) in scratch.term.iter_mut().zip(scratch.next.iter()) {
                *t = *n * coeff;
            }
            scratch.acc += &scratch.term;
            // two consecutive negligible terms
            if inf_norm(&scratch.term) <= eps * inf_norm(&scratch.acc) {
                small += 1;
                if small == 2 {
                    break;
                }
            } else {
                small = 0;
            }
        }
        v.copy_from(&scratch.acc);
    }
}

/// Midpoint-exponential propagation calling `observe(step, t, psi)` after
/// every substep (and once with step 0 at `t = 0`). Returns the final state.
///
/// States are in the frame of `h`; use [`lab_moments`] to read them out.
pub fn propagate_driven_with<T, H, F>(
    h: &H,
    psi0: &PureState<T>,
    t_end: T,
    policy: &StepPolicy<T>,
    mut observe: F,
) -> Result<PureState<T>>
where
    T: Real,
    H: DrivenHamiltonian<T> + ?Sized,
    F: FnMut(usize, T, &PureState<T>) -> Result<()>,
{
    let (dt, n_steps) = substep_grid(h.period(), t_end, policy)?;
    let mut psi = psi0.clone();
    let mut scratch = StepScratch::new(psi.dim());
    observe(0, T::zero(), &psi)?;
    for step in 0..n_steps {
        let t_mid = (T::of_usize(step) + T::of(0.5)) * dt;
        let hm = h.at(t_mid, step)?;
        if hm.dim() != psi.dim() {
            return Err(Error::Shape {
                expected: psi.dim(),
                found: hm.dim(),
            });
        }
        exp_step(&hm, dt, &mut psi, &mut scratch);
        let t = T::of_usize(step + 1) * dt;
        let drift = (psi.norm() - T::one()).abs().as_f64();
        if !(drift <= NORM_DRIFT_LIMIT) {
            return Err(Error::Integrator {
                time: t.as_f64(),
                drift,
            });
        }
        observe(step + 1, t, &psi)?;
    }
    Ok(psi)
}

/// Substep length and count for a run of length `t_end`.
pub fn substep_grid<T: Real>(period: T, t_end: T, policy: &StepPolicy<T>) -> Result<(T, usize)> {
    if !(t_end > T::zero()) || !t_end.is_finite() {
        return Err(Error::InvalidParams(format!("t_end must be positive, got {t_end}")));
    }
    if !(period > T::zero()) || !period.is_finite() {
        return Err(Error::InvalidParams(format!("period must be positive, got {period}")));
    }
    let dt = period / T::of_usize(policy.substeps_per_period());
    let n_steps = ((t_end / dt).round().as_f64() as usize).max(1);
    Ok((dt, n_steps))
}

/// Driven evolution with moments recorded at every substep boundary.
pub fn propagate_driven<T, H>(
    h: &H,
    psi0: &PureState<T>,
    t_end: T,
    policy: &StepPolicy<T>,
) -> Result<TrajectoryMoments<T>>
where
    T: Real,
    H: DrivenHamiltonian<T> + ?Sized,
{
    let mut times = Vec::new();
    let mut moments = Vec::new();
    propagate_driven_with(h, psi0, t_end, policy, |_, t, psi| {
        times.push(t);
        moments.push(lab_moments(h, t, psi)?);
        Ok(())
    })?;
    Ok(TrajectoryMoments { times, moments })
}

/// Noisy evolution setup shared by all members of an ensemble.
#[derive(Clone, Debug)]
pub struct EnsembleScenario<T: Real> {
    pub ops: CollectiveOperators<T>,
    /// Control field; its period also fixes the substep grid when the DD
    /// field is switched off.
    pub control: ControlParams<T>,
    /// `true`: `H_s(t) + H_SB`; `false`: `chi J_x^2 + H_SB`.
    pub dd_enabled: bool,
    pub noise: OuParams<T>,
    pub t_end: T,
}

/// How trajectories are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EnsembleReduction {
    /// Average moments, then compute squeezing from the averages.
    #[default]
    Moments,
    /// Additionally average `xi_S^2` computed on each path.
    PerPathXi,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleOutput<T: Real> {
    pub moments: TrajectoryMoments<T>,
    /// Path-averaged `xi_S^2`, present for [`EnsembleReduction::PerPathXi`].
    pub mean_xi_s: Option<Vec<T>>,
    pub n_paths: usize,
}

fn run_trajectory<T: Real>(
    scenario: &EnsembleScenario<T>,
    policy: &StepPolicy<T>,
    seed: u64,
    n_steps: usize,
    dt: T,
    per_path_xi: bool,
) -> Result<(Vec<T>, Vec<T>)> {
    let path = sample_ou_path(&scenario.noise, n_steps, dt, seed)?;
    if scenario.dd_enabled {
        let source = WithNoise {
            inner: DdDrive::new(scenario.control, &scenario.ops),
            path,
            ops: &scenario.ops,
        };
        record_run(&source, scenario, policy, n_steps, per_path_xi)
    } else {
        let source = WithNoise {
            inner: ConstantHamiltonian {
                h: build_oat(&scenario.ops, scenario.control.chi()),
                period: scenario.control.t_c(),
            },
            path,
            ops: &scenario.ops,
        };
        record_run(&source, scenario, policy, n_steps, per_path_xi)
    }
}

/// Flattened lab moments (12 per sample) and, optionally, per-sample `xi_S^2`.
fn record_run<T: Real, H: DrivenHamiltonian<T>>(
    source: &H,
    scenario: &EnsembleScenario<T>,
    policy: &StepPolicy<T>,
    n_steps: usize,
    per_path_xi: bool,
) -> Result<(Vec<T>, Vec<T>)> {
    let n_spins = scenario.ops.sys.n_spins();
    let mut flat = Vec::with_capacity((n_steps + 1) * 12);
    let mut xi = Vec::new();
    let psi0 = PureState::spin_down(&scenario.ops.sys);
    propagate_driven_with(source, &psi0, scenario.t_end, policy, |_, t, psi| {
        let m = lab_moments(source, t, psi)?;
        flat.extend_from_slice(&m.values());
        if per_path_xi {
            xi.push(xi_s_squared(&m, n_spins)?);
        }
        Ok(())
    })?;
    Ok((flat, xi))
}

/// Propagates `n_paths` noise realizations and averages them pointwise in
/// time.
///
/// Trajectory `i` uses the noise seed `derive_seed(master_seed, i)` and the
/// reduction folds trajectories in index order, so the output depends only
/// on the inputs and not on the number of worker threads.
pub fn run_ensemble<T: Real>(
    scenario: &EnsembleScenario<T>,
    n_paths: usize,
    master_seed: u64,
    policy: &StepPolicy<T>,
    reduction: EnsembleReduction,
) -> Result<EnsembleOutput<T>> {
    if n_paths == 0 {
        return Err(Error::InvalidParams("ensemble needs at least one path".into()));
    }
    let (dt, n_steps) = substep_grid(scenario.control.t_c(), scenario.t_end, policy)?;
    let per_path_xi = reduction == EnsembleReduction::PerPathXi;
    let mut moments = RunningMean::new();
    let mut xi = RunningMean::new();
    for block_start in (0..n_paths).step_by(ENSEMBLE_BLOCK) {
        let block_end = (block_start + ENSEMBLE_BLOCK).min(n_paths);
        let results: Vec<(Vec<T>, Vec<T>)> = (block_start..block_end)
            .into_par_iter()
            .map(|i| {
                run_trajectory(
                    scenario,
                    policy,
                    derive_seed(master_seed, i as u64),
                    n_steps,
                    dt,
                    per_path_xi,
                )
                .map_err(|e| Error::Trajectory {
                    index: i,
                    source: Box::new(e),
                })
            })
            .collect::<Result<_>>()?;
        for (flat, path_xi) in results {
            moments.push(&flat);
            if per_path_xi {
                xi.push(&path_xi);
            }
        }
    }
    let times = (0..=n_steps).map(|k| T::of_usize(k) * dt).collect();
    let moments = moments
        .values
        .chunks_exact(12)
        .map(|c| SpinMoments::from_values(c.try_into().expect("chunk of 12")))
        .collect();
    Ok(EnsembleOutput {
        moments: TrajectoryMoments { times, moments },
        mean_xi_s: per_path_xi.then_some(xi.values),
        n_paths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonians::{build_dr, build_tat};
    use crate::spin::{build_collective_operators, expectation};
    use nalgebra::DVector;

    fn c(re: f64, im: f64) -> Complex<f64> {
        Complex::new(re, im)
    }

    fn setup(n: i64) -> (SpinSystem, CollectiveOperators<f64>) {
        let sys = SpinSystem::new(n).unwrap();
        (sys, build_collective_operators(&sys))
    }

    /// Moments by dense expectation values.
    fn dense_moments(ops: &CollectiveOperators<f64>, psi: &PureState<f64>) -> SpinMoments<f64> {
        let mut m = SpinMoments::zero();
        for a in 0..3 {
            m.mean[a] = expectation(ops.get(a), psi).unwrap().re;
            for b in 0..3 {
                let ab = ops.get(a) * ops.get(b);
                let ba = ops.get(b) * ops.get(a);
                m.second[(a, b)] = 0.5 * expectation(&(&ab + &ba), psi).unwrap().re;
            }
        }
        m
    }

    fn random_state(dim: usize, seed: u64) -> PureState<f64> {
        let mut s = seed;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        PureState::normalized(DVector::from_fn(dim, |_, _| c(next(), next()))).unwrap()
    }

    #[test]
    fn ladder_moments_match_dense_expectations() {
        for n in [1, 2, 7, 20] {
            let (sys, ops) = setup(n);
            for seed in 0..4 {
                let psi = random_state(sys.dim(), seed);
                let fast = SpinMoments::of_state(&psi).unwrap();
                let slow = dense_moments(&ops, &psi);
                assert!((fast.mean - slow.mean).norm() < 1e-12);
                assert!((fast.second - slow.second).norm() < 1e-12);
                assert!((fast.second.trace() - sys.casimir::<f64>()).abs() < 1e-9);
                let cov_min = fast.covariance().symmetric_eigen().eigenvalues.min();
                assert!(cov_min > -1e-9);
            }
        }
    }

    #[test]
    fn spin_down_moments() {
        let (sys, _) = setup(10);
        let m = SpinMoments::of_state(&PureState::spin_down(&sys)).unwrap();
        assert_eq!(m.mean, Vector3::new(0.0, 0.0, -5.0));
        assert!((m.second[(0, 0)] - 2.5).abs() < 1e-14);
        assert!((m.second[(1, 1)] - 2.5).abs() < 1e-14);
        assert!((m.second[(2, 2)] - 25.0).abs() < 1e-14);
    }

    #[test]
    fn step_policy_validation() {
        assert!(StepPolicy::new(15, 1e-3).is_err());
        assert!(StepPolicy::new(16, 0.0).is_err());
        assert!(StepPolicy::<f64>::new(16, 1e-3).is_ok());
    }

    #[test]
    fn static_zero_hamiltonian_is_constant() {
        let (sys, _) = setup(6);
        let psi = random_state(sys.dim(), 3);
        let times = uniform_times(1.0, 0.25).unwrap();
        let traj = propagate_static(&Operator::zeros(sys.dim()), &psi, &times).unwrap();
        for m in &traj.moments {
            assert!((m.mean - traj.moments[0].mean).norm() < 1e-13);
            assert!((m.second - traj.moments[0].second).norm() < 1e-13);
        }
    }

    #[test]
    fn static_precession_about_z() {
        let (sys, ops) = setup(4);
        // Tilt the spin down state so that it has transverse polarization.
        let psi = ops.jy.eigh().unwrap().evolve(&PureState::spin_down(&sys), 0.8).unwrap();
        let times = uniform_times(2.0, 0.1).unwrap();
        let traj = propagate_static(&ops.jz, &psi, &times).unwrap();
        let m0 = traj.moments[0];
        for (t, m) in traj.times.iter().zip(&traj.moments) {
            assert!((m.mean.z - m0.mean.z).abs() < 1e-12);
            let (s, co) = t.sin_cos();
            let x = m0.mean.x * co - m0.mean.y * s;
            let y = m0.mean.x * s + m0.mean.y * co;
            assert!((m.mean.x - x).abs() < 1e-12 && (m.mean.y - y).abs() < 1e-12);
        }
    }

    #[test]
    fn static_rejects_non_hermitian() {
        let (sys, ops) = setup(3);
        let bad = &ops.jx * &ops.jz;
        let psi = PureState::spin_down(&sys);
        assert!(matches!(
            propagate_static(&bad, &psi, &[0.0, 0.1]),
            Err(Error::NotHermitian { .. })
        ));
    }

    #[test]
    fn exp_step_matches_eigendecomposition() {
        let (sys, ops) = setup(12);
        let h = &(&build_tat(&ops, 0.7) + &ops.jx.scale(40.0)) + &ops.jz.scale(-13.0);
        let psi = random_state(sys.dim(), 11);
        for dt in [1e-4, 0.01, 0.3] {
            let mut stepped = psi.clone();
            exp_step(&h, dt, &mut stepped, &mut StepScratch::new(sys.dim()));
            let exact = h.eigh().unwrap().evolve(&psi, dt).unwrap();
            let err = (stepped.amplitudes() - exact.amplitudes()).norm();
            assert!(err < 1e-12, "dt={dt}: {err:e}");
        }
    }

    #[test]
    fn constant_drive_agrees_with_static() {
        let (sys, ops) = setup(10);
        let h = build_dr(&ops, 1.0);
        let psi0 = PureState::spin_down(&sys);
        let policy = StepPolicy::new(16, 1e-3).unwrap();
        let source = ConstantHamiltonian { h: h.clone(), period: 0.05 };
        let driven = propagate_driven(&source, &psi0, 0.5, &policy).unwrap();
        let exact = propagate_static(&h, &psi0, &driven.times).unwrap();
        for (a, b) in driven.moments.iter().zip(&exact.moments) {
            assert!((a.mean - b.mean).norm() < 1e-9);
            assert!((a.second - b.second).norm() < 1e-9);
        }
    }

    #[test]
    fn driven_run_preserves_norm() {
        let (sys, ops) = setup(10);
        let p = ControlParams::new(1.0, 2, 1, 0.491 / 20.0).unwrap();
        let source = DdDrive::new(p, &ops);
        let policy = StepPolicy::new(64, 1e-3).unwrap();
        let mut worst = 0.0f64;
        propagate_driven_with(&source, &PureState::spin_down(&sys), 0.3, &policy, |_, _, psi| {
            worst = worst.max((psi.norm() - 1.0).abs());
            Ok(())
        })
        .unwrap();
        assert!(worst < 1e-10, "{worst:e}");
    }

    fn final_state(n_cyc: usize, k: usize, t_end: f64) -> PureState<f64> {
        let (sys, ops) = setup(10);
        let p = ControlParams::new(1.0, 2, 1, 0.491 / n_cyc as f64).unwrap();
        let policy = StepPolicy::new(k, 1e-3).unwrap();
        propagate_driven_with(&DdDrive::new(p, &ops), &PureState::spin_down(&sys), t_end, &policy, |_, _, _| Ok(()))
            .unwrap()
    }

    #[test]
    fn substep_self_convergence() {
        let a = final_state(20, 128, 0.491);
        let b = final_state(20, 256, 0.491);
        let f = a.fidelity(&b).unwrap();
        assert!((1.0 - f).abs() < 1e-6, "{}", 1.0 - f);
    }

    #[test]
    fn stroboscopic_state_tracks_averaged_dynamics() {
        let (sys, ops) = setup(10);
        let avg = build_dr(&ops, 1.0).eigh().unwrap().evolve(&PureState::spin_down(&sys), 0.491).unwrap();
        // t = 0.491 is a whole number of periods for both settings.
        let coarse = final_state(5, 128, 0.491).fidelity(&avg).unwrap();
        let fine = final_state(20, 128, 0.491).fidelity(&avg).unwrap();
        assert!(fine >= 0.999, "{fine}");
        assert!(fine > coarse, "{fine} vs {coarse}");
    }

    #[test]
    fn running_mean_is_insensitive_to_order() {
        let rows: Vec<[f64; 3]> = (0..50)
            .map(|i| {
                let x = i as f64;
                [x.sin(), (0.3 * x).cos() * 1e3, 1.0 / (x + 1.0)]
            })
            .collect();
        let mut fwd = RunningMean::new();
        let mut rev = RunningMean::new();
        for r in &rows {
            fwd.push(r);
        }
        for r in rows.iter().rev() {
            rev.push(r);
        }
        for (a, b) in fwd.values.iter().zip(&rev.values) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn control_rotation_matches_conjugation() {
        let (_, ops) = setup(5);
        for (n_x, n_y) in [(2, 1), (3, -1), (-5, 3)] {
            let p = ControlParams::new(1.0, n_x, n_y, 0.7).unwrap();
            for t in [0.0, 0.013, 0.31, 0.69] {
                let u = crate::hamiltonians::control_propagator(&p, &ops, t).unwrap();
                let r = control_rotation(&p, t);
                for k in 0..3 {
                    let direct = &(&u.adjoint() * ops.get(k)) * &u;
                    let mut via = Operator::zeros(ops.dim());
                    for l in 0..3 {
                        via = via.add_scaled(r[(k, l)], ops.get(l)).unwrap();
                    }
                    assert!((&direct - &via).frobenius_norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn control_frame_agrees_with_lab_frame() {
        let (sys, ops) = setup(6);
        let p = ControlParams::new(1.0, 2, 1, 0.05).unwrap();
        let psi0 = PureState::spin_down(&sys);
        let frame = propagate_driven(&DdDrive::new(p, &ops), &psi0, 0.3, &StepPolicy::new(128, 1e-3).unwrap()).unwrap();
        let lab = propagate_driven(&DdDrive::lab_frame(p, &ops), &psi0, 0.3, &StepPolicy::new(4096, 1e-3).unwrap())
            .unwrap();
        // Compare on the common grid (every 32nd lab sample).
        for (i, m) in frame.moments.iter().enumerate() {
            let l = &lab.moments[32 * i];
            assert!((frame.times[i] - lab.times[32 * i]).abs() < 1e-12);
            assert!((m.mean - l.mean).norm() < 1e-4, "{i}: {}", (m.mean - l.mean).norm());
            assert!((m.second - l.second).norm() < 1e-3);
        }
    }

    #[test]
    fn noisy_control_frame_agrees_with_lab_frame() {
        let (sys, ops) = setup(4);
        let p = ControlParams::new(1.0, 2, 1, 0.05).unwrap();
        let fine = StepPolicy::new(2048, 1e-3).unwrap();
        let (dt, n) = substep_grid(p.t_c(), 0.2, &fine).unwrap();
        let path = sample_ou_path(&OuParams::new(2.0, 20.0).unwrap(), n, dt, 5).unwrap();
        let psi0 = PureState::spin_down(&sys);
        let lab = WithNoise {
            inner: DdDrive::lab_frame(p, &ops),
            path: path.clone(),
            ops: &ops,
        };
        let frame = WithNoise {
            inner: DdDrive::new(p, &ops),
            path,
            ops: &ops,
        };
        let a = propagate_driven(&lab, &psi0, 0.2, &fine).unwrap();
        let b = propagate_driven(&frame, &psi0, 0.2, &fine).unwrap();
        let last = a.len() - 1;
        let d = (a.moments[last].mean - b.moments[last].mean).norm();
        assert!(d < 1e-4, "{d}");
        assert!((a.moments[last].second - b.moments[last].second).norm() < 1e-3);
    }

    #[test]
    fn grid_rejects_bad_lengths() {
        let policy = StepPolicy::<f64>::default();
        assert!(substep_grid(1.0, 0.0, &policy).is_err());
        assert!(substep_grid(0.0, 1.0, &policy).is_err());
        assert_eq!(substep_grid(1.0, 2.0, &policy).unwrap().1, 256);
    }

    #[test]
    fn running_mean_keeps_identical_inputs_exact() {
        let mut rm = RunningMean::new();
        let x = [0.1f64, -0.0, 1.0 / 3.0];
        for _ in 0..7 {
            rm.push(&x);
        }
        assert_eq!(rm.values[0].to_bits(), x[0].to_bits());
        assert_eq!(rm.values[1].to_bits(), x[1].to_bits());
        assert_eq!(rm.values[2].to_bits(), x[2].to_bits());
    }

    fn small_scenario(sigma_sq: f64, dd: bool) -> EnsembleScenario<f64> {
        let (_, ops) = setup(4);
        EnsembleScenario {
            ops,
            control: ControlParams::new(1.0, 2, 1, 0.1).unwrap(),
            dd_enabled: dd,
            noise: OuParams::new(2.0, sigma_sq).unwrap(),
            t_end: 0.2,
        }
    }

    #[test]
    fn silent_ensemble_equals_noiseless_drive() {
        let sc = small_scenario(0.0, true);
        let policy = StepPolicy::new(32, 1e-3).unwrap();
        let ens = run_ensemble(&sc, 5, 1, &policy, EnsembleReduction::Moments).unwrap();
        let plain = propagate_driven(
            &DdDrive::new(sc.control, &sc.ops),
            &PureState::spin_down(&sc.ops.sys),
            sc.t_end,
            &policy,
        )
        .unwrap();
        assert_eq!(ens.moments, plain);
    }

    #[test]
    fn ensemble_is_seeded_and_rejects_empty() {
        let sc = small_scenario(5.0, false);
        let policy = StepPolicy::new(16, 1e-3).unwrap();
        let a = run_ensemble(&sc, 3, 9, &policy, EnsembleReduction::PerPathXi).unwrap();
        let b = run_ensemble(&sc, 3, 9, &policy, EnsembleReduction::PerPathXi).unwrap();
        let c = run_ensemble(&sc, 3, 10, &policy, EnsembleReduction::PerPathXi).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.moments, c.moments);
        assert_eq!(a.mean_xi_s.as_ref().unwrap().len(), a.moments.len());
        assert!(run_ensemble(&sc, 0, 9, &policy, EnsembleReduction::Moments).is_err());
    }

    #[test]
    fn ensemble_moments_stay_symmetric_psd() {
        let sc = small_scenario(20.0, true);
        let policy = StepPolicy::new(32, 1e-3).unwrap();
        let out = run_ensemble(&sc, 20, 3, &policy, EnsembleReduction::Moments).unwrap();
        for m in &out.moments.moments {
            assert!((m.second - m.second.transpose()).norm() < 1e-12);
            assert!(m.covariance().symmetric_eigen().eigenvalues.min() > -1e-9);
            assert!((m.second.trace() - sc.ops.sys.casimir::<f64>()).abs() < 1e-9);
        }
    }
}
