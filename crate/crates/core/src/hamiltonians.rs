//! Twisting Hamiltonians, the continuous DD control fields and their period
//! averages.
//!
//! The control propagator winds the collective spin about two axes,
//! `U_c(t) = exp(-i w n_y J_y t) exp(-i w n_x J_x t)` with `w = 2 pi / t_c`.
//! Conjugating the one-axis-twisting term by `U_c` and averaging over one
//! period gives the effective Hamiltonian that governs stroboscopic dynamics.

use std::fmt;

use num_complex::Complex;

use crate::spin::{anticommutator, CollectiveOperators, HermitianEigen, Operator};
use crate::{Error, Real, Result};

/// Grid points per period per unit of `lcm(|n_x|, |n_y|)`.
const QUADRATURE_POINTS_PER_WINDING: usize = 4 * 64;
/// Richardson error estimate must fall below this multiple of the reference norm.
const QUADRATURE_REL_TOL: f64 = 1e-9;

/// Parameters of the two-axis winding control field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControlParams<T: Real> {
    chi: T,
    n_x: i32,
    n_y: i32,
    t_c: T,
}

impl<T: Real> ControlParams<T> {
    /// Validated parameters: nonzero, distinct windings and a positive period.
    pub fn new(chi: T, n_x: i32, n_y: i32, t_c: T) -> Result<Self> {
        let p = Self::diagnostic(chi, n_x, n_y, t_c)?;
        if n_x == n_y {
            return Err(Error::InvalidParams(format!(
                "winding numbers must differ (n_x = n_y = {n_x})"
            )));
        }
        Ok(p)
    }

    /// Like [`ControlParams::new`] but admits `n_x == n_y`, for residual scans
    /// that demonstrate why the constraint exists.
    pub fn diagnostic(chi: T, n_x: i32, n_y: i32, t_c: T) -> Result<Self> {
        if n_x == 0 || n_y == 0 {
            return Err(Error::InvalidParams(format!(
                "winding numbers must be nonzero (n_x = {n_x}, n_y = {n_y})"
            )));
        }
        if !(t_c > T::zero()) || !t_c.is_finite() {
            return Err(Error::InvalidParams(format!("control period must be positive, got {t_c}")));
        }
        if !chi.is_finite() {
            return Err(Error::InvalidParams("chi must be finite".into()));
        }
        Ok(Self { chi, n_x, n_y, t_c })
    }

    pub fn chi(&self) -> T {
        self.chi
    }

    pub fn n_x(&self) -> i32 {
        self.n_x
    }

    pub fn n_y(&self) -> i32 {
        self.n_y
    }

    pub fn t_c(&self) -> T {
        self.t_c
    }

    /// Angular frequency `2 pi / t_c`.
    pub fn omega(&self) -> T {
        T::two_pi() / self.t_c
    }

    pub fn with_period(&self, t_c: T) -> Result<Self> {
        Self::diagnostic(self.chi, self.n_x, self.n_y, t_c)
    }

    /// Whether the period-averaged conjugation of every `J_k` vanishes.
    ///
    /// The averages pick up `cos(w n_x t) cos(w n_y t)` and
    /// `sin(w n_x t) sin(w n_y t)` terms, which survive whenever
    /// `|n_x| = |n_y|`, including `n_x = -n_y`.
    pub fn satisfies_first_order_dd(&self) -> bool {
        self.n_x.abs() != self.n_y.abs()
    }

    pub fn is_double_resonance(&self) -> bool {
        self.n_x == 2 * self.n_y
    }

    pub fn averaged_kind(&self) -> AveragedKind {
        if self.n_x == 2 * self.n_y {
            AveragedKind::DoubleResonance
        } else if self.n_x == -2 * self.n_y {
            AveragedKind::MirroredDoubleResonance
        } else if self.n_x.abs() == self.n_y.abs() {
            AveragedKind::EqualWinding
        } else {
            AveragedKind::OatQuarter
        }
    }

    fn quadrature_intervals(&self) -> usize {
        lcm(self.n_x.unsigned_abs() as usize, self.n_y.unsigned_abs() as usize)
            * QUADRATURE_POINTS_PER_WINDING
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Closed form of the period-averaged `chi J_x^2`, up to the identity shift.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AveragedKind {
    /// `(chi/4) J_x^2`.
    OatQuarter,
    /// `n_x = 2 n_y`: `(chi/4)(J_x^2 + J_x J_y + J_y J_x)`.
    DoubleResonance,
    /// `n_x = -2 n_y`: `(chi/4)(J_x^2 - J_x J_y - J_y J_x)`.
    MirroredDoubleResonance,
    /// `|n_x| = |n_y|` (no decoupling): `chi (J_x^2/8 - J_z^2/4)`.
    EqualWinding,
}

impl fmt::Display for AveragedKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AveragedKind::OatQuarter => "oat-quarter",
            AveragedKind::DoubleResonance => "dr",
            AveragedKind::MirroredDoubleResonance => "dr-mirrored",
            AveragedKind::EqualWinding => "equal-winding",
        })
    }
}

/// Classification of an averaged Hamiltonian together with its identity shift.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AveragedForm<T: Real> {
    pub kind: AveragedKind,
    /// Coefficient of the identity in the average.
    pub constant_shift: T,
}

impl<T: Real> AveragedForm<T> {
    pub fn for_params(params: &ControlParams<T>, ops: &CollectiveOperators<T>) -> Self {
        let kind = params.averaged_kind();
        let coeff = match kind {
            AveragedKind::EqualWinding => T::of(0.375),
            _ => T::of(0.25),
        };
        Self {
            kind,
            constant_shift: coeff * params.chi() * ops.sys.casimir::<T>(),
        }
    }

    /// The closed-form average, including the identity shift.
    pub fn operator(&self, chi: T, ops: &CollectiveOperators<T>) -> Operator<T> {
        let quarter = chi * T::of(0.25);
        let body = match self.kind {
            AveragedKind::OatQuarter => build_oat(ops, quarter),
            AveragedKind::DoubleResonance => build_dr(ops, chi),
            AveragedKind::MirroredDoubleResonance => {
                &build_oat(ops, quarter) - &build_tat(ops, quarter)
            }
            AveragedKind::EqualWinding => {
                let jz2 = (&ops.jz * &ops.jz).hermitian_part();
                &build_oat(ops, chi * T::of(0.125)) - &jz2.scale(quarter)
            }
        };
        &body + &Operator::identity(ops.dim()).scale(self.constant_shift)
    }
}

/// One-axis twisting, `chi J_x^2`.
pub fn build_oat<T: Real>(ops: &CollectiveOperators<T>, chi: T) -> Operator<T> {
    (&ops.jx * &ops.jx).hermitian_part().scale(chi)
}

/// Two-axis twisting, `chi (J_x J_y + J_y J_x)`.
pub fn build_tat<T: Real>(ops: &CollectiveOperators<T>, chi: T) -> Operator<T> {
    anticommutator(&ops.jx, &ops.jy)
        .expect("collective operators share a dimension")
        .scale(chi)
}

/// Double-resonance average, `(chi/4)(J_x^2 + J_x J_y + J_y J_x)`.
pub fn build_dr<T: Real>(ops: &CollectiveOperators<T>, chi: T) -> Operator<T> {
    let quarter = chi * T::of(0.25);
    &build_oat(ops, quarter) + &build_tat(ops, quarter)
}

/// Caches the spectral decompositions of `J_x` and `J_y` so that control
/// rotations at many times cost two matrix products each.
#[derive(Clone, Debug)]
pub struct ControlFrame<T: Real> {
    ops: CollectiveOperators<T>,
    eig_x: HermitianEigen<T>,
    eig_y: HermitianEigen<T>,
}

impl<T: Real> ControlFrame<T> {
    pub fn new(ops: &CollectiveOperators<T>) -> Result<Self> {
        Ok(Self {
            ops: ops.clone(),
            eig_x: ops.jx.eigh()?,
            eig_y: ops.jy.eigh()?,
        })
    }

    pub fn operators(&self) -> &CollectiveOperators<T> {
        &self.ops
    }

    /// `U_c(t)`.
    pub fn propagator(&self, params: &ControlParams<T>, t: T) -> Operator<T> {
        let w = params.omega();
        let rx = self.eig_x.propagator(w * T::of_i64(params.n_x() as i64) * t);
        let ry = self.eig_y.propagator(w * T::of_i64(params.n_y() as i64) * t);
        &ry * &rx
    }

    /// `U_c(t)^dagger A U_c(t)`.
    pub fn conjugate(&self, params: &ControlParams<T>, a: &Operator<T>, t: T) -> Operator<T> {
        let u = self.propagator(params, t);
        &(&u.adjoint() * a) * &u
    }
}

/// `U_c(t) = exp(-2 pi i n_y J_y t/t_c) exp(-2 pi i n_x J_x t/t_c)`.
pub fn control_propagator<T: Real>(
    params: &ControlParams<T>,
    ops: &CollectiveOperators<T>,
    t: T,
) -> Result<Operator<T>> {
    Ok(ControlFrame::new(ops)?.propagator(params, t))
}

/// `H_c(t) = w n_y J_y + w n_x [J_x cos(w n_y t) - J_z sin(w n_y t)]`,
/// the generator satisfying `i dU_c/dt = H_c U_c`.
pub fn control_hamiltonian<T: Real>(
    params: &ControlParams<T>,
    ops: &CollectiveOperators<T>,
    t: T,
) -> Operator<T> {
    let w = params.omega();
    let wx = w * T::of_i64(params.n_x() as i64);
    let wy = w * T::of_i64(params.n_y() as i64);
    let (s, c) = (wy * t).sin_cos();
    let mut h = ops.jy.scale(wy);
    h = h.add_scaled(wx * c, &ops.jx).expect("shared dimension");
    h.add_scaled(-wx * s, &ops.jz).expect("shared dimension")
}

/// `H_s(t) = chi J_x^2 + H_c(t)`.
pub fn system_hamiltonian<T: Real>(
    params: &ControlParams<T>,
    ops: &CollectiveOperators<T>,
    t: T,
) -> Operator<T> {
    &build_oat(ops, params.chi()) + &control_hamiltonian(params, ops, t)
}

/// The six operators appearing in the expansion of `U_c^dagger J_x^2 U_c`.
#[derive(Clone, Debug)]
pub struct QuadraticBasis<T: Real> {
    pub zy: Operator<T>,
    pub xz: Operator<T>,
    pub xy: Operator<T>,
    pub xx: Operator<T>,
    pub yy: Operator<T>,
    pub zz: Operator<T>,
}

impl<T: Real> QuadraticBasis<T> {
    pub fn new(ops: &CollectiveOperators<T>) -> Self {
        let anti = |a: &Operator<T>, b: &Operator<T>| anticommutator(a, b).expect("shared dimension");
        let sq = |a: &Operator<T>| (a * a).hermitian_part();
        Self {
            zy: anti(&ops.jz, &ops.jy),
            xz: anti(&ops.jx, &ops.jz),
            xy: anti(&ops.jx, &ops.jy),
            xx: sq(&ops.jx),
            yy: sq(&ops.jy),
            zz: sq(&ops.jz),
        }
    }

    /// Trigonometric coefficients of `(zy, xz, xy, xx, yy, zz)` at time `t`.
    pub fn coefficients(params: &ControlParams<T>, t: T) -> [T; 6] {
        let w = params.omega();
        let a = w * T::of_i64(params.n_x() as i64) * t;
        let b = w * T::of_i64(params.n_y() as i64) * t;
        let half = T::of(0.5);
        let two = T::of(2.0);
        let (sa, ca) = a.sin_cos();
        let (sb, cb) = b.sin_cos();
        let sb2 = sb * sb;
        [
            half * (two * a).sin() * sb2,
            half * (two * b).sin() * ca,
            half * (two * b).sin() * sa,
            cb * cb,
            sa * sa * sb2,
            ca * ca * sb2,
        ]
    }

    pub fn combine(&self, coeffs: &[T; 6]) -> Operator<T> {
        let dim = self.xx.dim();
        let terms = [&self.zy, &self.xz, &self.xy, &self.xx, &self.yy, &self.zz];
        Operator::from_fn(dim, |i, j| {
            terms
                .iter()
                .zip(coeffs)
                .fold(Complex::new(T::zero(), T::zero()), |acc, (op, c)| {
                    acc + op.get(i, j).scale(*c)
                })
        })
    }
}

/// Closed-form `U_c^dagger(t) J_x^2 U_c(t)`.
pub fn conjugated_jx_squared<T: Real>(
    params: &ControlParams<T>,
    ops: &CollectiveOperators<T>,
    t: T,
) -> Operator<T> {
    QuadraticBasis::new(ops).combine(&QuadraticBasis::coefficients(params, t))
}

/// Sums `f(lo..hi)` by recursive halving so that the rounding pattern
/// depends only on the index range.
fn pairwise_sum<T, F>(lo: usize, hi: usize, f: &F) -> Vec<Operator<T>>
where
    T: Real,
    F: Fn(usize) -> Vec<Operator<T>> + Sync,
{
    debug_assert!(hi > lo);
    if hi - lo <= 8 {
        let mut acc = f(lo);
        for i in lo + 1..hi {
            for (a, b) in acc.iter_mut().zip(f(i)) {
                *a = &*a + &b;
            }
        }
        return acc;
    }
    let mid = lo + (hi - lo) / 2;
    let (left, right) = rayon::join(|| pairwise_sum(lo, mid, f), || pairwise_sum(mid, hi, f));
    left.iter().zip(&right).map(|(a, b)| a + b).collect()
}

/// Composite Simpson rule for `int_0^period f(t) dt` with `intervals` (even)
/// subintervals.
fn simpson<T, F>(intervals: usize, period: T, f: &F) -> Vec<Operator<T>>
where
    T: Real,
    F: Fn(T) -> Vec<Operator<T>> + Sync,
{
    debug_assert!(intervals.is_multiple_of(2));
    let h = period / T::of_usize(intervals);
    let weighted = |i: usize| {
        let w = if i == 0 || i == intervals {
            T::one()
        } else if i % 2 == 1 {
            T::of(4.0)
        } else {
            T::of(2.0)
        };
        let scale = w * h / T::of(3.0);
        f(T::of_usize(i) * h).into_iter().map(|op| op.scale(scale)).collect()
    };
    pairwise_sum(0, intervals + 1, &weighted)
}

/// Period integral with a Richardson estimate from one halving step.
///
/// Returns the fine-grid integrals; fails if any component's estimate
/// `|S_fine - S_coarse| / 15` exceeds `QUADRATURE_REL_TOL * reference[k]`.
fn period_integral<T, F>(
    intervals: usize,
    period: T,
    reference: &[T],
    f: &F,
) -> Result<Vec<Operator<T>>>
where
    T: Real,
    F: Fn(T) -> Vec<Operator<T>> + Sync,
{
    let fine = simpson(intervals, period, f);
    let coarse = simpson(intervals / 2, period, f);
    for ((a, b), r) in fine.iter().zip(&coarse).zip(reference) {
        let estimate = ((a - b).frobenius_norm() / T::of(15.0)).as_f64();
        let tolerance = QUADRATURE_REL_TOL * r.as_f64() * period.as_f64();
        if !(estimate <= tolerance) {
            return Err(Error::Quadrature { estimate, tolerance });
        }
    }
    Ok(fine)
}

/// Period average `(chi/t_c) int_0^{t_c} U_c^dagger J_x^2 U_c dt`, computed
/// by quadrature of the closed-form conjugation and classified.
pub fn averaged_hamiltonian<T: Real>(
    params: &ControlParams<T>,
    ops: &CollectiveOperators<T>,
) -> Result<(Operator<T>, AveragedForm<T>)> {
    let basis = QuadraticBasis::new(ops);
    let integrand = |t: T| vec![basis.combine(&QuadraticBasis::coefficients(params, t))];
    let reference = [basis.xx.frobenius_norm()];
    let integral = period_integral(params.quadrature_intervals(), params.t_c(), &reference, &integrand)?;
    let avg = integral[0].scale(params.chi() / params.t_c()).hermitian_part();
    Ok((avg, AveragedForm::for_params(params, ops)))
}

/// Frobenius norms of `(1/t_c) int_0^{t_c} U_c^dagger J_k U_c dt` for
/// `k = x, y, z`.
pub fn dd_residual<T: Real>(params: &ControlParams<T>, ops: &CollectiveOperators<T>) -> Result<[T; 3]> {
    let frame = ControlFrame::new(ops)?;
    let integrand = |t: T| {
        let u = frame.propagator(params, t);
        let ud = u.adjoint();
        (0..3).map(|k| &(&ud * ops.get(k)) * &u).collect::<Vec<_>>()
    };
    let reference: Vec<T> = (0..3).map(|k| ops.get(k).frobenius_norm()).collect();
    let integral = period_integral(params.quadrature_intervals(), params.t_c(), &reference, &integrand)?;
    let inv = T::one() / params.t_c();
    Ok([
        integral[0].frobenius_norm() * inv,
        integral[1].frobenius_norm() * inv,
        integral[2].frobenius_norm() * inv,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spin::{build_collective_operators, SpinSystem};
    use std::f64::consts::PI;

    fn ops(n: i64) -> CollectiveOperators<f64> {
        build_collective_operators(&SpinSystem::new(n).unwrap())
    }

    fn params(nx: i32, ny: i32, tc: f64) -> ControlParams<f64> {
        ControlParams::new(1.0, nx, ny, tc).unwrap()
    }

    /// Independent Jacobi eigenvalue oracle for small real symmetric matrices.
    fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _ in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in p + 1..n {
                    off += a[p][q] * a[p][q];
                }
            }
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p][k];
                        let aqk = a[q][k];
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
        ev
    }

    fn sorted_eigenvalues(op: &Operator<f64>) -> Vec<f64> {
        let mut v: Vec<f64> = op.eigh().unwrap().values.iter().copied().collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    }

    #[test]
    fn rejects_bad_windings() {
        assert!(ControlParams::new(1.0, 0, 1, 1.0).is_err());
        assert!(ControlParams::new(1.0, 2, 2, 1.0).is_err());
        assert!(ControlParams::new(1.0, 2, 1, 0.0).is_err());
        assert!(ControlParams::new(1.0, 2, 1, -1.0).is_err());
        assert!(ControlParams::diagnostic(1.0, 2, 2, 1.0).is_ok());
    }

    #[test]
    fn omega_times_period_is_two_pi() {
        let p = params(2, 1, 0.0245);
        assert!((p.omega() * p.t_c() - 2.0 * PI).abs() < 1e-14);
    }

    #[test]
    fn oat_small_cases() {
        let o1 = ops(1);
        let h = build_oat(&o1, 1.0);
        assert!((&h - &Operator::identity(2).scale(0.25)).frobenius_norm() < 1e-15);
        assert_eq!(build_oat(&ops(5), 0.0).frobenius_norm(), 0.0);

        let ev = sorted_eigenvalues(&build_oat(&ops(2), 1.0));
        let oracle = jacobi_eigenvalues(
            (0..3)
                .map(|i| (0..3).map(|j| build_oat(&ops(2), 1.0).get(i, j).re).collect())
                .collect(),
        );
        for (a, b) in ev.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in ev.iter().zip(&[0.0, 1.0, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tat_properties() {
        assert!(build_tat(&ops(1), 1.0).frobenius_norm() < 1e-15);
        let o = ops(4);
        let tat = build_tat(&o, 1.0);
        assert_eq!(tat.hermitian_deviation(), 0.0);
        assert!(tat.trace().norm() < 1e-12);
        let naive = &(&o.jx * &o.jy) + &(&o.jy * &o.jx);
        assert!((&tat - &naive).frobenius_norm() < 1e-12);
    }

    #[test]
    fn dr_decomposes_into_oat_plus_tat() {
        let o = ops(6);
        let chi = 1.3;
        let dr = build_dr(&o, chi);
        let sum = &build_oat(&o, chi / 4.0) + &build_tat(&o, chi / 4.0);
        assert!((&dr - &sum).frobenius_norm() < 1e-13);
        let single = build_dr(&ops(1), 1.0);
        assert!((&single - &Operator::identity(2).scale(1.0 / 16.0)).frobenius_norm() < 1e-15);
    }

    #[test]
    fn dr_spectrum_matches_jacobi_oracle() {
        // Rotate the Hermitian problem into a real symmetric one of twice the size.
        let o = ops(10);
        let h = build_dr(&o, 1.0);
        let d = h.dim();
        let mut big = vec![vec![0.0; 2 * d]; 2 * d];
        for i in 0..d {
            for j in 0..d {
                let z = h.get(i, j);
                big[i][j] = z.re;
                big[i + d][j + d] = z.re;
                big[i][j + d] = -z.im;
                big[i + d][j] = z.im;
            }
        }
        let oracle = jacobi_eigenvalues(big);
        let ev = sorted_eigenvalues(&h);
        for (k, e) in ev.iter().enumerate() {
            // Each eigenvalue appears twice in the real embedding.
            assert!((e - oracle[2 * k]).abs() < 1e-10);
            assert!((e - oracle[2 * k + 1]).abs() < 1e-10);
        }
    }

    #[test]
    fn control_propagator_at_zero_is_identity() {
        let o = ops(5);
        let u = control_propagator(&params(2, 1, 0.3), &o, 0.0).unwrap();
        assert!((&u - &Operator::identity(6)).frobenius_norm() < 1e-13);
    }

    #[test]
    fn full_period_is_plus_minus_identity() {
        for n in [2i64, 3, 10] {
            let o = ops(n);
            for (nx, ny) in [(2, 1), (3, 1), (1, 2)] {
                let u = control_propagator(&params(nx, ny, 0.7), &o, 0.7).unwrap();
                let sign = if (n as i32 * (nx + ny)) % 2 == 0 { 1.0 } else { -1.0 };
                let target = Operator::identity(o.dim()).scale(sign);
                assert!((&u - &target).frobenius_norm() < 1e-11, "n={n} nx={nx} ny={ny}");
            }
        }
    }

    #[test]
    fn half_period_matches_direct_exponentials() {
        let o = ops(2);
        let tc = 1.0;
        let u = control_propagator(&params(2, 1, tc), &o, tc / 2.0).unwrap();
        let ry = o.jy.eigh().unwrap().propagator(PI);
        let rx = o.jx.eigh().unwrap().propagator(2.0 * PI);
        assert!((&u - &(&ry * &rx)).frobenius_norm() < 1e-12);
        let uu = &u * &u.adjoint();
        assert!((&uu - &Operator::identity(3)).frobenius_norm() < 1e-12);
    }

    #[test]
    fn control_hamiltonian_special_times() {
        let o = ops(4);
        let p = params(2, 1, 0.5);
        let w = p.omega();
        let h0 = control_hamiltonian(&p, &o, 0.0);
        let e0 = &o.jy.scale(w) + &o.jx.scale(2.0 * w);
        assert!((&h0 - &e0).frobenius_norm() < 1e-12);
        let hq = control_hamiltonian(&p, &o, p.t_c() / 4.0);
        let eq = &o.jy.scale(w) - &o.jz.scale(2.0 * w);
        assert!((&hq - &eq).frobenius_norm() < 1e-10);
        assert!(hq.is_hermitian());
    }

    #[test]
    fn control_hamiltonian_generates_propagator() {
        let o = ops(6);
        for (nx, ny) in [(2, 1), (3, 1), (-1, 2)] {
            let p = params(nx, ny, 0.8);
            let frame = ControlFrame::new(&o).unwrap();
            let h_step = 1e-6 * p.t_c();
            for t in [0.013, 0.31, 0.77] {
                let dudt = (&frame.propagator(&p, t + h_step) - &frame.propagator(&p, t - h_step))
                    .scale(1.0 / (2.0 * h_step));
                let lhs = dudt.scale_complex(Complex::new(0.0, 1.0));
                let h = control_hamiltonian(&p, &o, t);
                let rhs = &h * &frame.propagator(&p, t);
                let resid = (&lhs - &rhs).frobenius_norm();
                assert!(resid < 1e-5 * h.frobenius_norm(), "resid {resid:e}");
            }
        }
    }

    #[test]
    fn system_hamiltonian_relations() {
        let o = ops(2);
        let p = params(2, 1, 0.4);
        let w = p.omega();
        for t in [0.0, 0.1, 0.33] {
            let diff = &system_hamiltonian(&p, &o, t) - &control_hamiltonian(&p, &o, t);
            assert!((&diff - &build_oat(&o, 1.0)).frobenius_norm() < 1e-12);
            let shifted = system_hamiltonian(&p, &o, t + p.t_c());
            let here = system_hamiltonian(&p, &o, t);
            let worst = (&shifted - &here).matrix().iter().map(|z| z.norm()).fold(0.0, f64::max);
            assert!(worst < 1e-12 * w, "{worst:e}");
        }
        let h0 = system_hamiltonian(&p, &o, 0.0);
        let expected = &(&build_oat(&o, 1.0) + &o.jy.scale(w)) + &o.jx.scale(2.0 * w);
        assert!((&h0 - &expected).frobenius_norm() < 1e-12);
    }

    #[test]
    fn conjugated_jx_squared_closed_form() {
        let o = ops(3);
        let p = params(3, 1, 0.9);
        let jx2 = build_oat(&o, 1.0);
        assert!((&conjugated_jx_squared(&p, &o, 0.0) - &jx2).frobenius_norm() < 1e-13);
        // Node of sin(w n_y t).
        let node = conjugated_jx_squared(&p, &o, p.t_c() / 2.0);
        assert!((&node - &jx2).frobenius_norm() < 1e-12);

        let frame = ControlFrame::new(&o).unwrap();
        for t in [0.05, 0.2, 0.61] {
            let direct = frame.conjugate(&p, &jx2, t);
            assert!((&direct - &conjugated_jx_squared(&p, &o, t)).frobenius_norm() < 1e-10);
        }
    }

    #[test]
    fn averaged_forms() {
        let o = ops(10);
        let shift = 0.25 * 30.0;
        let (h, form) = averaged_hamiltonian(&params(3, 1, 1.0), &o).unwrap();
        assert_eq!(form.kind, AveragedKind::OatQuarter);
        assert!((form.constant_shift - shift).abs() < 1e-12);
        let expected = &build_oat(&o, 0.25) + &Operator::identity(11).scale(shift);
        assert!((&h - &expected).frobenius_norm() < 1e-8);

        for (nx, ny) in [(2, 1), (4, 2)] {
            let (h, form) = averaged_hamiltonian(&params(nx, ny, 0.37), &o).unwrap();
            assert_eq!(form.kind, AveragedKind::DoubleResonance);
            let expected = &build_dr(&o, 1.0) + &Operator::identity(11).scale(shift);
            assert!((&h - &expected).frobenius_norm() < 1e-8);
        }
    }

    #[test]
    fn averaged_forms_off_the_named_branches() {
        let o = ops(5);
        for (nx, ny, kind) in [
            (-2, 1, AveragedKind::MirroredDoubleResonance),
            (1, -1, AveragedKind::EqualWinding),
            (2, 2, AveragedKind::EqualWinding),
            (5, 3, AveragedKind::OatQuarter),
        ] {
            let p = ControlParams::diagnostic(0.7, nx, ny, 1.3).unwrap();
            let (h, form) = averaged_hamiltonian(&p, &o).unwrap();
            assert_eq!(form.kind, kind);
            let closed = form.operator(0.7, &o);
            assert!((&h - &closed).frobenius_norm() < 1e-8, "{nx},{ny}");
        }
    }

    #[test]
    fn dd_residuals() {
        let o = ops(8);
        for (nx, ny) in [(2, 1), (5, 3), (-3, 1)] {
            let r = dd_residual(&params(nx, ny, 0.5), &o).unwrap();
            assert!(r.iter().all(|x| *x < 1e-8), "{nx},{ny}: {r:?}");
        }
        let p = ControlParams::diagnostic(1.0, 1, 1, 0.5).unwrap();
        let r = dd_residual(&p, &o).unwrap();
        assert!((0..3).any(|k| r[k] > 0.1 * o.get(k).frobenius_norm()));
    }

    #[test]
    fn dd_condition_needs_distinct_magnitudes() {
        let o = ops(4);
        let p = ControlParams::new(1.0, 1, -1, 0.5).unwrap();
        assert!(!p.satisfies_first_order_dd());
        let r = dd_residual(&p, &o).unwrap();
        assert!(r[0] > 0.1 * o.jx.frobenius_norm());
    }
}
