//! Collective angular-momentum operators and dense linear-algebra primitives
//! on the symmetric (maximal-`J`) sector of `N` spins-1/2.
//!
//! Basis convention: index `i` of a state vector or operator row corresponds
//! to the Dicke state `|J, m>` with `m = i - J`, so index 0 is `|J, -J>`.

use std::ops::{Add, Mul, Sub};

use nalgebra::{ComplexField, DMatrix, DVector, SymmetricEigen};
use num_complex::Complex;
use num_rational::Ratio;

use crate::{Error, Real, Result};

/// Absolute entrywise tolerance used when checking `A == A^dagger`.
pub const HERMITIAN_TOL: f64 = 1e-12;

/// A collection of `N` spins restricted to total spin `J = N/2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SpinSystem {
    n_spins: u32,
}

impl SpinSystem {
    pub fn new(n_spins: i64) -> Result<Self> {
        if n_spins < 1 {
            return Err(Error::InvalidSystem(format!(
                "spin count must be positive, got {n_spins}"
            )));
        }
        let n_spins = u32::try_from(n_spins)
            .map_err(|_| Error::InvalidSystem(format!("spin count {n_spins} too large")))?;
        Ok(Self { n_spins })
    }

    pub fn n_spins(&self) -> u32 {
        self.n_spins
    }

    /// Hilbert-space dimension `N + 1`.
    pub fn dim(&self) -> usize {
        self.n_spins as usize + 1
    }

    /// Exact total spin `J = N/2`.
    pub fn total_spin(&self) -> Ratio<u32> {
        Ratio::new(self.n_spins, 2)
    }

    /// `J` as a floating-point value.
    pub fn j<T: Real>(&self) -> T {
        T::of(self.n_spins as f64 * 0.5)
    }

    /// Casimir eigenvalue `J(J + 1)`.
    pub fn casimir<T: Real>(&self) -> T {
        let n = self.n_spins as f64;
        T::of(n * (n + 2.0) / 4.0)
    }

    /// Magnetic quantum number of basis index `i`.
    pub fn m<T: Real>(&self, i: usize) -> T {
        T::of(i as f64 - self.n_spins as f64 * 0.5)
    }

    /// Recovers the system from a Hilbert-space dimension.
    pub fn from_dim(dim: usize) -> Result<Self> {
        Self::new(dim as i64 - 1)
    }
}

/// Dense complex square matrix acting on the Dicke basis.
#[derive(Clone, Debug, PartialEq)]
pub struct Operator<T: Real> {
    m: DMatrix<Complex<T>>,
}

impl<T: Real> Operator<T> {
    pub fn new(m: DMatrix<Complex<T>>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Shape {
                expected: m.nrows(),
                found: m.ncols(),
            });
        }
        Ok(Self { m })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            m: DMatrix::zeros(dim, dim),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            m: DMatrix::identity(dim, dim),
        }
    }

    pub fn from_fn(dim: usize, f: impl FnMut(usize, usize) -> Complex<T>) -> Self {
        Self {
            m: DMatrix::from_fn(dim, dim, f),
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<Complex<T>> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<Complex<T>> {
        self.m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Complex<T> {
        self.m[(i, j)]
    }

    pub fn adjoint(&self) -> Self {
        Self {
            m: self.m.adjoint(),
        }
    }

    /// `(A + A^dagger) / 2`, which is Hermitian to the last bit.
    pub fn hermitian_part(&self) -> Self {
        let half = T::of(0.5);
        let dim = self.dim();
        Self::from_fn(dim, |i, j| {
            if i <= j {
                (self.m[(i, j)] + self.m[(j, i)].conj()).scale(half)
            } else {
                (self.m[(j, i)] + self.m[(i, j)].conj()).scale(half).conj()
            }
        })
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            m: self.m.map(|z| z.scale(s)),
        }
    }

    pub fn scale_complex(&self, s: Complex<T>) -> Self {
        Self {
            m: self.m.map(|z| z * s),
        }
    }

    /// `self + s * other`.
    pub fn add_scaled(&self, s: T, other: &Self) -> Result<Self> {
        same_dim(self.dim(), other.dim())?;
        let mut m = self.m.clone();
        m.zip_apply(&other.m, |a, b| *a += b.scale(s));
        Ok(Self { m })
    }

    pub fn try_mul(&self, other: &Self) -> Result<Self> {
        same_dim(self.dim(), other.dim())?;
        Ok(Self {
            m: &self.m * &other.m,
        })
    }

    pub fn frobenius_norm(&self) -> T {
        self.m.iter().map(|z| z.norm_sqr()).fold(T::zero(), |a, b| a + b).sqrt()
    }

    pub fn trace(&self) -> Complex<T> {
        self.m.trace()
    }

    /// Largest entrywise `|A_ij - conj(A_ji)|`.
    pub fn hermitian_deviation(&self) -> T {
        let dim = self.dim();
        let mut worst = T::zero();
        for i in 0..dim {
            for j in i..dim {
                let d = (self.m[(i, j)] - self.m[(j, i)].conj()).modulus();
                if d > worst {
                    worst = d;
                }
            }
        }
        worst
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermitian_deviation().as_f64() <= HERMITIAN_TOL
    }

    pub fn ensure_hermitian(&self) -> Result<()> {
        let deviation = self.hermitian_deviation().as_f64();
        if deviation > HERMITIAN_TOL || deviation.is_nan() {
            return Err(Error::NotHermitian { deviation });
        }
        Ok(())
    }

    /// Half-width of the nonzero band: the largest `|i - j|` with `A_ij != 0`.
    pub fn bandwidth(&self) -> usize {
        let dim = self.dim();
        for k in (1..dim).rev() {
            let nonzero = (0..dim - k)
                .any(|i| is_nonzero(self.m[(i, i + k)]) || is_nonzero(self.m[(i + k, i)]));
            if nonzero {
                return k;
            }
        }
        0
    }

    pub fn apply(&self, psi: &PureState<T>) -> Result<PureState<T>> {
        same_dim(self.dim(), psi.dim())?;
        Ok(PureState {
            amps: &self.m * &psi.amps,
        })
    }

    /// `out = A x`, touching only entries within `bandwidth` of the diagonal.
    pub(crate) fn mul_vec_banded(
        &self,
        bandwidth: usize,
        x: &DVector<Complex<T>>,
        out: &mut DVector<Complex<T>>,
    ) {
        let dim = self.dim();
        for i in 0..dim {
            let lo = i.saturating_sub(bandwidth);
            let hi = (i + bandwidth).min(dim - 1);
            let mut acc = Complex::new(T::zero(), T::zero());
            for j in lo..=hi {
                acc += self.m[(i, j)] * x[j];
            }
            out[i] = acc;
        }
    }

    /// Eigendecomposition of a Hermitian operator.
    pub fn eigh(&self) -> Result<HermitianEigen<T>> {
        self.ensure_hermitian()?;
        let eig = SymmetricEigen::new(self.m.clone());
        Ok(HermitianEigen {
            values: eig.eigenvalues,
            vectors: eig.eigenvectors,
        })
    }
}

fn is_nonzero<T: Real>(z: Complex<T>) -> bool {
    z.re != T::zero() || z.im != T::zero()
}

fn same_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Shape { expected, found });
    }
    Ok(())
}

impl<T: Real> Add for &Operator<T> {
    type Output = Operator<T>;

    fn add(self, rhs: Self) -> Operator<T> {
        assert_eq!(self.dim(), rhs.dim(), "operator dimension mismatch");
        Operator {
            m: &self.m + &rhs.m,
        }
    }
}

impl<T: Real> Sub for &Operator<T> {
    type Output = Operator<T>;

    fn sub(self, rhs: Self) -> Operator<T> {
        assert_eq!(self.dim(), rhs.dim(), "operator dimension mismatch");
        Operator {
            m: &self.m - &rhs.m,
        }
    }
}

impl<T: Real> Mul for &Operator<T> {
    type Output = Operator<T>;

    fn mul(self, rhs: Self) -> Operator<T> {
        assert_eq!(self.dim(), rhs.dim(), "operator dimension mismatch");
        Operator {
            m: &self.m * &rhs.m,
        }
    }
}

/// Spectral decomposition `H = V diag(values) V^dagger`.
#[derive(Clone, Debug)]
pub struct HermitianEigen<T: Real> {
    pub values: DVector<T>,
    pub vectors: DMatrix<Complex<T>>,
}

impl<T: Real> HermitianEigen<T> {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    fn phases(&self, t: T) -> DVector<Complex<T>> {
        self.values.map(|lambda| {
            let (s, c) = (lambda * t).sin_cos();
            Complex::new(c, -s)
        })
    }

    /// Coordinates of `psi` in the eigenbasis, `V^dagger psi`.
    pub fn to_eigenbasis(&self, psi: &PureState<T>) -> Result<DVector<Complex<T>>> {
        same_dim(self.dim(), psi.dim())?;
        Ok(self.vectors.ad_mul(&psi.amps))
    }

    /// `V diag(e^{-i lambda t}) coeffs`.
    pub fn from_eigenbasis(&self, coeffs: &DVector<Complex<T>>, t: T) -> PureState<T> {
        let phased = coeffs.component_mul(&self.phases(t));
        PureState {
            amps: &self.vectors * phased,
        }
    }

    /// `e^{-iHt} psi`.
    pub fn evolve(&self, psi: &PureState<T>, t: T) -> Result<PureState<T>> {
        let coeffs = self.to_eigenbasis(psi)?;
        Ok(self.from_eigenbasis(&coeffs, t))
    }

    /// The full propagator `e^{-iHt}`.
    pub fn propagator(&self, t: T) -> Operator<T> {
        let phases = self.phases(t);
        let mut scaled = self.vectors.clone();
        for (mut col, p) in scaled.column_iter_mut().zip(phases.iter()) {
            col *= *p;
        }
        Operator {
            m: scaled * self.vectors.adjoint(),
        }
    }
}

/// Unit-norm complex amplitude vector over the Dicke basis.
#[derive(Clone, Debug, PartialEq)]
pub struct PureState<T: Real> {
    amps: DVector<Complex<T>>,
}

impl<T: Real> PureState<T> {
    /// Wraps raw amplitudes; no normalization is performed.
    pub fn from_amplitudes(amps: DVector<Complex<T>>) -> Self {
        Self { amps }
    }

    pub fn normalized(amps: DVector<Complex<T>>) -> Result<Self> {
        let norm = amps.norm();
        if norm <= T::zero() || !norm.is_finite() {
            return Err(Error::InvalidParams("cannot normalize a zero state".into()));
        }
        Ok(Self {
            amps: amps.unscale(norm),
        })
    }

    pub fn basis(dim: usize, index: usize) -> Result<Self> {
        if index >= dim {
            return Err(Error::OutOfRange { index, len: dim });
        }
        let mut amps = DVector::zeros(dim);
        amps[index] = Complex::new(T::one(), T::zero());
        Ok(Self { amps })
    }

    /// `|J, -J>`: every spin pointing down.
    pub fn spin_down(sys: &SpinSystem) -> Self {
        Self::basis(sys.dim(), 0).expect("index 0 is always valid")
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn amplitudes(&self) -> &DVector<Complex<T>> {
        &self.amps
    }

    pub(crate) fn amplitudes_mut(&mut self) -> &mut DVector<Complex<T>> {
        &mut self.amps
    }

    pub fn norm(&self) -> T {
        self.amps.norm()
    }

    /// `<self|other>`.
    pub fn inner(&self, other: &Self) -> Result<Complex<T>> {
        same_dim(self.dim(), other.dim())?;
        Ok(self.amps.dotc(&other.amps))
    }

    /// `|<self|other>|^2`.
    pub fn fidelity(&self, other: &Self) -> Result<T> {
        Ok(self.inner(other)?.norm_sqr())
    }
}

/// `J_x`, `J_y`, `J_z` for one spin system.
#[derive(Clone, Debug)]
pub struct CollectiveOperators<T: Real> {
    pub sys: SpinSystem,
    pub jx: Operator<T>,
    pub jy: Operator<T>,
    pub jz: Operator<T>,
}

impl<T: Real> CollectiveOperators<T> {
    pub fn get(&self, axis: usize) -> &Operator<T> {
        match axis {
            0 => &self.jx,
            1 => &self.jy,
            2 => &self.jz,
            _ => panic!("axis index {axis} out of range"),
        }
    }

    pub fn dim(&self) -> usize {
        self.sys.dim()
    }
}

/// Raising-operator matrix element `<m+1|J+|m>` for basis index `i`.
///
/// `J(J+1) - m(m+1) = (J - m)(J + m + 1) = (N - i)(i + 1)`, computed in
/// integers before the square root.
pub fn ladder_coefficient<T: Real>(sys: &SpinSystem, i: usize) -> T {
    let n = sys.n_spins() as u64;
    let i = i as u64;
    debug_assert!(i < n);
    T::of(((n - i) * (i + 1)) as f64).sqrt()
}

pub fn build_collective_operators<T: Real>(sys: &SpinSystem) -> CollectiveOperators<T> {
    let dim = sys.dim();
    let zero = Complex::new(T::zero(), T::zero());
    let half = T::of(0.5);
    let mut jx = DMatrix::from_element(dim, dim, zero);
    let mut jy = DMatrix::from_element(dim, dim, zero);
    let mut jz = DMatrix::from_element(dim, dim, zero);
    for i in 0..dim {
        jz[(i, i)] = Complex::new(sys.m(i), T::zero());
    }
    for i in 0..dim - 1 {
        // J+ maps index i to i + 1.
        let c = ladder_coefficient::<T>(sys, i) * half;
        jx[(i + 1, i)] = Complex::new(c, T::zero());
        jx[(i, i + 1)] = Complex::new(c, T::zero());
        // Jy = (J+ - J-) / 2i
        jy[(i + 1, i)] = Complex::new(T::zero(), -c);
        jy[(i, i + 1)] = Complex::new(T::zero(), c);
    }
    CollectiveOperators {
        sys: *sys,
        jx: Operator { m: jx },
        jy: Operator { m: jy },
        jz: Operator { m: jz },
    }
}

/// `AB - BA`.
pub fn commutator<T: Real>(a: &Operator<T>, b: &Operator<T>) -> Result<Operator<T>> {
    same_dim(a.dim(), b.dim())?;
    Ok(&(a * b) - &(b * a))
}

/// `AB + BA`, Hermitian-symmetrized when `A` and `B` are.
pub fn anticommutator<T: Real>(a: &Operator<T>, b: &Operator<T>) -> Result<Operator<T>> {
    same_dim(a.dim(), b.dim())?;
    let ab = a * b;
    Ok(&ab + &ab.adjoint())
}

/// `e^{-iHt} psi` via eigendecomposition of `H`.
pub fn hermitian_exponential_action<T: Real>(
    h: &Operator<T>,
    t: T,
    psi: &PureState<T>,
) -> Result<PureState<T>> {
    same_dim(h.dim(), psi.dim())?;
    h.eigh()?.evolve(psi, t)
}

/// `<psi|A|psi>`.
pub fn expectation<T: Real>(a: &Operator<T>, psi: &PureState<T>) -> Result<Complex<T>> {
    same_dim(a.dim(), psi.dim())?;
    Ok(psi.amps.dotc(&(&a.m * &psi.amps)))
}
