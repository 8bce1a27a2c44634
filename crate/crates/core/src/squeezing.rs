//! Spin-squeezing parameters from collective-spin moments.
//!
//! `xi_S^2 = 4 min (Delta J_perp)^2 / N`, minimized over directions
//! perpendicular to the mean spin, and `xi_R^2 = xi_S^2 (J / |<J>|)^2`.

use nalgebra::{Matrix3, Vector3};

use crate::dynamics::{SpinMoments, TrajectoryMoments};
use crate::{Error, Real, Result};

/// Mean-spin lengths below `DEGENERATE_MEAN_FRACTION * J` have no usable
/// direction.
pub const DEGENERATE_MEAN_FRACTION: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SqueezingSample<T: Real> {
    pub t: T,
    pub xi_s_sq: T,
    pub xi_r_sq: Option<T>,
    pub mean_spin_len: T,
}

/// Orthonormal pair spanning the plane perpendicular to the unit vector `n0`.
///
/// Gram–Schmidt starts from the Cartesian axis along which `n0` is smallest.
pub fn perpendicular_basis<T: Real>(n0: &Vector3<T>) -> (Vector3<T>, Vector3<T>) {
    let abs = n0.map(|x| x.abs());
    let pivot = if abs.x <= abs.y && abs.x <= abs.z {
        0
    } else if abs.y <= abs.z {
        1
    } else {
        2
    };
    let mut e = Vector3::zeros();
    e[pivot] = T::one();
    let n1 = (e - n0 * n0.dot(&e)).normalize();
    let n2 = n0.cross(&n1);
    (n1, n2)
}

fn checked_direction<T: Real>(m: &SpinMoments<T>, n_spins: u32) -> Result<(T, Vector3<T>)> {
    if n_spins == 0 {
        return Err(Error::InvalidSystem("spin count must be positive".into()));
    }
    let j = T::of(n_spins as f64 * 0.5);
    let len = m.mean_spin_length();
    let threshold = T::of(DEGENERATE_MEAN_FRACTION) * j;
    if !(len >= threshold) {
        return Err(Error::DegenerateDirection {
            mean_len: len.as_f64(),
            threshold: threshold.as_f64(),
        });
    }
    Ok((len, m.mean / len))
}

/// Smaller eigenvalue of the covariance restricted to the plane
/// perpendicular to `n0`.
fn perpendicular_min_variance<T: Real>(second: &Matrix3<T>, n0: &Vector3<T>) -> T {
    let (n1, n2) = perpendicular_basis(n0);
    let g11 = n1.dot(&(second * n1));
    let g22 = n2.dot(&(second * n2));
    let g12 = n1.dot(&(second * n2));
    let half = T::of(0.5);
    let diff = g11 - g22;
    half * (g11 + g22 - (diff * diff + T::of(4.0) * g12 * g12).sqrt())
}

/// Kitagawa–Ueda squeezing parameter.
pub fn xi_s_squared<T: Real>(m: &SpinMoments<T>, n_spins: u32) -> Result<T> {
    let (_, n0) = checked_direction(m, n_spins)?;
    Ok(T::of(4.0) * perpendicular_min_variance(&m.second, &n0) / T::of(n_spins as f64))
}

/// Wineland (Ramsey) squeezing parameter.
pub fn xi_r_squared<T: Real>(m: &SpinMoments<T>, n_spins: u32) -> Result<T> {
    let (len, _) = checked_direction(m, n_spins)?;
    let j = T::of(n_spins as f64 * 0.5);
    let ratio = j / len;
    Ok(xi_s_squared(m, n_spins)? * ratio * ratio)
}

pub fn squeezing_sample<T: Real>(t: T, m: &SpinMoments<T>, n_spins: u32) -> Result<SqueezingSample<T>> {
    let xi_s_sq = xi_s_squared(m, n_spins)?;
    Ok(SqueezingSample {
        t,
        xi_s_sq,
        xi_r_sq: xi_r_squared(m, n_spins).ok(),
        mean_spin_len: m.mean_spin_length(),
    })
}

pub fn squeezing_series<T: Real>(
    traj: &TrajectoryMoments<T>,
    n_spins: u32,
) -> Result<Vec<SqueezingSample<T>>> {
    traj.times
        .iter()
        .zip(&traj.moments)
        .map(|(t, m)| squeezing_sample(*t, m, n_spins))
        .collect()
}

/// Location of a squeezing minimum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinSqueezing<T: Real> {
    pub t_min: T,
    pub xi_min: T,
    /// Grid index of the smallest sample.
    pub index: usize,
    /// The smallest sample sits at either end of the series; no parabolic
    /// refinement was applied and the true minimum may lie outside.
    pub at_boundary: bool,
}

/// Grid minimum of `values`, refined by the parabola through the bracketing
/// triple of samples.
pub fn refine_minimum<T: Real>(times: &[T], values: &[T]) -> Result<MinSqueezing<T>> {
    if times.len() != values.len() {
        return Err(Error::Shape {
            expected: times.len(),
            found: values.len(),
        });
    }
    if times.len() < 3 {
        return Err(Error::InvalidParams(format!(
            "need at least 3 samples to locate a minimum, got {}",
            times.len()
        )));
    }
    let mut index = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[index] {
            index = i;
        }
    }
    if index == 0 || index == values.len() - 1 {
        return Ok(MinSqueezing {
            t_min: times[index],
            xi_min: values[index],
            index,
            at_boundary: true,
        });
    }
    let (t0, t1, t2) = (times[index - 1], times[index], times[index + 1]);
    let (y0, y1, y2) = (values[index - 1], values[index], values[index + 1]);
    // Vertex of the interpolating parabola (nonuniform spacing allowed).
    let d01 = (y1 - y0) / (t1 - t0);
    let d12 = (y2 - y1) / (t2 - t1);
    let curvature = (d12 - d01) / (t2 - t0);
    let (t_min, xi_min) = if curvature > T::zero() {
        // p(t) = y0 + d01 (t - t0) + c (t - t0)(t - t1)
        let tv = (t0 + t1) * T::of(0.5) - d01 / (T::of(2.0) * curvature);
        let yv = y0 + d01 * (tv - t0) + curvature * (tv - t0) * (tv - t1);
        (tv, yv)
    } else {
        (t1, y1)
    };
    Ok(MinSqueezing {
        t_min,
        xi_min,
        index,
        at_boundary: false,
    })
}

/// Optimal squeezing time and value along a trajectory.
pub fn find_min_squeezing<T: Real>(traj: &TrajectoryMoments<T>, n_spins: u32) -> Result<MinSqueezing<T>> {
    let values = traj
        .moments
        .iter()
        .map(|m| xi_s_squared(m, n_spins))
        .collect::<Result<Vec<_>>>()?;
    refine_minimum(&traj.times, &values)
}
